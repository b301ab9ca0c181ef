#ifndef MTSEG_METRICS_HPP
#define MTSEG_METRICS_HPP

#include <array>
#include <cstdint>
#include <vector>

#include "mtseg/data.hpp"
#include "mtseg/tensor.hpp"

namespace mtseg {

/// Binary voxel volume [D,H,W] with anisotropic physical spacing in mm.
struct Mask3D {
  Index d = 0, h = 0, w = 0;
  double spacing_z = 1.0, spacing_y = 1.0, spacing_x = 1.0;
  std::vector<std::uint8_t> vox;

  Mask3D() = default;
  Mask3D(Index d_, Index h_, Index w_, double sz, double sy, double sx);

  Index size() const { return d * h * w; }
  Index idx(Index k, Index i, Index j) const { return (k * h + i) * w + j; }
  std::uint8_t at(Index k, Index i, Index j) const { return vox[static_cast<std::size_t>(idx(k, i, j))]; }
  std::uint8_t& at(Index k, Index i, Index j) { return vox[static_cast<std::size_t>(idx(k, i, j))]; }
  Index count() const;
  bool same_grid(const Mask3D& other) const;
};

struct SegScores {
  double dice = 0.0;
  double jaccard = 0.0;
  double msd_mm = 0.0;
  double hd_mm = 0.0;
};

/// Stacks per-slice masks (ordered apex to base) into a volume.
Mask3D stack_slices(const std::vector<MaskArray>& slices, double slice_thickness_mm, double spacing_y,
                    double spacing_x);

/// Keeps only the largest 26-connected foreground component; ties go to the
/// component first reached in scan order. Empty input stays empty.
Mask3D largest_connected_component(const Mask3D& vol);

// Overlap metrics; the both-empty convention is 1.0, empty-vs-nonempty 0.0.
double dice(const Mask3D& a, const Mask3D& b);
double jaccard(const Mask3D& a, const Mask3D& b);

/// Foreground voxels with at least one 6-neighbor that is background or
/// outside the array, as physical (z,y,x) mm coordinates of voxel centers.
std::vector<std::array<double, 3>> surface_voxels(const Mask3D& vol);

// Symmetric surface distances in mm; both masks must be non-empty.
double mean_surface_distance(const Mask3D& a, const Mask3D& b);
double hausdorff(const Mask3D& a, const Mask3D& b);

/// Post-processes the prediction with largest_connected_component, then
/// computes all four scores against the gold volume.
SegScores evaluate_volume(const Mask3D& pred, const Mask3D& gold);

}  // namespace mtseg

#endif  // MTSEG_METRICS_HPP
