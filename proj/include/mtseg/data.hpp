#ifndef MTSEG_DATA_HPP
#define MTSEG_DATA_HPP

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mtseg/rng.hpp"
#include "mtseg/tensor.hpp"

namespace mtseg {

using ImageArray = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MaskArray = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// One short-axis slice: image, binary myocardium mask, physical pixel
/// spacing, position within the study, and the mask-derived area in mm^2.
struct SliceSample {
  ImageArray image;
  MaskArray mask;
  double spacing_x = 1.0;  // mm per pixel along columns
  double spacing_y = 1.0;  // mm per pixel along rows
  std::string patient_id;
  int phase_index = 0;
  int slice_index = 0;  // apex (0) to base
  double area_mm2 = 0.0;

  void validate() const;
};

/// Slices of one (patient, phase) stack ordered apex to base.
struct VolumeSeries {
  std::string patient_id;
  int phase_index = 0;
  std::vector<const SliceSample*> slices;
  double slice_thickness_mm = 1.0;
};

struct Dataset {
  std::vector<SliceSample> slices;
  double slice_thickness_mm = 1.0;

  std::vector<std::string> patient_ids() const;
};

double ground_truth_area(const MaskArray& mask, double spacing_x, double spacing_y);

/// Bilinear (image) / nearest-neighbor (mask) resampling to an isotropic
/// target spacing; output extent = round(extent * spacing / target).
SliceSample resample_to_spacing(const SliceSample& sample, double target_mm);

/// Crop or zero-pad to size x size around the center; odd margins put the
/// extra pixel on the high side.
SliceSample center_crop_or_pad(const SliceSample& sample, int size);

/// Rotation about the pixel-center grid center followed by translation;
/// image bilinear, mask nearest, zero fill outside, area recomputed.
SliceSample transform_sample(const SliceSample& sample, double angle_deg, double tx_px, double ty_px);

/// Two augmented copies: angle ~ U(0,360) deg, translation ~ U(-S/2, S/2)
/// pixels per axis.
std::array<SliceSample, 2> augment(const SliceSample& sample, Rng& rng);

/// Generator configuration for the synthetic annulus dataset. Radii are in
/// pixels; intensities are arbitrary units.
struct SyntheticRingSpec {
  int image_size = 64;
  double spacing_mm = 1.0;
  double slice_thickness_mm = 8.0;
  double center_jitter_px = 2.0;
  double inner_radius_min_px = 6.0;
  double inner_radius_max_px = 9.0;
  double outer_radius_min_px = 12.0;
  double outer_radius_max_px = 16.0;
  double ring_intensity = 1.0;
  double pool_intensity = 0.6;
  double background_intensity = 0.2;
  double texture_amp = 0.15;
  double noise_std = 0.08;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Noisy bright annulus on a textured background with its exact binary mask.
/// Radii shrink toward the apex (slice 0) and contract smoothly over the
/// phase cycle. Deterministic per seed.
Dataset generate_synthetic_dataset(const SyntheticRingSpec& spec, int n_patients, int n_phases, int n_slices);

struct FoldSplit {
  int fold_id = 0;
  std::vector<std::string> train;
  std::vector<std::string> test;
};

/// Patient-level five-fold partition; every patient is tested exactly once.
std::array<FoldSplit, 5> split_folds(std::vector<std::string> patient_ids, std::uint64_t seed);

/// Groups a dataset into (patient, phase) stacks, slices ordered by
/// slice_index; validates uniform shapes and strictly increasing indices.
std::vector<VolumeSeries> group_volumes(const Dataset& dataset);

// On-disk layout: manifest.json in the dataset directory plus one TNSR file
// pair (image, mask) per slice.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace mtseg

#endif  // MTSEG_DATA_HPP
