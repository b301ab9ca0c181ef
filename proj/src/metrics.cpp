#include "mtseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mtseg {

Mask3D::Mask3D(Index d_, Index h_, Index w_, double sz, double sy, double sx)
    : d(d_), h(h_), w(w_), spacing_z(sz), spacing_y(sy), spacing_x(sx),
      vox(static_cast<std::size_t>(d_ * h_ * w_), 0) {
  if (d < 0 || h < 0 || w < 0) throw std::invalid_argument("Mask3D: negative extent");
  if (sz <= 0 || sy <= 0 || sx <= 0) throw std::invalid_argument("Mask3D: spacing must be positive");
}

Index Mask3D::count() const {
  Index n = 0;
  for (std::uint8_t v : vox) n += (v != 0);
  return n;
}

bool Mask3D::same_grid(const Mask3D& o) const {
  return d == o.d && h == o.h && w == o.w && spacing_z == o.spacing_z && spacing_y == o.spacing_y &&
         spacing_x == o.spacing_x;
}

Mask3D stack_slices(const std::vector<MaskArray>& slices, double slice_thickness_mm, double spacing_y,
                    double spacing_x) {
  if (slices.empty()) throw std::invalid_argument("stack_slices: empty slice list");
  const Index h = slices[0].rows(), w = slices[0].cols();
  for (std::size_t k = 1; k < slices.size(); ++k)
    if (slices[k].rows() != h || slices[k].cols() != w)
      throw std::invalid_argument("stack_slices: slice " + std::to_string(k) + " shape " +
                                  std::to_string(slices[k].rows()) + "x" + std::to_string(slices[k].cols()) +
                                  " differs from " + std::to_string(h) + "x" + std::to_string(w));
  Mask3D vol(static_cast<Index>(slices.size()), h, w, slice_thickness_mm, spacing_y, spacing_x);
  for (std::size_t k = 0; k < slices.size(); ++k)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) {
        const std::uint8_t v = slices[k](i, j);
        if (v != 0 && v != 1) throw std::invalid_argument("stack_slices: non-binary voxel");
        vol.at(static_cast<Index>(k), i, j) = v;
      }
  return vol;
}

Mask3D largest_connected_component(const Mask3D& vol) {
  if (vol.size() == 0 || vol.count() == 0) return vol;

  std::vector<std::int32_t> label(static_cast<std::size_t>(vol.size()), 0);
  std::vector<Index> component_size;
  std::vector<Index> stack;
  std::int32_t next = 0;

  for (Index start = 0; start < vol.size(); ++start) {
    if (vol.vox[static_cast<std::size_t>(start)] == 0 || label[static_cast<std::size_t>(start)] != 0) continue;
    ++next;
    Index size = 0;
    stack.clear();
    stack.push_back(start);
    label[static_cast<std::size_t>(start)] = next;
    while (!stack.empty()) {
      const Index cur = stack.back();
      stack.pop_back();
      ++size;
      const Index k = cur / (vol.h * vol.w);
      const Index i = (cur / vol.w) % vol.h;
      const Index j = cur % vol.w;
      for (Index dk = -1; dk <= 1; ++dk)
        for (Index di = -1; di <= 1; ++di)
          for (Index dj = -1; dj <= 1; ++dj) {
            if (dk == 0 && di == 0 && dj == 0) continue;
            const Index nk = k + dk, ni = i + di, nj = j + dj;
            if (nk < 0 || nk >= vol.d || ni < 0 || ni >= vol.h || nj < 0 || nj >= vol.w) continue;
            const Index n = vol.idx(nk, ni, nj);
            if (vol.vox[static_cast<std::size_t>(n)] == 0 || label[static_cast<std::size_t>(n)] != 0) continue;
            label[static_cast<std::size_t>(n)] = next;
            stack.push_back(n);
          }
    }
    component_size.push_back(size);
  }

  // first label wins ties: strict > when scanning in label order
  std::int32_t best = 1;
  for (std::int32_t c = 2; c <= next; ++c)
    if (component_size[static_cast<std::size_t>(c - 1)] > component_size[static_cast<std::size_t>(best - 1)])
      best = c;

  Mask3D out = vol;
  for (Index v = 0; v < vol.size(); ++v)
    out.vox[static_cast<std::size_t>(v)] = (label[static_cast<std::size_t>(v)] == best) ? 1 : 0;
  return out;
}

namespace {

void require_same_grid(const Mask3D& a, const Mask3D& b, const char* op) {
  if (!a.same_grid(b))
    throw std::invalid_argument(std::string(op) + ": volumes disagree in shape or spacing (" + std::to_string(a.d) +
                                "x" + std::to_string(a.h) + "x" + std::to_string(a.w) + " vs " + std::to_string(b.d) +
                                "x" + std::to_string(b.h) + "x" + std::to_string(b.w) + ")");
}

struct OverlapCounts {
  Index na = 0, nb = 0, both = 0;
};

OverlapCounts overlap(const Mask3D& a, const Mask3D& b) {
  OverlapCounts c;
  for (Index i = 0; i < a.size(); ++i) {
    const bool va = a.vox[static_cast<std::size_t>(i)] != 0;
    const bool vb = b.vox[static_cast<std::size_t>(i)] != 0;
    c.na += va;
    c.nb += vb;
    c.both += (va && vb);
  }
  return c;
}

// Uniform grid over a point set for nearest-neighbor queries; cell edge is
// the largest spacing so the ring lower bound stays valid.
class PointGrid {
 public:
  explicit PointGrid(const std::vector<std::array<double, 3>>& points, double cell) : cell_(cell), pts_(points) {
    for (int a = 0; a < 3; ++a) {
      lo_[a] = std::numeric_limits<double>::infinity();
      hi_[a] = -std::numeric_limits<double>::infinity();
    }
    for (const auto& p : pts_)
      for (int a = 0; a < 3; ++a) {
        lo_[a] = std::min(lo_[a], p[a]);
        hi_[a] = std::max(hi_[a], p[a]);
      }
    for (int a = 0; a < 3; ++a) n_[a] = std::max<Index>(1, static_cast<Index>((hi_[a] - lo_[a]) / cell_) + 1);
    cells_.resize(static_cast<std::size_t>(n_[0] * n_[1] * n_[2]));
    for (std::size_t i = 0; i < pts_.size(); ++i) cells_[cell_of(pts_[i])].push_back(i);
  }

  double nearest_distance(const std::array<double, 3>& q) const {
    std::array<Index, 3> c{};
    for (int a = 0; a < 3; ++a)
      c[static_cast<std::size_t>(a)] =
          std::clamp<Index>(static_cast<Index>((q[static_cast<std::size_t>(a)] - lo_[a]) / cell_), 0, n_[a] - 1);
    double best2 = std::numeric_limits<double>::infinity();
    const Index max_ring = std::max({n_[0], n_[1], n_[2]});
    for (Index ring = 0; ring < max_ring; ++ring) {
      // all cells at Chebyshev distance `ring`; any point there is at least
      // (ring-1)*cell away, so stop once the best hit beats that bound
      if (best2 < std::numeric_limits<double>::infinity() && ring >= 2) {
        const double bound = (static_cast<double>(ring) - 1.0) * cell_;
        if (bound * bound > best2) break;
      }
      bool any_cell = false;
      for (Index dk = -ring; dk <= ring; ++dk)
        for (Index di = -ring; di <= ring; ++di)
          for (Index dj = -ring; dj <= ring; ++dj) {
            if (std::max({std::llabs(dk), std::llabs(di), std::llabs(dj)}) != ring) continue;
            const Index k = c[0] + dk, i = c[1] + di, j = c[2] + dj;
            if (k < 0 || k >= n_[0] || i < 0 || i >= n_[1] || j < 0 || j >= n_[2]) continue;
            any_cell = true;
            for (std::size_t pi : cells_[static_cast<std::size_t>((k * n_[1] + i) * n_[2] + j)]) {
              const auto& p = pts_[pi];
              const double dz = p[0] - q[0], dy = p[1] - q[1], dx = p[2] - q[2];
              best2 = std::min(best2, dz * dz + dy * dy + dx * dx);
            }
          }
      if (!any_cell && best2 < std::numeric_limits<double>::infinity()) break;
    }
    return std::sqrt(best2);
  }

 private:
  std::size_t cell_of(const std::array<double, 3>& p) const {
    std::array<Index, 3> c{};
    for (int a = 0; a < 3; ++a)
      c[static_cast<std::size_t>(a)] =
          std::clamp<Index>(static_cast<Index>((p[static_cast<std::size_t>(a)] - lo_[a]) / cell_), 0, n_[a] - 1);
    return static_cast<std::size_t>((c[0] * n_[1] + c[1]) * n_[2] + c[2]);
  }

  double cell_;
  double lo_[3], hi_[3];
  Index n_[3];
  std::vector<std::array<double, 3>> pts_;
  std::vector<std::vector<std::size_t>> cells_;
};

struct DirectedStats {
  double sum = 0.0;
  double max = 0.0;
};

DirectedStats directed_distances(const std::vector<std::array<double, 3>>& from, const PointGrid& to) {
  DirectedStats s;
  for (const auto& p : from) {
    const double dist = to.nearest_distance(p);
    s.sum += dist;
    s.max = std::max(s.max, dist);
  }
  return s;
}

struct SurfacePair {
  std::vector<std::array<double, 3>> sa, sb;
  PointGrid ga, gb;
};

}  // namespace

double dice(const Mask3D& a, const Mask3D& b) {
  require_same_grid(a, b, "dice");
  const OverlapCounts c = overlap(a, b);
  if (c.na + c.nb == 0) return 1.0;
  return 2.0 * static_cast<double>(c.both) / static_cast<double>(c.na + c.nb);
}

double jaccard(const Mask3D& a, const Mask3D& b) {
  require_same_grid(a, b, "jaccard");
  const OverlapCounts c = overlap(a, b);
  const Index uni = c.na + c.nb - c.both;
  if (uni == 0) return 1.0;
  return static_cast<double>(c.both) / static_cast<double>(uni);
}

std::vector<std::array<double, 3>> surface_voxels(const Mask3D& vol) {
  std::vector<std::array<double, 3>> pts;
  static constexpr Index kNeighbors[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
  for (Index k = 0; k < vol.d; ++k)
    for (Index i = 0; i < vol.h; ++i)
      for (Index j = 0; j < vol.w; ++j) {
        if (vol.at(k, i, j) == 0) continue;
        bool boundary = false;
        for (const auto& n : kNeighbors) {
          const Index nk = k + n[0], ni = i + n[1], nj = j + n[2];
          if (nk < 0 || nk >= vol.d || ni < 0 || ni >= vol.h || nj < 0 || nj >= vol.w || vol.at(nk, ni, nj) == 0) {
            boundary = true;
            break;
          }
        }
        if (boundary)
          pts.push_back({static_cast<double>(k) * vol.spacing_z, static_cast<double>(i) * vol.spacing_y,
                         static_cast<double>(j) * vol.spacing_x});
      }
  return pts;
}

namespace {

SurfacePair make_surfaces(const Mask3D& a, const Mask3D& b, const char* op) {
  require_same_grid(a, b, op);
  auto sa = surface_voxels(a);
  auto sb = surface_voxels(b);
  if (sa.empty() || sb.empty()) throw std::invalid_argument(std::string(op) + ": no surface (empty mask)");
  const double cell = std::max({a.spacing_z, a.spacing_y, a.spacing_x});
  PointGrid ga(sa, cell), gb(sb, cell);
  return {std::move(sa), std::move(sb), std::move(ga), std::move(gb)};
}

}  // namespace

double mean_surface_distance(const Mask3D& a, const Mask3D& b) {
  SurfacePair s = make_surfaces(a, b, "mean_surface_distance");
  const DirectedStats ab = directed_distances(s.sa, s.gb);
  const DirectedStats ba = directed_distances(s.sb, s.ga);
  return 0.5 * (ab.sum / static_cast<double>(s.sa.size()) + ba.sum / static_cast<double>(s.sb.size()));
}

double hausdorff(const Mask3D& a, const Mask3D& b) {
  SurfacePair s = make_surfaces(a, b, "hausdorff");
  const DirectedStats ab = directed_distances(s.sa, s.gb);
  const DirectedStats ba = directed_distances(s.sb, s.ga);
  return std::max(ab.max, ba.max);
}

SegScores evaluate_volume(const Mask3D& pred, const Mask3D& gold) {
  require_same_grid(pred, gold, "evaluate_volume");
  const Mask3D cleaned = largest_connected_component(pred);
  SegScores s;
  s.dice = dice(cleaned, gold);
  s.jaccard = jaccard(cleaned, gold);
  s.msd_mm = mean_surface_distance(cleaned, gold);
  s.hd_mm = hausdorff(cleaned, gold);
  return s;
}

}  // namespace mtseg
