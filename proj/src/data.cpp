#include "mtseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

namespace mtseg {

namespace {

constexpr double kPi = 3.14159265358979323846;

Index round_half_up(double x) { return static_cast<Index>(std::floor(x + 0.5)); }

double bilinear_at(const ImageArray& img, double y, double x) {
  const Index h = img.rows(), w = img.cols();
  const double yc = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const double xc = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const Index y0 = static_cast<Index>(std::floor(yc));
  const Index x0 = static_cast<Index>(std::floor(xc));
  const Index y1 = std::min(y0 + 1, h - 1);
  const Index x1 = std::min(x0 + 1, w - 1);
  const double fy = yc - static_cast<double>(y0);
  const double fx = xc - static_cast<double>(x0);
  return img(y0, x0) * (1 - fy) * (1 - fx) + img(y0, x1) * (1 - fy) * fx + img(y1, x0) * fy * (1 - fx) +
         img(y1, x1) * fy * fx;
}

std::uint8_t nearest_at(const MaskArray& mask, double y, double x) {
  const Index h = mask.rows(), w = mask.cols();
  const Index yi = std::clamp<Index>(round_half_up(y), 0, h - 1);
  const Index xi = std::clamp<Index>(round_half_up(x), 0, w - 1);
  return mask(yi, xi);
}

}  // namespace

void SliceSample::validate() const {
  if (image.rows() != mask.rows() || image.cols() != mask.cols())
    throw std::invalid_argument("SliceSample: image " + std::to_string(image.rows()) + "x" +
                                std::to_string(image.cols()) + " and mask " + std::to_string(mask.rows()) + "x" +
                                std::to_string(mask.cols()) + " differ");
  if (spacing_x <= 0 || spacing_y <= 0) throw std::invalid_argument("SliceSample: spacing must be positive");
  for (Index i = 0; i < mask.rows(); ++i)
    for (Index j = 0; j < mask.cols(); ++j)
      if (mask(i, j) != 0 && mask(i, j) != 1) throw std::invalid_argument("SliceSample: mask is not binary");
  const double recomputed = ground_truth_area(mask, spacing_x, spacing_y);
  if (std::fabs(recomputed - area_mm2) > 1e-9)
    throw std::invalid_argument("SliceSample: stored area " + std::to_string(area_mm2) +
                                " mm^2 does not match mask-derived " + std::to_string(recomputed));
}

std::vector<std::string> Dataset::patient_ids() const {
  std::vector<std::string> ids;
  for (const auto& s : slices)
    if (std::find(ids.begin(), ids.end(), s.patient_id) == ids.end()) ids.push_back(s.patient_id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

double ground_truth_area(const MaskArray& mask, double spacing_x, double spacing_y) {
  Index count = 0;
  for (Index i = 0; i < mask.rows(); ++i)
    for (Index j = 0; j < mask.cols(); ++j) count += (mask(i, j) == 1);
  return static_cast<double>(count) * spacing_x * spacing_y;
}

SliceSample resample_to_spacing(const SliceSample& sample, double target_mm) {
  if (target_mm <= 0) throw std::invalid_argument("resample_to_spacing: target spacing must be positive");
  if (sample.spacing_x == target_mm && sample.spacing_y == target_mm) return sample;

  const Index h_out = round_half_up(static_cast<double>(sample.image.rows()) * sample.spacing_y / target_mm);
  const Index w_out = round_half_up(static_cast<double>(sample.image.cols()) * sample.spacing_x / target_mm);
  if (h_out < 1 || w_out < 1)
    throw std::invalid_argument("resample_to_spacing: degenerate output size " + std::to_string(h_out) + "x" +
                                std::to_string(w_out));

  SliceSample out = sample;
  out.image.resize(h_out, w_out);
  out.mask.resize(h_out, w_out);
  const double ry = target_mm / sample.spacing_y;
  const double rx = target_mm / sample.spacing_x;
  for (Index i = 0; i < h_out; ++i) {
    for (Index j = 0; j < w_out; ++j) {
      const double sy = static_cast<double>(i) * ry;
      const double sx = static_cast<double>(j) * rx;
      out.image(i, j) = bilinear_at(sample.image, sy, sx);
      out.mask(i, j) = nearest_at(sample.mask, sy, sx);
    }
  }
  out.spacing_x = target_mm;
  out.spacing_y = target_mm;
  out.area_mm2 = ground_truth_area(out.mask, target_mm, target_mm);
  return out;
}

SliceSample center_crop_or_pad(const SliceSample& sample, int size) {
  if (size <= 0) throw std::invalid_argument("center_crop_or_pad: size must be positive");
  const Index s = size;

  auto window = [&](Index extent) {
    // offset of the output window in input coordinates; negative = padding.
    // floor halves put the extra cropped pixel / extra zero on the high side
    const Index diff = extent - s;
    return diff >= 0 ? diff / 2 : -((s - extent) / 2);
  };
  const Index oy = window(sample.image.rows());
  const Index ox = window(sample.image.cols());

  SliceSample out = sample;
  out.image = ImageArray::Zero(s, s);
  out.mask = MaskArray::Zero(s, s);
  for (Index i = 0; i < s; ++i) {
    const Index si = i + oy;
    if (si < 0 || si >= sample.image.rows()) continue;
    for (Index j = 0; j < s; ++j) {
      const Index sj = j + ox;
      if (sj < 0 || sj >= sample.image.cols()) continue;
      out.image(i, j) = sample.image(si, sj);
      out.mask(i, j) = sample.mask(si, sj);
    }
  }
  out.area_mm2 = ground_truth_area(out.mask, out.spacing_x, out.spacing_y);
  return out;
}

SliceSample transform_sample(const SliceSample& sample, double angle_deg, double tx_px, double ty_px) {
  const Index h = sample.image.rows(), w = sample.image.cols();
  const double cy = static_cast<double>(h - 1) / 2.0;
  const double cx = static_cast<double>(w - 1) / 2.0;
  const double a = angle_deg * kPi / 180.0;
  const double c = std::cos(a), s = std::sin(a);

  SliceSample out = sample;
  out.image = ImageArray::Zero(h, w);
  out.mask = MaskArray::Zero(h, w);
  for (Index i = 0; i < h; ++i) {
    for (Index j = 0; j < w; ++j) {
      // inverse map: undo translation, rotate back about the center
      const double dy = static_cast<double>(i) - cy - ty_px;
      const double dx = static_cast<double>(j) - cx - tx_px;
      const double sy = c * dy + s * dx + cy;
      const double sx = -s * dy + c * dx + cx;
      if (sy < -0.5 || sy > static_cast<double>(h - 1) + 0.5 || sx < -0.5 || sx > static_cast<double>(w - 1) + 0.5)
        continue;  // outside: zero fill
      out.image(i, j) = bilinear_at(sample.image, sy, sx);
      out.mask(i, j) = nearest_at(sample.mask, sy, sx);
    }
  }
  out.area_mm2 = ground_truth_area(out.mask, out.spacing_x, out.spacing_y);
  return out;
}

std::array<SliceSample, 2> augment(const SliceSample& sample, Rng& rng) {
  const double half = static_cast<double>(sample.image.cols()) / 2.0;
  std::array<SliceSample, 2> out{sample, sample};
  for (auto& copy : out) {
    const double angle = rng.uniform(0.0, 360.0);
    const double tx = rng.uniform(-half, half);
    const double ty = rng.uniform(-half, half);
    copy = transform_sample(sample, angle, tx, ty);
  }
  return out;
}

void SyntheticRingSpec::validate() const {
  if (image_size < 8) throw std::invalid_argument("SyntheticRingSpec: image_size must be >= 8");
  if (spacing_mm <= 0 || slice_thickness_mm <= 0)
    throw std::invalid_argument("SyntheticRingSpec: spacings must be positive");
  if (center_jitter_px < 0) throw std::invalid_argument("SyntheticRingSpec: center_jitter_px must be >= 0");
  if (!(0 < inner_radius_min_px && inner_radius_min_px <= inner_radius_max_px))
    throw std::invalid_argument("SyntheticRingSpec: inner radius range invalid");
  if (!(inner_radius_max_px < outer_radius_min_px && outer_radius_min_px <= outer_radius_max_px))
    throw std::invalid_argument("SyntheticRingSpec: inner radii must stay below outer radii");
  if (outer_radius_max_px + center_jitter_px >= static_cast<double>(image_size) / 2.0)
    throw std::invalid_argument("SyntheticRingSpec: outer radius plus jitter exceeds half the image size");
  if (noise_std < 0) throw std::invalid_argument("SyntheticRingSpec: noise_std must be >= 0");
}

Dataset generate_synthetic_dataset(const SyntheticRingSpec& spec, int n_patients, int n_phases, int n_slices) {
  spec.validate();
  if (n_patients < 1 || n_phases < 1 || n_slices < 1)
    throw std::invalid_argument("generate_synthetic_dataset: patient/phase/slice counts must be >= 1");

  const Index sz = spec.image_size;
  const double mid = static_cast<double>(sz - 1) / 2.0;

  Dataset ds;
  ds.slice_thickness_mm = spec.slice_thickness_mm;
  ds.slices.reserve(static_cast<std::size_t>(n_patients) * n_phases * n_slices);

  for (int p = 0; p < n_patients; ++p) {
    Rng patient_rng = derive_rng(spec.seed, {streams::kSynth, static_cast<std::uint64_t>(p)});
    const double r_out_base = patient_rng.uniform(spec.outer_radius_min_px, spec.outer_radius_max_px);
    const double r_in_base = patient_rng.uniform(spec.inner_radius_min_px, spec.inner_radius_max_px);
    const double cy0 = mid + patient_rng.uniform(-spec.center_jitter_px, spec.center_jitter_px);
    const double cx0 = mid + patient_rng.uniform(-spec.center_jitter_px, spec.center_jitter_px);
    const double contraction = patient_rng.uniform(0.12, 0.22);

    char pid[16];
    std::snprintf(pid, sizeof(pid), "p%03d", p);

    for (int f = 0; f < n_phases; ++f) {
      // smooth contraction over the cycle, maximal radii at phase 0
      const double phase_scale =
          1.0 - contraction * 0.5 * (1.0 - std::cos(2.0 * kPi * static_cast<double>(f) / n_phases));
      for (int k = 0; k < n_slices; ++k) {
        Rng slice_rng = derive_rng(spec.seed, {streams::kSynth, static_cast<std::uint64_t>(p),
                                               static_cast<std::uint64_t>(f), static_cast<std::uint64_t>(k)});
        // radii taper toward the apex (slice 0)
        const double apex_scale =
            n_slices == 1 ? 1.0 : 0.6 + 0.4 * static_cast<double>(k) / static_cast<double>(n_slices - 1);
        const double r_out = r_out_base * apex_scale * phase_scale;
        const double r_in = r_in_base * apex_scale * phase_scale;
        const double cy = cy0 + slice_rng.uniform(-0.5, 0.5);
        const double cx = cx0 + slice_rng.uniform(-0.5, 0.5);

        SliceSample slice;
        slice.patient_id = pid;
        slice.phase_index = f;
        slice.slice_index = k;
        slice.spacing_x = spec.spacing_mm;
        slice.spacing_y = spec.spacing_mm;
        slice.image.resize(sz, sz);
        slice.mask.resize(sz, sz);

        // two smooth background bumps give the texture
        const double b1y = slice_rng.uniform(0, static_cast<double>(sz));
        const double b1x = slice_rng.uniform(0, static_cast<double>(sz));
        const double b2y = slice_rng.uniform(0, static_cast<double>(sz));
        const double b2x = slice_rng.uniform(0, static_cast<double>(sz));
        const double bump_sigma = static_cast<double>(sz) / 5.0;

        for (Index i = 0; i < sz; ++i) {
          for (Index j = 0; j < sz; ++j) {
            const double dy = static_cast<double>(i) - cy;
            const double dx = static_cast<double>(j) - cx;
            const double r = std::sqrt(dy * dy + dx * dx);
            double v;
            std::uint8_t m;
            if (r >= r_in && r <= r_out) {
              v = spec.ring_intensity;
              m = 1;
            } else if (r < r_in) {
              v = spec.pool_intensity;
              m = 0;
            } else {
              v = spec.background_intensity;
              m = 0;
            }
            const double d1 = (static_cast<double>(i) - b1y) * (static_cast<double>(i) - b1y) +
                              (static_cast<double>(j) - b1x) * (static_cast<double>(j) - b1x);
            const double d2 = (static_cast<double>(i) - b2y) * (static_cast<double>(i) - b2y) +
                              (static_cast<double>(j) - b2x) * (static_cast<double>(j) - b2x);
            v += spec.texture_amp * (std::exp(-d1 / (2 * bump_sigma * bump_sigma)) -
                                     std::exp(-d2 / (2 * bump_sigma * bump_sigma)));
            v += slice_rng.normal(0.0, spec.noise_std);
            slice.image(i, j) = v;
            slice.mask(i, j) = m;
          }
        }
        slice.area_mm2 = ground_truth_area(slice.mask, slice.spacing_x, slice.spacing_y);
        slice.validate();
        ds.slices.push_back(std::move(slice));
      }
    }
  }
  return ds;
}

std::array<FoldSplit, 5> split_folds(std::vector<std::string> patient_ids, std::uint64_t seed) {
  std::sort(patient_ids.begin(), patient_ids.end());
  patient_ids.erase(std::unique(patient_ids.begin(), patient_ids.end()), patient_ids.end());
  const std::size_t n = patient_ids.size();
  if (n < 5) throw std::invalid_argument("split_folds: need at least 5 patients, got " + std::to_string(n));

  Rng rng = derive_rng(seed, {streams::kFolds});
  for (std::size_t i = n - 1; i > 0; --i)
    std::swap(patient_ids[i], patient_ids[static_cast<std::size_t>(rng.uniform_int(static_cast<Index>(i) + 1))]);

  std::array<FoldSplit, 5> folds;
  const std::size_t base = n / 5, extra = n % 5;
  std::size_t pos = 0;
  for (int f = 0; f < 5; ++f) {
    folds[static_cast<std::size_t>(f)].fold_id = f;
    const std::size_t len = base + (static_cast<std::size_t>(f) < extra ? 1 : 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto& fold = folds[static_cast<std::size_t>(f)];
      if (i >= pos && i < pos + len)
        fold.test.push_back(patient_ids[i]);
      else
        fold.train.push_back(patient_ids[i]);
    }
    pos += len;
  }
  return folds;
}

std::vector<VolumeSeries> group_volumes(const Dataset& dataset) {
  std::map<std::pair<std::string, int>, std::vector<const SliceSample*>> groups;
  for (const auto& s : dataset.slices) groups[{s.patient_id, s.phase_index}].push_back(&s);

  std::vector<VolumeSeries> out;
  out.reserve(groups.size());
  for (auto& [key, slices] : groups) {
    std::sort(slices.begin(), slices.end(),
              [](const SliceSample* a, const SliceSample* b) { return a->slice_index < b->slice_index; });
    for (std::size_t i = 1; i < slices.size(); ++i) {
      if (slices[i]->slice_index == slices[i - 1]->slice_index)
        throw std::invalid_argument("group_volumes: duplicate slice_index " +
                                    std::to_string(slices[i]->slice_index) + " in " + key.first + " phase " +
                                    std::to_string(key.second));
      if (slices[i]->image.rows() != slices[0]->image.rows() || slices[i]->image.cols() != slices[0]->image.cols())
        throw std::invalid_argument("group_volumes: non-uniform slice shapes in " + key.first);
    }
    out.push_back(VolumeSeries{key.first, key.second, std::move(slices), dataset.slice_thickness_mm});
  }
  return out;
}

namespace {

Tensor<double> image_to_tensor(const ImageArray& img) {
  Tensor<double> t({img.rows(), img.cols()});
  for (Index i = 0; i < img.rows(); ++i)
    for (Index j = 0; j < img.cols(); ++j) t.data[i * img.cols() + j] = img(i, j);
  return t;
}

Tensor<double> mask_to_tensor(const MaskArray& mask) {
  Tensor<double> t({mask.rows(), mask.cols()});
  for (Index i = 0; i < mask.rows(); ++i)
    for (Index j = 0; j < mask.cols(); ++j) t.data[i * mask.cols() + j] = static_cast<double>(mask(i, j));
  return t;
}

ImageArray tensor_to_image(const Tensor<double>& t) {
  if (t.rank() != 2) throw std::runtime_error("dataset: expected rank-2 image tensor, got " + shape_str(t.shape));
  ImageArray img(t.shape[0], t.shape[1]);
  for (Index i = 0; i < t.shape[0]; ++i)
    for (Index j = 0; j < t.shape[1]; ++j) img(i, j) = t.data[i * t.shape[1] + j];
  return img;
}

MaskArray tensor_to_mask(const Tensor<double>& t) {
  if (t.rank() != 2) throw std::runtime_error("dataset: expected rank-2 mask tensor, got " + shape_str(t.shape));
  MaskArray mask(t.shape[0], t.shape[1]);
  for (Index i = 0; i < t.shape[0]; ++i)
    for (Index j = 0; j < t.shape[1]; ++j) {
      const double v = t.data[i * t.shape[1] + j];
      if (v != 0.0 && v != 1.0) throw std::runtime_error("dataset: mask file contains non-binary value");
      mask(i, j) = static_cast<std::uint8_t>(v);
    }
  return mask;
}

}  // namespace

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  nlohmann::json manifest;
  manifest["format"] = "mtseg-dataset";
  manifest["version"] = 1;
  manifest["slice_thickness_mm"] = dataset.slice_thickness_mm;
  manifest["slices"] = nlohmann::json::array();

  for (const auto& s : dataset.slices) {
    char stem[64];
    std::snprintf(stem, sizeof(stem), "%s_ph%02d_sl%02d", s.patient_id.c_str(), s.phase_index, s.slice_index);
    const std::string img_rel = std::string(stem) + "_img.tnsr";
    const std::string mask_rel = std::string(stem) + "_mask.tnsr";
    save_tnsr((dir / img_rel).string(), image_to_tensor(s.image));
    save_tnsr((dir / mask_rel).string(), mask_to_tensor(s.mask));

    nlohmann::json row;
    row["patient"] = s.patient_id;
    row["phase"] = s.phase_index;
    row["slice"] = s.slice_index;
    row["spacing_mm"] = {s.spacing_x, s.spacing_y};
    row["area_mm2"] = s.area_mm2;
    row["image"] = img_rel;
    row["mask"] = mask_rel;
    manifest["slices"].push_back(row);
  }

  std::ofstream os(dir / "manifest.json");
  if (!os) throw std::runtime_error("save_dataset: cannot write manifest in " + dir.string());
  os << manifest.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("load_dataset: no manifest.json in " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(is);
  if (manifest.value("format", "") != "mtseg-dataset")
    throw std::runtime_error("load_dataset: " + (dir / "manifest.json").string() + " is not a dataset manifest");

  Dataset ds;
  ds.slice_thickness_mm = manifest.at("slice_thickness_mm").get<double>();
  for (const auto& row : manifest.at("slices")) {
    SliceSample s;
    s.patient_id = row.at("patient").get<std::string>();
    s.phase_index = row.at("phase").get<int>();
    s.slice_index = row.at("slice").get<int>();
    s.spacing_x = row.at("spacing_mm").at(0).get<double>();
    s.spacing_y = row.at("spacing_mm").at(1).get<double>();
    s.image = tensor_to_image(load_tnsr((dir / row.at("image").get<std::string>()).string()));
    s.mask = tensor_to_mask(load_tnsr((dir / row.at("mask").get<std::string>()).string()));
    s.area_mm2 = row.at("area_mm2").get<double>();
    s.validate();
    ds.slices.push_back(std::move(s));
  }
  return ds;
}

}  // namespace mtseg
