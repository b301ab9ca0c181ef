#include "mtseg/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

#include "mtseg/rng.hpp"

namespace mtseg {

double sorted_quantile(std::span<const double> sorted_values, double q) {
  if (sorted_values.empty()) throw std::invalid_argument("sorted_quantile: empty input");
  if (q < 0 || q > 1) throw std::invalid_argument("sorted_quantile: q outside [0,1]");
  const double pos = q * static_cast<double>(sorted_values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= sorted_values.size()) return sorted_values.back();
  const double frac = pos - static_cast<double>(lo);
  return sorted_values[lo] * (1.0 - frac) + sorted_values[lo + 1] * frac;
}

BootstrapResult bootstrap_ci_mean(std::span<const double> values, int n_resamples, double confidence,
                                  std::uint64_t seed) {
  if (values.empty()) throw std::invalid_argument("bootstrap_ci_mean: empty input");
  if (n_resamples < 1) throw std::invalid_argument("bootstrap_ci_mean: n_resamples must be >= 1");
  if (confidence <= 0 || confidence >= 1) throw std::invalid_argument("bootstrap_ci_mean: confidence outside (0,1)");

  const std::size_t n = values.size();
  double sum = 0;
  for (double v : values) sum += v;

  std::vector<double> means(static_cast<std::size_t>(n_resamples));
  for (int r = 0; r < n_resamples; ++r) {
    // substream per resample index keeps the draw independent of execution order
    Rng rng = derive_rng(seed, {streams::kBootstrap, static_cast<std::uint64_t>(r)});
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += values[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(n)))];
    means[static_cast<std::size_t>(r)] = s / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());

  BootstrapResult res;
  res.point_mean = sum / static_cast<double>(n);
  res.confidence = confidence;
  res.n_resamples = n_resamples;
  res.seed = seed;
  res.ci_low = sorted_quantile(means, (1.0 - confidence) / 2.0);
  res.ci_high = sorted_quantile(means, (1.0 + confidence) / 2.0);
  return res;
}

KSResult ks_two_sample(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("ks_two_sample: need at least 2 samples per side");

  std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());

  const double na = static_cast<double>(sa.size());
  const double nb = static_cast<double>(sb.size());
  double d = 0.0;
  std::size_t ia = 0, ib = 0;
  while (ia < sa.size() && ib < sb.size()) {
    const double x = std::min(sa[ia], sb[ib]);
    while (ia < sa.size() && sa[ia] == x) ++ia;
    while (ib < sb.size() && sb[ib] == x) ++ib;
    d = std::max(d, std::fabs(static_cast<double>(ia) / na - static_cast<double>(ib) / nb));
  }

  KSResult res;
  res.statistic = d;
  if (d == 0.0) {
    res.p_value = 1.0;
    return res;
  }
  const double ne = na * nb / (na + nb);
  const double lambda = (std::sqrt(ne) + 0.12 + 0.11 / std::sqrt(ne)) * d;
  double p = 0.0;
  double sign = 1.0;
  for (int k = 1; k <= 1000; ++k) {
    const double term = std::exp(-2.0 * static_cast<double>(k) * static_cast<double>(k) * lambda * lambda);
    p += sign * term;
    if (term < 1e-12) break;
    sign = -sign;
  }
  res.p_value = std::clamp(2.0 * p, 0.0, 1.0);
  if (res.p_value <= 0.0) res.p_value = std::numeric_limits<double>::min();
  return res;
}

double pearson_r(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("pearson_r: length mismatch");
  if (x.size() < 2) throw std::invalid_argument("pearson_r: need at least 2 points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("pearson_r: zero variance input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::string to_string(RegionLabel r) {
  switch (r) {
    case RegionLabel::apical: return "apical";
    case RegionLabel::mid: return "mid";
    case RegionLabel::basal: return "basal";
  }
  return "?";
}

RegionAssignment classify_regions(const std::vector<bool>& slice_has_foreground) {
  RegionAssignment out;
  out.labels.assign(slice_has_foreground.size(), std::nullopt);

  std::vector<std::size_t> fg;
  for (std::size_t i = 0; i < slice_has_foreground.size(); ++i)
    if (slice_has_foreground[i]) fg.push_back(i);

  const std::size_t n = fg.size();
  out.degenerate = n < 5;
  // two most apical first, then two most basal from what remains, rest mid
  const std::size_t n_apical = std::min<std::size_t>(2, n);
  const std::size_t n_basal = std::min<std::size_t>(2, n - n_apical);
  for (std::size_t r = 0; r < n; ++r) {
    if (r < n_apical)
      out.labels[fg[r]] = RegionLabel::apical;
    else if (r >= n - n_basal)
      out.labels[fg[r]] = RegionLabel::basal;
    else
      out.labels[fg[r]] = RegionLabel::mid;
  }
  return out;
}

std::vector<MadGroupSummary> mad_summary(std::span<const double> pred, std::span<const double> truth,
                                         std::span<const std::string> group_keys) {
  if (pred.size() != truth.size() || pred.size() != group_keys.size())
    throw std::invalid_argument("mad_summary: input lengths differ");

  std::map<std::string, std::vector<double>> groups;
  for (std::size_t i = 0; i < pred.size(); ++i) groups[group_keys[i]].push_back(std::fabs(pred[i] - truth[i]));

  std::vector<MadGroupSummary> out;
  out.reserve(groups.size());
  for (const auto& [key, diffs] : groups) {
    MadGroupSummary s;
    s.key = key;
    s.n = static_cast<int>(diffs.size());
    double sum = 0;
    for (double d : diffs) sum += d;
    s.mean = sum / static_cast<double>(diffs.size());
    double sq = 0;
    for (double d : diffs) sq += (d - s.mean) * (d - s.mean);
    s.stddev = std::sqrt(sq / static_cast<double>(diffs.size()));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace mtseg
