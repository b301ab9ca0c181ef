#ifndef MTSEG_STATS_HPP
#define MTSEG_STATS_HPP

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mtseg {

struct BootstrapResult {
  double point_mean = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double confidence = 0.99;
  int n_resamples = 1000;
  std::uint64_t seed = 0;
};

/// Percentile bootstrap CI for the mean: resample with replacement, take the
/// empirical (1-c)/2 and (1+c)/2 quantiles of the resampled means.
BootstrapResult bootstrap_ci_mean(std::span<const double> values, int n_resamples = 1000, double confidence = 0.99,
                                  std::uint64_t seed = 0);

/// Linear-interpolation quantile of a sorted vector (q in [0,1]).
double sorted_quantile(std::span<const double> sorted_values, double q);

struct KSResult {
  double statistic = 0.0;  // sup |ECDF_a - ECDF_b|
  double p_value = 1.0;
};

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value
///   p = 2 * sum_k (-1)^(k-1) exp(-2 k^2 lambda^2),
///   lambda = (sqrt(ne) + 0.12 + 0.11/sqrt(ne)) * D,  ne = |a||b|/(|a|+|b|).
KSResult ks_two_sample(std::span<const double> a, std::span<const double> b);

double pearson_r(std::span<const double> x, std::span<const double> y);

enum class RegionLabel { apical, mid, basal };

std::string to_string(RegionLabel r);

struct RegionAssignment {
  // one entry per slice; nullopt = excluded (no gold-standard foreground)
  std::vector<std::optional<RegionLabel>> labels;
  bool degenerate = false;  // fewer than 5 foreground slices
};

/// Labels the two most apical foreground slices apical, the two most basal
/// basal, the rest mid. Slices are ordered apex to base. With fewer than 5
/// foreground slices the truncated rule applies (apical first, then basal)
/// and the result is flagged degenerate.
RegionAssignment classify_regions(const std::vector<bool>& slice_has_foreground);

struct MadGroupSummary {
  std::string key;
  double mean = 0.0;
  double stddev = 0.0;  // population standard deviation
  int n = 0;
};

/// Mean +/- std of |pred - truth| per group key, keys sorted; empty groups
/// cannot occur (every row carries a key).
std::vector<MadGroupSummary> mad_summary(std::span<const double> pred, std::span<const double> truth,
                                         std::span<const std::string> group_keys);

}  // namespace mtseg

#endif  // MTSEG_STATS_HPP
