#ifndef MTSEG_GRADCHECK_HPP
#define MTSEG_GRADCHECK_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mtseg/tensor.hpp"

namespace mtseg {

/// Central finite differences (f(p+h) - f(p-h)) / 2h, one coordinate at a
/// time. The callable is evaluated with the parameter tensors mutated in
/// place, so it must read them fresh on every call. Always double precision.
inline std::vector<Tensor<double>> finite_diff_grad(const std::function<double()>& f,
                                                    const std::vector<Tensor<double>*>& params, double h) {
  if (h <= 0) throw std::invalid_argument("finite_diff_grad: h must be positive");
  std::vector<Tensor<double>> grads;
  grads.reserve(params.size());
  for (Tensor<double>* p : params) {
    Tensor<double> g(p->shape);
    for (Index i = 0; i < p->size(); ++i) {
      const double saved = p->data[i];
      p->data[i] = saved + h;
      const double fp = f();
      p->data[i] = saved - h;
      const double fm = f();
      p->data[i] = saved;
      g.data[i] = (fp - fm) / (2.0 * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

/// Guarded relative error: |a-b| / max(|a|, |b|, floor). The floor keeps
/// near-zero gradients from being judged on finite-difference roundoff alone.
inline double rel_error(double a, double b, double floor_ = 1e-5) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), floor_});
}

inline double max_rel_error(const Tensor<double>& analytic, const Tensor<double>& numeric, double floor_ = 1e-5) {
  if (analytic.shape != numeric.shape) throw std::invalid_argument("max_rel_error: shape mismatch");
  double worst = 0.0;
  for (Index i = 0; i < analytic.size(); ++i) worst = std::max(worst, rel_error(analytic.data[i], numeric.data[i], floor_));
  return worst;
}

}  // namespace mtseg

#endif  // MTSEG_GRADCHECK_HPP
