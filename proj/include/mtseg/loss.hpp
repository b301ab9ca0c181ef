#ifndef MTSEG_LOSS_HPP
#define MTSEG_LOSS_HPP

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>

#include "mtseg/ops.hpp"

namespace mtseg {

/// Which weighting of the two task losses the joint objective uses.
///
///   likelihood: total = exp(-s1)*l1 + exp(-2*s2)*l2 + s1 + s2
///               i.e. l1/sigma1 + l2/sigma2^2 + log sigma1 + log sigma2,
///               the literal negative-log-likelihood composition of a
///               Laplacian regression term and a softmax segmentation term.
///   precision:  total = exp(-s1)*l1 + exp(-s2)*l2 + s1 + s2,
///               one weight exp(-s) per task; the default.
enum class LossForm { likelihood, precision };

inline LossForm loss_form_from_string(const std::string& s) {
  if (s == "paper_eq5" || s == "likelihood") return LossForm::likelihood;
  if (s == "precision") return LossForm::precision;
  throw std::invalid_argument("loss.form must be \"paper_eq5\" or \"precision\", got \"" + s + "\"");
}

inline std::string to_string(LossForm f) { return f == LossForm::likelihood ? "paper_eq5" : "precision"; }

/// Trainable log-uncertainties. s1 weights the regression loss, s2 the
/// segmentation loss; sigma_i = exp(s_i) stays positive by construction.
struct LossState {
  double s1 = 0.0;
  double s2 = 0.0;
  LossForm form = LossForm::precision;
};

struct LossBreakdown {
  double l1_mad = 0.0;     // mean absolute area difference, mm^2
  double l2_ce = 0.0;      // mean per-pixel cross-entropy, nats
  double w1 = 0.0;         // weight applied to l1
  double w2 = 0.0;         // weight applied to l2
  double reg_terms = 0.0;  // s1 + s2 penalty
  double total = 0.0;
};

inline double mad_loss(double pred_area, double true_area) {
  if (!std::isfinite(pred_area) || !std::isfinite(true_area))
    throw std::invalid_argument("mad_loss: non-finite input");
  return std::fabs(pred_area - true_area);
}

inline double mad_loss(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size() || pred.empty())
    throw std::invalid_argument("mad_loss: batch size mismatch or empty batch");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += mad_loss(pred[i], truth[i]);
  return s / static_cast<double>(pred.size());
}

/// Mean binary cross-entropy of a probability map against a {0,1} mask.
template <typename Scalar>
double ce_loss(const Tensor<Scalar>& seg_prob, const Tensor<Scalar>& mask) {
  Tape<Scalar> tape;
  return static_cast<double>(
      tape.value(binary_cross_entropy(tape.constant(seg_prob), tape.constant(mask))).item());
}

inline double task_weight_1(const LossState& st) { return std::exp(-st.s1); }
inline double task_weight_2(const LossState& st) {
  return st.form == LossForm::likelihood ? std::exp(-2.0 * st.s2) : std::exp(-st.s2);
}

inline LossBreakdown joint_loss(double l1, double l2, const LossState& st) {
  if (l1 < 0 || l2 < 0) throw std::invalid_argument("joint_loss: task losses must be non-negative");
  LossBreakdown b;
  b.l1_mad = l1;
  b.l2_ce = l2;
  b.w1 = task_weight_1(st);
  b.w2 = task_weight_2(st);
  b.reg_terms = st.s1 + st.s2;
  b.total = b.w1 * l1 + b.w2 * l2 + b.reg_terms;
  if (!std::isfinite(b.total)) throw std::runtime_error("joint_loss: non-finite total");
  return b;
}

/// Ratio of the segmentation weight to the regression weight.
inline double effective_weight_ratio(const LossState& st) { return task_weight_2(st) / task_weight_1(st); }

/// Differentiable composition of the joint loss on a tape; l1 and l2 are
/// scalar vars, s1/s2 the bound log-uncertainty leaves.
template <typename Scalar>
Var<Scalar> joint_loss_var(Var<Scalar> l1, Var<Scalar> l2, Var<Scalar> s1, Var<Scalar> s2, LossForm form) {
  Var<Scalar> w1 = exp(scale(s1, -1.0));
  Var<Scalar> w2 = exp(scale(s2, form == LossForm::likelihood ? -2.0 : -1.0));
  Var<Scalar> weighted = add(mul(w1, l1), mul(w2, l2));
  return add(weighted, add(s1, s2));
}

}  // namespace mtseg

#endif  // MTSEG_LOSS_HPP
