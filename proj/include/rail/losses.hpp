#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "rail/mask.hpp"
#include "rail/ops.hpp"
#include "rail/tensor.hpp"

// Loss terms on per-voxel class distributions [B,K,...]. Probabilities fed
// into any log are clamped to [kProbEps, 1]; masked losses average over the
// selected voxels only and return 0 on an empty mask so that early
// iterations with empty disagreement regions stay well-defined.

namespace rail {

inline constexpr double kProbEps = 1e-8;
inline constexpr double kDiceSmooth = 1e-5;

struct LossWeights {
  double beta = 0.5;         // masked MSE weight inside the supervised loss
  double gamma = 0.05;       // disagreement-focused term weight
  double mu = 0.1;           // confidence modulation weight
  double lambda1_hat = 20.0; // unsupervised plateau weight
  double lambda2_hat = 10.0; // teacher-consistency plateau weight
  int t_max = 8000;
};

struct LossBreakdown {
  double l_s = 0;
  double l_dfs = 0;
  double l_u = 0;
  double l_t = 0;
  double l_cal = 0;
  double total = 0;
  double lambda1 = 0;
  double lambda2 = 0;
  // foreground voxel counts of the masks in effect (diagnostics)
  std::int64_t m_diff = 0;
  std::int64_t m_mis = 0;
  std::int64_t m_diffmis = 0;
  std::int64_t m_div = 0;
};

namespace detail {

template <typename T>
void check_probs_target(const char* op, const Tensor<T>& probs,
                        const Tensor<T>& target) {
  check_same_shape(op, probs, target);
  if (probs.rank() < 2)
    throw std::invalid_argument(std::string(op) + ": rank must be >= 2");
}

template <typename T>
void check_mask(const char* op, const Tensor<T>& probs,
                const BinaryMask3D& mask) {
  Shape expect = probs.shape();
  expect.erase(expect.begin() + 1);  // mask has no channel axis
  if (mask.shape != expect)
    throw std::invalid_argument(std::string(op) + ": mask shape " +
                                shape_str(mask.shape) + " does not match " +
                                shape_str(expect));
}

}  // namespace detail

// Mean over voxels of -sum_k target_k * log(clamp(probs_k)).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& probs, const Tensor<T>& onehot_target,
                        Tape<T>* tape = nullptr) {
  detail::check_probs_target("cross_entropy", probs, onehot_target);
  const int B = probs.shape()[0], K = probs.shape()[1];
  const std::int64_t S = probs.size() / (static_cast<std::int64_t>(B) * K);
  const std::int64_t n_vox = static_cast<std::int64_t>(B) * S;
  const T eps = static_cast<T>(kProbEps);
  auto pv = probs.values();
  auto tv = onehot_target.values();
  T acc = 0;
  for (std::int64_t i = 0; i < probs.size(); ++i) {
    if (tv[i] == T(0)) continue;
    const T p = std::min(T(1), std::max(eps, pv[i]));
    acc -= tv[i] * std::log(p);
  }
  Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(n_vox));
  detail::record_op(tape, "cross_entropy", probs.requires_grad(), out,
                    [probs = probs, onehot_target = onehot_target, out, n_vox, eps]() mutable {
                      const T g = out.grad()[0] / static_cast<T>(n_vox);
                      auto pv2 = probs.values();
                      auto tv2 = onehot_target.values();
                      auto gp = probs.grad();
                      for (std::int64_t i = 0; i < probs.size(); ++i) {
                        if (tv2[i] == T(0)) continue;
                        const T p = pv2[i];
                        if (p > eps && p < T(1)) gp[i] -= g * tv2[i] / p;
                      }
                    });
  return out;
}

// Mean squared difference over all elements.
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  detail::check_same_shape("mse", a, b);
  auto av = a.values();
  auto bv = b.values();
  T acc = 0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    const T d = av[i] - bv[i];
    acc += d * d;
  }
  const T inv_n = T(1) / static_cast<T>(a.size());
  Tensor<T> out = Tensor<T>::scalar(acc * inv_n);
  detail::record_op(tape, "mse", a.requires_grad() || b.requires_grad(), out,
                    [a = a, b = b, out, inv_n]() mutable {
                      const T g = out.grad()[0] * inv_n * T(2);
                      auto av2 = a.values();
                      auto bv2 = b.values();
                      T* ga = a.requires_grad() ? a.grad().data() : nullptr;
                      T* gb = b.requires_grad() ? b.grad().data() : nullptr;
                      for (std::int64_t i = 0; i < a.size(); ++i) {
                        const T d = (av2[i] - bv2[i]) * g;
                        if (ga) ga[i] += d;
                        if (gb) gb[i] -= d;
                      }
                    });
  return out;
}

// Squared difference averaged over mask-selected voxels (all channels);
// 0 when the mask is empty.
template <typename T>
Tensor<T> mse_masked(const Tensor<T>& a, const Tensor<T>& b,
                     const BinaryMask3D& mask, Tape<T>* tape = nullptr) {
  detail::check_same_shape("mse_masked", a, b);
  detail::check_mask("mse_masked", a, mask);
  const int B = a.shape()[0], K = a.shape()[1];
  const std::int64_t S = a.size() / (static_cast<std::int64_t>(B) * K);
  const std::int64_t selected = mask.popcount();
  if (selected == 0) {
    Tensor<T> out = Tensor<T>::scalar(T(0));
    detail::record_op(tape, "mse_masked",
                      a.requires_grad() || b.requires_grad(), out, []() {});
    return out;
  }
  const T inv_n = T(1) / static_cast<T>(selected * K);
  auto av = a.values();
  auto bv = b.values();
  T acc = 0;
  for (int bb = 0; bb < B; ++bb)
    for (int k = 0; k < K; ++k) {
      const std::int64_t base = (static_cast<std::int64_t>(bb) * K + k) * S;
      const std::uint8_t* mrow = mask.values.data() + static_cast<std::int64_t>(bb) * S;
      for (std::int64_t v = 0; v < S; ++v) {
        if (!mrow[v]) continue;
        const T d = av[base + v] - bv[base + v];
        acc += d * d;
      }
    }
  Tensor<T> out = Tensor<T>::scalar(acc * inv_n);
  // capture the mask by value; it is a constant of the op
  detail::record_op(
      tape, "mse_masked", a.requires_grad() || b.requires_grad(), out,
      [a = a, b = b, out, mask = mask, inv_n, B, K, S]() mutable {
        const T g = out.grad()[0] * inv_n * T(2);
        auto av2 = a.values();
        auto bv2 = b.values();
        T* ga = a.requires_grad() ? a.grad().data() : nullptr;
        T* gb = b.requires_grad() ? b.grad().data() : nullptr;
        for (int bb = 0; bb < B; ++bb)
          for (int k = 0; k < K; ++k) {
            const std::int64_t base =
                (static_cast<std::int64_t>(bb) * K + k) * S;
            const std::uint8_t* mrow =
                mask.values.data() + static_cast<std::int64_t>(bb) * S;
            for (std::int64_t v = 0; v < S; ++v) {
              if (!mrow[v]) continue;
              const T d = (av2[base + v] - bv2[base + v]) * g;
              if (ga) ga[base + v] += d;
              if (gb) gb[base + v] -= d;
            }
          }
      });
  return out;
}

// 1 - mean over foreground classes of (2*sum(p*q) + s) / (sum(p) + sum(q) + s).
template <typename T>
Tensor<T> soft_dice_loss(const Tensor<T>& probs, const Tensor<T>& onehot_target,
                         Tape<T>* tape = nullptr) {
  detail::check_probs_target("soft_dice_loss", probs, onehot_target);
  const int B = probs.shape()[0], K = probs.shape()[1];
  const std::int64_t S = probs.size() / (static_cast<std::int64_t>(B) * K);
  const T s = static_cast<T>(kDiceSmooth);
  auto pv = probs.values();
  auto tv = onehot_target.values();
  // per foreground class sums over batch and spatial axes
  std::vector<T> inter(K, T(0)), psum(K, T(0)), qsum(K, T(0));
  for (int bb = 0; bb < B; ++bb)
    for (int k = 1; k < K; ++k) {
      const std::int64_t base = (static_cast<std::int64_t>(bb) * K + k) * S;
      T i_acc = 0, p_acc = 0, q_acc = 0;
      for (std::int64_t v = 0; v < S; ++v) {
        i_acc += pv[base + v] * tv[base + v];
        p_acc += pv[base + v];
        q_acc += tv[base + v];
      }
      inter[k] += i_acc;
      psum[k] += p_acc;
      qsum[k] += q_acc;
    }
  T loss = 0;
  for (int k = 1; k < K; ++k)
    loss += T(1) - (T(2) * inter[k] + s) / (psum[k] + qsum[k] + s);
  loss /= static_cast<T>(K - 1);
  Tensor<T> out = Tensor<T>::scalar(loss);
  detail::record_op(
      tape, "soft_dice_loss", probs.requires_grad(), out,
      [probs = probs, onehot_target = onehot_target, out, inter, psum, qsum, s, B, K, S]() mutable {
        const T g = out.grad()[0] / static_cast<T>(K - 1);
        auto pv2 = probs.values();
        auto tv2 = onehot_target.values();
        auto gp = probs.grad();
        for (int k = 1; k < K; ++k) {
          const T denom = psum[k] + qsum[k] + s;
          const T num = T(2) * inter[k] + s;
          // d/dp of -(2I+s)/(P+Q+s): -(2q*denom - num)/denom^2
          const T inv_d = T(1) / denom;
          const T num_over_d2 = num * inv_d * inv_d;
          for (int bb = 0; bb < B; ++bb) {
            const std::int64_t base =
                (static_cast<std::int64_t>(bb) * K + k) * S;
            for (std::int64_t v = 0; v < S; ++v)
              gp[base + v] -=
                  g * (T(2) * tv2[base + v] * inv_d - num_over_d2);
          }
        }
      });
  return out;
}

// Mean over mask-selected voxels of sum_k p_k * log(p_k / q_k), both
// distributions clamped to [kProbEps, 1]; 0 on an empty mask.
template <typename T>
Tensor<T> kl_divergence_masked(const Tensor<T>& p, const Tensor<T>& q,
                               const BinaryMask3D& mask,
                               Tape<T>* tape = nullptr) {
  detail::check_probs_target("kl_divergence_masked", p, q);
  detail::check_mask("kl_divergence_masked", p, mask);
  const int B = p.shape()[0], K = p.shape()[1];
  const std::int64_t S = p.size() / (static_cast<std::int64_t>(B) * K);
  const std::int64_t selected = mask.popcount();
  if (selected == 0) {
    Tensor<T> out = Tensor<T>::scalar(T(0));
    detail::record_op(tape, "kl_divergence_masked",
                      p.requires_grad() || q.requires_grad(), out, []() {});
    return out;
  }
  const T eps = static_cast<T>(kProbEps);
  const T inv_n = T(1) / static_cast<T>(selected);
  auto pvals = p.values();
  auto qvals = q.values();
  auto clamp01 = [eps](T v) { return std::min(T(1), std::max(eps, v)); };
  T acc = 0;
  for (int bb = 0; bb < B; ++bb)
    for (int k = 0; k < K; ++k) {
      const std::int64_t base = (static_cast<std::int64_t>(bb) * K + k) * S;
      const std::uint8_t* mrow =
          mask.values.data() + static_cast<std::int64_t>(bb) * S;
      for (std::int64_t v = 0; v < S; ++v) {
        if (!mrow[v]) continue;
        const T pc = clamp01(pvals[base + v]);
        const T qc = clamp01(qvals[base + v]);
        acc += pc * std::log(pc / qc);
      }
    }
  Tensor<T> out = Tensor<T>::scalar(acc * inv_n);
  detail::record_op(
      tape, "kl_divergence_masked", p.requires_grad() || q.requires_grad(),
      out, [p = p, q = q, out, mask = mask, inv_n, eps, B, K, S]() mutable {
        const T g = out.grad()[0] * inv_n;
        auto pv2 = p.values();
        auto qv2 = q.values();
        T* gp = p.requires_grad() ? p.grad().data() : nullptr;
        T* gq = q.requires_grad() ? q.grad().data() : nullptr;
        auto clamp01 = [eps = eps](T v) {
          return std::min(T(1), std::max(eps, v));
        };
        for (int bb = 0; bb < B; ++bb)
          for (int k = 0; k < K; ++k) {
            const std::int64_t base =
                (static_cast<std::int64_t>(bb) * K + k) * S;
            const std::uint8_t* mrow =
                mask.values.data() + static_cast<std::int64_t>(bb) * S;
            for (std::int64_t v = 0; v < S; ++v) {
              if (!mrow[v]) continue;
              const T pr = pv2[base + v];
              const T qr = qv2[base + v];
              const T pc = clamp01(pr);
              const T qc = clamp01(qr);
              if (gp && pr > eps && pr < T(1))
                gp[base + v] += g * (std::log(pc / qc) + T(1));
              if (gq && qr > eps && qr < T(1))
                gq[base + v] -= g * pc / qc;
            }
          }
      });
  return out;
}

// One-hot labels as an eps-clamped distribution usable as a KL target.
template <typename T>
Tensor<T> onehot_distribution(const LabelMap& labels, int num_classes) {
  Tensor<T> t = onehot<T>(labels, num_classes);
  auto tv = t.values();
  const T eps = static_cast<T>(kProbEps);
  for (auto& v : tv) v = std::max(eps, v);
  return t;
}

template <typename T>
Tensor<T> uniform_distribution(const Shape& like, int num_classes) {
  Shape s = like;
  s[1] = num_classes;
  return Tensor<T>::filled(s, T(1) / static_cast<T>(num_classes));
}

// CE against ground truth plus the masked MSE term restricted to the voxels
// where this student disagrees with the best student.
template <typename T>
Tensor<T> supervised_loss(const Tensor<T>& probs, const Tensor<T>& onehot_gt,
                          const BinaryMask3D& m_diff, double beta,
                          Tape<T>* tape = nullptr) {
  Tensor<T> ce = cross_entropy(probs, onehot_gt, tape);
  if (beta == 0.0) return ce;
  Tensor<T> m = mse_masked(probs, onehot_gt, m_diff, tape);
  return add(ce, scale(m, beta, tape), tape);
}

// KL toward the ground-truth distribution, restricted to voxels that are
// both divergent from the best student and mislabeled.
template <typename T>
Tensor<T> dfs_loss(const Tensor<T>& probs, const LabelMap& gt_labels,
                   const BinaryMask3D& m_diffmis, Tape<T>* tape = nullptr) {
  Tensor<T> gt_dist =
      onehot_distribution<T>(gt_labels, probs.shape()[1]);
  return kl_divergence_masked(probs, gt_dist, m_diffmis, tape);
}

// KL toward the uniform distribution on divergence voxels; minimizing it
// drives those voxels toward maximal entropy.
template <typename T>
Tensor<T> cal_loss(const Tensor<T>& pseudo_probs, const BinaryMask3D& m_div,
                   int num_classes, Tape<T>* tape = nullptr) {
  Tensor<T> u = uniform_distribution<T>(pseudo_probs.shape(), num_classes);
  return kl_divergence_masked(pseudo_probs, u, m_div, tape);
}

template <typename T>
Tensor<T> unsupervised_loss(const Tensor<T>& student_pseudo_probs,
                            const Tensor<T>& best_pseudo_probs,
                            Tape<T>* tape = nullptr) {
  return mse(student_pseudo_probs, best_pseudo_probs, tape);
}

template <typename T>
Tensor<T> teacher_consistency_loss(const Tensor<T>& student_pseudo_probs,
                                   const Tensor<T>& teacher_pseudo_probs,
                                   Tape<T>* tape = nullptr) {
  return mse(student_pseudo_probs, teacher_pseudo_probs, tape);
}

// Gaussian ramp that plateaus at lambda_hat from t_max/2 onward.
inline double warmup_lambda(int t, int t_max, double lambda_hat) {
  if (t < 0 || t > t_max)
    throw std::invalid_argument("warmup_lambda: t " + std::to_string(t) +
                                " outside [0, " + std::to_string(t_max) + "]");
  if (static_cast<double>(t) >= 0.5 * static_cast<double>(t_max))
    return lambda_hat;
  const double r = 1.0 - 2.0 * static_cast<double>(t) / static_cast<double>(t_max);
  return lambda_hat * std::exp(-5.0 * r * r);
}

namespace detail {
template <typename T>
double finite_loss_value(const Tensor<T>& t, const char* term) {
  const double v = static_cast<double>(t.item());
  if (!std::isfinite(v))
    throw std::runtime_error(std::string("total_loss: non-finite ") + term +
                             " = " + std::to_string(v));
  return v;
}
}  // namespace detail

// Components of the combined objective; undefined handles mean the term was
// not computed this iteration and contributes zero.
template <typename T>
struct TotalLossInputs {
  Tensor<T> l_s;
  Tensor<T> l_dfs;
  Tensor<T> l_u;
  Tensor<T> l_t;
  Tensor<T> l_cal;
};

// total = L_s + gamma*L_DFS + lambda1(t)*(L_U + mu*L_CAL) + lambda2(t)*L_T.
// Terms with zero effective weight are dropped from the graph entirely so a
// fully ablated configuration reduces to the bare supervised step.
template <typename T>
std::pair<Tensor<T>, LossBreakdown> total_loss(const TotalLossInputs<T>& in,
                                               const LossWeights& w, int t,
                                               Tape<T>* tape = nullptr) {
  LossBreakdown bd;
  bd.lambda1 = warmup_lambda(t, w.t_max, w.lambda1_hat);
  bd.lambda2 = warmup_lambda(t, w.t_max, w.lambda2_hat);

  if (!in.l_s.defined())
    throw std::invalid_argument("total_loss: supervised term is required");
  bd.l_s = detail::finite_loss_value(in.l_s, "l_s");
  Tensor<T> total = in.l_s;

  if (in.l_dfs.defined()) {
    bd.l_dfs = detail::finite_loss_value(in.l_dfs, "l_dfs");
    if (w.gamma != 0.0) total = add(total, scale(in.l_dfs, w.gamma, tape), tape);
  }
  Tensor<T> unsup;
  if (in.l_u.defined()) {
    bd.l_u = detail::finite_loss_value(in.l_u, "l_u");
    unsup = in.l_u;
  }
  if (in.l_cal.defined()) {
    bd.l_cal = detail::finite_loss_value(in.l_cal, "l_cal");
    if (w.mu != 0.0) {
      Tensor<T> scaled = scale(in.l_cal, w.mu, tape);
      unsup = unsup.defined() ? add(unsup, scaled, tape) : scaled;
    }
  }
  if (unsup.defined() && bd.lambda1 != 0.0)
    total = add(total, scale(unsup, bd.lambda1, tape), tape);
  if (in.l_t.defined()) {
    bd.l_t = detail::finite_loss_value(in.l_t, "l_t");
    if (bd.lambda2 != 0.0)
      total = add(total, scale(in.l_t, bd.lambda2, tape), tape);
  }

  bd.total = bd.l_s + w.gamma * bd.l_dfs + bd.lambda1 * (bd.l_u + w.mu * bd.l_cal) +
             bd.lambda2 * bd.l_t;
  return {total, bd};
}

}  // namespace rail
