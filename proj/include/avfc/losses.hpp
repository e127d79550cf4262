#pragma once

// Sequence transduction losses: CTC and RNN-T in the log semiring with exact
// gradients w.r.t. raw logits, brute-force enumeration oracles, and the
// weighted CTC/RNN-T objective. All lattice arithmetic runs in double
// regardless of the logit type.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "avfc/tensor.hpp"

namespace avfc {

class TargetTooLong : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Oracles report unreachable targets with this value.
inline constexpr double kUnreachable = std::numeric_limits<double>::infinity();

template <class Real>
struct LossResult {
  double value = 0.0;  // natural-log negative log-likelihood
  Tensor<Real> grad;   // d value / d logits, shaped like the logits
};

struct HybridWeights {
  double alpha = 0.3;
  double interctc_weight = 0.5;
};

namespace detail {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

/// Row-wise log-softmax of a [rows x k] block, in double.
template <class Real>
std::vector<double> log_softmax_rows(const Real* x, std::size_t rows, std::size_t k) {
  std::vector<double> out(rows * k);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = x + r * k;
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) m = std::max(m, double(row[j]));
    double s = 0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(double(row[j]) - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = double(row[j]) - lse;
  }
  return out;
}

inline void check_label(int id, std::size_t classes, int blank) {
  if (id < 0 || static_cast<std::size_t>(id) >= classes || id == blank) {
    throw std::invalid_argument("invalid target token id " + std::to_string(id) + " (classes " +
                                std::to_string(classes) + ", blank " + std::to_string(blank) + ")");
  }
}

}  // namespace detail

/// Minimum number of frames a CTC alignment of `target` needs: one per label
/// plus a separating blank between equal neighbours.
inline std::size_t ctc_min_frames(const std::vector<int>& target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i) n += target[i] == target[i - 1];
  return n;
}

/// CTC negative log-likelihood of `target` under logits [T x (V+1)].
template <class Real>
LossResult<Real> ctc_loss(const Tensor<Real>& logits, const std::vector<int>& target, int blank) {
  if (logits.rank() != 2) throw ShapeError("ctc_loss expects [T x classes], got " + shape_str(logits.shape()));
  const std::size_t T = logits.dim(0), K = logits.dim(1);
  if (blank < 0 || static_cast<std::size_t>(blank) >= K) {
    throw std::invalid_argument("blank id " + std::to_string(blank) + " outside " + std::to_string(K) + " classes");
  }
  for (int id : target) detail::check_label(id, K, blank);
  if (ctc_min_frames(target) > T) {
    throw TargetTooLong("CTC target of length " + std::to_string(target.size()) + " needs " +
                        std::to_string(ctc_min_frames(target)) + " frames, have " + std::to_string(T));
  }
  using detail::kNegInf;
  using detail::log_add;

  const auto lp = detail::log_softmax_rows(logits.data(), T, K);
  const std::size_t S = 2 * target.size() + 1;
  std::vector<int> ext(S, blank);
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
  auto can_skip = [&](std::size_t s) { return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]; };

  // alpha includes the emission at t; beta excludes it.
  std::vector<double> alpha(T * S, kNegInf), beta(T * S, kNegInf);
  alpha[0] = lp[ext[0]];
  if (S > 1) alpha[1] = lp[ext[1]];
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      double a = alpha[(t - 1) * S + s];
      if (s >= 1) a = log_add(a, alpha[(t - 1) * S + s - 1]);
      if (can_skip(s)) a = log_add(a, alpha[(t - 1) * S + s - 2]);
      if (a != kNegInf) alpha[t * S + s] = a + lp[t * K + ext[s]];
    }
  }
  beta[(T - 1) * S + S - 1] = 0.0;
  if (S > 1) beta[(T - 1) * S + S - 2] = 0.0;
  for (std::size_t t = T - 1; t-- > 0;) {
    for (std::size_t s = 0; s < S; ++s) {
      auto next = [&](std::size_t s2) { return beta[(t + 1) * S + s2] + lp[(t + 1) * K + ext[s2]]; };
      double b = next(s);
      if (s + 1 < S) b = log_add(b, next(s + 1));
      if (s + 2 < S && can_skip(s + 2)) b = log_add(b, next(s + 2));
      beta[t * S + s] = b;
    }
  }
  double log_p = alpha[(T - 1) * S + S - 1];
  if (S > 1) log_p = log_add(log_p, alpha[(T - 1) * S + S - 2]);

  LossResult<Real> out;
  out.value = -log_p;
  out.grad = Tensor<Real>(logits.shape());
  std::vector<double> occ(K);
  for (std::size_t t = 0; t < T; ++t) {
    std::fill(occ.begin(), occ.end(), kNegInf);
    for (std::size_t s = 0; s < S; ++s) {
      occ[ext[s]] = log_add(occ[ext[s]], alpha[t * S + s] + beta[t * S + s]);
    }
    for (std::size_t k = 0; k < K; ++k) {
      const double y = std::exp(lp[t * K + k]);
      const double o = occ[k] == kNegInf ? 0.0 : std::exp(occ[k] - log_p);
      out.grad[t * K + k] = Real(y - o);
    }
  }
  return out;
}

/// RNN-T negative log-likelihood. joint_logits: [T x (U+1) x (V+1)] (or the
/// same values folded as [T*(U+1) x (V+1)] with T passed implicitly through
/// the leading axis when rank 3).
template <class Real>
LossResult<Real> rnnt_loss(const Tensor<Real>& joint_logits, const std::vector<int>& target, int blank) {
  if (joint_logits.rank() != 3) {
    throw ShapeError("rnnt_loss expects [T x (U+1) x classes], got " + shape_str(joint_logits.shape()));
  }
  const std::size_t T = joint_logits.dim(0), U1 = joint_logits.dim(1), K = joint_logits.dim(2);
  if (T == 0) throw std::invalid_argument("rnnt_loss needs at least one frame");
  if (U1 != target.size() + 1) {
    throw ShapeError("rnnt_loss lattice has " + std::to_string(U1) + " label positions for a target of length " +
                     std::to_string(target.size()));
  }
  if (blank < 0 || static_cast<std::size_t>(blank) >= K) {
    throw std::invalid_argument("blank id " + std::to_string(blank) + " outside " + std::to_string(K) + " classes");
  }
  for (int id : target) detail::check_label(id, K, blank);
  using detail::kNegInf;
  using detail::log_add;

  const std::size_t U = U1 - 1;
  const auto lp = detail::log_softmax_rows(joint_logits.data(), T * U1, K);
  auto at = [&](std::size_t t, std::size_t u, std::size_t k) { return lp[(t * U1 + u) * K + k]; };
  auto blank_lp = [&](std::size_t t, std::size_t u) { return at(t, u, blank); };
  auto label_lp = [&](std::size_t t, std::size_t u) { return at(t, u, target[u]); };

  std::vector<double> alpha(T * U1, kNegInf), beta(T * U1, kNegInf);
  alpha[0] = 0.0;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t u = 0; u < U1; ++u) {
      if (t == 0 && u == 0) continue;
      double a = kNegInf;
      if (t > 0) a = alpha[(t - 1) * U1 + u] + blank_lp(t - 1, u);
      if (u > 0) a = log_add(a, alpha[t * U1 + u - 1] + label_lp(t, u - 1));
      alpha[t * U1 + u] = a;
    }
  for (std::size_t t = T; t-- > 0;)
    for (std::size_t u = U1; u-- > 0;) {
      if (t == T - 1 && u == U) {
        beta[t * U1 + u] = blank_lp(t, u);
        continue;
      }
      double b = kNegInf;
      if (t + 1 < T) b = beta[(t + 1) * U1 + u] + blank_lp(t, u);
      if (u < U) b = log_add(b, beta[t * U1 + u + 1] + label_lp(t, u));
      beta[t * U1 + u] = b;
    }
  const double log_p = beta[0];

  LossResult<Real> out;
  out.value = -log_p;
  out.grad = Tensor<Real>(joint_logits.shape());
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t u = 0; u < U1; ++u) {
      const double a = alpha[t * U1 + u];
      const double visit = std::exp(a + beta[t * U1 + u] - log_p);
      double occ_blank = 0.0, occ_label = 0.0;
      if (t + 1 < T) {
        occ_blank = std::exp(a + blank_lp(t, u) + beta[(t + 1) * U1 + u] - log_p);
      } else if (u == U) {
        occ_blank = std::exp(a + blank_lp(t, u) - log_p);
      }
      if (u < U) occ_label = std::exp(a + label_lp(t, u) + beta[t * U1 + u + 1] - log_p);
      for (std::size_t k = 0; k < K; ++k) {
        double g = std::exp(at(t, u, k)) * visit;
        if (static_cast<int>(k) == blank) g -= occ_blank;
        if (u < U && static_cast<int>(k) == target[u]) g -= occ_label;
        out.grad[(t * U1 + u) * K + k] = Real(g);
      }
    }
  return out;
}

/// Enumerates every frame-level labelling, collapses repeats, drops blanks,
/// and sums the probability of those equal to `target`. Returns -ln of the
/// sum, or kUnreachable when no labelling collapses to the target.
template <class Real>
double ctc_oracle(const Tensor<Real>& logits, const std::vector<int>& target, int blank,
                  double max_paths = 1e6) {
  const std::size_t T = logits.dim(0), K = logits.dim(1);
  if (std::pow(double(K), double(T)) > max_paths) {
    throw std::invalid_argument("ctc_oracle instance too large: " + std::to_string(K) + "^" + std::to_string(T));
  }
  const auto lp = detail::log_softmax_rows(logits.data(), T, K);
  std::vector<int> path(T, 0);
  double total = 0.0;
  std::vector<int> collapsed;
  while (true) {
    collapsed.clear();
    int prev = -1;
    for (int k : path) {
      if (k != prev && k != blank) collapsed.push_back(k);
      prev = k;
    }
    if (collapsed == target) {
      double lsum = 0.0;
      for (std::size_t t = 0; t < T; ++t) lsum += lp[t * K + path[t]];
      total += std::exp(lsum);
    }
    std::size_t i = 0;
    while (i < T && ++path[i] == static_cast<int>(K)) path[i++] = 0;
    if (i == T) break;
  }
  return total > 0.0 ? -std::log(total) : kUnreachable;
}

/// Number of monotonic RNN-T lattice paths: choose the positions of U label
/// emissions among the T-1+U moves that precede the final blank.
inline double rnnt_path_count(std::size_t T, std::size_t U) {
  if (T == 0) return 0.0;
  double c = 1.0;
  for (std::size_t i = 1; i <= U; ++i) c = c * double(T - 1 + i) / double(i);
  return std::round(c);
}

/// Sums the probability of every monotonic lattice path explicitly.
template <class Real>
double rnnt_oracle(const Tensor<Real>& joint_logits, const std::vector<int>& target, int blank,
                   double max_paths = 1e6) {
  const std::size_t T = joint_logits.dim(0), U1 = joint_logits.dim(1), K = joint_logits.dim(2);
  if (T == 0) throw std::invalid_argument("rnnt_oracle needs at least one frame");
  if (U1 != target.size() + 1) throw ShapeError("rnnt_oracle lattice/target size mismatch");
  const std::size_t U = U1 - 1;
  if (rnnt_path_count(T, U) > max_paths) throw std::invalid_argument("rnnt_oracle instance too large");
  const auto lp = detail::log_softmax_rows(joint_logits.data(), T * U1, K);
  auto at = [&](std::size_t t, std::size_t u, int k) { return lp[(t * U1 + u) * K + k]; };

  double total = 0.0;
  std::function<void(std::size_t, std::size_t, double)> walk = [&](std::size_t t, std::size_t u, double acc) {
    if (t == T - 1 && u == U) {
      total += std::exp(acc + at(t, u, blank));
      return;
    }
    if (u < U) walk(t, u + 1, acc + at(t, u, target[u]));
    if (t + 1 < T) walk(t + 1, u, acc + at(t, u, blank));
  };
  walk(0, 0, 0.0);
  return total > 0.0 ? -std::log(total) : kUnreachable;
}

/// CTC term used inside the weighted objective: the final-layer loss, blended
/// with the mean of intermediate taps when any exist.
inline double ctc_term(double l_ctc_final, const std::vector<double>& l_ctc_intermediate,
                       const HybridWeights& w) {
  if (l_ctc_intermediate.empty()) return l_ctc_final;
  const double mean = std::accumulate(l_ctc_intermediate.begin(), l_ctc_intermediate.end(), 0.0) /
                      double(l_ctc_intermediate.size());
  return (1.0 - w.interctc_weight) * l_ctc_final + w.interctc_weight * mean;
}

/// (1 - alpha) * L_rnnt + alpha * L_ctc.
inline double hybrid_loss(double l_rnnt, double l_ctc_final, const std::vector<double>& l_ctc_intermediate,
                          const HybridWeights& w) {
  if (w.alpha < 0.0 || w.alpha > 1.0) throw std::invalid_argument("alpha must lie in [0,1]");
  return (1.0 - w.alpha) * l_rnnt + w.alpha * ctc_term(l_ctc_final, l_ctc_intermediate, w);
}

}  // namespace avfc
