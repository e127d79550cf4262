#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "avfc/graph.hpp"
#include "avfc/losses.hpp"
#include "avfc/model.hpp"
#include "avfc/rng.hpp"

namespace avfc {

// Self-checks behind the oracle-check and grad-check commands.

struct OracleSweep {
  std::size_t instances = 0;    // (shape, draw) pairs evaluated
  std::size_t unreachable = 0;  // targets no alignment can produce; both sides must agree
  std::size_t mismatches = 0;   // reachability disagreements
  double max_abs_diff = 0.0;
};

namespace detail {

inline std::vector<int> random_target(std::size_t U, int V, Rng& rng) {
  std::vector<int> y(U);
  for (auto& k : y) k = int(uniform_int(rng, 0, V - 1));
  return y;
}

inline Tensor<double> random_logits(Shape shape, Rng& rng, double scale = 3.0) {
  Tensor<double> x(std::move(shape));
  for (auto& v : x.storage()) v = scale * normal(rng);
  return x;
}

inline void record(OracleSweep& s, double dp, double oracle) {
  ++s.instances;
  if (std::isinf(dp) || std::isinf(oracle)) {
    if (std::isinf(dp) && std::isinf(oracle)) {
      ++s.unreachable;
    } else {
      ++s.mismatches;
    }
    return;
  }
  s.max_abs_diff = std::max(s.max_abs_diff, std::abs(dp - oracle));
}

}  // namespace detail

/// Every (T, U, V) with 1 <= T <= max_t, 0 <= U <= max_u, 1 <= V <= max_v,
/// `draws` random logit tensors and targets each. Blank is id V.
inline OracleSweep ctc_oracle_sweep(std::size_t max_t, std::size_t max_u, int max_v, int draws, std::uint64_t seed) {
  OracleSweep s;
  for (std::size_t T = 1; T <= max_t; ++T)
    for (std::size_t U = 0; U <= max_u; ++U)
      for (int V = 1; V <= max_v; ++V) {
        Rng rng = make_rng(seed, {0xC7C, T, U, std::uint64_t(V)});
        for (int d = 0; d < draws; ++d) {
          const auto y = detail::random_target(U, V, rng);
          const auto x = detail::random_logits({T, std::size_t(V + 1)}, rng);
          const double dp = T < ctc_min_frames(y) ? kUnreachable : ctc_loss(x, y, V).value;
          detail::record(s, dp, ctc_oracle(x, y, V));
        }
      }
  return s;
}

inline OracleSweep rnnt_oracle_sweep(std::size_t max_t, std::size_t max_u, int max_v, int draws, std::uint64_t seed) {
  OracleSweep s;
  for (std::size_t T = 1; T <= max_t; ++T)
    for (std::size_t U = 0; U <= max_u; ++U)
      for (int V = 1; V <= max_v; ++V) {
        Rng rng = make_rng(seed, {0x121, T, U, std::uint64_t(V)});
        for (int d = 0; d < draws; ++d) {
          const auto y = detail::random_target(U, V, rng);
          const auto x = detail::random_logits({T, U + 1, std::size_t(V + 1)}, rng);
          detail::record(s, rnnt_loss(x, y, V).value, rnnt_oracle(x, y, V));
        }
      }
  return s;
}

struct GradCheckReport {
  GradCheckResult ctc;    // CTC loss w.r.t. logits
  GradCheckResult rnnt;   // RNN-T loss w.r.t. joint logits
  GradCheckResult model;  // hybrid objective w.r.t. model parameters
};

/// A miniature audio-visual model small enough for finite differences in
/// double precision: every block type, intermediate taps and both losses.
inline ModelConfig grad_check_model() {
  ModelConfig c;
  c.d_model = 8;
  c.n_audio_blocks = c.n_video_blocks = c.n_av_blocks = 1;
  c.n_heads = 2;
  c.conv_kernel = 3;
  c.ff_expansion = 2;
  c.fusion_expansion = 2;
  c.max_rel_pos = 3;
  c.dropout_rate = 0.0;
  c.modality_dropout_p = 0.0;
  c.interctc_every = 1;
  c.vocab_size = 4;
  c.pred_embed = c.decoder_hidden = c.joint_dim = 6;
  c.frontend.n_mels = 8;
  c.frontend.visual_stem_channels = 8;
  c.frontend.visual_channels = 8;
  c.frontend.visual_residual_blocks = 2;
  return c;
}

/// Synthetic features for grad_check_model(): 40 mel frames and 10 video
/// frames (both 5 encoder frames), target of 3 tokens.
inline UtteranceFeatures<double> grad_check_features(const ModelConfig& c, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0xF3A});
  UtteranceFeatures<double> f;
  f.id = "grad-check";
  f.mel = detail::random_logits({40, std::size_t(c.frontend.n_mels)}, rng);
  const std::size_t side = std::size_t(c.frontend.crop / c.frontend.visual_input_pool);
  Tensor<double> v({10, side, side, 1});
  for (auto& x : v.storage()) x = normal(rng);
  f.video = std::move(v);
  f.mel_frames = 40;
  f.video_frames = 10;
  f.target = {0, 2, 1};
  return f;
}

inline GradCheckReport run_grad_checks(std::size_t coords, double epsilon, std::uint64_t seed) {
  GradCheckReport r;
  Rng rng = make_rng(seed, {0x6C4});
  {
    Graph<double> g;
    const auto x = g.input("logits", detail::random_logits({7, 5}, rng, 1.0));
    const auto l = ctc_loss_node(g, x, {1, 1, 3}, 4, "ctc");
    r.ctc = grad_check(g, l, static_cast<ParameterSet<double>*>(nullptr), {{"logits", g.value(x)}}, epsilon,
                       uniform_sampler(coords, seed));
  }
  {
    Graph<double> g;
    const auto x = g.input("joint", detail::random_logits({5, 4, 5}, rng, 1.0));
    const auto l = rnnt_loss_node(g, x, {2, 0, 2}, 4);
    r.rnnt = grad_check(g, l, static_cast<ParameterSet<double>*>(nullptr), {{"joint", g.value(x)}}, epsilon,
                        uniform_sampler(coords, seed + 1));
  }
  {
    const auto c = grad_check_model();
    auto params = init_parameters<double>(c, seed);
    const auto f = grad_check_features(c, seed);
    Graph<double> g(&params);
    Rng unused(0);
    const auto nodes = build_utterance_loss(g, f, c, Phase::kInfer, Mask::kNone, unused, 0);
    r.model = grad_check(g, nodes.total, &params, {}, epsilon, uniform_sampler(coords, seed + 2));
  }
  return r;
}

}  // namespace avfc
