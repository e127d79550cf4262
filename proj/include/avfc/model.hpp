#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "avfc/decode.hpp"
#include "avfc/encoder.hpp"
#include "avfc/losses.hpp"

namespace avfc {

/// Network inputs for one utterance. Either stream may be absent when the
/// model or the inference mask does not need it.
template <class Real>
struct UtteranceFeatures {
  std::string id;
  std::string lang;
  std::optional<Tensor<Real>> mel;    // [T x n_mels], normalized
  std::optional<Tensor<Real>> video;  // [T_v x h x w x 1], prepared
  std::size_t mel_frames = 0;
  std::size_t video_frames = 0;
  std::vector<int> target;
};

template <class Real>
ParameterSet<Real> init_parameters(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  ParameterSet<Real> p;
  Rng enc_rng = make_rng(seed, {0xE4C});
  add_encoder_params(p, c, enc_rng);
  Rng dec_rng = make_rng(seed, {0xDEC});
  add_decoder_params(p, c, dec_rng);
  return p;
}

/// Total parameter count implied by a configuration; equals
/// init_parameters(c).count().
inline std::size_t analytic_parameter_count(const ModelConfig& c) {
  return encoder_param_count(c) + decoder_param_count(c);
}

template <class Real>
EncoderInputs bind_features(Graph<Real>& g, const UtteranceFeatures<Real>& f) {
  EncoderInputs in;
  if (f.mel) in.mel = g.constant(*f.mel, "mel");
  if (f.video) in.video = g.constant(*f.video, "video");
  in.mel_frames = f.mel ? f.mel->rows() : f.mel_frames;
  in.video_frames = f.video ? f.video->rows() : f.video_frames;
  return in;
}

template <class Real>
typename Graph<Real>::Id ctc_loss_node(Graph<Real>& g, typename Graph<Real>::Id logits, const std::vector<int>& target,
                                       int blank, const std::string& label) {
  return g.scalar_loss(
      logits,
      [target, blank](const Tensor<Real>& x) {
        auto r = ctc_loss(x, target, blank);
        return std::make_pair(r.value, std::move(r.grad));
      },
      label);
}

template <class Real>
typename Graph<Real>::Id rnnt_loss_node(Graph<Real>& g, typename Graph<Real>::Id joint, const std::vector<int>& target,
                                        int blank) {
  return g.scalar_loss(
      joint,
      [target, blank](const Tensor<Real>& x) {
        auto r = rnnt_loss(x, target, blank);
        return std::make_pair(r.value, std::move(r.grad));
      },
      "rnnt");
}

struct LossNodes {
  std::uint32_t total = 0;
  std::optional<std::uint32_t> rnnt;
  std::optional<std::uint32_t> ctc_final;
  std::vector<std::uint32_t> taps;
  EncoderOutput encoder;
};

/// Builds the training objective of one utterance:
///   (1 - a) L_rnnt + a ((1 - w) L_ctc + w mean(L_tap))
/// with a = 0 or 1 for pure transducer or pure CTC training.
template <class Real>
LossNodes build_utterance_loss(Graph<Real>& g, const UtteranceFeatures<Real>& f, const ModelConfig& c, Phase phase,
                               Mask mask, Rng& rng, std::uint64_t dropout_seed) {
  LossNodes out;
  out.encoder = model_forward(g, bind_features(g, f), c, phase, mask, rng, dropout_seed);
  const double alpha = c.effective_alpha();
  const int blank = c.blank();
  std::optional<typename Graph<Real>::Id> total;
  if (alpha < 1.0) {
    auto pred = prediction_network(g, f.target, blank);
    out.rnnt = rnnt_loss_node(g, joint_network(g, out.encoder.features, pred), f.target, blank);
    total = g.scale(*out.rnnt, Real(1.0 - alpha));
  }
  if (alpha > 0.0) {
    out.ctc_final = ctc_loss_node(g, ctc_head(g, out.encoder.features), f.target, blank, "ctc");
    auto ctc = *out.ctc_final;
    if (!out.encoder.taps.empty()) {
      const double w = c.interctc_weight;
      std::optional<typename Graph<Real>::Id> tap_sum;
      for (const auto& tap : out.encoder.taps) {
        auto l = ctc_loss_node(g, tap.logits, f.target, blank, "ctc@" + tap.encoder + std::to_string(tap.block));
        out.taps.push_back(l);
        tap_sum = tap_sum ? g.add(*tap_sum, l) : l;
      }
      ctc = g.add(g.scale(ctc, Real(1.0 - w)), g.scale(*tap_sum, Real(w / double(out.taps.size()))));
    }
    auto term = g.scale(ctc, Real(alpha));
    total = total ? g.add(*total, term) : term;
  }
  out.total = *total;
  return out;
}

/// Inference-mode encoder features [T' x d].
template <class Real>
Tensor<Real> encode(const ParameterSet<Real>& params, const UtteranceFeatures<Real>& f, const ModelConfig& c,
                    Mask mask) {
  Graph<Real> g(&params);
  Rng unused(0);
  auto out = model_forward(g, bind_features(g, f), c, Phase::kInfer, mask, unused, 0);
  return g.value(out.features);
}

enum class Decoder { kRnnt, kCtc };

template <class Real>
Hypothesis decode_utterance(const ParameterSet<Real>& params, const UtteranceFeatures<Real>& f, const ModelConfig& c,
                            Mask mask, Decoder decoder, std::optional<TokenRange> range) {
  const auto enc = encode(params, f, c, mask);
  if (decoder == Decoder::kRnnt) return rnnt_greedy(enc, params, c.blank(), range);
  Graph<Real> g(&params);
  auto logits = ctc_head(g, g.constant(enc));
  Hypothesis h;
  h.ids = ctc_greedy(g.value(logits), c.blank(), range);
  return h;
}

}  // namespace avfc
