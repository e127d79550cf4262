#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "avfc/frontends.hpp"
#include "avfc/graph.hpp"
#include "avfc/rng.hpp"

namespace avfc {

enum class Phase { kTrain, kInfer };

/// Which modality is zeroed before fusion. kBoth exists only to be rejected.
enum class Mask { kNone, kAudio, kVideo, kBoth };

inline const char* mask_name(Mask m) {
  switch (m) {
    case Mask::kNone: return "none";
    case Mask::kAudio: return "audio";
    case Mask::kVideo: return "video";
    case Mask::kBoth: return "both";
  }
  return "?";
}

struct ModelConfig {
  std::string modalities = "av";  // "av", "a" or "v"
  int d_model = 64;
  int n_audio_blocks = 2;
  int n_video_blocks = 2;
  int n_av_blocks = 2;
  int n_heads = 4;
  int conv_kernel = 7;
  int ff_expansion = 4;
  int fusion_expansion = 4;
  int max_rel_pos = 16;
  double dropout_rate = 0.1;
  double modality_dropout_p = 0.3;
  int interctc_every = 3;                 // 0 disables intermediate taps
  std::string interctc_placement = "all";  // "all", "unimodal" or "av"
  double alpha = 0.3;
  double interctc_weight = 0.5;
  std::string loss_type = "hybrid";  // "hybrid", "rnnt" or "ctc"
  int vocab_size = 16;               // V; blank id is V
  int pred_embed = 64;
  int decoder_hidden = 64;
  int joint_dim = 64;
  FrontendConfig frontend;

  bool has_audio() const { return modalities.find('a') != std::string::npos; }
  bool has_video() const { return modalities.find('v') != std::string::npos; }
  int blank() const { return vocab_size; }
  int classes() const { return vocab_size + 1; }

  void validate() const {
    frontend.validate();
    if (modalities != "av" && modalities != "a" && modalities != "v") {
      throw std::invalid_argument("modalities must be av, a or v");
    }
    if (d_model <= 0 || n_heads <= 0 || d_model % n_heads) {
      throw std::invalid_argument("d_model must be a positive multiple of n_heads");
    }
    if (n_audio_blocks < 0 || n_video_blocks < 0 || n_av_blocks < 0 || conv_kernel <= 0 ||
        conv_kernel % 2 == 0 || ff_expansion <= 0 || fusion_expansion <= 0 || vocab_size <= 0 ||
        pred_embed <= 0 || decoder_hidden <= 0 || joint_dim <= 0 || max_rel_pos <= 0 || interctc_every < 0) {
      throw std::invalid_argument("model sizes must be positive (conv kernel odd)");
    }
    if (modality_dropout_p < 0.0 || modality_dropout_p > 1.0) {
      throw std::invalid_argument("modality_dropout_p must lie in [0,1]");
    }
    if (alpha < 0.0 || alpha > 1.0 || interctc_weight < 0.0 || interctc_weight > 1.0) {
      throw std::invalid_argument("alpha and interctc_weight must lie in [0,1]");
    }
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw std::invalid_argument("dropout_rate must lie in [0,1)");
    if (loss_type != "hybrid" && loss_type != "rnnt" && loss_type != "ctc") {
      throw std::invalid_argument("loss_type must be hybrid, rnnt or ctc");
    }
    if (interctc_placement != "all" && interctc_placement != "unimodal" && interctc_placement != "av") {
      throw std::invalid_argument("interctc_placement must be all, unimodal or av");
    }
  }

  /// Effective CTC weight for the configured loss type.
  double effective_alpha() const {
    if (loss_type == "rnnt") return 0.0;
    if (loss_type == "ctc") return 1.0;
    return alpha;
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FrontendConfig, sample_rate, n_mels, window_ms, hop_ms,
                                                audio_subsample_layers, subsample_kernel, fps, visual_stem_kernel,
                                                visual_input_pool, visual_stem_channels, visual_channels,
                                                visual_residual_blocks, visual_first_block_stride,
                                                visual_temporal_kernel, crop)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, modalities, d_model, n_audio_blocks, n_video_blocks,
                                                n_av_blocks, n_heads, conv_kernel, ff_expansion, fusion_expansion,
                                                max_rel_pos, dropout_rate, modality_dropout_p, interctc_every,
                                                interctc_placement, alpha, interctc_weight, loss_type, vocab_size,
                                                pred_embed, decoder_hidden, joint_dim, frontend)

/// The 512-d, 10/10/8-block audio-visual configuration with a 640-wide
/// single-layer LSTM decoder. Only ever instantiated for counting.
inline ModelConfig full_scale_config() {
  ModelConfig c;
  c.d_model = 512;
  c.n_audio_blocks = 10;
  c.n_video_blocks = 10;
  c.n_av_blocks = 8;
  c.n_heads = 8;
  c.conv_kernel = 31;
  c.max_rel_pos = 64;
  c.vocab_size = 256;
  c.pred_embed = 640;
  c.decoder_hidden = 640;
  c.joint_dim = 640;
  c.frontend.visual_input_pool = 1;
  c.frontend.visual_stem_channels = 64;
  c.frontend.visual_channels = 256;
  c.frontend.visual_residual_blocks = 10;
  return c;
}

/// Deterministic seed source for the dropout nodes of one utterance graph.
struct DropoutStream {
  double rate = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;

  template <class Real>
  typename Graph<Real>::Id apply(Graph<Real>& g, typename Graph<Real>::Id x) {
    if (rate <= 0.0) return x;
    return g.dropout(x, rate, derive_seed(seed, {counter++}));
  }
};

// ------------------------------------------------------------------ conformer block

template <class Real>
void add_conformer_params(ParameterSet<Real>& p, const std::string& n, const ModelConfig& c, Rng& rng) {
  const std::size_t d = c.d_model, f = std::size_t(c.d_model) * c.ff_expansion;
  for (const char* ff : {".ff1", ".ff2"}) {
    add_layer_norm_params(p, n + ff + ".ln", d);
    add_linear_params(p, n + ff + ".l1", d, f, rng);
    add_linear_params(p, n + ff + ".l2", f, d, rng);
  }
  add_layer_norm_params(p, n + ".att.ln", d);
  for (const char* w : {".att.q", ".att.k", ".att.v", ".att.o"}) add_linear_params(p, n + w, d, d, rng);
  p.add(n + ".att.pos", Tensor<Real>({std::size_t(c.n_heads), std::size_t(2 * c.max_rel_pos + 1)}));
  add_layer_norm_params(p, n + ".conv.ln", d);
  add_linear_params(p, n + ".conv.pw1", d, 2 * d, rng);
  p.add(n + ".conv.dw", glorot<Real>({std::size_t(c.conv_kernel), d}, c.conv_kernel, c.conv_kernel, rng));
  p.add(n + ".conv.dw_b", Tensor<Real>({d}));
  add_layer_norm_params(p, n + ".conv.ln2", d);
  add_linear_params(p, n + ".conv.pw2", d, d, rng);
  add_layer_norm_params(p, n + ".out.ln", d);
}

/// Parameters per block:
///   feed-forward (x2): 2d (norm) + d*f + f + f*d + d
///   attention:         2d + 4(d^2 + d) + heads * (2 max_rel + 1)
///   convolution:       2d + (2d^2 + 2d) + (k d + d) + 2d + (d^2 + d)
///   final norm:        2d
inline std::size_t conformer_param_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, f = d * c.ff_expansion, k = c.conv_kernel;
  const std::size_t ff = 2 * d + d * f + f + f * d + d;
  const std::size_t att = 2 * d + 4 * (d * d + d) + std::size_t(c.n_heads) * (2 * c.max_rel_pos + 1);
  const std::size_t conv = 2 * d + (2 * d * d + 2 * d) + (k * d + d) + 2 * d + (d * d + d);
  return 2 * ff + att + conv + 2 * d;
}

/// Half-step feed-forward, relative-position self-attention, depthwise
/// convolution module, half-step feed-forward, final layer norm.
template <class Real>
typename Graph<Real>::Id conformer_block(Graph<Real>& g, typename Graph<Real>::Id x, const std::string& n,
                                         const ModelConfig& c, DropoutStream& drop) {
  using Id = typename Graph<Real>::Id;
  auto feed_forward = [&](Id in, const std::string& ff) {
    Id h = layer_norm(g, in, n + ff + ".ln");
    h = g.swish(linear(g, h, n + ff + ".l1"));
    h = drop.apply(g, h);
    h = linear(g, h, n + ff + ".l2");
    return drop.apply(g, h);
  };
  x = g.add(x, g.scale(feed_forward(x, ".ff1"), Real(0.5)));

  Id h = layer_norm(g, x, n + ".att.ln");
  Id att = g.rel_attention(linear(g, h, n + ".att.q"), linear(g, h, n + ".att.k"), linear(g, h, n + ".att.v"),
                           g.parameter(n + ".att.pos"), std::size_t(c.n_heads), std::size_t(c.max_rel_pos));
  x = g.add(x, drop.apply(g, linear(g, att, n + ".att.o")));

  h = layer_norm(g, x, n + ".conv.ln");
  h = g.glu(linear(g, h, n + ".conv.pw1"));
  h = g.depthwise_conv1d(h, g.parameter(n + ".conv.dw"), 1, std::size_t(c.conv_kernel - 1) / 2);
  h = g.add_bias(h, g.parameter(n + ".conv.dw_b"));
  h = g.swish(layer_norm(g, h, n + ".conv.ln2"));
  h = drop.apply(g, linear(g, h, n + ".conv.pw2"));
  x = g.add(x, h);

  x = g.add(x, g.scale(feed_forward(x, ".ff2"), Real(0.5)));
  return layer_norm(g, x, n + ".out.ln");
}

// ------------------------------------------------------------------ modality dropout / fusion

/// Training-time draw: with probability p one modality, chosen 50/50, is masked.
inline Mask draw_modality_mask(double p, Rng& rng) {
  if (uniform01(rng) >= p) return Mask::kNone;
  return uniform01(rng) < 0.5 ? Mask::kAudio : Mask::kVideo;
}

inline Mask resolve_mask(double p, Phase phase, Mask requested, Rng& rng) {
  if (requested == Mask::kBoth) throw std::invalid_argument("cannot mask both modalities");
  if (phase == Phase::kTrain) {
    if (requested != Mask::kNone) throw std::invalid_argument("explicit masks are an inference-time option");
    return draw_modality_mask(p, rng);
  }
  return requested;
}

/// Replaces the masked stream by zeros for the whole utterance; the
/// surviving stream passes through unscaled.
template <class Real>
std::pair<typename Graph<Real>::Id, typename Graph<Real>::Id> modality_dropout(
    Graph<Real>& g, typename Graph<Real>::Id a, typename Graph<Real>::Id v, double p, Phase phase, Mask mask,
    Rng& rng, Mask* applied = nullptr) {
  const Mask m = resolve_mask(p, phase, mask, rng);
  if (applied) *applied = m;
  if (m == Mask::kAudio) a = g.constant(Tensor<Real>(g.shape(a)), "masked audio");
  if (m == Mask::kVideo) v = g.constant(Tensor<Real>(g.shape(v)), "masked video");
  return {a, v};
}

template <class Real>
void add_fusion_params(ParameterSet<Real>& p, const ModelConfig& c, Rng& rng) {
  const std::size_t d = c.d_model, f = d * c.fusion_expansion;
  add_linear_params(p, "fuse.l1", 2 * d, f, rng);
  add_linear_params(p, "fuse.l2", f, d, rng);
}

inline std::size_t fusion_param_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, f = d * c.fusion_expansion;
  return 2 * d * f + f + f * d + d;
}

/// Early fusion: truncate to the shorter stream, concatenate features, and
/// project back to d_model through a feed-forward network.
template <class Real>
typename Graph<Real>::Id fuse(Graph<Real>& g, typename Graph<Real>::Id a, typename Graph<Real>::Id v) {
  const std::size_t ta = g.shape(a)[0], tv = g.shape(v)[0];
  if ((ta > tv ? ta - tv : tv - ta) > 2) {
    throw std::invalid_argument("fuse: audio/video lengths " + std::to_string(ta) + " and " + std::to_string(tv) +
                                " differ by more than 2 steps");
  }
  const std::size_t t = std::min(ta, tv);
  if (ta != t) a = g.slice_rows(a, 0, t);
  if (tv != t) v = g.slice_rows(v, 0, t);
  auto x = g.concat(a, v);
  x = g.swish(linear(g, x, "fuse.l1"));
  return linear(g, x, "fuse.l2");
}

// ------------------------------------------------------------------ full encoder

struct Tap {
  std::string encoder;
  int block = 0;  // 1-based index inside its encoder; always a multiple of interctc_every
  std::uint32_t logits = 0;
};

struct EncoderOutput {
  std::uint32_t features = 0;
  std::vector<Tap> taps;
  Mask applied_mask = Mask::kNone;
};

/// Graph node ids of prepared inputs; a stream may be absent when its
/// modality is masked (or not part of the model).
struct EncoderInputs {
  std::optional<std::uint32_t> mel;    // [T x n_mels], normalized
  std::optional<std::uint32_t> video;  // [T_v x h x w x 1], prepared
  std::size_t mel_frames = 0;          // used for the masked-stream length
  std::size_t video_frames = 0;
};

template <class Real>
void add_encoder_params(ParameterSet<Real>& p, const ModelConfig& c, Rng& rng) {
  const std::size_t d = c.d_model;
  if (c.has_audio()) {
    add_audio_subsample_params(p, "audio.sub", c.frontend, d, rng);
    for (int i = 0; i < c.n_audio_blocks; ++i) add_conformer_params(p, "audio.blk" + std::to_string(i), c, rng);
  }
  if (c.has_video()) {
    add_visual_frontend_params(p, "video.front", c.frontend, d, rng);
    for (int i = 0; i < c.n_video_blocks; ++i) add_conformer_params(p, "video.blk" + std::to_string(i), c, rng);
  }
  if (c.has_audio() && c.has_video()) add_fusion_params(p, c, rng);
  for (int i = 0; i < c.n_av_blocks; ++i) add_conformer_params(p, "av.blk" + std::to_string(i), c, rng);
  add_linear_params(p, "ctc", d, std::size_t(c.classes()), rng);
}

inline std::size_t encoder_param_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  std::size_t n = 0;
  if (c.has_audio()) n += audio_subsample_param_count(c.frontend, d) + c.n_audio_blocks * conformer_param_count(c);
  if (c.has_video()) n += visual_frontend_param_count(c.frontend, d) + c.n_video_blocks * conformer_param_count(c);
  if (c.has_audio() && c.has_video()) n += fusion_param_count(c);
  n += c.n_av_blocks * conformer_param_count(c);
  return n + d * c.classes() + c.classes();
}

/// Whether block k (1-based) of an encoder with n blocks emits a CTC tap.
inline bool is_tap(const ModelConfig& c, bool final_encoder, int k, int n) {
  if (c.interctc_every <= 0 || k % c.interctc_every) return false;
  if (final_encoder) return c.interctc_placement != "unimodal" && k < n;
  return c.interctc_placement != "av" && k <= n;
}

template <class Real>
typename Graph<Real>::Id ctc_head(Graph<Real>& g, typename Graph<Real>::Id x) {
  return linear(g, x, "ctc");
}

template <class Real>
typename Graph<Real>::Id run_blocks(Graph<Real>& g, typename Graph<Real>::Id x, const std::string& prefix, int n,
                                    bool final_encoder, const ModelConfig& c, DropoutStream& drop,
                                    std::vector<Tap>& taps) {
  for (int i = 0; i < n; ++i) {
    x = conformer_block(g, x, prefix + ".blk" + std::to_string(i), c, drop);
    if (is_tap(c, final_encoder, i + 1, n)) taps.push_back({prefix, i + 1, ctc_head(g, x)});
  }
  return x;
}

/// Unimodal encoders -> modality dropout -> fusion -> audio-visual encoder.
/// A masked stream's encoder is not evaluated: its fusion input is zeros
/// of the stream's encoder-rate length (the other stream's length when its
/// frame count is unknown).
template <class Real>
EncoderOutput model_forward(Graph<Real>& g, const EncoderInputs& in, const ModelConfig& c, Phase phase, Mask mask,
                            Rng& rng, std::uint64_t dropout_seed) {
  DropoutStream drop{phase == Phase::kTrain ? c.dropout_rate : 0.0, dropout_seed, 0};
  EncoderOutput out;
  const bool av = c.has_audio() && c.has_video();
  Mask m = av ? resolve_mask(c.modality_dropout_p, phase, mask, rng) : Mask::kNone;
  if (!av && mask != Mask::kNone) throw std::invalid_argument("masking requires an audio-visual model");
  out.applied_mask = m;

  const std::size_t d = c.d_model;
  std::optional<typename Graph<Real>::Id> a, v;
  if (c.has_audio()) {
    std::size_t ta = subsampled_length(in.mel_frames, c.frontend.audio_subsample_layers);
    if (in.mel_frames == 0) ta = visual_output_length(in.video_frames);
    if (m == Mask::kAudio) {
      a = g.constant(Tensor<Real>({ta, d}), "masked audio");
    } else {
      if (!in.mel) throw std::invalid_argument("model_forward: audio input required");
      auto x = audio_subsample(g, *in.mel, "audio.sub", c.frontend);
      a = run_blocks(g, x, "audio", c.n_audio_blocks, !av, c, drop, out.taps);
    }
  }
  if (c.has_video()) {
    std::size_t tv = visual_output_length(in.video_frames);
    if (in.video_frames == 0) tv = subsampled_length(in.mel_frames, c.frontend.audio_subsample_layers);
    if (m == Mask::kVideo) {
      v = g.constant(Tensor<Real>({tv, d}), "masked video");
    } else {
      if (!in.video) throw std::invalid_argument("model_forward: video input required");
      auto x = visual_frontend(g, *in.video, "video.front", c.frontend);
      v = run_blocks(g, x, "video", c.n_video_blocks, !av, c, drop, out.taps);
    }
  }
  typename Graph<Real>::Id x = av ? fuse(g, *a, *v) : (a ? *a : *v);
  out.features = run_blocks(g, x, "av", c.n_av_blocks, true, c, drop, out.taps);
  return out;
}

}  // namespace avfc
