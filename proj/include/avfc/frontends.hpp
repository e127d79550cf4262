#pragma once

// Audio and visual front-ends. The non-parametric parts (log-mel, per-feature
// normalization, frame normalization and pooling) are plain functions; the
// trainable parts (strided depthwise subsampling, the 3-D visual stem and its
// residual stack) are graph builders that read parameters by name.

#include <array>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "avfc/graph.hpp"
#include "avfc/rng.hpp"
#include "avfc/tensor.hpp"

namespace avfc {

struct Waveform {
  std::vector<float> samples;
  int sample_rate = 16000;

  double duration() const { return double(samples.size()) / sample_rate; }
};

/// Grayscale frames, T x H x W row-major, intensities in [0,1].
struct VideoClip {
  std::vector<float> frames;
  std::size_t num_frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  int fps = 25;

  float& at(std::size_t t, std::size_t y, std::size_t x) {
    return frames[(t * height + y) * width + x];
  }
  float at(std::size_t t, std::size_t y, std::size_t x) const {
    return frames[(t * height + y) * width + x];
  }
  std::size_t frame_size() const { return height * width; }
};

struct FrontendConfig {
  int sample_rate = 16000;
  int n_mels = 80;
  double window_ms = 25.0;
  double hop_ms = 10.0;
  int audio_subsample_layers = 3;  // each stride 2
  int subsample_kernel = 3;
  int fps = 25;
  std::array<int, 3> visual_stem_kernel{5, 7, 7};
  int visual_input_pool = 4;  // average-pool factor applied to the crop before the stem
  int visual_stem_channels = 8;
  int visual_channels = 8;
  int visual_residual_blocks = 2;
  int visual_first_block_stride = 2;
  int visual_temporal_kernel = 3;
  int crop = 88;

  int window_samples() const { return int(std::lround(window_ms * sample_rate / 1000.0)); }
  int hop_samples() const { return int(std::lround(hop_ms * sample_rate / 1000.0)); }
  int fft_size() const { return int(std::bit_ceil(unsigned(window_samples()))); }

  /// Encoder-rate period of each stream in milliseconds.
  double audio_period_ms() const { return hop_ms * double(1 << audio_subsample_layers); }
  double video_period_ms() const { return 1000.0 / fps * 2.0; }

  void validate() const {
    if (sample_rate <= 0 || n_mels <= 0 || window_ms <= 0 || hop_ms <= 0 || fps <= 0) {
      throw std::invalid_argument("frontend rates and sizes must be positive");
    }
    if (std::abs(audio_period_ms() - 80.0) > 1e-9 || std::abs(video_period_ms() - 80.0) > 1e-9) {
      throw std::invalid_argument("front-end strides must yield an 80 ms encoder period");
    }
    if (visual_input_pool <= 0 || crop % visual_input_pool) {
      throw std::invalid_argument("crop must be a multiple of the visual input pool factor");
    }
  }
};

// ------------------------------------------------------------------ file formats
//
// Waveform file: "AVPC" | u32 sample_rate | u32 num_samples | int16 LE samples.
// Samples decode as s / 32768 and encode as round(x * 32768) clamped to int16.
//
// Clip file: "AVCL" | u32 T | u32 H | u32 W | u32 fps | T*H*W bytes, row-major,
// intensity = byte / 255.

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t pos) {
  if (pos + 4 > in.size()) throw std::runtime_error("truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(in[pos + i])) << (8 * i);
  return v;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(bytes.data(), std::streamsize(bytes.size()));
  if (!f) throw std::runtime_error("short write to " + path.string());
}

}  // namespace detail

inline std::int16_t quantize_sample(float x) {
  const long q = std::lround(double(x) * 32768.0);
  return std::int16_t(std::clamp(q, -32768L, 32767L));
}

inline std::string encode_waveform(const Waveform& w) {
  std::string out = "AVPC";
  detail::put_u32(out, std::uint32_t(w.sample_rate));
  detail::put_u32(out, std::uint32_t(w.samples.size()));
  for (float x : w.samples) {
    const auto q = std::uint16_t(quantize_sample(x));
    out.push_back(char(q & 0xFF));
    out.push_back(char(q >> 8));
  }
  return out;
}

inline Waveform decode_waveform(const std::string& bytes) {
  if (bytes.size() < 12 || bytes.compare(0, 4, "AVPC") != 0) {
    throw std::runtime_error("not a waveform file (bad magic)");
  }
  Waveform w;
  w.sample_rate = int(detail::get_u32(bytes, 4));
  const std::uint32_t n = detail::get_u32(bytes, 8);
  if (bytes.size() != 12 + 2 * std::size_t(n)) throw std::runtime_error("waveform length mismatch");
  if (w.sample_rate <= 0) throw std::runtime_error("waveform sample rate must be positive");
  w.samples.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto lo = std::uint8_t(bytes[12 + 2 * i]), hi = std::uint8_t(bytes[13 + 2 * i]);
    const auto q = std::int16_t(std::uint16_t(lo | (hi << 8)));
    w.samples[i] = float(q) / 32768.0f;
  }
  return w;
}

inline std::string encode_clip(const VideoClip& c) {
  std::string out = "AVCL";
  detail::put_u32(out, std::uint32_t(c.num_frames));
  detail::put_u32(out, std::uint32_t(c.height));
  detail::put_u32(out, std::uint32_t(c.width));
  detail::put_u32(out, std::uint32_t(c.fps));
  out.reserve(out.size() + c.frames.size());
  for (float v : c.frames) {
    out.push_back(char(std::uint8_t(std::lround(std::clamp(double(v), 0.0, 1.0) * 255.0))));
  }
  return out;
}

inline VideoClip decode_clip(const std::string& bytes) {
  if (bytes.size() < 20 || bytes.compare(0, 4, "AVCL") != 0) {
    throw std::runtime_error("not a clip file (bad magic)");
  }
  VideoClip c;
  c.num_frames = detail::get_u32(bytes, 4);
  c.height = detail::get_u32(bytes, 8);
  c.width = detail::get_u32(bytes, 12);
  c.fps = int(detail::get_u32(bytes, 16));
  if (bytes.size() != 20 + c.num_frames * c.height * c.width) throw std::runtime_error("clip length mismatch");
  c.frames.resize(c.num_frames * c.height * c.width);
  for (std::size_t i = 0; i < c.frames.size(); ++i) c.frames[i] = float(std::uint8_t(bytes[20 + i])) / 255.0f;
  return c;
}

inline void write_waveform(const std::filesystem::path& p, const Waveform& w) {
  detail::write_file(p, encode_waveform(w));
}
inline Waveform read_waveform(const std::filesystem::path& p) { return decode_waveform(detail::read_file(p)); }
inline void write_clip(const std::filesystem::path& p, const VideoClip& c) { detail::write_file(p, encode_clip(c)); }
inline VideoClip read_clip(const std::filesystem::path& p) { return decode_clip(detail::read_file(p)); }

// ------------------------------------------------------------------ log-mel

inline double hz_to_mel(double hz) { return 1127.0 * std::log1p(hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * std::expm1(mel / 1127.0); }

/// Center frequencies (Hz) of the triangular mel filters.
inline std::vector<double> mel_center_frequencies(const FrontendConfig& cfg) {
  const double top = hz_to_mel(cfg.sample_rate / 2.0);
  std::vector<double> out(cfg.n_mels);
  for (int m = 0; m < cfg.n_mels; ++m) out[m] = mel_to_hz(top * (m + 1) / (cfg.n_mels + 1));
  return out;
}

namespace detail {

/// In-place iterative radix-2 FFT; size must be a power of two.
inline void fft(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  constexpr double pi = 3.14159265358979323846;
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * pi / double(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        const auto u = a[i + j], v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

struct MelPlan {
  std::vector<double> window;
  // Sparse triangular weights per filter: first bin and weights.
  std::vector<std::size_t> first;
  std::vector<std::vector<double>> weights;
};

inline const MelPlan& mel_plan(const FrontendConfig& cfg) {
  thread_local std::map<std::array<int, 4>, std::unique_ptr<MelPlan>> cache;
  const std::array<int, 4> key{cfg.sample_rate, cfg.n_mels, cfg.window_samples(), cfg.fft_size()};
  auto& slot = cache[key];
  if (slot) return *slot;
  slot = std::make_unique<MelPlan>();
  const int win = cfg.window_samples(), nfft = cfg.fft_size();
  constexpr double pi = 3.14159265358979323846;
  slot->window.resize(win);
  for (int i = 0; i < win; ++i) slot->window[i] = 0.5 - 0.5 * std::cos(2.0 * pi * i / (win - 1));
  const double top = hz_to_mel(cfg.sample_rate / 2.0);
  const std::size_t bins = nfft / 2 + 1;
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double lo = mel_to_hz(top * m / (cfg.n_mels + 1));
    const double c = mel_to_hz(top * (m + 1) / (cfg.n_mels + 1));
    const double hi = mel_to_hz(top * (m + 2) / (cfg.n_mels + 1));
    std::size_t first = bins;
    std::vector<double> w;
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = double(k) * cfg.sample_rate / nfft;
      const double v = std::max(0.0, std::min((f - lo) / (c - lo), (hi - f) / (hi - c)));
      if (v > 0.0) {
        if (first == bins) first = k;
        w.resize(k - first + 1, 0.0);
        w[k - first] = v;
      }
    }
    slot->first.push_back(first == bins ? 0 : first);
    slot->weights.push_back(std::move(w));
  }
  return *slot;
}

}  // namespace detail

inline constexpr double kLogMelFloor = 1e-10;

/// Natural-log mel filterbank energies, [T x n_mels] with
/// T = floor((len - window) / hop) + 1. Energies are floored at 1e-10.
template <class Real = float>
Tensor<Real> log_mel(const Waveform& wave, const FrontendConfig& cfg) {
  if (wave.samples.empty()) throw std::invalid_argument("log_mel: empty waveform");
  if (wave.sample_rate != cfg.sample_rate) {
    throw std::invalid_argument("log_mel: waveform rate " + std::to_string(wave.sample_rate) +
                                " differs from configured " + std::to_string(cfg.sample_rate));
  }
  const std::size_t win = cfg.window_samples(), hop = cfg.hop_samples(), nfft = cfg.fft_size();
  if (wave.samples.size() < win) throw std::invalid_argument("log_mel: waveform shorter than one window");
  const std::size_t T = (wave.samples.size() - win) / hop + 1;
  const auto& plan = detail::mel_plan(cfg);
  Tensor<Real> out({T, std::size_t(cfg.n_mels)});
  std::vector<std::complex<double>> buf(nfft);
  std::vector<double> power(nfft / 2 + 1);
  for (std::size_t t = 0; t < T; ++t) {
    std::fill(buf.begin(), buf.end(), std::complex<double>());
    for (std::size_t i = 0; i < win; ++i) buf[i] = double(wave.samples[t * hop + i]) * plan.window[i];
    detail::fft(buf);
    for (std::size_t k = 0; k < power.size(); ++k) power[k] = std::norm(buf[k]);
    for (int m = 0; m < cfg.n_mels; ++m) {
      double e = 0.0;
      const auto& w = plan.weights[m];
      for (std::size_t j = 0; j < w.size(); ++j) e += w[j] * power[plan.first[m] + j];
      out[t * cfg.n_mels + m] = Real(std::log(std::max(e, kLogMelFloor)));
    }
  }
  return out;
}

/// Zero-mean, unit-variance per mel bin over the utterance.
template <class Real>
void normalize_per_feature(Tensor<Real>& feats) {
  const std::size_t T = feats.dim(0), F = feats.dim(1);
  for (std::size_t f = 0; f < F; ++f) {
    double mu = 0.0;
    for (std::size_t t = 0; t < T; ++t) mu += feats[t * F + f];
    mu /= double(T);
    double var = 0.0;
    for (std::size_t t = 0; t < T; ++t) var += (feats[t * F + f] - mu) * (feats[t * F + f] - mu);
    var /= double(T);
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (std::size_t t = 0; t < T; ++t) feats[t * F + f] = Real((feats[t * F + f] - mu) * inv);
  }
}

/// Encoder-rate length after the strided subsampling stack.
inline std::size_t subsampled_length(std::size_t t, int layers) {
  for (int i = 0; i < layers; ++i) t = (t + 1) / 2;
  return t;
}

inline std::size_t visual_output_length(std::size_t frames) { return (frames + 1) / 2; }

// ------------------------------------------------------------------ parameter helpers

/// Normalized (Glorot) uniform initialization: U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
template <class Real>
Tensor<Real> glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Tensor<Real> t(std::move(shape));
  const double a = std::sqrt(6.0 / double(fan_in + fan_out));
  for (auto& v : t.values()) v = Real((2.0 * uniform01(rng) - 1.0) * a);
  return t;
}

template <class Real>
void add_layer_norm_params(ParameterSet<Real>& p, const std::string& name, std::size_t n) {
  p.add(name + ".g", Tensor<Real>({n}, Real(1)));
  p.add(name + ".b", Tensor<Real>({n}));
}

template <class Real>
void add_linear_params(ParameterSet<Real>& p, const std::string& name, std::size_t in, std::size_t out,
                       Rng& rng) {
  p.add(name + ".w", glorot<Real>({in, out}, in, out, rng));
  p.add(name + ".b", Tensor<Real>({out}));
}

template <class Real>
typename Graph<Real>::Id linear(Graph<Real>& g, typename Graph<Real>::Id x, const std::string& name) {
  return g.add_bias(g.matmul(x, g.parameter(name + ".w")), g.parameter(name + ".b"));
}

template <class Real>
typename Graph<Real>::Id layer_norm(Graph<Real>& g, typename Graph<Real>::Id x, const std::string& name) {
  return g.layer_norm(x, g.parameter(name + ".g"), g.parameter(name + ".b"));
}

// ------------------------------------------------------------------ audio subsampling

template <class Real>
void add_audio_subsample_params(ParameterSet<Real>& p, const std::string& prefix, const FrontendConfig& cfg,
                                std::size_t d_model, Rng& rng) {
  std::size_t in = cfg.n_mels;
  for (int i = 0; i < cfg.audio_subsample_layers; ++i) {
    const std::string n = prefix + ".l" + std::to_string(i);
    p.add(n + ".dw", glorot<Real>({std::size_t(cfg.subsample_kernel), in}, cfg.subsample_kernel,
                                  cfg.subsample_kernel, rng));
    add_linear_params(p, n + ".pw", in, d_model, rng);
    in = d_model;
  }
}

inline std::size_t audio_subsample_param_count(const FrontendConfig& cfg, std::size_t d) {
  std::size_t n = 0, in = cfg.n_mels;
  for (int i = 0; i < cfg.audio_subsample_layers; ++i) {
    n += cfg.subsample_kernel * in + in * d + d;
    in = d;
  }
  return n;
}

/// [T x n_mels] -> [ceil^L(T/2) x d_model]: per layer a stride-2 depthwise
/// convolution with symmetric zero padding, then a pointwise projection.
template <class Real>
typename Graph<Real>::Id audio_subsample(Graph<Real>& g, typename Graph<Real>::Id mel, const std::string& prefix,
                                         const FrontendConfig& cfg) {
  auto x = mel;
  const std::size_t pad = std::size_t(cfg.subsample_kernel - 1) / 2;
  for (int i = 0; i < cfg.audio_subsample_layers; ++i) {
    const std::string n = prefix + ".l" + std::to_string(i);
    x = g.depthwise_conv1d(x, g.parameter(n + ".dw"), 2, pad);
    x = linear(g, x, n + ".pw");
    if (i + 1 < cfg.audio_subsample_layers) x = g.relu(x);
  }
  return x;
}

// ------------------------------------------------------------------ visual front-end

/// Non-parametric visual input preparation: per-frame normalization over
/// pixels (removes absolute intensity offset and gain), then average pooling
/// by visual_input_pool. Returns [T x h x w x 1].
template <class Real>
Tensor<Real> prepare_visual_input(const VideoClip& clip, const FrontendConfig& cfg) {
  const std::size_t pool = cfg.visual_input_pool;
  const std::size_t h = clip.height / pool, w = clip.width / pool;
  const auto& k = cfg.visual_stem_kernel;
  if (clip.num_frames == 0) throw std::invalid_argument("visual front-end: clip has no frames");
  if (h < std::size_t(k[1]) || w < std::size_t(k[2])) {
    throw std::invalid_argument("visual front-end: frame " + std::to_string(clip.height) + "x" +
                                std::to_string(clip.width) + " below stem kernel support");
  }
  Tensor<Real> out({clip.num_frames, h, w, 1});
  const double inv_area = 1.0 / double(pool * pool);
  std::vector<double> norm(clip.frame_size());
  for (std::size_t t = 0; t < clip.num_frames; ++t) {
    const float* f = clip.frames.data() + t * clip.frame_size();
    double mu = 0.0;
    for (std::size_t i = 0; i < clip.frame_size(); ++i) mu += f[i];
    mu /= double(clip.frame_size());
    double var = 0.0;
    for (std::size_t i = 0; i < clip.frame_size(); ++i) var += (f[i] - mu) * (f[i] - mu);
    var /= double(clip.frame_size());
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (std::size_t i = 0; i < clip.frame_size(); ++i) norm[i] = (f[i] - mu) * inv;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double s = 0.0;
        for (std::size_t dy = 0; dy < pool; ++dy)
          for (std::size_t dx = 0; dx < pool; ++dx) s += norm[(y * pool + dy) * clip.width + x * pool + dx];
        out[(t * h + y) * w + x] = Real(s * inv_area);
      }
  }
  return out;
}

template <class Real>
void add_visual_frontend_params(ParameterSet<Real>& p, const std::string& prefix, const FrontendConfig& cfg,
                                std::size_t d_model, Rng& rng) {
  const auto& k = cfg.visual_stem_kernel;
  const std::size_t cs = cfg.visual_stem_channels, c = cfg.visual_channels;
  const std::size_t taps = std::size_t(k[0] * k[1] * k[2]);
  p.add(prefix + ".stem.w", glorot<Real>({std::size_t(k[0]), std::size_t(k[1]), std::size_t(k[2]), 1, cs},
                                         taps, taps * cs, rng));
  p.add(prefix + ".stem.b", Tensor<Real>({cs}));
  add_layer_norm_params(p, prefix + ".stem.ln", cs);
  std::size_t in = cs;
  for (int b = 0; b < cfg.visual_residual_blocks; ++b) {
    const std::string n = prefix + ".res" + std::to_string(b);
    p.add(n + ".c1", glorot<Real>({1, 3, 3, in, c}, 9 * in, 9 * c, rng));
    add_layer_norm_params(p, n + ".ln1", c);
    p.add(n + ".c2", glorot<Real>({1, 3, 3, c, c}, 9 * c, 9 * c, rng));
    add_layer_norm_params(p, n + ".ln2", c);
    const int stride = b == 0 ? cfg.visual_first_block_stride : 1;
    if (stride != 1 || in != c) p.add(n + ".skip", glorot<Real>({1, 1, 1, in, c}, in, c, rng));
    in = c;
  }
  p.add(prefix + ".tconv", glorot<Real>({std::size_t(cfg.visual_temporal_kernel), in},
                                        cfg.visual_temporal_kernel, cfg.visual_temporal_kernel, rng));
  add_linear_params(p, prefix + ".proj", in, d_model, rng);
}

inline std::size_t visual_frontend_param_count(const FrontendConfig& cfg, std::size_t d) {
  const auto& k = cfg.visual_stem_kernel;
  const std::size_t cs = cfg.visual_stem_channels, c = cfg.visual_channels;
  std::size_t n = std::size_t(k[0] * k[1] * k[2]) * cs + cs + 2 * cs;
  std::size_t in = cs;
  for (int b = 0; b < cfg.visual_residual_blocks; ++b) {
    n += 9 * in * c + 2 * c + 9 * c * c + 2 * c;
    const int stride = b == 0 ? cfg.visual_first_block_stride : 1;
    if (stride != 1 || in != c) n += in * c;
    in = c;
  }
  return n + cfg.visual_temporal_kernel * in + in * d + d;
}

/// [T x h x w x 1] prepared frames -> [ceil(T/2) x d_model]. 3-D stem
/// (temporal stride 1, spatial stride 2) -> residual 2-D blocks -> spatial
/// average -> stride-2 depthwise temporal convolution -> projection.
template <class Real>
typename Graph<Real>::Id visual_frontend(Graph<Real>& g, typename Graph<Real>::Id frames, const std::string& prefix,
                                         const FrontendConfig& cfg) {
  const auto& k = cfg.visual_stem_kernel;
  Conv3dGeometry stem{0, 0, 0, 1, 2, 2, std::size_t(k[0] / 2), std::size_t(k[1] / 2), std::size_t(k[2] / 2)};
  auto x = g.conv3d(frames, g.parameter(prefix + ".stem.w"), stem);
  x = g.add_bias(x, g.parameter(prefix + ".stem.b"));
  x = g.relu(layer_norm(g, x, prefix + ".stem.ln"));
  for (int b = 0; b < cfg.visual_residual_blocks; ++b) {
    const std::string n = prefix + ".res" + std::to_string(b);
    const std::size_t s = b == 0 ? std::size_t(cfg.visual_first_block_stride) : 1;
    Conv3dGeometry c1{0, 0, 0, 1, s, s, 0, 1, 1};
    Conv3dGeometry c2{0, 0, 0, 1, 1, 1, 0, 1, 1};
    auto y = g.relu(layer_norm(g, g.conv3d(x, g.parameter(n + ".c1"), c1), n + ".ln1"));
    y = layer_norm(g, g.conv3d(y, g.parameter(n + ".c2"), c2), n + ".ln2");
    auto skip = x;
    if (auto* params = g.parameters(); params && params->contains(n + ".skip")) {
      skip = g.conv3d(x, g.parameter(n + ".skip"), Conv3dGeometry{0, 0, 0, 1, s, s, 0, 0, 0});
    }
    x = g.relu(g.add(y, skip));
  }
  x = g.spatial_mean(x);
  x = g.depthwise_conv1d(x, g.parameter(prefix + ".tconv"), 2, std::size_t(cfg.visual_temporal_kernel - 1) / 2);
  return linear(g, x, prefix + ".proj");
}

}  // namespace avfc
