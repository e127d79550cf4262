#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "avfc/frontends.hpp"
#include "avfc/rng.hpp"

namespace avfc {

struct SynthTaskConfig {
  std::vector<std::pair<std::string, std::string>> languages = {{"xa", "abcdefgh"}, {"xb", "ijklmnop"}};
  int min_symbols = 3;
  int max_symbols = 8;
  double symbol_ms_min = 120.0;
  double symbol_ms_max = 200.0;
  double edge_silence_ms = 100.0;
  int sample_rate = 16000;
  int fps = 25;
  int frame_size = 96;
  double generated_fraction = 0.3;  // train split only
  double label_error_rate = 0.05;
  std::uint64_t seed = 20240611;

  int vocab_size() const {
    int n = 0;
    for (const auto& l : languages) n += static_cast<int>(l.second.size());
    return n;
  }

  void validate() const {
    if (languages.empty() || vocab_size() > 16) {
      throw std::invalid_argument("synthetic task supports 1 to 16 symbols in total");
    }
    if (min_symbols < 1 || max_symbols < min_symbols || symbol_ms_min <= 0 || symbol_ms_max < symbol_ms_min ||
        edge_silence_ms < 0 || sample_rate <= 0 || fps <= 0 || frame_size < 32) {
      throw std::invalid_argument("invalid synthetic task configuration");
    }
    for (const auto& l : languages)
      if (l.second.size() < 3) throw std::invalid_argument("every language needs three or more symbols");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthTaskConfig, languages, min_symbols, max_symbols, symbol_ms_min,
                                                symbol_ms_max, edge_silence_ms, sample_rate, fps, frame_size,
                                                generated_fraction, label_error_rate, seed)

/// Acoustic signature of a global symbol index: two formant centres on a
/// 4 x 4 grid.
struct VowelSignature {
  double f1, f2;
};

inline VowelSignature vowel_signature(int symbol) {
  return {300.0 + 150.0 * (symbol % 4), 1000.0 + 350.0 * (symbol / 4)};
}

/// Mouth ellipse semi-axes (pixels at 96 x 96) of a global symbol index.
struct MouthPose {
  double half_width, half_height;
};

inline MouthPose mouth_pose(int symbol) {
  return {12.0 + 5.0 * (symbol % 4), 3.0 + 4.0 * (symbol / 4)};
}

inline constexpr MouthPose kClosedMouth{14.0, 1.0};

/// A timed symbol sequence (global symbol indices) with per-utterance voice
/// and face parameters.
struct SymbolTrack {
  std::vector<int> symbols;
  std::vector<std::size_t> starts;  // sample offsets
  std::vector<std::size_t> ends;
  std::size_t total_samples = 0;
  double f0 = 120.0;
  double gain = 0.2;
  double cx = 48.0, cy = 60.0;
  double background = 0.6;
};

/// Draws a symbol sequence without adjacent repeats from one language's
/// global index range [first, first + count).
inline std::vector<int> draw_symbols(int first, int count, int min_len, int max_len, Rng& rng) {
  const int n = static_cast<int>(uniform_int(rng, min_len, max_len));
  std::vector<int> out;
  for (int i = 0; i < n; ++i) {
    int s;
    do {
      s = first + static_cast<int>(uniform_int(rng, 0, count - 1));
    } while (!out.empty() && s == out.back());
    out.push_back(s);
  }
  return out;
}

inline SymbolTrack layout_track(std::vector<int> symbols, const SynthTaskConfig& cfg, Rng& rng) {
  SymbolTrack tr;
  tr.symbols = std::move(symbols);
  const double sr = cfg.sample_rate;
  std::size_t pos = static_cast<std::size_t>(cfg.edge_silence_ms * 1e-3 * sr);
  for (std::size_t i = 0; i < tr.symbols.size(); ++i) {
    const double ms = cfg.symbol_ms_min + (cfg.symbol_ms_max - cfg.symbol_ms_min) * uniform01(rng);
    tr.starts.push_back(pos);
    pos += static_cast<std::size_t>(ms * 1e-3 * sr);
    tr.ends.push_back(pos);
  }
  tr.total_samples = pos + static_cast<std::size_t>(cfg.edge_silence_ms * 1e-3 * sr);
  tr.f0 = 100.0 + 40.0 * uniform01(rng);
  tr.gain = 0.1 + 0.2 * uniform01(rng);
  tr.cx = 48.0 + 6.0 * (uniform01(rng) - 0.5);
  tr.cy = 60.0 + 6.0 * (uniform01(rng) - 0.5);
  tr.background = 0.5 + 0.2 * uniform01(rng);
  return tr;
}

/// Voiced harmonic source shaped by the symbol's two formants, with 15 ms
/// raised-cosine ramps, plus a faint noise floor.
inline Waveform render_audio(const SymbolTrack& tr, const SynthTaskConfig& cfg, Rng& rng) {
  constexpr double kPi = 3.14159265358979323846;
  constexpr double kBandwidth = 90.0;
  Waveform w;
  w.sample_rate = cfg.sample_rate;
  w.samples.assign(tr.total_samples, 0.0f);
  const double sr = cfg.sample_rate;
  const std::size_t ramp = static_cast<std::size_t>(0.015 * sr);
  for (std::size_t i = 0; i < tr.symbols.size(); ++i) {
    const auto sig = vowel_signature(tr.symbols[i]);
    const double f0 = tr.f0 * (1.0 + 0.03 * (uniform01(rng) - 0.5));
    std::vector<double> amp;
    std::vector<std::complex<double>> osc, rot;
    for (int k = 1; k * f0 < 0.45 * sr && k * f0 < 4000.0; ++k) {
      const double f = k * f0;
      const double a1 = 1.0 / (1.0 + std::pow((f - sig.f1) / kBandwidth, 2));
      const double a2 = 0.7 / (1.0 + std::pow((f - sig.f2) / kBandwidth, 2));
      amp.push_back(a1 + a2 + 0.02);
      osc.push_back(std::polar(1.0, 2.0 * kPi * uniform01(rng)));
      rot.push_back(std::polar(1.0, 2.0 * kPi * f / sr));
    }
    double norm = 0;
    for (double a : amp) norm += 0.5 * a * a;
    const double scale = tr.gain / std::sqrt(norm);
    const std::size_t s0 = tr.starts[i], s1 = tr.ends[i], len = s1 - s0;
    for (std::size_t n = 0; n < len; ++n) {
      double v = 0;
      for (std::size_t k = 0; k < amp.size(); ++k) {
        v += amp[k] * osc[k].imag();
        osc[k] *= rot[k];
      }
      double env = 1.0;
      if (n < ramp) env = 0.5 - 0.5 * std::cos(kPi * n / ramp);
      if (len - n <= ramp) env = std::min(env, 0.5 - 0.5 * std::cos(kPi * (len - n) / ramp));
      w.samples[s0 + n] += static_cast<float>(scale * env * v);
    }
  }
  for (auto& s : w.samples) s += static_cast<float>(1e-3 * tr.gain * normal(rng));
  return w;
}

inline std::size_t frame_count(std::size_t samples, int sample_rate, int fps) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(double(samples) * fps / sample_rate)));
}

/// Grey face patch with a dark mouth ellipse whose semi-axes follow the
/// symbol active at each frame time (closed mouth in silence).
inline VideoClip render_video(const SymbolTrack& tr, const SynthTaskConfig& cfg, Rng& rng) {
  VideoClip c;
  c.fps = cfg.fps;
  c.height = c.width = cfg.frame_size;
  c.num_frames = frame_count(tr.total_samples, cfg.sample_rate, cfg.fps);
  const std::size_t S = cfg.frame_size;
  c.frames.resize(c.num_frames * S * S);
  const double lip = 0.15;
  for (std::size_t f = 0; f < c.num_frames; ++f) {
    const std::size_t at = static_cast<std::size_t>((f + 0.5) * cfg.sample_rate / cfg.fps);
    MouthPose pose = kClosedMouth;
    for (std::size_t i = 0; i < tr.symbols.size(); ++i)
      if (at >= tr.starts[i] && at < tr.ends[i]) pose = mouth_pose(tr.symbols[i]);
    float* img = c.frames.data() + f * S * S;
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        const double dx = (x + 0.5 - tr.cx) / pose.half_width, dy = (y + 0.5 - tr.cy) / pose.half_height;
        // Signed distance in pixels (approximate) drives a one-pixel soft edge.
        const double r = std::sqrt(dx * dx + dy * dy);
        const double edge = (r - 1.0) * std::min(pose.half_width, pose.half_height);
        const double inside = std::clamp(0.5 - edge, 0.0, 1.0);
        const double v = tr.background * (1.0 - inside) + lip * inside + 0.02 * normal(rng);
        img[y * S + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  }
  return c;
}

/// Speech-like filler used by babble synthesis: `length` samples of
/// back-to-back random utterances.
inline Waveform speech_like(std::size_t length, const SynthTaskConfig& cfg, Rng& rng) {
  Waveform out;
  out.sample_rate = cfg.sample_rate;
  const int V = cfg.vocab_size();
  while (out.samples.size() < length) {
    auto tr = layout_track(draw_symbols(0, V, cfg.min_symbols, cfg.max_symbols, rng), cfg, rng);
    auto w = render_audio(tr, cfg, rng);
    out.samples.insert(out.samples.end(), w.samples.begin(), w.samples.end());
  }
  out.samples.resize(length);
  return out;
}

}  // namespace avfc
