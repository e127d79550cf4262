#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "avfc/encoder.hpp"
#include "avfc/frontends.hpp"
#include "avfc/rng.hpp"
#include "avfc/synth.hpp"

namespace avfc {

struct AugmentConfig {
  int freq_mask_F = 27;
  int n_time_masks = 10;
  double time_mask_pS = 0.05;
  int crop = 88;
  double hflip_p = 0.5;
  bool video_time_mask = true;
  double video_time_mask_max = 0.1;  // fraction of the clip
  std::vector<double> train_noise_snrs = {-5, 0, 5, 10, 15, 20};
  double train_noise_p = 0.5;
  std::string train_noise_kind = "babble";
  bool spec_augment = true;

  void validate(const FrontendConfig& fe) const {
    if (freq_mask_F < 0 || freq_mask_F > fe.n_mels) throw std::invalid_argument("freq_mask_F must lie in [0, n_mels]");
    if (time_mask_pS < 0.0 || time_mask_pS > 1.0) throw std::invalid_argument("time_mask_pS must lie in [0,1]");
    if (n_time_masks < 0 || crop <= 0) throw std::invalid_argument("invalid augmentation sizes");
    if (hflip_p < 0.0 || hflip_p > 1.0 || train_noise_p < 0.0 || train_noise_p > 1.0) {
      throw std::invalid_argument("probabilities must lie in [0,1]");
    }
    if (crop != fe.crop) throw std::invalid_argument("augmentation crop must equal the front-end crop");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AugmentConfig, freq_mask_F, n_time_masks, time_mask_pS, crop,
                                                hflip_p, video_time_mask, video_time_mask_max, train_noise_snrs,
                                                train_noise_p, train_noise_kind, spec_augment)

enum class NoiseKind { kWhite, kBabble };

inline NoiseKind parse_noise_kind(const std::string& s) {
  if (s == "white") return NoiseKind::kWhite;
  if (s == "babble") return NoiseKind::kBabble;
  throw std::invalid_argument("noise kind must be white or babble, got '" + s + "'");
}
inline const char* noise_kind_name(NoiseKind k) { return k == NoiseKind::kWhite ? "white" : "babble"; }

struct NoiseSpec {
  NoiseKind kind = NoiseKind::kWhite;
  double snr_db = std::numeric_limits<double>::infinity();
  bool clean() const { return std::isinf(snr_db) && snr_db > 0; }
};

// ------------------------------------------------------------------ audio

/// One frequency band of width U{0..F} and n time bands of width
/// U{0..floor(pS*T)} set to zero.
template <class Real>
void spec_augment(Tensor<Real>& mel, const AugmentConfig& cfg, Rng& rng) {
  const std::size_t T = mel.rows(), M = mel.cols();
  if (static_cast<std::size_t>(cfg.freq_mask_F) > M) throw std::invalid_argument("spec_augment: F exceeds n_mels");
  const auto f = static_cast<std::size_t>(uniform_int(rng, 0, cfg.freq_mask_F));
  const auto f0 = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(M - f)));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t m = f0; m < f0 + f; ++m) mel(t, m) = Real(0);
  const auto max_w = static_cast<std::int64_t>(std::floor(cfg.time_mask_pS * double(T)));
  for (int i = 0; i < cfg.n_time_masks; ++i) {
    const auto w = static_cast<std::size_t>(uniform_int(rng, 0, max_w));
    const auto t0 = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(T - std::min(w, T))));
    for (std::size_t t = t0; t < std::min(T, t0 + w); ++t)
      for (std::size_t m = 0; m < M; ++m) mel(t, m) = Real(0);
  }
}

inline double mean_power(const std::vector<float>& x, std::size_t n) {
  double p = 0;
  for (std::size_t i = 0; i < n; ++i) p += double(x[i % x.size()]) * double(x[i % x.size()]);
  return p / double(n);
}

/// Factor applied to the (tiled) noise so that the mixture has the requested SNR.
inline double noise_scale(const Waveform& wave, const Waveform& noise, double snr_db) {
  if (wave.samples.empty() || noise.samples.empty()) throw std::invalid_argument("mix_noise: empty signal or noise");
  const std::size_t n = wave.samples.size();
  const double ps = mean_power(wave.samples, n);
  const double pn = mean_power(noise.samples, n);
  if (ps <= 0.0) throw std::invalid_argument("mix_noise: signal has zero power");
  if (pn <= 0.0) throw std::invalid_argument("mix_noise: noise has zero power");
  return std::sqrt(ps / (pn * std::pow(10.0, snr_db / 10.0)));
}

/// Adds noise scaled to the target SNR; a noise shorter than the signal is
/// tiled from its start. An infinite SNR returns the signal unchanged.
inline Waveform mix_noise(const Waveform& wave, const Waveform& noise, double snr_db) {
  if (std::isinf(snr_db) && snr_db > 0) return wave;
  const double k = noise_scale(wave, noise, snr_db);
  Waveform out = wave;
  const std::size_t m = noise.samples.size();
  for (std::size_t i = 0; i < out.samples.size(); ++i)
    out.samples[i] = static_cast<float>(double(out.samples[i]) + k * double(noise.samples[i % m]));
  return out;
}

inline constexpr int kBabbleTalkers = 8;

/// White: unit-variance Gaussian. Babble: 8 overlapped speech-like streams
/// at random offsets, normalized to unit variance.
inline Waveform synth_noise(NoiseKind kind, std::size_t length, Rng& rng, const SynthTaskConfig& voice = {}) {
  if (length == 0) throw std::invalid_argument("synth_noise: length must be positive");
  Waveform w;
  w.sample_rate = voice.sample_rate;
  w.samples.assign(length, 0.0f);
  if (kind == NoiseKind::kWhite) {
    for (auto& s : w.samples) s = static_cast<float>(normal(rng));
    return w;
  }
  std::vector<double> acc(length, 0.0);
  for (int k = 0; k < kBabbleTalkers; ++k) {
    const auto offset = static_cast<std::size_t>(uniform_int(rng, 0, voice.sample_rate));
    const auto talker = speech_like(length + offset, voice, rng);
    for (std::size_t i = 0; i < length; ++i) acc[i] += talker.samples[i + offset];
  }
  double mean = 0, var = 0;
  for (double v : acc) mean += v;
  mean /= double(length);
  for (double v : acc) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / double(length));
  for (std::size_t i = 0; i < length; ++i) w.samples[i] = static_cast<float>((acc[i] - mean) / (sd > 0 ? sd : 1.0));
  return w;
}

// ------------------------------------------------------------------ video

inline VideoClip crop_clip(const VideoClip& c, std::size_t top, std::size_t left, std::size_t size) {
  if (top + size > c.height || left + size > c.width) throw std::invalid_argument("crop window outside the frame");
  VideoClip out;
  out.fps = c.fps;
  out.num_frames = c.num_frames;
  out.height = out.width = size;
  out.frames.resize(c.num_frames * size * size);
  for (std::size_t f = 0; f < c.num_frames; ++f)
    for (std::size_t y = 0; y < size; ++y)
      std::copy_n(c.frames.data() + (f * c.height + top + y) * c.width + left, size,
                  out.frames.data() + (f * size + y) * size);
  return out;
}

inline void hflip(VideoClip& c) {
  for (std::size_t f = 0; f < c.num_frames; ++f)
    for (std::size_t y = 0; y < c.height; ++y) {
      float* row = c.frames.data() + (f * c.height + y) * c.width;
      std::reverse(row, row + c.width);
    }
}

/// Train: random crop, optional flip, one temporal span replaced by the clip
/// mean. Infer: centre crop.
inline VideoClip visual_augment(const VideoClip& clip, const AugmentConfig& cfg, Phase phase, Rng& rng) {
  const std::size_t crop = cfg.crop;
  if (clip.height < crop || clip.width < crop) {
    throw std::invalid_argument("frame " + std::to_string(clip.height) + "x" + std::to_string(clip.width) +
                                " is smaller than the crop " + std::to_string(crop));
  }
  if (phase == Phase::kInfer) return crop_clip(clip, (clip.height - crop) / 2, (clip.width - crop) / 2, crop);
  const auto top = static_cast<std::size_t>(uniform_int(rng, 0, std::int64_t(clip.height - crop)));
  const auto left = static_cast<std::size_t>(uniform_int(rng, 0, std::int64_t(clip.width - crop)));
  VideoClip out = crop_clip(clip, top, left, crop);
  if (uniform01(rng) < cfg.hflip_p) hflip(out);
  if (cfg.video_time_mask && out.num_frames > 0) {
    const auto max_w = static_cast<std::int64_t>(std::floor(cfg.video_time_mask_max * double(out.num_frames)));
    const auto w = static_cast<std::size_t>(uniform_int(rng, 0, max_w));
    const auto t0 = static_cast<std::size_t>(uniform_int(rng, 0, std::int64_t(out.num_frames - w)));
    if (w > 0) {
      double mean = 0;
      for (float v : out.frames) mean += v;
      mean /= double(out.frames.size());
      const std::size_t fs = out.frame_size();
      std::fill(out.frames.begin() + t0 * fs, out.frames.begin() + (t0 + w) * fs, static_cast<float>(mean));
    }
  }
  return out;
}

}  // namespace avfc
