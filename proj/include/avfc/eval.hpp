#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "avfc/augment.hpp"
#include "avfc/data.hpp"
#include "avfc/model.hpp"
#include "avfc/training.hpp"

namespace avfc {

// ------------------------------------------------------------------ WER

struct WerCounts {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t ref_words = 0;
  bool empty_reference = false;  // ref empty, hyp not: wer is 100 * |hyp|

  std::size_t errors() const { return substitutions + deletions + insertions; }
  double wer() const {
    if (ref_words == 0) return empty_reference ? 100.0 * double(insertions) : 0.0;
    return 100.0 * double(errors()) / double(ref_words);
  }
};

/// Unit-cost Levenshtein alignment of word sequences with a backtrace for
/// the S/D/I split (substitutions preferred on ties, then deletions).
template <class Word>
WerCounts word_error_rate(const std::vector<Word>& ref, const std::vector<Word>& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      at(i, j) = std::min({at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1), at(i - 1, j) + 1, at(i, j - 1) + 1});
  WerCounts c;
  c.ref_words = n;
  c.empty_reference = n == 0 && m > 0;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      if (ref[i - 1] != hyp[j - 1]) ++c.substitutions;
      --i;
      --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++c.deletions;
      --i;
    } else {
      ++c.insertions;
      --j;
    }
  }
  return c;
}

// ------------------------------------------------------------------ evaluation

enum class EvalMode { kA, kV, kAV };

inline EvalMode parse_mode(const std::string& s) {
  if (s == "a" || s == "A") return EvalMode::kA;
  if (s == "v" || s == "V") return EvalMode::kV;
  if (s == "av" || s == "AV") return EvalMode::kAV;
  throw std::invalid_argument("mode must be a, v or av, got '" + s + "'");
}
inline const char* mode_name(EvalMode m) { return m == EvalMode::kA ? "A" : m == EvalMode::kV ? "V" : "AV"; }

struct EvalReport {
  EvalMode mode = EvalMode::kAV;
  NoiseSpec noise;
  double wer = 0.0;
  std::size_t n_utts = 0;
  std::size_t ref_words = 0;
  std::size_t substitutions = 0, deletions = 0, insertions = 0;
  std::size_t out_of_range = 0;  // decoded ids outside the utterance's language range

  bool operator==(const EvalReport& o) const {
    return mode == o.mode && noise.kind == o.noise.kind &&
           (noise.snr_db == o.noise.snr_db || (noise.clean() && o.noise.clean())) && wer == o.wer &&
           n_utts == o.n_utts && ref_words == o.ref_words && substitutions == o.substitutions &&
           deletions == o.deletions && insertions == o.insertions && out_of_range == o.out_of_range;
  }
};

struct EvalOptions {
  Decoder decoder = Decoder::kRnnt;
  int load_batch = 16;
  double noise_bank_seconds = 60.0;
  std::size_t limit = 0;  // 0 = whole manifest
};

/// Inference mask implementing a mode on a given model.
inline Mask mode_mask(const ModelConfig& c, EvalMode mode) {
  const bool av = c.has_audio() && c.has_video();
  if (av) return mode == EvalMode::kA ? Mask::kVideo : mode == EvalMode::kV ? Mask::kAudio : Mask::kNone;
  if ((mode == EvalMode::kA && c.modalities == "a") || (mode == EvalMode::kV && c.modalities == "v")) return Mask::kNone;
  throw std::invalid_argument(std::string("mode ") + mode_name(mode) + " is not available for a '" + c.modalities +
                              "' model");
}

/// Loader settings for a mode and noise condition.
inline LoadOptions eval_load_options(const ModelConfig& mc, Mask mask, const NoiseSpec& noise, const NoiseBank* bank) {
  LoadOptions opt;
  opt.need_audio = mc.has_audio() && mask != Mask::kAudio;
  opt.need_video = mc.has_video() && mask != Mask::kVideo;
  opt.test_noise = noise;
  opt.noise = bank;
  return opt;
}

/// Test-noise bank of an evaluation seed (absent for clean evaluation).
inline std::optional<NoiseBank> eval_noise_bank(const NoiseSpec& noise, std::uint64_t seed, double seconds,
                                                const SynthTaskConfig& task) {
  if (noise.clean()) return std::nullopt;
  return NoiseBank::make(derive_seed(seed, {0x7E57}), seconds, task);
}

/// Decodes one loaded utterance under `mask`, restricted to its language's
/// token range. On an audio-visual model a stream whose file was all zeros
/// is treated as masked.
inline Hypothesis decode_loaded(const ParameterSet<float>& params, const ModelConfig& mc, const TokenizerSpec& tok,
                                UtteranceFeatures<float> f, Mask mask, Decoder decoder) {
  if (mc.has_audio() && mc.has_video()) {
    const bool audio = f.mel.has_value() || mask == Mask::kAudio;
    const bool video = f.video.has_value() || mask == Mask::kVideo;
    if (!audio && !video) throw std::runtime_error("utterance " + f.id + ": both streams are empty");
    if (!audio) mask = Mask::kAudio;
    if (!video) mask = Mask::kVideo;
    if (!f.mel) f.mel_frames = 0;
    if (!f.video) f.video_frames = 0;
  } else if ((mc.has_audio() && !f.mel) || (mc.has_video() && !f.video)) {
    throw std::runtime_error("utterance " + f.id + ": required stream is empty");
  }
  const auto range = tok.range(f.lang);
  auto hyp = decode_utterance(params, f, mc, mask, decoder, range);
  for (int id : hyp.ids) {
    if (!hyp.text.empty()) hyp.text += ' ';
    hyp.text += range.contains(id) ? tok.decode({id}) : "<" + std::to_string(id) + ">";
  }
  return hyp;
}

/// Decodes every utterance with the given (EMA) parameters, applying the
/// mode's inference mask and test noise mixed at the waveform level.
inline EvalReport evaluate(const ParameterSet<float>& params, const ExperimentConfig& cfg, const Manifest& manifest,
                           EvalMode mode, const NoiseSpec& noise, std::uint64_t seed, const EvalOptions& eo = {}) {
  const auto& mc = cfg.model;
  const Mask mask = mode_mask(mc, mode);
  const auto tok = cfg.tokenizer();
  const auto bank = eval_noise_bank(noise, seed, eo.noise_bank_seconds, cfg.task);
  const auto opt = eval_load_options(mc, mask, noise, bank ? &*bank : nullptr);

  EvalReport rep;
  rep.mode = mode;
  rep.noise = noise;
  const std::size_t n = eo.limit ? std::min(eo.limit, manifest.size()) : manifest.size();
  for (std::size_t start = 0; start < n; start += std::size_t(eo.load_batch)) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(n, start + std::size_t(eo.load_batch)); ++i) idx.push_back(i);
    const auto batch = load_batch<float>(manifest, idx, Phase::kInfer, cfg.augment, mc.frontend, tok, seed, opt);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto hyp = decode_loaded(params, mc, tok, batch.utterance(i), mask, eo.decoder);
      const auto range = tok.range(batch.langs[i]);
      for (int id : hyp.ids)
        if (!range.contains(id)) ++rep.out_of_range;
      const auto c = word_error_rate(split_words(manifest[batch.indices[i]].text), split_words(hyp.text));
      rep.substitutions += c.substitutions;
      rep.deletions += c.deletions;
      rep.insertions += c.insertions;
      rep.ref_words += c.ref_words;
      ++rep.n_utts;
    }
  }
  rep.wer = rep.ref_words ? 100.0 * double(rep.substitutions + rep.deletions + rep.insertions) / double(rep.ref_words)
                          : 0.0;
  return rep;
}

/// Loads a checkpoint and evaluates its EMA parameters.
inline EvalReport evaluate(const std::filesystem::path& checkpoint, const Manifest& manifest, EvalMode mode,
                           const NoiseSpec& noise, std::uint64_t seed, const EvalOptions& eo = {}) {
  CheckpointMeta meta;
  auto state = load_checkpoint<float>(checkpoint, &meta);
  return evaluate(state.ema, checkpoint_config(meta), manifest, mode, noise, seed, eo);
}

inline std::vector<EvalReport> noise_sweep(const ParameterSet<float>& params, const ExperimentConfig& cfg,
                                           const Manifest& manifest, NoiseKind kind, const std::vector<double>& snrs,
                                           const std::vector<EvalMode>& modes, std::uint64_t seed,
                                           const EvalOptions& eo = {}) {
  std::vector<EvalReport> out;
  for (EvalMode m : modes)
    for (double snr : snrs) out.push_back(evaluate(params, cfg, manifest, m, NoiseSpec{kind, snr}, seed, eo));
  return out;
}

// ------------------------------------------------------------------ report formats

inline std::string snr_label(double snr) {
  if (std::isinf(snr) && snr > 0) return "clean";
  std::ostringstream os;
  os << snr;
  return os.str();
}

/// Line-oriented records, tab-separated with a header:
///   mode noise snr wer S D I n
inline std::string report_records(const std::vector<EvalReport>& reps) {
  std::ostringstream os;
  os << "mode\tnoise\tsnr\twer\tS\tD\tI\tn\n";
  for (const auto& r : reps) {
    os << mode_name(r.mode) << '\t' << (r.noise.clean() ? "none" : noise_kind_name(r.noise.kind)) << '\t'
       << snr_label(r.noise.snr_db) << '\t' << std::fixed << std::setprecision(4) << r.wer << '\t' << r.substitutions
       << '\t' << r.deletions << '\t' << r.insertions << '\t' << r.n_utts << '\n';
  }
  return os.str();
}

/// Aligned table: one row per mode, one column per SNR level, in the order
/// the reports were produced.
inline std::string report_table(const std::vector<EvalReport>& reps) {
  std::vector<double> snrs;
  std::vector<EvalMode> modes;
  for (const auto& r : reps) {
    if (std::find(modes.begin(), modes.end(), r.mode) == modes.end()) modes.push_back(r.mode);
    const double s = r.noise.snr_db;
    if (std::find_if(snrs.begin(), snrs.end(), [&](double x) { return x == s; }) == snrs.end()) snrs.push_back(s);
  }
  std::ostringstream os;
  const std::string kind = reps.empty() ? "" : noise_kind_name(reps.front().noise.kind);
  os << std::left << std::setw(8) << ("mode");
  for (double s : snrs) os << std::right << std::setw(9) << snr_label(s);
  os << "    (" << kind << " noise, SNR dB, WER %)\n";
  for (EvalMode m : modes) {
    os << std::left << std::setw(8) << mode_name(m) << std::right << std::fixed << std::setprecision(1);
    for (double s : snrs) {
      auto it = std::find_if(reps.begin(), reps.end(), [&](const EvalReport& r) { return r.mode == m && r.noise.snr_db == s; });
      if (it == reps.end()) {
        os << std::setw(9) << "-";
      } else {
        os << std::setw(9) << it->wer;
      }
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace avfc
