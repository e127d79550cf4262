#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "avfc/augment.hpp"
#include "avfc/decode.hpp"
#include "avfc/frontends.hpp"
#include "avfc/model.hpp"
#include "avfc/synth.hpp"

namespace avfc {

// ------------------------------------------------------------------ manifest
//
// JSON Lines, one object per utterance:
//   {"id":..., "audio":..., "video":..., "text":..., "lang":..., "duration_s":..., "source":"human"|"generated"}
// Media paths are relative to the manifest's directory (absolute paths are
// kept as is). An empty "video" or "audio" marks the stream as absent.

struct ManifestEntry {
  std::string id;
  std::string audio;
  std::string video;
  std::string text;
  std::string lang;
  double duration_s = 0.0;
  std::string source = "human";
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ManifestEntry, id, audio, video, text, lang, duration_s, source)

struct Manifest {
  std::filesystem::path base;
  std::vector<ManifestEntry> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
  const ManifestEntry& operator[](std::size_t i) const { return entries.at(i); }

  std::filesystem::path resolve(const std::string& p) const {
    std::filesystem::path q(p);
    return q.is_absolute() ? q : base / q;
  }
};

inline void validate_entry(const ManifestEntry& e) {
  if (e.id.empty()) throw std::invalid_argument("manifest entry without id");
  if (!(e.duration_s > 0.0)) throw std::invalid_argument("entry " + e.id + ": duration_s must be positive");
  if (e.source != "human" && e.source != "generated") {
    throw std::invalid_argument("entry " + e.id + ": source must be human or generated");
  }
}

inline std::string manifest_to_jsonl(const Manifest& m) {
  std::string out;
  for (const auto& e : m.entries) {
    out += nlohmann::json(e).dump();
    out += '\n';
  }
  return out;
}

inline void write_manifest(const std::filesystem::path& p, const Manifest& m) {
  detail::write_file(p, manifest_to_jsonl(m));
}

inline Manifest read_manifest(const std::filesystem::path& p) {
  Manifest m;
  m.base = p.parent_path();
  std::istringstream is(detail::read_file(p));
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto e = nlohmann::json::parse(line).get<ManifestEntry>();
      validate_entry(e);
      m.entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw std::invalid_argument(p.string() + ":" + std::to_string(n) + ": " + ex.what());
    }
  }
  return m;
}

// ------------------------------------------------------------------ hours table

struct HoursTable {
  std::vector<std::string> languages;
  std::map<std::pair<std::string, std::string>, double> hours;  // (lang, source)
  std::map<std::string, double> by_language;
  std::map<std::string, double> by_source;
  double total = 0.0;

  double at(const std::string& lang, const std::string& source) const {
    auto it = hours.find({lang, source});
    return it == hours.end() ? 0.0 : it->second;
  }

  /// Rows human / generated / total, one column per language plus a total.
  std::string format() const {
    std::ostringstream os;
    os << std::left << std::setw(10) << "source";
    for (const auto& l : languages) os << std::right << std::setw(10) << l;
    os << std::setw(10) << "total" << "\n" << std::fixed << std::setprecision(3);
    for (const char* src : {"human", "generated"}) {
      os << std::left << std::setw(10) << src << std::right;
      for (const auto& l : languages) os << std::setw(10) << at(l, src);
      auto it = by_source.find(src);
      os << std::setw(10) << (it == by_source.end() ? 0.0 : it->second) << "\n";
    }
    os << std::left << std::setw(10) << "total" << std::right;
    for (const auto& l : languages) os << std::setw(10) << by_language.at(l);
    os << std::setw(10) << total << "\n";
    return os.str();
  }
};

inline HoursTable manifest_stats(const std::vector<Manifest>& manifests) {
  HoursTable t;
  std::set<std::string> ids, langs;
  for (const auto& m : manifests)
    for (const auto& e : m.entries) {
      validate_entry(e);
      if (!ids.insert(e.id).second) throw std::invalid_argument("duplicate utterance id '" + e.id + "'");
      langs.insert(e.lang);
    }
  t.languages.assign(langs.begin(), langs.end());
  for (const auto& l : t.languages) t.by_language[l] = 0.0;
  t.by_source["human"] = 0.0;
  t.by_source["generated"] = 0.0;
  // Sorted per-cell sums keep the table independent of entry order.
  std::map<std::pair<std::string, std::string>, std::vector<double>> cells;
  for (const auto& m : manifests)
    for (const auto& e : m.entries) cells[{e.lang, e.source}].push_back(e.duration_s);
  for (auto& [key, secs] : cells) {
    std::sort(secs.begin(), secs.end());
    double s = 0;
    for (double v : secs) s += v;
    const double h = s / 3600.0;
    t.hours[key] = h;
    t.by_language[key.first] += h;
    t.by_source[key.second] += h;
    t.total += h;
  }
  return t;
}

// ------------------------------------------------------------------ corpus generation

inline std::uint64_t split_key(const std::string& split) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char ch : split) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline TokenizerSpec task_tokenizer(const SynthTaskConfig& cfg) { return TokenizerSpec::build(cfg.languages); }

/// Global symbol index -> character; symbols are numbered across languages
/// in tokenizer order.
inline std::string symbols_to_text(const std::vector<int>& symbols, const SynthTaskConfig& cfg) {
  const auto tok = task_tokenizer(cfg);
  std::string text;
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (i) text += ' ';
    text += tok.decode({symbols[i]});
  }
  return text;
}

/// Transcript words are single symbols separated by spaces.
inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

inline std::string strip_separators(const std::string& text) {
  std::string s;
  for (char c : text)
    if (c != ' ') s += c;
  return s;
}

/// Replaces each symbol with probability `rate` by a different symbol of the
/// same language that also differs from its neighbours.
inline std::vector<int> corrupt_symbols(std::vector<int> s, int first, int count, double rate, Rng& rng) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (uniform01(rng) >= rate) continue;
    int r;
    do {
      r = first + static_cast<int>(uniform_int(rng, 0, count - 1));
    } while (r == s[i] || (i > 0 && r == s[i - 1]) || (i + 1 < s.size() && r == s[i + 1]));
    s[i] = r;
  }
  return s;
}

struct RenderedUtterance {
  ManifestEntry entry;
  Waveform audio;
  VideoClip video;
  std::vector<int> spoken;  // true symbols, before any label corruption
};

/// Deterministic function of (cfg, split, index).
inline RenderedUtterance render_utterance(const SynthTaskConfig& cfg, const std::string& split, std::size_t index) {
  Rng rng = make_rng(cfg.seed, {split_key(split), index});
  const auto tok = task_tokenizer(cfg);
  const auto li = static_cast<std::size_t>(uniform_int(rng, 0, std::int64_t(cfg.languages.size()) - 1));
  const auto& lang = tok.languages()[li];
  RenderedUtterance u;
  u.spoken = draw_symbols(lang.range.start, lang.range.length, cfg.min_symbols, cfg.max_symbols, rng);
  auto track = layout_track(u.spoken, cfg, rng);
  Rng audio_rng = make_rng(cfg.seed, {split_key(split), index, 0xA});
  Rng video_rng = make_rng(cfg.seed, {split_key(split), index, 0xB});
  u.audio = render_audio(track, cfg, audio_rng);
  u.video = render_video(track, cfg, video_rng);
  const bool generated = split == "train" && uniform01(rng) < cfg.generated_fraction;
  const auto labels = generated
                          ? corrupt_symbols(u.spoken, lang.range.start, lang.range.length, cfg.label_error_rate, rng)
                          : u.spoken;
  std::ostringstream id;
  id << split << '-' << std::setw(5) << std::setfill('0') << index;
  u.entry.id = id.str();
  u.entry.audio = split + "/" + u.entry.id + ".pcm";
  u.entry.video = split + "/" + u.entry.id + ".clip";
  u.entry.text = symbols_to_text(labels, cfg);
  u.entry.lang = lang.id;
  u.entry.duration_s = u.audio.duration();
  u.entry.source = generated ? "generated" : "human";
  return u;
}

/// Writes <out>/<split>/<id>.{pcm,clip}, <out>/<split>.jsonl and
/// <out>/tokenizer.txt.
inline Manifest generate_corpus(const SynthTaskConfig& cfg, std::size_t n_utts, const std::string& split,
                                const std::filesystem::path& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir / split);
  task_tokenizer(cfg).save(out_dir / "tokenizer.txt");
  Manifest m;
  m.base = out_dir;
  for (std::size_t i = 0; i < n_utts; ++i) {
    auto u = render_utterance(cfg, split, i);
    write_waveform(out_dir / u.entry.audio, u.audio);
    write_clip(out_dir / u.entry.video, u.video);
    m.entries.push_back(std::move(u.entry));
  }
  write_manifest(out_dir / (split + ".jsonl"), m);
  return m;
}

// ------------------------------------------------------------------ batches

/// Noise pre-rendered once per run; utterances draw random segments from it.
struct NoiseBank {
  Waveform babble;
  Waveform white;

  static NoiseBank make(std::uint64_t seed, double seconds, const SynthTaskConfig& voice) {
    NoiseBank b;
    const auto n = static_cast<std::size_t>(seconds * voice.sample_rate);
    Rng r1 = make_rng(seed, {0xBAB});
    b.babble = synth_noise(NoiseKind::kBabble, n, r1, voice);
    Rng r2 = make_rng(seed, {0x1E});
    b.white = synth_noise(NoiseKind::kWhite, n, r2, voice);
    return b;
  }

  Waveform segment(NoiseKind kind, std::size_t length, Rng& rng) const {
    const Waveform& src = kind == NoiseKind::kWhite ? white : babble;
    if (src.samples.empty()) throw std::invalid_argument("noise bank is empty");
    Waveform out;
    out.sample_rate = src.sample_rate;
    out.samples.resize(length);
    const auto start = static_cast<std::size_t>(uniform_int(rng, 0, std::int64_t(src.samples.size()) - 1));
    for (std::size_t i = 0; i < length; ++i) out.samples[i] = src.samples[(start + i) % src.samples.size()];
    return out;
  }
};

struct LoadOptions {
  bool need_audio = true;
  bool need_video = true;
  std::optional<NoiseSpec> test_noise;  // inference-time corruption
  const NoiseBank* noise = nullptr;     // required for any noise mixing
};

inline bool all_zero(const std::vector<float>& v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return x == 0.0f; });
}

/// A padded batch: mel [B x T_max x n_mels], video [B x T_v,max x h x w],
/// with per-utterance lengths. A zero length marks a stream that was not
/// loaded or whose file is all zeros (treated as a masked modality).
template <class Real>
struct Batch {
  std::vector<std::size_t> indices;
  std::vector<std::string> ids, langs;
  std::vector<std::vector<int>> targets;
  Tensor<Real> mel;
  Tensor<Real> video;
  std::vector<std::size_t> mel_lengths, video_lengths;
  std::size_t n_mels = 0, vh = 0, vw = 0;

  std::size_t size() const { return ids.size(); }

  /// Unpadded view of utterance i.
  UtteranceFeatures<Real> utterance(std::size_t i) const {
    UtteranceFeatures<Real> f;
    f.id = ids[i];
    f.lang = langs[i];
    f.target = targets[i];
    f.mel_frames = mel_lengths[i];
    f.video_frames = video_lengths[i];
    if (mel_lengths[i]) {
      const std::size_t T = mel.dim(1);
      const Real* src = mel.data() + i * T * n_mels;
      f.mel = Tensor<Real>({mel_lengths[i], n_mels}, std::vector<Real>(src, src + mel_lengths[i] * n_mels));
    }
    if (video_lengths[i]) {
      const std::size_t T = video.dim(1), fs = vh * vw;
      const Real* src = video.data() + i * T * fs;
      f.video = Tensor<Real>({video_lengths[i], vh, vw, 1}, std::vector<Real>(src, src + video_lengths[i] * fs));
    }
    return f;
  }
};

/// Per-utterance seeds depend only on (seed, manifest index), so batch order
/// never changes an utterance's augmentation or noise.
template <class Real>
Batch<Real> load_batch(const Manifest& m, const std::vector<std::size_t>& indices, Phase phase,
                       const AugmentConfig& aug, const FrontendConfig& fe, const TokenizerSpec& tok,
                       std::uint64_t seed, const LoadOptions& opt = {}) {
  struct Loaded {
    std::optional<Tensor<Real>> mel, video;
  };
  std::vector<Loaded> items;
  Batch<Real> b;
  b.n_mels = fe.n_mels;
  b.vh = b.vw = fe.crop / fe.visual_input_pool;
  for (std::size_t idx : indices) {
    if (idx >= m.size()) throw std::out_of_range("batch index " + std::to_string(idx) + " outside manifest");
    const auto& e = m[idx];
    Rng rng = make_rng(seed, {idx});
    Loaded it;
    try {
      if (opt.need_audio) {
        if (e.audio.empty()) throw std::runtime_error("no audio file");
        Waveform w = read_waveform(m.resolve(e.audio));
        if (!all_zero(w.samples)) {
          Rng noise_rng = make_rng(seed, {idx, 0x401});
          if (phase == Phase::kTrain && !aug.train_noise_snrs.empty() && uniform01(noise_rng) < aug.train_noise_p) {
            if (!opt.noise) throw std::invalid_argument("training noise requested without a noise bank");
            const auto k = uniform_int(noise_rng, 0, std::int64_t(aug.train_noise_snrs.size()) - 1);
            auto n = opt.noise->segment(parse_noise_kind(aug.train_noise_kind), w.samples.size(), noise_rng);
            w = mix_noise(w, n, aug.train_noise_snrs[k]);
          } else if (opt.test_noise && !opt.test_noise->clean()) {
            if (!opt.noise) throw std::invalid_argument("test noise requested without a noise bank");
            auto n = opt.noise->segment(opt.test_noise->kind, w.samples.size(), noise_rng);
            w = mix_noise(w, n, opt.test_noise->snr_db);
          }
          auto mel = log_mel<Real>(w, fe);
          normalize_per_feature(mel);
          if (phase == Phase::kTrain && aug.spec_augment) spec_augment(mel, aug, rng);
          it.mel = std::move(mel);
        }
      }
      if (opt.need_video) {
        if (e.video.empty()) throw std::runtime_error("no video file");
        VideoClip c = read_clip(m.resolve(e.video));
        if (!all_zero(c.frames)) {
          Rng vrng = make_rng(seed, {idx, 0x71D});
          it.video = prepare_visual_input<Real>(visual_augment(c, aug, phase, vrng), fe);
        }
      }
    } catch (const std::exception& ex) {
      throw std::runtime_error("utterance " + e.id + ": " + ex.what());
    }
    b.indices.push_back(idx);
    b.ids.push_back(e.id);
    b.langs.push_back(e.lang);
    b.targets.push_back(tok.encode(strip_separators(e.text), e.lang));
    b.mel_lengths.push_back(it.mel ? it.mel->rows() : 0);
    b.video_lengths.push_back(it.video ? it.video->rows() : 0);
    items.push_back(std::move(it));
  }
  const std::size_t B = items.size();
  const std::size_t tm = B ? *std::max_element(b.mel_lengths.begin(), b.mel_lengths.end()) : 0;
  const std::size_t tv = B ? *std::max_element(b.video_lengths.begin(), b.video_lengths.end()) : 0;
  b.mel = Tensor<Real>({B, tm, b.n_mels});
  b.video = Tensor<Real>({B, tv, b.vh, b.vw});
  for (std::size_t i = 0; i < B; ++i) {
    if (items[i].mel) std::copy_n(items[i].mel->data(), items[i].mel->size(), b.mel.data() + i * tm * b.n_mels);
    if (items[i].video) {
      std::copy_n(items[i].video->data(), items[i].video->size(), b.video.data() + i * tv * b.vh * b.vw);
    }
  }
  return b;
}

}  // namespace avfc
