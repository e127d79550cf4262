#pragma once

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "avfc/augment.hpp"
#include "avfc/data.hpp"
#include "avfc/model.hpp"
#include "avfc/synth.hpp"

namespace avfc {

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double weight_decay = 1e-3;
  double peak_lr = 1e-3;
  long warmup_steps = 5000;
  long hold_steps = 15000;
  double eps = 1e-8;

  void validate() const {
    if (!(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1)) throw std::invalid_argument("betas must lie in (0,1)");
    if (warmup_steps < 0 || hold_steps < warmup_steps) throw std::invalid_argument("need 0 <= warmup <= hold");
    if (peak_lr <= 0 || weight_decay < 0 || eps <= 0) throw std::invalid_argument("invalid optimizer constants");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(OptimizerConfig, beta1, beta2, weight_decay, peak_lr, warmup_steps,
                                                hold_steps, eps)

/// Linear warm-up, constant hold, then inverse-square-root decay anchored
/// at the end of the hold so the schedule is continuous. Steps are 1-based.
inline double lr_at(long step, const OptimizerConfig& c) {
  if (step < 1) throw std::invalid_argument("lr_at: steps are 1-based");
  if (step <= c.warmup_steps) return c.peak_lr * double(step) / double(c.warmup_steps);
  if (step <= c.hold_steps) return c.peak_lr;
  return c.peak_lr * std::sqrt(double(c.hold_steps) / double(step));
}

template <class Real>
struct TrainState {
  long step = 0;
  ParameterSet<Real> params;
  ParameterSet<Real> m;
  ParameterSet<Real> v;
  ParameterSet<Real> ema;
  Rng rng;

  static TrainState init(ParameterSet<Real> p, std::uint64_t seed) {
    TrainState s;
    s.m = p.zeros_like();
    s.v = p.zeros_like();
    s.ema = p;
    s.params = std::move(p);
    s.rng = make_rng(seed, {0x5747});
    return s;
  }
};

/// Decoupled AdamW: p <- p - lr*wd*p - lr * m_hat / (sqrt(v_hat) + eps).
/// The learning rate comes from the schedule unless given explicitly.
template <class Real>
void adamw_step(TrainState<Real>& s, const ParameterSet<Real>& grads, const OptimizerConfig& c,
                std::optional<double> lr = std::nullopt) {
  for (const auto& [name, g] : grads) {
    if (!s.params.contains(name) || s.params.at(name).shape() != g.shape()) {
      throw ShapeError("adamw_step: gradient '" + name + "' does not match any parameter");
    }
    if (!g.all_finite()) throw NonFiniteError("adamw_step: non-finite gradient for '" + name + "'");
  }
  const long t = s.step + 1;
  const double rate = lr ? *lr : lr_at(t, c);
  const double bc1 = 1.0 - std::pow(c.beta1, double(t));
  const double bc2 = 1.0 - std::pow(c.beta2, double(t));
  for (auto& [name, p] : s.params) {
    auto& m = s.m.at(name);
    auto& v = s.v.at(name);
    const Tensor<Real>* g = grads.contains(name) ? &grads.at(name) : nullptr;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g ? double((*g)[i]) : 0.0;
      const double mi = c.beta1 * double(m[i]) + (1.0 - c.beta1) * gi;
      const double vi = c.beta2 * double(v[i]) + (1.0 - c.beta2) * gi * gi;
      m[i] = Real(mi);
      v[i] = Real(vi);
      double pi = double(p[i]);
      pi -= rate * c.weight_decay * pi;
      pi -= rate * (mi / bc1) / (std::sqrt(vi / bc2) + c.eps);
      p[i] = Real(pi);
    }
  }
  s.step = t;
}

template <class Real>
void ema_update(ParameterSet<Real>& ema, const ParameterSet<Real>& params, double momentum = 0.9999) {
  for (auto& [name, e] : ema) {
    const auto& p = params.at(name);
    if (p.shape() != e.shape()) throw ShapeError("ema_update: shape mismatch for '" + name + "'");
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = Real(momentum * double(e[i]) + (1.0 - momentum) * double(p[i]));
  }
}

/// Scales gradients in place so their global L2 norm is at most max_norm;
/// returns the norm before clipping.
template <class Real>
double clip_global_norm(ParameterSet<Real>& grads, double max_norm) {
  double sq = 0;
  for (const auto& [name, g] : grads)
    for (Real x : g.values()) sq += double(x) * double(x);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const Real k = Real(max_norm / norm);
    for (auto& [name, g] : grads)
      for (Real& x : g.values()) x *= k;
  }
  return norm;
}

// ------------------------------------------------------------------ configuration

struct RunConfig {
  long steps = 3000;
  int batch_size = 16;
  double ema_momentum = 0.9999;
  long checkpoint_every = 500;
  long log_every = 10;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
  double noise_bank_seconds = 60.0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, steps, batch_size, ema_momentum, checkpoint_every, log_every,
                                                clip_norm, seed, noise_bank_seconds)

struct ExperimentConfig {
  ModelConfig model;
  OptimizerConfig optim;
  AugmentConfig augment;
  RunConfig run;
  SynthTaskConfig task;

  void validate() const {
    model.validate();
    optim.validate();
    augment.validate(model.frontend);
    task.validate();
    if (task.vocab_size() != model.vocab_size) throw std::invalid_argument("model vocab_size must match the task");
    if (run.batch_size <= 0 || run.steps < 0 || run.ema_momentum < 0 || run.ema_momentum > 1) {
      throw std::invalid_argument("invalid run configuration");
    }
  }

  TokenizerSpec tokenizer() const { return task_tokenizer(task); }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, model, optim, augment, run, task)

/// Reads a JSON config; absent keys keep their defaults.
inline ExperimentConfig load_config(const std::filesystem::path& p) {
  auto cfg = nlohmann::json::parse(detail::read_file(p)).get<ExperimentConfig>();
  cfg.validate();
  return cfg;
}

// ------------------------------------------------------------------ checkpoints
//
// "AVFC1" | u32 record count | records | trainer state
//   record: u32 name length, name bytes, u8 dtype (1 = f32, 2 = f64), u8 rank,
//           rank x u64 extents, raw little-endian values
//   names:  parameter names as is; "ema:", "adam_m:" and "adam_v:" prefixes
//           for the shadow and moment tables
//   trainer state: u64 step, u32 length + RNG state text, u32 length + config JSON

namespace detail {

inline void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(const std::string& b) : b_(b) {}
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw std::runtime_error("checkpoint truncated");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(b_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    auto v = get_u32(b_, pos_);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

static_assert(std::endian::native == std::endian::little, "checkpoint IO copies raw little-endian values");

template <class Real>
constexpr std::uint8_t dtype_code() {
  static_assert(sizeof(float) == 4 && sizeof(double) == 8);
  return std::is_same_v<Real, float> ? 1 : 2;
}

template <class Real>
void put_record(std::string& out, const std::string& name, const Tensor<Real>& t) {
  put_str(out, name);
  put_u8(out, dtype_code<Real>());
  put_u8(out, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t e : t.shape()) put_u64(out, e);
  const auto* bytes = reinterpret_cast<const char*>(t.data());
  out.append(bytes, t.size() * sizeof(Real));
}

}  // namespace detail

struct CheckpointMeta {
  long step = 0;
  std::string rng_state;
  std::string config_json;
};

template <class Real>
std::string encode_checkpoint(const TrainState<Real>& s, const std::string& config_json) {
  std::string out = "AVFC1";
  const std::uint32_t n = static_cast<std::uint32_t>(4 * s.params.tensors());
  detail::put_u32(out, n);
  for (const auto& [name, t] : s.params) detail::put_record(out, name, t);
  for (const auto& [name, t] : s.ema) detail::put_record(out, "ema:" + name, t);
  for (const auto& [name, t] : s.m) detail::put_record(out, "adam_m:" + name, t);
  for (const auto& [name, t] : s.v) detail::put_record(out, "adam_v:" + name, t);
  detail::put_u64(out, static_cast<std::uint64_t>(s.step));
  std::ostringstream rs;
  rs << s.rng;
  detail::put_str(out, rs.str());
  detail::put_str(out, config_json);
  return out;
}

template <class Real>
TrainState<Real> decode_checkpoint(const std::string& bytes, CheckpointMeta* meta = nullptr) {
  detail::Reader r(bytes);
  if (r.str(5) != "AVFC1") throw std::runtime_error("not an AVFC1 checkpoint");
  const std::uint32_t n = r.u32();
  TrainState<Real> s;
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = r.str(r.u32());
    const std::uint8_t dtype = r.u8();
    const std::uint8_t rank = r.u8();
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(r.u64());
    const std::size_t count = shape_size(shape);
    Tensor<Real> t(shape);
    if (dtype == 1) {
      std::vector<float> v(count);
      const auto raw = r.str(count * 4);
      std::memcpy(v.data(), raw.data(), raw.size());
      for (std::size_t k = 0; k < count; ++k) t[k] = Real(v[k]);
    } else if (dtype == 2) {
      std::vector<double> v(count);
      const auto raw = r.str(count * 8);
      std::memcpy(v.data(), raw.data(), raw.size());
      for (std::size_t k = 0; k < count; ++k) t[k] = Real(v[k]);
    } else {
      throw std::runtime_error("checkpoint record '" + name + "' has unknown dtype");
    }
    auto take = [&](const std::string& prefix, ParameterSet<Real>& dst) {
      if (name.rfind(prefix, 0) != 0) return false;
      dst.add(name.substr(prefix.size()), std::move(t));
      return true;
    };
    if (!take("ema:", s.ema) && !take("adam_m:", s.m) && !take("adam_v:", s.v)) s.params.add(name, std::move(t));
  }
  s.step = static_cast<long>(r.u64());
  CheckpointMeta m;
  m.step = s.step;
  m.rng_state = r.str(r.u32());
  m.config_json = r.str(r.u32());
  if (!r.done()) throw std::runtime_error("trailing bytes after checkpoint");
  std::istringstream rs(m.rng_state);
  rs >> s.rng;
  if (meta) *meta = std::move(m);
  return s;
}

template <class Real>
void save_checkpoint(const std::filesystem::path& p, const TrainState<Real>& s, const std::string& config_json) {
  // Write then rename so an interrupted save never clobbers the previous file.
  const auto tmp = p.string() + ".tmp";
  detail::write_file(tmp, encode_checkpoint(s, config_json));
  std::filesystem::rename(tmp, p);
}

template <class Real>
TrainState<Real> load_checkpoint(const std::filesystem::path& p, CheckpointMeta* meta = nullptr) {
  return decode_checkpoint<Real>(detail::read_file(p), meta);
}

/// Config stored inside a checkpoint.
inline ExperimentConfig checkpoint_config(const CheckpointMeta& m) {
  return nlohmann::json::parse(m.config_json).get<ExperimentConfig>();
}

// ------------------------------------------------------------------ training loop

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepMetrics {
  long step = 0;
  double lr = 0;
  double l_rnnt = 0;
  double l_ctc = 0;
  double hybrid = 0;
  double wall_s = 0;
};

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::vector<StepMetrics> history;  // every step
};

/// Manifest positions of the utterances in batch `step` (1-based): epochs
/// are seeded permutations, batches run across epoch boundaries.
inline std::vector<std::size_t> batch_indices(std::size_t n, int batch, long step, std::uint64_t seed) {
  std::vector<std::size_t> out;
  std::size_t offset = std::size_t(step - 1) * std::size_t(batch);
  std::size_t cached_epoch = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> order;
  for (int i = 0; i < batch; ++i, ++offset) {
    const std::size_t epoch = offset / n;
    if (epoch != cached_epoch) {
      order.resize(n);
      for (std::size_t k = 0; k < n; ++k) order[k] = k;
      Rng r = make_rng(seed, {0xE9, epoch});
      for (std::size_t k = n; k > 1; --k) std::swap(order[k - 1], order[std::size_t(uniform_int(r, 0, std::int64_t(k) - 1))]);
      cached_epoch = epoch;
    }
    out.push_back(order[offset % n]);
  }
  return out;
}

inline std::string metrics_header() { return "step\tlr\tl_rnnt\tl_ctc\thybrid\twall_s"; }

inline std::string metrics_line(const StepMetrics& m) {
  std::ostringstream os;
  os << m.step << '\t' << std::setprecision(8) << m.lr << '\t' << m.l_rnnt << '\t' << m.l_ctc << '\t' << m.hybrid
     << '\t' << std::setprecision(6) << m.wall_s;
  return os.str();
}

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, long step) {
  std::ostringstream os;
  os << "ckpt-" << std::setw(6) << std::setfill('0') << step << ".avfc";
  return dir / os.str();
}

/// Trains from a fresh initialization for cfg.run.steps steps. Writes
/// <out>/metrics.tsv, periodic <out>/ckpt-NNNNNN.avfc and <out>/final.avfc.
/// Single-threaded and bit-reproducible for a fixed config.
inline TrainResult run_training(const ExperimentConfig& cfg, const Manifest& manifest, const std::filesystem::path& out,
                                const std::function<void(const StepMetrics&)>& on_step = {}) {
  cfg.validate();
  if (manifest.empty()) throw std::invalid_argument("run_training: manifest is empty");
  std::filesystem::create_directories(out);
  const std::string cfg_json = nlohmann::json(cfg).dump();
  const auto tok = cfg.tokenizer();
  const auto& mc = cfg.model;
  auto state = TrainState<float>::init(init_parameters<float>(mc, cfg.run.seed), cfg.run.seed);
  const bool noisy = cfg.augment.train_noise_p > 0 && !cfg.augment.train_noise_snrs.empty();
  std::optional<NoiseBank> bank;
  if (noisy) bank = NoiseBank::make(derive_seed(cfg.run.seed, {0x4E}), cfg.run.noise_bank_seconds, cfg.task);
  LoadOptions opt;
  opt.need_audio = mc.has_audio();
  opt.need_video = mc.has_video();
  opt.noise = bank ? &*bank : nullptr;

  std::ofstream log(out / "metrics.tsv");
  log << metrics_header() << "\n";
  TrainResult result;
  std::filesystem::path last_good = checkpoint_path(out, 0);
  save_checkpoint(last_good, state, cfg_json);
  const auto t0 = std::chrono::steady_clock::now();

  for (long step = 1; step <= cfg.run.steps; ++step) {
    const std::uint64_t step_seed = state.rng();
    const auto idx = batch_indices(manifest.size(), cfg.run.batch_size, step, cfg.run.seed);
    const auto batch = load_batch<float>(manifest, idx, Phase::kTrain, cfg.augment, mc.frontend, tok, step_seed, opt);
    ParameterSet<float> grads = state.params.zeros_like();
    StepMetrics sm;
    sm.step = step;
    sm.lr = lr_at(step, cfg.optim);
    const float w = 1.0f / float(batch.size());
    try {
      for (std::size_t i = 0; i < batch.size(); ++i) {
        Graph<float> g(&state.params);
        Rng mrng = make_rng(step_seed, {batch.indices[i], 0x3D});
        auto nodes = build_utterance_loss(g, batch.utterance(i), mc, Phase::kTrain, Mask::kNone, mrng,
                                          derive_seed(step_seed, {batch.indices[i], 0xD0}));
        g.backward(nodes.total);
        g.accumulate_parameter_grads(grads, w);
        sm.hybrid += g.value(nodes.total)[0] / batch.size();
        if (nodes.rnnt) sm.l_rnnt += g.value(*nodes.rnnt)[0] / batch.size();
        if (nodes.ctc_final) sm.l_ctc += g.value(*nodes.ctc_final)[0] / batch.size();
      }
      if (!std::isfinite(sm.hybrid)) throw NonFiniteError("loss is not finite");
      clip_global_norm(grads, cfg.run.clip_norm);
      adamw_step(state, grads, cfg.optim);
    } catch (const NonFiniteError& e) {
      log.flush();
      throw TrainingDiverged("diverged at step " + std::to_string(step) + " (" + e.what() +
                             "); last good checkpoint: " + last_good.string());
    }
    ema_update(state.ema, state.params, cfg.run.ema_momentum);
    sm.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(sm);
    if (cfg.run.log_every > 0 && (step % cfg.run.log_every == 0 || step == cfg.run.steps)) {
      log << metrics_line(sm) << "\n";
      log.flush();
    }
    if (on_step) on_step(sm);
    if (cfg.run.checkpoint_every > 0 && step % cfg.run.checkpoint_every == 0) {
      last_good = checkpoint_path(out, step);
      save_checkpoint(last_good, state, cfg_json);
    }
  }
  result.final_checkpoint = out / "final.avfc";
  save_checkpoint(result.final_checkpoint, state, cfg_json);
  return result;
}

}  // namespace avfc
