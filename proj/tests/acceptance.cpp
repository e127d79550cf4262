// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Trained models, the corpus and reports live under --work and are
// reused when their inputs are unchanged.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "avfc/checks.hpp"
#include "avfc/eval.hpp"

namespace {

using namespace avfc;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Line {
  std::string name;
  bool pass = false;
  std::string detail;
};

std::vector<Line> g_lines;

void report(const std::string& name, bool pass, const std::string& detail) {
  g_lines.push_back({name, pass, detail});
  std::cout << (pass ? "PASS  " : "FAIL  ") << std::left << std::setw(24) << name << detail << std::endl;
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) return {};
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  f << s;
}

// ------------------------------------------------------------------ loss oracles

std::vector<std::vector<double>> softmax_rows(const std::vector<double>& x, std::size_t rows, std::size_t cols) {
  std::vector<std::vector<double>> p(rows, std::vector<double>(cols));
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -1e300, z = 0;
    for (std::size_t k = 0; k < cols; ++k) mx = std::max(mx, x[r * cols + k]);
    for (std::size_t k = 0; k < cols; ++k) z += std::exp(x[r * cols + k] - mx);
    for (std::size_t k = 0; k < cols; ++k) p[r][k] = std::exp(x[r * cols + k] - mx) / z;
  }
  return p;
}

// Sums the probability of every frame labelling that collapses to the target.
double ctc_enumerate(const std::vector<double>& x, std::size_t T, int V, const std::vector<int>& y) {
  const auto p = softmax_rows(x, T, std::size_t(V + 1));
  std::vector<int> path(T, 0);
  double total = 0;
  while (true) {
    std::vector<int> out;
    int prev = -1;
    for (int k : path) {
      if (k != prev && k != V) out.push_back(k);
      prev = k;
    }
    if (out == y) {
      double pr = 1;
      for (std::size_t t = 0; t < T; ++t) pr *= p[t][std::size_t(path[t])];
      total += pr;
    }
    std::size_t t = 0;
    while (t < T && ++path[t] == V + 1) path[t++] = 0;
    if (t == T) break;
  }
  return total > 0 ? -std::log(total) : std::numeric_limits<double>::infinity();
}

// Walks every monotonic lattice path: blank moves t, label moves u, the last
// emission is a blank from (T-1, U).
double rnnt_paths(const std::vector<std::vector<double>>& p, std::size_t T, std::size_t U, int V,
                  const std::vector<int>& y, std::size_t t, std::size_t u) {
  const auto& row = p[t * (U + 1) + u];
  if (t == T - 1 && u == U) return row[std::size_t(V)];
  double s = 0;
  if (t + 1 < T) s += row[std::size_t(V)] * rnnt_paths(p, T, U, V, y, t + 1, u);
  if (u < U) s += row[std::size_t(y[u])] * rnnt_paths(p, T, U, V, y, t, u + 1);
  return s;
}

double rnnt_enumerate(const std::vector<double>& x, std::size_t T, int V, const std::vector<int>& y) {
  const std::size_t U = y.size();
  const auto p = softmax_rows(x, T * (U + 1), std::size_t(V + 1));
  return -std::log(rnnt_paths(p, T, U, V, y, 0, 0));
}

void check_ctc_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 gen(101);
  std::normal_distribution<double> nd(0.0, 3.0);
  std::size_t n = 0, infeasible = 0, disagree = 0;
  double worst = 0;
  for (std::size_t T = 1; T <= 6; ++T)
    for (std::size_t U = 0; U <= 3; ++U)
      for (int V = 1; V <= 4; ++V)
        for (int d = 0; d < 500; ++d) {
          std::vector<int> y(U);
          for (auto& k : y) k = int(gen() % std::uint64_t(V));
          std::vector<double> x(T * std::size_t(V + 1));
          for (auto& v : x) v = nd(gen);
          const double oracle = ctc_enumerate(x, T, V, y);
          ++n;
          if (std::isinf(oracle)) {
            ++infeasible;
            bool threw = false;
            try {
              ctc_loss(Tensor<double>({T, std::size_t(V + 1)}, x), y, V);
            } catch (const TargetTooLong&) {
              threw = true;
            }
            disagree += !threw;
            continue;
          }
          const double dp = ctc_loss(Tensor<double>({T, std::size_t(V + 1)}, x), y, V).value;
          worst = std::max(worst, std::abs(dp - oracle));
        }
  const double secs = seconds_since(t0);
  report("ctc-oracle", worst <= 1e-9 && disagree == 0 && secs <= 120,
         "max|dp-enum|=" + fmt(worst, 3) + " over " + std::to_string(n) + " instances (" +
             std::to_string(infeasible) + " infeasible, " + std::to_string(disagree) + " disagreements), " +
             fmt(secs, 3) + " s");
}

void check_rnnt_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 gen(202);
  std::normal_distribution<double> nd(0.0, 3.0);
  std::size_t n = 0;
  double worst = 0;
  for (std::size_t T = 1; T <= 4; ++T)
    for (std::size_t U = 0; U <= 3; ++U)
      for (int V = 1; V <= 4; ++V)
        for (int d = 0; d < 500; ++d) {
          std::vector<int> y(U);
          for (auto& k : y) k = int(gen() % std::uint64_t(V));
          std::vector<double> x(T * (U + 1) * std::size_t(V + 1));
          for (auto& v : x) v = nd(gen);
          const double oracle = rnnt_enumerate(x, T, V, y);
          const double dp = rnnt_loss(Tensor<double>({T, U + 1, std::size_t(V + 1)}, x), y, V).value;
          worst = std::max(worst, std::abs(dp - oracle));
          ++n;
        }
  const double secs = seconds_since(t0);
  report("rnnt-oracle", worst <= 1e-9 && secs <= 120,
         "max|dp-enum|=" + fmt(worst, 3) + " over " + std::to_string(n) + " instances, " + fmt(secs, 3) + " s");
}

void check_gradients() {
  const auto t0 = Clock::now();
  const auto r = run_grad_checks(250, 1e-4, 1);
  const double secs = seconds_since(t0);
  const bool enough = r.ctc.checked >= 200 && r.rnnt.checked >= 200 && r.model.checked >= 200;
  report("gradient-check",
         enough && r.ctc.max_rel_error <= 1e-4 && r.rnnt.max_rel_error <= 1e-4 && r.model.max_rel_error <= 1e-3 &&
             secs <= 600,
         "ctc " + fmt(r.ctc.max_rel_error, 3) + ", rnnt " + fmt(r.rnnt.max_rel_error, 3) + ", model " +
             fmt(r.model.max_rel_error, 3) + " (" + std::to_string(r.model.checked) + " coords, " +
             std::to_string(r.model.kinked) + " kink redraws), " + fmt(secs, 3) + " s");
}

// ------------------------------------------------------------------ arithmetic criteria

bool within_ulps(double a, double b, int ulps) {
  return std::abs(a - b) <= ulps * std::numeric_limits<double>::epsilon() * std::max(std::abs(a), std::abs(b));
}

void check_hybrid() {
  bool ok = true;
  std::string why;
  auto expect = [&](bool c, const std::string& what) {
    if (!c && why.empty()) why = what;
    ok = ok && c;
  };
  expect(within_ulps(hybrid_loss(2.0, 1.0, {}, {0.3, 0.5}), 1.7, 2), "1.7 case");
  expect(within_ulps(hybrid_loss(2.0, 2.0, {1.0, 3.0}, {0.3, 0.5}), 2.0, 2), "taps case");
  std::mt19937_64 gen(303);
  std::uniform_real_distribution<double> u(0.0, 20.0);
  for (int i = 0; i < 1000; ++i) {
    const double r = u(gen), c = u(gen);
    std::vector<double> taps(gen() % 4);
    for (auto& t : taps) t = u(gen);
    double mean = 0;
    for (double t : taps) mean += t;
    const double ctc = taps.empty() ? c : 0.5 * c + 0.5 * (mean / double(taps.size()));
    expect(hybrid_loss(r, c, taps, {0.0, 0.5}) == r, "alpha 0 returns the transducer loss");
    expect(within_ulps(hybrid_loss(r, c, taps, {1.0, 0.5}), ctc, 4), "alpha 1 returns the CTC term");
    expect(within_ulps(hybrid_loss(r, c, taps, {0.3, 0.5}), 0.7 * r + 0.3 * ctc, 4), "alpha 0.3");
  }
  // The training graph's objective is the same combination of its own loss nodes.
  double worst = 0;
  for (double alpha : {0.0, 0.3, 1.0}) {
    auto c = grad_check_model();
    c.alpha = alpha;
    const auto params = init_parameters<double>(c, 7);
    const auto f = grad_check_features(c, 7);
    Graph<double> g(&params);
    Rng unused(0);
    const auto n = build_utterance_loss(g, f, c, Phase::kInfer, Mask::kNone, unused, 0);
    std::vector<double> taps;
    for (auto t : n.taps) taps.push_back(g.value(t)[0]);
    // A term whose weight is zero is not built at all.
    expect(n.rnnt.has_value() == (alpha < 1) && n.ctc_final.has_value() == (alpha > 0), "graph terms");
    if (!n.rnnt.has_value() && !n.ctc_final.has_value()) continue;
    const double r = n.rnnt ? g.value(*n.rnnt)[0] : 0.0;
    const double ctc = n.ctc_final ? g.value(*n.ctc_final)[0] : 0.0;
    const double want = hybrid_loss(r, ctc, taps, {alpha, c.interctc_weight});
    worst = std::max(worst, std::abs(g.value(n.total)[0] - want));
  }
  expect(worst <= 1e-12, "graph objective");
  report("hybrid-arithmetic", ok,
         ok ? "alpha in {0, 0.3, 1}: 1000 random cases, worked examples, graph objective |diff| " + fmt(worst, 2)
            : "mismatch: " + why);
}

void check_schedule() {
  const OptimizerConfig c;
  const double a = lr_at(2500, c), b = lr_at(10000, c), d = lr_at(60000, c);
  const bool lr_ok = std::abs(a - 0.0005) <= 1e-15 && std::abs(b - 0.001) <= 1e-15 && std::abs(d - 0.0005) <= 1e-15;
  double worst = 0;
  for (double momentum : {0.9999, 0.995, 0.9}) {
    ParameterSet<double> ema, p;
    ema.add("w", Tensor<double>({3}, std::vector<double>{1.0, -2.0, 0.25}));
    p.add("w", Tensor<double>({3}, std::vector<double>{0.0, 0.5, 3.0}));
    const auto e0 = ema.at("w").storage();
    for (int k = 1; k <= 1000; ++k) {
      ema_update(ema, p, momentum);
      for (std::size_t i = 0; i < 3; ++i) {
        const double want = std::abs(e0[i] - p.at("w")[i]) * std::pow(momentum, k);
        worst = std::max(worst, std::abs(std::abs(ema.at("w")[i] - p.at("w")[i]) - want));
      }
    }
  }
  report("schedule-ema", lr_ok && worst <= 1e-12,
         "lr(2500)=" + fmt(a, 10) + " lr(10000)=" + fmt(b, 10) + " lr(60000)=" + fmt(d, 10) +
             ", EMA identity max dev " + fmt(worst, 3));
}

void check_shapes() {
  FrontendConfig fe;
  fe.n_mels = 16;
  fe.visual_stem_channels = fe.visual_channels = 4;
  ParameterSet<double> p;
  Rng rng = make_rng(5);
  add_audio_subsample_params(p, "sub", fe, 8, rng);
  add_visual_frontend_params(p, "vis", fe, 8, rng);
  bool ok = true;
  std::size_t a128 = 0;
  for (std::size_t T : {1u, 2u, 7u, 8u, 9u, 100u, 127u, 128u, 129u, 301u}) {
    Graph<double> g(&p);
    const auto y = audio_subsample(g, g.constant(Tensor<double>({T, 16}, 0.25)), "sub", fe);
    const auto want = std::size_t(std::ceil(std::ceil(std::ceil(T / 2.0) / 2.0) / 2.0));
    ok = ok && g.shape(y)[0] == want;
    if (T == 128) a128 = g.shape(y)[0];
  }
  for (std::size_t Tv : {1u, 2u, 3u, 8u, 25u, 50u, 51u}) {
    VideoClip c;
    c.num_frames = Tv;
    c.height = c.width = 96;
    c.frames.assign(Tv * 96 * 96, 0.5f);
    Graph<double> g(&p);
    const auto y = visual_frontend(g, g.constant(prepare_visual_input<double>(c, fe)), "vis", fe);
    ok = ok && g.shape(y)[0] == std::size_t(std::ceil(Tv / 2.0));
  }
  const double pa = fe.audio_period_ms(), pv = fe.video_period_ms();
  ok = ok && a128 == 16 && pa == 80.0 && pv == 80.0;
  report("shape-contract", ok,
         "audio 128 -> " + std::to_string(a128) + ", video ceil(T/2); periods " + fmt(pa) + " / " + fmt(pv) + " ms");
}

void check_wer_oracle() {
  std::mt19937_64 gen(404);
  const std::vector<std::string> words = {"a", "b", "c", "d", "e"};
  std::size_t bad = 0;
  for (int i = 0; i < 1000; ++i) {
    std::vector<std::string> r(gen() % 13), h(gen() % 13);
    for (auto& w : r) w = words[gen() % words.size()];
    for (auto& w : h) w = words[gen() % words.size()];
    std::vector<std::vector<std::size_t>> d(r.size() + 1, std::vector<std::size_t>(h.size() + 1));
    for (std::size_t a = 0; a <= r.size(); ++a)
      for (std::size_t b = 0; b <= h.size(); ++b) {
        if (a == 0 || b == 0) {
          d[a][b] = a + b;
        } else {
          d[a][b] = std::min({d[a - 1][b] + 1, d[a][b - 1] + 1, d[a - 1][b - 1] + (r[a - 1] != h[b - 1])});
        }
      }
    const std::size_t dist = d[r.size()][h.size()];
    const auto c = word_error_rate(r, h);
    const double want = r.empty() ? 100.0 * double(h.size()) : 100.0 * double(dist) / double(r.size());
    if (c.errors() != dist || c.wer() != want || c.ref_words != r.size()) ++bad;
  }
  report("wer-oracle", bad == 0, std::to_string(1000 - bad) + "/1000 pairs match the quadratic oracle exactly");
}

// ------------------------------------------------------------------ corpus and runs

struct Workspace {
  fs::path root;
  ExperimentConfig base;
  Manifest train, test;
  std::string corpus_key;
};

std::string task_key(const SynthTaskConfig& t, std::size_t n_train, std::size_t n_test) {
  return nlohmann::json(t).dump() + " " + std::to_string(n_train) + " " + std::to_string(n_test);
}

void prepare_corpus(Workspace& w) {
  const fs::path dir = w.root / "corpus";
  w.corpus_key = task_key(w.base.task, 2000, 200);
  if (slurp(dir / "corpus.key") != w.corpus_key) {
    std::cerr << "generating corpus in " << dir << std::endl;
    fs::remove_all(dir);
    generate_corpus(w.base.task, 2000, "train", dir);
    generate_corpus(w.base.task, 200, "test", dir);
    spit(dir / "corpus.key", w.corpus_key);
  }
  w.train = read_manifest(dir / "train.jsonl");
  w.test = read_manifest(dir / "test.jsonl");
}

struct Run {
  fs::path checkpoint;
  double wall_s = 0;          // last logged wall-clock
  long steps = 0;
  double early_loss = 0;      // mean hybrid over logged steps <= 50
  double late_loss = 0;       // mean hybrid over the last five logged steps
};

Run read_run(const fs::path& dir) {
  Run r;
  r.checkpoint = dir / "final.avfc";
  std::ifstream log(dir / "metrics.tsv");
  std::string line;
  std::getline(log, line);
  std::vector<std::pair<long, double>> rows;
  while (std::getline(log, line)) {
    std::istringstream is(line);
    long step;
    double lr, lr_rnnt, lctc, hybrid, wall;
    is >> step >> lr >> lr_rnnt >> lctc >> hybrid >> wall;
    rows.push_back({step, hybrid});
    r.wall_s = wall;
    r.steps = step;
  }
  std::size_t n_early = 0;
  for (const auto& [s, h] : rows)
    if (s <= 50) r.early_loss += h, ++n_early;
  if (n_early) r.early_loss /= double(n_early);
  const std::size_t k = std::min<std::size_t>(5, rows.size());
  for (std::size_t i = rows.size() - k; i < rows.size(); ++i) r.late_loss += rows[i].second / double(k);
  return r;
}

Run train_or_reuse(const Workspace& w, const std::string& name, const ExperimentConfig& cfg) {
  const fs::path dir = w.root / "runs" / name;
  const std::string key = nlohmann::json(cfg).dump() + "\n" + w.corpus_key;
  if (fs::exists(dir / "final.avfc") && slurp(dir / "inputs.key") == key) return read_run(dir);
  std::cerr << "training " << name << " (" << cfg.run.steps << " steps)" << std::endl;
  fs::remove_all(dir);
  run_training(cfg, w.train, dir, [&](const StepMetrics& s) {
    if (s.step % 500 == 0) std::cerr << "  " << name << " " << metrics_line(s) << std::endl;
  });
  spit(dir / "inputs.key", key);
  return read_run(dir);
}

ExperimentConfig variant(const ExperimentConfig& base, const std::string& loss, double moddrop, std::uint64_t seed) {
  auto c = base;
  c.model.loss_type = loss;
  c.model.modality_dropout_p = moddrop;
  c.run.seed = seed;
  return c;
}

EvalReport eval(const Run& r, const Manifest& m, EvalMode mode, NoiseSpec noise = {}) {
  return evaluate(r.checkpoint, m, mode, noise, 0);
}

// ------------------------------------------------------------------ model criteria

void check_convergence(const Workspace& w, const Run& r) {
  const auto rep = eval(r, w.test, EvalMode::kAV);
  report("toy-convergence", rep.wer <= 5.0 && r.steps <= 3000 && r.wall_s <= 1800,
         "clean AV WER " + fmt(rep.wer) + "% after " + std::to_string(r.steps) + " steps, training " +
             fmt(r.wall_s / 60, 3) + " min");
  const double drop = r.early_loss > 0 ? 1.0 - r.late_loss / r.early_loss : 0.0;
  std::cout << "info  training-loss          step<=50 mean " << fmt(r.early_loss) << " -> final mean "
            << fmt(r.late_loss) << " (" << fmt(100 * drop, 3) << "% decrease)" << std::endl;
}

void check_modality_dropout(const Workspace& w, const Run& with, const Run& without) {
  const auto none_v = eval(without, w.test, EvalMode::kV);
  const auto with_v = eval(with, w.test, EvalMode::kV);
  const auto with_a = eval(with, w.test, EvalMode::kA);
  const auto with_av = eval(with, w.test, EvalMode::kAV);
  const bool repeat = eval(without, w.test, EvalMode::kV) == none_v && eval(with, w.test, EvalMode::kA) == with_a;
  const bool ok =
      none_v.wer >= 80.0 && with_v.wer <= 20.0 && std::abs(with_a.wer - with_av.wer) <= 3.0 && repeat;
  report("modality-dropout", ok,
         "p=0: mask-audio " + fmt(none_v.wer) + "%; p=0.3: mask-audio " + fmt(with_v.wer) + "%, mask-video " +
             fmt(with_a.wer) + "% vs unmasked " + fmt(with_av.wer) + "%; repeat evals " +
             (repeat ? "identical" : "differ"));
}

void check_noise(const Workspace& w, const Run& r) {
  const auto t0 = Clock::now();
  CheckpointMeta meta;
  const auto state = load_checkpoint<float>(r.checkpoint, &meta);
  const auto cfg = checkpoint_config(meta);
  const double inf = std::numeric_limits<double>::infinity();
  const auto reps =
      noise_sweep(state.ema, cfg, w.test, NoiseKind::kWhite, {inf, -5.0}, {EvalMode::kA, EvalMode::kAV}, 0);
  const double secs = seconds_since(t0);
  const double a_clean = reps[0].wer, a_noisy = reps[1].wer, av_noisy = reps[3].wer;
  spit(w.root / "noise_sweep.txt", report_table(reps));
  report("noise-robustness", av_noisy <= 0.8 * a_noisy && a_noisy > a_clean && secs <= 600,
         "white -5 dB: AV " + fmt(av_noisy) + "% vs A " + fmt(a_noisy) + "% (A clean " + fmt(a_clean) +
             "%), babble p=" + fmt(cfg.augment.train_noise_p) + " training, sweep " + fmt(secs, 3) + " s");
}

void check_loss_type(const Workspace& w, const std::vector<Run>& hybrid, const std::vector<Run>& rnnt) {
  double mh = 0, mr = 0;
  std::string hs, rs;
  for (std::size_t i = 0; i < hybrid.size(); ++i) {
    const double h = eval(hybrid[i], w.test, EvalMode::kAV).wer;
    const double r = eval(rnnt[i], w.test, EvalMode::kAV).wer;
    mh += h / double(hybrid.size());
    mr += r / double(rnnt.size());
    hs += (i ? "/" : "") + fmt(h, 3);
    rs += (i ? "/" : "") + fmt(r, 3);
  }
  report("loss-type", mh <= mr + 0.5,
         "mean clean AV WER hybrid " + fmt(mh) + "% (" + hs + ") vs pure transducer " + fmt(mr) + "% (" + rs + ")");
}

void check_ranges(const Workspace& w, const Run& r) {
  const auto tok = w.base.tokenizer();
  std::map<std::string, std::size_t> per_lang;
  for (const auto& e : w.test.entries) ++per_lang[e.lang];
  std::size_t out_of_range = 0, decodes = 0;
  std::map<std::string, std::size_t> decoded;
  const std::vector<NoiseSpec> noises = {
      {}, {NoiseKind::kWhite, 0.0}, {NoiseKind::kBabble, 0.0}, {NoiseKind::kWhite, -5.0}};
  for (EvalMode mode : {EvalMode::kA, EvalMode::kV, EvalMode::kAV})
    for (const auto& n : noises) {
      if (mode == EvalMode::kV && !n.clean()) continue;  // noise touches audio only
      const auto rep = eval(r, w.test, mode, n);
      out_of_range += rep.out_of_range;
      decodes += rep.n_utts;
      for (const auto& [l, c] : per_lang) decoded[l] += c;
    }
  // Top up with decodes of random inputs until every language has 1000.
  CheckpointMeta meta;
  const auto state = load_checkpoint<float>(r.checkpoint, &meta);
  const auto cfg = checkpoint_config(meta);
  std::mt19937_64 gen(505);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  for (const auto& l : tok.languages()) {
    while (decoded[l.id] < 1000) {
      UtteranceFeatures<float> f;
      f.lang = l.id;
      f.mel_frames = 40 + gen() % 80;
      f.video_frames = (f.mel_frames + 3) / 4;
      f.mel = Tensor<float>({f.mel_frames, std::size_t(cfg.model.frontend.n_mels)});
      for (auto& v : f.mel->storage()) v = nd(gen);
      const std::size_t side = std::size_t(cfg.model.frontend.crop / cfg.model.frontend.visual_input_pool);
      f.video = Tensor<float>({f.video_frames, side, side, 1});
      for (auto& v : f.video->storage()) v = nd(gen);
      const auto hyp = decode_loaded(state.ema, cfg.model, tok, f, Mask::kNone, Decoder::kRnnt);
      for (int id : hyp.ids) out_of_range += !l.range.contains(id);
      ++decoded[l.id];
      ++decodes;
    }
  }
  bool round_trip = true;
  for (const auto& e : w.test.entries) {
    const auto text = strip_separators(e.text);
    round_trip = round_trip && tok.decode(tok.encode(text, e.lang)) == text;
  }
  for (const auto& l : tok.languages())
    for (int i = 0; i < 1000; ++i) {
      std::string s(gen() % 12, ' ');
      for (auto& ch : s) ch = l.inventory[gen() % l.inventory.size()];
      round_trip = round_trip && tok.decode(tok.encode(s, l.id)) == s;
    }
  round_trip = round_trip && TokenizerSpec::from_text(tok.to_text()) == tok;
  std::string counts;
  for (const auto& [l, c] : decoded) counts += (counts.empty() ? "" : ", ") + l + " " + std::to_string(c);
  report("token-ranges", out_of_range == 0 && round_trip,
         std::to_string(out_of_range) + " out-of-range ids over " + std::to_string(decodes) + " decodes (" + counts +
             "); tokenizer round trip " + (round_trip ? "exact" : "BROKEN"));
}

void check_determinism(const Workspace& w, const Run& r) {
  const fs::path dir = w.root / "determinism";
  fs::remove_all(dir);
  // Corpora: two fresh generations, and agreement with the main corpus files.
  bool corpus_ok = true;
  for (const char* sub : {"a", "b"}) {
    generate_corpus(w.base.task, 30, "train", dir / sub);
    generate_corpus(w.base.task, 20, "test", dir / sub);
  }
  for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir / "a");
    corpus_ok = corpus_ok && slurp(e.path()) == slurp(dir / "b" / rel);
    if (rel.string().rfind("test/", 0) == 0) corpus_ok = corpus_ok && slurp(e.path()) == slurp(w.root / "corpus" / rel);
  }
  // Checkpoints: the same short run twice.
  auto cfg = w.base;
  cfg.run.steps = 20;
  cfg.run.checkpoint_every = 10;
  run_training(cfg, w.train, dir / "run-a");
  run_training(cfg, w.train, dir / "run-b");
  bool ckpt_ok = true;
  for (const char* f : {"ckpt-000000.avfc", "ckpt-000010.avfc", "final.avfc"})
    ckpt_ok = ckpt_ok && !slurp(dir / "run-a" / f).empty() && slurp(dir / "run-a" / f) == slurp(dir / "run-b" / f);
  // Evaluation reports, including noise draws.
  const NoiseSpec n{NoiseKind::kBabble, 2.5};
  const auto r1 = report_records({eval(r, w.test, EvalMode::kAV, n), eval(r, w.test, EvalMode::kA, n)});
  const auto r2 = report_records({eval(r, w.test, EvalMode::kAV, n), eval(r, w.test, EvalMode::kA, n)});
  const bool eval_ok = r1 == r2;
  report("determinism", corpus_ok && ckpt_ok && eval_ok,
         std::string("corpora ") + (corpus_ok ? "identical" : "differ") + ", checkpoints " +
             (ckpt_ok ? "identical" : "differ") + ", eval reports " + (eval_ok ? "identical" : "differ"));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::string config, work = "acceptance-work";
  app.add_option("--config", config, "experiment config (JSON)")->required();
  app.add_option("--work", work, "work directory for corpus, runs and reports");
  CLI11_PARSE(app, argc, argv);

  try {
    check_ctc_oracle();
    check_rnnt_oracle();
    check_gradients();
    check_hybrid();
    check_schedule();
    check_shapes();
    check_wer_oracle();

    Workspace w;
    w.root = work;
    fs::create_directories(w.root);
    w.base = load_config(config);
    prepare_corpus(w);

    std::vector<Run> hybrid, rnnt;
    for (std::uint64_t s : {1, 2, 3}) {
      hybrid.push_back(train_or_reuse(w, "hybrid-s" + std::to_string(s), variant(w.base, "hybrid", 0.3, s)));
    }
    const Run no_drop = train_or_reuse(w, "nomoddrop-s1", variant(w.base, "hybrid", 0.0, 1));
    for (std::uint64_t s : {1, 2, 3}) {
      rnnt.push_back(train_or_reuse(w, "rnnt-s" + std::to_string(s), variant(w.base, "rnnt", 0.3, s)));
    }

    check_convergence(w, hybrid[0]);
    check_modality_dropout(w, hybrid[0], no_drop);
    check_noise(w, hybrid[0]);
    check_loss_type(w, hybrid, rnnt);
    check_ranges(w, hybrid[0]);
    check_determinism(w, hybrid[0]);
  } catch (const std::exception& e) {
    std::cout << "FAIL  aborted                 " << e.what() << std::endl;
    return 1;
  }

  std::size_t passed = 0;
  std::ostringstream summary;
  for (const auto& l : g_lines) {
    passed += l.pass;
    summary << (l.pass ? "PASS  " : "FAIL  ") << std::left << std::setw(24) << l.name << l.detail << "\n";
  }
  spit(fs::path(work) / "acceptance_report.txt", summary.str());
  std::cout << "\n" << summary.str() << passed << "/" << g_lines.size() << " criteria passed" << std::endl;
  return passed == g_lines.size() ? 0 : 1;
}
