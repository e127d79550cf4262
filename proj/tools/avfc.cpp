// avfc: corpus generation, training, evaluation and self-checks.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "avfc/checks.hpp"
#include "avfc/eval.hpp"

namespace {

using namespace avfc;

struct Options {
  std::string config, manifest, checkpoint, out, mode = "av", noise, decoder = "rnnt", id;
  std::vector<std::string> manifests;
  std::optional<double> snr;
  std::optional<std::uint64_t> seed;
  std::optional<long> steps;
  std::size_t n_train = 2000, n_test = 200, limit = 0;
  std::string snrs = "12.5,7.5,2.5,-2.5,-7.5", modes = "a,v,av";
  bool clean_column = false;
  int draws = 500;
  std::size_t coords = 250;
  double epsilon = 1e-4;
};

ExperimentConfig config_or_default(const std::string& path) {
  return path.empty() ? ExperimentConfig{} : load_config(path);
}

NoiseSpec noise_spec(const Options& o) {
  if (o.noise.empty() || o.noise == "none") {
    if (o.snr) throw std::invalid_argument("--snr needs --noise");
    return {};
  }
  if (!o.snr) throw std::invalid_argument("--noise needs --snr");
  return {parse_noise_kind(o.noise), *o.snr};
}

Decoder parse_decoder(const std::string& s) {
  if (s == "rnnt") return Decoder::kRnnt;
  if (s == "ctc") return Decoder::kCtc;
  throw std::invalid_argument("decoder must be rnnt or ctc");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

void write_or_print(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
}

int cmd_synth(const Options& o) {
  if (o.out.empty()) throw std::invalid_argument("synth needs --out");
  auto task = config_or_default(o.config).task;
  if (o.seed) task.seed = *o.seed;
  const auto train = generate_corpus(task, o.n_train, "train", o.out);
  const auto test = generate_corpus(task, o.n_test, "test", o.out);
  std::cout << manifest_stats({train, test}).format();
  return 0;
}

int cmd_stats(const Options& o) {
  std::vector<Manifest> ms;
  for (const auto& p : o.manifests) ms.push_back(read_manifest(p));
  if (ms.empty()) throw std::invalid_argument("stats needs --manifest");
  write_or_print(o.out, manifest_stats(ms).format());
  return 0;
}

int cmd_train(const Options& o) {
  if (o.manifest.empty() || o.out.empty()) throw std::invalid_argument("train needs --manifest and --out");
  auto cfg = config_or_default(o.config);
  if (o.seed) cfg.run.seed = *o.seed;
  if (o.steps) cfg.run.steps = *o.steps;
  const auto m = read_manifest(o.manifest);
  const long every = std::max<long>(1, cfg.run.log_every);
  const auto r = run_training(cfg, m, o.out, [&](const StepMetrics& s) {
    if (s.step % every == 0 || s.step == cfg.run.steps) std::cout << metrics_line(s) << std::endl;
  });
  std::cout << "final checkpoint: " << r.final_checkpoint.string() << "\n";
  return 0;
}

EvalOptions eval_options(const Options& o) {
  EvalOptions eo;
  eo.decoder = parse_decoder(o.decoder);
  eo.limit = o.limit;
  return eo;
}

int cmd_eval(const Options& o) {
  if (o.checkpoint.empty() || o.manifest.empty()) throw std::invalid_argument("eval needs --checkpoint and --manifest");
  const auto rep = evaluate(o.checkpoint, read_manifest(o.manifest), parse_mode(o.mode), noise_spec(o),
                            o.seed.value_or(0), eval_options(o));
  write_or_print(o.out, report_records({rep}));
  if (!o.out.empty()) std::cout << report_records({rep});
  return 0;
}

int cmd_sweep(const Options& o) {
  if (o.checkpoint.empty() || o.manifest.empty()) throw std::invalid_argument("sweep needs --checkpoint and --manifest");
  const auto kind = parse_noise_kind(o.noise.empty() ? "white" : o.noise);
  std::vector<double> snrs;
  if (o.clean_column) snrs.push_back(std::numeric_limits<double>::infinity());
  for (const auto& s : split_list(o.snrs)) snrs.push_back(std::stod(s));
  std::vector<EvalMode> modes;
  for (const auto& s : split_list(o.modes)) modes.push_back(parse_mode(s));
  CheckpointMeta meta;
  const auto state = load_checkpoint<float>(o.checkpoint, &meta);
  const auto reps = noise_sweep(state.ema, checkpoint_config(meta), read_manifest(o.manifest), kind, snrs, modes,
                                o.seed.value_or(0), eval_options(o));
  std::cout << report_table(reps);
  if (!o.out.empty()) write_or_print(o.out, report_records(reps));
  return 0;
}

int cmd_decode(const Options& o) {
  const auto m = read_manifest(o.manifest);
  std::size_t index = m.size();
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i].id == o.id) index = i;
  if (index == m.size()) throw std::invalid_argument("no utterance '" + o.id + "' in " + o.manifest);
  CheckpointMeta meta;
  const auto state = load_checkpoint<float>(o.checkpoint, &meta);
  const auto cfg = checkpoint_config(meta);
  const auto tok = cfg.tokenizer();
  const auto noise = noise_spec(o);
  const auto eo = eval_options(o);
  const auto seed = o.seed.value_or(0);
  const Mask mask = mode_mask(cfg.model, parse_mode(o.mode));
  const auto bank = eval_noise_bank(noise, seed, eo.noise_bank_seconds, cfg.task);
  const auto batch = load_batch<float>(m, {index}, Phase::kInfer, cfg.augment, cfg.model.frontend, tok, seed,
                                       eval_load_options(cfg.model, mask, noise, bank ? &*bank : nullptr));
  const auto hyp = decode_loaded(state.ema, cfg.model, tok, batch.utterance(0), mask, eo.decoder);
  const auto c = word_error_rate(split_words(m[index].text), split_words(hyp.text));
  std::cout << "id\t" << m[index].id << "\nref\t" << m[index].text << "\nhyp\t" << hyp.text << "\nwer\t" << c.wer()
            << "\n";
  return 0;
}

int cmd_oracle(const Options& o) {
  const auto seed = o.seed.value_or(1);
  const auto c = ctc_oracle_sweep(6, 3, 4, o.draws, seed);
  const auto r = rnnt_oracle_sweep(4, 3, 4, o.draws, seed);
  std::cout << "loss\tinstances\tunreachable\tmismatches\tmax_abs_diff\n"
            << "ctc\t" << c.instances << '\t' << c.unreachable << '\t' << c.mismatches << '\t' << c.max_abs_diff << '\n'
            << "rnnt\t" << r.instances << '\t' << r.unreachable << '\t' << r.mismatches << '\t' << r.max_abs_diff
            << '\n';
  const bool ok = c.mismatches == 0 && r.mismatches == 0 && c.max_abs_diff <= 1e-9 && r.max_abs_diff <= 1e-9;
  return ok ? 0 : 2;
}

int cmd_grad(const Options& o) {
  const auto r = run_grad_checks(o.coords, o.epsilon, o.seed.value_or(1));
  std::cout << "check\tchecked\tkinked\tmax_rel_error\n";
  for (const auto& [name, g] : {std::pair{"ctc", r.ctc}, std::pair{"rnnt", r.rnnt}, std::pair{"model", r.model}})
    std::cout << name << '\t' << g.checked << '\t' << g.kinked << '\t' << g.max_rel_error << '\n';
  const bool ok = r.ctc.max_rel_error <= 1e-4 && r.rnnt.max_rel_error <= 1e-4 && r.model.max_rel_error <= 1e-3;
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Audio-visual speech recognition toolkit"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* c) {
    c->add_option("--config", o.config, "experiment config (JSON)");
    c->add_option("--seed", o.seed, "seed");
    c->add_option("--out", o.out, "output path");
  };
  auto eval_flags = [&](CLI::App* c) {
    c->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
    c->add_option("--manifest", o.manifest, "manifest (JSONL)")->required();
    c->add_option("--decoder", o.decoder, "rnnt or ctc");
    c->add_option("--limit", o.limit, "evaluate the first N utterances only");
    c->add_option("--noise", o.noise, "white or babble");
  };

  auto* synth = app.add_subcommand("synth", "generate the synthetic corpus");
  common(synth);
  synth->add_option("--train", o.n_train, "training utterances");
  synth->add_option("--test", o.n_test, "test utterances");

  auto* stats = app.add_subcommand("stats", "hours by language and source");
  stats->add_option("--manifest", o.manifests, "manifest (repeatable)")->required();
  stats->add_option("--out", o.out, "output path");

  auto* train = app.add_subcommand("train", "train a model");
  common(train);
  train->add_option("--manifest", o.manifest, "training manifest")->required();
  train->add_option("--steps", o.steps, "override run.steps");

  auto* eval = app.add_subcommand("eval", "WER of one mode / noise condition");
  common(eval);
  eval_flags(eval);
  eval->add_option("--mode", o.mode, "a, v or av");
  eval->add_option("--snr", o.snr, "SNR in dB");

  auto* sweep = app.add_subcommand("sweep", "WER table over SNR levels and modes");
  common(sweep);
  eval_flags(sweep);
  sweep->add_option("--snrs", o.snrs, "comma-separated SNR levels");
  sweep->add_option("--modes", o.modes, "comma-separated modes");
  sweep->add_flag("--clean", o.clean_column, "add a clean column");

  auto* decode = app.add_subcommand("decode", "decode one utterance");
  common(decode);
  eval_flags(decode);
  decode->add_option("--id", o.id, "utterance id")->required();
  decode->add_option("--mode", o.mode, "a, v or av");
  decode->add_option("--snr", o.snr, "SNR in dB");

  auto* oracle = app.add_subcommand("oracle-check", "loss DP vs path enumeration");
  oracle->add_option("--seed", o.seed, "seed");
  oracle->add_option("--draws", o.draws, "draws per (T, U, V)");

  auto* grad = app.add_subcommand("grad-check", "reverse mode vs central differences");
  grad->add_option("--seed", o.seed, "seed");
  grad->add_option("--coords", o.coords, "coordinates per check");
  grad->add_option("--epsilon", o.epsilon, "finite-difference step");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    if (name == "synth") return cmd_synth(o);
    if (name == "stats") return cmd_stats(o);
    if (name == "train") return cmd_train(o);
    if (name == "eval") return cmd_eval(o);
    if (name == "sweep") return cmd_sweep(o);
    if (name == "decode") return cmd_decode(o);
    if (name == "oracle-check") return cmd_oracle(o);
    if (name == "grad-check") return cmd_grad(o);
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", e.what()}, {"command", name}}.dump() << std::endl;
    return 1;
  }
  return 1;
}
