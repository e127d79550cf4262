// Generates a few synthetic utterances, trains a tiny audio-visual model for
// a handful of steps and decodes one utterance in each mode.

#include <filesystem>
#include <iostream>

#include "avfc/eval.hpp"

int main(int argc, char** argv) {
  using namespace avfc;
  const std::filesystem::path dir = argc > 1 ? argv[1] : std::filesystem::temp_directory_path() / "avfc_basic_usage";

  ExperimentConfig cfg;
  cfg.model.d_model = 16;
  cfg.model.n_audio_blocks = cfg.model.n_video_blocks = cfg.model.n_av_blocks = 1;
  cfg.model.n_heads = 2;
  cfg.model.frontend.visual_stem_channels = cfg.model.frontend.visual_channels = 4;
  cfg.run.steps = 5;
  cfg.run.batch_size = 2;

  const auto train = generate_corpus(cfg.task, 8, "train", dir);
  const auto test = generate_corpus(cfg.task, 2, "test", dir);
  std::cout << manifest_stats({train, test}).format() << "\n";

  const auto result = run_training(cfg, train, dir / "run", [](const StepMetrics& s) {
    std::cout << metrics_line(s) << "\n";
  });

  CheckpointMeta meta;
  const auto state = load_checkpoint<float>(result.final_checkpoint, &meta);
  for (EvalMode mode : {EvalMode::kAV, EvalMode::kA, EvalMode::kV}) {
    const auto rep = evaluate(state.ema, checkpoint_config(meta), test, mode, {}, 0);
    std::cout << mode_name(mode) << " WER " << rep.wer << "%\n";
  }
  return 0;
}
