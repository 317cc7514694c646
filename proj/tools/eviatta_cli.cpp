// eviatta: generate corpora, pretrain, run adaptation experiments and
// aggregate their metric logs.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "eviatta/cli.hpp"

namespace {

using eviatta::ExperimentSpec;
using nlohmann::json;

ExperimentSpec load_spec_file(const std::string& path) {
  if (!std::filesystem::exists(path)) throw eviatta::MissingFileError("spec file not found: " + path);
  try {
    return eviatta::spec_from_json(json::parse(eviatta::read_file(path)));
  } catch (const json::exception& e) {
    throw eviatta::ConfigError(std::string("spec file is not valid JSON: ") + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Evidential active test-time adaptation experiments"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string spec_path, corpus, checkpoint, out, regime, sampler, lora_targets, losses, scoring, shift, axis;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> values, inputs;
  double budget = 0, lr = 0;
  std::size_t points = 0, buffer = 0, replay_draw = 0, lora_rank = 0, batch_size = 0, n = 0, epochs = 0;
  std::uint64_t seed = 0;
  int prompt_noise = 0;
  bool freeze_sigma = false, zero_shot = false, timing = false;

  app.add_option("--spec", spec_path, "JSON spec; flags given alongside override it");
  auto* o_corpus = app.add_option("--corpus", corpus, "Corpus directory");
  auto* o_ckpt = app.add_option("--checkpoint", checkpoint, "Checkpoint file");
  auto* o_out = app.add_option("--out", out, "Output directory");
  auto* o_seeds = app.add_option("--seeds", seeds, "Run seeds")->delimiter(',');
  auto* o_regime = app.add_option("--regime", regime, "batchwise | instancewise");
  auto* o_budget = app.add_option("--budget", budget, "Fraction of each batch to annotate");
  auto* o_points = app.add_option("--points", points, "Annotated pixels per selected sample (M)");
  auto* o_sampler = app.add_option("--sampler", sampler, "eviatta | entropy | random | swapped | <sample>/<pixel>");
  auto* o_lora = app.add_option("--lora-targets", lora_targets, "Comma list of q,k,v,o");
  auto* o_rank = app.add_option("--lora-rank", lora_rank, "Adapter rank");
  auto* o_buffer = app.add_option("--buffer", buffer, "Replay buffer capacity");
  auto* o_draw = app.add_option("--replay-draw", replay_draw, "Replayed entries per step");
  auto* o_lr = app.add_option("--lr", lr, "Learning rate (adaptation, or pretraining for pretrain)");
  auto* o_losses = app.add_option("--losses", losses, "prompt+replay+var, any subset, or none");
  auto* o_scoring = app.add_option("--scoring", scoring, "post | pre");
  auto* o_noise = app.add_option("--prompt-noise", prompt_noise, "Box jitter in pixels");
  auto* o_batch = app.add_option("--batch-size", batch_size, "Batch size (batchwise regime)");
  auto* o_freeze = app.add_flag("--freeze-sigma", freeze_sigma, "Keep the sigma head fixed");
  auto* o_zero = app.add_flag("--zero-shot", zero_shot, "Box prompts only, no updates");
  auto* o_timing = app.add_flag("--timing", timing, "Record wall_ms (makes logs non-reproducible)");

  auto* gen = app.add_subcommand("generate", "Render a synthetic corpus");
  auto* o_n = gen->add_option("--n", n, "Number of samples");
  auto* o_shift = gen->add_option("--shift", shift, "none | mild | moderate | severe");
  auto* o_gseed = gen->add_option("--seed", seed, "Corpus seed");

  auto* pre = app.add_subcommand("pretrain", "Train the promptable model on a source corpus");
  auto* o_epochs = pre->add_option("--epochs", epochs, "Training epochs");
  auto* o_pseed = pre->add_option("--seed", seed, "Initialisation and shuffling seed");

  app.add_subcommand("adapt", "Run test-time adaptation over a target corpus");

  auto* abl = app.add_subcommand("ablate", "Fan out adaptation runs over one axis");
  auto* o_axis = abl->add_option("--axis", axis, "sampler | lora_targets | losses | points | buffer | prompt_noise | budget | lr");
  auto* o_values = abl->add_option("--values", values, "Axis values")->delimiter(',');

  auto* rep = app.add_subcommand("report", "Aggregate metric logs into a comparison table");
  auto* o_inputs = rep->add_option("--inputs", inputs, "Directories scanned for seed*.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return eviatta::kExitInvalidConfig;
  }

  ExperimentSpec spec;
  try {
    if (!spec_path.empty()) spec = load_spec_file(spec_path);
    spec.command = app.get_subcommands().front()->get_name();
    if (*o_corpus) spec.corpus = corpus;
    if (*o_ckpt) spec.checkpoint = checkpoint;
    if (*o_out) spec.out = out;
    if (*o_seeds) spec.seeds = seeds;

    if (*o_zero) spec.run = eviatta::RunConfig::zero_shot();
    json overlay = json::object();
    if (*o_regime) overlay["regime"] = regime;
    if (*o_budget) overlay["budget"] = budget;
    if (*o_points) overlay["points"] = points;
    if (*o_sampler) overlay["sampler"] = sampler;
    if (*o_lora) overlay["lora_targets"] = lora_targets;
    if (*o_rank) overlay["lora_rank"] = lora_rank;
    if (*o_buffer) overlay["buffer"] = buffer;
    if (*o_draw) overlay["replay_draw"] = replay_draw;
    if (*o_lr && spec.command != "pretrain") overlay["lr"] = lr;
    if (*o_losses) overlay["losses"] = losses;
    if (*o_scoring) overlay["scoring"] = scoring;
    if (*o_noise) overlay["prompt_noise"] = prompt_noise;
    if (*o_batch) overlay["batch_size"] = batch_size;
    if (*o_freeze) overlay["freeze_sigma"] = freeze_sigma;
    if (*o_timing) overlay["timing"] = timing;
    spec.run = eviatta::run_from_json(overlay, spec.run);

    if (*o_n) spec.generate.n = n;
    if (*o_shift) spec.generate.shift = shift;
    if (*o_gseed) spec.generate.seed = seed;
    if (*o_epochs) spec.pretrain.epochs = epochs;
    if (*o_lr && spec.command == "pretrain") spec.pretrain.lr = lr;
    if (*o_pseed) spec.pretrain.seed = seed;
    if (*o_axis) spec.ablation.axis = axis;
    if (*o_values) spec.ablation.values = values;
    if (*o_inputs) spec.inputs = inputs;
  } catch (const eviatta::MissingFileError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return eviatta::kExitMissingFile;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return eviatta::kExitInvalidConfig;
  }
  return eviatta::run_command(spec, std::cout, std::cerr);
}
