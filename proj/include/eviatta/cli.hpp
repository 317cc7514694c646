#pragma once

// Experiment specs and the generate / pretrain / adapt / ablate / report
// commands. A spec is JSON mirroring the command-line flags; each run writes
// the resolved spec next to its outputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "eviatta/engine.hpp"
#include "eviatta/pretrain.hpp"
#include "eviatta/synth.hpp"

namespace eviatta {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalidConfig = 1;
inline constexpr int kExitMissingFile = 2;
inline constexpr int kExitNumeric = 3;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class MissingFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GenerateOptions {
  std::size_t n = 512;
  std::string shift = "none";
  std::uint64_t seed = 0;
};

struct AblationAxis {
  std::string axis;
  std::vector<std::string> values;
};

struct ExperimentSpec {
  std::string command;
  std::string corpus;      // generate: output dir; pretrain: source corpus; adapt/ablate: target corpus
  std::string checkpoint;  // pretrain: output file; adapt/ablate: input file
  std::string out;
  std::vector<std::uint64_t> seeds{0};
  RunConfig run;
  PretrainConfig pretrain;
  GenerateOptions generate;
  AblationAxis ablation;
  std::vector<std::string> inputs;  // report: directories scanned for CSVs
};

// ---------------------------------------------------------------------------
// Spec (de)serialisation

inline std::string format_losses(const LossToggles& l) {
  std::vector<std::string> on;
  if (l.prompt) on.push_back("prompt");
  if (l.replay) on.push_back("replay");
  if (l.var) on.push_back("var");
  if (on.empty()) return "none";
  std::string s = on[0];
  for (std::size_t i = 1; i < on.size(); ++i) s += "+" + on[i];
  return s;
}

inline LossToggles parse_losses(const std::string& spec) {
  LossToggles l{false, false, false};
  if (spec == "none") return l;
  std::stringstream ss(spec);
  std::string tok;
  while (std::getline(ss, tok, '+')) {
    if (tok == "prompt") l.prompt = true;
    else if (tok == "replay") l.replay = true;
    else if (tok == "var") l.var = true;
    else throw ConfigError("unknown loss term: " + tok);
  }
  return l;
}

inline json run_to_json(const RunConfig& c) {
  return {{"regime", to_string(c.regime)},
          {"batch_size", c.batch_size},
          {"budget", c.sample_fraction},
          {"points", c.points},
          {"lr", c.lr},
          {"buffer", c.buffer_capacity},
          {"replay_draw", c.replay_draw},
          {"sampler", c.sampler},
          {"losses", format_losses(c.losses)},
          {"lora_targets", format_lora_targets(c.lora_targets)},
          {"lora_rank", c.lora_rank},
          {"freeze_sigma", c.freeze_sigma},
          {"adapt", c.adapt},
          {"scoring", to_string(c.scoring)},
          {"kl_reduction", c.reduction == KlReduction::mean ? "mean" : "sum"},
          {"prompt_noise", c.prompt_noise},
          {"timing", c.record_time}};
}

/// Regime defaults first, then any field present in `j`.
inline RunConfig run_from_json(const json& j, RunConfig base = {}) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig c = base;
  if (j.contains("regime")) {
    const Regime r = parse_regime(j.at("regime").get<std::string>());
    if (r != c.regime) {
      RunConfig d = r == Regime::instancewise ? RunConfig::instancewise() : RunConfig::batchwise();
      d.seed = c.seed;
      c = d;
    }
  }
  auto take = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  take("batch_size", c.batch_size);
  take("budget", c.sample_fraction);
  take("points", c.points);
  take("lr", c.lr);
  take("buffer", c.buffer_capacity);
  take("replay_draw", c.replay_draw);
  take("sampler", c.sampler);
  take("lora_rank", c.lora_rank);
  take("freeze_sigma", c.freeze_sigma);
  take("adapt", c.adapt);
  take("prompt_noise", c.prompt_noise);
  take("timing", c.record_time);
  if (j.contains("losses")) c.losses = parse_losses(j.at("losses").get<std::string>());
  if (j.contains("lora_targets")) c.lora_targets = parse_lora_targets(j.at("lora_targets").get<std::string>());
  if (j.contains("scoring")) c.scoring = parse_scoring(j.at("scoring").get<std::string>());
  if (j.contains("kl_reduction")) {
    const auto r = j.at("kl_reduction").get<std::string>();
    if (r != "mean" && r != "sum") throw ConfigError("kl_reduction must be mean or sum");
    c.reduction = r == "mean" ? KlReduction::mean : KlReduction::sum;
  }
  return c;
}

inline json spec_to_json(const ExperimentSpec& s) {
  json j{{"command", s.command},
         {"corpus", s.corpus},
         {"checkpoint", s.checkpoint},
         {"out", s.out},
         {"seeds", s.seeds},
         {"run", run_to_json(s.run)},
         {"pretrain",
          {{"epochs", s.pretrain.epochs}, {"lr", s.pretrain.lr}, {"batch", s.pretrain.batch}, {"seed", s.pretrain.seed}}},
         {"generate", {{"n", s.generate.n}, {"shift", s.generate.shift}, {"seed", s.generate.seed}}}};
  if (!s.ablation.axis.empty()) j["ablate"] = {{"axis", s.ablation.axis}, {"values", s.ablation.values}};
  if (!s.inputs.empty()) j["inputs"] = s.inputs;
  return j;
}

inline ExperimentSpec spec_from_json(const json& j) {
  try {
    if (!j.is_object()) throw ConfigError("spec must be a JSON object");
    ExperimentSpec s;
    s.command = j.value("command", "");
    s.corpus = j.value("corpus", "");
    s.checkpoint = j.value("checkpoint", "");
    s.out = j.value("out", "");
    if (j.contains("seeds")) s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("run")) s.run = run_from_json(j.at("run"));
    if (j.contains("pretrain")) {
      const auto& p = j.at("pretrain");
      s.pretrain.epochs = p.value("epochs", s.pretrain.epochs);
      s.pretrain.lr = p.value("lr", s.pretrain.lr);
      s.pretrain.batch = p.value("batch", s.pretrain.batch);
      s.pretrain.seed = p.value("seed", s.pretrain.seed);
    }
    if (j.contains("generate")) {
      const auto& g = j.at("generate");
      s.generate.n = g.value("n", s.generate.n);
      s.generate.shift = g.value("shift", s.generate.shift);
      s.generate.seed = g.value("seed", s.generate.seed);
    }
    if (j.contains("ablate")) {
      s.ablation.axis = j.at("ablate").value("axis", "");
      s.ablation.values = j.at("ablate").value("values", std::vector<std::string>{});
    }
    if (j.contains("inputs")) s.inputs = j.at("inputs").get<std::vector<std::string>>();
    return s;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed spec: ") + e.what());
  }
}

/// Applies one ablation cell value to a run config.
inline void apply_axis(RunConfig& c, const std::string& axis, const std::string& value) {
  try {
    if (axis == "sampler") c.sampler = value;
    else if (axis == "lora_targets") c.lora_targets = parse_lora_targets(value);
    else if (axis == "losses") c.losses = parse_losses(value);
    else if (axis == "points") c.points = std::stoul(value);
    else if (axis == "buffer") c.buffer_capacity = std::stoul(value);
    else if (axis == "prompt_noise") c.prompt_noise = std::stoi(value);
    else if (axis == "budget") c.sample_fraction = std::stod(value);
    else if (axis == "lr") c.lr = std::stod(value);
    else throw ConfigError("unknown ablation axis: " + axis);
  } catch (const std::logic_error& e) {
    if (dynamic_cast<const ConfigError*>(&e)) throw;
    throw ConfigError("bad value '" + value + "' for axis " + axis + ": " + e.what());
  }
}

inline void validate_spec(const ExperimentSpec& s) {
  static const std::vector<std::string> commands{"generate", "pretrain", "adapt", "ablate", "report"};
  if (std::find(commands.begin(), commands.end(), s.command) == commands.end())
    throw ConfigError("unknown command: '" + s.command + "'");
  auto need = [&](const std::string& v, const char* what) {
    if (v.empty()) throw ConfigError(s.command + " needs " + what);
  };
  try {
    if (s.command == "generate") {
      need(s.out, "--out");
      if (s.generate.n == 0) throw ConfigError("generate needs n >= 1");
      ShiftSpec::preset(s.generate.shift);
    } else if (s.command == "pretrain") {
      need(s.corpus, "--corpus");
      need(s.checkpoint, "--checkpoint");
      if (!(s.pretrain.lr > 0)) throw ConfigError("pretrain lr must be positive");
    } else if (s.command == "adapt" || s.command == "ablate") {
      need(s.corpus, "--corpus");
      need(s.checkpoint, "--checkpoint");
      need(s.out, "--out");
      if (s.seeds.empty()) throw ConfigError("at least one seed is required");
      s.run.validate();
      if (s.command == "ablate") {
        need(s.ablation.axis, "--axis");
        if (s.ablation.values.empty()) throw ConfigError("ablate needs at least one axis value");
        for (const auto& v : s.ablation.values) {
          RunConfig c = s.run;
          apply_axis(c, s.ablation.axis, v);
          c.validate();
        }
      }
    } else if (s.command == "report") {
      need(s.out, "--out");
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

// ---------------------------------------------------------------------------
// File plumbing

/// Writes to a sibling temporary file and renames it into place.
inline void write_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  write_file(tmp.string(), bytes);
  fs::rename(tmp, path);
}

inline std::vector<Sample> load_corpus_checked(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "manifest.json")) throw MissingFileError("corpus manifest not found in " + dir);
  try {
    return load_corpus(dir);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("corrupt corpus manifest: ") + e.what());
  } catch (const std::runtime_error& e) {
    throw MissingFileError(e.what());
  }
}

inline PromptableModel load_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw MissingFileError("checkpoint not found: " + path);
  try {
    return PromptableModel::deserialize(read_file(path));
  } catch (const ShapeError& e) {
    throw ConfigError(std::string("corrupt checkpoint: ") + e.what());
  } catch (const std::runtime_error& e) {
    throw ConfigError(std::string("corrupt checkpoint: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Report aggregation

struct CellSummary {
  std::string cell;
  std::size_t runs = 0;
  MetricReport mean, stddev;
};

/// Mean over rows of one metric-log CSV.
inline MetricReport csv_mean(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line != MetricLog::kCsvHeader) throw ConfigError("not a metric log CSV");
  MetricReport m;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string tok;
    while (std::getline(ls, tok, ',')) f.push_back(tok);
    if (f.size() != 9) throw ConfigError("metric log row has " + std::to_string(f.size()) + " fields");
    m.dice += std::stod(f[3]);
    m.jaccard += std::stod(f[4]);
    m.asd += std::stod(f[5]);
    m.hd95 += std::stod(f[6]);
    ++rows;
  }
  if (rows > 0) {
    const Real n = static_cast<Real>(rows);
    m = {m.dice / n, m.jaccard / n, m.asd / n, m.hd95 / n};
  }
  return m;
}

/// Groups CSVs by their directory relative to `root` and reports mean ± std
/// over the files (seeds) of each group.
inline std::vector<CellSummary> summarize(const std::vector<std::string>& roots) {
  std::map<std::string, std::vector<MetricReport>> cells;
  for (const auto& root : roots) {
    if (!fs::exists(root)) throw MissingFileError("report input not found: " + root);
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file() && e.path().extension() == ".csv" && e.path().filename().string().rfind("seed", 0) == 0)
        files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::string cell = fs::relative(f.parent_path(), root).generic_string();
      if (cell == ".") cell = fs::path(root).filename().string();
      cells[cell].push_back(csv_mean(read_file(f.string())));
    }
  }
  std::vector<CellSummary> out;
  for (const auto& [cell, runs] : cells) {
    CellSummary s{cell, runs.size(), {}, {}};
    auto stat = [&](auto get, Real& mean, Real& sd) {
      for (const auto& r : runs) mean += get(r);
      mean /= static_cast<Real>(runs.size());
      for (const auto& r : runs) sd += (get(r) - mean) * (get(r) - mean);
      sd = runs.size() > 1 ? std::sqrt(sd / static_cast<Real>(runs.size() - 1)) : 0;
    };
    stat([](const MetricReport& r) { return r.dice; }, s.mean.dice, s.stddev.dice);
    stat([](const MetricReport& r) { return r.jaccard; }, s.mean.jaccard, s.stddev.jaccard);
    stat([](const MetricReport& r) { return r.asd; }, s.mean.asd, s.stddev.asd);
    stat([](const MetricReport& r) { return r.hd95; }, s.mean.hd95, s.stddev.hd95);
    out.push_back(s);
  }
  return out;
}

inline std::string summary_csv(const std::vector<CellSummary>& cells) {
  std::string out = "cell,runs,dice_mean,dice_std,jaccard_mean,jaccard_std,asd_mean,asd_std,hd95_mean,hd95_std\n";
  char buf[512];
  for (const auto& c : cells) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", c.cell.c_str(), c.runs,
                  c.mean.dice, c.stddev.dice, c.mean.jaccard, c.stddev.jaccard, c.mean.asd, c.stddev.asd, c.mean.hd95,
                  c.stddev.hd95);
    out += buf;
  }
  return out;
}

inline std::string summary_text(const std::vector<CellSummary>& cells) {
  std::size_t w = 4;
  for (const auto& c : cells) w = std::max(w, c.cell.size());
  char buf[512];
  std::snprintf(buf, sizeof buf, "%-*s  %4s  %-17s  %-17s  %-15s  %-15s\n", static_cast<int>(w), "cell", "runs",
                "dice", "jaccard", "asd", "hd95");
  std::string out = buf;
  for (const auto& c : cells) {
    std::snprintf(buf, sizeof buf, "%-*s  %4zu  %7.4f ± %-7.4f  %7.4f ± %-7.4f  %6.3f ± %-6.3f  %6.3f ± %-6.3f\n",
                  static_cast<int>(w), c.cell.c_str(), c.runs, c.mean.dice, c.stddev.dice, c.mean.jaccard,
                  c.stddev.jaccard, c.mean.asd, c.stddev.asd, c.mean.hd95, c.stddev.hd95);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands

inline std::string seed_csv_name(std::uint64_t seed) { return "seed" + std::to_string(seed) + ".csv"; }

inline void echo_spec(const ExperimentSpec& s, const fs::path& dir) {
  write_atomic(dir / "spec.json", spec_to_json(s).dump(2) + "\n");
}

inline void run_cells(const ExperimentSpec& s, const std::vector<Sample>& corpus, const PromptableModel& model,
                      const RunConfig& base, const fs::path& dir, std::ostream& log) {
  for (std::uint64_t seed : s.seeds) {
    RunConfig c = base;
    c.seed = seed;
    const MetricLog ml = adapt_stream(corpus, model, c);
    for (const auto& ev : ml.events) log << "warning: " << ev << "\n";
    write_atomic(dir / seed_csv_name(seed), ml.to_csv());
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s seed %llu: dice %.4f\n", dir.filename().string().c_str(),
                  static_cast<unsigned long long>(seed), ml.aggregate().dice);
    log << buf;
  }
}

inline int cmd_generate(const ExperimentSpec& s, std::ostream& log) {
  SceneFamily fam;
  const auto samples = generate_corpus(s.generate.n, fam, ShiftSpec::preset(s.generate.shift), s.generate.seed);
  const fs::path tmp = fs::path(s.out + ".tmp");
  fs::remove_all(tmp);
  save_corpus(tmp, samples, {{"shift", s.generate.shift}, {"seed", s.generate.seed}, {"n", s.generate.n}});
  fs::remove_all(s.out);
  fs::rename(tmp, s.out);
  log << "wrote " << samples.size() << " samples to " << s.out << "\n";
  return kExitOk;
}

inline int cmd_pretrain(const ExperimentSpec& s, std::ostream& log) {
  const auto corpus = load_corpus_checked(s.corpus);
  ModelConfig mc;
  mc.seed = s.pretrain.seed;
  PromptableModel model(mc);
  const PretrainReport rep = pretrain_source(model, corpus, s.pretrain);
  write_atomic(s.checkpoint, model.serialize());
  if (!s.out.empty()) echo_spec(s, s.out);
  char buf[160];
  std::snprintf(buf, sizeof buf, "pretrained %zu steps, final loss %.5f, source dice %.4f\n", rep.steps,
                rep.final_loss, rep.source_dice);
  log << buf;
  return kExitOk;
}

inline int cmd_adapt(const ExperimentSpec& s, std::ostream& log) {
  const auto corpus = load_corpus_checked(s.corpus);
  const PromptableModel model = load_checkpoint(s.checkpoint);
  fs::create_directories(s.out);
  echo_spec(s, s.out);
  run_cells(s, corpus, model, s.run, s.out, log);
  return kExitOk;
}

inline std::string cell_dir_name(const std::string& axis, const std::string& value) {
  std::string v = value;
  for (char& ch : v)
    if (ch == '/' || ch == '\\') ch = '-';
  return axis + "=" + v;
}

inline int cmd_ablate(const ExperimentSpec& s, std::ostream& log) {
  const auto corpus = load_corpus_checked(s.corpus);
  const PromptableModel model = load_checkpoint(s.checkpoint);
  fs::create_directories(s.out);
  echo_spec(s, s.out);
  for (const auto& v : s.ablation.values) {
    RunConfig c = s.run;
    apply_axis(c, s.ablation.axis, v);
    run_cells(s, corpus, model, c, fs::path(s.out) / cell_dir_name(s.ablation.axis, v), log);
  }
  const auto cells = summarize({s.out});
  write_atomic(fs::path(s.out) / "summary.csv", summary_csv(cells));
  write_atomic(fs::path(s.out) / "summary.txt", summary_text(cells));
  log << summary_text(cells);
  return kExitOk;
}

inline int cmd_report(const ExperimentSpec& s, std::ostream& log) {
  const std::vector<std::string> roots = s.inputs.empty() ? std::vector<std::string>{s.out} : s.inputs;
  const auto cells = summarize(roots);
  if (cells.empty()) throw MissingFileError("no metric logs found");
  fs::create_directories(s.out);
  write_atomic(fs::path(s.out) / "report.csv", summary_csv(cells));
  write_atomic(fs::path(s.out) / "report.txt", summary_text(cells));
  log << summary_text(cells);
  return kExitOk;
}

/// Validates and runs a spec; maps failures to exit codes with a
/// diagnostic on `err`.
inline int run_command(const ExperimentSpec& s, std::ostream& log, std::ostream& err) {
  try {
    validate_spec(s);
    if (s.command == "generate") return cmd_generate(s, log);
    if (s.command == "pretrain") return cmd_pretrain(s, log);
    if (s.command == "adapt") return cmd_adapt(s, log);
    if (s.command == "ablate") return cmd_ablate(s, log);
    return cmd_report(s, log);
  } catch (const MissingFileError& e) {
    err << "error: " << e.what() << "\n";
    return kExitMissingFile;
  } catch (const NumericError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalidConfig;
  }
}

}  // namespace eviatta
