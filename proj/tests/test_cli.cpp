#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <sys/wait.h>

#include "eviatta/cli.hpp"

using namespace eviatta;
namespace fs = std::filesystem;

namespace {

const fs::path& work() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "eviatta_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run_binary(const std::string& args) {
  const std::string cmd = std::string(EVIATTA_CLI_PATH) + " " + args + " > " + (work() / "stdout.txt").string() +
                          " 2> " + (work() / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string path(const std::string& leaf) { return (work() / leaf).string(); }

// A small source corpus, a 1-epoch checkpoint and a 48-sample target corpus.
class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    ASSERT_EQ(run_binary("generate --n 16 --shift none --seed 1 --out " + path("src")), 0);
    ASSERT_EQ(run_binary("generate --n 48 --shift severe --seed 2 --out " + path("tgt")), 0);
    ASSERT_EQ(run_binary("pretrain --corpus " + path("src") + " --checkpoint " + path("ckpt.bin") +
                         " --epochs 1 --seed 0"),
              0);
  }
  static std::string adapt_args(const std::string& out) {
    return "adapt --corpus " + path("tgt") + " --checkpoint " + path("ckpt.bin") + " --out " + path(out) +
           " --batch-size 16 --lr 1e-2 --seeds 0";
  }
};

}  // namespace

TEST(Spec, JsonRoundTrip) {
  ExperimentSpec s;
  s.command = "ablate";
  s.corpus = "c";
  s.checkpoint = "k";
  s.out = "o";
  s.seeds = {0, 3};
  s.run.sampler = "U/U_data";
  s.run.losses = {true, false, true};
  s.run.lora_targets = kLoraQ | kLoraV;
  s.run.scoring = ScoringMode::pre_step;
  s.run.prompt_noise = 4;
  s.pretrain.epochs = 5;
  s.generate.shift = "mild";
  s.ablation = {"points", {"1", "5"}};
  const json j = spec_to_json(s);
  const ExperimentSpec back = spec_from_json(j);
  EXPECT_EQ(spec_to_json(back), j);
  EXPECT_EQ(back.run.losses.replay, false);
  EXPECT_EQ(back.run.lora_targets, kLoraQ | kLoraV);
}

TEST(Spec, RegimeSwitchAppliesItsDefaults) {
  const RunConfig c = run_from_json({{"regime", "instancewise"}});
  EXPECT_EQ(c.lr, 1e-5);
  EXPECT_EQ(c.effective_batch(), 1u);
  EXPECT_EQ(run_from_json({{"regime", "instancewise"}, {"lr", 0.5}}).lr, 0.5);
}

TEST(Spec, MalformedValuesAreConfigErrors) {
  EXPECT_THROW(spec_from_json(json::array()), ConfigError);
  EXPECT_THROW(spec_from_json({{"seeds", "x"}}), ConfigError);
  EXPECT_THROW(parse_losses("prompt+magic"), ConfigError);
  EXPECT_EQ(format_losses({false, false, false}), "none");
  EXPECT_EQ(format_losses(parse_losses("replay+var")), "replay+var");
}

TEST(Spec, ValidationNamesMissingFields) {
  ExperimentSpec s;
  s.command = "adapt";
  std::ostringstream log, err;
  EXPECT_EQ(run_command(s, log, err), kExitInvalidConfig);
  EXPECT_NE(err.str().find("--corpus"), std::string::npos);
  s.command = "dance";
  EXPECT_EQ(run_command(s, log, err), kExitInvalidConfig);
  s = {};
  s.command = "ablate";
  s.corpus = s.checkpoint = s.out = "x";
  s.ablation = {"points", {"1", "lots"}};
  EXPECT_EQ(run_command(s, log, err), kExitInvalidConfig);
}

TEST(Spec, CellDirectoryNamesAreFilesystemSafe) {
  EXPECT_EQ(cell_dir_name("sampler", "U_dis/U_data"), "sampler=U_dis-U_data");
}

TEST(Binary, BadFlagsExitOne) {
  EXPECT_EQ(run_binary("adapt --no-such-flag"), kExitInvalidConfig);
  EXPECT_EQ(run_binary("adapt --corpus a --checkpoint b --out c --sampler nope"), kExitInvalidConfig);
  EXPECT_EQ(run_binary("generate --out " + path("g") + " --shift extreme"), kExitInvalidConfig);
}

TEST(Binary, MissingInputsExitTwo) {
  EXPECT_EQ(run_binary("adapt --spec " + path("absent.json")), kExitMissingFile);
  EXPECT_EQ(run_binary("adapt --corpus " + path("nowhere") + " --checkpoint x --out " + path("o")), kExitMissingFile);
  EXPECT_EQ(run_binary("report --out " + path("empty_report")), kExitMissingFile);
}

TEST(Binary, MalformedSpecFileExitsOne) {
  write_file(path("bad.json"), "{ not json");
  EXPECT_EQ(run_binary("adapt --spec " + path("bad.json")), kExitInvalidConfig);
}

TEST_F(CliPipeline, CorruptCheckpointExitsOne) {
  write_file(path("junk.bin"), "garbage");
  EXPECT_EQ(run_binary("adapt --corpus " + path("tgt") + " --checkpoint " + path("junk.bin") + " --out " + path("j")),
            kExitInvalidConfig);
}

TEST_F(CliPipeline, RepeatedAdaptRunsAreByteIdentical) {
  ASSERT_EQ(run_binary(adapt_args("run_a")), 0);
  ASSERT_EQ(run_binary(adapt_args("run_b")), 0);
  const std::string a = read_file(path("run_a/seed0.csv")), b = read_file(path("run_b/seed0.csv"));
  EXPECT_EQ(a, b);
  EXPECT_TRUE(a.starts_with(std::string(MetricLog::kCsvHeader)));
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 4);  // header + 3 batches
  EXPECT_TRUE(fs::exists(path("run_a/spec.json")));
}

TEST_F(CliPipeline, SpecFileReproducesFlagRun) {
  ASSERT_EQ(run_binary(adapt_args("flags")), 0);
  ASSERT_EQ(run_binary("adapt --spec " + path("flags/spec.json") + " --out " + path("from_spec")), 0);
  EXPECT_EQ(read_file(path("flags/seed0.csv")), read_file(path("from_spec/seed0.csv")));
}

TEST_F(CliPipeline, AblateOverSamplersAndReport) {
  ASSERT_EQ(run_binary("ablate --corpus " + path("tgt") + " --checkpoint " + path("ckpt.bin") + " --out " +
                       path("abl") + " --batch-size 16 --lr 1e-2 --seeds 0,1 --axis sampler --values eviatta,entropy,random"),
            0);
  for (const char* cell : {"sampler=eviatta", "sampler=entropy", "sampler=random"}) {
    EXPECT_TRUE(fs::exists(work() / "abl" / cell / "seed0.csv")) << cell;
    EXPECT_TRUE(fs::exists(work() / "abl" / cell / "seed1.csv")) << cell;
  }
  const std::string summary = read_file(path("abl/summary.csv"));
  EXPECT_NE(summary.find("sampler=entropy"), std::string::npos);
  EXPECT_EQ(std::count(summary.begin(), summary.end(), '\n'), 4);

  ASSERT_EQ(run_binary("report --inputs " + path("abl") + " --out " + path("rep")), 0);
  EXPECT_EQ(read_file(path("rep/report.csv")), summary);
}

TEST_F(CliPipeline, DivergentRunExitsThree) {
  ExperimentSpec s;
  s.command = "adapt";
  s.corpus = path("tgt");
  s.checkpoint = path("ckpt.bin");
  s.out = path("diverge");
  s.run.batch_size = 16;
  s.run.lr = 1e300;
  std::ostringstream log, err;
  EXPECT_EQ(run_command(s, log, err), kExitNumeric);
  EXPECT_NE(err.str().find("numerical failure"), std::string::npos);
}
