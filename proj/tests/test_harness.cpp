#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include "cml/train.hpp"
#include "oracles.hpp"

using namespace cml;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cml_test_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig smoke_config(Variant v) {
  RunConfig c;
  c.arch = v;
  c.dataset = "synth";
  c.synth.samples_per_class = 64;
  c.epochs = 5;
  c.lr = 1e-2;
  c.seed = 3;
  return c;
}

}  // namespace

TEST(Synthetic, Deterministic) {
  data::SynthSpec s;
  s.noise = 0.3;
  s.seed = 9;
  const auto a = data::gen_synthetic(s), b = data::gen_synthetic(s);
  EXPECT_EQ(a.split.train.pixels, b.split.train.pixels);
  EXPECT_EQ(a.split.test.labels, b.split.test.labels);
  s.seed = 10;
  EXPECT_NE(data::gen_synthetic(s).split.train.pixels, a.split.train.pixels);
}

TEST(Synthetic, NoiseFreeIsPerfectlySeparable) {
  const auto d = data::gen_synthetic({});
  EXPECT_EQ(d.split.train.size(), 4u * 32);
  EXPECT_EQ(data::nearest_template_accuracy(d.split.train, d.templates), 1.0);
  EXPECT_EQ(data::nearest_template_accuracy(d.split.test, d.templates), 1.0);
}

TEST(Synthetic, NoisyDifficultyRecorded) {
  data::SynthSpec s;
  s.noise = 0.5;
  const auto d = data::gen_synthetic(s);
  const double acc = data::nearest_template_accuracy(d.split.test, d.templates);
  ::testing::Test::RecordProperty("nearest_template_accuracy_noise_0.5", std::to_string(acc));
  EXPECT_GT(acc, 0.25);
  EXPECT_LE(acc, 1.0);
}

TEST(RunConfigJson, RoundTripThroughFile) {
  RunConfig c = smoke_config(Variant::StrideConv);
  c.dataset = "cifar10";
  c.data_dir = "/data/cifar";
  c.precision = Precision::F64;
  c.optimizer = OptimizerKind::SgdMomentum;
  c.lif = {3.0, 0.8, -0.1};
  c.synth.noise = 0.25;
  c.eval_train = false;
  c.out = "runs/x";
  const auto dir = scratch("cfg");
  std::ofstream(dir / "config.json") << json(c).dump(2);
  std::ifstream in(dir / "config.json");
  EXPECT_EQ(json::parse(in).get<RunConfig>(), c);
  fs::remove_all(dir);
}

TEST(RunConfigJson, RejectsUnknownArch) {
  json j = smoke_config(Variant::Cml);
  j["arch"] = "maxpool";
  EXPECT_THROW(j.get<RunConfig>(), ConfigError);
}

TEST(Train, Float64RunsAreBitwiseReproducible) {
  RunConfig c = smoke_config(Variant::Cml);
  c.epochs = 2;
  c.precision = Precision::F64;
  const auto a = run(c), b = run(c);
  ASSERT_EQ(a.records.size(), 3u);
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    auto ra = a.records[i], rb = b.records[i];
    ra.wall_time_s = rb.wall_time_s = 0;
    EXPECT_EQ(ra, rb);
    EXPECT_EQ(ra.epoch, i);
  }
}

TEST(Train, LossDecreasesForEveryVariant) {
  for (Variant v : kAllVariants) {
    const auto art = run(smoke_config(v));
    ASSERT_EQ(art.records.size(), 6u);
    EXPECT_LT(art.records[5].train_loss, art.records[0].train_loss) << variant_name(v);
  }
}

TEST(Train, ArtifactsWrittenAndCompared) {
  const auto root = scratch("runs");
  std::vector<RunArtifacts> runs;
  for (Variant v : kAllVariants) {
    RunConfig c = smoke_config(v);
    c.epochs = 1;
    c.out = (root / variant_name(v)).string();
    run(c);
    for (const char* f : {"config.json", "metrics.jsonl", "metrics.csv", "final.json"})
      EXPECT_TRUE(fs::exists(root / variant_name(v) / f)) << f;
    runs.push_back(load_run(c.out));
  }
  const auto cmp = compare(runs);
  ASSERT_EQ(cmp.rows.size(), 4u);
  const json j = to_json(cmp);
  std::set<std::string> methods;
  for (const auto& r : j["rows"]) methods.insert(r["method"].get<std::string>());
  EXPECT_EQ(methods, (std::set<std::string>{"ConvBN-LIF-MaxPool", "ConvBN-MaxPool-LIF", "ConvBN-AvgPool-LIF",
                                            "ConvBN(stride=2)-LIF"}));
  std::uint64_t base = 0, cml = 0;
  for (const auto& r : cmp.rows) {
    if (r.arch == Variant::Baseline) base = r.lif_updates_per_sample;
    if (r.arch == Variant::Cml) cml = r.lif_updates_per_sample;
  }
  EXPECT_EQ(base, 4 * cml);
  EXPECT_EQ(cmp.paired_deltas.size(), 3u);
  EXPECT_DOUBLE_EQ(j["reference_cml_deltas"]["Spikformer"]["cifar100"].get<double>(), 1.81);
  EXPECT_NE(to_csv(cmp).find("ConvBN-MaxPool-LIF"), std::string::npos);
  fs::remove_all(root);
}

TEST(Compare, Errors) {
  RunArtifacts a{smoke_config(Variant::Cml), {MetricsRecord{}}, "a"};
  EXPECT_THROW(compare({a}), std::invalid_argument);
  RunArtifacts b = a;
  b.config.synth.noise = 0.5;
  b.path = "b";
  EXPECT_THROW(compare({a, b}), std::invalid_argument);
  EXPECT_THROW(load_run("/nonexistent/run"), data::DataError);
}

TEST(Train, DivergenceIsReported) {
  RunConfig c = smoke_config(Variant::Cml);
  c.epochs = 1;
  c.lr = std::numeric_limits<double>::infinity();
  try {
    run(c);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_EQ(e.diagnostic["error"], "diverged");
    EXPECT_TRUE(e.diagnostic.contains("config"));
  }
}

TEST(Cifar, FullFixtureCountsAndBalance) {
  const auto dir = scratch("cifar");
  oracle::write_cifar_dir(dir);
  const auto train = data::read_cifar10_raw(dir, true);
  const auto test = data::read_cifar10_raw(dir, false);
  EXPECT_EQ(train.size(), 50000u);
  EXPECT_EQ(test.size(), 10000u);
  EXPECT_LE(train.labels[0], 9);
  const auto sub = data::cifar_subset(train, 100, "sub");
  EXPECT_EQ(sub.size(), 1000u);
  std::array<int, 10> per{};
  for (int y : sub.labels) ++per[y];
  for (int n : per) EXPECT_EQ(n, 100);
  // record 0 pixel 0 is byte 0 -> (0 - mean) / std
  EXPECT_FLOAT_EQ(sub.pixels[0], -data::kCifarMean[0] / data::kCifarStd[0]);
  fs::remove_all(dir);
}

TEST(Cifar, CorruptFilesRejected) {
  const auto dir = scratch("cifar_bad");
  const auto f = dir / "test_batch.bin";
  auto expect_error = [&](const std::string& needle) {
    try {
      data::read_cifar10_raw(dir, false);
      ADD_FAILURE() << "expected DataError containing " << needle;
    } catch (const data::DataError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
      EXPECT_NE(std::string(e.what()).find("test_batch.bin"), std::string::npos) << e.what();
    }
  };
  expect_error("cannot open");
  oracle::write_cifar_file(f, 10000);
  fs::resize_file(f, fs::file_size(f) - 100);
  expect_error("truncated");
  oracle::write_cifar_file(f, 9999);
  expect_error("9999 records");
  oracle::write_cifar_file(f, 10000, 10, 1234);
  expect_error("record 1234");
  fs::remove_all(dir);
}

#ifdef CML_CLI_PATH
namespace {

struct CliResult {
  int code;
  std::string err;
};

CliResult cli(const std::string& args) {
  const auto dir = fs::temp_directory_path();
  const auto errf = dir / ("cml_cli_err_" + std::to_string(::getpid()));
  const std::string cmd = std::string(CML_CLI_PATH) + " " + args + " > /dev/null 2> " + errf.string();
  const int status = std::system(cmd.c_str());
  std::ifstream in(errf);
  std::stringstream ss;
  ss << in.rdbuf();
  fs::remove(errf);
  return {WEXITSTATUS(status), ss.str()};
}

}  // namespace

TEST(Cli, ErrorsAreJsonOnStderr) {
  for (const std::string args : {"train --arch nope", "train --dataset cifar10 --data-dir /nonexistent --epochs 1",
                                 "compare /nonexistent", "bogus"}) {
    const auto r = cli(args);
    EXPECT_NE(r.code, 0) << args;
    const auto j = json::parse(r.err);
    EXPECT_TRUE(j.contains("error")) << args;
    EXPECT_TRUE(j.contains("message")) << args;
  }
}

TEST(Cli, ProbeAndTrainSucceed) {
  EXPECT_EQ(cli("probe --mode opcount").code, 0);
  EXPECT_EQ(cli("probe --mode mismatch --windows 200").code, 0);
  EXPECT_EQ(cli("train --arch cml --epochs 1").code, 0);
  EXPECT_EQ(cli("gradcheck --soft --seeds 1 --arch cml").code, 0);
}
#endif
