#include <gtest/gtest.h>

#include <regex>
#include <sstream>

#include "bytelm/cli.hpp"
#include "support/fixtures.hpp"
#include "support/temp_dir.hpp"

using namespace bytelm;
using fixtures::kind_of;

namespace {

struct Outcome {
  int status = 0;
  std::string out, err;
};

Outcome invoke(std::vector<std::string> args) {
  std::vector<const char*> argv{"bytelm"};
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Outcome o;
  o.status = cli::main(static_cast<int>(argv.size()), argv.data(), out, err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

std::string random_corpus(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto b = fixtures::random_text(rng, n);
  return std::string(b.begin(), b.end());
}

// Flags shrinking the desk model so a run takes well under a second.
std::vector<std::string> small_model() {
  return {"--set", "num_layers=1", "--set", "hidden_size=16", "--set", "filter_size=32",
          "--set", "num_heads=2",  "--set", "embed_dim=8",    "--set", "context_len=32",
          "--set", "window_len=32", "--set", "batch_size=4"};
}

}  // namespace

TEST(ParseArgs, Examples) {
  const auto s = cli::parse_args({"stats", "--data", "corpus.txt"});
  EXPECT_EQ(s.verb, cli::Verb::stats);
  EXPECT_EQ(s.data, std::vector<std::string>{"corpus.txt"});
  const auto e = cli::parse_args({"eval", "--checkpoint", "m.ckpt", "--data", "test.txt", "--stride", "1"});
  EXPECT_EQ(e.verb, cli::Verb::eval);
  EXPECT_EQ(e.stride, 1u);
  EXPECT_EQ(e.checkpoint, "m.ckpt");
  const auto p = cli::parse_args({"probe", "--checkpoint", "m", "--pairs", "a.tsv", "b.tsv", "--out", "x.csv"});
  EXPECT_EQ(p.pairs.size(), 2u);
  EXPECT_EQ(p.layers, "all");
  const auto t = cli::parse_args({"train", "--config", "c.cfg", "--steps", "5", "--seed", "3"});
  EXPECT_EQ(t.steps, 5u);
  EXPECT_EQ(t.seed, 3u);
  EXPECT_EQ(t.out, "model.ckpt");
}

TEST(ParseArgs, UsageErrors) {
  EXPECT_EQ(kind_of([] { cli::parse_args({"frobnicate"}); }), ErrorKind::usage);
  EXPECT_EQ(kind_of([] { cli::parse_args({}); }), ErrorKind::usage);
  EXPECT_EQ(kind_of([] { cli::parse_args({"stats", "--data", "x", "--bogus"}); }), ErrorKind::usage);
  EXPECT_EQ(kind_of([] { cli::parse_args({"eval", "--data", "x"}); }), ErrorKind::usage);
  EXPECT_EQ(kind_of([] { cli::parse_args({"stats", "eval"}); }), ErrorKind::usage);
}

TEST(Main, HelpExitsZero) {
  const auto o = invoke({"--help"});
  EXPECT_EQ(o.status, 0);
  EXPECT_NE(o.out.find("train"), std::string::npos);
  EXPECT_EQ(invoke({"eval", "--help"}).status, 0);
}

TEST(Main, UnknownVerbIsUsageError) {
  const auto o = invoke({"frobnicate"});
  EXPECT_EQ(o.status, 2);
  EXPECT_TRUE(std::regex_match(o.err, std::regex("error kind=usage message=\".*\"\n")));
}

TEST(Main, StatsPrintsCounts) {
  TempDir dir;
  const auto o = invoke({"stats", "--data", dir.write("c.txt", "hello world\n").string()});
  EXPECT_EQ(o.status, 0) << o.err;
  EXPECT_NE(o.out.find("sentences=1 words=3 bytes=12"), std::string::npos) << o.out;
  EXPECT_NE(o.out.find("{\"bytes\":12,\"sentences\":1,\"words\":3}"), std::string::npos) << o.out;
}

TEST(Main, MissingFileIsIoError) {
  const auto o = invoke({"stats", "--data", "/nonexistent/corpus.txt"});
  EXPECT_EQ(o.status, 1);
  EXPECT_EQ(o.err.rfind("error kind=io ", 0), 0u) << o.err;
  EXPECT_EQ(std::count(o.err.begin(), o.err.end(), '\n'), 1);
}

TEST(Main, EvalZeroHeadCheckpointIsEightBits) {
  TempDir dir;
  auto p = init_parameters<float>(ModelConfig::desk(), 1);
  p.output_head_weight().data.assign(p.output_head_weight().size(), 0.0f);
  p.output_head_bias().data.assign(p.output_head_bias().size(), 0.0f);
  save_checkpoint(Checkpoint{kCheckpointVersion, ModelConfig::desk(), TrainConfig::desk(), 0, p, std::nullopt},
                  dir / "zero.ckpt");
  const auto data = dir.write("t.txt", "the quick brown fox\njumps over the lazy dog\n");
  const auto o = invoke({"eval", "--checkpoint", (dir / "zero.ckpt").string(), "--data", data.string()});
  EXPECT_EQ(o.status, 0) << o.err;
  EXPECT_NE(o.out.find("bpb=8.000000"), std::string::npos) << o.out;
  EXPECT_NE(o.out.find("stride=1 context=256"), std::string::npos) << o.out;
  EXPECT_NE(o.out.find("words=11"), std::string::npos) << o.out;

  const auto bad = invoke({"eval", "--checkpoint", (dir / "zero.ckpt").string(), "--data", data.string(),
                           "--stride", "0"});
  EXPECT_EQ(bad.status, 1);
  EXPECT_EQ(bad.err.rfind("error kind=argument ", 0), 0u) << bad.err;
}

TEST(Main, CorruptCheckpointReported) {
  TempDir dir;
  const auto ckpt = dir.write("bad.ckpt", "BLMCKPT1\x01");
  const auto data = dir.write("t.txt", "abc\n");
  const auto o = invoke({"eval", "--checkpoint", ckpt.string(), "--data", data.string()});
  EXPECT_EQ(o.status, 1);
  EXPECT_EQ(o.err.rfind("error kind=truncation ", 0), 0u) << o.err;
}

TEST(Config, ThreeWayPrecedence) {
  TempDir dir;
  const auto file = dir.write("c.cfg", "# test\ninitial_lr=0.002\nbatch_size=7\nseed=5\n");
  const auto cmd = cli::parse_args({"train", "--config", file.string(), "--set", "batch_size=9", "--set",
                                    "total_steps=40", "--steps", "12"});
  ModelConfig m;
  TrainConfig t;
  cli::RunSettings run;
  cli::resolve_train_config(cmd, m, t, run);
  EXPECT_EQ(t.decay_factor, TrainConfig::desk().decay_factor);  // default only
  EXPECT_EQ(t.initial_lr, 0.002);                               // file beats default
  EXPECT_EQ(t.seed, 5u);
  EXPECT_EQ(t.batch_size, 9u);      // --set beats file
  EXPECT_EQ(t.total_steps, 12u);    // --steps beats --set
  EXPECT_EQ(m, ModelConfig::desk());
}

TEST(Config, ShippedDeskConfigMatchesDefaults) {
  const auto cmd = cli::parse_args({"train", "--config", BYTELM_SOURCE_DIR "/configs/desk.cfg"});
  ModelConfig m;
  TrainConfig t;
  cli::RunSettings run;
  cli::resolve_train_config(cmd, m, t, run);
  EXPECT_EQ(m, ModelConfig::desk());
  EXPECT_EQ(t, TrainConfig::desk());
  EXPECT_EQ(run.checkpoint_every, 100u);
}

TEST(Config, Errors) {
  TempDir dir;
  ModelConfig m;
  TrainConfig t;
  cli::RunSettings run;
  auto resolve = [&](std::vector<std::string> args) {
    args.insert(args.begin(), "train");
    cli::resolve_train_config(cli::parse_args(args), m, t, run);
  };
  EXPECT_EQ(kind_of([&] { resolve({"--set", "learning_speed=3"}); }), ErrorKind::config);
  EXPECT_EQ(kind_of([&] { resolve({"--set", "batch_size=abc"}); }), ErrorKind::config);
  EXPECT_EQ(kind_of([&] { resolve({"--set", "nokeyvalue"}); }), ErrorKind::usage);
  EXPECT_EQ(kind_of([&] { resolve({"--set", "hidden_size=130"}); }), ErrorKind::config);
  EXPECT_EQ(kind_of([&] { resolve({"--set", "window_len=400"}); }), ErrorKind::config);
  const auto bad = dir.write("bad.cfg", "initial_lr\n");
  EXPECT_EQ(kind_of([&] { resolve({"--config", bad.string()}); }), ErrorKind::parse);
}

TEST(Train, SameSeedGivesBitIdenticalFirstCheckpoint) {
  TempDir dir;
  const auto data = dir.write("c.txt", random_corpus(5000, 1));
  auto train_once = [&](const std::string& name) {
    std::vector<std::string> args{"train", "--data", data.string(), "--steps", "4", "--seed", "11",
                                  "--out", (dir / name).string(), "--set", "checkpoint_every=2"};
    for (auto& a : small_model()) args.push_back(a);
    const auto o = invoke(args);
    EXPECT_EQ(o.status, 0) << o.err;
    return (dir / (std::filesystem::path(name).stem().string() + "-step2.ckpt"));
  };
  const auto a = train_once("a.ckpt"), b = train_once("b.ckpt");
  ASSERT_TRUE(std::filesystem::exists(a));
  EXPECT_EQ(read_file_bytes(a), read_file_bytes(b));
  const auto ca = load_checkpoint(a);
  EXPECT_EQ(ca.step, 2u);
  EXPECT_EQ(ca.train.seed, 11u);
  EXPECT_EQ(load_checkpoint(dir / "a.ckpt").step, 4u);
  EXPECT_FALSE(std::filesystem::exists(dir / "a-step4.ckpt"));
}

TEST(Train, DeskConfigSmokeOnHundredKilobytes) {
  TempDir dir;
  std::string text;
  const std::string unit = random_corpus(2000, 2);
  while (text.size() < 100'000) text += unit;
  const auto data = dir.write("c.txt", text);
  const auto out = dir / "desk.ckpt";
  const auto o = invoke({"train", "--config", BYTELM_SOURCE_DIR "/configs/desk.cfg", "--data", data.string(),
                         "--steps", "30", "--set", "log_every=5", "--out", out.string()});
  ASSERT_EQ(o.status, 0) << o.err;
  EXPECT_TRUE(std::filesystem::exists(out));
  std::vector<double> bpb;
  const std::regex line(R"(step=(\d+) lr=\S+ bpb=([0-9.]+) elapsed_s=\S+)");
  std::istringstream log(o.out);
  for (std::string l; std::getline(log, l);) {
    std::smatch m;
    if (std::regex_match(l, m, line)) bpb.push_back(std::stod(m[2]));
  }
  ASSERT_EQ(bpb.size(), 7u) << o.out;  // steps 0,5,...,25 and the last
  EXPECT_LT(bpb.back(), bpb.front() - 1.0) << o.out;
  EXPECT_NE(o.out.find("checkpoint=" + out.string()), std::string::npos);
}

TEST(Probe, WritesCsvForFixture) {
  TempDir dir;
  const auto csv = dir / "rho.csv";
  const auto o = invoke({"probe", "--checkpoint", BYTELM_TEST_DATA "/tiny_probe.ckpt", "--pairs",
                         BYTELM_TEST_DATA "/wordsim_tiny.tsv", "--layers", "2", "--out", csv.string()});
  ASSERT_EQ(o.status, 0) << o.err;
  const auto bytes = read_file_bytes(csv);
  const std::string text(bytes.begin(), bytes.end());
  EXPECT_EQ(text.rfind("layer,dataset,rho\n2,wordsim_tiny,0.12766", 0), 0u) << text;
  EXPECT_NE(o.out.find("words_embedded=19"), std::string::npos) << o.out;

  const auto bad = invoke({"probe", "--checkpoint", BYTELM_TEST_DATA "/tiny_probe.ckpt", "--pairs",
                           BYTELM_TEST_DATA "/wordsim_tiny.tsv", "--layers", "3", "--out", csv.string()});
  EXPECT_EQ(bad.status, 1);
  EXPECT_EQ(bad.err.rfind("error kind=index ", 0), 0u) << bad.err;
}
