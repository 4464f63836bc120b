#include <fstream>
#include <numbers>
#include <sstream>

#include "biper/cli.hpp"
#include "biper/config.hpp"
#include "doctest.h"
#include "json.hpp"
#include "support.hpp"

using namespace biper;
using nlohmann::json;
using testing::TempDir;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result biper_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

const char* kMoons = R"([data]
dataset = two-moons
synth_train = 200
synth_val = 100

[model]
architecture = mlp
hidden = 16,16

[stage1]
epochs = 3
batch_size = 32

[stage2]
epochs = 3
batch_size = 32
)";

}  // namespace

TEST_CASE("INI config round-trips") {
  ExperimentConfig c = ExperimentConfig::from_string(kMoons);
  CHECK(c.data.dataset == "two-moons");
  CHECK(c.model.hidden == std::vector<std::size_t>{16, 16});
  CHECK(c.stage1.epochs == 3);
  CHECK(c.stage1.lr0 == 0.1);   // default kept
  CHECK(c.stage2.lr0 == 0.01);  // stage default kept
  c.quant.omega0 = 12.5;
  c.set_seed(42);
  c.warm = "runs/s1/model.json";
  const ExperimentConfig back = ExperimentConfig::from_string(c.to_ini());
  CHECK(back.to_ini() == c.to_ini());
  CHECK(back.stage2.seed == 42);
  CHECK(back.quant.omega0 == 12.5);
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(ExperimentConfig::from_string("[bogus]\nx = 1\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_string("[stage1]\nlearning_rate = 1\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_string("[stage1]\nepochs = ten\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_string("[stage1]\nepochs = -3\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_string("[model]\nbinarize_activations = maybe\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_string("[model]\nhidden = 4,x\n"), ConfigError);
  CHECK_THROWS(ExperimentConfig::from_file("/nonexistent/config.ini"));
  ExperimentConfig c = ExperimentConfig::from_string(kMoons);
  c.model.arch = nn::Architecture::minicnn;
  c.apply_dataset_shape();
  CHECK_THROWS(c.validate());
}

TEST_CASE("dataset loading applies limits and train-split normalization") {
  DataConfig d;
  d.dataset = "two-moons";
  d.synth_train = 100;
  d.synth_val = 50;
  const auto s = load_datasets(d, 3);
  CHECK(s.train.size() == 100);
  CHECK(s.val.size() == 50);
  const auto stats = data::fit_normalization(s.train);
  for (std::size_t c = 0; c < 2; ++c) {
    CHECK(std::abs(stats.mean[c]) < 1e-6);
    CHECK(std::abs(stats.stddev[c] - 1.0) < 1e-6);
  }
  CHECK_FALSE(s.train.images == s.val.images);
  d.train_limit = 20;
  CHECK(load_datasets(d, 3).train.size() == 20);
  d.dataset = "imagenet";
  CHECK_THROWS(load_datasets(d, 3));
}

TEST_CASE("cli: usage errors are one line with exit code 2") {
  for (const auto& args : std::vector<std::vector<std::string>>{
           {}, {"nonsense"}, {"analyze-qe", "--b", "-1"}, {"train"}, {"plot-pdf", "--points", "x"}}) {
    const auto r = biper_cli(args);
    CHECK(r.code == 2);
    CHECK(r.err.rfind("error: ", 0) == 0);
    CHECK(lines(r.err) == 1);
  }
  const auto help = biper_cli({"--help"});
  CHECK(help.code == 0);
  CHECK(help.out.find("analyze-qe") != std::string::npos);
}

TEST_CASE("cli: runtime errors are one line with exit code 1") {
  TempDir dir("clierr");
  std::ofstream(dir / "bad.json") << "{}";
  const auto r = biper_cli({"eval", "--model", (dir / "bad.json").string()});
  CHECK(r.code == 1);
  CHECK(r.err.rfind("error: ", 0) == 0);
  CHECK(lines(r.err) == 1);
  const auto missing = biper_cli({"train", "--stage", "2", "--out", (dir / "x").string()});
  CHECK(missing.code != 0);
  CHECK(lines(missing.err) == 1);
}

TEST_CASE("cli: analyze-qe reports the maximum and the asymptote") {
  TempDir dir("qe");
  const auto r = biper_cli({"analyze-qe", "--b", "0.05", "--out", (dir / "qe.csv").string(), "--points", "50"});
  REQUIRE(r.code == 0);
  const json j = json::parse(r.out);
  CHECK(std::abs(j["max_qe"].get<double>() - 0.102835) < 1e-4);
  CHECK(std::abs(j["argmax_product"].get<double>() - 0.954882) < 1e-3);
  CHECK(std::abs(j["qe_at_product_1e4"].get<double>() - (0.5 - 4.0 / (std::numbers::pi * std::numbers::pi))) < 1e-3);
  CHECK(j["argmax_omega0"].get<double>() == doctest::Approx(0.954882 / 0.05).epsilon(1e-5));
  const std::string csv = slurp(dir / "qe.csv");
  CHECK(csv.rfind("omega0,b,gamma,qe\n", 0) == 0);
  CHECK(lines(csv) == 51);
}

TEST_CASE("cli: plot-pdf density integrates to one over theta") {
  const auto r = biper_cli({"plot-pdf", "--omega0", "4", "--b", "0.25", "--points", "4001"});
  REQUIRE(r.code == 0);
  std::istringstream in(r.out);
  std::string line;
  std::getline(in, line);
  CHECK(line == "w_hat,density");
  // Trapezoid in theta = asin(w_hat): f(w_hat) dw_hat = f cos(theta) dtheta.
  std::vector<double> theta, g;
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    const double w = std::stod(line.substr(0, comma)), f = std::stod(line.substr(comma + 1));
    theta.push_back(std::asin(w));
    g.push_back(f * std::sqrt(1.0 - w * w));
  }
  REQUIRE(theta.size() == 4001);
  double mass = 0.0;
  for (std::size_t i = 1; i < theta.size(); ++i) mass += 0.5 * (g[i] + g[i - 1]) * (theta[i] - theta[i - 1]);
  CHECK(mass == doctest::Approx(1.0).epsilon(2e-3));
}

TEST_CASE("cli: train, stage 2, pack, eval and rerun on two moons") {
  TempDir dir("pipeline");
  std::ofstream(dir / "moons.ini") << kMoons;
  const std::string cfg = (dir / "moons.ini").string();
  const auto s1 = biper_cli({"train", "--config", cfg, "--out", (dir / "s1").string(), "--quiet", "--seed", "3"});
  REQUIRE_MESSAGE(s1.code == 0, s1.err);
  const json j1 = json::parse(s1.out);
  CHECK(j1["stage"] == 1);
  for (const char* f : {"config.ini", "model.json", "model.bin", "record.json", "epochs.csv", "layers.csv"}) {
    CHECK(std::filesystem::exists(dir / "s1" / f));
  }
  CHECK(lines(slurp(dir / "s1" / "epochs.csv")) == 4);

  const auto s2 = biper_cli({"train", "--config", cfg, "--stage", "2", "--warm", (dir / "s1" / "model.json").string(),
                             "--out", (dir / "s2").string(), "--quiet", "--seed", "3"});
  REQUIRE_MESSAGE(s2.code == 0, s2.err);
  const json j2 = json::parse(s2.out);
  CHECK(j2["start_qe"].get<double>() == doctest::Approx(j1["final_qe"].get<double>()).epsilon(1e-6));
  CHECK(j2["gradient_bound_max_ratio"].get<double>() <= 1.0 + 1e-12);

  // Evaluating the saved checkpoint reproduces the reported accuracy exactly.
  const auto ev = biper_cli({"eval", "--model", (dir / "s2" / "model.json").string()});
  REQUIRE_MESSAGE(ev.code == 0, ev.err);
  CHECK(json::parse(ev.out)["top1"] == j2["eval"]["top1"]);
  CHECK(json::parse(ev.out)["loss"] == j2["eval"]["loss"]);

  const auto pk = biper_cli({"pack", "--model", (dir / "s2" / "model.json").string(), "--out",
                             (dir / "packed" / "model.json").string()});
  REQUIRE_MESSAGE(pk.code == 0, pk.err);
  CHECK(json::parse(pk.out)["compression"] == 32.0);
  const auto pe = biper_cli({"eval", "--model", (dir / "packed" / "model.json").string()});
  REQUIRE_MESSAGE(pe.code == 0, pe.err);
  CHECK(json::parse(pe.out)["packed"] == true);
  CHECK(json::parse(pe.out)["top1"] == j2["eval"]["top1"]);
  CHECK(json::parse(pe.out)["loss"] == json::parse(ev.out)["loss"]);

  // The stored config alone reproduces the run.
  const auto again = biper_cli({"train", "--config", (dir / "s1" / "config.ini").string(), "--out",
                                (dir / "s1b").string(), "--quiet"});
  REQUIRE_MESSAGE(again.code == 0, again.err);
  CHECK(slurp(dir / "s1" / "epochs.csv") == slurp(dir / "s1b" / "epochs.csv"));
  CHECK(slurp(dir / "s1" / "layers.csv") == slurp(dir / "s1b" / "layers.csv"));
  json ra = json::parse(slurp(dir / "s1" / "record.json")), rb = json::parse(slurp(dir / "s1b" / "record.json"));
  for (auto* r : {&ra, &rb})
    for (auto& e : (*r)["epochs"]) e.erase("seconds");
  CHECK(ra == rb);

  const auto nopack = biper_cli({"pack", "--model", (dir / "s1" / "model.json").string(), "--out",
                                 (dir / "p1.json").string()});
  CHECK(nopack.code == 0);  // stage-1 checkpoints hold binarizable layers too
}

TEST_CASE("cli: ablate-omega writes the three panels") {
  TempDir dir("ablate");
  std::ofstream(dir / "moons.ini") << kMoons;
  const auto r = biper_cli({"ablate-omega", "--config", (dir / "moons.ini").string(), "--omegas", "5,20", "--seeds",
                            "0,1", "--epochs", "1", "--out", (dir / "abl").string(), "--quiet"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  for (const char* f : {"precision.csv", "qe.csv", "b.csv", "runs.csv", "summary.json"}) {
    CHECK(std::filesystem::exists(dir / "abl" / f));
  }
  CHECK(slurp(dir / "abl" / "qe.csv").rfind("omega0,seed_0,seed_1,median\n", 0) == 0);
  CHECK(lines(slurp(dir / "abl" / "b.csv")) == 3);
  const json s = json::parse(slurp(dir / "abl" / "summary.json"));
  CHECK(s.contains("qe_nonincreasing"));
}

TEST_CASE("cli: bench emits a CSV") {
  TempDir dir("bench");
  const auto r = biper_cli({"bench", "--sizes", "16,32", "--repeats", "1", "--out", (dir / "bench.csv").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(lines(slurp(dir / "bench.csv")) == 3);
}
