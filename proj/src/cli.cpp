#include "biper/cli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "biper/bitkernel.hpp"
#include "biper/config.hpp"
#include "biper/layers.hpp"
#include "biper/qe_analytics.hpp"
#include "biper/training.hpp"
#include "json.hpp"

namespace biper::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os.precision(17);
  return os;
}

void write_json(const fs::path& p, const json& j) { open_out(p) << j.dump(2) << '\n'; }

/// Flags that override an ExperimentConfig when given.
struct Overrides {
  std::string config;
  std::size_t epochs = 0, batch_size = 0, train_limit = 0, val_limit = 0;
  double lr = 0, weight_decay = 0, momentum = 0, omega0 = 0;
  std::uint64_t seed = 0;
  std::string method, scaling, data_dir, architecture;
  CLI::Option *o_epochs{}, *o_batch{}, *o_lr{}, *o_wd{}, *o_mom{}, *o_omega{}, *o_seed{}, *o_method{},
      *o_scaling{}, *o_dir{}, *o_tl{}, *o_vl{}, *o_arch{};

  void add(CLI::App& app) {
    app.add_option("--config", config, "INI experiment config")->check(CLI::ExistingFile);
    o_epochs = app.add_option("--epochs", epochs, "epochs per stage");
    o_batch = app.add_option("--batch-size", batch_size);
    o_lr = app.add_option("--lr", lr, "initial learning rate");
    o_wd = app.add_option("--weight-decay", weight_decay);
    o_mom = app.add_option("--momentum", momentum);
    o_omega = app.add_option("--omega0", omega0, "BiPer angular frequency");
    o_seed = app.add_option("--seed", seed);
    o_method = app.add_option("--method", method, "biper | sign-ste | sign-clipped-ste");
    o_scaling = app.add_option("--scaling", scaling, "none | per-layer | per-channel | analytic");
    o_dir = app.add_option("--data-dir", data_dir);
    o_tl = app.add_option("--train-limit", train_limit);
    o_vl = app.add_option("--val-limit", val_limit);
    o_arch = app.add_option("--arch", architecture, "mlp | minicnn | resnet20-ish");
  }

  /// Applies to one stage (1 or 2) or, with stage 0, to both.
  ExperimentConfig resolve(int stage) const {
    ExperimentConfig c = config.empty() ? ExperimentConfig{} : ExperimentConfig::from_file(config);
    auto each = [&](auto fn) {
      if (stage != 2) fn(c.stage1);
      if (stage != 1) fn(c.stage2);
    };
    if (o_epochs->count()) each([&](auto& s) { s.epochs = epochs; });
    if (o_batch->count()) each([&](auto& s) { s.batch_size = batch_size; });
    if (o_lr->count()) each([&](auto& s) { s.lr0 = lr; });
    if (o_wd->count()) each([&](auto& s) { s.weight_decay = weight_decay; });
    if (o_mom->count()) each([&](auto& s) { s.momentum = momentum; });
    if (o_omega->count()) c.quant.omega0 = omega0;
    if (o_seed->count()) c.set_seed(seed);
    if (o_method->count()) c.quant.method = parse_quant_method(method);
    if (o_scaling->count()) c.quant.scaling = parse_scaling_mode(scaling);
    if (o_dir->count()) c.data.dir = data_dir;
    if (o_tl->count()) c.data.train_limit = train_limit;
    if (o_vl->count()) c.data.val_limit = val_limit;
    if (o_arch->count()) c.model.arch = nn::parse_architecture(architecture);
    c.apply_dataset_shape();
    c.validate();
    return c;
  }
};

json eval_json(const train::EvalResult& r) {
  json j = {{"top1", r.top1}, {"loss", r.loss}, {"count", r.count}};
  if (r.top5 >= 0) j["top5"] = r.top5;
  return j;
}

// ---- analyze-qe ----------------------------------------------------------

struct AnalyzeQe {
  double b = 1.0, omega_min = 1e-2, omega_max = 1e2;
  std::size_t points = 201;
  std::string out, summary;

  void add(CLI::App& app) {
    app.add_option("--b", b, "Laplace scale of the latent weights")->check(CLI::PositiveNumber);
    app.add_option("--omega-min", omega_min)->check(CLI::PositiveNumber);
    app.add_option("--omega-max", omega_max)->check(CLI::PositiveNumber);
    app.add_option("--points", points, "log-spaced omega0 grid size")->check(CLI::Range(2, 1000000));
    app.add_option("--out", out, "CSV: omega0,b,gamma,qe");
    app.add_option("--summary", summary, "JSON summary path");
  }

  int run(std::ostream& os) const {
    if (omega_max <= omega_min) throw UsageError("--omega-max must exceed --omega-min");
    const auto best = qe::find_qe_maximum();
    const double far = qe::qe_optimal_product(1e4);
    json j = {{"max_qe", best.qe},
              {"argmax_product", best.product},
              {"qe_at_product_1e4", far},
              {"asymptote", qe::qe_asymptote()},
              {"b", b},
              {"argmax_omega0", best.product / b}};
    if (!out.empty()) {
      const auto grid = qe::log_grid(omega_min, omega_max, points);
      const auto curve = qe::qe_curve(qe::LaplaceModel(b), grid);
      auto f = open_out(out);
      qe::write_qe_csv(f, curve);
    }
    if (!summary.empty()) write_json(summary, j);
    os << j.dump() << '\n';
    return 0;
  }
};

// ---- plot-pdf ------------------------------------------------------------

struct PlotPdf {
  double omega0 = 1.0, b = 1.0;
  std::size_t points = 2001;
  std::string out;

  void add(CLI::App& app) {
    app.add_option("--omega0", omega0)->check(CLI::PositiveNumber);
    app.add_option("--b", b)->check(CLI::PositiveNumber);
    app.add_option("--points", points)->check(CLI::Range(3, 10000000));
    app.add_option("--out", out, "CSV: w_hat,density (stdout when omitted)");
  }

  int run(std::ostream& os) const {
    const qe::LaplaceModel model(b);
    const auto grid = qe::pdf_grid(omega0, model, points);
    if (out.empty()) {
      std::ostringstream csv;
      csv.precision(17);
      qe::write_pdf_csv(csv, grid);
      os << csv.str();
      return 0;
    }
    auto f = open_out(out);
    qe::write_pdf_csv(f, grid);
    os << json{{"points", grid.size()}, {"mass", qe::pdf_mass(omega0, model)}, {"out", out}}.dump() << '\n';
    return 0;
  }
};

// ---- train ---------------------------------------------------------------

struct Train {
  Overrides ov;
  int stage = 1;
  std::string warm, out;
  bool quiet = false;

  void add(CLI::App& app) {
    ov.add(app);
    app.add_option("--stage", stage, "1 (real weights) or 2 (binary weights)")->check(CLI::IsMember({1, 2}));
    app.add_option("--warm", warm, "stage-1 checkpoint manifest (stage 2)");
    app.add_option("--out", out, "run directory")->required();
    app.add_flag("--quiet", quiet, "no per-epoch progress on stderr");
  }

  int run(std::ostream& os, std::ostream& err) const {
    ExperimentConfig cfg = ov.resolve(stage);
    if (!warm.empty()) cfg.warm = warm;
    if (stage == 2 && cfg.warm.empty()) throw UsageError("stage 2 needs --warm <stage-1 checkpoint>");
    const DataSplits data = load_datasets(cfg.data, cfg.seed);
    const fs::path dir(out);
    fs::create_directories(dir);
    open_out(dir / "config.ini") << cfg.to_ini();

    auto progress = [&](const train::EpochStats& e) {
      if (quiet) return;
      err << "stage " << stage << " epoch " << e.epoch << ": loss " << e.train_loss << " train_acc "
          << e.train_accuracy << " val_top1 " << e.val_top1 << " (" << e.seconds << " s)\n";
    };
    std::optional<train::TrainResult> result;
    if (stage == 1) {
      result.emplace(train::train_stage1(cfg.stage1, cfg.model, cfg.quant, data.train, &data.val, progress));
    } else {
      const Checkpoint ck = load_checkpoint(cfg.warm);
      result.emplace(train::train_stage2(cfg.stage2, ck, cfg.model, cfg.quant, data.train, &data.val, progress));
    }
    auto& [model, record] = *result;
    json meta = {{"stage", stage}, {"record", record.to_json()}};
    nn::save_model(model, dir / "model.json", meta);
    write_json(dir / "record.json", record.to_json());
    {
      auto f = open_out(dir / "epochs.csv");
      record.write_epochs_csv(f);
    }
    {
      auto f = open_out(dir / "layers.csv");
      record.write_layers_csv(f);
    }
    json j = {{"stage", stage},
              {"method", record.method},
              {"omega0", record.omega0},
              {"seed", record.seed},
              {"eval", eval_json(record.final_eval)},
              {"final_qe", record.final_qe},
              {"final_b_hat", record.final_b_hat},
              {"checkpoint", (dir / "model.json").string()}};
    if (stage == 2) {
      j["start_qe"] = record.start_qe;
      j["gradient_bound_max_ratio"] = record.gradient_bound.max_ratio;
    }
    os << j.dump() << '\n';
    return 0;
  }
};

// ---- eval ----------------------------------------------------------------

bool is_packed_manifest(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  try {
    return json::parse(in).value("format", "") == "biper-packed";
  } catch (const json::exception& e) {
    throw std::runtime_error(p.string() + ": " + e.what());
  }
}

struct Eval {
  Overrides ov;
  std::string model_path, split = "test";
  int stage = 2;

  void add(CLI::App& app) {
    ov.add(app);
    app.add_option("--model", model_path, "checkpoint or packed manifest")->required()->check(CLI::ExistingFile);
    app.add_option("--split", split)->check(CLI::IsMember({"train", "test"}));
    app.add_option("--stage", stage, "forward used for evaluation")->check(CLI::IsMember({1, 2}));
  }

  int run(std::ostream& os) const {
    // A run directory carries the config it was trained with; use it for data parity.
    Overrides o = ov;
    const fs::path sibling = fs::path(model_path).parent_path() / "config.ini";
    if (o.config.empty() && fs::exists(sibling)) o.config = sibling.string();
    const ExperimentConfig cfg = o.resolve(0);
    const bool packed = is_packed_manifest(model_path);
    if (packed && stage != 2) throw UsageError("packed models only support --stage 2");
    nn::Model model = packed ? nn::load_packed_model(model_path) : nn::load_model(model_path);
    const DataSplits data = load_datasets(cfg.data, cfg.seed);
    const auto r = train::evaluate(model, split == "train" ? data.train : data.val, stage == 1 ? nn::Stage::stage1 : nn::Stage::stage2);
    json j = eval_json(r);
    j["packed"] = packed;
    j["stage"] = stage;
    j["split"] = split;
    os << j.dump() << '\n';
    return 0;
  }
};

// ---- ablate-omega --------------------------------------------------------

struct Ablate {
  Overrides ov;
  std::vector<double> omegas{5, 10, 20, 30};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string out;
  bool stage2 = false, save_checkpoints = false, quiet = false;

  void add(CLI::App& app) {
    ov.add(app);
    app.add_option("--omegas", omegas, "omega0 grid")->delimiter(',');
    app.add_option("--seeds", seeds, "seeds per omega0")->delimiter(',');
    app.add_option("--out", out, "output directory")->required();
    app.add_flag("--stage2", stage2, "also run stage 2 from every stage-1 result");
    app.add_flag("--save-checkpoints", save_checkpoints, "keep stage-1 checkpoints as omega<w>_seed<s>/model.json");
    app.add_flag("--quiet", quiet);
  }

  int run(std::ostream& os, std::ostream& err) const {
    const ExperimentConfig cfg = ov.resolve(0);
    const DataSplits data = load_datasets(cfg.data, cfg.seed);
    const fs::path dir(out);
    fs::create_directories(dir);
    open_out(dir / "config.ini") << cfg.to_ini();

    train::AblationConfig acfg;
    acfg.omegas = omegas;
    acfg.seeds = seeds;
    acfg.stage1 = cfg.stage1;
    acfg.stage2 = cfg.stage2;
    acfg.run_stage2 = stage2;
    auto on_row = [&](const train::AblationRow& row, nn::Model& model) {
      if (save_checkpoints) {
        std::ostringstream name;
        name << "omega" << row.omega0 << "_seed" << row.seed;
        nn::save_model(model, dir / name.str() / "model.json", {{"stage", 1}});
      }
      if (!quiet) {
        err << "omega0 " << row.omega0 << " seed " << row.seed << ": top1 " << row.stage1_top1 << " qe "
            << row.stage1_qe << " b " << row.stage1_b_hat << '\n';
      }
    };
    const auto result = train::ablate_omega(acfg, cfg.model, cfg.quant.scaling, data.train, data.val, on_row);

    for (const char* panel : {"precision", "qe", "b"}) {
      auto f = open_out(dir / (std::string(panel) + ".csv"));
      train::write_ablation_csv(f, result, panel);
    }
    {
      auto f = open_out(dir / "runs.csv");
      f << "omega0,seed,stage1_top1,stage1_qe,stage1_b_hat,stage2_top1,stage2_qe\n";
      for (const auto& r : result.rows) {
        f << r.omega0 << ',' << r.seed << ',' << r.stage1_top1 << ',' << r.stage1_qe << ',' << r.stage1_b_hat << ','
          << r.stage2_top1 << ',' << r.stage2_qe << '\n';
      }
    }
    bool monotone = true;
    json med = json::array();
    for (std::size_t i = 0; i < result.summary.size(); ++i) {
      const auto& s = result.summary[i];
      med.push_back({{"omega0", s.omega0}, {"top1", s.stage1_top1}, {"qe", s.stage1_qe}, {"b_hat", s.stage1_b_hat}});
      if (s.stage2_top1 >= 0) med.back()["stage2_top1"] = s.stage2_top1;
      if (i && s.stage1_qe > result.summary[i - 1].stage1_qe) monotone = false;
    }
    json j = {{"medians", med}, {"qe_nonincreasing", monotone}, {"out", dir.string()}};
    write_json(dir / "summary.json", j);
    os << j.dump() << '\n';
    return 0;
  }
};

// ---- pack ----------------------------------------------------------------

struct Pack {
  std::string model_path, out;

  void add(CLI::App& app) {
    app.add_option("--model", model_path, "checkpoint manifest")->required()->check(CLI::ExistingFile);
    app.add_option("--out", out, "packed manifest path")->required();
  }

  int run(std::ostream& os) const {
    nn::Model model = nn::load_model(model_path);
    const fs::path p(out);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    const auto r = nn::save_packed_model(model, p);
    const fs::path cfg_src = fs::path(model_path).parent_path() / "config.ini";
    const fs::path cfg_dst = p.parent_path() / "config.ini";
    if (fs::exists(cfg_src) && !fs::exists(cfg_dst)) fs::copy_file(cfg_src, cfg_dst);
    os << json{{"binary_layers", r.binary_layers},
               {"binary_weights", r.binary_weight_count},
               {"float32_bytes", r.float_weight_bytes},
               {"packed_bytes", r.packed_weight_bytes},
               {"compression", r.compression()},
               {"out", out}}
              .dump()
       << '\n';
    return 0;
  }
};

// ---- bench ---------------------------------------------------------------

struct Bench {
  std::vector<std::size_t> sizes{64, 128, 256, 512};
  int repeats = 5;
  std::uint64_t seed = 0;
  std::string out;

  void add(CLI::App& app) {
    app.add_option("--sizes", sizes, "square GEMM sizes")->delimiter(',');
    app.add_option("--repeats", repeats)->check(CLI::PositiveNumber);
    app.add_option("--seed", seed);
    app.add_option("--out", out, "CSV path (stdout when omitted)");
  }

  int run(std::ostream& os) const {
    const auto rows = bits::bench_gemm(sizes, repeats, seed);
    if (out.empty()) {
      bits::write_bench_csv(os, rows);
      return 0;
    }
    auto f = open_out(out);
    bits::write_bench_csv(f, rows);
    json r = json::array();
    for (const auto& row : rows) r.push_back({{"n", row.n}, {"ratio", row.ratio}});
    os << json{{"rows", r}, {"out", out}}.dump() << '\n';
    return 0;
  }
};

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"BiPer binary neural network toolkit", "biper"};
  app.require_subcommand(1);
  AnalyzeQe analyze;
  PlotPdf pdf;
  Train train_cmd;
  Eval eval;
  Ablate ablate;
  Pack pack;
  Bench bench;
  auto* c_analyze = app.add_subcommand("analyze-qe", "QE of the BiPer binarizer under a Laplace weight model");
  auto* c_pdf = app.add_subcommand("plot-pdf", "density of sin(omega0 w) for Laplace w, as CSV");
  auto* c_train = app.add_subcommand("train", "train stage 1 or stage 2");
  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint or packed model");
  auto* c_ablate = app.add_subcommand("ablate-omega", "stage-1 frequency ablation");
  auto* c_pack = app.add_subcommand("pack", "bit-pack the binarized weights of a checkpoint");
  auto* c_bench = app.add_subcommand("bench", "float32 vs XNOR/popcount GEMM timing");
  analyze.add(*c_analyze);
  pdf.add(*c_pdf);
  train_cmd.add(*c_train);
  eval.add(*c_eval);
  ablate.add(*c_ablate);
  pack.add(*c_pack);
  bench.add(*c_bench);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: usage: " << one_line(e.what()) << '\n';
    return 2;
  }

  try {
    if (*c_analyze) return analyze.run(out);
    if (*c_pdf) return pdf.run(out);
    if (*c_train) return train_cmd.run(out, err);
    if (*c_eval) return eval.run(out);
    if (*c_ablate) return ablate.run(out, err);
    if (*c_pack) return pack.run(out);
    if (*c_bench) return bench.run(out);
  } catch (const UsageError& e) {
    err << "error: usage: " << one_line(e.what()) << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << one_line(e.what()) << '\n';
    return 1;
  }
  return 2;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace biper::cli
