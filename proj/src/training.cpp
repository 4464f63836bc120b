#include "biper/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <ostream>
#include <stdexcept>

namespace biper::train {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Independent stream per (seed, stage, epoch, purpose). Method-independent,
/// so BiPer and the STE control see the same batches.
std::uint64_t stream(std::uint64_t seed, int stage, std::size_t epoch, std::uint64_t purpose) {
  return splitmix(splitmix(splitmix(seed) ^ static_cast<std::uint64_t>(stage)) ^ (epoch * 0x100 + purpose));
}

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

std::size_t argmax_row(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

std::string stage_name(nn::Stage s) { return s == nn::Stage::stage1 ? "stage 1" : "stage 2"; }

TrainResult run(const TrainConfig& cfg, nn::Model model, nn::Stage stage, const data::Dataset& train,
                const data::Dataset* val, const EpochCallback& on_epoch, RunRecord record) {
  cfg.validate();
  train.validate();
  if (train.size() < 2) throw std::invalid_argument("training needs at least 2 examples");
  const AugmentFlags flags{cfg.augment_crop, cfg.augment_flip};
  if ((flags.crop || flags.flip) && train.images.rank() != 4) {
    throw std::invalid_argument("augmentation needs image-shaped data [N,C,H,W]");
  }

  nn::StateList state = model.state();
  std::vector<Tensor> velocity(state.size());
  const auto binary = model.binary_layers();
  const bool track_bound = stage == nn::Stage::stage2 && model.quant().method == QuantMethod::biper;
  const double omega0 = model.quant().omega0;
  const std::size_t n = train.size();

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cfg.scheduler == Scheduler::cosine ? cosine_lr(e, cfg.epochs, cfg.lr0) : cfg.lr0;
    const auto order = data::shuffled_indices(n, stream(cfg.seed, cfg.stage, e, 1));
    std::mt19937_64 aug_rng(stream(cfg.seed, cfg.stage, e, 2));
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0, step = 0;

    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++step) {
      const std::size_t m = std::min(cfg.batch_size, n - start);
      if (m < 2) break;  // batch norm needs two samples
      const std::span<const std::size_t> idx(order.data() + start, m);
      Tensor x = data::gather(train.images, idx);
      std::vector<int> labels(m);
      for (std::size_t i = 0; i < m; ++i) labels[i] = train.labels[idx[i]];
      if (flags.crop || flags.flip) augment(x, flags, aug_rng);

      ad::Variable logits, loss;
      try {
        logits = model.forward(ad::Variable(std::move(x)), {stage, true});
        loss = ad::softmax_cross_entropy(logits, labels);
      } catch (const NumericError& err) {
        throw NumericError(stage_name(stage) + " diverged at epoch " + std::to_string(e + 1) + " step " +
                           std::to_string(step) + ": " + err.what());
      }
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        throw NumericError(stage_name(stage) + " diverged: loss " + std::to_string(lv) + " at epoch " +
                           std::to_string(e + 1) + " step " + std::to_string(step) + " (lr " +
                           std::to_string(lr) + ")");
      }
      try {
        ad::backward(loss);
      } catch (const NumericError& err) {
        throw NumericError(stage_name(stage) + " diverged at epoch " + std::to_string(e + 1) + " step " +
                           std::to_string(step) + ": " + err.what());
      }

      if (track_bound) {
        for (auto* layer : binary) {
          const auto& wq = layer->last_binarized();
          if (!wq.defined() || !wq.has_grad() || !layer->latent().has_grad()) continue;
          const double gq = max_abs(wq.grad());
          if (gq == 0.0) continue;
          record.gradient_bound.checks += 1;
          record.gradient_bound.max_ratio =
              std::max(record.gradient_bound.max_ratio, max_abs(layer->latent().grad()) / (omega0 * gq));
        }
      }

      for (std::size_t i = 0; i < state.size(); ++i) {
        auto& entry = state[i];
        if (!entry.param) continue;
        ad::Variable& p = *entry.param;
        const Tensor grad = p.has_grad() ? p.grad() : Tensor(p.shape(), 0.0);
        sgd_momentum_step(p.mutable_value(), grad, velocity[i], lr, cfg.momentum,
                          entry.decay ? cfg.weight_decay : 0.0);
        p.zero_grad();
      }

      loss_sum += lv * static_cast<double>(m);
      seen += m;
      const Tensor& lg = logits.value();
      const std::size_t k = lg.dim(1);
      for (std::size_t i = 0; i < m; ++i)
        if (argmax_row(lg.data().subspan(i * k, k)) == static_cast<std::size_t>(labels[i])) ++correct;
    }

    EpochStats stats;
    stats.epoch = e + 1;
    stats.lr = lr;
    stats.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    stats.train_accuracy = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    if (val) {
      const EvalResult r = evaluate(model, *val, stage);
      stats.val_top1 = r.top1;
      stats.val_top5 = r.top5;
    }
    stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record.epochs.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }

  // Checkpoints hold float32; evaluating the rounded model makes a reloaded
  // checkpoint reproduce final_eval exactly.
  model.round_to_float32();
  record.final_eval = evaluate(model, val ? *val : train, stage);
  if (!binary.empty()) {
    record.layers = layer_stats(model);
    record.final_qe = model_qe(model);
    record.final_b_hat = model_b_hat(model);
  }
  return {std::move(model), std::move(record)};
}

RunRecord base_record(const TrainConfig& cfg, const nn::ModelSpec& spec, const QuantSpec& quant) {
  RunRecord r;
  r.stage = cfg.stage;
  r.method = to_string(quant.method);
  r.omega0 = quant.omega0;
  r.seed = cfg.seed;
  r.config = {{"train", cfg.to_json()}, {"model", spec.to_json()}, {"quant", nn::quant_to_json(quant)}};
  return r;
}

}  // namespace

// ---- config --------------------------------------------------------------

TrainConfig TrainConfig::for_stage(int stage) {
  TrainConfig c;
  c.stage = stage;
  if (stage == 2) {
    c.lr0 = 0.01;
    c.weight_decay = 5e-5;
  }
  c.validate();
  return c;
}

void TrainConfig::validate() const {
  if (stage != 1 && stage != 2) throw std::invalid_argument("TrainConfig: stage must be 1 or 2");
  if (epochs == 0) throw std::invalid_argument("TrainConfig: epochs must be positive");
  if (batch_size < 2) throw std::invalid_argument("TrainConfig: batch size must be at least 2");
  if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw std::invalid_argument("TrainConfig: lr must be positive");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("TrainConfig: weight decay must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("TrainConfig: momentum must be in [0,1)");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"stage", stage},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"lr0", lr0},
          {"weight_decay", weight_decay},
          {"momentum", momentum},
          {"scheduler", scheduler == Scheduler::cosine ? "cosine" : "constant"},
          {"seed", seed},
          {"augment_crop", augment_crop},
          {"augment_flip", augment_flip}};
}

// ---- optimizer and schedule ----------------------------------------------

void sgd_momentum_step(Tensor& param, const Tensor& grad, Tensor& velocity, double lr, double momentum,
                       double weight_decay) {
  if (grad.shape() != param.shape()) {
    throw ShapeError("sgd_momentum_step: grad " + shape_str(grad.shape()) + " vs param " +
                     shape_str(param.shape()));
  }
  if (velocity.empty() && !param.empty()) velocity = Tensor(param.shape(), 0.0);
  if (velocity.shape() != param.shape()) {
    throw ShapeError("sgd_momentum_step: velocity " + shape_str(velocity.shape()) + " vs param " +
                     shape_str(param.shape()));
  }
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = momentum * velocity[i] + (grad[i] + weight_decay * param[i]);
    param[i] -= lr * velocity[i];
  }
}

double cosine_lr(std::size_t epoch, std::size_t total, double lr0) {
  if (epoch >= total) {
    throw std::invalid_argument("cosine_lr: epoch " + std::to_string(epoch) + " outside [0, " +
                                std::to_string(total) + ")");
  }
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(total)));
}

void augment(Tensor& batch, AugmentFlags flags, std::mt19937_64& rng) {
  if (batch.rank() != 4) throw ShapeError("augment: expects [N,C,H,W], got " + shape_str(batch.shape()));
  const std::size_t N = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  constexpr long kPad = 4;
  std::vector<double> img(C * H * W);
  for (std::size_t n = 0; n < N; ++n) {
    const long dy = flags.crop ? static_cast<long>(rng() % (2 * kPad + 1)) - kPad : 0;
    const long dx = flags.crop ? static_cast<long>(rng() % (2 * kPad + 1)) - kPad : 0;
    const bool flip = flags.flip && (rng() >> 63);
    auto base = batch.data().subspan(n * C * H * W, C * H * W);
    std::copy(base.begin(), base.end(), img.begin());
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const long sy = static_cast<long>(y) + dy;
          const long sxr = static_cast<long>(x) + dx;
          const long sx = flip ? static_cast<long>(W) - 1 - sxr : sxr;
          const bool inside = sy >= 0 && sy < static_cast<long>(H) && sx >= 0 && sx < static_cast<long>(W);
          base[(c * H + y) * W + x] = inside ? img[(c * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx)] : 0.0;
        }
  }
}

// ---- evaluation ----------------------------------------------------------

EvalResult evaluate(nn::Model& model, const data::Dataset& ds, nn::Stage stage) {
  ds.validate();
  EvalResult r;
  r.count = ds.size();
  if (r.count == 0) return r;
  const Tensor logits = model.predict(ds.images, stage);
  const std::size_t k = logits.dim(1);
  std::size_t top1 = 0, top5 = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < r.count; ++i) {
    const auto row = logits.data().subspan(i * k, k);
    const auto label = static_cast<std::size_t>(ds.labels[i]);
    if (argmax_row(row) == label) ++top1;
    // Rank of the true class = number of strictly larger logits.
    const auto above = std::count_if(row.begin(), row.end(), [&](double v) { return v > row[label]; });
    if (above < 5) ++top5;
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    loss += mx + std::log(z) - row[label];
  }
  const auto count = static_cast<double>(r.count);
  r.top1 = static_cast<double>(top1) / count;
  r.top5 = ds.classes >= 10 ? static_cast<double>(top5) / count : -1.0;
  r.loss = loss / count;
  return r;
}

// ---- statistics ----------------------------------------------------------

std::vector<LayerStats> layer_stats(nn::Model& model) {
  std::vector<LayerStats> out;
  const auto layers = model.binary_layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    out.push_back({i, layers[i]->latent().size(), layers[i]->quantization_error(), layers[i]->laplace_b()});
  }
  return out;
}

namespace {

double weighted_mean(const std::vector<LayerStats>& stats, double LayerStats::*field) {
  double num = 0.0, den = 0.0;
  for (const auto& s : stats) {
    num += s.*field * static_cast<double>(s.weights);
    den += static_cast<double>(s.weights);
  }
  if (den == 0.0) throw std::invalid_argument("model has no binarized layer");
  return num / den;
}

}  // namespace

double model_qe(nn::Model& model) { return weighted_mean(layer_stats(model), &LayerStats::qe); }
double model_b_hat(nn::Model& model) { return weighted_mean(layer_stats(model), &LayerStats::b_hat); }

nlohmann::json RunRecord::to_json() const {
  nlohmann::json ep = nlohmann::json::array();
  for (const auto& e : epochs) {
    ep.push_back({{"epoch", e.epoch},
                  {"lr", e.lr},
                  {"train_loss", e.train_loss},
                  {"train_accuracy", e.train_accuracy},
                  {"val_top1", e.val_top1},
                  {"val_top5", e.val_top5},
                  {"seconds", e.seconds}});
  }
  nlohmann::json ls = nlohmann::json::array();
  for (const auto& l : layers) {
    ls.push_back({{"layer", l.index}, {"weights", l.weights}, {"qe", l.qe}, {"b_hat", l.b_hat}});
  }
  return {{"stage", stage},
          {"method", method},
          {"omega0", omega0},
          {"seed", seed},
          {"epochs", ep},
          {"layers", ls},
          {"start_qe", start_qe},
          {"final_qe", final_qe},
          {"final_b_hat", final_b_hat},
          {"final_eval",
           {{"top1", final_eval.top1}, {"top5", final_eval.top5}, {"loss", final_eval.loss}, {"count", final_eval.count}}},
          {"gradient_bound", {{"checks", gradient_bound.checks}, {"max_ratio", gradient_bound.max_ratio}}},
          {"config", config}};
}

void RunRecord::write_epochs_csv(std::ostream& os) const {
  const auto old = os.precision(10);
  os << "epoch,lr,train_loss,train_accuracy,val_top1,val_top5\n";
  for (const auto& e : epochs) {
    os << e.epoch << ',' << e.lr << ',' << e.train_loss << ',' << e.train_accuracy << ',' << e.val_top1 << ','
       << e.val_top5 << '\n';
  }
  os.precision(old);
}

void RunRecord::write_layers_csv(std::ostream& os) const {
  const auto old = os.precision(10);
  os << "layer,weights,qe,b_hat\n";
  for (const auto& l : layers) os << l.index << ',' << l.weights << ',' << l.qe << ',' << l.b_hat << '\n';
  os.precision(old);
}

// ---- stages --------------------------------------------------------------

TrainResult train_stage1(const TrainConfig& cfg, const nn::ModelSpec& spec, const QuantSpec& quant,
                         const data::Dataset& train, const data::Dataset* val, const EpochCallback& on_epoch) {
  if (cfg.stage != 1) throw std::invalid_argument("train_stage1: config is for stage " + std::to_string(cfg.stage));
  nn::Model model = nn::build_model(spec, quant, cfg.seed);
  return run(cfg, std::move(model), nn::Stage::stage1, train, val, on_epoch, base_record(cfg, spec, quant));
}

TrainResult train_stage2(const TrainConfig& cfg, const Checkpoint& warm, const nn::ModelSpec& spec,
                         const QuantSpec& quant, const data::Dataset& train, const data::Dataset* val,
                         const EpochCallback& on_epoch) {
  if (cfg.stage != 2) throw std::invalid_argument("train_stage2: config is for stage " + std::to_string(cfg.stage));
  if (!warm.metadata.contains("model") || !warm.metadata.contains("quant")) {
    throw std::invalid_argument("train_stage2: warm checkpoint does not record its architecture");
  }
  if (warm.metadata.at("model") != spec.to_json()) {
    throw std::invalid_argument("train_stage2: architecture mismatch: warm checkpoint has " +
                                warm.metadata.at("model").dump() + ", requested " + spec.to_json().dump());
  }
  const QuantSpec warm_quant = nn::quant_from_json(warm.metadata.at("quant"));
  if (warm_quant.method != quant.method || warm_quant.omega0 != quant.omega0) {
    throw std::invalid_argument("train_stage2: warm checkpoint was trained with " + to_string(warm_quant.method) +
                                " at omega0 " + std::to_string(warm_quant.omega0) + ", requested " +
                                to_string(quant.method) + " at omega0 " + std::to_string(quant.omega0));
  }
  nn::Model model(spec, quant, cfg.seed);
  model.load_state(warm);
  RunRecord record = base_record(cfg, spec, quant);
  record.start_qe = model_qe(model);
  return run(cfg, std::move(model), nn::Stage::stage2, train, val, on_epoch, std::move(record));
}

// ---- ablation ------------------------------------------------------------

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

AblationResult ablate_omega(const AblationConfig& cfg, const nn::ModelSpec& spec, ScalingMode scaling,
                            const data::Dataset& train, const data::Dataset& val, const AblationCallback& on_row) {
  if (cfg.omegas.empty() || cfg.seeds.empty()) throw std::invalid_argument("ablate_omega: empty grid");
  AblationResult result;
  for (double omega : cfg.omegas) {
    QuantSpec quant{QuantMethod::biper, omega, scaling};
    quant.validate();
    AblationSummary summary;
    summary.omega0 = omega;
    std::vector<double> top1, qe, b, top1_s2;
    for (auto seed : cfg.seeds) {
      TrainConfig s1 = cfg.stage1;
      s1.seed = seed;
      TrainResult r1 = train_stage1(s1, spec, quant, train, &val);
      AblationRow row;
      row.omega0 = omega;
      row.seed = seed;
      row.stage1_top1 = r1.record.final_eval.top1;
      row.stage1_qe = r1.record.final_qe;
      row.stage1_b_hat = r1.record.final_b_hat;
      if (cfg.run_stage2) {
        TrainConfig s2 = cfg.stage2;
        s2.seed = seed;
        TrainResult r2 = train_stage2(s2, r1.model.to_checkpoint(), spec, quant, train, &val);
        row.stage2_top1 = r2.record.final_eval.top1;
        row.stage2_qe = r2.record.final_qe;
        top1_s2.push_back(row.stage2_top1);
      }
      top1.push_back(row.stage1_top1);
      qe.push_back(row.stage1_qe);
      b.push_back(row.stage1_b_hat);
      result.rows.push_back(row);
      if (on_row) on_row(row, r1.model);
    }
    summary.stage1_top1 = median(top1);
    summary.stage1_qe = median(qe);
    summary.stage1_b_hat = median(b);
    if (!top1_s2.empty()) summary.stage2_top1 = median(top1_s2);
    result.summary.push_back(summary);
  }
  return result;
}

void write_ablation_csv(std::ostream& os, const AblationResult& result, const std::string& panel) {
  double AblationRow::*field = nullptr;
  if (panel == "precision") field = &AblationRow::stage1_top1;
  else if (panel == "qe") field = &AblationRow::stage1_qe;
  else if (panel == "b") field = &AblationRow::stage1_b_hat;
  else throw std::invalid_argument("write_ablation_csv: unknown panel '" + panel + "'");

  std::vector<std::uint64_t> seeds;
  for (const auto& r : result.rows)
    if (std::find(seeds.begin(), seeds.end(), r.seed) == seeds.end()) seeds.push_back(r.seed);
  const bool stage2 = panel == "precision" &&
                      std::any_of(result.rows.begin(), result.rows.end(), [](const auto& r) { return r.stage2_top1 >= 0; });

  const auto old = os.precision(10);
  os << "omega0";
  for (auto s : seeds) os << ",seed_" << s;
  os << ",median";
  if (stage2) os << ",stage2_median";
  os << '\n';
  for (const auto& s : result.summary) {
    os << s.omega0;
    for (auto seed : seeds) {
      auto it = std::find_if(result.rows.begin(), result.rows.end(),
                             [&](const auto& r) { return r.omega0 == s.omega0 && r.seed == seed; });
      os << ',';
      if (it != result.rows.end()) os << (*it).*field;
    }
    os << ',' << (panel == "precision" ? s.stage1_top1 : panel == "qe" ? s.stage1_qe : s.stage1_b_hat);
    if (stage2) os << ',' << s.stage2_top1;
    os << '\n';
  }
  os.precision(old);
}

}  // namespace biper::train
