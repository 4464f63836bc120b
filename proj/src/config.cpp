#include "biper/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace biper {

namespace pt = boost::property_tree;

namespace {

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::set<std::string> stage = {"epochs",   "batch_size", "lr",           "weight_decay",
                                              "momentum", "scheduler",  "augment_crop", "augment_flip"};
  static const std::map<std::string, std::set<std::string>> keys = {
      {"data",
       {"dataset", "dir", "train_limit", "val_limit", "synth_train", "synth_val", "synth_noise", "normalize"}},
      {"model", {"architecture", "width", "hidden", "blocks_per_stage", "binarize_activations"}},
      {"quant", {"method", "omega0", "scaling"}},
      {"stage1", stage},
      {"stage2", stage},
      {"run", {"seed", "warm"}},
  };
  return keys;
}

template <class T>
void read(const pt::ptree& tree, const std::string& key, T& out) {
  const auto v = tree.get_optional<std::string>(key);
  if (!v) return;
  std::istringstream is(*v);
  T parsed{};
  if constexpr (std::is_same_v<T, bool>) {
    const std::string s = *v;
    if (s == "true" || s == "1" || s == "yes" || s == "on") parsed = true;
    else if (s == "false" || s == "0" || s == "no" || s == "off") parsed = false;
    else throw ConfigError("config: " + key + " = '" + s + "' is not a boolean");
  } else {
    is >> parsed;
    if (!is || !(is >> std::ws).eof()) throw ConfigError("config: " + key + " = '" + *v + "' is not a valid value");
    if constexpr (std::is_unsigned_v<T>) {
      if (v->find('-') != std::string::npos) throw ConfigError("config: " + key + " must be non-negative");
    }
  }
  out = parsed;
}

std::vector<std::size_t> parse_widths(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    try {
      const auto v = std::stoul(item, &pos);
      if (item.find('-') != std::string::npos) throw std::invalid_argument("negative");
      while (pos < item.size() && std::isspace(static_cast<unsigned char>(item[pos]))) ++pos;
      if (pos != item.size()) throw std::invalid_argument("trailing");
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("config: model.hidden entry '" + item + "' is not a width");
    }
  }
  return out;
}

void read_stage(const pt::ptree& tree, const std::string& sec, train::TrainConfig& s) {
  read(tree, sec + ".epochs", s.epochs);
  read(tree, sec + ".batch_size", s.batch_size);
  read(tree, sec + ".lr", s.lr0);
  read(tree, sec + ".weight_decay", s.weight_decay);
  read(tree, sec + ".momentum", s.momentum);
  read(tree, sec + ".augment_crop", s.augment_crop);
  read(tree, sec + ".augment_flip", s.augment_flip);
  if (auto v = tree.get_optional<std::string>(sec + ".scheduler")) {
    if (*v == "cosine") s.scheduler = train::Scheduler::cosine;
    else if (*v == "constant") s.scheduler = train::Scheduler::constant;
    else throw ConfigError("config: " + sec + ".scheduler must be cosine or constant");
  }
}

void write_stage(std::ostream& os, const std::string& sec, const train::TrainConfig& s) {
  os << '[' << sec << "]\n"
     << "epochs = " << s.epochs << '\n'
     << "batch_size = " << s.batch_size << '\n'
     << "lr = " << s.lr0 << '\n'
     << "weight_decay = " << s.weight_decay << '\n'
     << "momentum = " << s.momentum << '\n'
     << "scheduler = " << (s.scheduler == train::Scheduler::cosine ? "cosine" : "constant") << '\n'
     << "augment_crop = " << (s.augment_crop ? "true" : "false") << '\n'
     << "augment_flip = " << (s.augment_flip ? "true" : "false") << "\n\n";
}

ExperimentConfig from_tree(const pt::ptree& tree) {
  const auto& keys = known_keys();
  for (const auto& [section, body] : tree) {
    auto it = keys.find(section);
    if (it == keys.end()) throw ConfigError("config: unknown section [" + section + "]");
    for (const auto& [key, value] : body) {
      (void)value;
      if (!it->second.count(key)) throw ConfigError("config: unknown key " + section + "." + key);
    }
  }

  ExperimentConfig c;
  read(tree, "data.dataset", c.data.dataset);
  if (auto dir = tree.get_optional<std::string>("data.dir")) c.data.dir = *dir;
  read(tree, "data.train_limit", c.data.train_limit);
  read(tree, "data.val_limit", c.data.val_limit);
  read(tree, "data.synth_train", c.data.synth_train);
  read(tree, "data.synth_val", c.data.synth_val);
  read(tree, "data.synth_noise", c.data.synth_noise);
  read(tree, "data.normalize", c.data.normalize);

  try {
    if (auto a = tree.get_optional<std::string>("model.architecture")) c.model.arch = nn::parse_architecture(*a);
    if (auto m = tree.get_optional<std::string>("quant.method")) c.quant.method = parse_quant_method(*m);
    if (auto s = tree.get_optional<std::string>("quant.scaling")) c.quant.scaling = parse_scaling_mode(*s);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  read(tree, "model.width", c.model.width);
  read(tree, "model.blocks_per_stage", c.model.blocks_per_stage);
  read(tree, "model.binarize_activations", c.model.binarize_activations);
  if (auto h = tree.get_optional<std::string>("model.hidden")) c.model.hidden = parse_widths(*h);
  read(tree, "quant.omega0", c.quant.omega0);

  read_stage(tree, "stage1", c.stage1);
  read_stage(tree, "stage2", c.stage2);
  std::uint64_t seed = 0;
  read(tree, "run.seed", seed);
  c.set_seed(seed);
  if (auto w = tree.get_optional<std::string>("run.warm")) c.warm = *w;
  c.apply_dataset_shape();
  c.validate();
  return c;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_string(ss.str());
}

ExperimentConfig ExperimentConfig::from_string(const std::string& ini) {
  pt::ptree tree;
  std::istringstream is(ini);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config: line " + std::to_string(e.line()) + ": " + e.message());
  }
  return from_tree(tree);
}

std::string ExperimentConfig::to_ini() const {
  std::ostringstream os;
  os.precision(17);
  os << "[data]\n"
     << "dataset = " << data.dataset << '\n'
     << "dir = " << data.dir.string() << '\n'
     << "train_limit = " << data.train_limit << '\n'
     << "val_limit = " << data.val_limit << '\n'
     << "synth_train = " << data.synth_train << '\n'
     << "synth_val = " << data.synth_val << '\n'
     << "synth_noise = " << data.synth_noise << '\n'
     << "normalize = " << (data.normalize ? "true" : "false") << "\n\n";
  os << "[model]\n"
     << "architecture = " << nn::to_string(model.arch) << '\n'
     << "width = " << model.width << '\n'
     << "hidden = ";
  for (std::size_t i = 0; i < model.hidden.size(); ++i) os << (i ? "," : "") << model.hidden[i];
  os << '\n'
     << "blocks_per_stage = " << model.blocks_per_stage << '\n'
     << "binarize_activations = " << (model.binarize_activations ? "true" : "false") << "\n\n";
  os << "[quant]\n"
     << "method = " << to_string(quant.method) << '\n'
     << "omega0 = " << quant.omega0 << '\n'
     << "scaling = " << to_string(quant.scaling) << "\n\n";
  write_stage(os, "stage1", stage1);
  write_stage(os, "stage2", stage2);
  os << "[run]\nseed = " << seed << '\n';
  if (!warm.empty()) os << "warm = " << warm.string() << '\n';
  return os.str();
}

void ExperimentConfig::set_seed(std::uint64_t s) {
  seed = s;
  stage1.seed = s;
  stage2.seed = s;
}

void ExperimentConfig::apply_dataset_shape() {
  if (data.dataset == "mnist") {
    model.input_shape = {1, 28, 28};
    model.num_classes = 10;
  } else if (data.dataset == "cifar10") {
    model.input_shape = {3, 32, 32};
    model.num_classes = 10;
  } else if (data.dataset == "two-moons") {
    model.input_shape = {2};
    model.num_classes = 2;
  } else {
    throw ConfigError("config: unknown dataset '" + data.dataset + "' (expected mnist, cifar10, two-moons)");
  }
}

void ExperimentConfig::validate() const {
  try {
    model.validate();
    quant.validate();
    stage1.validate();
    stage2.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (stage1.stage != 1 || stage2.stage != 2) throw ConfigError("config: stage sections out of order");
  if (data.dataset == "two-moons" && model.arch != nn::Architecture::mlp) {
    throw ConfigError("config: two-moons needs the mlp architecture");
  }
  if (data.dataset == "two-moons" && (data.synth_train < 2 || data.synth_train % 2 || data.synth_val % 2)) {
    throw ConfigError("config: two-moons sizes must be even and at least 2");
  }
}

DataSplits load_datasets(const DataConfig& cfg, std::uint64_t seed) {
  DataSplits s;
  if (cfg.dataset == "mnist") {
    s.train = data::load_mnist(cfg.dir, "train");
    s.val = data::load_mnist(cfg.dir, "test");
  } else if (cfg.dataset == "cifar10") {
    s.train = data::load_cifar10(cfg.dir, "train");
    s.val = data::load_cifar10(cfg.dir, "test");
  } else if (cfg.dataset == "two-moons") {
    s.train = data::synth_two_moons(cfg.synth_train, cfg.synth_noise, seed);
    s.val = data::synth_two_moons(cfg.synth_val, cfg.synth_noise, seed ^ 0x5eed5eed5eedull);
  } else {
    throw ConfigError("unknown dataset '" + cfg.dataset + "'");
  }
  if (cfg.train_limit) s.train = data::balanced_prefix(s.train, cfg.train_limit / s.train.classes);
  if (cfg.val_limit) s.val = data::balanced_prefix(s.val, cfg.val_limit / s.val.classes);
  if (cfg.normalize) {
    const auto norm = data::fit_normalization(s.train);
    data::apply_normalization(s.train, norm);
    data::apply_normalization(s.val, norm);
  }
  return s;
}

}  // namespace biper
