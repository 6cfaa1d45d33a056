#include "sepdrop/run_config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

namespace sepdrop {

std::string_view to_string(DatasetKind d) {
  switch (d) {
    case DatasetKind::Cifar10: return "cifar10";
    case DatasetKind::Cifar100: return "cifar100";
    case DatasetKind::Synthetic: return "synthetic";
  }
  return "?";
}

DatasetKind parse_dataset(std::string_view name) {
  if (name == "cifar10") return DatasetKind::Cifar10;
  if (name == "cifar100") return DatasetKind::Cifar100;
  if (name == "synthetic") return DatasetKind::Synthetic;
  throw ConfigError("unknown dataset '" + std::string(name) + "' (expected cifar10, cifar100 or synthetic)");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream is(value);
  T v{};
  is >> v;
  if (is.fail() || !is.eof()) throw ConfigError(key + ": cannot parse '" + value + "' as a number");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true" || value == "yes" || value == "on") return true;
  if (value == "0" || value == "false" || value == "no" || value == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + value + "'");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
  std::vector<int> out;
  if (trim(value).empty()) return out;
  std::istringstream is(value);
  std::string item;
  while (std::getline(is, item, ',')) out.push_back(parse_number<int>(key, trim(item)));
  return out;
}

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  // shortest text that round-trips
  for (int p = 1; p <= 17; ++p) {
    std::ostringstream t;
    t << std::setprecision(p) << v;
    if (std::stod(t.str()) == v) return t.str();
  }
  return os.str();
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field number(T RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& k, const std::string& v) { c.*member = parse_number<T>(k, v); },
          [member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return format_double(c.*member);
            else return std::to_string(c.*member);
          }};
}

Field flag(bool RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& k, const std::string& v) { c.*member = parse_bool(k, v); },
          [member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

Field text(std::string RunConfig::*member) {
  return {[member](RunConfig& c, const std::string&, const std::string& v) { c.*member = v; },
          [member](const RunConfig& c) { return c.*member; }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"variant",
       {[](RunConfig& c, const std::string&, const std::string& v) { c.variant = parse_variant(v); },
        [](const RunConfig& c) { return std::string(to_string(c.variant)); }}},
      {"depth", number(&RunConfig::depth)},
      {"alpha",
       {[](RunConfig& c, const std::string& k, const std::string& v) {
          if (v == "auto") c.alpha.reset();
          else c.alpha = parse_number<double>(k, v);
        },
        [](const RunConfig& c) { return c.alpha ? format_double(*c.alpha) : std::string("auto"); }}},
      {"p_last", number(&RunConfig::p_last)},
      {"base_width", number(&RunConfig::base_width)},
      {"epochs", number(&RunConfig::epochs)},
      {"lr", number(&RunConfig::lr)},
      {"lr_decay", number(&RunConfig::lr_decay)},
      {"milestones",
       {[](RunConfig& c, const std::string& k, const std::string& v) {
          if (v == "auto") c.milestones.reset();
          else c.milestones = parse_int_list(k, v);
        },
        [](const RunConfig& c) {
          if (!c.milestones) return std::string("auto");
          std::string s;
          for (std::size_t i = 0; i < c.milestones->size(); ++i) s += (i ? "," : "") + std::to_string((*c.milestones)[i]);
          return s;
        }}},
      {"momentum", number(&RunConfig::momentum)},
      {"weight_decay", number(&RunConfig::weight_decay)},
      {"decay_bn_affine", flag(&RunConfig::decay_bn_affine)},
      {"batch_size", number(&RunConfig::batch_size)},
      {"seed", number(&RunConfig::seed)},
      {"augment", flag(&RunConfig::augment)},
      {"models", number(&RunConfig::models)},
      {"sync",
       {[](RunConfig& c, const std::string& k, const std::string& v) {
          if (v == "gradient") c.sync = SyncPolicy::GradientAveraging;
          else if (v == "periodic") c.sync = SyncPolicy::PeriodicAveraging;
          else throw ConfigError(k + ": expected gradient or periodic, got '" + v + "'");
        },
        [](const RunConfig& c) { return std::string(c.sync == SyncPolicy::GradientAveraging ? "gradient" : "periodic"); }}},
      {"sync_period", number(&RunConfig::sync_period)},
      {"concurrent", flag(&RunConfig::concurrent)},
      {"dataset",
       {[](RunConfig& c, const std::string&, const std::string& v) { c.dataset = parse_dataset(v); },
        [](const RunConfig& c) { return std::string(to_string(c.dataset)); }}},
      {"data_dir", text(&RunConfig::data_dir)},
      {"synthetic_classes", number(&RunConfig::synthetic_classes)},
      {"synthetic_train", number(&RunConfig::synthetic_train)},
      {"synthetic_test", number(&RunConfig::synthetic_test)},
      {"synthetic_signal", number(&RunConfig::synthetic_signal)},
      {"synthetic_noise", number(&RunConfig::synthetic_noise)},
      {"image_size", number(&RunConfig::image_size)},
      {"out_dir", text(&RunConfig::out_dir)},
      {"checkpoint_every", number(&RunConfig::checkpoint_every)},
      {"eval_every", number(&RunConfig::eval_every)},
      {"resume", text(&RunConfig::resume)},
      {"checkpoint", text(&RunConfig::checkpoint)},
      {"format", text(&RunConfig::format)},
      {"gradcheck_coordinates", number(&RunConfig::gradcheck_coordinates)},
  };
  return table;
}

}  // namespace

int RunConfig::num_classes() const {
  switch (dataset) {
    case DatasetKind::Cifar10: return 10;
    case DatasetKind::Cifar100: return 100;
    case DatasetKind::Synthetic: return synthetic_classes;
  }
  return synthetic_classes;
}

NetworkSpec RunConfig::network_spec() const {
  NetworkSpec spec;
  spec.variant = variant;
  spec.depth = depth;
  spec.alpha = alpha.value_or(0.0);
  spec.p_last = p_last;
  spec.num_classes = num_classes();
  spec.base_width = base_width;
  spec.image_size = dataset == DatasetKind::Synthetic ? image_size : 32;
  return spec;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.initial_lr = lr;
  t.lr_decay_factor = lr_decay;
  t.milestones = milestones.value_or(std::vector<int>{});
  t.total_epochs = epochs;
  t.momentum = momentum;
  t.weight_decay = weight_decay;
  t.decay_bn_affine = decay_bn_affine;
  t.batch_size = batch_size;
  t.seed = seed;
  t.model_count = models;
  t.sync = sync;
  t.sync_period = sync_period;
  t.augment = augment;
  t.concurrent_replicas = concurrent;
  t.network = network_spec();
  return t;
}

const std::vector<std::string>& run_config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, f] : fields()) k.push_back(name);
    return k;
  }();
  return keys;
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& [name, f] : fields())
    if (name == key) return f.set(cfg, key, trim(value));
  throw ConfigError("unknown config key '" + key + "'");
}

std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream is(text);
  std::string line;
  int number = 0;
  while (std::getline(is, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || trim(line.substr(0, eq)).empty())
      throw ConfigError("line " + std::to_string(number) + ": expected key=value, got '" + line + "'");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig cfg;
  for (const auto& [k, v] : parse_key_values(ss.str())) {
    try {
      apply_setting(cfg, k, v);
    } catch (const ConfigError& e) {
      throw ConfigError(path + ": " + e.what());
    }
  }
  return cfg;
}

void resolve(RunConfig& cfg) {
  validate_depth(cfg.depth);
  if (!cfg.alpha) cfg.alpha = is_pyramidal(cfg.variant) ? alpha_for_depth(cfg.depth) : 0.0;
  if (cfg.epochs < 1) throw ConfigError("epochs must be at least 1");
  if (!cfg.milestones) {
    std::vector<int> m;
    for (int e : {cfg.epochs / 2, cfg.epochs * 3 / 4})
      if (e > 0 && e < cfg.epochs && (m.empty() || m.back() != e)) m.push_back(e);
    cfg.milestones = m;
  }
  if (cfg.dataset == DatasetKind::Synthetic) {
    if (cfg.synthetic_classes < 2) throw ConfigError("synthetic_classes must be at least 2");
    if (cfg.synthetic_train < 1) throw ConfigError("synthetic_train must be positive");
    if (cfg.synthetic_test < 0) throw ConfigError("synthetic_test must be non-negative");
    if (!(cfg.synthetic_noise >= 0.0)) throw ConfigError("synthetic_noise must be non-negative");
  }
  if (cfg.checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
  if (cfg.eval_every < 0) throw ConfigError("eval_every must be non-negative");
  if (cfg.format != "text" && cfg.format != "csv") throw ConfigError("format must be text or csv");
  if (cfg.gradcheck_coordinates < 0) throw ConfigError("gradcheck_coordinates must be non-negative");
  cfg.train_config().validate();
}

std::string to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [name, f] : fields()) out += name + "=" + f.get(cfg) + "\n";
  return out;
}

}  // namespace sepdrop
