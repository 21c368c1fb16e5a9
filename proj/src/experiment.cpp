#include "owb/experiment.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace owb {

namespace pt = boost::property_tree;

namespace {

// --- Config parsing ----------------------------------------------------------------

/// Typed access to one INI section; unknown keys are rejected on finish().
class Section {
 public:
  Section(std::string name, const pt::ptree& tree) : name_(std::move(name)), tree_(tree) {}

  bool has(const std::string& key) const { return tree_.find(key) != tree_.not_found(); }

  std::string str(const std::string& key, const std::string& fallback) {
    used_.insert(key);
    auto it = tree_.find(key);
    return it == tree_.not_found() ? fallback : it->second.data();
  }

  std::string required(const std::string& key) {
    if (!has(key)) throw ConfigError("[" + name_ + "] is missing '" + key + "'");
    return str(key, "");
  }

  template <class T>
  T num(const std::string& key, T fallback) {
    if (!has(key)) {
      used_.insert(key);
      return fallback;
    }
    const std::string v = str(key, "");
    std::istringstream in(v);
    T out{};
    in >> out;
    if (!in || !(in >> std::ws).eof()) throw ConfigError("[" + name_ + "] " + key + " = '" + v + "' is not a number");
    return out;
  }

  bool flag(const std::string& key, bool fallback) {
    if (!has(key)) {
      used_.insert(key);
      return fallback;
    }
    const std::string v = str(key, "");
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("[" + name_ + "] " + key + " = '" + v + "' is not a boolean");
  }

  std::vector<std::string> list(const std::string& key) {
    std::vector<std::string> out;
    std::istringstream in(str(key, ""));
    std::string item;
    while (std::getline(in, item, ',')) {
      item.erase(0, item.find_first_not_of(" \t"));
      item.erase(item.find_last_not_of(" \t") + 1);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  template <class F>
  auto parsed(const std::string& key, const std::string& fallback, F&& parse) {
    const std::string v = str(key, fallback);
    try {
      return parse(v);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("[" + name_ + "] " + key + ": " + e.what());
    }
  }

  void finish() const {
    for (const auto& [k, v] : tree_) {
      if (!used_.count(k)) throw ConfigError("[" + name_ + "] unknown key '" + k + "'");
    }
  }

  const std::string& name() const { return name_; }

 private:
  std::string name_;
  const pt::ptree& tree_;
  std::set<std::string> used_;
};

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  if (p.empty()) return {};
  std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

Shape parse_shape(const std::string& text) {
  Shape s;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) s.push_back(std::stol(item));
  if (s.empty()) throw std::invalid_argument("empty shape");
  return s;
}

void parse_train(Section& s, TrainConfig& t, const std::string& prefix) {
  t.epochs = s.num(prefix + "epochs", t.epochs);
  t.batch_size = s.num(prefix + "batch_size", t.batch_size);
  t.learning_rate = s.num(prefix + "learning_rate", t.learning_rate);
  t.optimizer = s.parsed(prefix + "optimizer", std::string(to_string(t.optimizer)), parse_optimizer);
  t.shuffle = s.flag(prefix + "shuffle", t.shuffle);
}

DataSpec parse_data(Section& s, const std::filesystem::path& base, std::uint64_t default_seed) {
  DataSpec d;
  d.kind = s.required("kind");
  d.images = resolve(base, s.str("images", ""));
  d.labels = resolve(base, s.str("labels", ""));
  d.manifest = resolve(base, s.str("manifest", ""));
  for (const auto& c : s.list("classes")) {
    d.classes.push_back(s.parsed("classes", c, [&](const std::string&) { return parse_shape_kind(c); }));
  }
  if (s.has("shape")) d.shape = s.parsed("shape", "", parse_shape);
  d.count = s.num<std::size_t>("count", 0);
  d.mean = s.num("mean", d.mean);
  d.stddev = s.num("stddev", d.stddev);
  d.seed = s.num<std::uint64_t>("seed", default_seed);
  d.eval_count = s.num<std::size_t>("eval_count", d.eval_count);
  return d;
}

PerturbationConstraint parse_constraint(Section& s, double& given, std::string& scale) {
  PerturbationConstraint c;
  c.norm = s.parsed("norm", "linf", parse_norm);
  given = s.num("epsilon", 0.0);
  if (!s.has("epsilon")) throw ConfigError("[" + s.name() + "] is missing 'epsilon'");
  scale = s.str("epsilon_scale", "");
  if (scale == "unit") {
    c.epsilon = given;
  } else if (scale == "byte") {
    c.epsilon = given / 255.0;
  } else {
    throw ConfigError("[" + s.name() + "] epsilon_scale must be 'unit' ([0,1]) or 'byte' ([0,255])");
  }
  return c;
}

// FNV-1a over the label, so derived seeds do not depend on the standard library.
std::uint64_t derive(std::uint64_t master, std::string_view label) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : label) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
  return master ^ h;
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& text, const std::filesystem::path& base_dir,
                                         std::optional<std::uint64_t> seed_override) {
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  ExperimentConfig cfg;
  const pt::ptree empty;
  auto section = [&](const std::string& name) -> const pt::ptree& {
    auto it = tree.find(name);
    return it == tree.not_found() ? empty : it->second;
  };

  {
    Section s("experiment", section("experiment"));
    cfg.name = s.str("name", cfg.name);
    cfg.seed = s.num<std::uint64_t>("seed", cfg.seed);
    if (seed_override) cfg.seed = *seed_override;
    cfg.output = resolve(base_dir, s.str("output", cfg.output.string()));
    cfg.train_count = s.num<std::size_t>("train_count", cfg.train_count);
    cfg.split_seed = s.num<std::uint64_t>("split_seed", cfg.seed);
    cfg.calibration_count = s.num<std::size_t>("calibration_count", cfg.calibration_count);
    if (s.has("formats")) {
      cfg.formats.clear();
      for (const auto& f : s.list("formats")) {
        if (f == "csv") cfg.formats.push_back(ReportFormat::csv);
        else if (f == "json") cfg.formats.push_back(ReportFormat::json);
        else throw ConfigError("[experiment] unknown report format '" + f + "'");
      }
    }
    s.finish();
  }
  {
    Section s("model", section("model"));
    ModelSpec& m = cfg.model;
    m.name = s.str("name", m.name);
    m.checkpoint = resolve(base_dir, s.str("checkpoint", ""));
    m.arch = s.str("arch", m.arch);
    m.seed = s.num<std::uint64_t>("seed", derive(cfg.seed, "model"));
    m.train.seed = s.num<std::uint64_t>("train_seed", derive(cfg.seed, "train"));
    parse_train(s, m.train, "");
    m.fine_tune_epochs = s.num("fine_tune_epochs", m.fine_tune_epochs);
    m.fine_tune_lr = s.num("fine_tune_lr", m.fine_tune_lr);
    m.training = s.str("training", m.training);
    m.robust.alpha = s.num("alpha", m.robust.alpha);
    m.robust.alp_weight = s.num("alp_weight", m.robust.alp_weight);
    if (s.has("epsilon")) {
      double given = 0;
      std::string scale;
      const auto c = parse_constraint(s, given, scale);
      m.robust.inner_attack = RobustTrainConfig::inner_attack_config(c, s.num("inner_steps", 10));
    } else {
      s.str("epsilon_scale", "");
      s.num("inner_steps", 10);
    }
    m.background_sources = s.list("background_sources");
    m.robust.background.samples_per_source =
        s.num<std::size_t>("samples_per_source", m.robust.background.samples_per_source);
    m.robust.background.one_class_per_source = s.flag("one_class_per_source", true);
    m.robust.background.mix_alpha = s.num("mix_alpha", m.robust.background.mix_alpha);
    m.calibration_proxy = s.str("calibration_proxy", "");
    m.beta = s.num("beta", m.beta);
    s.finish();
  }
  {
    Section s("in", section("in"));
    if (!section("in").empty()) {
      cfg.in = parse_data(s, base_dir, derive(cfg.seed, "in"));
      cfg.in.name = s.str("name", cfg.in.kind == "shapes" ? "shapes" : "mnist");
      s.finish();
    }
  }
  for (const auto& [key, sub] : tree) {
    const auto colon = key.find(':');
    const std::string head = key.substr(0, colon);
    const std::string name = colon == std::string::npos ? "" : key.substr(colon + 1);
    if (colon == std::string::npos) {
      if (head != "experiment" && head != "model" && head != "in") throw ConfigError("unknown section [" + key + "]");
      continue;
    }
    if (name.empty()) throw ConfigError("section [" + key + "] needs a name");
    Section s(key, sub);
    if (head == "ood") {
      DataSpec d = parse_data(s, base_dir, derive(cfg.seed, key));
      d.name = name;
      cfg.ood.push_back(std::move(d));
    } else if (head == "attack") {
      AttackSpec a;
      a.name = name;
      a.type = s.str("type", a.type);
      AttackConfig& c = a.config;
      c.loss = s.parsed("loss", "xent", parse_loss_kind);
      c.kappa = s.num("kappa", c.kappa);
      c.constraint = parse_constraint(s, a.epsilon_given, a.epsilon_scale);
      c.step_size = s.num("step_size", c.step_size);
      c.max_iters = s.num("max_iters", c.max_iters);
      c.plateau_patience = s.num("plateau_patience", c.plateau_patience);
      c.plateau_min_delta = s.num("plateau_min_delta", c.plateau_min_delta);
      c.targeting = s.parsed("targeting", "rand", parse_targeting);
      c.seed = s.num<std::uint64_t>("seed", derive(cfg.seed, key));
      a.samples_per_step = s.num("samples_per_step", a.samples_per_step);
      a.eval_draws = s.num("eval_draws", a.eval_draws);
      a.blackbox.group_size = s.num("group_size", a.blackbox.group_size);
      a.blackbox.h = s.num("fd_step", a.blackbox.h);
      if (s.has("lambdas")) {
        a.lambdas.clear();
        for (const auto& v : s.list("lambdas")) {
          a.lambdas.push_back(s.parsed("lambdas", v, [](const std::string& t) { return std::stod(t); }));
        }
      }
      a.magnet.attack_reformer = s.flag("attack_reformer", a.magnet.attack_reformer);
      a.magnet.pixel_shift = s.num("pixel_shift", a.magnet.pixel_shift);
      a.bpda_weight = s.num("squeeze_weight", a.bpda_weight);
      a.detector = s.str("detector", "");
      cfg.attacks.push_back(std::move(a));
    } else if (head == "detector") {
      DetectorSpec d;
      d.name = name;
      d.type = s.str("type", d.type);
      d.tpr = s.num("tpr", d.tpr);
      d.fpr = s.num("fpr", d.fpr);
      d.odin.temperature = s.num("temperature", d.odin.temperature);
      d.odin.epsilon = s.num("preprocess_epsilon", d.odin.epsilon);
      d.tune_odin = s.flag("tune", false);
      d.tune_source = s.str("tune_source", "");
      d.squeezers.bit_depth = s.num("bit_depth", d.squeezers.bit_depth);
      d.squeezers.median_kernel = s.num("median_kernel", d.squeezers.median_kernel);
      if (s.has("squeezers")) {
        d.squeezers.enabled.clear();
        for (const auto& q : s.list("squeezers")) {
          d.squeezers.enabled.push_back(s.parsed("squeezers", q, [&](const std::string&) { return parse_squeezer(q); }));
        }
      }
      d.autoencoder = resolve(base_dir, s.str("autoencoder", ""));
      d.norm = s.parsed("norm", "l1", parse_recon_norm);
      d.noise_level = s.num("noise_level", d.noise_level);
      d.ae_train.seed = s.num<std::uint64_t>("seed", derive(cfg.seed, key));
      d.ae_train.epochs = 3;
      d.ae_train.learning_rate = 1e-3;
      parse_train(s, d.ae_train, "ae_");
      cfg.detectors.push_back(std::move(d));
    } else {
      throw ConfigError("unknown section [" + key + "]");
    }
    s.finish();
  }
  return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_experiment_config(buf.str(), path.parent_path().empty() ? "." : path.parent_path(), seed_override);
}

void ExperimentConfig::validate() const {
  auto need_file = [](const std::filesystem::path& p, const std::string& what) {
    if (p.empty()) throw ConfigError(what + ": path not set");
    if (!std::filesystem::is_regular_file(p)) throw ConfigError(what + ": no such file " + p.string());
  };
  auto check_data = [&](const DataSpec& d, bool labeled) {
    const std::string what = labeled ? "[in]" : "[ood:" + d.name + "]";
    if (d.kind == "idx") {
      need_file(d.images, what + " images");
      if (labeled) need_file(d.labels, what + " labels");
    } else if (d.kind == "manifest") {
      need_file(d.manifest, what + " manifest");
    } else if (d.kind == "shapes") {
      if (d.classes.empty()) throw ConfigError(what + ": shapes need 'classes'");
      if (d.count == 0) throw ConfigError(what + ": shapes need 'count'");
    } else if (d.kind == "gaussian") {
      if (labeled) throw ConfigError("[in]: gaussian noise cannot be in-distribution data");
      if (d.count == 0) throw ConfigError(what + ": gaussian needs 'count'");
      if (!(d.stddev > 0)) throw ConfigError(what + ": stddev must be > 0");
    } else {
      throw ConfigError(what + ": unknown kind '" + d.kind + "'");
    }
    if (d.eval_count == 0) throw ConfigError(what + ": eval_count must be >= 1");
  };
  if (in.kind.empty()) throw ConfigError("missing [in] section");
  check_data(in, true);
  std::set<std::string> ood_names;
  for (const auto& d : ood) {
    check_data(d, false);
    if (!ood_names.insert(d.name).second) throw ConfigError("duplicate [ood:" + d.name + "]");
    if (d.kind == "shapes" && in.kind == "shapes") {
      try {
        require_disjoint(in.classes, d.classes);
      } catch (const std::invalid_argument& e) {
        throw ConfigError("[ood:" + d.name + "]: " + e.what());
      }
    }
  }
  if (!model.checkpoint.empty()) {
    need_file(model.checkpoint, "[model] checkpoint");
  } else {
    try {
      model.train.validate();
      model.robust.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("[model] ") + e.what());
    }
    static const std::set<std::string> kinds{"standard", "adversarial", "alp", "background", "calibrated"};
    if (!kinds.count(model.training)) throw ConfigError("[model] unknown training '" + model.training + "'");
    for (const auto& s : model.background_sources) {
      if (!ood_names.count(s)) throw ConfigError("[model] background source '" + s + "' is not an [ood:*] section");
    }
    if (model.training == "background" && model.background_sources.empty()) {
      throw ConfigError("[model] background training needs background_sources");
    }
    if (model.training == "calibrated" && !ood_names.count(model.calibration_proxy)) {
      throw ConfigError("[model] calibrated training needs calibration_proxy naming an [ood:*] section");
    }
    if (model.beta < 0) throw ConfigError("[model] beta must be >= 0");
  }
  std::map<std::string, std::string> det_types;
  for (const auto& d : detectors) {
    static const std::set<std::string> kinds{"baseline", "odin", "calibrated", "feature-squeezing", "magnet"};
    if (!kinds.count(d.type)) throw ConfigError("[detector:" + d.name + "] unknown type '" + d.type + "'");
    if (!det_types.emplace(d.name, d.type).second) throw ConfigError("duplicate [detector:" + d.name + "]");
    try {
      d.odin.validate();
      if (d.type == "feature-squeezing") d.squeezers.validate();
      if (d.type == "magnet" && d.autoencoder.empty()) d.ae_train.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError("[detector:" + d.name + "] " + e.what());
    }
    if (!(d.tpr > 0 && d.tpr <= 1) || !(d.fpr >= 0 && d.fpr < 1)) {
      throw ConfigError("[detector:" + d.name + "] tpr must be in (0,1] and fpr in [0,1)");
    }
    if (d.tune_odin && !ood_names.count(d.tune_source)) {
      throw ConfigError("[detector:" + d.name + "] tune_source must name an [ood:*] section");
    }
    if (!d.autoencoder.empty()) need_file(d.autoencoder, "[detector:" + d.name + "] autoencoder");
  }
  std::set<std::string> attack_names;
  for (const auto& a : attacks) {
    const std::string what = "[attack:" + a.name + "]";
    if (!attack_names.insert(a.name).second) throw ConfigError("duplicate " + what);
    try {
      a.config.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(what + " " + e.what());
    }
    static const std::set<std::string> kinds{"pgd", "eot", "blackbox", "bpda", "magnet"};
    if (!kinds.count(a.type)) throw ConfigError(what + " unknown type '" + a.type + "'");
    if (a.type == "bpda" || a.type == "magnet") {
      const auto it = det_types.find(a.detector);
      const std::string want = a.type == "bpda" ? "feature-squeezing" : "magnet";
      if (it == det_types.end() || it->second != want) {
        throw ConfigError(what + " needs 'detector' naming a " + want + " detector");
      }
    }
    if (a.type == "magnet" && (a.lambdas.empty() || std::any_of(a.lambdas.begin(), a.lambdas.end(),
                                                               [](double l) { return !(l >= 0); }))) {
      throw ConfigError(what + " lambdas must be a non-empty list of weights >= 0");
    }
    if (a.type == "bpda" && a.config.constraint.norm != Norm::l2) throw ConfigError(what + " bpda uses the L2 norm");
    if (a.samples_per_step < 1 || a.eval_draws < 1 || a.blackbox.group_size < 1 || !(a.blackbox.h > 0)) {
      throw ConfigError(what + " samples_per_step, eval_draws, group_size and fd_step must be positive");
    }
  }
}

// --- Data and model ----------------------------------------------------------------------

std::pair<LabeledDataset, LabeledDataset> load_in_distribution(const ExperimentConfig& cfg) {
  const DataSpec& d = cfg.in;
  LabeledDataset all;
  if (d.kind == "idx") {
    all = load_idx(d.images, d.labels);
  } else if (d.kind == "manifest") {
    auto loaded = load_manifest(d.manifest);
    if (!std::holds_alternative<LabeledDataset>(loaded)) throw ConfigError("[in] manifest has role ood");
    all = std::get<LabeledDataset>(std::move(loaded));
  } else {
    all = gen_synthetic_shapes(d.count, d.shape, d.classes, d.seed);
  }
  all.source_name = d.name;
  const std::size_t head = cfg.train_count > 0 ? cfg.train_count : all.size() * 4 / 5;
  if (head >= all.size()) throw ConfigError("[experiment] train_count leaves no test data");
  return split(all, head, cfg.split_seed);
}

std::pair<UnlabeledDataset, UnlabeledDataset> load_ood_source(const DataSpec& d) {
  UnlabeledDataset all;
  if (d.kind == "idx") {
    all = load_idx_unlabeled(d.images, d.name);
  } else if (d.kind == "manifest") {
    auto loaded = load_manifest(d.manifest);
    all = std::holds_alternative<UnlabeledDataset>(loaded) ? std::get<UnlabeledDataset>(std::move(loaded))
                                                           : as_ood(std::get<LabeledDataset>(loaded));
  } else if (d.kind == "shapes") {
    all = as_ood(gen_synthetic_shapes(d.count, d.shape, d.classes, d.seed));
  } else {
    all = gen_gaussian_noise_ood(d.count, d.shape, d.mean, d.stddev, d.seed);
  }
  all.source_name = d.name;
  if (all.size() < d.eval_count) {
    throw ConfigError(fmt::format("[ood:{}] has {} items, fewer than eval_count {}", d.name, all.size(), d.eval_count));
  }
  return split(all, d.eval_count, d.seed ^ 0x5EEDULL);
}

Classifier prepare_model(const ExperimentConfig& cfg, const LabeledDataset& train,
                         const std::map<std::string, UnlabeledDataset>& ood_train) {
  const ModelSpec& m = cfg.model;
  if (!m.checkpoint.empty()) return load_classifier(m.checkpoint);

  std::vector<std::string> labels = train.label_names;
  RobustTrainConfig robust = m.robust;
  robust.base = m.train;
  if (m.training == "background") {
    for (const auto& s : m.background_sources) robust.background.ood_sources.push_back(ood_train.at(s));
    labels = background_label_names(labels, m.background_sources, robust.background.one_class_per_source);
  }
  const Shape shape = train.images.front().shape();
  Classifier model = make_classifier(m.arch, shape, labels, m.seed);

  auto train_once = [&](const TrainConfig& tc) {
    robust.base = tc;
    if (m.training == "standard") train_classifier(model, train, tc);
    else if (m.training == "adversarial") adversarial_train(model, train, robust);
    else if (m.training == "alp") alp_train(model, train, robust);
    else if (m.training == "background") background_class_train(model, train, robust);
    else train_confidence_calibrated(model, train, ood_train.at(m.calibration_proxy), m.beta, tc);
  };
  train_once(m.train);
  if (m.fine_tune_epochs > 0) {
    TrainConfig ft = m.train;
    ft.epochs = m.fine_tune_epochs;
    ft.learning_rate = m.fine_tune_lr > 0 ? m.fine_tune_lr : m.train.learning_rate / 4;
    ft.seed = m.train.seed + 1;
    train_once(ft);
  }
  std::filesystem::create_directories(cfg.output);
  save_classifier(cfg.output / "model.ckpt", model);
  return model;
}

// --- Orchestration -------------------------------------------------------------------------

namespace {

struct Source {
  std::string name;
  bool ood = false;
  std::vector<Tensor> images;
  std::vector<int> labels;  // in-distribution only
};

struct BuiltDetector {
  const DetectorSpec* spec = nullptr;
  Polarity polarity = Polarity::ood;
  double threshold = 0;
  OdinConfig odin;
  OodDetectorKind ood_kind = OodDetectorKind::baseline;
  MagnetDetector magnet;

  std::vector<double> scores(const Classifier& model, const std::vector<Tensor>& xs) const {
    if (spec->type == "feature-squeezing") return fs_scores(model, xs, spec->squeezers);
    if (spec->type == "magnet") return magnet_scores(magnet, xs);
    return ood_scores(model, ood_kind, odin, xs);
  }
};

ReportRow make_row(std::string model, std::string source, DataKind kind, std::string attack = "none",
                   std::string defense = "none") {
  ReportRow row;
  row.model = std::move(model);
  row.data_source = std::move(source);
  row.data_kind = kind;
  row.attack = std::move(attack);
  row.defense = std::move(defense);
  return row;
}

std::string minmax_flag(const MinMax& m) { return fmt::format("expected_conf_min_max:{:.4f}/{:.4f}", m.min, m.max); }

// Published large-scale figures, carried for context and never asserted.
const std::vector<std::pair<std::string, std::string>> kLiterature{
    {"wrn-28-10 cifar-10 undefended: ood-adv targeted success / confidence", "100.0 / 1.00"},
    {"wrn-28-10 cifar-10 adversarially trained: in-dist adv targeted success", "22.9"},
    {"wrn-28-10 cifar-10, mnist as ood, unmodified: expected confidence min / max", "0.00 / 0.62"},
    {"wrn-28-10 cifar-10, mnist as ood, adversarial: expected confidence min / max", "0.99 / 1.00"},
    {"ood detectors on unmodified ood data: detection rate", "close to 85%"},
};

std::string fmt_double(double v) { return fmt::format("{}", v); }

void record_settings(const ExperimentConfig& cfg, EvalReport& report) {
  auto& s = report.settings;
  s["experiment.name"] = cfg.name;
  s["experiment.seed"] = std::to_string(cfg.seed);
  s["experiment.split_seed"] = std::to_string(cfg.split_seed);
  s["experiment.train_count"] = std::to_string(cfg.train_count);
  s["experiment.calibration_count"] = std::to_string(cfg.calibration_count);
  s["model.name"] = cfg.model.name;
  s["model.checkpoint"] = cfg.model.checkpoint.string();
  s["model.arch"] = cfg.model.arch;
  s["model.seed"] = std::to_string(cfg.model.seed);
  s["model.training"] = cfg.model.training;
  s["model.train_seed"] = std::to_string(cfg.model.train.seed);
  s["model.epochs"] = std::to_string(cfg.model.train.epochs);
  s["model.batch_size"] = std::to_string(cfg.model.train.batch_size);
  s["model.learning_rate"] = fmt_double(cfg.model.train.learning_rate);
  s["model.optimizer"] = std::string(to_string(cfg.model.train.optimizer));
  s["model.fine_tune_epochs"] = std::to_string(cfg.model.fine_tune_epochs);
  s["model.fine_tune_lr"] = fmt_double(cfg.model.fine_tune_lr);
  if (cfg.model.training != "standard") {
    s["model.alpha"] = fmt_double(cfg.model.robust.alpha);
    s["model.alp_weight"] = fmt_double(cfg.model.robust.alp_weight);
    s["model.inner_epsilon"] = fmt_double(cfg.model.robust.inner_attack.constraint.epsilon);
    s["model.inner_steps"] = std::to_string(cfg.model.robust.inner_attack.max_iters);
    s["model.inner_step_size"] = fmt_double(cfg.model.robust.inner_attack.effective_step());
  }
  s["in.name"] = cfg.in.name;
  s["in.seed"] = std::to_string(cfg.in.seed);
  s["in.eval_count"] = std::to_string(cfg.in.eval_count);
  for (const auto& d : cfg.ood) {
    s["ood." + d.name + ".kind"] = d.kind;
    s["ood." + d.name + ".seed"] = std::to_string(d.seed);
    s["ood." + d.name + ".eval_count"] = std::to_string(d.eval_count);
  }
  for (const auto& a : cfg.attacks) {
    const std::string p = "attack." + a.name + ".";
    s[p + "type"] = a.type;
    s[p + "loss"] = std::string(to_string(a.config.loss));
    s[p + "kappa"] = fmt_double(a.config.kappa);
    s[p + "norm"] = std::string(to_string(a.config.constraint.norm));
    s[p + "epsilon"] = fmt_double(a.config.constraint.epsilon);
    s[p + "epsilon_given"] = fmt_double(a.epsilon_given) + " (" + a.epsilon_scale + " scale)";
    s[p + "step_size"] = fmt_double(a.config.effective_step());
    s[p + "max_iters"] = std::to_string(a.config.max_iters);
    s[p + "plateau"] = fmt::format("{} / {}", a.config.plateau_patience, a.config.plateau_min_delta);
    s[p + "targeting"] = std::string(to_string(a.config.targeting));
    s[p + "seed"] = std::to_string(a.config.seed);
  }
  for (const auto& d : cfg.detectors) {
    const std::string p = "detector." + d.name + ".";
    s[p + "type"] = d.type;
    if (d.type == "feature-squeezing" || d.type == "magnet") s[p + "fpr_target"] = fmt_double(d.fpr);
    else s[p + "tpr_target"] = fmt_double(d.tpr);
  }
}

void save_adversarial(const std::filesystem::path& path, const std::vector<AttackResult>& results) {
  Checkpoint c;
  c.arch = "adversarial-examples";
  c.metadata["count"] = std::to_string(results.size());
  for (std::size_t i = 0; i < results.size(); ++i) {
    c.metadata["target." + std::to_string(i)] = std::to_string(results[i].target);
    c.tensors.emplace_back("adv." + std::to_string(i), results[i].adv_example);
  }
  write_checkpoint(path, c);
}

std::string file_safe(const std::string& s) {
  std::string out = s;
  for (char& c : out) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
  }
  return out;
}

}  // namespace

EvalReport run_experiment(const ExperimentConfig& cfg, StageSelection stages) {
  cfg.validate();
  EvalReport report;
  record_settings(cfg, report);
  report.literature = kLiterature;
  const std::string model_name = cfg.model.name;

  auto fail = [&](const std::string& stage, const std::exception& e) -> ExperimentFailure {
    report.partial = true;
    report.failure = stage + ": " + e.what();
    report.sort_rows();
    try {
      emit_report(report, cfg.output, cfg.formats);
    } catch (...) {
    }
    return ExperimentFailure(report.failure, report);
  };

  std::string stage = "data";
  try {
    auto [train, test] = load_in_distribution(cfg);
    std::vector<Source> sources;
    std::map<std::string, UnlabeledDataset> ood_train;
    {
      const std::size_t n = std::min(cfg.in.eval_count, test.size());
      Source in{cfg.in.name, false, {}, {}};
      in.images.assign(test.images.begin(), test.images.begin() + static_cast<std::ptrdiff_t>(n));
      in.labels.assign(test.labels.begin(), test.labels.begin() + static_cast<std::ptrdiff_t>(n));
      sources.push_back(std::move(in));
    }
    for (const auto& d : cfg.ood) {
      auto [eval, rest] = load_ood_source(d);
      sources.push_back({d.name, true, eval.images, {}});
      ood_train.emplace(d.name, std::move(rest));
    }
    // Benign calibration data: test items after the evaluation slice.
    std::vector<Tensor> calibration;
    for (std::size_t i = sources.front().images.size(); i < test.size() && calibration.size() < cfg.calibration_count;
         ++i) {
      calibration.push_back(test.images[i]);
    }
    if (calibration.empty() && !cfg.detectors.empty()) {
      throw ConfigError("no held-out in-distribution data left for detector calibration");
    }

    stage = "model";
    const Classifier model = prepare_model(cfg, train, ood_train);
    if (model.in_classes() != test.num_classes()) {
      throw ConfigError(fmt::format("model has {} in-distribution classes, data has {}", model.in_classes(),
                                    test.num_classes()));
    }

    // Unmodified rows.
    for (const auto& src : sources) {
      ReportRow row = make_row(model_name, src.name, src.ood ? DataKind::ood_unmod : DataKind::in_unmod);
      const auto preds = predict_batch(model, src.images);
      if (src.ood) {
        double conf = 0;
        for (const auto& p : preds) conf += p.confidence;
        row.mean_conf = conf / static_cast<double>(preds.size());
        row.flags.push_back(minmax_flag(minmax_expected_confidence(model, src.images)));
      } else {
        const Evaluation e = evaluate_model(model, test);
        row.accuracy = e.accuracy;
        if (e.confidence_defined) row.mean_conf = e.mean_confidence;
        else row.flags.push_back("mean_conf_undefined");
      }
      report.add(row);
    }

    stage = "detectors";
    std::vector<BuiltDetector> detectors;
    const bool need_detectors =
        stages.detectors || std::any_of(cfg.attacks.begin(), cfg.attacks.end(),
                                        [](const AttackSpec& a) { return a.type == "bpda" || a.type == "magnet"; });
    if (need_detectors) {
      for (const auto& spec : cfg.detectors) {
        BuiltDetector d;
        d.spec = &spec;
        if (spec.type == "feature-squeezing" || spec.type == "magnet") {
          d.polarity = Polarity::adversarial;
          if (spec.type == "magnet") {
            d.magnet.norm = spec.norm;
            d.magnet.fpr_target = spec.fpr;
            if (!spec.autoencoder.empty()) {
              d.magnet.autoencoder = load_network(spec.autoencoder);
            } else {
              d.magnet.autoencoder = make_autoencoder(model.input_shape());
              d.magnet.autoencoder.init_params(spec.ae_train.seed);
              magnet_train(d.magnet.autoencoder, train.images, spec.noise_level, spec.ae_train);
              save_network(cfg.output / ("autoencoder_" + file_safe(spec.name) + ".ckpt"), d.magnet.autoencoder);
            }
          }
          d.threshold = calibrate_fpr_threshold(d.scores(model, calibration), spec.fpr);
          d.magnet.threshold = d.threshold;
        } else {
          d.polarity = Polarity::ood;
          d.ood_kind = parse_ood_detector(spec.type);
          d.odin = spec.odin;
          if (spec.tune_odin) {
            // Validation split: calibration data against the tuning source's training remainder.
            const auto& val_out = ood_train.at(spec.tune_source).images;
            if (val_out.empty()) throw ConfigError("[detector:" + spec.name + "] tuning source has no spare items");
            d.odin = tune_odin(model, calibration, val_out).best;
            report.settings["detector." + spec.name + ".temperature"] = fmt_double(d.odin.temperature);
            report.settings["detector." + spec.name + ".preprocess_epsilon"] = fmt_double(d.odin.epsilon);
          }
          d.threshold = calibrate_threshold(d.scores(model, calibration), spec.tpr);
        }
        report.settings["detector." + spec.name + ".threshold"] = fmt::format("{:.17g}", d.threshold);
        detectors.push_back(std::move(d));
      }
    }
    auto find_detector = [&](const std::string& name) -> const BuiltDetector& {
      for (const auto& d : detectors) {
        if (d.spec->name == name) return d;
      }
      throw ConfigError("detector '" + name + "' not built");
    };

    // Adversarial examples per (attack, source).
    struct AttackRun {
      const AttackSpec* attack;
      const Source* source;
      std::vector<AttackResult> results;
    };
    std::vector<AttackRun> runs;
    if (stages.attacks) {
      stage = "attacks";
      std::filesystem::create_directories(cfg.output / "adv");
      for (const auto& a : cfg.attacks) {
        for (const auto& src : sources) {
          stage = "attack " + a.name + " on " + src.name;
          const std::uint64_t seed = derive(a.config.seed, src.name);
          const auto targets = select_targets(model, src.images, a.config.targeting, seed);
          AttackConfig ac = a.config;
          ac.seed = seed;
          std::vector<AttackResult> results;
          if (a.type == "pgd") {
            results = pgd_attack_batch(model, src.images, targets, ac);
          } else if (a.type == "eot") {
            results = eot_attack(model, src.images, targets, ac, default_transform_sampler(), a.samples_per_step,
                                 a.eval_draws);
          } else if (a.type == "blackbox") {
            for (std::size_t i = 0; i < src.images.size(); ++i) {
              QueryOracle oracle = local_oracle(model);
              AttackConfig one = ac;
              one.seed = ac.seed + i;
              results.push_back(blackbox_pgd_attack(oracle, src.images[i], targets[i], one, a.blackbox));
            }
          } else if (a.type == "bpda") {
            const auto& det = find_detector(a.detector);
            BpdaConfig b{det.spec->squeezers, det.threshold, a.bpda_weight};
            results = bpda_attack(model, b, src.images, targets, ac);
          } else {
            const auto& det = find_detector(a.detector).magnet;
            double best_rate = -1;
            for (double lambda : a.lambdas) {
              MagnetAttackConfig mc = a.magnet;
              mc.lambda = lambda;
              auto r = magnet_adaptive_attack(model, det, src.images, targets, ac, mc);
              const double rate = target_success_rate(r);
              if (rate > best_rate) {
                best_rate = rate;
                results = std::move(r);
                report.settings["attack." + a.name + "." + src.name + ".best_lambda"] = fmt_double(lambda);
              }
            }
          }
          save_adversarial(cfg.output / "adv" / (file_safe(a.name) + "__" + file_safe(src.name) + ".bin"), results);

          ReportRow row = make_row(model_name, src.name, src.ood ? DataKind::ood_adv : DataKind::in_adv, a.name);
          if (!a.detector.empty()) row.defense = a.detector;
          row.tsr = target_success_rate(results);
          const auto mc = mean_target_confidence(results);
          if (mc.defined) row.mean_conf = mc.value;
          else row.flags.push_back("mean_conf_undefined");
          if (!src.ood) {
            long correct = 0;
            for (std::size_t i = 0; i < results.size(); ++i) correct += results[i].predicted == src.labels[i];
            row.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(results.size());
          }
          if (a.type == "blackbox") {
            double q = 0;
            for (const auto& r : results) q += static_cast<double>(r.queries_used);
            row.queries = q / static_cast<double>(results.size());
          }
          if (src.ood) row.flags.push_back(minmax_flag(minmax_expected_confidence(results)));
          report.add(row);
          runs.push_back({&a, &src, std::move(results)});
        }
      }
    }

    if (stages.detectors) {
      stage = "detector evaluation";
      std::filesystem::create_directories(cfg.output / "scores");
      for (const auto& det : detectors) {
        std::ofstream scores_out(cfg.output / "scores" / (file_safe(det.spec->name) + ".csv"), std::ios::binary);
        scores_out << "data_source,data_kind,attack,index,score,threshold,flagged\n";
        auto log_scores = [&](const std::string& source, DataKind kind, const std::string& attack,
                              const std::vector<double>& s) {
          for (std::size_t i = 0; i < s.size(); ++i) {
            const auto v = make_verdict(s[i], det.threshold, det.polarity);
            scores_out << fmt::format("{},{},{},{},{:.17g},{:.17g},{}\n", source, to_string(kind), attack, i, s[i],
                                      det.threshold, v.flagged ? 1 : 0);
          }
        };
        auto flagged_share = [&](const std::vector<double>& s) {
          long f = 0;
          for (double v : s) f += make_verdict(v, det.threshold, det.polarity).flagged;
          return 100.0 * static_cast<double>(f) / static_cast<double>(s.size());
        };
        const std::vector<double> benign = det.scores(model, sources.front().images);
        const double fpr = flagged_share(benign);
        for (const auto& src : sources) {
          const auto s = src.ood ? det.scores(model, src.images) : benign;
          const DataKind kind = src.ood ? DataKind::ood_unmod : DataKind::in_unmod;
          log_scores(src.name, kind, "none", s);
          ReportRow row = make_row(model_name, src.name, kind, "none", det.spec->name);
          row.det_rate = flagged_share(s);
          row.fpr = fpr;
          report.add(row);
        }
        for (const auto& run : runs) {
          if (!run.attack->detector.empty() && run.attack->detector != det.spec->name) continue;
          std::vector<Tensor> adv;
          for (const auto& r : run.results) adv.push_back(r.adv_example);
          const auto s = det.scores(model, adv);
          const DataKind kind = run.source->ood ? DataKind::ood_adv : DataKind::in_adv;
          log_scores(run.source->name, kind, run.attack->name, s);
          if (!run.attack->detector.empty()) {
            // Detector-aware attacks already count evasion in tsr; fill in the
            // detection columns of the row written by the attack stage.
            const auto it = std::find_if(report.rows.begin(), report.rows.end(), [&](const ReportRow& r) {
              return r.data_source == run.source->name && r.data_kind == kind && r.attack == run.attack->name;
            });
            ReportRow row = *it;
            report.rows.erase(it);
            row.det_rate = flagged_share(s);
            row.fpr = fpr;
            report.add(row);
            continue;
          }
          std::vector<AttackResult> gated = run.results;
          if (det.spec->type == "magnet") apply_magnet_success(model, det.magnet, gated);
          for (std::size_t i = 0; i < gated.size(); ++i) {
            gated[i].success = gated[i].success && !make_verdict(s[i], det.threshold, det.polarity).flagged;
          }
          ReportRow row = make_row(model_name, run.source->name, kind, run.attack->name, det.spec->name);
          row.det_rate = flagged_share(s);
          row.fpr = fpr;
          row.tsr = target_success_rate(gated);
          const auto mc = mean_target_confidence(gated);
          if (mc.defined) row.mean_conf = mc.value;
          else row.flags.push_back("mean_conf_undefined");
          report.add(row);
        }
      }
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw fail(stage, e);
  }

  report.sort_rows();
  emit_report(report, cfg.output, cfg.formats);
  return report;
}

}  // namespace owb
