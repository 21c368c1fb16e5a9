#pragma once

#include "owb/attacks.hpp"
#include "owb/ood_detectors.hpp"
#include "owb/report.hpp"
#include "owb/robust.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace owb {

/// Invalid or inconsistent experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A stage failed; `report` holds the rows completed before the failure.
class ExperimentFailure : public std::runtime_error {
 public:
  ExperimentFailure(const std::string& what, EvalReport report) : std::runtime_error(what), report(std::move(report)) {}
  EvalReport report;
};

/// One dataset. kind: idx | manifest | shapes | gaussian.
struct DataSpec {
  std::string name;
  std::string kind;
  std::filesystem::path images;
  std::filesystem::path labels;
  std::filesystem::path manifest;
  std::vector<ShapeKind> classes;
  Shape shape{1, 28, 28};
  std::size_t count = 0;  // generated items, or 0 for every file item
  double mean = 127;
  double stddev = 50;
  std::uint64_t seed = 0;
  /// Items evaluated and attacked; the remainder is available for training.
  std::size_t eval_count = 100;
};

struct ModelSpec {
  std::string name = "model";
  std::filesystem::path checkpoint;  // load instead of training when set
  std::string arch = "cnn-s";
  std::uint64_t seed = 1;
  TrainConfig train;
  /// Extra epochs at fine_tune_lr after the main schedule (0 = none).
  int fine_tune_epochs = 0;
  double fine_tune_lr = 0;
  /// standard | adversarial | alp | background | calibrated
  std::string training = "standard";
  RobustTrainConfig robust;
  std::vector<std::string> background_sources;  // names of [ood:*] sections
  std::string calibration_proxy;                // [ood:*] name for confidence calibration
  double beta = 1.0;
};

struct AttackSpec {
  std::string name;
  /// pgd | eot | blackbox | bpda | magnet
  std::string type = "pgd";
  AttackConfig config;
  double epsilon_given = 0;
  std::string epsilon_scale;  // unit | byte, as written in the config
  int samples_per_step = 10;
  int eval_draws = 100;
  BlackBoxConfig blackbox;
  MagnetAttackConfig magnet;
  /// magnet: every weight is tried; the row reports the most successful one.
  std::vector<double> lambdas{0.1, 1, 10};
  double bpda_weight = 1;
  std::string detector;  // bpda / magnet: the detector section to evade
};

struct DetectorSpec {
  std::string name;
  /// baseline | odin | calibrated | feature-squeezing | magnet
  std::string type = "baseline";
  double tpr = 0.95;  // OOD detectors
  double fpr = 0.05;  // adversarial detectors
  OdinConfig odin;
  bool tune_odin = false;
  std::string tune_source;  // [ood:*] used for ODIN validation
  SqueezerConfig squeezers;
  // MagNet autoencoder
  std::filesystem::path autoencoder;
  ReconNorm norm = ReconNorm::l1;
  double noise_level = 0.1;
  TrainConfig ae_train;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  std::filesystem::path output = "results";
  std::vector<ReportFormat> formats{ReportFormat::csv, ReportFormat::json};

  ModelSpec model;
  DataSpec in;
  std::size_t train_count = 0;  // in-distribution items used for training
  std::uint64_t split_seed = 0;
  std::size_t calibration_count = 500;
  std::vector<DataSpec> ood;
  std::vector<AttackSpec> attacks;
  std::vector<DetectorSpec> detectors;

  /// Checks references, ranges and the presence of input files.
  void validate() const;
};

/// Flat INI-style text: [experiment], [model], [in], [ood:NAME],
/// [attack:NAME], [detector:NAME]. Relative paths resolve against `base_dir`.
/// Seeds not set explicitly derive from the master seed; `seed_override`
/// replaces [experiment] seed before derivation.
ExperimentConfig parse_experiment_config(const std::string& text, const std::filesystem::path& base_dir = ".",
                                         std::optional<std::uint64_t> seed_override = std::nullopt);
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        std::optional<std::uint64_t> seed_override = std::nullopt);

struct StageSelection {
  bool attacks = true;
  bool detectors = true;
};

/// Trains or loads the model, runs the configured attacks and detectors over
/// every data source, writes checkpoints, adversarial examples, scores and
/// the report under cfg.output. On failure the partial report is written
/// and ExperimentFailure is thrown.
EvalReport run_experiment(const ExperimentConfig& cfg, StageSelection stages = {});

/// Loads the in-distribution data and splits it into (train, test).
std::pair<LabeledDataset, LabeledDataset> load_in_distribution(const ExperimentConfig& cfg);
/// Loads an OOD source and splits it into (eval, remainder).
std::pair<UnlabeledDataset, UnlabeledDataset> load_ood_source(const DataSpec& spec);

/// Trains (or loads) the configured model; writes model.ckpt under cfg.output.
Classifier prepare_model(const ExperimentConfig& cfg, const LabeledDataset& train,
                         const std::map<std::string, UnlabeledDataset>& ood_train);

}  // namespace owb
