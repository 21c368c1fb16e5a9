#pragma once

#include "owb/attacks.hpp"
#include "owb/verdict.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace owb {

enum class DataKind { in_unmod, in_adv, ood_unmod, ood_adv };

inline constexpr std::array<DataKind, 4> kAllDataKinds{DataKind::in_unmod, DataKind::in_adv, DataKind::ood_unmod,
                                                       DataKind::ood_adv};

std::string_view to_string(DataKind k);
DataKind parse_data_kind(std::string_view name);
inline bool is_ood(DataKind k) { return k == DataKind::ood_unmod || k == DataKind::ood_adv; }
inline bool is_adv(DataKind k) { return k == DataKind::in_adv || k == DataKind::ood_adv; }

// --- Metrics -------------------------------------------------------------------------

/// Percent of successful results.
double target_success_rate(std::span<const AttackResult> results);

struct DefinedValue {
  double value = 0;
  bool defined = false;
};

/// Mean target confidence over successful results; undefined (0) without successes.
DefinedValue mean_target_confidence(std::span<const AttackResult> results);

struct MinMax {
  double min = 0;
  double max = 0;
};

/// For each target t in [0, num_targets): mean of g(x)(t) over `samples`; min and max over t.
MinMax minmax_expected_confidence(const Classifier& model, const std::vector<Tensor>& samples, int num_targets = 0);
/// Adversarial counterpart: for each target, mean target_confidence over the
/// results aimed at it. Targets without results are skipped.
MinMax minmax_expected_confidence(std::span<const AttackResult> results);

struct DetectionRates {
  Polarity polarity = Polarity::ood;
  double tpr = 0;  // flagged share of the kinds the detector should flag
  double fpr = 0;  // flagged share of in-unmod
  bool tpr_defined = false;
  bool fpr_defined = false;
  std::map<DataKind, double> detection_rate;  // percent flagged, per kind present
};

/// Rates from verdicts labeled with their data kinds. OOD detectors should
/// flag ood-*; adversarial detectors should flag *-adv. Mixed polarities throw.
DetectionRates detection_rates(std::span<const DetectorVerdict> verdicts, std::span<const DataKind> kinds);

// --- Report ----------------------------------------------------------------------------

struct ReportRow {
  std::string model;
  std::string data_source;
  DataKind data_kind = DataKind::in_unmod;
  std::string attack = "none";
  std::string defense = "none";
  std::optional<double> tsr;
  std::optional<double> accuracy;
  std::optional<double> mean_conf;
  std::optional<double> det_rate;
  std::optional<double> fpr;
  std::optional<double> queries;
  /// e.g. "mean_conf_undefined"
  std::vector<std::string> flags;

  bool operator==(const ReportRow&) const = default;
};

inline constexpr int kReportSchemaVersion = 1;
inline constexpr std::string_view kCsvHeader =
    "model,data_source,data_kind,attack,defense,tsr,accuracy,mean_conf,det_rate,fpr,queries";

struct EvalReport {
  int schema_version = kReportSchemaVersion;
  std::vector<ReportRow> rows;
  bool partial = false;
  std::string failure;
  /// Resolved seeds and hyperparameters, recorded for replay.
  std::map<std::string, std::string> settings;
  /// Published reference numbers; never asserted.
  std::vector<std::pair<std::string, std::string>> literature;

  /// Adds a row with metrics rounded to 4 decimals; rejects NaN/Inf and out-of-range rates.
  void add(ReportRow row);
  /// Lexicographic by (model, data_source, data_kind, attack, defense).
  void sort_rows();

  bool operator==(const EvalReport&) const = default;
};

std::string to_csv(const EvalReport& report);
std::string to_json(const EvalReport& report);
EvalReport report_from_json(std::string_view text);

enum class ReportFormat { csv, json };
/// Writes report.csv / report.json under `dir`.
void emit_report(const EvalReport& report, const std::filesystem::path& dir, std::span<const ReportFormat> formats);

}  // namespace owb
