#include "owb/report.hpp"

#include <fmt/format.h>
#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <tuple>

namespace owb {

using nlohmann::json;

std::string_view to_string(DataKind k) {
  switch (k) {
    case DataKind::in_unmod: return "in-unmod";
    case DataKind::in_adv: return "in-adv";
    case DataKind::ood_unmod: return "ood-unmod";
    case DataKind::ood_adv: return "ood-adv";
  }
  return "?";
}

DataKind parse_data_kind(std::string_view name) {
  for (DataKind k : kAllDataKinds) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown data kind '" + std::string(name) + "'");
}

double target_success_rate(std::span<const AttackResult> results) {
  if (results.empty()) throw std::invalid_argument("target_success_rate: no results");
  const auto hits = std::count_if(results.begin(), results.end(), [](const AttackResult& r) { return r.success; });
  return 100.0 * static_cast<double>(hits) / static_cast<double>(results.size());
}

DefinedValue mean_target_confidence(std::span<const AttackResult> results) {
  double total = 0;
  long n = 0;
  for (const auto& r : results) {
    if (!r.success) continue;
    total += r.target_confidence;
    ++n;
  }
  if (n == 0) return {};
  return {total / static_cast<double>(n), true};
}

MinMax minmax_expected_confidence(const Classifier& model, const std::vector<Tensor>& samples, int num_targets) {
  if (samples.empty()) throw std::invalid_argument("minmax_expected_confidence: no samples");
  const int k = num_targets > 0 ? std::min(num_targets, model.num_classes()) : model.in_classes();
  Vector sums = Vector::Zero(model.num_classes());
  const Index c = model.num_classes();
  for (std::size_t begin = 0; begin < samples.size(); begin += 256) {
    const std::size_t end = std::min(samples.size(), begin + 256);
    std::vector<const Tensor*> items;
    for (std::size_t i = begin; i < end; ++i) items.push_back(&samples[i]);
    const Tensor g = confidences(model, stack(items));
    for (std::size_t i = 0; i < items.size(); ++i) sums += g.data().segment(static_cast<Index>(i) * c, c);
  }
  const Vector means = sums.head(k) / static_cast<double>(samples.size());
  return {means.minCoeff(), means.maxCoeff()};
}

MinMax minmax_expected_confidence(std::span<const AttackResult> results) {
  if (results.empty()) throw std::invalid_argument("minmax_expected_confidence: no results");
  std::map<int, std::pair<double, long>> per_target;
  for (const auto& r : results) {
    auto& [sum, n] = per_target[r.target];
    sum += r.target_confidence;
    ++n;
  }
  MinMax mm{1.0, 0.0};
  for (const auto& [t, acc] : per_target) {
    const double m = acc.first / static_cast<double>(acc.second);
    mm.min = std::min(mm.min, m);
    mm.max = std::max(mm.max, m);
  }
  return mm;
}

DetectionRates detection_rates(std::span<const DetectorVerdict> verdicts, std::span<const DataKind> kinds) {
  if (verdicts.size() != kinds.size()) throw std::invalid_argument("detection_rates: verdict/kind count mismatch");
  if (verdicts.empty()) throw std::invalid_argument("detection_rates: no verdicts");
  DetectionRates out;
  out.polarity = verdicts.front().polarity;
  std::map<DataKind, std::pair<long, long>> counts;  // flagged, total
  long pos_flag = 0, pos_total = 0;
  for (std::size_t i = 0; i < verdicts.size(); ++i) {
    if (verdicts[i].polarity != out.polarity) throw std::invalid_argument("detection_rates: mixed detector polarities");
    auto& [flagged, total] = counts[kinds[i]];
    ++total;
    if (verdicts[i].flagged) ++flagged;
    const bool positive = out.polarity == Polarity::ood ? is_ood(kinds[i]) : is_adv(kinds[i]);
    if (positive) {
      ++pos_total;
      if (verdicts[i].flagged) ++pos_flag;
    }
  }
  for (const auto& [k, c] : counts) {
    out.detection_rate[k] = 100.0 * static_cast<double>(c.first) / static_cast<double>(c.second);
  }
  if (pos_total > 0) {
    out.tpr = 100.0 * static_cast<double>(pos_flag) / static_cast<double>(pos_total);
    out.tpr_defined = true;
  }
  if (auto it = out.detection_rate.find(DataKind::in_unmod); it != out.detection_rate.end()) {
    out.fpr = it->second;
    out.fpr_defined = true;
  }
  return out;
}

// --- Report ----------------------------------------------------------------------------

namespace {

double round4(double v) { return std::round(v * 1e4) / 1e4; }

void check_metric(const std::optional<double>& v, const char* name, double lo, double hi) {
  if (!v) return;
  if (!std::isfinite(*v)) throw std::invalid_argument(std::string("report: ") + name + " is not finite");
  if (*v < lo || *v > hi) {
    throw std::invalid_argument(fmt::format("report: {} = {} outside [{}, {}]", name, *v, lo, hi));
  }
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string csv_number(const std::optional<double>& v) { return v ? fmt::format("{:.4f}", *v) : std::string(); }

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace

void EvalReport::add(ReportRow row) {
  for (auto* v : {&row.tsr, &row.accuracy, &row.mean_conf, &row.det_rate, &row.fpr, &row.queries}) {
    if (*v) *v = round4(**v);
  }
  check_metric(row.tsr, "tsr", 0, 100);
  check_metric(row.accuracy, "accuracy", 0, 100);
  check_metric(row.mean_conf, "mean_conf", 0, 1);
  check_metric(row.det_rate, "det_rate", 0, 100);
  check_metric(row.fpr, "fpr", 0, 100);
  check_metric(row.queries, "queries", 0, 1e15);
  if (is_ood(row.data_kind) && row.accuracy) throw std::invalid_argument("report: accuracy is not defined for OOD rows");
  rows.push_back(std::move(row));
}

void EvalReport::sort_rows() {
  std::stable_sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    // data_kind sorts by its printed name
    const auto ka = std::make_tuple(a.model, a.data_source, to_string(a.data_kind), a.attack, a.defense);
    const auto kb = std::make_tuple(b.model, b.data_source, to_string(b.data_kind), b.attack, b.defense);
    return ka < kb;
  });
}

std::string to_csv(const EvalReport& report) {
  std::string out(kCsvHeader);
  out += '\n';
  for (const auto& r : report.rows) {
    out += fmt::format("{},{},{},{},{},{},{},{},{},{},{}\n", csv_field(r.model), csv_field(r.data_source),
                       to_string(r.data_kind), csv_field(r.attack), csv_field(r.defense), csv_number(r.tsr),
                       csv_number(r.accuracy), csv_number(r.mean_conf), csv_number(r.det_rate), csv_number(r.fpr),
                       csv_number(r.queries));
  }
  return out;
}

std::string to_json(const EvalReport& report) {
  json rows = json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"model", r.model},
                    {"data_source", r.data_source},
                    {"data_kind", std::string(to_string(r.data_kind))},
                    {"attack", r.attack},
                    {"defense", r.defense},
                    {"tsr", opt_json(r.tsr)},
                    {"accuracy", opt_json(r.accuracy)},
                    {"mean_conf", opt_json(r.mean_conf)},
                    {"det_rate", opt_json(r.det_rate)},
                    {"fpr", opt_json(r.fpr)},
                    {"queries", opt_json(r.queries)},
                    {"flags", r.flags}});
  }
  json lit = json::array();
  for (const auto& [k, v] : report.literature) lit.push_back({{"source", k}, {"value", v}});
  json doc{{"schema_version", report.schema_version},
           {"partial", report.partial},
           {"failure", report.failure},
           {"settings", report.settings},
           {"literature", lit},
           {"rows", rows}};
  return doc.dump(2) + "\n";
}

EvalReport report_from_json(std::string_view text) {
  const json doc = json::parse(text);
  EvalReport r;
  r.schema_version = doc.at("schema_version").get<int>();
  if (r.schema_version != kReportSchemaVersion) {
    throw std::runtime_error("report: unsupported schema version " + std::to_string(r.schema_version));
  }
  r.partial = doc.at("partial").get<bool>();
  r.failure = doc.at("failure").get<std::string>();
  r.settings = doc.at("settings").get<std::map<std::string, std::string>>();
  for (const auto& l : doc.at("literature")) r.literature.emplace_back(l.at("source"), l.at("value"));
  for (const auto& j : doc.at("rows")) {
    ReportRow row;
    row.model = j.at("model");
    row.data_source = j.at("data_source");
    row.data_kind = parse_data_kind(j.at("data_kind").get<std::string>());
    row.attack = j.at("attack");
    row.defense = j.at("defense");
    row.tsr = opt_from(j.at("tsr"));
    row.accuracy = opt_from(j.at("accuracy"));
    row.mean_conf = opt_from(j.at("mean_conf"));
    row.det_rate = opt_from(j.at("det_rate"));
    row.fpr = opt_from(j.at("fpr"));
    row.queries = opt_from(j.at("queries"));
    row.flags = j.at("flags").get<std::vector<std::string>>();
    r.rows.push_back(std::move(row));
  }
  return r;
}

void emit_report(const EvalReport& report, const std::filesystem::path& dir, std::span<const ReportFormat> formats) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create report directory " + dir.string() + ": " + ec.message());
  for (ReportFormat f : formats) {
    const auto path = dir / (f == ReportFormat::csv ? "report.csv" : "report.json");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << (f == ReportFormat::csv ? to_csv(report) : to_json(report));
    if (!out) throw std::runtime_error("write failed for " + path.string());
  }
}

}  // namespace owb
