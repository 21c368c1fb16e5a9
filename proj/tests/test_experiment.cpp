#include "doctest.h"

#include "owb/experiment.hpp"

#include <filesystem>
#include <set>
#include <tuple>
#include <fstream>
#include <sstream>

using namespace owb;

namespace {

const char* kTiny = R"(
[experiment]
name = tiny
seed = 11
train_count = 240
calibration_count = 60

[model]
name = tiny-mlp
arch = mlp-2
epochs = 3
learning_rate = 0.003

[in]
kind = shapes
classes = hbar, vbar, cross
shape = 1,12,12
count = 360
eval_count = 20

[ood:rings]
kind = shapes
classes = ring
shape = 1,12,12
count = 60
eval_count = 20

[ood:noise]
kind = gaussian
shape = 1,12,12
count = 40
eval_count = 20

[attack:pgd]
type = pgd
norm = linf
epsilon = 0.2
epsilon_scale = unit
max_iters = 20

[detector:baseline]
type = baseline

[detector:squeeze]
type = feature-squeezing
)";

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "owb_test_experiment" / name;
  std::filesystem::remove_all(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

ExperimentConfig tiny(const std::string& out, std::string text = kTiny) {
  ExperimentConfig cfg = parse_experiment_config(text);
  cfg.output = fresh_dir(out);
  return cfg;
}

std::string replace(std::string s, const std::string& from, const std::string& to) {
  const auto pos = s.find(from);
  REQUIRE(pos != std::string::npos);
  return s.replace(pos, from.size(), to);
}

const ReportRow* find_row(const EvalReport& r, const std::string& source, DataKind kind, const std::string& attack,
                          const std::string& defense) {
  for (const auto& row : r.rows) {
    if (row.data_source == source && row.data_kind == kind && row.attack == attack && row.defense == defense) {
      return &row;
    }
  }
  return nullptr;
}

}  // namespace

TEST_CASE("config parsing") {
  const ExperimentConfig cfg = parse_experiment_config(kTiny);
  CHECK(cfg.name == "tiny");
  CHECK(cfg.model.arch == "mlp-2");
  CHECK(cfg.ood.size() == 2);
  CHECK(cfg.attacks.front().config.constraint.epsilon == 0.2);
  CHECK(cfg.detectors.size() == 2);

  SUBCASE("byte-scale epsilon is divided by 255") {
    const auto c = parse_experiment_config(replace(kTiny, "epsilon = 0.2\nepsilon_scale = unit",
                                                   "epsilon = 510\nepsilon_scale = byte"));
    CHECK(c.attacks.front().config.constraint.epsilon == 2.0);
    CHECK(c.attacks.front().epsilon_given == 510);
  }
  SUBCASE("epsilon without a scale is rejected") {
    CHECK_THROWS_AS(parse_experiment_config(replace(kTiny, "epsilon_scale = unit\n", "")), ConfigError);
  }
  SUBCASE("unknown keys and sections are rejected") {
    CHECK_THROWS_AS(parse_experiment_config(replace(kTiny, "epochs = 3", "epochs = 3\nepoch = 4")), ConfigError);
    CHECK_THROWS_AS(parse_experiment_config(std::string(kTiny) + "\n[defence]\nx = 1\n"), ConfigError);
  }
  SUBCASE("bad values are rejected") {
    CHECK_THROWS_AS(parse_experiment_config(replace(kTiny, "epochs = 3", "epochs = three")), ConfigError);
    CHECK_THROWS_AS(parse_experiment_config(replace(kTiny, "norm = linf", "norm = l3")), ConfigError);
  }
  SUBCASE("dangling references fail validation") {
    ExperimentConfig c = parse_experiment_config(std::string(kTiny) + "\n[detector:odin]\ntype = odin\ntune = true\n"
                                                                      "tune_source = nowhere\n");
    CHECK_THROWS_AS(c.validate(), ConfigError);
    ExperimentConfig missing = parse_experiment_config(replace(kTiny, "name = tiny-mlp", "checkpoint = no/such.ckpt"));
    CHECK_THROWS_AS(missing.validate(), ConfigError);
  }
  SUBCASE("overlapping in and OOD shape classes") {
    ExperimentConfig c = parse_experiment_config(replace(kTiny, "classes = ring", "classes = cross"));
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }
  SUBCASE("seed override replaces the master seed before derivation") {
    const auto a = parse_experiment_config(kTiny, ".", 99);
    const auto b = parse_experiment_config(replace(kTiny, "seed = 11", "seed = 99"));
    CHECK(a.seed == 99);
    CHECK(a.model.train.seed == b.model.train.seed);
    CHECK(a.attacks.front().config.seed == b.attacks.front().config.seed);
    CHECK(a.model.train.seed != cfg.model.train.seed);
  }
}

TEST_CASE("tiny experiment: matrix, replay and determinism") {
  const ExperimentConfig cfg = tiny("run1");
  const EvalReport rep = run_experiment(cfg);
  CHECK_FALSE(rep.partial);

  // 3 sources x (unmodified + pgd) without detectors, plus each detector on every row.
  CHECK(rep.rows.size() == 3 * 2 * 3);
  for (const auto& row : rep.rows) {
    if (is_ood(row.data_kind)) CHECK_FALSE(row.accuracy.has_value());
  }
  const ReportRow* in_unmod = find_row(rep, "shapes", DataKind::in_unmod, "none", "none");
  REQUIRE(in_unmod);
  CHECK(in_unmod->accuracy.has_value());
  CHECK(rep.settings.at("experiment.seed") == "11");
  CHECK_FALSE(rep.literature.empty());

  SUBCASE("success rates replay from stored adversarial examples") {
    const Classifier model = load_classifier(cfg.output / "model.ckpt");
    for (const std::string src : {"shapes", "rings", "noise"}) {
      const Checkpoint adv = read_checkpoint(cfg.output / "adv" / ("pgd__" + src + ".bin"));
      int hits = 0;
      for (std::size_t i = 0; i < adv.tensors.size(); ++i) {
        const int target = std::stoi(adv.metadata.at("target." + std::to_string(i)));
        hits += predict(model, adv.tensors[i].second).label == target;
      }
      const double tsr = 100.0 * hits / static_cast<double>(adv.tensors.size());
      const DataKind kind = src == "shapes" ? DataKind::in_adv : DataKind::ood_adv;
      const ReportRow* row = find_row(rep, src, kind, "pgd", "none");
      REQUIRE(row);
      CHECK(*row->tsr == doctest::Approx(tsr).epsilon(1e-9));
    }
  }
  SUBCASE("detection rates replay from stored scores") {
    std::istringstream lines(slurp(cfg.output / "scores" / "baseline.csv"));
    std::string line;
    std::getline(lines, line);
    std::map<std::string, std::pair<int, int>> tally;  // key -> (flagged, total)
    while (std::getline(lines, line)) {
      std::vector<std::string> f;
      std::stringstream ss(line);
      for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
      REQUIRE(f.size() == 7);
      const bool flagged = make_verdict(std::stod(f[4]), std::stod(f[5]), Polarity::ood).flagged;
      CHECK(flagged == (f[6] == "1"));
      auto& t = tally[f[0] + "|" + f[1] + "|" + f[2]];
      t.first += flagged;
      ++t.second;
    }
    const ReportRow* row = find_row(rep, "noise", DataKind::ood_unmod, "none", "baseline");
    REQUIRE(row);
    const auto t = tally.at("noise|ood-unmod|none");
    CHECK(*row->det_rate == doctest::Approx(100.0 * t.first / t.second).epsilon(1e-9));
  }
  SUBCASE("rerun gives a byte-identical CSV") {
    ExperimentConfig again = cfg;
    again.output = fresh_dir("run2");
    run_experiment(again);
    CHECK(slurp(again.output / "report.csv") == slurp(cfg.output / "report.csv"));
  }
}

TEST_CASE("no OOD sources: in-distribution rows only") {
  std::string text = kTiny;
  const auto from = text.find("[ood:rings]");
  const auto to = text.find("[attack:pgd]");
  text.erase(from, to - from);
  const EvalReport rep = run_experiment(tiny("no-ood", text));
  CHECK_FALSE(rep.rows.empty());
  for (const auto& row : rep.rows) CHECK_FALSE(is_ood(row.data_kind));
  CHECK(find_row(rep, "shapes", DataKind::in_adv, "pgd", "none"));
}

TEST_CASE("a failing stage leaves a partial report") {
  const auto dir = fresh_dir("partial");
  ExperimentConfig cfg = tiny("partial", std::string(kTiny) + "\n[detector:magnet]\ntype = magnet\nautoencoder = " +
                                             (dir / "broken.ckpt").string() + "\n");
  std::filesystem::create_directories(dir);
  {
    std::ofstream(dir / "broken.ckpt") << "not a checkpoint";
  }
  try {
    run_experiment(cfg);
    FAIL("expected the experiment to fail");
  } catch (const ExperimentFailure& e) {
    CHECK(e.report.partial);
    CHECK_FALSE(e.report.rows.empty());
    CHECK(e.report.failure.find("detector") != std::string::npos);
    const EvalReport stored = report_from_json(slurp(dir / "report.json"));
    CHECK(stored.partial);
    CHECK(stored.rows == e.report.rows);
  }
}

TEST_CASE("detector-aware attacks get one row carrying both success and detection") {
  const std::string text = std::string(kTiny) +
                           "\n[attack:bpda]\ntype = bpda\nnorm = l2\nepsilon = 1.5\nepsilon_scale = unit\n"
                           "max_iters = 10\ndetector = squeeze\n";
  const EvalReport rep = run_experiment(tiny("bpda", text));
  std::set<std::tuple<std::string, DataKind, std::string, std::string>> keys;
  for (const auto& r : rep.rows) CHECK(keys.emplace(r.data_source, r.data_kind, r.attack, r.defense).second);

  const ReportRow* row = find_row(rep, "noise", DataKind::ood_adv, "bpda", "squeeze");
  REQUIRE(row);
  CHECK(row->tsr.has_value());
  CHECK(row->det_rate.has_value());
  CHECK(row->fpr.has_value());
  CHECK_FALSE(find_row(rep, "noise", DataKind::ood_adv, "bpda", "baseline"));
}
