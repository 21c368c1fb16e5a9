#include "owb/ood_detectors.hpp"

#include "owb/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace owb {

namespace {

constexpr std::size_t kChunk = 256;

Tensor batch_of(const std::vector<Tensor>& xs, std::size_t begin, std::size_t end) {
  std::vector<const Tensor*> items;
  for (std::size_t i = begin; i < end; ++i) items.push_back(&xs[i]);
  return stack(items);
}

void append_row_max(const Tensor& probs, std::vector<double>& out) {
  const Index n = probs.dim(0), c = probs.dim(1);
  for (Index r = 0; r < n; ++r) out.push_back(probs.data().segment(r * c, c).maxCoeff());
}

std::vector<int> row_argmax(const Tensor& m) {
  const Index n = m.dim(0), c = m.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (Index r = 0; r < n; ++r) out[static_cast<std::size_t>(r)] = argmax(m.data().segment(r * c, c));
  return out;
}

}  // namespace

void OdinConfig::validate() const {
  if (!(temperature >= 1.0)) throw std::invalid_argument("ODIN temperature must be >= 1");
  if (!(epsilon >= 0.0)) throw std::invalid_argument("ODIN epsilon must be >= 0");
}

std::vector<double> baseline_scores(const Classifier& model, const std::vector<Tensor>& xs) {
  std::vector<double> out;
  out.reserve(xs.size());
  for (std::size_t begin = 0; begin < xs.size(); begin += kChunk) {
    append_row_max(confidences(model, batch_of(xs, begin, std::min(xs.size(), begin + kChunk))), out);
  }
  return out;
}

double baseline_score(const Classifier& model, const Tensor& x) { return baseline_scores(model, {x}).front(); }

std::vector<double> odin_scores(const Classifier& model, const std::vector<Tensor>& xs, const OdinConfig& cfg) {
  cfg.validate();
  const double inv_t = 1.0 / cfg.temperature;
  std::vector<double> out;
  out.reserve(xs.size());
  for (std::size_t begin = 0; begin < xs.size(); begin += kChunk) {
    Tensor batch = batch_of(xs, begin, std::min(xs.size(), begin + kChunk));
    if (cfg.epsilon > 0) {
      Tape tape;
      Var x = tape.variable(batch);
      Var scaled = scale(logits(model, tape, x), inv_t);
      Var log_max = pick(log_softmax(scaled), row_argmax(scaled.value()));
      const Tensor g = tape.backward(-sum(log_max)).of(x);
      for (Index i = 0; i < batch.size(); ++i) {
        const double s = g[i] > 0 ? 1.0 : (g[i] < 0 ? -1.0 : 0.0);
        batch[i] = std::clamp(batch[i] - cfg.epsilon * s, 0.0, 1.0);
      }
    }
    Tape tape;
    append_row_max(softmax(scale(tape.constant(logits(model, batch)), inv_t)).value(), out);
  }
  return out;
}

double odin_score(const Classifier& model, const Tensor& x, const OdinConfig& cfg) {
  return odin_scores(model, {x}, cfg).front();
}

OdinSelection tune_odin(const Classifier& model, const std::vector<Tensor>& val_in, const std::vector<Tensor>& val_out,
                        const std::vector<double>& temperatures, const std::vector<double>& epsilons) {
  if (temperatures.empty() || epsilons.empty()) throw std::invalid_argument("tune_odin: empty grid");
  OdinSelection sel;
  bool first = true;
  for (double t : temperatures) {
    for (double e : epsilons) {
      const OdinConfig cfg{t, e};
      const auto pos = odin_scores(model, val_in, cfg);
      const auto neg = odin_scores(model, val_out, cfg);
      const double a = auroc(pos, neg);
      sel.grid.push_back({cfg, a});
      if (first || a > sel.best_auroc) {
        sel.best = cfg;
        sel.best_auroc = a;
        first = false;
      }
    }
  }
  return sel;
}

Var uniform_kl(Var logits) {
  const Index c = logits.shape().back();
  // KL(u || p) = sum_i u_i log(u_i / p_i) = -log C - mean_i log p_i
  Var mean_log = scale(sum_rows(log_softmax(logits)), 1.0 / static_cast<double>(c));
  return add_scalar(-mean_log, -std::log(static_cast<double>(c)));
}

TrainReport train_confidence_calibrated(Classifier& model, const LabeledDataset& in_data,
                                        const UnlabeledDataset& ood_proxy, double beta, const TrainConfig& cfg) {
  if (!(beta >= 0)) throw std::invalid_argument("train_confidence_calibrated: beta must be >= 0");
  if (ood_proxy.size() == 0) throw std::invalid_argument("train_confidence_calibrated: empty OOD proxy");
  if (in_data.size() == 0) throw std::invalid_argument("train_confidence_calibrated: empty dataset");
  check_labels(model, in_data);
  cfg.validate();

  const double initial = dataset_loss(model, in_data);
  Rng proxy_rng(cfg.seed ^ 0x63616C6962ULL);
  std::vector<std::size_t> proxy_order(ood_proxy.size());
  std::iota(proxy_order.begin(), proxy_order.end(), std::size_t{0});
  proxy_rng.shuffle(proxy_order);
  std::size_t cursor = 0;

  Network& net = model.network();
  TrainReport report = run_training(
      net, in_data.size(), cfg, [&](Tape& tape, std::span<const std::size_t> batch, std::vector<Var>& params) {
        const auto labels = gather_labels(in_data.labels, batch);
        Var z = net.forward(tape, tape.constant(gather_batch(in_data.images, batch)), &params);
        Var ce = mean(cross_entropy(z, labels));

        std::vector<std::size_t> proxy_idx;
        for (std::size_t i = 0; i < batch.size(); ++i) {
          if (cursor == proxy_order.size()) {
            proxy_rng.shuffle(proxy_order);
            cursor = 0;
          }
          proxy_idx.push_back(proxy_order[cursor++]);
        }
        Var z_ood = net.forward(tape, tape.constant(gather_batch(ood_proxy.images, proxy_idx)), &params);
        Var kl = mean(uniform_kl(z_ood));
        BatchOutcome out{ce + scale(kl, beta), count_correct(z.value(), labels), {}};
        out.extras.emplace_back("kl", kl.value().item());
        return out;
      });
  report.initial_loss = initial;
  report.final_loss = dataset_loss(model, in_data);
  return report;
}

std::string_view to_string(OodDetectorKind kind) {
  switch (kind) {
    case OodDetectorKind::baseline: return "baseline";
    case OodDetectorKind::odin: return "odin";
    case OodDetectorKind::calibrated: return "calibrated";
  }
  return "?";
}

OodDetectorKind parse_ood_detector(std::string_view name) {
  if (name == "baseline") return OodDetectorKind::baseline;
  if (name == "odin") return OodDetectorKind::odin;
  if (name == "calibrated") return OodDetectorKind::calibrated;
  throw std::invalid_argument("unknown OOD detector '" + std::string(name) + "'");
}

std::vector<double> ood_scores(const Classifier& model, OodDetectorKind kind, const OdinConfig& cfg,
                               const std::vector<Tensor>& xs) {
  if (kind == OodDetectorKind::odin) return odin_scores(model, xs, cfg);
  return baseline_scores(model, xs);
}

DetectorVerdict detect(const Classifier& model, OodDetectorKind kind, const OdinConfig& cfg, double threshold,
                       const Tensor& x) {
  return make_verdict(ood_scores(model, kind, cfg, {x}).front(), threshold, Polarity::ood);
}

}  // namespace owb
