#include "owb/robust.hpp"

#include "owb/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace owb {

AttackConfig RobustTrainConfig::inner_attack_config(PerturbationConstraint c, int steps) {
  AttackConfig a;
  a.constraint = c;
  a.max_iters = steps;
  a.step_size = 2.5 * c.epsilon / steps;
  a.plateau_patience = 0;
  return a;
}

void RobustTrainConfig::validate() const {
  if (!(alpha >= 0 && alpha <= 1)) throw std::invalid_argument("robust training: alpha must be in [0,1]");
  if (!(alp_weight >= 0)) throw std::invalid_argument("robust training: alp_weight must be >= 0");
  if (background.samples_per_source < 1) throw std::invalid_argument("robust training: samples_per_source must be >= 1");
  if (!(background.mix_alpha >= 0 && background.mix_alpha <= 1)) {
    throw std::invalid_argument("robust training: background mix alpha must be in [0,1]");
  }
  inner_attack.validate();
  base.validate();
}

Tensor project_batch(const Tensor& batch, const Tensor& origin, const PerturbationConstraint& c) {
  if (c.norm == Norm::linf) return project(batch, origin, c);
  Tensor out(batch.shape());
  const Index rows = batch.dim(0), d = batch.size() / std::max<Index>(rows, 1);
  for (Index r = 0; r < rows; ++r) {
    const Tensor p = project(unstack_row(batch, r), unstack_row(origin, r), c);
    out.data().segment(r * d, d) = p.data();
  }
  return out;
}

Tensor inner_maximize(const Network& net, const Tensor& batch, std::span<const int> labels, const AttackConfig& attack) {
  if (attack.constraint.epsilon == 0) return batch;
  const double alpha = attack.effective_step();
  const Index rows = batch.dim(0), d = batch.size() / rows;
  Tensor x = batch;
  for (int step = 0; step < attack.max_iters; ++step) {
    Tape tape;
    Var xv = tape.variable(x);
    const Tensor g = tape.backward(sum(cross_entropy(net.forward(tape, xv), labels))).of(xv);
    if (attack.constraint.norm == Norm::linf) {
      for (Index i = 0; i < x.size(); ++i) x[i] += alpha * (g[i] > 0 ? 1.0 : (g[i] < 0 ? -1.0 : 0.0));
    } else {
      for (Index r = 0; r < rows; ++r) {
        const double n = g.data().segment(r * d, d).norm();
        if (n > 0) x.data().segment(r * d, d) += (alpha / n) * g.data().segment(r * d, d);
      }
    }
    x = project_batch(x, batch, attack.constraint);
  }
  return x;
}

namespace {

struct RobustTerm {
  Var loss;
  Var clean_logits;  // invalid when the clean branch is skipped
  Var adv_logits;    // invalid when the adversarial branch is skipped
  double pairing = 0;
};

/// Robust loss of one labeled batch on the tape.
RobustTerm robust_loss(const Network& net, Tape& tape, std::vector<Var>& params, const Tensor& x,
                       std::span<const int> labels, const RobustTrainConfig& cfg) {
  RobustTerm t;
  const bool need_adv = cfg.alpha < 1 || cfg.alp_weight > 0;
  const bool need_clean = cfg.alpha > 0 || cfg.alp_weight > 0;
  Tensor x_adv;
  if (need_adv) x_adv = inner_maximize(net, x, labels, cfg.inner_attack);
  if (need_clean) t.clean_logits = net.forward(tape, tape.constant(x), &params);
  if (need_adv) t.adv_logits = net.forward(tape, tape.constant(x_adv), &params);

  if (cfg.alpha == 1) {
    t.loss = mean(cross_entropy(t.clean_logits, labels));
  } else if (cfg.alpha == 0) {
    t.loss = mean(cross_entropy(t.adv_logits, labels));
  } else {
    t.loss = scale(mean(cross_entropy(t.clean_logits, labels)), cfg.alpha) +
             scale(mean(cross_entropy(t.adv_logits, labels)), 1 - cfg.alpha);
  }
  if (cfg.alp_weight > 0) {
    Var pair = mean(l2_norm_squared_rows(t.clean_logits - t.adv_logits));
    t.pairing = pair.value().item();
    t.loss = t.loss + scale(pair, cfg.alp_weight);
  }
  return t;
}

int batch_correct(const RobustTerm& t, std::span<const int> labels) {
  return count_correct((t.clean_logits.valid() ? t.clean_logits : t.adv_logits).value(), labels);
}

TrainReport robust_train(Classifier& model, const LabeledDataset& data, const RobustTrainConfig& cfg, bool log_pairing) {
  if (data.size() == 0) throw std::invalid_argument("robust training: empty dataset");
  check_labels(model, data);
  cfg.validate();
  Network& net = model.network();
  return run_training(net, data.size(), cfg.base,
                      [&](Tape& tape, std::span<const std::size_t> batch, std::vector<Var>& params) {
                        const auto labels = gather_labels(data.labels, batch);
                        const RobustTerm t =
                            robust_loss(net, tape, params, gather_batch(data.images, batch), labels, cfg);
                        BatchOutcome out{t.loss, batch_correct(t, labels), {}};
                        if (log_pairing) out.extras.emplace_back("alp", t.pairing);
                        return out;
                      });
}

}  // namespace

TrainReport adversarial_train(Classifier& model, const LabeledDataset& data, const RobustTrainConfig& cfg) {
  RobustTrainConfig plain = cfg;
  plain.alp_weight = 0;
  return robust_train(model, data, plain, false);
}

TrainReport alp_train(Classifier& model, const LabeledDataset& data, const RobustTrainConfig& cfg) {
  return robust_train(model, data, cfg, true);
}

std::vector<std::string> background_label_names(const std::vector<std::string>& in_labels,
                                                const std::vector<std::string>& sources, bool one_class_per_source) {
  std::vector<std::string> names = in_labels;
  if (sources.empty()) return names;
  if (!one_class_per_source) {
    names.push_back("background");
    return names;
  }
  for (const auto& s : sources) names.push_back("background:" + s);
  return names;
}

TrainReport background_class_train(Classifier& model, const LabeledDataset& in_data, const RobustTrainConfig& cfg) {
  cfg.validate();
  const auto& bg = cfg.background;
  if (bg.ood_sources.empty()) return adversarial_train(model, in_data, cfg);

  const int c = in_data.num_classes();
  const int extra = bg.one_class_per_source ? static_cast<int>(bg.ood_sources.size()) : 1;
  if (model.num_classes() != c + extra) {
    throw std::invalid_argument("background_class_train: model has " + std::to_string(model.num_classes()) +
                                " classes, expected " + std::to_string(c) + " + " + std::to_string(extra) +
                                " background");
  }
  if (in_data.size() == 0) throw std::invalid_argument("background_class_train: empty dataset");
  for (int l : in_data.labels) {
    if (l < 0 || l >= c) throw std::out_of_range("background_class_train: in-distribution label out of range");
  }

  // Pool of (image, background label) under a seeded per-source subsample.
  std::vector<const Tensor*> pool;
  std::vector<int> pool_labels;
  std::vector<std::string> names;
  for (std::size_t s = 0; s < bg.ood_sources.size(); ++s) {
    const auto& src = bg.ood_sources[s];
    if (src.size() == 0) throw std::invalid_argument("background_class_train: empty OOD source " + src.source_name);
    names.push_back(src.source_name);
    const auto order = shuffled_indices(src.size(), cfg.base.seed ^ (0xB6ULL + s));
    const std::size_t keep = std::min(bg.samples_per_source, src.size());
    for (std::size_t k = 0; k < keep; ++k) {
      pool.push_back(&src.images[order[k]]);
      pool_labels.push_back(c + (bg.one_class_per_source ? static_cast<int>(s) : 0));
    }
  }
  model.set_background_sources(bg.one_class_per_source ? names : std::vector<std::string>{"background"});

  Rng pool_rng(cfg.base.seed ^ 0x6267ULL);
  std::vector<std::size_t> pool_order(pool.size());
  std::iota(pool_order.begin(), pool_order.end(), std::size_t{0});
  pool_rng.shuffle(pool_order);
  std::size_t cursor = 0;

  Network& net = model.network();
  return run_training(
      net, in_data.size(), cfg.base, [&](Tape& tape, std::span<const std::size_t> batch, std::vector<Var>& params) {
        const auto labels = gather_labels(in_data.labels, batch);
        const RobustTerm in_term = robust_loss(net, tape, params, gather_batch(in_data.images, batch), labels, cfg);

        std::vector<const Tensor*> ood_items;
        std::vector<int> ood_labels;
        for (std::size_t i = 0; i < batch.size(); ++i) {
          if (cursor == pool_order.size()) {
            pool_rng.shuffle(pool_order);
            cursor = 0;
          }
          ood_items.push_back(pool[pool_order[cursor]]);
          ood_labels.push_back(pool_labels[pool_order[cursor]]);
          ++cursor;
        }
        const RobustTerm ood_term = robust_loss(net, tape, params, stack(ood_items), ood_labels, cfg);
        Var loss = scale(in_term.loss, bg.mix_alpha) + scale(ood_term.loss, 1 - bg.mix_alpha);
        BatchOutcome out{loss, batch_correct(in_term, labels), {}};
        out.extras.emplace_back("ood_loss", ood_term.loss.value().item());
        return out;
      });
}

double ood_rejection_rate(const Classifier& model, const UnlabeledDataset& ood_data,
                          const std::vector<int>& background_indices) {
  if (ood_data.size() == 0) throw std::invalid_argument("ood_rejection_rate: empty dataset");
  if (background_indices.empty()) return 0.0;
  const auto preds = predict_batch(model, ood_data.images);
  const auto hits = std::count_if(preds.begin(), preds.end(), [&](const Prediction& p) {
    return std::find(background_indices.begin(), background_indices.end(), p.label) != background_indices.end();
  });
  return 100.0 * static_cast<double>(hits) / static_cast<double>(ood_data.size());
}

}  // namespace owb
