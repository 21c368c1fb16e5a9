#include "owb/train.hpp"

#include "owb/random.hpp"

#include <cmath>
#include <algorithm>
#include <numeric>

namespace owb {

std::string_view to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::sgd_momentum: return "sgd-momentum";
    case OptimizerKind::adam: return "adam";
  }
  return "?";
}

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "sgd-momentum" || name == "momentum") return OptimizerKind::sgd_momentum;
  if (name == "adam") return OptimizerKind::adam;
  throw std::invalid_argument("unknown optimizer '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("learning_rate must be finite and non-negative");
  }
}

Optimizer::Optimizer(const TrainConfig& cfg, std::vector<Tensor*> params) : cfg_(cfg), params_(std::move(params)) {
  for (Tensor* p : params_) {
    m_.push_back(Vector::Zero(p->size()));
    v_.push_back(Vector::Zero(p->size()));
  }
}

void Optimizer::step(const std::vector<const Tensor*>& grads) {
  if (grads.size() != params_.size()) throw std::logic_error("optimizer: gradient count mismatch");
  ++t_;
  const double lr = cfg_.learning_rate;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Vector& p = params_[i]->data();
    const Vector& g = grads[i]->data();
    switch (cfg_.optimizer) {
      case OptimizerKind::sgd:
        p -= lr * g;
        break;
      case OptimizerKind::sgd_momentum:
        m_[i] = cfg_.momentum * m_[i] + g;
        p -= lr * m_[i];
        break;
      case OptimizerKind::adam: {
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        m_[i] = b1 * m_[i] + (1 - b1) * g;
        v_[i] = b2 * v_[i] + (1 - b2) * g.cwiseAbs2();
        const double c1 = 1 - std::pow(b1, static_cast<double>(t_));
        const double c2 = 1 - std::pow(b2, static_cast<double>(t_));
        p.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
        break;
      }
    }
  }
}

TrainReport run_training(Network& net, std::size_t item_count, const TrainConfig& cfg, const BatchLossFn& batch_loss) {
  cfg.validate();
  if (item_count == 0) throw std::invalid_argument("training on an empty dataset");
  TrainReport report;
  Optimizer opt(cfg, net.parameters());
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(item_count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::pair<std::string, double>> extra_sums;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.shuffle) rng.shuffle(order);
    double loss_sum = 0;
    long correct = 0;
    bool has_accuracy = true;
    std::size_t batches = 0;
    extra_sums.clear();
    for (std::size_t start = 0; start < item_count; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(item_count, start + static_cast<std::size_t>(cfg.batch_size));
      std::span<const std::size_t> batch(order.data() + start, end - start);
      Tape tape;
      std::vector<Var> params;
      BatchOutcome out = batch_loss(tape, batch, params);
      const Gradients grads = tape.backward(out.loss);
      std::vector<Tensor> g;
      g.reserve(params.size());
      for (Var p : params) g.push_back(grads.of(p));
      std::vector<const Tensor*> gp;
      for (const auto& t : g) gp.push_back(&t);
      opt.step(gp);

      loss_sum += out.loss.value().item();
      if (out.correct < 0) has_accuracy = false; else correct += out.correct;
      for (std::size_t k = 0; k < out.extras.size(); ++k) {
        if (extra_sums.size() <= k) extra_sums.emplace_back(out.extras[k].first, 0.0);
        extra_sums[k].second += out.extras[k].second;
      }
      ++batches;
    }
    report.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    if (has_accuracy) report.epoch_accuracy.push_back(100.0 * static_cast<double>(correct) / static_cast<double>(item_count));
    for (const auto& [name, total] : extra_sums) {
      auto it = std::find_if(report.curves.begin(), report.curves.end(), [&](const auto& c) { return c.first == name; });
      if (it == report.curves.end()) {
        report.curves.emplace_back(name, std::vector<double>{});
        it = std::prev(report.curves.end());
      }
      it->second.push_back(total / static_cast<double>(batches));
    }
  }
  report.initial_loss = report.epoch_loss.front();
  report.final_loss = report.epoch_loss.back();
  return report;
}

Tensor gather_batch(const std::vector<Tensor>& images, std::span<const std::size_t> indices) {
  std::vector<const Tensor*> items;
  items.reserve(indices.size());
  for (std::size_t i : indices) items.push_back(&images.at(i));
  return stack(items);
}

std::vector<int> gather_labels(const std::vector<int>& labels, std::span<const std::size_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

int count_correct(const Tensor& logits, std::span<const int> labels) {
  const Index rows = logits.dim(0), cols = logits.dim(1);
  int correct = 0;
  for (Index r = 0; r < rows; ++r) {
    const Vector row = logits.data().segment(r * cols, cols);
    if (argmax(row) == labels[static_cast<std::size_t>(r)]) ++correct;
  }
  return correct;
}

double dataset_loss(const Classifier& model, const LabeledDataset& data) {
  if (data.size() == 0) throw std::invalid_argument("dataset_loss: empty dataset");
  double total = 0;
  constexpr std::size_t chunk = 256;
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    std::span<const std::size_t> part(idx.data() + start, std::min(chunk, data.size() - start));
    Tape tape;
    const auto labels = gather_labels(data.labels, part);
    Var z = logits(model, tape, tape.constant(gather_batch(data.images, part)));
    total += sum(cross_entropy(z, labels)).value().item();
  }
  return total / static_cast<double>(data.size());
}

void check_labels(const Classifier& model, const LabeledDataset& data) {
  for (int l : data.labels) {
    if (l < 0 || l >= model.num_classes()) {
      throw std::out_of_range("label " + std::to_string(l) + " outside [0," + std::to_string(model.num_classes()) +
                              ") of the model");
    }
  }
}

TrainReport train_classifier(Classifier& model, const LabeledDataset& data, const TrainConfig& cfg) {
  if (data.size() == 0) throw std::invalid_argument("train_classifier: empty dataset");
  if (data.labels.size() != data.images.size()) throw std::invalid_argument("train_classifier: label count mismatch");
  check_labels(model, data);
  cfg.validate();
  const double initial = dataset_loss(model, data);
  Network& net = model.network();
  TrainReport report = run_training(net, data.size(), cfg, [&](Tape& tape, std::span<const std::size_t> batch, std::vector<Var>& params) {
    const auto labels = gather_labels(data.labels, batch);
    Var z = net.forward(tape, tape.constant(gather_batch(data.images, batch)), &params);
    Var loss = mean(cross_entropy(z, labels));
    return BatchOutcome{loss, count_correct(z.value(), labels), {}};
  });
  report.initial_loss = initial;
  report.final_loss = dataset_loss(model, data);
  return report;
}

Evaluation evaluate_model(const Classifier& model, const LabeledDataset& data) {
  if (data.size() == 0) throw std::invalid_argument("evaluate_model: empty dataset");
  const auto preds = predict_batch(model, data.images);
  Evaluation e;
  long correct = 0;
  double conf = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].label == data.labels[i]) {
      ++correct;
      conf += preds[i].confidence;
    }
  }
  e.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(data.size());
  e.confidence_defined = correct > 0;
  e.mean_confidence = correct > 0 ? conf / static_cast<double>(correct) : 0.0;
  return e;
}

}  // namespace owb
