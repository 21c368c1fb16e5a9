#pragma once

#include "owb/data.hpp"
#include "owb/model.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace owb {

enum class OptimizerKind { sgd, sgd_momentum, adam };

std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view name);

struct TrainConfig {
  int epochs = 1;
  int batch_size = 32;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::uint64_t seed = 0;
  bool shuffle = true;
  double momentum = 0.9;

  void validate() const;
};

struct TrainReport {
  double initial_loss = 0;
  double final_loss = 0;
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;  // percent; empty when not applicable
  /// Extra per-epoch curves, e.g. "alp" for the logit-pairing term.
  std::vector<std::pair<std::string, std::vector<double>>> curves;
};

/// First-order optimizer state for a fixed list of parameter tensors.
class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, std::vector<Tensor*> params);
  void step(const std::vector<const Tensor*>& grads);

 private:
  TrainConfig cfg_;
  std::vector<Tensor*> params_;
  std::vector<Vector> m_;
  std::vector<Vector> v_;
  long t_ = 0;
};

/// Loss of one minibatch, recorded on `tape`. `params` must receive the
/// network's parameter Vars (pass it to Network::forward).
struct BatchOutcome {
  Var loss;
  int correct = -1;  // -1 when accuracy is not meaningful
  std::vector<std::pair<std::string, double>> extras;
};
using BatchLossFn =
    std::function<BatchOutcome(Tape& tape, std::span<const std::size_t> batch, std::vector<Var>& params)>;

/// Shared minibatch loop: seeded shuffling, one optimizer step per batch.
TrainReport run_training(Network& net, std::size_t item_count, const TrainConfig& cfg, const BatchLossFn& batch_loss);

/// Stack the images named by `indices`.
Tensor gather_batch(const std::vector<Tensor>& images, std::span<const std::size_t> indices);
std::vector<int> gather_labels(const std::vector<int>& labels, std::span<const std::size_t> indices);
/// Number of rows whose argmax equals the label.
int count_correct(const Tensor& logits, std::span<const int> labels);

/// Mean cross-entropy over the whole dataset, without gradients.
double dataset_loss(const Classifier& model, const LabeledDataset& data);

/// Throws std::out_of_range when a label is outside the model's classes.
void check_labels(const Classifier& model, const LabeledDataset& data);

/// Empirical-risk minimization of mean cross-entropy.
TrainReport train_classifier(Classifier& model, const LabeledDataset& data, const TrainConfig& cfg);

struct Evaluation {
  double accuracy = 0;         // percent over all items
  double mean_confidence = 0;  // over correctly classified items only
  bool confidence_defined = false;
};

Evaluation evaluate_model(const Classifier& model, const LabeledDataset& data);

}  // namespace owb
