#pragma once

#include "owb/attacks.hpp"
#include "owb/data.hpp"
#include "owb/train.hpp"

#include <string>
#include <vector>

namespace owb {

struct BackgroundConfig {
  std::vector<UnlabeledDataset> ood_sources;
  /// Items kept per source: the head of a seeded shuffle (all items when fewer).
  std::size_t samples_per_source = 5000;
  /// One background class per source; otherwise a single shared one.
  bool one_class_per_source = true;
  /// Weight of the in-distribution term; the OOD term gets 1 - mix_alpha.
  double mix_alpha = 0.5;
};

struct RobustTrainConfig {
  /// Weight of the clean loss; the adversarial loss gets 1 - alpha.
  double alpha = 0.5;
  AttackConfig inner_attack = inner_attack_config({Norm::linf, 0.3});
  TrainConfig base;
  double alp_weight = 0;
  BackgroundConfig background;

  /// 10 sign steps of 2.5 * epsilon / 10, no plateau stopping.
  static AttackConfig inner_attack_config(PerturbationConstraint c, int steps = 10);
  void validate() const;
};

/// Inner maximization: `steps` projected ascent steps on the cross-entropy at
/// `labels`, from x itself, against the current (frozen) parameters.
Tensor inner_maximize(const Network& net, const Tensor& batch, std::span<const int> labels, const AttackConfig& attack);

/// Projects each row of a batch onto its own feasible set.
Tensor project_batch(const Tensor& batch, const Tensor& origin, const PerturbationConstraint& c);

/// alpha * CE(x, y) + (1 - alpha) * CE(x_adv, y), averaged per batch.
TrainReport adversarial_train(Classifier& model, const LabeledDataset& data, const RobustTrainConfig& cfg);

/// adversarial_train plus alp_weight * mean ||logits(x) - logits(x_adv)||^2;
/// the pairing term is logged as the "alp" curve.
TrainReport alp_train(Classifier& model, const LabeledDataset& data, const RobustTrainConfig& cfg);

/// Label names for a background-class model: the in-distribution names, then
/// "background:<source>" per source (or one "background" class).
std::vector<std::string> background_label_names(const std::vector<std::string>& in_labels,
                                                const std::vector<std::string>& sources, bool one_class_per_source);

/// Robust loss on in-distribution batches mixed with robust loss on OOD
/// batches labeled with their background class. OOD items come from a seeded
/// cycle over the pooled, shuffled sources. The model must already have the
/// extra classes; the source names are recorded on it.
TrainReport background_class_train(Classifier& model, const LabeledDataset& in_data, const RobustTrainConfig& cfg);

/// Percent of `ood_data` predicted as one of `background_indices`.
double ood_rejection_rate(const Classifier& model, const UnlabeledDataset& ood_data,
                          const std::vector<int>& background_indices);

}  // namespace owb
