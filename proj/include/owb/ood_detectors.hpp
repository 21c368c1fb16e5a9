#pragma once

#include "owb/data.hpp"
#include "owb/model.hpp"
#include "owb/train.hpp"
#include "owb/verdict.hpp"

#include <string_view>
#include <vector>

namespace owb {

struct OdinConfig {
  double temperature = 1.0;
  double epsilon = 0.0;  // input-preprocessing magnitude, [0,1] pixel scale
  void validate() const;
};

/// max_i softmax(logits(x))_i.
double baseline_score(const Classifier& model, const Tensor& x);
std::vector<double> baseline_scores(const Classifier& model, const std::vector<Tensor>& xs);

/// Temperature-scaled max softmax after one signed step that raises it:
///   x' = clamp(x - eps * sign(grad_x[-log max softmax(phi(x)/T)]), 0, 1).
double odin_score(const Classifier& model, const Tensor& x, const OdinConfig& cfg);
std::vector<double> odin_scores(const Classifier& model, const std::vector<Tensor>& xs, const OdinConfig& cfg);

struct OdinCandidate {
  OdinConfig config;
  double auroc = 0;
};

struct OdinSelection {
  OdinConfig best;
  double best_auroc = 0;
  std::vector<OdinCandidate> grid;  // every evaluated setting, in grid order
};

inline const std::vector<double> kOdinTemperatures{1, 10, 100, 1000};
inline const std::vector<double> kOdinEpsilons{0, 0.0014, 0.0028, 0.0056};

/// Grid search by AUROC of in-distribution (positive) vs OOD (negative)
/// validation data. Ties keep the earlier grid point.
OdinSelection tune_odin(const Classifier& model, const std::vector<Tensor>& val_in, const std::vector<Tensor>& val_out,
                        const std::vector<double>& temperatures = kOdinTemperatures,
                        const std::vector<double>& epsilons = kOdinEpsilons);

/// Cross-entropy on `in_data` plus beta * KL(uniform || g(x_ood)) on proxy
/// batches of the same size, drawn by a seeded cycle over `ood_proxy`.
TrainReport train_confidence_calibrated(Classifier& model, const LabeledDataset& in_data,
                                        const UnlabeledDataset& ood_proxy, double beta, const TrainConfig& cfg);

/// Per-row KL(uniform || softmax(logits)).
Var uniform_kl(Var logits);

/// `calibrated` scores like `baseline`; it names a model trained with
/// train_confidence_calibrated.
enum class OodDetectorKind { baseline, odin, calibrated };

std::string_view to_string(OodDetectorKind kind);
OodDetectorKind parse_ood_detector(std::string_view name);

std::vector<double> ood_scores(const Classifier& model, OodDetectorKind kind, const OdinConfig& cfg,
                               const std::vector<Tensor>& xs);

/// Flags OOD when score < threshold.
DetectorVerdict detect(const Classifier& model, OodDetectorKind kind, const OdinConfig& cfg, double threshold,
                       const Tensor& x);

}  // namespace owb
