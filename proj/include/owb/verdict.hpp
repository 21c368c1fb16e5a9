#pragma once

#include <span>
#include <string_view>

namespace owb {

/// Which side of the threshold is flagged.
///   ood:         flagged when score <  threshold (low confidence means out-of-distribution)
///   adversarial: flagged when score >  threshold (large squeeze/reconstruction distance)
/// A score equal to the threshold is never flagged.
enum class Polarity { ood, adversarial };

std::string_view to_string(Polarity p);

struct DetectorVerdict {
  double score = 0;
  double threshold = 0;
  Polarity polarity = Polarity::ood;
  bool flagged = false;

  bool is_ood() const { return polarity == Polarity::ood && flagged; }
  bool is_adversarial() const { return polarity == Polarity::adversarial && flagged; }
};

DetectorVerdict make_verdict(double score, double threshold, Polarity polarity);

/// Largest threshold t with fraction(scores >= t) >= target_tpr.
double calibrate_threshold(std::span<const double> scores_in, double target_tpr = 0.95);

/// Smallest threshold t with fraction(benign > t) <= fpr, i.e. the benign
/// false-positive rate of an adversarial-polarity detector stays within `fpr`.
double calibrate_fpr_threshold(std::span<const double> benign_scores, double fpr = 0.05);

/// P(score_pos > score_neg) + 0.5 P(tie): area under the ROC curve when
/// positives are expected to score higher.
double auroc(std::span<const double> positives, std::span<const double> negatives);

}  // namespace owb
