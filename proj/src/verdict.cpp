#include "owb/verdict.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace owb {

std::string_view to_string(Polarity p) { return p == Polarity::ood ? "ood" : "adversarial"; }

DetectorVerdict make_verdict(double score, double threshold, Polarity polarity) {
  DetectorVerdict v{score, threshold, polarity, false};
  v.flagged = polarity == Polarity::ood ? score < threshold : score > threshold;
  return v;
}

double calibrate_threshold(std::span<const double> scores_in, double target_tpr) {
  if (scores_in.empty()) throw std::invalid_argument("calibrate_threshold: no scores");
  if (!(target_tpr > 0 && target_tpr <= 1)) throw std::invalid_argument("calibrate_threshold: tpr must be in (0,1]");
  std::vector<double> s(scores_in.begin(), scores_in.end());
  std::sort(s.begin(), s.end(), std::greater<>());
  const auto n = static_cast<double>(s.size());
  // Need at least k scores >= t; the k-th largest is the largest such t.
  auto k = static_cast<std::size_t>(std::ceil(target_tpr * n - 1e-9));
  k = std::clamp<std::size_t>(k, 1, s.size());
  return s[k - 1];
}

double calibrate_fpr_threshold(std::span<const double> benign_scores, double fpr) {
  if (benign_scores.empty()) throw std::invalid_argument("calibrate_fpr_threshold: no scores");
  if (!(fpr >= 0 && fpr < 1)) throw std::invalid_argument("calibrate_fpr_threshold: fpr must be in [0,1)");
  std::vector<double> s(benign_scores.begin(), benign_scores.end());
  std::sort(s.begin(), s.end());
  // At most `allowed` scores may exceed t; t is the (n - allowed)-th smallest.
  const auto allowed = static_cast<std::size_t>(std::floor(fpr * static_cast<double>(s.size()) + 1e-9));
  return s[s.size() - 1 - allowed];
}

double auroc(std::span<const double> positives, std::span<const double> negatives) {
  if (positives.empty() || negatives.empty()) throw std::invalid_argument("auroc: need both classes");
  std::vector<double> neg(negatives.begin(), negatives.end());
  std::sort(neg.begin(), neg.end());
  double total = 0;
  for (double p : positives) {
    const auto lo = std::lower_bound(neg.begin(), neg.end(), p);
    const auto hi = std::upper_bound(neg.begin(), neg.end(), p);
    total += static_cast<double>(lo - neg.begin()) + 0.5 * static_cast<double>(hi - lo);
  }
  return total / (static_cast<double>(positives.size()) * static_cast<double>(neg.size()));
}

}  // namespace owb
