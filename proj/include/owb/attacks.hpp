#pragma once

#include "owb/adv_detectors.hpp"
#include "owb/model.hpp"
#include "owb/random.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace owb {

enum class Norm { linf, l2 };
enum class LossKind { xent, cw };
enum class Targeting { rand, least_likely };
/// How a gradient becomes a step: sign (Linf), unit-L2 direction, or Adam moments.
enum class StepRule { sign, normalized, adam };

std::string_view to_string(Norm n);
std::string_view to_string(LossKind k);
std::string_view to_string(Targeting t);
Norm parse_norm(std::string_view name);
LossKind parse_loss_kind(std::string_view name);
Targeting parse_targeting(std::string_view name);

/// { x : d(x, x0) <= epsilon } intersected with the [0,1] box.
struct PerturbationConstraint {
  Norm norm = Norm::linf;
  double epsilon = 0;  // [0,1] pixel scale
  void validate() const;
};

/// True when `x` is inside the box and within epsilon + tol of `x0`.
bool is_feasible(const Tensor& x, const Tensor& x0, const PerturbationConstraint& c, double tol = 1e-9);
double distance(const Tensor& a, const Tensor& b, Norm norm);

struct AttackConfig {
  LossKind loss = LossKind::xent;
  double kappa = 0;
  PerturbationConstraint constraint;
  /// 0 selects the default: epsilon/10 for Linf, epsilon/5 for L2.
  double step_size = 0;
  int max_iters = 100;
  /// Stop when the best loss improved by less than plateau_min_delta
  /// (relative) over the last plateau_patience iterations. 0 disables.
  int plateau_patience = 20;
  double plateau_min_delta = 1e-4;
  Targeting targeting = Targeting::rand;
  std::uint64_t seed = 0;

  double effective_step() const;
  void validate() const;
};

struct AttackResult {
  Tensor adv_example;
  Tensor start;
  int target = 0;
  bool success = false;  // classified as target, plus evasion for detector-aware attacks
  double target_confidence = 0;
  int predicted = 0;
  int iterations_used = 0;
  long queries_used = 0;  // black-box only
  double initial_loss = 0;
  double final_loss = 0;
  bool zero_gradient_start = false;
  /// Detector score of adv_example for detector-aware attacks.
  std::optional<double> detector_score;
  /// Fraction of fresh transform draws classified as target (EOT).
  std::optional<double> transform_success;
};

/// rand: uniform over the first `num_candidates` classes other than f(x);
/// least_likely: argmin of g(x) over those classes. `num_candidates` <= 0
/// means the in-distribution classes of the model.
int select_target(const Classifier& model, const Tensor& x, Targeting mode, std::uint64_t seed,
                  int num_candidates = 0);
std::vector<int> select_targets(const Classifier& model, const std::vector<Tensor>& xs, Targeting mode,
                                std::uint64_t seed, int num_candidates = 0);

/// Per-row adversarial loss of logits (N,C): cross-entropy at the target, or
/// the margin max(max_{i != T} z_i - z_T, -kappa).
Var adv_loss(Var logits, std::span<const int> targets, LossKind kind, double kappa);
double adv_loss(const Classifier& model, const Tensor& x, int target, LossKind kind, double kappa);
/// The same losses from a probability vector: logit gaps equal log-probability gaps.
double adv_loss_from_probs(const Tensor& probs, int target, LossKind kind, double kappa);

/// Euclidean-nearest point of the feasible set for L2; clamp for Linf.
Tensor project(const Tensor& x, const Tensor& x0, const PerturbationConstraint& c);

/// One PGD step from `x` using `grad`.
Tensor pgd_step(const Tensor& x, const Tensor& x0, const Tensor& grad, const AttackConfig& cfg);

// --- Generic engine -----------------------------------------------------------

/// Loss and input gradient for a batch of current iterates. `ids` are the
/// positions of the rows in the attack's start list.
struct ObjectiveValue {
  std::vector<double> loss;
  Tensor grad;  // same shape as the batch
  /// Optional per-row success of the current iterate. When given, the engine
  /// keeps the lowest-loss successful iterate over any unsuccessful one.
  std::vector<bool> success;
};
using Objective =
    std::function<ObjectiveValue(const Tensor& batch, std::span<const int> targets, std::span<const std::size_t> ids)>;

struct EngineOptions {
  StepRule rule = StepRule::sign;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct EngineTrace {
  Tensor best;
  double initial_loss = 0;
  double best_loss = 0;
  int iterations = 0;
  bool zero_gradient_start = false;
  bool best_success = false;  // objective-reported success of `best`
};

/// Projected descent on `objective`, independently per start, tracking the
/// best-loss iterate. Rows drop out of the batch once they plateau.
std::vector<EngineTrace> run_pgd_engine(const std::vector<Tensor>& starts, std::span<const int> targets,
                                        const AttackConfig& cfg, const EngineOptions& opts, const Objective& objective);

/// Gradient of adv_loss for a batch, through the model.
Objective whitebox_objective(const Classifier& model, const AttackConfig& cfg);

// --- White-box PGD ------------------------------------------------------------------

AttackResult pgd_attack(const Classifier& model, const Tensor& x0, int target, const AttackConfig& cfg);
/// Batched pgd_attack; each row behaves as if attacked alone, up to rounding
/// differences of batched matrix products.
std::vector<AttackResult> pgd_attack_batch(const Classifier& model, const std::vector<Tensor>& starts,
                                           std::span<const int> targets, const AttackConfig& cfg);

// --- BPDA against feature squeezing --------------------------------------------------

struct BpdaConfig {
  SqueezerConfig squeezers;
  double threshold = 0;        // calibrated feature-squeezing threshold
  double squeeze_weight = 1;   // weight of the squeezed-branch losses
};

/// L2 Adam attack: loss = adv_loss(x) + w * sum_s adv_loss(s(x)), with each
/// squeezer s passed through as the identity on the backward pass. When every
/// branch predicts the target confidently the squeezing distance collapses.
/// Plateau stopping is off; all max_iters steps run. Success requires the
/// target class and a detector score <= threshold.
std::vector<AttackResult> bpda_attack(const Classifier& model, const BpdaConfig& bpda, const std::vector<Tensor>& starts,
                                      std::span<const int> targets, const AttackConfig& cfg);

// --- MagNet-adaptive -----------------------------------------------------------------

struct MagnetAttackConfig {
  double lambda = 1.0;  // weight of the reconstruction distance
  /// Also apply the adversarial loss to the classification of the reformed input.
  bool attack_reformer = true;
  /// Optional preprocessing of the start: x0 <- x0 * (1 - pixel_shift).
  double pixel_shift = 0.0;
};

/// Minimizes adv_loss(f(x)) + [attack_reformer] adv_loss(f(reform(x))) +
/// lambda * recon_norm(x - AE(x)); with lambda = 0 and no reformer term this
/// is plain PGD. The lowest-loss iterate that passes the MagNet pipeline is
/// kept when one exists. Success requires the target class on the reformed
/// input and a MagNet score <= threshold.
std::vector<AttackResult> magnet_adaptive_attack(const Classifier& model, const MagnetDetector& magnet,
                                                 const std::vector<Tensor>& starts, std::span<const int> targets,
                                                 const AttackConfig& cfg, const MagnetAttackConfig& mcfg);

/// Applies the MagNet success rule to results of any attack: `predicted` and
/// `target_confidence` are replaced by the classifier's output on the reformed input.
void apply_magnet_success(const Classifier& model, const MagnetDetector& magnet, std::vector<AttackResult>& results);
/// Applies the feature-squeezing success rule to results of any attack.
void apply_squeeze_success(const Classifier& model, const SqueezerConfig& squeezers, double threshold,
                           std::vector<AttackResult>& results);

// --- Black-box -----------------------------------------------------------------------

/// Raised by a QueryOracle when its budget is exhausted or the backend fails;
/// carries the number of queries spent so far.
class OracleError : public std::runtime_error {
 public:
  OracleError(const std::string& what, long queries) : std::runtime_error(what), queries_(queries) {}
  long queries() const { return queries_; }

 private:
  long queries_;
};

/// Counts calls to a probability-vector oracle x -> g(x).
class QueryOracle {
 public:
  using Backend = std::function<Tensor(const Tensor&)>;
  explicit QueryOracle(Backend backend, long budget = -1) : backend_(std::move(backend)), budget_(budget) {}

  Tensor operator()(const Tensor& x);
  long queries() const { return queries_; }

 private:
  Backend backend_;
  long budget_;
  long queries_ = 0;
};

QueryOracle local_oracle(const Classifier& model, long budget = -1);

struct GradientEstimate {
  Tensor gradient;
  long queries = 0;
};

/// Seeded random pixel groups of `group_size` (last one ragged); each group
/// gets one central difference along its +/-h indicator direction, shared by
/// all of its pixels. Costs 2 * groups queries.
GradientEstimate estimate_gradient_fd(QueryOracle& oracle, const Tensor& x, LossKind kind, int target, double kappa,
                                      int group_size, double h, std::uint64_t seed);
/// Same estimator over an arbitrary scalar loss of the oracle output.
GradientEstimate estimate_gradient_fd(QueryOracle& oracle, const Tensor& x,
                                      const std::function<double(const Tensor&)>& loss_of_output, int group_size,
                                      double h, std::uint64_t seed);

struct BlackBoxConfig {
  int group_size = 8;
  double h = 1e-3;
};

/// PGD with estimated gradients. queries_used counts every oracle call.
AttackResult blackbox_pgd_attack(QueryOracle& oracle, const Tensor& x0, int target, const AttackConfig& cfg,
                                 const BlackBoxConfig& bb);

// --- Expectation over transformations -------------------------------------------------

struct EotTransform {
  double brightness = 0;  // additive
  double scale = 1;
  double rotation_deg = 0;
  bool is_identity() const { return brightness == 0 && scale == 1 && rotation_deg == 0; }
};

using TransformSampler = std::function<EotTransform(Rng&)>;

/// brightness U[-0.2,0.2], scale U[0.8,1.2], rotation U[-15,15] degrees.
TransformSampler default_transform_sampler();
TransformSampler identity_sampler();

/// Nearest-neighbour source index of every output pixel of a (C,H,W) image; -1 reads as 0.
std::vector<Index> transform_source(const Shape& image_shape, const EotTransform& t);
/// Warp, then brightness shift, then clamp to [0,1].
Tensor apply_transform(const Tensor& x, const EotTransform& t);

/// Each step averages adv_loss over `samples_per_step` draws. Warps use the
/// exact gather gradient and the final clamp passes gradients straight through.
/// transform_success is measured on `eval_draws` fresh draws.
std::vector<AttackResult> eot_attack(const Classifier& model, const std::vector<Tensor>& starts,
                                     std::span<const int> targets, const AttackConfig& cfg,
                                     const TransformSampler& sampler, int samples_per_step, int eval_draws = 100);

/// Fraction of `draws` transforms of `x` classified as `target`.
double transform_success_rate(const Classifier& model, const Tensor& x, int target, const TransformSampler& sampler,
                              int draws, std::uint64_t seed);

}  // namespace owb
