#include "owb/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace owb {

namespace {

double sign_of(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

Tensor stack_rows(const std::vector<Tensor>& xs, const std::vector<std::size_t>& rows) {
  std::vector<const Tensor*> items;
  items.reserve(rows.size());
  for (std::size_t r : rows) items.push_back(&xs[r]);
  return stack(items);
}

void check_starts(const std::vector<Tensor>& starts, std::span<const int> targets) {
  if (starts.size() != targets.size()) {
    throw std::invalid_argument("attack: " + std::to_string(starts.size()) + " starts but " +
                                std::to_string(targets.size()) + " targets");
  }
  for (const Tensor& x : starts) {
    if (x.size() > 0 && (x.data().minCoeff() < 0.0 || x.data().maxCoeff() > 1.0)) {
      throw std::invalid_argument("attack: start point outside [0,1]");
    }
  }
}

void check_targets(const Classifier& model, std::span<const int> targets) {
  for (int t : targets) {
    if (t < 0 || t >= model.num_classes()) {
      throw std::out_of_range("attack target " + std::to_string(t) + " outside [0," +
                              std::to_string(model.num_classes()) + ")");
    }
  }
}

/// Fills adv_example, prediction and plain targeted success from engine traces.
std::vector<AttackResult> finish(const Classifier& model, const std::vector<Tensor>& starts,
                                 std::span<const int> targets, std::vector<EngineTrace>&& traces) {
  std::vector<AttackResult> out(starts.size());
  std::vector<Tensor> best;
  best.reserve(traces.size());
  for (auto& t : traces) best.push_back(t.best);
  const auto c = static_cast<Index>(model.num_classes());
  constexpr std::size_t chunk = 256;
  for (std::size_t begin = 0; begin < best.size(); begin += chunk) {
    const std::size_t end = std::min(best.size(), begin + chunk);
    std::vector<std::size_t> rows;
    for (std::size_t i = begin; i < end; ++i) rows.push_back(i);
    const Tensor g = confidences(model, stack_rows(best, rows));
    for (std::size_t i = begin; i < end; ++i) {
      const Vector row = g.data().segment(static_cast<Index>(i - begin) * c, c);
      AttackResult& r = out[i];
      r.adv_example = std::move(best[i]);
      r.start = starts[i];
      r.target = targets[i];
      r.predicted = argmax(row);
      r.target_confidence = row[r.target];
      r.success = r.predicted == r.target;
      r.iterations_used = traces[i].iterations;
      r.initial_loss = traces[i].initial_loss;
      r.final_loss = traces[i].best_loss;
      r.zero_gradient_start = traces[i].zero_gradient_start;
    }
  }
  return out;
}

}  // namespace

std::string_view to_string(Norm n) { return n == Norm::linf ? "linf" : "l2"; }
std::string_view to_string(LossKind k) { return k == LossKind::xent ? "xent" : "cw"; }
std::string_view to_string(Targeting t) { return t == Targeting::rand ? "rand" : "ll"; }

Norm parse_norm(std::string_view name) {
  if (name == "linf" || name == "Linf") return Norm::linf;
  if (name == "l2" || name == "L2") return Norm::l2;
  throw std::invalid_argument("unknown norm '" + std::string(name) + "'");
}

LossKind parse_loss_kind(std::string_view name) {
  if (name == "xent") return LossKind::xent;
  if (name == "cw") return LossKind::cw;
  throw std::invalid_argument("unknown loss '" + std::string(name) + "'");
}

Targeting parse_targeting(std::string_view name) {
  if (name == "rand") return Targeting::rand;
  if (name == "ll" || name == "LL") return Targeting::least_likely;
  throw std::invalid_argument("unknown targeting '" + std::string(name) + "'");
}

void PerturbationConstraint::validate() const {
  if (!(epsilon >= 0) || !std::isfinite(epsilon)) throw std::invalid_argument("epsilon must be finite and >= 0");
}

double distance(const Tensor& a, const Tensor& b, Norm norm) {
  return norm == Norm::linf ? linf_distance(a, b) : l2_distance(a, b);
}

bool is_feasible(const Tensor& x, const Tensor& x0, const PerturbationConstraint& c, double tol) {
  if (x.shape() != x0.shape()) return false;
  if (x.size() > 0 && (x.data().minCoeff() < 0.0 || x.data().maxCoeff() > 1.0)) return false;
  return distance(x, x0, c.norm) <= c.epsilon + tol;
}

double AttackConfig::effective_step() const {
  if (step_size > 0) return step_size;
  return constraint.norm == Norm::linf ? constraint.epsilon / 10.0 : constraint.epsilon / 5.0;
}

void AttackConfig::validate() const {
  constraint.validate();
  if (max_iters < 1) throw std::invalid_argument("max_iters must be >= 1");
  if (step_size < 0) throw std::invalid_argument("step size must be > 0 (or 0 for the default)");
  if (kappa < 0) throw std::invalid_argument("kappa must be >= 0");
  if (plateau_patience < 0) throw std::invalid_argument("plateau patience must be >= 0");
  if (plateau_min_delta < 0) throw std::invalid_argument("plateau min delta must be >= 0");
}

// --- Targets and losses -------------------------------------------------------

namespace {

int pick_target(const Vector& g, Targeting mode, Rng& rng, int candidates) {
  const int pred = argmax(g);
  if (mode == Targeting::least_likely) return argmin(g.head(candidates));
  const bool pred_inside = pred < candidates;
  const auto choices = static_cast<std::uint64_t>(candidates - (pred_inside ? 1 : 0));
  auto t = static_cast<int>(rng.below(choices));
  if (pred_inside && t >= pred) ++t;
  return t;
}

int candidate_count(const Classifier& model, int requested) {
  const int k = requested > 0 ? std::min(requested, model.num_classes()) : model.in_classes();
  if (k < 2) throw std::invalid_argument("select_target: need at least two candidate classes");
  return k;
}

}  // namespace

int select_target(const Classifier& model, const Tensor& x, Targeting mode, std::uint64_t seed, int num_candidates) {
  const int k = candidate_count(model, num_candidates);
  const Tensor g = confidences(model, x);
  Rng rng(seed);
  return pick_target(g.data(), mode, rng, k);
}

std::vector<int> select_targets(const Classifier& model, const std::vector<Tensor>& xs, Targeting mode,
                                std::uint64_t seed, int num_candidates) {
  const int k = candidate_count(model, num_candidates);
  std::vector<int> out;
  out.reserve(xs.size());
  Rng master(seed);
  const Index c = model.num_classes();
  constexpr std::size_t chunk = 256;
  for (std::size_t begin = 0; begin < xs.size(); begin += chunk) {
    const std::size_t end = std::min(xs.size(), begin + chunk);
    std::vector<std::size_t> rows;
    for (std::size_t i = begin; i < end; ++i) rows.push_back(i);
    const Tensor g = confidences(model, stack_rows(xs, rows));
    for (std::size_t i = begin; i < end; ++i) {
      Rng rng = master.fork(i);
      out.push_back(pick_target(g.data().segment(static_cast<Index>(i - begin) * c, c), mode, rng, k));
    }
  }
  return out;
}

Var adv_loss(Var z, std::span<const int> targets, LossKind kind, double kappa) {
  if (kind == LossKind::xent) return cross_entropy(z, targets);
  if (z.shape().size() != 2) throw ShapeError("adv_loss: expected logits (N,C), got " + to_string(z.shape()));
  const Index n = z.shape()[0], c = z.shape()[1];
  if (c < 2) throw ShapeError("adv_loss: the margin loss needs at least two classes");
  std::vector<int> runner_up(static_cast<std::size_t>(n));
  for (Index r = 0; r < n; ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= c) throw std::out_of_range("adv_loss: target " + std::to_string(t) + " out of range");
    int best = -1;
    for (Index i = 0; i < c; ++i) {
      if (i == t) continue;
      if (best < 0 || z.value()[r * c + i] > z.value()[r * c + best]) best = static_cast<int>(i);
    }
    runner_up[static_cast<std::size_t>(r)] = best;
  }
  Var gap = pick(z, runner_up) - pick(z, targets);
  // max(gap, -kappa) = relu(gap + kappa) - kappa
  return add_scalar(relu(add_scalar(gap, kappa)), -kappa);
}

double adv_loss(const Classifier& model, const Tensor& x, int target, LossKind kind, double kappa) {
  Tape tape;
  Var z = logits(model, tape, tape.constant(as_batch(model.network(), x)));
  const int t[] = {target};
  return sum(adv_loss(z, t, kind, kappa)).value().item();
}

double adv_loss_from_probs(const Tensor& probs, int target, LossKind kind, double kappa) {
  if (target < 0 || target >= probs.size()) throw std::out_of_range("adv_loss_from_probs: target out of range");
  auto logp = [&](Index i) { return std::log(std::max(probs[i], 1e-300)); };
  if (kind == LossKind::xent) return -logp(target);
  double other = -std::numeric_limits<double>::infinity();
  for (Index i = 0; i < probs.size(); ++i) {
    if (i != target) other = std::max(other, logp(i));
  }
  return std::max(other - logp(target), -kappa);
}

// --- Projection and steps ----------------------------------------------------------

Tensor project(const Tensor& x, const Tensor& x0, const PerturbationConstraint& c) {
  if (x.shape() != x0.shape()) {
    throw ShapeError("project: shapes " + to_string(x.shape()) + " and " + to_string(x0.shape()) + " differ");
  }
  const double eps = c.epsilon;
  Tensor out(x.shape());
  if (c.norm == Norm::linf) {
    for (Index i = 0; i < x.size(); ++i) out[i] = std::clamp(std::clamp(x[i], x0[i] - eps, x0[i] + eps), 0.0, 1.0);
    return out;
  }
  // Euclidean projection onto ball ∩ box: y(l) = clamp((x + l x0) / (1 + l), 0, 1)
  // with the multiplier l >= 0 chosen so the ball constraint is tight.
  auto point = [&](double l, Tensor& y) {
    for (Index i = 0; i < x.size(); ++i) y[i] = std::clamp((x[i] + l * x0[i]) / (1.0 + l), 0.0, 1.0);
    return (y.data() - x0.data()).norm();
  };
  if (point(0.0, out) <= eps) return out;
  if (eps == 0) return x0;
  double lo = 0, hi = 1;
  while (point(hi, out) > eps) {
    lo = hi;
    hi *= 2;
  }
  for (int it = 0; it < 200 && hi - lo > 1e-15 * std::max(1.0, hi); ++it) {
    const double mid = 0.5 * (lo + hi);
    if (point(mid, out) > eps) lo = mid; else hi = mid;
  }
  point(hi, out);
  return out;
}

Tensor pgd_step(const Tensor& x, const Tensor& x0, const Tensor& grad, const AttackConfig& cfg) {
  const double alpha = cfg.effective_step();
  Tensor next = x;
  if (cfg.constraint.norm == Norm::linf) {
    for (Index i = 0; i < x.size(); ++i) next[i] -= alpha * sign_of(grad[i]);
  } else {
    const double g = grad.data().norm();
    if (g > 0) next.data() -= (alpha / g) * grad.data();
  }
  return project(next, x0, cfg.constraint);
}

// --- Engine --------------------------------------------------------------------------

std::vector<EngineTrace> run_pgd_engine(const std::vector<Tensor>& starts, std::span<const int> targets,
                                        const AttackConfig& cfg, const EngineOptions& opts,
                                        const Objective& objective) {
  cfg.validate();
  check_starts(starts, targets);
  const std::size_t n = starts.size();
  const double alpha = cfg.effective_step();

  struct State {
    Tensor x;
    Tensor m, v;  // Adam moments
    std::vector<double> best_history;
    bool active = true;
  };
  std::vector<State> st(n);
  std::vector<EngineTrace> traces(n);
  for (std::size_t i = 0; i < n; ++i) {
    st[i].x = starts[i];
    if (opts.rule == StepRule::adam) {
      st[i].m = Tensor(starts[i].shape());
      st[i].v = Tensor(starts[i].shape());
    }
  }

  for (int t = 0;; ++t) {
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < n; ++i) {
      if (st[i].active) ids.push_back(i);
    }
    if (ids.empty()) break;
    std::vector<int> tg;
    for (std::size_t i : ids) tg.push_back(targets[i]);
    std::vector<const Tensor*> items;
    for (std::size_t i : ids) items.push_back(&st[i].x);
    const Tensor batch = stack(items);
    const ObjectiveValue val = objective(batch, tg, ids);
    if (val.loss.size() != ids.size() || val.grad.shape() != batch.shape() ||
        (!val.success.empty() && val.success.size() != ids.size())) {
      throw std::logic_error("attack objective returned mismatched loss/gradient");
    }

    for (std::size_t k = 0; k < ids.size(); ++k) {
      const std::size_t i = ids[k];
      State& s = st[i];
      EngineTrace& tr = traces[i];
      const double loss = val.loss[k];
      const Tensor grad = unstack_row(val.grad, static_cast<Index>(k));
      const bool ok = !val.success.empty() && val.success[k];
      if (t == 0) {
        tr.initial_loss = loss;
        tr.best_loss = loss;
        tr.best = s.x;
        tr.best_success = ok;
        tr.zero_gradient_start = grad.data().isZero(0.0);
      } else if ((ok && !tr.best_success) || (ok == tr.best_success && loss < tr.best_loss)) {
        tr.best_loss = loss;
        tr.best = s.x;
        tr.best_success = ok;
      }
      s.best_history.push_back(tr.best_loss);

      bool stop = t >= cfg.max_iters;
      const auto p = static_cast<std::size_t>(cfg.plateau_patience);
      if (!stop && p > 0 && s.best_history.size() > p) {
        const double before = s.best_history[s.best_history.size() - 1 - p];
        stop = before - tr.best_loss <= cfg.plateau_min_delta * std::max(std::abs(before), 1e-12);
      }
      if (stop) {
        s.active = false;
        continue;
      }

      Tensor next = s.x;
      switch (opts.rule) {
        case StepRule::sign:
          for (Index j = 0; j < next.size(); ++j) next[j] -= alpha * sign_of(grad[j]);
          break;
        case StepRule::normalized: {
          const double g = grad.data().norm();
          if (g > 0) next.data() -= (alpha / g) * grad.data();
          break;
        }
        case StepRule::adam: {
          const double step = static_cast<double>(tr.iterations + 1);
          s.m.data() = opts.adam_beta1 * s.m.data() + (1 - opts.adam_beta1) * grad.data();
          s.v.data() = opts.adam_beta2 * s.v.data() + (1 - opts.adam_beta2) * grad.data().cwiseAbs2();
          const double c1 = 1 - std::pow(opts.adam_beta1, step), c2 = 1 - std::pow(opts.adam_beta2, step);
          // Adam direction rescaled to length alpha in the constraint norm.
          const Vector u = ((s.m.data().array() / c1) / ((s.v.data().array() / c2).sqrt() + opts.adam_eps)).matrix();
          const double len = cfg.constraint.norm == Norm::l2 ? u.norm() : u.cwiseAbs().maxCoeff();
          if (len > 0) next.data() -= (alpha / len) * u;
          break;
        }
      }
      s.x = project(next, starts[i], cfg.constraint);
      ++tr.iterations;
    }
  }
  return traces;
}

Objective whitebox_objective(const Classifier& model, const AttackConfig& cfg) {
  return [&model, cfg](const Tensor& batch, std::span<const int> targets, std::span<const std::size_t>) {
    Tape tape;
    Var x = tape.variable(batch);
    Var l = adv_loss(logits(model, tape, x), targets, cfg.loss, cfg.kappa);
    ObjectiveValue out;
    out.loss.assign(l.value().raw(), l.value().raw() + l.value().size());
    out.grad = tape.backward(sum(l)).of(x);
    return out;
  };
}

std::vector<AttackResult> pgd_attack_batch(const Classifier& model, const std::vector<Tensor>& starts,
                                           std::span<const int> targets, const AttackConfig& cfg) {
  check_targets(model, targets);
  EngineOptions opts;
  opts.rule = cfg.constraint.norm == Norm::linf ? StepRule::sign : StepRule::normalized;
  auto traces = run_pgd_engine(starts, targets, cfg, opts, whitebox_objective(model, cfg));
  return finish(model, starts, targets, std::move(traces));
}

AttackResult pgd_attack(const Classifier& model, const Tensor& x0, int target, const AttackConfig& cfg) {
  if (x0.shape() != model.input_shape()) {
    throw ShapeError("pgd_attack: start " + to_string(x0.shape()) + " does not match " +
                     to_string(model.input_shape()));
  }
  const int t[] = {target};
  return pgd_attack_batch(model, {x0}, t, cfg).front();
}

// --- BPDA ----------------------------------------------------------------------------

void apply_squeeze_success(const Classifier& model, const SqueezerConfig& squeezers, double threshold,
                           std::vector<AttackResult>& results) {
  std::vector<Tensor> adv;
  for (const auto& r : results) adv.push_back(r.adv_example);
  const auto scores = fs_scores(model, adv, squeezers);
  for (std::size_t i = 0; i < results.size(); ++i) {
    results[i].detector_score = scores[i];
    results[i].success = results[i].predicted == results[i].target && scores[i] <= threshold;
  }
}

std::vector<AttackResult> bpda_attack(const Classifier& model, const BpdaConfig& bpda, const std::vector<Tensor>& starts,
                                      std::span<const int> targets, const AttackConfig& cfg) {
  if (cfg.constraint.norm != Norm::l2) throw std::invalid_argument("bpda_attack: expects an L2 constraint");
  bpda.squeezers.validate();
  check_targets(model, targets);
  Objective obj = [&](const Tensor& batch, std::span<const int> tg, std::span<const std::size_t>) {
    Tape tape;
    Var x = tape.variable(batch);
    Var z = logits(model, tape, x);
    Var loss = adv_loss(z, tg, cfg.loss, cfg.kappa);
    const Tensor pv = softmax(z).value();
    const Index rows = pv.dim(0), c = pv.dim(1);
    const auto p = pv.matrix(rows, c);
    Vector score = Vector::Zero(rows);
    for (Squeezer s : bpda.squeezers.enabled) {
      Var xs = straight_through(x, apply_squeezer(batch, s, bpda.squeezers));
      Var zs = logits(model, tape, xs);
      loss = loss + scale(adv_loss(zs, tg, cfg.loss, cfg.kappa), bpda.squeeze_weight);
      const Tensor psv = softmax(zs).value();
      const auto ps = psv.matrix(rows, c);
      for (Index r = 0; r < rows; ++r) score[r] = std::max(score[r], (p.row(r) - ps.row(r)).cwiseAbs().sum());
    }
    ObjectiveValue out;
    for (Index r = 0; r < rows; ++r) {
      out.success.push_back(argmax(p.row(r).transpose()) == tg[static_cast<std::size_t>(r)] && score[r] <= bpda.threshold);
    }
    out.loss.assign(loss.value().raw(), loss.value().raw() + loss.value().size());
    out.grad = tape.backward(sum(loss)).of(x);
    return out;
  };
  // Squeezed branches make the loss piecewise constant, so plateaus say little.
  AttackConfig run = cfg;
  run.plateau_patience = 0;
  EngineOptions opts;
  opts.rule = StepRule::adam;
  auto results = finish(model, starts, targets, run_pgd_engine(starts, targets, run, opts, obj));
  apply_squeeze_success(model, bpda.squeezers, bpda.threshold, results);
  return results;
}

// --- MagNet ----------------------------------------------------------------------------

void apply_magnet_success(const Classifier& model, const MagnetDetector& magnet, std::vector<AttackResult>& results) {
  std::vector<Tensor> adv;
  for (const auto& r : results) adv.push_back(r.adv_example);
  const auto scores = magnet_scores(magnet, adv);
  // The deployed pipeline classifies the reformed input.
  const Tensor g = confidences(model, stack(magnet_reform(adv, magnet)));
  const Index c = g.dim(1);
  for (std::size_t i = 0; i < results.size(); ++i) {
    AttackResult& r = results[i];
    const Vector row = g.data().segment(static_cast<Index>(i) * c, c);
    r.detector_score = scores[i];
    r.predicted = argmax(row);
    r.target_confidence = row[r.target];
    r.success = r.predicted == r.target && scores[i] <= magnet.threshold;
  }
}

std::vector<AttackResult> magnet_adaptive_attack(const Classifier& model, const MagnetDetector& magnet,
                                                 const std::vector<Tensor>& starts, std::span<const int> targets,
                                                 const AttackConfig& cfg, const MagnetAttackConfig& mcfg) {
  if (!(mcfg.lambda >= 0)) throw std::invalid_argument("magnet_adaptive_attack: lambda must be >= 0");
  if (!(mcfg.pixel_shift >= 0 && mcfg.pixel_shift < 1)) {
    throw std::invalid_argument("magnet_adaptive_attack: pixel shift must be in [0,1)");
  }
  check_targets(model, targets);
  std::vector<Tensor> shifted = starts;
  if (mcfg.pixel_shift > 0) {
    for (Tensor& x : shifted) x.data() *= 1.0 - mcfg.pixel_shift;
  }
  Objective obj = [&](const Tensor& batch, std::span<const int> tg, std::span<const std::size_t>) {
    Tape tape;
    Var x = tape.variable(batch);
    Var loss = adv_loss(logits(model, tape, x), tg, cfg.loss, cfg.kappa);
    ObjectiveValue out;
    if (mcfg.lambda > 0 || mcfg.attack_reformer) {
      Var recon = magnet.autoencoder.forward(tape, x);
      Var dist = magnet.norm == ReconNorm::l1 ? l1_norm_rows(x - recon) : sqrt(l2_norm_squared_rows(x - recon));
      Var zr = logits(model, tape, clamp(recon, 0.0, 1.0));
      if (mcfg.attack_reformer) loss = loss + adv_loss(zr, tg, cfg.loss, cfg.kappa);
      if (mcfg.lambda > 0) loss = loss + scale(dist, mcfg.lambda);
      const Index rows = batch.dim(0), c = zr.value().dim(1);
      const auto zm = zr.value().matrix(rows, c);
      for (Index r = 0; r < rows; ++r) {
        out.success.push_back(argmax(zm.row(r).transpose()) == tg[static_cast<std::size_t>(r)] &&
                              dist.value()[r] <= magnet.threshold);
      }
    }
    out.loss.assign(loss.value().raw(), loss.value().raw() + loss.value().size());
    out.grad = tape.backward(sum(loss)).of(x);
    return out;
  };
  EngineOptions opts;
  opts.rule = cfg.constraint.norm == Norm::linf ? StepRule::sign : StepRule::normalized;
  auto results = finish(model, shifted, targets, run_pgd_engine(shifted, targets, cfg, opts, obj));
  apply_magnet_success(model, magnet, results);
  return results;
}

// --- Black-box ---------------------------------------------------------------------------

Tensor QueryOracle::operator()(const Tensor& x) {
  if (budget_ >= 0 && queries_ >= budget_) throw OracleError("query budget exhausted", queries_);
  ++queries_;
  try {
    return backend_(x);
  } catch (const OracleError&) {
    throw;
  } catch (const std::exception& e) {
    throw OracleError(std::string("oracle failed: ") + e.what(), queries_);
  }
}

QueryOracle local_oracle(const Classifier& model, long budget) {
  return QueryOracle([&model](const Tensor& x) { return confidences(model, x); }, budget);
}

GradientEstimate estimate_gradient_fd(QueryOracle& oracle, const Tensor& x,
                                      const std::function<double(const Tensor&)>& loss_of_output, int group_size,
                                      double h, std::uint64_t seed) {
  if (group_size < 1) throw std::invalid_argument("estimate_gradient_fd: group size must be >= 1");
  if (!(h > 0)) throw std::invalid_argument("estimate_gradient_fd: h must be > 0");
  const auto n = static_cast<std::size_t>(x.size());
  const auto order = shuffled_indices(n, seed);
  const long before = oracle.queries();
  GradientEstimate est{Tensor(x.shape()), 0};
  Tensor probe = x;
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(group_size)) {
    const std::size_t end = std::min(n, start + static_cast<std::size_t>(group_size));
    auto shift = [&](double d) {
      for (std::size_t k = start; k < end; ++k) probe[static_cast<Index>(order[k])] = x[static_cast<Index>(order[k])] + d;
    };
    shift(h);
    const double up = loss_of_output(oracle(probe));
    shift(-h);
    const double down = loss_of_output(oracle(probe));
    shift(0);
    const double dir = (up - down) / (2 * h);
    for (std::size_t k = start; k < end; ++k) est.gradient[static_cast<Index>(order[k])] = dir;
  }
  est.queries = oracle.queries() - before;
  return est;
}

GradientEstimate estimate_gradient_fd(QueryOracle& oracle, const Tensor& x, LossKind kind, int target, double kappa,
                                      int group_size, double h, std::uint64_t seed) {
  return estimate_gradient_fd(
      oracle, x, [&](const Tensor& p) { return adv_loss_from_probs(p, target, kind, kappa); }, group_size, h, seed);
}

AttackResult blackbox_pgd_attack(QueryOracle& oracle, const Tensor& x0, int target, const AttackConfig& cfg,
                                 const BlackBoxConfig& bb) {
  const long before = oracle.queries();
  Rng step_seeds(cfg.seed);
  Objective obj = [&](const Tensor& batch, std::span<const int> tg, std::span<const std::size_t>) {
    const Tensor x = unstack_row(batch, 0);
    ObjectiveValue out;
    out.loss.push_back(adv_loss_from_probs(oracle(x), tg[0], cfg.loss, cfg.kappa));
    const auto est = estimate_gradient_fd(oracle, x, cfg.loss, tg[0], cfg.kappa, bb.group_size, bb.h,
                                          step_seeds.next());
    out.grad = est.gradient.reshaped(batch.shape());
    return out;
  };
  EngineOptions opts;
  opts.rule = cfg.constraint.norm == Norm::linf ? StepRule::sign : StepRule::normalized;
  const int t[] = {target};
  auto traces = run_pgd_engine({x0}, t, cfg, opts, obj);
  EngineTrace& tr = traces.front();
  AttackResult r;
  r.start = x0;
  r.target = target;
  const Tensor g = oracle(tr.best);
  r.queries_used = oracle.queries() - before;
  r.predicted = argmax(g.data());
  r.target_confidence = g[target];
  r.success = r.predicted == target;
  r.adv_example = std::move(tr.best);
  r.iterations_used = tr.iterations;
  r.initial_loss = tr.initial_loss;
  r.final_loss = tr.best_loss;
  r.zero_gradient_start = tr.zero_gradient_start;
  return r;
}

// --- EOT ---------------------------------------------------------------------------------

TransformSampler default_transform_sampler() {
  return [](Rng& rng) {
    EotTransform t;
    t.brightness = rng.uniform(-0.2, 0.2);
    t.scale = rng.uniform(0.8, 1.2);
    t.rotation_deg = rng.uniform(-15.0, 15.0);
    return t;
  };
}

TransformSampler identity_sampler() {
  return [](Rng&) { return EotTransform{}; };
}

std::vector<Index> transform_source(const Shape& image_shape, const EotTransform& t) {
  if (image_shape.size() != 3) throw ShapeError("transform_source: expected (C,H,W), got " + to_string(image_shape));
  if (!(t.scale > 0)) throw std::invalid_argument("transform_source: scale must be > 0");
  const Index c = image_shape[0], h = image_shape[1], w = image_shape[2];
  const double cy = 0.5 * static_cast<double>(h - 1), cx = 0.5 * static_cast<double>(w - 1);
  const double th = t.rotation_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  std::vector<Index> src(static_cast<std::size_t>(c * h * w));
  for (Index i = 0; i < h; ++i) {
    for (Index j = 0; j < w; ++j) {
      // inverse map: rotate by -theta, then undo the scaling
      const double dy = static_cast<double>(i) - cy, dx = static_cast<double>(j) - cx;
      const double sy = (cs * dy + sn * dx) / t.scale + cy;
      const double sx = (-sn * dy + cs * dx) / t.scale + cx;
      const auto ri = static_cast<Index>(std::lround(sy)), rj = static_cast<Index>(std::lround(sx));
      const bool inside = ri >= 0 && ri < h && rj >= 0 && rj < w;
      for (Index ch = 0; ch < c; ++ch) {
        src[static_cast<std::size_t>((ch * h + i) * w + j)] = inside ? (ch * h + ri) * w + rj : -1;
      }
    }
  }
  return src;
}

Tensor apply_transform(const Tensor& x, const EotTransform& t) {
  const auto src = transform_source(x.shape(), t);
  Tensor out(x.shape());
  for (Index i = 0; i < x.size(); ++i) {
    const Index s = src[static_cast<std::size_t>(i)];
    out[i] = std::clamp((s < 0 ? 0.0 : x[s]) + t.brightness, 0.0, 1.0);
  }
  return out;
}

double transform_success_rate(const Classifier& model, const Tensor& x, int target, const TransformSampler& sampler,
                              int draws, std::uint64_t seed) {
  if (draws < 1) throw std::invalid_argument("transform_success_rate: draws must be >= 1");
  Rng rng(seed);
  std::vector<Tensor> views;
  for (int d = 0; d < draws; ++d) views.push_back(apply_transform(x, sampler(rng)));
  const auto preds = predict_batch(model, views);
  const auto hits = std::count_if(preds.begin(), preds.end(), [&](const Prediction& p) { return p.label == target; });
  return static_cast<double>(hits) / static_cast<double>(draws);
}

std::vector<AttackResult> eot_attack(const Classifier& model, const std::vector<Tensor>& starts,
                                     std::span<const int> targets, const AttackConfig& cfg,
                                     const TransformSampler& sampler, int samples_per_step, int eval_draws) {
  if (samples_per_step < 1) throw std::invalid_argument("eot_attack: samples_per_step must be >= 1");
  check_targets(model, targets);
  const Shape& shape = model.input_shape();
  const Index d = element_count(shape);
  const auto s = static_cast<Index>(samples_per_step);
  Rng master(cfg.seed);
  std::vector<Rng> rngs;
  for (std::size_t i = 0; i < starts.size(); ++i) rngs.push_back(master.fork(i));

  Objective obj = [&](const Tensor& batch, std::span<const int> tg, std::span<const std::size_t> ids) {
    const auto n = static_cast<Index>(ids.size());
    std::vector<Index> source(static_cast<std::size_t>(n * s * d));
    std::vector<int> expanded;
    Shape out_shape{n * s};
    out_shape.insert(out_shape.end(), shape.begin(), shape.end());
    Tensor brightness(out_shape);
    for (Index r = 0; r < n; ++r) {
      for (Index k = 0; k < s; ++k) {
        const EotTransform t = sampler(rngs[ids[static_cast<std::size_t>(r)]]);
        const auto src = transform_source(shape, t);
        const Index row = r * s + k;
        for (Index p = 0; p < d; ++p) {
          const Index q = src[static_cast<std::size_t>(p)];
          source[static_cast<std::size_t>(row * d + p)] = q < 0 ? -1 : r * d + q;
          brightness[row * d + p] = t.brightness;
        }
        expanded.push_back(tg[static_cast<std::size_t>(r)]);
      }
    }
    Tape tape;
    Var x = tape.variable(batch);
    Var warped = gather(x, std::move(source), out_shape) + tape.constant(brightness);
    Tensor clipped = warped.value();
    clipped.data() = clipped.data().cwiseMax(0.0).cwiseMin(1.0);
    Var views = straight_through(warped, std::move(clipped));
    Var per_view = adv_loss(logits(model, tape, views), expanded, cfg.loss, cfg.kappa);
    Var per_start = scale(sum_rows(reshape(per_view, {n, s})), 1.0 / static_cast<double>(s));
    ObjectiveValue out;
    out.loss.assign(per_start.value().raw(), per_start.value().raw() + n);
    out.grad = tape.backward(sum(per_start)).of(x);
    return out;
  };
  EngineOptions opts;
  opts.rule = cfg.constraint.norm == Norm::linf ? StepRule::sign : StepRule::normalized;
  auto results = finish(model, starts, targets, run_pgd_engine(starts, targets, cfg, opts, obj));
  for (std::size_t i = 0; i < results.size(); ++i) {
    results[i].transform_success = transform_success_rate(model, results[i].adv_example, results[i].target, sampler,
                                                          eval_draws, cfg.seed ^ (0xE07ULL + i));
  }
  return results;
}

}  // namespace owb
