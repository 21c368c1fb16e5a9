#include "doctest.h"
#include "gradcheck.hpp"

#include "owb/adv_detectors.hpp"
#include "owb/ood_detectors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

using namespace owb;

namespace {

Classifier with_bias(const std::vector<double>& bias, const Shape& input = {1}) {
  Classifier m = make_classifier("linear", input, std::vector<std::string>(bias.size(), "c"), 0);
  auto params = m.network().parameters();
  params.front()->data().setZero();
  for (std::size_t i = 0; i < bias.size(); ++i) (*params.back())[static_cast<Index>(i)] = bias[i];
  return m;
}

LabeledDataset shapes(std::size_t n, std::uint64_t seed) {
  return gen_synthetic_shapes(n, {1, 12, 12}, {ShapeKind::hbar, ShapeKind::vbar, ShapeKind::cross}, seed);
}

Classifier trained_mlp(const LabeledDataset& d, double beta = -1, const UnlabeledDataset* proxy = nullptr) {
  Classifier m = make_classifier("mlp-2", {1, 12, 12}, d.label_names, 3);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.learning_rate = 2e-3;
  cfg.seed = 5;
  if (proxy) {
    train_confidence_calibrated(m, d, *proxy, beta, cfg);
  } else {
    train_classifier(m, d, cfg);
  }
  return m;
}

/// Median of the k x k window, reflect-101 borders, by sorting.
double naive_median(const Tensor& img, Index H, Index W, Index r, Index c, int k) {
  auto reflect = [](Index i, Index n) {
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
  };
  std::vector<double> v;
  for (int dr = -k / 2; dr <= k / 2; ++dr)
    for (int dc = -k / 2; dc <= k / 2; ++dc) v.push_back(img[reflect(r + dr, H) * W + reflect(c + dc, W)]);
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

}  // namespace

// --- OOD detectors ------------------------------------------------------------

TEST_CASE("baseline score") {
  const Tensor x({1}, {0.0});
  CHECK(baseline_score(with_bias(std::vector<double>(10, 0.0)), x) == doctest::Approx(0.1).epsilon(1e-14));
  CHECK(baseline_score(with_bias({10, 0, 0}), x) ==
        doctest::Approx(1.0 / (1.0 + 2.0 * std::exp(-10.0))).epsilon(1e-14));
  CHECK(baseline_score(with_bias({10, 0, 0}), x) == doctest::Approx(0.99991).epsilon(1e-5));
}

TEST_CASE("ODIN reductions and limits") {
  const LabeledDataset d = shapes(60, 1);
  const Classifier m = make_classifier("mlp-2", {1, 12, 12}, d.label_names, 2);
  for (const Tensor& x : d.images) {
    CHECK(odin_score(m, x, OdinConfig{1, 0}) == baseline_score(m, x));
    CHECK(odin_score(m, x, OdinConfig{1e9, 0.0014}) == doctest::Approx(1.0 / 3).epsilon(1e-6));
  }
  CHECK_THROWS(OdinConfig({0.5, 0}).validate());
  CHECK_THROWS(OdinConfig({1, -0.1}).validate());
}

TEST_CASE("ODIN preprocessing raises the temperature-scaled confidence") {
  const LabeledDataset d = shapes(100, 2);
  const Classifier m = trained_mlp(d);
  int raised = 0;
  for (const Tensor& x : d.images) {
    raised += odin_score(m, x, {10, 0.002}) >= odin_score(m, x, {10, 0});
  }
  CHECK(raised >= 95);
}

TEST_CASE("tune_odin covers the grid and keeps the best AUROC") {
  const LabeledDataset d = shapes(150, 3);
  const Classifier m = trained_mlp(d);
  const UnlabeledDataset out = gen_gaussian_noise_ood(60, {1, 12, 12}, 127, 50, 4);
  const OdinSelection sel = tune_odin(m, d.images, out.images);
  CHECK(sel.grid.size() == kOdinTemperatures.size() * kOdinEpsilons.size());
  for (const auto& c : sel.grid) CHECK(c.auroc <= sel.best_auroc);
  const auto base = baseline_scores(m, d.images);
  CHECK(sel.best_auroc >= auroc(base, baseline_scores(m, out.images)));
}

TEST_CASE("calibrate_threshold") {
  const std::vector<double> s{0.9, 0.8, 0.7, 0.6, 0.5};
  CHECK(calibrate_threshold(s, 0.8) == 0.6);
  CHECK(calibrate_threshold(s, 1.0) == 0.5);
  CHECK(calibrate_threshold(s, 0.2) == 0.9);
  CHECK_THROWS(calibrate_threshold(std::vector<double>{}, 0.95));

  // Held-out TPR of a threshold fit on one half of a large sample.
  Rng rng(3);
  std::vector<double> fit, held;
  for (int i = 0; i < 4000; ++i) (i % 2 ? fit : held).push_back(rng.uniform());
  const double t = calibrate_threshold(fit, 0.95);
  const double tpr = static_cast<double>(std::count_if(held.begin(), held.end(), [&](double v) { return v >= t; })) /
                     static_cast<double>(held.size());
  CHECK(std::abs(tpr - 0.95) <= 0.02);
}

TEST_CASE("OOD verdicts use the strict-less rule") {
  CHECK_FALSE(make_verdict(0.99, 0.5, Polarity::ood).is_ood());
  CHECK_FALSE(make_verdict(0.5, 0.5, Polarity::ood).is_ood());
  CHECK(make_verdict(0.49, 0.5, Polarity::ood).is_ood());
  CHECK_FALSE(make_verdict(0.5, 0.5, Polarity::adversarial).is_adversarial());
  CHECK(make_verdict(0.51, 0.5, Polarity::adversarial).is_adversarial());

  const Classifier m = with_bias({5, 0, 0});
  const Tensor x({1}, {0.0});
  const double s = baseline_score(m, x);
  CHECK_FALSE(detect(m, OodDetectorKind::baseline, {}, s, x).flagged);
  CHECK(detect(m, OodDetectorKind::baseline, {}, std::nextafter(s, 1.0), x).flagged);
  CHECK(detect(m, OodDetectorKind::baseline, {}, 0.5, x).score == s);

  // Monotone: for any threshold, raising the score never flips in to out.
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const double t = rng.uniform(), a = rng.uniform(), b = a + rng.uniform(0, 0.5);
    if (!make_verdict(a, t, Polarity::ood).flagged) CHECK_FALSE(make_verdict(b, t, Polarity::ood).flagged);
  }
}

TEST_CASE("uniform KL") {
  Tape tape;
  CHECK(uniform_kl(tape.constant(Tensor({2, 4}))).value().data().isZero(1e-15));
  const double kl = uniform_kl(tape.constant(Tensor({1, 2}, {0, std::log(3.0)}))).value()[0];
  CHECK(kl == doctest::Approx(0.5 * std::log(0.5 / 0.25) + 0.5 * std::log(0.5 / 0.75)));
}

TEST_CASE("confidence-calibrated training") {
  const LabeledDataset d = shapes(120, 6);
  const UnlabeledDataset proxy = gen_gaussian_noise_ood(120, {1, 12, 12}, 127, 50, 7);

  SUBCASE("beta 0 is train_classifier") {
    const Classifier a = trained_mlp(d);
    const Classifier b = trained_mlp(d, 0.0, &proxy);
    const auto pa = a.network().parameters(), pb = b.network().parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i] == *pb[i]);
  }
  SUBCASE("beta 1 lowers confidence on held-out proxy data") {
    const UnlabeledDataset held = gen_gaussian_noise_ood(100, {1, 12, 12}, 127, 50, 8);
    const Classifier plain = trained_mlp(d, 0.0, &proxy);
    const Classifier cal = trained_mlp(d, 1.0, &proxy);
    auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
    CHECK(mean(baseline_scores(cal, held.images)) < mean(baseline_scores(plain, held.images)));
  }
  SUBCASE("negative beta") {
    Classifier m = make_classifier("mlp-2", {1, 12, 12}, d.label_names, 3);
    CHECK_THROWS_AS(train_confidence_calibrated(m, d, proxy, -1, TrainConfig{}), std::invalid_argument);
  }
}

TEST_CASE("AUROC") {
  CHECK(auroc(std::vector<double>{0.9, 0.8}, std::vector<double>{0.1, 0.2}) == 1.0);
  CHECK(auroc(std::vector<double>{0.1}, std::vector<double>{0.9}) == 0.0);
  CHECK(auroc(std::vector<double>{0.5, 0.7}, std::vector<double>{0.5, 0.6}) == doctest::Approx(0.625));
}

// --- Feature squeezing -----------------------------------------------------------

TEST_CASE("bit-depth reduction") {
  const Tensor x({3}, {0.4, 0.6, 0.5});
  CHECK(bit_depth_reduce(x, 1) == Tensor({3}, {0, 1, 1}));

  Tensor q({256});
  for (Index i = 0; i < 256; ++i) q[i] = static_cast<double>(i) / 255;
  CHECK(bit_depth_reduce(q, 8) == q);

  Rng rng(2);
  const Tensor r = testing::random_tensor(rng, {500}, 0, 1);
  for (int n = 1; n <= 8; ++n) {
    const double levels = std::ldexp(1.0, n) - 1;
    const Tensor y = bit_depth_reduce(r, n);
    std::set<double> seen;
    for (Index i = 0; i < y.size(); ++i) {
      const double k = y[i] * levels;
      CHECK(k == std::round(k));
      CHECK(y[i] == std::round(k) / levels);
      CHECK(std::abs(y[i] - r[i]) <= 0.5 / levels + 1e-12);
      seen.insert(y[i]);
    }
    CHECK(seen.size() <= static_cast<std::size_t>(levels) + 1);
  }
  CHECK_THROWS(bit_depth_reduce(x, 0));
  CHECK_THROWS(bit_depth_reduce(x, 9));
}

TEST_CASE("median filter") {
  CHECK(median_filter(Tensor::full({1, 5, 5}, 0.3), 3) == Tensor::full({1, 5, 5}, 0.3));

  Tensor impulse({1, 5, 5});
  impulse[12] = 1;
  CHECK(median_filter(impulse, 3) == Tensor({1, 5, 5}));

  Rng rng(4);
  for (int k : {1, 3, 5}) {
    const Tensor img = testing::random_tensor(rng, {2, 6, 6}, 0, 1);
    const Tensor out = median_filter(img, k);
    for (Index p = 0; p < 2; ++p) {
      const Tensor plane({6, 6}, Vector(img.data().segment(p * 36, 36)));
      for (Index r = 0; r < 6; ++r)
        for (Index c = 0; c < 6; ++c) CHECK(out[p * 36 + r * 6 + c] == naive_median(plane, 6, 6, r, c, k));
    }
  }
  CHECK_THROWS(median_filter(impulse, 2));
}

TEST_CASE("squeezers stay in the unit box") {
  Rng rng(5);
  SqueezerConfig cfg;
  const Tensor x = testing::random_tensor(rng, {1, 8, 8}, 0, 1);
  for (Squeezer s : {Squeezer::bit_depth, Squeezer::median, Squeezer::smoothing}) {
    const Tensor y = apply_squeezer(x, s, cfg);
    CHECK(y.data().minCoeff() >= 0);
    CHECK(y.data().maxCoeff() <= 1);
    CHECK(apply_squeezer(x, s, cfg) == y);
  }
  CHECK(gaussian_smooth(Tensor::full({1, 4, 4}, 0.7)).data().isConstant(0.7, 1e-15));
}

TEST_CASE("feature-squeezing score") {
  const LabeledDataset d = shapes(40, 9);
  const Classifier m = trained_mlp(d);
  SqueezerConfig cfg;
  cfg.enabled = {Squeezer::bit_depth, Squeezer::median, Squeezer::smoothing};
  const Tensor fixed({1, 12, 12});
  CHECK(fs_score(m, fixed, cfg) == 0.0);
  CHECK_FALSE(fs_detect(m, fixed, cfg, 0.0).flagged);

  Rng rng(3);
  for (int i = 0; i < 30; ++i) {
    const double s = fs_score(m, testing::random_tensor(rng, {1, 12, 12}, 0, 1), cfg);
    CHECK(s >= 0);
    CHECK(s <= 2);
  }
  SqueezerConfig reversed = cfg;
  std::reverse(reversed.enabled.begin(), reversed.enabled.end());
  CHECK(fs_scores(m, d.images, cfg) == fs_scores(m, d.images, reversed));
}

// --- MagNet ---------------------------------------------------------------------------

TEST_CASE("MagNet score is zero for a fixed point of the autoencoder") {
  MagnetDetector det;
  det.autoencoder = make_autoencoder({1, 12, 12});
  for (Tensor* p : det.autoencoder.parameters()) p->data().setZero();
  const Tensor half = Tensor::full({1, 12, 12}, 0.5);  // sigmoid(0)
  CHECK(magnet_score(det, half) == 0.0);
  CHECK_FALSE(magnet_detect(half, det).flagged);
  det.norm = ReconNorm::l2;
  CHECK(magnet_score(det, Tensor({1, 12, 12})) == doctest::Approx(0.5 * 12));
}

TEST_CASE("MagNet training, detection and reform") {
  const LabeledDataset d = shapes(300, 10);
  MagnetDetector det;
  det.autoencoder = make_autoencoder({1, 12, 12});
  det.autoencoder.init_params(2);
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.learning_rate = 5e-3;
  cfg.seed = 3;
  const std::vector<Tensor> train(d.images.begin(), d.images.begin() + 200);
  const std::vector<Tensor> held(d.images.begin() + 200, d.images.end());
  const MagnetTrainReport r = magnet_train(det.autoencoder, train, 0.1, cfg);
  CHECK(r.final_recon_error < r.initial_recon_error);

  const UnlabeledDataset noise = gen_gaussian_noise_ood(50, {1, 12, 12}, 127, 50, 1);
  CHECK(reconstruction_mse(det.autoencoder, noise.images) >= 5 * reconstruction_mse(det.autoencoder, held));

  calibrate_magnet(det, train);
  const auto scores = magnet_scores(det, train);
  const auto over = std::count_if(scores.begin(), scores.end(), [&](double s) { return s > det.threshold; });
  CHECK(static_cast<double>(over) / static_cast<double>(scores.size()) <= det.fpr_target);

  for (const Tensor& y : magnet_reform(noise.images, det)) {
    CHECK(y.data().minCoeff() >= 0);
    CHECK(y.data().maxCoeff() <= 1);
  }
}

TEST_CASE("MagNet with zero noise trains as a plain autoencoder") {
  const LabeledDataset d = shapes(40, 11);
  Network a = make_autoencoder({1, 12, 12});
  a.init_params(1);
  Network b = a;
  TrainConfig cfg;
  cfg.seed = 2;
  magnet_train(a, d.images, 0.0, cfg);
  // Same objective through the generic loop: reconstruct the clean batch.
  run_training(b, d.size(), cfg, [&](Tape& tape, std::span<const std::size_t> idx, std::vector<Var>& params) {
    const Tensor batch = gather_batch(d.images, idx);
    Var diff = b.forward(tape, tape.constant(batch), &params) - tape.constant(batch);
    BatchOutcome out;
    out.loss = scale(l2_norm_squared(diff), 1.0 / static_cast<double>(batch.size()));
    return out;
  });
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i] == *pb[i]);
}

TEST_CASE("calibrate_fpr_threshold") {
  std::vector<double> s;
  for (int i = 1; i <= 20; ++i) s.push_back(i);
  CHECK(calibrate_fpr_threshold(s, 0.05) == 19);
  CHECK(calibrate_fpr_threshold(s, 0.0) == 20);
  CHECK_THROWS(calibrate_fpr_threshold(std::vector<double>{}, 0.05));
}
