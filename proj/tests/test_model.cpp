#include "doctest.h"

#include "owb/model.hpp"
#include "owb/random.hpp"
#include "owb/train.hpp"

#include <cmath>
#include <filesystem>

using namespace owb;

namespace {

/// Two well-separated clusters in the plane, labels 0 / 1.
LabeledDataset separable_toy() {
  LabeledDataset d;
  d.label_names = {"left", "right"};
  d.source_name = "toy";
  Rng rng(3);
  for (int i = 0; i < 40; ++i) {
    const int y = i % 2;
    const double cx = y == 0 ? 0.2 : 0.8;
    d.images.push_back(Tensor({2}, {cx + rng.uniform(-0.1, 0.1), rng.uniform(0, 1)}));
    d.labels.push_back(y);
  }
  return d;
}

Classifier linear_with_logits(const std::vector<double>& bias) {
  Classifier m = make_classifier("linear", {1}, std::vector<std::string>(bias.size(), "c"), 0);
  for (Tensor* p : m.network().parameters()) p->data().setZero();
  Tensor* b = m.network().parameters().back();
  for (std::size_t i = 0; i < bias.size(); ++i) (*b)[static_cast<Index>(i)] = bias[i];
  return m;
}

}  // namespace

TEST_CASE("zero-initialized final layer gives all-zero logits") {
  Classifier m = make_classifier("mlp-2", {1, 8, 8}, digit_label_names(), 4);
  auto params = m.network().parameters();
  params[params.size() - 2]->data().setZero();
  params.back()->data().setZero();
  Rng rng(1);
  Tensor x({1, 8, 8});
  for (Index i = 0; i < x.size(); ++i) x[i] = rng.uniform();
  CHECK(logits(m, x).data().isZero(0));
}

TEST_CASE("batch of n gives n x num_classes logits") {
  const Classifier m = make_classifier("cnn-s", {1, 12, 12}, digit_label_names(), 1);
  const Tensor batch({5, 1, 12, 12});
  CHECK(logits(m, batch).shape() == Shape{5, 10});
  CHECK(logits(m, Tensor({1, 12, 12})).shape() == Shape{10});
  CHECK_THROWS_AS(logits(m, Tensor({1, 10, 12})), ShapeError);
}

TEST_CASE("fixed seed and input give bit-identical logits") {
  Rng rng(2);
  Tensor x({3, 1, 16, 16});
  for (Index i = 0; i < x.size(); ++i) x[i] = rng.uniform();
  for (const char* arch : {"cnn-s", "mlp-2", "linear"}) {
    CAPTURE(arch);
    const Classifier a = make_classifier(arch, {1, 16, 16}, digit_label_names(), 7);
    const Classifier b = make_classifier(arch, {1, 16, 16}, digit_label_names(), 7);
    CHECK(logits(a, x) == logits(b, x));
  }
}

TEST_CASE("predict returns the argmax and its softmax value") {
  const Prediction p = predict(linear_with_logits({0.1, 2.0, -1.0}), Tensor({1}, {0.0}));
  CHECK(p.label == 1);
  const double expect = std::exp(2.0) / (std::exp(0.1) + std::exp(2.0) + std::exp(-1.0));
  CHECK(p.confidence == doctest::Approx(expect).epsilon(1e-12));

  const Prediction tie = predict(linear_with_logits({0, 0, 0, 0}), Tensor({1}, {0.0}));
  CHECK(tie.label == 0);
  CHECK(tie.confidence == doctest::Approx(0.25));
}

TEST_CASE("predict_batch matches predict row by row") {
  const Classifier m = make_classifier("mlp-2", {1, 8, 8}, digit_label_names(), 3);
  Rng rng(8);
  std::vector<Tensor> xs;
  for (int i = 0; i < 7; ++i) {
    Tensor x({1, 8, 8});
    for (Index j = 0; j < x.size(); ++j) x[j] = rng.uniform();
    xs.push_back(x);
  }
  const auto batch = predict_batch(m, xs, 3);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Prediction p = predict(m, xs[i]);
    CHECK(batch[i].label == p.label);
    CHECK(batch[i].confidence == doctest::Approx(p.confidence).epsilon(1e-14));
  }
}

TEST_CASE("checkpoint round-trip") {
  const Classifier m = make_classifier("cnn-s", {1, 12, 12}, digit_label_names(), 5);
  const auto path = std::filesystem::temp_directory_path() / "owb_test_model.ckpt";
  save_classifier(path, m);
  const Classifier back = load_classifier(path);
  std::filesystem::remove(path);
  CHECK(back.label_names() == m.label_names());
  CHECK(back.network().layer_spec() == m.network().layer_spec());
  const auto pa = m.network().parameters();
  const auto pb = back.network().parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i] == *pb[i]);

  SUBCASE("autoencoder") {
    const Network ae = make_autoencoder({1, 12, 12});
    const Network ae2 = network_from_checkpoint(parse_checkpoint(serialize_checkpoint(to_checkpoint(ae))));
    CHECK(ae2.layer_spec() == ae.layer_spec());
  }
  SUBCASE("corruption is rejected") {
    std::string bytes = serialize_checkpoint(to_checkpoint(m));
    CHECK_THROWS(parse_checkpoint(bytes.substr(0, bytes.size() - 3)));
    bytes[0] = 'X';
    CHECK_THROWS(parse_checkpoint(bytes));
  }
}

TEST_CASE("learning rate 0 leaves parameters unchanged") {
  const LabeledDataset d = separable_toy();
  Classifier m = make_classifier("linear", {2}, d.label_names, 2);
  std::vector<Tensor> before;
  for (const Tensor* p : std::as_const(m.network()).parameters()) before.push_back(*p);
  TrainConfig cfg;
  cfg.learning_rate = 0;
  cfg.epochs = 3;
  cfg.optimizer = OptimizerKind::sgd;
  const TrainReport r = train_classifier(m, d, cfg);
  const auto after = std::as_const(m.network()).parameters();
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(*after[i] == before[i]);
  CHECK(r.final_loss == r.initial_loss);
}

TEST_CASE("separable two-feature toy reaches 100% train accuracy") {
  const LabeledDataset d = separable_toy();
  Classifier m = make_classifier("linear", {2}, d.label_names, 2);
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 8;
  cfg.learning_rate = 0.05;
  train_classifier(m, d, cfg);
  CHECK(evaluate_model(m, d).accuracy == 100.0);
}

TEST_CASE("label out of range is rejected before any update") {
  LabeledDataset d = separable_toy();
  Classifier m = make_classifier("linear", {2}, d.label_names, 2);
  const Tensor w0 = *std::as_const(m.network()).parameters().front();
  d.labels.back() = 2;
  d.label_names.push_back("extra");
  CHECK_THROWS_AS(train_classifier(m, d, TrainConfig{}), std::out_of_range);
  CHECK(*std::as_const(m.network()).parameters().front() == w0);
}

TEST_CASE("evaluate_model") {
  SUBCASE("all correct with one-hot confidence") {
    LabeledDataset d;
    d.label_names = {"a", "b"};
    d.images = {Tensor({1}, {0.0}), Tensor({1}, {0.0})};
    d.labels = {1, 1};
    const Evaluation e = evaluate_model(linear_with_logits({-1000, 1000}), d);
    CHECK(e.accuracy == 100.0);
    CHECK(e.mean_confidence == 1.0);
    CHECK(e.confidence_defined);
  }
  SUBCASE("zero correct leaves confidence undefined") {
    LabeledDataset d;
    d.label_names = {"a", "b"};
    d.images = {Tensor({1}, {0.0})};
    d.labels = {0};
    const Evaluation e = evaluate_model(linear_with_logits({0, 5}), d);
    CHECK(e.accuracy == 0.0);
    CHECK(e.mean_confidence == 0.0);
    CHECK_FALSE(e.confidence_defined);
  }
  SUBCASE("empty dataset") {
    LabeledDataset d;
    d.label_names = {"a", "b"};
    CHECK_THROWS(evaluate_model(linear_with_logits({0, 0}), d));
  }
}
