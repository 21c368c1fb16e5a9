#include "doctest.h"

#include "owb/data.hpp"
#include "owb/random.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace owb;

namespace {

std::string bytes(std::initializer_list<int> v) {
  std::string s;
  for (int b : v) s.push_back(static_cast<char>(b));
  return s;
}

std::string error_of(auto&& fn) {
  try {
    fn();
  } catch (const DataFormatError& e) {
    return e.what();
  }
  return "";
}

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "owb_test_data";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("IDX headers") {
  // 2 images of 1x2 pixels.
  const std::string images = bytes({0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 255, 128, 7});
  const IdxArray a = parse_idx(images);
  CHECK(a.dims == std::vector<std::uint32_t>{2, 1, 2});
  CHECK(a.payload == std::vector<std::uint8_t>{0, 255, 128, 7});

  const IdxArray labels = parse_idx(bytes({0, 0, 8, 1, 0, 0, 0, 3, 1, 2, 3}));
  CHECK(labels.dims == std::vector<std::uint32_t>{3});

  SUBCASE("bad magic reports the observed bytes") {
    const std::string msg = error_of([] { parse_idx(bytes({0x12, 0x34, 8, 1, 0, 0, 0, 1, 0})); });
    CHECK(msg.find("magic") != std::string::npos);
    CHECK(msg.find("0x12 0x34 0x08 0x01") != std::string::npos);
    CHECK_THROWS_AS(parse_idx(bytes({0, 0, 0x0D, 1, 0, 0, 0, 1, 0})), DataFormatError);
  }
  SUBCASE("truncation reports expected and actual lengths") {
    const std::string msg = error_of([&] { parse_idx(images.substr(0, images.size() - 1)); });
    CHECK(msg.find("truncated") != std::string::npos);
    CHECK(msg.find("expected 20") != std::string::npos);
    CHECK(msg.find("got 19") != std::string::npos);
    CHECK_THROWS_AS(parse_idx(images.substr(0, 10)), DataFormatError);
    CHECK_THROWS_AS(parse_idx(bytes({0, 0})), DataFormatError);
  }
  SUBCASE("trailing bytes") { CHECK_THROWS_AS(parse_idx(images + "x"), DataFormatError); }
}

TEST_CASE("IDX serialize and parse are bit-exact inverses") {
  Rng rng(4);
  IdxArray a;
  a.dims = {3, 5, 4};
  for (int i = 0; i < 60; ++i) a.payload.push_back(static_cast<std::uint8_t>(rng.below(256)));
  const std::string s = serialize_idx(a);
  const IdxArray b = parse_idx(s);
  CHECK(b.dims == a.dims);
  CHECK(b.payload == a.payload);
  CHECK(serialize_idx(b) == s);
}

TEST_CASE("IDX dataset scaling and file round-trip") {
  LabeledDataset d;
  d.label_names = digit_label_names();
  d.images = {Tensor({1, 2, 2}, {0, 1, 128 / 255.0, 64 / 255.0}), Tensor({1, 2, 2}, {1, 1, 0, 0})};
  d.labels = {3, 9};
  const auto img = scratch("rt-images.idx"), lab = scratch("rt-labels.idx");
  save_idx(d, img, lab);
  const LabeledDataset back = load_idx(img, lab);
  REQUIRE(back.size() == 2);
  CHECK(back.labels == d.labels);
  CHECK(back.images[0] == d.images[0]);
  CHECK(back.images[1] == d.images[1]);
  CHECK(back.images[0][1] == 1.0);
  CHECK(back.images[0][0] == 0.0);
  CHECK_THROWS_AS(load_idx(lab, img), DataFormatError);
}

TEST_CASE("reference MNIST file") {
  const LabeledDataset d =
      load_idx(OWB_DATA_DIR "/mnist10k-images-idx3-ubyte", OWB_DATA_DIR "/mnist10k-labels-idx1-ubyte");
  CHECK(d.size() == 10000);
  CHECK(d.images.front().shape() == Shape{1, 28, 28});
  CHECK(d.num_classes() == 10);
  d.validate();
}

TEST_CASE("PGM parsing") {
  const std::string p5 = "P5\n2 2\n255\n" + bytes({0, 255, 128, 64});
  const Tensor t = parse_pgm(p5);
  CHECK(t.shape() == Shape{1, 2, 2});
  CHECK(t[0] == 0.0);
  CHECK(t[1] == 1.0);
  CHECK(t[2] == doctest::Approx(0.50196).epsilon(1e-5));
  CHECK(t[3] == doctest::Approx(0.25098).epsilon(1e-5));

  SUBCASE("comment lines are skipped") {
    const Tensor c = parse_pgm("P5\n# made by hand\n2 2\n# another\n255\n" + bytes({0, 255, 128, 64}));
    CHECK(c == t);
  }
  SUBCASE("smaller maxval rescales") {
    const Tensor c = parse_pgm("P5 1 2 15\n" + bytes({15, 5}));
    CHECK(c[0] == 1.0);
    CHECK(c[1] == doctest::Approx(1.0 / 3));
  }
  SUBCASE("malformed inputs give distinct errors") {
    const std::string magic = error_of([] { parse_pgm("P2\n2 2\n255\n0 0 0 0"); });
    const std::string maxval = error_of([] { parse_pgm("P5\n2 2\n65535\n" + std::string(8, '\0')); });
    const std::string shortp = error_of([] { parse_pgm("P5\n2 2\n255\n" + bytes({1, 2, 3})); });
    CHECK(magic.find("P5") != std::string::npos);
    CHECK(maxval.find("maxval") != std::string::npos);
    CHECK(shortp.find("short") != std::string::npos);
    CHECK(magic != maxval);
    CHECK(maxval != shortp);
    CHECK_THROWS_AS(parse_pgm("P5\n0 2\n255\n"), DataFormatError);
    CHECK_THROWS_AS(parse_pgm("P5\n2 2\n15\n" + bytes({1, 2, 3, 99})), DataFormatError);
  }
}

TEST_CASE("PGM write then read is bit-exact") {
  const Tensor t = parse_pgm("P5\n3 2\n255\n" + bytes({0, 1, 2, 253, 254, 255}));
  const auto path = scratch("rt.pgm");
  save_pgm(path, t);
  CHECK(load_pgm(path) == t);
  CHECK(serialize_pgm(t) == "P5\n3 2\n255\n" + bytes({0, 1, 2, 253, 254, 255}));
}

TEST_CASE("manifests") {
  const auto dir = scratch("manifest");
  std::filesystem::create_directories(dir);
  save_pgm(dir / "a.pgm", Tensor({1, 2, 2}, {0, 1, 0, 1}));
  save_pgm(dir / "b.pgm", Tensor({1, 2, 2}, {1, 1, 0, 0}));
  {
    std::ofstream(dir / "ood.txt") << "# photos\nrole: ood\nname: photos\na.pgm\nb.pgm\n";
    std::ofstream(dir / "in.txt") << "role: in\na.pgm 0\nb.pgm 1\n";
    std::ofstream(dir / "bad.txt") << "a.pgm\n";
  }
  const auto ood = std::get<UnlabeledDataset>(load_manifest(dir / "ood.txt"));
  CHECK(ood.size() == 2);
  CHECK(ood.source_name == "photos");
  const auto in = std::get<LabeledDataset>(load_manifest(dir / "in.txt", {"x", "y"}));
  CHECK(in.labels == std::vector<int>{0, 1});
  CHECK_THROWS_AS(load_manifest(dir / "bad.txt"), DataFormatError);
}

TEST_CASE("Gaussian noise OOD") {
  const UnlabeledDataset d = gen_gaussian_noise_ood(100, {1, 10, 10}, 127, 50, 5);
  double sum = 0;
  for (const Tensor& x : d.images) {
    CHECK(x.data().minCoeff() >= 0.0);
    CHECK(x.data().maxCoeff() <= 1.0);
    sum += x.data().sum();
  }
  const double mean = sum / 10000;
  CHECK(std::abs(mean - 127.0 / 255) <= 3 * (50.0 / 255) / std::sqrt(10000.0));

  const UnlabeledDataset again = gen_gaussian_noise_ood(100, {1, 10, 10}, 127, 50, 5);
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(again.images[i] == d.images[i]);

  const UnlabeledDataset flat = gen_gaussian_noise_ood(2, {1, 4, 4}, 127, 1e-9, 1);
  CHECK(flat.images[0].data().isConstant(127.0 / 255, 1e-9));

  CHECK_THROWS_AS(gen_gaussian_noise_ood(1, {1, 4, 4}, 127, 0, 1), std::invalid_argument);
  CHECK_THROWS_AS(gen_gaussian_noise_ood(0, {1, 4, 4}), std::invalid_argument);
}

TEST_CASE("synthetic shapes") {
  const std::vector<ShapeKind> in_set{ShapeKind::hbar, ShapeKind::cross};
  const std::vector<ShapeKind> out_set{ShapeKind::ring};
  const LabeledDataset d = gen_synthetic_shapes(30, {1, 16, 16}, in_set, 9);
  d.validate();
  CHECK(d.label_names == std::vector<std::string>{"hbar", "cross"});
  const LabeledDataset again = gen_synthetic_shapes(30, {1, 16, 16}, in_set, 9);
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(again.images[i] == d.images[i]);

  CHECK_THROWS_AS(gen_synthetic_shapes(0, {1, 16, 16}, in_set, 1), std::invalid_argument);
  CHECK_NOTHROW(require_disjoint(in_set, out_set));
  CHECK_THROWS_AS(require_disjoint(in_set, {ShapeKind::cross, ShapeKind::ring}), std::invalid_argument);
  CHECK_THROWS_AS(gen_shape_pair(10, 10, {1, 16, 16}, in_set, in_set, 1), std::invalid_argument);
  const auto [in, out] = gen_shape_pair(10, 12, {1, 16, 16}, in_set, out_set, 1);
  CHECK(in.size() == 10);
  CHECK(out.size() == 12);
}

TEST_CASE("split is a seeded partition") {
  const LabeledDataset d = gen_synthetic_shapes(20, {1, 8, 8}, {ShapeKind::hbar, ShapeKind::vbar}, 2);
  const auto [a, b] = split(d, 15, 7);
  CHECK(a.size() == 15);
  CHECK(b.size() == 5);
  const auto [a2, b2] = split(d, 15, 7);
  CHECK(a2.labels == a.labels);
  CHECK_THROWS(split(d, 21, 7));
}
