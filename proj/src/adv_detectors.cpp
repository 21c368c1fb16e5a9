#include "owb/adv_detectors.hpp"

#include "owb/random.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

namespace owb {

namespace {

Index reflect101(Index i, Index n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

void require_planes(const Tensor& x, const char* op) {
  if (x.rank() < 2) throw ShapeError(std::string(op) + ": expected (..., H, W), got " + to_string(x.shape()));
}

template <class WindowFn>
Tensor per_window(const Tensor& x, int k, WindowFn&& fn) {
  const Index h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const Index planes = x.size() / (h * w);
  const int r = k / 2;
  Tensor out(x.shape());
  std::vector<double> window(static_cast<std::size_t>(k * k));
  for (Index p = 0; p < planes; ++p) {
    const double* in = x.raw() + p * h * w;
    double* dst = out.raw() + p * h * w;
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) {
        std::size_t n = 0;
        for (int di = -r; di <= r; ++di) {
          for (int dj = -r; dj <= r; ++dj) window[n++] = in[reflect101(i + di, h) * w + reflect101(j + dj, w)];
        }
        dst[i * w + j] = fn(window);
      }
    }
  }
  return out;
}

Tensor batch_of(const std::vector<Tensor>& xs, std::size_t begin, std::size_t end) {
  std::vector<const Tensor*> items;
  for (std::size_t i = begin; i < end; ++i) items.push_back(&xs[i]);
  return stack(items);
}

constexpr std::size_t kChunk = 256;

}  // namespace

std::string_view to_string(Squeezer s) {
  switch (s) {
    case Squeezer::bit_depth: return "bit-depth";
    case Squeezer::median: return "median";
    case Squeezer::smoothing: return "smoothing-simplified";
  }
  return "?";
}

Squeezer parse_squeezer(std::string_view name) {
  if (name == "bit-depth") return Squeezer::bit_depth;
  if (name == "median") return Squeezer::median;
  if (name == "smoothing" || name == "smoothing-simplified") return Squeezer::smoothing;
  throw std::invalid_argument("unknown squeezer '" + std::string(name) + "'");
}

void SqueezerConfig::validate() const {
  if (bit_depth < 1 || bit_depth > 8) throw std::invalid_argument("squeezer bit depth must be in [1,8]");
  if (median_kernel < 1 || median_kernel % 2 == 0) throw std::invalid_argument("median kernel must be odd and >= 1");
  if (enabled.empty()) throw std::invalid_argument("no squeezers enabled");
}

Tensor bit_depth_reduce(const Tensor& x, int n) {
  if (n < 1 || n > 8) throw std::invalid_argument("bit_depth_reduce: n must be in [1,8], got " + std::to_string(n));
  const double levels = std::ldexp(1.0, n) - 1.0;
  Tensor out(x.shape());
  for (Index i = 0; i < x.size(); ++i) {
    const double v = std::clamp(x[i], 0.0, 1.0);
    out[i] = std::floor(v * levels + 0.5) / levels;
  }
  return out;
}

Tensor median_filter(const Tensor& x, int k) {
  if (k < 1 || k % 2 == 0) throw std::invalid_argument("median_filter: kernel must be odd, got " + std::to_string(k));
  require_planes(x, "median_filter");
  const auto mid = static_cast<std::ptrdiff_t>(k * k / 2);
  return per_window(x, k, [mid](std::vector<double>& win) {
    std::nth_element(win.begin(), win.begin() + mid, win.end());
    return win[static_cast<std::size_t>(mid)];
  });
}

Tensor gaussian_smooth(const Tensor& x) {
  require_planes(x, "gaussian_smooth");
  std::array<double, 9> kernel{};
  double total = 0;
  for (int i = 0; i < 9; ++i) {
    const int di = i / 3 - 1, dj = i % 3 - 1;
    kernel[static_cast<std::size_t>(i)] = std::exp(-0.5 * (di * di + dj * dj));
    total += kernel[static_cast<std::size_t>(i)];
  }
  for (double& v : kernel) v /= total;
  return per_window(x, 3, [&kernel](const std::vector<double>& win) {
    double acc = 0;
    for (std::size_t i = 0; i < 9; ++i) acc += kernel[i] * win[i];
    return std::clamp(acc, 0.0, 1.0);
  });
}

Tensor apply_squeezer(const Tensor& x, Squeezer s, const SqueezerConfig& cfg) {
  switch (s) {
    case Squeezer::bit_depth: return bit_depth_reduce(x, cfg.bit_depth);
    case Squeezer::median: return median_filter(x, cfg.median_kernel);
    case Squeezer::smoothing: return gaussian_smooth(x);
  }
  throw std::logic_error("apply_squeezer: bad kind");
}

std::vector<double> fs_scores(const Classifier& model, const std::vector<Tensor>& xs, const SqueezerConfig& cfg) {
  cfg.validate();
  std::vector<double> scores(xs.size(), 0.0);
  for (std::size_t begin = 0; begin < xs.size(); begin += kChunk) {
    const std::size_t end = std::min(xs.size(), begin + kChunk);
    const Tensor batch = batch_of(xs, begin, end);
    const Tensor base = confidences(model, batch);
    const Index c = base.dim(1);
    for (Squeezer s : cfg.enabled) {
      const Tensor squeezed = confidences(model, apply_squeezer(batch, s, cfg));
      for (std::size_t i = begin; i < end; ++i) {
        const auto row = static_cast<Index>(i - begin);
        double d = 0;
        for (Index j = 0; j < c; ++j) d += std::abs(base[row * c + j] - squeezed[row * c + j]);
        scores[i] = std::max(scores[i], d);
      }
    }
  }
  return scores;
}

double fs_score(const Classifier& model, const Tensor& x, const SqueezerConfig& cfg) {
  return fs_scores(model, {x}, cfg).front();
}

DetectorVerdict fs_detect(const Classifier& model, const Tensor& x, const SqueezerConfig& cfg, double threshold) {
  return make_verdict(fs_score(model, x, cfg), threshold, Polarity::adversarial);
}

// --- MagNet ------------------------------------------------------------------

std::string_view to_string(ReconNorm n) { return n == ReconNorm::l1 ? "l1" : "l2"; }

ReconNorm parse_recon_norm(std::string_view name) {
  if (name == "l1" || name == "L1") return ReconNorm::l1;
  if (name == "l2" || name == "L2") return ReconNorm::l2;
  throw std::invalid_argument("unknown reconstruction norm '" + std::string(name) + "'");
}

double reconstruction_mse(const Network& autoencoder, const std::vector<Tensor>& images) {
  if (images.empty()) throw std::invalid_argument("reconstruction_mse: no images");
  double total = 0;
  Index count = 0;
  for (std::size_t begin = 0; begin < images.size(); begin += kChunk) {
    const std::size_t end = std::min(images.size(), begin + kChunk);
    const Tensor batch = batch_of(images, begin, end);
    const Tensor recon = autoencoder.run(batch);
    total += (recon.data() - batch.data()).squaredNorm();
    count += batch.size();
  }
  return total / static_cast<double>(count);
}

MagnetTrainReport magnet_train(Network& autoencoder, const std::vector<Tensor>& benign, double noise_level,
                               const TrainConfig& cfg) {
  if (benign.empty()) throw std::invalid_argument("magnet_train: no benign data");
  if (noise_level < 0) throw std::invalid_argument("magnet_train: noise level must be >= 0");
  if (autoencoder.output_shape() != autoencoder.input_shape()) {
    throw ShapeError("magnet_train: autoencoder maps " + to_string(autoencoder.input_shape()) + " to " +
                     to_string(autoencoder.output_shape()));
  }
  MagnetTrainReport report;
  report.initial_recon_error = reconstruction_mse(autoencoder, benign);
  Rng noise_rng(cfg.seed ^ 0x6D61676E6574ULL);
  report.train = run_training(autoencoder, benign.size(), cfg,
                              [&](Tape& tape, std::span<const std::size_t> batch, std::vector<Var>& params) {
                                const Tensor clean = gather_batch(benign, batch);
                                Tensor noisy = clean;
                                if (noise_level > 0) {
                                  for (Index i = 0; i < noisy.size(); ++i) {
                                    noisy[i] = std::clamp(noisy[i] + noise_rng.normal(0.0, noise_level), 0.0, 1.0);
                                  }
                                }
                                Var recon = autoencoder.forward(tape, tape.constant(noisy), &params);
                                Var diff = recon - tape.constant(clean);
                                BatchOutcome out;
                                out.loss = scale(l2_norm_squared(diff), 1.0 / static_cast<double>(clean.size()));
                                return out;
                              });
  report.final_recon_error = reconstruction_mse(autoencoder, benign);
  return report;
}

Var reconstruction_distance(const Network& autoencoder, Tape& tape, Var batch, ReconNorm norm) {
  Var diff = batch - autoencoder.forward(tape, batch);
  if (norm == ReconNorm::l1) return l1_norm_rows(diff);
  return sqrt(l2_norm_squared_rows(diff));
}

std::vector<double> magnet_scores(const MagnetDetector& det, const std::vector<Tensor>& xs) {
  std::vector<double> scores;
  scores.reserve(xs.size());
  for (std::size_t begin = 0; begin < xs.size(); begin += kChunk) {
    const std::size_t end = std::min(xs.size(), begin + kChunk);
    Tape tape;
    const Tensor d = reconstruction_distance(det.autoencoder, tape, tape.constant(batch_of(xs, begin, end)), det.norm)
                         .value();
    for (Index i = 0; i < d.size(); ++i) scores.push_back(d[i]);
  }
  return scores;
}

double magnet_score(const MagnetDetector& det, const Tensor& x) { return magnet_scores(det, {x}).front(); }

DetectorVerdict magnet_detect(const Tensor& x, const MagnetDetector& det) {
  return make_verdict(magnet_score(det, x), det.threshold, Polarity::adversarial);
}

std::vector<Tensor> magnet_reform(const std::vector<Tensor>& xs, const MagnetDetector& det) {
  std::vector<Tensor> out;
  out.reserve(xs.size());
  for (std::size_t begin = 0; begin < xs.size(); begin += kChunk) {
    const std::size_t end = std::min(xs.size(), begin + kChunk);
    Tensor recon = det.autoencoder.run(batch_of(xs, begin, end));
    recon.data() = recon.data().cwiseMax(0.0).cwiseMin(1.0);
    for (std::size_t i = begin; i < end; ++i) out.push_back(unstack_row(recon, static_cast<Index>(i - begin)));
  }
  return out;
}

Tensor magnet_reform(const Tensor& x, const MagnetDetector& det) { return magnet_reform(std::vector{x}, det).front(); }

void calibrate_magnet(MagnetDetector& det, const std::vector<Tensor>& benign) {
  const auto scores = magnet_scores(det, benign);
  det.threshold = calibrate_fpr_threshold(scores, det.fpr_target);
}

}  // namespace owb
