#pragma once

#include "owb/model.hpp"
#include "owb/train.hpp"
#include "owb/verdict.hpp"

#include <string_view>
#include <vector>

namespace owb {

// --- Feature squeezing -----------------------------------------------------

enum class Squeezer { bit_depth, median, smoothing };

std::string_view to_string(Squeezer s);
Squeezer parse_squeezer(std::string_view name);

struct SqueezerConfig {
  int bit_depth = 1;
  int median_kernel = 3;
  std::vector<Squeezer> enabled{Squeezer::bit_depth, Squeezer::median};
  void validate() const;
};

/// round(x * (2^n - 1)) / (2^n - 1), half up.
Tensor bit_depth_reduce(const Tensor& x, int n);
/// k x k median over each plane of a (..., H, W) tensor; reflect-101 borders.
Tensor median_filter(const Tensor& x, int k);
/// 3x3 Gaussian blur (sigma 1), reflect-101 borders. Stands in for non-local
/// means, which is reported as "smoothing-simplified".
Tensor gaussian_smooth(const Tensor& x);
Tensor apply_squeezer(const Tensor& x, Squeezer s, const SqueezerConfig& cfg);

/// max over enabled squeezers of || g(x) - g(squeeze(x)) ||_1, one score per example.
std::vector<double> fs_scores(const Classifier& model, const std::vector<Tensor>& xs, const SqueezerConfig& cfg);
double fs_score(const Classifier& model, const Tensor& x, const SqueezerConfig& cfg);
DetectorVerdict fs_detect(const Classifier& model, const Tensor& x, const SqueezerConfig& cfg, double threshold);

// --- MagNet ------------------------------------------------------------------

enum class ReconNorm { l1, l2 };

std::string_view to_string(ReconNorm n);
ReconNorm parse_recon_norm(std::string_view name);

struct MagnetDetector {
  Network autoencoder;
  ReconNorm norm = ReconNorm::l1;
  double threshold = 0;
  double fpr_target = 0.05;
};

struct MagnetTrainReport {
  TrainReport train;
  /// Mean squared reconstruction error on the clean data before and after training.
  double initial_recon_error = 0;
  double final_recon_error = 0;
};

/// Denoising objective: reconstruct clean images from copies corrupted with
/// seeded N(0, noise_level^2) pixel noise, clipped to [0,1]. Mean squared error.
MagnetTrainReport magnet_train(Network& autoencoder, const std::vector<Tensor>& benign, double noise_level,
                               const TrainConfig& cfg);

/// Mean squared reconstruction error of `images` under `autoencoder`.
double reconstruction_mse(const Network& autoencoder, const std::vector<Tensor>& images);

/// Per-row recon_norm(x - AE(x)) on the tape: L1 is the absolute sum, L2 the Euclidean norm.
Var reconstruction_distance(const Network& autoencoder, Tape& tape, Var batch, ReconNorm norm);

std::vector<double> magnet_scores(const MagnetDetector& det, const std::vector<Tensor>& xs);
double magnet_score(const MagnetDetector& det, const Tensor& x);
DetectorVerdict magnet_detect(const Tensor& x, const MagnetDetector& det);
/// AE(x) clamped to [0,1].
Tensor magnet_reform(const Tensor& x, const MagnetDetector& det);
std::vector<Tensor> magnet_reform(const std::vector<Tensor>& xs, const MagnetDetector& det);
/// Sets det.threshold so at most fpr_target of `benign` scores exceed it.
void calibrate_magnet(MagnetDetector& det, const std::vector<Tensor>& benign);

}  // namespace owb
