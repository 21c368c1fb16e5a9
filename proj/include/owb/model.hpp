#pragma once

#include "owb/autodiff.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

namespace owb {

struct Conv2dLayer {
  Index in_channels = 0;
  Index out_channels = 0;
  Index kernel = 3;
  Index padding = 1;
  Tensor weight;  // (out, in, k, k)
  Tensor bias;    // (out)
};

struct DenseLayer {
  Index in_features = 0;
  Index out_features = 0;
  Tensor weight;  // (out, in)
  Tensor bias;    // (out)
};

struct ReluLayer {};
struct MaxPoolLayer {};
struct UpsampleLayer {};
struct SigmoidLayer {};
struct FlattenLayer {};

using Layer = std::variant<Conv2dLayer, DenseLayer, ReluLayer, MaxPoolLayer, UpsampleLayer, SigmoidLayer, FlattenLayer>;

/// Sequential stack of layers over batched inputs (N, input_shape...).
class Network {
 public:
  Network() = default;
  Network(std::string arch, Shape input_shape, std::vector<Layer> layers);

  const std::string& arch() const { return arch_; }
  const Shape& input_shape() const { return input_shape_; }
  /// Per-example output shape.
  const Shape& output_shape() const { return output_shape_; }
  const std::vector<Layer>& layers() const { return layers_; }

  /// Records the forward pass. With `params` non-null, parameters enter the
  /// tape as variables and are appended to `params` in parameters() order;
  /// a non-empty `params` from an earlier pass on the same tape is reused, so
  /// several forward passes share one set of parameter Vars. With `params`
  /// null they are constants.
  Var forward(Tape& tape, Var x, std::vector<Var>* params = nullptr) const;
  /// Forward pass without gradient bookkeeping; `batch` is (N, input_shape...).
  Tensor run(const Tensor& batch) const;

  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  std::vector<std::string> parameter_names() const;
  Index parameter_count() const;

  /// uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) for weights and biases.
  void init_params(std::uint64_t seed);

  /// Compact text form of the layer stack, e.g. "conv:1:8:3:1;relu;pool;...".
  std::string layer_spec() const;
  static Network from_layer_spec(std::string arch, Shape input_shape, const std::string& spec);

 private:
  std::string arch_;
  Shape input_shape_;
  Shape output_shape_;
  std::vector<Layer> layers_;
};

Network make_cnn_s(const Shape& input_shape, Index num_classes);
Network make_mlp2(const Shape& input_shape, Index hidden, Index num_classes);
/// Single dense layer: softmax-linear classifier.
Network make_linear(const Shape& input_shape, Index num_classes);
/// conv-8/conv-16 encoder with pooling, mirrored decoder with upsampling, sigmoid output.
Network make_autoencoder(const Shape& input_shape);
Network make_network(const std::string& arch, const Shape& input_shape, Index num_classes);

/// Classifier with label names. The first `in_classes` outputs are the
/// in-distribution labels; any further outputs are background classes, one
/// per OOD source, in source order.
class Classifier {
 public:
  Classifier() = default;
  Classifier(Network net, std::vector<std::string> label_names);

  Network& network() { return net_; }
  const Network& network() const { return net_; }
  int num_classes() const { return static_cast<int>(label_names_.size()); }
  const std::vector<std::string>& label_names() const { return label_names_; }
  const Shape& input_shape() const { return net_.input_shape(); }

  int in_classes() const { return num_classes() - static_cast<int>(background_sources_.size()); }
  const std::vector<std::string>& background_sources() const { return background_sources_; }
  void set_background_sources(std::vector<std::string> sources);
  std::vector<int> background_indices() const;

 private:
  Network net_;
  std::vector<std::string> label_names_;
  std::vector<std::string> background_sources_;
};

/// Builds a classifier with `arch`, initialized from `seed`.
Classifier make_classifier(const std::string& arch, const Shape& input_shape, std::vector<std::string> label_names,
                           std::uint64_t seed);

/// Batches `x` when it is a single example; returns whether it did.
Tensor as_batch(const Network& net, const Tensor& x, bool* was_single = nullptr);

/// Logits for one example (C) or a batch (N,C).
Tensor logits(const Classifier& model, const Tensor& x);
Var logits(const Classifier& model, Tape& tape, Var batch, std::vector<Var>* params = nullptr);
/// softmax(logits), same batching rule.
Tensor confidences(const Classifier& model, const Tensor& x);

struct Prediction {
  int label = 0;
  Scalar confidence = 0;
};

/// argmax of a probability/logit row, lowest index on ties.
int argmax(const Eigen::Ref<const Vector>& row);
int argmin(const Eigen::Ref<const Vector>& row);

Prediction predict(const Classifier& model, const Tensor& x);
std::vector<Prediction> predict_batch(const Classifier& model, const std::vector<Tensor>& xs,
                                      std::size_t chunk = 256);

// --- Checkpoints ------------------------------------------------------------

/// Container: "OWBCKPT1", u32 version, then length-prefixed strings (arch,
/// layer spec), input shape, label names, metadata pairs, and named tensors
/// with u64 dims and little-endian f64 payloads.
struct Checkpoint {
  std::string arch;
  std::string layer_spec;
  Shape input_shape;
  std::vector<std::string> label_names;
  std::map<std::string, std::string> metadata;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::string_view bytes, const std::string& origin = "<memory>");
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

Checkpoint to_checkpoint(const Network& net);
Checkpoint to_checkpoint(const Classifier& model);
/// Rebuilds the network and validates every parameter shape before copying.
Network network_from_checkpoint(const Checkpoint& ckpt);
Classifier classifier_from_checkpoint(const Checkpoint& ckpt);

void save_classifier(const std::filesystem::path& path, const Classifier& model);
Classifier load_classifier(const std::filesystem::path& path);
void save_network(const std::filesystem::path& path, const Network& net);
Network load_network(const std::filesystem::path& path);

}  // namespace owb
