#include "owb/model.hpp"

#include "owb/random.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace owb {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

Shape infer_output(const Shape& in, const Layer& layer) {
  return std::visit(
      overloaded{
          [&](const Conv2dLayer& c) -> Shape {
            if (in.size() != 3 || in[0] != c.in_channels) {
              throw ShapeError("conv layer expects (" + std::to_string(c.in_channels) + ",H,W), got " + to_string(in));
            }
            const Index h = in[1] + 2 * c.padding - c.kernel + 1, w = in[2] + 2 * c.padding - c.kernel + 1;
            if (h <= 0 || w <= 0) throw ShapeError("conv layer output would be empty for " + to_string(in));
            return {c.out_channels, h, w};
          },
          [&](const DenseLayer& d) -> Shape {
            if (in.size() != 1 || in[0] != d.in_features) {
              throw ShapeError("dense layer expects (" + std::to_string(d.in_features) + "), got " + to_string(in));
            }
            return {d.out_features};
          },
          [&](const MaxPoolLayer&) -> Shape {
            if (in.size() != 3 || in[1] < 2 || in[2] < 2) throw ShapeError("pool layer got " + to_string(in));
            return {in[0], in[1] / 2, in[2] / 2};
          },
          [&](const UpsampleLayer&) -> Shape {
            if (in.size() != 3) throw ShapeError("upsample layer got " + to_string(in));
            return {in[0], in[1] * 2, in[2] * 2};
          },
          [&](const FlattenLayer&) -> Shape { return {element_count(in)}; },
          [&](const auto&) -> Shape { return in; },
      },
      layer);
}

}  // namespace

Network::Network(std::string arch, Shape input_shape, std::vector<Layer> layers)
    : arch_(std::move(arch)), input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
  output_shape_ = input_shape_;
  for (auto& layer : layers_) {
    output_shape_ = infer_output(output_shape_, layer);
    std::visit(overloaded{
                   [](Conv2dLayer& c) {
                     if (c.weight.size() == 0) c.weight = Tensor({c.out_channels, c.in_channels, c.kernel, c.kernel});
                     if (c.bias.size() == 0) c.bias = Tensor({c.out_channels});
                   },
                   [](DenseLayer& d) {
                     if (d.weight.size() == 0) d.weight = Tensor({d.out_features, d.in_features});
                     if (d.bias.size() == 0) d.bias = Tensor({d.out_features});
                   },
                   [](auto&) {},
               },
               layer);
  }
}

Var Network::forward(Tape& tape, Var x, std::vector<Var>* params) const {
  Shape expected{x.shape().empty() ? 0 : x.shape()[0]};
  expected.insert(expected.end(), input_shape_.begin(), input_shape_.end());
  if (x.shape() != expected) {
    throw ShapeError(arch_ + ": input shape " + to_string(x.shape()) + " does not match (N," +
                     to_string(input_shape_).substr(1));
  }
  const bool reuse = params && !params->empty();
  if (reuse && params->size() != parameters().size()) {
    throw std::logic_error(arch_ + ": parameter binding has the wrong size");
  }
  std::size_t next = 0;
  auto param = [&](const Tensor& t) {
    if (!params) return tape.constant(t);
    if (reuse) return (*params)[next++];
    Var v = tape.variable(t);
    params->push_back(v);
    return v;
  };
  Var h = x;
  for (const auto& layer : layers_) {
    h = std::visit(overloaded{
                       [&](const Conv2dLayer& c) {
                         Var w = param(c.weight);
                         Var b = param(c.bias);
                         return conv2d(h, w, b, c.padding);
                       },
                       [&](const DenseLayer& d) {
                         Var w = param(d.weight);
                         Var b = param(d.bias);
                         return linear(h, w, b);
                       },
                       [&](const ReluLayer&) { return relu(h); },
                       [&](const MaxPoolLayer&) { return max_pool2(h); },
                       [&](const UpsampleLayer&) { return upsample2(h); },
                       [&](const SigmoidLayer&) { return sigmoid(h); },
                       [&](const FlattenLayer&) { return flatten(h); },
                   },
                   layer);
  }
  return h;
}

Tensor Network::run(const Tensor& batch) const {
  Tape tape;
  return forward(tape, tape.constant(batch)).value();
}

std::vector<Tensor*> Network::parameters() {
  std::vector<Tensor*> out;
  for (auto& layer : layers_) {
    if (auto* c = std::get_if<Conv2dLayer>(&layer)) {
      out.push_back(&c->weight);
      out.push_back(&c->bias);
    } else if (auto* d = std::get_if<DenseLayer>(&layer)) {
      out.push_back(&d->weight);
      out.push_back(&d->bias);
    }
  }
  return out;
}

std::vector<const Tensor*> Network::parameters() const {
  std::vector<const Tensor*> out;
  for (Tensor* t : const_cast<Network*>(this)->parameters()) out.push_back(t);
  return out;
}

std::vector<std::string> Network::parameter_names() const {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string prefix = "layer" + std::to_string(i);
    if (std::holds_alternative<Conv2dLayer>(layers_[i]) || std::holds_alternative<DenseLayer>(layers_[i])) {
      names.push_back(prefix + ".weight");
      names.push_back(prefix + ".bias");
    }
  }
  return names;
}

Index Network::parameter_count() const {
  Index n = 0;
  for (const Tensor* t : parameters()) n += t->size();
  return n;
}

void Network::init_params(std::uint64_t seed) {
  Rng rng(seed);
  auto fill = [&](Tensor& t, Index fan_in) {
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
  };
  for (auto& layer : layers_) {
    if (auto* c = std::get_if<Conv2dLayer>(&layer)) {
      fill(c->weight, c->in_channels * c->kernel * c->kernel);
      fill(c->bias, c->in_channels * c->kernel * c->kernel);
    } else if (auto* d = std::get_if<DenseLayer>(&layer)) {
      fill(d->weight, d->in_features);
      fill(d->bias, d->in_features);
    }
  }
}

std::string Network::layer_spec() const {
  std::ostringstream out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (i) out << ';';
    std::visit(overloaded{
                   [&](const Conv2dLayer& c) {
                     out << "conv:" << c.in_channels << ':' << c.out_channels << ':' << c.kernel << ':' << c.padding;
                   },
                   [&](const DenseLayer& d) { out << "dense:" << d.in_features << ':' << d.out_features; },
                   [&](const ReluLayer&) { out << "relu"; },
                   [&](const MaxPoolLayer&) { out << "pool"; },
                   [&](const UpsampleLayer&) { out << "up"; },
                   [&](const SigmoidLayer&) { out << "sigmoid"; },
                   [&](const FlattenLayer&) { out << "flatten"; },
               },
               layers_[i]);
  }
  return out.str();
}

Network Network::from_layer_spec(std::string arch, Shape input_shape, const std::string& spec) {
  std::vector<Layer> layers;
  std::istringstream items(spec);
  std::string item;
  while (std::getline(items, item, ';')) {
    std::vector<std::string> f;
    std::istringstream parts(item);
    std::string p;
    while (std::getline(parts, p, ':')) f.push_back(p);
    if (f.empty()) continue;
    auto num = [&](std::size_t i) -> Index {
      if (i >= f.size()) throw std::invalid_argument("layer spec '" + item + "' is missing fields");
      return std::stoll(f[i]);
    };
    if (f[0] == "conv") {
      Conv2dLayer c;
      c.in_channels = num(1);
      c.out_channels = num(2);
      c.kernel = num(3);
      c.padding = num(4);
      layers.emplace_back(c);
    } else if (f[0] == "dense") {
      DenseLayer d;
      d.in_features = num(1);
      d.out_features = num(2);
      layers.emplace_back(d);
    } else if (f[0] == "relu") {
      layers.emplace_back(ReluLayer{});
    } else if (f[0] == "pool") {
      layers.emplace_back(MaxPoolLayer{});
    } else if (f[0] == "up") {
      layers.emplace_back(UpsampleLayer{});
    } else if (f[0] == "sigmoid") {
      layers.emplace_back(SigmoidLayer{});
    } else if (f[0] == "flatten") {
      layers.emplace_back(FlattenLayer{});
    } else {
      throw std::invalid_argument("unknown layer '" + f[0] + "' in layer spec");
    }
  }
  return Network(std::move(arch), std::move(input_shape), std::move(layers));
}

// --- Architectures ------------------------------------------------------------

Network make_cnn_s(const Shape& input_shape, Index num_classes) {
  if (input_shape.size() != 3) throw ShapeError("cnn-s needs (C,H,W) input, got " + to_string(input_shape));
  const Index c = input_shape[0];
  const Index flat = 16 * (input_shape[1] / 2 / 2) * (input_shape[2] / 2 / 2);
  return Network("cnn-s", input_shape,
                 {Conv2dLayer{c, 8, 3, 1, {}, {}}, ReluLayer{}, MaxPoolLayer{}, Conv2dLayer{8, 16, 3, 1, {}, {}},
                  ReluLayer{}, MaxPoolLayer{}, FlattenLayer{}, DenseLayer{flat, num_classes, {}, {}}});
}

Network make_mlp2(const Shape& input_shape, Index hidden, Index num_classes) {
  const Index in = element_count(input_shape);
  return Network("mlp-2", input_shape,
                 {FlattenLayer{}, DenseLayer{in, hidden, {}, {}}, ReluLayer{}, DenseLayer{hidden, num_classes, {}, {}}});
}

Network make_linear(const Shape& input_shape, Index num_classes) {
  return Network("linear", input_shape, {FlattenLayer{}, DenseLayer{element_count(input_shape), num_classes, {}, {}}});
}

Network make_autoencoder(const Shape& input_shape) {
  if (input_shape.size() != 3 || input_shape[1] % 2 || input_shape[2] % 2) {
    throw ShapeError("autoencoder needs (C,H,W) input with even H and W, got " + to_string(input_shape));
  }
  const Index c = input_shape[0];
  return Network("ae", input_shape,
                 {Conv2dLayer{c, 8, 3, 1, {}, {}}, ReluLayer{}, Conv2dLayer{8, 16, 3, 1, {}, {}}, ReluLayer{},
                  MaxPoolLayer{}, Conv2dLayer{16, 8, 3, 1, {}, {}}, ReluLayer{}, UpsampleLayer{},
                  Conv2dLayer{8, c, 3, 1, {}, {}}, SigmoidLayer{}});
}

Network make_network(const std::string& arch, const Shape& input_shape, Index num_classes) {
  if (arch == "cnn-s") return make_cnn_s(input_shape, num_classes);
  if (arch == "mlp-2") return make_mlp2(input_shape, 64, num_classes);
  if (arch == "linear") return make_linear(input_shape, num_classes);
  if (arch == "ae") return make_autoencoder(input_shape);
  throw std::invalid_argument("unknown architecture '" + arch + "' (expected cnn-s, mlp-2, linear or ae)");
}

// --- Classifier ---------------------------------------------------------------

Classifier::Classifier(Network net, std::vector<std::string> label_names)
    : net_(std::move(net)), label_names_(std::move(label_names)) {
  if (label_names_.empty()) throw std::invalid_argument("classifier needs at least one label");
  if (net_.output_shape() != Shape{static_cast<Index>(label_names_.size())}) {
    throw ShapeError("network output " + to_string(net_.output_shape()) + " does not match " +
                     std::to_string(label_names_.size()) + " labels");
  }
}

void Classifier::set_background_sources(std::vector<std::string> sources) {
  if (sources.size() >= label_names_.size()) {
    throw std::invalid_argument("background classes must leave at least one in-distribution class");
  }
  background_sources_ = std::move(sources);
}

std::vector<int> Classifier::background_indices() const {
  std::vector<int> out;
  for (int i = in_classes(); i < num_classes(); ++i) out.push_back(i);
  return out;
}

Classifier make_classifier(const std::string& arch, const Shape& input_shape, std::vector<std::string> label_names,
                           std::uint64_t seed) {
  Network net = make_network(arch, input_shape, static_cast<Index>(label_names.size()));
  net.init_params(seed);
  return Classifier(std::move(net), std::move(label_names));
}

Tensor as_batch(const Network& net, const Tensor& x, bool* was_single) {
  if (x.shape() == net.input_shape()) {
    if (was_single) *was_single = true;
    Shape s{1};
    s.insert(s.end(), x.shape().begin(), x.shape().end());
    return x.reshaped(s);
  }
  if (was_single) *was_single = false;
  return x;
}

Tensor logits(const Classifier& model, const Tensor& x) {
  bool single = false;
  Tensor out = model.network().run(as_batch(model.network(), x, &single));
  if (single) return out.reshaped({out.size()});
  return out;
}

Var logits(const Classifier& model, Tape& tape, Var batch, std::vector<Var>* params) {
  return model.network().forward(tape, batch, params);
}

Tensor confidences(const Classifier& model, const Tensor& x) {
  Tape tape;
  return softmax(tape.constant(logits(model, x))).value();
}

int argmax(const Eigen::Ref<const Vector>& row) {
  Index best = 0;
  for (Index i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) best = i;
  }
  return static_cast<int>(best);
}

int argmin(const Eigen::Ref<const Vector>& row) {
  Index best = 0;
  for (Index i = 1; i < row.size(); ++i) {
    if (row[i] < row[best]) best = i;
  }
  return static_cast<int>(best);
}

Prediction predict(const Classifier& model, const Tensor& x) {
  if (x.shape() != model.input_shape()) {
    throw ShapeError("predict: input " + to_string(x.shape()) + " does not match " + to_string(model.input_shape()));
  }
  const Tensor g = confidences(model, x);
  const int label = argmax(g.data());
  return {label, g[label]};
}

std::vector<Prediction> predict_batch(const Classifier& model, const std::vector<Tensor>& xs, std::size_t chunk) {
  std::vector<Prediction> out;
  out.reserve(xs.size());
  const Index c = model.num_classes();
  for (std::size_t start = 0; start < xs.size(); start += chunk) {
    const std::size_t end = std::min(xs.size(), start + chunk);
    std::vector<const Tensor*> part;
    for (std::size_t i = start; i < end; ++i) part.push_back(&xs[i]);
    const Tensor g = confidences(model, stack(part));
    for (std::size_t i = 0; i < part.size(); ++i) {
      const Vector row = g.data().segment(static_cast<Index>(i) * c, c);
      const int label = argmax(row);
      out.push_back({label, row[label]});
    }
  }
  return out;
}

// --- Checkpoints --------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'O', 'W', 'B', 'C', 'K', 'P', 'T', '1'};

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  void raw(const char* p, std::size_t n) { out_.append(p, n); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(std::string_view bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}

  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw std::runtime_error(origin_ + ": truncated checkpoint while reading " + what + " (need " +
                               std::to_string(n) + " bytes at offset " + std::to_string(pos_) + ", have " +
                               std::to_string(bytes_.size() - pos_) + ")");
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{static_cast<unsigned char>(bytes_[pos_ + i])} << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{static_cast<unsigned char>(bytes_[pos_ + i])} << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string_view raw(std::size_t n, const char* what) {
    need(n, what);
    auto v = bytes_.substr(pos_, n);
    pos_ += n;
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }
  const std::string& origin() const { return origin_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
  std::string origin_;
};

void write_shape(Writer& w, const Shape& s) {
  w.u32(static_cast<std::uint32_t>(s.size()));
  for (Index d : s) w.u64(static_cast<std::uint64_t>(d));
}

Shape read_shape(Reader& r, const char* what) {
  const std::uint32_t rank = r.u32(what);
  if (rank > 8) throw std::runtime_error(r.origin() + ": implausible rank " + std::to_string(rank));
  Shape s;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint64_t d = r.u64(what);
    if (d == 0 || d > (1ULL << 32)) throw std::runtime_error(r.origin() + ": invalid dimension in " + what);
    s.push_back(static_cast<Index>(d));
  }
  return s;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);
  w.str(ckpt.arch);
  w.str(ckpt.layer_spec);
  write_shape(w, ckpt.input_shape);
  w.u32(static_cast<std::uint32_t>(ckpt.label_names.size()));
  for (const auto& l : ckpt.label_names) w.str(l);
  w.u32(static_cast<std::uint32_t>(ckpt.metadata.size()));
  for (const auto& [k, v] : ckpt.metadata) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    w.str(name);
    write_shape(w, t.shape());
    for (Index i = 0; i < t.size(); ++i) w.f64(t[i]);
  }
  return w.take();
}

Checkpoint parse_checkpoint(std::string_view bytes, const std::string& origin) {
  Reader r(bytes, origin);
  const auto magic = r.raw(sizeof kMagic, "magic");
  if (std::memcmp(magic.data(), kMagic, sizeof kMagic) != 0) throw std::runtime_error(origin + ": not a checkpoint file");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw std::runtime_error(origin + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  c.arch = r.str("arch");
  c.layer_spec = r.str("layer spec");
  c.input_shape = read_shape(r, "input shape");
  const std::uint32_t labels = r.u32("label count");
  for (std::uint32_t i = 0; i < labels; ++i) c.label_names.push_back(r.str("label"));
  const std::uint32_t meta = r.u32("metadata count");
  for (std::uint32_t i = 0; i < meta; ++i) {
    std::string k = r.str("metadata key");
    c.metadata[k] = r.str("metadata value");
  }
  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str("tensor name");
    Shape s = read_shape(r, "tensor shape");
    const Index n = element_count(s);
    r.need(static_cast<std::size_t>(n) * 8, "tensor payload");
    Tensor t(s);
    for (Index k = 0; k < n; ++k) t[k] = r.f64("tensor payload");
    c.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw std::runtime_error(origin + ": trailing bytes after checkpoint");
  return c;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::string bytes = serialize_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, path.string());
}

Checkpoint to_checkpoint(const Network& net) {
  Checkpoint c;
  c.arch = net.arch();
  c.layer_spec = net.layer_spec();
  c.input_shape = net.input_shape();
  const auto names = net.parameter_names();
  const auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) c.tensors.emplace_back(names[i], *params[i]);
  return c;
}

Checkpoint to_checkpoint(const Classifier& model) {
  Checkpoint c = to_checkpoint(model.network());
  c.label_names = model.label_names();
  c.metadata["background.count"] = std::to_string(model.background_sources().size());
  for (std::size_t i = 0; i < model.background_sources().size(); ++i) {
    c.metadata["background.source." + std::to_string(i)] = model.background_sources()[i];
  }
  return c;
}

Network network_from_checkpoint(const Checkpoint& ckpt) {
  Network net = Network::from_layer_spec(ckpt.arch, ckpt.input_shape, ckpt.layer_spec);
  auto params = net.parameters();
  const auto names = net.parameter_names();
  if (params.size() != ckpt.tensors.size()) {
    throw std::runtime_error("checkpoint has " + std::to_string(ckpt.tensors.size()) + " tensors, architecture needs " +
                             std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = ckpt.tensors[i];
    if (name != names[i] || t.shape() != params[i]->shape()) {
      throw std::runtime_error("checkpoint tensor '" + name + "' " + to_string(t.shape()) + " does not match '" +
                               names[i] + "' " + to_string(params[i]->shape()));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) *params[i] = ckpt.tensors[i].second;
  return net;
}

Classifier classifier_from_checkpoint(const Checkpoint& ckpt) {
  Classifier model(network_from_checkpoint(ckpt), ckpt.label_names);
  std::size_t count = 0;
  if (auto it = ckpt.metadata.find("background.count"); it != ckpt.metadata.end()) count = std::stoul(it->second);
  std::vector<std::string> sources;
  for (std::size_t i = 0; i < count; ++i) sources.push_back(ckpt.metadata.at("background.source." + std::to_string(i)));
  if (!sources.empty()) model.set_background_sources(std::move(sources));
  return model;
}

void save_classifier(const std::filesystem::path& path, const Classifier& model) {
  write_checkpoint(path, to_checkpoint(model));
}

Classifier load_classifier(const std::filesystem::path& path) { return classifier_from_checkpoint(read_checkpoint(path)); }

void save_network(const std::filesystem::path& path, const Network& net) { write_checkpoint(path, to_checkpoint(net)); }

Network load_network(const std::filesystem::path& path) { return network_from_checkpoint(read_checkpoint(path)); }

}  // namespace owb
