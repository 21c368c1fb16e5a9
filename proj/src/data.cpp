#include "owb/data.hpp"

#include "owb/random.hpp"

#include <algorithm>
#include <cmath>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

namespace owb {

namespace fs = std::filesystem;

namespace {

std::string hex_bytes(std::string_view bytes, std::size_t n) {
  std::string out;
  char buf[8];
  for (std::size_t i = 0; i < std::min(n, bytes.size()); ++i) {
    std::snprintf(buf, sizeof buf, "%s0x%02X", i ? " " : "", static_cast<unsigned char>(bytes[i]));
    out += buf;
  }
  return out;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataFormatError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void spit(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::uint32_t read_be32(const unsigned char* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]};
}

void check_pixels(const Tensor& image, const char* what) {
  if (image.size() == 0) throw std::invalid_argument(std::string(what) + ": empty image");
  if ((image.data().array() < 0.0).any() || (image.data().array() > 1.0).any()) {
    throw std::invalid_argument(std::string(what) + ": pixel outside [0,1]");
  }
}

std::uint8_t quantize(Scalar v) {
  const Scalar c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::floor(c * 255.0 + 0.5));
}

// Header check shared by the stream and in-memory parsers.
struct IdxHeader {
  std::vector<std::uint32_t> dims;
  std::size_t header_bytes = 0;
  std::size_t payload_bytes = 0;
};

IdxHeader parse_idx_header(std::string_view head, std::size_t total_size, const std::string& origin) {
  if (head.size() < 4) {
    throw DataFormatError(origin + ": IDX file too short for magic (" + std::to_string(total_size) + " bytes)");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(head.data());
  if (p[0] != 0 || p[1] != 0 || p[2] != 0x08 || p[3] == 0) {
    throw DataFormatError(origin + ": bad IDX magic " + hex_bytes(head, 4) +
                          " (expected 0x00 0x00 0x08 <ndims>)");
  }
  IdxHeader h;
  const std::size_t ndims = p[3];
  h.header_bytes = 4 + 4 * ndims;
  if (head.size() < h.header_bytes) {
    throw DataFormatError(origin + ": truncated IDX header: expected " + std::to_string(h.header_bytes) +
                          " bytes, got " + std::to_string(total_size));
  }
  std::size_t count = 1;
  for (std::size_t d = 0; d < ndims; ++d) {
    const std::uint32_t v = read_be32(p + 4 + 4 * d);
    if (v == 0) throw DataFormatError(origin + ": IDX dimension " + std::to_string(d) + " is zero");
    if (count > (std::size_t{1} << 40) / v) throw DataFormatError(origin + ": IDX dimensions overflow");
    count *= v;
    h.dims.push_back(v);
  }
  h.payload_bytes = count;
  const std::size_t expected = h.header_bytes + h.payload_bytes;
  if (total_size < expected) {
    throw DataFormatError(origin + ": truncated IDX payload: expected " + std::to_string(expected) +
                          " bytes, got " + std::to_string(total_size));
  }
  if (total_size > expected) {
    throw DataFormatError(origin + ": IDX file has " + std::to_string(total_size - expected) +
                          " trailing bytes beyond the declared payload");
  }
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------

void LabeledDataset::validate() const {
  if (images.size() != labels.size()) {
    throw std::invalid_argument("dataset " + source_name + ": " + std::to_string(images.size()) + " images but " +
                                std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < images.size(); ++i) {
    check_pixels(images[i], "dataset image");
    if (images[i].shape() != images.front().shape()) throw std::invalid_argument("dataset images differ in shape");
    if (labels[i] < 0 || labels[i] >= num_classes()) {
      throw std::invalid_argument("dataset " + source_name + ": label " + std::to_string(labels[i]) +
                                  " outside [0," + std::to_string(num_classes()) + ")");
    }
  }
}

void UnlabeledDataset::validate() const {
  for (const auto& img : images) {
    check_pixels(img, "dataset image");
    if (img.shape() != images.front().shape()) throw std::invalid_argument("dataset images differ in shape");
  }
}

LabeledDataset subset(const LabeledDataset& data, const std::vector<std::size_t>& indices) {
  LabeledDataset out;
  out.label_names = data.label_names;
  out.source_name = data.source_name;
  out.images.reserve(indices.size());
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) {
    out.images.push_back(data.images.at(i));
    out.labels.push_back(data.labels.at(i));
  }
  return out;
}

UnlabeledDataset subset(const UnlabeledDataset& data, const std::vector<std::size_t>& indices) {
  UnlabeledDataset out;
  out.source_name = data.source_name;
  out.images.reserve(indices.size());
  for (std::size_t i : indices) out.images.push_back(data.images.at(i));
  return out;
}

namespace {

template <typename Dataset>
std::pair<Dataset, Dataset> split_impl(const Dataset& data, std::size_t head, std::uint64_t seed) {
  if (head > data.size()) throw std::invalid_argument("split: head larger than dataset");
  auto idx = shuffled_indices(data.size(), seed);
  std::vector<std::size_t> a(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(head));
  std::vector<std::size_t> b(idx.begin() + static_cast<std::ptrdiff_t>(head), idx.end());
  return {subset(data, a), subset(data, b)};
}

}  // namespace

std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& data, std::size_t head, std::uint64_t seed) {
  return split_impl(data, head, seed);
}

std::pair<UnlabeledDataset, UnlabeledDataset> split(const UnlabeledDataset& data, std::size_t head,
                                                    std::uint64_t seed) {
  return split_impl(data, head, seed);
}

UnlabeledDataset as_ood(const LabeledDataset& data) { return UnlabeledDataset{data.images, data.source_name}; }

// --- IDX --------------------------------------------------------------------

IdxArray parse_idx(std::string_view bytes, const std::string& origin) {
  const IdxHeader h = parse_idx_header(bytes, bytes.size(), origin);
  IdxArray out;
  out.dims = h.dims;
  out.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(h.header_bytes), bytes.end());
  return out;
}

IdxArray read_idx(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataFormatError("cannot open " + path.string());
  const auto total = static_cast<std::size_t>(fs::file_size(path));
  std::string head(4, '\0');
  in.read(head.data(), 4);
  head.resize(static_cast<std::size_t>(in.gcount()));
  if (head.size() == 4 && static_cast<unsigned char>(head[2]) == 0x08) {
    const std::size_t extra = 4 * static_cast<unsigned char>(head[3]);
    head.resize(4 + extra);
    in.read(head.data() + 4, static_cast<std::streamsize>(extra));
    head.resize(4 + static_cast<std::size_t>(in.gcount()));
  }
  // Header and size are validated before the payload buffer exists.
  const IdxHeader h = parse_idx_header(head, total, path.string());
  IdxArray out;
  out.dims = h.dims;
  out.payload.resize(h.payload_bytes);
  in.read(reinterpret_cast<char*>(out.payload.data()), static_cast<std::streamsize>(h.payload_bytes));
  if (static_cast<std::size_t>(in.gcount()) != h.payload_bytes) {
    throw DataFormatError(path.string() + ": short read of IDX payload");
  }
  return out;
}

std::string serialize_idx(const IdxArray& array) {
  if (array.dims.empty() || array.dims.size() > 255) throw std::invalid_argument("IDX needs 1..255 dimensions");
  std::size_t count = 1;
  for (auto d : array.dims) count *= d;
  if (count != array.payload.size()) throw std::invalid_argument("IDX payload does not match dimensions");
  std::string out;
  out.reserve(4 + 4 * array.dims.size() + count);
  out.push_back('\0');
  out.push_back('\0');
  out.push_back('\x08');
  out.push_back(static_cast<char>(array.dims.size()));
  for (auto d : array.dims) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((d >> s) & 0xFF));
  }
  out.append(reinterpret_cast<const char*>(array.payload.data()), array.payload.size());
  return out;
}

void write_idx(const fs::path& path, const IdxArray& array) { spit(path, serialize_idx(array)); }

std::vector<std::string> digit_label_names() {
  std::vector<std::string> names;
  for (int d = 0; d < 10; ++d) names.push_back(std::to_string(d));
  return names;
}

namespace {

std::vector<Tensor> images_from_idx(const IdxArray& arr, const std::string& origin) {
  if (arr.dims.size() != 3) {
    throw DataFormatError(origin + ": image file must have 3 dimensions (magic 0x00 0x00 0x08 0x03), got " +
                          std::to_string(arr.dims.size()));
  }
  const Index n = arr.dims[0], h = arr.dims[1], w = arr.dims[2];
  std::vector<Tensor> images;
  images.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    Tensor img({1, h, w});
    for (Index p = 0; p < h * w; ++p) img[p] = arr.payload[static_cast<std::size_t>(i * h * w + p)] / 255.0;
    images.push_back(std::move(img));
  }
  return images;
}

}  // namespace

LabeledDataset load_idx(const fs::path& images, const fs::path& labels, std::vector<std::string> label_names) {
  const IdxArray lab = read_idx(labels);
  if (lab.dims.size() != 1) {
    throw DataFormatError(labels.string() + ": label file must have 1 dimension (magic 0x00 0x00 0x08 0x01), got " +
                          std::to_string(lab.dims.size()));
  }
  const IdxArray img = read_idx(images);
  LabeledDataset out;
  out.images = images_from_idx(img, images.string());
  if (lab.dims[0] != out.images.size()) {
    throw DataFormatError("label count " + std::to_string(lab.dims[0]) + " does not match image count " +
                          std::to_string(out.images.size()));
  }
  out.labels.assign(lab.payload.begin(), lab.payload.end());
  out.label_names = std::move(label_names);
  out.source_name = images.stem().string();
  for (int l : out.labels) {
    if (l >= out.num_classes()) throw DataFormatError(labels.string() + ": label " + std::to_string(l) + " out of range");
  }
  return out;
}

UnlabeledDataset load_idx_unlabeled(const fs::path& images, std::string source_name) {
  return UnlabeledDataset{images_from_idx(read_idx(images), images.string()), std::move(source_name)};
}

void save_idx(const LabeledDataset& data, const fs::path& images, const fs::path& labels) {
  if (data.size() == 0) throw std::invalid_argument("save_idx: empty dataset");
  const Tensor& first = data.images.front();
  const Index h = first.dim(first.rank() - 2), w = first.dim(first.rank() - 1);
  if (first.size() != h * w) throw std::invalid_argument("save_idx: only single-channel images are supported");
  IdxArray img{{static_cast<std::uint32_t>(data.size()), static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(w)}, {}};
  img.payload.reserve(data.size() * static_cast<std::size_t>(h * w));
  for (const auto& t : data.images) {
    for (Index i = 0; i < t.size(); ++i) img.payload.push_back(quantize(t[i]));
  }
  IdxArray lab{{static_cast<std::uint32_t>(data.size())}, {}};
  for (int l : data.labels) lab.payload.push_back(static_cast<std::uint8_t>(l));
  write_idx(images, img);
  write_idx(labels, lab);
}

// --- PGM --------------------------------------------------------------------

Tensor parse_pgm(std::string_view bytes, const std::string& origin) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    throw DataFormatError(origin + ": not a binary PGM, magic " + hex_bytes(bytes, 2) + " (expected \"P5\")");
  }
  std::size_t pos = 2;
  auto next_token = [&]() -> long {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t start = pos;
    long v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > 1'000'000) throw DataFormatError(origin + ": PGM header value too large");
      ++pos;
    }
    if (pos == start) throw DataFormatError(origin + ": malformed PGM header");
    return v;
  };
  const long width = next_token();
  const long height = next_token();
  const long maxval = next_token();
  if (width <= 0 || height <= 0) throw DataFormatError(origin + ": PGM dimensions must be positive");
  if (maxval <= 0 || maxval > 255) {
    throw DataFormatError(origin + ": PGM maxval " + std::to_string(maxval) + " unsupported (must be 1..255)");
  }
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw DataFormatError(origin + ": PGM header not terminated by whitespace");
  }
  ++pos;
  const auto expected = static_cast<std::size_t>(width * height);
  if (bytes.size() - pos < expected) {
    throw DataFormatError(origin + ": short PGM payload: expected " + std::to_string(expected) + " bytes, got " +
                          std::to_string(bytes.size() - pos));
  }
  Tensor img({1, height, width});
  for (std::size_t i = 0; i < expected; ++i) {
    const auto b = static_cast<unsigned char>(bytes[pos + i]);
    if (b > maxval) throw DataFormatError(origin + ": PGM sample exceeds maxval");
    img[static_cast<Index>(i)] = static_cast<Scalar>(b) / static_cast<Scalar>(maxval);
  }
  return img;
}

Tensor load_pgm(const fs::path& path) { return parse_pgm(slurp(path), path.string()); }

std::string serialize_pgm(const Tensor& image) {
  if (image.rank() < 2) throw ShapeError("serialize_pgm: need (H,W) or (1,H,W), got " + to_string(image.shape()));
  const Index h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1);
  if (image.size() != h * w) throw ShapeError("serialize_pgm: only single-channel images, got " + to_string(image.shape()));
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (Index i = 0; i < image.size(); ++i) out.push_back(static_cast<char>(quantize(image[i])));
  return out;
}

void save_pgm(const fs::path& path, const Tensor& image) { spit(path, serialize_pgm(image)); }

// --- Manifests --------------------------------------------------------------

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataFormatError("cannot open manifest " + path.string());
  Manifest m;
  bool have_role = false;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    if (line.rfind("role:", 0) == 0) {
      std::string role = line.substr(5);
      role.erase(0, role.find_first_not_of(" \t"));
      if (role == "in" || role == "in-distribution") {
        m.role = DataRole::in_distribution;
      } else if (role == "ood" || role == "out" || role == "out-of-distribution") {
        m.role = DataRole::out_of_distribution;
      } else {
        throw DataFormatError(path.string() + ":" + std::to_string(lineno) + ": unknown role '" + role + "'");
      }
      have_role = true;
      continue;
    }
    if (line.rfind("name:", 0) == 0) {
      m.name = line.substr(5);
      m.name.erase(0, m.name.find_first_not_of(" \t"));
      continue;
    }
    std::istringstream fields(line);
    std::string file;
    fields >> file;
    fs::path p(file);
    if (p.is_relative()) p = path.parent_path() / p;
    m.paths.push_back(p);
    int label;
    if (fields >> label) m.labels.push_back(label);
  }
  if (!have_role) throw DataFormatError(path.string() + ": manifest has no role line");
  if (m.role == DataRole::in_distribution && m.labels.size() != m.paths.size()) {
    throw DataFormatError(path.string() + ": in-distribution manifest needs a label on every line");
  }
  if (m.name.empty()) m.name = path.stem().string();
  return m;
}

std::variant<LabeledDataset, UnlabeledDataset> load_manifest(const fs::path& path,
                                                             std::vector<std::string> label_names) {
  const Manifest m = read_manifest(path);
  std::vector<Tensor> images;
  for (const auto& p : m.paths) images.push_back(load_pgm(p));
  if (m.role == DataRole::out_of_distribution) return UnlabeledDataset{std::move(images), m.name};
  LabeledDataset out{std::move(images), m.labels, std::move(label_names), m.name};
  if (out.label_names.empty()) {
    const int classes = m.labels.empty() ? 0 : *std::max_element(m.labels.begin(), m.labels.end()) + 1;
    for (int c = 0; c < classes; ++c) out.label_names.push_back(std::to_string(c));
  }
  out.validate();
  return out;
}

// --- Generators ---------------------------------------------------------------

UnlabeledDataset gen_gaussian_noise_ood(std::size_t count, const Shape& shape, double mean, double stddev,
                                        std::uint64_t seed) {
  if (count == 0) throw std::invalid_argument("gen_gaussian_noise_ood: count must be >= 1");
  if (!(stddev > 0)) throw std::invalid_argument("gen_gaussian_noise_ood: stddev must be positive");
  Rng rng(seed);
  UnlabeledDataset out;
  out.source_name = "gaussian-noise";
  out.images.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Tensor img(shape);
    for (Index p = 0; p < img.size(); ++p) img[p] = std::clamp(rng.normal(mean, stddev), 0.0, 255.0) / 255.0;
    out.images.push_back(std::move(img));
  }
  return out;
}

namespace {

constexpr ShapeKind kAllKinds[] = {ShapeKind::hbar, ShapeKind::vbar,  ShapeKind::cross,   ShapeKind::square,
                                   ShapeKind::ring, ShapeKind::disk, ShapeKind::diagonal};

void draw_shape(Tensor& img, Index h, Index w, ShapeKind kind, Rng& rng) {
  const double ink = rng.uniform(0.6, 1.0);
  auto put = [&](Index r, Index c) {
    if (r >= 0 && r < h && c >= 0 && c < w) img[r * w + c] = std::max(img[r * w + c], ink);
  };
  const Index m = std::min(h, w);
  const Index thick = 1 + static_cast<Index>(rng.below(2));
  switch (kind) {
    case ShapeKind::hbar:
    case ShapeKind::vbar: {
      const Index len = m / 2 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(m / 2 - 1)));
      const Index along = static_cast<Index>(rng.below(static_cast<std::uint64_t>(m - len + 1)));
      const Index across = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(m - 1 - thick)));
      for (Index i = 0; i < len; ++i) {
        for (Index t = 0; t < thick; ++t) {
          if (kind == ShapeKind::hbar) put(across + t, along + i); else put(along + i, across + t);
        }
      }
      break;
    }
    case ShapeKind::cross: {
      const Index arm = 3 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(std::max<Index>(1, m / 2 - 4))));
      const Index cr = arm + static_cast<Index>(rng.below(static_cast<std::uint64_t>(std::max<Index>(1, h - 2 * arm))));
      const Index cc = arm + static_cast<Index>(rng.below(static_cast<std::uint64_t>(std::max<Index>(1, w - 2 * arm))));
      for (Index i = -arm; i <= arm; ++i) {
        for (Index t = 0; t < thick; ++t) {
          put(cr + t, cc + i);
          put(cr + i, cc + t);
        }
      }
      break;
    }
    case ShapeKind::square: {
      const Index side = m / 3 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(m / 2)));
      const Index r0 = static_cast<Index>(rng.below(static_cast<std::uint64_t>(std::max<Index>(1, h - side))));
      const Index c0 = static_cast<Index>(rng.below(static_cast<std::uint64_t>(std::max<Index>(1, w - side))));
      for (Index i = 0; i < side; ++i) {
        for (Index t = 0; t < thick; ++t) {
          put(r0 + t, c0 + i);
          put(r0 + side - 1 - t, c0 + i);
          put(r0 + i, c0 + t);
          put(r0 + i, c0 + side - 1 - t);
        }
      }
      break;
    }
    case ShapeKind::ring:
    case ShapeKind::disk: {
      const double radius = rng.uniform(m / 6.0, m / 2.5);
      const double cr = rng.uniform(radius, h - 1 - radius);
      const double cc = rng.uniform(radius, w - 1 - radius);
      for (Index r = 0; r < h; ++r) {
        for (Index c = 0; c < w; ++c) {
          const double d = std::hypot(r - cr, c - cc);
          const bool on = kind == ShapeKind::disk ? d <= radius : std::abs(d - radius) <= 0.5 * thick + 0.1;
          if (on) put(r, c);
        }
      }
      break;
    }
    case ShapeKind::diagonal: {
      const bool anti = rng.below(2) == 1;
      const Index len = m / 2 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(m / 2 - 1)));
      const Index r0 = static_cast<Index>(rng.below(static_cast<std::uint64_t>(h - len + 1)));
      const Index c0 = static_cast<Index>(rng.below(static_cast<std::uint64_t>(w - len + 1)));
      for (Index i = 0; i < len; ++i) {
        for (Index t = 0; t < thick; ++t) {
          if (anti) put(r0 + i, c0 + len - 1 - i + t); else put(r0 + i, c0 + i + t);
        }
      }
      break;
    }
  }
}

}  // namespace

std::string_view to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::hbar: return "hbar";
    case ShapeKind::vbar: return "vbar";
    case ShapeKind::cross: return "cross";
    case ShapeKind::square: return "square";
    case ShapeKind::ring: return "ring";
    case ShapeKind::disk: return "disk";
    case ShapeKind::diagonal: return "diagonal";
  }
  return "?";
}

ShapeKind parse_shape_kind(std::string_view name) {
  for (ShapeKind k : kAllKinds) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown shape kind '" + std::string(name) + "'");
}

LabeledDataset gen_synthetic_shapes(std::size_t count, const Shape& shape, const std::vector<ShapeKind>& class_set,
                                    std::uint64_t seed) {
  if (count == 0) throw std::invalid_argument("gen_synthetic_shapes: count must be >= 1");
  if (class_set.empty()) throw std::invalid_argument("gen_synthetic_shapes: empty class set");
  for (std::size_t i = 0; i < class_set.size(); ++i) {
    for (std::size_t j = i + 1; j < class_set.size(); ++j) {
      if (class_set[i] == class_set[j]) throw std::invalid_argument("gen_synthetic_shapes: duplicate class");
    }
  }
  if (shape.size() != 3 || shape[0] != 1 || shape[1] < 8 || shape[2] < 8) {
    throw ShapeError("gen_synthetic_shapes: shape must be (1,H,W) with H,W >= 8, got " + to_string(shape));
  }
  const Index h = shape[1], w = shape[2];
  Rng rng(seed);
  LabeledDataset out;
  out.source_name = "shapes";
  for (ShapeKind k : class_set) {
    out.label_names.emplace_back(to_string(k));
    out.source_name += "-" + std::string(to_string(k));
  }
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(rng.below(class_set.size()));
    Tensor img(shape);
    const double floor_level = rng.uniform(0.0, 0.15);
    for (Index p = 0; p < img.size(); ++p) img[p] = std::clamp(floor_level + rng.normal(0.0, 0.08), 0.0, 1.0);
    draw_shape(img, h, w, class_set[static_cast<std::size_t>(label)], rng);
    out.images.push_back(std::move(img));
    out.labels.push_back(label);
  }
  return out;
}

void require_disjoint(const std::vector<ShapeKind>& in_set, const std::vector<ShapeKind>& out_set) {
  for (ShapeKind a : in_set) {
    if (std::find(out_set.begin(), out_set.end(), a) != out_set.end()) {
      throw std::invalid_argument("shape class '" + std::string(to_string(a)) +
                                  "' requested for both the in-distribution and the OOD set");
    }
  }
}

std::pair<LabeledDataset, UnlabeledDataset> gen_shape_pair(std::size_t in_count, std::size_t out_count,
                                                          const Shape& shape, const std::vector<ShapeKind>& in_set,
                                                          const std::vector<ShapeKind>& out_set, std::uint64_t seed) {
  require_disjoint(in_set, out_set);
  Rng streams(seed);
  const std::uint64_t in_seed = streams.next();
  const std::uint64_t out_seed = streams.next();
  return {gen_synthetic_shapes(in_count, shape, in_set, in_seed),
          as_ood(gen_synthetic_shapes(out_count, shape, out_set, out_seed))};
}

}  // namespace owb
