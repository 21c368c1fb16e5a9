#pragma once

#include "owb/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace owb {

/// Malformed or truncated input file.
class DataFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DataRole { in_distribution, out_of_distribution };

/// In-distribution samples. Images are (C,H,W) tensors with pixels in [0,1].
struct LabeledDataset {
  std::vector<Tensor> images;
  std::vector<int> labels;
  std::vector<std::string> label_names;
  std::string source_name;

  std::size_t size() const { return images.size(); }
  int num_classes() const { return static_cast<int>(label_names.size()); }
  /// Throws std::invalid_argument when any invariant is broken.
  void validate() const;
};

/// Out-of-distribution samples; no labels by construction.
struct UnlabeledDataset {
  std::vector<Tensor> images;
  std::string source_name;

  std::size_t size() const { return images.size(); }
  void validate() const;
};

LabeledDataset subset(const LabeledDataset& data, const std::vector<std::size_t>& indices);
UnlabeledDataset subset(const UnlabeledDataset& data, const std::vector<std::size_t>& indices);
/// First `head` items of a seeded permutation go to `.first`, the rest to `.second`.
std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& data, std::size_t head, std::uint64_t seed);
std::pair<UnlabeledDataset, UnlabeledDataset> split(const UnlabeledDataset& data, std::size_t head, std::uint64_t seed);
/// Drops the labels; the caller vouches for label-set disjointness.
UnlabeledDataset as_ood(const LabeledDataset& data);

// --- IDX ------------------------------------------------------------------

/// Raw IDX file contents: unsigned-byte element type only.
struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;
};

IdxArray parse_idx(std::string_view bytes, const std::string& origin = "<memory>");
IdxArray read_idx(const std::filesystem::path& path);
std::string serialize_idx(const IdxArray& array);
void write_idx(const std::filesystem::path& path, const IdxArray& array);

std::vector<std::string> digit_label_names();

/// Images (N,H,W) become (1,H,W) tensors scaled by 1/255.
LabeledDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                        std::vector<std::string> label_names = digit_label_names());
UnlabeledDataset load_idx_unlabeled(const std::filesystem::path& images, std::string source_name);

/// Quantize to bytes (round half up) and write (N,H,W) / (N) IDX files.
void save_idx(const LabeledDataset& data, const std::filesystem::path& images, const std::filesystem::path& labels);

// --- PGM ------------------------------------------------------------------

/// Binary P5 grayscale with maxval <= 255, returned as a (1,H,W) tensor scaled by 1/maxval.
Tensor parse_pgm(std::string_view bytes, const std::string& origin = "<memory>");
Tensor load_pgm(const std::filesystem::path& path);
/// P5 with maxval 255; values are clipped to [0,1] and rounded half up.
std::string serialize_pgm(const Tensor& image);
void save_pgm(const std::filesystem::path& path, const Tensor& image);

// --- Manifests ------------------------------------------------------------

/// Plain-text dataset manifest:
///
///     # comment
///     role: ood            (or: in)
///     name: my-photos
///     img/a.pgm            (ood: one path per line)
///     img/b.pgm 3          (in: path and integer label)
///
/// Relative paths resolve against the manifest's directory.
struct Manifest {
  DataRole role = DataRole::out_of_distribution;
  std::string name;
  std::vector<std::filesystem::path> paths;
  std::vector<int> labels;
};

Manifest read_manifest(const std::filesystem::path& path);
std::variant<LabeledDataset, UnlabeledDataset> load_manifest(const std::filesystem::path& path,
                                                             std::vector<std::string> label_names = {});

// --- Generators -----------------------------------------------------------

/// Per-pixel N(mean, stddev^2) on the [0,255] scale, clipped, then divided by 255.
UnlabeledDataset gen_gaussian_noise_ood(std::size_t count, const Shape& shape, double mean = 127.0,
                                        double stddev = 50.0, std::uint64_t seed = 0);

enum class ShapeKind { hbar, vbar, cross, square, ring, disk, diagonal };

std::string_view to_string(ShapeKind kind);
ShapeKind parse_shape_kind(std::string_view name);

/// Procedural single-shape images on a faint noisy background; label i means class_set[i].
LabeledDataset gen_synthetic_shapes(std::size_t count, const Shape& shape, const std::vector<ShapeKind>& class_set,
                                    std::uint64_t seed);

/// Throws std::invalid_argument when the two class sets share a kind.
void require_disjoint(const std::vector<ShapeKind>& in_set, const std::vector<ShapeKind>& out_set);

/// Generates a disjoint in/out pair; the out set drops its labels.
std::pair<LabeledDataset, UnlabeledDataset> gen_shape_pair(std::size_t in_count, std::size_t out_count,
                                                          const Shape& shape,
                                                          const std::vector<ShapeKind>& in_set,
                                                          const std::vector<ShapeKind>& out_set,
                                                          std::uint64_t seed);

}  // namespace owb
