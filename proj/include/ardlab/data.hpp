#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ardlab/errors.hpp"
#include "ardlab/io.hpp"
#include "ardlab/random.hpp"
#include "ardlab/tensor.hpp"

namespace ardlab {

enum class Split { train, test };

/// How stored features relate to raw ones.
struct Normalization {
  enum class Kind { none, pixel_scale, standard } kind = Kind::none;
  double pixel_scale = 1.0;          // raw = stored * pixel_scale
  std::vector<double> mean, stddev;  // raw = stored * stddev + mean

  double apply(double raw, std::size_t feature) const {
    switch (kind) {
      case Kind::none: return raw;
      case Kind::pixel_scale: return raw / pixel_scale;
      case Kind::standard: return (raw - mean[feature]) / stddev[feature];
    }
    return raw;
  }
  double invert(double stored, std::size_t feature) const {
    switch (kind) {
      case Kind::none: return stored;
      case Kind::pixel_scale: return stored * pixel_scale;
      case Kind::standard: return stored * stddev[feature] + mean[feature];
    }
    return stored;
  }
};

struct Dataset {
  Tensor features;  // [n, d]
  std::vector<int> labels;
  std::size_t num_classes = 0;
  Normalization normalization;
  Split split = Split::train;
  /// Valid input box, e.g. [0, 1] for images; attacks clamp into it.
  std::optional<std::pair<double, double>> input_range;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }

  void validate() const {
    if (labels.empty()) throw ContractError("dataset must be nonempty");
    if (num_classes < 2) throw ContractError("dataset needs at least 2 classes");
    if (features.rank() != 2 || features.dim(0) != labels.size())
      throw ContractError("dataset features/labels size mismatch");
    for (int y : labels)
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw ContractError("label out of range");
    if (!features.all_finite()) throw NumericError("dataset features are not finite");
  }

  /// Rows [begin, end) as a new dataset with the given split tag.
  Dataset subset(std::size_t begin, std::size_t end, Split tag) const {
    Dataset d;
    d.features = slice_rows(features, begin, end);
    d.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                    labels.begin() + static_cast<std::ptrdiff_t>(end));
    d.num_classes = num_classes;
    d.normalization = normalization;
    d.split = tag;
    d.input_range = input_range;
    return d;
  }
};

/// Standardizes features in place (per-feature mean/std); constant features keep std 1.
inline void standardize(Dataset& d) {
  const std::size_t n = d.size(), dim = d.dim();
  Normalization norm;
  norm.kind = Normalization::Kind::standard;
  norm.mean.assign(dim, 0.0);
  norm.stddev.assign(dim, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dim; ++j) norm.mean[j] += d.features.at(i, j);
  for (double& m : norm.mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dim; ++j) {
      const double c = d.features.at(i, j) - norm.mean[j];
      norm.stddev[j] += c * c;
    }
  for (double& s : norm.stddev) {
    s = std::sqrt(s / static_cast<double>(n));
    if (s == 0.0) s = 1.0;
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dim; ++j) d.features.at(i, j) = norm.apply(d.features.at(i, j), j);
  d.normalization = std::move(norm);
}

/// Applies a normalization fitted elsewhere (e.g. on the training split) to raw features.
inline void apply_normalization(Dataset& d, const Normalization& norm) {
  if (norm.kind == Normalization::Kind::standard && norm.mean.size() != d.dim())
    throw ContractError("apply_normalization: feature count mismatch");
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = 0; j < d.dim(); ++j) d.features.at(i, j) = norm.apply(d.features.at(i, j), j);
  d.normalization = norm;
}

/// Raw features recovered from stored ones.
inline Tensor denormalize(const Dataset& d) {
  Tensor out = d.features;
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = 0; j < d.dim(); ++j) out.at(i, j) = d.normalization.invert(out.at(i, j), j);
  return out;
}

namespace detail {
inline void shuffle_dataset(Dataset& d, Rng& rng) {
  std::vector<std::size_t> perm(d.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  shuffle(perm, rng);
  d.features = take_rows(d.features, perm);
  std::vector<int> labels(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) labels[i] = d.labels[perm[i]];
  d.labels = std::move(labels);
}
}  // namespace detail

/// Two interleaved unit half-circles: class 0 centred at (0, 0) on the upper
/// arc, class 1 centred at (1, 0.5) on the lower arc.
inline Dataset gen_two_moons(std::size_t n, double noise_sigma, std::uint64_t seed) {
  if (n == 0 || n % 2 != 0) throw ContractError("two_moons: n must be positive and even");
  if (noise_sigma < 0.0) throw ContractError("two_moons: noise_sigma must be nonnegative");
  Rng rng(seed);
  Dataset d;
  d.num_classes = 2;
  d.features = Tensor({n, 2});
  d.labels.resize(n);
  const std::size_t half = n / 2;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = rng.uniform() * std::numbers::pi;
    const bool upper = i < half;
    double x = upper ? std::cos(t) : 1.0 - std::cos(t);
    double y = upper ? std::sin(t) : 0.5 - std::sin(t);
    if (noise_sigma > 0.0) {
      x += noise_sigma * rng.normal();
      y += noise_sigma * rng.normal();
    }
    d.features.at(i, 0) = x;
    d.features.at(i, 1) = y;
    d.labels[i] = upper ? 0 : 1;
  }
  detail::shuffle_dataset(d, rng);
  return d;
}

/// Isotropic Gaussian clusters, one class per centre.
inline Dataset gen_blobs(std::size_t n, const std::vector<std::vector<double>>& centers, double sigma,
                         std::uint64_t seed) {
  if (centers.size() < 2) throw ContractError("blobs: need at least 2 centers (C >= 2)");
  if (n < centers.size()) throw ContractError("blobs: need at least one point per center");
  if (sigma < 0.0) throw ContractError("blobs: sigma must be nonnegative");
  const std::size_t dim = centers.front().size();
  for (const auto& c : centers)
    if (c.size() != dim || dim == 0) throw ContractError("blobs: centers must share a positive dimension");
  Rng rng(seed);
  Dataset d;
  d.num_classes = centers.size();
  d.features = Tensor({n, dim});
  d.labels.resize(n);
  const std::size_t per = n / centers.size(), extra = n % centers.size();
  std::size_t row = 0;
  for (std::size_t k = 0; k < centers.size(); ++k) {
    const std::size_t count = per + (k < extra ? 1 : 0);
    for (std::size_t i = 0; i < count; ++i, ++row) {
      for (std::size_t j = 0; j < dim; ++j) d.features.at(row, j) = centers[k][j] + sigma * rng.normal();
      d.labels[row] = static_cast<int>(k);
    }
  }
  detail::shuffle_dataset(d, rng);
  return d;
}

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// MNIST-style IDX pair. Pixels are scaled to [0, 1] and flattened.
inline Dataset load_mnist_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                              std::size_t limit, Split split = Split::train) {
  if (limit == 0) throw ContractError("load_mnist_idx: limit 0 gives an empty dataset");
  const std::string img_bytes = read_file(images_path);
  const std::string lbl_bytes = read_file(labels_path);

  ByteReader img(img_bytes, /*big_endian=*/true);
  if (const auto magic = img.u32("images magic"); magic != kIdxImagesMagic)
    throw FormatError("images magic: expected 0x00000803, got " + std::to_string(magic));
  const std::uint32_t count = img.u32("images count");
  const std::uint32_t rows = img.u32("images rows");
  const std::uint32_t cols = img.u32("images cols");

  ByteReader lbl(lbl_bytes, /*big_endian=*/true);
  if (const auto magic = lbl.u32("labels magic"); magic != kIdxLabelsMagic)
    throw FormatError("labels magic: expected 0x00000801, got " + std::to_string(magic));
  const std::uint32_t lcount = lbl.u32("labels count");
  if (lcount != count)
    throw FormatError("count mismatch: " + std::to_string(count) + " images vs " + std::to_string(lcount) + " labels");

  const std::size_t pixels = static_cast<std::size_t>(rows) * cols;
  if (img.remaining() < static_cast<std::size_t>(count) * pixels) throw FormatError("images payload truncated");
  if (lbl.remaining() < count) throw FormatError("labels payload truncated");

  const std::size_t n = std::min<std::size_t>(count, limit);
  if (n == 0) throw ContractError("load_mnist_idx: file holds no samples");
  Dataset d;
  d.split = split;
  d.features = Tensor({n, pixels});
  d.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto px = img.bytes(pixels, "image pixels");
    for (std::size_t j = 0; j < pixels; ++j)
      d.features.at(i, j) = static_cast<double>(static_cast<unsigned char>(px[j])) / 255.0;
    d.labels[i] = lbl.u8("label");
    max_label = std::max(max_label, d.labels[i]);
  }
  d.num_classes = std::max(10, max_label + 1);
  d.normalization.kind = Normalization::Kind::pixel_scale;
  d.normalization.pixel_scale = 255.0;
  d.input_range = std::pair{0.0, 1.0};
  return d;
}

/// Encodes an IDX image/label pair; used to produce fixtures.
inline std::pair<std::string, std::string> encode_idx(const std::vector<std::uint8_t>& pixels,
                                                      const std::vector<std::uint8_t>& labels,
                                                      std::uint32_t rows, std::uint32_t cols) {
  auto be32 = [](std::string& s, std::uint32_t v) {
    for (int i = 3; i >= 0; --i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  std::string img, lbl;
  be32(img, kIdxImagesMagic);
  be32(img, static_cast<std::uint32_t>(labels.size()));
  be32(img, rows);
  be32(img, cols);
  img.append(pixels.begin(), pixels.end());
  be32(lbl, kIdxLabelsMagic);
  be32(lbl, static_cast<std::uint32_t>(labels.size()));
  lbl.append(labels.begin(), labels.end());
  return {img, lbl};
}

}  // namespace ardlab
