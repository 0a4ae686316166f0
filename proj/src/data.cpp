#include "weckd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>

#include "weckd/errors.hpp"
#include "weckd/rng.hpp"

namespace weckd::data {

namespace fs = std::filesystem;

void LabeledDataset::validate() const {
  if (images.rank() != 4) throw ShapeError("dataset images must be [N,C,H,W], got " + images.shape_string());
  if (images.dim(0) != labels.size()) {
    throw ShapeError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                     std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw ContractError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                          " outside [0," + std::to_string(num_classes) + ")");
    }
  }
  for (const double v : images.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ContractError("pixel value outside [0,1]");
  }
}

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset, const fs::path& path) {
  if (offset + 4 > bytes.size()) {
    throw ParseError(ParseError::Kind::truncated, bytes.size(), path.string() + ": truncated IDX header");
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

void check_magic(std::uint32_t magic, std::uint32_t expected, const fs::path& path) {
  if (magic != expected) {
    char buf[64];
    std::snprintf(buf, sizeof buf, ": bad IDX magic 0x%08x, expected 0x%08x", magic, expected);
    throw ParseError(ParseError::Kind::bad_magic, 0, path.string() + buf);
  }
}

}  // namespace

LabeledDataset load_idx(const fs::path& images_path, const fs::path& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  check_magic(read_be32(img, 0, images_path), kImageMagic, images_path);
  check_magic(read_be32(lab, 0, labels_path), kLabelMagic, labels_path);

  const std::size_t n = read_be32(img, 4, images_path);
  const std::size_t h = read_be32(img, 8, images_path);
  const std::size_t w = read_be32(img, 12, images_path);
  const std::size_t n_labels = read_be32(lab, 4, labels_path);
  if (n == 0 || h == 0 || w == 0) {
    throw ParseError(ParseError::Kind::shape_mismatch, 4, images_path.string() + ": zero-sized IDX dimension");
  }
  const std::size_t pixels = n * h * w;
  if (img.size() < 16 + pixels) {
    throw ParseError(ParseError::Kind::truncated, img.size(),
                     images_path.string() + ": expected " + std::to_string(pixels) + " pixel bytes, file has " +
                         std::to_string(img.size() - 16));
  }
  if (lab.size() < 8 + n_labels) {
    throw ParseError(ParseError::Kind::truncated, lab.size(),
                     labels_path.string() + ": expected " + std::to_string(n_labels) + " label bytes");
  }
  if (n_labels != n) {
    throw ParseError(ParseError::Kind::count_mismatch, 4,
                     labels_path.string() + ": " + std::to_string(n_labels) + " labels for " + std::to_string(n) +
                         " images");
  }

  LabeledDataset ds;
  ds.images = Tensor({n, 1, h, w});
  for (std::size_t i = 0; i < pixels; ++i) ds.images[i] = static_cast<double>(img[16 + i]) / 255.0;
  ds.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lab[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = static_cast<std::size_t>(max_label) + 1;
  for (std::size_t c = 0; c < ds.num_classes; ++c) ds.class_names.push_back("class_" + std::to_string(c));
  return ds;
}

void write_idx(const LabeledDataset& dataset, const fs::path& images_path, const fs::path& labels_path) {
  dataset.validate();
  if (dataset.channels() != 1) {
    throw ContractError("write_idx: IDX images are single-channel, dataset has " +
                        std::to_string(dataset.channels()) + " channels");
  }
  if (dataset.num_classes > 256) throw ContractError("write_idx: labels must fit in one byte");
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img) throw std::runtime_error("cannot write " + images_path.string());
  if (!lab) throw std::runtime_error("cannot write " + labels_path.string());

  put_be32(img, kImageMagic);
  put_be32(img, static_cast<std::uint32_t>(dataset.size()));
  put_be32(img, static_cast<std::uint32_t>(dataset.height()));
  put_be32(img, static_cast<std::uint32_t>(dataset.width()));
  std::vector<char> pixels(dataset.images.numel());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    pixels[i] = static_cast<char>(static_cast<std::uint8_t>(std::lround(dataset.images[i] * 255.0)));
  }
  img.write(pixels.data(), static_cast<std::streamsize>(pixels.size()));

  put_be32(lab, kLabelMagic);
  put_be32(lab, static_cast<std::uint32_t>(dataset.size()));
  for (const int label : dataset.labels) lab.put(static_cast<char>(static_cast<std::uint8_t>(label)));
  if (!img || !lab) throw std::runtime_error("write failed for " + images_path.string());
}

namespace {

// Shape membership in coordinates relative to the shape centre, scaled so the
// shape spans roughly [-1,1] on both axes.
bool inside(std::size_t shape, double u, double v) {
  const double r2 = u * u + v * v;
  switch (shape) {
    case 0: return r2 <= 1.0;
    case 1: return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case 2: return v >= -0.85 && v <= 0.85 && std::abs(u) <= 0.95 * (v + 0.85) / 1.7;
    case 3: return (std::abs(u) <= 0.28 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.28 && std::abs(u) <= 1.0);
    case 4: return r2 <= 1.0 && r2 >= 0.36;
    case 5: return std::abs(v) <= 1.0 && (std::abs(u - 0.55) <= 0.2 || std::abs(u + 0.55) <= 0.2);
    case 6: return std::abs(u - v) <= 0.32 && std::abs(u) <= 1.0 && std::abs(v) <= 1.0;
    case 7: {
      if (std::abs(u) >= 1.0 || std::abs(v) >= 1.0) return false;
      const auto cu = static_cast<int>(std::floor((u + 1.0) * 1.5));
      const auto cv = static_cast<int>(std::floor((v + 1.0) * 1.5));
      return (cu + cv) % 2 == 0;
    }
    default: return false;
  }
}

}  // namespace

LabeledDataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2 || spec.classes > kMaxSyntheticClasses) {
    throw ConfigError("classes must lie in [2, 8], got " + std::to_string(spec.classes), "dataset.synthetic.classes");
  }
  if (spec.n < 10 * spec.classes) {
    throw ConfigError("n must be at least 10 * classes", "dataset.synthetic.n");
  }
  if (spec.height < 8 || spec.width < 8) throw ConfigError("image size must be at least 8x8", "dataset.synthetic.height");
  if (!(spec.noise_std >= 0.0) || !std::isfinite(spec.noise_std)) {
    throw ConfigError("noise_std must be finite and non-negative", "dataset.synthetic.noise_std");
  }

  const std::size_t n = spec.n, H = spec.height, W = spec.width;
  LabeledDataset ds;
  ds.num_classes = spec.classes;
  for (std::size_t c = 0; c < spec.classes; ++c) ds.class_names.emplace_back(kShapeNames[c]);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(i % spec.classes);
  Rng rng(spec.seed);
  rng.shuffle(std::span<int>(ds.labels));

  ds.images = Tensor({n, 1, H, W});
  const double side = static_cast<double>(std::min(H, W));
  for (std::size_t i = 0; i < n; ++i) {
    const double cx = rng.uniform(0.38, 0.62) * static_cast<double>(W);
    const double cy = rng.uniform(0.38, 0.62) * static_cast<double>(H);
    const double scale = rng.uniform(0.24, 0.34) * side;
    double* img = ds.images.raw() + i * H * W;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const double u = (static_cast<double>(x) + 0.5 - cx) / scale;
        const double v = (static_cast<double>(y) + 0.5 - cy) / scale;
        double p = inside(static_cast<std::size_t>(ds.labels[i]), u, v) ? 1.0 : 0.0;
        if (spec.noise_std > 0.0) p = std::clamp(p + rng.normal(0.0, spec.noise_std), 0.0, 1.0);
        img[y * W + x] = p;
      }
    }
  }
  return ds;
}

DatasetSplit partition(const LabeledDataset& dataset, std::uint64_t seed, bool stratified) {
  const std::size_t n = dataset.size();
  if (n < 10) throw ConfigError("partition needs at least 10 samples, got " + std::to_string(n), "dataset");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));

  if (stratified) {
    std::vector<std::vector<std::size_t>> by_class(dataset.num_classes);
    for (const std::size_t i : order) by_class.at(static_cast<std::size_t>(dataset.labels[i])).push_back(i);
    std::vector<std::size_t> interleaved;
    interleaved.reserve(n);
    for (std::size_t round = 0; interleaved.size() < n; ++round) {
      for (const auto& members : by_class) {
        if (round < members.size()) interleaved.push_back(members[round]);
      }
    }
    order = std::move(interleaved);
  }

  const std::size_t tenth = n / 10;
  DatasetSplit split;
  split.seed = seed;
  const auto slice = [&](std::size_t begin, std::size_t end) {
    return std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                    order.begin() + static_cast<std::ptrdiff_t>(end));
  };
  split.d1 = slice(0, tenth);
  split.d2 = slice(tenth, 2 * tenth);
  split.d3 = slice(2 * tenth, 3 * tenth);
  split.d_test = slice(3 * tenth, n);
  return split;
}

void check_disjoint(const DatasetSplit& split, std::size_t n) {
  std::vector<char> seen(n, 0);
  for (const auto* set : {&split.d1, &split.d2, &split.d3, &split.d_test}) {
    for (const std::size_t i : *set) {
      if (i >= n) throw ContractError("split index " + std::to_string(i) + " out of range");
      if (seen[i]) throw ContractError("split index " + std::to_string(i) + " appears in more than one subset");
      seen[i] = 1;
    }
  }
}

TrainValSplit carve_validation(std::span<const std::size_t> subset, double fraction, std::uint64_t seed) {
  if (subset.size() < 2) throw ContractError("carve_validation needs at least 2 samples");
  if (!(fraction > 0.0 && fraction < 1.0)) throw ContractError("validation fraction must lie in (0,1)");
  std::vector<std::size_t> order(subset.begin(), subset.end());
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  const auto n_val = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(fraction * static_cast<double>(order.size()))));
  const auto cut = order.begin() + static_cast<std::ptrdiff_t>(order.size() - n_val);
  return {std::vector<std::size_t>(order.begin(), cut), std::vector<std::size_t>(cut, order.end())};
}

Tensor gather_images(const LabeledDataset& dataset, std::span<const std::size_t> indices, std::size_t channels) {
  const std::size_t C = dataset.channels(), H = dataset.height(), W = dataset.width();
  if (C != channels && C != 1) {
    throw ShapeError("dataset has " + std::to_string(C) + " channels, model expects " + std::to_string(channels));
  }
  const std::size_t plane = H * W;
  Tensor out({indices.size(), channels, H, W});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    if (indices[b] >= dataset.size()) throw ContractError("sample index out of range");
    const double* src = dataset.images.raw() + indices[b] * C * plane;
    double* dst = out.raw() + b * channels * plane;
    for (std::size_t c = 0; c < channels; ++c) {
      std::copy_n(src + (C == 1 ? 0 : c) * plane, plane, dst + c * plane);
    }
  }
  return out;
}

std::vector<int> gather_labels(const LabeledDataset& dataset, std::span<const std::size_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (const std::size_t i : indices) out.push_back(dataset.labels.at(i));
  return out;
}

std::vector<Batch> make_batches(const LabeledDataset& dataset, std::span<const std::size_t> indices,
                                std::size_t batch_size, std::optional<std::uint64_t> shuffle_seed,
                                std::size_t channels) {
  if (batch_size == 0) throw ContractError("batch_size must be at least 1");
  if (indices.empty()) throw ContractError("make_batches: empty index set");
  std::vector<std::size_t> order(indices.begin(), indices.end());
  if (shuffle_seed) {
    Rng rng(*shuffle_seed);
    rng.shuffle(std::span<std::size_t>(order));
  }
  std::vector<Batch> batches;
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
    const std::span<const std::size_t> chunk(order.data() + begin, std::min(batch_size, order.size() - begin));
    batches.push_back({gather_images(dataset, chunk, channels), gather_labels(dataset, chunk)});
  }
  return batches;
}

namespace {

void apply(AugmentOp op, double* img, std::size_t C, std::size_t H, std::size_t W) {
  std::vector<double> tmp(H * W);
  for (std::size_t c = 0; c < C; ++c) {
    double* plane = img + c * H * W;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        switch (op) {
          case AugmentOp::hflip: tmp[y * W + x] = plane[y * W + (W - 1 - x)]; break;
          case AugmentOp::vflip: tmp[y * W + x] = plane[(H - 1 - y) * W + x]; break;
          // counter-clockwise: out[y][x] = in[x][W-1-y]
          case AugmentOp::rot90: tmp[y * W + x] = plane[x * W + (W - 1 - y)]; break;
        }
      }
    }
    std::copy(tmp.begin(), tmp.end(), plane);
  }
}

}  // namespace

Tensor augment(const Tensor& batch, std::span<const AugmentOp> ops, std::uint64_t seed, bool force) {
  if (batch.rank() != 4) throw ShapeError("augment expects [B,C,H,W], got " + batch.shape_string());
  Tensor out = batch;
  if (ops.empty()) return out;
  const std::size_t B = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  for (const AugmentOp op : ops) {
    if (op == AugmentOp::rot90 && H != W) {
      throw ShapeError("rot90 needs square images, got " + batch.shape_string());
    }
  }
  Rng rng(seed);
  for (std::size_t b = 0; b < B; ++b) {
    for (const AugmentOp op : ops) {
      const bool hit = rng.uniform() < 0.5;
      if (force || hit) apply(op, out.raw() + b * C * H * W, C, H, W);
    }
  }
  return out;
}

}  // namespace weckd::data
