#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "weckd/tensor.hpp"

namespace weckd::data {

struct LabeledDataset {
  Tensor images;  // [N,C,H,W], values in [0,1]
  std::vector<int> labels;
  std::vector<std::string> class_names;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }

  // Labels in [0,K), pixels in [0,1], image count equals label count.
  void validate() const;
};

LabeledDataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

// Grayscale datasets only (IDX image files are n x h x w). Pixels are stored
// as round(v * 255).
void write_idx(const LabeledDataset& dataset, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path);

inline constexpr std::size_t kMaxSyntheticClasses = 8;
inline constexpr const char* kShapeNames[kMaxSyntheticClasses] = {
    "circle", "square", "triangle", "cross", "ring", "two_bars", "diagonal", "checker"};

struct SyntheticSpec {
  std::size_t n = 1000;
  std::size_t classes = 4;
  std::size_t height = 32;
  std::size_t width = 32;
  double noise_std = 0.15;
  std::uint64_t seed = 0;

  friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

// One grayscale shape per class at a jittered position and scale, plus
// clipped Gaussian noise. Class counts differ by at most one.
LabeledDataset generate_synthetic(const SyntheticSpec& spec);

struct DatasetSplit {
  std::vector<std::size_t> d1, d2, d3, d_test;
  std::uint64_t seed = 0;
};

// Seeded shuffle, then slices floor(0.1N) x 3 and the remainder. With
// `stratified`, the shuffled indices are interleaved class by class before
// slicing so each slice is class-balanced to within one sample per class.
DatasetSplit partition(const LabeledDataset& dataset, std::uint64_t seed, bool stratified = false);

// Throws ContractError if any index repeats across or within the four sets.
void check_disjoint(const DatasetSplit& split, std::size_t n);

struct TrainValSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

// Seeded shuffle of `subset`; the last max(1, floor(fraction * n)) indices
// become validation.
TrainValSplit carve_validation(std::span<const std::size_t> subset, double fraction, std::uint64_t seed);

struct Batch {
  Tensor images;
  std::vector<int> labels;
};

// Images at `indices`, as [n, channels, H, W]. Single-channel datasets are
// replicated across channels when `channels` > 1.
Tensor gather_images(const LabeledDataset& dataset, std::span<const std::size_t> indices,
                     std::size_t channels);

std::vector<int> gather_labels(const LabeledDataset& dataset, std::span<const std::size_t> indices);

std::vector<Batch> make_batches(const LabeledDataset& dataset, std::span<const std::size_t> indices,
                                std::size_t batch_size, std::optional<std::uint64_t> shuffle_seed,
                                std::size_t channels);

enum class AugmentOp { hflip, vflip, rot90 };

// Each op is applied to each image independently with probability 0.5, or
// always when `force` is set. rot90 needs square images.
Tensor augment(const Tensor& batch, std::span<const AugmentOp> ops, std::uint64_t seed, bool force = false);

}  // namespace weckd::data
