#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace weckd {

using Dims = std::vector<std::size_t>;

std::string format_dims(const Dims& dims);
std::size_t dims_product(const Dims& dims);

// Dense row-major array of doubles, rank 1..4. Value semantics throughout.
class Tensor {
 public:
  static constexpr std::size_t kMaxRank = 4;

  Tensor() = default;
  explicit Tensor(Dims dims, double fill = 0.0);
  Tensor(Dims dims, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::initializer_list<double> values);

  const Dims& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool is_scalar() const noexcept { return data_.size() == 1; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  double* raw() noexcept { return data_.data(); }
  const double* raw() const noexcept { return data_.data(); }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double& at(std::size_t i, std::size_t j);
  double at(std::size_t i, std::size_t j) const;
  double& at(std::size_t b, std::size_t c, std::size_t h, std::size_t w);
  double at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const;

  double item() const;
  void fill(double value);
  bool all_finite() const noexcept;
  std::string shape_string() const { return format_dims(dims_); }

  // Same data, different dims; element count must match.
  Tensor reshaped(Dims dims) const;

  // Rows [begin, end) along axis 0.
  Tensor slice_rows(std::size_t begin, std::size_t end) const;

  Tensor& operator+=(const Tensor& other);

  // Exact equality of dims and every element bit pattern.
  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  Dims dims_;
  std::vector<double> data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace weckd
