#include "weckd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "weckd/errors.hpp"

namespace weckd {

std::string format_dims(const Dims& dims) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) out << ',';
    out << dims[i];
  }
  out << ']';
  return out.str();
}

std::size_t dims_product(const Dims& dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

namespace {

void check_dims(const Dims& dims) {
  if (dims.empty() || dims.size() > Tensor::kMaxRank) {
    throw ShapeError("tensor rank must be in [1, 4], got dims " + format_dims(dims));
  }
  for (auto d : dims) {
    if (d == 0) throw ShapeError("tensor dims must be positive, got " + format_dims(dims));
  }
}

}  // namespace

Tensor::Tensor(Dims dims, double fill) : dims_(std::move(dims)) {
  check_dims(dims_);
  data_.assign(dims_product(dims_), fill);
}

Tensor::Tensor(Dims dims, std::vector<double> data) : dims_(std::move(dims)), data_(std::move(data)) {
  check_dims(dims_);
  if (data_.size() != dims_product(dims_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match dims " +
                     format_dims(dims_));
  }
}

Tensor Tensor::scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= dims_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for dims " + format_dims(dims_));
  }
  return dims_[axis];
}

double& Tensor::at(std::size_t i, std::size_t j) { return data_[i * dims_[1] + j]; }
double Tensor::at(std::size_t i, std::size_t j) const { return data_[i * dims_[1] + j]; }

double& Tensor::at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
  return data_[((b * dims_[1] + c) * dims_[2] + h) * dims_[3] + w];
}
double Tensor::at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
  return data_[((b * dims_[1] + c) * dims_[2] + h) * dims_[3] + w];
}

double Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on non-scalar tensor " + format_dims(dims_));
  return data_[0];
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Dims dims) const {
  if (dims_product(dims) != data_.size()) {
    throw ShapeError("cannot reshape " + format_dims(dims_) + " to " + format_dims(dims));
  }
  return Tensor(std::move(dims), data_);
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  if (begin >= end || end > dims_.at(0)) {
    throw ShapeError("row slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for dims " + format_dims(dims_));
  }
  const std::size_t row = data_.size() / dims_[0];
  Dims out_dims = dims_;
  out_dims[0] = end - begin;
  return Tensor(std::move(out_dims),
                std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * row),
                                    data_.begin() + static_cast<std::ptrdiff_t>(end * row)));
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.dims_ != dims_) {
    throw ShapeError("cannot add " + format_dims(other.dims_) + " into " + format_dims(dims_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

bool operator==(const Tensor& a, const Tensor& b) {
  return a.dims_ == b.dims_ &&
         (a.data_.empty() ||
          std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(double)) == 0);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims()) {
    throw ShapeError("max_abs_diff shape mismatch " + a.shape_string() + " vs " + b.shape_string());
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace weckd
