#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dlab {

enum class ErrorKind { Config, Input, Format, Io };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};
struct InputError : Error {
  explicit InputError(const std::string& what) : Error(ErrorKind::Input, what) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& what) : Error(ErrorKind::Format, what) {}
};
struct IoError : Error {
  explicit IoError(const std::string& what) : Error(ErrorKind::Io, what) {}
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(std::span<const std::size_t> shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(std::span<const std::size_t> shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Shape-tagged contiguous row-major array of doubles.
///
/// The leading dimension is the batch dimension wherever a DenseArray
/// carries examples; `rows()` and `row(i)` view it that way.
class DenseArray {
 public:
  DenseArray() = default;

  explicit DenseArray(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), 0.0) {}

  DenseArray(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw InputError("DenseArray: shape " + shape_string(shape_) + " does not match " +
                       std::to_string(data_.size()) + " values");
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& vector() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::size_t rows() const noexcept { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t row_size() const noexcept {
    return shape_.empty() ? 0 : shape_size(std::span(shape_).subspan(1));
  }
  std::span<double> row(std::size_t i) { return std::span(data_).subspan(i * row_size(), row_size()); }
  std::span<const double> row(std::size_t i) const {
    return std::span(data_).subspan(i * row_size(), row_size());
  }
  /// Per-row shape (everything after the batch dimension).
  Shape row_shape() const { return shape_.empty() ? Shape{} : Shape(shape_.begin() + 1, shape_.end()); }

  DenseArray reshaped(Shape shape) const& { return DenseArray(std::move(shape), data_); }
  DenseArray reshaped(Shape shape) && { return DenseArray(std::move(shape), std::move(data_)); }

  bool all_finite() const noexcept {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void require_finite(const char* where) const {
    if (!all_finite()) throw InputError(std::string(where) + ": non-finite value");
  }

  friend bool operator==(const DenseArray&, const DenseArray&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Gathers the given rows of `src` into a new array.
inline DenseArray gather_rows(const DenseArray& src, std::span<const std::size_t> indices) {
  Shape shape = src.shape();
  shape[0] = indices.size();
  DenseArray out(std::move(shape));
  const std::size_t m = src.row_size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto from = src.row(indices[i]);
    std::copy(from.begin(), from.end(), out.values().begin() + static_cast<std::ptrdiff_t>(i * m));
  }
  return out;
}

inline double linf_norm(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

inline double l1_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += std::abs(x);
  return s;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace dlab
