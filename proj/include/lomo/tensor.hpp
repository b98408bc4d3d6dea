#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "lomo/error.hpp"
#include "lomo/half.hpp"
#include "lomo/memory_ledger.hpp"

namespace lomo {

enum class Precision : std::uint8_t { Full, HalfEmulated };

inline std::string_view to_string(Precision p) {
  return p == Precision::Full ? "full" : "half";
}

inline std::size_t bytes_per_element(Precision p) { return p == Precision::Full ? 4 : 2; }

inline double round_to(Precision p, double x) {
  return p == Precision::Full ? x : round_to_half(x);
}

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major array. Values are held as doubles; a HalfEmulated tensor
// rounds every write through binary16, so each element is exactly
// representable in 16 bits. nbytes() reports the logical storage size
// (4 bytes per element for Full, 2 for HalfEmulated).
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, Precision precision = Precision::Full)
      : shape_(std::move(shape)), precision_(precision), data_(element_count(shape_), 0.0) {
    validate_shape();
  }

  Tensor(Shape shape, std::vector<double> values, Precision precision = Precision::Full)
      : shape_(std::move(shape)), precision_(precision), data_(std::move(values)) {
    validate_shape();
    if (data_.size() != element_count(shape_)) {
      throw ShapeError("tensor: " + std::to_string(data_.size()) +
                       " values do not fill shape " + shape_string(shape_));
    }
    if (precision_ == Precision::HalfEmulated) {
      for (auto& v : data_) v = round_to_half(v);
    }
  }

  static Tensor scalar(double v, Precision p = Precision::Full) { return Tensor({1}, {v}, p); }

  const Shape& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  Precision precision() const { return precision_; }
  std::int64_t nbytes() const {
    return static_cast<std::int64_t>(data_.size() * bytes_per_element(precision_));
  }

  std::span<const double> data() const { return data_; }
  double operator[](std::size_t i) const { return data_[i]; }
  double item() const { return data_.at(0); }

  void set(std::size_t i, double v) { data_[i] = round_to(precision_, v); }

  // Applies fn(index, old) -> new to every element, rounding each write.
  template <typename Fn>
  void update(Fn&& fn) {
    for (std::size_t i = 0; i < data_.size(); ++i) {
      data_[i] = round_to(precision_, fn(i, data_[i]));
    }
  }

  // Attaches this tensor's bytes to a ledger category. Replaces any earlier
  // attachment.
  void track(MemoryLedger* ledger, MemoryCategory category) {
    charge_ = LedgerCharge(ledger, category, nbytes());
  }
  void untrack() { charge_ = LedgerCharge(); }
  const LedgerCharge& charge() const { return charge_; }

  // Converts in place; the ledger charge follows the new byte count.
  void convert(Precision p) {
    if (p == precision_) return;
    precision_ = p;
    if (p == Precision::HalfEmulated) {
      for (auto& v : data_) v = round_to_half(v);
    }
    charge_.resize(nbytes());
  }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  // Bitwise equality of shape, precision and values.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    if (a.shape_ != b.shape_ || a.precision_ != b.precision_) return false;
    for (std::size_t i = 0; i < a.data_.size(); ++i) {
      if (std::bit_cast<std::uint64_t>(a.data_[i]) != std::bit_cast<std::uint64_t>(b.data_[i])) {
        return false;
      }
    }
    return true;
  }

 private:
  void validate_shape() const {
    if (shape_.empty()) throw ShapeError("tensor: empty shape");
    for (auto e : shape_) {
      if (e == 0) throw ShapeError("tensor: zero extent in shape " + shape_string(shape_));
    }
  }

  Shape shape_;
  Precision precision_ = Precision::Full;
  std::vector<double> data_;
  LedgerCharge charge_;
};

// Copy with a new precision. Half to Full is lossless; Full to Half rounds to
// nearest even and overflows to infinity. The result is untracked.
inline Tensor cast(const Tensor& t, Precision p) {
  std::vector<double> values(t.data().begin(), t.data().end());
  return Tensor(t.shape(), std::move(values), p);
}

}  // namespace lomo
