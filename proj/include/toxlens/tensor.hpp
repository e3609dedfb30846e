#ifndef TOXLENS_TENSOR_HPP_
#define TOXLENS_TENSOR_HPP_

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "toxlens/error.hpp"

namespace toxlens {

// Dense row-major float32 storage. Reductions elsewhere accumulate in
// double; these types only own the data and its shape/finiteness
// invariants.

namespace detail {
inline void require_finite(std::span<const float> data, const char* what) {
  for (float v : data) {
    if (!std::isfinite(v)) {
      throw Error::validation("non_finite_tensor", std::string(what) + " contains NaN/Inf");
    }
  }
}
}  // namespace detail

class Tensor1 {
 public:
  Tensor1() = default;

  explicit Tensor1(int size) : data_(check_size(size), 0.0f) {}

  explicit Tensor1(std::vector<float> data) : data_(std::move(data)) {
    if (data_.empty()) throw Error::validation("empty_tensor", "Tensor1 needs at least one entry");
    detail::require_finite(data_, "Tensor1");
  }

  int size() const { return static_cast<int>(data_.size()); }
  bool empty() const { return data_.empty(); }

  float operator[](int i) const { return data_[static_cast<std::size_t>(i)]; }
  float& operator[](int i) { return data_[static_cast<std::size_t>(i)]; }

  const float* data() const { return data_.data(); }
  float* data() { return data_.data(); }

  std::span<const float> view() const { return data_; }
  std::span<float> view() { return data_; }

  bool operator==(const Tensor1&) const = default;

 private:
  static int check_size(int size) {
    if (size <= 0) throw Error::validation("bad_shape", "Tensor1 size must be positive");
    return size;
  }
  std::vector<float> data_;
};

class Tensor2 {
 public:
  Tensor2() = default;

  Tensor2(int rows, int cols) : rows_(rows), cols_(cols) {
    check_shape(rows, cols);
    data_.assign(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols), 0.0f);
  }

  Tensor2(int rows, int cols, std::vector<float> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    check_shape(rows, cols);
    if (data_.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols)) {
      throw Error::validation("bad_shape", "Tensor2 data length does not match rows*cols");
    }
    detail::require_finite(data_, "Tensor2");
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  float at(int r, int c) const { return data_[index(r, c)]; }
  float& at(int r, int c) { return data_[index(r, c)]; }

  std::span<const float> row(int r) const { return {data_.data() + index(r, 0), static_cast<std::size_t>(cols_)}; }
  std::span<float> row(int r) { return {data_.data() + index(r, 0), static_cast<std::size_t>(cols_)}; }

  Tensor1 row_copy(int r) const {
    auto span = row(r);
    return Tensor1(std::vector<float>(span.begin(), span.end()));
  }

  Tensor1 column_copy(int c) const {
    std::vector<float> data(static_cast<std::size_t>(rows_));
    for (int r = 0; r < rows_; ++r) data[static_cast<std::size_t>(r)] = at(r, c);
    return Tensor1(std::move(data));
  }

  void set_row(int r, std::span<const float> values) {
    if (static_cast<int>(values.size()) != cols_) {
      throw Error::validation("shape_mismatch", "row length does not match column count");
    }
    auto dst = row(r);
    for (int c = 0; c < cols_; ++c) dst[static_cast<std::size_t>(c)] = values[static_cast<std::size_t>(c)];
  }

  const float* data() const { return data_.data(); }
  float* data() { return data_.data(); }
  std::span<const float> view() const { return data_; }
  std::span<float> view() { return data_; }

  bool operator==(const Tensor2&) const = default;

 private:
  static void check_shape(int rows, int cols) {
    if (rows <= 0 || cols <= 0) throw Error::validation("bad_shape", "Tensor2 dims must be positive");
  }
  std::size_t index(int r, int c) const {
    return static_cast<std::size_t>(r) * static_cast<std::size_t>(cols_) + static_cast<std::size_t>(c);
  }

  int rows_ = 0;
  int cols_ = 0;
  std::vector<float> data_;
};

}  // namespace toxlens

#endif  // TOXLENS_TENSOR_HPP_
