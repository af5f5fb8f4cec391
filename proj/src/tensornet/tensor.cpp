#include "nbisect/tensornet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "nbisect/error.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace nbisect::tn {

namespace {

// Training allocates and frees the same large buffers every step. By default
// glibc serves them with fresh mmaps and trims the heap eagerly, so every
// step pays for page faults on zeroed memory. Keeping freed memory in the
// heap roughly halves step time for the convolutional models.
[[maybe_unused]] const bool kHeapTuned = [] {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
  return true;
}();

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::span<const double> data)
    : Tensor(std::move(shape), Storage(data.begin(), data.end())) {}

Tensor::Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != numel(shape_))
    throw ShapeMismatch("tensor data has " + std::to_string(data_.size()) + " elements, shape " +
                        to_string(shape_) + " needs " + std::to_string(numel(shape_)));
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> idx) const {
  if (idx.size() != shape_.size())
    throw ShapeMismatch("index rank " + std::to_string(idx.size()) + " on tensor " + to_string(shape_));
  std::size_t off = 0;
  std::size_t d = 0;
  for (std::size_t i : idx) {
    if (i >= shape_[d]) throw ShapeMismatch("index out of range on tensor " + to_string(shape_));
    off = off * shape_[d] + i;
    ++d;
  }
  return off;
}

double& Tensor::at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
double Tensor::at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeMismatch("item() on tensor " + to_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor t = *this;
  return std::move(t).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  if (numel(shape) != data_.size())
    throw ShapeMismatch("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  shape_ = std::move(shape);
  return std::move(*this);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void require_shape(const Tensor& t, const Shape& expected, const char* what) {
  if (t.shape() != expected)
    throw ShapeMismatch(std::string(what) + ": expected shape " + to_string(expected) + ", got " +
                        to_string(t.shape()));
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    throw ShapeMismatch(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                        to_string(t.shape()));
}

}  // namespace nbisect::tn
