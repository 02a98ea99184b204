#pragma once

#include <cstdint>
#include <initializer_list>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace p3d {

using Index = std::int64_t;
using Shape = std::vector<Index>;

/// Number of elements described by a shape. The empty shape is a scalar.
Index shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Cache-line aligned storage. Vectorized reductions peel a number of leading
/// elements that depends on the start address, so a fixed alignment keeps
/// results independent of where the allocator puts a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlignment); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

/// Dense row-major tensor of doubles.
///
/// Feature maps are stored channels-last: (N, H, W, C) for planar data and
/// (N, D, H, W, C) for volumetric data, where D is the slice axis.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor scalar(double v) { return Tensor(Shape{}, v); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const;
  Index size() const { return static_cast<Index>(data_.size()); }
  bool empty() const { return data_.empty(); }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  double& at(std::initializer_list<Index> idx);
  double at(std::initializer_list<Index> idx) const;

  /// Same data, new shape; the element count must match.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  void fill(double v);
  /// this += other (same shape).
  void accumulate(const Tensor& other);

  double sum() const;
  double max_abs() const;
  bool all_finite() const;

  bool operator==(const Tensor& other) const = default;

 private:
  Index flat_index(std::initializer_list<Index> idx) const;

  Shape shape_;
  Buffer data_;
};

}  // namespace p3d
