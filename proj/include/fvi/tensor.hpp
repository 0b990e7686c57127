#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace fvi {

struct Shape {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t size() const { return channels * height * width; }
  std::size_t plane() const { return height * width; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

/// Dense CHW tensor of doubles.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0) : shape(s), data(s.size(), fill) {}
  Tensor(Shape s, std::vector<double> values) : shape(s), data(std::move(values)) {}

  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return data[(c * shape.height + y) * shape.width + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * shape.height + y) * shape.width + x];
  }
  std::span<const double> channel(std::size_t c) const {
    return {data.data() + c * shape.plane(), shape.plane()};
  }
  std::size_t size() const { return data.size(); }
};

}  // namespace fvi
