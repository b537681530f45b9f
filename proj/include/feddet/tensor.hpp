#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace feddet {

// Dense row-major tensor of doubles. Shapes are small and fixed by the
// detector architecture, so there is no broadcasting or lazy anything.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s);

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, double v);

  int ndim() const { return static_cast<int>(shape.size()); }
  std::size_t numel() const { return data.size(); }
  int size(int d) const { return shape[static_cast<std::size_t>(d)]; }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  // 3-d [C,H,W] access, used by map-level code; hot loops index manually.
  double& at(int c, int h, int w) {
    return data[(static_cast<std::size_t>(c) * shape[1] + h) * shape[2] + w];
  }
  double at(int c, int h, int w) const {
    return data[(static_cast<std::size_t>(c) * shape[1] + h) * shape[2] + w];
  }

  // 4-d [K,C,kh,kw] access for kernels.
  double& at4(int k, int c, int i, int j) {
    return data[((static_cast<std::size_t>(k) * shape[1] + c) * shape[2] + i) * shape[3] + j];
  }
  double at4(int k, int c, int i, int j) const {
    return data[((static_cast<std::size_t>(k) * shape[1] + c) * shape[2] + i) * shape[3] + j];
  }
};

std::size_t numel_of(const std::vector<int>& shape);

// Named trainable value plus its gradient accumulator (same shape).
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape)) {}

  void zero_grad();
};

}  // namespace feddet
