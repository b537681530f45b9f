#include "feddet/tensor.hpp"

#include <stdexcept>

namespace feddet {

std::size_t numel_of(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative tensor extent");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)), data(numel_of(shape), 0.0) {}

Tensor Tensor::full(std::vector<int> s, double v) {
  Tensor t(std::move(s));
  for (double& x : t.data) x = v;
  return t;
}

void Parameter::zero_grad() {
  for (double& g : grad.data) g = 0.0;
}

}  // namespace feddet
