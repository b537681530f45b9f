#include "feddet/nn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace feddet {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

int conv_extent(int in, int pad, int k, int stride) {
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
              int padding) {
  require(input.ndim() == 3, "conv2d: input must be [C,H,W]");
  require(kernel.ndim() == 4, "conv2d: kernel must be [K,C,kh,kw]");
  require(bias.ndim() == 1, "conv2d: bias must be [K]");
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(padding >= 0, "conv2d: padding must be >= 0");
  const int c_in = input.size(0), h = input.size(1), w = input.size(2);
  const int k_out = kernel.size(0), kh = kernel.size(2), kw = kernel.size(3);
  require(kernel.size(1) == c_in, "conv2d: kernel channel mismatch");
  require(bias.size(0) == k_out, "conv2d: bias extent mismatch");
  require(h + 2 * padding >= kh && w + 2 * padding >= kw, "conv2d: kernel larger than input");
  const int oh = conv_extent(h, padding, kh, stride);
  const int ow = conv_extent(w, padding, kw, stride);

  Tensor out({k_out, oh, ow});
  const double* in = input.data.data();
  const double* ker = kernel.data.data();
  double* o = out.data.data();
  for (int k = 0; k < k_out; ++k) {
    const double b = bias.data[static_cast<std::size_t>(k)];
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        double acc = b;
        const int iy0 = y * stride - padding;
        const int ix0 = x * stride - padding;
        for (int c = 0; c < c_in; ++c) {
          for (int i = 0; i < kh; ++i) {
            const int iy = iy0 + i;
            if (iy < 0 || iy >= h) continue;
            const double* in_row = in + (static_cast<std::size_t>(c) * h + iy) * w;
            const double* k_row =
                ker + ((static_cast<std::size_t>(k) * c_in + c) * kh + i) * kw;
            for (int j = 0; j < kw; ++j) {
              const int ix = ix0 + j;
              if (ix < 0 || ix >= w) continue;
              acc += in_row[ix] * k_row[j];
            }
          }
        }
        o[(static_cast<std::size_t>(k) * oh + y) * ow + x] = acc;
      }
    }
  }
  return out;
}

void conv2d_backward(const Tensor& input, const Tensor& kernel, int stride, int padding,
                     const Tensor& grad_out, Tensor* grad_input, Tensor* grad_kernel,
                     Tensor* grad_bias) {
  const int c_in = input.size(0), h = input.size(1), w = input.size(2);
  const int k_out = kernel.size(0), kh = kernel.size(2), kw = kernel.size(3);
  const int oh = grad_out.size(1), ow = grad_out.size(2);
  require(grad_out.size(0) == k_out, "conv2d_backward: grad_out channel mismatch");
  require(oh == conv_extent(h, padding, kh, stride) &&
              ow == conv_extent(w, padding, kw, stride),
          "conv2d_backward: grad_out spatial mismatch");
  if (grad_input) require(grad_input->same_shape(input), "conv2d_backward: grad_input shape");
  if (grad_kernel)
    require(grad_kernel->same_shape(kernel), "conv2d_backward: grad_kernel shape");

  const double* in = input.data.data();
  const double* ker = kernel.data.data();
  const double* go = grad_out.data.data();
  for (int k = 0; k < k_out; ++k) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        const double g = go[(static_cast<std::size_t>(k) * oh + y) * ow + x];
        if (g == 0.0) continue;
        if (grad_bias) grad_bias->data[static_cast<std::size_t>(k)] += g;
        const int iy0 = y * stride - padding;
        const int ix0 = x * stride - padding;
        for (int c = 0; c < c_in; ++c) {
          for (int i = 0; i < kh; ++i) {
            const int iy = iy0 + i;
            if (iy < 0 || iy >= h) continue;
            const std::size_t in_row = (static_cast<std::size_t>(c) * h + iy) * w;
            const std::size_t k_row =
                ((static_cast<std::size_t>(k) * c_in + c) * kh + i) * kw;
            for (int j = 0; j < kw; ++j) {
              const int ix = ix0 + j;
              if (ix < 0 || ix >= w) continue;
              if (grad_kernel) grad_kernel->data[k_row + j] += g * in[in_row + ix];
              if (grad_input) grad_input->data[in_row + ix] += g * ker[k_row + j];
            }
          }
        }
      }
    }
  }
}

Tensor relu(const Tensor& input) {
  Tensor out = input;
  for (double& v : out.data) v = std::max(0.0, v);
  return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
  require(input.same_shape(grad_out), "relu_backward: shape mismatch");
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    if (input.data[i] <= 0.0) g.data[i] = 0.0;
  }
  return g;
}

Tensor spatial_softmax(const Tensor& features, double temperature) {
  require(features.ndim() == 3, "spatial_softmax: input must be [K,H,W]");
  require(temperature > 0.0, "spatial_softmax: temperature must be positive");
  const int k_ch = features.size(0);
  const std::size_t hw = static_cast<std::size_t>(features.size(1)) * features.size(2);
  Tensor out = features;
  for (int k = 0; k < k_ch; ++k) {
    double* v = out.data.data() + static_cast<std::size_t>(k) * hw;
    double mx = v[0];
    for (std::size_t j = 1; j < hw; ++j) mx = std::max(mx, v[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < hw; ++j) {
      v[j] = std::exp((v[j] - mx) / temperature);
      sum += v[j];
    }
    for (std::size_t j = 0; j < hw; ++j) v[j] /= sum;
  }
  return out;
}

Tensor spatial_softmax_backward(const Tensor& softmax_out, double temperature,
                                const Tensor& grad_out) {
  require(softmax_out.same_shape(grad_out), "spatial_softmax_backward: shape mismatch");
  const int k_ch = softmax_out.size(0);
  const std::size_t hw = static_cast<std::size_t>(softmax_out.size(1)) * softmax_out.size(2);
  Tensor g = Tensor::zeros(softmax_out.shape);
  for (int k = 0; k < k_ch; ++k) {
    const double* y = softmax_out.data.data() + static_cast<std::size_t>(k) * hw;
    const double* go = grad_out.data.data() + static_cast<std::size_t>(k) * hw;
    double dot = 0.0;
    for (std::size_t j = 0; j < hw; ++j) dot += go[j] * y[j];
    double* out = g.data.data() + static_cast<std::size_t>(k) * hw;
    for (std::size_t j = 0; j < hw; ++j) out[j] = y[j] * (go[j] - dot) / temperature;
  }
  return g;
}

double kl_channelwise(const Tensor& student, const Tensor& teacher, double temperature) {
  require(student.same_shape(teacher), "kl_channelwise: shape mismatch");
  require(student.ndim() == 3, "kl_channelwise: inputs must be [K,H,W]");
  const int k_ch = student.size(0);
  const Tensor s = spatial_softmax(student, temperature);
  const Tensor t = spatial_softmax(teacher, temperature);
  double total = 0.0;
  for (std::size_t i = 0; i < s.data.size(); ++i) {
    total += s.data[i] * std::log(s.data[i] / t.data[i]);
  }
  return temperature * temperature / static_cast<double>(k_ch) * total;
}

Tensor kl_channelwise_backward(const Tensor& student, const Tensor& teacher,
                               double temperature) {
  require(student.same_shape(teacher), "kl_channelwise: shape mismatch");
  const int k_ch = student.size(0);
  const std::size_t hw = static_cast<std::size_t>(student.size(1)) * student.size(2);
  const Tensor s = spatial_softmax(student, temperature);
  const Tensor t = spatial_softmax(teacher, temperature);
  // d/d(student logit m) of sum_j s_j log(s_j/t_j) is
  //   (1/T) * s_m * (log(s_m/t_m) - KL_k)
  Tensor g = Tensor::zeros(student.shape);
  const double scale = temperature * temperature / static_cast<double>(k_ch);
  for (int k = 0; k < k_ch; ++k) {
    const double* sv = s.data.data() + static_cast<std::size_t>(k) * hw;
    const double* tv = t.data.data() + static_cast<std::size_t>(k) * hw;
    double kl_k = 0.0;
    for (std::size_t j = 0; j < hw; ++j) kl_k += sv[j] * std::log(sv[j] / tv[j]);
    double* gv = g.data.data() + static_cast<std::size_t>(k) * hw;
    for (std::size_t j = 0; j < hw; ++j) {
      gv[j] = scale / temperature * sv[j] * (std::log(sv[j] / tv[j]) - kl_k);
    }
  }
  return g;
}

double l2_loss(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), "l2_loss: shape mismatch");
  require(a.numel() > 0, "l2_loss: empty tensors");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.numel());
}

Tensor l2_loss_backward(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), "l2_loss: shape mismatch");
  Tensor g = Tensor::zeros(a.shape);
  const double scale = 2.0 / static_cast<double>(a.numel());
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    g.data[i] = scale * (a.data[i] - b.data[i]);
  }
  return g;
}

void sgd_step(const std::vector<Parameter*>& params, double learning_rate) {
  for (Parameter* p : params) {
    if (!p->grad.same_shape(p->value))
      throw std::runtime_error("sgd_step: gradient missing or mis-shaped for " + p->name);
    for (std::size_t i = 0; i < p->value.data.size(); ++i) {
      p->value.data[i] -= learning_rate * p->grad.data[i];
    }
    p->zero_grad();
  }
}

}  // namespace feddet
