#pragma once

#include <vector>

#include "feddet/tensor.hpp"

namespace feddet {

// Forward ops paired with explicit backward functions. There is no autodiff
// graph: the detector wires these together by hand.

// Cross-correlation with zero padding. input [C,H,W], kernel [K,C,kh,kw],
// bias [K]; output [K,H',W'] with H' = (H + 2p - kh) / stride + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
              int padding);

// Accumulates into any non-null gradient output.
void conv2d_backward(const Tensor& input, const Tensor& kernel, int stride, int padding,
                     const Tensor& grad_out, Tensor* grad_input, Tensor* grad_kernel,
                     Tensor* grad_bias);

Tensor relu(const Tensor& input);
Tensor relu_backward(const Tensor& input, const Tensor& grad_out);

// Per-channel softmax over all spatial positions of a [K,H,W] map at the
// given temperature. Each channel of the result sums to 1.
Tensor spatial_softmax(const Tensor& features, double temperature);

// grad_out is dL/d(softmax output); returns dL/d(features).
Tensor spatial_softmax_backward(const Tensor& softmax_out, double temperature,
                                const Tensor& grad_out);

// Channel-wise distillation divergence between two [K,H,W] maps:
//   (T^2 / K) * sum_k sum_j A(s)_{k,j} * log(A(s)_{k,j} / A(t)_{k,j})
// where A is spatial_softmax at temperature T. Gradients flow into the
// student side only.
double kl_channelwise(const Tensor& student, const Tensor& teacher, double temperature);
Tensor kl_channelwise_backward(const Tensor& student, const Tensor& teacher,
                               double temperature);

// Mean squared difference over all elements; gradient w.r.t. `a`.
double l2_loss(const Tensor& a, const Tensor& b);
Tensor l2_loss_backward(const Tensor& a, const Tensor& b);

// value -= lr * grad for every parameter, then gradients are zeroed.
void sgd_step(const std::vector<Parameter*>& params, double learning_rate);

}  // namespace feddet
