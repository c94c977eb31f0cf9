#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cnerf/autodiff/tensor.hpp"

/// Differentiable tensor operations. Every op computes its value eagerly and,
/// when an input is tracked on the current tape, records a backward closure.
namespace cnerf::ad {

// Elementwise binary ops with numpy-style broadcasting (trailing alignment).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op = "broadcast");

Tensor scale(const Tensor& x, double factor);
Tensor shift(const Tensor& x, double offset);
Tensor neg(const Tensor& x);

// Elementwise unary ops.
Tensor sin(const Tensor& x);
Tensor cos(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope = 0.2);
Tensor clamp_min(const Tensor& x, double floor);
/// 0.5 x^2 for |x| < beta (scaled by 1/beta), |x| - 0.5 beta otherwise.
Tensor smooth_l1(const Tensor& x, double beta = 1.0);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor mean_axis(const Tensor& x, std::size_t axis, bool keepdim = false);
/// Exclusive prefix sum along the last axis: y_j = sum_{l<j} x_l.
Tensor cumsum_exclusive(const Tensor& x);

// Linear algebra.
/// [M,K] x [K,N] -> [M,N].
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[N,in] * W[in,out] + b[out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Layout.
/// [M,N] -> [N,M].
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
/// Rows of a [N,...] tensor gathered by index.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

// Images (NCHW).
struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t padding = 0;
};
/// x[N,C,H,W], weight[O,C,KH,KW], bias[O] -> [N,O,H',W'].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opts = {});
/// Non-overlapping average pooling with a square window.
Tensor avgpool2d(const Tensor& x, std::size_t window);

// Classification.
/// Mean softmax cross-entropy of logits[B,K] against integer labels.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

}  // namespace cnerf::ad
