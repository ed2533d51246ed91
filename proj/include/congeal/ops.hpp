#pragma once

#include <span>

#include "congeal/tape.hpp"

// Differentiable operators recorded on a Tape. Every operator validates shapes
// and throws ShapeError naming the offending shapes.
namespace congeal::ad {

enum class Padding {
  Valid,  // no padding
  Same,   // zero padding, output size ceil(input / stride)
};

// Elementwise a + b. `b` may carry a leading dimension of 1 that broadcasts over a's.
template <typename T>
Var<T> add(Var<T> a, Var<T> b);
// Elementwise a - b, with the same broadcast rule as add().
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T factor);

template <typename T>
Var<T> tanh(Var<T> a);
template <typename T>
Var<T> sigmoid(Var<T> a);
// Hard clamp; the gradient is zero where the input lies outside [lo, hi].
template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi);

// Scalar reductions.
template <typename T>
Var<T> sum(Var<T> a);
// Sum of absolute values. The subgradient at zero is 0.
template <typename T>
Var<T> l1_sum(Var<T> a);
// Sum over rows of w . z_row for z of shape N x b and a fixed b-vector w.
template <typename T>
Var<T> weighted_dot(Var<T> z, std::span<const T> weights);

// x: N x C x H x W, weight: O x C x K x K, bias: O.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, int stride, Padding padding);
// Nearest-neighbour 2x spatial upsampling.
template <typename T>
Var<T> upsample2x(Var<T> x);
template <typename T>
Var<T> reshape(Var<T> x, Shape shape);
// Flattens x to N x F and applies y = x W^T + b with weight O x F and bias O.
template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias);
// Concatenates along dimension 1. `b` may have a leading dimension of 1.
template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b);

// Output spatial size of conv2d along one axis.
int conv_output_size(int input, int kernel, int stride, Padding padding);

}  // namespace congeal::ad
