#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "congeal/tensor.hpp"

namespace congeal {

struct AdamHyper {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Moments for one ordered list of parameters.
template <typename T>
struct AdamState {
  AdamHyper hyper;
  std::int64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

// Bias-corrected Adam update applied in place using each parameter's grad().
// Parameters without a gradient are treated as having a zero gradient.
// Throws NonFiniteError before touching anything if a gradient is not finite.
template <typename T>
void adam_step(std::span<Tensor<T>* const> params, AdamState<T>& state);

extern template void adam_step<float>(std::span<Tensor<float>* const>, AdamState<float>&);
extern template void adam_step<double>(std::span<Tensor<double>* const>, AdamState<double>&);

}  // namespace congeal
