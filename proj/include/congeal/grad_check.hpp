#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "congeal/tape.hpp"

namespace congeal {

// Scalar function recorded on a fresh tape; receives the bound leaves in order.
using ScalarFn = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  int max_coords = 64;  // coordinates sampled per leaf; all when the leaf is smaller
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  std::vector<double> max_rel_error;  // per leaf
  double tolerance = 0.0;
  double worst() const;
  bool passed() const { return worst() <= tolerance; }
};

// Compares reverse-mode gradients against central differences:
// |analytic - numeric| / max(1, |numeric|), maximised over sampled coordinates.
GradCheckResult grad_check(const ScalarFn& f, std::span<Tensor<double>* const> leaves,
                           const GradCheckOptions& options = {});

}  // namespace congeal
