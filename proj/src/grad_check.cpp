#include "congeal/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace congeal {

double GradCheckResult::worst() const {
  double w = 0.0;
  for (double e : max_rel_error) w = std::max(w, e);
  return w;
}

namespace {

double evaluate(const ScalarFn& f, std::span<Tensor<double>* const> leaves) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  vars.reserve(leaves.size());
  for (Tensor<double>* leaf : leaves) vars.push_back(tape.leaf(*leaf));
  return f(tape, vars).value()[0];
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, std::span<Tensor<double>* const> leaves,
                           const GradCheckOptions& options) {
  std::vector<bool> saved_flags;
  for (Tensor<double>* leaf : leaves) {
    saved_flags.push_back(leaf->requires_grad());
    leaf->set_requires_grad(true);
  }
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (Tensor<double>* leaf : leaves) vars.push_back(tape.leaf(*leaf));
    tape.backward(f(tape, vars));
  }

  GradCheckResult result;
  result.tolerance = options.tolerance;
  std::mt19937_64 rng(options.seed);
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor<double>& leaf = *leaves[li];
    const std::vector<double> analytic = leaf.grad();
    std::vector<std::size_t> coords(leaf.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords > 0 && coords.size() > static_cast<std::size_t>(options.max_coords)) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(options.max_coords));
    }
    double worst = 0.0;
    for (std::size_t k : coords) {
      const double original = leaf[k];
      leaf[k] = original + options.step;
      const double plus = evaluate(f, leaves);
      leaf[k] = original - options.step;
      const double minus = evaluate(f, leaves);
      leaf[k] = original;
      const double numeric = (plus - minus) / (2.0 * options.step);
      worst = std::max(worst, std::abs(analytic[k] - numeric) / std::max(1.0, std::abs(numeric)));
    }
    result.max_rel_error.push_back(worst);
  }
  for (std::size_t li = 0; li < leaves.size(); ++li) leaves[li]->set_requires_grad(saved_flags[li]);
  return result;
}

}  // namespace congeal
