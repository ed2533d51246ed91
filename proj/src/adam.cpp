#include "congeal/adam.hpp"

#include <cmath>
#include <string>

namespace congeal {

template <typename T>
void adam_step(std::span<Tensor<T>* const> params, AdamState<T>& state) {
  if (state.m.empty() && state.v.empty()) {
    for (const Tensor<T>* p : params) {
      state.m.emplace_back(p->size(), T(0));
      state.v.emplace_back(p->size(), T(0));
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_step: state tracks " + std::to_string(state.m.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor<T>& p = *params[i];
    if (state.m[i].size() != p.size() || state.v[i].size() != p.size() ||
        (p.has_grad() && p.grad().size() != p.size())) {
      throw ShapeError("adam_step: moment/gradient size mismatch for parameter " + shape_str(p.shape()));
    }
    for (T g : p.grad()) {
      if (!std::isfinite(g)) throw NonFiniteError("adam_step: non-finite gradient");
    }
  }

  state.step += 1;
  const AdamHyper& h = state.hyper;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(h.beta1);
  const T b2 = static_cast<T>(h.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    if (!p.has_grad()) continue;
    std::vector<T>& m = state.m[i];
    std::vector<T>& v = state.v[i];
    const std::vector<T>& g = p.grad();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = b1 * m[k] + (T(1) - b1) * g[k];
      v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
      const double mhat = static_cast<double>(m[k]) / c1;
      const double vhat = static_cast<double>(v[k]) / c2;
      p[k] = static_cast<T>(static_cast<double>(p[k]) - h.lr * mhat / (std::sqrt(vhat) + h.eps));
    }
  }
}

template void adam_step<float>(std::span<Tensor<float>* const>, AdamState<float>&);
template void adam_step<double>(std::span<Tensor<double>* const>, AdamState<double>&);

}  // namespace congeal
