#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "congeal/adam.hpp"
#include "congeal/network.hpp"
#include "congeal/tape.hpp"

namespace congeal {

enum class ParamGroup { Aligner, Encoder, Decoder };

template <typename T>
struct NamedTensor {
  std::string name;
  ParamGroup group = ParamGroup::Aligner;
  Tensor<T> tensor;
};

// Learned weights of the aligner and the autoencoder plus their Adam moments.
// Parameter names look like "aligner.2.0.weight" (block 2, layer 0),
// "encoder.5.bias" or "decoder.0.weight".
template <typename T>
class ModelState {
 public:
  ModelState() = default;
  // Hidden layers are drawn uniformly from +-1/sqrt(fan_in); the last layer of
  // every aligner block starts at zero so the initial warp is the identity.
  ModelState(NetworkSpec spec, std::uint64_t seed);

  const NetworkSpec& spec() const { return spec_; }

  std::vector<NamedTensor<T>>& params() { return params_; }
  const std::vector<NamedTensor<T>>& params() const { return params_; }
  Tensor<T>& param(const std::string& name);
  const Tensor<T>& param(const std::string& name) const;
  bool has_param(const std::string& name) const { return index_.count(name) != 0; }

  // All parameters in a fixed order (the optimiser order).
  std::vector<Tensor<T>*> tensors();
  std::vector<Tensor<T>*> group(ParamGroup g);

  // Frozen groups get no gradient and are left untouched by step().
  void set_trainable(ParamGroup g, bool on);
  bool trainable(ParamGroup g) const;

  void zero_grad();
  // One Adam update over every parameter.
  void step();

  AdamState<T> adam;

 private:
  void add_param(std::string name, ParamGroup group, Shape shape);
  void rebuild_index();

  NetworkSpec spec_;
  std::vector<NamedTensor<T>> params_;
  std::map<std::string, std::size_t> index_;
};

// Applies a layer list to x (N x ...) using parameters "<prefix>.<i>.weight/bias".
template <typename T>
Var<T> run_layers(ModelState<T>& model, const std::string& prefix, const std::vector<LayerSpec>& layers, Var<T> x);

template <typename T>
struct AlignerOutput {
  Var<T> params;   // N x 8 cumulative corner displacements
  Var<T> warped;   // N x C x H x W
  int clamped = 0;  // residual entries that hit the trust radius
};

// Runs every aligner block on concat(currently warped images, reference). Each
// block adds a clamped residual to the corner displacements and the original
// images are re-warped by the running total.
template <typename T>
AlignerOutput<T> aligner_forward(ModelState<T>& model, Var<T> images, Var<T> reference);

// N x C x H x W -> N x b codes in [0, 1].
template <typename T>
Var<T> encode(ModelState<T>& model, Var<T> images);

// N x b -> N x C x H x W.
template <typename T>
Var<T> decode(ModelState<T>& model, Var<T> codes);

struct PenaltyWeights {
  int k = 1;
  std::vector<double> w;  // w_l = l^k / sum_l l^k, l = 1..b
};

PenaltyWeights penalty_weights(int code_size, int k);

// Sum over rows of w . z.
template <typename T>
Var<T> positional_penalty(Var<T> codes, const PenaltyWeights& weights);

}  // namespace congeal
