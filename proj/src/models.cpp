#include "congeal/models.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "congeal/ops.hpp"
#include "congeal/warp.hpp"

namespace congeal {

namespace {

std::string layer_name(const std::string& prefix, std::size_t i, const char* what) {
  return prefix + "." + std::to_string(i) + "." + what;
}

std::string block_prefix(int block) { return "aligner." + std::to_string(block); }

}  // namespace

template <typename T>
ModelState<T>::ModelState(NetworkSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  std::mt19937_64 rng(seed);
  std::vector<bool> zero_init;
  const auto add_layers = [&](const std::string& prefix, ParamGroup group, const std::vector<LayerSpec>& layers,
                              Shape shape, bool zero_last) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const LayerSpec& l = layers[i];
      const Shape out = layer_output_shape(l, shape);
      if (l.kind == LayerKind::Conv) {
        add_param(layer_name(prefix, i, "weight"), group, {l.channels, shape[0], l.kernel, l.kernel});
        add_param(layer_name(prefix, i, "bias"), group, {l.channels});
      } else if (l.kind == LayerKind::Dense) {
        add_param(layer_name(prefix, i, "weight"), group, {l.channels, static_cast<int>(shape_numel(shape))});
        add_param(layer_name(prefix, i, "bias"), group, {l.channels});
      }
      if (l.has_params()) {
        const bool zero = zero_last && i + 1 == layers.size();
        zero_init.push_back(zero);
        zero_init.push_back(zero);
      }
      shape = out;
    }
  };
  for (int b = 0; b < spec_.blocks; ++b) {
    add_layers(block_prefix(b), ParamGroup::Aligner, spec_.aligner,
               {2 * spec_.channels, spec_.height, spec_.width}, true);
  }
  add_layers("encoder", ParamGroup::Encoder, spec_.encoder, spec_.image_shape(), false);
  add_layers("decoder", ParamGroup::Decoder, spec_.decoder, {spec_.code_size}, false);

  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (zero_init[i]) continue;
    Tensor<T>& t = params_[i].tensor;
    // Bias fan-in is taken from the matching weight.
    const Tensor<T>& w = (i % 2 == 0) ? t : params_[i - 1].tensor;
    const double fan_in = static_cast<double>(w.size()) / w.dim(0);
    std::uniform_real_distribution<double> u(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
    for (auto& v : t.values()) v = static_cast<T>(u(rng));
  }
  rebuild_index();
}

template <typename T>
void ModelState<T>::add_param(std::string name, ParamGroup group, Shape shape) {
  NamedTensor<T> p{std::move(name), group, Tensor<T>(std::move(shape))};
  p.tensor.set_requires_grad(true);
  params_.push_back(std::move(p));
}

template <typename T>
void ModelState<T>::rebuild_index() {
  index_.clear();
  for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i].name] = i;
}

template <typename T>
Tensor<T>& ModelState<T>::param(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second].tensor;
}

template <typename T>
const Tensor<T>& ModelState<T>::param(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second].tensor;
}

template <typename T>
std::vector<Tensor<T>*> ModelState<T>::tensors() {
  std::vector<Tensor<T>*> out;
  for (auto& p : params_) out.push_back(&p.tensor);
  return out;
}

template <typename T>
std::vector<Tensor<T>*> ModelState<T>::group(ParamGroup g) {
  std::vector<Tensor<T>*> out;
  for (auto& p : params_) {
    if (p.group == g) out.push_back(&p.tensor);
  }
  return out;
}

template <typename T>
void ModelState<T>::set_trainable(ParamGroup g, bool on) {
  for (auto* t : group(g)) {
    t->set_requires_grad(on);
    if (!on) t->grad().clear();
  }
}

template <typename T>
bool ModelState<T>::trainable(ParamGroup g) const {
  for (const auto& p : params_) {
    if (p.group == g) return p.tensor.requires_grad();
  }
  return false;
}

template <typename T>
void ModelState<T>::zero_grad() {
  for (auto& p : params_) {
    if (p.tensor.requires_grad()) p.tensor.zero_grad();
  }
}

template <typename T>
void ModelState<T>::step() {
  auto list = tensors();
  adam_step<T>(list, adam);
}

template <typename T>
Var<T> run_layers(ModelState<T>& model, const std::string& prefix, const std::vector<LayerSpec>& layers, Var<T> x) {
  Tape<T>& tape = *x.tape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    switch (l.kind) {
      case LayerKind::Conv: {
        if (x.value().rank() != 4) {
          throw ShapeError(prefix + "." + std::to_string(i) + ": conv needs N x C x H x W, got " +
                           shape_str(x.shape()));
        }
        auto w = tape.leaf(model.param(layer_name(prefix, i, "weight")));
        auto b = tape.leaf(model.param(layer_name(prefix, i, "bias")));
        x = ad::conv2d(x, w, b, l.stride, ad::Padding::Same);
        break;
      }
      case LayerKind::Dense: {
        auto w = tape.leaf(model.param(layer_name(prefix, i, "weight")));
        auto b = tape.leaf(model.param(layer_name(prefix, i, "bias")));
        x = ad::linear(x, w, b);
        break;
      }
      case LayerKind::Upsample:
        x = ad::upsample2x(x);
        break;
      case LayerKind::Reshape: {
        Shape s{x.value().dim(0)};
        s.insert(s.end(), l.target.begin(), l.target.end());
        x = ad::reshape(x, std::move(s));
        break;
      }
    }
    if (l.activation == Activation::Tanh) x = ad::tanh(x);
    if (l.activation == Activation::Sigmoid) x = ad::sigmoid(x);
  }
  return x;
}

template <typename T>
AlignerOutput<T> aligner_forward(ModelState<T>& model, Var<T> images, Var<T> reference) {
  const NetworkSpec& spec = model.spec();
  const Shape& is = images.shape();
  const Shape& rs = reference.shape();
  if (is.size() != 4 || Shape(is.begin() + 1, is.end()) != spec.image_shape() || rs.size() != 4 || rs[0] != 1 ||
      Shape(rs.begin() + 1, rs.end()) != spec.image_shape()) {
    throw ShapeError("aligner: images " + shape_str(is) + " and reference " + shape_str(rs) +
                     " do not match the spec input " + shape_str(spec.image_shape()));
  }
  Tape<T>& tape = *images.tape;
  const int n = is[0];
  const T radius = static_cast<T>(spec.trust_radius * std::min(spec.width, spec.height));
  AlignerOutput<T> out;
  out.params = tape.constant(Tensor<T>({n, 8}));
  out.warped = images;
  for (int b = 0; b < spec.blocks; ++b) {
    auto input = ad::concat_channels(out.warped, reference);
    auto residual = run_layers(model, block_prefix(b), spec.aligner, input);
    residual = ad::reshape(residual, {n, 8});
    for (T v : residual.value().values()) out.clamped += (v > radius || v < -radius) ? 1 : 0;
    residual = ad::clamp(residual, -radius, radius);
    out.params = ad::add(out.params, residual);
    out.warped = ad::warp(images, out.params);
  }
  return out;
}

template <typename T>
Var<T> encode(ModelState<T>& model, Var<T> images) {
  const Shape& s = images.shape();
  if (s.size() != 4 || Shape(s.begin() + 1, s.end()) != model.spec().image_shape()) {
    throw ShapeError("encode: input " + shape_str(s) + " does not match the spec input " +
                     shape_str(model.spec().image_shape()));
  }
  auto z = run_layers(model, "encoder", model.spec().encoder, images);
  return ad::reshape(z, {s[0], model.spec().code_size});
}

template <typename T>
Var<T> decode(ModelState<T>& model, Var<T> codes) {
  const Shape& s = codes.shape();
  if (s.size() != 2 || s[1] != model.spec().code_size) {
    throw ShapeError("decode: codes " + shape_str(s) + " do not match code size " +
                     std::to_string(model.spec().code_size));
  }
  return run_layers(model, "decoder", model.spec().decoder, codes);
}

PenaltyWeights penalty_weights(int code_size, int k) {
  if (code_size <= 0 || k < 1) {
    throw std::invalid_argument("penalty weights need code size > 0 and k >= 1");
  }
  PenaltyWeights pw;
  pw.k = k;
  double total = 0.0;
  for (int l = 1; l <= code_size; ++l) {
    pw.w.push_back(std::pow(static_cast<double>(l), k));
    total += pw.w.back();
  }
  for (auto& w : pw.w) w /= total;
  return pw;
}

template <typename T>
Var<T> positional_penalty(Var<T> codes, const PenaltyWeights& weights) {
  const std::vector<T> w(weights.w.begin(), weights.w.end());
  return ad::weighted_dot(codes, std::span<const T>(w));
}

#define CONGEAL_INSTANTIATE(T)                                                                              \
  template class ModelState<T>;                                                                             \
  template Var<T> run_layers(ModelState<T>&, const std::string&, const std::vector<LayerSpec>&, Var<T>);   \
  template AlignerOutput<T> aligner_forward(ModelState<T>&, Var<T>, Var<T>);                              \
  template Var<T> encode(ModelState<T>&, Var<T>);                                                           \
  template Var<T> decode(ModelState<T>&, Var<T>);                                                           \
  template Var<T> positional_penalty(Var<T>, const PenaltyWeights&);

CONGEAL_INSTANTIATE(float)
CONGEAL_INSTANTIATE(double)

}  // namespace congeal
