#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "congeal/tensor.hpp"

namespace congeal {

enum class LayerKind { Conv, Upsample, Dense, Reshape };
enum class Activation { Tanh, Sigmoid, None };

// One layer of a sequential network. Text form:
//   conv<K>-<C>[*]   K x K convolution with C output channels, `*` for stride 2
//   up2              nearest-neighbour 2x upsampling
//   dense-<C>        fully connected layer on the flattened input
//   reshape-CxHxW    reinterprets a flat feature vector as a map
// followed by an optional activation suffix `:tanh`, `:sigmoid` or `:none`.
// Conv and dense layers default to tanh; up2 and reshape carry no activation.
struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  int kernel = 0;
  int channels = 0;
  int stride = 1;
  Shape target;  // reshape only, C x H x W
  Activation activation = Activation::None;

  bool has_params() const { return kind == LayerKind::Conv || kind == LayerKind::Dense; }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct SpecError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

LayerSpec parse_layer(const std::string& text);
std::string format_layer(const LayerSpec& layer);
std::vector<LayerSpec> parse_layers(const std::string& text);  // comma separated
std::string format_layers(const std::vector<LayerSpec>& layers);

// Output shape (C x H x W, or F for flat features) of a layer applied to `input`.
Shape layer_output_shape(const LayerSpec& layer, const Shape& input);

// Architecture of the aligner and the autoencoder for one input geometry.
struct NetworkSpec {
  std::string name = "custom";
  int channels = 1;
  int height = 28;
  int width = 28;
  int blocks = 4;
  int code_size = 64;
  double trust_radius = 0.25;  // per-block residual clamp, fraction of the image side
  std::vector<LayerSpec> aligner;  // one block; the last layer must emit 8 values
  std::vector<LayerSpec> encoder;  // must end in a sigmoid layer emitting code_size values
  std::vector<LayerSpec> decoder;  // code_size values -> channels x height x width

  Shape image_shape() const { return {channels, height, width}; }

  // Throws SpecError describing the first inconsistency.
  void validate() const;

  std::string serialize() const;
  static NetworkSpec deserialize(const std::string& text);

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

// "mnist": full-size MNIST layout.
// "desk": the same aligner with a narrower autoencoder, sized for one CPU core.
NetworkSpec preset_spec(const std::string& name, int code_size = 64, int channels = 1, int height = 28, int width = 28);

}  // namespace congeal
