#include "congeal/network.hpp"

#include <charconv>
#include <sstream>

#include "congeal/ops.hpp"

namespace congeal {

namespace {

int parse_int(const std::string& s, const std::string& context) {
  int value = 0;
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, value);
  if (ec != std::errc() || ptr != end || value <= 0) {
    throw SpecError("bad number '" + s + "' in layer '" + context + "'");
  }
  return value;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::None: return "none";
  }
  return "none";
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(item);
  return out;
}

}  // namespace

LayerSpec parse_layer(const std::string& raw) {
  const std::string text = trim(raw);
  LayerSpec layer;
  std::string body = text;
  std::string act;
  if (const auto colon = text.find(':'); colon != std::string::npos) {
    body = text.substr(0, colon);
    act = text.substr(colon + 1);
  }
  if (body == "up2") {
    layer.kind = LayerKind::Upsample;
  } else if (body.rfind("reshape-", 0) == 0) {
    layer.kind = LayerKind::Reshape;
    const auto dims = split(body.substr(8), 'x');
    if (dims.size() != 3) throw SpecError("reshape needs CxHxW in layer '" + text + "'");
    for (const auto& d : dims) layer.target.push_back(parse_int(d, text));
  } else if (body.rfind("dense-", 0) == 0) {
    layer.kind = LayerKind::Dense;
    layer.channels = parse_int(body.substr(6), text);
    layer.activation = Activation::Tanh;
  } else if (body.rfind("conv", 0) == 0) {
    layer.kind = LayerKind::Conv;
    std::string rest = body.substr(4);
    if (!rest.empty() && rest.back() == '*') {
      layer.stride = 2;
      rest.pop_back();
    }
    const auto dash = rest.find('-');
    if (dash == std::string::npos) throw SpecError("conv layer needs <K>-<C> in '" + text + "'");
    layer.kernel = parse_int(rest.substr(0, dash), text);
    layer.channels = parse_int(rest.substr(dash + 1), text);
    layer.activation = Activation::Tanh;
  } else {
    throw SpecError("unknown layer '" + text + "'");
  }
  if (!act.empty()) {
    if (!layer.has_params()) throw SpecError("layer '" + text + "' takes no activation");
    if (act == "tanh") layer.activation = Activation::Tanh;
    else if (act == "sigmoid") layer.activation = Activation::Sigmoid;
    else if (act == "none") layer.activation = Activation::None;
    else throw SpecError("unknown activation '" + act + "'");
  }
  return layer;
}

std::string format_layer(const LayerSpec& layer) {
  std::string s;
  switch (layer.kind) {
    case LayerKind::Upsample: return "up2";
    case LayerKind::Reshape:
      return "reshape-" + std::to_string(layer.target.at(0)) + "x" + std::to_string(layer.target.at(1)) + "x" +
             std::to_string(layer.target.at(2));
    case LayerKind::Dense: s = "dense-" + std::to_string(layer.channels); break;
    case LayerKind::Conv:
      s = "conv" + std::to_string(layer.kernel) + "-" + std::to_string(layer.channels);
      if (layer.stride == 2) s += "*";
      break;
  }
  if (layer.activation != Activation::Tanh) s += std::string(":") + activation_name(layer.activation);
  return s;
}

std::vector<LayerSpec> parse_layers(const std::string& text) {
  std::vector<LayerSpec> out;
  for (const auto& item : split(text, ',')) {
    if (trim(item).empty()) continue;
    out.push_back(parse_layer(item));
  }
  return out;
}

std::string format_layers(const std::vector<LayerSpec>& layers) {
  std::string s;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i) s += ",";
    s += format_layer(layers[i]);
  }
  return s;
}

Shape layer_output_shape(const LayerSpec& layer, const Shape& input) {
  const auto need_map = [&] {
    if (input.size() != 3) {
      throw SpecError("layer '" + format_layer(layer) + "' needs a C x H x W input, got " + shape_str(input));
    }
  };
  switch (layer.kind) {
    case LayerKind::Conv: {
      need_map();
      return {layer.channels, ad::conv_output_size(input[1], layer.kernel, layer.stride, ad::Padding::Same),
              ad::conv_output_size(input[2], layer.kernel, layer.stride, ad::Padding::Same)};
    }
    case LayerKind::Upsample:
      need_map();
      return {input[0], input[1] * 2, input[2] * 2};
    case LayerKind::Dense:
      return {layer.channels};
    case LayerKind::Reshape:
      if (shape_numel(layer.target) != shape_numel(input)) {
        throw SpecError("cannot reshape " + shape_str(input) + " to " + shape_str(layer.target));
      }
      return layer.target;
  }
  return input;
}

void NetworkSpec::validate() const {
  if (channels <= 0 || height < 2 || width < 2) {
    throw SpecError("bad input geometry " + shape_str({channels, height, width}));
  }
  if (blocks <= 0) throw SpecError("aligner needs at least one block");
  if (code_size <= 0) throw SpecError("code size must be positive");
  if (!(trust_radius > 0)) throw SpecError("trust radius must be positive");
  const auto run = [](const std::vector<LayerSpec>& layers, Shape shape, const char* what) {
    if (layers.empty()) throw SpecError(std::string(what) + " has no layers");
    for (const auto& l : layers) {
      if (l.kind == LayerKind::Conv && l.stride != 1 && l.stride != 2) {
        throw SpecError(std::string(what) + ": conv stride must be 1 or 2");
      }
      shape = layer_output_shape(l, shape);
    }
    return shape;
  };
  const Shape aligner_out = run(aligner, {2 * channels, height, width}, "aligner");
  if (shape_numel(aligner_out) != 8 || !aligner.back().has_params()) {
    throw SpecError("aligner block must end in a layer with 8 outputs, got " + shape_str(aligner_out));
  }
  const Shape code = run(encoder, image_shape(), "encoder");
  if (shape_numel(code) != static_cast<std::size_t>(code_size)) {
    throw SpecError("encoder emits " + shape_str(code) + ", expected " + std::to_string(code_size) + " values");
  }
  if (encoder.back().activation != Activation::Sigmoid) throw SpecError("encoder must end with a sigmoid");
  const Shape image = run(decoder, {code_size}, "decoder");
  if (image != image_shape()) {
    throw SpecError("decoder emits " + shape_str(image) + ", expected " + shape_str(image_shape()));
  }
}

std::string NetworkSpec::serialize() const {
  std::ostringstream out;
  out.precision(17);
  out << "name=" << name << "\n"
      << "input=" << channels << "x" << height << "x" << width << "\n"
      << "blocks=" << blocks << "\n"
      << "code_size=" << code_size << "\n"
      << "trust_radius=" << trust_radius << "\n"
      << "aligner=" << format_layers(aligner) << "\n"
      << "encoder=" << format_layers(encoder) << "\n"
      << "decoder=" << format_layers(decoder) << "\n";
  return out.str();
}

NetworkSpec NetworkSpec::deserialize(const std::string& text) {
  NetworkSpec spec;
  spec.aligner.clear();
  spec.encoder.clear();
  spec.decoder.clear();
  for (const auto& line : split(text, '\n')) {
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw SpecError("bad spec line '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "name") {
      spec.name = value;
    } else if (key == "input") {
      const auto dims = split(value, 'x');
      if (dims.size() != 3) throw SpecError("bad input geometry '" + value + "'");
      spec.channels = parse_int(dims[0], value);
      spec.height = parse_int(dims[1], value);
      spec.width = parse_int(dims[2], value);
    } else if (key == "blocks") {
      spec.blocks = parse_int(value, key);
    } else if (key == "code_size") {
      spec.code_size = parse_int(value, key);
    } else if (key == "trust_radius") {
      spec.trust_radius = std::stod(value);
    } else if (key == "aligner") {
      spec.aligner = parse_layers(value);
    } else if (key == "encoder") {
      spec.encoder = parse_layers(value);
    } else if (key == "decoder") {
      spec.decoder = parse_layers(value);
    } else {
      throw SpecError("unknown spec key '" + key + "'");
    }
  }
  spec.validate();
  return spec;
}

NetworkSpec preset_spec(const std::string& name, int code_size, int channels, int height, int width) {
  if (height % 4 != 0 || width % 4 != 0) {
    throw SpecError("presets need image sides divisible by 4, got " + std::to_string(height) + "x" +
                    std::to_string(width));
  }
  NetworkSpec spec;
  spec.name = name;
  spec.channels = channels;
  spec.height = height;
  spec.width = width;
  spec.code_size = code_size;
  spec.aligner = parse_layers("conv7-4,conv7-8,conv1-8,dense-8:none");
  const std::string b = std::to_string(code_size);
  const std::string c = std::to_string(channels);
  const std::string seed_map = "x" + std::to_string(height / 4) + "x" + std::to_string(width / 4);
  const std::string seed_size = std::to_string(16 * (height / 4) * (width / 4));
  if (name == "mnist") {
    spec.encoder = parse_layers("conv3-100*,conv3-100*,conv3-100*,conv1-1024,conv1-1024,dense-" + b + ":sigmoid");
    spec.decoder = parse_layers("dense-" + seed_size + ",reshape-16" + seed_map + ",up2,conv3-100,up2,conv3-100,conv1-" + c);
  } else if (name == "desk") {
    spec.encoder = parse_layers("conv3-16*,conv3-32*,conv3-32*,conv1-64,conv1-64,dense-" + b + ":sigmoid");
    spec.decoder = parse_layers("dense-" + seed_size + ",reshape-16" + seed_map + ",up2,conv3-16,up2,conv3-16,conv1-" + c);
  } else {
    throw SpecError("unknown preset '" + name + "' (expected mnist or desk)");
  }
  spec.validate();
  return spec;
}

}  // namespace congeal
