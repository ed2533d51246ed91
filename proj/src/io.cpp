#include "congeal/io.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <sstream>

namespace congeal {

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void dump(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw FormatError("failed writing " + path);
}

std::uint32_t be32(const std::string& b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(b[at + i]);
  return v;
}

void put_be32(std::string& b, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

}  // namespace

IdxFile read_idx(const std::string& path) {
  const std::string b = slurp(path);
  if (b.size() < 4) throw FormatError(path + ": truncated header");
  IdxFile f;
  f.magic = be32(b, 0);
  if (f.magic != kIdxImagesMagic && f.magic != kIdxLabelsMagic) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", f.magic);
    throw FormatError(path + ": bad magic " + buf);
  }
  const int rank = static_cast<int>(f.magic & 0xFF);
  const std::size_t header = 4 + 4 * static_cast<std::size_t>(rank);
  if (b.size() < header) throw FormatError(path + ": truncated header");
  std::size_t total = 1;
  for (int i = 0; i < rank; ++i) {
    const std::uint32_t d = be32(b, 4 + 4 * static_cast<std::size_t>(i));
    if (d == 0 || d > (1u << 30)) throw FormatError(path + ": bad dimension " + std::to_string(d));
    f.dims.push_back(static_cast<int>(d));
    total *= d;
  }
  if (b.size() - header < total) {
    throw FormatError(path + ": truncated payload (" + std::to_string(b.size() - header) + " of " +
                      std::to_string(total) + " bytes)");
  }
  if (b.size() - header > total) throw FormatError(path + ": trailing bytes after payload");
  f.payload.assign(b.begin() + static_cast<std::ptrdiff_t>(header), b.end());
  return f;
}

void write_idx(const std::string& path, const IdxFile& f) {
  std::size_t total = 1;
  for (int d : f.dims) total *= static_cast<std::size_t>(d);
  if (total != f.payload.size() || (f.magic & 0xFF) != f.dims.size()) {
    throw FormatError("write_idx: dimensions do not match the payload");
  }
  std::string b;
  put_be32(b, f.magic);
  for (int d : f.dims) put_be32(b, static_cast<std::uint32_t>(d));
  b.append(f.payload.begin(), f.payload.end());
  dump(path, b);
}

ImageStack read_idx_images(const std::string& path) {
  IdxFile f = read_idx(path);
  if (f.magic != kIdxImagesMagic || f.dims.size() != 3) throw FormatError(path + ": not an IDX image file");
  ImageStack s(f.dims[0], 1, f.dims[1], f.dims[2]);
  for (std::size_t i = 0; i < f.payload.size(); ++i) s.pixels[i] = static_cast<float>(f.payload[i]) / 255.0f;
  return s;
}

std::vector<int> read_idx_labels(const std::string& path) {
  IdxFile f = read_idx(path);
  if (f.magic != kIdxLabelsMagic || f.dims.size() != 1) throw FormatError(path + ": not an IDX label file");
  return {f.payload.begin(), f.payload.end()};
}

std::uint8_t to_byte(double value) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(value, 0.0, 1.0) * 255.0));
}

void write_idx_images(const std::string& path, const ImageStack& stack) {
  if (stack.channels != 1) throw FormatError("write_idx_images: IDX holds single-channel images only");
  IdxFile f;
  f.magic = kIdxImagesMagic;
  f.dims = {stack.count, stack.height, stack.width};
  f.payload.reserve(stack.pixels.size());
  for (float v : stack.pixels) f.payload.push_back(to_byte(v));
  write_idx(path, f);
}

void write_idx_labels(const std::string& path, std::span<const int> labels) {
  IdxFile f;
  f.magic = kIdxLabelsMagic;
  f.dims = {static_cast<int>(labels.size())};
  for (int l : labels) {
    if (l < 0 || l > 255) throw FormatError("write_idx_labels: label out of byte range");
    f.payload.push_back(static_cast<std::uint8_t>(l));
  }
  write_idx(path, f);
}

ImageStack filter_by_label(const ImageStack& stack, std::span<const int> labels, int digit) {
  if (labels.size() != static_cast<std::size_t>(stack.count)) {
    throw FormatError("label count " + std::to_string(labels.size()) + " does not match image count " +
                      std::to_string(stack.count));
  }
  ImageStack out(0, stack.channels, stack.height, stack.width);
  for (int i = 0; i < stack.count; ++i) {
    if (labels[static_cast<std::size_t>(i)] == digit) out.append(stack.image(i));
  }
  return out;
}

template <typename V>
PnmImage to_pnm_impl(int channels, int height, int width, std::span<const V> values) {
  if (channels != 1 && channels != 3) throw FormatError("netpbm output needs 1 or 3 channels");
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  if (values.size() != plane * channels) throw FormatError("netpbm: value count does not match geometry");
  PnmImage img{channels, height, width, {}};
  img.bytes.resize(values.size());
  for (std::size_t p = 0; p < plane; ++p) {
    for (int c = 0; c < channels; ++c) img.bytes[p * channels + c] = to_byte(values[c * plane + p]);
  }
  return img;
}

PnmImage to_pnm(int channels, int height, int width, std::span<const float> values) {
  return to_pnm_impl(channels, height, width, values);
}

PnmImage to_pnm(int channels, int height, int width, std::span<const double> values) {
  return to_pnm_impl(channels, height, width, values);
}

void write_pnm(const std::string& path, const PnmImage& img) {
  if ((img.channels != 1 && img.channels != 3) ||
      img.bytes.size() != static_cast<std::size_t>(img.channels) * img.height * img.width) {
    throw FormatError("write_pnm: inconsistent image");
  }
  std::string b = std::string(img.channels == 1 ? "P5" : "P6") + "\n" + std::to_string(img.width) + " " +
                  std::to_string(img.height) + "\n255\n";
  b.append(img.bytes.begin(), img.bytes.end());
  dump(path, b);
}

PnmImage read_pnm(const std::string& path) {
  const std::string b = slurp(path);
  std::size_t pos = 0;
  const auto token = [&]() {
    while (pos < b.size()) {
      if (b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(b[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < b.size() && !std::isspace(static_cast<unsigned char>(b[pos]))) ++pos;
    if (start == pos) throw FormatError(path + ": truncated netpbm header");
    return b.substr(start, pos - start);
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P6") throw FormatError(path + ": unsupported netpbm type '" + magic + "'");
  PnmImage img;
  img.channels = magic == "P5" ? 1 : 3;
  try {
    img.width = std::stoi(token());
    img.height = std::stoi(token());
    if (std::stoi(token()) != 255) throw FormatError(path + ": only 8-bit netpbm is supported");
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception&) {
    throw FormatError(path + ": bad netpbm header");
  }
  if (img.width <= 0 || img.height <= 0) throw FormatError(path + ": bad netpbm size");
  ++pos;  // single whitespace before the raster
  const std::size_t n = static_cast<std::size_t>(img.channels) * img.width * img.height;
  if (pos > b.size() || b.size() - pos != n) throw FormatError(path + ": raster size does not match header");
  img.bytes.assign(b.begin() + static_cast<std::ptrdiff_t>(pos), b.end());
  return img;
}

ImageStack make_grid(const ImageStack& stack, int rows, int cols) {
  ImageStack grid(1, stack.channels, stack.height * rows, stack.width * cols);
  const std::size_t gplane = static_cast<std::size_t>(grid.height) * grid.width;
  const std::size_t plane = static_cast<std::size_t>(stack.height) * stack.width;
  for (int t = 0; t < std::min(stack.count, rows * cols); ++t) {
    const int oy = (t / cols) * stack.height, ox = (t % cols) * stack.width;
    const auto src = stack.image(t);
    for (int c = 0; c < stack.channels; ++c) {
      for (int y = 0; y < stack.height; ++y) {
        for (int x = 0; x < stack.width; ++x) {
          grid.pixels[c * gplane + static_cast<std::size_t>(oy + y) * grid.width + ox + x] =
              src[c * plane + static_cast<std::size_t>(y) * stack.width + x];
        }
      }
    }
  }
  return grid;
}

double normalise_max(std::vector<double>& values) {
  double m = 0.0;
  for (double v : values) m = std::max(m, v);
  if (m > 0) {
    for (double& v : values) v /= m;
  }
  return m;
}

}  // namespace congeal
