#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "congeal/image.hpp"

namespace congeal {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

// Raw IDX file: big-endian magic and dimensions, unsigned byte payload.
struct IdxFile {
  std::uint32_t magic = 0;
  std::vector<int> dims;
  std::vector<std::uint8_t> payload;
};

IdxFile read_idx(const std::string& path);
void write_idx(const std::string& path, const IdxFile& file);

// Images as N x 1 x H x W in [0, 1].
ImageStack read_idx_images(const std::string& path);
std::vector<int> read_idx_labels(const std::string& path);
// Quantises to round(255 x) after clamping to [0, 1].
void write_idx_images(const std::string& path, const ImageStack& stack);
void write_idx_labels(const std::string& path, std::span<const int> labels);

// Keeps the images whose label equals `digit`.
ImageStack filter_by_label(const ImageStack& stack, std::span<const int> labels, int digit);

std::uint8_t to_byte(double value);

// 8-bit netpbm image: P5 for one channel, P6 for three.
struct PnmImage {
  int channels = 1;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bytes;  // interleaved for three channels
};

// `values` is planar C x H x W in [0, 1].
PnmImage to_pnm(int channels, int height, int width, std::span<const float> values);
PnmImage to_pnm(int channels, int height, int width, std::span<const double> values);
void write_pnm(const std::string& path, const PnmImage& image);
PnmImage read_pnm(const std::string& path);

// Tiles the first rows x cols images of a stack (missing tiles stay black).
ImageStack make_grid(const ImageStack& stack, int rows = 8, int cols = 8);

// Divides by the maximum so the largest value becomes 1; returns the maximum.
double normalise_max(std::vector<double>& values);

}  // namespace congeal
