#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "congeal/tensor.hpp"

namespace congeal {

// N x C x H x W batch of images with intensities in [0, 1].
struct ImageStack {
  int count = 0;
  int channels = 1;
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  ImageStack() = default;
  ImageStack(int n, int c, int h, int w) : count(n), channels(c), height(h), width(w) {
    pixels.assign(static_cast<std::size_t>(n) * c * h * w, 0.0f);
  }

  std::size_t image_size() const { return static_cast<std::size_t>(channels) * height * width; }
  bool empty() const { return count == 0; }
  bool same_geometry(const ImageStack& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }

  std::span<float> image(int i) { return {pixels.data() + i * image_size(), image_size()}; }
  std::span<const float> image(int i) const { return {pixels.data() + i * image_size(), image_size()}; }

  // Single image as a C x H x W tensor.
  template <typename T = float>
  Tensor<T> image_tensor(int i) const {
    auto src = image(i);
    return Tensor<T>({channels, height, width}, std::vector<T>(src.begin(), src.end()));
  }

  template <typename T = float>
  void set_image(int i, const Tensor<T>& img) {
    auto dst = image(i);
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<float>(img[k]);
  }

  void append(std::span<const float> img) {
    pixels.insert(pixels.end(), img.begin(), img.end());
    ++count;
  }
};

}  // namespace congeal
