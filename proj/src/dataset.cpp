#include "congeal/dataset.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

#include "congeal/warp.hpp"

namespace congeal {

Tensor<float> ImageSource::image(int index) const {
  Tensor<float> t(image_shape());
  read(index, t.data());
  return t;
}

void StackSource::read(int index, std::span<float> out) const {
  if (index < 0 || index >= stack_->count) throw std::out_of_range("image index " + std::to_string(index));
  const auto src = stack_->image(index);
  std::copy(src.begin(), src.end(), out.begin());
}

SyntheticSource::SyntheticSource(Tensor<float> base, int size, double sigma, std::uint64_t seed)
    : base_(std::move(base)), size_(size), sigma_(sigma), seed_(seed) {
  if (base_.rank() != 3) throw ShapeError("synthetic template must be C x H x W, got " + shape_str(base_.shape()));
  if (size_ < 1) throw std::invalid_argument("synthetic corpus needs at least the template");
  if (!(sigma_ >= 0)) throw std::invalid_argument("sigma must be >= 0");
}

std::uint64_t SyntheticSource::image_seed(int index) const {
  // splitmix64 of (seed, index) so neighbouring indices get unrelated streams.
  std::uint64_t z = seed_ + 0x9E3779B97F4A7C15ull * (static_cast<std::uint64_t>(index) + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

void SyntheticSource::read(int index, std::span<float> out) const {
  if (index < 0 || index >= size_) throw std::out_of_range("image index " + std::to_string(index));
  if (index == 0) {
    std::copy(base_.values().begin(), base_.values().end(), out.begin());
    return;
  }
  const Perturbed p = perturb_perspective(base_, sigma_, base_.dim(2), image_seed(index));
  std::copy(p.image.values().begin(), p.image.values().end(), out.begin());
}

Homography SyntheticSource::truth(int index) const {
  if (index == 0) return Homography::identity();
  return perturb_perspective(base_, sigma_, base_.dim(2), image_seed(index)).truth;
}

SyntheticCorpus make_synthetic_corpus(const Tensor<float>& base, int copies, double sigma, std::uint64_t seed) {
  const SyntheticSource source(base, copies + 1, sigma, seed);
  SyntheticCorpus corpus;
  corpus.images = ImageStack(copies + 1, source.channels(), source.height(), source.width());
  corpus.truth.reserve(static_cast<std::size_t>(copies) + 1);
  corpus.truth.push_back(Homography::identity());
  source.read(0, corpus.images.image(0));
  for (int i = 1; i <= copies; ++i) {
    const Perturbed p = perturb_perspective(base, sigma, base.dim(2), source.image_seed(i));
    corpus.images.set_image(i, p.image);
    corpus.truth.push_back(p.truth);
  }
  return corpus;
}

ImageStack gather(const ImageSource& source, std::span<const int> indices) {
  ImageStack out(static_cast<int>(indices.size()), source.channels(), source.height(), source.width());
  for (std::size_t i = 0; i < indices.size(); ++i) source.read(indices[i], out.image(static_cast<int>(i)));
  return out;
}

}  // namespace congeal
