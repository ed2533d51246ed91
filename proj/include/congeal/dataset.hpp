#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "congeal/homography.hpp"
#include "congeal/image.hpp"

namespace congeal {

// Random-access image collection. Implementations must be safe for concurrent
// read() calls.
class ImageSource {
 public:
  virtual ~ImageSource() = default;
  virtual int size() const = 0;
  virtual int channels() const = 0;
  virtual int height() const = 0;
  virtual int width() const = 0;
  // Writes image `index` (C x H x W, values in [0, 1]) into `out`.
  virtual void read(int index, std::span<float> out) const = 0;

  std::size_t image_size() const { return static_cast<std::size_t>(channels()) * height() * width(); }
  Shape image_shape() const { return {channels(), height(), width()}; }
  Tensor<float> image(int index) const;
};

// Non-owning view of an ImageStack.
class StackSource : public ImageSource {
 public:
  explicit StackSource(const ImageStack& stack) : stack_(&stack) {}
  int size() const override { return stack_->count; }
  int channels() const override { return stack_->channels; }
  int height() const override { return stack_->height; }
  int width() const override { return stack_->width; }
  void read(int index, std::span<float> out) const override;

 private:
  const ImageStack* stack_;
};

// Synthetic corpus generated on demand: image 0 is the clean template and
// image i > 0 is an independent perspective perturbation of it, seeded by
// (seed, i). Nothing is stored, so memory does not grow with the size.
class SyntheticSource : public ImageSource {
 public:
  SyntheticSource(Tensor<float> base, int size, double sigma, std::uint64_t seed);
  int size() const override { return size_; }
  int channels() const override { return base_.dim(0); }
  int height() const override { return base_.dim(1); }
  int width() const override { return base_.dim(2); }
  void read(int index, std::span<float> out) const override;

  // Homography applied to the template to produce image `index`.
  Homography truth(int index) const;
  std::uint64_t image_seed(int index) const;

 private:
  Tensor<float> base_;
  int size_;
  double sigma_;
  std::uint64_t seed_;
};

// Template plus perturbed copies materialised in memory, with ground truth.
struct SyntheticCorpus {
  ImageStack images;                // images[0] is the clean template
  std::vector<Homography> truth;    // truth[0] is the identity
};

SyntheticCorpus make_synthetic_corpus(const Tensor<float>& base, int copies, double sigma, std::uint64_t seed);

// Copies a selection of a source into a stack.
ImageStack gather(const ImageSource& source, std::span<const int> indices);

}  // namespace congeal
