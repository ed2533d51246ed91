#pragma once

#include <map>
#include <string>
#include <vector>

#include "congeal/congeal.hpp"
#include "congeal/dataset.hpp"
#include "congeal/homography.hpp"
#include "congeal/tensor.hpp"

namespace congeal {

enum class ImageGradient {
  Central,  // (I[x+1] - I[x-1]) / 2, one-sided at the border
  Sobel,    // 3x3 Sobel divided by 8
};

// Least-squares congealing: every image is aligned to the reference on its own
// by forward-additive Gauss-Newton with Levenberg damping.
struct LscConfig {
  int max_iterations = 100;
  double damping = 1e-3;       // initial Levenberg lambda
  double damping_cap = 1e10;   // give up once the damping exceeds this
  double threshold = 1e-3;     // stop when |delta d| < threshold (px)
  ImageGradient gradient = ImageGradient::Central;
  int levels = 1;              // 2 adds a half-resolution pass first

  void validate() const;
  std::map<std::string, std::string> to_map() const;
};

// Pyramid levels used when the config does not force one: two for sigma >= 0.2.
int default_lsc_levels(double sigma);

struct LscImageResult {
  WarpParams params;
  std::vector<double> history;  // mean squared residual after each accepted step, starting value first
  int iterations = 0;
  bool converged = false;
};

// Aligns `image` to `reference` (both C x H x W), starting from `start`.
LscImageResult lsc_align_one(const Tensor<double>& image, const Tensor<double>& reference, const LscConfig& config,
                             const WarpParams& start = {});

struct LscResult {
  std::vector<WarpParams> params;
  ImageStack aligned;
  std::vector<std::vector<double>> history;
  std::vector<bool> converged;
};

// The image at `reference_index` (if any) is kept as is with identity params.
LscResult lsc_align(const ImageSource& images, const Tensor<float>& reference, const LscConfig& config,
                    int reference_index = -1);

// Runs lsc_align and summarises it in the congeal report format with method=lsc.
RunReport lsc_report(const ImageSource& images, int reference_index, const LscConfig& config,
                     LscResult* result = nullptr);

}  // namespace congeal
