#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "congeal/dataset.hpp"
#include "congeal/homography.hpp"
#include "congeal/image.hpp"

namespace congeal {

// Streaming per-pixel mean and population variance (Welford). Partial
// accumulators merge exactly, so a stack can be split across workers.
class StackStats {
 public:
  StackStats() = default;
  StackStats(int channels, int height, int width);

  void add(std::span<const float> image);
  void merge(const StackStats& other);

  long long count() const { return count_; }
  int channels() const { return channels_; }
  int height() const { return height_; }
  int width() const { return width_; }
  const std::vector<double>& mean() const { return mean_; }
  std::vector<double> variance() const;
  // Mean of the variance image: the MSE of the stack around its mean.
  double mse() const;
  double variance_energy() const;  // sum of the variance image

 private:
  int channels_ = 0, height_ = 0, width_ = 0;
  long long count_ = 0;
  std::vector<double> mean_;
  std::vector<double> m2_;
};

StackStats stack_stats(const ImageStack& stack);
StackStats stack_stats(const ImageSource& source);

// 10 log10(255^2 / MSE) with MSE measured after rescaling [0,1] to [0,255].
// A zero MSE yields +infinity.
double apsnr_from_mse(double mse_unit);
double apsnr(const ImageStack& stack);
double apsnr(const StackStats& stats);
bool is_inf_apsnr(double value);

// Landmarks per image plus the pair of eye indices used for normalisation.
struct LandmarkSet {
  int eye_a = 0;
  int eye_b = 1;
  std::vector<std::string> ids;
  std::vector<std::vector<Point>> points;  // points[image][landmark]
};

struct LandmarkError {
  std::vector<double> per_landmark;  // percent of the mean eye distance
  double mean = 0.0;
};

// Maps every image's landmarks through its homography and measures, per
// landmark, the mean distance to the centroid over images divided by the mean
// mapped eye-to-eye distance.
LandmarkError landmark_error(const LandmarkSet& landmarks, std::span<const Homography> warps);
LandmarkError landmark_error(const LandmarkSet& landmarks, std::span<const WarpParams> params, int width, int height);

// Text format: first line `eyes <a> <b>`, then `<image-id> x1 y1 x2 y2 ...`.
LandmarkSet read_landmarks(std::istream& in);
LandmarkSet read_landmarks(const std::string& path);
void write_landmarks(std::ostream& out, const LandmarkSet& landmarks);

}  // namespace congeal
