#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "congeal/dataset.hpp"
#include "congeal/homography.hpp"
#include "congeal/models.hpp"

namespace congeal {

enum class LossNorm {
  Mean,  // divide by batch size (and pixel count for image terms)
  Sum,
};

struct CongealConfig {
  double lambda = 1.0;
  double gamma = 1.0;
  int k = 1;
  double lr = 1e-5;
  int batch = 64;
  int epochs = 100;
  std::uint64_t seed = 0;
  int reference_index = 0;
  LossNorm norm = LossNorm::Mean;
  int patience = 0;            // epochs without probe improvement before stopping; 0 disables
  int probe_size = 256;
  bool use_distortion = true;  // false drops D (C-only ablation arm)
  int coupling_delay = 0;       // epochs during which C trains the autoencoder only
  std::string checkpoint_path;  // empty disables checkpoints
  int checkpoint_every = 0;     // epochs between checkpoints; 0 writes only the last

  void validate(int dataset_size) const;
  // Flat key/value form used for reports and checkpoints.
  std::map<std::string, std::string> to_map() const;
  static CongealConfig from_map(const std::map<std::string, std::string>& values);

  friend bool operator==(const CongealConfig&, const CongealConfig&) = default;
};

struct EpochStats {
  int epoch = 0;
  double distortion = 0.0;
  double reconstruction = 0.0;
  double penalty = 0.0;
  double apsnr = 0.0;  // on the probe subset after the epoch
  long long clamped = 0;

  friend bool operator==(const EpochStats&, const EpochStats&) = default;
};

struct RunReport {
  std::string method = "congeal";
  std::string arm;
  std::map<std::string, std::string> config;
  std::vector<EpochStats> epochs;
  int count = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  double apsnr_before = 0.0;
  double apsnr_after = 0.0;
  std::vector<double> mean_before, variance_before, mean_after, variance_after;
  std::vector<WarpParams> params;  // per image; the reference keeps the identity
  double mean_area_ratio = 1.0;    // over non-reference images
  bool stopped_early = false;
  std::map<std::string, std::string> images;  // emitted image files
  double wall_seconds = 0.0;                   // not serialised

  friend bool operator==(const RunReport& a, const RunReport& b) {
    return a.method == b.method && a.arm == b.arm && a.config == b.config && a.epochs == b.epochs &&
           a.count == b.count && a.channels == b.channels && a.height == b.height && a.width == b.width &&
           same_double(a.apsnr_before, b.apsnr_before) && same_double(a.apsnr_after, b.apsnr_after) &&
           a.mean_before == b.mean_before && a.variance_before == b.variance_before &&
           a.mean_after == b.mean_after && a.variance_after == b.variance_after && a.params == b.params &&
           same_double(a.mean_area_ratio, b.mean_area_ratio) && a.stopped_early == b.stopped_early &&
           a.images == b.images;
  }

 private:
  static bool same_double(double x, double y) { return x == y || (x != x && y != y); }
};

// Loop state carried across epochs and stored in checkpoints.
struct TrainState {
  int epoch = 0;  // completed epochs
  std::string rng;  // serialised std::mt19937_64
  std::vector<EpochStats> history;
  double best_apsnr = -1e300;
  int since_best = 0;
  bool stopped_early = false;
};

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Loss terms. `warped` is N x C x H x W; `reference` 1 x C x H x W.

template <typename T>
Var<T> distortion_loss(Var<T> warped, Var<T> reference, LossNorm norm = LossNorm::Mean);

template <typename T>
struct ComplexityTerms {
  Var<T> reconstruction;
  Var<T> penalty;
  Var<T> total;  // reconstruction + gamma * penalty
  Var<T> codes;
};

template <typename T>
ComplexityTerms<T> complexity_loss(ModelState<T>& model, Var<T> warped, double gamma, int k,
                                   LossNorm norm = LossNorm::Mean);

template <typename T>
struct LossTerms {
  Var<T> total;
  Var<T> distortion;      // absent (tape == nullptr) when D is dropped
  Var<T> reconstruction;  // absent when lambda == 0
  Var<T> penalty;
  AlignerOutput<T> aligned;
};

// D + lambda * C on the batch's tape. One backward reaches every module. With
// `couple` off the autoencoder sees a detached copy of the warped batch, so C
// trains the autoencoder but sends nothing back to the aligner.
template <typename T>
LossTerms<T> total_loss(ModelState<T>& model, Var<T> batch, Var<T> reference, const CongealConfig& config,
                        bool couple = true);

// ---------------------------------------------------------------------------
// Training and inference.

struct TrainResult {
  ModelState<float> model;
  Tensor<float> reference;  // C x H x W
  TrainState state;
  RunReport report;
};

// Seed used to initialise the networks for a given config seed.
std::uint64_t model_seed(std::uint64_t seed);

TrainResult train(const ImageSource& data, const NetworkSpec& spec, const CongealConfig& config,
                  std::ostream* progress = nullptr);

// Continues from a checkpoint written by train(). `config` supplies the new
// epoch budget and checkpoint settings; every loss setting must match.
TrainResult resume(const ImageSource& data, const std::string& checkpoint, const CongealConfig& config,
                   std::ostream* progress = nullptr);

struct Alignment {
  std::vector<WarpParams> params;
  ImageStack aligned;
};

// One forward pass per batch; no optimisation.
Alignment infer_align(ModelState<float>& model, const Tensor<float>& reference, const ImageSource& images,
                      int batch = 64);

// Streams the aligned images in index order without keeping them.
void align_each(ModelState<float>& model, const Tensor<float>& reference, const ImageSource& images, int batch,
                const std::function<void(int index, const WarpParams&, std::span<const float>)>& sink);

struct AblationResult {
  RunReport d_only;
  RunReport c_only;
  RunReport both;
};

AblationResult ablate(const ImageSource& data, const NetworkSpec& spec, const CongealConfig& config,
                      std::ostream* progress = nullptr);

}  // namespace congeal
