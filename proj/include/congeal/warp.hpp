#pragma once

#include <cstdint>
#include <random>

#include "congeal/homography.hpp"
#include "congeal/image.hpp"
#include "congeal/tape.hpp"

namespace congeal {

// Inverse warping: output(y) = image(H^-1 y), bilinear, zero outside the frame.
// `image` is C x H x W.
template <typename T>
Tensor<T> warp_image(const Tensor<T>& image, const Homography& h);

namespace ad {

// N x 8 corner displacements -> N x 9 homographies (row-major, H[2][2] = 1).
template <typename T>
Var<T> corner_homography(Var<T> params, int width, int height);

// Batched 3x3 inverse, N x 9 -> N x 9.
template <typename T>
Var<T> invert_homography(Var<T> h);

// output(n, c, y) = bilinear sample of image n at sampling_n * y. Zero outside
// the frame. Differentiable w.r.t. both the image and the sampling matrices.
template <typename T>
Var<T> sample_bilinear(Var<T> image, Var<T> sampling);

// Warps each image by the homography its corner displacements encode.
template <typename T>
Var<T> warp(Var<T> image, Var<T> params);

}  // namespace ad

// ---------------------------------------------------------------------------
// Synthetic perturbations.

struct PerspectiveDraw {
  std::array<double, 8> corner_noise{};  // independent per-corner stage
  double tx = 0.0;                       // shared translation stage
  double ty = 0.0;
  WarpParams total() const;
};

// Each corner coordinate gets N(0, (sigma*side)^2), then all corners a shared
// N(0, (sigma*side)^2) translation.
PerspectiveDraw sample_perspective(double sigma, double side, std::mt19937_64& rng);

struct Perturbed {
  Tensor<float> image;  // C x H x W
  Homography truth;     // perturbed = warp_image(source, truth)
};

inline constexpr int kMaxPerturbRetries = 32;

Perturbed perturb_perspective(const Tensor<float>& image, double sigma, double side, std::uint64_t seed);

struct AffineRanges {
  double rotation_deg = 20.0;
  double scale = 0.2;         // scale factor drawn from [1 - scale, 1 + scale]
  double shear = 0.2;
  double translation = -1.0;  // pixels; negative means the canvas margin
};

struct AffineParams {
  double rotation_deg = 0.0;
  double scale = 1.0;
  double shear = 0.0;
  double tx = 0.0;
  double ty = 0.0;
};

AffineParams sample_affine(const AffineRanges& ranges, int source_size, int pad_to, std::mt19937_64& rng);

// Homography from source coordinates into a pad_to x pad_to canvas: centre the
// source, then rotate/scale/shear about the canvas centre and translate.
Homography affine_homography(const AffineParams& params, int source_width, int source_height, int pad_to);

Perturbed apply_affine(const Tensor<float>& image, const AffineParams& params, int pad_to);

Perturbed perturb_affine(const Tensor<float>& image, const AffineRanges& ranges, int pad_to, std::uint64_t seed);

}  // namespace congeal
