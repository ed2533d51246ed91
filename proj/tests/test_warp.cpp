#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "congeal/grad_check.hpp"
#include "congeal/ops.hpp"
#include "congeal/warp.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace congeal;
using congeal::testing::random_tensor;
using congeal::testing::smooth_image;

namespace {

// Least-squares DLT: null vector of the 8x9 homogeneous system in pixel coordinates.
Homography dlt_oracle(const std::array<Point, 4>& src, const std::array<Point, 4>& dst) {
  Eigen::Matrix<double, 8, 9> a;
  for (int k = 0; k < 4; ++k) {
    const double x = src[k].x, y = src[k].y, u = dst[k].x, v = dst[k].y;
    a.row(2 * k) << x, y, 1, 0, 0, 0, -u * x, -u * y, -u;
    a.row(2 * k + 1) << 0, 0, 0, x, y, 1, -v * x, -v * y, -v;
  }
  Eigen::JacobiSVD<Eigen::Matrix<double, 8, 9>> svd(a, Eigen::ComputeFullV);
  const Eigen::Matrix<double, 9, 1> h = svd.matrixV().col(8);
  std::array<double, 9> m{};
  for (int i = 0; i < 9; ++i) m[i] = h(i);
  return normalized(m);
}

WarpParams random_params(std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  WarpParams p;
  for (double& v : p.d) v = u(rng);
  return p;
}

double psnr_unit(const Tensor<double>& a, const Tensor<double>& b, int border) {
  double se = 0;
  int count = 0;
  const int h = a.dim(1), w = a.dim(2);
  for (int y = border; y < h - border; ++y)
    for (int x = border; x < w - border; ++x) {
      const double d = a[y * w + x] - b[y * w + x];
      se += d * d;
      ++count;
    }
  return 10 * std::log10(1.0 / (se / count));
}

}  // namespace

TEST_CASE("corners_to_homography: zero displacement is the identity") {
  CHECK(corners_to_homography(WarpParams{}, 28, 28) == Homography::identity());
}

TEST_CASE("corners_to_homography: equal displacement is a pure translation") {
  WarpParams p;
  for (int k = 0; k < 4; ++k) {
    p.d[2 * k] = 3.0;
    p.d[2 * k + 1] = -2.0;
  }
  const Homography h = corners_to_homography(p, 28, 28);
  const Homography t = Homography::translation(3, -2);
  for (int i = 0; i < 9; ++i) CHECK(h.m[i] == doctest::Approx(t.m[i]).epsilon(1e-12).scale(1.0));
  CHECK(h.m[8] == 1.0);
}

TEST_CASE("corners_to_homography matches a DLT oracle and reprojects corners") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const WarpParams p = random_params(rng, 5.0);
    const Homography h = corners_to_homography(p, 28, 28);
    const auto src = canonical_corners(28, 28);
    std::array<Point, 4> dst{};
    for (int k = 0; k < 4; ++k) dst[k] = {src[k].x + p.d[2 * k], src[k].y + p.d[2 * k + 1]};
    const Homography oracle = dlt_oracle(src, dst);
    for (int i = 0; i < 9; ++i) CHECK(std::abs(h.m[i] - oracle.m[i]) < 1e-9);
    for (int k = 0; k < 4; ++k) {
      const Point q = h.apply(src[k]);
      CHECK(std::abs(q.x - dst[k].x) < 1e-9);
      CHECK(std::abs(q.y - dst[k].y) < 1e-9);
    }
    const WarpParams back = homography_to_corners(h, 28, 28);
    for (int i = 0; i < 8; ++i) CHECK(std::abs(back.d[i] - p.d[i]) < 1e-9);
  }
}

TEST_CASE("corners_to_homography rejects collapsed corners") {
  WarpParams p;
  // Every corner pulled onto the frame centre.
  const auto c = canonical_corners(28, 28);
  for (int k = 0; k < 4; ++k) {
    p.d[2 * k] = 13.5 - c[k].x;
    p.d[2 * k + 1] = 13.5 - c[k].y;
  }
  CHECK_THROWS_AS(corners_to_homography(p, 28, 28), DegenerateWarpError);
}

TEST_CASE("corners_jacobian matches central differences") {
  std::mt19937_64 rng(4);
  const WarpParams p = random_params(rng, 4.0);
  const auto jac = corners_jacobian(p, 28, 20);
  const double h = 1e-6;
  for (int j = 0; j < 8; ++j) {
    WarpParams a = p, b = p;
    a.d[j] += h;
    b.d[j] -= h;
    const Homography ha = corners_to_homography(a, 28, 20), hb = corners_to_homography(b, 28, 20);
    for (int r = 0; r < 9; ++r) {
      const double numeric = (ha.m[r] - hb.m[r]) / (2 * h);
      CHECK(std::abs(jac[r * 8 + j] - numeric) <= 1e-6 * std::max(1.0, std::abs(numeric)));
    }
  }
}

TEST_CASE("compose") {
  std::mt19937_64 rng(8);
  const Homography h = corners_to_homography(random_params(rng, 4.0), 28, 28);
  CHECK(compose(h, Homography::identity()) == h);
  const Homography id = compose(h, inverse(h));
  for (int i = 0; i < 9; ++i) CHECK(std::abs(id.m[i] - Homography::identity().m[i]) < 1e-9);
  CHECK(compose(Homography::translation(2, 0), Homography::translation(-2, 0)) == Homography::identity());
  // Applying the composition equals applying b then a.
  const Homography a = corners_to_homography(random_params(rng, 3.0), 28, 28);
  const Point p{7.3, 11.1};
  const Point q1 = compose(a, h).apply(p), q2 = a.apply(h.apply(p));
  CHECK(q1.x == doctest::Approx(q2.x).epsilon(1e-12));
  CHECK(q1.y == doctest::Approx(q2.y).epsilon(1e-12));
}

TEST_CASE("compose rejects a singular product") {
  Homography flat;
  flat.m = {1, 0, 0, 0, 0, 0, 0, 0, 1};
  CHECK_THROWS_AS(compose(flat, Homography::identity()), DegenerateWarpError);
}

TEST_CASE("warp_image: identity reproduces the input exactly") {
  std::mt19937_64 rng(1);
  Tensor<float> img = random_tensor<float>({1, 28, 28}, rng, 0, 1);
  CHECK(warp_image(img, Homography::identity()).values() == img.values());
}

TEST_CASE("warp_image: half-pixel shift of a ramp averages horizontal neighbours") {
  const int w = 16, h = 6;
  Tensor<double> ramp({1, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) ramp[y * w + x] = static_cast<double>(x) / w;
  const Tensor<double> out = warp_image(ramp, Homography::translation(0.5, 0.0));
  for (int y = 0; y < h; ++y)
    for (int x = 1; x < w; ++x) {
      const double expect = 0.5 * (ramp[y * w + x - 1] + ramp[y * w + x]);
      CHECK(out[y * w + x] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("warp_image: translating the frame out of bounds yields zeros") {
  std::mt19937_64 rng(2);
  Tensor<float> img = random_tensor<float>({1, 28, 28}, rng, 0, 1);
  const Tensor<float> out = warp_image(img, Homography::translation(40.0, -3.0));
  for (float v : out.data()) CHECK(v == 0.0f);
}

TEST_CASE("warp gradients w.r.t. corner displacements and image match finite differences") {
  std::mt19937_64 rng(12);
  Tensor<double> img({2, 1, 16, 16});
  const Tensor<double> a = smooth_image(1, 16, 16, 7.3, 8.1, 3.0), b = smooth_image(1, 16, 16, 8.6, 6.7, 2.5);
  std::copy(a.data().begin(), a.data().end(), img.data().begin());
  std::copy(b.data().begin(), b.data().end(), img.data().begin() + 256);
  for (int trial = 0; trial < 4; ++trial) {
    Tensor<double> d({2, 8});
    std::uniform_real_distribution<double> ud(-4.0, 4.0);
    for (auto& v : d.values()) v = ud(rng);
    ScalarFn f = [](Tape<double>&, std::span<const Var<double>> v) {
      auto out = ad::warp(v[0], v[1]);
      std::mt19937_64 r(99);
      return ad::sum(ad::mul(out, out.tape->constant(random_tensor(out.shape(), r))));
    };
    std::vector<Tensor<double>*> leaves{&img, &d};
    GradCheckOptions opt;
    opt.max_coords = 0;
    opt.step = 1e-5;
    const auto r = grad_check(f, leaves, opt);
    CHECK(r.max_rel_error[0] < 1e-4);
    CHECK(r.max_rel_error[1] < 1e-4);
  }
}

TEST_CASE("l1 loss through the bilinear warp passes the gradient check") {
  Tensor<double> img({1, 1, 14, 14});
  const Tensor<double> a = smooth_image(1, 14, 14, 6.2, 7.0, 2.5);
  std::copy(a.data().begin(), a.data().end(), img.data().begin());
  Tensor<double> ref({1, 1, 14, 14});
  const Tensor<double> r = smooth_image(1, 14, 14, 7.0, 6.4, 2.5);
  std::copy(r.data().begin(), r.data().end(), ref.data().begin());
  Tensor<double> d({1, 8}, std::vector<double>{0.37, -0.21, 1.13, 0.42, -0.64, 0.28, 0.19, -1.33});
  ScalarFn f = [&](Tape<double>& t, std::span<const Var<double>> v) {
    return ad::l1_sum(ad::sub(ad::warp(t.constant(img), v[0]), t.constant(ref)));
  };
  std::vector<Tensor<double>*> leaves{&d};
  GradCheckOptions opt;
  opt.max_coords = 0;
  CHECK(grad_check(f, leaves, opt).worst() < 1e-4);
}

TEST_CASE("round trip through H and its inverse keeps PSNR above 30 dB") {
  std::mt19937_64 rng(33);
  const Tensor<double> img = smooth_image(1, 28, 28, 13.2, 14.1, 4.0);
  for (int trial = 0; trial < 10; ++trial) {
    const Homography h = corners_to_homography(random_params(rng, 3.0), 28, 28);
    const Tensor<double> back = warp_image(warp_image(img, h), inverse(h));
    CHECK(psnr_unit(img, back, 4) > 30.0);
  }
}

TEST_CASE("perturb_perspective: sigma 0 is the identity") {
  std::mt19937_64 rng(5);
  Tensor<float> img = random_tensor<float>({1, 28, 28}, rng, 0, 1);
  const Perturbed p = perturb_perspective(img, 0.0, 28.0, 1234);
  CHECK(p.truth == Homography::identity());
  CHECK(p.image.values() == img.values());
}

TEST_CASE("perturb_perspective: corner noise has standard deviation sigma * side") {
  std::mt19937_64 rng(2024);
  double sq_corner = 0, sq_trans = 0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const PerspectiveDraw d = sample_perspective(0.10, 28.0, rng);
    for (double v : d.corner_noise) sq_corner += v * v;
    sq_trans += d.tx * d.tx + d.ty * d.ty;
  }
  const double std_corner = std::sqrt(sq_corner / (8.0 * draws));
  const double std_trans = std::sqrt(sq_trans / (2.0 * draws));
  CHECK(std::abs(std_corner - 2.8) < 0.05 * 2.8);
  CHECK(std::abs(std_trans - 2.8) < 0.05 * 2.8);
}

TEST_CASE("perturb_perspective: fixed seed is bitwise reproducible and the truth explains the image") {
  const Tensor<float> img = tensor_cast<float>(smooth_image(1, 28, 28, 13.5, 13.0, 4.0));
  const Perturbed a = perturb_perspective(img, 0.1, 28.0, 77);
  const Perturbed b = perturb_perspective(img, 0.1, 28.0, 77);
  CHECK(a.image.values() == b.image.values());
  CHECK(a.truth == b.truth);
  CHECK(warp_image(img, a.truth).values() == a.image.values());
  CHECK_FALSE(a.truth == Homography::identity());
}

TEST_CASE("perturb_perspective converges to the identity as sigma shrinks") {
  const Tensor<float> img = tensor_cast<float>(smooth_image(1, 28, 28, 13.5, 13.0, 4.0));
  double previous = 1e9;
  for (double sigma : {0.1, 0.01, 0.001, 0.0001}) {
    const double err = mean_corner_error(perturb_perspective(img, sigma, 28.0, 5).truth, 28, 28);
    CHECK(err < previous);
    previous = err;
  }
  CHECK(previous < 0.01);
}

TEST_CASE("perturb_affine: zero ranges centre the digit in the canvas") {
  std::mt19937_64 rng(6);
  Tensor<float> img = random_tensor<float>({1, 28, 28}, rng, 0, 1);
  AffineRanges zero{0, 0, 0, 0};
  const Perturbed p = perturb_affine(img, zero, 40, 3);
  CHECK(p.image.shape() == Shape{1, 40, 40});
  CHECK(p.truth == Homography::translation(6, 6));
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 40; ++x) {
      const bool inside = x >= 6 && x < 34 && y >= 6 && y < 34;
      CHECK(p.image[y * 40 + x] == (inside ? img[(y - 6) * 28 + x - 6] : 0.0f));
    }
}

TEST_CASE("perturb_affine: 90 degree rotation matches the exactly rotated image") {
  Tensor<float> img({1, 28, 28}, 0.0f);
  for (int y = 4; y < 22; ++y) img[y * 28 + 6] = 1.0f;   // vertical bar
  for (int x = 6; x < 18; ++x) img[21 * 28 + x] = 0.5f;  // foot
  AffineParams rot;
  rot.rotation_deg = 90.0;
  const Perturbed p = apply_affine(img, rot, 40);
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 40; ++x) {
      const int sx = y - 6, sy = 33 - x;
      const float expect = (sx >= 0 && sx < 28 && sy >= 0 && sy < 28) ? img[sy * 28 + sx] : 0.0f;
      CHECK(std::abs(p.image[y * 40 + x] - expect) < 1e-5f);
    }
}

TEST_CASE("perturb_affine: seeded draws are reproducible and far translations fail") {
  const Tensor<float> img = tensor_cast<float>(smooth_image(1, 28, 28, 13.5, 13.0, 4.0));
  const Perturbed a = perturb_affine(img, AffineRanges{}, 40, 11);
  const Perturbed b = perturb_affine(img, AffineRanges{}, 40, 11);
  CHECK(a.image.values() == b.image.values());
  CHECK(a.truth == b.truth);
  AffineRanges wild;
  wild.translation = 1e6;
  CHECK_THROWS_AS(perturb_affine(img, wild, 40, 11), DegenerateWarpError);
}
