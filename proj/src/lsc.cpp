#include "congeal/lsc.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "congeal/metrics.hpp"
#include "congeal/parallel.hpp"
#include "congeal/report.hpp"
#include "congeal/warp.hpp"

namespace congeal {

namespace {

using Mat3 = Eigen::Matrix<double, 3, 3, Eigen::RowMajor>;
using Mat8 = Eigen::Matrix<double, 8, 8>;
using Vec8 = Eigen::Matrix<double, 8, 1>;

Mat3 as_mat(const Homography& h) { return Eigen::Map<const Mat3>(h.m.data()); }

// Gradients of every channel along x and y.
std::pair<Tensor<double>, Tensor<double>> image_gradients(const Tensor<double>& img, ImageGradient scheme) {
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor<double> gx(img.shape()), gy(img.shape());
  auto at = [&](int ch, int y, int x) {
    x = std::clamp(x, 0, w - 1);
    y = std::clamp(y, 0, h - 1);
    return img[(static_cast<std::size_t>(ch) * h + y) * w + x];
  };
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const std::size_t o = (static_cast<std::size_t>(ch) * h + y) * w + x;
        if (scheme == ImageGradient::Central) {
          const int xl = std::max(x - 1, 0), xr = std::min(x + 1, w - 1);
          const int yu = std::max(y - 1, 0), yd = std::min(y + 1, h - 1);
          gx[o] = xr > xl ? (at(ch, y, xr) - at(ch, y, xl)) / (xr - xl) : 0.0;
          gy[o] = yd > yu ? (at(ch, yd, x) - at(ch, yu, x)) / (yd - yu) : 0.0;
        } else {
          gx[o] = (at(ch, y - 1, x + 1) + 2 * at(ch, y, x + 1) + at(ch, y + 1, x + 1) - at(ch, y - 1, x - 1) -
                   2 * at(ch, y, x - 1) - at(ch, y + 1, x - 1)) /
                  8.0;
          gy[o] = (at(ch, y + 1, x - 1) + 2 * at(ch, y + 1, x) + at(ch, y + 1, x + 1) - at(ch, y - 1, x - 1) -
                   2 * at(ch, y - 1, x) - at(ch, y - 1, x + 1)) /
                  8.0;
        }
      }
    }
  }
  return {std::move(gx), std::move(gy)};
}

double mean_sq(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

// 2x2 box average; odd trailing rows and columns are dropped.
Tensor<double> downsample(const Tensor<double>& img) {
  const int c = img.dim(0), h = img.dim(1) / 2, w = img.dim(2) / 2;
  Tensor<double> out({c, h, w});
  const int W = img.dim(2), H = img.dim(1);
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const auto p = [&](int yy, int xx) { return img[(static_cast<std::size_t>(ch) * H + yy) * W + xx]; };
        out[(static_cast<std::size_t>(ch) * h + y) * w + x] =
            0.25 * (p(2 * y, 2 * x) + p(2 * y, 2 * x + 1) + p(2 * y + 1, 2 * x) + p(2 * y + 1, 2 * x + 1));
      }
    }
  }
  return out;
}

// Pixel-centre map from the fine grid to the half-resolution grid.
Mat3 coarse_from_fine() {
  Mat3 s;
  s << 0.5, 0, -0.25, 0, 0.5, -0.25, 0, 0, 1;
  return s;
}

// Displaced corners must still form a convex quadrilateral with the original orientation.
bool convex_frame(const WarpParams& p, int width, int height) {
  const auto base = canonical_corners(width, height);
  std::array<Point, 4> q;
  for (int k = 0; k < 4; ++k) q[k] = {base[k].x + p.d[2 * k], base[k].y + p.d[2 * k + 1]};
  for (int k = 0; k < 4; ++k) {
    const Point a = q[k], b = q[(k + 1) % 4], c = q[(k + 2) % 4];
    if ((b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x) <= 0.0) return false;
  }
  return true;
}

Homography from_mat(const Mat3& m) {
  std::array<double, 9> a{};
  std::copy(m.data(), m.data() + 9, a.begin());
  return normalized(a);
}

LscImageResult solve_level(const Tensor<double>& image, const Tensor<double>& reference, const LscConfig& config,
                           const WarpParams& start) {
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const auto [gx, gy] = image_gradients(image, config.gradient);
  LscImageResult res;
  res.params = start;

  struct Eval {
    bool ok = false;
    Homography hom;
    Tensor<double> warped;
    double cost = 0.0;
  };
  const auto evaluate = [&](const WarpParams& p) {
    Eval e;
    if (!convex_frame(p, w, h)) return e;
    try {
      e.hom = corners_to_homography(p, w, h);
      if (!(e.hom.det() > kMinHomographyDet)) return e;
      e.warped = warp_image(image, e.hom);
    } catch (const DegenerateWarpError&) {
      return e;
    }
    e.cost = mean_sq(e.warped, reference);
    e.ok = std::isfinite(e.cost);
    return e;
  };

  Eval cur = evaluate(res.params);
  if (!cur.ok) throw DegenerateWarpError("lsc: the starting warp is degenerate");
  res.history.push_back(cur.cost);
  double lambda = config.damping;
  const auto raise = [&] { lambda = lambda > 0 ? lambda * 10.0 : 1e-12; };

  while (res.iterations < config.max_iterations) {
    ++res.iterations;
    // J = dI/du * du/dd + dI/dv * dv/dd, with (u, v) = H^-1 (x, y).
    const Mat3 hm = as_mat(cur.hom);
    const Mat3 g = hm.inverse();
    const auto dh = corners_jacobian(res.params, w, h);
    std::array<Mat3, 8> dg;
    for (int k = 0; k < 8; ++k) {
      Mat3 d;
      for (int r = 0; r < 9; ++r) d(r / 3, r % 3) = dh[static_cast<std::size_t>(r) * 8 + k];
      dg[static_cast<std::size_t>(k)] = -g * d * g;
    }
    const Tensor<double> wgx = warp_image(gx, cur.hom);
    const Tensor<double> wgy = warp_image(gy, cur.hom);
    Mat8 jtj = Mat8::Zero();
    Vec8 jtr = Vec8::Zero();
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const Eigen::Vector3d q(x, y, 1.0);
        const Eigen::Vector3d p = g * q;
        if (!(p(2) > 1e-12)) continue;
        const double u = p(0) / p(2), v = p(1) / p(2);
        Vec8 du, dv;
        for (int k = 0; k < 8; ++k) {
          const Eigen::Vector3d dp = dg[static_cast<std::size_t>(k)] * q;
          du(k) = (dp(0) - u * dp(2)) / p(2);
          dv(k) = (dp(1) - v * dp(2)) / p(2);
        }
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t o = ch * plane + static_cast<std::size_t>(y) * w + x;
          const Vec8 j = wgx[o] * du + wgy[o] * dv;
          jtj.noalias() += j * j.transpose();
          jtr.noalias() += j * (cur.warped[o] - reference[o]);
        }
      }
    }

    bool accepted = false;
    while (!accepted) {
      if (lambda > config.damping_cap) return res;  // unconverged
      const Mat8 a = jtj + lambda * Mat8::Identity();
      const Eigen::LDLT<Mat8> ldlt(a);
      if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
        raise();
        continue;
      }
      const Vec8 delta = -ldlt.solve(jtr);
      if (!delta.allFinite()) {
        raise();
        continue;
      }
      if (delta.norm() < config.threshold) {
        res.converged = true;
        return res;
      }
      WarpParams next = res.params;
      for (int k = 0; k < 8; ++k) next.d[static_cast<std::size_t>(k)] += delta(k);
      Eval e = evaluate(next);
      if (e.ok && e.cost <= cur.cost) {
        res.params = next;
        cur = std::move(e);
        res.history.push_back(cur.cost);
        lambda = std::max(lambda / 10.0, 1e-12);
        accepted = true;
      } else {
        raise();
      }
    }
  }
  return res;
}

}  // namespace

void LscConfig::validate() const {
  if (max_iterations < 0) throw std::invalid_argument("lsc: max iterations must be >= 0");
  if (!(damping >= 0)) throw std::invalid_argument("lsc: damping must be >= 0");
  if (!(damping_cap > damping)) throw std::invalid_argument("lsc: damping cap must exceed the damping");
  if (!(threshold > 0)) throw std::invalid_argument("lsc: threshold must be > 0");
  if (levels != 1 && levels != 2) throw std::invalid_argument("lsc: levels must be 1 or 2");
}

std::map<std::string, std::string> LscConfig::to_map() const {
  return {
      {"max_iterations", std::to_string(max_iterations)},
      {"damping", format_double(damping)},
      {"damping_cap", format_double(damping_cap)},
      {"threshold", format_double(threshold)},
      {"gradient", gradient == ImageGradient::Central ? "central" : "sobel"},
      {"levels", std::to_string(levels)},
  };
}

int default_lsc_levels(double sigma) { return sigma >= 0.2 ? 2 : 1; }

LscImageResult lsc_align_one(const Tensor<double>& image, const Tensor<double>& reference, const LscConfig& config,
                             const WarpParams& start) {
  config.validate();
  if (image.rank() != 3 || image.shape() != reference.shape()) {
    throw ShapeError("lsc: image " + shape_str(image.shape()) + " and reference " + shape_str(reference.shape()) +
                     " do not match");
  }
  const int h = image.dim(1), w = image.dim(2);
  if (config.levels == 1 || h < 8 || w < 8) return solve_level(image, reference, config, start);

  // Coarse pass, then carry the homography back to full resolution.
  const Mat3 s = coarse_from_fine();
  const int hc = h / 2, wc = w / 2;
  const Homography hs = corners_to_homography(start, w, h);
  const WarpParams coarse_start = homography_to_corners(from_mat(s * as_mat(hs) * s.inverse()), wc, hc);
  LscImageResult coarse = solve_level(downsample(image), downsample(reference), config, coarse_start);
  try {
    const Homography hc_fine =
        from_mat(s.inverse() * as_mat(corners_to_homography(coarse.params, wc, hc)) * s);
    LscImageResult fine = solve_level(image, reference, config, homography_to_corners(hc_fine, w, h));
    fine.iterations += coarse.iterations;
    return fine;
  } catch (const DegenerateWarpError&) {
    // The coarse estimate does not survive the change of grid; start over at full resolution.
    LscImageResult fine = solve_level(image, reference, config, start);
    fine.iterations += coarse.iterations;
    return fine;
  }
}

LscResult lsc_align(const ImageSource& images, const Tensor<float>& reference, const LscConfig& config,
                    int reference_index) {
  config.validate();
  if (images.image_shape() != reference.shape()) {
    throw ShapeError("lsc: images " + shape_str(images.image_shape()) + " do not match the reference " +
                     shape_str(reference.shape()));
  }
  const int n = images.size();
  LscResult out;
  out.params.resize(static_cast<std::size_t>(n));
  out.history.resize(static_cast<std::size_t>(n));
  out.converged.assign(static_cast<std::size_t>(n), false);
  std::vector<char> converged(static_cast<std::size_t>(n), 0);
  out.aligned = ImageStack(n, images.channels(), images.height(), images.width());
  const Tensor<double> ref = tensor_cast<double>(reference);
  parallel_for(n, [&](int i) {
    const auto slot = static_cast<std::size_t>(i);
    Tensor<float> img(images.image_shape());
    images.read(i, img.data());
    if (i == reference_index) {
      std::copy(img.values().begin(), img.values().end(), out.aligned.image(i).begin());
      converged[slot] = 1;
      return;
    }
    LscImageResult r = lsc_align_one(tensor_cast<double>(img), ref, config);
    const Tensor<float> warped = warp_image(img, corners_to_homography(r.params, images.width(), images.height()));
    std::copy(warped.values().begin(), warped.values().end(), out.aligned.image(i).begin());
    out.params[slot] = r.params;
    out.history[slot] = std::move(r.history);
    converged[slot] = r.converged ? 1 : 0;
  });
  for (int i = 0; i < n; ++i) out.converged[static_cast<std::size_t>(i)] = converged[static_cast<std::size_t>(i)] != 0;
  return out;
}

RunReport lsc_report(const ImageSource& images, int reference_index, const LscConfig& config, LscResult* result) {
  if (reference_index < 0 || reference_index >= images.size()) {
    throw std::invalid_argument("lsc: reference index " + std::to_string(reference_index) + " outside dataset of " +
                                std::to_string(images.size()));
  }
  LscResult r = lsc_align(images, images.image(reference_index), config, reference_index);
  RunReport rep;
  rep.method = "lsc";
  for (const auto& [k, v] : config.to_map()) rep.config[k] = v;
  rep.config["reference_index"] = std::to_string(reference_index);
  rep.count = images.size();
  rep.channels = images.channels();
  rep.height = images.height();
  rep.width = images.width();
  const StackStats before = stack_stats(images);
  const StackStats after = stack_stats(r.aligned);
  rep.apsnr_before = apsnr(before);
  rep.apsnr_after = apsnr(after);
  rep.mean_before = before.mean();
  rep.variance_before = before.variance();
  rep.mean_after = after.mean();
  rep.variance_after = after.variance();
  rep.params = r.params;
  double area = 0.0;
  for (int i = 0; i < images.size(); ++i) {
    if (i == reference_index) continue;
    area += frame_area_ratio(corners_to_homography(r.params[static_cast<std::size_t>(i)], images.width(),
                                                   images.height()),
                             images.width(), images.height());
  }
  rep.mean_area_ratio = images.size() > 1 ? area / (images.size() - 1) : 1.0;
  if (result) *result = std::move(r);
  return rep;
}

}  // namespace congeal
