#include "congeal/warp.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

namespace congeal {

namespace {

struct SamplePoint {
  bool valid = false;
  int x0 = 0, y0 = 0;
  double fx = 0, fy = 0;
  double px = 0, py = 0, w = 1;
};

inline SamplePoint locate(const double* s, int x, int y, int width, int height) {
  SamplePoint sp;
  sp.w = s[6] * x + s[7] * y + s[8];
  if (!(sp.w > 1e-12)) return sp;
  sp.px = (s[0] * x + s[1] * y + s[2]) / sp.w;
  sp.py = (s[3] * x + s[4] * y + s[5]) / sp.w;
  if (!(sp.px > -1.0 && sp.px < width && sp.py > -1.0 && sp.py < height)) return sp;
  const double fx0 = std::floor(sp.px);
  const double fy0 = std::floor(sp.py);
  sp.x0 = static_cast<int>(fx0);
  sp.y0 = static_cast<int>(fy0);
  sp.fx = sp.px - fx0;
  sp.fy = sp.py - fy0;
  sp.valid = true;
  return sp;
}

template <typename T>
struct Neighbours {
  T v00, v10, v01, v11;
};

template <typename T>
inline Neighbours<T> fetch(const T* plane, const SamplePoint& sp, int width, int height) {
  auto at = [&](int x, int y) -> T {
    return (x >= 0 && x < width && y >= 0 && y < height) ? plane[y * width + x] : T(0);
  };
  return {at(sp.x0, sp.y0), at(sp.x0 + 1, sp.y0), at(sp.x0, sp.y0 + 1), at(sp.x0 + 1, sp.y0 + 1)};
}

template <typename T>
void sample_forward(const T* image, int channels, int height, int width, const double* s, T* out) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const SamplePoint sp = locate(s, x, y, width, height);
      for (int c = 0; c < channels; ++c) {
        T value = T(0);
        if (sp.valid) {
          const auto n = fetch(image + c * plane, sp, width, height);
          const double top = (1 - sp.fx) * n.v00 + sp.fx * n.v10;
          const double bottom = (1 - sp.fx) * n.v01 + sp.fx * n.v11;
          value = static_cast<T>((1 - sp.fy) * top + sp.fy * bottom);
        }
        out[c * plane + y * width + x] = value;
      }
    }
  }
}

std::array<double, 9> to_double9(const float* p) {
  std::array<double, 9> s{};
  for (int i = 0; i < 9; ++i) s[i] = p[i];
  return s;
}
std::array<double, 9> to_double9(const double* p) {
  std::array<double, 9> s{};
  for (int i = 0; i < 9; ++i) s[i] = p[i];
  return s;
}

}  // namespace

template <typename T>
Tensor<T> warp_image(const Tensor<T>& image, const Homography& h) {
  if (image.rank() != 3) throw ShapeError("warp_image: expected C x H x W image, got " + shape_str(image.shape()));
  const Homography s = inverse(h);
  Tensor<T> out(image.shape());
  sample_forward(image.data().data(), image.dim(0), image.dim(1), image.dim(2), s.m.data(), out.data().data());
  return out;
}

template Tensor<float> warp_image(const Tensor<float>&, const Homography&);
template Tensor<double> warp_image(const Tensor<double>&, const Homography&);

namespace ad {

template <typename T>
Var<T> corner_homography(Var<T> params, int width, int height) {
  const Tensor<T>& pv = params.value();
  if (pv.rank() != 2 || pv.dim(1) != 8) {
    throw ShapeError("corner_homography: expected N x 8 parameters, got " + shape_str(pv.shape()));
  }
  const int n = pv.dim(0);
  Tensor<T> out({n, 9});
  std::vector<std::array<double, 72>> jacobians(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    WarpParams wp;
    for (int k = 0; k < 8; ++k) wp.d[k] = static_cast<double>(pv[i * 8 + k]);
    const Homography h = corners_to_homography(wp, width, height);
    for (int k = 0; k < 9; ++k) out[i * 9 + k] = static_cast<T>(h.m[k]);
    if (params.tape->needs_grad(params)) jacobians[i] = corners_jacobian(wp, width, height);
  }
  return params.tape->record(std::move(out), {params},
                             [params, n, jac = std::move(jacobians)](Tape<T>& t, const std::vector<T>& g) {
                               auto& gp = t.grad(params);
                               for (int i = 0; i < n; ++i) {
                                 for (int k = 0; k < 8; ++k) {
                                   double acc = 0.0;
                                   for (int r = 0; r < 9; ++r) acc += jac[i][r * 8 + k] * g[i * 9 + r];
                                   gp[i * 8 + k] += static_cast<T>(acc);
                                 }
                               }
                             });
}

template <typename T>
Var<T> invert_homography(Var<T> h) {
  using Mat3 = Eigen::Matrix<double, 3, 3, Eigen::RowMajor>;
  const Tensor<T>& hv = h.value();
  if (hv.rank() != 2 || hv.dim(1) != 9) throw ShapeError("invert_homography: expected N x 9, got " + shape_str(hv.shape()));
  const int n = hv.dim(0);
  Tensor<T> out({n, 9});
  std::vector<Mat3> inverses(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto m = to_double9(hv.data().data() + i * 9);
    const Mat3 mat = Eigen::Map<const Mat3>(m.data());
    if (std::abs(mat.determinant()) < kMinHomographyDet) throw DegenerateWarpError("invert_homography: singular matrix");
    bool identity = true;
    for (int k = 0; k < 9; ++k) identity = identity && m[k] == (k % 4 == 0 ? 1.0 : 0.0);
    inverses[i] = identity ? Mat3::Identity().eval() : mat.inverse().eval();
    for (int k = 0; k < 9; ++k) out[i * 9 + k] = static_cast<T>(inverses[i](k / 3, k % 3));
  }
  return h.tape->record(std::move(out), {h}, [h, n, inv = std::move(inverses)](Tape<T>& t, const std::vector<T>& g) {
    auto& gh = t.grad(h);
    for (int i = 0; i < n; ++i) {
      Mat3 gs;
      for (int k = 0; k < 9; ++k) gs(k / 3, k % 3) = g[i * 9 + k];
      const Mat3 gm = -inv[i].transpose() * gs * inv[i].transpose();
      for (int k = 0; k < 9; ++k) gh[i * 9 + k] += static_cast<T>(gm(k / 3, k % 3));
    }
  });
}

template <typename T>
Var<T> sample_bilinear(Var<T> image, Var<T> sampling) {
  const Tensor<T>& iv = image.value();
  const Tensor<T>& sv = sampling.value();
  if (iv.rank() != 4 || sv.rank() != 2 || sv.dim(1) != 9 || sv.dim(0) != iv.dim(0)) {
    throw ShapeError("sample_bilinear: image " + shape_str(iv.shape()) + " incompatible with sampling matrices " +
                     shape_str(sv.shape()));
  }
  const int n = iv.dim(0), c = iv.dim(1), h = iv.dim(2), w = iv.dim(3);
  const std::size_t stride = static_cast<std::size_t>(c) * h * w;
  Tensor<T> out(iv.shape());
  for (int i = 0; i < n; ++i) {
    const auto s = to_double9(sv.data().data() + i * 9);
    sample_forward(iv.data().data() + i * stride, c, h, w, s.data(), out.data().data() + i * stride);
  }
  return image.tape->record(std::move(out), {image, sampling}, [image, sampling, n, c, h, w, stride](
                                                                   Tape<T>& t, const std::vector<T>& g) {
    const Tensor<T>& iv = t.value(image.id);
    const Tensor<T>& sv = t.value(sampling.id);
    const bool need_img = t.needs_grad(image);
    const bool need_s = t.needs_grad(sampling);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int i = 0; i < n; ++i) {
      const auto s = to_double9(sv.data().data() + i * 9);
      const T* img = iv.data().data() + i * stride;
      const T* gi = g.data() + i * stride;
      T* gimg = need_img ? t.grad(image).data() + i * stride : nullptr;
      std::array<double, 9> gs{};
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const SamplePoint sp = locate(s.data(), x, y, w, h);
          if (!sp.valid) continue;
          double gpx = 0.0, gpy = 0.0;
          for (int ch = 0; ch < c; ++ch) {
            const double go = gi[ch * plane + y * w + x];
            if (go == 0.0) continue;
            if (need_s) {
              const auto nb = fetch(img + ch * plane, sp, w, h);
              gpx += go * ((1 - sp.fy) * (nb.v10 - nb.v00) + sp.fy * (nb.v11 - nb.v01));
              gpy += go * ((1 - sp.fx) * (nb.v01 - nb.v00) + sp.fx * (nb.v11 - nb.v10));
            }
            if (need_img) {
              T* gp = gimg + ch * plane;
              auto add = [&](int xx, int yy, double wt) {
                if (xx >= 0 && xx < w && yy >= 0 && yy < h) gp[yy * w + xx] += static_cast<T>(go * wt);
              };
              add(sp.x0, sp.y0, (1 - sp.fx) * (1 - sp.fy));
              add(sp.x0 + 1, sp.y0, sp.fx * (1 - sp.fy));
              add(sp.x0, sp.y0 + 1, (1 - sp.fx) * sp.fy);
              add(sp.x0 + 1, sp.y0 + 1, sp.fx * sp.fy);
            }
          }
          if (need_s) {
            const double iw = 1.0 / sp.w;
            gs[0] += gpx * x * iw;
            gs[1] += gpx * y * iw;
            gs[2] += gpx * iw;
            gs[3] += gpy * x * iw;
            gs[4] += gpy * y * iw;
            gs[5] += gpy * iw;
            const double gw = -(gpx * sp.px + gpy * sp.py) * iw;
            gs[6] += gw * x;
            gs[7] += gw * y;
            gs[8] += gw;
          }
        }
      }
      if (need_s) {
        auto& gsv = t.grad(sampling);
        for (int k = 0; k < 9; ++k) gsv[i * 9 + k] += static_cast<T>(gs[k]);
      }
    }
  });
}

template <typename T>
Var<T> warp(Var<T> image, Var<T> params) {
  const Tensor<T>& iv = image.value();
  if (iv.rank() != 4) throw ShapeError("warp: expected N x C x H x W image, got " + shape_str(iv.shape()));
  Var<T> h = corner_homography(params, iv.dim(3), iv.dim(2));
  return sample_bilinear(image, invert_homography(h));
}

#define CONGEAL_INSTANTIATE_WARP(T)                         \
  template Var<T> corner_homography(Var<T>, int, int);      \
  template Var<T> invert_homography(Var<T>);                \
  template Var<T> sample_bilinear(Var<T>, Var<T>);          \
  template Var<T> warp(Var<T>, Var<T>);

CONGEAL_INSTANTIATE_WARP(float)
CONGEAL_INSTANTIATE_WARP(double)

}  // namespace ad

// ---------------------------------------------------------------------------

WarpParams PerspectiveDraw::total() const {
  WarpParams p;
  for (int k = 0; k < 8; ++k) p.d[k] = corner_noise[k] + (k % 2 == 0 ? tx : ty);
  return p;
}

PerspectiveDraw sample_perspective(double sigma, double side, std::mt19937_64& rng) {
  std::normal_distribution<double> unit(0.0, 1.0);
  const double std_px = sigma * side;
  PerspectiveDraw draw;
  for (double& v : draw.corner_noise) v = std_px * unit(rng);
  draw.tx = std_px * unit(rng);
  draw.ty = std_px * unit(rng);
  return draw;
}

Perturbed perturb_perspective(const Tensor<float>& image, double sigma, double side, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("perturb_perspective: sigma must be >= 0");
  if (image.rank() != 3) throw ShapeError("perturb_perspective: expected C x H x W, got " + shape_str(image.shape()));
  std::mt19937_64 rng(seed);
  for (int attempt = 0; attempt < kMaxPerturbRetries; ++attempt) {
    const WarpParams params = sample_perspective(sigma, side, rng).total();
    try {
      const Homography h = corners_to_homography(params, image.dim(2), image.dim(1));
      if (h.det() <= 0.0) continue;
      return {warp_image(image, h), h};
    } catch (const DegenerateWarpError&) {
      continue;
    }
  }
  throw DegenerateWarpError("perturb_perspective: no valid warp after " + std::to_string(kMaxPerturbRetries) +
                            " draws");
}

AffineParams sample_affine(const AffineRanges& ranges, int source_size, int pad_to, std::mt19937_64& rng) {
  auto uniform = [&](double r) { return r > 0.0 ? std::uniform_real_distribution<double>(-r, r)(rng) : 0.0; };
  const double margin = ranges.translation >= 0.0 ? ranges.translation : 0.5 * (pad_to - source_size);
  AffineParams p;
  p.rotation_deg = uniform(ranges.rotation_deg);
  p.scale = 1.0 + uniform(ranges.scale);
  p.shear = uniform(ranges.shear);
  p.tx = uniform(margin);
  p.ty = uniform(margin);
  return p;
}

Homography affine_homography(const AffineParams& params, int source_width, int source_height, int pad_to) {
  using Mat3 = Eigen::Matrix<double, 3, 3, Eigen::RowMajor>;
  const double cx = 0.5 * (pad_to - 1);
  const double theta = params.rotation_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  Mat3 embed, to_origin, linear, back;
  embed << 1, 0, 0.5 * (pad_to - source_width), 0, 1, 0.5 * (pad_to - source_height), 0, 0, 1;
  to_origin << 1, 0, -cx, 0, 1, -cx, 0, 0, 1;
  Mat3 rot, shear, scale;
  rot << cs, -sn, 0, sn, cs, 0, 0, 0, 1;
  shear << 1, params.shear, 0, 0, 1, 0, 0, 0, 1;
  scale << params.scale, 0, 0, 0, params.scale, 0, 0, 0, 1;
  linear = rot * shear * scale;
  back << 1, 0, cx + params.tx, 0, 1, cx + params.ty, 0, 0, 1;
  const Mat3 m = back * linear * to_origin * embed;
  std::array<double, 9> a{};
  Eigen::Map<Mat3>(a.data()) = m;
  return normalized(a);
}

Perturbed apply_affine(const Tensor<float>& image, const AffineParams& params, int pad_to) {
  if (image.rank() != 3) throw ShapeError("apply_affine: expected C x H x W, got " + shape_str(image.shape()));
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (pad_to < h || pad_to < w) throw std::invalid_argument("apply_affine: canvas smaller than source");
  const Homography truth = affine_homography(params, w, h, pad_to);
  const Homography s = inverse(truth);
  // Sample the source directly so nothing is lost to an intermediate canvas.
  Tensor<float> out({c, pad_to, pad_to});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int y = 0; y < pad_to; ++y) {
    for (int x = 0; x < pad_to; ++x) {
      const SamplePoint sp = locate(s.m.data(), x, y, w, h);
      if (!sp.valid) continue;
      for (int ch = 0; ch < c; ++ch) {
        const auto n = fetch(image.data().data() + ch * plane, sp, w, h);
        const double top = (1 - sp.fx) * n.v00 + sp.fx * n.v10;
        const double bottom = (1 - sp.fx) * n.v01 + sp.fx * n.v11;
        out[(static_cast<std::size_t>(ch) * pad_to + y) * pad_to + x] = static_cast<float>((1 - sp.fy) * top + sp.fy * bottom);
      }
    }
  }
  return {std::move(out), truth};
}

Perturbed perturb_affine(const Tensor<float>& image, const AffineRanges& ranges, int pad_to, std::uint64_t seed) {
  if (image.rank() != 3) throw ShapeError("perturb_affine: expected C x H x W, got " + shape_str(image.shape()));
  double source_mass = 0.0;
  for (float v : image.data()) source_mass += v;
  std::mt19937_64 rng(seed);
  for (int attempt = 0; attempt < kMaxPerturbRetries; ++attempt) {
    const AffineParams params = sample_affine(ranges, image.dim(2), pad_to, rng);
    Perturbed p = apply_affine(image, params, pad_to);
    double mass = 0.0;
    for (float v : p.image.data()) mass += v;
    if (source_mass == 0.0 || mass > 0.0) return p;
  }
  throw DegenerateWarpError("perturb_affine: content left the canvas on every draw");
}

}  // namespace congeal
