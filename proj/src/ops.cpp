#include "congeal/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace congeal::ad {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// out (+)= a * b, with a summation order that does not depend on operand
// addresses. Vector-shaped products go through plain loops.
template <typename Out, typename A, typename B>
void product(Out&& out, const A& a, const B& b, bool accumulate) {
  if (a.rows() > 1 && a.cols() > 1 && b.cols() > 1) {
    if (accumulate) {
      out.noalias() += a * b;
    } else {
      out.noalias() = a * b;
    }
    return;
  }
  if (!accumulate) out.setZero();
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index k = 0; k < a.cols(); ++k) {
      const auto s = a(i, k);
      for (Eigen::Index j = 0; j < b.cols(); ++j) out(i, j) += s * b(k, j);
    }
  }
}

// Returns the broadcast period of b over a: a.size() for equal shapes,
// b.size() when b's leading dimension is 1 and the rest matches.
template <typename T>
std::size_t broadcast_period(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return a.size();
  if (a.rank() == b.rank() && a.rank() > 0 && b.dim(0) == 1 &&
      std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    return b.size();
  }
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()));
}

template <typename T>
Var<T> add_impl(Var<T> a, Var<T> b, T sign, const char* name) {
  Tape<T>& tape = *a.tape;
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const std::size_t period = broadcast_period(av, bv, name);
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + sign * bv[i % period];
  return tape.record(std::move(out), {a, b}, [a, b, sign, period](Tape<T>& t, const std::vector<T>& g) {
    if (t.needs_grad(a)) {
      auto& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(b)) {
      auto& gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % period] += sign * g[i];
    }
  });
}

struct ConvGeom {
  int n, c, h, w, o, k, stride, oh, ow, pad_top, pad_left;
  int col_rows() const { return c * k * k; }
  int col_cols() const { return oh * ow; }
  bool direct() const { return k == 1 && stride == 1 && oh == h && ow == w; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  for (int c = 0; c < g.c; ++c) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = col + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * g.col_cols();
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride + ky - g.pad_top;
          T* dst = row + static_cast<std::size_t>(oy) * g.ow;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.ow, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
          for (int ox = 0; ox < g.ow; ++ox) {
            const int ix = ox * g.stride + kx - g.pad_left;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* gx) {
  for (int c = 0; c < g.c; ++c) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = col + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * g.col_cols();
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride + ky - g.pad_top;
          if (iy < 0 || iy >= g.h) continue;
          const T* src = row + static_cast<std::size_t>(oy) * g.ow;
          T* dst = gx + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
          for (int ox = 0; ox < g.ow; ++ox) {
            const int ix = ox * g.stride + kx - g.pad_left;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

int conv_output_size(int input, int kernel, int stride, Padding padding) {
  if (padding == Padding::Same) return (input + stride - 1) / stride;
  return input >= kernel ? (input - kernel) / stride + 1 : 0;
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return add_impl(a, b, T(1), "add");
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return add_impl(a, b, T(-1), "sub");
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.shape() != bv.shape()) {
    throw ShapeError("mul: shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()) + " differ");
  }
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const std::vector<T>& g) {
    const Tensor<T>& av = t.value(a.id);
    const Tensor<T>& bv = t.value(b.id);
    if (t.needs_grad(a)) {
      auto& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(b)) {
      auto& gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  const Tensor<T>& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * factor;
  return a.tape->record(std::move(out), {a}, [a, factor](Tape<T>& t, const std::vector<T>& g) {
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  const Tensor<T>& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::tanh(av[i]);
  const int id = static_cast<int>(a.tape->size());
  return a.tape->record(std::move(out), {a}, [a, id](Tape<T>& t, const std::vector<T>& g) {
    const Tensor<T>& y = t.value(id);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (T(1) - y[i] * y[i]);
  });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  const Tensor<T>& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-av[i]));
  const int id = static_cast<int>(a.tape->size());
  return a.tape->record(std::move(out), {a}, [a, id](Tape<T>& t, const std::vector<T>& g) {
    const Tensor<T>& y = t.value(id);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  const Tensor<T>& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::clamp(av[i], lo, hi);
  return a.tape->record(std::move(out), {a}, [a, lo, hi](Tape<T>& t, const std::vector<T>& g) {
    const Tensor<T>& av = t.value(a.id);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (av[i] >= lo && av[i] <= hi) ga[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  const Tensor<T>& av = a.value();
  T total = 0;
  for (T v : av.data()) total += v;
  return a.tape->record(Tensor<T>({1}, {total}), {a}, [a](Tape<T>& t, const std::vector<T>& g) {
    auto& ga = t.grad(a);
    for (auto& v : ga) v += g[0];
  });
}

template <typename T>
Var<T> l1_sum(Var<T> a) {
  const Tensor<T>& av = a.value();
  T total = 0;
  for (T v : av.data()) total += std::abs(v);
  return a.tape->record(Tensor<T>({1}, {total}), {a}, [a](Tape<T>& t, const std::vector<T>& g) {
    const Tensor<T>& av = t.value(a.id);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      if (av[i] > T(0)) {
        ga[i] += g[0];
      } else if (av[i] < T(0)) {
        ga[i] -= g[0];
      }
    }
  });
}

template <typename T>
Var<T> weighted_dot(Var<T> z, std::span<const T> weights) {
  const Tensor<T>& zv = z.value();
  const std::size_t b = weights.size();
  if (zv.rank() != 2 || static_cast<std::size_t>(zv.dim(1)) != b) {
    throw ShapeError("weighted_dot: code shape " + shape_str(zv.shape()) + " does not match weight length " +
                     std::to_string(b));
  }
  T total = 0;
  for (std::size_t i = 0; i < zv.size(); ++i) total += weights[i % b] * zv[i];
  std::vector<T> w(weights.begin(), weights.end());
  return z.tape->record(Tensor<T>({1}, {total}), {z}, [z, w = std::move(w)](Tape<T>& t, const std::vector<T>& g) {
    auto& gz = t.grad(z);
    for (std::size_t i = 0; i < gz.size(); ++i) gz[i] += g[0] * w[i % w.size()];
  });
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, int stride, Padding padding) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  const Tensor<T>& bv = bias.value();
  if (xv.rank() != 4 || wv.rank() != 4 || wv.dim(1) != xv.dim(1) || wv.dim(2) != wv.dim(3) || bv.rank() != 1 ||
      bv.dim(0) != wv.dim(0)) {
    throw ShapeError("conv2d: input " + shape_str(xv.shape()) + " incompatible with kernel " +
                     shape_str(wv.shape()) + " and bias " + shape_str(bv.shape()));
  }
  if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");
  ConvGeom g{};
  g.n = xv.dim(0);
  g.c = xv.dim(1);
  g.h = xv.dim(2);
  g.w = xv.dim(3);
  g.o = wv.dim(0);
  g.k = wv.dim(2);
  g.stride = stride;
  g.oh = conv_output_size(g.h, g.k, stride, padding);
  g.ow = conv_output_size(g.w, g.k, stride, padding);
  if (g.oh <= 0 || g.ow <= 0) {
    throw ShapeError("conv2d: kernel " + shape_str(wv.shape()) + " larger than input " + shape_str(xv.shape()));
  }
  if (padding == Padding::Same) {
    g.pad_top = std::max((g.oh - 1) * stride + g.k - g.h, 0) / 2;
    g.pad_left = std::max((g.ow - 1) * stride + g.k - g.w, 0) / 2;
  } else {
    g.pad_top = g.pad_left = 0;
  }

  Tensor<T> out({g.n, g.o, g.oh, g.ow});
  const std::size_t in_stride = static_cast<std::size_t>(g.c) * g.h * g.w;
  const std::size_t out_stride = static_cast<std::size_t>(g.o) * g.oh * g.ow;
  std::vector<T> col(g.direct() ? 0 : static_cast<std::size_t>(g.col_rows()) * g.col_cols());
  ConstMatMap<T> wm(wv.data().data(), g.o, g.col_rows());
  for (int n = 0; n < g.n; ++n) {
    const T* xn = xv.data().data() + n * in_stride;
    const T* colp = xn;
    if (!g.direct()) {
      im2col(xn, g, col.data());
      colp = col.data();
    }
    ConstMatMap<T> cm(colp, g.col_rows(), g.col_cols());
    MatMap<T> om(out.data().data() + n * out_stride, g.o, g.col_cols());
    product(om, wm, cm, false);
    for (int o = 0; o < g.o; ++o) om.row(o).array() += bv[static_cast<std::size_t>(o)];
  }

  return x.tape->record(std::move(out), {x, weight, bias}, [x, weight, bias, g](Tape<T>& t, const std::vector<T>& gout) {
    const Tensor<T>& xv = t.value(x.id);
    const Tensor<T>& wv = t.value(weight.id);
    const bool need_x = t.needs_grad(x);
    const bool need_w = t.needs_grad(weight);
    const bool need_b = t.needs_grad(bias);
    const std::size_t in_stride = static_cast<std::size_t>(g.c) * g.h * g.w;
    const std::size_t out_stride = static_cast<std::size_t>(g.o) * g.oh * g.ow;
    std::vector<T> col(g.direct() ? 0 : static_cast<std::size_t>(g.col_rows()) * g.col_cols());
    std::vector<T> gcol(need_x && !g.direct() ? col.size() : 0);
    ConstMatMap<T> wm(wv.data().data(), g.o, g.col_rows());
    for (int n = 0; n < g.n; ++n) {
      ConstMatMap<T> gm(gout.data() + n * out_stride, g.o, g.col_cols());
      const T* xn = xv.data().data() + n * in_stride;
      if (need_w) {
        const T* colp = xn;
        if (!g.direct()) {
          im2col(xn, g, col.data());
          colp = col.data();
        }
        ConstMatMap<T> cm(colp, g.col_rows(), g.col_cols());
        MatMap<T> gw(t.grad(weight).data(), g.o, g.col_rows());
        product(gw, gm, cm.transpose(), true);
      }
      if (need_b) {
        std::vector<T>& gb = t.grad(bias);
        for (int o = 0; o < g.o; ++o) {
          T acc = 0;
          for (int p = 0; p < g.col_cols(); ++p) acc += gm(o, p);
          gb[static_cast<std::size_t>(o)] += acc;
        }
      }
      if (need_x) {
        T* gx = t.grad(x).data() + n * in_stride;
        if (g.direct()) {
          MatMap<T> gxm(gx, g.col_rows(), g.col_cols());
          product(gxm, wm.transpose(), gm, true);
        } else {
          MatMap<T> gcm(gcol.data(), g.col_rows(), g.col_cols());
          product(gcm, wm.transpose(), gm, false);
          col2im_add(gcol.data(), g, gx);
        }
      }
    }
  });
}

template <typename T>
Var<T> upsample2x(Var<T> x) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 4) throw ShapeError("upsample2x: expected N x C x H x W, got " + shape_str(xv.shape()));
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor<T> out({n, c, 2 * h, 2 * w});
  for (int p = 0; p < n * c; ++p) {
    const T* src = xv.data().data() + static_cast<std::size_t>(p) * h * w;
    T* dst = out.data().data() + static_cast<std::size_t>(p) * 4 * h * w;
    for (int y = 0; y < 2 * h; ++y) {
      for (int xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
    }
  }
  return x.tape->record(std::move(out), {x}, [x, n, c, h, w](Tape<T>& t, const std::vector<T>& g) {
    auto& gx = t.grad(x);
    for (int p = 0; p < n * c; ++p) {
      const T* src = g.data() + static_cast<std::size_t>(p) * 4 * h * w;
      T* dst = gx.data() + static_cast<std::size_t>(p) * h * w;
      for (int y = 0; y < 2 * h; ++y) {
        for (int xx = 0; xx < 2 * w; ++xx) dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
      }
    }
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  const Tensor<T>& xv = x.value();
  if (shape_numel(shape) != xv.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(xv.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), xv.values());
  return x.tape->record(std::move(out), {x}, [x](Tape<T>& t, const std::vector<T>& g) {
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  const Tensor<T>& bv = bias.value();
  if (xv.rank() < 1 || wv.rank() != 2 || bv.rank() != 1 || bv.dim(0) != wv.dim(0) ||
      xv.size() != static_cast<std::size_t>(xv.dim(0)) * wv.dim(1)) {
    throw ShapeError("linear: input " + shape_str(xv.shape()) + " incompatible with weight " +
                     shape_str(wv.shape()) + " and bias " + shape_str(bv.shape()));
  }
  const int n = xv.dim(0), f = wv.dim(1), o = wv.dim(0);
  Tensor<T> out({n, o});
  ConstMatMap<T> xm(xv.data().data(), n, f);
  ConstMatMap<T> wm(wv.data().data(), o, f);
  MatMap<T> om(out.data().data(), n, o);
  // Row by row so each sample's result does not depend on the batch size.
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < o; ++j) {
      T acc = bv[static_cast<std::size_t>(j)];
      for (int k = 0; k < f; ++k) acc += xm(i, k) * wm(j, k);
      om(i, j) = acc;
    }
  }
  return x.tape->record(std::move(out), {x, weight, bias}, [x, weight, bias, n, f, o](Tape<T>& t, const std::vector<T>& g) {
    ConstMatMap<T> gm(g.data(), n, o);
    if (t.needs_grad(weight)) {
      ConstMatMap<T> xm(t.value(x.id).data().data(), n, f);
      MatMap<T> gw(t.grad(weight).data(), o, f);
      product(gw, gm.transpose(), xm, true);
    }
    if (t.needs_grad(bias)) {
      std::vector<T>& gb = t.grad(bias);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < o; ++j) gb[static_cast<std::size_t>(j)] += gm(i, j);
    }
    if (t.needs_grad(x)) {
      ConstMatMap<T> wm(t.value(weight.id).data().data(), o, f);
      MatMap<T> gx(t.grad(x).data(), n, f);
      product(gx, gm, wm, true);
    }
  });
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const bool compatible = av.rank() == 4 && bv.rank() == 4 && (bv.dim(0) == av.dim(0) || bv.dim(0) == 1) &&
                          av.dim(2) == bv.dim(2) && av.dim(3) == bv.dim(3);
  if (!compatible) {
    throw ShapeError("concat_channels: shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()) +
                     " cannot be joined");
  }
  const int n = av.dim(0), ca = av.dim(1), cb = bv.dim(1);
  const std::size_t plane = static_cast<std::size_t>(av.dim(2)) * av.dim(3);
  const bool bcast = bv.dim(0) != n;
  Tensor<T> out({n, ca + cb, av.dim(2), av.dim(3)});
  for (int i = 0; i < n; ++i) {
    const T* pa = av.data().data() + i * ca * plane;
    const T* pb = bv.data().data() + (bcast ? 0 : i * cb * plane);
    T* dst = out.data().data() + i * (ca + cb) * plane;
    std::copy(pa, pa + ca * plane, dst);
    std::copy(pb, pb + cb * plane, dst + ca * plane);
  }
  return a.tape->record(std::move(out), {a, b}, [a, b, n, ca, cb, plane, bcast](Tape<T>& t, const std::vector<T>& g) {
    for (int i = 0; i < n; ++i) {
      const T* src = g.data() + i * (ca + cb) * plane;
      if (t.needs_grad(a)) {
        T* ga = t.grad(a).data() + i * ca * plane;
        for (std::size_t k = 0; k < ca * plane; ++k) ga[k] += src[k];
      }
      if (t.needs_grad(b)) {
        T* gb = t.grad(b).data() + (bcast ? 0 : i * cb * plane);
        for (std::size_t k = 0; k < cb * plane; ++k) gb[k] += src[ca * plane + k];
      }
    }
  });
}

#define CONGEAL_INSTANTIATE_OPS(T)                                        \
  template Var<T> add(Var<T>, Var<T>);                                    \
  template Var<T> sub(Var<T>, Var<T>);                                    \
  template Var<T> mul(Var<T>, Var<T>);                                    \
  template Var<T> scale(Var<T>, T);                                       \
  template Var<T> tanh(Var<T>);                                           \
  template Var<T> sigmoid(Var<T>);                                        \
  template Var<T> clamp(Var<T>, T, T);                                    \
  template Var<T> sum(Var<T>);                                            \
  template Var<T> l1_sum(Var<T>);                                         \
  template Var<T> weighted_dot(Var<T>, std::span<const T>);               \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, int, Padding);           \
  template Var<T> upsample2x(Var<T>);                                     \
  template Var<T> reshape(Var<T>, Shape);                                 \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                         \
  template Var<T> concat_channels(Var<T>, Var<T>);

CONGEAL_INSTANTIATE_OPS(float)
CONGEAL_INSTANTIATE_OPS(double)

}  // namespace congeal::ad
