#include "congeal/homography.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <string>

namespace congeal {

namespace {

using Mat3 = Eigen::Matrix<double, 3, 3, Eigen::RowMajor>;
using Mat8 = Eigen::Matrix<double, 8, 8>;
using Vec8 = Eigen::Matrix<double, 8, 1>;

Mat3 to_mat(const std::array<double, 9>& m) { return Eigen::Map<const Mat3>(m.data()); }

std::array<double, 9> to_array(const Mat3& m) {
  std::array<double, 9> out{};
  Eigen::Map<Mat3>(out.data()) = m;
  return out;
}

// Maps pixel coordinates to [-1, 1] across the frame.
struct FrameNormalizer {
  double ax, bx, ay, by;
  FrameNormalizer(int width, int height) {
    if (width < 2 || height < 2) {
      throw DegenerateWarpError("frame " + std::to_string(width) + "x" + std::to_string(height) + " too small");
    }
    ax = 2.0 / (width - 1);
    ay = 2.0 / (height - 1);
    bx = -1.0;
    by = -1.0;
  }
  Mat3 forward() const {
    Mat3 n;
    n << ax, 0, bx, 0, ay, by, 0, 0, 1;
    return n;
  }
  Mat3 backward() const {
    Mat3 n;
    n << 1 / ax, 0, -bx / ax, 0, 1 / ay, -by / ay, 0, 0, 1;
    return n;
  }
};

constexpr std::array<Point, 4> kUnitCorners{{{-1, -1}, {1, -1}, {1, 1}, {-1, 1}}};

struct CornerSystem {
  Mat8 a;
  Vec8 h;
  Eigen::PartialPivLU<Mat8> lu;
};

CornerSystem solve_corner_system(const WarpParams& params, const FrameNormalizer& norm,
                                 const std::array<Point, 4>& corners) {
  CornerSystem sys;
  Vec8 rhs;
  for (int k = 0; k < 4; ++k) {
    const double x = kUnitCorners[k].x;
    const double y = kUnitCorners[k].y;
    const double u = norm.ax * (corners[k].x + params.d[2 * k]) + norm.bx;
    const double v = norm.ay * (corners[k].y + params.d[2 * k + 1]) + norm.by;
    sys.a.row(2 * k) << x, y, 1, 0, 0, 0, -x * u, -y * u;
    sys.a.row(2 * k + 1) << 0, 0, 0, x, y, 1, -x * v, -y * v;
    rhs(2 * k) = u;
    rhs(2 * k + 1) = v;
  }
  Eigen::JacobiSVD<Mat8> svd(sys.a);
  const auto& s = svd.singularValues();
  const double cond = s(7) > 0 ? s(0) / s(7) : std::numeric_limits<double>::infinity();
  if (!(cond < kMaxCornerCondition)) {
    throw DegenerateWarpError("corner displacements give an ill-conditioned homography (condition " +
                              std::to_string(cond) + ")");
  }
  sys.lu.compute(sys.a);
  sys.h = sys.lu.solve(rhs);
  return sys;
}

Mat3 unnormalized(const Vec8& h, const FrameNormalizer& norm) {
  Mat3 hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), 1.0;
  return norm.backward() * hn * norm.forward();
}

}  // namespace

bool WarpParams::is_identity() const {
  for (double v : d) {
    if (v != 0.0) return false;
  }
  return true;
}

double Homography::det() const { return to_mat(m).determinant(); }

Point Homography::apply(Point p) const {
  const double w = m[6] * p.x + m[7] * p.y + m[8];
  return {(m[0] * p.x + m[1] * p.y + m[2]) / w, (m[3] * p.x + m[4] * p.y + m[5]) / w};
}

std::array<Point, 4> canonical_corners(int width, int height) {
  const double r = width - 1;
  const double b = height - 1;
  return {{{0, 0}, {r, 0}, {r, b}, {0, b}}};
}

Homography normalized(const std::array<double, 9>& m) {
  if (std::abs(m[8]) < 1e-300) throw DegenerateWarpError("homography has zero bottom-right entry");
  Homography h;
  for (int i = 0; i < 9; ++i) h.m[i] = m[i] / m[8];
  h.m[8] = 1.0;
  return h;
}

Homography corners_to_homography(const WarpParams& params, int width, int height) {
  const FrameNormalizer norm(width, height);
  if (params.is_identity()) return Homography::identity();
  const CornerSystem sys = solve_corner_system(params, norm, canonical_corners(width, height));
  const Homography h = normalized(to_array(unnormalized(sys.h, norm)));
  if (std::abs(h.det()) < kMinHomographyDet) throw DegenerateWarpError("corner displacements give a singular homography");
  return h;
}

std::array<double, 72> corners_jacobian(const WarpParams& params, int width, int height) {
  const FrameNormalizer norm(width, height);
  const CornerSystem sys = solve_corner_system(params, norm, canonical_corners(width, height));
  const Mat3 m = unnormalized(sys.h, norm);
  const double m22 = m(2, 2);
  const Mat3 nb = norm.backward();
  const Mat3 nf = norm.forward();
  std::array<double, 72> jac{};
  for (int j = 0; j < 8; ++j) {
    const int k = j / 2;
    const double w = 1.0 + kUnitCorners[k].x * sys.h(6) + kUnitCorners[k].y * sys.h(7);
    Vec8 e = Vec8::Zero();
    e(j) = w * ((j % 2 == 0) ? norm.ax : norm.ay);
    const Vec8 dh = sys.lu.solve(e);
    Mat3 dhn;
    dhn << dh(0), dh(1), dh(2), dh(3), dh(4), dh(5), dh(6), dh(7), 0.0;
    const Mat3 dm = nb * dhn * nf;
    const Mat3 dnorm = dm / m22 - m * (dm(2, 2) / (m22 * m22));
    for (int r = 0; r < 9; ++r) jac[r * 8 + j] = dnorm(r / 3, r % 3);
  }
  return jac;
}

WarpParams homography_to_corners(const Homography& h, int width, int height) {
  WarpParams p;
  const auto corners = canonical_corners(width, height);
  for (int k = 0; k < 4; ++k) {
    const Point q = h.apply(corners[k]);
    p.d[2 * k] = q.x - corners[k].x;
    p.d[2 * k + 1] = q.y - corners[k].y;
  }
  return p;
}

Homography compose(const Homography& a, const Homography& b) {
  const Mat3 prod = to_mat(a.m) * to_mat(b.m);
  if (std::abs(prod.determinant()) < kMinHomographyDet) throw DegenerateWarpError("composition is singular");
  return normalized(to_array(prod));
}

Homography inverse(const Homography& h) {
  const Mat3 m = to_mat(h.m);
  const double det = m.determinant();
  if (std::abs(det) < kMinHomographyDet) throw DegenerateWarpError("homography is not invertible");
  return normalized(to_array(m.inverse()));
}

double frame_area_ratio(const Homography& h, int width, int height) {
  const auto corners = canonical_corners(width, height);
  auto signed_area = [](const std::array<Point, 4>& q) {
    double a = 0.0;
    for (int k = 0; k < 4; ++k) {
      const Point& p0 = q[k];
      const Point& p1 = q[(k + 1) % 4];
      a += p0.x * p1.y - p1.x * p0.y;
    }
    return 0.5 * a;
  };
  std::array<Point, 4> mapped{};
  for (int k = 0; k < 4; ++k) mapped[k] = h.apply(corners[k]);
  return signed_area(mapped) / signed_area(corners);
}

double mean_corner_error(const Homography& h, int width, int height) {
  double total = 0.0;
  for (const Point& c : canonical_corners(width, height)) {
    const Point q = h.apply(c);
    total += std::hypot(q.x - c.x, q.y - c.y);
  }
  return total / 4.0;
}

}  // namespace congeal
