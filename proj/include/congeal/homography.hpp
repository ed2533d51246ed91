#pragma once

#include <array>
#include <stdexcept>

namespace congeal {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

// Displacements (dx, dy) of the frame corners TL, TR, BR, BL, in pixels.
// The canonical corners are the outer pixel centres (0,0), (W-1,0), (W-1,H-1), (0,H-1).
struct WarpParams {
  std::array<double, 8> d{};

  bool is_identity() const;
  Point corner(int k) const { return {d[2 * k], d[2 * k + 1]}; }
  friend bool operator==(const WarpParams&, const WarpParams&) = default;
};

// Row-major 3x3 projective matrix, normalised so that m[8] == 1.
struct Homography {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Homography identity() { return {}; }
  static Homography translation(double tx, double ty) { return {{1, 0, tx, 0, 1, ty, 0, 0, 1}}; }

  double operator()(int r, int c) const { return m[3 * r + c]; }
  double det() const;
  Point apply(Point p) const;
  friend bool operator==(const Homography&, const Homography&) = default;
};

struct DegenerateWarpError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr double kMaxCornerCondition = 1e10;
inline constexpr double kMinHomographyDet = 1e-12;

std::array<Point, 4> canonical_corners(int width, int height);

// Homography taking each canonical corner to its displaced position.
// Throws DegenerateWarpError when the 8x8 system (in normalised frame
// coordinates) has condition number >= kMaxCornerCondition.
Homography corners_to_homography(const WarpParams& params, int width, int height);

// d H / d params as a row-major 9 x 8 matrix (row 8 is zero since H[2][2] == 1).
std::array<double, 72> corners_jacobian(const WarpParams& params, int width, int height);

// Corner displacements induced by an arbitrary homography.
WarpParams homography_to_corners(const Homography& h, int width, int height);

// a * b, renormalised: applying the result equals applying b then a.
Homography compose(const Homography& a, const Homography& b);
Homography inverse(const Homography& h);
// Rescales so the bottom-right entry is 1.
Homography normalized(const std::array<double, 9>& m);

// Ratio of the area of the frame quadrilateral after mapping to the area before.
double frame_area_ratio(const Homography& h, int width, int height);

// Mean distance |h(c) - c| over the four canonical corners.
double mean_corner_error(const Homography& h, int width, int height);

}  // namespace congeal
