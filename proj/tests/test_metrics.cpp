#include <cmath>
#include <random>
#include <sstream>

#include "congeal/metrics.hpp"
#include "doctest.h"

using namespace congeal;

namespace {

ImageStack random_stack(int n, int c, int h, int w, std::uint64_t seed) {
  ImageStack s(n, c, h, w);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : s.pixels) v = u(rng);
  return s;
}

LandmarkSet three_points() {
  LandmarkSet set;
  set.eye_a = 0;
  set.eye_b = 1;
  set.ids = {"a", "b"};
  set.points = {{{0, 0}, {10, 0}, {5, 5}}, {{2, 0}, {12, 0}, {5, 7}}};
  return set;
}

}  // namespace

TEST_CASE("apsnr hand cases") {
  CHECK(apsnr_from_mse(1.0) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(apsnr_from_mse(0.25) == doctest::Approx(6.0206).epsilon(1e-5));
  CHECK(apsnr_from_mse(0.01) == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(is_inf_apsnr(apsnr_from_mse(0.0)));

  ImageStack half(2, 1, 3, 3);
  for (float& v : half.image(1)) v = 1.0f;
  CHECK(std::abs(apsnr(half) - 6.0206) < 1e-3);

  ImageStack same(4, 1, 5, 5);
  for (auto& v : same.pixels) v = 0.3f;
  CHECK(is_inf_apsnr(apsnr(same)));
  CHECK_FALSE(is_inf_apsnr(-apsnr(same)));
  CHECK_THROWS(apsnr(ImageStack{}));
}

TEST_CASE("stack statistics match a two-pass oracle") {
  const ImageStack s = random_stack(57, 2, 5, 7, 1);
  const StackStats st = stack_stats(s);
  const std::size_t n = s.image_size();
  std::vector<double> mean(n, 0.0), var(n, 0.0);
  for (int i = 0; i < s.count; ++i)
    for (std::size_t p = 0; p < n; ++p) mean[p] += s.image(i)[p];
  for (auto& m : mean) m /= s.count;
  for (int i = 0; i < s.count; ++i)
    for (std::size_t p = 0; p < n; ++p) var[p] += (s.image(i)[p] - mean[p]) * (s.image(i)[p] - mean[p]);
  for (auto& v : var) v /= s.count;
  const auto v = st.variance();
  double energy = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    CHECK(std::abs(st.mean()[p] - mean[p]) < 1e-10);
    CHECK(std::abs(v[p] - var[p]) < 1e-10);
    energy += var[p];
  }
  CHECK(std::abs(st.variance_energy() - energy) < 1e-10);
  CHECK(std::abs(st.mse() - energy / n) < 1e-10);
  CHECK(std::abs(apsnr(st) - 10 * std::log10(1.0 / (energy / n))) < 1e-9);
}

TEST_CASE("merged partial statistics equal one pass") {
  const ImageStack s = random_stack(40, 1, 4, 4, 2);
  StackStats a(1, 4, 4), b(1, 4, 4);
  for (int i = 0; i < 13; ++i) a.add(s.image(i));
  for (int i = 13; i < 40; ++i) b.add(s.image(i));
  a.merge(b);
  const StackStats whole = stack_stats(s);
  CHECK(a.count() == 40);
  for (std::size_t p = 0; p < 16; ++p) {
    CHECK(std::abs(a.mean()[p] - whole.mean()[p]) < 1e-12);
    CHECK(std::abs(a.variance()[p] - whole.variance()[p]) < 1e-12);
  }
  StackStats empty(1, 4, 4);
  empty.merge(whole);
  CHECK(empty.mean() == whole.mean());
  StackStats other(1, 3, 3);
  CHECK_THROWS_AS(other.add(s.image(0)), ShapeError);
  CHECK_THROWS(StackStats(1, 2, 2).variance());
}

TEST_CASE("landmark error hand cases") {
  const LandmarkSet set = three_points();
  const std::vector<Homography> identity(2);
  const auto e = landmark_error(set, identity);
  REQUIRE(e.per_landmark.size() == 3);
  for (double v : e.per_landmark) CHECK(v == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(e.mean == doctest::Approx(10.0).epsilon(1e-12));

  const std::vector<Homography> shifted{Homography::identity(), Homography::translation(-2, 0)};
  const auto f = landmark_error(set, shifted);
  CHECK(f.per_landmark[0] == 0.0);
  CHECK(f.per_landmark[1] == 0.0);
  CHECK(f.per_landmark[2] == doctest::Approx(10.0 * std::sqrt(2.0)).epsilon(1e-12));
  CHECK(f.mean == doctest::Approx(10.0 * std::sqrt(2.0) / 3).epsilon(1e-12));

  const std::vector<WarpParams> params(2);
  CHECK(landmark_error(set, params, 28, 28).mean == doctest::Approx(10.0).epsilon(1e-12));
  CHECK_THROWS(landmark_error(set, std::vector<Homography>(1)));
  LandmarkSet close = set;
  close.points = {{{0, 0}, {0.5, 0}, {1, 1}}, {{0, 0}, {0.5, 0}, {1, 1}}};
  CHECK_THROWS(landmark_error(close, identity));
}

TEST_CASE("landmark files round trip") {
  const LandmarkSet set = three_points();
  std::stringstream io;
  write_landmarks(io, set);
  const LandmarkSet back = read_landmarks(io);
  CHECK(back.eye_a == 0);
  CHECK(back.eye_b == 1);
  CHECK(back.ids == set.ids);
  REQUIRE(back.points.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t l = 0; l < 3; ++l) {
      CHECK(back.points[i][l].x == set.points[i][l].x);
      CHECK(back.points[i][l].y == set.points[i][l].y);
    }
  }
  std::istringstream bad_head("eye 0 1\nx 1 2 3 4\n");
  CHECK_THROWS(read_landmarks(bad_head));
  std::istringstream odd("eyes 0 1\nx 1 2 3\n");
  CHECK_THROWS(read_landmarks(odd));
  std::istringstream ragged("eyes 0 1\nx 1 2 3 4\ny 1 2 3 4 5 6\n");
  CHECK_THROWS(read_landmarks(ragged));
  std::istringstream eyes("eyes 0 2\nx 1 2 3 4\n");
  CHECK_THROWS(read_landmarks(eyes));
}
