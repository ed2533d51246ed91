#include "congeal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace congeal {

StackStats::StackStats(int channels, int height, int width)
    : channels_(channels), height_(height), width_(width) {
  const std::size_t n = static_cast<std::size_t>(channels) * height * width;
  mean_.assign(n, 0.0);
  m2_.assign(n, 0.0);
}

void StackStats::add(std::span<const float> image) {
  if (image.size() != mean_.size()) {
    throw ShapeError("stack_stats: image of " + std::to_string(image.size()) + " values, expected " +
                     std::to_string(mean_.size()));
  }
  ++count_;
  const double inv = 1.0 / static_cast<double>(count_);
  for (std::size_t i = 0; i < mean_.size(); ++i) {
    const double x = image[i];
    const double delta = x - mean_[i];
    mean_[i] += delta * inv;
    m2_[i] += delta * (x - mean_[i]);
  }
}

void StackStats::merge(const StackStats& other) {
  if (other.count_ == 0) return;
  if (count_ == 0) {
    *this = other;
    return;
  }
  if (other.mean_.size() != mean_.size()) throw ShapeError("stack_stats: cannot merge different geometries");
  const double na = static_cast<double>(count_), nb = static_cast<double>(other.count_);
  const double n = na + nb;
  for (std::size_t i = 0; i < mean_.size(); ++i) {
    const double delta = other.mean_[i] - mean_[i];
    mean_[i] += delta * nb / n;
    m2_[i] += other.m2_[i] + delta * delta * na * nb / n;
  }
  count_ += other.count_;
}

std::vector<double> StackStats::variance() const {
  if (count_ == 0) throw std::invalid_argument("stack_stats: empty stack");
  std::vector<double> v(m2_.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::max(0.0, m2_[i] / static_cast<double>(count_));
  return v;
}

double StackStats::mse() const {
  const auto v = variance();
  double total = 0.0;
  for (double x : v) total += x;
  return total / static_cast<double>(v.size());
}

double StackStats::variance_energy() const {
  double total = 0.0;
  for (double x : variance()) total += x;
  return total;
}

StackStats stack_stats(const ImageStack& stack) {
  if (stack.count == 0) throw std::invalid_argument("stack_stats: empty stack");
  StackStats s(stack.channels, stack.height, stack.width);
  for (int i = 0; i < stack.count; ++i) s.add(stack.image(i));
  return s;
}

StackStats stack_stats(const ImageSource& source) {
  if (source.size() == 0) throw std::invalid_argument("stack_stats: empty stack");
  StackStats s(source.channels(), source.height(), source.width());
  std::vector<float> buf(source.image_size());
  for (int i = 0; i < source.size(); ++i) {
    source.read(i, buf);
    s.add(buf);
  }
  return s;
}

double apsnr_from_mse(double mse_unit) {
  const double mse = mse_unit * 255.0 * 255.0;
  if (!(mse > 0.0)) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

double apsnr(const ImageStack& stack) { return apsnr(stack_stats(stack)); }

double apsnr(const StackStats& stats) {
  if (stats.count() == 0) throw std::invalid_argument("apsnr: empty stack");
  return apsnr_from_mse(stats.mse());
}

bool is_inf_apsnr(double value) { return std::isinf(value) && value > 0; }

LandmarkError landmark_error(const LandmarkSet& set, std::span<const Homography> warps) {
  const std::size_t n = set.points.size();
  if (n == 0 || warps.size() != n) {
    throw std::invalid_argument("landmark_error: " + std::to_string(n) + " landmark rows for " +
                                std::to_string(warps.size()) + " warps");
  }
  const std::size_t count = set.points[0].size();
  if (set.eye_a == set.eye_b || set.eye_a < 0 || set.eye_b < 0 || static_cast<std::size_t>(set.eye_a) >= count ||
      static_cast<std::size_t>(set.eye_b) >= count) {
    throw std::invalid_argument("landmark_error: bad eye indices");
  }
  std::vector<std::vector<Point>> mapped(n);
  double eye = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (set.points[i].size() != count) throw std::invalid_argument("landmark_error: ragged landmark rows");
    for (const Point& p : set.points[i]) mapped[i].push_back(warps[i].apply(p));
    const Point a = mapped[i][static_cast<std::size_t>(set.eye_a)];
    const Point b = mapped[i][static_cast<std::size_t>(set.eye_b)];
    eye += std::hypot(a.x - b.x, a.y - b.y);
  }
  eye /= static_cast<double>(n);
  if (eye < 1.0) throw std::invalid_argument("landmark_error: eye-to-eye distance below 1 px");
  LandmarkError out;
  for (std::size_t l = 0; l < count; ++l) {
    Point c;
    for (std::size_t i = 0; i < n; ++i) {
      c.x += mapped[i][l].x;
      c.y += mapped[i][l].y;
    }
    c.x /= static_cast<double>(n);
    c.y /= static_cast<double>(n);
    double d = 0.0;
    for (std::size_t i = 0; i < n; ++i) d += std::hypot(mapped[i][l].x - c.x, mapped[i][l].y - c.y);
    out.per_landmark.push_back(100.0 * d / static_cast<double>(n) / eye);
    out.mean += out.per_landmark.back();
  }
  out.mean /= static_cast<double>(count);
  return out;
}

LandmarkError landmark_error(const LandmarkSet& set, std::span<const WarpParams> params, int width, int height) {
  std::vector<Homography> warps;
  for (const auto& p : params) warps.push_back(corners_to_homography(p, width, height));
  return landmark_error(set, warps);
}

LandmarkSet read_landmarks(std::istream& in) {
  LandmarkSet set;
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("landmarks: empty file");
  {
    std::istringstream head(line);
    std::string tag;
    if (!(head >> tag >> set.eye_a >> set.eye_b) || tag != "eyes") {
      throw std::runtime_error("landmarks: first line must be 'eyes <a> <b>'");
    }
  }
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream row(line);
    std::string id;
    if (!(row >> id)) continue;
    std::vector<double> v;
    double x = 0;
    while (row >> x) v.push_back(x);
    if (!row.eof() || v.empty() || v.size() % 2 != 0) {
      throw std::runtime_error("landmarks: bad coordinates on line " + std::to_string(lineno));
    }
    std::vector<Point> pts;
    for (std::size_t k = 0; k < v.size(); k += 2) pts.push_back({v[k], v[k + 1]});
    if (!set.points.empty() && pts.size() != set.points[0].size()) {
      throw std::runtime_error("landmarks: line " + std::to_string(lineno) + " has a different landmark count");
    }
    set.ids.push_back(id);
    set.points.push_back(std::move(pts));
  }
  if (set.points.empty()) throw std::runtime_error("landmarks: no images listed");
  const auto count = static_cast<int>(set.points[0].size());
  if (set.eye_a == set.eye_b || set.eye_a < 0 || set.eye_b < 0 || set.eye_a >= count || set.eye_b >= count) {
    throw std::runtime_error("landmarks: eye indices out of range");
  }
  return set;
}

LandmarkSet read_landmarks(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open landmark file " + path);
  return read_landmarks(in);
}

void write_landmarks(std::ostream& out, const LandmarkSet& set) {
  out << "eyes " << set.eye_a << " " << set.eye_b << "\n";
  std::ostringstream row;
  row.precision(17);
  for (std::size_t i = 0; i < set.points.size(); ++i) {
    row.str("");
    row << (i < set.ids.size() ? set.ids[i] : std::to_string(i));
    for (const Point& p : set.points[i]) row << " " << p.x << " " << p.y;
    out << row.str() << "\n";
  }
}

}  // namespace congeal
