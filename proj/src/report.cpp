#include "congeal/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace congeal {

namespace {

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ' ';
    s += format_double(v[i]);
  }
  return s;
}

std::vector<double> split_doubles(const std::string& s) {
  std::vector<double> out;
  std::istringstream in(s);
  std::string tok;
  while (in >> tok) out.push_back(parse_double(tok));
  return out;
}

int parse_int(const std::string& s, const std::string& key) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("report: bad integer for " + key + ": '" + s + "'");
  }
}

}  // namespace

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& s) {
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  if (s == "nan") return NAN;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw std::runtime_error("bad number '" + s + "'");
  return v;
}

std::string format_epoch(const EpochStats& e) {
  return std::to_string(e.epoch) + " " + format_double(e.distortion) + " " + format_double(e.reconstruction) + " " +
         format_double(e.penalty) + " " + format_double(e.apsnr) + " " + std::to_string(e.clamped);
}

EpochStats parse_epoch(const std::string& s) {
  std::istringstream in(s);
  std::string f[6];
  for (auto& x : f) {
    if (!(in >> x)) throw std::runtime_error("bad epoch row '" + s + "'");
  }
  std::string extra;
  if (in >> extra) throw std::runtime_error("bad epoch row '" + s + "'");
  EpochStats e;
  e.epoch = parse_int(f[0], "epoch");
  e.distortion = parse_double(f[1]);
  e.reconstruction = parse_double(f[2]);
  e.penalty = parse_double(f[3]);
  e.apsnr = parse_double(f[4]);
  e.clamped = std::stoll(f[5]);
  return e;
}

void write_report(std::ostream& out, const RunReport& r) {
  out << "method=" << r.method << "\n";
  out << "arm=" << r.arm << "\n";
  for (const auto& [k, v] : r.config) out << "config." << k << "=" << v << "\n";
  out << "count=" << r.count << "\n";
  out << "geometry=" << r.channels << "x" << r.height << "x" << r.width << "\n";
  out << "apsnr_before=" << format_double(r.apsnr_before) << "\n";
  out << "apsnr_after=" << format_double(r.apsnr_after) << "\n";
  out << "apsnr_gain=" << format_double(r.apsnr_after - r.apsnr_before) << "\n";
  const auto vmax = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, x);
    return m;
  };
  out << "variance_max_before=" << format_double(vmax(r.variance_before)) << "\n";
  out << "variance_max_after=" << format_double(vmax(r.variance_after)) << "\n";
  out << "mean_area_ratio=" << format_double(r.mean_area_ratio) << "\n";
  out << "stopped_early=" << (r.stopped_early ? 1 : 0) << "\n";
  for (const auto& [k, v] : r.images) out << "image." << k << "=" << v << "\n";
  out << "epochs=" << r.epochs.size() << "\n";
  out << "# loss.<row>=epoch D Crec Cpen apsnr clamped\n";
  for (std::size_t i = 0; i < r.epochs.size(); ++i) out << "loss." << i << "=" << format_epoch(r.epochs[i]) << "\n";
  out << "mean_before=" << join(r.mean_before) << "\n";
  out << "variance_before=" << join(r.variance_before) << "\n";
  out << "mean_after=" << join(r.mean_after) << "\n";
  out << "variance_after=" << join(r.variance_after) << "\n";
  out << "params=" << r.params.size() << "\n";
  for (std::size_t i = 0; i < r.params.size(); ++i) {
    out << "params." << i << "=" << join(std::vector<double>(r.params[i].d.begin(), r.params[i].d.end())) << "\n";
  }
}

void write_report(const std::string& path, const RunReport& report) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write report " + path);
  write_report(out, report);
  out.flush();
  if (!out) throw std::runtime_error("failed writing report " + path);
}

RunReport read_report(std::istream& in) {
  RunReport r;
  std::string line;
  std::size_t epochs = 0, params = 0;
  bool saw_epochs = false, saw_params = false;
  std::map<std::size_t, EpochStats> rows;
  std::map<std::size_t, WarpParams> prows;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("report: bad line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "method") {
      r.method = value;
    } else if (key == "arm") {
      r.arm = value;
    } else if (key.rfind("config.", 0) == 0) {
      r.config[key.substr(7)] = value;
    } else if (key.rfind("image.", 0) == 0) {
      r.images[key.substr(6)] = value;
    } else if (key == "count") {
      r.count = parse_int(value, key);
    } else if (key == "geometry") {
      if (std::sscanf(value.c_str(), "%dx%dx%d", &r.channels, &r.height, &r.width) != 3) {
        throw std::runtime_error("report: bad geometry '" + value + "'");
      }
    } else if (key == "apsnr_before") {
      r.apsnr_before = parse_double(value);
    } else if (key == "apsnr_after") {
      r.apsnr_after = parse_double(value);
    } else if (key == "apsnr_gain" || key == "variance_max_before" || key == "variance_max_after") {
      // derived
    } else if (key == "mean_area_ratio") {
      r.mean_area_ratio = parse_double(value);
    } else if (key == "stopped_early") {
      r.stopped_early = value == "1";
    } else if (key == "epochs") {
      epochs = static_cast<std::size_t>(parse_int(value, key));
      saw_epochs = true;
    } else if (key.rfind("loss.", 0) == 0) {
      rows[static_cast<std::size_t>(parse_int(key.substr(5), key))] = parse_epoch(value);
    } else if (key == "mean_before") {
      r.mean_before = split_doubles(value);
    } else if (key == "variance_before") {
      r.variance_before = split_doubles(value);
    } else if (key == "mean_after") {
      r.mean_after = split_doubles(value);
    } else if (key == "variance_after") {
      r.variance_after = split_doubles(value);
    } else if (key == "params") {
      params = static_cast<std::size_t>(parse_int(value, key));
      saw_params = true;
    } else if (key.rfind("params.", 0) == 0) {
      const auto v = split_doubles(value);
      if (v.size() != 8) throw std::runtime_error("report: params row needs 8 values: '" + line + "'");
      WarpParams p;
      std::copy(v.begin(), v.end(), p.d.begin());
      prows[static_cast<std::size_t>(parse_int(key.substr(7), key))] = p;
    } else {
      throw std::runtime_error("report: unknown key '" + key + "'");
    }
  }
  if (!saw_epochs || !saw_params || rows.size() != epochs || prows.size() != params) {
    throw std::runtime_error("report: loss or params table is incomplete");
  }
  for (std::size_t i = 0; i < epochs; ++i) {
    if (!rows.count(i)) throw std::runtime_error("report: missing loss row " + std::to_string(i));
    r.epochs.push_back(rows[i]);
  }
  for (std::size_t i = 0; i < params; ++i) {
    if (!prows.count(i)) throw std::runtime_error("report: missing params row " + std::to_string(i));
    r.params.push_back(prows[i]);
  }
  return r;
}

RunReport read_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open report " + path);
  return read_report(in);
}

}  // namespace congeal
