#pragma once

#include <iosfwd>
#include <string>

#include "congeal/congeal.hpp"

namespace congeal {

// %.17g, with infinities written as `inf` / `-inf` and NaN as `nan`.
std::string format_double(double v);
double parse_double(const std::string& s);

// "<epoch> <D> <Crec> <Cpen> <apsnr> <clamped>"
std::string format_epoch(const EpochStats& e);
EpochStats parse_epoch(const std::string& s);

// Line-oriented `key=value` text. Per-epoch rows are `loss.<e>=...`, per-image
// parameters `params.<i>=d0 ... d7`, images are whitespace separated rows.
void write_report(std::ostream& out, const RunReport& report);
void write_report(const std::string& path, const RunReport& report);
RunReport read_report(std::istream& in);
RunReport read_report(const std::string& path);

}  // namespace congeal
