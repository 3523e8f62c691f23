#include "emt/curve_data.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace emt {

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void CurveData::add_series(const std::string& series, std::span<const double> values, double first_epoch) {
  for (std::size_t i = 0; i < values.size(); ++i)
    add(first_epoch + static_cast<double>(i), series, values[i]);
}

std::vector<std::string> CurveData::series() const {
  std::vector<std::string> out;
  for (const auto& p : points)
    if (std::find(out.begin(), out.end(), p.series) == out.end()) out.push_back(p.series);
  return out;
}

std::vector<double> CurveData::values(const std::string& series) const {
  std::vector<double> out;
  for (const auto& p : points)
    if (p.series == series) out.push_back(p.value);
  return out;
}

std::string curve_csv(const CurveData& data) {
  std::string out = "epoch,series,value\n";
  for (const auto& p : data.points) {
    if (p.series.find_first_of(",\"\n") != std::string::npos)
      throw std::invalid_argument("series name may not contain commas, quotes or newlines: " + p.series);
    out += num(p.epoch) + ',' + p.series + ',' + num(p.value) + '\n';
  }
  return out;
}

CurveData parse_curve_csv(std::string_view csv) {
  std::istringstream in{std::string(csv)};
  std::string line;
  if (!std::getline(in, line) || line != "epoch,series,value")
    throw std::invalid_argument("curve data must start with the header \"epoch,series,value\"");
  CurveData data;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto a = line.find(','), b = line.rfind(',');
    if (a == std::string::npos || a == b)
      throw std::invalid_argument("curve data line " + std::to_string(lineno) + " needs 3 fields");
    try {
      data.add(std::stod(line.substr(0, a)), line.substr(a + 1, b - a - 1), std::stod(line.substr(b + 1)));
    } catch (const std::logic_error&) {
      throw std::invalid_argument("curve data line " + std::to_string(lineno) + " has a bad number");
    }
  }
  return data;
}

}  // namespace emt
