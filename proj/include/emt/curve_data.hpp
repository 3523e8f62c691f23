#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace emt {

/// One (x, y) point of a named series. x is an epoch for training curves and
/// an imbalance ratio for sweeps.
struct CurvePoint {
  double epoch = 0.0;
  std::string series;
  double value = 0.0;

  friend bool operator==(const CurvePoint&, const CurvePoint&) = default;
};

struct CurveData {
  std::vector<CurvePoint> points;

  void add(double epoch, std::string series, double value) {
    points.push_back({epoch, std::move(series), value});
  }
  void add_series(const std::string& series, std::span<const double> values, double first_epoch = 1.0);
  /// Distinct series names in first-appearance order.
  std::vector<std::string> series() const;
  std::vector<double> values(const std::string& series) const;
};

/// CSV "epoch,series,value"; rows in insertion order, numbers printed with
/// enough digits to round-trip.
std::string curve_csv(const CurveData& data);
CurveData parse_curve_csv(std::string_view csv);

}  // namespace emt
