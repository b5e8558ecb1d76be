#pragma once

#include <optional>
#include <span>

namespace macb::metrics {

// Fraction of scores on the correct side of `threshold` (>= counts as 1).
double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);

// Mann-Whitney statistic with tied scores given average ranks. Empty when
// only one class is present.
std::optional<double> auc(std::span<const double> scores, std::span<const int> labels);

}  // namespace macb::metrics
