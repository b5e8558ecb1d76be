#include "macb/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

#include "macb/error.hpp"

namespace macb::metrics {

namespace {
void check(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("metrics", "scores and labels differ in length");
  if (scores.empty()) throw ConfigError("metrics: empty score set");
  for (int y : labels)
    if (y != 0 && y != 1) throw ConfigError("metrics: labels must be 0 or 1");
}
}  // namespace

double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold) {
  check(scores, labels);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) hits += (scores[i] >= threshold ? 1 : 0) == labels[i];
  return static_cast<double>(hits) / static_cast<double>(scores.size());
}

std::optional<double> auc(std::span<const double> scores, std::span<const int> labels) {
  check(scores, labels);
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Ranks doubled so tie averages stay integral and the result is exact.
  std::vector<long long> rank2(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const long long avg2 = static_cast<long long>(i + 1 + j + 1);
    for (std::size_t k = i; k <= j; ++k) rank2[order[k]] = avg2;
    i = j + 1;
  }
  long long n_pos = 0, sum2 = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (labels[i] == 1) {
      ++n_pos;
      sum2 += rank2[i];
    }
  const long long n_neg = static_cast<long long>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  // U = sum_pos rank - n_pos (n_pos + 1) / 2, in halves.
  const long long u2 = sum2 - n_pos * (n_pos + 1);
  return static_cast<double>(u2) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

}  // namespace macb::metrics
