#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlkd/tensor.hpp"

namespace mlkd {

// Validation metrics for one run. The compute side fills per_class_ap, map,
// top1/top5 and n_eval; the caller stamps provenance (method, seed,
// config_hash, wall_time_s) before serializing.
struct MetricsReport {
  std::string method;
  int seed = 0;
  std::uint64_t config_hash = 0;
  std::vector<std::optional<double>> per_class_ap;
  double map = 0.0;
  std::optional<double> top1;
  std::optional<double> top5;
  int n_eval = 0;
  double wall_time_s = 0.0;
};

// Rank-based average precision: sort by descending score, ties broken by
// ascending original index, AP = (1/P) * sum over positives of precision at
// that positive's rank. Returns nullopt when the class has no positives.
std::optional<double> average_precision(const std::vector<double>& scores,
                                        const std::vector<std::uint8_t>& labels);

// Reference implementation: recompute precision at every distinct score
// threshold and integrate the stepwise precision-recall curve. On tie-free
// scores this matches average_precision bit for bit; it is also invariant
// under dataset duplication, which the rank form is not once ties appear.
std::optional<double> average_precision_oracle(const std::vector<double>& scores,
                                               const std::vector<std::uint8_t>& labels);

// Per-class AP over an [N x K] score matrix with flat row-major labels.
// Classes without positives get an absent AP and are excluded from the mean.
// top1/top5 use the any-relevant-hit rule below; top5 is absent when K < 5.
MetricsReport mean_average_precision(const Tensor& scores, const std::vector<std::uint8_t>& labels);

// Fraction of rows whose single true class is among the k highest scores,
// ties broken by ascending class index.
double top_k_accuracy(const Tensor& scores, const std::vector<std::size_t>& true_class,
                      std::size_t k);

// Multi-positive variant: a row counts as a hit when any positive class lands
// in the top k. Coincides with top_k_accuracy on rows with exactly one
// positive.
double top_k_hit_rate(const Tensor& scores, const std::vector<std::uint8_t>& labels, std::size_t k);

nlohmann::json report_to_json(const MetricsReport& r);

std::string report_csv_header();
std::string report_csv_row(const MetricsReport& r);

}  // namespace mlkd
