#include "mlkd/eval.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "mlkd/util.hpp"

namespace mlkd {

namespace {

// Descending score, ascending index among ties. Every ranking in this module
// goes through here so reports reproduce bit for bit.
std::vector<std::size_t> ranked_indices(const double* scores, std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [scores](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  return idx;
}

}  // namespace

std::optional<double> average_precision(const std::vector<double>& scores,
                                        const std::vector<std::uint8_t>& labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("average_precision: scores and labels differ in length");
  std::size_t pos = 0;
  for (std::uint8_t l : labels) pos += l ? 1 : 0;
  if (pos == 0) return std::nullopt;

  std::vector<std::size_t> order = ranked_indices(scores.data(), scores.size());
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (labels[order[r]]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  return sum / static_cast<double>(pos);
}

std::optional<double> average_precision_oracle(const std::vector<double>& scores,
                                               const std::vector<std::uint8_t>& labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("average_precision_oracle: scores and labels differ in length");
  std::size_t pos = 0;
  for (std::uint8_t l : labels) pos += l ? 1 : 0;
  if (pos == 0) return std::nullopt;

  std::vector<double> thresholds(scores);
  std::sort(thresholds.begin(), thresholds.end(), std::greater<double>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  double sum = 0.0;
  std::size_t prev_tp = 0;
  for (double t : thresholds) {
    std::size_t tp = 0;
    std::size_t fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= t) (labels[i] ? tp : fp) += 1;
    }
    if (tp > prev_tp) {
      double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
      sum += static_cast<double>(tp - prev_tp) * precision;
    }
    prev_tp = tp;
  }
  return sum / static_cast<double>(pos);
}

MetricsReport mean_average_precision(const Tensor& scores,
                                     const std::vector<std::uint8_t>& labels) {
  if (scores.ndim() != 2)
    throw std::invalid_argument("mean_average_precision: scores must be [N x K]");
  const std::size_t n = scores.shape()[0];
  const std::size_t k = scores.shape()[1];
  if (n == 0) throw std::invalid_argument("mean_average_precision: no rows");
  if (labels.size() != n * k)
    throw std::invalid_argument("mean_average_precision: labels do not match score shape");

  MetricsReport rep;
  rep.n_eval = static_cast<int>(n);
  rep.per_class_ap.resize(k);
  double acc = 0.0;
  std::size_t present = 0;
  std::vector<double> col(n);
  std::vector<std::uint8_t> col_labels(n);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      col[i] = scores.at(i, c);
      col_labels[i] = labels[i * k + c];
    }
    rep.per_class_ap[c] = average_precision(col, col_labels);
    if (rep.per_class_ap[c]) {
      acc += *rep.per_class_ap[c];
      ++present;
    }
  }
  if (present == 0)
    throw std::invalid_argument("mean_average_precision: no class has a positive label");
  rep.map = acc / static_cast<double>(present);
  rep.top1 = top_k_hit_rate(scores, labels, 1);
  if (k >= 5) rep.top5 = top_k_hit_rate(scores, labels, 5);
  return rep;
}

double top_k_accuracy(const Tensor& scores, const std::vector<std::size_t>& true_class,
                      std::size_t k) {
  if (scores.ndim() != 2) throw std::invalid_argument("top_k_accuracy: scores must be [N x K]");
  const std::size_t n = scores.shape()[0];
  const std::size_t classes = scores.shape()[1];
  if (true_class.size() != n)
    throw std::invalid_argument("top_k_accuracy: one true class per row required");
  if (k < 1 || k > classes)
    throw std::invalid_argument("top_k_accuracy: k must be in [1, K]");

  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (true_class[i] >= classes)
      throw std::invalid_argument("top_k_accuracy: true class out of range");
    std::vector<std::size_t> order = ranked_indices(scores.data() + i * classes, classes);
    for (std::size_t r = 0; r < k; ++r) {
      if (order[r] == true_class[i]) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

double top_k_hit_rate(const Tensor& scores, const std::vector<std::uint8_t>& labels,
                      std::size_t k) {
  if (scores.ndim() != 2) throw std::invalid_argument("top_k_hit_rate: scores must be [N x K]");
  const std::size_t n = scores.shape()[0];
  const std::size_t classes = scores.shape()[1];
  if (labels.size() != n * classes)
    throw std::invalid_argument("top_k_hit_rate: labels do not match score shape");
  if (k < 1 || k > classes) throw std::invalid_argument("top_k_hit_rate: k must be in [1, K]");

  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> order = ranked_indices(scores.data() + i * classes, classes);
    for (std::size_t r = 0; r < k; ++r) {
      if (labels[i * classes + order[r]]) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

nlohmann::json report_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["method"] = r.method;
  j["seed"] = r.seed;
  j["config_hash"] = to_hex(r.config_hash);
  nlohmann::json aps = nlohmann::json::array();
  for (const auto& ap : r.per_class_ap) {
    if (ap)
      aps.push_back(*ap);
    else
      aps.push_back(nullptr);
  }
  j["per_class_ap"] = std::move(aps);
  j["map"] = r.map;
  j["top1"] = r.top1 ? nlohmann::json(*r.top1) : nlohmann::json(nullptr);
  j["top5"] = r.top5 ? nlohmann::json(*r.top5) : nlohmann::json(nullptr);
  j["n_eval"] = r.n_eval;
  j["wall_time_s"] = r.wall_time_s;
  return j;
}

std::string report_csv_header() { return "method,seed,map,top1,top5,wall_time_s,config_hash\n"; }

std::string report_csv_row(const MetricsReport& r) {
  std::string row = r.method;
  row += ',';
  row += std::to_string(r.seed);
  row += ',';
  row += dtos(r.map);
  row += ',';
  if (r.top1) row += dtos(*r.top1);
  row += ',';
  if (r.top5) row += dtos(*r.top5);
  row += ',';
  row += dtos(r.wall_time_s);
  row += ',';
  row += to_hex(r.config_hash);
  row += '\n';
  return row;
}

}  // namespace mlkd
