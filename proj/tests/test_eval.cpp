#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mlkd/eval.hpp"
#include "mlkd/rng.hpp"
#include "mlkd/util.hpp"

using namespace mlkd;

namespace {

struct Instance {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
};

// Tie-free scores with at least one positive label.
Instance random_instance(Rng& rng, std::size_t n) {
  Instance inst;
  inst.scores.resize(n);
  inst.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    inst.scores[i] = rng.uniform01();
    inst.labels[i] = rng.uniform01() < 0.4 ? 1 : 0;
  }
  inst.labels[rng.bounded(n)] = 1;
  return inst;
}

}  // namespace

TEST_CASE("average_precision frozen values") {
  CHECK(*average_precision({0.9, 0.1}, {1, 0}) == 1.0);
  CHECK(*average_precision({0.1, 0.9}, {1, 0}) == 0.5);
  CHECK(*average_precision({0.9, 0.8, 0.7}, {1, 0, 1}) ==
        doctest::Approx(5.0 / 6.0).epsilon(1e-12));
  CHECK(*average_precision({0.9, 0.8, 0.7}, {1, 1, 1}) == 1.0);
  // all negatives: undefined
  CHECK_FALSE(average_precision({0.3, 0.2}, {0, 0}).has_value());
  CHECK_THROWS_AS(average_precision({0.3}, {0, 1}), std::invalid_argument);
}

TEST_CASE("tie-break by ascending original index") {
  // both scores 0.5: index 0 ranks first
  CHECK(*average_precision({0.5, 0.5}, {1, 0}) == 1.0);
  CHECK(*average_precision({0.5, 0.5}, {0, 1}) == 0.5);
  // three-way tie, positive in the middle
  CHECK(*average_precision({0.5, 0.5, 0.5}, {0, 1, 0}) == 0.5);
}

TEST_CASE("AP invariant under strictly monotone transforms") {
  Rng rng(101);
  for (int t = 0; t < 200; ++t) {
    Instance inst = random_instance(rng, 2 + rng.bounded(10));
    double base = *average_precision(inst.scores, inst.labels);
    std::vector<double> affine(inst.scores), expo(inst.scores);
    for (double& v : affine) v = 3.0 * v + 11.0;
    for (double& v : expo) v = std::exp(v);
    CHECK(*average_precision(affine, inst.labels) == base);
    CHECK(*average_precision(expo, inst.labels) == base);
  }
}

TEST_CASE("rank AP equals stepwise-area oracle exactly on tie-free instances") {
  Rng rng(202);
  for (int t = 0; t < 1000; ++t) {
    Instance inst = random_instance(rng, 1 + rng.bounded(12));
    double a = *average_precision(inst.scores, inst.labels);
    double b = *average_precision_oracle(inst.scores, inst.labels);
    CHECK(a == b);
  }
}

TEST_CASE("stepwise-area oracle is duplication invariant") {
  Rng rng(303);
  for (int t = 0; t < 200; ++t) {
    Instance inst = random_instance(rng, 1 + rng.bounded(10));
    Instance dup;
    for (std::size_t i = 0; i < inst.scores.size(); ++i) {
      dup.scores.push_back(inst.scores[i]);
      dup.scores.push_back(inst.scores[i]);
      dup.labels.push_back(inst.labels[i]);
      dup.labels.push_back(inst.labels[i]);
    }
    CHECK(*average_precision_oracle(dup.scores, dup.labels) ==
          *average_precision_oracle(inst.scores, inst.labels));
  }
  // characterization: the rank form shifts once duplication introduces ties.
  // single positive at rank 2 of 2: 1/2 vs duplicated (1/3 + 2/4) / 2.
  CHECK(*average_precision({0.9, 0.1}, {0, 1}) == 0.5);
  CHECK(*average_precision({0.9, 0.9, 0.1, 0.1}, {0, 0, 1, 1}) ==
        doctest::Approx(5.0 / 12.0).epsilon(1e-12));
}

TEST_CASE("mean_average_precision") {
  // K=1 reduces to average_precision bitwise
  Rng rng(404);
  for (int t = 0; t < 50; ++t) {
    Instance inst = random_instance(rng, 6);
    Tensor scores({6, 1});
    for (std::size_t i = 0; i < 6; ++i) scores.vec()[i] = inst.scores[i];
    MetricsReport rep = mean_average_precision(scores, inst.labels);
    CHECK(rep.map == *average_precision(inst.scores, inst.labels));
    CHECK(rep.n_eval == 6);
  }

  // perfect scores == labels
  Tensor perfect({3, 2}, {1, 0, 0, 1, 1, 0});
  std::vector<std::uint8_t> y = {1, 0, 0, 1, 1, 0};
  CHECK(mean_average_precision(perfect, y).map == 1.0);

  // class without positives is excluded from the mean
  Tensor s({2, 3}, {0.9, 0.2, 0.4, 0.1, 0.3, 0.6});
  std::vector<std::uint8_t> y2 = {1, 0, 0, 0, 0, 1};
  MetricsReport rep = mean_average_precision(s, y2);
  CHECK(rep.per_class_ap[0].has_value());
  CHECK_FALSE(rep.per_class_ap[1].has_value());
  CHECK(rep.per_class_ap[2].has_value());
  CHECK(rep.map == doctest::Approx((1.0 + 1.0) / 2.0).epsilon(1e-12));

  // map is the mean over present classes on random data
  for (int t = 0; t < 30; ++t) {
    Tensor scores({8, 4});
    std::vector<std::uint8_t> labels(32, 0);
    for (double& v : scores.vec()) v = rng.uniform01();
    for (auto& l : labels) l = rng.uniform01() < 0.3 ? 1 : 0;
    labels[rng.bounded(32)] = 1;
    MetricsReport r2 = mean_average_precision(scores, labels);
    double acc = 0.0;
    int present = 0;
    for (const auto& ap : r2.per_class_ap) {
      if (ap) {
        acc += *ap;
        ++present;
      }
    }
    CHECK(r2.map == acc / present);
    CHECK(r2.map >= 0.0);
    CHECK(r2.map <= 1.0);
    CHECK(*r2.top1 >= 0.0);
    CHECK(*r2.top1 <= 1.0);
    CHECK_FALSE(r2.top5.has_value());  // K=4 < 5
  }

  CHECK_THROWS_AS(mean_average_precision(Tensor({2, 2}), std::vector<std::uint8_t>(4, 0)),
                  std::invalid_argument);
  CHECK_THROWS_AS(mean_average_precision(Tensor({4}), std::vector<std::uint8_t>(4, 1)),
                  std::invalid_argument);
  CHECK_THROWS_AS(mean_average_precision(Tensor({2, 2}), std::vector<std::uint8_t>(3, 1)),
                  std::invalid_argument);
}

TEST_CASE("top_k_accuracy") {
  Tensor s({3, 4}, {0.9, 0.1, 0.0, 0.0,   // true 0, hit at k=1
                    0.1, 0.2, 0.3, 0.4,   // true 0, miss at k=1
                    0.0, 0.0, 0.8, 0.1}); // true 2, hit at k=1
  std::vector<std::size_t> truth = {0, 0, 2};
  CHECK(top_k_accuracy(s, truth, 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(top_k_accuracy(s, truth, 4) == 1.0);  // k == K
  // one-hot on the true class: 1.0 for any k
  Tensor hot({2, 3}, {0, 1, 0, 0, 0, 1});
  std::vector<std::size_t> h = {1, 2};
  for (std::size_t k = 1; k <= 3; ++k) CHECK(top_k_accuracy(hot, h, k) == 1.0);
  // ties broken by ascending class index
  Tensor tie({1, 2}, {0.5, 0.5});
  CHECK(top_k_accuracy(tie, {0}, 1) == 1.0);
  CHECK(top_k_accuracy(tie, {1}, 1) == 0.0);
  CHECK_THROWS_AS(top_k_accuracy(s, truth, 5), std::invalid_argument);
  CHECK_THROWS_AS(top_k_accuracy(s, truth, 0), std::invalid_argument);
  CHECK_THROWS_AS(top_k_accuracy(s, {0, 1}, 1), std::invalid_argument);
  CHECK_THROWS_AS(top_k_accuracy(s, {0, 0, 9}, 1), std::invalid_argument);
}

TEST_CASE("top_k_hit_rate coincides with top_k_accuracy on single-positive rows") {
  Rng rng(505);
  for (int t = 0; t < 40; ++t) {
    Tensor scores({5, 6});
    for (double& v : scores.vec()) v = rng.uniform01();
    std::vector<std::size_t> truth(5);
    std::vector<std::uint8_t> labels(30, 0);
    for (std::size_t i = 0; i < 5; ++i) {
      truth[i] = rng.bounded(6);
      labels[i * 6 + truth[i]] = 1;
    }
    for (std::size_t k = 1; k <= 6; ++k)
      CHECK(top_k_hit_rate(scores, labels, k) == top_k_accuracy(scores, truth, k));
  }
  // multi-positive row: any positive in the top k counts
  Tensor s({1, 3}, {0.9, 0.5, 0.1});
  CHECK(top_k_hit_rate(s, {0, 1, 1}, 1) == 0.0);
  CHECK(top_k_hit_rate(s, {0, 1, 1}, 2) == 1.0);
}

TEST_CASE("report serialization") {
  MetricsReport r;
  r.method = "cams";
  r.seed = 3;
  r.config_hash = 0xDEADBEEFull;
  r.per_class_ap = {0.5, std::nullopt, 1.0};
  r.map = 0.75;
  r.top1 = 0.9;
  r.n_eval = 500;
  r.wall_time_s = 1.25;

  nlohmann::json j = report_to_json(r);
  CHECK(j["method"] == "cams");
  CHECK(j["seed"] == 3);
  CHECK(j["config_hash"] == "00000000deadbeef");
  CHECK(j["per_class_ap"].size() == 3);
  CHECK(j["per_class_ap"][0] == 0.5);
  CHECK(j["per_class_ap"][1].is_null());
  CHECK(j["map"] == 0.75);
  CHECK(j["top1"] == 0.9);
  CHECK(j["top5"].is_null());
  CHECK(j["n_eval"] == 500);
  CHECK(j["wall_time_s"] == 1.25);

  CHECK(report_csv_header() == "method,seed,map,top1,top5,wall_time_s,config_hash\n");
  CHECK(report_csv_row(r) == "cams,3,0.75,0.9,,1.25,00000000deadbeef\n");
  // serialization is deterministic
  CHECK(report_csv_row(r) == report_csv_row(r));
  CHECK(j.dump() == report_to_json(r).dump());
}
