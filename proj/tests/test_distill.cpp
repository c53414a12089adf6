#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mlkd/distill.hpp"
#include "mlkd/gradsuite.hpp"
#include "mlkd/model.hpp"
#include "mlkd/rng.hpp"
#include "mlkd/tensor.hpp"

using namespace mlkd;

namespace {

Tensor rand_tensor(Rng& rng, std::vector<std::size_t> shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

ChannelAdapter identity_adapter(std::size_t c) { return make_adapter(c, c, 0); }

double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace

TEST_CASE("method parsing, names, default lambdas") {
  CHECK(parse_method("none").kind == MethodKind::None);
  CHECK(parse_method("none").lambda == 0.0);
  CHECK(parse_method("soft_target").lambda == 1.0);
  CHECK(parse_method("hard_target").kind == MethodKind::HardTarget);
  CHECK(parse_method("hard_target").lambda == 0.0);
  CHECK(parse_method("feature").lambda == 10.0);
  CHECK(parse_method("feature_maps").lambda == 10.0);
  CHECK(parse_method("attention_map").lambda == 100.0);
  CHECK(parse_method("cams").use_teacher_prob);
  CHECK(parse_method("cams").lambda == 10.0);
  CHECK_FALSE(parse_method("cams_noprob").use_teacher_prob);
  CHECK(parse_method("cams_noprob").name() == "cams_noprob");
  CHECK(parse_method("cams").name() == "cams");
  CHECK_THROWS_AS(parse_method("gradient_clone"), std::invalid_argument);
  CHECK_FALSE(parse_method("none").has_distill_term());
  CHECK_FALSE(parse_method("hard_target").has_distill_term());
  CHECK(parse_method("cams").has_distill_term());
  CHECK(parse_method("feature").needs_adapter());
  CHECK(parse_method("feature_maps").needs_adapter());
  CHECK_FALSE(parse_method("cams").needs_adapter());
}

TEST_CASE("adapter construction") {
  ChannelAdapter sq = make_adapter(4, 4, 9);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(sq.A.at(i, j) == (i == j ? 1.0 : 0.0));
  ChannelAdapter rect = make_adapter(3, 7, 9);
  CHECK(rect.A.shape() == std::vector<std::size_t>{3, 7});
  ChannelAdapter rect2 = make_adapter(3, 7, 9);
  bool same = true;
  for (std::size_t i = 0; i < rect.A.size(); ++i) same = same && rect.A[i] == rect2.A[i];
  CHECK(same);
}

TEST_CASE("bce_classification_loss frozen values") {
  CHECK(bce_classification_loss(Tensor({1}, {0.9}), {1}).item() ==
        doctest::Approx(0.10536).epsilon(1e-4));
  CHECK(bce_classification_loss(Tensor({3}, {0.5, 0.5, 0.5}), {1, 0, 1}).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  // perfect prediction hits the clamp boundary
  double near = bce_classification_loss(Tensor({2}, {1.0, 0.0}), {1, 0}).item();
  CHECK(near > 0.0);
  CHECK(near <= 2e-7);
  CHECK_THROWS_AS(bce_classification_loss(Tensor({3}), {1, 0}), std::invalid_argument);
  // mean over classes
  CHECK(bce_classification_loss(Tensor({2}, {0.9, 0.5}), {1, 0}).item() ==
        doctest::Approx((-std::log(0.9) + std::log(2.0)) / 2.0).epsilon(1e-12));
}

TEST_CASE("kd_soft_target_loss frozen values") {
  Tensor z({4}, {0.3, -1.2, 2.0, 0.0});
  CHECK(kd_soft_target_loss(z, z, 1.0).item() == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(kd_soft_target_loss(z, z, 3.0).item() == doctest::Approx(0.0).epsilon(1e-15));

  // T=0.9, S=0.5, tau=1, K=1 -> 0.9 ln(1.8) + 0.1 ln(0.2)
  Tensor zt({1}, {logit(0.9)});
  Tensor zs({1}, {0.0});
  CHECK(kd_soft_target_loss(zt, zs, 1.0).item() == doctest::Approx(0.36806).epsilon(1e-4));

  // tau^2 prefactor with consistent softening: same logits at tau=2
  double l2 = kd_soft_target_loss(zt, zs, 2.0).item();
  double t2 = 1.0 / (1.0 + std::exp(-logit(0.9) / 2.0));
  double expect = 4.0 * (t2 * std::log(t2 / 0.5) + (1.0 - t2) * std::log((1.0 - t2) / 0.5));
  CHECK(l2 == doctest::Approx(expect).epsilon(1e-12));

  CHECK_THROWS_AS(kd_soft_target_loss(zt, zs, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(kd_soft_target_loss(zt, zs, -2.0), std::invalid_argument);
  CHECK_THROWS_AS(kd_soft_target_loss(Tensor({2}), Tensor({3}), 1.0), std::invalid_argument);

  // nonnegative on random instances, zero only at equality
  Rng rng(55);
  for (int i = 0; i < 50; ++i) {
    Tensor a = rand_tensor(rng, {6}, -4, 4);
    Tensor b = rand_tensor(rng, {6}, -4, 4);
    double v = kd_soft_target_loss(a, b, rng.uniform(0.5, 4.0)).item();
    CHECK(v > 0.0);
  }
}

TEST_CASE("feature_loss frozen values") {
  Tensor f({2}, {0.4, -0.7});
  CHECK(feature_loss(f, f, identity_adapter(2)).item() == 0.0);
  CHECK(feature_loss(Tensor({2}, {1.0, 0.0}), Tensor({2}, {0.0, 0.0}), identity_adapter(2)).item() ==
        doctest::Approx(0.5).epsilon(1e-12));
  ChannelAdapter bad = make_adapter(3, 4, 1);
  CHECK_THROWS_AS(feature_loss(Tensor({4}), Tensor({2}), bad), std::invalid_argument);
  CHECK_THROWS_AS(feature_loss(Tensor({5}), Tensor({3}), bad), std::invalid_argument);
}

TEST_CASE("feature_maps_loss frozen values and brute-force oracle") {
  Rng rng(77);
  Tensor x = rand_tensor(rng, {4, 3}, -1, 1);
  CHECK(feature_maps_loss(x, x, identity_adapter(3)).item() == 0.0);

  // constant offset c -> c^2
  Tensor shifted = add(x, 0.3);
  CHECK(feature_maps_loss(shifted, x, identity_adapter(3)).item() ==
        doctest::Approx(0.09).epsilon(1e-12));

  // brute-force oracle with a rectangular adapter
  ChannelAdapter ad = make_adapter(3, 5, 13);
  Tensor xt = rand_tensor(rng, {4, 5}, -1, 1);
  double loss = feature_maps_loss(xt, x, ad).item();
  double acc = 0.0;
  for (std::size_t s = 0; s < 4; ++s)
    for (std::size_t ct = 0; ct < 5; ++ct) {
      double adapted = 0.0;
      for (std::size_t cs = 0; cs < 3; ++cs) adapted += x.at(s, cs) * ad.A.at(cs, ct);
      double d = adapted - xt.at(s, ct);
      acc += d * d;
    }
  CHECK(loss == doctest::Approx(acc / 20.0).epsilon(1e-12));

  CHECK_THROWS_AS(feature_maps_loss(Tensor({5, 3}), Tensor({4, 3}), identity_adapter(3)),
                  std::invalid_argument);
}

TEST_CASE("attention_loss frozen values") {
  Tensor a({2}, {5.0, 0.0});
  Tensor b({2}, {0.0, 3.0});
  // normalized to [1,0] vs [0,1]
  CHECK(attention_loss(a, b).item() == doctest::Approx(1.0).epsilon(1e-12));

  Tensor t({3}, {1.0, 2.0, 3.0});
  CHECK(attention_loss(t, t).item() == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(attention_loss(t, mul(t, 7.5)).item() == doctest::Approx(0.0).epsilon(1e-15));

  // zero maps to zero on either side
  Tensor zero({3});
  CHECK(attention_loss(zero, zero).item() == 0.0);
  CHECK(attention_loss(t, zero).item() == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  CHECK_THROWS_AS(attention_loss(Tensor({3}), Tensor({4})), std::invalid_argument);
}

TEST_CASE("cams_loss frozen values") {
  Tensor mt({2, 1}, {1.0, 0.0});
  Tensor ms({2, 1}, {0.0, 0.0});
  Tensor p({2}, {0.5, 0.9});
  CHECK(cams_loss(mt, ms, p, true).item() == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(cams_loss(mt, mt, p, true).item() == 0.0);
  CHECK(cams_loss(mt, ms, Tensor({2}), true).item() == 0.0);  // zero weights annihilate

  // w/o teacher-prob equals the brute-force per-class MSE sum
  Rng rng(31);
  Tensor a = rand_tensor(rng, {4, 6}, -2, 2);
  Tensor b = rand_tensor(rng, {4, 6}, -2, 2);
  double loss = cams_loss(a, b, rand_tensor(rng, {4}, 0.1, 0.9), false).item();
  double acc = 0.0;
  for (std::size_t k = 0; k < 4; ++k) {
    double m = 0.0;
    for (std::size_t s = 0; s < 6; ++s) {
      double d = a.at(k, s) - b.at(k, s);
      m += d * d;
    }
    acc += m / 6.0;
  }
  CHECK(loss == doctest::Approx(acc).epsilon(1e-12));

  CHECK_THROWS_AS(cams_loss(Tensor({2, 3}), Tensor({2, 4}), Tensor({2}), true), std::invalid_argument);
  CHECK_THROWS_AS(cams_loss(Tensor({2, 3}), Tensor({2, 3}), Tensor({3}), true), std::invalid_argument);
}

TEST_CASE("build_hard_targets") {
  Tensor p({3}, {0.9, 0.3, 0.8});
  CHECK(build_hard_targets({1, 0, 0}, p, 0.75) == std::vector<std::uint8_t>{1, 0, 1});
  CHECK(build_hard_targets({0, 0, 0}, Tensor({3}, {0.1, 0.2, 0.3}), 0.75) ==
        std::vector<std::uint8_t>{0, 0, 0});
  CHECK(build_hard_targets({1, 1, 1}, Tensor({3}, {0.0, 0.0, 0.0}), 0.75) ==
        std::vector<std::uint8_t>{1, 1, 1});
  // threshold boundary is inclusive
  CHECK(build_hard_targets({0, 0, 0}, Tensor({3}, {0.75, 0.74, 0.76}), 0.75) ==
        std::vector<std::uint8_t>{1, 0, 1});
  // monotone in threshold: lower threshold keeps a superset
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    Tensor probs = rand_tensor(rng, {6}, 0.0, 1.0);
    std::vector<std::uint8_t> y(6, 0);
    y[rng.bounded(6)] = 1;
    auto hi = build_hard_targets(y, probs, 0.8);
    auto lo = build_hard_targets(y, probs, 0.3);
    for (std::size_t i = 0; i < 6; ++i) CHECK(hi[i] <= lo[i]);
  }
  CHECK_THROWS_AS(build_hard_targets({1}, Tensor({1}, {0.5}), 0.0), std::invalid_argument);
  CHECK_THROWS_AS(build_hard_targets({1}, Tensor({1}, {0.5}), 1.0), std::invalid_argument);
  CHECK_THROWS_AS(build_hard_targets({1, 0}, Tensor({1}, {0.5}), 0.5), std::invalid_argument);
}

TEST_CASE("total_loss") {
  Tensor cls = Tensor::scalar(1.0);
  Tensor dst = Tensor::scalar(2.0);
  CHECK(total_loss(cls, dst, 0.5).item() == 2.0);
  CHECK(total_loss(cls, dst, 0.0).item() == 1.0);
  CHECK_THROWS_AS(total_loss(cls, dst, -0.1), std::invalid_argument);

  // lambda = 0 leaves the classification value bit-exact
  Tensor c2 = Tensor::scalar(0.7310585786);
  CHECK(total_loss(c2, Tensor::scalar(123.456), 0.0).item() == 0.7310585786);
}

TEST_CASE("no gradient reaches teacher-side inputs") {
  Rng rng(8);
  Tape tape;
  Tensor zt = rand_tensor(rng, {5}, -2, 2);
  Tensor zs = rand_tensor(rng, {5}, -2, 2);
  Tensor mt = rand_tensor(rng, {5, 4}, -1, 1);
  Tensor ms = rand_tensor(rng, {5, 4}, -1, 1);
  Tensor at = rand_tensor(rng, {4}, 0.1, 1.0);
  Tensor as = rand_tensor(rng, {4}, 0.1, 1.0);
  Tensor pt = rand_tensor(rng, {5}, 0.2, 0.8);
  tape.watch(zt);
  tape.watch(zs);
  tape.watch(mt);
  tape.watch(ms);
  tape.watch(at);
  tape.watch(as);
  tape.watch(pt);

  Tensor loss = kd_soft_target_loss(zt, zs, 2.0);
  loss = add(loss, cams_loss(mt, ms, pt, true));
  loss = add(loss, attention_loss(at, as));
  tape.backward(loss);

  auto all_zero = [](const Tensor& g) {
    for (std::size_t i = 0; i < g.size(); ++i)
      if (g[i] != 0.0) return false;
    return true;
  };
  auto any_nonzero = [&](const Tensor& g) { return !all_zero(g); };
  CHECK(all_zero(zt.grad()));
  CHECK(all_zero(mt.grad()));
  CHECK(all_zero(at.grad()));
  CHECK(all_zero(pt.grad()));
  CHECK(any_nonzero(zs.grad()));
  CHECK(any_nonzero(ms.grad()));
  CHECK(any_nonzero(as.grad()));
}

TEST_CASE("all losses nonnegative and zero on identical knowledge") {
  Rng rng(14);
  for (int i = 0; i < 25; ++i) {
    Tensor z = rand_tensor(rng, {6}, -3, 3);
    Tensor x = rand_tensor(rng, {8, 4}, -1, 1);
    Tensor m = rand_tensor(rng, {6, 8}, -2, 2);
    Tensor a = extract_cams(x, rand_tensor(rng, {4, 6}, -1, 1));
    CHECK(kd_soft_target_loss(z, z, 2.0).item() == doctest::Approx(0.0).epsilon(1e-14));
    CHECK(feature_maps_loss(x, x, identity_adapter(4)).item() == 0.0);
    CHECK(cams_loss(m, m, rand_tensor(rng, {6}, 0, 1), true).item() == 0.0);
    CHECK(cams_loss(a, a, rand_tensor(rng, {6}, 0, 1), false).item() == 0.0);

    Tensor z2 = rand_tensor(rng, {6}, -3, 3);
    Tensor x2 = rand_tensor(rng, {8, 4}, -1, 1);
    CHECK(kd_soft_target_loss(z, z2, 1.5).item() >= 0.0);
    CHECK(feature_maps_loss(x, x2, identity_adapter(4)).item() >= 0.0);
  }
}

TEST_CASE("gradient suite: every loss matches finite differences within 1e-4") {
  auto results = run_gradient_suite();
  CHECK(results.size() >= 10);
  for (const auto& r : results) {
    INFO(r.name, " max rel err ", r.max_rel_err);
    CHECK(r.pass);
    CHECK(r.max_rel_err <= 1e-4);
  }
}
