#include "mlkd/distill.hpp"

#include <cmath>
#include <stdexcept>

#include "mlkd/rng.hpp"

namespace mlkd {

namespace {

constexpr double kProbEps = 1e-7;
constexpr std::uint64_t kAdapterStream = 0x61646170;

// Teacher-side knowledge never receives gradients: strip tape linkage by
// copying values into a fresh constant.
Tensor detached(const Tensor& t) { return t.on_tape() ? Tensor(t.shape(), t.vec()) : t; }

double xlogy(double x, double y) { return x == 0.0 ? 0.0 : x * std::log(y); }

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()) + " disagree");
}

}  // namespace

std::string DistillMethod::name() const {
  switch (kind) {
    case MethodKind::None: return "none";
    case MethodKind::SoftTarget: return "soft_target";
    case MethodKind::HardTarget: return "hard_target";
    case MethodKind::Feature: return "feature";
    case MethodKind::FeatureMaps: return "feature_maps";
    case MethodKind::AttentionMap: return "attention_map";
    case MethodKind::CAMs: return use_teacher_prob ? "cams" : "cams_noprob";
  }
  return "?";
}

double default_lambda(MethodKind kind) {
  switch (kind) {
    case MethodKind::SoftTarget: return 1.0;
    case MethodKind::Feature: return 10.0;
    case MethodKind::FeatureMaps: return 10.0;
    case MethodKind::AttentionMap: return 100.0;
    case MethodKind::CAMs: return 10.0;
    default: return 0.0;
  }
}

DistillMethod parse_method(const std::string& name) {
  DistillMethod m;
  if (name == "none") m.kind = MethodKind::None;
  else if (name == "soft_target") m.kind = MethodKind::SoftTarget;
  else if (name == "hard_target") m.kind = MethodKind::HardTarget;
  else if (name == "feature") m.kind = MethodKind::Feature;
  else if (name == "feature_maps") m.kind = MethodKind::FeatureMaps;
  else if (name == "attention_map") m.kind = MethodKind::AttentionMap;
  else if (name == "cams") m.kind = MethodKind::CAMs;
  else if (name == "cams_noprob") {
    m.kind = MethodKind::CAMs;
    m.use_teacher_prob = false;
  } else {
    throw std::invalid_argument(
        "unknown method '" + name +
        "' (expected none, soft_target, hard_target, feature, feature_maps, attention_map, cams, "
        "cams_noprob)");
  }
  m.lambda = default_lambda(m.kind);
  return m;
}

ChannelAdapter make_adapter(std::size_t c_student, std::size_t c_teacher, std::uint64_t seed) {
  if (c_student == 0 || c_teacher == 0)
    throw std::invalid_argument("make_adapter: channel counts must be positive");
  ChannelAdapter ad;
  ad.A = Tensor({c_student, c_teacher});
  if (c_student == c_teacher) {
    for (std::size_t i = 0; i < c_student; ++i) ad.A.at(i, i) = 1.0;
  } else {
    Rng rng(mix_seed(seed, kAdapterStream));
    double scale = std::sqrt(1.0 / static_cast<double>(c_student));
    for (double& v : ad.A.vec()) v = scale * rng.normal();
  }
  return ad;
}

Tensor bce_classification_loss(const Tensor& p, const std::vector<std::uint8_t>& y) {
  if (p.size() != y.size())
    throw std::invalid_argument("bce_classification_loss: " + std::to_string(p.size()) +
                                " probabilities vs " + std::to_string(y.size()) + " labels");
  std::vector<double> yv(y.size()), nyv(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    yv[i] = y[i] ? 1.0 : 0.0;
    nyv[i] = 1.0 - yv[i];
  }
  Tensor yt(p.shape(), std::move(yv));
  Tensor nyt(p.shape(), std::move(nyv));
  Tensor pc = clamp(p, kProbEps, 1.0 - kProbEps);
  Tensor ll = add(mul(yt, log(pc)), mul(nyt, log(sub(Tensor::scalar(1.0), pc))));
  return neg(mean(ll));
}

Tensor kd_soft_target_loss(const Tensor& z_teacher, const Tensor& z_student, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("kd_soft_target_loss: tau must be positive");
  require_same_shape("kd_soft_target_loss", z_teacher, z_student);
  Tensor t_soft = sigmoid(mul(detached(z_teacher), 1.0 / tau));  // constant
  double const_part = 0.0;
  std::vector<double> tv(t_soft.size()), ntv(t_soft.size());
  for (std::size_t i = 0; i < t_soft.size(); ++i) {
    double t = t_soft[i];
    tv[i] = t;
    ntv[i] = 1.0 - t;
    const_part += xlogy(t, t) + xlogy(1.0 - t, 1.0 - t);
  }
  Tensor tt(z_teacher.shape(), std::move(tv));
  Tensor ntt(z_teacher.shape(), std::move(ntv));
  Tensor s = clamp(sigmoid(mul(z_student, 1.0 / tau)), kProbEps, 1.0 - kProbEps);
  Tensor cross = sum(add(mul(tt, log(s)), mul(ntt, log(sub(Tensor::scalar(1.0), s)))));
  return mul(sub(Tensor::scalar(const_part), cross), tau * tau);
}

namespace {

// adapter(rows) for [*, C_S] student rows; 1-D inputs are lifted to one row.
Tensor adapt_rows(const char* op, const Tensor& student, const ChannelAdapter& adapter) {
  if (adapter.A.ndim() != 2) throw std::invalid_argument(std::string(op) + ": adapter must be 2-D");
  Tensor rows = student.ndim() == 1 ? reshape(student, {1, student.size()}) : student;
  if (rows.ndim() != 2 || rows.shape()[1] != adapter.A.shape()[0])
    throw std::invalid_argument(std::string(op) + ": student channels " + shape_str(student.shape()) +
                                " do not match adapter " + shape_str(adapter.A.shape()));
  return matmul(rows, adapter.A);
}

}  // namespace

Tensor feature_loss(const Tensor& f_teacher, const Tensor& f_student, const ChannelAdapter& adapter) {
  Tensor adapted = adapt_rows("feature_loss", f_student, adapter);
  Tensor target = detached(f_teacher);
  if (target.ndim() == 1) target = reshape(target, {1, target.size()});
  if (target.shape() != adapted.shape())
    throw std::invalid_argument("feature_loss: teacher " + shape_str(f_teacher.shape()) +
                                " vs adapted student " + shape_str(adapted.shape()));
  return mean(square(sub(adapted, target)));
}

Tensor feature_maps_loss(const Tensor& x_teacher, const Tensor& x_student, const ChannelAdapter& adapter) {
  if (x_teacher.ndim() != 2 || x_student.ndim() != 2)
    throw std::invalid_argument("feature_maps_loss: expected [HW,C] maps");
  if (x_teacher.shape()[0] != x_student.shape()[0])
    throw std::invalid_argument("feature_maps_loss: spatial sizes disagree, " +
                                shape_str(x_teacher.shape()) + " vs " + shape_str(x_student.shape()));
  Tensor adapted = adapt_rows("feature_maps_loss", x_student, adapter);
  Tensor target = detached(x_teacher);
  if (target.shape() != adapted.shape())
    throw std::invalid_argument("feature_maps_loss: teacher channels " + shape_str(x_teacher.shape()) +
                                " vs adapted student " + shape_str(adapted.shape()));
  return mean(square(sub(adapted, target)));
}

Tensor attention_loss(const Tensor& a_teacher, const Tensor& a_student) {
  require_same_shape("attention_loss", a_teacher, a_student);
  Tensor target = detached(a_teacher);
  double tn = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) tn += target[i] * target[i];
  tn = std::sqrt(tn);
  std::vector<double> tv(target.size(), 0.0);
  if (tn > 0.0)
    for (std::size_t i = 0; i < target.size(); ++i) tv[i] = target[i] / tn;
  Tensor t_hat(target.shape(), std::move(tv));

  Tensor ns = sum(square(a_student));
  Tensor s_hat = ns.item() == 0.0 ? mul(a_student, 0.0) : div(a_student, sqrt(ns));
  return mean(square(sub(s_hat, t_hat)));
}

Tensor cams_loss(const Tensor& m_teacher, const Tensor& m_student, const Tensor& p_teacher,
                 bool use_teacher_prob) {
  require_same_shape("cams_loss", m_teacher, m_student);
  if (m_teacher.ndim() != 2)
    throw std::invalid_argument("cams_loss: expected [K,HW] maps, got " + shape_str(m_teacher.shape()));
  std::size_t k = m_teacher.shape()[0];
  if (p_teacher.size() != k)
    throw std::invalid_argument("cams_loss: " + std::to_string(k) + " classes but " +
                                std::to_string(p_teacher.size()) + " probabilities");
  Tensor per_class = mean(square(sub(m_student, detached(m_teacher))), 1);  // [K]
  std::vector<double> w(k, 1.0);
  if (use_teacher_prob) {
    Tensor p = detached(p_teacher);
    for (std::size_t i = 0; i < k; ++i) w[i] = p[i];
  }
  return sum(mul(per_class, Tensor({k}, std::move(w))));
}

std::vector<std::uint8_t> build_hard_targets(const std::vector<std::uint8_t>& y_obs,
                                             const Tensor& p_teacher, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw std::invalid_argument("build_hard_targets: threshold must lie in (0,1)");
  if (p_teacher.size() != y_obs.size())
    throw std::invalid_argument("build_hard_targets: label/probability length mismatch");
  std::vector<std::uint8_t> out(y_obs.size());
  for (std::size_t i = 0; i < y_obs.size(); ++i)
    out[i] = (y_obs[i] || p_teacher[i] >= threshold) ? 1 : 0;
  return out;
}

Tensor total_loss(const Tensor& cls, const Tensor& distill, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("total_loss: lambda must be >= 0");
  return add(cls, mul(distill, lambda));
}

}  // namespace mlkd
