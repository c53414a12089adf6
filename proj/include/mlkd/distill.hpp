#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mlkd/tensor.hpp"

namespace mlkd {

// Which knowledge the student matches. HardTarget carries no distill term: it
// rewrites the supervision instead.
enum class MethodKind { None, SoftTarget, HardTarget, Feature, FeatureMaps, AttentionMap, CAMs };

struct DistillMethod {
  MethodKind kind = MethodKind::None;
  double lambda = 0.0;
  double tau = 2.0;            // SoftTarget softening temperature
  double threshold = 0.75;     // HardTarget pseudo-label cutoff
  bool use_teacher_prob = true;  // CAMs re-weighting by teacher probability

  bool needs_adapter() const {
    return kind == MethodKind::Feature || kind == MethodKind::FeatureMaps;
  }
  bool has_distill_term() const {
    return kind != MethodKind::None && kind != MethodKind::HardTarget;
  }
  std::string name() const;
};

// Accepted names: none, soft_target, hard_target, feature, feature_maps,
// attention_map, cams, cams_noprob. Fills in the per-method default lambda.
DistillMethod parse_method(const std::string& name);
double default_lambda(MethodKind kind);

// Learned linear map from student channels onto teacher channels, trained
// jointly with the student. Identity-initialized when widths already agree.
struct ChannelAdapter {
  Tensor A;  // [C_student x C_teacher]
};
ChannelAdapter make_adapter(std::size_t c_student, std::size_t c_teacher, std::uint64_t seed);

// Classification loss: mean over entries of the binary cross-entropy against
// y, with probabilities clamped to [1e-7, 1-1e-7]. p may be [K] or [N x K]
// with y flattened row-major to match.
Tensor bce_classification_loss(const Tensor& p, const std::vector<std::uint8_t>& y);

// tau^2 * sum over classes of the Bernoulli KL between teacher and student
// sigmoid(z/tau). Teacher side is treated as a constant. Accepts stacked
// [N x K] logits (sums over every entry).
Tensor kd_soft_target_loss(const Tensor& z_teacher, const Tensor& z_student, double tau);

// Mean squared error between the teacher feature and the adapter-mapped
// student feature. Accepts [C] vectors or [N x C] stacks.
Tensor feature_loss(const Tensor& f_teacher, const Tensor& f_student, const ChannelAdapter& adapter);

// Mean squared error over all spatial positions and teacher channels between
// the teacher maps and the adapter-mapped student maps.
Tensor feature_maps_loss(const Tensor& x_teacher, const Tensor& x_student, const ChannelAdapter& adapter);

// Mean squared error between L2-normalized attention vectors. A zero vector
// normalizes to the zero vector.
Tensor attention_loss(const Tensor& a_teacher, const Tensor& a_student);

// Sum over classes of w_k * mean_spatial((M_T[k] - M_S[k])^2) with w_k the
// teacher probability when use_teacher_prob, else 1.
Tensor cams_loss(const Tensor& m_teacher, const Tensor& m_student, const Tensor& p_teacher,
                 bool use_teacher_prob);

// Union of observed positives with teacher predictions at or above threshold.
std::vector<std::uint8_t> build_hard_targets(const std::vector<std::uint8_t>& y_obs,
                                             const Tensor& p_teacher, double threshold);

// cls + lambda * distill.
Tensor total_loss(const Tensor& cls, const Tensor& distill, double lambda);

}  // namespace mlkd
