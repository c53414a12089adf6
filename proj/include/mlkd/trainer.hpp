#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mlkd/distill.hpp"
#include "mlkd/eval.hpp"
#include "mlkd/model.hpp"
#include "mlkd/synthgen.hpp"

namespace mlkd {

struct TrainConfig {
  int epochs = 20;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-2;
  DistillMethod method{};
  int seed = 1;
  std::vector<std::size_t> widths;  // backbone layer widths, last is C

  void validate() const;  // epochs >= 1, lr > 0, batch_size >= 1, widths nonempty
};

// Default desk-scale architectures. The teacher is wide enough to solve the
// synthetic task nearly perfectly; the student is deliberately undersized.
std::vector<std::size_t> teacher_widths();
std::vector<std::size_t> student_widths();

// Optimizer state, lazily shaped on the first step.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  long step = 0;
};

// One Adam update with decoupled weight decay: the decay term scales the
// parameter directly by lr * wd and never enters the moment estimates.
void adam_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
               AdamState& state, double lr, double beta1, double beta2, double weight_decay);

struct StepLog {
  int step = 0;
  int epoch = 0;
  double cls_loss = 0.0;
  double distill_loss = 0.0;
  double total = 0.0;
};

struct TrainResult {
  Model model;
  ChannelAdapter adapter;  // populated only when the method trains one
  MetricsReport report;
  std::vector<StepLog> log;
};

// One JSON object per step, newline-terminated.
std::string steps_jsonl(const std::vector<StepLog>& log);

// Scores every example with a batched forward pass and evaluates the sigmoid
// probabilities against y_full.
MetricsReport evaluate(const Model& model, const std::vector<Example>& examples);

// Supervised baseline training on y_obs of the given split. method must be
// None; the report's method field is stamped "teacher".
TrainResult train_teacher(const TrainConfig& cfg, const Dataset& data);

// Distillation: per step the student forwards a minibatch, per-image losses
// are assembled from cached teacher knowledge, and Adam updates the student
// (plus the channel adapter when the method uses one). The teacher is frozen;
// its parameters never join a tape.
TrainResult train_student(const TrainConfig& cfg, const Model& teacher, const Dataset& data);

}  // namespace mlkd
