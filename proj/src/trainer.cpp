#include "mlkd/trainer.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "mlkd/rng.hpp"

namespace mlkd {

namespace {

constexpr std::uint64_t kShuffleStream = 0x73687566;  // batch order, independent of data seed
constexpr double kAdamEps = 1e-8;

// Everything the distillation losses ever read from the frozen teacher,
// extracted once per image before the epoch loop.
struct TeacherKnowledge {
  Tensor X;  // [HW x C_T]
  Tensor f;  // [C_T]
  Tensor z;  // [K]
  Tensor p;  // [K]
  Tensor a;  // [HW]
  Tensor M;  // [K x HW]
};

std::vector<Tensor> precompute_patches(const std::vector<Example>& examples,
                                       const ModelConfig& cfg) {
  std::vector<Tensor> patches;
  patches.reserve(examples.size());
  for (const Example& ex : examples) patches.push_back(extract_patches(ex.image, cfg));
  return patches;
}

// Batched backbone pass over [n*HW x patch_dim] rows, handed back per image.
// Chunked to bound peak memory; chunking cannot change values because every
// op involved works row by row.
std::vector<Tensor> backbone_per_image(const Model& model, const std::vector<Tensor>& patches,
                                       std::size_t hw) {
  constexpr std::size_t kChunk = 256;
  const std::size_t pd = model.cfg.patch_dim();
  std::vector<Tensor> maps;
  maps.reserve(patches.size());
  for (std::size_t begin = 0; begin < patches.size(); begin += kChunk) {
    const std::size_t n = std::min(kChunk, patches.size() - begin);
    Tensor rows({n * hw, pd});
    for (std::size_t i = 0; i < n; ++i)
      std::copy(patches[begin + i].data(), patches[begin + i].data() + hw * pd,
                rows.data() + i * hw * pd);
    Tensor x = backbone_apply(model, rows);
    for (std::size_t i = 0; i < n; ++i) maps.push_back(slice_rows(x, i * hw, hw));
  }
  return maps;
}

Tensor image_logits(const Model& model, const Tensor& x) {
  Tensor f = mean(x, 0);
  Tensor z = matmul(reshape(f, {1, model.cfg.channels()}), model.head_W);
  return add(reshape(z, {model.cfg.num_classes}), model.head_b);
}

std::vector<TeacherKnowledge> cache_teacher_knowledge(const Model& teacher,
                                                      const std::vector<Tensor>& patches) {
  std::vector<Tensor> maps = backbone_per_image(teacher, patches, teacher.cfg.spatial());
  std::vector<TeacherKnowledge> cache;
  cache.reserve(maps.size());
  for (Tensor& x : maps) {
    TeacherKnowledge tk;
    tk.X = std::move(x);
    tk.f = mean(tk.X, 0);
    tk.z = image_logits(teacher, tk.X);
    tk.p = sigmoid(tk.z);
    tk.a = extract_attention(tk.X);
    tk.M = extract_cams(tk.X, teacher.head_W);
    cache.push_back(std::move(tk));
  }
  return cache;
}

struct BatchLoss {
  Tensor cls;
  Tensor distill;  // scalar 0 for methods without a distill term
  Tensor total;
};

// Core loop shared by teacher and student runs. teacher/knowledge are null
// for plain supervised training.
TrainResult run_training(const TrainConfig& cfg, const Dataset& data, const Model* teacher) {
  cfg.validate();
  const DistillMethod& method = cfg.method;
  const std::size_t k = data.spec.num_classes;

  ModelConfig mc;
  mc.grid_rows = data.spec.grid_rows;
  mc.grid_cols = data.spec.grid_cols;
  mc.cell_px = data.spec.cell_px;
  mc.widths = cfg.widths;
  mc.num_classes = k;

  TrainResult result;
  result.model = make_model(mc, static_cast<std::uint64_t>(cfg.seed));
  Model& model = result.model;
  const std::size_t hw = mc.spatial();

  std::vector<Tensor> patches = precompute_patches(data.train, mc);

  if (!teacher && method.kind != MethodKind::None)
    throw std::invalid_argument("trainer: method " + method.name() + " requires a teacher");

  std::vector<TeacherKnowledge> knowledge;
  std::vector<std::vector<std::uint8_t>> hard_targets;
  if (teacher) {
    if (teacher->cfg.grid_rows != mc.grid_rows || teacher->cfg.grid_cols != mc.grid_cols ||
        teacher->cfg.cell_px != mc.cell_px || teacher->cfg.num_classes != k)
      throw std::invalid_argument("train_student: teacher geometry does not match the dataset");
    if (method.has_distill_term() || method.kind == MethodKind::HardTarget) {
      knowledge = cache_teacher_knowledge(*teacher, patches);
      if (method.kind == MethodKind::HardTarget) {
        hard_targets.reserve(knowledge.size());
        for (std::size_t i = 0; i < knowledge.size(); ++i)
          hard_targets.push_back(
              build_hard_targets(data.train[i].y_obs, knowledge[i].p, method.threshold));
      }
    }
  }

  if (method.needs_adapter())
    result.adapter =
        make_adapter(mc.channels(), teacher->cfg.channels(), static_cast<std::uint64_t>(cfg.seed));

  std::vector<Tensor*> params = model.params();
  if (method.needs_adapter()) params.push_back(&result.adapter.A);

  AdamState state;
  Rng shuffle_rng(mix_seed(static_cast<std::uint64_t>(cfg.seed), kShuffleStream));
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  const std::size_t pd = mc.patch_dim();
  int global_step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::size_t j = shuffle_rng.bounded(i);
      std::swap(order[i - 1], order[j]);
    }
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t b = std::min(cfg.batch_size, order.size() - begin);
      Tape tape;
      for (Tensor* p : params) tape.watch(*p);

      Tensor rows({b * hw, pd});
      for (std::size_t i = 0; i < b; ++i)
        std::copy(patches[order[begin + i]].data(), patches[order[begin + i]].data() + hw * pd,
                  rows.data() + i * hw * pd);
      Tensor xb = backbone_apply(model, rows);

      Tensor cls_sum = Tensor::scalar(0.0);
      Tensor distill_sum = Tensor::scalar(0.0);
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t idx = order[begin + i];
        Tensor xi = slice_rows(xb, i * hw, hw);
        Tensor zi = image_logits(model, xi);
        Tensor pi = sigmoid(zi);

        const std::vector<std::uint8_t>& supervision =
            method.kind == MethodKind::HardTarget ? hard_targets[idx] : data.train[idx].y_obs;
        cls_sum = add(cls_sum, bce_classification_loss(pi, supervision));

        if (method.has_distill_term()) {
          const TeacherKnowledge& tk = knowledge[idx];
          Tensor di;
          switch (method.kind) {
            case MethodKind::SoftTarget:
              di = kd_soft_target_loss(tk.z, zi, method.tau);
              break;
            case MethodKind::Feature:
              di = feature_loss(tk.f, mean(xi, 0), result.adapter);
              break;
            case MethodKind::FeatureMaps:
              di = feature_maps_loss(tk.X, xi, result.adapter);
              break;
            case MethodKind::AttentionMap:
              di = attention_loss(tk.a, extract_attention(xi));
              break;
            case MethodKind::CAMs:
              di = cams_loss(tk.M, extract_cams(xi, model.head_W), tk.p, method.use_teacher_prob);
              break;
            default:
              break;
          }
          distill_sum = add(distill_sum, di);
        }
      }

      const double inv_b = 1.0 / static_cast<double>(b);
      Tensor cls = mul(cls_sum, inv_b);
      Tensor total = cls;
      double distill_val = 0.0;
      if (method.has_distill_term()) {
        Tensor distill = mul(distill_sum, inv_b);
        distill_val = distill.item();
        total = total_loss(cls, distill, method.lambda);
      }

      const double cls_val = cls.item();
      const double total_val = total.item();
      if (!std::isfinite(cls_val) || !std::isfinite(distill_val) || !std::isfinite(total_val))
        throw std::runtime_error(
            "trainer: non-finite loss at epoch " + std::to_string(epoch) + " batch " +
            std::to_string(begin / cfg.batch_size) + " (cls=" + std::to_string(cls_val) +
            ", distill=" + std::to_string(distill_val) + ", total=" + std::to_string(total_val) +
            ")");

      tape.backward(total);

      std::vector<const Tensor*> grads;
      std::vector<Tensor> grad_hold;
      grads.reserve(params.size());
      grad_hold.reserve(params.size());
      for (Tensor* p : params) grad_hold.push_back(p->grad());
      for (const Tensor& g : grad_hold) grads.push_back(&g);
      adam_step(params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
      for (Tensor* p : params) {
        p->detach();
        p->zero_grad();
      }

      ++global_step;
      result.log.push_back({global_step, epoch, cls_val, distill_val, total_val});
    }
  }

  result.report = evaluate(model, data.val);
  result.report.method = teacher ? method.name() : "teacher";
  result.report.seed = cfg.seed;
  return result;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("trainer: epochs must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("trainer: lr must be positive");
  if (batch_size < 1) throw std::invalid_argument("trainer: batch_size must be >= 1");
  if (widths.empty()) throw std::invalid_argument("trainer: widths must be nonempty");
}

std::vector<std::size_t> teacher_widths() { return {64, 128, 64}; }
std::vector<std::size_t> student_widths() { return {32, 16}; }

void adam_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
               AdamState& state, double lr, double beta1, double beta2, double weight_decay) {
  if (params.size() != grads.size())
    throw std::invalid_argument("adam_step: params and grads differ in count");
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i]->size(), 0.0);
      state.v[i].assign(params[i]->size(), 0.0);
    }
  }
  if (state.m.size() != params.size())
    throw std::invalid_argument("adam_step: state does not match param count");

  state.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    if (p.size() != g.size() || p.size() != state.m[i].size())
      throw std::invalid_argument("adam_step: shape mismatch at param " + std::to_string(i));
    double* pv = p.data();
    const double* gv = g.data();
    std::vector<double>& m = state.m[i];
    std::vector<double>& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (!std::isfinite(gv[j]))
        throw std::runtime_error("adam_step: non-finite gradient at param " + std::to_string(i));
      m[j] = beta1 * m[j] + (1.0 - beta1) * gv[j];
      v[j] = beta2 * v[j] + (1.0 - beta2) * gv[j] * gv[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      pv[j] -= lr * weight_decay * pv[j];
      pv[j] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
    }
  }
}

MetricsReport evaluate(const Model& model, const std::vector<Example>& examples) {
  if (examples.empty()) throw std::invalid_argument("evaluate: empty example set");
  const std::size_t k = model.cfg.num_classes;
  const std::size_t hw = model.cfg.spatial();
  std::vector<Tensor> patches = precompute_patches(examples, model.cfg);
  std::vector<Tensor> maps = backbone_per_image(model, patches, hw);

  Tensor scores({examples.size(), k});
  std::vector<std::uint8_t> labels(examples.size() * k);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    Tensor p = sigmoid(image_logits(model, maps[i]));
    std::copy(p.data(), p.data() + k, scores.data() + i * k);
    for (std::size_t c = 0; c < k; ++c) labels[i * k + c] = examples[i].y_full[c];
  }
  return mean_average_precision(scores, labels);
}

TrainResult train_teacher(const TrainConfig& cfg, const Dataset& data) {
  if (cfg.method.kind != MethodKind::None)
    throw std::invalid_argument("train_teacher: method must be none");
  return run_training(cfg, data, nullptr);
}

TrainResult train_student(const TrainConfig& cfg, const Model& teacher, const Dataset& data) {
  return run_training(cfg, data, &teacher);
}

std::string steps_jsonl(const std::vector<StepLog>& log) {
  std::string out;
  for (const StepLog& s : log) {
    nlohmann::json j;
    j["step"] = s.step;
    j["epoch"] = s.epoch;
    j["cls"] = s.cls_loss;
    j["distill"] = s.distill_loss;
    j["total"] = s.total;
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace mlkd
