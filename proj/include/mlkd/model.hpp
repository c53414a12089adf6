#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mlkd/tensor.hpp"

namespace mlkd {

// Backbone geometry plus classifier width. The backbone is a per-patch dense
// embedder: every grid cell's pixels are flattened and pushed through the
// same relu MLP, yielding feature maps X of shape [HW x C] with HW the cell
// count and C = widths.back().
struct ModelConfig {
  std::size_t grid_rows = 4;
  std::size_t grid_cols = 4;
  std::size_t cell_px = 8;
  std::vector<std::size_t> widths;  // layer output widths, last entry is C
  std::size_t num_classes = 6;

  std::size_t spatial() const { return grid_rows * grid_cols; }
  std::size_t patch_dim() const { return cell_px * cell_px; }
  std::size_t channels() const { return widths.back(); }
};

struct DenseLayer {
  Tensor W;  // [in x out]
  Tensor b;  // [out]
};

struct Model {
  ModelConfig cfg;
  std::vector<DenseLayer> layers;
  Tensor head_W;  // [C x K]; column k is the class-k direction for logits and CAM_k
  Tensor head_b;  // [K]

  // Fixed parameter order; the optimizer state and checkpoints key off it.
  std::vector<Tensor*> params();
  std::vector<const Tensor*> params() const;
};

// One input's extracted knowledge. All fields stay on the tape when the model
// parameters are watched, so losses built from them backpropagate.
struct KnowledgeBundle {
  Tensor X;     // feature maps [HW x C]
  Tensor f;     // pooled feature [C] (spatial mean of X)
  Tensor z;     // logits [K] = W^T f + b
  Tensor p;     // sigmoid(z), independent per-class probabilities
  Tensor soft;  // sigmoid(z / tau)
  Tensor a;     // attention map [HW], sum over channels of X^2
  Tensor M;     // class activation maps [K x HW], M[k] = X . W[:,k]
};

Model make_model(const ModelConfig& cfg, std::uint64_t seed);

// Rearranges an [H x W] image into [HW x patch_dim] rows, cells row-major,
// pixels row-major within each cell.
Tensor extract_patches(const Tensor& image, const ModelConfig& cfg);

// Shared MLP over patch rows: relu(x.W + b) for every layer. Accepts any row
// count, which is how the trainer batches whole minibatches through one call.
Tensor backbone_apply(const Model& model, const Tensor& patch_rows);

KnowledgeBundle forward(const Model& model, const Tensor& image, double tau);

Tensor extract_soft_target(const Tensor& z, double tau);
Tensor extract_attention(const Tensor& X);
Tensor extract_cams(const Tensor& X, const Tensor& head_W);

// Versioned checkpoint: architecture metadata plus named parameter tensors,
// bit-exact round-trip. Contains nothing run-dependent beyond the weights.
void save_model(const std::string& path, const Model& model);
Model load_model(const std::string& path);

}  // namespace mlkd
