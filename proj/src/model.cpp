#include "mlkd/model.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "mlkd/rng.hpp"
#include "mlkd/util.hpp"

namespace mlkd {

namespace {

constexpr std::uint64_t kInitStream = 0x696E6974;

void validate_config(const ModelConfig& cfg) {
  if (cfg.widths.empty()) throw std::invalid_argument("model: widths must be non-empty");
  if (cfg.num_classes == 0) throw std::invalid_argument("model: num_classes must be positive");
  if (cfg.grid_rows == 0 || cfg.grid_cols == 0 || cfg.cell_px == 0)
    throw std::invalid_argument("model: grid dimensions must be positive");
}

}  // namespace

std::vector<Tensor*> Model::params() {
  std::vector<Tensor*> out;
  for (DenseLayer& l : layers) {
    out.push_back(&l.W);
    out.push_back(&l.b);
  }
  out.push_back(&head_W);
  out.push_back(&head_b);
  return out;
}

std::vector<const Tensor*> Model::params() const {
  std::vector<const Tensor*> out;
  for (const DenseLayer& l : layers) {
    out.push_back(&l.W);
    out.push_back(&l.b);
  }
  out.push_back(&head_W);
  out.push_back(&head_b);
  return out;
}

Model make_model(const ModelConfig& cfg, std::uint64_t seed) {
  validate_config(cfg);
  Model m;
  m.cfg = cfg;
  Rng rng(mix_seed(seed, kInitStream));
  std::size_t in = cfg.patch_dim();
  for (std::size_t w : cfg.widths) {
    DenseLayer layer;
    layer.W = Tensor({in, w});
    double scale = std::sqrt(2.0 / static_cast<double>(in));  // relu-preserving fan-in scale
    for (double& v : layer.W.vec()) v = scale * rng.normal();
    layer.b = Tensor({w});
    m.layers.push_back(std::move(layer));
    in = w;
  }
  std::size_t c = cfg.channels(), k = cfg.num_classes;
  m.head_W = Tensor({c, k});
  double hscale = std::sqrt(1.0 / static_cast<double>(c));
  for (double& v : m.head_W.vec()) v = hscale * rng.normal();
  m.head_b = Tensor({k});
  return m;
}

Tensor extract_patches(const Tensor& image, const ModelConfig& cfg) {
  const std::size_t h = cfg.grid_rows * cfg.cell_px, w = cfg.grid_cols * cfg.cell_px;
  if (image.shape() != std::vector<std::size_t>{h, w})
    throw std::invalid_argument("extract_patches: image " + shape_str(image.shape()) +
                                " does not match grid geometry [" + std::to_string(h) + "," +
                                std::to_string(w) + "]");
  Tensor out({cfg.spatial(), cfg.patch_dim()});
  double* dst = out.data();
  const double* src = image.data();
  std::size_t row = 0;
  for (std::size_t gr = 0; gr < cfg.grid_rows; ++gr)
    for (std::size_t gc = 0; gc < cfg.grid_cols; ++gc, ++row) {
      double* prow = dst + row * cfg.patch_dim();
      for (std::size_t r = 0; r < cfg.cell_px; ++r)
        for (std::size_t c = 0; c < cfg.cell_px; ++c)
          prow[r * cfg.cell_px + c] = src[(gr * cfg.cell_px + r) * w + gc * cfg.cell_px + c];
    }
  return out;
}

Tensor backbone_apply(const Model& model, const Tensor& patch_rows) {
  if (patch_rows.ndim() != 2 || patch_rows.shape()[1] != model.cfg.patch_dim())
    throw std::invalid_argument("backbone_apply: expected [*," + std::to_string(model.cfg.patch_dim()) +
                                "] rows, got " + shape_str(patch_rows.shape()));
  Tensor h = patch_rows;
  for (const DenseLayer& layer : model.layers) h = relu(add(matmul(h, layer.W), layer.b));
  return h;
}

Tensor extract_soft_target(const Tensor& z, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("extract_soft_target: tau must be positive");
  return sigmoid(mul(z, 1.0 / tau));
}

Tensor extract_attention(const Tensor& X) {
  if (X.ndim() != 2) throw std::invalid_argument("extract_attention: expected [HW,C], got " + shape_str(X.shape()));
  return sum(square(X), 1);
}

Tensor extract_cams(const Tensor& X, const Tensor& head_W) {
  if (X.ndim() != 2 || head_W.ndim() != 2 || X.shape()[1] != head_W.shape()[0])
    throw std::invalid_argument("extract_cams: channel dims disagree, " + shape_str(X.shape()) + " vs " +
                                shape_str(head_W.shape()));
  return transpose(matmul(X, head_W));
}

KnowledgeBundle forward(const Model& model, const Tensor& image, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("forward: tau must be positive");
  KnowledgeBundle kb;
  Tensor patches = extract_patches(image, model.cfg);
  kb.X = backbone_apply(model, patches);
  kb.f = mean(kb.X, 0);
  std::size_t c = model.cfg.channels(), k = model.cfg.num_classes;
  Tensor z_row = matmul(reshape(kb.f, {1, c}), model.head_W);
  kb.z = add(reshape(z_row, {k}), model.head_b);
  kb.p = sigmoid(kb.z);
  kb.soft = extract_soft_target(kb.z, tau);
  kb.a = extract_attention(kb.X);
  kb.M = extract_cams(kb.X, model.head_W);
  return kb;
}

namespace {

constexpr std::uint32_t kCheckpointMagic = 0x434B4C4D;  // "MLKC" little-endian
constexpr std::uint32_t kCheckpointVersion = 1;

void write_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  write_str(os, name);
  write_u32(os, static_cast<std::uint32_t>(t.ndim()));
  for (std::size_t d : t.shape()) write_u64(os, d);
  for (std::size_t i = 0; i < t.size(); ++i) write_f64(os, t[i]);
}

Tensor read_tensor(std::istream& is, const std::string& expect_name) {
  std::string name = read_str(is);
  if (name != expect_name)
    throw std::runtime_error("checkpoint: expected tensor '" + expect_name + "', found '" + name + "'");
  std::uint32_t nd = read_u32(is);
  std::vector<std::size_t> shape(nd);
  std::size_t total = 1;
  for (auto& d : shape) {
    d = read_u64(is);
    total *= d;
  }
  Tensor t(shape);
  for (std::size_t i = 0; i < total; ++i) t[i] = read_f64(is);
  return t;
}

std::vector<std::string> param_names(const ModelConfig& cfg) {
  std::vector<std::string> names;
  for (std::size_t l = 0; l < cfg.widths.size(); ++l) {
    names.push_back("backbone." + std::to_string(l) + ".W");
    names.push_back("backbone." + std::to_string(l) + ".b");
  }
  names.push_back("head.W");
  names.push_back("head.b");
  return names;
}

}  // namespace

void save_model(const std::string& path, const Model& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_model: cannot open " + path);
  write_u32(os, kCheckpointMagic);
  write_u32(os, kCheckpointVersion);
  nlohmann::json meta = {
      {"grid_rows", model.cfg.grid_rows}, {"grid_cols", model.cfg.grid_cols},
      {"cell_px", model.cfg.cell_px},     {"widths", model.cfg.widths},
      {"num_classes", model.cfg.num_classes},
  };
  write_str(os, meta.dump());
  std::vector<std::string> names = param_names(model.cfg);
  std::vector<const Tensor*> ps = model.params();
  write_u32(os, static_cast<std::uint32_t>(ps.size()));
  for (std::size_t i = 0; i < ps.size(); ++i) write_tensor(os, names[i], *ps[i]);
  if (!os) throw std::runtime_error("save_model: write failed for " + path);
}

Model load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_model: cannot open " + path);
  if (read_u32(is) != kCheckpointMagic) throw std::runtime_error("load_model: bad magic in " + path);
  if (read_u32(is) != kCheckpointVersion) throw std::runtime_error("load_model: unsupported version");
  nlohmann::json meta = nlohmann::json::parse(read_str(is));
  ModelConfig cfg;
  cfg.grid_rows = meta.at("grid_rows").get<std::size_t>();
  cfg.grid_cols = meta.at("grid_cols").get<std::size_t>();
  cfg.cell_px = meta.at("cell_px").get<std::size_t>();
  cfg.widths = meta.at("widths").get<std::vector<std::size_t>>();
  cfg.num_classes = meta.at("num_classes").get<std::size_t>();
  validate_config(cfg);
  Model m;
  m.cfg = cfg;
  std::vector<std::string> names = param_names(cfg);
  std::uint32_t count = read_u32(is);
  if (count != names.size()) throw std::runtime_error("load_model: tensor count mismatch");
  m.layers.resize(cfg.widths.size());
  std::size_t in = cfg.patch_dim();
  for (std::size_t l = 0; l < cfg.widths.size(); ++l) {
    m.layers[l].W = read_tensor(is, names[2 * l]);
    m.layers[l].b = read_tensor(is, names[2 * l + 1]);
    if (m.layers[l].W.shape() != std::vector<std::size_t>{in, cfg.widths[l]} ||
        m.layers[l].b.shape() != std::vector<std::size_t>{cfg.widths[l]})
      throw std::runtime_error("load_model: layer " + std::to_string(l) + " shape mismatch");
    in = cfg.widths[l];
  }
  m.head_W = read_tensor(is, "head.W");
  m.head_b = read_tensor(is, "head.b");
  if (m.head_W.shape() != std::vector<std::size_t>{cfg.channels(), cfg.num_classes} ||
      m.head_b.shape() != std::vector<std::size_t>{cfg.num_classes})
    throw std::runtime_error("load_model: head shape mismatch");
  return m;
}

}  // namespace mlkd
