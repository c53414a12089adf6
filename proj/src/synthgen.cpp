#include "mlkd/synthgen.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#include "mlkd/rng.hpp"
#include "mlkd/util.hpp"

namespace mlkd {

namespace {

constexpr std::uint64_t kGlyphStream = 0x676C7970;    // glyph mask derivation
constexpr std::uint64_t kTrainStream = 0;             // per-split image streams
constexpr std::uint64_t kValStream = 1;
constexpr std::uint64_t kCorruptStream = 0x64726F70;  // label dropping
constexpr std::uint64_t kSingleStream = 0x736E676C;   // single-label choice

void validate(const DatasetSpec& spec) {
  if (spec.num_classes < 2) throw std::invalid_argument("dataset: num_classes must be >= 2");
  if (spec.grid_rows == 0 || spec.grid_cols == 0 || spec.cell_px == 0)
    throw std::invalid_argument("dataset: grid and cell sizes must be positive");
  if (!(spec.glyph_density > 0.0 && spec.glyph_density < 1.0))
    throw std::invalid_argument("dataset: glyph_density must lie in (0,1)");
  if (spec.noise_sigma < 0.0) throw std::invalid_argument("dataset: noise_sigma must be >= 0");
}

Example render_one(const DatasetSpec& spec, const std::vector<std::vector<std::uint8_t>>& masks,
                   Rng& rng) {
  const std::size_t cells = spec.grid_rows * spec.grid_cols;
  std::vector<int> cell_class(cells, -1);
  std::vector<std::uint8_t> y_full(spec.num_classes, 0);
  // Rejection-resample scene layouts until at least one cell is occupied.
  for (int attempt = 0;; ++attempt) {
    if (attempt > 100000) throw std::runtime_error("dataset: rejection sampling failed to terminate");
    std::fill(cell_class.begin(), cell_class.end(), -1);
    std::fill(y_full.begin(), y_full.end(), 0);
    bool any = false;
    for (std::size_t c = 0; c < cells; ++c) {
      if (rng.uniform01() < spec.glyph_density) {
        std::size_t k = rng.bounded(spec.num_classes);
        cell_class[c] = static_cast<int>(k);
        y_full[k] = 1;
        any = true;
      }
    }
    if (any) break;
  }
  const std::size_t h = spec.height(), w = spec.width();
  Tensor image({h, w});
  double* px = image.data();
  for (std::size_t gr = 0; gr < spec.grid_rows; ++gr) {
    for (std::size_t gc = 0; gc < spec.grid_cols; ++gc) {
      int k = cell_class[gr * spec.grid_cols + gc];
      if (k < 0) continue;
      const std::vector<std::uint8_t>& mask = masks[static_cast<std::size_t>(k)];
      for (std::size_t r = 0; r < spec.cell_px; ++r)
        for (std::size_t c = 0; c < spec.cell_px; ++c)
          if (mask[r * spec.cell_px + c])
            px[(gr * spec.cell_px + r) * w + (gc * spec.cell_px + c)] = 1.0;
    }
  }
  if (spec.noise_sigma > 0.0) {
    for (std::size_t i = 0; i < h * w; ++i) {
      double v = px[i] + spec.noise_sigma * rng.normal();
      px[i] = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    }
  }
  Example ex;
  ex.image = std::move(image);
  ex.y_obs = y_full;
  ex.y_full = std::move(y_full);
  return ex;
}

}  // namespace

std::vector<std::uint8_t> glyph_mask(std::size_t class_index, std::size_t cell_px) {
  const std::size_t n = cell_px * cell_px;
  // Salted retry keeps masks non-degenerate (never empty or full).
  for (std::uint64_t salt = 0;; ++salt) {
    Rng rng(mix_seed(kGlyphStream + salt, class_index));
    std::vector<std::uint8_t> mask(n);
    std::size_t ones = 0;
    for (std::size_t i = 0; i < n; ++i) {
      mask[i] = rng.uniform01() < 0.5 ? 1 : 0;
      ones += mask[i];
    }
    if (ones > 0 && ones < n) return mask;
  }
}

Dataset generate(const DatasetSpec& spec) {
  validate(spec);
  std::vector<std::vector<std::uint8_t>> masks;
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    masks.push_back(glyph_mask(k, spec.cell_px));
    for (std::size_t j = 0; j < k; ++j)
      if (masks[j] == masks[k]) throw std::runtime_error("dataset: glyph masks collide");
  }
  Dataset ds;
  ds.spec = spec;
  ds.train.reserve(spec.n_train);
  ds.val.reserve(spec.n_val);
  for (std::size_t i = 0; i < spec.n_train; ++i) {
    Rng rng(mix_seed(mix_seed(spec.seed, kTrainStream), i));
    ds.train.push_back(render_one(spec, masks, rng));
  }
  for (std::size_t i = 0; i < spec.n_val; ++i) {
    Rng rng(mix_seed(mix_seed(spec.seed, kValStream), i));
    ds.val.push_back(render_one(spec, masks, rng));
  }
  return ds;
}

void corrupt_missing(std::vector<Example>& examples, double keep_ratio, std::uint64_t seed) {
  if (!(keep_ratio >= 0.0 && keep_ratio <= 1.0))
    throw std::invalid_argument("corrupt_missing: keep_ratio must lie in [0,1]");
  for (const Example& ex : examples)
    if (ex.y_obs != ex.y_full)
      throw std::invalid_argument("corrupt_missing: y_obs already differs from y_full");
  // One uniform per (example, positive class) in a fixed scan order; the draw
  // sequence depends only on y_full, so runs at different keep ratios see the
  // same uniforms (monotone coupling).
  Rng rng(mix_seed(seed, kCorruptStream));
  for (Example& ex : examples) {
    for (std::size_t k = 0; k < ex.y_full.size(); ++k) {
      if (!ex.y_full[k]) continue;
      double u = rng.uniform01();
      ex.y_obs[k] = (u < keep_ratio) ? 1 : 0;
    }
  }
}

void to_single_label(std::vector<Example>& examples, std::uint64_t seed) {
  Rng rng(mix_seed(seed, kSingleStream));
  for (Example& ex : examples) {
    std::vector<std::size_t> pos;
    for (std::size_t k = 0; k < ex.y_full.size(); ++k)
      if (ex.y_full[k]) pos.push_back(k);
    if (pos.empty()) throw std::invalid_argument("to_single_label: example has zero positives");
    std::size_t chosen = pos[rng.bounded(pos.size())];
    std::fill(ex.y_obs.begin(), ex.y_obs.end(), 0);
    ex.y_obs[chosen] = 1;
  }
}

namespace {
constexpr std::uint32_t kDatasetMagic = 0x444B4C4D;  // "MLKD" little-endian
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

void save_examples(const std::string& path, const std::vector<Example>& examples, std::size_t num_classes,
                   std::size_t height, std::size_t width) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_examples: cannot open " + path);
  write_u32(os, kDatasetMagic);
  write_u32(os, kDatasetVersion);
  write_u32(os, static_cast<std::uint32_t>(num_classes));
  write_u32(os, static_cast<std::uint32_t>(height));
  write_u32(os, static_cast<std::uint32_t>(width));
  write_u64(os, examples.size());
  for (const Example& ex : examples) {
    if (ex.image.size() != height * width || ex.y_full.size() != num_classes ||
        ex.y_obs.size() != num_classes)
      throw std::invalid_argument("save_examples: example does not match header dimensions");
    for (std::size_t i = 0; i < ex.image.size(); ++i) write_f64(os, ex.image[i]);
    os.write(reinterpret_cast<const char*>(ex.y_full.data()), static_cast<std::streamsize>(num_classes));
    os.write(reinterpret_cast<const char*>(ex.y_obs.data()), static_cast<std::streamsize>(num_classes));
  }
  if (!os) throw std::runtime_error("save_examples: write failed for " + path);
}

LoadedExamples load_examples(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_examples: cannot open " + path);
  if (read_u32(is) != kDatasetMagic) throw std::runtime_error("load_examples: bad magic in " + path);
  if (read_u32(is) != kDatasetVersion) throw std::runtime_error("load_examples: unsupported version");
  LoadedExamples out;
  out.num_classes = read_u32(is);
  out.height = read_u32(is);
  out.width = read_u32(is);
  std::uint64_t count = read_u64(is);
  out.examples.reserve(count);
  for (std::uint64_t e = 0; e < count; ++e) {
    Example ex;
    ex.image = Tensor({out.height, out.width});
    for (std::size_t i = 0; i < out.height * out.width; ++i) ex.image[i] = read_f64(is);
    ex.y_full.resize(out.num_classes);
    ex.y_obs.resize(out.num_classes);
    is.read(reinterpret_cast<char*>(ex.y_full.data()), static_cast<std::streamsize>(out.num_classes));
    is.read(reinterpret_cast<char*>(ex.y_obs.data()), static_cast<std::streamsize>(out.num_classes));
    if (!is) throw std::runtime_error("load_examples: truncated file " + path);
    out.examples.push_back(std::move(ex));
  }
  return out;
}

std::vector<double> class_frequencies(const std::vector<Example>& examples, std::size_t num_classes) {
  std::vector<double> freq(num_classes, 0.0);
  if (examples.empty()) return freq;
  for (const Example& ex : examples)
    for (std::size_t k = 0; k < num_classes; ++k)
      if (ex.y_full[k]) freq[k] += 1.0;
  for (double& f : freq) f /= static_cast<double>(examples.size());
  return freq;
}

std::size_t count_positives(const std::vector<Example>& examples, bool observed) {
  std::size_t n = 0;
  for (const Example& ex : examples)
    for (std::uint8_t v : (observed ? ex.y_obs : ex.y_full)) n += v;
  return n;
}

}  // namespace mlkd
