#include "mlkd/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "mlkd/util.hpp"

namespace mlkd {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) { write_text_file(path.string(), text); }

HeatmapRecord emit_one(const fs::path& path, const std::vector<double>& values, std::size_t rows,
                       std::size_t cols) {
  HeatmapRecord rec;
  rec.path = path.string();
  rec.min = *std::min_element(values.begin(), values.end());
  rec.max = *std::max_element(values.begin(), values.end());
  rec.rows = rows;
  rec.cols = cols;
  write_text(path, pgm_encode(values, rows, cols));
  nlohmann::json side;
  side["min"] = rec.min;
  side["max"] = rec.max;
  side["rows"] = rows;
  side["cols"] = cols;
  write_text(path.string() + ".json", side.dump(2) + "\n");
  return rec;
}

}  // namespace

std::string pgm_encode(const std::vector<double>& values, std::size_t rows, std::size_t cols) {
  if (values.empty() || values.size() != rows * cols)
    throw std::invalid_argument("pgm_encode: values must fill rows x cols");
  double lo = *std::min_element(values.begin(), values.end());
  double hi = *std::max_element(values.begin(), values.end());
  std::string out = "P2\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      int q = 128;
      if (hi > lo) q = static_cast<int>(std::lround((values[r * cols + c] - lo) / (hi - lo) * 255.0));
      out += std::to_string(q);
      out += (c + 1 == cols) ? '\n' : ' ';
    }
  }
  return out;
}

PgmImage pgm_decode(const std::string& text) {
  std::istringstream is(text);
  std::string magic;
  is >> magic;
  if (magic != "P2") throw std::invalid_argument("pgm_decode: not a P2 graymap");
  PgmImage img;
  int maxval = 0;
  is >> img.cols >> img.rows >> maxval;
  if (!is || img.rows == 0 || img.cols == 0) throw std::invalid_argument("pgm_decode: bad header");
  if (maxval != 255) throw std::invalid_argument("pgm_decode: expected maxval 255");
  img.pixels.resize(img.rows * img.cols);
  for (int& p : img.pixels) {
    is >> p;
    if (!is) throw std::invalid_argument("pgm_decode: truncated pixel data");
    if (p < 0 || p > 255) throw std::invalid_argument("pgm_decode: pixel out of range");
  }
  return img;
}

std::vector<HeatmapRecord> emit_heatmaps(const Model& model, const std::vector<Example>& examples,
                                         std::size_t n, double display_threshold,
                                         const std::string& out_dir) {
  n = std::min(n, examples.size());
  if (n == 0) throw std::invalid_argument("emit_heatmaps: empty selection");
  fs::create_directories(out_dir);

  const std::size_t gr = model.cfg.grid_rows;
  const std::size_t gc = model.cfg.grid_cols;
  std::vector<HeatmapRecord> records;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor& img = examples[i].image;
    KnowledgeBundle kb = forward(model, img, 1.0);
    const std::string stem = "ex" + std::to_string(i);
    records.push_back(
        emit_one(fs::path(out_dir) / (stem + "_input.pgm"), img.vec(), img.shape()[0], img.shape()[1]));
    records.push_back(emit_one(fs::path(out_dir) / (stem + "_attention.pgm"), kb.a.vec(), gr, gc));
    const std::size_t hw = gr * gc;
    for (std::size_t k = 0; k < model.cfg.num_classes; ++k) {
      if (kb.p[k] < display_threshold) continue;
      char prob[16];
      std::snprintf(prob, sizeof prob, "%.4f", kb.p[k]);
      std::vector<double> cam(kb.M.data() + k * hw, kb.M.data() + (k + 1) * hw);
      records.push_back(emit_one(
          fs::path(out_dir) / (stem + "_cam_c" + std::to_string(k) + "_p" + prob + ".pgm"), cam, gr, gc));
    }
  }
  return records;
}

}  // namespace mlkd
