#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mlkd/model.hpp"
#include "mlkd/synthgen.hpp"

namespace mlkd {

// One emitted grayscale map plus the normalization needed to undo it. The
// sidecar JSON lives at path + ".json" with the same four fields.
struct HeatmapRecord {
  std::string path;
  double min = 0.0;
  double max = 0.0;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

// Plain-text P2 portable graymap after per-map min-max normalization to
// [0, 255]. A constant map renders mid-gray (128). De-normalizing a pixel as
// min + q/255 * (max - min) lands within half a quantization step of the
// source value.
std::string pgm_encode(const std::vector<double>& values, std::size_t rows, std::size_t cols);

struct PgmImage {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<int> pixels;  // row-major, 0..255
};
PgmImage pgm_decode(const std::string& text);

// For each of the first n examples: the input image, the attention map, and
// one CAM per class whose predicted probability reaches display_threshold.
// Every map is written as a .pgm plus a .json sidecar {min, max, rows, cols};
// CAM filenames carry the class index and its probability. n is clamped to
// the example count; an empty selection is an error.
std::vector<HeatmapRecord> emit_heatmaps(const Model& model, const std::vector<Example>& examples,
                                         std::size_t n, double display_threshold,
                                         const std::string& out_dir);

}  // namespace mlkd
