#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mlkd/tensor.hpp"

namespace mlkd {

// Seeded synthetic multi-label scene family: a grid of cells, each optionally
// stamped with the fixed glyph of one class, plus clipped additive noise.
struct DatasetSpec {
  std::size_t num_classes = 6;
  std::size_t grid_rows = 4;
  std::size_t grid_cols = 4;
  std::size_t cell_px = 8;
  double glyph_density = 0.5;   // probability a cell is occupied
  double noise_sigma = 1.3;     // std of additive pixel noise, clipped to [0,1]
  std::size_t n_train = 2000;
  std::size_t n_val = 500;
  std::uint64_t seed = 7;

  std::size_t height() const { return grid_rows * cell_px; }
  std::size_t width() const { return grid_cols * cell_px; }
};

struct Example {
  Tensor image;                     // [H,W], values in [0,1]
  std::vector<std::uint8_t> y_full; // ground truth, length K
  std::vector<std::uint8_t> y_obs;  // observed (possibly corrupted) labels
};

struct Dataset {
  DatasetSpec spec;
  std::vector<Example> train;
  std::vector<Example> val;  // always kept fully labeled by the pipeline
};

// Fixed binary cell_px x cell_px pixel mask for one class, derived only from
// the class index. Masks are pairwise distinct and non-empty.
std::vector<std::uint8_t> glyph_mask(std::size_t class_index, std::size_t cell_px);

// Deterministic given spec.seed. Every image has >= 1 positive class
// (rejection-resampled); y_obs starts equal to y_full.
Dataset generate(const DatasetSpec& spec);

// Per-positive Bernoulli retention with keep probability r. Coupled draws:
// the same (seed, example, class) always sees the same uniform, so a run at
// smaller r keeps a subset of the positives kept at larger r.
void corrupt_missing(std::vector<Example>& examples, double keep_ratio, std::uint64_t seed);

// Keep exactly one positive per example, chosen uniformly among the positives
// of y_full.
void to_single_label(std::vector<Example>& examples, std::uint64_t seed);

// Flat binary file: header (magic, version, K, H, W, count), then per example
// the raw image as 64-bit reals followed by y_full and y_obs byte vectors.
void save_examples(const std::string& path, const std::vector<Example>& examples, std::size_t num_classes,
                   std::size_t height, std::size_t width);
struct LoadedExamples {
  std::size_t num_classes, height, width;
  std::vector<Example> examples;
};
LoadedExamples load_examples(const std::string& path);

// Fraction of examples whose y_full contains class k, for each k.
std::vector<double> class_frequencies(const std::vector<Example>& examples, std::size_t num_classes);

std::size_t count_positives(const std::vector<Example>& examples, bool observed);

}  // namespace mlkd
