#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlkd/eval.hpp"
#include "mlkd/synthgen.hpp"
#include "mlkd/trainer.hpp"

namespace mlkd {

// One column of the results table: either a positive-label keep ratio or the
// single-label reduction. The name is what the aggregate CSV prints.
struct LabelSetting {
  std::string name;
  bool single = false;
  double keep_ratio = 1.0;
};

// Accepts "single", "full" (alias for ratio 1), or a decimal keep ratio in
// (0, 1]. The given spelling becomes the setting name.
LabelSetting parse_setting(const std::string& text);

struct MatrixConfig {
  DatasetSpec data;                    // one generator spec shared by every cell
  std::vector<LabelSetting> settings;  // table columns
  std::vector<std::string> methods;    // table rows, parse_method names
  std::vector<int> seeds;
  double hard_threshold = 0.25;        // pseudo-label cutoff used for hard_target cells
  TrainConfig train;                   // shared hyperparameters; widths and seed set per cell
  int jobs = 1;
  std::string out_dir = "matrix_out";

  void validate() const;
};

// The desk recipe: default dataset, settings 1.0/0.75/0.40/single, the seven
// table methods, seeds 1..5.
MatrixConfig default_matrix_config();

// Missing keys fall back to the defaults above; unknown keys are an error.
MatrixConfig matrix_config_from_json(const nlohmann::json& j);
nlohmann::json matrix_config_to_json(const MatrixConfig& cfg);

struct CellResult {
  std::string setting;
  std::string method;
  int seed = 0;
  MetricsReport report;
  bool ok = false;
  std::string error;
};

struct MatrixResult {
  std::vector<CellResult> cells;     // setting-major, then method, then seed
  std::vector<CellResult> teachers;  // one per (setting, seed)
  std::string aggregate_csv;         // also written to <out_dir>/aggregate.csv
  bool all_ok = false;

  // Median validation mAP across seeds for one (setting, method) pair;
  // failed cells are excluded. Throws if every seed failed.
  double median_map(const std::string& setting, const std::string& method) const;
};

// Sorted-middle median; even sizes average the two middle elements.
double median(std::vector<double> values);

// Runs every (setting, method, seed) cell. One teacher is trained per
// (setting, seed) on that setting's observed labels and shared by all its
// method cells. Per-cell checkpoints, reports, and step logs land under
// out_dir; the aggregate CSV holds one row per cell plus one median row per
// (setting, method). jobs > 1 spreads (setting, seed) groups over threads;
// every output byte is independent of the schedule. Cell failures are
// captured per cell (all_ok turns false), never thrown.
MatrixResult run_matrix(const MatrixConfig& cfg);

}  // namespace mlkd
