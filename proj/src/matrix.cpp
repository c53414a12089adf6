#include "mlkd/matrix.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "mlkd/distill.hpp"
#include "mlkd/model.hpp"
#include "mlkd/util.hpp"

namespace mlkd {

namespace fs = std::filesystem;

namespace {

nlohmann::json data_spec_json(const DatasetSpec& s) {
  nlohmann::json j;
  j["num_classes"] = s.num_classes;
  j["grid_rows"] = s.grid_rows;
  j["grid_cols"] = s.grid_cols;
  j["cell_px"] = s.cell_px;
  j["glyph_density"] = s.glyph_density;
  j["noise_sigma"] = s.noise_sigma;
  j["n_train"] = s.n_train;
  j["n_val"] = s.n_val;
  j["seed"] = s.seed;
  return j;
}

nlohmann::json train_json(const TrainConfig& t) {
  nlohmann::json j;
  j["epochs"] = t.epochs;
  j["batch_size"] = t.batch_size;
  j["lr"] = t.lr;
  j["beta1"] = t.beta1;
  j["beta2"] = t.beta2;
  j["weight_decay"] = t.weight_decay;
  return j;
}

nlohmann::json method_json(const DistillMethod& m) {
  nlohmann::json j;
  j["name"] = m.name();
  j["lambda"] = m.lambda;
  j["tau"] = m.tau;
  j["threshold"] = m.threshold;
  j["use_teacher_prob"] = m.use_teacher_prob;
  return j;
}

// Digest of every knob that determines one cell's numbers. nlohmann objects
// iterate in key order, so the dump is canonical.
std::uint64_t cell_hash(const MatrixConfig& cfg, const LabelSetting& ls, const nlohmann::json& method,
                        int seed, const std::vector<std::size_t>& widths) {
  nlohmann::json j;
  j["data"] = data_spec_json(cfg.data);
  j["single"] = ls.single;
  j["keep_ratio"] = ls.keep_ratio;
  j["method"] = method;
  j["seed"] = seed;
  j["train"] = train_json(cfg.train);
  j["widths"] = widths;
  return fnv1a64(j.dump());
}

void write_text(const fs::path& path, const std::string& text) { write_text_file(path.string(), text); }

std::string sanitize(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    if (c == '/' || c == '\\' || c == ' ') c = '_';
  return out;
}

template <typename T>
void from_key(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

}  // namespace

LabelSetting parse_setting(const std::string& text) {
  LabelSetting ls;
  ls.name = text;
  if (text == "single") {
    ls.single = true;
    ls.keep_ratio = 1.0;
    return ls;
  }
  if (text == "full") {
    ls.keep_ratio = 1.0;
    return ls;
  }
  std::size_t used = 0;
  double r = 0.0;
  try {
    r = std::stod(text, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("parse_setting: not a keep ratio or 'single': " + text);
  }
  if (used != text.size()) throw std::invalid_argument("parse_setting: trailing characters: " + text);
  if (!(r > 0.0 && r <= 1.0)) throw std::invalid_argument("parse_setting: keep ratio must be in (0,1]: " + text);
  ls.keep_ratio = r;
  return ls;
}

void MatrixConfig::validate() const {
  if (settings.empty()) throw std::invalid_argument("matrix: settings must be nonempty");
  if (methods.empty()) throw std::invalid_argument("matrix: methods must be nonempty");
  if (seeds.empty()) throw std::invalid_argument("matrix: seeds must be nonempty");
  for (const std::string& m : methods) parse_method(m);
  for (const LabelSetting& s : settings)
    if (!(s.keep_ratio > 0.0 && s.keep_ratio <= 1.0))
      throw std::invalid_argument("matrix: keep ratio out of (0,1] for setting " + s.name);
  if (!(hard_threshold > 0.0 && hard_threshold < 1.0))
    throw std::invalid_argument("matrix: hard_threshold must be in (0,1)");
  if (train.epochs < 1 || train.batch_size < 1 || !(train.lr > 0.0))
    throw std::invalid_argument("matrix: bad training hyperparameters");
  if (jobs < 1) throw std::invalid_argument("matrix: jobs must be >= 1");
  if (out_dir.empty()) throw std::invalid_argument("matrix: out_dir must be set");
}

MatrixConfig default_matrix_config() {
  MatrixConfig cfg;
  for (const char* s : {"1.0", "0.75", "0.40", "single"}) cfg.settings.push_back(parse_setting(s));
  cfg.methods = {"none", "soft_target", "hard_target", "feature", "attention_map", "cams_noprob", "cams"};
  cfg.seeds = {1, 2, 3, 4, 5};
  return cfg;
}

MatrixConfig matrix_config_from_json(const nlohmann::json& j) {
  MatrixConfig cfg = default_matrix_config();
  static const std::vector<std::string> known = {"data",           "settings", "methods", "seeds",
                                                 "hard_threshold", "train",    "jobs",    "out_dir"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw std::invalid_argument("matrix config: unknown key: " + it.key());
  if (j.contains("data")) {
    const nlohmann::json& d = j.at("data");
    static const std::vector<std::string> dkeys = {"num_classes", "grid_rows", "grid_cols",
                                                   "cell_px",     "glyph_density", "noise_sigma",
                                                   "n_train",     "n_val",     "seed"};
    for (auto it = d.begin(); it != d.end(); ++it)
      if (std::find(dkeys.begin(), dkeys.end(), it.key()) == dkeys.end())
        throw std::invalid_argument("matrix config: unknown data key: " + it.key());
    from_key(d, "num_classes", cfg.data.num_classes);
    from_key(d, "grid_rows", cfg.data.grid_rows);
    from_key(d, "grid_cols", cfg.data.grid_cols);
    from_key(d, "cell_px", cfg.data.cell_px);
    from_key(d, "glyph_density", cfg.data.glyph_density);
    from_key(d, "noise_sigma", cfg.data.noise_sigma);
    from_key(d, "n_train", cfg.data.n_train);
    from_key(d, "n_val", cfg.data.n_val);
    from_key(d, "seed", cfg.data.seed);
  }
  if (j.contains("settings")) {
    cfg.settings.clear();
    for (const auto& s : j.at("settings")) cfg.settings.push_back(parse_setting(s.get<std::string>()));
  }
  if (j.contains("methods")) {
    cfg.methods.clear();
    for (const auto& m : j.at("methods")) cfg.methods.push_back(m.get<std::string>());
  }
  if (j.contains("seeds")) {
    cfg.seeds.clear();
    for (const auto& s : j.at("seeds")) cfg.seeds.push_back(s.get<int>());
  }
  from_key(j, "hard_threshold", cfg.hard_threshold);
  if (j.contains("train")) {
    const nlohmann::json& t = j.at("train");
    static const std::vector<std::string> tkeys = {"epochs", "batch_size", "lr",
                                                   "beta1",  "beta2",      "weight_decay"};
    for (auto it = t.begin(); it != t.end(); ++it)
      if (std::find(tkeys.begin(), tkeys.end(), it.key()) == tkeys.end())
        throw std::invalid_argument("matrix config: unknown train key: " + it.key());
    from_key(t, "epochs", cfg.train.epochs);
    from_key(t, "batch_size", cfg.train.batch_size);
    from_key(t, "lr", cfg.train.lr);
    from_key(t, "beta1", cfg.train.beta1);
    from_key(t, "beta2", cfg.train.beta2);
    from_key(t, "weight_decay", cfg.train.weight_decay);
  }
  from_key(j, "jobs", cfg.jobs);
  from_key(j, "out_dir", cfg.out_dir);
  return cfg;
}

nlohmann::json matrix_config_to_json(const MatrixConfig& cfg) {
  nlohmann::json j;
  j["data"] = data_spec_json(cfg.data);
  nlohmann::json settings = nlohmann::json::array();
  for (const LabelSetting& s : cfg.settings) settings.push_back(s.name);
  j["settings"] = std::move(settings);
  j["methods"] = cfg.methods;
  j["seeds"] = cfg.seeds;
  j["hard_threshold"] = cfg.hard_threshold;
  j["train"] = train_json(cfg.train);
  j["jobs"] = cfg.jobs;
  j["out_dir"] = cfg.out_dir;
  return j;
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of empty set");
  std::sort(values.begin(), values.end());
  std::size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double MatrixResult::median_map(const std::string& setting, const std::string& method) const {
  std::vector<double> maps;
  for (const CellResult& c : cells)
    if (c.ok && c.setting == setting && c.method == method) maps.push_back(c.report.map);
  if (maps.empty())
    throw std::runtime_error("median_map: no completed cells for (" + setting + ", " + method + ")");
  return median(std::move(maps));
}

MatrixResult run_matrix(const MatrixConfig& cfg) {
  cfg.validate();
  {
    // surfaces dataset-spec errors before any group starts
    DatasetSpec probe = cfg.data;
    probe.n_train = 1;
    probe.n_val = 1;
    generate(probe);
  }
  const std::size_t S = cfg.settings.size();
  const std::size_t M = cfg.methods.size();
  const std::size_t E = cfg.seeds.size();

  fs::create_directories(fs::path(cfg.out_dir) / "teachers");
  fs::create_directories(fs::path(cfg.out_dir) / "cells");
  write_text(fs::path(cfg.out_dir) / "resolved_config.json", matrix_config_to_json(cfg).dump(2) + "\n");

  MatrixResult res;
  res.cells.resize(S * M * E);
  res.teachers.resize(S * E);

  struct Group {
    std::size_t si, ei;
  };
  std::vector<Group> groups;
  for (std::size_t si = 0; si < S; ++si)
    for (std::size_t ei = 0; ei < E; ++ei) groups.push_back({si, ei});

  std::mutex io_mutex;
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> done{0};

  auto run_group = [&](const Group& g) {
    const LabelSetting& ls = cfg.settings[g.si];
    const int seed = cfg.seeds[g.ei];
    const std::string tag = sanitize(ls.name) + "_s" + std::to_string(seed);
    CellResult& trow = res.teachers[g.si * E + g.ei];
    trow.setting = ls.name;
    trow.method = "teacher";
    trow.seed = seed;
    Model teacher_model;
    Dataset data;
    try {
      data = generate(cfg.data);
      if (ls.single)
        to_single_label(data.train, cfg.data.seed);
      else if (ls.keep_ratio < 1.0)
        corrupt_missing(data.train, ls.keep_ratio, cfg.data.seed);

      TrainConfig tc = cfg.train;
      tc.method = DistillMethod{};
      tc.seed = seed;
      tc.widths = teacher_widths();
      nlohmann::json tmethod;
      tmethod["name"] = "teacher";
      auto t0 = std::chrono::steady_clock::now();
      TrainResult teacher = train_teacher(tc, data);
      teacher.report.config_hash = cell_hash(cfg, ls, tmethod, seed, tc.widths);
      teacher.report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      teacher_model = teacher.model;
      save_model((fs::path(cfg.out_dir) / "teachers" / ("teacher_" + tag + ".ckpt")).string(), teacher.model);
      write_text(fs::path(cfg.out_dir) / "teachers" / ("teacher_" + tag + ".report.json"),
                 report_to_json(teacher.report).dump(2) + "\n");
      trow.report = teacher.report;
      trow.ok = true;
    } catch (const std::exception& e) {
      trow.error = e.what();
      for (std::size_t mi = 0; mi < M; ++mi) {
        CellResult& c = res.cells[(g.si * M + mi) * E + g.ei];
        c.setting = ls.name;
        c.method = cfg.methods[mi];
        c.seed = seed;
        c.error = "teacher failed: " + trow.error;
      }
      std::lock_guard<std::mutex> lk(io_mutex);
      std::fprintf(stderr, "[matrix] %s: teacher FAILED: %s\n", tag.c_str(), trow.error.c_str());
      return;
    }

    for (std::size_t mi = 0; mi < M; ++mi) {
      CellResult& c = res.cells[(g.si * M + mi) * E + g.ei];
      c.setting = ls.name;
      c.method = cfg.methods[mi];
      c.seed = seed;
      try {
        TrainConfig sc = cfg.train;
        sc.method = parse_method(cfg.methods[mi]);
        if (sc.method.kind == MethodKind::HardTarget) sc.method.threshold = cfg.hard_threshold;
        sc.seed = seed;
        sc.widths = student_widths();
        auto t0 = std::chrono::steady_clock::now();
        TrainResult r = train_student(sc, teacher_model, data);
        r.report.config_hash = cell_hash(cfg, ls, method_json(sc.method), seed, sc.widths);
        r.report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const std::string stem = sanitize(ls.name) + "_" + cfg.methods[mi] + "_s" + std::to_string(seed);
        save_model((fs::path(cfg.out_dir) / "cells" / (stem + ".ckpt")).string(), r.model);
        write_text(fs::path(cfg.out_dir) / "cells" / (stem + ".report.json"),
                   report_to_json(r.report).dump(2) + "\n");
        write_text(fs::path(cfg.out_dir) / "cells" / (stem + ".steps.jsonl"), steps_jsonl(r.log));
        c.report = r.report;
        c.ok = true;
      } catch (const std::exception& e) {
        c.error = e.what();
        std::lock_guard<std::mutex> lk(io_mutex);
        std::fprintf(stderr, "[matrix] %s %s seed=%d FAILED: %s\n", ls.name.c_str(), c.method.c_str(), seed,
                     c.error.c_str());
      }
    }
    std::size_t finished = done.fetch_add(1) + 1;
    std::lock_guard<std::mutex> lk(io_mutex);
    std::fprintf(stderr, "[matrix] %s done (%zu/%zu groups)\n", tag.c_str(), finished, groups.size());
  };

  auto worker = [&]() {
    for (;;) {
      std::size_t t = next.fetch_add(1);
      if (t >= groups.size()) return;
      run_group(groups[t]);
    }
  };

  int jobs = std::min<int>(cfg.jobs, static_cast<int>(groups.size()));
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(jobs));
    for (int i = 0; i < jobs; ++i) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  // Aggregate: per-cell rows, then the median row of each (setting, method).
  // wall_time_s stays empty so a rerun reproduces the file byte for byte.
  std::string csv = "ratio,method,seed,map,top1,wall_time_s,config_hash\n";
  for (std::size_t si = 0; si < S; ++si) {
    for (std::size_t mi = 0; mi < M; ++mi) {
      std::vector<double> maps, top1s;
      for (std::size_t ei = 0; ei < E; ++ei) {
        const CellResult& c = res.cells[(si * M + mi) * E + ei];
        csv += c.setting + ',' + c.method + ',' + std::to_string(c.seed) + ',';
        if (c.ok) {
          csv += dtos(c.report.map);
          maps.push_back(c.report.map);
        }
        csv += ',';
        if (c.ok && c.report.top1) {
          csv += dtos(*c.report.top1);
          top1s.push_back(*c.report.top1);
        }
        csv += ",,";
        if (c.ok) csv += to_hex(c.report.config_hash);
        csv += '\n';
      }
      csv += cfg.settings[si].name + ',' + cfg.methods[mi] + ",median,";
      if (!maps.empty()) csv += dtos(median(maps));
      csv += ',';
      if (!top1s.empty()) csv += dtos(median(top1s));
      csv += ",,\n";
    }
  }
  write_text(fs::path(cfg.out_dir) / "aggregate.csv", csv);
  res.aggregate_csv = std::move(csv);

  res.all_ok = true;
  for (const CellResult& c : res.cells)
    if (!c.ok) res.all_ok = false;
  for (const CellResult& t : res.teachers)
    if (!t.ok) res.all_ok = false;
  return res;
}

}  // namespace mlkd
