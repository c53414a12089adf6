#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mlkd/distill.hpp"
#include "mlkd/eval.hpp"
#include "mlkd/gradsuite.hpp"
#include "mlkd/heatmap.hpp"
#include "mlkd/matrix.hpp"
#include "mlkd/model.hpp"
#include "mlkd/synthgen.hpp"
#include "mlkd/trainer.hpp"
#include "mlkd/util.hpp"

using namespace mlkd;
namespace fs = std::filesystem;

namespace {

std::string out_root() {
  const char* env = std::getenv("MLKD_OUT_ROOT");
  return (env && *env) ? std::string(env) : std::string("out");
}

// --out wins; otherwise <root>/<leaf> with the root taken from MLKD_OUT_ROOT.
std::string resolve_out(const std::string& flag, const std::string& leaf) {
  if (!flag.empty()) return flag;
  return (fs::path(out_root()) / leaf).string();
}

void require_file(const std::string& path) {
  if (!fs::exists(path)) throw std::invalid_argument("no such file: " + path);
}

nlohmann::json data_json(const DatasetSpec& s) {
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

// Where the training split comes from: a generated spec (with optional
// corruption) or a saved file pair <prefix>.train.bin / <prefix>.val.bin.
// When loading files the spec's grid flags double as the geometry hint.
struct DataArgs {
  std::string prefix;
  DatasetSpec spec;
  double keep_ratio = 1.0;
  bool single = false;
};

void add_generator_flags(CLI::App* cmd, DatasetSpec& spec) {
  cmd->add_option("--classes", spec.num_classes, "number of classes")->capture_default_str();
  cmd->add_option("--grid-rows", spec.grid_rows, "glyph grid rows")->capture_default_str();
  cmd->add_option("--grid-cols", spec.grid_cols, "glyph grid columns")->capture_default_str();
  cmd->add_option("--cell-px", spec.cell_px, "pixels per grid cell")->capture_default_str();
  cmd->add_option("--density", spec.glyph_density, "cell occupancy probability")->capture_default_str();
  cmd->add_option("--sigma", spec.noise_sigma, "additive noise std")->capture_default_str();
  cmd->add_option("--n-train", spec.n_train, "training examples")->capture_default_str();
  cmd->add_option("--n-val", spec.n_val, "validation examples")->capture_default_str();
}

void add_data_flags(CLI::App* cmd, DataArgs& d) {
  cmd->add_option("--data", d.prefix, "dataset file prefix (expects <prefix>.train.bin and <prefix>.val.bin)");
  add_generator_flags(cmd, d.spec);
  cmd->add_option("--data-seed", d.spec.seed, "generator seed")->capture_default_str();
  cmd->add_option("--keep-ratio", d.keep_ratio, "fraction of positive labels kept")->capture_default_str();
  cmd->add_flag("--single-label", d.single, "keep exactly one positive per example");
}

// The file format stores K, H, W but not the grid factorization, so loading
// needs the geometry from flags (teacher) or from a checkpoint (student).
Dataset assemble_data(const DataArgs& a, const ModelConfig* geometry) {
  if (a.prefix.empty()) {
    Dataset d = generate(a.spec);
    if (a.single)
      to_single_label(d.train, a.spec.seed);
    else if (a.keep_ratio < 1.0)
      corrupt_missing(d.train, a.keep_ratio, a.spec.seed);
    return d;
  }
  if (a.single || a.keep_ratio < 1.0)
    throw std::invalid_argument("--keep-ratio/--single-label only apply when generating; corrupt at generate time");
  const std::string train_file = a.prefix + ".train.bin";
  const std::string val_file = a.prefix + ".val.bin";
  require_file(train_file);
  require_file(val_file);
  LoadedExamples tr = load_examples(train_file);
  LoadedExamples va = load_examples(val_file);
  if (tr.num_classes != va.num_classes || tr.height != va.height || tr.width != va.width)
    throw std::invalid_argument("train and val files disagree on classes or image size");
  Dataset d;
  d.spec = a.spec;
  d.spec.num_classes = tr.num_classes;
  if (geometry) {
    d.spec.grid_rows = geometry->grid_rows;
    d.spec.grid_cols = geometry->grid_cols;
    d.spec.cell_px = geometry->cell_px;
  }
  d.spec.n_train = tr.examples.size();
  d.spec.n_val = va.examples.size();
  if (d.spec.height() != tr.height || d.spec.width() != tr.width)
    throw std::invalid_argument("grid geometry does not factor the stored image size");
  d.train = std::move(tr.examples);
  d.val = std::move(va.examples);
  return d;
}

std::uint64_t run_hash(const DataArgs& a, const TrainConfig& tc, const std::string& role) {
  nlohmann::json j;
  if (a.prefix.empty()) {
    j["data"] = data_json(a.spec);
    j["keep_ratio"] = a.keep_ratio;
    j["single"] = a.single;
  } else {
    j["train_file"] = a.prefix + ".train.bin";
    j["val_file"] = a.prefix + ".val.bin";
  }
  j["role"] = role;
  nlohmann::json m;
  m["name"] = tc.method.name();
  m["lambda"] = tc.method.lambda;
  m["tau"] = tc.method.tau;
  m["threshold"] = tc.method.threshold;
  m["use_teacher_prob"] = tc.method.use_teacher_prob;
  j["method"] = std::move(m);
  nlohmann::json t;
  t["epochs"] = tc.epochs;
  t["batch_size"] = tc.batch_size;
  t["lr"] = tc.lr;
  t["beta1"] = tc.beta1;
  t["beta2"] = tc.beta2;
  t["weight_decay"] = tc.weight_decay;
  j["train"] = std::move(t);
  j["seed"] = tc.seed;
  j["widths"] = tc.widths;
  return fnv1a64(j.dump());
}

void write_run_outputs(const std::string& dir, const std::string& ckpt_name, const TrainResult& r) {
  fs::create_directories(dir);
  save_model((fs::path(dir) / ckpt_name).string(), r.model);
  write_text_file((fs::path(dir) / "report.json").string(), report_to_json(r.report).dump(2) + "\n");
  write_text_file((fs::path(dir) / "steps.jsonl").string(), steps_jsonl(r.log));
}

void add_train_flags(CLI::App* cmd, TrainConfig& tc) {
  cmd->add_option("--seed", tc.seed, "training seed")->capture_default_str();
  cmd->add_option("--epochs", tc.epochs, "training epochs")->capture_default_str();
  cmd->add_option("--batch", tc.batch_size, "minibatch size")->capture_default_str();
  cmd->add_option("--lr", tc.lr, "Adam learning rate")->capture_default_str();
  cmd->add_option("--wd", tc.weight_decay, "decoupled weight decay")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"seeded multi-label distillation workbench: synthetic data, teachers, students, result matrices"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "write a dataset file pair and print its summary");
  DatasetSpec gen_spec;
  double gen_keep = 1.0;
  bool gen_single = false;
  std::string gen_out;
  add_generator_flags(gen, gen_spec);
  gen->add_option("--seed", gen_spec.seed, "generator seed")->capture_default_str();
  gen->add_option("--keep-ratio", gen_keep, "fraction of positive labels kept in train")->capture_default_str();
  gen->add_flag("--single-label", gen_single, "keep exactly one positive per train example");
  gen->add_option("--out", gen_out, "output prefix (default <root>/dataset)");

  // train-teacher
  auto* tt = app.add_subcommand("train-teacher", "train the wide supervised reference model");
  DataArgs tt_data;
  TrainConfig tt_cfg;
  std::string tt_out;
  add_data_flags(tt, tt_data);
  add_train_flags(tt, tt_cfg);
  tt->add_option("--out", tt_out, "output directory (default <root>/teacher)");

  // train-student
  auto* ts = app.add_subcommand("train-student", "distill a student from a frozen teacher checkpoint");
  DataArgs ts_data;
  TrainConfig ts_cfg;
  std::string ts_out, ts_teacher, ts_method = "cams";
  double ts_lambda = 0.0, ts_tau = 2.0, ts_threshold = 0.75;
  add_data_flags(ts, ts_data);
  ts->add_option("--teacher", ts_teacher, "teacher checkpoint path")->required();
  ts->add_option("--method", ts_method,
                 "none | soft_target | hard_target | feature | feature_maps | attention_map | cams | cams_noprob")
      ->capture_default_str();
  auto* lam = ts->add_option("--lambda", ts_lambda, "distillation weight (default: per-method)");
  auto* tau = ts->add_option("--tau", ts_tau, "soft-target temperature")->capture_default_str();
  auto* thr = ts->add_option("--threshold", ts_threshold, "hard-target pseudo-label cutoff")->capture_default_str();
  add_train_flags(ts, ts_cfg);
  ts->add_option("--out", ts_out, "output directory (default <root>/student)");

  // run-matrix
  auto* rm = app.add_subcommand("run-matrix", "run the (setting x method x seed) table and aggregate medians");
  std::string rm_config, rm_out;
  int rm_jobs = 1;
  rm->add_option("--config", rm_config, "matrix config JSON (defaults to the built-in recipe)");
  rm->add_option("--out", rm_out, "output directory (default <root>/matrix)");
  auto* rm_jobs_opt = rm->add_option("--jobs", rm_jobs, "worker threads over (setting, seed) groups");

  // emit-heatmaps
  auto* hm = app.add_subcommand("emit-heatmaps", "render inputs, attention, and per-class CAMs as P2 graymaps");
  std::string hm_ckpt, hm_data, hm_out;
  std::size_t hm_n = 5;
  double hm_threshold = 0.5;
  hm->add_option("--checkpoint", hm_ckpt, "model checkpoint path")->required();
  hm->add_option("--data", hm_data, "examples file (.train.bin or .val.bin)")->required();
  hm->add_option("--n", hm_n, "number of leading examples")->capture_default_str();
  hm->add_option("--threshold", hm_threshold, "minimum class probability to emit its CAM")->capture_default_str();
  hm->add_option("--out", hm_out, "output directory (default <root>/heatmaps)");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every loss gradient");

  // sweep-lambda
  auto* sl = app.add_subcommand("sweep-lambda", "train one student per distillation weight and report mAP");
  DataArgs sl_data;
  TrainConfig sl_cfg;
  std::string sl_method = "cams";
  double sl_tau = 2.0;
  std::vector<double> sl_lambdas = {0.1, 1.0, 10.0, 100.0};
  add_data_flags(sl, sl_data);
  sl->add_option("--method", sl_method, "method with a distillation term")->capture_default_str();
  auto* sl_tau_opt = sl->add_option("--tau", sl_tau, "soft-target temperature")->capture_default_str();
  sl->add_option("--lambda", sl_lambdas, "distillation weights to try")->capture_default_str();
  add_train_flags(sl, sl_cfg);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      Dataset data = generate(gen_spec);
      if (gen_single)
        to_single_label(data.train, gen_spec.seed);
      else if (gen_keep < 1.0)
        corrupt_missing(data.train, gen_keep, gen_spec.seed);
      std::string prefix = resolve_out(gen_out, "dataset");
      fs::path p(prefix);
      if (p.has_parent_path()) fs::create_directories(p.parent_path());
      save_examples(prefix + ".train.bin", data.train, gen_spec.num_classes, gen_spec.height(), gen_spec.width());
      save_examples(prefix + ".val.bin", data.val, gen_spec.num_classes, gen_spec.height(), gen_spec.width());

      std::printf("train %zu  val %zu  classes %zu  image %zux%zu\n", data.train.size(), data.val.size(),
                  gen_spec.num_classes, gen_spec.height(), gen_spec.width());
      std::vector<double> freq = class_frequencies(data.train, gen_spec.num_classes);
      std::printf("class frequencies:");
      for (std::size_t k = 0; k < freq.size(); ++k) std::printf(" %zu:%.4f", k, freq[k]);
      std::printf("\n");
      std::map<std::size_t, std::size_t> hist;
      for (const Example& ex : data.train) {
        std::size_t cnt = 0;
        for (std::uint8_t y : ex.y_full) cnt += y;
        ++hist[cnt];
      }
      std::printf("positives per image:");
      for (const auto& [k, v] : hist) std::printf(" %zu:%zu", k, v);
      std::printf("\n");
      if (gen_single) {
        std::printf("observed labels: single positive per example\n");
      } else if (gen_keep < 1.0) {
        std::size_t full = count_positives(data.train, false);
        std::size_t obs = count_positives(data.train, true);
        std::printf("retained positives: %zu/%zu = %.4f\n", obs, full,
                    static_cast<double>(obs) / static_cast<double>(full));
      }
      std::printf("wrote %s.train.bin and %s.val.bin\n", prefix.c_str(), prefix.c_str());
      return 0;
    }

    if (tt->parsed()) {
      Dataset data = assemble_data(tt_data, nullptr);
      tt_cfg.method = DistillMethod{};
      tt_cfg.widths = teacher_widths();
      auto t0 = std::chrono::steady_clock::now();
      TrainResult r = train_teacher(tt_cfg, data);
      r.report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      r.report.config_hash = run_hash(tt_data, tt_cfg, "teacher");
      std::string dir = resolve_out(tt_out, "teacher");
      write_run_outputs(dir, "teacher.ckpt", r);
      std::printf("%s\n", report_to_json(r.report).dump(2).c_str());
      std::printf("wrote %s/teacher.ckpt\n", dir.c_str());
      return 0;
    }

    if (ts->parsed()) {
      require_file(ts_teacher);
      Model teacher = load_model(ts_teacher);
      Dataset data = assemble_data(ts_data, &teacher.cfg);
      ts_cfg.method = parse_method(ts_method);
      if (lam->count()) ts_cfg.method.lambda = ts_lambda;
      if (tau->count()) ts_cfg.method.tau = ts_tau;
      if (thr->count()) ts_cfg.method.threshold = ts_threshold;
      ts_cfg.widths = student_widths();
      auto t0 = std::chrono::steady_clock::now();
      TrainResult r = train_student(ts_cfg, teacher, data);
      r.report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      r.report.config_hash = run_hash(ts_data, ts_cfg, "student");
      std::string dir = resolve_out(ts_out, "student");
      write_run_outputs(dir, "student.ckpt", r);
      std::printf("%s\n", report_to_json(r.report).dump(2).c_str());
      std::printf("wrote %s/student.ckpt\n", dir.c_str());
      return 0;
    }

    if (rm->parsed()) {
      MatrixConfig mc;
      bool config_has_out = false;
      if (!rm_config.empty()) {
        require_file(rm_config);
        nlohmann::json j = nlohmann::json::parse(slurp_file(rm_config));
        mc = matrix_config_from_json(j);
        config_has_out = j.contains("out_dir");
      } else {
        mc = default_matrix_config();
      }
      if (!rm_out.empty())
        mc.out_dir = rm_out;
      else if (!config_has_out)
        mc.out_dir = resolve_out("", "matrix");
      if (rm_jobs_opt->count()) mc.jobs = rm_jobs;

      MatrixResult res = run_matrix(mc);

      std::printf("median mAP across seeds\n%-14s", "method");
      for (const LabelSetting& s : mc.settings) std::printf(" %10s", s.name.c_str());
      std::printf("\n");
      for (const std::string& m : mc.methods) {
        std::printf("%-14s", m.c_str());
        for (const LabelSetting& s : mc.settings) {
          try {
            std::printf(" %10.4f", res.median_map(s.name, m));
          } catch (const std::runtime_error&) {
            std::printf(" %10s", "-");
          }
        }
        std::printf("\n");
      }
      std::printf("aggregate: %s\n", (fs::path(mc.out_dir) / "aggregate.csv").string().c_str());
      if (!res.all_ok) {
        std::size_t failed = 0;
        for (const CellResult& c : res.cells)
          if (!c.ok) ++failed;
        for (const CellResult& t : res.teachers)
          if (!t.ok) ++failed;
        std::fprintf(stderr, "error: %zu cell(s) failed; partial results kept under %s\n", failed,
                     mc.out_dir.c_str());
        return 1;
      }
      return 0;
    }

    if (hm->parsed()) {
      require_file(hm_ckpt);
      require_file(hm_data);
      Model model = load_model(hm_ckpt);
      LoadedExamples ex = load_examples(hm_data);
      if (ex.num_classes != model.cfg.num_classes)
        throw std::invalid_argument("checkpoint and dataset disagree on the class count");
      if (ex.height != model.cfg.grid_rows * model.cfg.cell_px ||
          ex.width != model.cfg.grid_cols * model.cfg.cell_px)
        throw std::invalid_argument("checkpoint geometry does not match the dataset images");
      std::string dir = resolve_out(hm_out, "heatmaps");
      std::vector<HeatmapRecord> recs = emit_heatmaps(model, ex.examples, hm_n, hm_threshold, dir);
      std::printf("wrote %zu maps under %s\n", recs.size(), dir.c_str());
      return 0;
    }

    if (gc->parsed()) {
      bool all = true;
      for (const GradCheckResult& r : run_gradient_suite()) {
        std::printf("%-28s max_rel_err=%.3e %s\n", r.name.c_str(), r.max_rel_err, r.pass ? "PASS" : "FAIL");
        all = all && r.pass;
      }
      return all ? 0 : 1;
    }

    if (sl->parsed()) {
      DistillMethod probe = parse_method(sl_method);
      if (!probe.has_distill_term())
        throw std::invalid_argument("sweep-lambda needs a method with a distillation term");
      Dataset data = assemble_data(sl_data, nullptr);
      TrainConfig tc = sl_cfg;
      tc.method = DistillMethod{};
      tc.widths = teacher_widths();
      TrainResult teacher = train_teacher(tc, data);
      std::printf("teacher mAP=%.4f\n", teacher.report.map);
      double best_lambda = sl_lambdas.front(), best_map = -1.0;
      for (double l : sl_lambdas) {
        TrainConfig sc = sl_cfg;
        sc.method = probe;
        sc.method.lambda = l;
        if (sl_tau_opt->count()) sc.method.tau = sl_tau;
        sc.widths = student_widths();
        TrainResult r = train_student(sc, teacher.model, data);
        std::printf("lambda=%g mAP=%.4f\n", l, r.report.map);
        if (r.report.map > best_map) {
          best_map = r.report.map;
          best_lambda = l;
        }
      }
      std::printf("best: lambda=%g mAP=%.4f\n", best_lambda, best_map);
      return 0;
    }
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "error: invalid config: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
