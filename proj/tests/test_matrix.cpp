#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mlkd/matrix.hpp"
#include "mlkd/util.hpp"

using namespace mlkd;
namespace fs = std::filesystem;

namespace {

// Small enough to train in milliseconds, large enough to evaluate.
MatrixConfig tiny_config(const std::string& out_dir) {
  MatrixConfig cfg;
  cfg.data.num_classes = 4;
  cfg.data.grid_rows = 3;
  cfg.data.grid_cols = 3;
  cfg.data.cell_px = 6;
  cfg.data.glyph_density = 0.5;
  cfg.data.noise_sigma = 0.3;
  cfg.data.n_train = 60;
  cfg.data.n_val = 30;
  cfg.data.seed = 11;
  cfg.settings = {parse_setting("1.0"), parse_setting("single")};
  cfg.methods = {"none", "soft_target", "hard_target"};
  cfg.seeds = {1, 2};
  cfg.train.epochs = 2;
  cfg.train.batch_size = 16;
  cfg.out_dir = out_dir;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("parse_setting accepts ratios, full, and single") {
  LabelSetting s = parse_setting("single");
  CHECK(s.single);
  CHECK(s.name == "single");

  s = parse_setting("0.75");
  CHECK_FALSE(s.single);
  CHECK(s.keep_ratio == 0.75);
  CHECK(s.name == "0.75");

  s = parse_setting("full");
  CHECK_FALSE(s.single);
  CHECK(s.keep_ratio == 1.0);

  CHECK_THROWS_AS(parse_setting("1.5"), std::invalid_argument);
  CHECK_THROWS_AS(parse_setting("0"), std::invalid_argument);
  CHECK_THROWS_AS(parse_setting("abc"), std::invalid_argument);
  CHECK_THROWS_AS(parse_setting("0.75x"), std::invalid_argument);
}

TEST_CASE("median is the sorted middle, averaging even sizes") {
  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, 3.0, 2.0}) == 2.5);
  CHECK(median({7.0}) == 7.0);
  CHECK(median({0.5, 0.1, 0.9, 0.3, 0.7}) == 0.5);
  CHECK_THROWS_AS(median({}), std::invalid_argument);
}

TEST_CASE("default config matches the documented recipe") {
  MatrixConfig cfg = default_matrix_config();
  REQUIRE(cfg.settings.size() == 4);
  CHECK(cfg.settings[0].name == "1.0");
  CHECK(cfg.settings[1].name == "0.75");
  CHECK(cfg.settings[2].name == "0.40");
  CHECK(cfg.settings[3].name == "single");
  CHECK(cfg.settings[3].single);
  REQUIRE(cfg.methods.size() == 7);
  CHECK(cfg.methods == std::vector<std::string>{"none", "soft_target", "hard_target", "feature",
                                                "attention_map", "cams_noprob", "cams"});
  CHECK(cfg.seeds == std::vector<int>{1, 2, 3, 4, 5});
  CHECK(cfg.hard_threshold == 0.25);
  CHECK(cfg.train.epochs == 20);
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("config validation rejects bad recipes") {
  MatrixConfig cfg = default_matrix_config();
  cfg.methods.clear();
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  cfg = default_matrix_config();
  cfg.methods.push_back("distill_harder");
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  cfg = default_matrix_config();
  cfg.jobs = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  cfg = default_matrix_config();
  cfg.hard_threshold = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  cfg = default_matrix_config();
  cfg.seeds.clear();
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("config json round-trips and rejects unknown keys") {
  MatrixConfig cfg = tiny_config("somewhere");
  nlohmann::json j = matrix_config_to_json(cfg);
  MatrixConfig back = matrix_config_from_json(j);
  CHECK(matrix_config_to_json(back).dump() == j.dump());

  // partial override keeps defaults elsewhere
  MatrixConfig partial = matrix_config_from_json(nlohmann::json{{"seeds", {3}}});
  CHECK(partial.seeds == std::vector<int>{3});
  CHECK(partial.methods.size() == 7);
  CHECK(partial.data.n_train == 2000);

  CHECK_THROWS_AS(matrix_config_from_json(nlohmann::json{{"seed", 3}}), std::invalid_argument);
  CHECK_THROWS_AS(matrix_config_from_json(nlohmann::json{{"data", {{"sigma", 1.0}}}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(matrix_config_from_json(nlohmann::json{{"train", {{"momentum", 0.9}}}}),
                  std::invalid_argument);
}

TEST_CASE("run_matrix fills every cell, writes artifacts, reruns byte-identically") {
  fs::path dir_a = fresh_dir("mlkd_matrix_a");
  MatrixConfig cfg = tiny_config(dir_a.string());
  MatrixResult res = run_matrix(cfg);

  const std::size_t S = 2, M = 3, E = 2;
  REQUIRE(res.cells.size() == S * M * E);
  REQUIRE(res.teachers.size() == S * E);
  CHECK(res.all_ok);

  // setting-major, then method, then seed
  CHECK(res.cells[0].setting == "1.0");
  CHECK(res.cells[0].method == "none");
  CHECK(res.cells[0].seed == 1);
  CHECK(res.cells[1].seed == 2);
  CHECK(res.cells[2].method == "soft_target");
  CHECK(res.cells[M * E].setting == "single");
  for (const CellResult& c : res.cells) {
    CHECK(c.ok);
    CHECK(c.report.map > 0.0);
    CHECK(c.report.map <= 1.0);
    CHECK(c.report.method == c.method);
    CHECK(c.report.seed == c.seed);
    CHECK(c.report.wall_time_s > 0.0);
  }
  for (const CellResult& t : res.teachers) {
    CHECK(t.ok);
    CHECK(t.method == "teacher");
    CHECK(t.report.method == "teacher");
  }

  // artifacts on disk
  CHECK(fs::exists(dir_a / "resolved_config.json"));
  CHECK(fs::exists(dir_a / "aggregate.csv"));
  CHECK(fs::exists(dir_a / "teachers" / "teacher_1.0_s1.ckpt"));
  CHECK(fs::exists(dir_a / "teachers" / "teacher_single_s2.report.json"));
  CHECK(fs::exists(dir_a / "cells" / "1.0_none_s1.ckpt"));
  CHECK(fs::exists(dir_a / "cells" / "single_hard_target_s2.report.json"));
  CHECK(fs::exists(dir_a / "cells" / "single_soft_target_s1.steps.jsonl"));

  // aggregate: header + per-cell rows + one median row per (setting, method)
  std::string csv = slurp(dir_a / "aggregate.csv");
  CHECK(csv == res.aggregate_csv);
  CHECK(csv.rfind("ratio,method,seed,map,top1,wall_time_s,config_hash\n", 0) == 0);
  std::size_t lines = 0;
  for (char ch : csv)
    if (ch == '\n') ++lines;
  CHECK(lines == 1 + S * M * (E + 1));
  CHECK(csv.find(",median,") != std::string::npos);

  // the median accessor agrees with a hand computation
  std::vector<double> maps;
  for (std::size_t ei = 0; ei < E; ++ei) maps.push_back(res.cells[ei].report.map);
  CHECK(res.median_map("1.0", "none") == median(maps));
  CHECK_THROWS_AS(res.median_map("1.0", "cams"), std::runtime_error);

  // rerun: aggregate must be byte-identical
  fs::path dir_b = fresh_dir("mlkd_matrix_b");
  cfg.out_dir = dir_b.string();
  MatrixResult res2 = run_matrix(cfg);
  CHECK(res2.aggregate_csv == res.aggregate_csv);
  CHECK(slurp(dir_b / "aggregate.csv") == slurp(dir_a / "aggregate.csv"));

  // per-cell reports agree except for wall time
  for (std::size_t i = 0; i < res.cells.size(); ++i) {
    CHECK(res2.cells[i].report.map == res.cells[i].report.map);
    CHECK(res2.cells[i].report.config_hash == res.cells[i].report.config_hash);
  }

  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}

TEST_CASE("hard_threshold is part of the hard_target cell identity") {
  fs::path dir_a = fresh_dir("mlkd_matrix_thr_a");
  MatrixConfig cfg = tiny_config(dir_a.string());
  cfg.settings = {parse_setting("single")};
  cfg.methods = {"hard_target"};
  cfg.seeds = {1};
  MatrixResult res_a = run_matrix(cfg);

  fs::path dir_b = fresh_dir("mlkd_matrix_thr_b");
  cfg.out_dir = dir_b.string();
  cfg.hard_threshold = 0.9;
  MatrixResult res_b = run_matrix(cfg);

  REQUIRE(res_a.cells.size() == 1);
  REQUIRE(res_b.cells.size() == 1);
  CHECK(res_a.cells[0].report.config_hash != res_b.cells[0].report.config_hash);
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}

TEST_CASE("methods=[none] reproduces baseline rows only") {
  fs::path dir = fresh_dir("mlkd_matrix_none");
  MatrixConfig cfg = tiny_config(dir.string());
  cfg.methods = {"none"};
  MatrixResult res = run_matrix(cfg);
  CHECK(res.all_ok);
  std::string csv = res.aggregate_csv;
  CHECK(csv.find("none") != std::string::npos);
  for (const char* other : {"soft_target", "hard_target", "feature", "attention_map", "cams", "teacher"})
    CHECK(csv.find(other) == std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("jobs > 1 produces the same bytes as serial") {
  fs::path dir_a = fresh_dir("mlkd_matrix_serial");
  MatrixConfig cfg = tiny_config(dir_a.string());
  MatrixResult serial = run_matrix(cfg);

  fs::path dir_b = fresh_dir("mlkd_matrix_jobs");
  cfg.out_dir = dir_b.string();
  cfg.jobs = 4;
  MatrixResult threaded = run_matrix(cfg);

  CHECK(threaded.aggregate_csv == serial.aggregate_csv);
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}
