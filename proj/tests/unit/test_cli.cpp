#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "flatmin/cli.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("flatmin_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write(const std::string& name, const json& doc) {
    const auto p = dir_ / name;
    std::ofstream(p) << doc.dump(2);
    return p;
  }
  fs::path write_text(const std::string& name, const std::string& text) {
    const auto p = dir_ / name;
    std::ofstream(p) << text;
    return p;
  }
  int run(std::vector<std::string> args) {
    out_.str("");
    err_.str("");
    return flatmin::cli::run(args, out_, err_);
  }
  int run(const std::string& cmd, const fs::path& config, const fs::path& out) {
    return run({cmd, "--config", config.string(), "--out-dir", out.string()});
  }

  fs::path dir_;
  std::ostringstream out_, err_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

json quadratic_train(const std::string& method) {
  return {{"objective", {{"kind", "quadratic"}, {"diag", {2, 8}}}},
          {"theta0", {1, 1}},
          {"optimizer", {{"method", method}, {"eta0", 0.05}}},
          {"iterations", 30},
          {"seed", 4},
          {"flatness", {{"n_probes", 4}}}};
}

json small_generate() {
  return {{"n_domains", 3}, {"per_domain_n", 45}, {"num_classes", 3}};
}

}  // namespace

TEST_F(Cli, TrainWritesOneRowPerIteration) {
  const auto cfg = write("train.json", quadratic_train("sgd"));
  ASSERT_EQ(run("train", cfg, dir_ / "a"), 0) << err_.str();
  const auto rows = csv_rows(slurp(dir_ / "a" / "run.csv"));
  ASSERT_EQ(rows.size(), 31u);
  EXPECT_EQ(rows[0].size(), 13u);
  EXPECT_EQ(rows[1][3], "1");
  EXPECT_EQ(rows[30][3], "30");
  EXPECT_TRUE(fs::exists(dir_ / "a" / "final_theta.json"));
  EXPECT_TRUE(fs::exists(dir_ / "a" / "resolved_config.json"));
  const auto report = json::parse(slurp(dir_ / "a" / "flatness.json"));
  EXPECT_TRUE(report.contains("config"));
}

TEST_F(Cli, TrainRerunIsByteIdenticalAndEmbeddedConfigReproduces) {
  const auto cfg = write("train.json", quadratic_train("fad"));
  ASSERT_EQ(run("train", cfg, dir_ / "a"), 0);
  ASSERT_EQ(run("train", cfg, dir_ / "b"), 0);
  for (auto f : {"run.csv", "final_theta.json", "flatness.json", "resolved_config.json"}) {
    EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
  }
  ASSERT_EQ(run("train", dir_ / "a" / "resolved_config.json", dir_ / "c"), 0) << err_.str();
  for (auto f : {"run.csv", "final_theta.json", "flatness.json", "resolved_config.json"}) {
    EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "c" / f)) << f;
  }
}

TEST_F(Cli, FadWithZeroBetaLogsTheSgdTrajectory) {
  auto fad = quadratic_train("fad");
  fad["optimizer"]["beta"] = 0.0;
  ASSERT_EQ(run("train", write("fad.json", fad), dir_ / "fad"), 0);
  ASSERT_EQ(run("train", write("sgd.json", quadratic_train("sgd")), dir_ / "sgd"), 0);
  const auto a = csv_rows(slurp(dir_ / "fad" / "run.csv"));
  const auto b = csv_rows(slurp(dir_ / "sgd" / "run.csv"));
  ASSERT_EQ(a.size(), b.size());
  // t, eta_t, rho_t, loss, norm_g0, norm_delta
  for (std::size_t i = 1; i < a.size(); ++i) {
    for (int col : {3, 4, 5, 6, 7, 10}) EXPECT_EQ(a[i][col], b[i][col]) << "row " << i << " col " << col;
  }
  EXPECT_EQ(json::parse(slurp(dir_ / "fad" / "final_theta.json"))["theta"],
            json::parse(slurp(dir_ / "sgd" / "final_theta.json"))["theta"]);
}

TEST_F(Cli, SeedFlagOverridesConfig) {
  const auto cfg = write("train.json", quadratic_train("sgd"));
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--seed", "11", "--out-dir", (dir_ / "a").string()}), 0);
  EXPECT_EQ(json::parse(slurp(dir_ / "a" / "resolved_config.json"))["seed"], 11);
  EXPECT_EQ(csv_rows(slurp(dir_ / "a" / "run.csv"))[1][2], "11");
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run({}), 2);
  EXPECT_EQ(run({"frobnicate"}), 2);
  EXPECT_EQ(run({"train"}), 2);
  EXPECT_EQ(run("train", dir_ / "missing.json", dir_ / "x"), 2);
  EXPECT_EQ(run("train", write_text("bad.json", "{ not json"), dir_ / "x"), 2);
  auto unknown = quadratic_train("sgd");
  unknown["optimiser"] = {{"method", "sgd"}};
  EXPECT_EQ(run("train", write("unknown.json", unknown), dir_ / "x"), 2);
  auto bad_method = quadratic_train("lion");
  EXPECT_EQ(run("train", write("lion.json", bad_method), dir_ / "x"), 2);
  auto dim = quadratic_train("sgd");
  dim["theta0"] = {1, 2, 3};
  EXPECT_EQ(run("train", write("dim.json", dim), dir_ / "x"), 2);
}

TEST_F(Cli, NumericalAbortExitsThreeWithPartialLog) {
  json cfg = {{"objective", {{"kind", "quadratic"}, {"diag", {2, 8}}}},
              {"theta0", {1, 1}},
              {"optimizer", {{"method", "sgd"}, {"eta0", 10.0}}},
              {"iterations", 1000}};
  ASSERT_EQ(run("train", write("boom.json", cfg), dir_ / "a"), 3);
  const auto rows = csv_rows(slurp(dir_ / "a" / "run.csv"));
  EXPECT_GT(rows.size(), 2u);
  EXPECT_LT(rows.size(), 1001u);
}

TEST_F(Cli, FlatnessAtQuadraticOrigin) {
  json cfg = {{"objective", {{"kind", "quadratic"}, {"diag", {2, 8}}}},
              {"theta", {0, 0}},
              {"flatness", {{"rho", 0.1}, {"n_probes", 10}}}};
  ASSERT_EQ(run("flatness", write("f.json", cfg), dir_ / "a"), 0) << err_.str();
  const auto r = json::parse(slurp(dir_ / "a" / "flatness.json"));
  EXPECT_NEAR(r["lambda_max"].get<double>(), 8.0, 1e-6);
  EXPECT_NEAR(r["trace"].get<double>(), 10.0, 1e-9);
  EXPECT_NEAR(r["r0"].get<double>(), 0.04, 1e-6);
  ASSERT_EQ(run("flatness", dir_ / "a" / "resolved_config.json", dir_ / "b"), 0);
  EXPECT_EQ(slurp(dir_ / "a" / "flatness.json"), slurp(dir_ / "b" / "flatness.json"));
}

TEST_F(Cli, FlatnessOfConstantAndFromThetaFile) {
  write("theta.json", {{"theta", {3, 4, 5}}});
  json cfg = {{"objective", {{"kind", "constant"}, {"dim", 3}}}, {"theta_path", (dir_ / "theta.json").string()}};
  ASSERT_EQ(run("flatness", write("f.json", cfg), dir_ / "a"), 0) << err_.str();
  const auto r = json::parse(slurp(dir_ / "a" / "flatness.json"));
  EXPECT_EQ(r["r0"].get<double>(), 0.0);
  EXPECT_EQ(r["r1"].get<double>(), 0.0);
  EXPECT_NEAR(r["lambda_max"].get<double>(), 0.0, 1e-12);
  cfg["theta"] = {1, 2, 3};
  EXPECT_EQ(run("flatness", write("both.json", cfg), dir_ / "b"), 2);
  json dim = {{"objective", {{"kind", "quadratic"}, {"diag", {2, 8}}}}, {"theta", {0, 0, 0}}};
  EXPECT_EQ(run("flatness", write("dim.json", dim), dir_ / "c"), 2);
}

TEST_F(Cli, ConvergeRefusesConstantSchedule) {
  json cfg = {{"objective", {{"kind", "quadratic"}, {"diag", {2, 8}}}},
              {"theta0", {1, 1}},
              {"optimizer", {{"method", "fad"}}},
              {"iterations", 50}};
  EXPECT_EQ(run("converge", write("c.json", cfg), dir_ / "a"), 2);
  EXPECT_NE(err_.str().find("inverse_sqrt"), std::string::npos);
}

TEST_F(Cli, ConvergeFromExactMinimum) {
  json cfg = {{"objective", {{"kind", "quadratic"}, {"diag", {2, 8}}}},
              {"theta0", {0, 0}},
              {"optimizer", {{"method", "fad"}, {"beta", 0.0}, {"schedule", "inverse_sqrt"}}},
              {"iterations", 50}};
  ASSERT_EQ(run("converge", write("c.json", cfg), dir_ / "a"), 0) << err_.str();
  const auto r = json::parse(slurp(dir_ / "a" / "convergence.json"));
  EXPECT_EQ(r["cumulative"].back().get<double>(), 0.0);
  EXPECT_EQ(r["c1"].get<double>(), 0.0);
  EXPECT_EQ(r["c2"].get<double>(), 0.0);
  cfg["iterations"] = 5;
  EXPECT_EQ(run("converge", write("short.json", cfg), dir_ / "b"), 3);
}

TEST_F(Cli, ConvergeOnMlpReportsFit) {
  json cfg = {{"objective",
               {{"kind", "mlp"}, {"hidden", {4}}, {"dataset", {{"generate", small_generate()}, {"seed", 1}}}}},
              {"optimizer", {{"method", "fad"}, {"eta0", 0.2}, {"schedule", "inverse_sqrt"}}},
              {"iterations", 200},
              {"batch_size", 16}};
  ASSERT_EQ(run("converge", write("c.json", cfg), dir_ / "a"), 0) << err_.str();
  const auto r = json::parse(slurp(dir_ / "a" / "convergence.json"));
  for (auto key : {"c1", "c2", "residual", "r_squared", "min_delta_sq"}) EXPECT_TRUE(r.contains(key)) << key;
  EXPECT_TRUE(r["schedule_ok"].get<bool>());
}

TEST_F(Cli, BenchSingleMethodTableAndReplay) {
  json cfg = {{"dataset", {{"generate", small_generate()}, {"seed", 2}}},
              {"methods", {{{"method", "sgd"}}}},
              {"protocol",
               {{"n_hparam_trials", 1},
                {"seeds_per_trial", 1},
                {"iterations", 30},
                {"search_space", {{"lr_log10", {-2.0, -1.0}}}},
                {"flatness", {{"n_random", 2}, {"n_ascent_steps", 5}, {"n_probes", 4}}}}},
              {"seed", 5}};
  ASSERT_EQ(run("bench", write("b.json", cfg), dir_ / "a"), 0) << err_.str();
  const auto rows = csv_rows(slurp(dir_ / "a" / "bench.csv"));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"test_domain", "sgd", "sgd_lambda_max"}));
  EXPECT_TRUE(fs::exists(dir_ / "a" / "selected"));
  const auto embedded = json::parse(slurp(dir_ / "a" / "bench.json"))["config"];
  ASSERT_EQ(run("bench", write("replay.json", embedded), dir_ / "b"), 0) << err_.str();
  for (auto f : {"bench.json", "bench.csv", "resolved_config.json"}) {
    EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
  }
}

TEST_F(Cli, BenchFromDatasetFile) {
  json data = {{"inputs", json::array()}, {"labels", json::array()}, {"domain_ids", json::array()}, {"num_classes", 2}};
  for (int d = 0; d < 3; ++d) {
    for (int i = 0; i < 20; ++i) {
      const double x = (i % 2 ? 1.0 : -1.0) + 0.01 * i + d;
      data["inputs"].push_back({x, 0.5 * d});
      data["labels"].push_back(i % 2);
      data["domain_ids"].push_back(d + 10);
    }
  }
  write("data.json", data);
  json cfg = {{"dataset", {{"path", (dir_ / "data.json").string()}}},
              {"methods", {{{"method", "adam"}}}},
              {"protocol",
               {{"n_hparam_trials", 1},
                {"seeds_per_trial", 1},
                {"iterations", 20},
                {"flatness", {{"n_random", 1}, {"n_ascent_steps", 2}, {"n_probes", 2}}}}}};
  ASSERT_EQ(run("bench", write("b.json", cfg), dir_ / "a"), 0) << err_.str();
  EXPECT_EQ(csv_rows(slurp(dir_ / "a" / "bench.csv")).size(), 4u);
}

TEST_F(Cli, BenchAllTrialsDivergeExitsThree) {
  json cfg = {{"dataset", {{"generate", small_generate()}}},
              {"methods", {{{"method", "sgd"}}}},
              {"protocol",
               {{"n_hparam_trials", 1},
                {"seeds_per_trial", 1},
                {"iterations", 30},
                {"search_space", {{"lr_log10", {300.0, 301.0}}}}}}};
  EXPECT_EQ(run("bench", write("b.json", cfg), dir_ / "a"), 3);
}

TEST_F(Cli, SweepZeroRadiusMatchesBaseOptimizer) {
  auto cfg = [&](const std::string& method) {
    return json{{"dataset", {{"generate", small_generate()}, {"seed", 3}}},
                {"optimizer", {{"method", method}, {"eta0", 0.1}}},
                {"model", {{"hidden", {4}}}},
                {"iterations", 60},
                {"parameter", "rho"},
                {"values", {0.0}},
                {"repeats", 1},
                {"flatness", {{"n_probes", 2}}}};
  };
  ASSERT_EQ(run("sweep", write("fad.json", cfg("fad")), dir_ / "fad"), 0) << err_.str();
  ASSERT_EQ(run("sweep", write("sgd.json", cfg("sgd")), dir_ / "sgd"), 0) << err_.str();
  const auto a = csv_rows(slurp(dir_ / "fad" / "sweep.csv"));
  const auto b = csv_rows(slurp(dir_ / "sgd" / "sweep.csv"));
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[0], (std::vector<std::string>{"value", "test_accuracy", "lambda_max", "wall_ms", "status"}));
  EXPECT_EQ(a[1][1], b[1][1]);
  EXPECT_EQ(a[1][2], b[1][2]);
  EXPECT_EQ(a[1][4], "ok");
}

TEST_F(Cli, SweepMarksInvalidValues) {
  json cfg = {{"dataset", {{"generate", small_generate()}}},
              {"optimizer", {{"method", "fad"}}},
              {"iterations", 10},
              {"parameter", "alpha"},
              {"values", {0.5, 1.5}},
              {"repeats", 1},
              {"flatness", {{"n_probes", 2}}}};
  ASSERT_EQ(run("sweep", write("s.json", cfg), dir_ / "a"), 0) << err_.str();
  const auto rows = csv_rows(slurp(dir_ / "a" / "sweep.csv"));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1][4], "ok");
  EXPECT_EQ(rows[2][4].rfind("config_error", 0), 0u);
  cfg["parameter"] = "eta";
  EXPECT_EQ(run("sweep", write("bad.json", cfg), dir_ / "b"), 2);
}
