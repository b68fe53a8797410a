#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "fea/error.hpp"
#include "fea/experiment.hpp"
#include "tiny_config.hpp"

using namespace fea;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fea_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::map<std::string, std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  std::vector<std::string> cols;
  std::stringstream hs(line);
  for (std::string c; std::getline(hs, c, ',');) cols.push_back(c);
  std::vector<std::map<std::string, std::string>> rows;
  while (std::getline(in, line)) {
    std::stringstream ls(line);
    std::map<std::string, std::string> row;
    std::string v;
    for (const auto& c : cols) {
      std::getline(ls, v, ',');
      row[c] = v;
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

TEST_CASE("config validation names every bad field at once") {
  json j = to_json(ExperimentConfig{});
  j["data"]["synthetic"]["relations"] = -3;
  j["train"]["batch_size"] = 0;
  j["train"]["lr_head"] = "fast";
  j["variants"] = json::array({"FEA", "A9"});
  j["surprise"] = 1;
  try {
    experiment_config_from_json(j);
    FAIL("expected a validation error");
  } catch (const Error& e) {
    const std::string msg = e.what();
    CHECK(e.kind() == ErrorKind::kValidation);
    for (const char* k : {"data.synthetic: relations", "train.batch_size", "train.lr_head",
                          "variants", "surprise"}) {
      CAPTURE(k);
      CHECK(msg.find(k) != std::string::npos);
    }
  }
}

TEST_CASE("the resolved config round-trips through JSON") {
  const ExperimentConfig c = tiny_experiment("x");
  const ExperimentConfig back = experiment_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(grid_cells(c).size() == 4 * 2);
  CHECK(cell_name({Variant::kA2RemoveFA, 3, 20}) == "A2_s3_b20");
}

TEST_CASE("identical cells give identical report bytes") {
  const ExperimentConfig c = tiny_experiment("unused");
  const Cell cell{Variant::kFEA, 1, 3};
  const json a = run_cell(c, cell), b = run_cell(c, cell);
  CHECK(a.dump() == b.dump());
  CHECK(a["schema_version"] == kReportSchemaVersion);
  CHECK(a["tasks"].size() == 3);
}

TEST_CASE("aggregate tables agree with a recomputation from the reports") {
  const fs::path out = scratch("grid");
  const ExperimentConfig c = tiny_experiment(out.string());
  const GridOutcome g = run_grid(c, 2);
  CHECK(g.failures.empty());
  REQUIRE(g.reports.size() == 8);
  Aggregate agg = load_reports(g.reports);
  write_aggregate(agg, out.string());

  std::map<std::string, std::vector<double>> finals;
  for (const auto& p : g.reports) {
    const json r = json::parse(slurp(p));
    finals[r["cell"]["variant"].get<std::string>()].push_back(
        r["tasks"].back()["accuracy"].get<double>());
    CHECK(r["final"]["accuracy"] == r["tasks"].back()["accuracy"]);
  }
  const auto grid = read_csv(out / "accuracy_grid.csv");
  REQUIRE(grid.size() == 4);
  for (const auto& row : grid) {
    const auto& xs = finals.at(row.at("variant"));
    CHECK(std::stod(row.at("T3")) == doctest::Approx((xs[0] + xs[1]) / 2).epsilon(1e-12));
    CHECK(row.at("seeds") == "2");
  }
  CHECK(read_csv(out / "accuracy.csv").size() == 8 * 3);
  const std::string md = slurp(out / "summary.md");
  CHECK(md.find("Direction checks") != std::string::npos);
  CHECK(fs::exists(out / "timings" / "FEA_s0_b3.json"));
  fs::remove_all(out);
}

TEST_CASE("reports from another schema version are refused") {
  const fs::path dir = scratch("version");
  fs::create_directories(dir);
  std::ofstream(dir / "old.json") << R"({"schema_version": 0})";
  try {
    load_reports({(dir / "old.json").string()});
    FAIL("expected a version error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kVersion);
  }
  fs::remove_all(dir);
}

TEST_CASE("direction checks follow the reports they are given") {
  auto report = [](const char* v, int seed, double acc, double latter, double grad) {
    json r;
    r["schema_version"] = kReportSchemaVersion;
    r["cell"] = {{"variant", v}, {"seed", seed}, {"memory_size", 10}};
    r["final"] = {{"accuracy", acc},
                  {"taxonomy",
                   {{"latter_share", latter}, {"former_share", 0.1}, {"inner_share", 0.05}}}};
    r["bt_grad_norm_mean"] = grad;
    r["probes"] = json::object();
    return r;
  };
  std::vector<json> rs;
  for (int s = 0; s < 5; ++s) {
    rs.push_back(report("FEA", s, 0.90, 0.5, 1.0));
    rs.push_back(report("A2", s, 0.88, 0.5, 0.2));
    rs.push_back(report("A1", s, 0.80, 0.8, 0.0));
  }
  std::map<std::string, bool> got;
  for (const auto& c : direction_checks(rs)) got[c.name] = c.pass;
  CHECK(got.at("FEA > A2 > A1 (B=10)"));
  CHECK(got.at("FEA - A1 >= 5 points (B=10)"));
  CHECK(got.at("FEA - A2 >= 1 point (B=10)"));
  CHECK(got.at("FEA BT gradient norm >= 2x A2 in >= 80% of seeds (B=10)"));
  CHECK(got.at("A1 latter share > FEA latter share in >= 80% of seeds (B=10)"));
  rs[1] = report("A2", 0, 0.95, 0.5, 0.9);
  rs[4] = report("A2", 1, 0.95, 0.5, 0.9);
  got.clear();
  for (const auto& c : direction_checks(rs)) got[c.name] = c.pass;
  CHECK_FALSE(got.at("FEA > A2 > A1 (B=10)"));
  CHECK_FALSE(got.at("FEA BT gradient norm >= 2x A2 in >= 80% of seeds (B=10)"));
}

TEST_CASE("a checkpoint can be probed again after the run") {
  const fs::path out = scratch("probe");
  ExperimentConfig c = tiny_experiment(out.string());
  c.variants = {Variant::kA1RemoveBT};
  c.seeds = {0};
  c.save_checkpoints = true;
  const GridOutcome g = run_grid(c, 1);
  REQUIRE(g.failures.empty());
  const json stored = json::parse(slurp(g.reports.at(0)));
  const fs::path ck = out / "checkpoints" / "A1_s0_b3.ckpt";
  REQUIRE(fs::exists(ck));
  const json p = probe_checkpoint(ck.string(), "ubc", std::nullopt, (out / "p").string());
  CHECK(p["accuracy"] == stored["probes"]["ubc"]["accuracy"]);
  CHECK(p["original"] == stored["probes"]["ubc"]["original"]);
  CHECK_THROWS_AS(probe_checkpoint(ck.string(), "nope", std::nullopt, out.string()), Error);
  fs::remove_all(out);
}

TEST_CASE("probing leaves the checkpoint untouched and a single report makes a one-row grid") {
  const fs::path out = scratch("single");
  ExperimentConfig c = tiny_experiment(out.string());
  c.variants = {Variant::kFEA};
  c.seeds = {0};
  c.save_checkpoints = true;
  const GridOutcome g = run_grid(c, 1);
  REQUIRE(g.reports.size() == 1);
  const fs::path ck = out / "checkpoints" / "FEA_s0_b3.ckpt";
  const std::string before = slurp(ck);
  const json b = probe_checkpoint(ck.string(), "boundary", std::nullopt, (out / "p").string());
  CHECK(slurp(ck) == before);
  REQUIRE(b["pairs"].size() == 1);
  CHECK(fs::exists(out / "p" / b["pairs"][0]["csv"].get<std::string>()));
  Aggregate agg = load_reports(g.reports);
  write_aggregate(agg, (out / "agg").string());
  const auto grid = read_csv(out / "agg" / "accuracy_grid.csv");
  REQUIRE(grid.size() == 1);
  const json r = json::parse(slurp(g.reports[0]));
  CHECK(grid[0].at("T1") == r["tasks"][0]["accuracy"].dump());
  CHECK(r["config"] == to_json(c));
  fs::remove_all(out);
}

TEST_CASE("a config without variants or seeds is rejected") {
  json j = to_json(ExperimentConfig{});
  j["variants"] = json::array();
  j["seeds"] = json::array();
  try {
    experiment_config_from_json(j);
    FAIL("expected a validation error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("variants") != std::string::npos);
    CHECK(std::string(e.what()).find("seeds") != std::string::npos);
  }
}
