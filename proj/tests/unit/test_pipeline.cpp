#include <doctest.h>

#include <filesystem>
#include <nlohmann/json.hpp>

#include "nbisect/error.hpp"
#include "nbisect/io.hpp"
#include "nbisect/pipeline.hpp"

using namespace nbisect;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("nbisect_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

json small_plan() {
  return json::parse(R"({
    "train_categories": ["const_size"],
    "test_categories": ["const_size"],
    "models": [{"family": "mlp", "mlp_hidden": [32, 16], "embedding_dim": 16}],
    "stimulus": {"resolution": 24},
    "train": {"steps": 40, "seeds": [1, 2]},
    "data": {"train_count": 6, "test_count": 5},
    "analysis": {"bootstrap_resamples": 100, "tsne_iterations": 260, "null_shuffles": 50}
  })");
}

void run(const json& j, const fs::path& out, unsigned jobs = 1) {
  const std::string text = j.dump();
  pipeline::run_experiment(harness::parse_plan(text), text, out, {jobs});
}

json read_json(const fs::path& p) { return json::parse(io::read_file(p)); }

}  // namespace

TEST_CASE("a one-cell plan yields one curve and one error row") {
  const fs::path out = scratch("one");
  run(small_plan(), out);
  const json s = read_json(out / "summary.json");
  CHECK(s["curves"].size() == 1);
  CHECK(s["error_table"].size() == 1);
  CHECK(s["seed_shapes"].size() == 2);
  CHECK(s["training"].size() == 2);
  CHECK(s["ordering"].size() == 1);
  CHECK(s["discriminability"]["comparisons"] == 21);
  CHECK(fs::exists(out / "curves/mlp/const_size__const_size.svg"));
  CHECK(fs::exists(out / "runs/mlp/const_size/seed_2/checkpoint.bin"));
  CHECK(fs::exists(out / "tables/errors.csv"));

  const json m = read_json(out / "manifest.json");
  CHECK(m["complete"] == true);
  CHECK(m["checkpoints"].size() == 2);
  CHECK(m["plan_hash"] == s["plan_hash"]);
  CHECK(m["datasets"].size() == 2);
  for (const auto& a : m["artifacts"]) CHECK(io::git_hash_file(out / a["path"].get<std::string>()) == a["hash"]);

  const std::string report = io::read_file(out / "report.md");
  CHECK(report.find("| const_size |") != std::string::npos);
  pipeline::run_report(out);
  CHECK(io::read_file(out / "report.md") == report);
}

TEST_CASE("summary is identical across job counts") {
  json j = small_plan();
  j["train_categories"] = {"const_size", "const_area"};
  j["test_categories"] = {"const_size", "const_area"};
  const fs::path a = scratch("jobs1"), b = scratch("jobs3");
  run(j, a, 1);
  run(j, b, 3);
  CHECK(io::read_file(a / "summary.json") == io::read_file(b / "summary.json"));
  CHECK(io::read_file(a / "records/mlp.csv") == io::read_file(b / "records/mlp.csv"));
  CHECK(io::read_file(a / "report.md") == io::read_file(b / "report.md"));
}

TEST_CASE("six by six transfer grid") {
  json j = small_plan();
  j["train_categories"] = "all";
  j["test_categories"] = "all";
  j["train"]["steps"] = 10;
  j["train"]["seeds"] = {4};
  j["analysis"]["embeddings"] = false;
  const fs::path out = scratch("grid");
  run(j, out);
  int svgs = 0;
  for (const auto& e : fs::directory_iterator(out / "curves/mlp")) svgs += e.path().extension() == ".svg";
  CHECK(svgs == 36);
  const json s = read_json(out / "summary.json");
  CHECK(s["curves"].size() == 36);
  CHECK(s["error_table"].size() == 6);
  CHECK(s["discriminability"].contains("skipped"));
  const auto grid = io::parse_csv(io::read_file(out / "transfer/mlp_shapes.csv"));
  CHECK(grid.size() == 7);  // header plus six training categories
}

TEST_CASE("holdout mode tests each held-out category once") {
  json j = small_plan();
  j["mode"] = "holdout";
  j["train_categories"] = "all";
  j["test_categories"] = {"const_area", "const_circ"};
  j["analysis"]["embeddings"] = false;
  const fs::path out = scratch("holdout");
  run(j, out);
  const json s = read_json(out / "summary.json");
  REQUIRE(s["curves"].size() == 2);
  CHECK(s["curves"][0]["train"] == "holdout_const_area");
  CHECK(s["curves"][0]["test"] == "const_area");
  CHECK(s["error_table"].size() == 2);
  CHECK(fs::exists(out / "runs/mlp/holdout_const_circ/seed_1/loss.csv"));
}

TEST_CASE("manifest checks and exit codes") {
  const fs::path empty = scratch("empty");
  fs::create_directories(empty);
  CHECK_THROWS_AS(pipeline::run_report(empty), ManifestInvalid);

  const fs::path out = scratch("tamper");
  run(small_plan(), out);
  io::write_file(out / "records/mlp.csv", "model\n");
  CHECK_THROWS_AS(pipeline::run_report(out), ManifestInvalid);

  CHECK(pipeline::exit_code_for(PlanInvalid("x")) == 2);
  CHECK(pipeline::exit_code_for(PlacementInfeasible("x")) == 3);
  CHECK(pipeline::exit_code_for(ManifestInvalid("x")) == 4);
  CHECK(pipeline::exit_code_for(Divergence("loss", 3, 1)) == 5);
  CHECK(pipeline::exit_code_for(std::runtime_error("x")) == 1);
}

TEST_CASE("a diverging run leaves an incomplete manifest") {
  json j = small_plan();
  j["models"][0]["optimizer"] = "sgd";
  j["models"][0]["learning_rate"] = 1e200;
  const fs::path out = scratch("diverge");
  CHECK_THROWS_AS(run(j, out), Divergence);
  const json m = read_json(out / "manifest.json");
  CHECK(m["complete"] == false);
  CHECK(m["failed_stage"] == "train");
  CHECK_FALSE(fs::exists(out / "summary.json"));
  pipeline::run_report(out);
  CHECK(io::read_file(out / "report.md").find("incomplete") != std::string::npos);
}

TEST_CASE("generate exports both splits with hashes") {
  json j = small_plan();
  j["test_categories"] = {"const_size", "const_area_contour"};
  const std::string text = j.dump();
  const fs::path out = scratch("generate");
  pipeline::run_generate(harness::parse_plan(text), text, out);
  CHECK(fs::exists(out / "datasets/const_size/train/manifest.json"));
  CHECK(fs::exists(out / "datasets/const_area_contour/test/features.csv"));
  const json m = read_json(out / "manifest.json");
  CHECK(m["datasets"].size() == 4);
  CHECK(m["complete"] == true);
  pipeline::run_report(out);
}
