#include "nbisect/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <map>
#include <set>

#include "nbisect/embed.hpp"
#include "nbisect/error.hpp"
#include "nbisect/io.hpp"
#include "nbisect/parallel.hpp"
#include "nbisect/psychometrics.hpp"
#include "nbisect/stats.hpp"

namespace nbisect::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using stimgen::Category;

namespace {

constexpr std::uint64_t kHoldoutCurveKey = 0x401D;
constexpr std::uint64_t kNullKey = 0x0DE7;

std::string cat(Category c) { return std::string(stimgen::to_string(c)); }

std::string rel(const fs::path& p, const fs::path& root) { return fs::relative(p, root).generic_string(); }

// Tracks stage timings and writes manifest.json. Timings live here and never
// in summary.json, which must be identical across runs.
class Manifest {
 public:
  Manifest(fs::path root, const std::string& plan_text, std::string kind) : root_(std::move(root)) {
    doc_["tool_version"] = kToolVersion;
    doc_["kind"] = std::move(kind);
    doc_["plan_hash"] = io::git_hash(plan_text);
    doc_["datasets"] = json::array();
    doc_["checkpoints"] = json::array();
    doc_["stages"] = json::array();
  }

  template <class F>
  void stage(const std::string& name, F&& body) {
    spdlog::info("stage {}", name);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      body();
    } catch (const std::exception& e) {
      record(name, t0, "failed");
      doc_["complete"] = false;
      doc_["failed_stage"] = name;
      doc_["error"] = e.what();
      save();
      throw;
    }
    record(name, t0, "ok");
  }

  void dataset(Category c, const std::string& split, const stimgen::Dataset& ds) {
    doc_["datasets"].push_back(
        {{"category", cat(c)}, {"split", split}, {"images", ds.size()}, {"hash", io::git_hash(stimgen::serialize(ds))}});
  }

  void checkpoint(const fs::path& p) { doc_["checkpoints"].push_back(rel(p, root_)); }

  void finish() {
    doc_["complete"] = true;
    save();
  }

 private:
  void record(const std::string& name, std::chrono::steady_clock::time_point t0, const char* status) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    doc_["stages"].push_back({{"name", name}, {"status", status}, {"seconds", secs}});
  }

  void save() {
    // Every regular file under the run directory except the manifest and
    // the report, which is derived and may be regenerated.
    std::vector<fs::path> files;
    if (fs::exists(root_))
      for (const auto& e : fs::recursive_directory_iterator(root_))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    json arts = json::array();
    for (const fs::path& f : files) {
      const std::string r = rel(f, root_);
      if (r == "manifest.json" || r == "report.md") continue;
      arts.push_back({{"path", r}, {"hash", io::git_hash_file(f)}});
    }
    doc_["artifacts"] = std::move(arts);
    io::write_file(root_ / "manifest.json", doc_.dump(2) + "\n");
  }

  fs::path root_;
  json doc_;
};

json curve_json(const psych::PsychometricCurve& c, const psych::ShapeResult& shape) {
  json j;
  j["model"] = c.model;
  j["train"] = c.train_category;
  j["test"] = c.test_category;
  j["seeds"] = c.seeds;
  json p = json::array(), lo = json::array(), hi = json::array();
  for (const auto& pt : c.points) {
    p.push_back(pt.proportion_many);
    lo.push_back(pt.ci_low);
    hi.push_back(pt.ci_high);
  }
  j["proportion_many"] = std::move(p);
  j["ci_low"] = std::move(lo);
  j["ci_high"] = std::move(hi);
  j["shape"] = psych::to_string(shape.shape);
  j["residual"] = shape.residual;
  j["spearman"] = shape.spearman;
  try {
    const psych::LogisticFit f = psych::fit_logistic(c.proportions());
    j["logistic"] = {{"midpoint", f.midpoint}, {"spread", f.spread}, {"residual", f.residual}};
  } catch (const DegenerateFit&) {
    j["logistic"] = nullptr;
  }
  return j;
}

// Everything produced for one model while its networks are in memory.
struct ModelOutputs {
  std::vector<psych::ResponseRecord> records;
  json training = json::array();
  json ordering = json::array();
};

struct Cell {
  std::string train;
  std::string test;
  std::uint64_t seed;
};

}  // namespace

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const PlanInvalid*>(&e)) return 2;
  if (dynamic_cast<const PlacementInfeasible*>(&e)) return 3;
  if (dynamic_cast<const ManifestInvalid*>(&e)) return 4;
  if (dynamic_cast<const Divergence*>(&e)) return 5;
  return 1;
}

void run_generate(const harness::ExperimentPlan& plan, const std::string& plan_text, const fs::path& out,
                  const RunOptions& options) {
  fs::create_directories(out);
  io::write_file(out / "plan.json", plan_text);
  Manifest manifest(out, plan_text, "generate");
  std::vector<Category> cats = plan.train_categories;
  for (Category c : plan.test_categories)
    if (std::find(cats.begin(), cats.end(), c) == cats.end()) cats.push_back(c);
  for (Category c : cats)
    manifest.stage("generate " + cat(c), [&] {
      const stimgen::Dataset train = harness::make_train_dataset(plan, c, options.jobs);
      stimgen::export_dataset(train, out / "datasets" / cat(c) / "train");
      manifest.dataset(c, "train", train);
      const stimgen::Dataset test = harness::make_test_dataset(plan, c, options.jobs);
      stimgen::export_dataset(test, out / "datasets" / cat(c) / "test");
      manifest.dataset(c, "test", test);
    });
  manifest.finish();
}

void run_experiment(const harness::ExperimentPlan& plan, const std::string& plan_text, const fs::path& out,
                    const RunOptions& options) {
  fs::create_directories(out);
  io::write_file(out / "plan.json", plan_text);
  Manifest manifest(out, plan_text, "experiment");
  const bool holdout = plan.mode == harness::Mode::Holdout;
  const auto& an = plan.analysis;

  std::map<Category, stimgen::Dataset> train_sets, test_sets;
  manifest.stage("data", [&] {
    for (Category c : plan.train_categories) {
      train_sets[c] = harness::make_train_dataset(plan, c, options.jobs);
      manifest.dataset(c, "train", train_sets[c]);
    }
    for (Category c : plan.test_categories) {
      test_sets[c] = harness::make_test_dataset(plan, c, options.jobs);
      manifest.dataset(c, "test", test_sets[c]);
    }
  });

  // Training, responses and embeddings share one pass so only one
  // replicate set is held in memory at a time.
  std::vector<ModelOutputs> outputs(plan.models.size());
  manifest.stage("train", [&] {
    for (std::size_t mi = 0; mi < plan.models.size(); ++mi) {
      const harness::ModelEntry& model = plan.models[mi];
      const models::Network net(model.config);
      ModelOutputs& mo = outputs[mi];

      struct Job {
        std::string label;
        const stimgen::Dataset* train;
        std::vector<Category> tests;
        std::optional<Category> embed_on;
      };
      std::vector<Job> jobs;
      std::vector<stimgen::Dataset> pools;
      pools.reserve(plan.test_categories.size());
      if (holdout) {
        for (Category held : plan.test_categories) {
          pools.push_back(harness::holdout_pool(train_sets, held));
          jobs.push_back({"holdout_" + cat(held), &pools.back(), {held}, held});
        }
      } else {
        for (Category c : plan.train_categories) {
          std::optional<Category> on;
          if (test_sets.count(c)) on = c;
          jobs.push_back({cat(c), &train_sets.at(c), plan.test_categories, on});
        }
      }

      for (const Job& job : jobs) {
        spdlog::info("training {} on {} ({} seeds)", model.name, job.label, plan.train.seeds.size());
        auto runs = harness::replicate_runs(net, *job.train, plan.train, model.optimizer, options.jobs);
        for (auto& r : runs) {
          r.model = model.name;
          r.train_label = job.label;
          const auto paths =
              harness::save_run(r, out / "runs" / model.name / job.label / ("seed_" + std::to_string(r.seed)));
          manifest.checkpoint(paths[0]);
          mo.training.push_back({{"model", model.name},
                                 {"train", job.label},
                                 {"seed", r.seed},
                                 {"final_loss", r.losses.back()},
                                 {"train_accuracy", r.train_accuracy}});
        }

        std::vector<std::vector<psych::ResponseRecord>> slots(runs.size() * job.tests.size());
        parallel_for(slots.size(), options.jobs, [&](std::size_t k) {
          const auto& r = runs[k / job.tests.size()];
          const Category t = job.tests[k % job.tests.size()];
          slots[k] = psych::classify_batch(net, r.params, test_sets.at(t),
                                           {model.name, std::string(models::to_string(model.config.family)), r.seed,
                                            job.label, cat(t)});
        });
        for (auto& s : slots) mo.records.insert(mo.records.end(), s.begin(), s.end());

        if (an.embeddings && job.embed_on) {
          const Category c = *job.embed_on;
          const embed::EmbeddingSet e = embed::extract_embeddings(net, runs.front().params, test_sets.at(c));
          embed::TsneConfig tc;
          // Perplexity must stay well below the point count on small plans.
          tc.perplexity = std::min(an.perplexity, std::max(2.0, (static_cast<double>(e.points.rows) - 1) / 3.0));
          tc.iterations = an.tsne_iterations;
          tc.seed = derive_seed(an.tsne_seed, {static_cast<std::uint64_t>(c)});
          const embed::Projection2D p =
              embed::pca_tsne(e.points, tc, static_cast<std::size_t>(an.pca_dims), options.jobs);
          const embed::OrderingScore o = embed::ordering_score(p.coords, e.labels);
          const double line = embed::ordering_null_line(p.coords, e.labels, an.null_shuffles,
                                                        derive_seed(an.tsne_seed, {kNullKey, static_cast<std::uint64_t>(c)}));
          const fs::path base = out / "embeddings" / model.name / job.label;
          embed::write_projection_csv(base.string() + ".csv", p, e.labels, cat(c));
          io::write_file(base.string() + ".svg",
                         embed::projection_svg(p, e.labels, model.name + " " + job.label + " / " + cat(c)));
          mo.ordering.push_back({{"model", model.name},
                                 {"train", job.label},
                                 {"test", cat(c)},
                                 {"seed", runs.front().seed},
                                 {"embedding_dim", e.points.cols},
                                 {"points", e.points.rows},
                                 {"kl", p.kl},
                                 {"silhouette", o.silhouette},
                                 {"rho", o.rho},
                                 {"abs_rho", o.abs_rho},
                                 {"null_line", line}});
        }
      }
      psych::write_records_csv(out / "records" / (model.name + ".csv"), mo.records);
    }
  });

  json summary;
  summary["tool_version"] = kToolVersion;
  summary["plan_hash"] = io::git_hash(plan_text);
  summary["mode"] = harness::to_string(plan.mode);
  json model_info = json::array();
  for (const auto& m : plan.models)
    model_info.push_back({{"name", m.name},
                          {"family", models::to_string(m.config.family)},
                          {"parameters", models::Network(m.config).parameter_count()}});
  summary["models"] = std::move(model_info);

  // Curves, shapes, error tables and transfer grids.
  const psych::BootstrapConfig boot{an.ci_level, an.bootstrap_resamples, an.bootstrap_seed};
  json curves = json::array(), seed_shapes = json::array(), errors = json::array();
  std::vector<psych::ErrorRow> error_rows;
  std::map<std::string, std::map<std::string, std::vector<psych::ResponseRecord>>> diagonal;  // model -> cat
  manifest.stage("analysis", [&] {
    io::CsvWriter shape_csv({"model", "train_cat", "test_cat", "seeds", "shape", "residual", "low_mean", "high_mean",
                             "spearman"});
    io::CsvWriter seed_csv({"model", "train_cat", "test_cat", "seed", "shape", "p1", "p2", "p3", "p4", "p5", "p6",
                            "p7"});
    for (std::size_t mi = 0; mi < plan.models.size(); ++mi) {
      const std::string& name = plan.models[mi].name;
      const auto& recs = outputs[mi].records;
      std::map<std::pair<std::string, std::string>, std::vector<psych::ResponseRecord>> groups;
      for (const auto& r : recs) groups[{r.train_category, r.test_category}].push_back(r);

      std::vector<Cell> cells;
      if (holdout) {
        for (Category c : plan.test_categories)
          cells.push_back({"holdout_" + cat(c), cat(c),
                           derive_seed(an.bootstrap_seed, {kHoldoutCurveKey, static_cast<std::uint64_t>(c)})});
      } else {
        for (Category a : plan.train_categories)
          for (Category b : plan.test_categories) cells.push_back({cat(a), cat(b), psych::curve_seed(an.bootstrap_seed, a, b)});
      }

      for (const Cell& cell : cells) {
        const auto& g = groups.at({cell.train, cell.test});
        psych::BootstrapConfig bc = boot;
        bc.seed = cell.seed;
        const psych::PsychometricCurve curve = psych::psychometric_curve(g, bc);
        const psych::ShapeResult shape = psych::classify_curve_shape(curve.proportions());
        curves.push_back(curve_json(curve, shape));
        const fs::path base = out / "curves" / name / (cell.train + "__" + cell.test);
        psych::write_curve_csv(base.string() + ".csv", curve);
        io::write_file(base.string() + ".svg", psych::curve_svg(curve));
        shape_csv.row({name, cell.train, cell.test, std::to_string(curve.seeds),
                       std::string(psych::to_string(shape.shape)), shape.residual ? "1" : "0",
                       io::format_double(shape.low_mean), io::format_double(shape.high_mean),
                       io::format_double(shape.spearman)});

        std::map<std::uint64_t, std::vector<psych::ResponseRecord>> by_seed;
        for (const auto& r : g) by_seed[r.seed].push_back(r);
        for (const auto& [seed, sr] : by_seed) {
          std::array<double, 7> p{};
          for (int n = 1; n <= 7; ++n) p[n - 1] = psych::proportion_many(sr, n);
          const psych::ShapeResult s = psych::classify_curve_shape(p);
          seed_shapes.push_back({{"model", name},
                                 {"train", cell.train},
                                 {"test", cell.test},
                                 {"seed", seed},
                                 {"shape", psych::to_string(s.shape)},
                                 {"proportion_many", p}});
          std::vector<std::string> row{name, cell.train, cell.test, std::to_string(seed),
                                       std::string(psych::to_string(s.shape))};
          for (double v : p) row.push_back(io::format_double(v));
          seed_csv.row(row);
        }

        const bool anchor_cell = holdout || cell.train == cell.test;
        if (anchor_cell) {
          const psych::AnchorErrors e = psych::anchor_error_rates(g);
          error_rows.push_back({cell.test, name, e});
          errors.push_back({{"model", name},
                            {"category", cell.test},
                            {"few_error", e.few_error},
                            {"many_error", e.many_error},
                            {"total_error", e.total_error},
                            {"pooled_total_error", e.pooled_total_error}});
          diagonal[name][cell.test] = g;
        }
      }

      if (!holdout && plan.train_categories.size() > 1) {
        // Shape grid: one row per training category, one column per test category.
        std::vector<std::string> header{"train_cat"};
        for (Category b : plan.test_categories) header.push_back(cat(b));
        io::CsvWriter grid(header);
        const auto cells_grid =
            psych::transfer_matrix(recs, plan.train_categories, plan.test_categories, boot);
        for (std::size_t a = 0; a < plan.train_categories.size(); ++a) {
          std::vector<std::string> row{cat(plan.train_categories[a])};
          for (std::size_t b = 0; b < plan.test_categories.size(); ++b)
            row.emplace_back(psych::to_string(cells_grid[a * plan.test_categories.size() + b].shape.shape));
          grid.row(row);
        }
        grid.save(out / "transfer" / (name + "_shapes.csv"));
      }
    }
    shape_csv.save(out / "tables" / "curve_shapes.csv");
    seed_csv.save(out / "tables" / "seed_shapes.csv");
    psych::write_error_table_csv(out / "tables" / "errors.csv", error_rows);
  });
  summary["error_table"] = errors;
  summary["curves"] = curves;
  summary["seed_shapes"] = seed_shapes;
  json training = json::array(), ordering = json::array();
  for (const auto& mo : outputs) {
    for (const auto& t : mo.training) training.push_back(t);
    for (const auto& o : mo.ordering) ordering.push_back(o);
  }
  summary["training"] = training;
  summary["ordering"] = ordering;

  manifest.stage("stats", [&] {
    if (plan.train.seeds.size() < 2) {
      summary["discriminability"] = {{"skipped", "needs at least two replicate seeds"}};
      return;
    }
    std::vector<stats::DiscriminabilityInput> inputs;
    for (const std::string& m : plan.discriminability_models()) {
      const auto it = diagonal.find(m);
      if (it == diagonal.end()) continue;
      // Category order follows the plan, not the map.
      for (Category c : plan.test_categories) {
        const auto jt = it->second.find(cat(c));
        if (jt != it->second.end()) inputs.push_back({m, cat(c), stats::group_samples(jt->second)});
      }
    }
    const stats::DiscriminabilityReport rep = stats::discriminability_report(inputs, an.alpha);
    stats::write_report_csv(out / "stats" / "report.csv", rep);
    io::write_file(out / "stats" / "histogram.svg", stats::histogram_svg(rep));
    json s = json::parse(rep.summary().dump());
    json models_used = json::array();
    for (const auto& in : inputs)
      if (models_used.empty() || models_used.back() != in.model) models_used.push_back(in.model);
    s["models"] = models_used;
    s["alpha"] = an.alpha;
    io::write_file(out / "stats" / "summary.json", s.dump(2) + "\n");
    summary["discriminability"] = s;
  });

  io::write_file(out / "summary.json", summary.dump(2) + "\n");
  manifest.finish();
  run_report(out);
}

namespace {

std::string fmt1(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  return buf;
}

std::string fmt3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

}  // namespace

void run_report(const fs::path& run_dir) {
  const fs::path mpath = run_dir / "manifest.json";
  if (!fs::exists(mpath)) throw ManifestInvalid("no manifest.json in " + run_dir.string());
  json manifest;
  try {
    manifest = json::parse(io::read_file(mpath));
    for (const auto& a : manifest.at("artifacts")) {
      const fs::path p = run_dir / a.at("path").get<std::string>();
      if (!fs::exists(p)) throw ManifestInvalid("missing artifact " + p.string());
      if (io::git_hash_file(p) != a.at("hash").get<std::string>())
        throw ManifestInvalid("artifact changed since the run: " + p.string());
    }
  } catch (const json::exception& e) {
    throw ManifestInvalid(std::string("corrupt manifest: ") + e.what());
  }

  std::string md = "# Run report\n\n";
  md += "- tool: " + manifest.value("tool_version", std::string("?")) + "\n";
  md += "- plan hash: `" + manifest.value("plan_hash", std::string("?")) + "`\n";
  const bool complete = manifest.value("complete", false);
  md += std::string("- status: ") + (complete ? "complete" : "incomplete") + "\n";
  if (!complete && manifest.contains("failed_stage"))
    md += "- failed stage: " + manifest["failed_stage"].get<std::string>() + " (" +
          manifest.value("error", std::string()) + ")\n";

  const fs::path spath = run_dir / "summary.json";
  if (manifest.value("kind", std::string()) != "experiment" || !fs::exists(spath)) {
    md += "\nNo experiment summary in this run.\n";
    io::write_file(run_dir / "report.md", md);
    return;
  }
  json s;
  try {
    s = json::parse(io::read_file(spath));
  } catch (const json::exception& e) {
    throw ManifestInvalid(std::string("corrupt summary: ") + e.what());
  }
  md += "- mode: " + s.value("mode", std::string()) + "\n\n";

  md += "## Models\n\n| model | family | parameters |\n|---|---|---|\n";
  for (const auto& m : s["models"])
    md += "| " + m["name"].get<std::string>() + " | " + m["family"].get<std::string>() + " | " +
          std::to_string(m["parameters"].get<std::size_t>()) + " |\n";

  // Anchor errors: categories as rows, few/many/total column groups with one
  // column per model.
  std::vector<std::string> models, cats;
  std::map<std::pair<std::string, std::string>, json> cell;
  for (const auto& e : s["error_table"]) {
    const std::string m = e["model"], c = e["category"];
    if (std::find(models.begin(), models.end(), m) == models.end()) models.push_back(m);
    if (std::find(cats.begin(), cats.end(), c) == cats.end()) cats.push_back(c);
    cell[{c, m}] = e;
  }
  md += "\n## Anchor error rates (%)\n\n| category |";
  for (const char* g : {"few", "many", "total"})
    for (const auto& m : models) md += " " + std::string(g) + " " + m + " |";
  md += "\n|---|";
  for (std::size_t i = 0; i < 3 * models.size(); ++i) md += "---|";
  md += "\n";
  for (const auto& c : cats) {
    md += "| " + c + " |";
    for (const char* key : {"few_error", "many_error", "total_error"})
      for (const auto& m : models) {
        const auto it = cell.find({c, m});
        md += " " + (it == cell.end() ? std::string("") : fmt1(it->second[key].get<double>())) + " |";
      }
    md += "\n";
  }

  md += "\n## Psychometric curves\n\n| model | train | test | P(many) for n = 1..7 | shape |\n|---|---|---|---|---|\n";
  for (const auto& c : s["curves"]) {
    std::string pts;
    for (const auto& v : c["proportion_many"]) pts += (pts.empty() ? "" : " ") + fmt3(v.get<double>());
    md += "| " + c["model"].get<std::string>() + " | " + c["train"].get<std::string>() + " | " +
          c["test"].get<std::string>() + " | " + pts + " | " + c["shape"].get<std::string>() + " |\n";
  }
  md += "\n### Gallery\n\n";
  for (const auto& c : s["curves"]) {
    const std::string path = "curves/" + c["model"].get<std::string>() + "/" + c["train"].get<std::string>() + "__" +
                             c["test"].get<std::string>() + ".svg";
    md += "![" + c["model"].get<std::string>() + " " + c["train"].get<std::string>() + " / " +
          c["test"].get<std::string>() + "](" + path + ")\n";
  }

  // Per-seed shape counts per cell.
  std::map<std::tuple<std::string, std::string, std::string>, std::map<std::string, int>> counts;
  std::vector<std::tuple<std::string, std::string, std::string>> order;
  for (const auto& r : s["seed_shapes"]) {
    const auto key = std::make_tuple(r["model"].get<std::string>(), r["train"].get<std::string>(),
                                     r["test"].get<std::string>());
    if (!counts.count(key)) order.push_back(key);
    ++counts[key][r["shape"].get<std::string>()];
  }
  md += "\n## Per-seed curve shapes\n\n| model | train | test | shapes |\n|---|---|---|---|\n";
  for (const auto& key : order) {
    std::string txt;
    for (const auto& [shape, n] : counts[key]) txt += (txt.empty() ? "" : ", ") + shape + " " + std::to_string(n);
    md += "| " + std::get<0>(key) + " | " + std::get<1>(key) + " | " + std::get<2>(key) + " | " + txt + " |\n";
  }

  md += "\n## Discriminability\n\n";
  const json& d = s["discriminability"];
  if (d.contains("skipped")) {
    md += "Skipped: " + d["skipped"].get<std::string>() + "\n";
  } else {
    md += "- comparisons: " + std::to_string(d["comparisons"].get<int>()) + "\n";
    md += "- excluded: " + std::to_string(d["excluded"].get<int>()) + "\n";
    md += "- tested: " + std::to_string(d["tested"].get<int>()) + "\n";
    md += "- not rejected: " + std::to_string(d["not_rejected"].get<int>()) + "\n\n";
    md += "| pair | not rejected |\n|---|---|\n";
    for (const auto& h : d["not_rejected_pairs"])
      md += "| (" + std::to_string(h["pair"][0].get<int>()) + ", " + std::to_string(h["pair"][1].get<int>()) +
            ") | " + std::to_string(h["count"].get<int>()) + " |\n";
    md += "\n![non-rejected pairs](stats/histogram.svg)\n";
  }

  if (!s["ordering"].empty()) {
    md += "\n## Embedding order\n\n| model | train | test | silhouette | rho | null 95% |\n|---|---|---|---|---|---|\n";
    for (const auto& o : s["ordering"])
      md += "| " + o["model"].get<std::string>() + " | " + o["train"].get<std::string>() + " | " +
            o["test"].get<std::string>() + " | " + fmt3(o["silhouette"].get<double>()) + " | " +
            fmt3(o["rho"].get<double>()) + " | " + fmt3(o["null_line"].get<double>()) + " |\n";
    md += "\n";
    for (const auto& o : s["ordering"])
      md += "![" + o["model"].get<std::string>() + " " + o["train"].get<std::string>() + "](embeddings/" +
            o["model"].get<std::string>() + "/" + o["train"].get<std::string>() + ".svg)\n";
  }

  md += "\n## Training\n\n| model | train | seed | final loss | train accuracy |\n|---|---|---|---|---|\n";
  for (const auto& t : s["training"])
    md += "| " + t["model"].get<std::string>() + " | " + t["train"].get<std::string>() + " | " +
          std::to_string(t["seed"].get<std::uint64_t>()) + " | " + fmt3(t["final_loss"].get<double>()) + " | " +
          fmt3(t["train_accuracy"].get<double>()) + " |\n";
  io::write_file(run_dir / "report.md", md);
}

}  // namespace nbisect::pipeline
