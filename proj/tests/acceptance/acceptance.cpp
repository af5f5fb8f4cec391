// Acceptance runner: one PASS/FAIL line per criterion. Tolerances and time
// budgets are fixed below; nothing is tuned per run.

#include <CLI11.hpp>

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "../oracles/stats_oracles.hpp"
#include "../support/gradcheck.hpp"
#include "nbisect/embed.hpp"
#include "nbisect/harness.hpp"
#include "nbisect/io.hpp"
#include "nbisect/psychometrics.hpp"
#include "nbisect/rng.hpp"
#include "nbisect/stats.hpp"
#include "nbisect/stimgen.hpp"

using namespace nbisect;
namespace fs = std::filesystem;
using json = nlohmann::json;
using stimgen::Category;

namespace {

// Tolerances.
constexpr double kGeometryTol = 1e-12;        // relative, analytic ratios
constexpr int kLayouts = 10'000;
constexpr double kRasterTol = 0.03;
constexpr double kGradTol = 1e-4;
constexpr int kGradInstances = 5;
constexpr double kTrainAccuracy = 0.99;
constexpr int kSeeds = 10;
constexpr int kConvergedSeeds = 9;
constexpr double kCnnTotalError = 2.0;  // percent
constexpr int kSigmoidSeeds = 8;
constexpr double kQuantileTol = 0.02;
constexpr long kMcDraws = 10'000'000;
constexpr double kAgreement = 0.95;
constexpr double kNullFwer = 0.07;
constexpr double kCoverageLow = 0.92, kCoverageHigh = 0.98;
constexpr double kPcaTol = 1e-8;

// Wall-clock budgets in seconds.
constexpr double kBudget1 = 60, kBudget2 = 60, kBudget3 = 120, kBudget8 = 600;
constexpr double kSeedBudget = 600;  // criterion 4, per seed single-threaded

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  unsigned jobs = 1;
  fs::path work;
  std::string tool;
};

double normal(Rng& rng) {
  const double u = 1.0 - uniform01(rng), v = uniform01(rng);
  return std::sqrt(-2 * std::log(u)) * std::cos(2 * std::numbers::pi * v);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// --- 1 ----------------------------------------------------------------------

Outcome geometry(const Context& ctx) {
  const int all[] = {1, 2, 3, 4, 5, 6, 7};
  const int per = (kLayouts + 41) / 42;
  std::size_t layouts = 0, violations = 0;
  double area_dev = 0, perim_dev = 0, size_dev = 0;
  for (Category c : stimgen::kAllCategories) {
    stimgen::StimulusSpec spec;
    spec.category = c;
    spec.resolution = 224;
    spec.seed = 4242;
    const stimgen::Dataset ds = stimgen::generate_dataset(spec, all, per, ctx.jobs);
    std::vector<double> area, perim;
    std::map<int, double> size_by_n;
    for (const auto& it : ds.items) {
      ++layouts;
      if (stimgen::check_layout(it.layout, spec)) ++violations;
      const stimgen::Features f = stimgen::measure_features(it.layout, it.image);
      area.push_back(f.analytic_area);
      perim.push_back(f.analytic_perimeter);
      if (c == Category::ConstSize) size_by_n[it.n] = f.analytic_area;
    }
    const auto ratio = [](const std::vector<double>& v) {
      const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
      return *hi / *lo - 1.0;
    };
    if (c == Category::ConstArea || c == Category::ConstAreaContour) area_dev = std::max(area_dev, ratio(area));
    if (c == Category::ConstCirc || c == Category::ConstCircContour) perim_dev = std::max(perim_dev, ratio(perim));
    if (c == Category::ConstSize)
      for (const auto& [n, a] : size_by_n) size_dev = std::max(size_dev, std::abs(a / size_by_n[1] / n - 1.0));
  }
  Outcome o;
  o.pass = layouts >= kLayouts && violations == 0 && area_dev <= kGeometryTol && perim_dev <= kGeometryTol &&
           size_dev <= kGeometryTol;
  o.detail = std::to_string(layouts) + " layouts, " + std::to_string(violations) + " violations, area ratio-1 " +
             fmt("%.1e", area_dev) + ", perimeter ratio-1 " + fmt("%.1e", perim_dev) + ", size dev " +
             fmt("%.1e", size_dev);
  return o;
}

// --- 2 ----------------------------------------------------------------------

Outcome raster(const Context&) {
  stimgen::StimulusSpec spec;
  spec.category = Category::ConstSize;
  spec.resolution = 224;
  Rng rng = make_rng(2024);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const double r = 6.0 + 54.0 * uniform01(rng);
    const double cx = r + 1 + (222 - 2 * r) * uniform01(rng);
    const double cy = r + 1 + (222 - 2 * r) * uniform01(rng);
    const stimgen::CircleLayout l{{{cx, cy, r}}, Category::ConstSize, 1};
    const double expected = std::numbers::pi * r * r;
    worst = std::max(worst, std::abs(static_cast<double>(stimgen::rasterize(l, spec).white_count()) - expected) / expected);
  }
  return {worst <= kRasterTol, "1000 circles r in [6, 60], worst relative error " + fmt("%.4f", worst)};
}

// --- 3 ----------------------------------------------------------------------

Outcome gradients(const Context&) {
  using namespace tn;
  using testing::gradcheck;
  using testing::project;
  using testing::random_tensor;
  std::map<std::string, double> worst;
  for (int inst = 0; inst < kGradInstances; ++inst) {
    std::mt19937_64 rng(900 + inst);
    const std::size_t B = 2 + inst % 2, d = 3 + inst % 3;
    const std::uint64_t proj = 50 + inst;
    auto note = [&](const std::string& layer, const testing::GradCheckResult& r) {
      worst[layer] = std::max(worst[layer], r.worst_relative_error);
    };
    {
      ParameterSet ps;
      ps.add("x", Role::Weight, random_tensor({B, d}, rng));
      ps.add("W", Role::Weight, random_tensor({d, d + 2}, rng));
      ps.add("b", Role::Bias, random_tensor({d + 2}, rng));
      note("dense", gradcheck([&](Graph& g, const ParameterSet& p) {
        return project(g, ops::relu(g, ops::dense(g, g.parameter(p, "x"), g.parameter(p, "W"), g.parameter(p, "b"))),
                       proj);
      }, ps));
    }
    {
      ParameterSet ps;
      const std::size_t side = 5 + inst;
      ps.add("x", Role::Weight, random_tensor({B, 2, side, side}, rng));
      ps.add("K", Role::Weight, random_tensor({3, 2, 3, 3}, rng));
      ps.add("b", Role::Bias, random_tensor({3}, rng));
      const kernels::Conv2dParams cp{1 + static_cast<std::size_t>(inst % 2), static_cast<std::size_t>(inst % 2)};
      note("conv", gradcheck([&](Graph& g, const ParameterSet& p) {
        return project(g, ops::conv2d(g, g.parameter(p, "x"), g.parameter(p, "K"), g.parameter(p, "b"), cp), proj);
      }, ps));
    }
    {
      ParameterSet ps;
      ps.add("x", Role::Weight, random_tensor({B, 3 + static_cast<std::size_t>(inst % 2), 4}, rng));
      for (const char* n : {"Wq", "Wk", "Wv", "Wo"}) ps.add(n, Role::Weight, random_tensor({4, 4}, rng, 0.7));
      note("attention", gradcheck([&](Graph& g, const ParameterSet& p) {
        return project(g, ops::attention(g, g.parameter(p, "x"), g.parameter(p, "Wq"), g.parameter(p, "Wk"),
                                         g.parameter(p, "Wv"), g.parameter(p, "Wo"), 1 + inst % 2), proj);
      }, ps));
    }
    {
      ParameterSet ps;
      ps.add("x", Role::Weight, random_tensor({B, 1, 8, 8}, rng));
      ps.add("pos", Role::Embedding, random_tensor({16, 4}, rng));
      note("patch-merge", gradcheck([&](Graph& g, const ParameterSet& p) {
        Var t = ops::add_positional(g, ops::patchify(g, g.parameter(p, "x"), 2), g.parameter(p, "pos"));
        return project(g, ops::mean_tokens(g, ops::patch_merge(g, t)), proj);
      }, ps));
    }
    {
      ParameterSet ps;
      ps.add("x", Role::Weight, random_tensor({B, 3, 4 + static_cast<std::size_t>(inst), 5}, rng));
      note("pooling", gradcheck([&](Graph& g, const ParameterSet& p) {
        return project(g, ops::global_avg_pool(g, g.parameter(p, "x")), proj);
      }, ps));
    }
    {
      ParameterSet ps;
      ps.add("x", Role::Weight, random_tensor({B, d}, rng));
      ps.add("gamma", Role::NormScale, random_tensor({d}, rng));
      ps.add("beta", Role::Bias, random_tensor({d}, rng));
      note("layer-norm", gradcheck([&](Graph& g, const ParameterSet& p) {
        return project(g, ops::layer_norm(g, g.parameter(p, "x"), g.parameter(p, "gamma"), g.parameter(p, "beta")),
                       proj);
      }, ps));
    }
    {
      ParameterSet ps;
      ps.add("W", Role::Weight, random_tensor({d, 2}, rng));
      ps.add("b", Role::Bias, random_tensor({2}, rng));
      const Tensor x = random_tensor({B + 2, d}, rng);
      Tensor targets({B + 2, 2});
      for (std::size_t i = 0; i < B + 2; ++i) targets.at({i, (i + inst) % 2}) = 1.0;
      note("loss", gradcheck([&](Graph& g, const ParameterSet& p) {
        return ops::cross_entropy(g, ops::dense(g, g.input(x), g.parameter(p, "W"), g.parameter(p, "b")), targets);
      }, ps));
    }
  }
  Outcome o{true, std::to_string(kGradInstances) + " instances per layer; worst"};
  for (const auto& [layer, w] : worst) {
    o.pass = o.pass && w <= kGradTol;
    o.detail += " " + layer + " " + fmt("%.1e", w);
  }
  return o;
}

// --- trained replicate sets, cached on disk between criteria ----------------

struct TrainedCell {
  std::vector<psych::ResponseRecord> records;
  std::vector<double> train_accuracy;
  std::vector<double> seconds;
};

harness::ExperimentPlan default_plan(const std::string& family) {
  std::vector<int> seeds;
  for (int s = 1; s <= kSeeds; ++s) seeds.push_back(s);
  json j{{"models", {{{"family", family}}}}, {"train", {{"seeds", seeds}}}};
  return harness::parse_plan(j.dump());
}

TrainedCell trained(const Context& ctx, const std::string& family, Category train, Category test) {
  const harness::ExperimentPlan plan = default_plan(family);
  const std::string key = io::git_hash(harness::plan_to_json(plan).dump() + "|" + std::string(stimgen::to_string(train)) +
                                       "|" + std::string(stimgen::to_string(test)));
  const fs::path dir = ctx.work / "cache" / (family + "_" + std::string(stimgen::to_string(train)) + "_" +
                                             std::string(stimgen::to_string(test)) + "_" + key.substr(0, 12));
  TrainedCell cell;
  if (fs::exists(dir / "done.json")) {
    cell.records = psych::read_records_csv(dir / "records.csv");
    const json d = json::parse(io::read_file(dir / "done.json"));
    cell.train_accuracy = d["train_accuracy"].get<std::vector<double>>();
    cell.seconds = d["seconds"].get<std::vector<double>>();
    std::cerr << "  reusing " << dir.filename().string() << "\n";
    return cell;
  }
  const auto& model = plan.models.front();
  const models::Network net(model.config);
  const stimgen::Dataset train_ds = harness::make_train_dataset(plan, train, ctx.jobs);
  const stimgen::Dataset test_ds = harness::make_test_dataset(plan, test, ctx.jobs);
  for (std::uint64_t seed : plan.train.seeds) {
    const auto t0 = std::chrono::steady_clock::now();
    const harness::TrainedNetwork r = harness::train_run(net, train_ds, plan.train, model.optimizer, seed);
    cell.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    cell.train_accuracy.push_back(r.train_accuracy);
    const auto recs = psych::classify_batch(net, r.params, test_ds,
                                            {family, family, seed, std::string(stimgen::to_string(train)),
                                             std::string(stimgen::to_string(test))});
    cell.records.insert(cell.records.end(), recs.begin(), recs.end());
    std::cerr << "  " << family << " " << stimgen::to_string(train) << " seed " << seed << ": acc "
              << fmt("%.4f", r.train_accuracy) << ", " << fmt("%.0f s", cell.seconds.back()) << "\n";
  }
  fs::create_directories(dir);
  psych::write_records_csv(dir / "records.csv", cell.records);
  io::write_file(dir / "done.json",
                 json{{"train_accuracy", cell.train_accuracy}, {"seconds", cell.seconds}}.dump() + "\n");
  return cell;
}

std::map<std::uint64_t, std::vector<psych::ResponseRecord>> by_seed(const std::vector<psych::ResponseRecord>& r) {
  std::map<std::uint64_t, std::vector<psych::ResponseRecord>> m;
  for (const auto& x : r) m[x.seed].push_back(x);
  return m;
}

std::vector<psych::CurveShape> seed_shapes(const TrainedCell& cell, std::string& curves) {
  std::vector<psych::CurveShape> out;
  for (const auto& [seed, recs] : by_seed(cell.records)) {
    std::array<double, 7> p{};
    for (int n = 1; n <= 7; ++n) p[n - 1] = psych::proportion_many(recs, n);
    out.push_back(psych::classify_curve_shape(p).shape);
    curves += "\n    seed " + std::to_string(seed) + ":";
    for (double v : p) curves += fmt(" %.2f", v);
    curves += " " + std::string(psych::to_string(out.back()));
  }
  return out;
}

double mean_total_error(const TrainedCell& cell) {
  double s = 0;
  const auto seeds = by_seed(cell.records);
  for (const auto& [seed, recs] : seeds) s += psych::anchor_error_rates(recs).total_error;
  return s / static_cast<double>(seeds.size());
}

// --- 4 to 7 -----------------------------------------------------------------

Outcome convergence(const Context& ctx) {
  const TrainedCell c = trained(ctx, "mlp", Category::ConstSize, Category::ConstSize);
  int ok = 0;
  double slowest = 0;
  std::string accs;
  for (std::size_t i = 0; i < c.train_accuracy.size(); ++i) {
    ok += c.train_accuracy[i] >= kTrainAccuracy;
    slowest = std::max(slowest, c.seconds[i]);
    accs += fmt(" %.3f", c.train_accuracy[i]);
  }
  return {ok >= kConvergedSeeds && slowest <= kSeedBudget,
          std::to_string(ok) + "/" + std::to_string(kSeeds) + " seeds at >= 99% train accuracy (" + accs.substr(1) +
              "), slowest seed " + fmt("%.0f s", slowest)};
}

Outcome table_analog(const Context& ctx) {
  const double cnn = mean_total_error(trained(ctx, "microcnn", Category::ConstSize, Category::ConstSize));
  const double cc = mean_total_error(trained(ctx, "mlp", Category::ConstCircContour, Category::ConstCircContour));
  const double area = mean_total_error(trained(ctx, "mlp", Category::ConstArea, Category::ConstArea));
  return {cnn <= kCnnTotalError && cc > area, "MicroCNN ConstSize total error " + fmt("%.2f%%", cnn) +
                                                  "; MLP ConstCircContour " + fmt("%.2f%%", cc) + " vs ConstArea " +
                                                  fmt("%.2f%%", area)};
}

Outcome sigmoid_shape(const Context& ctx) {
  std::string curves;
  const auto shapes = seed_shapes(trained(ctx, "microcnn", Category::ConstSize, Category::ConstSize), curves);
  const auto k = std::count(shapes.begin(), shapes.end(), psych::CurveShape::Sigmoid);
  return {k >= kSigmoidSeeds, std::to_string(k) + "/" + std::to_string(shapes.size()) + " seeds sigmoid" + curves};
}

Outcome transfer_failure(const Context& ctx) {
  std::string curves;
  const auto shapes = seed_shapes(trained(ctx, "microcnn", Category::ConstCirc, Category::ConstSize), curves);
  const auto k = std::count_if(shapes.begin(), shapes.end(), [](psych::CurveShape s) {
    return s == psych::CurveShape::Inverted || s == psych::CurveShape::AllOrNoneFew ||
           s == psych::CurveShape::AllOrNoneMany;
  });
  return {2 * k > static_cast<long>(shapes.size()),
          std::to_string(k) + "/" + std::to_string(shapes.size()) + " seeds inverted or all-or-none" + curves};
}

// --- 8 ----------------------------------------------------------------------

stats::GroupSamples random_groups(Rng& rng, const std::vector<double>& means, int n) {
  stats::GroupSamples g(means.size());
  for (std::size_t i = 0; i < means.size(); ++i)
    for (int r = 0; r < n; ++r) g[i].push_back(means[i] + normal(rng));
  return g;
}

Outcome statistics(const Context&) {
  double worst = 0;
  std::string where;
  for (int k : {3, 5, 7})
    for (double df : {10.0, 20.0, 60.0}) {
      const double mc = oracle::mc_studentized_range_q(0.05, k, df, kMcDraws, 1000 + k * 100 + static_cast<int>(df));
      const double d = std::abs(stats::studentized_range_q(0.05, k, df) - mc);
      if (d > worst) worst = d, where = "k=" + std::to_string(k) + " df=" + fmt("%.0f", df);
    }
  int agree = 0, total = 0;
  for (std::uint64_t d = 0; d < 100; ++d) {
    Rng rng = make_rng(derive_seed(31337, {d}));
    std::vector<double> means(7);
    for (double& m : means) m = 1.5 * uniform01(rng);
    const auto g = random_groups(rng, means, 10);
    const stats::TukeyResult r = stats::tukey_hsd(g);
    const auto o = oracle::permutation_tukey(g, 0.05, 2000, d);
    for (std::size_t p = 0; p < r.pairs.size(); ++p, ++total) agree += r.pairs[p].significant == o.significant[p];
  }
  int rejected = 0;
  for (int s = 0; s < 1000; ++s) {
    Rng rng = make_rng(derive_seed(8080, {static_cast<std::uint64_t>(s)}));
    const stats::TukeyResult r = stats::tukey_hsd(random_groups(rng, std::vector<double>(7, 0.0), 10));
    rejected += std::any_of(r.pairs.begin(), r.pairs.end(), [](const stats::PairTest& p) { return p.significant; });
  }
  const double agreement = static_cast<double>(agree) / total, fwer = rejected / 1000.0;
  return {worst <= kQuantileTol && agreement >= kAgreement && fwer <= kNullFwer,
          "worst |q - MC| " + fmt("%.4f", worst) + " at " + where + "; permutation agreement " +
              fmt("%.3f", agreement) + " over " + std::to_string(total) + " decisions; null FWER " + fmt("%.3f", fwer)};
}

// --- 9 and 12: end-to-end runs through the command-line tool ------------------

json small_pipeline_plan() {
  return json::parse(R"({
    "train_categories": "all",
    "test_categories": "all",
    "models": [
      {"name": "cnn", "family": "microcnn", "cnn_widths": [4, 8, 8, 8]},
      {"name": "mlp", "family": "mlp", "mlp_hidden": [32, 16], "embedding_dim": 16}
    ],
    "stimulus": {"resolution": 32},
    "train": {"steps": 30, "seeds": [1, 2, 3]},
    "data": {"train_count": 6, "test_count": 6},
    "analysis": {"bootstrap_resamples": 200, "tsne_iterations": 300, "null_shuffles": 100}
  })");
}

bool run_tool(const Context& ctx, const fs::path& plan, const fs::path& out, unsigned jobs) {
  fs::remove_all(out);
  const std::string cmd = "\"" + ctx.tool + "\" --log-level warn experiment --plan \"" + plan.string() +
                          "\" --out \"" + out.string() + "\" --jobs " + std::to_string(jobs) + " > /dev/null";
  return std::system(cmd.c_str()) == 0;
}

fs::path pipeline_run(const Context& ctx, unsigned jobs) {
  const fs::path plan = ctx.work / "e2e_plan.json";
  io::write_file(plan, small_pipeline_plan().dump(2) + "\n");
  const fs::path out = ctx.work / ("e2e_jobs" + std::to_string(jobs));
  if (!run_tool(ctx, plan, out, jobs)) throw std::runtime_error("experiment run failed: " + out.string());
  return out;
}

Outcome bookkeeping(const Context& ctx) {
  const fs::path out = pipeline_run(ctx, 1);
  const json d = json::parse(io::read_file(out / "summary.json"))["discriminability"];
  const int c = d["comparisons"], e = d["excluded"], t = d["tested"];
  return {c == 252 && e == 24 && t == 228, "2 models x 6 categories: " + std::to_string(c) + " comparisons, " +
                                               std::to_string(e) + " excluded, " + std::to_string(t) + " tested"};
}

Outcome determinism(const Context& ctx) {
  const unsigned many = std::max(2u, ctx.jobs);
  const std::string a = io::read_file(pipeline_run(ctx, 1) / "summary.json");
  const std::string b = io::read_file(pipeline_run(ctx, many) / "summary.json");
  const fs::path again = ctx.work / "e2e_again";
  if (!run_tool(ctx, ctx.work / "e2e_plan.json", again, 1)) throw std::runtime_error("repeat run failed");
  const std::string c = io::read_file(again / "summary.json");
  return {a == b && a == c, "summary.json " + io::git_hash(a).substr(0, 12) + " (--jobs 1), " +
                                io::git_hash(b).substr(0, 12) + " (--jobs " + std::to_string(many) + "), " +
                                io::git_hash(c).substr(0, 12) + " (repeat)"};
}

// --- 10 ---------------------------------------------------------------------

Outcome coverage(const Context&) {
  bool pass = true;
  std::string detail;
  for (double p : {0.1, 0.3, 0.5}) {
    int covered = 0;
    for (int d = 0; d < 1000; ++d) {
      Rng rng = make_rng(derive_seed(4711, {static_cast<std::uint64_t>(p * 10), static_cast<std::uint64_t>(d)}));
      std::vector<double> x(100);
      for (double& v : x) v = uniform01(rng) < p ? 1.0 : 0.0;
      const psych::Interval ci = psych::bootstrap_ci(x, {0.95, 1000, derive_seed(99, {static_cast<std::uint64_t>(d)})});
      covered += ci.low <= p && p <= ci.high;
    }
    const double rate = covered / 1000.0;
    pass = pass && rate >= kCoverageLow && rate <= kCoverageHigh;
    detail += (detail.empty() ? "" : ", ") + fmt("p=%.1f ", p) + fmt("%.3f", rate);
  }
  return {pass, "coverage " + detail};
}

// --- 11 ---------------------------------------------------------------------

Outcome embedding(const Context& ctx) {
  double worst_eig = 0, worst_rec = 0;
  const std::size_t shapes[][3] = {{100, 20, 3}, {60, 40, 5}, {200, 10, 4}, {80, 30, 10}, {150, 50, 2}};
  for (std::size_t s = 0; s < 5; ++s) {
    const auto [rows, cols, k] = std::tuple{shapes[s][0], shapes[s][1], shapes[s][2]};
    Rng rng = make_rng(600 + s);
    embed::Matrix x(rows, cols);
    Eigen::MatrixXd m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) m(i, j) = x(i, j) = normal(rng) * (1.0 + 0.3 * j);
    const embed::PcaResult p = embed::pca_project(x, k);
    const Eigen::MatrixXd c = m.rowwise() - m.colwise().mean();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c.transpose() * c / static_cast<double>(rows - 1));
    const Eigen::VectorXd ev = es.eigenvalues();
    double discarded = ev.sum();
    for (std::size_t a = 0; a < k; ++a) {
      worst_eig = std::max(worst_eig, std::abs(p.eigenvalues[a] - ev(cols - 1 - a)));
      discarded -= ev(cols - 1 - a);
    }
    double err = 0;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) {
        double r = 0;
        for (std::size_t a = 0; a < p.components.rows; ++a) r += p.scores(i, a) * p.components(a, j);
        err += (c(i, j) - r) * (c(i, j) - r);
      }
    const double oracle_err = static_cast<double>(rows - 1) * discarded;
    worst_rec = std::max(worst_rec, std::abs(err - oracle_err) / std::max(1.0, oracle_err));
  }

  // t-SNE on two well separated blobs.
  Rng rng = make_rng(17);
  embed::Matrix blobs(200, 10);
  std::vector<int> blob_labels;
  for (std::size_t i = 0; i < 200; ++i) {
    blob_labels.push_back(i < 100 ? 1 : 2);
    for (std::size_t j = 0; j < 10; ++j) blobs(i, j) = normal(rng) + (j == 0 && i >= 100 ? 10.0 : 0.0);
  }
  const embed::Projection2D t = embed::tsne_project(blobs, {30.0, 1000, 5}, ctx.jobs);
  int increases = 0;
  for (std::size_t i = 1; i < t.trace.size(); ++i) increases += t.trace[i] > t.trace[i - 1];

  embed::Matrix y(140, 2);
  std::vector<int> labels;
  for (int l = 1; l <= 7; ++l)
    for (int i = 0; i < 20; ++i) {
      y(labels.size(), 0) = 10.0 * l + 0.3 * normal(rng);
      y(labels.size(), 1) = -4.0 * l + 0.3 * normal(rng);
      labels.push_back(l);
    }
  const double rho = embed::ordering_score(y, labels).abs_rho;
  std::vector<int> shuffled = labels;
  for (std::size_t i = shuffled.size(); i > 1; --i) std::swap(shuffled[i - 1], shuffled[uniform_index(rng, i)]);
  const double shuffled_rho = embed::ordering_score(y, shuffled).abs_rho;
  const double line = embed::ordering_null_line(y, labels, 1000, 23);

  return {worst_eig <= kPcaTol && worst_rec <= kPcaTol && increases == 0 && std::abs(rho - 1.0) <= 1e-12 &&
              shuffled_rho < line,
          "PCA eigenvalue error " + fmt("%.1e", worst_eig) + ", reconstruction " + fmt("%.1e", worst_rec) +
              "; t-SNE KL increases after exaggeration " + std::to_string(increases) + " of " +
              std::to_string(t.trace.size() - 1) + " steps (" + std::to_string(t.rejected_steps) +
              " rejected); |rho| ordered " + fmt("%.6f", rho) + ", shuffled " + fmt("%.3f", shuffled_rho) +
              " vs null line " + fmt("%.3f", line)};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome(const Context&)> run;
  double budget;  // seconds, 0 for none
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  Context ctx;
  ctx.work = fs::temp_directory_path() / "nbisect_acceptance";
#ifdef NBISECT_TOOL
  ctx.tool = NBISECT_TOOL;
#endif
  app.add_option("--only", only, "Criteria to run (default all)")->delimiter(',');
  app.add_option("--jobs", ctx.jobs, "Worker threads");
  app.add_option("--work", ctx.work, "Scratch directory; trained replicate sets are cached here");
  app.add_option("--tool", ctx.tool, "Path to the nbisect executable");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(ctx.work);

  const std::vector<Criterion> all{
      {1, "geometry invariants", geometry, kBudget1},
      {2, "rasterization fidelity", raster, kBudget2},
      {3, "gradient correctness", gradients, kBudget3},
      {4, "MLP training convergence", convergence, 0},
      {5, "anchor error table analog", table_analog, 0},
      {6, "sigmoid psychometric curves", sigmoid_shape, 0},
      {7, "cross-stimulus transfer failure", transfer_failure, 0},
      {8, "statistics correctness", statistics, kBudget8},
      {9, "discriminability bookkeeping", bookkeeping, 0},
      {10, "bootstrap coverage", coverage, 0},
      {11, "embedding pipeline", embedding, 0},
      {12, "end-to-end determinism", determinism, 0},
  };
  bool all_pass = true;
  for (const Criterion& c : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget > 0 && secs > c.budget) {
      o.pass = false;
      o.detail += "; over the " + fmt("%.0f s", c.budget) + " budget";
    }
    all_pass = all_pass && o.pass;
    std::cout << "criterion " << c.id << " " << (o.pass ? "PASS" : "FAIL") << "  " << c.name << ": " << o.detail
              << " [" << fmt("%.1f s", secs) << "]" << std::endl;
  }
  return all_pass ? 0 : 1;
}
