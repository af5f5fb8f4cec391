#include "nbisect/harness.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "nbisect/error.hpp"
#include "nbisect/io.hpp"
#include "nbisect/parallel.hpp"
#include "nbisect/rng.hpp"

namespace nbisect::harness {

using nlohmann::json;

stimgen::Label make_labels(int n) {
  if (n < stimgen::kMinNumerosity || n > stimgen::kMaxNumerosity)
    throw InvalidConfig("numerosity " + std::to_string(n) + " outside 1..7");
  const stimgen::Label l = stimgen::anchor_label(n);
  if (l == stimgen::Label::Unlabeled)
    throw UnlabeledNumerosity("numerosity " + std::to_string(n) + " has no training label");
  return l;
}

std::size_t class_index(stimgen::Label label) {
  if (label == stimgen::Label::Few) return models::kFewIndex;
  if (label == stimgen::Label::Many) return models::kManyIndex;
  throw UnlabeledNumerosity("unlabeled image has no class index");
}

OptimizerSettings default_optimizer(models::Family family) {
  switch (family) {
    case models::Family::MLP:
      return {tn::OptimizerKind::Adam, 1e-4};
    case models::Family::MicroViT:
      return {tn::OptimizerKind::Adam, 5e-5};
    case models::Family::MicroCNN:
      return {tn::OptimizerKind::SGD, 1e-2};
  }
  return {};
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw PlanInvalid("batch_size must be >= 1");
  if (steps < 1) throw PlanInvalid("steps must be >= 1");
  if (!(weight_decay >= 0) || !std::isfinite(weight_decay)) throw PlanInvalid("weight_decay must be >= 0");
  if (seeds.empty()) throw PlanInvalid("at least one replicate seed is required");
  std::set<std::uint64_t> unique(seeds.begin(), seeds.end());
  if (unique.size() != seeds.size()) throw PlanInvalid("replicate seeds must be distinct");
}

std::string_view to_string(Mode m) { return m == Mode::Holdout ? "holdout" : "single_stimulus"; }

// --- plan ----------------------------------------------------------------------

void ExperimentPlan::validate() const {
  train.validate();
  if (models.empty()) throw PlanInvalid("plan lists no models");
  std::set<std::string> names;
  for (const auto& m : models) {
    if (m.name.empty()) throw PlanInvalid("model name must not be empty");
    if (!names.insert(m.name).second) throw PlanInvalid("duplicate model name '" + m.name + "'");
    try {
      m.config.validate();
    } catch (const InvalidConfig& e) {
      throw PlanInvalid("model '" + m.name + "': " + e.what());
    }
    if (m.config.input_resolution != stimulus.resolution)
      throw PlanInvalid("model '" + m.name + "' expects resolution " + std::to_string(m.config.input_resolution) +
                        " but stimuli are " + std::to_string(stimulus.resolution));
    if (!(m.optimizer.learning_rate > 0) || !std::isfinite(m.optimizer.learning_rate))
      throw PlanInvalid("model '" + m.name + "': learning rate must be positive");
  }
  auto distinct = [](const std::vector<Category>& cs, const char* what) {
    if (cs.empty()) throw PlanInvalid(std::string(what) + " must not be empty");
    std::set<Category> s(cs.begin(), cs.end());
    if (s.size() != cs.size()) throw PlanInvalid(std::string(what) + " contains duplicates");
  };
  distinct(train_categories, "train_categories");
  distinct(test_categories, "test_categories");
  if (mode == Mode::Holdout) {
    for (Category held : test_categories) {
      const auto pool = std::count_if(train_categories.begin(), train_categories.end(),
                                      [held](Category c) { return c != held; });
      if (pool != 5)
        throw PlanInvalid("holdout of " + std::string(stimgen::to_string(held)) + " leaves " + std::to_string(pool) +
                          " training categories; exactly 5 are required");
    }
  }
  if (data.train_count < 1 || data.test_count < 1) throw PlanInvalid("image counts must be >= 1");
  if (data.train_seed == data.test_seed) throw PlanInvalid("train and test dataset seeds must differ");
  try {
    stimulus.validate();
  } catch (const InvalidConfig& e) {
    throw PlanInvalid(std::string("stimulus: ") + e.what());
  }
  const auto& a = analysis;
  if (!(a.alpha > 0 && a.alpha < 1)) throw PlanInvalid("alpha must lie in (0, 1)");
  if (!(a.ci_level > 0 && a.ci_level < 1)) throw PlanInvalid("ci_level must lie in (0, 1)");
  if (a.bootstrap_resamples < 1) throw PlanInvalid("bootstrap_resamples must be >= 1");
  if (a.pca_dims < 1 || !(a.perplexity > 0) || a.tsne_iterations < 0 || a.null_shuffles < 1)
    throw PlanInvalid("embedding settings out of range");
  for (const auto& n : a.discriminability_models)
    if (!names.count(n)) throw PlanInvalid("discriminability model '" + n + "' is not in the plan");
}

const ModelEntry& ExperimentPlan::model(std::string_view name) const {
  for (const auto& m : models)
    if (m.name == name) return m;
  throw PlanInvalid("unknown model '" + std::string(name) + "'");
}

std::vector<std::string> ExperimentPlan::discriminability_models() const {
  if (!analysis.discriminability_models.empty()) return analysis.discriminability_models;
  std::vector<std::string> out;
  for (std::size_t i = 0; i < std::min<std::size_t>(2, models.size()); ++i) out.push_back(models[i].name);
  return out;
}

namespace {

template <class T>
void get(const json& j, const char* key, T& field) {
  if (j.contains(key)) j.at(key).get_to(field);
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw PlanInvalid(where + " must be an object");
  for (const auto& [key, _] : j.items())
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw PlanInvalid("unknown key '" + key + "' in " + where);
}

std::vector<Category> parse_categories(const json& j) {
  std::vector<Category> out;
  if (j.is_string() && j.get<std::string>() == "all") return {std::begin(stimgen::kAllCategories),
                                                              std::end(stimgen::kAllCategories)};
  for (const auto& s : j) out.push_back(stimgen::category_from_string(s.get<std::string>()));
  return out;
}

json categories_json(const std::vector<Category>& cs) {
  json out = json::array();
  for (Category c : cs) out.push_back(stimgen::to_string(c));
  return out;
}

}  // namespace

ExperimentPlan parse_plan(std::string_view text) {
  ExperimentPlan plan;
  try {
    const json j = json::parse(text);
    check_keys(j, {"mode", "train_categories", "test_categories", "models", "train", "stimulus", "data", "analysis"},
               "plan");
    const std::string mode = j.value("mode", "single_stimulus");
    if (mode == "holdout")
      plan.mode = Mode::Holdout;
    else if (mode != "single_stimulus")
      throw PlanInvalid("mode must be single_stimulus or holdout, got '" + mode + "'");

    if (j.contains("stimulus")) {
      const json& s = j.at("stimulus");
      check_keys(s,
                 {"resolution", "vary_radii", "const_radius", "reference_count", "stroke_width", "min_gap", "margin",
                  "max_attempts", "radius_redraws"},
                 "stimulus");
      auto& st = plan.stimulus;
      get(s, "resolution", st.resolution);
      get(s, "vary_radii", st.vary_radii);
      get(s, "const_radius", st.const_radius);
      get(s, "reference_count", st.reference_count);
      get(s, "stroke_width", st.stroke_width);
      get(s, "min_gap", st.min_gap);
      get(s, "margin", st.margin);
      get(s, "max_attempts", st.max_attempts);
      get(s, "radius_redraws", st.radius_redraws);
    } else {
      plan.stimulus.resolution = 64;
    }

    if (!j.contains("models") || !j.at("models").is_array()) throw PlanInvalid("plan needs a 'models' array");
    for (const json& m : j.at("models")) {
      if (!m.is_object() || !m.contains("family")) throw PlanInvalid("each model needs a 'family'");
      json cfg = m;
      ModelEntry entry;
      entry.name = m.value("name", m.at("family").get<std::string>());
      cfg.erase("name");
      cfg.erase("optimizer");
      cfg.erase("learning_rate");
      if (!cfg.contains("input_resolution")) cfg["input_resolution"] = plan.stimulus.resolution;
      check_keys(cfg,
                 {"family", "input_resolution", "channels", "head_dim", "embedding_dim", "mlp_hidden",
                  "cnn_stem_kernel", "cnn_widths", "cnn_blocks_per_stage", "patch_size", "vit_dim", "vit_heads",
                  "vit_mlp_ratio", "vit_stage_depths", "hierarchical", "layer_norm"},
                 "model '" + entry.name + "'");
      cfg.get_to(entry.config);
      entry.optimizer = default_optimizer(entry.config.family);
      if (m.contains("optimizer")) entry.optimizer.kind = tn::optimizer_from_string(m.at("optimizer").get<std::string>());
      get(m, "learning_rate", entry.optimizer.learning_rate);
      plan.models.push_back(std::move(entry));
    }

    const auto all = std::vector<Category>(std::begin(stimgen::kAllCategories), std::end(stimgen::kAllCategories));
    plan.train_categories = j.contains("train_categories") ? parse_categories(j.at("train_categories")) : all;
    plan.test_categories = j.contains("test_categories") ? parse_categories(j.at("test_categories")) : all;

    if (j.contains("train")) {
      const json& t = j.at("train");
      check_keys(t, {"batch_size", "steps", "weight_decay", "seeds", "shuffle_seed"}, "train");
      get(t, "batch_size", plan.train.batch_size);
      get(t, "steps", plan.train.steps);
      get(t, "weight_decay", plan.train.weight_decay);
      get(t, "seeds", plan.train.seeds);
      get(t, "shuffle_seed", plan.train.shuffle_seed);
    }
    if (j.contains("data")) {
      const json& d = j.at("data");
      check_keys(d, {"train_seed", "test_seed", "train_count", "test_count"}, "data");
      get(d, "train_seed", plan.data.train_seed);
      get(d, "test_seed", plan.data.test_seed);
      get(d, "train_count", plan.data.train_count);
      get(d, "test_count", plan.data.test_count);
    }
    if (j.contains("analysis")) {
      const json& a = j.at("analysis");
      check_keys(a,
                 {"ci_level", "bootstrap_resamples", "bootstrap_seed", "alpha", "discriminability_models",
                  "embeddings", "pca_dims", "perplexity", "tsne_iterations", "tsne_seed", "null_shuffles"},
                 "analysis");
      auto& an = plan.analysis;
      get(a, "ci_level", an.ci_level);
      get(a, "bootstrap_resamples", an.bootstrap_resamples);
      get(a, "bootstrap_seed", an.bootstrap_seed);
      get(a, "alpha", an.alpha);
      get(a, "discriminability_models", an.discriminability_models);
      get(a, "embeddings", an.embeddings);
      get(a, "pca_dims", an.pca_dims);
      get(a, "perplexity", an.perplexity);
      get(a, "tsne_iterations", an.tsne_iterations);
      get(a, "tsne_seed", an.tsne_seed);
      get(a, "null_shuffles", an.null_shuffles);
    }
  } catch (const json::exception& e) {
    throw PlanInvalid(std::string("malformed plan: ") + e.what());
  } catch (const InvalidConfig& e) {
    throw PlanInvalid(e.what());
  }
  plan.validate();
  return plan;
}

ExperimentPlan load_plan(const std::filesystem::path& path) {
  std::string text;
  try {
    text = io::read_file(path);
  } catch (const std::exception& e) {
    throw PlanInvalid("cannot read plan " + path.string() + ": " + e.what());
  }
  return parse_plan(text);
}

json plan_to_json(const ExperimentPlan& plan) {
  json models = json::array();
  for (const auto& m : plan.models) {
    json entry = m.config;
    entry["name"] = m.name;
    entry["optimizer"] = tn::to_string(m.optimizer.kind);
    entry["learning_rate"] = m.optimizer.learning_rate;
    models.push_back(std::move(entry));
  }
  const auto& s = plan.stimulus;
  const auto& a = plan.analysis;
  return json{
      {"mode", to_string(plan.mode)},
      {"train_categories", categories_json(plan.train_categories)},
      {"test_categories", categories_json(plan.test_categories)},
      {"models", models},
      {"train",
       {{"batch_size", plan.train.batch_size},
        {"steps", plan.train.steps},
        {"weight_decay", plan.train.weight_decay},
        {"seeds", plan.train.seeds},
        {"shuffle_seed", plan.train.shuffle_seed}}},
      {"stimulus",
       {{"resolution", s.resolution},
        {"vary_radii", s.vary_radii},
        {"const_radius", s.const_radius},
        {"reference_count", s.reference_count},
        {"stroke_width", s.stroke_width},
        {"min_gap", s.min_gap},
        {"margin", s.margin},
        {"max_attempts", s.max_attempts},
        {"radius_redraws", s.radius_redraws}}},
      {"data",
       {{"train_seed", plan.data.train_seed},
        {"test_seed", plan.data.test_seed},
        {"train_count", plan.data.train_count},
        {"test_count", plan.data.test_count}}},
      {"analysis",
       {{"ci_level", a.ci_level},
        {"bootstrap_resamples", a.bootstrap_resamples},
        {"bootstrap_seed", a.bootstrap_seed},
        {"alpha", a.alpha},
        {"discriminability_models", plan.discriminability_models()},
        {"embeddings", a.embeddings},
        {"pca_dims", a.pca_dims},
        {"perplexity", a.perplexity},
        {"tsne_iterations", a.tsne_iterations},
        {"tsne_seed", a.tsne_seed},
        {"null_shuffles", a.null_shuffles}}},
  };
}

// --- datasets ------------------------------------------------------------------

namespace {

std::uint64_t category_key(Category c) { return static_cast<std::uint64_t>(c); }

}  // namespace

stimgen::StimulusSpec train_spec(const ExperimentPlan& plan, Category c) {
  stimgen::StimulusSpec s = plan.stimulus;
  s.category = c;
  s.seed = derive_seed(plan.data.train_seed, {category_key(c)});
  return s;
}

stimgen::StimulusSpec test_spec(const ExperimentPlan& plan, Category c) {
  stimgen::StimulusSpec s = plan.stimulus;
  s.category = c;
  s.seed = derive_seed(plan.data.test_seed, {category_key(c)});
  return s;
}

Dataset make_train_dataset(const ExperimentPlan& plan, Category c, unsigned jobs) {
  return stimgen::generate_dataset(train_spec(plan, c), stimgen::kAnchors, plan.data.train_count, jobs);
}

Dataset make_test_dataset(const ExperimentPlan& plan, Category c, unsigned jobs) {
  static constexpr int kAll[] = {1, 2, 3, 4, 5, 6, 7};
  return stimgen::generate_dataset(test_spec(plan, c), kAll, plan.data.test_count, jobs);
}

Dataset holdout_pool(const std::map<Category, Dataset>& train_sets, Category held_out) {
  std::vector<Dataset> parts;
  for (const auto& [c, ds] : train_sets) {
    if (c == held_out) continue;
    if (!ds.only_anchors())
      throw UnlabeledNumerosity("training pool for " + std::string(stimgen::to_string(c)) +
                                " contains interpolated numerosities");
    parts.push_back(ds);
  }
  if (parts.size() != 5)
    throw PlanInvalid("holdout of " + std::string(stimgen::to_string(held_out)) + " needs 5 training categories, got " +
                      std::to_string(parts.size()));
  return stimgen::merge(parts);
}

// --- training ------------------------------------------------------------------

namespace {

tn::Tensor gather(const tn::Tensor& all, std::span<const std::size_t> idx) {
  tn::Shape shape = all.shape();
  const std::size_t per = all.size() / shape[0];
  shape[0] = idx.size();
  tn::Tensor out(shape);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(all.ptr() + idx[i] * per, per, out.ptr() + i * per);
  return out;
}

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

}  // namespace

TrainedNetwork train_run(const models::Network& network, const Dataset& dataset, const TrainConfig& config,
                         const OptimizerSettings& optimizer, std::uint64_t seed) {
  if (config.batch_size < 1 || config.steps < 1) throw InvalidConfig("batch_size and steps must be >= 1");
  if (dataset.size() == 0) throw InvalidConfig("cannot train on an empty dataset");
  const std::size_t N = dataset.size();
  std::vector<std::size_t> classes(N);
  for (std::size_t i = 0; i < N; ++i) classes[i] = class_index(make_labels(dataset.items[i].n));

  const tn::Tensor images = models::images_to_tensor(dataset, network.config().channels);
  TrainedNetwork run;
  run.seed = seed;
  run.params = network.init(seed);
  run.optimizer = tn::make_optimizer(optimizer.kind, optimizer.learning_rate, config.weight_decay, run.params);
  run.losses.reserve(static_cast<std::size_t>(config.steps));

  Rng rng = make_rng(derive_seed(config.shuffle_seed, {seed}));
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t pos = N;
  std::vector<std::size_t> batch;
  for (long step = 0; step < config.steps; ++step) {
    if (pos == N) {
      shuffle(order, rng);
      pos = 0;
    }
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), N - pos);
    batch.assign(order.begin() + static_cast<long>(pos), order.begin() + static_cast<long>(pos + n));
    pos += n;

    tn::Tensor targets({n, 2});
    for (std::size_t i = 0; i < n; ++i) targets.at({i, classes[batch[i]]}) = 1.0;
    tn::Graph g;
    const auto out = network.forward(g, run.params, g.input(gather(images, batch)));
    const tn::Var loss = tn::ops::cross_entropy(g, out.logits, targets);
    const double value = g.value(loss).item();
    if (!std::isfinite(value))
      throw Divergence("loss became non-finite at step " + std::to_string(step + 1) + " (seed " +
                           std::to_string(seed) + ")",
                       step + 1, seed);
    run.losses.push_back(value);
    g.backward(loss);
    tn::optimizer_step(run.params, g.take_parameter_grads(run.params), run.optimizer);
  }
  run.train_accuracy = accuracy(network, run.params, dataset);
  return run;
}

std::vector<TrainedNetwork> replicate_runs(const models::Network& network, const Dataset& dataset,
                                           const TrainConfig& config, const OptimizerSettings& optimizer,
                                           unsigned jobs) {
  config.validate();
  std::vector<TrainedNetwork> runs(config.seeds.size());
  parallel_for(runs.size(), jobs,
               [&](std::size_t i) { runs[i] = train_run(network, dataset, config, optimizer, config.seeds[i]); });
  return runs;
}

std::map<Category, std::vector<TrainedNetwork>> holdout_train(const ExperimentPlan& plan, const ModelEntry& model,
                                                              const std::map<Category, Dataset>& train_sets,
                                                              unsigned jobs) {
  if (plan.mode != Mode::Holdout) throw PlanInvalid("holdout_train needs a holdout plan");
  const models::Network net(model.config);
  std::map<Category, std::vector<TrainedNetwork>> out;
  for (Category held : plan.test_categories) {
    const Dataset pool = holdout_pool(train_sets, held);
    auto runs = replicate_runs(net, pool, plan.train, model.optimizer, jobs);
    for (auto& r : runs) {
      r.model = model.name;
      r.train_label = "holdout_" + std::string(stimgen::to_string(held));
    }
    out.emplace(held, std::move(runs));
  }
  return out;
}

std::vector<std::filesystem::path> save_run(const TrainedNetwork& run, const std::filesystem::path& dir) {
  const auto ckpt = dir / "checkpoint.bin";
  const auto loss = dir / "loss.csv";
  tn::save_checkpoint(ckpt, run.params, run.optimizer);
  io::CsvWriter csv({"step", "loss"});
  for (std::size_t i = 0; i < run.losses.size(); ++i) csv.row({std::to_string(i + 1), io::format_double(run.losses[i])});
  csv.save(loss);
  return {ckpt, loss};
}

double accuracy(const models::Network& network, const tn::ParameterSet& params, const Dataset& dataset) {
  if (dataset.size() == 0) throw EmptySample("accuracy of an empty dataset");
  const auto eval = network.evaluate(params, models::images_to_tensor(dataset, network.config().channels));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const bool many = eval.logits.at({i, 1}) > eval.logits.at({i, 0});
    correct += many == (make_labels(dataset.items[i].n) == stimgen::Label::Many);
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

}  // namespace nbisect::harness
