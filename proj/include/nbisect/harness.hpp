#pragma once

// Bisection training protocol: anchors are labeled few/many, replicate
// networks are trained per stimulus condition, and each run is persisted as
// a checkpoint plus a loss trace.

#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "nbisect/models.hpp"
#include "nbisect/stimgen.hpp"
#include "nbisect/tensornet/optim.hpp"

namespace nbisect::harness {

using stimgen::Category;
using stimgen::Dataset;

// few -> 0, many -> 1. Throws UnlabeledNumerosity for 3..5 and InvalidConfig
// outside 1..7.
stimgen::Label make_labels(int n);
std::size_t class_index(stimgen::Label label);

struct OptimizerSettings {
  tn::OptimizerKind kind = tn::OptimizerKind::Adam;
  double learning_rate = 1e-4;

  friend bool operator==(const OptimizerSettings&, const OptimizerSettings&) = default;
};

OptimizerSettings default_optimizer(models::Family family);

struct TrainConfig {
  int batch_size = 16;
  long steps = 5000;
  double weight_decay = 1e-4;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::uint64_t shuffle_seed = 0x5EEDULL;

  // Throws PlanInvalid.
  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct ModelEntry {
  std::string name;
  models::NetworkConfig config;
  OptimizerSettings optimizer;
};

struct DataConfig {
  std::uint64_t train_seed = 1001;
  // Test images never share a seed stream with training images.
  std::uint64_t test_seed = 2002;
  int train_count = 100;  // per anchor numerosity
  int test_count = 100;   // per numerosity 1..7
};

struct AnalysisConfig {
  double ci_level = 0.95;
  int bootstrap_resamples = 1000;
  std::uint64_t bootstrap_seed = 77;
  double alpha = 0.05;
  // Models entering the discriminability analysis; empty means the first two.
  std::vector<std::string> discriminability_models;
  bool embeddings = true;
  int pca_dims = 50;
  double perplexity = 30.0;
  int tsne_iterations = 1000;
  std::uint64_t tsne_seed = 99;
  int null_shuffles = 1000;
};

enum class Mode { SingleStimulus, Holdout };

std::string_view to_string(Mode m);

struct ExperimentPlan {
  Mode mode = Mode::SingleStimulus;
  // single_stimulus: one model set per train category, each tested on every
  // test category. holdout: train_categories is the full pool and every test
  // category is held out in turn, training on the remaining five.
  std::vector<Category> train_categories;
  std::vector<Category> test_categories;
  std::vector<ModelEntry> models;
  TrainConfig train;
  stimgen::StimulusSpec stimulus;  // category and seed are set per dataset
  DataConfig data;
  AnalysisConfig analysis;

  // Throws PlanInvalid.
  void validate() const;
  const ModelEntry& model(std::string_view name) const;
  std::vector<std::string> discriminability_models() const;
};

// Parses and validates. Throws PlanInvalid on malformed JSON or values.
ExperimentPlan parse_plan(std::string_view json_text);
ExperimentPlan load_plan(const std::filesystem::path& path);
nlohmann::json plan_to_json(const ExperimentPlan& plan);

// Dataset specs for one category.
stimgen::StimulusSpec train_spec(const ExperimentPlan& plan, Category c);
stimgen::StimulusSpec test_spec(const ExperimentPlan& plan, Category c);

Dataset make_train_dataset(const ExperimentPlan& plan, Category c, unsigned jobs = 1);
Dataset make_test_dataset(const ExperimentPlan& plan, Category c, unsigned jobs = 1);

// Union of the anchor datasets of every pool category except `held_out`.
Dataset holdout_pool(const std::map<Category, Dataset>& train_sets, Category held_out);

struct TrainedNetwork {
  std::string model;
  std::string train_label;  // category name, or "holdout_<category>"
  std::uint64_t seed = 0;
  tn::ParameterSet params;
  tn::OptimizerState optimizer;
  std::vector<double> losses;  // cross-entropy per step, without the L2 term
  double train_accuracy = 0;
};

// `steps` minibatch updates; each epoch is a fresh permutation of the data
// and the last partial batch is kept. Throws UnlabeledNumerosity when the
// dataset holds interpolated numerosities and Divergence on a non-finite loss.
TrainedNetwork train_run(const models::Network& network, const Dataset& dataset, const TrainConfig& config,
                         const OptimizerSettings& optimizer, std::uint64_t seed);

// One run per seed in config.seeds, in that order, on up to `jobs` threads.
std::vector<TrainedNetwork> replicate_runs(const models::Network& network, const Dataset& dataset,
                                           const TrainConfig& config, const OptimizerSettings& optimizer,
                                           unsigned jobs = 1);

// Holdout mode: one replicate set per test category.
std::map<Category, std::vector<TrainedNetwork>> holdout_train(const ExperimentPlan& plan, const ModelEntry& model,
                                                              const std::map<Category, Dataset>& train_sets,
                                                              unsigned jobs = 1);

// Writes <dir>/checkpoint.bin and <dir>/loss.csv; returns both paths.
std::vector<std::filesystem::path> save_run(const TrainedNetwork& run, const std::filesystem::path& dir);

// Fraction of anchor images classified correctly.
double accuracy(const models::Network& network, const tn::ParameterSet& params, const Dataset& dataset);

}  // namespace nbisect::harness
