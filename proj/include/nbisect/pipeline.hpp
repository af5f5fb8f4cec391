#pragma once

// Plan-driven runs: dataset export, the full train/analyse pipeline and the
// markdown report. Each writes a manifest of content hashes into its output
// directory.

#include <filesystem>
#include <string>

#include "nbisect/harness.hpp"

namespace nbisect::pipeline {

inline constexpr const char* kToolVersion = "nbisect 0.3.0";

struct RunOptions {
  unsigned jobs = 1;
};

// PNGs, manifest.json and features.csv for the train and test split of every
// category named in the plan. Throws PlacementInfeasible.
void run_generate(const harness::ExperimentPlan& plan, const std::string& plan_text,
                  const std::filesystem::path& out, const RunOptions& options = {});

// Train, respond, analyse and report. On failure the completed artifacts stay
// on disk, the manifest records the failed stage and the error is rethrown.
void run_experiment(const harness::ExperimentPlan& plan, const std::string& plan_text,
                    const std::filesystem::path& out, const RunOptions& options = {});

// Rebuilds report.md from summary.json after checking every hash in the
// manifest. Throws ManifestInvalid.
void run_report(const std::filesystem::path& run_dir);

// Exit code for an exception escaping one of the run_* functions.
int exit_code_for(const std::exception& e);

}  // namespace nbisect::pipeline
