#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <iostream>

#include "nbisect/error.hpp"
#include "nbisect/io.hpp"
#include "nbisect/pipeline.hpp"

using namespace nbisect;

int main(int argc, char** argv) {
  CLI::App app{"Numerosity bisection experiments"};
  app.set_version_flag("--version", pipeline::kToolVersion);
  app.require_subcommand(1);

  std::string plan_path, out_dir, run_dir, log_level = "info";
  unsigned jobs = 1;
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  auto* gen = app.add_subcommand("generate", "Export train and test stimuli for a plan");
  auto* exp = app.add_subcommand("experiment", "Train, analyse and report");
  for (auto* sub : {gen, exp}) {
    sub->add_option("--plan", plan_path, "Plan JSON")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "Output directory")->required();
    sub->add_option("--jobs", jobs, "Worker threads")->check(CLI::Range(1u, 256u));
  }
  auto* rep = app.add_subcommand("report", "Rebuild report.md from a finished run");
  rep->add_option("run_dir", run_dir, "Run directory")->required();

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(log_level));
  spdlog::set_pattern("[%H:%M:%S] %^%l%$ %v");

  try {
    if (*rep) {
      pipeline::run_report(run_dir);
      std::cout << run_dir << "/report.md\n";
      return 0;
    }
    std::string text;
    try {
      text = io::read_file(plan_path);
    } catch (const std::exception& e) {
      throw PlanInvalid(e.what());
    }
    const harness::ExperimentPlan plan = harness::parse_plan(text);
    const pipeline::RunOptions opts{jobs};
    if (*gen)
      pipeline::run_generate(plan, text, out_dir, opts);
    else
      pipeline::run_experiment(plan, text, out_dir, opts);
    std::cout << out_dir << "/manifest.json\n";
    return 0;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return pipeline::exit_code_for(e);
  }
}
