#pragma once

// Pairwise discriminability of numerosities: Tukey's HSD over per-seed
// response proportions, with critical values from the studentized range
// distribution computed by quadrature.

#include <array>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nbisect/psychometrics.hpp"

namespace nbisect::stats {

// P(Q <= q) for the studentized range of k normal means with df degrees of
// freedom in the variance estimate.
double studentized_range_cdf(double q, int k, double df);

// Upper-alpha quantile: P(Q > q) = alpha. Throws InvalidConfig on bad
// arguments and ConvergenceFailure when the root is not bracketed.
double studentized_range_q(double alpha, int k, double df);

// samples[g] holds the replicate values of group g.
using GroupSamples = std::vector<std::vector<double>>;

struct PairTest {
  int i = 0;  // group indices, i < j
  int j = 0;
  double mean_diff = 0;  // mean_j - mean_i
  double q_stat = 0;     // |mean_diff| / sqrt(MSW / n); infinite when degenerate
  double critical = 0;   // HSD: q_crit * sqrt(MSW / n)
  bool significant = false;
  // MSW is zero while the means differ; the pair counts as significant.
  bool degenerate_variance = false;
};

struct TukeyResult {
  int groups = 0;
  int replicates = 0;
  double df = 0;
  double msw = 0;
  double q_critical = 0;
  std::vector<double> means;
  std::vector<PairTest> pairs;  // (0,1), (0,2), ..., (k-2,k-1)
};

// Balanced one-way Tukey HSD. Throws InsufficientReplicates with fewer than
// two groups or two replicates per group, InvalidConfig when unbalanced.
TukeyResult tukey_hsd(const GroupSamples& groups, double alpha = 0.05);

// Per-seed proportion of "many" per numerosity: group n-1 holds one value per
// replicate seed, in ascending seed order. Throws MissingNumerosity when some
// seed lacks a numerosity.
GroupSamples group_samples(std::span<const psych::ResponseRecord> records);

struct DiscriminabilityInput {
  std::string model;
  std::string category;
  GroupSamples groups;  // 7 groups, numerosities 1..7
};

struct ReportRow {
  std::string model;
  std::string category;
  PairTest test;  // indices are numerosity - 1
  bool excluded = false;
};

struct DiscriminabilityReport {
  std::vector<ReportRow> rows;
  int comparisons = 0;
  int excluded = 0;
  int tested = 0;
  int not_rejected = 0;
  // Non-rejected tested pairs by numerosity pair.
  std::map<std::pair<int, int>, int> histogram;

  nlohmann::json summary() const;
};

// Pairs (1,2) and (6,7) share a training label, so they are reported but
// left out of the tested totals.
bool excluded_pair(int n1, int n2);

DiscriminabilityReport discriminability_report(std::span<const DiscriminabilityInput> inputs, double alpha = 0.05);

void write_report_csv(const std::filesystem::path& path, const DiscriminabilityReport& report);
std::string histogram_svg(const DiscriminabilityReport& report);

}  // namespace nbisect::stats
