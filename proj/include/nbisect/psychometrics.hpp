#pragma once

// Responses of trained networks turned into psychometric curves, anchor error
// tables, curve-shape labels and cross-stimulus transfer grids.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nbisect/models.hpp"
#include "nbisect/stimgen.hpp"

namespace nbisect::psych {

using stimgen::Category;

struct ResponseRecord {
  std::string model;
  std::string family;
  std::uint64_t seed = 0;
  std::string train_category;
  std::string test_category;
  int n = 0;
  int index = 0;
  double p_many = 0;
  stimgen::Label predicted = stimgen::Label::Few;
};

// softmax(l)[many], evaluated without overflow.
double p_many(double few_logit, double many_logit);
// many iff p > 0.5; an exact tie answers few.
stimgen::Label predict(double p);

// Fields copied into every record of one batch.
struct RecordContext {
  std::string model;
  std::string family;
  std::uint64_t seed = 0;
  std::string train_category;
  std::string test_category;
};

// One record per dataset item from [N, 2] logits. Throws ShapeMismatch.
std::vector<ResponseRecord> records_from_logits(const tn::Tensor& logits, const stimgen::Dataset& dataset,
                                                const RecordContext& context);
std::vector<ResponseRecord> classify_batch(const models::Network& network, const tn::ParameterSet& params,
                                           const stimgen::Dataset& dataset, const RecordContext& context);

struct BootstrapConfig {
  double level = 0.95;
  int resamples = 1000;
  std::uint64_t seed = 0;
};

struct Interval {
  double low = 0;
  double high = 0;
};

// Percentile bootstrap of the mean. The interval is widened, if needed, to
// contain the sample mean. Throws EmptySample.
Interval bootstrap_ci(std::span<const double> samples, const BootstrapConfig& config);

struct CurvePoint {
  int n = 0;
  double proportion_many = 0;
  double ci_low = 0;
  double ci_high = 0;
  std::size_t count = 0;
};

struct PsychometricCurve {
  std::string model;
  std::string train_category;
  std::string test_category;
  std::size_t seeds = 0;  // distinct replicate seeds pooled into the curve
  std::array<CurvePoint, 7> points{};

  std::array<double, 7> proportions() const;
};

// Pooled over images and seeds. Bootstrap streams are derived per
// numerosity from config.seed. Throws MissingNumerosity.
PsychometricCurve psychometric_curve(std::span<const ResponseRecord> records, const BootstrapConfig& config);

// Proportion of "many" answers per numerosity; the same helper feeds curves
// and error rates so the two always agree.
double proportion_many(std::span<const ResponseRecord> records, int n);

struct AnchorErrors {
  double few_error = 0;   // % of 1/2 images answered many
  double many_error = 0;  // % of 6/7 images answered few
  double total_error = 0;         // mean of the two class rates
  double pooled_total_error = 0;  // over all anchor images
};

// Records at 3..5 are ignored. Throws MissingNumerosity when an anchor is absent.
AnchorErrors anchor_error_rates(std::span<const ResponseRecord> records);

struct LogisticFit {
  double midpoint = 0;  // mu
  double spread = 0;    // sigma
  double residual = 0;  // sum of squared errors
};

// Least squares fit of 1 / (1 + exp(-(n - mu) / sigma)) seeded from a grid
// and refined by damped Gauss-Newton. Throws DegenerateFit on a constant
// curve.
LogisticFit fit_logistic(const std::array<double, 7>& curve);

enum class CurveShape { Sigmoid, Flat, Inverted, AllOrNoneFew, AllOrNoneMany };

std::string_view to_string(CurveShape s);

struct ShapeThresholds {
  double low = 0.25;
  double high = 0.75;
  double min_spearman = 0.8;
  double all_or_none = 0.9;
  double flat_range = 0.3;
};

struct ShapeResult {
  CurveShape shape = CurveShape::Flat;
  double low_mean = 0;   // mean of P(1), P(2)
  double high_mean = 0;  // mean of P(6), P(7)
  double spearman = 0;   // rank correlation of n and P
  double range = 0;      // max - min
  // Flat curves whose range exceeds flat_range match no shape cleanly.
  bool residual = false;
};

ShapeResult classify_curve_shape(const std::array<double, 7>& curve, const ShapeThresholds& t = {});

// Spearman rank correlation with average ranks for ties; 0 when either
// variable is constant.
double spearman(std::span<const double> x, std::span<const double> y);

struct TransferCell {
  Category train;
  Category test;
  PsychometricCurve curve;
  ShapeResult shape;
};

// Bootstrap seed of the curve for one (train, test) cell.
std::uint64_t curve_seed(std::uint64_t base, Category train, Category test);

// Grid over the given categories for one model; records are grouped by
// their category fields. Cell (X, X) is computed exactly like a standalone
// curve for X with curve_seed(base, X, X).
std::vector<TransferCell> transfer_matrix(std::span<const ResponseRecord> records, std::span<const Category> train,
                                          std::span<const Category> test, const BootstrapConfig& config,
                                          const ShapeThresholds& thresholds = {});

// --- output -----------------------------------------------------------------

void write_records_csv(const std::filesystem::path& path, std::span<const ResponseRecord> records);
std::vector<ResponseRecord> read_records_csv(const std::filesystem::path& path);
void write_curve_csv(const std::filesystem::path& path, const PsychometricCurve& curve);
std::string curve_svg(const PsychometricCurve& curve);

struct ErrorRow {
  std::string category;
  std::string model;
  AnchorErrors errors;
};

// Rows are categories; for every model there are few/many/total columns.
void write_error_table_csv(const std::filesystem::path& path, std::span<const ErrorRow> rows);

}  // namespace nbisect::psych
