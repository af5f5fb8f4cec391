#pragma once

// Penultimate-layer embeddings and their 2-D projections (PCA, then exact
// t-SNE), plus a scalar measure of whether clusters line up by numerosity.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nbisect/models.hpp"
#include "nbisect/stimgen.hpp"

namespace nbisect::embed {

// Row-major dense matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

struct EmbeddingSet {
  Matrix points;
  std::vector<int> labels;  // numerosity per row
  std::string model;
  std::string train_category;
  std::string test_category;
};

// Throws ShapeMismatch when the network output does not match the dataset and
// DegenerateInput on non-finite activations.
EmbeddingSet extract_embeddings(const models::Network& network, const tn::ParameterSet& params,
                                const stimgen::Dataset& dataset);

struct PcaResult {
  Matrix scores;      // [N, k'] with k' <= k
  Matrix components;  // [k', dim], unit rows
  std::vector<double> eigenvalues;
  std::vector<double> explained;  // fraction of total variance, non-increasing
  bool rank_deficient = false;    // fewer than k components carried variance
};

// Power iteration with deflation on the sample covariance. Throws
// InvalidConfig unless N > k >= 1 and k <= dim.
PcaResult pca_project(const Matrix& x, std::size_t k);

struct TsneConfig {
  double perplexity = 30.0;
  int iterations = 1000;
  std::uint64_t seed = 0;
  double learning_rate = 200.0;
  double exaggeration = 12.0;
  int exaggeration_iterations = 250;
};

struct Projection2D {
  Matrix coords;  // [N, 2]
  std::string method;
  double kl = 0;               // final objective
  std::vector<double> trace;   // KL per iteration after early exaggeration
  int rejected_steps = 0;      // steps undone because they raised KL
};

// Exact t-SNE. After early exaggeration a step that would raise KL is undone
// and retried with a smaller step, so the objective never increases there.
// Throws DegenerateInput when all points coincide.
Projection2D tsne_project(const Matrix& x, const TsneConfig& config, unsigned jobs = 1);

// PCA to min(50, dim, N - 1) dimensions followed by t-SNE.
Projection2D pca_tsne(const Matrix& x, const TsneConfig& config, std::size_t pca_dims = 50, unsigned jobs = 1);

struct OrderingScore {
  double silhouette = 0;
  std::vector<std::pair<int, double>> silhouette_by_label;
  double rho = 0;  // signed centroid order correlation
  double abs_rho = 0;
};

// Silhouettes use Euclidean distance in the projection. rho correlates each
// label with its centroid's position along the first principal axis of the
// centroids.
OrderingScore ordering_score(const Matrix& projection, std::span<const int> labels);

// 95th percentile of |rho| over `shuffles` random relabelings.
double ordering_null_line(const Matrix& projection, std::span<const int> labels, int shuffles, std::uint64_t seed,
                          double quantile = 0.95);

void write_projection_csv(const std::filesystem::path& path, const Projection2D& p, std::span<const int> labels,
                          const std::string& category);
std::string projection_svg(const Projection2D& p, std::span<const int> labels, const std::string& title);

}  // namespace nbisect::embed
