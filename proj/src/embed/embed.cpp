#include "nbisect/embed.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <numeric>

#include "nbisect/error.hpp"
#include "nbisect/io.hpp"
#include "nbisect/parallel.hpp"
#include "nbisect/rng.hpp"

namespace nbisect::embed {

namespace {

double gaussian(Rng& rng) {
  const double u = 1.0 - uniform01(rng), v = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u)) * std::cos(2.0 * std::numbers::pi * v);
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::vector<double> squared_distances(const Matrix& x) {
  const std::size_t n = x.rows;
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < x.cols; ++c) {
        const double t = x(i, c) - x(j, c);
        s += t * t;
      }
      d[i * n + j] = d[j * n + i] = s;
    }
  return d;
}

// Conditional affinities for row i with the bandwidth found by bisection on
// beta = 1 / (2 sigma^2) so that the entropy equals log(perplexity).
void affinity_row(const std::vector<double>& d2, std::size_t n, std::size_t i, double perplexity, double* row) {
  const double target = std::log(perplexity);
  double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
  // Shift distances by the nearest neighbour so exp() cannot underflow to 0
  // for every j; the shift cancels in the normalisation.
  double dmin = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j)
    if (j != i) dmin = std::min(dmin, d2[i * n + j]);
  for (int it = 0; it < 200; ++it) {
    double sum = 0, wsum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) {
        row[j] = 0;
        continue;
      }
      const double dd = d2[i * n + j] - dmin;
      row[j] = std::exp(-beta * dd);
      sum += row[j];
      wsum += row[j] * dd;
    }
    const double h = std::log(sum) + beta * wsum / sum;
    for (std::size_t j = 0; j < n; ++j) row[j] /= sum;
    if (std::abs(h - target) < 1e-10) break;
    if (h > target) {
      lo = beta;
      beta = std::isinf(hi) ? beta * 2 : (beta + hi) / 2;
    } else {
      hi = beta;
      beta = (beta + lo) / 2;
    }
  }
}

double kl_divergence(const std::vector<double>& p, const Matrix& y) {
  const std::size_t n = y.rows;
  double zsum = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = y(i, 0) - y(j, 0), dy = y(i, 1) - y(j, 1);
      zsum += 2.0 / (1.0 + dx * dx + dy * dy);
    }
  double kl = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double pij = p[i * n + j];
      if (pij <= 0) continue;
      const double dx = y(i, 0) - y(j, 0), dy = y(i, 1) - y(j, 1);
      const double q = std::max(1.0 / (1.0 + dx * dx + dy * dy) / zsum, 1e-300);
      kl += 2.0 * pij * std::log(pij / q);
    }
  return kl;
}

void kl_gradient(const std::vector<double>& p, const Matrix& y, double exaggeration, Matrix& grad) {
  const std::size_t n = y.rows;
  std::vector<double> w(n * n, 0.0);
  double zsum = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = y(i, 0) - y(j, 0), dy = y(i, 1) - y(j, 1);
      const double k = 1.0 / (1.0 + dx * dx + dy * dy);
      w[i * n + j] = w[j * n + i] = k;
      zsum += 2 * k;
    }
  for (std::size_t i = 0; i < n; ++i) {
    double gx = 0, gy = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double k = w[i * n + j];
      const double m = (exaggeration * p[i * n + j] - k / zsum) * k;
      gx += m * (y(i, 0) - y(j, 0));
      gy += m * (y(i, 1) - y(j, 1));
    }
    grad(i, 0) = 4 * gx;
    grad(i, 1) = 4 * gy;
  }
}

void center(Matrix& y) {
  for (std::size_t c = 0; c < y.cols; ++c) {
    double m = 0;
    for (std::size_t i = 0; i < y.rows; ++i) m += y(i, c);
    m /= static_cast<double>(y.rows);
    for (std::size_t i = 0; i < y.rows; ++i) y(i, c) -= m;
  }
}

double spearman_rho(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> o(v.size());
    std::iota(o.begin(), o.end(), 0);
    std::stable_sort(o.begin(), o.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < o.size();) {
      std::size_t j = i;
      while (j + 1 < o.size() && v[o[j + 1]] == v[o[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[o[k]] = (static_cast<double>(i + j)) / 2.0;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n, mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return saa == 0 || sbb == 0 ? 0.0 : sab / std::sqrt(saa * sbb);
}

double centroid_rho(const Matrix& y, std::span<const int> labels) {
  std::map<int, std::array<double, 3>> acc;  // sum x, sum y, count
  for (std::size_t i = 0; i < y.rows; ++i) {
    auto& a = acc[labels[i]];
    a[0] += y(i, 0), a[1] += y(i, 1), a[2] += 1;
  }
  std::vector<double> lab, cx, cy;
  for (const auto& [l, a] : acc) {
    lab.push_back(l);
    cx.push_back(a[0] / a[2]);
    cy.push_back(a[1] / a[2]);
  }
  const double n = static_cast<double>(lab.size());
  const double mx = std::accumulate(cx.begin(), cx.end(), 0.0) / n;
  const double my = std::accumulate(cy.begin(), cy.end(), 0.0) / n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < cx.size(); ++i) {
    sxx += (cx[i] - mx) * (cx[i] - mx);
    sxy += (cx[i] - mx) * (cy[i] - my);
    syy += (cy[i] - my) * (cy[i] - my);
  }
  // Leading eigenvector of the 2x2 centroid scatter.
  const double theta = 0.5 * std::atan2(2 * sxy, sxx - syy);
  const double ux = std::cos(theta), uy = std::sin(theta);
  std::vector<double> proj;
  for (std::size_t i = 0; i < cx.size(); ++i) proj.push_back((cx[i] - mx) * ux + (cy[i] - my) * uy);
  return spearman_rho(lab, proj);
}

}  // namespace

EmbeddingSet extract_embeddings(const models::Network& network, const tn::ParameterSet& params,
                                const stimgen::Dataset& dataset) {
  const tn::Tensor images = models::images_to_tensor(dataset, network.config().channels);
  const models::Network::Evaluation ev = network.evaluate(params, images);
  const tn::Shape& s = ev.embedding.shape();
  if (s.size() != 2 || s[0] != dataset.size() || s[1] != network.embedding_dim())
    throw ShapeMismatch("embedding has shape " + tn::to_string(s) + " for " + std::to_string(dataset.size()) +
                        " images");
  EmbeddingSet e;
  e.points = Matrix(s[0], s[1]);
  for (std::size_t i = 0; i < e.points.data.size(); ++i) {
    e.points.data[i] = ev.embedding[i];
    if (!std::isfinite(e.points.data[i])) throw DegenerateInput("non-finite embedding value");
  }
  for (const auto& item : dataset.items) e.labels.push_back(item.n);
  return e;
}

PcaResult pca_project(const Matrix& x, std::size_t k) {
  const std::size_t n = x.rows, d = x.cols;
  if (k < 1 || k > d || n <= k)
    throw InvalidConfig("pca_project needs N > k >= 1 and k <= dim (N=" + std::to_string(n) +
                        ", dim=" + std::to_string(d) + ", k=" + std::to_string(k) + ")");
  Matrix xc = x;
  for (std::size_t c = 0; c < d; ++c) {
    double m = 0;
    for (std::size_t i = 0; i < n; ++i) m += xc(i, c);
    m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) xc(i, c) -= m;
  }
  Matrix cov(d, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a) {
      const double xa = xc(i, a);
      if (xa == 0) continue;
      for (std::size_t b = a; b < d; ++b) cov(a, b) += xa * xc(i, b);
    }
  double trace = 0;
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = a; b < d; ++b) {
      cov(a, b) /= static_cast<double>(n - 1);
      cov(b, a) = cov(a, b);
    }
    trace += cov(a, a);
  }

  const Matrix cov0 = cov;
  PcaResult r;
  std::vector<std::vector<double>> comps;
  Rng rng = make_rng(0x9CA);
  for (std::size_t c = 0; c < k; ++c) {
    if (trace <= 0) {
      r.rank_deficient = true;
      break;
    }
    std::vector<double> v(d), w(d);
    for (double& t : v) t = gaussian(rng);
    double lambda = 0;
    int stalled = 0;
    for (int it = 0; it < 20000; ++it) {
      // Keep the iterate orthogonal to earlier components so rounding
      // cannot reintroduce them.
      for (const auto& u : comps) {
        const double dot = std::inner_product(v.begin(), v.end(), u.begin(), 0.0);
        for (std::size_t a = 0; a < d; ++a) v[a] -= dot * u[a];
      }
      const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
      if (norm == 0) break;
      for (double& t : v) t /= norm;
      for (std::size_t a = 0; a < d; ++a) {
        double s = 0;
        for (std::size_t b = 0; b < d; ++b) s += cov(a, b) * v[b];
        w[a] = s;
      }
      const double next = std::inner_product(v.begin(), v.end(), w.begin(), 0.0);
      double diff = 0;
      for (std::size_t a = 0; a < d; ++a) diff += (w[a] - next * v[a]) * (w[a] - next * v[a]);
      // Clustered eigenvalues leave the vector wandering inside their
      // subspace long after the Rayleigh quotient has settled, so a stable
      // eigenvalue also ends the iteration.
      stalled = std::abs(next - lambda) <= 1e-15 * trace ? stalled + 1 : 0;
      lambda = next;
      v.swap(w);
      if (std::sqrt(diff) <= 1e-10 * trace || stalled >= 5) break;
    }
    for (const auto& u : comps) {
      const double dot = std::inner_product(v.begin(), v.end(), u.begin(), 0.0);
      for (std::size_t a = 0; a < d; ++a) v[a] -= dot * u[a];
    }
    const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (lambda <= 1e-12 * trace || norm == 0) {
      r.rank_deficient = true;
      break;
    }
    for (double& t : v) t /= norm;
    // Deflate.
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) cov(a, b) -= lambda * v[a] * v[b];
    comps.push_back(v);
  }

  // Rayleigh-Ritz on the span of the deflation vectors: rotating them by the
  // eigenvectors of the small projected matrix leaves them exactly
  // orthogonal and turns residual power-iteration error into second order
  // eigenvalue error.
  const std::size_t kk = comps.size();
  if (kk > 0) {
    Eigen::MatrixXd basis(d, kk);
    for (std::size_t c = 0; c < kk; ++c)
      for (std::size_t a = 0; a < d; ++a) basis(a, c) = comps[c][a];
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(basis);
    const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(d, kk);
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> full(
        cov0.data.data(), d, d);
    const Eigen::MatrixXd small = q.transpose() * full * q;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (small + small.transpose()));
    const Eigen::MatrixXd rotated = q * es.eigenvectors();
    for (std::size_t c = 0; c < kk; ++c) {
      const Eigen::Index src = static_cast<Eigen::Index>(kk - 1 - c);  // eigenvalues come ascending
      std::vector<double> v(d);
      for (std::size_t a = 0; a < d; ++a) v[a] = rotated(a, src);
      // Sign convention: largest-magnitude loading positive.
      const auto big =
          std::max_element(v.begin(), v.end(), [](double p, double q2) { return std::abs(p) < std::abs(q2); });
      if (*big < 0)
        for (double& t : v) t = -t;
      comps[c] = std::move(v);
      const double lambda = std::max(es.eigenvalues()(src), 0.0);
      r.eigenvalues.push_back(lambda);
      r.explained.push_back(lambda / trace);
    }
  }

  r.components = Matrix(kk, d);
  r.scores = Matrix(n, kk);
  for (std::size_t c = 0; c < kk; ++c)
    for (std::size_t a = 0; a < d; ++a) r.components(c, a) = comps[c][a];
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < kk; ++c) {
      double s = 0;
      for (std::size_t a = 0; a < d; ++a) s += xc(i, a) * comps[c][a];
      r.scores(i, c) = s;
    }
  return r;
}

Projection2D tsne_project(const Matrix& x, const TsneConfig& config, unsigned jobs) {
  const std::size_t n = x.rows;
  if (n < 2) throw DegenerateInput("t-SNE needs at least two points");
  if (!(config.perplexity > 1) || config.perplexity >= static_cast<double>(n))
    throw InvalidConfig("perplexity must be in (1, N)");
  const std::vector<double> d2 = squared_distances(x);
  if (*std::max_element(d2.begin(), d2.end()) == 0) throw DegenerateInput("all points are identical");

  std::vector<double> cond(n * n);
  parallel_for(n, jobs, [&](std::size_t i) { affinity_row(d2, n, i, config.perplexity, &cond[i * n]); });
  std::vector<double> p(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      p[i * n + j] = i == j ? 0.0 : std::max((cond[i * n + j] + cond[j * n + i]) / (2.0 * n), 1e-300);

  Projection2D out;
  out.method = "pca+tsne";
  Matrix y(n, 2), grad(n, 2), update(n, 2), gains(n, 2);
  Rng rng = make_rng(config.seed);
  for (double& v : y.data) v = 1e-4 * gaussian(rng);
  std::fill(gains.data.begin(), gains.data.end(), 1.0);

  double eta = config.learning_rate;
  double current = 0;
  for (int it = 0; it < config.iterations; ++it) {
    const bool early = it < config.exaggeration_iterations;
    const double momentum = early ? 0.5 : 0.8;
    kl_gradient(p, y, early ? config.exaggeration : 1.0, grad);
    if (!early && it == config.exaggeration_iterations) current = kl_divergence(p, y);

    Matrix candidate = y, new_update = update, new_gains = gains;
    for (int attempt = 0;; ++attempt) {
      for (std::size_t e = 0; e < y.data.size(); ++e) {
        const double g = grad.data[e];
        double& gain = new_gains.data[e];
        gain = (g > 0) != (update.data[e] > 0) ? gain + 0.2 : gain * 0.8;
        gain = std::max(gain, 0.01);
        new_update.data[e] = momentum * update.data[e] - eta * gain * g;
        candidate.data[e] = y.data[e] + new_update.data[e];
      }
      center(candidate);
      if (early) break;
      const double kl = kl_divergence(p, candidate);
      if (kl <= current) {
        current = kl;
        break;
      }
      // Undo: drop momentum, reset the adaptive gains and halve the rate.
      ++out.rejected_steps;
      eta *= 0.5;
      std::fill(update.data.begin(), update.data.end(), 0.0);
      std::fill(gains.data.begin(), gains.data.end(), 1.0);
      new_gains = gains;
      if (attempt >= 30) {
        candidate = y;
        new_update = update;
        break;
      }
    }
    y = std::move(candidate);
    update = std::move(new_update);
    gains = std::move(new_gains);
    if (!early) out.trace.push_back(current);
  }
  out.kl = out.trace.empty() ? kl_divergence(p, y) : current;
  out.coords = std::move(y);
  return out;
}

Projection2D pca_tsne(const Matrix& x, const TsneConfig& config, std::size_t pca_dims, unsigned jobs) {
  const std::size_t k = std::min({pca_dims, x.cols, x.rows - 1});
  const PcaResult pca = pca_project(x, k);
  if (pca.scores.cols == 0) throw DegenerateInput("embedding has no variance");
  return tsne_project(pca.scores, config, jobs);
}

OrderingScore ordering_score(const Matrix& projection, std::span<const int> labels) {
  if (labels.size() != projection.rows) throw ShapeMismatch("one label per projected point required");
  const std::size_t n = projection.rows;
  std::map<int, std::size_t> sizes;
  for (int l : labels) ++sizes[l];
  if (sizes.size() < 2) throw InvalidConfig("ordering_score needs at least two labels");

  std::map<int, std::pair<double, std::size_t>> by_label;
  double total = 0;
  std::map<int, double> dsum;
  for (std::size_t i = 0; i < n; ++i) {
    dsum.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dx = projection(i, 0) - projection(j, 0), dy = projection(i, 1) - projection(j, 1);
      dsum[labels[j]] += std::sqrt(dx * dx + dy * dy);
    }
    double s = 0;
    const std::size_t own = sizes[labels[i]];
    if (own > 1) {
      const double a = dsum[labels[i]] / static_cast<double>(own - 1);
      double b = std::numeric_limits<double>::infinity();
      for (const auto& [l, sum] : dsum)
        if (l != labels[i]) b = std::min(b, sum / static_cast<double>(sizes[l]));
      const double m = std::max(a, b);
      s = m > 0 ? (b - a) / m : 0.0;
    }
    total += s;
    auto& acc = by_label[labels[i]];
    acc.first += s;
    ++acc.second;
  }
  OrderingScore o;
  o.silhouette = total / static_cast<double>(n);
  for (const auto& [l, acc] : by_label) o.silhouette_by_label.emplace_back(l, acc.first / acc.second);
  o.rho = centroid_rho(projection, labels);
  o.abs_rho = std::abs(o.rho);
  return o;
}

double ordering_null_line(const Matrix& projection, std::span<const int> labels, int shuffles, std::uint64_t seed,
                          double quantile) {
  if (shuffles < 1) throw InvalidConfig("null line needs at least one shuffle");
  Rng rng = make_rng(seed);
  std::vector<int> perm(labels.begin(), labels.end());
  std::vector<double> null;
  for (int s = 0; s < shuffles; ++s) {
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(rng, i)]);
    null.push_back(std::abs(centroid_rho(projection, perm)));
  }
  std::sort(null.begin(), null.end());
  const std::size_t at = static_cast<std::size_t>(std::ceil(quantile * shuffles)) - 1;
  return null[std::min(at, null.size() - 1)];
}

void write_projection_csv(const std::filesystem::path& path, const Projection2D& p, std::span<const int> labels,
                          const std::string& category) {
  io::CsvWriter csv({"x", "y", "numerosity", "category"});
  for (std::size_t i = 0; i < p.coords.rows; ++i)
    csv.row({io::format_double(p.coords(i, 0)), io::format_double(p.coords(i, 1)), std::to_string(labels[i]),
             category});
  csv.save(path);
}

std::string projection_svg(const Projection2D& p, std::span<const int> labels, const std::string& title) {
  static const char* kColors[] = {"#440154", "#443983", "#31688e", "#21918c", "#35b779", "#90d743", "#fde725"};
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (p.coords.rows > 0) {
    xmin = xmax = p.coords(0, 0);
    ymin = ymax = p.coords(0, 1);
    for (std::size_t i = 0; i < p.coords.rows; ++i) {
      xmin = std::min(xmin, p.coords(i, 0)), xmax = std::max(xmax, p.coords(i, 0));
      ymin = std::min(ymin, p.coords(i, 1)), ymax = std::max(ymax, p.coords(i, 1));
    }
  }
  const double sx = xmax > xmin ? 340 / (xmax - xmin) : 1, sy = ymax > ymin ? 340 / (ymax - ymin) : 1;
  std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"460\" height=\"400\" "
       "font-family=\"sans-serif\" font-size=\"11\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"200\" y=\"16\" text-anchor=\"middle\">" + title + "</text>\n";
  for (std::size_t i = 0; i < p.coords.rows; ++i) {
    const int l = std::clamp(labels[i], 1, 7);
    s += "<circle cx=\"" + fixed(30 + (p.coords(i, 0) - xmin) * sx, 2) + "\" cy=\"" +
         fixed(30 + (ymax - p.coords(i, 1)) * sy, 2) + "\" r=\"2.5\" fill=\"" + kColors[l - 1] +
         "\" fill-opacity=\"0.8\"/>\n";
  }
  for (int l = 1; l <= 7; ++l) {
    const double y = 40 + 18.0 * (l - 1);
    s += "<circle cx=\"400\" cy=\"" + fixed(y, 1) + "\" r=\"5\" fill=\"" + kColors[l - 1] + "\"/>\n";
    s += "<text x=\"410\" y=\"" + fixed(y + 4, 1) + "\">" + std::to_string(l) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

}  // namespace nbisect::embed
