#include "nbisect/stats.hpp"

#include <algorithm>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/tools/toms748_solve.hpp>
#include <cmath>
#include <cstdio>
#include <limits>
#include <mutex>
#include <numbers>
#include <tuple>

#include "nbisect/error.hpp"
#include "nbisect/io.hpp"

namespace nbisect::stats {

namespace {

using boost::math::quadrature::gauss_kronrod;

constexpr double kTol = 1e-11;

double phi(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2 * std::numbers::pi); }
double Phi(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

// CDF of the range of k standard normals.
double range_cdf(double w, int k) {
  if (w <= 0) return 0.0;
  auto f = [&](double z) {
    const double d = Phi(z) - Phi(z - w);
    return phi(z) * std::pow(d, k - 1);
  };
  // phi is below 1e-16 outside [-8.5, 8.5 + w].
  const double v = k * (gauss_kronrod<double, 31>::integrate(f, -8.5, 0.0, 12, kTol) +
                        gauss_kronrod<double, 31>::integrate(f, 0.0, 8.5 + w, 12, kTol));
  return std::clamp(v, 0.0, 1.0);
}

// Critical values repeat across tests of one design; they are pure
// functions of their arguments, so memoising them changes nothing.
double cached_q(double alpha, int k, double df) {
  static std::mutex mu;
  static std::map<std::tuple<double, int, double>, double> cache;
  const auto key = std::make_tuple(alpha, k, df);
  {
    std::lock_guard lock(mu);
    if (const auto it = cache.find(key); it != cache.end()) return it->second;
  }
  const double q = studentized_range_q(alpha, k, df);
  std::lock_guard lock(mu);
  cache.emplace(key, q);
  return q;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

double studentized_range_cdf(double q, int k, double df) {
  if (k < 2 || !(df >= 1)) throw InvalidConfig("studentized range needs k >= 2 and df >= 1");
  if (q <= 0) return 0.0;
  if (std::isinf(df)) return range_cdf(q, k);

  // s = sqrt(chi2_df / df) has density
  // 2 (df/2)^(df/2) / Gamma(df/2) * s^(df-1) * exp(-df s^2 / 2).
  const double log_c = std::log(2.0) + 0.5 * df * std::log(0.5 * df) - std::lgamma(0.5 * df);
  auto f = [&](double s) {
    if (s <= 0) return 0.0;
    const double log_density = log_c + (df - 1) * std::log(s) - 0.5 * df * s * s;
    return std::exp(log_density) * range_cdf(q * s, k);
  };
  // The density peaks near s = 1 with width about 1/sqrt(2 df); splitting
  // there keeps the adaptive rule from missing it at large df.
  const double width = 12.0 / std::sqrt(2.0 * df);
  const double lo = std::max(0.0, 1.0 - width), hi = 1.0 + width;
  double total = 0;
  if (lo > 0) total += gauss_kronrod<double, 31>::integrate(f, 0.0, lo, 12, kTol);
  total += gauss_kronrod<double, 31>::integrate(f, lo, 1.0, 12, kTol);
  total += gauss_kronrod<double, 31>::integrate(f, 1.0, hi, 12, kTol);
  total += gauss_kronrod<double, 31>::integrate(f, hi, std::numeric_limits<double>::infinity(), 12, kTol);
  return std::clamp(total, 0.0, 1.0);
}

double studentized_range_q(double alpha, int k, double df) {
  if (!(alpha > 0 && alpha < 1)) throw InvalidConfig("alpha must be in (0, 1)");
  if (k < 2 || !(df >= 1)) throw InvalidConfig("studentized range needs k >= 2 and df >= 1");
  const double target = 1.0 - alpha;
  auto g = [&](double q) { return studentized_range_cdf(q, k, df) - target; };
  double a = 0, fa = -target;
  double b = 4, fb = g(b);
  while (fb < 0) {
    a = b, fa = fb;
    b *= 2;
    if (b > 1e5) throw ConvergenceFailure("studentized range quantile not bracketed");
    fb = g(b);
  }
  if (fb == 0) return b;
  boost::uintmax_t iters = 200;
  const auto r = boost::math::tools::toms748_solve(g, a, b, fa, fb, boost::math::tools::eps_tolerance<double>(45),
                                                   iters);
  if (iters >= 200) throw ConvergenceFailure("studentized range quantile did not converge");
  return 0.5 * (r.first + r.second);
}

TukeyResult tukey_hsd(const GroupSamples& groups, double alpha) {
  if (groups.size() < 2) throw InsufficientReplicates("tukey_hsd needs at least two groups");
  const std::size_t n = groups[0].size();
  if (n < 2) throw InsufficientReplicates("tukey_hsd needs at least two replicates per group");
  for (const auto& g : groups)
    if (g.size() != n) throw InvalidConfig("tukey_hsd needs a balanced design");

  TukeyResult r;
  r.groups = static_cast<int>(groups.size());
  r.replicates = static_cast<int>(n);
  r.df = static_cast<double>(groups.size() * (n - 1));
  double ss = 0;
  for (const auto& g : groups) {
    double m = 0;
    for (double v : g) m += v;
    m /= static_cast<double>(n);
    r.means.push_back(m);
    for (double v : g) ss += (v - m) * (v - m);
  }
  r.msw = ss / r.df;
  r.q_critical = cached_q(alpha, r.groups, r.df);
  const double se = std::sqrt(r.msw / static_cast<double>(n));
  for (int i = 0; i < r.groups; ++i)
    for (int j = i + 1; j < r.groups; ++j) {
      PairTest t;
      t.i = i;
      t.j = j;
      t.mean_diff = r.means[j] - r.means[i];
      t.critical = r.q_critical * se;
      // Tiny MSW from rounding of identical replicates counts as zero.
      if (se <= 1e-12 * std::max(1.0, std::abs(t.mean_diff))) {
        const bool differ = std::abs(t.mean_diff) > 1e-12;
        t.q_stat = differ ? std::numeric_limits<double>::infinity() : 0.0;
        t.significant = differ;
        t.degenerate_variance = differ;
      } else {
        t.q_stat = std::abs(t.mean_diff) / se;
        t.significant = t.q_stat > r.q_critical;
      }
      r.pairs.push_back(t);
    }
  return r;
}

GroupSamples group_samples(std::span<const psych::ResponseRecord> records) {
  std::map<std::uint64_t, std::array<std::pair<std::size_t, std::size_t>, 7>> counts;  // many, total
  for (const psych::ResponseRecord& r : records) {
    if (r.n < 1 || r.n > 7) throw InvalidConfig("numerosity out of range: " + std::to_string(r.n));
    auto& c = counts[r.seed][r.n - 1];
    c.first += r.predicted == stimgen::Label::Many;
    ++c.second;
  }
  GroupSamples groups(7);
  for (const auto& [seed, per_n] : counts)
    for (int n = 0; n < 7; ++n) {
      if (per_n[n].second == 0)
        throw MissingNumerosity("seed " + std::to_string(seed) + " has no responses for numerosity " +
                                std::to_string(n + 1));
      groups[n].push_back(static_cast<double>(per_n[n].first) / static_cast<double>(per_n[n].second));
    }
  return groups;
}

bool excluded_pair(int n1, int n2) {
  const int a = std::min(n1, n2), b = std::max(n1, n2);
  return (a == 1 && b == 2) || (a == 6 && b == 7);
}

nlohmann::json DiscriminabilityReport::summary() const {
  nlohmann::json j;
  j["comparisons"] = comparisons;
  j["excluded"] = excluded;
  j["tested"] = tested;
  j["not_rejected"] = not_rejected;
  nlohmann::json h = nlohmann::json::array();
  for (const auto& [pair, count] : histogram) h.push_back({{"pair", {pair.first, pair.second}}, {"count", count}});
  j["not_rejected_pairs"] = std::move(h);
  return j;
}

DiscriminabilityReport discriminability_report(std::span<const DiscriminabilityInput> inputs, double alpha) {
  DiscriminabilityReport rep;
  for (const DiscriminabilityInput& in : inputs) {
    if (in.groups.size() != 7)
      throw InvalidConfig("discriminability needs 7 numerosity groups for " + in.model + "/" + in.category);
    const TukeyResult t = tukey_hsd(in.groups, alpha);
    for (const PairTest& p : t.pairs) {
      ReportRow row{in.model, in.category, p, excluded_pair(p.i + 1, p.j + 1)};
      ++rep.comparisons;
      if (row.excluded) {
        ++rep.excluded;
      } else {
        ++rep.tested;
        if (!p.significant) {
          ++rep.not_rejected;
          ++rep.histogram[{p.i + 1, p.j + 1}];
        }
      }
      rep.rows.push_back(std::move(row));
    }
  }
  return rep;
}

void write_report_csv(const std::filesystem::path& path, const DiscriminabilityReport& report) {
  io::CsvWriter csv({"model", "category", "pair", "mean_diff", "q_stat", "critical", "significant", "flags"});
  for (const ReportRow& r : report.rows) {
    std::string flags;
    if (r.excluded) flags = "excluded";
    if (r.test.degenerate_variance) flags += flags.empty() ? "degenerate_variance" : ";degenerate_variance";
    csv.row({r.model, r.category, std::to_string(r.test.i + 1) + "-" + std::to_string(r.test.j + 1),
             io::format_double(r.test.mean_diff),
             std::isinf(r.test.q_stat) ? "inf" : io::format_double(r.test.q_stat),
             io::format_double(r.test.critical), r.test.significant ? "1" : "0", flags});
  }
  csv.save(path);
}

std::string histogram_svg(const DiscriminabilityReport& report) {
  // One bar per tested numerosity pair, in (i, j) order.
  std::vector<std::pair<int, int>> pairs;
  for (int i = 1; i <= 7; ++i)
    for (int j = i + 1; j <= 7; ++j)
      if (!excluded_pair(i, j)) pairs.emplace_back(i, j);
  int top_count = 1;
  for (const auto& [p, c] : report.histogram) top_count = std::max(top_count, c);

  const double w = 640, h = 260, left = 40, bottom = 50, top = 25;
  const double pw = w - left - 10, ph = h - top - bottom;
  const double bw = pw / static_cast<double>(pairs.size());
  std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"640\" height=\"260\" "
       "font-family=\"sans-serif\" font-size=\"10\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"320\" y=\"15\" text-anchor=\"middle\">non-rejected pairs (" + std::to_string(report.not_rejected) +
       " of " + std::to_string(report.tested) + ")</text>\n";
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto it = report.histogram.find(pairs[k]);
    const int c = it == report.histogram.end() ? 0 : it->second;
    const double bh = ph * c / top_count;
    const double x = left + bw * static_cast<double>(k);
    s += "<rect x=\"" + fixed(x + 2, 2) + "\" y=\"" + fixed(top + ph - bh, 2) + "\" width=\"" + fixed(bw - 4, 2) +
         "\" height=\"" + fixed(bh, 2) + "\" fill=\"#1f77b4\"/>\n";
    s += "<text x=\"" + fixed(x + bw / 2, 2) + "\" y=\"" + fixed(top + ph + 14, 2) +
         "\" text-anchor=\"middle\">" + std::to_string(pairs[k].first) + "," + std::to_string(pairs[k].second) +
         "</text>\n";
    if (c > 0)
      s += "<text x=\"" + fixed(x + bw / 2, 2) + "\" y=\"" + fixed(top + ph - bh - 3, 2) +
           "\" text-anchor=\"middle\">" + std::to_string(c) + "</text>\n";
  }
  s += "<line x1=\"" + fixed(left, 1) + "\" y1=\"" + fixed(top + ph, 1) + "\" x2=\"" + fixed(left + pw, 1) +
       "\" y2=\"" + fixed(top + ph, 1) + "\" stroke=\"black\"/>\n";
  s += "<text x=\"320\" y=\"" + fixed(h - 10, 1) + "\" text-anchor=\"middle\">numerosity pair</text>\n";
  s += "</svg>\n";
  return s;
}

}  // namespace nbisect::stats
