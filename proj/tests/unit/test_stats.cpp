#include <doctest.h>

#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <filesystem>

#include "../oracles/stats_oracles.hpp"
#include "nbisect/error.hpp"
#include "nbisect/io.hpp"
#include "nbisect/rng.hpp"
#include "nbisect/stats.hpp"

using namespace nbisect;
using namespace nbisect::stats;

namespace {

double normal(Rng& rng) {
  // Box-Muller on the deterministic uniform source.
  const double u = 1.0 - uniform01(rng), v = uniform01(rng);
  return std::sqrt(-2 * std::log(u)) * std::cos(2 * M_PI * v);
}

GroupSamples random_groups(Rng& rng, const std::vector<double>& means, int n, double sd = 1.0) {
  GroupSamples g(means.size());
  for (std::size_t i = 0; i < means.size(); ++i)
    for (int r = 0; r < n; ++r) g[i].push_back(means[i] + sd * normal(rng));
  return g;
}

}  // namespace

TEST_CASE("two groups reduce to the t distribution") {
  for (double df : {3.0, 10.0, 27.0, 120.0}) {
    const boost::math::students_t t(df);
    for (double alpha : {0.01, 0.05, 0.2}) {
      const double expect = std::sqrt(2.0) * boost::math::quantile(t, 1 - alpha / 2);
      CHECK(studentized_range_q(alpha, 2, df) == doctest::Approx(expect).epsilon(1e-7));
    }
  }
}

TEST_CASE("published table values") {
  CHECK(studentized_range_q(0.05, 3, 10) == doctest::Approx(3.877).epsilon(3e-4));
  CHECK(studentized_range_q(0.05, 5, 20) == doctest::Approx(4.232).epsilon(3e-4));
  CHECK(studentized_range_q(0.01, 4, 30) == doctest::Approx(4.799).epsilon(3e-4));
  CHECK(studentized_range_q(0.05, 7, 63) == doctest::Approx(4.30).epsilon(2e-3));
}

TEST_CASE("monotone in k and alpha") {
  for (double df : {5.0, 20.0, 60.0}) {
    double prev = 0;
    for (int k = 2; k <= 8; ++k) {
      const double q = studentized_range_q(0.05, k, df);
      CHECK(q > prev);
      prev = q;
    }
    prev = 1e9;
    for (double alpha : {0.001, 0.01, 0.05, 0.2, 0.5, 0.9, 0.99}) {
      const double q = studentized_range_q(alpha, 4, df);
      CHECK(q < prev);
      CHECK(q > 0);
      prev = q;
    }
  }
  CHECK(studentized_range_q(0.999, 3, 10) < 0.1);
  CHECK_THROWS_AS(studentized_range_q(0.0, 3, 10), InvalidConfig);
  CHECK_THROWS_AS(studentized_range_q(0.05, 1, 10), InvalidConfig);
  CHECK_THROWS_AS(studentized_range_q(0.05, 3, 0.5), InvalidConfig);
}

TEST_CASE("quantile matches a Monte Carlo oracle") {
  const double mc = oracle::mc_studentized_range_q(0.05, 3, 10, 1'000'000, 5);
  CHECK(std::abs(studentized_range_q(0.05, 3, 10) - mc) < 0.03);
  const double mc2 = oracle::mc_studentized_range_q(0.05, 7, 60, 1'000'000, 6);
  CHECK(std::abs(studentized_range_q(0.05, 7, 60) - mc2) < 0.03);
}

TEST_CASE("tukey on constructed data") {
  GroupSamples same(4, std::vector<double>{0.1, 0.4, 0.2, 0.3});
  TukeyResult r = tukey_hsd(same);
  CHECK(r.pairs.size() == 6);
  for (const PairTest& p : r.pairs) CHECK_FALSE(p.significant);

  Rng rng = make_rng(3);
  GroupSamples split = random_groups(rng, {0, 1}, 10, 1e-3);
  r = tukey_hsd(split);
  REQUIRE(r.pairs.size() == 1);
  CHECK(r.pairs[0].significant);
  CHECK_FALSE(r.pairs[0].degenerate_variance);
  CHECK(r.df == 18);

  GroupSamples flat{{0, 0, 0}, {1, 1, 1}, {1, 1, 1}};
  r = tukey_hsd(flat);
  CHECK(r.pairs[0].significant);
  CHECK(r.pairs[0].degenerate_variance);
  CHECK(std::isinf(r.pairs[0].q_stat));
  CHECK_FALSE(r.pairs[2].significant);
  CHECK_FALSE(r.pairs[2].degenerate_variance);

  CHECK_THROWS_AS(tukey_hsd({{1, 2, 3}}), InsufficientReplicates);
  CHECK_THROWS_AS(tukey_hsd({{1}, {2}}), InsufficientReplicates);
  CHECK_THROWS_AS(tukey_hsd({{1, 2}, {2, 3, 4}}), InvalidConfig);
}

TEST_CASE("relabeling groups permutes the pairs") {
  Rng rng = make_rng(8);
  const GroupSamples g = random_groups(rng, {0, 0.5, 1.0, 1.6, 0.2}, 6);
  const std::vector<int> perm{3, 0, 4, 1, 2};  // new group a holds old group perm[a]
  GroupSamples h(g.size());
  for (std::size_t a = 0; a < g.size(); ++a) h[a] = g[perm[a]];
  const TukeyResult r = tukey_hsd(g), s = tukey_hsd(h);
  CHECK(r.msw == doctest::Approx(s.msw).epsilon(1e-14));
  for (const PairTest& p : s.pairs) {
    int i = perm[p.i], j = perm[p.j];
    const bool flip = i > j;
    if (flip) std::swap(i, j);
    const auto it = std::find_if(r.pairs.begin(), r.pairs.end(), [&](const PairTest& q) { return q.i == i && q.j == j; });
    REQUIRE(it != r.pairs.end());
    CHECK(it->significant == p.significant);
    CHECK(it->q_stat == doctest::Approx(p.q_stat).epsilon(1e-12));
    CHECK(it->mean_diff == doctest::Approx(flip ? -p.mean_diff : p.mean_diff).epsilon(1e-12));
  }
}

TEST_CASE("agreement with a permutation oracle") {
  int agree = 0, total = 0;
  for (std::uint64_t d = 0; d < 20; ++d) {
    Rng rng = make_rng(derive_seed(100, {d}));
    std::vector<double> means(7);
    for (double& m : means) m = 1.5 * uniform01(rng);
    const GroupSamples g = random_groups(rng, means, 10);
    const TukeyResult r = tukey_hsd(g);
    const auto o = oracle::permutation_tukey(g, 0.05, 2000, d);
    for (std::size_t p = 0; p < r.pairs.size(); ++p) {
      ++total;
      agree += r.pairs[p].significant == o.significant[p];
    }
  }
  CHECK(static_cast<double>(agree) / total >= 0.95);
}

TEST_CASE("null family-wise error rate") {
  int rejected = 0;
  const int sims = 300;
  for (int s = 0; s < sims; ++s) {
    Rng rng = make_rng(derive_seed(555, {static_cast<std::uint64_t>(s)}));
    const TukeyResult r = tukey_hsd(random_groups(rng, std::vector<double>(7, 0.0), 10));
    rejected += std::any_of(r.pairs.begin(), r.pairs.end(), [](const PairTest& p) { return p.significant; });
  }
  CHECK(static_cast<double>(rejected) / sims <= 0.09);
}

TEST_CASE("per-seed group samples") {
  std::vector<psych::ResponseRecord> recs;
  for (std::uint64_t seed : {5, 2})
    for (int n = 1; n <= 7; ++n)
      for (int i = 0; i < 4; ++i) {
        psych::ResponseRecord r;
        r.seed = seed;
        r.n = n;
        r.predicted = (i < (seed == 2 ? 1 : 3) && n > 3) ? stimgen::Label::Many : stimgen::Label::Few;
        recs.push_back(r);
      }
  const GroupSamples g = group_samples(recs);
  REQUIRE(g.size() == 7);
  CHECK(g[0] == std::vector<double>{0, 0});
  CHECK(g[6] == std::vector<double>{0.25, 0.75});  // seed 2 first
  recs.pop_back();
  CHECK_NOTHROW(group_samples(recs));
  std::erase_if(recs, [](const psych::ResponseRecord& r) { return r.seed == 5 && r.n == 4; });
  CHECK_THROWS_AS(group_samples(recs), MissingNumerosity);
}

TEST_CASE("discriminability bookkeeping") {
  std::vector<DiscriminabilityInput> inputs;
  Rng rng = make_rng(77);
  for (const char* model : {"cnn", "mlp"})
    for (stimgen::Category c : stimgen::kAllCategories)
      inputs.push_back({model, std::string(stimgen::to_string(c)),
                        random_groups(rng, {0, 0, 0.2, 0.5, 0.8, 1, 1}, 10, 0.1)});
  const DiscriminabilityReport rep = discriminability_report(inputs);
  CHECK(rep.comparisons == 252);
  CHECK(rep.excluded == 24);
  CHECK(rep.tested == 228);
  CHECK(rep.rows.size() == 252);
  int hist = 0;
  for (const auto& [pair, count] : rep.histogram) {
    CHECK_FALSE(excluded_pair(pair.first, pair.second));
    hist += count;
  }
  CHECK(hist == rep.not_rejected);
  CHECK(rep.summary()["tested"] == 228);

  // Saturated replicates with no variance: every tested pair separates
  // through the degenerate path.
  std::vector<DiscriminabilityInput> perfect;
  for (const char* model : {"a", "b"})
    perfect.push_back({model, "const_size", GroupSamples{{0, 0, 0}, {0, 0, 0}, {.25, .25, .25}, {.5, .5, .5},
                                                         {.75, .75, .75}, {1, 1, 1}, {1, 1, 1}}});
  const DiscriminabilityReport p = discriminability_report(perfect);
  CHECK(p.tested == 38);
  CHECK(p.not_rejected == 0);
  for (const ReportRow& r : p.rows)
    if (!r.excluded) CHECK(r.test.degenerate_variance);

  const auto dir = std::filesystem::temp_directory_path() / "nbisect_test_stats";
  write_report_csv(dir / "report.csv", rep);
  CHECK(io::parse_csv(io::read_file(dir / "report.csv")).size() == 253);
  CHECK(histogram_svg(rep).find("<svg") != std::string::npos);
  std::filesystem::remove_all(dir);
}
