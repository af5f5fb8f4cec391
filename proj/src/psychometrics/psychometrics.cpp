#include "nbisect/psychometrics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>

#include "nbisect/error.hpp"
#include "nbisect/io.hpp"
#include "nbisect/rng.hpp"

namespace nbisect::psych {

namespace {

std::vector<double> outcomes_for(std::span<const ResponseRecord> records, int n) {
  std::vector<double> out;
  for (const ResponseRecord& r : records)
    if (r.n == n) out.push_back(r.predicted == stimgen::Label::Many ? 1.0 : 0.0);
  return out;
}

double quantile_sorted(const std::vector<double>& sorted, double q) {
  // Linear interpolation between order statistics (Hyndman-Fan type 7).
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

double logistic(double n, double mu, double sigma) { return 1.0 / (1.0 + std::exp(-(n - mu) / sigma)); }

double sse(const std::array<double, 7>& curve, double mu, double sigma) {
  double s = 0;
  for (int i = 0; i < 7; ++i) {
    const double d = logistic(i + 1, mu, sigma) - curve[i];
    s += d * d;
  }
  return s;
}

}  // namespace

double p_many(double few_logit, double many_logit) {
  const double d = many_logit - few_logit;
  if (d >= 0) return 1.0 / (1.0 + std::exp(-d));
  const double e = std::exp(d);
  return e / (1.0 + e);
}

stimgen::Label predict(double p) { return p > 0.5 ? stimgen::Label::Many : stimgen::Label::Few; }

std::vector<ResponseRecord> records_from_logits(const tn::Tensor& logits, const stimgen::Dataset& dataset,
                                                const RecordContext& context) {
  if (logits.shape().size() != 2 || logits.shape()[1] != 2 || logits.shape()[0] != dataset.size())
    throw ShapeMismatch("expected logits [" + std::to_string(dataset.size()) + ", 2], got " +
                        tn::to_string(logits.shape()));
  std::vector<ResponseRecord> out;
  out.reserve(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& item = dataset.items[i];
    ResponseRecord r;
    r.model = context.model;
    r.family = context.family;
    r.seed = context.seed;
    r.train_category = context.train_category;
    r.test_category = context.test_category;
    r.n = item.n;
    r.index = item.index;
    r.p_many = p_many(logits[2 * i], logits[2 * i + 1]);
    r.predicted = predict(r.p_many);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<ResponseRecord> classify_batch(const models::Network& network, const tn::ParameterSet& params,
                                           const stimgen::Dataset& dataset, const RecordContext& context) {
  const tn::Tensor images = models::images_to_tensor(dataset, network.config().channels);
  return records_from_logits(network.evaluate(params, images).logits, dataset, context);
}

Interval bootstrap_ci(std::span<const double> samples, const BootstrapConfig& config) {
  if (samples.empty()) throw EmptySample("bootstrap_ci needs at least one sample");
  if (!(config.level > 0 && config.level < 1) || config.resamples < 1)
    throw InvalidConfig("bootstrap level must be in (0, 1) and resamples >= 1");
  const std::size_t n = samples.size();
  const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(n);
  Rng rng = make_rng(config.seed);
  std::vector<double> means(static_cast<std::size_t>(config.resamples));
  for (double& m : means) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += samples[uniform_index(rng, n)];
    m = s / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  const double tail = (1.0 - config.level) / 2.0;
  Interval ci{quantile_sorted(means, tail), quantile_sorted(means, 1.0 - tail)};
  ci.low = std::min(ci.low, mean);
  ci.high = std::max(ci.high, mean);
  return ci;
}

std::array<double, 7> PsychometricCurve::proportions() const {
  std::array<double, 7> p{};
  for (int i = 0; i < 7; ++i) p[i] = points[i].proportion_many;
  return p;
}

double proportion_many(std::span<const ResponseRecord> records, int n) {
  std::size_t hits = 0, total = 0;
  for (const ResponseRecord& r : records) {
    if (r.n != n) continue;
    ++total;
    hits += r.predicted == stimgen::Label::Many;
  }
  if (total == 0) throw MissingNumerosity("no responses for numerosity " + std::to_string(n));
  return static_cast<double>(hits) / static_cast<double>(total);
}

PsychometricCurve psychometric_curve(std::span<const ResponseRecord> records, const BootstrapConfig& config) {
  PsychometricCurve c;
  if (!records.empty()) {
    c.model = records.front().model;
    c.train_category = records.front().train_category;
    c.test_category = records.front().test_category;
  }
  std::set<std::uint64_t> seeds;
  for (const ResponseRecord& r : records) seeds.insert(r.seed);
  c.seeds = seeds.size();
  for (int n = 1; n <= 7; ++n) {
    const std::vector<double> x = outcomes_for(records, n);
    if (x.empty()) throw MissingNumerosity("no responses for numerosity " + std::to_string(n));
    CurvePoint& p = c.points[n - 1];
    p.n = n;
    p.count = x.size();
    p.proportion_many = proportion_many(records, n);
    BootstrapConfig b = config;
    b.seed = derive_seed(config.seed, {static_cast<std::uint64_t>(n), std::bit_cast<std::uint64_t>(config.level)});
    const Interval ci = bootstrap_ci(x, b);
    p.ci_low = ci.low;
    p.ci_high = ci.high;
  }
  return c;
}

AnchorErrors anchor_error_rates(std::span<const ResponseRecord> records) {
  const double p1 = proportion_many(records, 1), p2 = proportion_many(records, 2);
  const double p6 = proportion_many(records, 6), p7 = proportion_many(records, 7);
  AnchorErrors e;
  e.few_error = (p1 + p2) / 2.0 * 100.0;
  e.many_error = (1.0 - (p6 + p7) / 2.0) * 100.0;
  e.total_error = (e.few_error + e.many_error) / 2.0;
  std::size_t wrong = 0, total = 0;
  for (const ResponseRecord& r : records) {
    const stimgen::Label truth = stimgen::anchor_label(r.n);
    if (truth == stimgen::Label::Unlabeled) continue;
    ++total;
    wrong += r.predicted != truth;
  }
  e.pooled_total_error = 100.0 * static_cast<double>(wrong) / static_cast<double>(total);
  return e;
}

LogisticFit fit_logistic(const std::array<double, 7>& curve) {
  const auto [mn, mx] = std::minmax_element(curve.begin(), curve.end());
  if (*mx - *mn < 1e-12) throw DegenerateFit("constant curve has no logistic fit");

  // Both signs of sigma are searched so that inverted curves fit too; the
  // refinement works on log|sigma| with the sign fixed by the grid.
  double best_mu = 4, best_sigma = 1, best = sse(curve, 4, 1);
  for (int i = 0; i <= 80; ++i) {
    const double mu = -0.5 + 0.1 * i;
    for (int j = 0; j <= 40; ++j) {
      const double mag = 0.02 * std::pow(10.0, j * 0.0625);
      for (double sign : {1.0, -1.0}) {
        const double s = sse(curve, mu, sign * mag);
        if (s < best) best = s, best_mu = mu, best_sigma = sign * mag;
      }
    }
  }

  const double sign = best_sigma < 0 ? -1.0 : 1.0;
  double mu = best_mu, t = std::log(std::abs(best_sigma));
  double lambda = 1e-3;
  for (int it = 0; it < 200; ++it) {
    const double sigma = sign * std::exp(t);
    double jtj00 = 0, jtj01 = 0, jtj11 = 0, g0 = 0, g1 = 0;
    for (int i = 0; i < 7; ++i) {
      const double z = (i + 1 - mu) / sigma;
      const double f = 1.0 / (1.0 + std::exp(-z));
      const double df = f * (1.0 - f);
      const double r = f - curve[i];
      const double dmu = -df / sigma;
      const double dt = -df * z;  // d f / d log|sigma|
      jtj00 += dmu * dmu, jtj01 += dmu * dt, jtj11 += dt * dt;
      g0 += dmu * r, g1 += dt * r;
    }
    bool improved = false;
    for (int tries = 0; tries < 20 && !improved; ++tries) {
      const double a = jtj00 * (1 + lambda), b = jtj01, d = jtj11 * (1 + lambda);
      const double det = a * d - b * b;
      if (!(std::abs(det) > 1e-300)) {
        lambda *= 10;
        continue;
      }
      const double step_mu = -(d * g0 - b * g1) / det;
      const double step_t = -(a * g1 - b * g0) / det;
      const double nt = std::clamp(t + step_t, std::log(1e-3), std::log(1e3));
      const double s = sse(curve, mu + step_mu, sign * std::exp(nt));
      if (s < best) {
        const double gain = best - s;
        best = s, mu += step_mu, t = nt;
        lambda = std::max(lambda / 10, 1e-12);
        improved = true;
        if (gain < 1e-15) it = 200;
      } else {
        lambda *= 10;
      }
    }
    if (!improved) break;
  }
  return {mu, sign * std::exp(t), best};
}

std::string_view to_string(CurveShape s) {
  switch (s) {
    case CurveShape::Sigmoid:
      return "sigmoid";
    case CurveShape::Flat:
      return "flat";
    case CurveShape::Inverted:
      return "inverted";
    case CurveShape::AllOrNoneFew:
      return "all_or_none_few";
    case CurveShape::AllOrNoneMany:
      return "all_or_none_many";
  }
  return "flat";
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeMismatch("spearman needs equal-length inputs");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < order.size();) {
      std::size_t j = i;
      while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
      const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const std::vector<double> rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

ShapeResult classify_curve_shape(const std::array<double, 7>& curve, const ShapeThresholds& t) {
  static constexpr std::array<double, 7> kN{1, 2, 3, 4, 5, 6, 7};
  ShapeResult r;
  r.low_mean = (curve[0] + curve[1]) / 2.0;
  r.high_mean = (curve[5] + curve[6]) / 2.0;
  r.spearman = spearman(kN, curve);
  const auto [mn, mx] = std::minmax_element(curve.begin(), curve.end());
  r.range = *mx - *mn;

  const bool all_many = std::all_of(curve.begin(), curve.end(), [&](double p) { return p >= t.all_or_none; });
  const bool all_few = std::all_of(curve.begin(), curve.end(), [&](double p) { return 1.0 - p >= t.all_or_none; });
  if (all_many)
    r.shape = CurveShape::AllOrNoneMany;
  else if (all_few)
    r.shape = CurveShape::AllOrNoneFew;
  else if (r.low_mean <= t.low && r.high_mean >= t.high && r.spearman >= t.min_spearman)
    r.shape = CurveShape::Sigmoid;
  else if (r.low_mean >= t.high && r.high_mean <= t.low && r.spearman <= -t.min_spearman)
    r.shape = CurveShape::Inverted;
  else {
    r.shape = CurveShape::Flat;
    r.residual = r.range > t.flat_range;
  }
  return r;
}

std::uint64_t curve_seed(std::uint64_t base, Category train, Category test) {
  return derive_seed(base, {static_cast<std::uint64_t>(train), static_cast<std::uint64_t>(test)});
}

std::vector<TransferCell> transfer_matrix(std::span<const ResponseRecord> records, std::span<const Category> train,
                                          std::span<const Category> test, const BootstrapConfig& config,
                                          const ShapeThresholds& thresholds) {
  std::map<std::pair<std::string, std::string>, std::vector<ResponseRecord>> groups;
  for (const ResponseRecord& r : records) groups[{r.train_category, r.test_category}].push_back(r);
  std::vector<TransferCell> cells;
  for (Category a : train)
    for (Category b : test) {
      const auto it = groups.find({std::string(stimgen::to_string(a)), std::string(stimgen::to_string(b))});
      if (it == groups.end())
        throw MissingNumerosity("no responses for train " + std::string(stimgen::to_string(a)) + " / test " +
                                std::string(stimgen::to_string(b)));
      BootstrapConfig bc = config;
      bc.seed = curve_seed(config.seed, a, b);
      TransferCell cell{a, b, psychometric_curve(it->second, bc), {}};
      cell.shape = classify_curve_shape(cell.curve.proportions(), thresholds);
      cells.push_back(std::move(cell));
    }
  return cells;
}

void write_records_csv(const std::filesystem::path& path, std::span<const ResponseRecord> records) {
  io::CsvWriter csv({"model", "family", "seed", "train_cat", "test_cat", "n", "index", "p_many", "label"});
  for (const ResponseRecord& r : records)
    csv.row({r.model, r.family, std::to_string(r.seed), r.train_category, r.test_category, std::to_string(r.n),
             std::to_string(r.index), io::format_double(r.p_many), std::string(stimgen::to_string(r.predicted))});
  csv.save(path);
}

std::vector<ResponseRecord> read_records_csv(const std::filesystem::path& path) {
  const auto rows = io::parse_csv(io::read_file(path));
  if (rows.empty() || rows[0].size() != 9 || rows[0][0] != "model")
    throw InvalidConfig("not a records file: " + path.string());
  std::vector<ResponseRecord> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& f = rows[i];
    if (f.size() != 9) throw InvalidConfig(path.string() + ": row " + std::to_string(i) + " has wrong width");
    try {
      ResponseRecord r;
      r.model = f[0];
      r.family = f[1];
      r.seed = std::stoull(f[2]);
      r.train_category = f[3];
      r.test_category = f[4];
      r.n = std::stoi(f[5]);
      r.index = std::stoi(f[6]);
      r.p_many = std::stod(f[7]);
      if (f[8] == "many")
        r.predicted = stimgen::Label::Many;
      else if (f[8] == "few")
        r.predicted = stimgen::Label::Few;
      else
        throw InvalidConfig("bad label '" + f[8] + "'");
      out.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw InvalidConfig(path.string() + ": malformed row " + std::to_string(i));
    }
  }
  return out;
}

void write_curve_csv(const std::filesystem::path& path, const PsychometricCurve& curve) {
  io::CsvWriter csv({"model", "train_cat", "test_cat", "seeds", "n", "proportion_many", "ci_low", "ci_high", "count"});
  for (const CurvePoint& p : curve.points)
    csv.row({curve.model, curve.train_category, curve.test_category, std::to_string(curve.seeds),
             std::to_string(p.n), io::format_double(p.proportion_many), io::format_double(p.ci_low),
             io::format_double(p.ci_high), std::to_string(p.count)});
  csv.save(path);
}

std::string curve_svg(const PsychometricCurve& curve) {
  const double w = 360, h = 260, left = 50, right = 15, top = 30, bottom = 40;
  const double pw = w - left - right, ph = h - top - bottom;
  auto x = [&](int n) { return left + pw * (n - 1) / 6.0; };
  auto y = [&](double p) { return top + ph * (1.0 - p); };
  std::string s;
  s += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" + fixed(w, 0) + "\" height=\"" +
       fixed(h, 0) + "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + fixed(w / 2, 1) + "\" y=\"16\" text-anchor=\"middle\">" + curve.model + ": " +
       curve.train_category + " / " + curve.test_category + "</text>\n";
  s += "<rect x=\"" + fixed(left, 1) + "\" y=\"" + fixed(top, 1) + "\" width=\"" + fixed(pw, 1) + "\" height=\"" +
       fixed(ph, 1) + "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int n = 1; n <= 7; ++n)
    s += "<text x=\"" + fixed(x(n), 1) + "\" y=\"" + fixed(top + ph + 15, 1) + "\" text-anchor=\"middle\">" +
         std::to_string(n) + "</text>\n";
  for (double p : {0.0, 0.5, 1.0})
    s += "<text x=\"" + fixed(left - 6, 1) + "\" y=\"" + fixed(y(p) + 4, 1) + "\" text-anchor=\"end\">" +
         fixed(p, 1) + "</text>\n";
  s += "<line x1=\"" + fixed(left, 1) + "\" y1=\"" + fixed(y(0.5), 1) + "\" x2=\"" + fixed(left + pw, 1) +
       "\" y2=\"" + fixed(y(0.5), 1) + "\" stroke=\"#bbbbbb\" stroke-dasharray=\"4 3\"/>\n";
  s += "<text x=\"" + fixed(left + pw / 2, 1) + "\" y=\"" + fixed(h - 6, 1) +
       "\" text-anchor=\"middle\">numerosity</text>\n";
  s += "<text x=\"14\" y=\"" + fixed(top + ph / 2, 1) + "\" text-anchor=\"middle\" transform=\"rotate(-90 14 " +
       fixed(top + ph / 2, 1) + ")\">P(many)</text>\n";
  std::string pts;
  for (const CurvePoint& p : curve.points) {
    s += "<line x1=\"" + fixed(x(p.n), 2) + "\" y1=\"" + fixed(y(p.ci_low), 2) + "\" x2=\"" + fixed(x(p.n), 2) +
         "\" y2=\"" + fixed(y(p.ci_high), 2) + "\" stroke=\"#d62728\"/>\n";
    pts += fixed(x(p.n), 2) + "," + fixed(y(p.proportion_many), 2) + " ";
  }
  s += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n";
  for (const CurvePoint& p : curve.points)
    s += "<circle cx=\"" + fixed(x(p.n), 2) + "\" cy=\"" + fixed(y(p.proportion_many), 2) +
         "\" r=\"3\" fill=\"#1f77b4\"/>\n";
  s += "</svg>\n";
  return s;
}

void write_error_table_csv(const std::filesystem::path& path, std::span<const ErrorRow> rows) {
  std::vector<std::string> models, categories;
  std::map<std::pair<std::string, std::string>, AnchorErrors> cells;
  for (const ErrorRow& r : rows) {
    if (std::find(models.begin(), models.end(), r.model) == models.end()) models.push_back(r.model);
    if (std::find(categories.begin(), categories.end(), r.category) == categories.end())
      categories.push_back(r.category);
    cells[{r.category, r.model}] = r.errors;
  }
  std::vector<std::string> header{"category"};
  for (const char* group : {"few", "many", "total"})
    for (const std::string& m : models) header.push_back(std::string(group) + "_" + m);
  io::CsvWriter csv(header);
  for (const std::string& c : categories) {
    std::vector<std::string> row{c};
    for (int g = 0; g < 3; ++g)
      for (const std::string& m : models) {
        const auto it = cells.find({c, m});
        if (it == cells.end()) {
          row.emplace_back();
          continue;
        }
        const AnchorErrors& e = it->second;
        row.push_back(fixed(g == 0 ? e.few_error : g == 1 ? e.many_error : e.total_error, 1));
      }
    csv.row(row);
  }
  csv.save(path);
}

}  // namespace nbisect::psych
