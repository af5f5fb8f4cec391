#include "nbisect/stimgen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "nbisect/error.hpp"
#include "nbisect/parallel.hpp"

namespace nbisect::stimgen {

namespace {

constexpr struct {
  Category category;
  std::string_view name;
} kNames[] = {
    {Category::VarySize, "vary_size"},
    {Category::ConstSize, "const_size"},
    {Category::ConstArea, "const_area"},
    {Category::ConstAreaContour, "const_area_contour"},
    {Category::ConstCirc, "const_circ"},
    {Category::ConstCircContour, "const_circ_contour"},
};

std::string describe_radii(std::span<const double> radii) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < radii.size(); ++i) os << (i ? ", " : "") << radii[i];
  os << ']';
  return os.str();
}

}  // namespace

std::string_view to_string(Category c) {
  for (const auto& e : kNames)
    if (e.category == c) return e.name;
  return "unknown";
}

Category category_from_string(std::string_view name) {
  for (const auto& e : kNames)
    if (e.name == name) return e.category;
  throw InvalidConfig("unknown stimulus category '" + std::string(name) + "'");
}

bool is_contour(Category c) {
  return c == Category::ConstAreaContour || c == Category::ConstCircContour;
}

std::string_view to_string(Label l) {
  switch (l) {
    case Label::Few:
      return "few";
    case Label::Many:
      return "many";
    case Label::Unlabeled:
      break;
  }
  return "unlabeled";
}

Label anchor_label(int n) {
  if (n == 1 || n == 2) return Label::Few;
  if (n == 6 || n == 7) return Label::Many;
  return Label::Unlabeled;
}

double StimulusSpec::effective_stroke() const { return std::max(1.0, stroke_width * scale()); }

double StimulusSpec::max_reference_radius() const {
  switch (category) {
    case Category::VarySize:
      return vary_radii.empty() ? 0.0 : *std::max_element(vary_radii.begin(), vary_radii.end());
    case Category::ConstSize:
      return const_radius;
    case Category::ConstArea:
    case Category::ConstAreaContour:
      return const_radius * std::sqrt(reference_count / kMinNumerosity);
    case Category::ConstCirc:
    case Category::ConstCircContour:
      return const_radius * reference_count / kMinNumerosity;
  }
  return const_radius;
}

void StimulusSpec::validate() const {
  if (resolution <= 0) throw InvalidConfig("resolution must be positive");
  if (category == Category::VarySize) {
    if (vary_radii.empty()) throw InvalidConfig("vary_radii must not be empty");
    for (double r : vary_radii)
      if (!(r > 0)) throw InvalidConfig("vary_radii must be positive");
  }
  if (!(const_radius > 0)) throw InvalidConfig("const_radius must be positive");
  if (!(reference_count > 0)) throw InvalidConfig("reference_count must be positive");
  if (!(stroke_width > 0)) throw InvalidConfig("stroke_width must be positive");
  if (!(min_gap > 0)) throw InvalidConfig("min_gap must be positive");
  if (!(margin > 0)) throw InvalidConfig("margin must be positive");
  if (max_attempts < 1) throw InvalidConfig("max_attempts must be >= 1");
  if (radius_redraws < 1) throw InvalidConfig("radius_redraws must be >= 1");
  if (!(margin + max_reference_radius() < kReferenceResolution / 2)) {
    std::ostringstream os;
    os << "margin + max radius (" << margin + max_reference_radius()
       << ") must be below half the frame (" << kReferenceResolution / 2 << ") for "
       << to_string(category);
    throw InvalidConfig(os.str());
  }
}

std::size_t Image::white_count() const {
  return static_cast<std::size_t>(std::count(pixels.begin(), pixels.end(), std::uint8_t{1}));
}

std::size_t Dataset::count_for(int n) const {
  return static_cast<std::size_t>(
      std::count_if(items.begin(), items.end(), [n](const DatasetItem& it) { return it.n == n; }));
}

std::size_t Dataset::count_for(Category c, int n) const {
  return static_cast<std::size_t>(std::count_if(items.begin(), items.end(), [&](const DatasetItem& it) {
    return it.n == n && it.category == c;
  }));
}

bool Dataset::only_anchors() const {
  return std::all_of(items.begin(), items.end(),
                     [](const DatasetItem& it) { return anchor_label(it.n) != Label::Unlabeled; });
}

std::vector<double> radii_for(const StimulusSpec& spec, int n, Rng& rng) {
  if (n < kMinNumerosity || n > kMaxNumerosity)
    throw InvalidConfig("numerosity must lie in [1, 7], got " + std::to_string(n));
  const double s = spec.scale();
  std::vector<double> radii(static_cast<std::size_t>(n));
  switch (spec.category) {
    case Category::VarySize:
      for (double& r : radii) r = s * spec.vary_radii[uniform_index(rng, spec.vary_radii.size())];
      break;
    case Category::ConstSize:
      std::fill(radii.begin(), radii.end(), s * spec.const_radius);
      break;
    case Category::ConstArea:
    case Category::ConstAreaContour:
      std::fill(radii.begin(), radii.end(), s * spec.const_radius * std::sqrt(spec.reference_count / n));
      break;
    case Category::ConstCirc:
    case Category::ConstCircContour:
      std::fill(radii.begin(), radii.end(), s * spec.const_radius * spec.reference_count / n);
      break;
  }
  return radii;
}

CircleLayout place_circles(std::span<const double> radii, const StimulusSpec& spec, Rng& rng) {
  const double res = spec.resolution;
  const double margin = spec.margin * spec.scale();
  const double gap = spec.min_gap * spec.scale();

  std::vector<double> order(radii.begin(), radii.end());
  std::stable_sort(order.begin(), order.end(), std::greater<>());

  CircleLayout layout;
  layout.category = spec.category;
  layout.n = static_cast<int>(radii.size());
  layout.circles.reserve(order.size());

  auto infeasible = [&] {
    std::ostringstream os;
    os << "cannot place circles for category " << to_string(spec.category) << ", n=" << radii.size()
       << ", radii=" << describe_radii(radii) << " within " << spec.max_attempts << " attempts";
    return PlacementInfeasible(os.str());
  };

  // A circle that keeps failing is usually boxed in by earlier ones; start
  // over rather than spend the whole budget on it.
  const int restart_after = std::max(1, spec.max_attempts / 20);
  int attempts = 0;
  int failures_here = 0;
  std::size_t next = 0;
  while (next < order.size()) {
    const double r = order[next];
    const double lo = r + margin;
    const double hi = res - r - margin;
    if (lo > hi) throw infeasible();
    if (attempts >= spec.max_attempts) throw infeasible();
    ++attempts;
    const Circle c{uniform(rng, lo, hi), uniform(rng, lo, hi), r};
    const bool clear = std::all_of(layout.circles.begin(), layout.circles.end(), [&](const Circle& o) {
      const double dx = c.cx - o.cx;
      const double dy = c.cy - o.cy;
      const double need = c.r + o.r + gap;
      return dx * dx + dy * dy >= need * need;
    });
    if (clear) {
      layout.circles.push_back(c);
      ++next;
      failures_here = 0;
    } else if (++failures_here >= restart_after) {
      layout.circles.clear();
      next = 0;
      failures_here = 0;
    }
  }
  return layout;
}

Image rasterize(const CircleLayout& layout, const StimulusSpec& spec) {
  Image img;
  img.width = img.height = spec.resolution;
  img.pixels.assign(static_cast<std::size_t>(img.width) * img.height, 0);
  const bool contour = is_contour(layout.category);
  const double half = spec.effective_stroke() / 2;
  for (const Circle& c : layout.circles) {
    const double reach = contour ? c.r + half : c.r;
    const int x0 = std::max(0, static_cast<int>(std::floor(c.cx - reach - 1)));
    const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(c.cx + reach + 1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(c.cy - reach - 1)));
    const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(c.cy + reach + 1)));
    for (int y = y0; y <= y1; ++y) {
      const double dy = y + 0.5 - c.cy;
      for (int x = x0; x <= x1; ++x) {
        const double dx = x + 0.5 - c.cx;
        const double d2 = dx * dx + dy * dy;
        bool on;
        if (contour) {
          on = std::abs(std::sqrt(d2) - c.r) < half;
        } else {
          on = d2 <= c.r * c.r;
        }
        if (on) img.pixels[static_cast<std::size_t>(y) * img.width + x] = 1;
      }
    }
  }
  return img;
}

Features measure_features(const CircleLayout& layout, const Image& image) {
  Features f;
  for (const Circle& c : layout.circles) {
    f.analytic_area += std::numbers::pi * c.r * c.r;
    f.analytic_perimeter += 2 * std::numbers::pi * c.r;
  }
  f.white_pixel_count = image.white_count();
  return f;
}

std::optional<std::string> check_layout(const CircleLayout& layout, const StimulusSpec& spec) {
  const double res = spec.resolution;
  const double margin = spec.margin * spec.scale();
  const double gap = spec.min_gap * spec.scale();
  // Small slack absorbs the rounding in scaled coordinates.
  constexpr double eps = 1e-9;
  if (static_cast<int>(layout.circles.size()) != layout.n)
    return "layout holds " + std::to_string(layout.circles.size()) + " circles, expected " +
           std::to_string(layout.n);
  for (std::size_t i = 0; i < layout.circles.size(); ++i) {
    const Circle& a = layout.circles[i];
    for (double c : {a.cx, a.cy}) {
      if (c < a.r + margin - eps || c > res - a.r - margin + eps)
        return "circle " + std::to_string(i) + " leaves the frame";
    }
    for (std::size_t j = i + 1; j < layout.circles.size(); ++j) {
      const Circle& b = layout.circles[j];
      if (std::hypot(a.cx - b.cx, a.cy - b.cy) < a.r + b.r + gap - eps)
        return "circles " + std::to_string(i) + " and " + std::to_string(j) + " overlap";
    }
  }
  return std::nullopt;
}

std::uint64_t image_seed(std::uint64_t seed, int n, int index) {
  return derive_seed(seed, {static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(index)});
}

DatasetItem generate_item(const StimulusSpec& spec, int n, int index) {
  DatasetItem item;
  item.n = n;
  item.index = index;
  item.category = spec.category;
  item.label = anchor_label(n);
  item.seed = image_seed(spec.seed, n, index);
  Rng rng = make_rng(item.seed);
  // VarySize draws can be unpackable (e.g. several r=55 discs); such draws
  // are discarded and redrawn from the same stream.
  const int tries = spec.category == Category::VarySize ? spec.radius_redraws : 1;
  for (int t = 0;; ++t) {
    const std::vector<double> radii = radii_for(spec, n, rng);
    try {
      item.layout = place_circles(radii, spec, rng);
      break;
    } catch (const PlacementInfeasible&) {
      if (t + 1 >= tries) throw;
    }
  }
  item.image = rasterize(item.layout, spec);
  return item;
}

Dataset generate_dataset(const StimulusSpec& spec, std::span<const int> numerosities,
                         int count_per_numerosity, unsigned jobs) {
  spec.validate();
  Dataset ds;
  if (count_per_numerosity <= 0) return ds;
  const std::size_t per = static_cast<std::size_t>(count_per_numerosity);
  ds.items.resize(numerosities.size() * per);
  parallel_for(ds.items.size(), jobs, [&](std::size_t i) {
    const int n = numerosities[i / per];
    ds.items[i] = generate_item(spec, n, static_cast<int>(i % per));
  });
  return ds;
}

Dataset merge(std::span<const Dataset> parts) {
  Dataset out;
  for (const Dataset& p : parts) out.items.insert(out.items.end(), p.items.begin(), p.items.end());
  return out;
}

}  // namespace nbisect::stimgen
