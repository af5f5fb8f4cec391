#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <numbers>
#include <numeric>

#include "nbisect/error.hpp"
#include "nbisect/io.hpp"
#include "nbisect/stimgen.hpp"

using namespace nbisect;
using namespace nbisect::stimgen;

namespace {

StimulusSpec spec_for(Category c, int resolution = 224, std::uint64_t seed = 7) {
  StimulusSpec s;
  s.category = c;
  s.resolution = resolution;
  s.seed = seed;
  return s;
}

// Independent pixel-center scan over the whole frame.
std::size_t scan_disc(int res, double cx, double cy, double r) {
  std::size_t n = 0;
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      if (std::sqrt(dx * dx + dy * dy) <= r) ++n;
    }
  return n;
}

}  // namespace

TEST_CASE("radii_for matches the confound-control formulas") {
  Rng rng(1);
  SUBCASE("ConstSize repeats the constant radius") {
    const auto r = radii_for(spec_for(Category::ConstSize), 5, rng);
    CHECK(r == std::vector<double>(5, 20.0));
  }
  SUBCASE("ConstArea identity at the reference count") {
    const auto r = radii_for(spec_for(Category::ConstArea), 4, rng);
    CHECK(r == std::vector<double>(4, 20.0));
  }
  SUBCASE("ConstCirc n=2 doubles the radius") {
    const auto r = radii_for(spec_for(Category::ConstCirc), 2, rng);
    CHECK(r == std::vector<double>(2, 40.0));
  }
  SUBCASE("ConstCirc keeps total circumference at 2*pi*80 for every n") {
    for (int n = 1; n <= 7; ++n) {
      const auto r = radii_for(spec_for(Category::ConstCircContour), n, rng);
      const double circ = 2 * std::numbers::pi * std::accumulate(r.begin(), r.end(), 0.0);
      CHECK(circ == doctest::Approx(2 * std::numbers::pi * 80).epsilon(1e-14));
    }
  }
  SUBCASE("ConstArea keeps total area at 4*pi*400 for every n") {
    for (int n = 1; n <= 7; ++n) {
      const auto r = radii_for(spec_for(Category::ConstArea), n, rng);
      double area = 0;
      for (double x : r) area += std::numbers::pi * x * x;
      CHECK(area == doctest::Approx(4 * std::numbers::pi * 400).epsilon(1e-14));
    }
  }
  SUBCASE("VarySize draws from the configured set") {
    const auto spec = spec_for(Category::VarySize);
    for (int i = 0; i < 50; ++i)
      for (double r : radii_for(spec, 7, rng)) CHECK((r == 10.0 || r == 35.0 || r == 55.0));
  }
  SUBCASE("radii scale with resolution") {
    const auto r = radii_for(spec_for(Category::ConstSize, 112), 1, rng);
    CHECK(r[0] == doctest::Approx(10.0));
  }
  SUBCASE("numerosity outside 1..7 is rejected") {
    CHECK_THROWS_AS(radii_for(spec_for(Category::ConstSize), 0, rng), InvalidConfig);
    CHECK_THROWS_AS(radii_for(spec_for(Category::ConstSize), 8, rng), InvalidConfig);
  }
}

TEST_CASE("place_circles respects the frame and the spacing rules") {
  const auto spec = spec_for(Category::ConstCirc);
  SUBCASE("a single r=80 circle stays within [82, 142]") {
    Rng rng(3);
    const std::vector<double> radii{80.0};
    double lo = 1e9, hi = -1e9;
    for (int i = 0; i < 1000; ++i) {
      const auto layout = place_circles(radii, spec, rng);
      for (double c : {layout.circles[0].cx, layout.circles[0].cy}) {
        lo = std::min(lo, c);
        hi = std::max(hi, c);
      }
    }
    CHECK(lo >= 82.0);
    CHECK(hi <= 142.0);
    // The range is actually explored, not collapsed to the centre.
    CHECK(lo < 85.0);
    CHECK(hi > 139.0);
  }
  SUBCASE("same seed gives the same layout") {
    const std::vector<double> radii(5, 20.0);
    Rng a(11), b(11);
    const auto la = place_circles(radii, spec, a);
    const auto lb = place_circles(radii, spec, b);
    REQUIRE(la.circles.size() == lb.circles.size());
    for (std::size_t i = 0; i < la.circles.size(); ++i) {
      CHECK(la.circles[i].cx == lb.circles[i].cx);
      CHECK(la.circles[i].cy == lb.circles[i].cy);
    }
  }
  SUBCASE("seven r=55 discs cannot fit") {
    Rng rng(5);
    const std::vector<double> radii(7, 55.0);
    CHECK_THROWS_AS(place_circles(radii, spec, rng), PlacementInfeasible);
    try {
      place_circles(radii, spec, rng);
    } catch (const PlacementInfeasible& e) {
      const std::string msg = e.what();
      CHECK(msg.find("const_circ") != std::string::npos);
      CHECK(msg.find("n=7") != std::string::npos);
      CHECK(msg.find("55") != std::string::npos);
    }
  }
}

TEST_CASE("rasterize") {
  StimulusSpec spec = spec_for(Category::ConstSize);
  SUBCASE("empty layout is black") {
    CircleLayout empty;
    empty.category = Category::ConstSize;
    const Image img = rasterize(empty, spec);
    CHECK(img.width == 224);
    CHECK(img.white_count() == 0);
  }
  SUBCASE("filled r=20 disc matches pi r^2 and the exhaustive scan") {
    CircleLayout l{{{100.3, 117.8, 20.0}}, Category::ConstSize, 1};
    const Image img = rasterize(l, spec);
    const double expected = std::numbers::pi * 400;
    CHECK(std::abs(img.white_count() - expected) / expected <= 0.03);
    CHECK(img.white_count() == scan_disc(224, 100.3, 117.8, 20.0));
  }
  SUBCASE("contour ring approximates 2 pi r w") {
    spec.category = Category::ConstAreaContour;
    for (double r : {20.0, 35.0, 55.0}) {
      CircleLayout l{{{112.0, 111.4, r}}, Category::ConstAreaContour, 1};
      const Image img = rasterize(l, spec);
      const double expected = 2 * std::numbers::pi * r * spec.stroke_width;
      CHECK(std::abs(img.white_count() - expected) / expected <= 0.10);
    }
  }
  SUBCASE("every pixel is binary") {
    const auto item = generate_item(spec_for(Category::VarySize), 3, 0);
    CHECK(std::all_of(item.image.pixels.begin(), item.image.pixels.end(),
                      [](std::uint8_t p) { return p == 0 || p == 1; }));
  }
}

TEST_CASE("contour categories share geometry with their filled twins") {
  for (auto [filled, contour] : {std::pair{Category::ConstArea, Category::ConstAreaContour},
                                 std::pair{Category::ConstCirc, Category::ConstCircContour}}) {
    for (int n = 1; n <= 7; ++n) {
      const auto a = generate_item(spec_for(filled), n, 2);
      const auto b = generate_item(spec_for(contour), n, 2);
      REQUIRE(a.layout.circles.size() == b.layout.circles.size());
      for (std::size_t i = 0; i < a.layout.circles.size(); ++i) {
        CHECK(a.layout.circles[i].cx == b.layout.circles[i].cx);
        CHECK(a.layout.circles[i].r == b.layout.circles[i].r);
      }
      CHECK(a.image.white_count() > b.image.white_count());
    }
  }
}

TEST_CASE("generate_dataset cardinality and labels") {
  const auto spec = spec_for(Category::ConstSize, 64);
  SUBCASE("anchors x 100 gives 400 labelled images") {
    const auto ds = generate_dataset(spec, kAnchors, 100);
    CHECK(ds.size() == 400);
    CHECK(ds.only_anchors());
    for (const auto& it : ds.items) CHECK(it.label == anchor_label(it.n));
    CHECK(ds.count_for(1) == 100);
  }
  SUBCASE("1..7 x 100 gives 700 images, interpolated ones unlabelled") {
    const int all[] = {1, 2, 3, 4, 5, 6, 7};
    const auto ds = generate_dataset(spec, all, 100);
    CHECK(ds.size() == 700);
    for (const auto& it : ds.items)
      if (it.n >= 3 && it.n <= 5) CHECK(it.label == Label::Unlabeled);
  }
  SUBCASE("count 0 is an empty dataset") { CHECK(generate_dataset(spec, kAnchors, 0).size() == 0); }
  SUBCASE("output does not depend on the number of jobs") {
    const int all[] = {1, 4, 7};
    const auto a = generate_dataset(spec_for(Category::VarySize, 64), all, 12, 1);
    const auto b = generate_dataset(spec_for(Category::VarySize, 64), all, 12, 4);
    CHECK(serialize(a) == serialize(b));
  }
  SUBCASE("different seeds give different images") {
    auto other = spec;
    other.seed = spec.seed + 1;
    CHECK(serialize(generate_dataset(spec, kAnchors, 3)) != serialize(generate_dataset(other, kAnchors, 3)));
  }
}

TEST_CASE("measure_features confound invariants") {
  const int all[] = {1, 2, 3, 4, 5, 6, 7};
  SUBCASE("ConstArea: identical analytic area, pixel area within 5% CV") {
    const auto ds = generate_dataset(spec_for(Category::ConstArea), all, 5);
    std::vector<double> areas, pixels;
    for (const auto& it : ds.items) {
      const auto f = measure_features(it.layout, it.image);
      areas.push_back(f.analytic_area);
      pixels.push_back(static_cast<double>(f.white_pixel_count));
    }
    const auto [mn, mx] = std::minmax_element(areas.begin(), areas.end());
    CHECK(*mx / *mn == doctest::Approx(1.0).epsilon(1e-14));
    const double mean = std::accumulate(pixels.begin(), pixels.end(), 0.0) / pixels.size();
    double var = 0;
    for (double p : pixels) var += (p - mean) * (p - mean);
    CHECK(std::sqrt(var / pixels.size()) / mean <= 0.05);
  }
  SUBCASE("ConstCirc: identical analytic perimeter") {
    const auto ds = generate_dataset(spec_for(Category::ConstCirc), all, 3);
    const double first = measure_features(ds.items[0].layout, ds.items[0].image).analytic_perimeter;
    for (const auto& it : ds.items)
      CHECK(measure_features(it.layout, it.image).analytic_perimeter == doctest::Approx(first).epsilon(1e-14));
  }
  SUBCASE("ConstSize: area grows linearly with n") {
    const double a1 = measure_features(generate_item(spec_for(Category::ConstSize), 1, 0).layout, {}).analytic_area;
    for (int n = 1; n <= 7; ++n) {
      const auto it = generate_item(spec_for(Category::ConstSize), n, 0);
      CHECK(measure_features(it.layout, it.image).analytic_area / a1 == doctest::Approx(n).epsilon(1e-14));
    }
  }
  SUBCASE("filled r=20 pixel count within 3% of 1257") {
    const auto it = generate_item(spec_for(Category::ConstSize), 1, 4);
    const auto f = measure_features(it.layout, it.image);
    CHECK(std::abs(static_cast<double>(f.white_pixel_count) - 1256.637) / 1256.637 <= 0.03);
  }
}

TEST_CASE("generated layouts never overlap or leave the frame") {
  const int all[] = {1, 2, 3, 4, 5, 6, 7};
  for (Category c : kAllCategories) {
    const auto spec = spec_for(c, 224, 99);
    const auto ds = generate_dataset(spec, all, 10);
    for (const auto& it : ds.items) {
      const auto violation = check_layout(it.layout, spec);
      CHECK_MESSAGE(!violation, to_string(c), " n=", it.n, ": ", violation.value_or(""));
    }
  }
}

TEST_CASE("spec validation") {
  auto s = spec_for(Category::ConstSize);
  s.const_radius = 0;
  CHECK_THROWS_AS(s.validate(), InvalidConfig);
  s = spec_for(Category::ConstCirc);
  s.const_radius = 40;  // n=1 would need r=160
  CHECK_THROWS_AS(s.validate(), InvalidConfig);
  s = spec_for(Category::VarySize);
  s.vary_radii = {};
  CHECK_THROWS_AS(s.validate(), InvalidConfig);
  CHECK_THROWS_AS(category_from_string("triangles"), InvalidConfig);
  for (Category c : kAllCategories) CHECK(category_from_string(to_string(c)) == c);
}

TEST_CASE("export writes PNGs, manifest and feature audit") {
  const auto dir = std::filesystem::temp_directory_path() / "nbisect_test_export";
  std::filesystem::remove_all(dir);
  const int ns[] = {1, 6};
  const auto ds = generate_dataset(spec_for(Category::ConstAreaContour, 64), ns, 2);
  const auto manifest_path = export_dataset(ds, dir);
  const auto manifest = nlohmann::json::parse(io::read_file(manifest_path));
  REQUIRE(manifest.at("items").size() == 4);
  const auto& first = manifest["items"][0];
  CHECK(first["category"] == "const_area_contour");
  CHECK(first["label"] == "few");
  CHECK(first.contains("analytic_area"));
  const Image back = read_png(dir / first["path"].get<std::string>());
  CHECK(back.pixels == ds.items[0].image.pixels);
  const auto rows = io::parse_csv(io::read_file(dir / "features.csv"));
  REQUIRE(rows.size() == 5);
  CHECK(rows[0] == std::vector<std::string>{"category", "n", "index", "analytic_area", "analytic_perimeter",
                                            "white_pixel_count"});
  CHECK(to_rgb8(ds.items[0].image).size() == 3 * 64 * 64);
  std::filesystem::remove_all(dir);
}
