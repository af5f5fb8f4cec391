#pragma once

// Procedural circle-array stimuli for the few/many bisection task.
//
// Six categories decorrelate numerosity from different perceptual features:
// element size (ConstSize), total white area (ConstArea) and total perimeter
// (ConstCirc). The *Contour variants share geometry with their filled
// counterparts and differ only in how the raster is painted.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nbisect/rng.hpp"

namespace nbisect::stimgen {

enum class Category {
  VarySize,
  ConstSize,
  ConstArea,
  ConstAreaContour,
  ConstCirc,
  ConstCircContour,
};

inline constexpr Category kAllCategories[] = {
    Category::VarySize,  Category::ConstSize,        Category::ConstArea,
    Category::ConstAreaContour, Category::ConstCirc, Category::ConstCircContour,
};

std::string_view to_string(Category c);
// Throws InvalidConfig for unknown names.
Category category_from_string(std::string_view name);

bool is_contour(Category c);

enum class Label { Few, Many, Unlabeled };

std::string_view to_string(Label l);

// few for {1,2}, many for {6,7}, Unlabeled otherwise.
Label anchor_label(int n);

inline constexpr int kMinNumerosity = 1;
inline constexpr int kMaxNumerosity = 7;
inline constexpr int kAnchors[] = {1, 2, 6, 7};
inline constexpr double kReferenceResolution = 224.0;

// Lengths are expressed at the 224 px reference resolution and scaled by
// resolution / 224 when applied, so geometry is resolution-invariant.
struct StimulusSpec {
  Category category = Category::ConstSize;
  int resolution = 224;
  std::vector<double> vary_radii{10.0, 35.0, 55.0};
  double const_radius = 20.0;
  double reference_count = 4.0;
  double stroke_width = 2.0;
  double min_gap = 2.0;
  double margin = 2.0;
  std::uint64_t seed = 0;
  int max_attempts = 10'000;
  // VarySize only: number of fresh radius draws tried before giving up.
  int radius_redraws = 64;

  double scale() const { return resolution / kReferenceResolution; }
  // Contour stroke in output pixels; never thinner than one pixel so the
  // pixel-center test still yields a connected ring at low resolution.
  double effective_stroke() const;
  // Throws InvalidConfig when any length is non-positive or a circle of the
  // largest radius could not fit inside the frame.
  void validate() const;
  // Largest radius (reference px) any numerosity can request.
  double max_reference_radius() const;
};

struct Circle {
  double cx = 0;
  double cy = 0;
  double r = 0;
};

struct CircleLayout {
  std::vector<Circle> circles;
  Category category = Category::ConstSize;
  int n = 0;
};

// Single-channel binary raster, row-major, every pixel 0 or 1.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::size_t white_count() const;
};

struct Features {
  double analytic_area = 0;
  double analytic_perimeter = 0;
  std::size_t white_pixel_count = 0;
};

struct DatasetItem {
  Image image;
  CircleLayout layout;
  int n = 0;
  Label label = Label::Unlabeled;
  Category category = Category::ConstSize;
  int index = 0;
  std::uint64_t seed = 0;
};

struct Dataset {
  std::vector<DatasetItem> items;

  std::size_t size() const { return items.size(); }
  std::size_t count_for(int n) const;
  std::size_t count_for(Category c, int n) const;
  bool only_anchors() const;
};

// Radii in output pixels (reference radii times spec.scale()).
std::vector<double> radii_for(const StimulusSpec& spec, int n, Rng& rng);

// Rejection placement of non-overlapping circles, largest first. Throws
// PlacementInfeasible after spec.max_attempts rejected center draws.
CircleLayout place_circles(std::span<const double> radii, const StimulusSpec& spec, Rng& rng);

// Pixel-center test: filled paints centers inside a disc, contour paints
// centers within stroke/2 of a circle's boundary.
Image rasterize(const CircleLayout& layout, const StimulusSpec& spec);

Features measure_features(const CircleLayout& layout, const Image& image);

// Checks non-overlap (with min_gap) and frame containment (with margin).
// Returns a description of the first violation, or nullopt.
std::optional<std::string> check_layout(const CircleLayout& layout, const StimulusSpec& spec);

// Seed of image `index` of numerosity `n` under dataset seed `seed`.
std::uint64_t image_seed(std::uint64_t seed, int n, int index);

// One stimulus, fully determined by (spec, n, index).
DatasetItem generate_item(const StimulusSpec& spec, int n, int index);

// `count` images for each numerosity, ordered by numerosity then index.
// Output is identical for any `jobs`.
Dataset generate_dataset(const StimulusSpec& spec, std::span<const int> numerosities,
                         int count_per_numerosity, unsigned jobs = 1);

// Concatenation preserving order.
Dataset merge(std::span<const Dataset> parts);

// --- export ---------------------------------------------------------------

void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

// Replicates the single channel three times (interleaved RGB, 0/255).
std::vector<std::uint8_t> to_rgb8(const Image& image);

// Writes one PNG per item under `dir`, `manifest.json`, and `features.csv`.
// Returns the manifest path.
std::filesystem::path export_dataset(const Dataset& dataset, const std::filesystem::path& dir);

void write_feature_audit(const Dataset& dataset, const std::filesystem::path& csv_path);

// Canonical byte serialization (metadata + pixels), used for content hashing.
std::string serialize(const Dataset& dataset);

}  // namespace nbisect::stimgen
