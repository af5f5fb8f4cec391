#include <png.h>

#include <cstdio>
#include <memory>
#include <nlohmann/json.hpp>

#include "nbisect/error.hpp"
#include "nbisect/io.hpp"
#include "nbisect/stimgen.hpp"

namespace nbisect::stimgen {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::string item_filename(const DatasetItem& it) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%s_n%d_%04d.png", std::string(to_string(it.category)).c_str(), it.n,
                it.index);
  return buf;
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image& image) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw Error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("libpng init failed");
  }
  std::vector<std::uint8_t> row(static_cast<std::size_t>(image.width));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng write failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, image.width, image.height, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) row[x] = image.at(x, y) ? 255 : 0;
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw Error("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw Error("libpng init failed");
  }
  Image img;
  std::vector<std::uint8_t> row;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("libpng read failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY || png_get_bit_depth(png, info) != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("expected 8-bit grayscale PNG: " + path.string());
  }
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  row.resize(static_cast<std::size_t>(img.width));
  for (int y = 0; y < img.height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < img.width; ++x)
      img.pixels[static_cast<std::size_t>(y) * img.width + x] = row[x] >= 128 ? 1 : 0;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

std::vector<std::uint8_t> to_rgb8(const Image& image) {
  std::vector<std::uint8_t> rgb;
  rgb.reserve(image.pixels.size() * 3);
  for (std::uint8_t p : image.pixels) {
    const std::uint8_t v = p ? 255 : 0;
    rgb.insert(rgb.end(), {v, v, v});
  }
  return rgb;
}

void write_feature_audit(const Dataset& dataset, const std::filesystem::path& csv_path) {
  io::CsvWriter csv({"category", "n", "index", "analytic_area", "analytic_perimeter", "white_pixel_count"});
  for (const DatasetItem& it : dataset.items) {
    const Features f = measure_features(it.layout, it.image);
    csv.row({std::string(to_string(it.category)), std::to_string(it.n), std::to_string(it.index),
             io::format_double(f.analytic_area), io::format_double(f.analytic_perimeter),
             std::to_string(f.white_pixel_count)});
  }
  csv.save(csv_path);
}

std::filesystem::path export_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json items = nlohmann::ordered_json::array();
  for (const DatasetItem& it : dataset.items) {
    const std::string name = item_filename(it);
    write_png(dir / name, it.image);
    const Features f = measure_features(it.layout, it.image);
    items.push_back({{"path", name},
                     {"category", to_string(it.category)},
                     {"numerosity", it.n},
                     {"index", it.index},
                     {"label", to_string(it.label)},
                     {"seed", it.seed},
                     {"analytic_area", f.analytic_area},
                     {"analytic_perimeter", f.analytic_perimeter},
                     {"white_pixel_count", f.white_pixel_count}});
  }
  nlohmann::ordered_json manifest{{"count", dataset.size()}, {"items", std::move(items)}};
  const auto path = dir / "manifest.json";
  io::write_file(path, manifest.dump(2) + "\n");
  write_feature_audit(dataset, dir / "features.csv");
  return path;
}

std::string serialize(const Dataset& dataset) {
  std::string out;
  for (const DatasetItem& it : dataset.items) {
    out += std::string(to_string(it.category)) + ' ' + std::to_string(it.n) + ' ' +
           std::to_string(it.index) + ' ' + std::string(to_string(it.label)) + ' ' +
           std::to_string(it.seed) + ' ' + std::to_string(it.image.width) + 'x' +
           std::to_string(it.image.height) + '\n';
    for (const Circle& c : it.layout.circles)
      out += io::format_double(c.cx) + ' ' + io::format_double(c.cy) + ' ' + io::format_double(c.r) + '\n';
    out.append(reinterpret_cast<const char*>(it.image.pixels.data()), it.image.pixels.size());
    out.push_back('\n');
  }
  return out;
}

}  // namespace nbisect::stimgen
