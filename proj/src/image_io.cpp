#include "duco/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "duco/errors.hpp"

namespace duco::data {

namespace {

std::uint8_t to_byte(double v) {
  const double b = std::round((std::clamp(v, -1.0, 1.0) + 1.0) * 127.5);
  return static_cast<std::uint8_t>(b);
}

double from_byte(std::uint8_t b) { return static_cast<double>(b) / 127.5 - 1.0; }

void write_rgb(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<std::uint8_t>& rgb) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(width);
  img.height = static_cast<png_uint_32>(height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, rgb.data(), 0, nullptr))
    throw std::runtime_error("cannot write " + path.string() + ": " + img.message);
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image& image) {
  std::vector<std::uint8_t> rgb(3 * image.height * image.width);
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) rgb[(y * image.width + x) * 3 + c] = to_byte(image.at(c, y, x));
  write_rgb(path, image.height, image.width, rgb);
}

Image read_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw DataIntegrityError("cannot read image " + path.string() + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> rgb(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, rgb.data(), 0, nullptr)) {
    png_image_free(&img);
    throw DataIntegrityError("cannot decode image " + path.string() + ": " + img.message);
  }
  Image out = Image::blank(img.height, img.width);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.at(c, y, x) = from_byte(rgb[(y * out.width + x) * 3 + c]);
  return out;
}

Image resize(const Image& image, std::size_t height, std::size_t width) {
  if (image.height == height && image.width == width) return image;
  Image out = Image::blank(height, width);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x)
        out.at(c, y, x) = image.at(c, y * image.height / height, x * image.width / width);
  return out;
}

void write_grid_png(const std::filesystem::path& path, const std::vector<std::vector<Image>>& rows) {
  constexpr std::size_t gap = 2;
  if (rows.empty() || rows.front().empty()) throw std::invalid_argument("empty image grid");
  const std::size_t h = rows.front().front().height, w = rows.front().front().width;
  std::size_t cols = 0;
  for (const auto& r : rows) cols = std::max(cols, r.size());
  const std::size_t H = rows.size() * (h + gap) - gap, W = cols * (w + gap) - gap;
  std::vector<std::uint8_t> rgb(3 * H * W, 255);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t k = 0; k < rows[r].size(); ++k) {
      const Image& im = rows[r][k];
      if (im.height != h || im.width != w) throw std::invalid_argument("grid images differ in size");
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          for (std::size_t c = 0; c < 3; ++c)
            rgb[((r * (h + gap) + y) * W + k * (w + gap) + x) * 3 + c] = to_byte(im.at(c, y, x));
    }
  write_rgb(path, H, W, rgb);
}

}  // namespace duco::data
