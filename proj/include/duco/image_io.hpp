#pragma once

// Lossless 8-bit PNG I/O. Pixel values map to bytes by round((v + 1) * 127.5).

#include <filesystem>
#include <vector>

#include "duco/data.hpp"

namespace duco::data {

void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);
// Nearest-neighbour resample.
Image resize(const Image& image, std::size_t height, std::size_t width);
// Tiles rows of equally sized images with a 2px gap (one row per story).
void write_grid_png(const std::filesystem::path& path, const std::vector<std::vector<Image>>& rows);

}  // namespace duco::data
