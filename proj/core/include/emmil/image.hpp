#ifndef EMMIL_IMAGE_HPP
#define EMMIL_IMAGE_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace emmil {

/// Row-major interleaved RGB, 8 bits per channel.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  RgbImage() = default;
  RgbImage(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, 0) {}

  std::uint8_t& at(int x, int y, int c) {
    return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  std::uint8_t at(int x, int y, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }

  /// Copies the w x h region whose top-left corner is (x0, y0).
  RgbImage crop(int x0, int y0, int w, int h) const;

  bool operator==(const RgbImage&) const = default;
};

/// Binary PPM (P6, maxval 255).
void write_ppm(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_ppm(const std::filesystem::path& path);

/// ASCII PGM (P2, maxval 255); values are written as given.
void write_pgm(const std::filesystem::path& path, int width, int height,
               const std::vector<int>& values);

}  // namespace emmil

#endif  // EMMIL_IMAGE_HPP
