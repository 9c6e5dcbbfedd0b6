#include "emmil/image.hpp"

#include <cctype>
#include <fstream>
#include <stdexcept>

#include "emmil/common.hpp"

namespace emmil {

RgbImage RgbImage::crop(int x0, int y0, int w, int h) const {
  if (x0 < 0 || y0 < 0 || w < 0 || h < 0 || x0 + w > width || y0 + h > height) {
    throw std::invalid_argument("crop region outside image");
  }
  RgbImage out(w, h);
  for (int y = 0; y < h; ++y) {
    const auto* src = &data[(static_cast<std::size_t>(y0 + y) * width + x0) * 3];
    std::copy(src, src + static_cast<std::size_t>(w) * 3,
              &out.data[static_cast<std::size_t>(y) * w * 3]);
  }
  return out;
}

void write_ppm(const std::filesystem::path& path, const RgbImage& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.data.data()),
            static_cast<std::streamsize>(image.data.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& in) {
  std::string tok;
  char ch = 0;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string discard;
      std::getline(in, discard);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

}  // namespace

RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  if (next_token(in) != "P6") throw DataError(path.string() + ": not a P6 PPM");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(next_token(in));
    h = std::stoi(next_token(in));
    maxval = std::stoi(next_token(in));
  } catch (const std::exception&) {
    throw DataError(path.string() + ": malformed PPM header");
  }
  if (w <= 0 || h <= 0 || maxval != 255) {
    throw DataError(path.string() + ": unsupported PPM dimensions or maxval");
  }
  RgbImage image(w, h);
  in.read(reinterpret_cast<char*>(image.data.data()),
          static_cast<std::streamsize>(image.data.size()));
  if (in.gcount() != static_cast<std::streamsize>(image.data.size())) {
    throw DataError(path.string() + ": truncated pixel data");
  }
  return image;
}

void write_pgm(const std::filesystem::path& path, int width, int height,
               const std::vector<int>& values) {
  if (values.size() != static_cast<std::size_t>(width) * height) {
    throw std::invalid_argument("PGM value count does not match dimensions");
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P2\n" << width << ' ' << height << "\n255\n";
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      if (x) out << ' ';
      out << values[static_cast<std::size_t>(y) * width + x];
    }
    out << '\n';
  }
}

}  // namespace emmil
