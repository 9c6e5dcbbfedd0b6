#include "emmil/patchio.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "emmil/common.hpp"
#include "json.hpp"

namespace emmil::patchio {

std::string_view to_string(ScaleId scale) {
  return scale == ScaleId::fine ? "fine" : "coarse";
}

ScaleId scale_from_string(std::string_view name) {
  if (name == "fine") return ScaleId::fine;
  if (name == "coarse") return ScaleId::coarse;
  throw std::invalid_argument("unknown scale: " + std::string(name));
}

void validate(const ScaleSpec& scale) {
  if (scale.downsample_factor < 1) throw std::invalid_argument("downsample factor must be >= 1");
  if (scale.id == ScaleId::fine && scale.downsample_factor != 1) {
    throw std::invalid_argument("fine scale must use downsample factor 1");
  }
  if (scale.id == ScaleId::coarse && scale.downsample_factor <= 1) {
    throw std::invalid_argument("coarse scale needs downsample factor > 1");
  }
  if (scale.patch_size < 1 || scale.stride < 1) throw std::invalid_argument("patch size and stride must be positive");
  if (scale.stride > scale.patch_size) throw std::invalid_argument("stride must not exceed patch size");
}

std::size_t PatchGrid::valid_count() const {
  return static_cast<std::size_t>(
      std::count_if(patches.begin(), patches.end(), [](const Patch& p) { return p.valid; }));
}

RgbImage downsample(const RgbImage& image, int factor) {
  if (factor < 1) throw std::invalid_argument("downsample factor must be >= 1");
  if (image.width % factor != 0 || image.height % factor != 0) {
    throw std::invalid_argument("image dimensions not divisible by downsample factor");
  }
  if (factor == 1) return image;
  const int w = image.width / factor;
  const int h = image.height / factor;
  const int n = factor * factor;
  RgbImage out(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        int sum = 0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) sum += image.at(x * factor + dx, y * factor + dy, c);
        out.at(x, y, c) = static_cast<std::uint8_t>((2 * sum + n) / (2 * n));
      }
    }
  }
  return out;
}

double foreground_fraction(const RgbImage& pixels, double bg_luma_threshold) {
  const std::size_t n = static_cast<std::size_t>(pixels.width) * pixels.height;
  if (n == 0) return 0.0;
  std::size_t fg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double luma = (0.299 * pixels.data[3 * i] + 0.587 * pixels.data[3 * i + 1] +
                         0.114 * pixels.data[3 * i + 2]) / 255.0;
    if (luma < bg_luma_threshold) ++fg;
  }
  return static_cast<double>(fg) / static_cast<double>(n);
}

PatchGrid extract_grid(const std::string& image_id, const RgbImage& image, const ScaleSpec& scale,
                       double min_foreground, double bg_luma_threshold) {
  validate(scale);
  const RgbImage source = downsample(image, scale.downsample_factor);
  if (scale.patch_size > source.width || scale.patch_size > source.height) {
    throw std::invalid_argument("patch larger than (downsampled) image");
  }
  PatchGrid grid;
  grid.image_id = image_id;
  grid.scale = scale.id;
  grid.geometry = {scale.downsample_factor, scale.patch_size, scale.stride,
                   (source.height - scale.patch_size) / scale.stride + 1,
                   (source.width - scale.patch_size) / scale.stride + 1};
  grid.patches.reserve(grid.geometry.size());
  for (int r = 0; r < grid.geometry.rows; ++r) {
    for (int c = 0; c < grid.geometry.cols; ++c) {
      Patch p;
      p.image_id = image_id;
      p.scale = scale.id;
      p.row = r;
      p.col = c;
      p.pixels = source.crop(c * scale.stride, r * scale.stride, scale.patch_size, scale.patch_size);
      p.valid = foreground_fraction(p.pixels, bg_luma_threshold) >= min_foreground;
      grid.patches.push_back(std::move(p));
    }
  }
  return grid;
}

std::string grid_to_json(const PatchGrid& grid) {
  std::string bits;
  bits.reserve(grid.patches.size());
  for (const auto& p : grid.patches) bits.push_back(p.valid ? '1' : '0');
  nlohmann::ordered_json j;
  j["image_id"] = grid.image_id;
  j["scale"] = to_string(grid.scale);
  j["rows"] = grid.rows();
  j["cols"] = grid.cols();
  j["valid"] = bits;
  return j.dump();
}

// ---------------------------------------------------------------------------

namespace {

// Source coordinates of destination pixel (r, c) for one clockwise quarter
// turn: destination (c, S-1-r) receives source (r, c), so destination (r, c)
// reads source (S-1-c, r).
RgbImage rotate_cw(const RgbImage& src) {
  const int s = src.width;
  RgbImage out(s, s);
  for (int r = 0; r < s; ++r)
    for (int c = 0; c < s; ++c)
      for (int ch = 0; ch < 3; ++ch) out.at(c, r, ch) = src.at(r, s - 1 - c, ch);
  return out;
}

RgbImage mirror_horizontal(const RgbImage& src) {
  const int s = src.width;
  RgbImage out(s, src.height);
  for (int r = 0; r < src.height; ++r)
    for (int c = 0; c < s; ++c)
      for (int ch = 0; ch < 3; ++ch) out.at(c, r, ch) = src.at(s - 1 - c, r, ch);
  return out;
}

template <class Fn>
Patch with_pixels(const Patch& patch, Fn&& fn) {
  Patch out;
  out.image_id = patch.image_id;
  out.scale = patch.scale;
  out.row = patch.row;
  out.col = patch.col;
  out.valid = patch.valid;
  out.pixels = fn(patch.pixels);
  return out;
}

}  // namespace

RgbImage dihedral(const RgbImage& pixels, int k) {
  if (pixels.width != pixels.height) throw std::invalid_argument("dihedral transform needs a square patch");
  if (k < 0 || k > 7) throw std::invalid_argument("dihedral index must be in 0..7");
  RgbImage out = k >= 4 ? mirror_horizontal(pixels) : pixels;
  for (int i = 0; i < k % 4; ++i) out = rotate_cw(out);
  return out;
}

Patch dihedral(const Patch& patch, int k) {
  return with_pixels(patch, [k](const RgbImage& px) { return dihedral(px, k); });
}

int dihedral_inverse(int k) {
  if (k < 0 || k > 7) throw std::invalid_argument("dihedral index must be in 0..7");
  return k < 4 ? (4 - k) % 4 : k;
}

RgbImage random_subcrop(const RgbImage& pixels, int crop_size, std::uint64_t seed) {
  if (crop_size < 1 || crop_size > pixels.width || crop_size > pixels.height) {
    throw std::invalid_argument("crop larger than patch");
  }
  Rng rng(seed);
  const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(pixels.width - crop_size + 1)));
  const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(pixels.height - crop_size + 1)));
  return pixels.crop(x0, y0, crop_size, crop_size);
}

Patch random_subcrop(const Patch& patch, int crop_size, std::uint64_t seed) {
  return with_pixels(patch, [&](const RgbImage& px) { return random_subcrop(px, crop_size, seed); });
}

RgbImage center_crop(const RgbImage& pixels, int crop_size) {
  if (crop_size < 1 || crop_size > pixels.width || crop_size > pixels.height) {
    throw std::invalid_argument("crop larger than patch");
  }
  return pixels.crop((pixels.width - crop_size) / 2, (pixels.height - crop_size) / 2, crop_size, crop_size);
}

// ---------------------------------------------------------------------------

namespace {

const std::array<double, 256>& od_table() {
  static const std::array<double, 256> table = [] {
    std::array<double, 256> t{};
    for (int i = 0; i < 256; ++i) t[i] = -std::log(std::max(i, 1) / 255.0);
    return t;
  }();
  return table;
}

std::uint8_t quantize_intensity(double od) {
  const double v = std::floor(255.0 * std::exp(-od) + 0.5);
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

using Mat3 = std::array<Od, 3>;

Mat3 inverse(const Mat3& m) {
  const double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                     m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                     m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  if (std::abs(det) < 1e-12) throw std::invalid_argument("singular stain basis");
  Mat3 inv{};
  inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
  inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
  inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
  inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
  inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
  inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
  inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
  inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
  inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
  return inv;
}

Mat3 multiply(const Mat3& a, const Mat3& b) {
  Mat3 out{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) out[i][j] += a[i][k] * b[k][j];
  return out;
}

Od row_times(const Od& v, const Mat3& m) {
  Od out{};
  for (int j = 0; j < 3; ++j) out[j] = v[0] * m[0][j] + v[1] * m[1][j] + v[2] * m[2][j];
  return out;
}

}  // namespace

Od rgb_to_od(const Rgb& rgb) {
  const auto& t = od_table();
  return {t[rgb[0]], t[rgb[1]], t[rgb[2]]};
}

Rgb od_to_rgb(const Od& od) {
  return {quantize_intensity(od[0]), quantize_intensity(od[1]), quantize_intensity(od[2])};
}

StainBasis StainBasis::hematoxylin_eosin() {
  StainBasis basis;
  basis.rows = {Od{0.650, 0.704, 0.286}, Od{0.072, 0.990, 0.105}, Od{0.268, 0.570, 0.776}};
  for (auto& row : basis.rows) {
    const double norm = std::sqrt(row[0] * row[0] + row[1] * row[1] + row[2] * row[2]);
    for (double& v : row) v /= norm;
  }
  return basis;
}

double condition_number(const StainBasis& basis) {
  Eigen::Matrix3d m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m(i, j) = basis.rows[i][j];
  const Eigen::JacobiSVD<Eigen::Matrix3d> svd(m);
  const auto& s = svd.singularValues();
  if (s(2) <= 0.0) return std::numeric_limits<double>::infinity();
  return s(0) / s(2);
}

void validate(const StainBasis& basis) {
  for (const auto& row : basis.rows) {
    const double norm = std::sqrt(row[0] * row[0] + row[1] * row[1] + row[2] * row[2]);
    if (std::abs(norm - 1.0) > 1e-9) throw std::invalid_argument("stain vector is not unit norm");
  }
  const double cond = condition_number(basis);
  if (!(cond < 100.0)) throw std::invalid_argument("singular or ill-conditioned stain basis");
}

Od stain_concentrations(const StainBasis& basis, const Od& od) {
  return row_times(od, inverse(basis.rows));
}

RgbImage stain_perturb(const RgbImage& pixels, const StainBasis& basis, double alpha_h, double alpha_e) {
  if (!(alpha_h > 0.0 && alpha_e > 0.0 && std::isfinite(alpha_h) && std::isfinite(alpha_e))) {
    throw std::invalid_argument("stain factors must be positive and finite");
  }
  validate(basis);
  // od' = od * Minv * diag(alpha_h, alpha_e, 1) * M, folded into one matrix.
  Mat3 scaled = inverse(basis.rows);
  for (int i = 0; i < 3; ++i) {
    scaled[i][0] *= alpha_h;
    scaled[i][1] *= alpha_e;
  }
  const Mat3 transfer = multiply(scaled, basis.rows);

  RgbImage out(pixels.width, pixels.height);
  const std::size_t n = static_cast<std::size_t>(pixels.width) * pixels.height;
  for (std::size_t i = 0; i < n; ++i) {
    const Rgb in{pixels.data[3 * i], pixels.data[3 * i + 1], pixels.data[3 * i + 2]};
    const Rgb res = od_to_rgb(row_times(rgb_to_od(in), transfer));
    out.data[3 * i] = res[0];
    out.data[3 * i + 1] = res[1];
    out.data[3 * i + 2] = res[2];
  }
  return out;
}

Patch stain_perturb(const Patch& patch, const StainBasis& basis, double alpha_h, double alpha_e) {
  return with_pixels(patch, [&](const RgbImage& px) { return stain_perturb(px, basis, alpha_h, alpha_e); });
}

AugmentParams sample_augment(const AugmentConfig& config, int patch_size, std::uint64_t seed) {
  if (config.crop_size < 1 || config.crop_size > patch_size) throw std::invalid_argument("crop larger than patch");
  if (config.stain_sigma < 0.0) throw std::invalid_argument("stain sigma must be non-negative");
  Rng rng(seed);
  AugmentParams p;
  const auto span = static_cast<std::uint64_t>(patch_size - config.crop_size + 1);
  p.x0 = static_cast<int>(rng.below(span));
  p.y0 = static_cast<int>(rng.below(span));
  const int drawn = static_cast<int>(rng.below(8));
  p.k = config.fixed_dihedral.value_or(drawn);
  p.alpha_h = std::clamp(rng.normal(1.0, config.stain_sigma), 0.5, 1.5);
  p.alpha_e = std::clamp(rng.normal(1.0, config.stain_sigma), 0.5, 1.5);
  return p;
}

RgbImage augment(const RgbImage& pixels, const AugmentConfig& config, std::uint64_t seed,
                 const StainBasis& basis) {
  if (pixels.width != pixels.height) throw std::invalid_argument("augment needs a square patch");
  const AugmentParams p = sample_augment(config, pixels.width, seed);
  RgbImage out = pixels.crop(p.x0, p.y0, config.crop_size, config.crop_size);
  out = dihedral(out, p.k);
  if (p.alpha_h == 1.0 && p.alpha_e == 1.0) return out;
  return stain_perturb(out, basis, p.alpha_h, p.alpha_e);
}

Patch augment(const Patch& patch, const AugmentConfig& config, std::uint64_t seed, const StainBasis& basis) {
  return with_pixels(patch, [&](const RgbImage& px) { return augment(px, config, seed, basis); });
}

}  // namespace emmil::patchio
