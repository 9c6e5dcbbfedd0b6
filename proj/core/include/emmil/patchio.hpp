#ifndef EMMIL_PATCHIO_HPP
#define EMMIL_PATCHIO_HPP

// Patch extraction and the per-patch augmentations: random sub-crop, the
// eight dihedral transforms, and H&E stain perturbation in optical-density
// space.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "emmil/image.hpp"

namespace emmil::patchio {

enum class ScaleId { fine, coarse };

std::string_view to_string(ScaleId scale);
ScaleId scale_from_string(std::string_view name);

struct ScaleSpec {
  ScaleId id = ScaleId::fine;
  int downsample_factor = 1;
  int patch_size = 32;
  int stride = 32;
};

void validate(const ScaleSpec& scale);

/// Placement of a grid on its source image. Patch (r, c) covers
/// [c*stride, c*stride + patch_size) horizontally in downsampled pixels, i.e.
/// `downsample` times that in original pixels.
struct GridGeometry {
  int downsample = 1;
  int patch_size = 0;
  int stride = 0;
  int rows = 0;
  int cols = 0;

  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
  bool operator==(const GridGeometry&) const = default;
};

struct Patch {
  std::string image_id;
  ScaleId scale = ScaleId::fine;
  int row = 0;
  int col = 0;
  RgbImage pixels;
  bool valid = false;
};

struct PatchGrid {
  std::string image_id;
  ScaleId scale = ScaleId::fine;
  GridGeometry geometry;
  std::vector<Patch> patches;  // row-major

  int rows() const { return geometry.rows; }
  int cols() const { return geometry.cols; }
  const Patch& at(int r, int c) const { return patches[static_cast<std::size_t>(r) * geometry.cols + c]; }
  std::size_t valid_count() const;
};

/// Box-filter mean over factor x factor blocks, rounded half-up.
RgbImage downsample(const RgbImage& image, int factor);

/// Fraction of pixels whose relative luminance is below the threshold.
double foreground_fraction(const RgbImage& pixels, double bg_luma_threshold);

/// Tiles the (downsampled) image and flags each patch valid when its
/// foreground fraction reaches min_foreground.
PatchGrid extract_grid(const std::string& image_id, const RgbImage& image, const ScaleSpec& scale,
                       double min_foreground, double bg_luma_threshold = 0.85);

/// Dump for debugging: {"image_id", "scale", "rows", "cols", "valid": "0110..."}.
std::string grid_to_json(const PatchGrid& grid);

// --- geometric augmentation ------------------------------------------------

/// k in [0,4): rotate clockwise k quarter turns, (r,c) -> (c, S-1-r) per turn.
/// k in [4,8): horizontal mirror, then rotate (k-4) quarter turns.
RgbImage dihedral(const RgbImage& pixels, int k);
Patch dihedral(const Patch& patch, int k);

/// Element of the dihedral group undoing k.
int dihedral_inverse(int k);

RgbImage random_subcrop(const RgbImage& pixels, int crop_size, std::uint64_t seed);
Patch random_subcrop(const Patch& patch, int crop_size, std::uint64_t seed);

RgbImage center_crop(const RgbImage& pixels, int crop_size);

// --- stain space -------------------------------------------------------------

using Rgb = std::array<std::uint8_t, 3>;
using Od = std::array<double, 3>;

/// od_c = -ln(max(I_c, 1) / 255).
Od rgb_to_od(const Rgb& rgb);
/// I_c = round(255 exp(-od_c)) clamped to [0, 255].
Rgb od_to_rgb(const Od& od);

/// Rows are unit optical-density vectors for hematoxylin, eosin and a residual
/// channel. An OD triple is the row-vector product of concentrations and the
/// basis: od = c * M.
struct StainBasis {
  std::array<Od, 3> rows{};

  /// Standard H&E (+ residual) vectors from the color deconvolution
  /// literature, normalized to unit length.
  static StainBasis hematoxylin_eosin();
};

/// Throws std::invalid_argument if a row is not unit norm or the matrix is
/// singular / ill-conditioned (2-norm condition number >= 100).
void validate(const StainBasis& basis);

double condition_number(const StainBasis& basis);

/// Concentrations c with od = c * M.
Od stain_concentrations(const StainBasis& basis, const Od& od);

/// Scales the H and E concentrations of every pixel; the residual channel is
/// kept. Alphas must be positive; sampled alphas are clamped to [0.5, 1.5].
RgbImage stain_perturb(const RgbImage& pixels, const StainBasis& basis, double alpha_h, double alpha_e);
Patch stain_perturb(const Patch& patch, const StainBasis& basis, double alpha_h, double alpha_e);

// --- composed augmentation -------------------------------------------------

struct AugmentConfig {
  int crop_size = 28;
  double stain_sigma = 0.05;
  std::optional<int> fixed_dihedral;  // testing hook; nullopt = uniform over 0..7
};

struct AugmentParams {
  int x0 = 0;
  int y0 = 0;
  int k = 0;
  double alpha_h = 1.0;
  double alpha_e = 1.0;
};

/// Draws the per-patch augmentation parameters; alphas ~ N(1, sigma^2)
/// clamped to [0.5, 1.5].
AugmentParams sample_augment(const AugmentConfig& config, int patch_size, std::uint64_t seed);

/// Sub-crop, then dihedral transform, then stain perturbation.
RgbImage augment(const RgbImage& pixels, const AugmentConfig& config, std::uint64_t seed,
                 const StainBasis& basis = StainBasis::hematoxylin_eosin());
Patch augment(const Patch& patch, const AugmentConfig& config, std::uint64_t seed,
              const StainBasis& basis = StainBasis::hematoxylin_eosin());

}  // namespace emmil::patchio

#endif  // EMMIL_PATCHIO_HPP
