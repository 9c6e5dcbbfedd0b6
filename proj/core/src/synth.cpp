#include "emmil/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <stdexcept>

#include "emmil/common.hpp"
#include "emmil/patchio.hpp"
#include "json.hpp"

namespace emmil::synth {

namespace {

using Color = std::array<double, 3>;

Color hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

constexpr double kSaturation = 0.45;
constexpr double kValue = 0.72;
constexpr double kStripeAmplitude = 0.15;
constexpr Color kBlobColor = {0.32, 0.16, 0.42};
constexpr double kBlobOpacity = 0.65;

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::floor(v * 255.0 + 0.5), 0.0, 255.0));
}

const TextureArchetype& find_archetype(const CorpusSpec& spec, int id) {
  for (const auto& a : spec.archetypes)
    if (a.id == id) return a;
  throw std::invalid_argument("unknown archetype id " + std::to_string(id));
}

struct Rect {
  int r0, c0, h, w;
};

// Most square factorization h*w == area fitting in the grid, or {0,0}.
std::pair<int, int> rect_shape(int area, int rows, int cols) {
  std::pair<int, int> best{0, 0};
  for (int h = 1; h <= rows; ++h) {
    if (area % h != 0) continue;
    const int w = area / h;
    if (w > cols) continue;
    if (best.first == 0 || std::abs(h - w) < std::abs(best.first - best.second)) best = {h, w};
  }
  return best;
}

// Splits `total` cells into `count` rectangle areas whose shapes fit the grid.
// Areas that cannot be realized as a rectangle shift one cell to the next
// region; the final total may differ from the request by at most one cell.
std::vector<int> split_areas(int total, int count, int rows, int cols) {
  std::vector<int> areas;
  int carry = 0;
  for (int b = 0; b < count; ++b) {
    int want = total / count + (b < total % count ? 1 : 0) + carry;
    carry = 0;
    int area = want;
    if (rect_shape(area, rows, cols).first == 0) {
      const int lower = want - 1;
      const int upper = want + 1;
      if (lower >= 1 && rect_shape(lower, rows, cols).first != 0) {
        area = lower;
      } else if (rect_shape(upper, rows, cols).first != 0) {
        area = upper;
      } else {
        throw std::invalid_argument("cannot shape discriminative region of area " + std::to_string(want));
      }
      carry = want - area;
    }
    areas.push_back(area);
  }
  return areas;
}

std::vector<Rect> place_regions(const std::vector<int>& areas, int rows, int cols, Rng& rng) {
  std::vector<int> order(areas.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return areas[a] > areas[b]; });

  for (int attempt = 0; attempt < 64; ++attempt) {
    std::vector<std::uint8_t> used(static_cast<std::size_t>(rows) * cols, 0);
    std::vector<Rect> rects(areas.size());
    bool ok = true;
    for (int idx : order) {
      auto [h, w] = rect_shape(areas[idx], rows, cols);
      if (h != w && w <= rows && h <= cols && rng.below(2) == 1) std::swap(h, w);
      bool placed = false;
      for (int tries = 0; tries < 200 && !placed; ++tries) {
        const int r0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(rows - h + 1)));
        const int c0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(cols - w + 1)));
        bool free = true;
        for (int r = r0; r < r0 + h && free; ++r)
          for (int c = c0; c < c0 + w && free; ++c) free = used[static_cast<std::size_t>(r) * cols + c] == 0;
        if (!free) continue;
        for (int r = r0; r < r0 + h; ++r)
          for (int c = c0; c < c0 + w; ++c) used[static_cast<std::size_t>(r) * cols + c] = 1;
        rects[idx] = {r0, c0, h, w};
        placed = true;
      }
      if (!placed) {
        ok = false;
        break;
      }
    }
    if (ok) return rects;
  }
  throw DataError("could not place discriminative regions without overlap");
}

}  // namespace

std::size_t OracleMask::count() const {
  return static_cast<std::size_t>(std::count(grid.begin(), grid.end(), std::uint8_t{1}));
}

void validate(const CorpusSpec& spec) {
  if (spec.classes.size() < 2) throw std::invalid_argument("corpus needs at least 2 classes");
  if (spec.patch_size < 8) throw std::invalid_argument("patch size must be >= 8");
  if (spec.image_size <= 0 || spec.image_size % spec.patch_size != 0) {
    throw std::invalid_argument("image size must be a positive multiple of the patch size");
  }
  if (spec.images_per_class < 1) throw std::invalid_argument("images_per_class must be >= 1");
  if (spec.images_per_group < 1) throw std::invalid_argument("images_per_group must be >= 1");
  if (spec.cluster_blob_count < 1) throw std::invalid_argument("cluster_blob_count must be >= 1");
  if (spec.stain_jitter < 0.0) throw std::invalid_argument("stain_jitter must be non-negative");
  if (!(spec.min_disc_strength >= 0.0 && spec.min_disc_strength <= 1.0)) {
    throw std::invalid_argument("min_disc_strength must be in [0, 1]");
  }

  std::set<int> ids;
  for (const auto& a : spec.archetypes) {
    if (!ids.insert(a.id).second) throw std::invalid_argument("duplicate archetype id");
    if (a.base_hue < 0.0 || a.base_hue >= 1.0) throw std::invalid_argument("base_hue must be in [0,1)");
    if (a.spatial_frequency < 0.0 || a.blob_density < 0.0 || a.noise_sigma < 0.0 || a.noise_sigma > 1.0) {
      throw std::invalid_argument("archetype parameters out of range");
    }
  }
  if (!ids.contains(spec.background_archetype)) throw std::invalid_argument("background archetype undefined");

  const int grid = spec.grid_side() * spec.grid_side();
  std::map<int, std::set<int>> pure_owners;  // archetype -> pure classes using it
  for (std::size_t k = 0; k < spec.classes.size(); ++k) {
    const auto& cls = spec.classes[k];
    if (cls.label != static_cast<int>(k)) throw std::invalid_argument("class labels must be 0..C-1 in order");
    if (!(cls.disc_fraction > 0.0 && cls.disc_fraction <= 1.0)) {
      throw std::invalid_argument("disc_fraction must be in (0, 1]");
    }
    if (cls.disc_fraction * grid < 1.0) throw std::invalid_argument("disc_fraction * grid size must be >= 1");
    if (cls.discriminative_archetypes.empty()) throw std::invalid_argument("class without discriminative archetypes");
    for (int a : cls.discriminative_archetypes) {
      if (!ids.contains(a)) throw std::invalid_argument("unknown archetype id " + std::to_string(a));
      if (a == spec.background_archetype) throw std::invalid_argument("background archetype cannot be discriminative");
      if (!cls.is_mixed) pure_owners[a].insert(cls.label);
    }
    if (cls.is_mixed) {
      const int n = static_cast<int>(cls.discriminative_archetypes.size());
      if (n < 2) throw std::invalid_argument("mixed class needs >= 2 archetypes");
      if (std::lround(cls.disc_fraction * grid) < n) {
        throw std::invalid_argument("mixed class has fewer discriminative patches than archetypes");
      }
      if (!(cls.dominant_share_min > 0.0 && cls.dominant_share_min <= cls.dominant_share_max &&
            cls.dominant_share_max < 1.0)) {
        throw std::invalid_argument("dominant share range must satisfy 0 < min <= max < 1");
      }
    }
  }
  for (const auto& cls : spec.classes) {
    if (!cls.is_mixed) continue;
    for (int a : cls.discriminative_archetypes) {
      if (!pure_owners.contains(a)) {
        throw std::invalid_argument("mixed class owns archetype " + std::to_string(a) + " exclusively");
      }
    }
  }
}

RgbImage texture_patch(const TextureArchetype& archetype, int patch_size, std::uint64_t seed) {
  if (patch_size < 8) throw std::invalid_argument("patch size must be >= 8");
  Rng rng(seed);
  const Color base = hsv_to_rgb(archetype.base_hue, kSaturation, kValue);
  const double theta = rng.uniform(0.0, std::numbers::pi);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double kx = 2.0 * std::numbers::pi * archetype.spatial_frequency * std::cos(theta) / patch_size;
  const double ky = 2.0 * std::numbers::pi * archetype.spatial_frequency * std::sin(theta) / patch_size;

  struct Blob {
    double x, y, radius;
  };
  std::vector<Blob> blobs(static_cast<std::size_t>(rng.poisson(archetype.blob_density)));
  for (auto& b : blobs) {
    b.x = rng.uniform(0.0, patch_size);
    b.y = rng.uniform(0.0, patch_size);
    b.radius = rng.uniform(0.08, 0.16) * patch_size;
  }

  RgbImage out(patch_size, patch_size);
  for (int y = 0; y < patch_size; ++y) {
    for (int x = 0; x < patch_size; ++x) {
      const double shade = 1.0 + kStripeAmplitude * std::sin(kx * x + ky * y + phase);
      Color px{base[0] * shade, base[1] * shade, base[2] * shade};
      for (const auto& b : blobs) {
        const double d = std::hypot(x + 0.5 - b.x, y + 0.5 - b.y);
        if (d < b.radius) {
          const double w = kBlobOpacity * (1.0 - 0.5 * d / b.radius);
          for (int c = 0; c < 3; ++c) px[c] = (1.0 - w) * px[c] + w * kBlobColor[c];
        }
      }
      for (int c = 0; c < 3; ++c) {
        const double noise = archetype.noise_sigma > 0.0 ? archetype.noise_sigma * rng.normal() : 0.0;
        out.at(x, y, c) = to_byte(px[c] + noise);
      }
    }
  }
  return out;
}

Corpus generate_dataset(const CorpusSpec& spec, std::uint64_t seed) {
  validate(spec);
  const int side = spec.grid_side();
  const int cells = side * side;
  const auto num_classes = static_cast<int>(spec.classes.size());
  const auto total = static_cast<std::size_t>(num_classes) * spec.images_per_class;
  const int groups_per_class = (spec.images_per_class + spec.images_per_group - 1) / spec.images_per_group;
  const auto& background = find_archetype(spec, spec.background_archetype);
  const auto basis = patchio::StainBasis::hematoxylin_eosin();

  Corpus corpus;
  corpus.num_classes = num_classes;
  corpus.images.resize(total);
  corpus.masks.resize(total);

  parallel_for(total, [&](std::size_t i) {
    const int k = static_cast<int>(i) / spec.images_per_class;
    const int m = static_cast<int>(i) % spec.images_per_class;
    const auto& cls = spec.classes[k];
    Rng rng(derive_seed(seed, {1, i}));

    char buf[32];
    std::snprintf(buf, sizeof buf, "img_%05zu", i);
    SlideImage& slide = corpus.images[i];
    slide.id = buf;
    std::snprintf(buf, sizeof buf, "grp_%05d", k * groups_per_class + m / spec.images_per_group);
    slide.group_id = buf;
    slide.label = cls.label;

    // Plant the discriminative regions.
    const auto n_arch = static_cast<int>(cls.discriminative_archetypes.size());
    const int wanted = std::max(1, static_cast<int>(std::lround(cls.disc_fraction * cells)));
    std::vector<int> owner(static_cast<std::size_t>(cells), -1);  // region archetype or -1
    if (wanted >= cells) {
      // Full coverage: horizontal bands, one per region.
      const int bands = std::clamp(std::max(spec.cluster_blob_count, n_arch), 1, side);
      for (int r = 0; r < side; ++r) {
        const int band = r * bands / side;
        for (int c = 0; c < side; ++c) owner[static_cast<std::size_t>(r) * side + c] = cls.discriminative_archetypes[band % n_arch];
      }
    } else {
      std::vector<int> areas, region_arch;
      if (cls.is_mixed) {
        // One dominant archetype, the others share the remainder; each
        // archetype gets its own regions.
        const auto dominant = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_arch)));
        const double share = rng.uniform(cls.dominant_share_min, cls.dominant_share_max);
        const int major = std::clamp(static_cast<int>(std::lround(share * wanted)), 1, wanted - (n_arch - 1));
        int left = wanted - major;
        const int per_arch_blobs = std::max(1, spec.cluster_blob_count / n_arch);
        for (int a = 0; a < n_arch; ++a) {
          int count = major;
          if (a != dominant) {
            const int others_left = n_arch - 1 - (a > dominant ? a - 1 : a);
            count = left / others_left;
            left -= count;
          }
          int blobs = std::min(per_arch_blobs, count >= 4 ? count / 2 : 1);
          for (int area : split_areas(count, blobs, side, side)) {
            areas.push_back(area);
            region_arch.push_back(cls.discriminative_archetypes[static_cast<std::size_t>(a)]);
          }
        }
      } else {
        // Keep every region at >= 2 cells so each planted patch has a planted
        // 4-neighbor.
        int regions = spec.cluster_blob_count;
        if (wanted >= 4) regions = std::min(regions, wanted / 2);
        regions = std::clamp(regions, 1, wanted);
        areas = split_areas(wanted, regions, side, side);
        for (std::size_t b = 0; b < areas.size(); ++b)
          region_arch.push_back(cls.discriminative_archetypes[b % static_cast<std::size_t>(n_arch)]);
      }
      const auto rects = place_regions(areas, side, side, rng);
      for (std::size_t b = 0; b < rects.size(); ++b) {
        const int arch = region_arch[b];
        const Rect& rc = rects[b];
        for (int r = rc.r0; r < rc.r0 + rc.h; ++r)
          for (int c = rc.c0; c < rc.c0 + rc.w; ++c) owner[static_cast<std::size_t>(r) * side + c] = arch;
      }
    }

    OracleMask& mask = corpus.masks[i];
    mask.image_id = slide.id;
    mask.rows = side;
    mask.cols = side;
    mask.grid.assign(static_cast<std::size_t>(cells), 0);

    RgbImage image(spec.image_size, spec.image_size);
    for (int r = 0; r < side; ++r) {
      for (int c = 0; c < side; ++c) {
        const int arch = owner[static_cast<std::size_t>(r) * side + c];
        mask.grid[static_cast<std::size_t>(r) * side + c] = arch >= 0 ? 1 : 0;
        const auto& archetype = arch >= 0 ? find_archetype(spec, arch) : background;
        const auto ur = static_cast<std::uint64_t>(r), uc = static_cast<std::uint64_t>(c);
        RgbImage tile = texture_patch(archetype, spec.patch_size, derive_seed(seed, {2, i, ur, uc}));
        if (arch >= 0 && spec.min_disc_strength < 1.0) {
          Rng cell_rng(derive_seed(seed, {3, i, ur, uc}));
          const double w = cell_rng.uniform(spec.min_disc_strength, 1.0);
          const RgbImage bg = texture_patch(background, spec.patch_size, derive_seed(seed, {4, i, ur, uc}));
          for (std::size_t p = 0; p < tile.data.size(); ++p)
            tile.data[p] = to_byte((w * tile.data[p] + (1.0 - w) * bg.data[p]) / 255.0);
        }
        for (int y = 0; y < spec.patch_size; ++y) {
          const auto* src = &tile.data[static_cast<std::size_t>(y) * spec.patch_size * 3];
          std::copy(src, src + static_cast<std::size_t>(spec.patch_size) * 3,
                    &image.at(c * spec.patch_size, r * spec.patch_size + y, 0));
        }
      }
    }
    if (spec.stain_jitter > 0.0) {
      const double ah = std::clamp(rng.normal(1.0, spec.stain_jitter), 0.5, 1.5);
      const double ae = std::clamp(rng.normal(1.0, spec.stain_jitter), 0.5, 1.5);
      image = patchio::stain_perturb(image, basis, ah, ae);
    }
    slide.image = std::move(image);
  });
  return corpus;
}

const OracleMask& oracle_hidden_labels(std::span<const OracleMask> masks, std::string_view image_id) {
  for (const auto& m : masks)
    if (m.image_id == image_id) return m;
  throw DataError("no oracle mask for image " + std::string(image_id));
}

// ---------------------------------------------------------------------------

namespace {

std::vector<TextureArchetype> palette() {
  // id, hue, frequency, blobs, noise
  return {
      {0, 0.92, 1.5, 0.5, 0.05},  // shared background
      {1, 0.58, 3.0, 1.5, 0.05},
      {2, 0.10, 2.0, 2.5, 0.05},
      {3, 0.33, 4.0, 1.0, 0.05},
      {4, 0.75, 2.5, 3.0, 0.05},
      {5, 0.45, 5.0, 0.5, 0.05},
      {6, 0.20, 1.0, 2.0, 0.05},
  };
}

}  // namespace

CorpusSpec default_corpus_spec(int num_classes) {
  if (num_classes < 2 || num_classes > 6) throw std::invalid_argument("default corpus supports 2..6 classes");
  CorpusSpec spec;
  spec.archetypes = palette();
  spec.background_archetype = 0;
  for (int k = 0; k < num_classes; ++k) spec.classes.push_back({k, {k + 1}, 0.3, false});
  spec.images_per_class = 50;
  spec.image_size = 256;
  spec.patch_size = 32;
  spec.cluster_blob_count = 2;
  return spec;
}

CorpusSpec mixed_corpus_spec() {
  CorpusSpec spec = default_corpus_spec(2);
  // Equal planted fractions make a mixed image's patches a mixture of the
  // pure classes' patch distributions.
  for (auto& cls : spec.classes) cls.disc_fraction = 0.6;
  ClassSpec mixed{2, {1, 2}, 0.6, true};
  mixed.dominant_share_min = 0.65;
  mixed.dominant_share_max = 0.85;
  spec.classes.push_back(mixed);
  return spec;
}

CorpusSpec dispersed_corpus_spec() {
  CorpusSpec spec = default_corpus_spec(3);
  for (auto& cls : spec.classes) cls.disc_fraction = 0.06;
  spec.image_size = 512;
  spec.cluster_blob_count = 4;
  spec.stain_jitter = 0.1;
  return spec;
}

// ---------------------------------------------------------------------------

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw DataError("cannot create " + (dir / "images").string() + ": " + ec.message());

  std::ofstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw DataError("cannot write manifest in " + dir.string());
  for (const auto& slide : corpus.images) {
    const std::string rel = "images/" + slide.id + ".ppm";
    write_ppm(dir / rel, slide.image);
    nlohmann::ordered_json line;
    line["id"] = slide.id;
    line["group"] = slide.group_id;
    line["label"] = slide.label;
    line["path"] = rel;
    line["width"] = slide.image.width;
    line["height"] = slide.image.height;
    manifest << line.dump() << '\n';
  }

  nlohmann::ordered_json masks = nlohmann::ordered_json::object();
  for (const auto& m : corpus.masks) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (int r = 0; r < m.rows; ++r) {
      nlohmann::ordered_json row = nlohmann::ordered_json::array();
      for (int c = 0; c < m.cols; ++c) row.push_back(m.at(r, c));
      rows.push_back(std::move(row));
    }
    masks[m.image_id] = std::move(rows);
  }
  std::ofstream out(dir / "oracle_masks.json");
  if (!out) throw DataError("cannot write oracle masks in " + dir.string());
  out << masks.dump(1) << '\n';
}

Corpus read_corpus(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw DataError("missing manifest: " + (dir / "manifest.jsonl").string());
  Corpus corpus;
  std::string line;
  int max_label = -1;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    SlideImage slide;
    try {
      const auto j = nlohmann::json::parse(line);
      slide.id = j.at("id").get<std::string>();
      slide.group_id = j.at("group").get<std::string>();
      slide.label = j.at("label").get<int>();
      slide.image = read_ppm(dir / j.at("path").get<std::string>());
      if (slide.image.width != j.at("width").get<int>() || slide.image.height != j.at("height").get<int>()) {
        throw DataError("image " + slide.id + " does not match manifest dimensions");
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError("bad manifest line: " + std::string(e.what()));
    }
    if (slide.label < 0) throw DataError("negative label for " + slide.id);
    max_label = std::max(max_label, slide.label);
    corpus.images.push_back(std::move(slide));
  }
  if (corpus.images.empty()) throw DataError("empty manifest in " + dir.string());
  corpus.num_classes = max_label + 1;

  std::ifstream masks_in(dir / "oracle_masks.json");
  if (masks_in) {
    nlohmann::json masks;
    try {
      masks = nlohmann::json::parse(masks_in);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("bad oracle mask file: " + std::string(e.what()));
    }
    for (const auto& slide : corpus.images) {
      if (!masks.contains(slide.id)) {
        corpus.masks.clear();
        break;
      }
      OracleMask m;
      m.image_id = slide.id;
      const auto& rows = masks.at(slide.id);
      m.rows = static_cast<int>(rows.size());
      m.cols = m.rows > 0 ? static_cast<int>(rows[0].size()) : 0;
      for (const auto& row : rows)
        for (const auto& v : row) m.grid.push_back(v.get<bool>() ? 1 : 0);
      corpus.masks.push_back(std::move(m));
    }
  }
  return corpus;
}

}  // namespace emmil::synth
