#ifndef EMMIL_SYNTH_HPP
#define EMMIL_SYNTH_HPP

// Seeded synthetic slide corpora with planted discriminative regions.
//
// Every image is a grid of independently rendered texture patches. Patches
// inside the planted rectangles come from the class's discriminative
// archetypes, everything else from one background archetype shared by all
// classes, so background patches carry no label information. The planted
// layout is returned as an OracleMask per image.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "emmil/image.hpp"

namespace emmil::synth {

struct TextureArchetype {
  int id = 0;
  double base_hue = 0.0;           // [0, 1)
  double spatial_frequency = 0.0;  // cycles per patch
  double blob_density = 0.0;       // expected blobs per patch
  double noise_sigma = 0.0;        // pixel std on the [0, 1] intensity scale
};

struct ClassSpec {
  int label = 0;
  std::vector<int> discriminative_archetypes;
  double disc_fraction = 0.3;
  bool is_mixed = false;
  // Mixed classes: each image gives one randomly chosen archetype this share
  // of the planted cells, drawn uniformly; the rest split evenly.
  double dominant_share_min = 0.6;
  double dominant_share_max = 0.8;
};

struct CorpusSpec {
  std::vector<TextureArchetype> archetypes;
  int background_archetype = 0;
  std::vector<ClassSpec> classes;
  int images_per_class = 50;
  int image_size = 256;
  int patch_size = 32;
  int cluster_blob_count = 2;
  int images_per_group = 1;
  // Std of per-image H/E stain factors (slide-to-slide staining variation).
  double stain_jitter = 0.0;
  // Planted cells blend their archetype with background at a strength drawn
  // uniformly from [min_disc_strength, 1]; 1 gives clean regions.
  double min_disc_strength = 1.0;

  int grid_side() const { return image_size / patch_size; }
};

struct SlideImage {
  std::string id;
  std::string group_id;
  int label = 0;
  RgbImage image;
};

struct OracleMask {
  std::string image_id;
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> grid;  // row-major, 1 = discriminative

  bool at(int r, int c) const { return grid[static_cast<std::size_t>(r) * cols + c] != 0; }
  std::size_t count() const;
  bool operator==(const OracleMask&) const = default;
};

struct Corpus {
  std::vector<SlideImage> images;
  std::vector<OracleMask> masks;  // parallel to images; may be empty when loaded
  int num_classes = 0;
};

/// Throws std::invalid_argument describing the first violated constraint.
void validate(const CorpusSpec& spec);

Corpus generate_dataset(const CorpusSpec& spec, std::uint64_t seed);

RgbImage texture_patch(const TextureArchetype& archetype, int patch_size, std::uint64_t seed);

/// Throws DataError for an unknown id.
const OracleMask& oracle_hidden_labels(std::span<const OracleMask> masks, std::string_view image_id);

// Ready-made corpora. Archetype 0 is always the shared background.
CorpusSpec default_corpus_spec(int num_classes = 3);
/// Classes A and B plus a mixed class M built from both of their archetypes.
CorpusSpec mixed_corpus_spec();
/// Many small scattered regions with slide-level stain variation.
CorpusSpec dispersed_corpus_spec();

/// Writes <dir>/images/<id>.ppm, <dir>/manifest.jsonl and <dir>/oracle_masks.json.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
/// Reads a corpus written by write_corpus. Masks are loaded when present.
Corpus read_corpus(const std::filesystem::path& dir);

}  // namespace emmil::synth

#endif  // EMMIL_SYNTH_HPP
