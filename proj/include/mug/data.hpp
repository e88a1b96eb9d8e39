#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mug/common.hpp"
#include "mug/vision.hpp"

namespace mug {

/// Closed scene grammar behind the synthetic corpus. Captions are a
/// deterministic function of the rendered scene, so caption NLL can be driven
/// to ~0 by a model that reads the image.
struct SyntheticGrammar {
  static const std::vector<std::string>& colors();     // red green blue yellow
  static const std::vector<std::string>& shapes();     // circle square triangle cross
  static const std::vector<std::string>& relations();  // left right above below

  /// Grayscale intensity / RGB triple used when rendering color index c.
  static float gray_level(size_t color);
  static void rgb_level(size_t color, float out[3]);
};

struct SynthOptions {
  size_t channels = 1;      // 1 or 3
  double noise = 0.0;       // additive pixel noise amplitude, clamped to [0,1]
  size_t max_objects = 2;   // 1 = single-object scenes only
  size_t canvas = 32;
};

struct ManifestRecord {
  std::string image_path;  // relative to the manifest directory
  std::string caption;
};

using Manifest = std::vector<ManifestRecord>;

/// Renders n scenes under out_dir, writes `manifest.tsv` and the image
/// files, and returns the manifest. Deterministic for (n, seed, options).
Manifest generate_synthetic(size_t n, uint64_t seed, const std::string& out_dir,
                            const SynthOptions& options = {});

/// In-memory variant used by tests and the acceptance suite.
std::vector<ImageSample> generate_synthetic_samples(size_t n, uint64_t seed,
                                                    const SynthOptions& options = {});

/// Loads every record of a manifest file; image dims must agree across the
/// corpus and all values must lie in [0,1].
std::vector<ImageSample> load_manifest(const std::string& manifest_path);

/// Directory convenience: load_manifest(dir + "/manifest.tsv").
std::vector<ImageSample> load_corpus_dir(const std::string& dir);

/// Raw float image container: "MUGI", u32 version=1, u32 C/H/W, C*H*W
/// little-endian f32 channel-major, trailing CRC-32.
void write_image(const std::string& path, const Image& image);
Image read_image(const std::string& path);

/// First shape word of the caption, as a class id for probing; throws if the
/// caption names no shape.
size_t shape_class_of(const std::string& caption);

}  // namespace mug
