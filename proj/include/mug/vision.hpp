#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mug/common.hpp"
#include "mug/tensor.hpp"

namespace mug {

/// Channel-major [C][H][W] pixel buffer with values in [0, 1].
struct Image {
  size_t channels = 0;
  size_t height = 0;
  size_t width = 0;
  std::vector<float> data;

  size_t numel() const { return channels * height * width; }
  float& at(size_t c, size_t y, size_t x) { return data[(c * height + y) * width + x]; }
  float at(size_t c, size_t y, size_t x) const { return data[(c * height + y) * width + x]; }

  static Image zeros(size_t c, size_t h, size_t w) {
    Image img;
    img.channels = c;
    img.height = h;
    img.width = w;
    img.data.assign(c * h * w, 0.0f);
    return img;
  }
};

/// One corpus record: pixels plus the paired caption.
struct ImageSample {
  Image pixels;
  std::string caption;
  std::string id;
};

/// Raster-ordered flattened patches: row r holds patch r as
/// [channel][dy][dx], so patches.cols == C * s * s.
struct PatchSequence {
  Tensor<float> patches;  // [N, P]
  size_t patch_size = 0;
};

/// 0/1 visibility flags per patch; keep[i] == 1 means patch i stays visible
/// to the encoder. omega counts the masked (hidden) patches.
struct MaskSpec {
  std::vector<uint8_t> keep;
  double ratio = 0.0;
  size_t omega = 0;

  size_t n() const { return keep.size(); }
  std::vector<uint32_t> visible_indices() const;
  std::vector<uint32_t> masked_indices() const;
};

struct VisiblePatches {
  Tensor<float> patches;  // [N_vis, P]
  std::vector<uint32_t> indices;
};

PatchSequence patchify(const Image& image, size_t patch_size);
Image unpatchify(const PatchSequence& patches, size_t channels, size_t height, size_t width);

/// Exactly round(ratio * n) patches are masked, chosen uniformly without
/// replacement by a seeded shuffle. Throws ConfigError if the rounding would
/// leave zero visible or zero masked patches.
MaskSpec sample_mask(size_t n_patches, double ratio, uint64_t seed);

/// All patches visible; used for probing and full-image captioning.
MaskSpec bypass_mask(size_t n_patches);

/// Gathers visible patches in ascending original-index order.
VisiblePatches apply_mask(const PatchSequence& patches, const MaskSpec& mask);

/// Per-patch normalization of regression targets: (x - mean) / sqrt(var + eps)
/// with the biased variance, computed per patch row.
Tensor<float> normalize_patch_targets(const Tensor<float>& patches, float eps = 1e-6f);

/// Seeded RandomResizedCrop-style augmentation (area in [min_area, 1],
/// aspect in [3/4, 4/3], bilinear resize back to the input size). Off by
/// default in training; provided for qualitative experiments.
Image random_resized_crop(const Image& image, uint64_t seed, double min_area = 0.5);

}  // namespace mug
