#include "mug/vision.hpp"

#include <algorithm>
#include <cmath>

namespace mug {

std::vector<uint32_t> MaskSpec::visible_indices() const {
  std::vector<uint32_t> out;
  out.reserve(keep.size() - omega);
  for (uint32_t i = 0; i < keep.size(); ++i)
    if (keep[i]) out.push_back(i);
  return out;
}

std::vector<uint32_t> MaskSpec::masked_indices() const {
  std::vector<uint32_t> out;
  out.reserve(omega);
  for (uint32_t i = 0; i < keep.size(); ++i)
    if (!keep[i]) out.push_back(i);
  return out;
}

PatchSequence patchify(const Image& image, size_t patch_size) {
  if (patch_size == 0 || image.height % patch_size != 0 || image.width % patch_size != 0)
    throw ConfigError("patchify: image " + std::to_string(image.height) + "x" +
                      std::to_string(image.width) + " is not divisible by patch size " +
                      std::to_string(patch_size));
  size_t s = patch_size;
  size_t gh = image.height / s, gw = image.width / s;
  size_t n = gh * gw, p = image.channels * s * s;
  PatchSequence seq;
  seq.patch_size = s;
  seq.patches = Tensor<float>::zeros({n, p});
  for (size_t gy = 0; gy < gh; ++gy) {
    for (size_t gx = 0; gx < gw; ++gx) {
      float* row = seq.patches.data.data() + (gy * gw + gx) * p;
      size_t k = 0;
      for (size_t c = 0; c < image.channels; ++c)
        for (size_t dy = 0; dy < s; ++dy)
          for (size_t dx = 0; dx < s; ++dx) row[k++] = image.at(c, gy * s + dy, gx * s + dx);
    }
  }
  return seq;
}

Image unpatchify(const PatchSequence& seq, size_t channels, size_t height, size_t width) {
  size_t s = seq.patch_size;
  size_t n = seq.patches.rows(), p = seq.patches.cols();
  if (s == 0 || height % s != 0 || width % s != 0 || p != channels * s * s ||
      n != (height / s) * (width / s))
    throw ShapeError("unpatchify: " + std::to_string(n) + " patches of length " +
                     std::to_string(p) + " (s=" + std::to_string(s) + ") cannot form a " +
                     std::to_string(channels) + "x" + std::to_string(height) + "x" +
                     std::to_string(width) + " image");
  size_t gw = width / s;
  Image img = Image::zeros(channels, height, width);
  for (size_t i = 0; i < n; ++i) {
    size_t gy = i / gw, gx = i % gw;
    const float* row = seq.patches.data.data() + i * p;
    size_t k = 0;
    for (size_t c = 0; c < channels; ++c)
      for (size_t dy = 0; dy < s; ++dy)
        for (size_t dx = 0; dx < s; ++dx) img.at(c, gy * s + dy, gx * s + dx) = row[k++];
  }
  return img;
}

MaskSpec sample_mask(size_t n_patches, double ratio, uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0))
    throw ConfigError("sample_mask: ratio must lie in (0,1), got " + std::to_string(ratio));
  auto omega = static_cast<size_t>(std::lround(ratio * static_cast<double>(n_patches)));
  if (omega < 1 || omega > n_patches - 1)
    throw ConfigError("sample_mask: ratio " + std::to_string(ratio) + " on " +
                      std::to_string(n_patches) + " patches leaves " +
                      std::to_string(n_patches - omega) + " visible / " + std::to_string(omega) +
                      " masked");
  std::vector<uint32_t> order(n_patches);
  for (uint32_t i = 0; i < n_patches; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  MaskSpec mask;
  mask.ratio = ratio;
  mask.omega = omega;
  mask.keep.assign(n_patches, 1);
  for (size_t i = 0; i < omega; ++i) mask.keep[order[i]] = 0;
  return mask;
}

MaskSpec bypass_mask(size_t n_patches) {
  MaskSpec mask;
  mask.ratio = 0.0;
  mask.omega = 0;
  mask.keep.assign(n_patches, 1);
  return mask;
}

VisiblePatches apply_mask(const PatchSequence& seq, const MaskSpec& mask) {
  size_t n = seq.patches.rows(), p = seq.patches.cols();
  if (mask.n() != n)
    throw ShapeError("apply_mask: mask of length " + std::to_string(mask.n()) +
                     " does not match " + std::to_string(n) + " patches");
  VisiblePatches out;
  out.indices = mask.visible_indices();
  out.patches = Tensor<float>::zeros({out.indices.size(), p});
  for (size_t r = 0; r < out.indices.size(); ++r)
    std::copy_n(seq.patches.data.data() + out.indices[r] * p, p,
                out.patches.data.data() + r * p);
  return out;
}

Tensor<float> normalize_patch_targets(const Tensor<float>& patches, float eps) {
  size_t n = patches.rows(), p = patches.cols();
  Tensor<float> out = Tensor<float>::zeros({n, p});
  for (size_t r = 0; r < n; ++r) {
    const float* src = patches.data.data() + r * p;
    float mean = 0.0f;
    for (size_t c = 0; c < p; ++c) mean += src[c];
    mean /= static_cast<float>(p);
    float var = 0.0f;
    for (size_t c = 0; c < p; ++c) {
      float d = src[c] - mean;
      var += d * d;
    }
    var /= static_cast<float>(p);
    float inv = 1.0f / std::sqrt(var + eps);
    for (size_t c = 0; c < p; ++c) out.data[r * p + c] = (src[c] - mean) * inv;
  }
  return out;
}

namespace {

float bilinear_sample(const Image& img, size_t c, double y, double x) {
  double yc = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  double xc = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  size_t y0 = static_cast<size_t>(yc), x0 = static_cast<size_t>(xc);
  size_t y1 = std::min(y0 + 1, img.height - 1), x1 = std::min(x0 + 1, img.width - 1);
  double fy = yc - static_cast<double>(y0), fx = xc - static_cast<double>(x0);
  double v00 = img.at(c, y0, x0), v01 = img.at(c, y0, x1);
  double v10 = img.at(c, y1, x0), v11 = img.at(c, y1, x1);
  double top = v00 * (1.0 - fx) + v01 * fx;
  double bot = v10 * (1.0 - fx) + v11 * fx;
  return static_cast<float>(top * (1.0 - fy) + bot * fy);
}

}  // namespace

Image random_resized_crop(const Image& image, uint64_t seed, double min_area) {
  Rng rng(seed);
  double area = min_area + (1.0 - min_area) * rng.u01();
  double aspect = 0.75 + (4.0 / 3.0 - 0.75) * rng.u01();
  double ch = std::sqrt(area / aspect) * static_cast<double>(image.height);
  double cw = std::sqrt(area * aspect) * static_cast<double>(image.width);
  ch = std::clamp(ch, 1.0, static_cast<double>(image.height));
  cw = std::clamp(cw, 1.0, static_cast<double>(image.width));
  double y0 = rng.u01() * (static_cast<double>(image.height) - ch);
  double x0 = rng.u01() * (static_cast<double>(image.width) - cw);
  Image out = Image::zeros(image.channels, image.height, image.width);
  for (size_t c = 0; c < image.channels; ++c) {
    for (size_t y = 0; y < image.height; ++y) {
      for (size_t x = 0; x < image.width; ++x) {
        double sy = y0 + (static_cast<double>(y) + 0.5) / static_cast<double>(image.height) * ch - 0.5;
        double sx = x0 + (static_cast<double>(x) + 0.5) / static_cast<double>(image.width) * cw - 0.5;
        out.at(c, y, x) = std::clamp(bilinear_sample(image, c, sy, sx), 0.0f, 1.0f);
      }
    }
  }
  return out;
}

}  // namespace mug
