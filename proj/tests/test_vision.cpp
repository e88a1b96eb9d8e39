#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <set>

#include "mug/vision.hpp"

using namespace mug;

namespace {

Image rand_image(size_t c, size_t h, size_t w, uint64_t seed) {
  Image img = Image::zeros(c, h, w);
  Rng rng(seed);
  for (auto& v : img.data) v = static_cast<float>(rng.u01());
  return img;
}

}  // namespace

TEST_CASE("patchify shape arithmetic") {
  Image img = rand_image(1, 4, 4, 1);
  auto seq = patchify(img, 2);
  CHECK(seq.patches.rows() == 4);
  CHECK(seq.patches.cols() == 4);

  Image constant = Image::zeros(1, 4, 4);
  for (auto& v : constant.data) v = 0.25f;
  auto cseq = patchify(constant, 2);
  for (size_t r = 1; r < 4; ++r)
    for (size_t c = 0; c < 4; ++c) CHECK(cseq.patches.at(r, c) == cseq.patches.at(0, c));
}

TEST_CASE("patchify index map oracle") {
  // pixel value encodes (channel, y, x); verify each patch element against
  // the raster layout directly
  Image img = Image::zeros(2, 16, 16);
  for (size_t c = 0; c < 2; ++c)
    for (size_t y = 0; y < 16; ++y)
      for (size_t x = 0; x < 16; ++x)
        img.at(c, y, x) = static_cast<float>(c) * 0.001f + static_cast<float>(y) * 0.01f +
                          static_cast<float>(x) * 0.0001f;
  size_t s = 4;
  auto seq = patchify(img, s);
  CHECK(seq.patches.rows() == 16);
  size_t gw = 16 / s;
  for (size_t p = 0; p < 16; ++p) {
    size_t gy = p / gw, gx = p % gw;
    size_t k = 0;
    for (size_t c = 0; c < 2; ++c)
      for (size_t dy = 0; dy < s; ++dy)
        for (size_t dx = 0; dx < s; ++dx)
          CHECK(seq.patches.at(p, k++) == img.at(c, gy * s + dy, gx * s + dx));
  }
  // patch 0 holds rows 0-3 x cols 0-3 of channel 0 first
  CHECK(seq.patches.at(0, 0) == img.at(0, 0, 0));
  CHECK(seq.patches.at(0, 5) == img.at(0, 1, 1));
}

TEST_CASE("patchify rejects indivisible dims") {
  Image img = rand_image(1, 30, 32, 2);
  CHECK_THROWS_AS(patchify(img, 4), ConfigError);
}

TEST_CASE("unpatchify inverts patchify bit-exactly") {
  Image img = rand_image(3, 32, 32, 3);
  auto seq = patchify(img, 4);
  Image back = unpatchify(seq, 3, 32, 32);
  CHECK(std::memcmp(img.data.data(), back.data.data(), img.numel() * sizeof(float)) == 0);

  PatchSequence zeros;
  zeros.patch_size = 2;
  zeros.patches = Tensor<float>::zeros({4, 4});
  Image z = unpatchify(zeros, 1, 4, 4);
  for (float v : z.data) CHECK(v == 0.0f);

  zeros.patch_size = 3;
  CHECK_THROWS_AS(unpatchify(zeros, 1, 4, 4), ShapeError);
}

TEST_CASE("single lit patch lands at its raster position") {
  PatchSequence seq;
  seq.patch_size = 2;
  seq.patches = Tensor<float>::zeros({4, 4});
  for (size_t c = 0; c < 4; ++c) seq.patches.at(2, c) = 1.0f;  // grid position (1,0)
  Image img = unpatchify(seq, 1, 4, 4);
  for (size_t y = 0; y < 4; ++y)
    for (size_t x = 0; x < 4; ++x) {
      bool lit = y >= 2 && x < 2;
      CHECK(img.at(0, y, x) == (lit ? 1.0f : 0.0f));
    }
}

TEST_CASE("sample_mask counts and determinism") {
  auto m = sample_mask(196, 0.75, 5);
  CHECK(m.omega == 147);
  CHECK(m.n() - m.omega == 49);

  auto m4 = sample_mask(4, 0.75, 5);
  CHECK(m4.omega == 3);

  auto a = sample_mask(64, 0.75, 123);
  auto b = sample_mask(64, 0.75, 123);
  CHECK(a.keep == b.keep);
  auto c = sample_mask(64, 0.75, 124);
  CHECK(a.keep != c.keep);  // overwhelmingly likely for distinct seeds

  size_t kept = 0;
  for (auto k : a.keep) kept += k;
  CHECK(kept == 16);
}

TEST_CASE("sample_mask rejects degenerate ratios") {
  CHECK_THROWS_AS(sample_mask(4, 0.05, 1), ConfigError);  // rounds to 0 masked
  CHECK_THROWS_AS(sample_mask(4, 0.95, 1), ConfigError);  // rounds to 0 visible
  CHECK_THROWS_AS(sample_mask(4, 1.5, 1), ConfigError);
}

TEST_CASE("mask marginal frequency tracks the ratio") {
  // each patch should be masked about 75% of the time across seeds
  const size_t n = 64, trials = 2000;
  std::vector<size_t> masked_count(n, 0);
  for (size_t s = 0; s < trials; ++s) {
    auto m = sample_mask(n, 0.75, 1000 + s);
    for (size_t i = 0; i < n; ++i) masked_count[i] += m.keep[i] ? 0 : 1;
  }
  double sigma = std::sqrt(0.75 * 0.25 * static_cast<double>(trials));
  for (size_t i = 0; i < n; ++i) {
    double dev = std::abs(static_cast<double>(masked_count[i]) - 0.75 * trials);
    CHECK(dev <= 4.0 * sigma);  // 4 sigma per patch keeps the 64-way joint test stable
  }
}

TEST_CASE("apply_mask gathers visible patches in order") {
  Image img = rand_image(1, 8, 8, 7);
  auto seq = patchify(img, 2);  // 16 patches

  auto all = apply_mask(seq, bypass_mask(16));
  CHECK(all.indices.size() == 16);
  for (size_t i = 0; i < 16; ++i) CHECK(all.indices[i] == i);
  CHECK(all.patches.data == seq.patches.data);

  MaskSpec one;
  one.keep.assign(16, 0);
  one.keep[11] = 1;
  one.omega = 15;
  auto vis = apply_mask(seq, one);
  CHECK(vis.indices == std::vector<uint32_t>{11});
  for (size_t c = 0; c < 4; ++c) CHECK(vis.patches.at(0, c) == seq.patches.at(11, c));
}

TEST_CASE("apply_mask output ignores masked patch contents") {
  Image img = rand_image(1, 8, 8, 9);
  auto seq = patchify(img, 2);
  auto mask = sample_mask(16, 0.75, 42);
  auto before = apply_mask(seq, mask);

  for (auto i : mask.masked_indices())
    for (size_t c = 0; c < 4; ++c) seq.patches.at(i, c) = -123.0f;
  auto after = apply_mask(seq, mask);
  CHECK(before.patches.data == after.patches.data);
  CHECK(before.indices == after.indices);
}

TEST_CASE("visible and masked indices partition every slot") {
  auto mask = sample_mask(32, 0.5, 77);
  std::set<uint32_t> seen;
  for (auto i : mask.visible_indices()) CHECK(seen.insert(i).second);
  for (auto i : mask.masked_indices()) CHECK(seen.insert(i).second);
  CHECK(seen.size() == 32);
  CHECK(*seen.rbegin() == 31);
}

TEST_CASE("apply_mask length mismatch") {
  Image img = rand_image(1, 8, 8, 10);
  auto seq = patchify(img, 2);
  CHECK_THROWS_AS(apply_mask(seq, bypass_mask(9)), ShapeError);
}

TEST_CASE("normalized patch targets have zero mean and unit variance") {
  Image img = rand_image(1, 8, 8, 11);
  auto seq = patchify(img, 4);
  auto norm = normalize_patch_targets(seq.patches);
  size_t p = seq.patches.cols();
  for (size_t r = 0; r < seq.patches.rows(); ++r) {
    double mean = 0.0, var = 0.0;
    for (size_t c = 0; c < p; ++c) mean += norm.at(r, c);
    mean /= static_cast<double>(p);
    for (size_t c = 0; c < p; ++c) var += (norm.at(r, c) - mean) * (norm.at(r, c) - mean);
    var /= static_cast<double>(p);
    CHECK(std::abs(mean) < 1e-5);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-2));
  }
}

TEST_CASE("random_resized_crop is seeded and stays in range") {
  Image img = rand_image(3, 32, 32, 12);
  Image a = random_resized_crop(img, 5);
  Image b = random_resized_crop(img, 5);
  CHECK(a.data == b.data);
  Image c = random_resized_crop(img, 6);
  CHECK(a.data != c.data);
  CHECK(a.height == 32);
  CHECK(a.width == 32);
  for (float v : a.data) CHECK((v >= 0.0f && v <= 1.0f));
}
