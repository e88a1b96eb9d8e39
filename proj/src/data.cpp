#include "mug/data.hpp"

#include "mug/text.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace mug {

namespace fs = std::filesystem;

const std::vector<std::string>& SyntheticGrammar::colors() {
  static const std::vector<std::string> v{"red", "green", "blue", "yellow"};
  return v;
}
const std::vector<std::string>& SyntheticGrammar::shapes() {
  static const std::vector<std::string> v{"circle", "square", "triangle", "cross"};
  return v;
}
const std::vector<std::string>& SyntheticGrammar::relations() {
  static const std::vector<std::string> v{"left", "right", "above", "below"};
  return v;
}

float SyntheticGrammar::gray_level(size_t color) {
  static const float levels[4] = {0.25f, 0.5f, 0.75f, 1.0f};
  return levels[color];
}

void SyntheticGrammar::rgb_level(size_t color, float out[3]) {
  static const float levels[4][3] = {
      {1.0f, 0.0f, 0.0f}, {0.0f, 1.0f, 0.0f}, {0.0f, 0.0f, 1.0f}, {1.0f, 1.0f, 0.0f}};
  out[0] = levels[color][0];
  out[1] = levels[color][1];
  out[2] = levels[color][2];
}

// ------------------------------------------------------------- scene model

namespace {

struct SceneObject {
  size_t shape, color;
  long cx, cy, r;
};

struct Scene {
  std::vector<SceneObject> objects;
  long relation = -1;  // index into relations() when two objects
};

bool inside_shape(const SceneObject& o, long x, long y) {
  long dx = x - o.cx, dy = y - o.cy;
  switch (o.shape) {
    case 0:  // circle
      return dx * dx + dy * dy <= o.r * o.r;
    case 1:  // square
      return std::abs(dx) <= o.r && std::abs(dy) <= o.r;
    case 2:  // triangle, apex up
      return dy >= -o.r && dy <= o.r && 2 * std::abs(dx) <= dy + o.r;
    case 3: {  // cross
      long t = std::max<long>(1, o.r / 3);
      return (std::abs(dx) <= t && std::abs(dy) <= o.r) ||
             (std::abs(dy) <= t && std::abs(dx) <= o.r);
    }
    default:
      return false;
  }
}

void paint(Image& img, const SceneObject& o) {
  float rgb[3];
  SyntheticGrammar::rgb_level(o.color, rgb);
  float gray = SyntheticGrammar::gray_level(o.color);
  long h = static_cast<long>(img.height), w = static_cast<long>(img.width);
  for (long y = std::max<long>(0, o.cy - o.r); y <= std::min(h - 1, o.cy + o.r); ++y) {
    for (long x = std::max<long>(0, o.cx - o.r); x <= std::min(w - 1, o.cx + o.r); ++x) {
      if (!inside_shape(o, x, y)) continue;
      if (img.channels == 1) {
        img.at(0, static_cast<size_t>(y), static_cast<size_t>(x)) = gray;
      } else {
        for (size_t c = 0; c < 3; ++c)
          img.at(c, static_cast<size_t>(y), static_cast<size_t>(x)) = rgb[c];
      }
    }
  }
}

/// Position an object with its bounding box inside [lo, hi] on one axis.
long place(Rng& rng, long r, long lo, long hi) {
  return lo + r + static_cast<long>(rng.index(static_cast<size_t>(hi - lo - 2 * r + 1)));
}

Scene sample_scene(Rng& rng, const SynthOptions& opt) {
  const long canvas = static_cast<long>(opt.canvas);
  Scene scene;
  bool two = opt.max_objects >= 2 && rng.u01() < 0.5;
  if (!two) {
    SceneObject o;
    o.shape = rng.index(SyntheticGrammar::shapes().size());
    o.color = rng.index(SyntheticGrammar::colors().size());
    o.r = 5 + static_cast<long>(rng.index(4));  // 5..8
    o.cx = place(rng, o.r, 0, canvas - 1);
    o.cy = place(rng, o.r, 0, canvas - 1);
    scene.objects.push_back(o);
    return scene;
  }
  scene.relation = static_cast<long>(rng.index(SyntheticGrammar::relations().size()));
  SceneObject a, b;
  for (SceneObject* o : {&a, &b}) {
    o->shape = rng.index(SyntheticGrammar::shapes().size());
    o->color = rng.index(SyntheticGrammar::colors().size());
    o->r = 4 + static_cast<long>(rng.index(3));  // 4..6
  }
  long mid = canvas / 2;
  switch (scene.relation) {
    case 0:  // a left of b
      a.cx = place(rng, a.r, 0, mid - 1);
      b.cx = place(rng, b.r, mid, canvas - 1);
      a.cy = place(rng, a.r, 0, canvas - 1);
      b.cy = place(rng, b.r, 0, canvas - 1);
      break;
    case 1:  // a right of b
      a.cx = place(rng, a.r, mid, canvas - 1);
      b.cx = place(rng, b.r, 0, mid - 1);
      a.cy = place(rng, a.r, 0, canvas - 1);
      b.cy = place(rng, b.r, 0, canvas - 1);
      break;
    case 2:  // a above b
      a.cy = place(rng, a.r, 0, mid - 1);
      b.cy = place(rng, b.r, mid, canvas - 1);
      a.cx = place(rng, a.r, 0, canvas - 1);
      b.cx = place(rng, b.r, 0, canvas - 1);
      break;
    default:  // a below b
      a.cy = place(rng, a.r, mid, canvas - 1);
      b.cy = place(rng, b.r, 0, mid - 1);
      a.cx = place(rng, a.r, 0, canvas - 1);
      b.cx = place(rng, b.r, 0, canvas - 1);
      break;
  }
  scene.objects.push_back(a);
  scene.objects.push_back(b);
  return scene;
}

std::string caption_of(const Scene& scene) {
  auto describe = [](const SceneObject& o) {
    return "a " + SyntheticGrammar::colors()[o.color] + " " + SyntheticGrammar::shapes()[o.shape];
  };
  std::string caption = describe(scene.objects[0]);
  if (scene.objects.size() == 2)
    caption += " " + SyntheticGrammar::relations()[static_cast<size_t>(scene.relation)] + " " +
               describe(scene.objects[1]);
  return caption;
}

ImageSample render_sample(size_t index, uint64_t seed, const SynthOptions& opt) {
  if (opt.channels != 1 && opt.channels != 3)
    throw ConfigError("generate_synthetic: channels must be 1 or 3");
  Rng rng(derive_seed(seed, "synth-scene", uint64_t{index}));
  Scene scene = sample_scene(rng, opt);
  ImageSample sample;
  sample.pixels = Image::zeros(opt.channels, opt.canvas, opt.canvas);
  for (const auto& o : scene.objects) paint(sample.pixels, o);
  if (opt.noise > 0.0) {
    for (auto& v : sample.pixels.data) {
      double noisy = static_cast<double>(v) + (rng.u01() * 2.0 - 1.0) * opt.noise;
      v = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
    }
  }
  sample.caption = caption_of(scene);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%06zu", index);
  sample.id = buf;
  return sample;
}

}  // namespace

std::vector<ImageSample> generate_synthetic_samples(size_t n, uint64_t seed,
                                                    const SynthOptions& options) {
  if (n < 1) throw ConfigError("generate_synthetic: n must be at least 1");
  std::vector<ImageSample> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) out.push_back(render_sample(i, seed, options));
  return out;
}

Manifest generate_synthetic(size_t n, uint64_t seed, const std::string& out_dir,
                            const SynthOptions& options) {
  auto samples = generate_synthetic_samples(n, seed, options);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("generate_synthetic: cannot create directory " + out_dir);
  Manifest manifest;
  manifest.reserve(n);
  for (const auto& s : samples) {
    std::string rel = s.id + ".mugi";
    write_image((fs::path(out_dir) / rel).string(), s.pixels);
    manifest.push_back({rel, s.caption});
  }
  std::ofstream mf(fs::path(out_dir) / "manifest.tsv", std::ios::binary);
  if (!mf) throw IoError("generate_synthetic: cannot write manifest in " + out_dir);
  for (const auto& rec : manifest) mf << rec.image_path << "\t" << rec.caption << "\n";
  return manifest;
}

// ---------------------------------------------------------------- manifest

std::vector<ImageSample> load_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw IoError("load_manifest: cannot read " + manifest_path);
  fs::path base = fs::path(manifest_path).parent_path();
  std::vector<ImageSample> samples;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || tab + 1 >= line.size())
      throw ParseError("load_manifest: malformed line " + std::to_string(line_no) + " in " +
                       manifest_path);
    ImageSample s;
    s.id = line.substr(0, tab);
    s.caption = line.substr(tab + 1);
    std::string full = (base / s.id).string();
    if (!fs::exists(full))
      throw IoError("load_manifest: missing image file " + full + " (line " +
                    std::to_string(line_no) + ")");
    s.pixels = read_image(full);
    if (!samples.empty()) {
      const Image& first = samples.front().pixels;
      if (s.pixels.channels != first.channels || s.pixels.height != first.height ||
          s.pixels.width != first.width)
        throw ShapeError("load_manifest: image " + full + " has dims " +
                         std::to_string(s.pixels.channels) + "x" +
                         std::to_string(s.pixels.height) + "x" + std::to_string(s.pixels.width) +
                         " unlike the rest of the corpus");
    }
    samples.push_back(std::move(s));
  }
  if (samples.empty()) throw ParseError("load_manifest: " + manifest_path + " holds no records");
  return samples;
}

std::vector<ImageSample> load_corpus_dir(const std::string& dir) {
  return load_manifest((fs::path(dir) / "manifest.tsv").string());
}

// -------------------------------------------------------------- image file

namespace {

constexpr char kImageMagic[4] = {'M', 'U', 'G', 'I'};
constexpr uint32_t kImageVersion = 1;

void put_u32(std::string& buf, uint32_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
  buf.push_back(static_cast<char>((v >> 16) & 0xff));
  buf.push_back(static_cast<char>((v >> 24) & 0xff));
}

uint32_t get_u32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

}  // namespace

void write_image(const std::string& path, const Image& image) {
  for (float v : image.data)
    if (!(v >= 0.0f && v <= 1.0f))
      throw VerifyError("write_image: pixel value " + fmt_float(v) + " outside [0,1]");
  std::string buf;
  buf.reserve(16 + image.numel() * 4 + 4);
  buf.append(kImageMagic, 4);
  put_u32(buf, kImageVersion);
  put_u32(buf, static_cast<uint32_t>(image.channels));
  put_u32(buf, static_cast<uint32_t>(image.height));
  put_u32(buf, static_cast<uint32_t>(image.width));
  for (float v : image.data) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(buf, bits);
  }
  uint32_t crc = static_cast<uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
  put_u32(buf, crc);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_image: cannot write " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write_image: short write to " + path);
}

Image read_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_image: cannot read " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 24) throw IoError("read_image: " + path + " is truncated");
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  if (std::memcmp(p, kImageMagic, 4) != 0)
    throw IoError("read_image: " + path + " has wrong magic");
  if (get_u32(p + 4) != kImageVersion)
    throw IoError("read_image: " + path + " has unknown version " + std::to_string(get_u32(p + 4)));
  uint32_t c = get_u32(p + 8), h = get_u32(p + 12), w = get_u32(p + 16);
  size_t expect = 20 + static_cast<size_t>(c) * h * w * 4 + 4;
  if (buf.size() != expect)
    throw IoError("read_image: " + path + " has size " + std::to_string(buf.size()) +
                  ", expected " + std::to_string(expect));
  uint32_t stored_crc = get_u32(p + buf.size() - 4);
  uint32_t actual_crc = static_cast<uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size() - 4)));
  if (stored_crc != actual_crc) throw VerifyError("read_image: checksum mismatch in " + path);
  Image img = Image::zeros(c, h, w);
  for (size_t i = 0; i < img.numel(); ++i) {
    uint32_t bits = get_u32(p + 20 + i * 4);
    float v;
    std::memcpy(&v, &bits, 4);
    if (!(v >= 0.0f && v <= 1.0f))
      throw VerifyError("read_image: " + path + " holds pixel value outside [0,1]");
    img.data[i] = v;
  }
  return img;
}

size_t shape_class_of(const std::string& caption) {
  const auto& shapes = SyntheticGrammar::shapes();
  for (const auto& word : split_words(caption)) {
    auto it = std::find(shapes.begin(), shapes.end(), word);
    if (it != shapes.end()) return static_cast<size_t>(it - shapes.begin());
  }
  throw ParseError("shape_class_of: caption '" + caption + "' names no shape");
}

}  // namespace mug
