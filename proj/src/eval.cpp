#include "mug/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "mug/data.hpp"
#include "mug/objectives.hpp"

namespace mug {

const char* probe_feature_name(ProbeFeature f) {
  switch (f) {
    case ProbeFeature::kClassToken:
      return "class-token";
    case ProbeFeature::kMeanPooled:
      return "mean-pooled";
    case ProbeFeature::kRawPixels:
      return "raw-pixels";
  }
  return "?";
}

namespace {

MaskSpec mask_for(size_t n_patches, double ratio, uint64_t seed) {
  if (ratio == 0.0) return bypass_mask(n_patches);
  return sample_mask(n_patches, ratio, seed);
}

/// Forward pass to full patch predictions for one sample and mask.
Tensor<float> predict_patches(Model<float>& model, const ImageSample& sample,
                              const MaskSpec& mask, PatchSequence& patches_out) {
  patches_out = patchify(sample.pixels, model.config.patch_size);
  Tape<float> tape;
  auto latent = encode(tape, model, apply_mask(patches_out, mask));
  auto pred = decode_image(tape, model, latent, mask);
  Tensor<float> out{tape.shape(pred), tape.value(pred)};
  return out;
}

}  // namespace

// -------------------------------------------------------------------- probe

ProbeResult linear_probe(const Tensor<float>& features, const std::vector<size_t>& labels,
                         uint64_t split_seed, ProbeFeature source) {
  const size_t m = features.rows(), d = features.cols();
  if (labels.size() != m)
    throw ShapeError("linear_probe: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(m) + " feature rows");
  size_t classes = 0;
  for (size_t l : labels) classes = std::max(classes, l + 1);
  {
    std::vector<uint8_t> present(classes, 0);
    for (size_t l : labels) present[l] = 1;
    size_t distinct = 0;
    for (uint8_t p : present) distinct += p;
    if (distinct < 2) throw ConfigError("linear_probe: labels contain a single class");
  }
  if (m < 2 * classes)
    throw ConfigError("linear_probe: need at least two samples per class on average");

  std::vector<size_t> order(m);
  for (size_t i = 0; i < m; ++i) order[i] = i;
  Rng rng(derive_seed(split_seed, "probe-split"));
  rng.shuffle(order);
  const size_t n_train = m / 2;
  std::vector<size_t> train(order.begin(), order.begin() + static_cast<long>(n_train));
  std::vector<size_t> test(order.begin() + static_cast<long>(n_train), order.end());

  // Standardize with train-split statistics.
  std::vector<double> mean(d, 0.0), inv_std(d, 0.0);
  for (size_t i : train)
    for (size_t j = 0; j < d; ++j) mean[j] += features.at(i, j);
  for (size_t j = 0; j < d; ++j) mean[j] /= static_cast<double>(n_train);
  for (size_t i : train)
    for (size_t j = 0; j < d; ++j) {
      double dev = features.at(i, j) - mean[j];
      inv_std[j] += dev * dev;
    }
  for (size_t j = 0; j < d; ++j)
    inv_std[j] = 1.0 / (std::sqrt(inv_std[j] / static_cast<double>(n_train)) + 1e-8);

  auto feat = [&](size_t i, size_t j) {
    return (static_cast<double>(features.at(i, j)) - mean[j]) * inv_std[j];
  };

  const size_t iters = 600;
  const double lr = 0.5;
  std::vector<double> w(d * classes, 0.0), b(classes, 0.0);
  std::vector<double> logits(classes), probs(classes);
  std::vector<double> gw(d * classes), gb(classes);
  for (size_t it = 0; it < iters; ++it) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (size_t i : train) {
      for (size_t k = 0; k < classes; ++k) {
        double z = b[k];
        for (size_t j = 0; j < d; ++j) z += feat(i, j) * w[j * classes + k];
        logits[k] = z;
      }
      double mx = logits[0];
      for (size_t k = 1; k < classes; ++k) mx = std::max(mx, logits[k]);
      double sum = 0.0;
      for (size_t k = 0; k < classes; ++k) {
        probs[k] = std::exp(logits[k] - mx);
        sum += probs[k];
      }
      for (size_t k = 0; k < classes; ++k) {
        double g = probs[k] / sum - (k == labels[i] ? 1.0 : 0.0);
        gb[k] += g;
        for (size_t j = 0; j < d; ++j) gw[j * classes + k] += g * feat(i, j);
      }
    }
    double scale = lr / static_cast<double>(n_train);
    for (size_t j = 0; j < d * classes; ++j) w[j] -= scale * gw[j];
    for (size_t k = 0; k < classes; ++k) b[k] -= scale * gb[k];
  }

  auto accuracy = [&](const std::vector<size_t>& split) {
    size_t correct = 0;
    for (size_t i : split) {
      size_t best = 0;
      double best_z = -1e300;
      for (size_t k = 0; k < classes; ++k) {
        double z = b[k];
        for (size_t j = 0; j < d; ++j) z += feat(i, j) * w[j * classes + k];
        if (z > best_z) {
          best_z = z;
          best = k;
        }
      }
      correct += best == labels[i] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(split.size());
  };

  ProbeResult res;
  res.train_accuracy = accuracy(train);
  res.test_accuracy = accuracy(test);
  res.classes = classes;
  res.source = source;
  return res;
}

Tensor<float> extract_features(Model<float>& model, const std::vector<ImageSample>& samples,
                               ProbeFeature source) {
  if (samples.empty()) throw ConfigError("extract_features: no samples");
  const ModelConfig& cfg = model.config;
  if (source == ProbeFeature::kRawPixels) {
    size_t d = samples[0].pixels.numel();
    Tensor<float> out = Tensor<float>::zeros({samples.size(), d});
    for (size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].pixels.numel() != d)
        throw ShapeError("extract_features: inconsistent image dims in the corpus");
      std::copy(samples[i].pixels.data.begin(), samples[i].pixels.data.end(),
                out.data.data() + i * d);
    }
    return out;
  }

  const size_t n = cfg.num_patches();
  Tensor<float> out = Tensor<float>::zeros({samples.size(), cfg.d_e});
  MaskSpec bypass = bypass_mask(n);
  for (size_t i = 0; i < samples.size(); ++i) {
    Tape<float> tape;
    auto latent = encode(tape, model, apply_mask(patchify(samples[i].pixels, cfg.patch_size),
                                                 bypass));
    const auto& lv = tape.value(latent);
    float* dst = out.data.data() + i * cfg.d_e;
    if (source == ProbeFeature::kClassToken) {
      std::copy_n(lv.data(), cfg.d_e, dst);
    } else {
      for (size_t r = 1; r <= n; ++r)
        for (size_t j = 0; j < cfg.d_e; ++j) dst[j] += lv[r * cfg.d_e + j];
      for (size_t j = 0; j < cfg.d_e; ++j) dst[j] /= static_cast<float>(n);
    }
  }
  return out;
}

// ----------------------------------------------------------------- greedy

std::vector<int32_t> greedy_decode(
    const std::function<std::vector<float>(const std::vector<int32_t>&)>& next_logits,
    size_t vocab_size, size_t max_len, std::vector<int32_t> ids) {
  for (size_t generated = 0; generated < max_len; ++generated) {
    std::vector<float> logits = next_logits(ids);
    if (logits.size() != vocab_size)
      throw ShapeError("greedy_decode: next_logits returned " + std::to_string(logits.size()) +
                       " values, expected " + std::to_string(vocab_size));
    size_t best = 0;
    for (size_t k = 1; k < vocab_size; ++k)
      if (logits[k] > logits[best]) best = k;  // ties keep the lowest id
    ids.push_back(static_cast<int32_t>(best));
    if (static_cast<int32_t>(best) == Vocab::kEos) break;
  }
  return ids;
}

std::string greedy_caption(Model<float>& model, const Vocab& vocab, const ImageSample& sample,
                           double mask_ratio, uint64_t seed, size_t max_len,
                           const std::string& prompt) {
  const ModelConfig& cfg = model.config;
  if (max_len > cfg.j_max)
    throw ConfigError("greedy_caption: max_len " + std::to_string(max_len) + " exceeds j_max " +
                      std::to_string(cfg.j_max));
  MaskSpec mask = mask_for(cfg.num_patches(), mask_ratio,
                           derive_seed(seed, "caption-mask", sample.id));
  Tape<float> tape;
  auto latent = encode(tape, model, apply_mask(patchify(sample.pixels, cfg.patch_size), mask));

  std::vector<int32_t> ids{Vocab::kBos};
  for (const auto& w : split_words(prompt))
    ids.push_back(vocab.contains(w) ? vocab.id(w) : Vocab::kMaskWord);

  auto next_logits = [&](const std::vector<int32_t>& so_far) {
    if (so_far.size() >= cfg.j_max)
      return std::vector<float>(cfg.vocab_size, 0.0f);  // length exhausted; caller stops via max_len
    auto logits = decode_text(tape, model, latent, so_far);
    const auto& lv = tape.value(logits);
    size_t last = so_far.size() - 1;
    return std::vector<float>(lv.begin() + static_cast<long>(last * cfg.vocab_size),
                              lv.begin() + static_cast<long>((last + 1) * cfg.vocab_size));
  };
  size_t budget = std::min(max_len, cfg.j_max - ids.size());
  ids = greedy_decode(next_logits, cfg.vocab_size, budget, std::move(ids));
  return detokenize(ids, vocab);
}

// ---------------------------------------------------------- reconstruction

void reconstruct_dump(Model<float>& model, const ImageSample& sample, double mask_ratio,
                      uint64_t seed, const std::string& out_dir) {
  const ModelConfig& cfg = model.config;
  MaskSpec mask = mask_for(cfg.num_patches(), mask_ratio,
                           derive_seed(seed, "recon-mask", sample.id));
  PatchSequence truth;
  Tensor<float> pred = predict_patches(model, sample, mask, truth);
  const size_t p = cfg.patch_dim();

  PatchSequence masked = truth;
  PatchSequence composite = truth;
  for (size_t i = 0; i < mask.n(); ++i) {
    if (mask.keep[i]) continue;
    for (size_t j = 0; j < p; ++j) {
      masked.patches.data[i * p + j] = 0.0f;
      composite.patches.data[i * p + j] = std::clamp(pred.data[i * p + j], 0.0f, 1.0f);
    }
  }

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("reconstruct_dump: cannot create directory " + out_dir);
  auto path = [&out_dir](const char* name) {
    return (std::filesystem::path(out_dir) / name).string();
  };
  write_image(path("masked.mugi"), unpatchify(masked, cfg.channels, cfg.height, cfg.width));
  write_image(path("reconstruction.mugi"),
              unpatchify(composite, cfg.channels, cfg.height, cfg.width));
  write_image(path("ground_truth.mugi"), sample.pixels);
}

double masked_region_mse(Model<float>& model, const ImageSample& sample, double mask_ratio,
                         uint64_t seed) {
  const ModelConfig& cfg = model.config;
  MaskSpec mask = mask_for(cfg.num_patches(), mask_ratio,
                           derive_seed(seed, "recon-mask", sample.id));
  if (mask.omega == 0) throw ConfigError("masked_region_mse: nothing is masked");
  PatchSequence truth;
  Tensor<float> pred = predict_patches(model, sample, mask, truth);
  const size_t p = cfg.patch_dim();
  double sum = 0.0;
  for (uint32_t row : mask.masked_indices())
    for (size_t j = 0; j < p; ++j) {
      double d = static_cast<double>(pred.data[row * p + j]) -
                 static_cast<double>(truth.patches.data[row * p + j]);
      sum += d * d;
    }
  return sum / (static_cast<double>(mask.omega) * static_cast<double>(p));
}

GradCheckResult joint_loss_grad_check(const ModelConfig& config, uint64_t seed,
                                      const GradCheckOptions& opts) {
  SynthOptions synth;
  synth.channels = config.channels;
  synth.canvas = config.height;
  if (config.height != config.width)
    throw ConfigError("joint_loss_grad_check: expects a square canvas");
  auto samples = generate_synthetic_samples(2, derive_seed(seed, "gradcheck-data"), synth);
  std::vector<std::string> captions;
  for (const auto& s : samples) captions.push_back(s.caption);
  Vocab vocab = build_vocab(captions);
  if (vocab.size() > config.vocab_size)
    throw ConfigError("joint_loss_grad_check: vocab exceeds the model's vocab_size");

  Model<double> model = init_model<double>(config, derive_seed(seed, "gradcheck-init"));
  const double lambda_v = 1.0, lambda_l = 0.1;

  struct Prepared {
    Tensor<double> target;
    VisiblePatches visible;
    MaskSpec mask;
    std::vector<int32_t> input, labels;
    std::vector<uint8_t> sup;
  };
  std::vector<Prepared> prep;
  for (size_t i = 0; i < samples.size(); ++i) {
    Prepared p;
    auto patches = patchify(samples[i].pixels, config.patch_size);
    p.target = Tensor<double>{patches.patches.shape,
                              std::vector<double>(patches.patches.data.begin(),
                                                  patches.patches.data.end())};
    p.mask = sample_mask(config.num_patches(), config.mask_ratio,
                         derive_seed(seed, "gradcheck-mask", uint64_t{i}));
    auto vis = apply_mask(patches, p.mask);
    p.visible = std::move(vis);
    auto tokens = encode_caption(samples[i].caption, vocab, config.j_max);
    auto tf = shift_for_teacher_forcing(tokens);
    size_t len = supervised_length(tf.loss_mask);
    p.input.assign(tf.input.begin(), tf.input.begin() + static_cast<long>(len));
    p.labels.assign(tf.labels.begin(), tf.labels.begin() + static_cast<long>(len));
    p.sup.assign(len, 1);
    prep.push_back(std::move(p));
  }

  auto loss_fn = [&](bool with_grad) -> double {
    Tape<double> tape;
    using V = Tape<double>::Val;
    std::vector<V> lv, ll;
    for (const auto& p : prep) {
      V patches = tape.constant_cast(p.visible.patches);
      V latent = encode(tape, model, patches, p.visible.indices);
      lv.push_back(
          reconstruction_loss(tape, decode_image(tape, model, latent, p.mask), p.target, p.mask));
      ll.push_back(caption_loss(tape, decode_text(tape, model, latent, p.input), p.labels, p.sup));
    }
    auto mean_of = [&](std::vector<V>& parts) {
      V acc = parts[0];
      for (size_t i = 1; i < parts.size(); ++i) acc = tape.add(acc, parts[i]);
      return tape.scale(acc, 1.0 / static_cast<double>(parts.size()));
    };
    V root = tape.add(tape.scale(mean_of(lv), lambda_v), tape.scale(mean_of(ll), lambda_l));
    double loss = tape.scalar(root);
    if (with_grad) tape.backward(root);
    return loss;
  };

  return grad_check<double>(loss_fn, model.named_parameters(), opts);
}

void apply_config_kv(const std::string& key, const std::string& value, ModelConfig& mc,
                     TrainConfig& tc) {
  auto num = [&value, &key]() -> size_t {
    try {
      return static_cast<size_t>(std::stoull(value));
    } catch (...) {
      throw ParseError("config: key '" + key + "' needs an integer, got '" + value + "'");
    }
  };
  auto real = [&value, &key]() -> double {
    try {
      return std::stod(value);
    } catch (...) {
      throw ParseError("config: key '" + key + "' needs a number, got '" + value + "'");
    }
  };
  auto flag = [&value, &key]() -> bool {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ParseError("config: key '" + key + "' needs true/false, got '" + value + "'");
  };
  if (key == "patch_size") mc.patch_size = num();
  else if (key == "channels") mc.channels = num();
  else if (key == "height") mc.height = num();
  else if (key == "width") mc.width = num();
  else if (key == "d_e") mc.d_e = num();
  else if (key == "n_e") mc.n_e = num();
  else if (key == "h_e") mc.h_e = num();
  else if (key == "d_v") mc.d_v = num();
  else if (key == "n_v") mc.n_v = num();
  else if (key == "d_t") mc.d_t = num();
  else if (key == "n_uni") mc.n_uni = num();
  else if (key == "n_multi") mc.n_multi = num();
  else if (key == "h_t") mc.h_t = num();
  else if (key == "vocab_size") mc.vocab_size = num();
  else if (key == "j_max") mc.j_max = num();
  else if (key == "mask_ratio") mc.mask_ratio = real();
  else if (key == "base_lr") tc.base_lr = real();
  else if (key == "weight_decay") tc.weight_decay = real();
  else if (key == "beta1") tc.beta1 = real();
  else if (key == "beta2") tc.beta2 = real();
  else if (key == "adam_eps") tc.adam_eps = real();
  else if (key == "batch_size") tc.batch_size = num();
  else if (key == "warmup_steps") tc.warmup_steps = num();
  else if (key == "total_steps") tc.total_steps = num();
  else if (key == "seed") tc.seed = static_cast<uint64_t>(num());
  else if (key == "lambda_v") tc.lambda_v = real();
  else if (key == "lambda_l") tc.lambda_l = real();
  else if (key == "gaussian_sigma") tc.gaussian_sigma = real();
  else if (key == "eval_every") tc.eval_every = num();
  else if (key == "norm_pix_targets") tc.norm_pix_targets = flag();
  else if (key == "use_crop_aug") tc.use_crop_aug = flag();
  else throw ParseError("config: unknown key '" + key + "'");
}

void load_config_file(const std::string& path, ModelConfig& mc, TrainConfig& tc) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("config: cannot read " + path);
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError("config: line " + std::to_string(line_no) + " of " + path +
                       " is not key=value");
    apply_config_kv(line.substr(0, eq), line.substr(eq + 1), mc, tc);
  }
}

double caption_token_accuracy(Model<float>& model, const Vocab& vocab,
                              const std::vector<ImageSample>& samples, double mask_ratio,
                              uint64_t seed) {
  if (samples.empty()) throw ConfigError("caption_token_accuracy: no samples");
  const ModelConfig& cfg = model.config;
  size_t correct = 0, total = 0;
  for (size_t i = 0; i < samples.size(); ++i) {
    MaskSpec mask = mask_for(cfg.num_patches(), mask_ratio,
                             derive_seed(seed, "acc-mask", uint64_t{i}));
    Tape<float> tape;
    auto latent =
        encode(tape, model, apply_mask(patchify(samples[i].pixels, cfg.patch_size), mask));
    auto tokens = encode_caption(samples[i].caption, vocab, cfg.j_max);
    auto tf = shift_for_teacher_forcing(tokens);
    size_t len = supervised_length(tf.loss_mask);
    std::vector<int32_t> input(tf.input.begin(), tf.input.begin() + static_cast<long>(len));
    auto logits = decode_text(tape, model, latent, input);
    const auto& lv = tape.value(logits);
    for (size_t r = 0; r < len; ++r) {
      size_t best = 0;
      for (size_t k = 1; k < cfg.vocab_size; ++k)
        if (lv[r * cfg.vocab_size + k] > lv[r * cfg.vocab_size + best]) best = k;
      correct += static_cast<int32_t>(best) == tf.labels[r] ? 1 : 0;
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace mug
