#include "mug/trainer.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <unordered_map>
#include <unordered_set>

namespace mug {

double TrainConfig::effective_base_lr() const {
  if (base_lr > 0.0) return base_lr;
  return std::max(1e-3, 1.5e-4 * static_cast<double>(batch_size) / 256.0);
}

size_t TrainConfig::effective_warmup() const {
  return warmup_steps > 0 ? warmup_steps : total_steps / 10;
}

void TrainConfig::validate() const {
  if (base_lr < 0.0) throw ConfigError("train config: base_lr must be >= 0");
  if (weight_decay < 0.0) throw ConfigError("train config: weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("train config: betas must lie in [0,1)");
  if (batch_size == 0) throw ConfigError("train config: batch_size must be positive");
  if (total_steps == 0) throw ConfigError("train config: total_steps must be positive");
  if (effective_warmup() > total_steps)
    throw ConfigError("train config: warmup_steps exceeds total_steps");
  if (lambda_v < 0.0 || lambda_l < 0.0)
    throw ConfigError("train config: loss weights must be >= 0");
  if (lambda_v + lambda_l <= 0.0)
    throw ConfigError("train config: at least one loss weight must be positive");
  if (gaussian_sigma <= 0.0) throw ConfigError("train config: gaussian_sigma must be positive");
}

double lr_at(size_t step, const TrainConfig& config) {
  const double base = config.effective_base_lr();
  const size_t warmup = config.effective_warmup();
  const size_t total = config.total_steps;
  if (step > total) throw ConfigError("lr_at: step beyond total_steps");
  if (warmup > 0 && step < warmup)
    return base * static_cast<double>(step) / static_cast<double>(warmup);
  if (total == warmup) return base;
  double progress =
      static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

OptimizerState make_optimizer_state(Model<float>& model) {
  OptimizerState state;
  for (auto& [name, t] : model.named_parameters()) {
    OptimizerState::Moments mo;
    mo.m.assign(t->numel(), 0.0f);
    mo.v.assign(t->numel(), 0.0f);
    state.moments.push_back(std::move(mo));
  }
  return state;
}

namespace {

bool decay_exempt(const std::string& name) {
  return name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta") ||
         name == "cls_token" || name == "decoder_v.mask_token";
}

}  // namespace

void adamw_step(Model<float>& model, const std::vector<Tensor<float>*>& touched,
                OptimizerState& state, double lr, const TrainConfig& config) {
  auto params = model.named_parameters();
  if (state.moments.size() != params.size())
    throw ConfigError("adamw_step: optimizer state does not match the model");
  std::unordered_set<const Tensor<float>*> touched_set(touched.begin(), touched.end());

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);

  for (size_t i = 0; i < params.size(); ++i) {
    auto& [name, param] = params[i];
    if (!touched_set.count(param)) continue;
    if (param->grad.size() != param->data.size())
      throw ConfigError("adamw_step: parameter '" + name + "' carries no gradient");
    auto& mo = state.moments[i];
    const bool decay = !decay_exempt(name) && config.weight_decay > 0.0;
    for (size_t j = 0; j < param->data.size(); ++j) {
      double g = static_cast<double>(param->grad[j]);
      if (!std::isfinite(g))
        throw VerifyError("adamw_step: non-finite gradient in parameter '" + name + "'");
      double m = config.beta1 * static_cast<double>(mo.m[j]) + (1.0 - config.beta1) * g;
      double v = config.beta2 * static_cast<double>(mo.v[j]) + (1.0 - config.beta2) * g * g;
      mo.m[j] = static_cast<float>(m);
      mo.v[j] = static_cast<float>(v);
      double theta = static_cast<double>(param->data[j]);
      if (decay) theta *= 1.0 - lr * config.weight_decay;
      theta -= lr * (m / bc1) / (std::sqrt(v / bc2) + config.adam_eps);
      param->data[j] = static_cast<float>(theta);
    }
  }
}

// -------------------------------------------------------------------- train

namespace {

std::string metrics_line(size_t step, const LossReport& r, double lr) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%zu\t%.9g\t%.9g\t%.9g\t%.9g", step, r.loss_v, r.loss_l,
                r.loss_joint, lr);
  return buf;
}

}  // namespace

TrainResult train(const TrainConfig& config, const std::vector<ImageSample>& corpus,
                  const ModelConfig& model_config) {
  config.validate();
  model_config.validate();
  if (corpus.empty()) throw ConfigError("train: empty corpus");
  for (const auto& s : corpus) {
    if (s.pixels.channels != model_config.channels || s.pixels.height != model_config.height ||
        s.pixels.width != model_config.width)
      throw ConfigError("train: sample '" + s.id + "' dims do not match the model config");
  }

  std::vector<std::string> captions;
  captions.reserve(corpus.size());
  for (const auto& s : corpus) captions.push_back(s.caption);
  Vocab vocab = build_vocab(captions);
  if (vocab.size() > model_config.vocab_size)
    throw ConfigError("train: corpus vocabulary (" + std::to_string(vocab.size()) +
                      ") exceeds model vocab_size (" + std::to_string(model_config.vocab_size) +
                      ")");

  const size_t n_patches = model_config.num_patches();
  const bool with_vision = config.lambda_v > 0.0;
  const bool with_text = config.lambda_l > 0.0;

  // Static per-sample inputs; recomputed per step only under crop augmentation.
  std::vector<PatchSequence> patch_cache;
  std::vector<TokenSequence> token_cache;
  size_t truncated_words = 0;
  for (const auto& s : corpus) {
    if (!config.use_crop_aug) patch_cache.push_back(patchify(s.pixels, model_config.patch_size));
    token_cache.push_back(
        encode_caption(s.caption, vocab, model_config.j_max, false, &truncated_words));
  }

  TrainResult result{init_model<float>(model_config, derive_seed(config.seed, "init")),
                     OptimizerState{},
                     std::move(vocab),
                     {},
                     {},
                     {}};
  Model<float>& model = result.model;
  result.opt_state = make_optimizer_state(model);

  auto emit_entropy = [&](size_t completed) {
    if (config.eval_every == 0) return;
    if (completed % config.eval_every != 0 && completed != config.total_steps) return;
    double bits = conditional_entropy_bound(model, corpus, result.vocab,
                                            derive_seed(config.seed, "entropy", completed));
    result.entropy_history.emplace_back(completed, bits);
  };
  emit_entropy(0);

  for (size_t step = 0; step < config.total_steps; ++step) {
    const double lr = lr_at(step, config);
    Rng batch_rng(derive_seed(config.seed, "batch", step));
    std::vector<size_t> batch(config.batch_size);
    for (auto& b : batch) b = batch_rng.index(corpus.size());

    Tape<float> tape;
    using V = Tape<float>::Val;
    std::vector<V> v_losses, t_losses;
    size_t tokens_supervised = 0, pixels_supervised = 0;

    for (size_t bi = 0; bi < batch.size(); ++bi) {
      const size_t si = batch[bi];
      const ImageSample& sample = corpus[si];

      PatchSequence patches;
      const PatchSequence* patches_ptr;
      if (config.use_crop_aug) {
        Image img = random_resized_crop(sample.pixels,
                                        derive_seed(config.seed, "crop", step, uint64_t{si}));
        patches = patchify(img, model_config.patch_size);
        patches_ptr = &patches;
      } else {
        patches_ptr = &patch_cache[si];
      }

      MaskSpec mask = sample_mask(n_patches, model_config.mask_ratio,
                                  derive_seed(config.seed, "mask", step, uint64_t{si}));
      V latent = encode(tape, model, apply_mask(*patches_ptr, mask));

      if (with_vision) {
        V pred = decode_image(tape, model, latent, mask);
        Tensor<float> target = config.norm_pix_targets
                                   ? normalize_patch_targets(patches_ptr->patches)
                                   : patches_ptr->patches;
        v_losses.push_back(reconstruction_loss(tape, pred, target, mask));
        pixels_supervised += mask.omega * model_config.patch_dim();
      }
      if (with_text) {
        auto aug = augment_caption(token_cache[si], result.vocab,
                                   derive_seed(config.seed, "text", step, uint64_t{si}));
        auto tf = shift_for_teacher_forcing(aug.input, aug.labels);
        size_t len = supervised_length(tf.loss_mask);
        std::vector<int32_t> input(tf.input.begin(), tf.input.begin() + static_cast<long>(len));
        std::vector<int32_t> labels(tf.labels.begin(), tf.labels.begin() + static_cast<long>(len));
        std::vector<uint8_t> sup(tf.loss_mask.begin(),
                                 tf.loss_mask.begin() + static_cast<long>(len));
        V logits = decode_text(tape, model, latent, input);
        t_losses.push_back(caption_loss(tape, logits, labels, sup));
        for (uint8_t s : sup) tokens_supervised += s ? 1 : 0;
      }
    }

    auto mean_of = [&](std::vector<V>& parts) {
      V acc = parts[0];
      for (size_t i = 1; i < parts.size(); ++i) acc = tape.add(acc, parts[i]);
      return tape.scale(acc, 1.0f / static_cast<float>(parts.size()));
    };
    V loss_v{}, loss_l{};
    double lv = 0.0, ll = 0.0;
    if (with_vision) {
      loss_v = mean_of(v_losses);
      lv = static_cast<double>(tape.scalar(loss_v));
    }
    if (with_text) {
      loss_l = mean_of(t_losses);
      ll = static_cast<double>(tape.scalar(loss_l));
    }
    LossReport report =
        make_loss_report(lv, ll, config.lambda_v, config.lambda_l, tokens_supervised,
                         pixels_supervised);
    if (!std::isfinite(report.loss_v) || !std::isfinite(report.loss_l) ||
        !std::isfinite(report.loss_joint))
      throw VerifyError("train: non-finite loss at step " + std::to_string(step) + " (loss_V=" +
                        fmt_float(report.loss_v) + ", loss_L=" + fmt_float(report.loss_l) + ")");

    V root{};
    if (with_vision && with_text)
      root = tape.add(tape.scale(loss_v, static_cast<float>(config.lambda_v)),
                      tape.scale(loss_l, static_cast<float>(config.lambda_l)));
    else if (with_vision)
      root = tape.scale(loss_v, static_cast<float>(config.lambda_v));
    else
      root = tape.scale(loss_l, static_cast<float>(config.lambda_l));

    std::vector<Tensor<float>*> touched;
    try {
      touched = tape.backward(root);
    } catch (const VerifyError& e) {
      throw VerifyError("train: step " + std::to_string(step) + ": " + e.what());
    }
    adamw_step(model, touched, result.opt_state, lr, config);
    for (Tensor<float>* t : touched) t->zero_grad();

    result.reports.push_back(report);
    result.metrics_lines.push_back(metrics_line(step, report, lr));
    emit_entropy(step + 1);
  }
  return result;
}

// --------------------------------------------------------------- checkpoint

namespace {

constexpr char kCkptMagic[4] = {'M', 'U', 'G', 'C'};
constexpr uint32_t kCkptVersion = 1;

void put_u32(std::string& buf, uint32_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
  buf.push_back(static_cast<char>((v >> 16) & 0xff));
  buf.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f32(std::string& buf, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(buf, bits);
}

struct Reader {
  const unsigned char* p;
  size_t size;
  size_t pos = 0;
  const std::string& path;

  void need(size_t n) const {
    if (pos + n > size)
      throw IoError("checkpoint: " + path + " ends unexpectedly");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = static_cast<uint32_t>(p[pos]) | (static_cast<uint32_t>(p[pos + 1]) << 8) |
                 (static_cast<uint32_t>(p[pos + 2]) << 16) |
                 (static_cast<uint32_t>(p[pos + 3]) << 24);
    pos += 4;
    return v;
  }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  uint8_t u8() {
    need(1);
    return p[pos++];
  }
  std::string str(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(p + pos), n);
    pos += n;
    return s;
  }
};

std::string config_block(const ModelConfig& c, const Vocab& vocab) {
  std::string s;
  auto kv = [&s](const std::string& k, const std::string& v) { s += k + "=" + v + "\n"; };
  kv("patch_size", std::to_string(c.patch_size));
  kv("channels", std::to_string(c.channels));
  kv("height", std::to_string(c.height));
  kv("width", std::to_string(c.width));
  kv("d_e", std::to_string(c.d_e));
  kv("n_e", std::to_string(c.n_e));
  kv("h_e", std::to_string(c.h_e));
  kv("d_v", std::to_string(c.d_v));
  kv("n_v", std::to_string(c.n_v));
  kv("d_t", std::to_string(c.d_t));
  kv("n_uni", std::to_string(c.n_uni));
  kv("n_multi", std::to_string(c.n_multi));
  kv("h_t", std::to_string(c.h_t));
  kv("vocab_size", std::to_string(c.vocab_size));
  kv("j_max", std::to_string(c.j_max));
  kv("mask_ratio", fmt_float(c.mask_ratio));
  std::string words;
  for (const auto& w : vocab.words()) {
    if (!words.empty()) words += ' ';
    words += w;
  }
  kv("vocab", words);
  return s;
}

void parse_config_block(const std::string& text, ModelConfig& config, Vocab& vocab) {
  std::map<std::string, std::string> kv;
  size_t start = 0;
  while (start < text.size()) {
    size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    start = end + 1;
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError("checkpoint: malformed config line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto take = [&kv](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw ParseError("checkpoint: config key '" + key + "' is missing");
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  auto take_num = [&take](const std::string& key) {
    return static_cast<size_t>(std::stoull(take(key)));
  };
  config.patch_size = take_num("patch_size");
  config.channels = take_num("channels");
  config.height = take_num("height");
  config.width = take_num("width");
  config.d_e = take_num("d_e");
  config.n_e = take_num("n_e");
  config.h_e = take_num("h_e");
  config.d_v = take_num("d_v");
  config.n_v = take_num("n_v");
  config.d_t = take_num("d_t");
  config.n_uni = take_num("n_uni");
  config.n_multi = take_num("n_multi");
  config.h_t = take_num("h_t");
  config.vocab_size = take_num("vocab_size");
  config.j_max = take_num("j_max");
  config.mask_ratio = std::stod(take("mask_ratio"));
  vocab = Vocab(split_words(take("vocab")));
  if (!kv.empty())
    throw ParseError("checkpoint: unknown config key '" + kv.begin()->first + "'");
}

void put_named_tensor(std::string& buf, const std::string& name,
                      const std::vector<size_t>& shape, const std::vector<float>& data) {
  put_u32(buf, static_cast<uint32_t>(name.size()));
  buf += name;
  put_u32(buf, static_cast<uint32_t>(shape.size()));
  for (size_t d : shape) put_u32(buf, static_cast<uint32_t>(d));
  for (float v : data) put_f32(buf, v);
}

}  // namespace

void save_checkpoint(const std::string& path, Model<float>& model, const Vocab& vocab,
                     const OptimizerState* opt_state) {
  std::string buf;
  buf.append(kCkptMagic, 4);
  put_u32(buf, kCkptVersion);
  std::string cfg = config_block(model.config, vocab);
  put_u32(buf, static_cast<uint32_t>(cfg.size()));
  buf += cfg;

  auto params = model.named_parameters();
  put_u32(buf, static_cast<uint32_t>(params.size()));
  for (auto& [name, t] : params) put_named_tensor(buf, name, t->shape, t->data);

  if (opt_state) {
    if (opt_state->moments.size() != params.size())
      throw ConfigError("save_checkpoint: optimizer state does not match the model");
    buf.push_back(1);
    put_u32(buf, static_cast<uint32_t>(opt_state->step));
    put_u32(buf, static_cast<uint32_t>(2 * params.size()));
    for (size_t i = 0; i < params.size(); ++i) {
      put_named_tensor(buf, "adam_m:" + params[i].first, params[i].second->shape,
                       opt_state->moments[i].m);
      put_named_tensor(buf, "adam_v:" + params[i].first, params[i].second->shape,
                       opt_state->moments[i].v);
    }
  } else {
    buf.push_back(0);
  }

  uint32_t crc = static_cast<uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
  put_u32(buf, crc);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_checkpoint: cannot write " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("save_checkpoint: short write to " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot read " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 13) throw IoError("load_checkpoint: " + path + " is too small");

  uint32_t stored_crc;
  {
    const auto* tail = reinterpret_cast<const unsigned char*>(buf.data()) + buf.size() - 4;
    stored_crc = static_cast<uint32_t>(tail[0]) | (static_cast<uint32_t>(tail[1]) << 8) |
                 (static_cast<uint32_t>(tail[2]) << 16) | (static_cast<uint32_t>(tail[3]) << 24);
  }
  uint32_t actual_crc = static_cast<uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size() - 4)));
  if (stored_crc != actual_crc)
    throw VerifyError("load_checkpoint: checksum mismatch in " + path);

  Reader r{reinterpret_cast<const unsigned char*>(buf.data()), buf.size() - 4, 0, path};
  if (r.str(4) != std::string(kCkptMagic, 4))
    throw IoError("load_checkpoint: " + path + " has wrong magic");
  uint32_t version = r.u32();
  if (version != kCkptVersion)
    throw IoError("load_checkpoint: unknown version " + std::to_string(version));

  ModelConfig config;
  Vocab vocab;
  parse_config_block(r.str(r.u32()), config, vocab);

  LoadedCheckpoint out{make_model_shell<float>(config), std::move(vocab), std::nullopt};
  auto params = out.model.named_parameters();
  std::unordered_map<std::string, Tensor<float>*> by_name;
  for (auto& [name, t] : params) by_name.emplace(name, t);

  auto read_tensor_into = [&r](const std::string& name, std::vector<float>& dst,
                               const std::vector<size_t>& expect_shape) {
    uint32_t ndim = r.u32();
    std::vector<size_t> shape(ndim);
    size_t numel = 1;
    for (auto& d : shape) {
      d = r.u32();
      numel *= d;
    }
    if (shape != expect_shape)
      throw VerifyError("load_checkpoint: parameter '" + name + "' has shape " +
                        shape_str(shape) + ", expected " + shape_str(expect_shape));
    dst.resize(numel);
    for (auto& v : dst) v = r.f32();
  };

  uint32_t count = r.u32();
  std::unordered_set<std::string> seen;
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u32());
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw VerifyError("load_checkpoint: unknown parameter '" + name + "' in " + path);
    if (!seen.insert(name).second)
      throw VerifyError("load_checkpoint: duplicate parameter '" + name + "'");
    read_tensor_into(name, it->second->data, it->second->shape);
  }
  for (auto& [name, t] : params)
    if (!seen.count(name))
      throw VerifyError("load_checkpoint: parameter '" + name + "' is missing from " + path);

  if (r.u8() == 1) {
    OptimizerState state;
    state.step = r.u32();
    state.moments.resize(params.size());
    uint32_t n_tensors = r.u32();
    if (n_tensors != 2 * params.size())
      throw VerifyError("load_checkpoint: optimizer section holds " + std::to_string(n_tensors) +
                        " tensors, expected " + std::to_string(2 * params.size()));
    for (uint32_t i = 0; i < n_tensors; ++i) {
      std::string name = r.str(r.u32());
      bool is_m = name.rfind("adam_m:", 0) == 0;
      bool is_v = name.rfind("adam_v:", 0) == 0;
      if (!is_m && !is_v)
        throw VerifyError("load_checkpoint: unexpected optimizer tensor '" + name + "'");
      std::string pname = name.substr(7);
      size_t pi = params.size();
      for (size_t j = 0; j < params.size(); ++j)
        if (params[j].first == pname) {
          pi = j;
          break;
        }
      if (pi == params.size())
        throw VerifyError("load_checkpoint: optimizer tensor for unknown parameter '" + pname +
                          "'");
      read_tensor_into(name, is_m ? state.moments[pi].m : state.moments[pi].v,
                       params[pi].second->shape);
    }
    out.opt_state = std::move(state);
  }
  if (r.pos != r.size)
    throw IoError("load_checkpoint: " + path + " holds trailing bytes");
  return out;
}

}  // namespace mug
