#include "mug/model.hpp"

#include <algorithm>
#include <cmath>

namespace mug {

void ModelConfig::validate() const {
  auto positive = [](size_t v, const char* what) {
    if (v == 0) throw ConfigError(std::string("model config: ") + what + " must be positive");
  };
  positive(patch_size, "patch_size");
  positive(channels, "channels");
  positive(height, "height");
  positive(width, "width");
  positive(d_e, "d_e");
  positive(n_e, "n_e");
  positive(h_e, "h_e");
  positive(d_v, "d_v");
  positive(n_v, "n_v");
  positive(d_t, "d_t");
  positive(h_t, "h_t");
  positive(vocab_size, "vocab_size");
  if (height % patch_size != 0 || width % patch_size != 0)
    throw ConfigError("model config: image " + std::to_string(height) + "x" +
                      std::to_string(width) + " is not divisible by patch size " +
                      std::to_string(patch_size));
  if (d_e % h_e != 0 || d_v % h_e != 0)
    throw ConfigError("model config: d_e/d_v must be divisible by h_e");
  if (d_t % h_t != 0) throw ConfigError("model config: d_t must be divisible by h_t");
  if (d_e % 2 != 0 || d_v % 2 != 0 || d_t % 2 != 0)
    throw ConfigError("model config: widths must be even for sinusoidal positions");
  if (n_uni < 1 || n_multi < 1)
    throw ConfigError("model config: joint mode needs n_uni >= 1 and n_multi >= 1");
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
    throw ConfigError("model config: mask_ratio must lie in (0,1)");
  if (j_max < 2) throw ConfigError("model config: j_max must be at least 2");
  if (vocab_size <= static_cast<size_t>(Vocab::kNumSpecials))
    throw ConfigError("model config: vocab_size must exceed the reserved specials");
}

template <typename T>
Tensor<T> sinusoid_table(size_t positions, size_t dim) {
  Tensor<T> t = Tensor<T>::zeros({positions, dim});
  for (size_t pos = 0; pos < positions; ++pos) {
    for (size_t i = 0; i < dim / 2; ++i) {
      double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
      double angle = static_cast<double>(pos) * freq;
      t.data[pos * dim + 2 * i] = static_cast<T>(std::sin(angle));
      t.data[pos * dim + 2 * i + 1] = static_cast<T>(std::cos(angle));
    }
  }
  return t;
}

namespace {

template <typename T>
void alloc_linear(LinearParams<T>& p, size_t in, size_t out) {
  p.weight = Tensor<T>::zeros({in, out});
  p.bias = Tensor<T>::zeros({out});
}

template <typename T>
void alloc_norm(NormParams<T>& p, size_t dim) {
  p.gamma = Tensor<T>::zeros({dim});
  p.beta = Tensor<T>::zeros({dim});
}

template <typename T>
void alloc_attn(AttnParams<T>& p, size_t q_in, size_t kv_in, size_t inner, size_t out) {
  alloc_linear(p.q, q_in, inner);
  alloc_linear(p.k, kv_in, inner);
  alloc_linear(p.v, kv_in, inner);
  alloc_linear(p.o, inner, out);
}

template <typename T>
void alloc_self_block(SelfBlockParams<T>& b, size_t dim) {
  alloc_norm(b.ln1, dim);
  alloc_attn(b.attn, dim, dim, dim, dim);
  alloc_norm(b.ln2, dim);
  alloc_linear(b.fc1, dim, 4 * dim);
  alloc_linear(b.fc2, 4 * dim, dim);
}

template <typename T>
void alloc_cross_block(CrossBlockParams<T>& b, size_t dim, size_t mem_dim) {
  alloc_norm(b.ln_self, dim);
  alloc_attn(b.self_attn, dim, dim, dim, dim);
  alloc_norm(b.ln_cross, dim);
  alloc_attn(b.cross_attn, dim, mem_dim, dim, dim);
  alloc_norm(b.ln_mlp, dim);
  alloc_linear(b.fc1, dim, 4 * dim);
  alloc_linear(b.fc2, 4 * dim, dim);
}

template <typename T>
struct ParamRegistry {
  std::vector<std::pair<std::string, Tensor<T>*>> out;

  void add(const std::string& name, Tensor<T>& t) {
    t.name = name;
    t.requires_grad = true;
    out.emplace_back(name, &t);
  }
  void add(const std::string& prefix, LinearParams<T>& p) {
    add(prefix + ".weight", p.weight);
    add(prefix + ".bias", p.bias);
  }
  void add(const std::string& prefix, NormParams<T>& p) {
    add(prefix + ".gamma", p.gamma);
    add(prefix + ".beta", p.beta);
  }
  void add(const std::string& prefix, AttnParams<T>& p) {
    add(prefix + ".q", p.q);
    add(prefix + ".k", p.k);
    add(prefix + ".v", p.v);
    add(prefix + ".o", p.o);
  }
  void add(const std::string& prefix, SelfBlockParams<T>& b) {
    add(prefix + ".ln1", b.ln1);
    add(prefix + ".attn", b.attn);
    add(prefix + ".ln2", b.ln2);
    add(prefix + ".fc1", b.fc1);
    add(prefix + ".fc2", b.fc2);
  }
  void add(const std::string& prefix, CrossBlockParams<T>& b) {
    add(prefix + ".ln_self", b.ln_self);
    add(prefix + ".self", b.self_attn);
    add(prefix + ".ln_cross", b.ln_cross);
    add(prefix + ".cross", b.cross_attn);
    add(prefix + ".ln_mlp", b.ln_mlp);
    add(prefix + ".fc1", b.fc1);
    add(prefix + ".fc2", b.fc2);
  }
};

}  // namespace

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> Model<T>::named_parameters() {
  ParamRegistry<T> reg;
  reg.add("patch_embed", patch_embed);
  reg.add("cls_token", cls_token);
  for (size_t i = 0; i < encoder_blocks.size(); ++i)
    reg.add("encoder.block" + std::to_string(i), encoder_blocks[i]);
  reg.add("encoder.norm", encoder_norm);
  reg.add("decoder_v.embed", dec_v_embed);
  reg.add("decoder_v.mask_token", mask_token);
  for (size_t i = 0; i < dec_v_blocks.size(); ++i)
    reg.add("decoder_v.block" + std::to_string(i), dec_v_blocks[i]);
  reg.add("decoder_v.norm", dec_v_norm);
  reg.add("decoder_v.head", pixel_head);
  reg.add("decoder_t.tok_embed", token_embed);
  for (size_t i = 0; i < dec_t_uni_blocks.size(); ++i)
    reg.add("decoder_t.uni" + std::to_string(i), dec_t_uni_blocks[i]);
  for (size_t i = 0; i < dec_t_multi_blocks.size(); ++i)
    reg.add("decoder_t.multi" + std::to_string(i), dec_t_multi_blocks[i]);
  reg.add("decoder_t.norm", dec_t_norm);
  reg.add("decoder_t.head", vocab_head);
  return reg.out;
}

template <typename T>
size_t Model<T>::parameter_count() {
  size_t n = 0;
  for (auto& [name, t] : named_parameters()) n += t->numel();
  return n;
}

template <typename T>
Model<T> make_model_shell(const ModelConfig& config) {
  config.validate();
  Model<T> m;
  m.config = config;
  const size_t p = config.patch_dim();
  alloc_linear(m.patch_embed, p, config.d_e);
  m.cls_token = Tensor<T>::zeros({1, config.d_e});
  m.encoder_blocks.resize(config.n_e);
  for (auto& b : m.encoder_blocks) alloc_self_block(b, config.d_e);
  alloc_norm(m.encoder_norm, config.d_e);

  alloc_linear(m.dec_v_embed, config.d_e, config.d_v);
  m.mask_token = Tensor<T>::zeros({1, config.d_v});
  m.dec_v_blocks.resize(config.n_v);
  for (auto& b : m.dec_v_blocks) alloc_self_block(b, config.d_v);
  alloc_norm(m.dec_v_norm, config.d_v);
  alloc_linear(m.pixel_head, config.d_v, p);

  m.token_embed = Tensor<T>::zeros({config.vocab_size, config.d_t});
  m.dec_t_uni_blocks.resize(config.n_uni);
  for (auto& b : m.dec_t_uni_blocks) alloc_self_block(b, config.d_t);
  m.dec_t_multi_blocks.resize(config.n_multi);
  for (auto& b : m.dec_t_multi_blocks) alloc_cross_block(b, config.d_t, config.d_e);
  alloc_norm(m.dec_t_norm, config.d_t);
  alloc_linear(m.vocab_head, config.d_t, config.vocab_size);

  m.named_parameters();  // assign names, mark trainable

  m.enc_pos = sinusoid_table<T>(config.num_patches() + 1, config.d_e);
  m.dec_v_pos = sinusoid_table<T>(config.num_patches(), config.d_v);
  m.dec_t_pos = sinusoid_table<T>(config.j_max, config.d_t);
  return m;
}

template <typename T>
Model<T> init_model(const ModelConfig& config, uint64_t seed) {
  Model<T> m = make_model_shell<T>(config);
  Rng rng(derive_seed(seed, "model-init"));
  for (auto& [name, t] : m.named_parameters()) {
    bool is_weight = name.ends_with(".weight") || name == "cls_token" ||
                     name == "decoder_v.mask_token";
    bool is_gain = name.ends_with(".gamma");
    if (is_weight) {
      for (auto& v : t->data) v = static_cast<T>(rng.trunc_normal(0.02));
    } else if (is_gain) {
      std::fill(t->data.begin(), t->data.end(), T(1));
    }
    // biases and norm shifts stay zero
  }
  return m;
}

// ---------------------------------------------------------------- forward

namespace {

template <typename T>
using Val = typename Tape<T>::Val;

template <typename T>
Val<T> linear(Tape<T>& g, Val<T> x, LinearParams<T>& p) {
  return g.add_bias_rows(g.matmul(x, g.leaf(p.weight)), g.leaf(p.bias));
}

/// Multi-head attention; `mask`, when present, constrains which keys each
/// query row may read.
template <typename T>
Val<T> attention(Tape<T>& g, Val<T> query_in, Val<T> kv_in, AttnParams<T>& p, size_t heads,
                 const BoolMask* mask) {
  Val<T> q = linear(g, query_in, p.q);
  Val<T> k = linear(g, kv_in, p.k);
  Val<T> v = linear(g, kv_in, p.v);
  size_t inner = g.shape(q)[1];
  size_t dh = inner / heads;
  T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<Val<T>> ctx;
  ctx.reserve(heads);
  for (size_t h = 0; h < heads; ++h) {
    Val<T> qh = g.slice_cols(q, h * dh, dh);
    Val<T> kh = g.slice_cols(k, h * dh, dh);
    Val<T> vh = g.slice_cols(v, h * dh, dh);
    Val<T> scores = g.scale(g.matmul(qh, g.transpose(kh)), inv_sqrt);
    Val<T> w = mask ? g.softmax_rows_masked(scores, *mask) : g.softmax_rows(scores);
    ctx.push_back(g.matmul(w, vh));
  }
  return linear(g, g.concat_cols(ctx), p.o);
}

template <typename T>
Val<T> norm(Tape<T>& g, Val<T> x, NormParams<T>& p) {
  return g.layer_norm_rows(x, g.leaf(p.gamma), g.leaf(p.beta), static_cast<T>(1e-6));
}

template <typename T>
Val<T> mlp(Tape<T>& g, Val<T> x, LinearParams<T>& fc1, LinearParams<T>& fc2) {
  return linear(g, g.gelu(linear(g, x, fc1)), fc2);
}

template <typename T>
Val<T> self_block(Tape<T>& g, Val<T> x, SelfBlockParams<T>& b, size_t heads,
                  const BoolMask* mask) {
  Val<T> h = norm(g, x, b.ln1);
  x = g.add(x, attention(g, h, h, b.attn, heads, mask));
  x = g.add(x, mlp(g, norm(g, x, b.ln2), b.fc1, b.fc2));
  return x;
}

template <typename T>
Val<T> cross_block(Tape<T>& g, Val<T> x, Val<T> memory, CrossBlockParams<T>& b, size_t heads,
                   const BoolMask& causal) {
  Val<T> h = norm(g, x, b.ln_self);
  x = g.add(x, attention(g, h, h, b.self_attn, heads, &causal));
  x = g.add(x, attention(g, norm(g, x, b.ln_cross), memory, b.cross_attn, heads, nullptr));
  x = g.add(x, mlp(g, norm(g, x, b.ln_mlp), b.fc1, b.fc2));
  return x;
}

}  // namespace

template <typename T>
typename Tape<T>::Val encode(Tape<T>& g, Model<T>& m, typename Tape<T>::Val visible,
                             const std::vector<uint32_t>& visible_indices) {
  const ModelConfig& cfg = m.config;
  const size_t n = cfg.num_patches();
  const auto& vshape = g.shape(visible);
  if (vshape.size() != 2 || vshape[1] != cfg.patch_dim() || vshape[0] != visible_indices.size())
    throw ShapeError("encode: visible patches " + shape_str(vshape) + " do not match " +
                     std::to_string(visible_indices.size()) + " indices of dim " +
                     std::to_string(cfg.patch_dim()));
  for (size_t i = 0; i < visible_indices.size(); ++i) {
    if (visible_indices[i] >= n)
      throw ShapeError("encode: patch index " + std::to_string(visible_indices[i]) +
                       " out of range [0," + std::to_string(n) + ")");
    if (i > 0 && visible_indices[i] <= visible_indices[i - 1])
      throw ShapeError("encode: visible indices must be strictly ascending");
  }

  Val<T> x = linear(g, visible, m.patch_embed);
  // positions are looked up at the original patch indices
  Tensor<T> pos = Tensor<T>::zeros({visible_indices.size(), cfg.d_e});
  for (size_t r = 0; r < visible_indices.size(); ++r)
    std::copy_n(m.enc_pos.data.data() + visible_indices[r] * cfg.d_e, cfg.d_e,
                pos.data.data() + r * cfg.d_e);
  x = g.add(x, g.constant(pos));

  Tensor<T> cls_pos = Tensor<T>::zeros({1, cfg.d_e});
  std::copy_n(m.enc_pos.data.data() + n * cfg.d_e, cfg.d_e, cls_pos.data.data());
  Val<T> cls = g.add(g.leaf(m.cls_token), g.constant(cls_pos));
  x = g.concat_rows(cls, x);

  for (auto& b : m.encoder_blocks) x = self_block(g, x, b, cfg.h_e, nullptr);
  return norm(g, x, m.encoder_norm);
}

template <typename T>
typename Tape<T>::Val encode(Tape<T>& g, Model<T>& m, const VisiblePatches& visible) {
  return encode(g, m, g.constant(visible.patches.shape,
                                 std::vector<T>(visible.patches.data.begin(),
                                                visible.patches.data.end())),
                visible.indices);
}

template <typename T>
typename Tape<T>::Val decode_image(Tape<T>& g, Model<T>& m, typename Tape<T>::Val latent,
                                   const MaskSpec& mask) {
  const ModelConfig& cfg = m.config;
  const size_t n = cfg.num_patches();
  if (mask.n() != n)
    throw ShapeError("decode_image: mask of length " + std::to_string(mask.n()) +
                     " does not match " + std::to_string(n) + " patches");
  const size_t n_vis = n - mask.omega;
  if (g.shape(latent)[0] != n_vis + 1)
    throw ShapeError("decode_image: latent has " + std::to_string(g.shape(latent)[0]) +
                     " rows, expected " + std::to_string(n_vis + 1));

  std::vector<uint32_t> patch_rows(n_vis);
  for (uint32_t i = 0; i < n_vis; ++i) patch_rows[i] = i + 1;  // drop the class token row
  Val<T> x = linear(g, g.index_rows(latent, patch_rows), m.dec_v_embed);

  // visible rows first, then one mask token per hidden slot; a row gather
  // restores raster order
  Val<T> stacked = x;
  if (mask.omega > 0)
    stacked = g.concat_rows(x, g.repeat_row(g.leaf(m.mask_token), mask.omega));
  std::vector<uint32_t> slot_source(n);
  uint32_t vis_rank = 0, hid_rank = 0;
  for (size_t i = 0; i < n; ++i) {
    if (mask.keep[i])
      slot_source[i] = vis_rank++;
    else
      slot_source[i] = static_cast<uint32_t>(n_vis) + hid_rank++;
  }
  Val<T> full = g.index_rows(stacked, slot_source);
  full = g.add(full, g.constant(m.dec_v_pos));

  for (auto& b : m.dec_v_blocks) full = self_block(g, full, b, cfg.h_e, nullptr);
  return linear(g, norm(g, full, m.dec_v_norm), m.pixel_head);
}

template <typename T>
typename Tape<T>::Val decode_text(Tape<T>& g, Model<T>& m, typename Tape<T>::Val latent,
                                  const std::vector<int32_t>& input_tokens) {
  const ModelConfig& cfg = m.config;
  const size_t len = input_tokens.size();
  if (len == 0 || len > cfg.j_max)
    throw ShapeError("decode_text: sequence length " + std::to_string(len) +
                     " outside [1," + std::to_string(cfg.j_max) + "]");
  std::vector<uint32_t> rows(len);
  for (size_t i = 0; i < len; ++i) {
    if (input_tokens[i] < 0 || static_cast<size_t>(input_tokens[i]) >= cfg.vocab_size)
      throw ShapeError("decode_text: token id " + std::to_string(input_tokens[i]) +
                       " out of range [0," + std::to_string(cfg.vocab_size) + ")");
    rows[i] = static_cast<uint32_t>(input_tokens[i]);
  }

  Val<T> x = g.index_rows(g.leaf(m.token_embed), rows);
  Tensor<T> pos = Tensor<T>::zeros({len, cfg.d_t});
  std::copy_n(m.dec_t_pos.data.data(), len * cfg.d_t, pos.data.data());
  x = g.add(x, g.constant(pos));

  BoolMask causal = causal_mask(len);
  for (auto& b : m.dec_t_uni_blocks) x = self_block(g, x, b, cfg.h_t, &causal);
  for (auto& b : m.dec_t_multi_blocks) x = cross_block(g, x, latent, b, cfg.h_t, causal);
  return linear(g, norm(g, x, m.dec_t_norm), m.vocab_head);
}

Model<double> widen(const Model<float>& model) {
  Model<double> out = make_model_shell<double>(model.config);
  auto src = const_cast<Model<float>&>(model).named_parameters();
  auto dst = out.named_parameters();
  for (size_t i = 0; i < src.size(); ++i)
    for (size_t j = 0; j < src[i].second->data.size(); ++j)
      dst[i].second->data[j] = static_cast<double>(src[i].second->data[j]);
  return out;
}

// explicit instantiations
template struct Model<float>;
template struct Model<double>;
template Model<float> make_model_shell<float>(const ModelConfig&);
template Model<double> make_model_shell<double>(const ModelConfig&);
template Model<float> init_model<float>(const ModelConfig&, uint64_t);
template Model<double> init_model<double>(const ModelConfig&, uint64_t);
template Tensor<float> sinusoid_table<float>(size_t, size_t);
template Tensor<double> sinusoid_table<double>(size_t, size_t);
template Tape<float>::Val encode<float>(Tape<float>&, Model<float>&, Tape<float>::Val,
                                        const std::vector<uint32_t>&);
template Tape<double>::Val encode<double>(Tape<double>&, Model<double>&, Tape<double>::Val,
                                          const std::vector<uint32_t>&);
template Tape<float>::Val encode<float>(Tape<float>&, Model<float>&, const VisiblePatches&);
template Tape<double>::Val encode<double>(Tape<double>&, Model<double>&, const VisiblePatches&);
template Tape<float>::Val decode_image<float>(Tape<float>&, Model<float>&, Tape<float>::Val,
                                              const MaskSpec&);
template Tape<double>::Val decode_image<double>(Tape<double>&, Model<double>&, Tape<double>::Val,
                                                const MaskSpec&);
template Tape<float>::Val decode_text<float>(Tape<float>&, Model<float>&, Tape<float>::Val,
                                             const std::vector<int32_t>&);
template Tape<double>::Val decode_text<double>(Tape<double>&, Model<double>&, Tape<double>::Val,
                                               const std::vector<int32_t>&);

}  // namespace mug
