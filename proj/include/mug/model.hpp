#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mug/tensor.hpp"
#include "mug/text.hpp"
#include "mug/vision.hpp"

namespace mug {

struct ModelConfig {
  size_t patch_size = 4;
  size_t channels = 1;
  size_t height = 32;
  size_t width = 32;

  size_t d_e = 32;  // encoder width
  size_t n_e = 2;   // encoder depth
  size_t h_e = 4;   // encoder heads (also used by the image decoder)

  size_t d_v = 32;  // image-decoder width
  size_t n_v = 1;   // image-decoder depth

  size_t d_t = 32;     // text-decoder width
  size_t n_uni = 1;    // causal self-attention-only layers
  size_t n_multi = 2;  // layers that also cross-attend to the image latent
  size_t h_t = 4;      // text-decoder heads

  size_t vocab_size = 32;
  size_t j_max = 70;
  double mask_ratio = 0.75;

  size_t grid_h() const { return height / patch_size; }
  size_t grid_w() const { return width / patch_size; }
  size_t num_patches() const { return grid_h() * grid_w(); }
  size_t patch_dim() const { return channels * patch_size * patch_size; }

  void validate() const;  // throws ConfigError
};

template <typename T>
struct LinearParams {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]
};

template <typename T>
struct NormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
struct AttnParams {
  LinearParams<T> q, k, v, o;
};

template <typename T>
struct SelfBlockParams {
  NormParams<T> ln1;
  AttnParams<T> attn;
  NormParams<T> ln2;
  LinearParams<T> fc1, fc2;
};

template <typename T>
struct CrossBlockParams {
  NormParams<T> ln_self;
  AttnParams<T> self_attn;
  NormParams<T> ln_cross;
  AttnParams<T> cross_attn;  // query from text, key/value from the image latent
  NormParams<T> ln_mlp;
  LinearParams<T> fc1, fc2;
};

/// MUG network: masked-patch encoder, image decoder, text decoder.
/// Positional tables are fixed sinusoidal functions of (position, dim) and
/// are therefore not parameters and not checkpointed.
template <typename T>
struct Model {
  ModelConfig config;

  LinearParams<T> patch_embed;
  Tensor<T> cls_token;  // [1, d_e]
  std::vector<SelfBlockParams<T>> encoder_blocks;
  NormParams<T> encoder_norm;

  LinearParams<T> dec_v_embed;
  Tensor<T> mask_token;  // [1, d_v]
  std::vector<SelfBlockParams<T>> dec_v_blocks;
  NormParams<T> dec_v_norm;
  LinearParams<T> pixel_head;

  Tensor<T> token_embed;  // [V, d_t]
  std::vector<SelfBlockParams<T>> dec_t_uni_blocks;
  std::vector<CrossBlockParams<T>> dec_t_multi_blocks;
  NormParams<T> dec_t_norm;
  LinearParams<T> vocab_head;

  Tensor<T> enc_pos;    // [N+1, d_e], row N belongs to the class token
  Tensor<T> dec_v_pos;  // [N, d_v]
  Tensor<T> dec_t_pos;  // [j_max, d_t]

  /// Stable, closed list of every trainable tensor; order fixes both the
  /// init stream and the checkpoint layout.
  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters();
  size_t parameter_count();
};

/// All-zero parameter shells with names registered; used by checkpoint load.
template <typename T>
Model<T> make_model_shell(const ModelConfig& config);

/// Truncated Normal(0, 0.02^2) weights, zero biases, unit norm gains;
/// bit-reproducible for a given (config, seed).
template <typename T>
Model<T> init_model(const ModelConfig& config, uint64_t seed);

template <typename T>
Tensor<T> sinusoid_table(size_t positions, size_t dim);

/// Visible-patch encoder: patch embedding + positions at original indices,
/// class token prepended, pre-norm transformer stack, final norm.
/// Returns [N_vis + 1, d_e]; row 0 is the class token.
template <typename T>
typename Tape<T>::Val encode(Tape<T>& tape, Model<T>& model, typename Tape<T>::Val visible,
                             const std::vector<uint32_t>& visible_indices);

template <typename T>
typename Tape<T>::Val encode(Tape<T>& tape, Model<T>& model, const VisiblePatches& visible);

/// Projects the latent, re-inserts mask tokens at masked slots, adds decoder
/// positions, runs the decoder stack, and predicts all N patch rows.
template <typename T>
typename Tape<T>::Val decode_image(Tape<T>& tape, Model<T>& model, typename Tape<T>::Val latent,
                                   const MaskSpec& mask);

/// Teacher-forced caption logits [L, vocab_size]: token+position embedding,
/// n_uni causal layers, then n_multi layers of causal self-attention plus
/// cross-attention with the full latent (class token included) as key/value.
template <typename T>
typename Tape<T>::Val decode_text(Tape<T>& tape, Model<T>& model, typename Tape<T>::Val latent,
                                  const std::vector<int32_t>& input_tokens);

using ModelF = Model<float>;
using ModelD = Model<double>;

/// Copies parameters between precisions (used to grad-check the exact
/// float-trained weights in double).
Model<double> widen(const Model<float>& model);

}  // namespace mug
