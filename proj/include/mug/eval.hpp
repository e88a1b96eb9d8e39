#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mug/gradcheck.hpp"
#include "mug/model.hpp"
#include "mug/text.hpp"
#include "mug/trainer.hpp"
#include "mug/vision.hpp"

namespace mug {

enum class ProbeFeature { kClassToken, kMeanPooled, kRawPixels };

const char* probe_feature_name(ProbeFeature f);

struct ProbeResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  size_t classes = 0;
  ProbeFeature source = ProbeFeature::kClassToken;
};

/// Full-batch gradient descent on a softmax linear classifier over frozen
/// features, deterministic seeded 50/50 split. Throws on single-class labels.
ProbeResult linear_probe(const Tensor<float>& features, const std::vector<size_t>& labels,
                         uint64_t split_seed, ProbeFeature source = ProbeFeature::kClassToken);

/// Frozen-encoder features with the bypass (all-visible) mask, one row per
/// sample. kRawPixels flattens the image instead of encoding it.
Tensor<float> extract_features(Model<float>& model, const std::vector<ImageSample>& samples,
                               ProbeFeature source);

/// Argmax loop over `next_logits(ids so far)`; ties resolve to the lowest
/// token id; stops at EOS or after max_len generated tokens.
std::vector<int32_t> greedy_decode(
    const std::function<std::vector<float>(const std::vector<int32_t>&)>& next_logits,
    size_t vocab_size, size_t max_len, std::vector<int32_t> ids);

/// Masks the image (ratio 0 keeps everything visible), encodes once, then
/// decodes autoregressively from BOS (plus an optional prompt).
std::string greedy_caption(Model<float>& model, const Vocab& vocab, const ImageSample& sample,
                           double mask_ratio, uint64_t seed, size_t max_len,
                           const std::string& prompt = "");

/// Writes masked.mugi / reconstruction.mugi / ground_truth.mugi. The
/// reconstruction keeps ground-truth pixels at visible patches and uses
/// predictions (clamped to [0,1]) only at masked ones.
void reconstruct_dump(Model<float>& model, const ImageSample& sample, double mask_ratio,
                      uint64_t seed, const std::string& out_dir);

/// Mean squared error between prediction and ground truth over the masked
/// region only, for one seeded mask.
double masked_region_mse(Model<float>& model, const ImageSample& sample, double mask_ratio,
                         uint64_t seed);

/// Teacher-forced next-token argmax accuracy over clean captions, with one
/// seeded mask per sample.
double caption_token_accuracy(Model<float>& model, const Vocab& vocab,
                              const std::vector<ImageSample>& samples, double mask_ratio,
                              uint64_t seed);

/// Finite-difference verification of the full joint loss on a seeded
/// double-precision model over a small synthetic batch.
GradCheckResult joint_loss_grad_check(const ModelConfig& config, uint64_t seed,
                                      const GradCheckOptions& opts = {});

/// key=value configuration handling; keys mirror ModelConfig / TrainConfig
/// field names. Unknown keys raise ParseError.
void apply_config_kv(const std::string& key, const std::string& value, ModelConfig& model_config,
                     TrainConfig& train_config);
void load_config_file(const std::string& path, ModelConfig& model_config,
                      TrainConfig& train_config);

}  // namespace mug
