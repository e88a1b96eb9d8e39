#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mug/model.hpp"
#include "mug/objectives.hpp"
#include "mug/text.hpp"
#include "mug/vision.hpp"

namespace mug {

struct TrainConfig {
  /// 0 selects the scaled default max(1e-3, 1.5e-4 * batch_size / 256); the
  /// floor dominates at desk-scale batch sizes.
  double base_lr = 0.0;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  size_t batch_size = 16;
  size_t warmup_steps = 0;  // 0 selects 10% of total_steps
  size_t total_steps = 1000;
  uint64_t seed = 0;
  double lambda_v = 1.0;
  double lambda_l = 0.1;
  double gaussian_sigma = 1.0;
  size_t eval_every = 500;  // caption-entropy diagnostic cadence; 0 disables
  bool norm_pix_targets = false;
  bool use_crop_aug = false;

  double effective_base_lr() const;
  size_t effective_warmup() const;
  void validate() const;
};

/// Linear warmup to base_lr, then cosine decay to zero at total_steps.
double lr_at(size_t step, const TrainConfig& config);

struct OptimizerState {
  struct Moments {
    std::vector<float> m, v;
  };
  uint64_t step = 0;
  std::vector<Moments> moments;  // aligned with Model::named_parameters()
};

OptimizerState make_optimizer_state(Model<float>& model);

/// Decoupled-weight-decay Adam with bias correction. Only parameters in
/// `touched` are updated (gradient step and decay alike); biases, norm
/// parameters and the class/mask tokens are never decayed.
void adamw_step(Model<float>& model, const std::vector<Tensor<float>*>& touched,
                OptimizerState& state, double lr, const TrainConfig& config);

struct TrainResult {
  Model<float> model;
  OptimizerState opt_state;
  Vocab vocab;
  std::vector<std::string> metrics_lines;  // step \t loss_V \t loss_L \t loss_joint \t lr
  std::vector<LossReport> reports;
  std::vector<std::pair<size_t, double>> entropy_history;  // (completed steps, bits/token)
};

/// Deterministic joint pre-training: seeded batches, per-occurrence masks and
/// caption corruption, joint loss, backward, AdamW. A zero loss weight prunes
/// the corresponding decoder branch entirely, so its exclusive parameters
/// stay bit-identical to initialization.
TrainResult train(const TrainConfig& config, const std::vector<ImageSample>& corpus,
                  const ModelConfig& model_config);

// --------------------------------------------------------------- checkpoint

struct LoadedCheckpoint {
  Model<float> model;
  Vocab vocab;
  std::optional<OptimizerState> opt_state;
};

/// Binary container: "MUGC", u32 version=1, u32 config length, key=value
/// lines, u32 parameter count, per parameter (u32 name length, name,
/// u32 ndim, dims, f32 data), u8 optimizer flag with an equally shaped
/// section, trailing CRC-32 of everything before it.
void save_checkpoint(const std::string& path, Model<float>& model, const Vocab& vocab,
                     const OptimizerState* opt_state = nullptr);

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace mug
