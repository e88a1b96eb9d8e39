#pragma once

#include <cstdint>
#include <vector>

#include "mug/model.hpp"
#include "mug/tensor.hpp"
#include "mug/text.hpp"
#include "mug/vision.hpp"

namespace mug {

/// Per-step loss summary. loss_joint is always assembled as
/// lambda_v * loss_v + lambda_l * loss_l, in that order.
struct LossReport {
  double loss_v = 0.0;
  double loss_l = 0.0;
  double loss_joint = 0.0;
  size_t tokens_supervised = 0;
  size_t pixels_supervised = 0;
};

LossReport make_loss_report(double loss_v, double loss_l, double lambda_v, double lambda_l,
                            size_t tokens_supervised, size_t pixels_supervised);

/// Mean squared error over masked patches only, normalized by the number of
/// masked elements (omega * P). Visible rows are never read, so the value is
/// bit-invariant to their contents. Throws ConfigError when omega == 0.
template <typename T>
typename Tape<T>::Val reconstruction_loss(Tape<T>& tape, typename Tape<T>::Val pred,
                                          const Tensor<T>& target, const MaskSpec& mask);

/// Token cross entropy averaged over supervised positions (labels != PAD).
template <typename T>
typename Tape<T>::Val caption_loss(Tape<T>& tape, typename Tape<T>::Val logits,
                                   const std::vector<int32_t>& labels,
                                   const std::vector<uint8_t>& loss_mask);

struct GaussianEquivalence {
  double nll = 0.0;       // per-masked-element Gaussian negative log-likelihood
  double mse = 0.0;       // per-masked-element squared error
  double constant = 0.0;  // log(sigma * sqrt(2 pi)); nll == mse / (2 sigma^2) + constant
};

/// Evaluates both sides of the Gaussian-likelihood reading of the
/// reconstruction objective on the masked region.
template <typename T>
GaussianEquivalence gaussian_nll_equiv(const Tensor<T>& pred, const Tensor<T>& target,
                                       const MaskSpec& mask, double sigma);

/// Differentiable masked Gaussian NLL (per element), for gradient-direction
/// comparisons against reconstruction_loss.
template <typename T>
typename Tape<T>::Val gaussian_nll_loss(Tape<T>& tape, typename Tape<T>::Val pred,
                                        const Tensor<T>& target, const MaskSpec& mask,
                                        double sigma);

/// Mean caption NLL in bits per token over the dataset, captions teacher-forced
/// from masked-image latents. This is the measurable upper bound on the
/// conditional entropy of captions given the representation.
template <typename T>
double conditional_entropy_bound(Model<T>& model, const std::vector<ImageSample>& samples,
                                 const Vocab& vocab, uint64_t mask_seed);

/// Drops trailing unsupervised positions; returns the supervised length.
size_t supervised_length(const std::vector<uint8_t>& loss_mask);

}  // namespace mug
