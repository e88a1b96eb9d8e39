#include "mug/objectives.hpp"

#include <algorithm>
#include <cmath>

namespace mug {

LossReport make_loss_report(double loss_v, double loss_l, double lambda_v, double lambda_l,
                            size_t tokens_supervised, size_t pixels_supervised) {
  LossReport r;
  r.loss_v = loss_v;
  r.loss_l = loss_l;
  r.loss_joint = lambda_v * loss_v + lambda_l * loss_l;
  r.tokens_supervised = tokens_supervised;
  r.pixels_supervised = pixels_supervised;
  return r;
}

template <typename T>
typename Tape<T>::Val reconstruction_loss(Tape<T>& tape, typename Tape<T>::Val pred,
                                          const Tensor<T>& target, const MaskSpec& mask) {
  const auto& shape = tape.shape(pred);
  if (shape.size() != 2 || shape[0] != mask.n() || target.shape != shape)
    throw ShapeError("reconstruction_loss: pred " + shape_str(shape) + ", target " +
                     shape_str(target.shape) + " and mask length " + std::to_string(mask.n()) +
                     " disagree");
  if (mask.omega == 0)
    throw ConfigError("reconstruction_loss: no masked patch to supervise (omega = 0)");
  const size_t p = shape[1];
  auto masked = mask.masked_indices();

  Tensor<T> masked_target = Tensor<T>::zeros({masked.size(), p});
  for (size_t r = 0; r < masked.size(); ++r)
    std::copy_n(target.data.data() + masked[r] * p, p, masked_target.data.data() + r * p);

  auto diff = tape.sub(tape.index_rows(pred, masked), tape.constant(masked_target));
  T norm = static_cast<T>(1.0 / (static_cast<double>(mask.omega) * static_cast<double>(p)));
  return tape.scale(tape.sum_all(tape.square(diff)), norm);
}

template <typename T>
typename Tape<T>::Val caption_loss(Tape<T>& tape, typename Tape<T>::Val logits,
                                   const std::vector<int32_t>& labels,
                                   const std::vector<uint8_t>& loss_mask) {
  return tape.cross_entropy_rows(logits, labels, loss_mask);
}

template <typename T>
GaussianEquivalence gaussian_nll_equiv(const Tensor<T>& pred, const Tensor<T>& target,
                                       const MaskSpec& mask, double sigma) {
  if (sigma <= 0.0) throw ConfigError("gaussian_nll_equiv: sigma must be positive");
  if (pred.shape != target.shape || pred.rows() != mask.n())
    throw ShapeError("gaussian_nll_equiv: pred " + shape_str(pred.shape) + ", target " +
                     shape_str(target.shape) + " and mask length " + std::to_string(mask.n()) +
                     " disagree");
  if (mask.omega == 0) throw ConfigError("gaussian_nll_equiv: omega = 0");
  const size_t p = pred.cols();
  const double c = std::log(sigma * std::sqrt(2.0 * 3.14159265358979323846));
  const double inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
  double nll = 0.0, mse = 0.0;
  for (uint32_t row : mask.masked_indices()) {
    for (size_t j = 0; j < p; ++j) {
      double d = static_cast<double>(pred.data[row * p + j]) -
                 static_cast<double>(target.data[row * p + j]);
      nll += d * d * inv_two_sigma2 + c;
      mse += d * d;
    }
  }
  const double count = static_cast<double>(mask.omega) * static_cast<double>(p);
  GaussianEquivalence out;
  out.nll = nll / count;
  out.mse = mse / count;
  out.constant = c;
  return out;
}

template <typename T>
typename Tape<T>::Val gaussian_nll_loss(Tape<T>& tape, typename Tape<T>::Val pred,
                                        const Tensor<T>& target, const MaskSpec& mask,
                                        double sigma) {
  if (sigma <= 0.0) throw ConfigError("gaussian_nll_loss: sigma must be positive");
  const size_t p = tape.shape(pred)[1];
  auto mse = reconstruction_loss(tape, pred, target, mask);
  auto scaled = tape.scale(mse, static_cast<T>(1.0 / (2.0 * sigma * sigma)));
  const double c = std::log(sigma * std::sqrt(2.0 * 3.14159265358979323846));
  (void)p;
  return tape.add(scaled, tape.constant({1}, {static_cast<T>(c)}));
}

size_t supervised_length(const std::vector<uint8_t>& loss_mask) {
  size_t len = 0;
  for (size_t i = 0; i < loss_mask.size(); ++i)
    if (loss_mask[i]) len = i + 1;
  return len;
}

template <typename T>
double conditional_entropy_bound(Model<T>& model, const std::vector<ImageSample>& samples,
                                 const Vocab& vocab, uint64_t mask_seed) {
  if (samples.empty()) throw ConfigError("conditional_entropy_bound: empty dataset");
  const ModelConfig& cfg = model.config;
  double total_nll = 0.0;
  size_t total_tokens = 0;
  for (size_t i = 0; i < samples.size(); ++i) {
    Tape<T> tape;
    auto patches = patchify(samples[i].pixels, cfg.patch_size);
    auto mask = sample_mask(cfg.num_patches(), cfg.mask_ratio,
                            derive_seed(mask_seed, "entropy-mask", uint64_t{i}));
    auto latent = encode(tape, model, apply_mask(patches, mask));

    auto tokens = encode_caption(samples[i].caption, vocab, cfg.j_max);
    auto tf = shift_for_teacher_forcing(tokens);
    size_t len = supervised_length(tf.loss_mask);
    std::vector<int32_t> input(tf.input.begin(), tf.input.begin() + static_cast<long>(len));
    auto logits = decode_text(tape, model, latent, input);

    const auto& lv = tape.value(logits);
    const size_t v = cfg.vocab_size;
    for (size_t r = 0; r < len; ++r) {
      const T* row = lv.data() + r * v;
      double mx = static_cast<double>(row[0]);
      for (size_t c = 1; c < v; ++c) mx = std::max(mx, static_cast<double>(row[c]));
      double sum = 0.0;
      for (size_t c = 0; c < v; ++c) sum += std::exp(static_cast<double>(row[c]) - mx);
      total_nll += mx + std::log(sum) - static_cast<double>(row[tf.labels[r]]);
      ++total_tokens;
    }
  }
  return total_nll / static_cast<double>(total_tokens) / std::log(2.0);
}

#define MUG_INSTANTIATE_OBJECTIVES(T)                                                        \
  template Tape<T>::Val reconstruction_loss<T>(Tape<T>&, Tape<T>::Val, const Tensor<T>&,    \
                                               const MaskSpec&);                            \
  template Tape<T>::Val caption_loss<T>(Tape<T>&, Tape<T>::Val, const std::vector<int32_t>&, \
                                        const std::vector<uint8_t>&);                       \
  template GaussianEquivalence gaussian_nll_equiv<T>(const Tensor<T>&, const Tensor<T>&,    \
                                                     const MaskSpec&, double);              \
  template Tape<T>::Val gaussian_nll_loss<T>(Tape<T>&, Tape<T>::Val, const Tensor<T>&,      \
                                             const MaskSpec&, double);                      \
  template double conditional_entropy_bound<T>(Model<T>&, const std::vector<ImageSample>&,  \
                                               const Vocab&, uint64_t);
MUG_INSTANTIATE_OBJECTIVES(float)
MUG_INSTANTIATE_OBJECTIVES(double)
#undef MUG_INSTANTIATE_OBJECTIVES

}  // namespace mug
