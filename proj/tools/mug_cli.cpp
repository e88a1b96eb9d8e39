// Command-line front end: corpus generation, pre-training, probing,
// captioning, reconstruction dumps, the caption-entropy diagnostic, and the
// joint-loss gradient check.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "mug/data.hpp"
#include "mug/eval.hpp"
#include "mug/gradcheck.hpp"
#include "mug/model.hpp"
#include "mug/objectives.hpp"
#include "mug/trainer.hpp"

namespace {

mug::ImageSample sample_from_file(const std::string& path) {
  mug::ImageSample s;
  s.pixels = mug::read_image(path);
  s.id = path;
  return s;
}

int run(int argc, char** argv) {
  CLI::App app{"MUG pre-training toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Render a synthetic image-caption corpus");
  std::string gen_out;
  size_t gen_count = 0;
  uint64_t gen_seed = 0;
  size_t gen_channels = 1;
  double gen_noise = 0.0;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--count", gen_count, "number of samples")->required();
  gen->add_option("--seed", gen_seed, "generation seed")->required();
  gen->add_option("--channels", gen_channels, "1 or 3")->check(CLI::IsMember({1, 3}));
  gen->add_option("--noise", gen_noise, "pixel noise amplitude")->check(CLI::Range(0.0, 1.0));

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Joint masked-reconstruction + captioning run");
  std::string pre_data, pre_out, pre_config, pre_log;
  size_t pre_steps = 0;
  uint64_t pre_seed = 0;
  double pre_lambda_v = -1.0, pre_lambda_l = -1.0, pre_mask_ratio = -1.0;
  pre->add_option("--data", pre_data, "corpus directory")->required();
  pre->add_option("--out", pre_out, "checkpoint path")->required();
  pre->add_option("--steps", pre_steps, "training steps")->required();
  pre->add_option("--seed", pre_seed, "training seed")->required();
  pre->add_option("--lambda-v", pre_lambda_v, "reconstruction weight");
  pre->add_option("--lambda-l", pre_lambda_l, "caption weight");
  pre->add_option("--mask-ratio", pre_mask_ratio, "patch mask ratio");
  pre->add_option("--config", pre_config, "key=value config file");
  pre->add_option("--log", pre_log, "metrics log path");

  // probe
  auto* probe = app.add_subcommand("probe", "Linear probe on frozen features");
  std::string probe_ckpt, probe_data, probe_feature = "cls";
  uint64_t probe_seed = 0;
  probe->add_option("--ckpt", probe_ckpt, "checkpoint path")->required();
  probe->add_option("--data", probe_data, "corpus directory")->required();
  probe->add_option("--seed", probe_seed, "split seed")->required();
  probe->add_option("--feature", probe_feature, "cls | mean | pixels")
      ->check(CLI::IsMember({"cls", "mean", "pixels"}));

  // caption
  auto* cap = app.add_subcommand("caption", "Greedy caption for one image");
  std::string cap_ckpt, cap_image, cap_prompt;
  double cap_ratio = 0.75;
  uint64_t cap_seed = 0;
  cap->add_option("--ckpt", cap_ckpt, "checkpoint path")->required();
  cap->add_option("--image", cap_image, "MUGI image file")->required();
  cap->add_option("--mask-ratio", cap_ratio, "patch mask ratio (0 = no masking)");
  cap->add_option("--seed", cap_seed, "mask seed");
  cap->add_option("--prompt", cap_prompt, "decode after these words instead of BOS only");

  // reconstruct
  auto* rec = app.add_subcommand("reconstruct", "Dump masked / reconstructed / ground-truth images");
  std::string rec_ckpt, rec_image, rec_out;
  double rec_ratio = 0.75;
  uint64_t rec_seed = 0;
  rec->add_option("--ckpt", rec_ckpt, "checkpoint path")->required();
  rec->add_option("--image", rec_image, "MUGI image file")->required();
  rec->add_option("--out", rec_out, "output directory")->required();
  rec->add_option("--mask-ratio", rec_ratio, "patch mask ratio");
  rec->add_option("--seed", rec_seed, "mask seed");

  // entropy
  auto* ent = app.add_subcommand("entropy", "Caption NLL in bits/token over a corpus");
  std::string ent_ckpt, ent_data;
  uint64_t ent_seed = 0;
  ent->add_option("--ckpt", ent_ckpt, "checkpoint path")->required();
  ent->add_option("--data", ent_data, "corpus directory")->required();
  ent->add_option("--seed", ent_seed, "mask seed");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the joint loss");
  double gc_eps = 1e-5;
  size_t gc_entries = 24;
  gc->add_option("--eps", gc_eps, "central-difference step");
  gc->add_option("--entries", gc_entries, "entries checked per parameter tensor");

  CLI11_PARSE(app, argc, argv);

  if (*gen) {
    mug::SynthOptions opt;
    opt.channels = gen_channels;
    opt.noise = gen_noise;
    auto manifest = mug::generate_synthetic(gen_count, gen_seed, gen_out, opt);
    std::printf("wrote %zu samples under %s\n", manifest.size(), gen_out.c_str());
    return 0;
  }

  if (*pre) {
    mug::ModelConfig mc;
    mug::TrainConfig tc;
    if (!pre_config.empty()) mug::load_config_file(pre_config, mc, tc);
    tc.total_steps = pre_steps;
    tc.seed = pre_seed;
    if (pre_lambda_v >= 0.0) tc.lambda_v = pre_lambda_v;
    if (pre_lambda_l >= 0.0) tc.lambda_l = pre_lambda_l;
    if (pre_mask_ratio >= 0.0) mc.mask_ratio = pre_mask_ratio;
    auto corpus = mug::load_corpus_dir(pre_data);
    mc.channels = corpus.front().pixels.channels;
    mc.height = corpus.front().pixels.height;
    mc.width = corpus.front().pixels.width;

    auto result = mug::train(tc, corpus, mc);
    mug::save_checkpoint(pre_out, result.model, result.vocab, &result.opt_state);
    if (!pre_log.empty()) {
      std::ofstream log(pre_log, std::ios::binary);
      if (!log) throw mug::IoError("pretrain: cannot write log " + pre_log);
      for (const auto& line : result.metrics_lines) log << line << "\n";
    }
    const auto& last = result.reports.back();
    std::printf("finished %zu steps: loss_V=%.6g loss_L=%.6g loss_joint=%.6g\n", tc.total_steps,
                last.loss_v, last.loss_l, last.loss_joint);
    for (const auto& [step, bits] : result.entropy_history)
      std::printf("caption entropy bound @ step %zu: %.4f bits/token\n", step, bits);
    std::printf("checkpoint written to %s\n", pre_out.c_str());
    return 0;
  }

  if (*probe) {
    auto ckpt = mug::load_checkpoint(probe_ckpt);
    auto corpus = mug::load_corpus_dir(probe_data);
    std::vector<size_t> labels;
    labels.reserve(corpus.size());
    for (const auto& s : corpus) labels.push_back(mug::shape_class_of(s.caption));
    mug::ProbeFeature source = probe_feature == "cls"  ? mug::ProbeFeature::kClassToken
                               : probe_feature == "mean" ? mug::ProbeFeature::kMeanPooled
                                                         : mug::ProbeFeature::kRawPixels;
    auto features = mug::extract_features(ckpt.model, corpus, source);
    auto res = mug::linear_probe(features, labels, probe_seed, source);
    std::printf("%s probe over %zu classes: train %.4f, test %.4f\n",
                mug::probe_feature_name(res.source), res.classes, res.train_accuracy,
                res.test_accuracy);
    return 0;
  }

  if (*cap) {
    auto ckpt = mug::load_checkpoint(cap_ckpt);
    auto sample = sample_from_file(cap_image);
    std::string text = mug::greedy_caption(ckpt.model, ckpt.vocab, sample, cap_ratio, cap_seed,
                                           ckpt.model.config.j_max, cap_prompt);
    std::printf("%s\n", text.c_str());
    return 0;
  }

  if (*rec) {
    auto ckpt = mug::load_checkpoint(rec_ckpt);
    auto sample = sample_from_file(rec_image);
    mug::reconstruct_dump(ckpt.model, sample, rec_ratio, rec_seed, rec_out);
    std::printf("wrote masked.mugi, reconstruction.mugi, ground_truth.mugi under %s\n",
                rec_out.c_str());
    return 0;
  }

  if (*ent) {
    auto ckpt = mug::load_checkpoint(ent_ckpt);
    auto corpus = mug::load_corpus_dir(ent_data);
    double bits = mug::conditional_entropy_bound(ckpt.model, corpus, ckpt.vocab, ent_seed);
    std::printf("caption entropy bound: %.4f bits/token\n", bits);
    return 0;
  }

  if (*gc) {
    mug::ModelConfig config;  // defaults are the tiny verification config
    mug::GradCheckOptions opts;
    opts.eps = gc_eps;
    opts.max_entries_per_param = gc_entries;
    auto res = mug::joint_loss_grad_check(config, 7, opts);
    std::printf("max relative error %.3g over %zu entries (worst: %s[%zu] analytic=%.6g numeric=%.6g)\n",
                res.max_rel_err, res.entries_checked, res.worst_param.c_str(), res.worst_index,
                res.worst_analytic, res.worst_numeric);
    if (res.max_rel_err >= 1e-4) {
      std::fprintf(stderr, "gradcheck failed: %.3g >= 1e-4\n", res.max_rel_err);
      return 1;
    }
    return 0;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
