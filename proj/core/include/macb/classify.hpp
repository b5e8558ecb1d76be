#pragma once

#include <string>
#include <vector>

#include "macb/autodiff.hpp"
#include "macb/param_store.hpp"

// Joint audio-video token fusion by multi-head attention, sample and frame
// classification heads, and the loss partition fed to gradient combination.
namespace macb::cls {

struct HeadConfig {
  std::size_t d_model = 32;
  std::size_t rfmf_heads = 4;
  double dropout = 0.1;
  std::size_t frame_hidden = 16;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  // Extra sample heads on each modality's pooled frame features.
  bool per_modality_sample_heads = false;

  void validate() const;
};

inline constexpr const char* kRfmfPrefix = "rfmf";
inline constexpr const char* kSampleHead = "head";
inline constexpr const char* kFrameAudio = "frame_a";
inline constexpr const char* kFrameVideo = "frame_v";

struct JointRepresentation {
  ad::Var m;                       // [Ta + Tv, d], audio tokens first
  std::vector<Tensor> attention;   // per head
  std::size_t audio_tokens = 0;
  std::size_t video_tokens = 0;
};

// Stacks audio then video tokens; M = concat(heads) W^o.
JointRepresentation rfmf(const Bindings& p, ad::Var audio_feats, ad::Var video_feats, std::size_t heads);

enum class Mode { kTrain, kEval };

struct SampleHeadOutput {
  ad::Var logits;  // [B]
  ad::Var prob;    // [B]
  // Batch statistics per batch-norm layer (train mode only).
  std::vector<Tensor> batch_mean, batch_var;
};

// d -> d/2 -> d/4 -> 1 with batch norm, ReLU and dropout between layers.
// Eval mode reads running statistics from `buffers`.
SampleHeadOutput sample_head(const Bindings& p, const std::string& prefix, ad::Var pooled, Mode mode,
                             const ParamStore& buffers, Rng* dropout_rng, const HeadConfig& cfg);

// Folds the batch statistics into running buffers with the configured momentum.
void update_running_stats(ParamStore& buffers, const std::string& prefix, const SampleHeadOutput& out,
                          const HeadConfig& cfg);

// Per-frame probabilities [T] from features [T, d].
ad::Var frame_head(const Bindings& p, const std::string& prefix, ad::Var feats);

// Mean binary cross-entropy; probabilities clamped to [1e-7, 1 - 1e-7].
// Labels below 0 mark missing entries.
ad::Var bce(ad::Var prob, const Tensor& labels);

ad::Var sample_loss(ad::Var prob, const Tensor& labels);
ad::Var frame_loss(ad::Var prob, const Tensor& labels);

struct LossParts {
  ad::Var sample;
  ad::Var frame_audio, frame_video;
  ad::Var av, va, vv, aa;  // contrastive components
};

struct Objectives {
  ad::Var multimodal;  // L_m
  ad::Var unimodal;    // L_u
  ad::Var total;
};

// L_m = sample + eta (av + va) / 2; L_u = (frame_a + frame_v) / 2 + eta (aa + vv) / 2.
Objectives total_loss(const LossParts& parts, double eta);

void init_params(ParamStore& params, ParamStore& buffers, Rng& rng, const HeadConfig& cfg);
void init_sample_head(ParamStore& params, ParamStore& buffers, Rng& rng, const std::string& prefix, std::size_t d);

}  // namespace macb::cls
