#include "macb/classify.hpp"

#include <algorithm>
#include <cmath>

#include "macb/error.hpp"
#include "macb/layers.hpp"
#include "macb/rng.hpp"

namespace macb::cls {

using ad::Var;

namespace {
constexpr double kProbFloor = 1e-7;

std::string layer(const std::string& prefix, const char* kind, int i) { return prefix + "." + kind + std::to_string(i); }
}  // namespace

void HeadConfig::validate() const {
  if (d_model < 4 || d_model % 4 != 0) throw ConfigError("heads: d_model must be a positive multiple of 4");
  if (rfmf_heads == 0 || d_model % rfmf_heads != 0) throw ConfigError("heads: d_model must divide into rfmf heads");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("heads: dropout must lie in [0, 1)");
  if (bn_momentum <= 0.0 || bn_momentum > 1.0) throw ConfigError("heads: batch-norm momentum must lie in (0, 1]");
}

JointRepresentation rfmf(const Bindings& p, Var audio_feats, Var video_feats, std::size_t heads) {
  if (audio_feats.rank() != 2 || video_feats.rank() != 2 || audio_feats.dim(1) != video_feats.dim(1))
    throw ShapeError(audio_feats.tape().next_label("rfmf"),
                     "audio " + shape_str(audio_feats.shape()) + " vs video " + shape_str(video_feats.shape()));
  JointRepresentation j;
  j.audio_tokens = audio_feats.dim(0);
  j.video_tokens = video_feats.dim(0);
  auto att = nn::self_attention(p, kRfmfPrefix, ad::concat({audio_feats, video_feats}, 0), heads);
  j.m = att.out;
  j.attention = std::move(att.weights);
  return j;
}

SampleHeadOutput sample_head(const Bindings& p, const std::string& prefix, Var pooled, Mode mode,
                             const ParamStore& buffers, Rng* dropout_rng, const HeadConfig& cfg) {
  ad::Tape& tape = pooled.tape();
  if (pooled.rank() != 2) throw ShapeError(tape.next_label("sample_head"), "expected [B, d], got " + shape_str(pooled.shape()));
  SampleHeadOutput out;
  Var x = pooled;
  for (int i = 1; i <= 2; ++i) {
    x = nn::linear(p, layer(prefix, "l", i), x);
    const std::string bn = layer(prefix, "bn", i);
    Var mean, var;
    if (mode == Mode::kTrain) {
      mean = ad::mean_axis(x, 0, true);
      var = ad::var_axis(x, 0, true);
      out.batch_mean.push_back(mean.value());
      out.batch_var.push_back(var.value());
    } else {
      const std::size_t w = x.dim(1);
      mean = tape.constant(buffers.at(bn + ".mean").reshaped({1, w}));
      var = tape.constant(buffers.at(bn + ".var").reshaped({1, w}));
    }
    x = ad::div(ad::sub(x, mean), ad::sqrt(ad::add_scalar(var, cfg.bn_eps)));
    x = ad::add(ad::mul(x, p[bn + ".g"]), p[bn + ".b"]);
    x = ad::relu(x);
    if (mode == Mode::kTrain && cfg.dropout > 0.0) {
      if (!dropout_rng) throw ConfigError("sample_head: training mode needs a dropout generator");
      Tensor mask(x.shape());
      const double keep = 1.0 - cfg.dropout;
      for (auto& m : mask.data()) m = dropout_rng->uniform() < keep ? 1.0 / keep : 0.0;
      x = ad::mul(x, tape.constant(std::move(mask)));
    }
  }
  const std::size_t b = pooled.dim(0);
  out.logits = ad::reshape(nn::linear(p, layer(prefix, "l", 3), x), {b});
  out.prob = ad::sigmoid(out.logits);
  return out;
}

void update_running_stats(ParamStore& buffers, const std::string& prefix, const SampleHeadOutput& out,
                          const HeadConfig& cfg) {
  for (std::size_t i = 0; i < out.batch_mean.size(); ++i) {
    const std::string bn = layer(prefix, "bn", static_cast<int>(i + 1));
    Tensor& rm = buffers.at(bn + ".mean");
    Tensor& rv = buffers.at(bn + ".var");
    for (std::size_t j = 0; j < rm.size(); ++j) {
      rm[j] = (1.0 - cfg.bn_momentum) * rm[j] + cfg.bn_momentum * out.batch_mean[i][j];
      rv[j] = (1.0 - cfg.bn_momentum) * rv[j] + cfg.bn_momentum * out.batch_var[i][j];
    }
  }
}

Var frame_head(const Bindings& p, const std::string& prefix, Var feats) {
  Var h = ad::relu(nn::linear(p, prefix + ".l1", feats));
  Var logits = nn::linear(p, prefix + ".l2", h);
  return ad::sigmoid(ad::reshape(logits, {feats.dim(0)}));
}

Var bce(Var prob, const Tensor& labels) {
  ad::Tape& tape = prob.tape();
  if (prob.shape() != labels.shape() || prob.rank() != 1)
    throw ShapeError(tape.next_label("bce"), "probabilities " + shape_str(prob.shape()) + " vs labels " +
                                                 shape_str(labels.shape()));
  const std::size_t n = labels.size();
  Tensor pos(labels.shape(), 0.0), neg(labels.shape(), 0.0);
  std::size_t valid = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0.0) continue;
    if (labels[i] != 0.0 && labels[i] != 1.0) throw ConfigError("bce: labels must be 0, 1 or negative for missing");
    ++valid;
    pos[i] = labels[i];
    neg[i] = 1.0 - labels[i];
  }
  if (valid == 0) throw ConfigError("bce: every label is missing");
  Var p = ad::clamp(prob, kProbFloor, 1.0 - kProbFloor);
  Var ll = ad::add(ad::mul(tape.constant(std::move(pos)), ad::log(p)),
                   ad::mul(tape.constant(std::move(neg)), ad::log(ad::add_scalar(ad::neg(p), 1.0))));
  return ad::scale(ad::sum(ll), -1.0 / static_cast<double>(valid));
}

Var sample_loss(Var prob, const Tensor& labels) {
  for (double y : labels.data())
    if (y != 0.0 && y != 1.0) throw ConfigError("sample_loss: labels must be 0 or 1");
  return bce(prob, labels);
}

Var frame_loss(Var prob, const Tensor& labels) { return bce(prob, labels); }

Objectives total_loss(const LossParts& parts, double eta) {
  if (eta < 0.0) throw ConfigError("total_loss: eta must be >= 0");
  Objectives o;
  o.multimodal = ad::add(parts.sample, ad::scale(ad::add(parts.av, parts.va), eta / 2.0));
  o.unimodal = ad::add(ad::scale(ad::add(parts.frame_audio, parts.frame_video), 0.5),
                       ad::scale(ad::add(parts.aa, parts.vv), eta / 2.0));
  o.total = ad::add(o.multimodal, o.unimodal);
  return o;
}

void init_sample_head(ParamStore& params, ParamStore& buffers, Rng& rng, const std::string& prefix, std::size_t d) {
  const std::size_t widths[] = {d, d / 2, d / 4, 1};
  for (int i = 1; i <= 3; ++i) params.init_linear(rng, layer(prefix, "l", i), widths[i - 1], widths[i]);
  for (int i = 1; i <= 2; ++i) {
    const std::string bn = layer(prefix, "bn", i);
    params.init_constant(bn + ".g", {widths[i]}, 1.0);
    params.init_constant(bn + ".b", {widths[i]}, 0.0);
    buffers.init_constant(bn + ".mean", {widths[i]}, 0.0);
    buffers.init_constant(bn + ".var", {widths[i]}, 1.0);
  }
}

void init_params(ParamStore& params, ParamStore& buffers, Rng& rng, const HeadConfig& cfg) {
  cfg.validate();
  nn::init_attention(params, rng, kRfmfPrefix, cfg.d_model);
  init_sample_head(params, buffers, rng, kSampleHead, cfg.d_model);
  if (cfg.per_modality_sample_heads) {
    init_sample_head(params, buffers, rng, std::string(kSampleHead) + "_a", cfg.d_model);
    init_sample_head(params, buffers, rng, std::string(kSampleHead) + "_v", cfg.d_model);
  }
  for (const char* fp : {kFrameAudio, kFrameVideo}) {
    params.init_linear(rng, std::string(fp) + ".l1", cfg.d_model, cfg.frame_hidden);
    params.init_linear(rng, std::string(fp) + ".l2", cfg.frame_hidden, 1);
  }
}

}  // namespace macb::cls
