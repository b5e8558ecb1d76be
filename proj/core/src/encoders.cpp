#include "macb/encoders.hpp"

#include "macb/error.hpp"
#include "macb/layers.hpp"
#include "macb/rng.hpp"

namespace macb::enc {

using ad::Var;

void EncoderConfig::validate() const {
  if (n_layers < 1) throw ConfigError("encoder: n_layers must be >= 1");
  if (n_heads == 0 || d_model % n_heads != 0) throw ConfigError("encoder: d_model must be divisible by n_heads");
  if (patch_t == 0 || patch_h == 0 || patch_w == 0 || video_frames % patch_t || video_height % patch_h ||
      video_width % patch_w)
    throw ConfigError("encoder: video dims must be divisible by the patch size");
  if (frame_pool == 0 || mel_frames % frame_pool) throw ConfigError("encoder: mel_frames must be divisible by frame_pool");
}

Var video_patches(Var video, const EncoderConfig& cfg) {
  const Shape want{cfg.video_frames, cfg.video_channels, cfg.video_height, cfg.video_width};
  if (video.shape() != want)
    throw ShapeError(video.tape().next_label("video_patches"),
                     "video " + shape_str(video.shape()) + " does not match config " + shape_str(want));
  Var x = ad::reshape(video, {cfg.grid_t(), cfg.patch_t, cfg.video_channels, cfg.grid_h(), cfg.patch_h, cfg.grid_w(),
                              cfg.patch_w});
  x = ad::permute(x, {0, 3, 5, 1, 2, 4, 6});
  return ad::reshape(x, {cfg.video_tokens(), cfg.patch_dim()});
}

Var audio_frames(Var logmel, const EncoderConfig& cfg) {
  const Shape want{cfg.mel_frames, cfg.n_mels};
  if (logmel.shape() != want)
    throw ShapeError(logmel.tape().next_label("audio_frames"),
                     "log-mel " + shape_str(logmel.shape()) + " does not match config " + shape_str(want));
  if (cfg.frame_pool == 1) return logmel;
  return ad::mean_axis(ad::reshape(logmel, {cfg.audio_tokens(), cfg.frame_pool, cfg.n_mels}), 1);
}

void init_encoder(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t input_dim,
                  std::size_t n_tokens, const EncoderConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  store.init_linear(rng, prefix + ".embed", input_dim, d);
  store.set(prefix + ".pos", rng.normal_tensor({n_tokens, d}, 0.0, 0.02));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string lp = prefix + ".l" + std::to_string(l);
    nn::init_layer_norm(store, lp + ".ln1", d);
    nn::init_attention(store, rng, lp + ".attn", d);
    nn::init_layer_norm(store, lp + ".ln2", d);
    store.init_linear(rng, lp + ".ff1", d, cfg.d_ff);
    store.init_linear(rng, lp + ".ff2", cfg.d_ff, d);
  }
  nn::init_layer_norm(store, prefix + ".ln_f", d);
}

void init_video_encoder(ParamStore& store, Rng& rng, const EncoderConfig& cfg) {
  init_encoder(store, rng, kVideoPrefix, cfg.patch_dim(), cfg.video_tokens(), cfg);
}

void init_audio_encoder(ParamStore& store, Rng& rng, const EncoderConfig& cfg) {
  init_encoder(store, rng, kAudioPrefix, cfg.n_mels, cfg.audio_tokens(), cfg);
}

Encoded encode_tokens(const Bindings& p, const std::string& prefix, Var inputs, const EncoderConfig& cfg) {
  Encoded out;
  Var x = nn::linear(p, prefix + ".embed", inputs);
  if (cfg.positional) {
    Var pos = p[prefix + ".pos"];
    if (pos.dim(0) != x.dim(0))
      throw ShapeError(prefix + ".pos", "encoder built for " + std::to_string(pos.dim(0)) + " tokens, got " +
                                            std::to_string(x.dim(0)));
    x = ad::add(x, pos);
  }
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string lp = prefix + ".l" + std::to_string(l);
    auto att = nn::self_attention(p, lp + ".attn", nn::layer_norm(p, lp + ".ln1", x), cfg.n_heads);
    for (auto& w : att.weights) out.attention.push_back(std::move(w));
    x = ad::add(x, att.out);
    Var h = ad::relu(nn::linear(p, lp + ".ff1", nn::layer_norm(p, lp + ".ln2", x)));
    x = ad::add(x, nn::linear(p, lp + ".ff2", h));
  }
  out.tokens = nn::layer_norm(p, prefix + ".ln_f", x);
  out.pooled = ad::mean_axis(out.tokens, 0);
  return out;
}

Encoded encode_video(const Bindings& p, Var video, const EncoderConfig& cfg) {
  return encode_tokens(p, kVideoPrefix, video_patches(video, cfg), cfg);
}

Encoded encode_audio(const Bindings& p, Var logmel, const EncoderConfig& cfg) {
  return encode_tokens(p, kAudioPrefix, audio_frames(logmel, cfg), cfg);
}

}  // namespace macb::enc
