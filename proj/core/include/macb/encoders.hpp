#pragma once

#include <string>
#include <vector>

#include "macb/autodiff.hpp"
#include "macb/param_store.hpp"

// Pre-norm transformer encoders for video patches and log-Mel frames.
namespace macb::enc {

struct EncoderConfig {
  std::size_t d_model = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 64;

  // Video [T, C, H, W] cut into patch_t x patch_h x patch_w tubes.
  std::size_t video_frames = 8;
  std::size_t video_channels = 3;
  std::size_t video_height = 16;
  std::size_t video_width = 16;
  std::size_t patch_t = 1;
  std::size_t patch_h = 8;
  std::size_t patch_w = 8;

  // Audio log-Mel [mel_frames, n_mels], frames averaged in groups of frame_pool.
  std::size_t mel_frames = 32;
  std::size_t n_mels = 64;
  std::size_t frame_pool = 2;

  bool positional = true;

  void validate() const;

  std::size_t grid_t() const { return video_frames / patch_t; }
  std::size_t grid_h() const { return video_height / patch_h; }
  std::size_t grid_w() const { return video_width / patch_w; }
  std::size_t video_tokens() const { return grid_t() * grid_h() * grid_w(); }
  std::size_t patch_dim() const { return patch_t * video_channels * patch_h * patch_w; }
  std::size_t audio_tokens() const { return mel_frames / frame_pool; }
};

struct Encoded {
  ad::Var tokens;  // [N_tok, d_model]
  ad::Var pooled;  // [d_model], mean over tokens
  std::vector<Tensor> attention;  // per layer and head, rows sum to 1
};

inline constexpr const char* kVideoPrefix = "enc_v";
inline constexpr const char* kAudioPrefix = "enc_a";

// [T, C, H, W] -> [N_tok, patch_dim]; tokens ordered (t, h, w), features
// ordered (dt, c, dh, dw).
ad::Var video_patches(ad::Var video, const EncoderConfig& cfg);
// [mel_frames, n_mels] -> [mel_frames / frame_pool, n_mels]
ad::Var audio_frames(ad::Var logmel, const EncoderConfig& cfg);

void init_encoder(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t input_dim,
                  std::size_t n_tokens, const EncoderConfig& cfg);
void init_video_encoder(ParamStore& store, Rng& rng, const EncoderConfig& cfg);
void init_audio_encoder(ParamStore& store, Rng& rng, const EncoderConfig& cfg);

// Embeds token inputs [N, input_dim], adds positions, runs n_layers blocks and
// a final layer norm.
Encoded encode_tokens(const Bindings& p, const std::string& prefix, ad::Var inputs, const EncoderConfig& cfg);

Encoded encode_video(const Bindings& p, ad::Var video, const EncoderConfig& cfg);
Encoded encode_audio(const Bindings& p, ad::Var logmel, const EncoderConfig& cfg);

}  // namespace macb::enc
