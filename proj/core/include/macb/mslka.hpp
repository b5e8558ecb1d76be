#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "macb/autodiff.hpp"
#include "macb/param_store.hpp"

// Multi-scale large kernel attention over channel-first lattices: 3-D
// spatio-temporal for video [C, T, H, W], 2-D time-frequency for audio [C, T, F].
namespace macb::lka {

struct Scale {
  std::size_t kernel = 5;
  std::size_t dilation = 2;
};

struct LkaConfig {
  std::size_t channels = 16;
  std::size_t n_groups = 2;
  std::vector<Scale> scales = {{5, 2}, {7, 2}, {9, 3}};
  std::size_t gate_kernel = 3;
  std::size_t gsau_kernel = 3;
  bool allow_odd_depth = false;

  void validate() const;
  // Scales cycle over groups.
  Scale scale_for(std::size_t group) const { return scales[group % scales.size()]; }
  std::size_t group_channels() const { return channels / n_groups; }
};

// Depthwise kernel extent 2d - 1.
std::size_t dw_extent(Scale s);
// Dilated depthwise kernel extent ceil(K / d).
std::size_t dwd_extent(Scale s);

// 1x1(x1) convolution: w [C_out, C_in], optional bias [C_out].
ad::Var pointwise(ad::Var x, ad::Var w, ad::Var b = {});

// Depthwise "same" convolution: w [C, 1, k, ...], optional bias [C].
ad::Var depthwise(ad::Var x, ad::Var w, std::size_t dilation = 1, ad::Var b = {});

// f_pw(f_dwd(f_dw(x))), all bias-free.
ad::Var stlka(ad::Var x, ad::Var w_dw, ad::Var w_dwd, ad::Var w_pw, Scale s);

// Channel groups g: gate_g(x_g) * stlka_g(x_g), concatenated.
ad::Var mstlka(const Bindings& p, const std::string& prefix, ad::Var x, const LkaConfig& cfg);

// Layer norm across channels at every lattice position, with affine "<prefix>.g/.b".
ad::Var channel_layer_norm(const Bindings& p, const std::string& prefix, ad::Var x);

// Gated spatial attention unit: depthwise(u) * v.
ad::Var gsau(const Bindings& p, const std::string& prefix, ad::Var u, ad::Var v);

// H + l1 f3(mstlka(f1(N)) * f2(N)), N = LN(H); then H + l2 f6(gsau(f4(N), f5(N))).
// The spatial rank follows the input.
ad::Var lka_block(const Bindings& p, const std::string& prefix, ad::Var h, const LkaConfig& cfg);
ad::Var mstlka_block(const Bindings& p, const std::string& prefix, ad::Var h, const LkaConfig& cfg);
ad::Var mftlka_block(const Bindings& p, const std::string& prefix, ad::Var h, const LkaConfig& cfg);

void init_block(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t spatial_rank,
                const LkaConfig& cfg);

inline std::string video_block_name(std::size_t i) { return "lka_v" + std::to_string(i); }
inline std::string audio_block_name(std::size_t i) { return "lka_a" + std::to_string(i); }

void check_depth(std::size_t depth, const LkaConfig& cfg);

// Blocks for video (rank 3) and audio (rank 2) lattices at every layer.
void init_stack(ParamStore& store, Rng& rng, std::size_t depth, const LkaConfig& cfg);

// Called after each layer with the block outputs; returns the modulated pair.
using FusionHook = std::function<std::pair<ad::Var, ad::Var>(std::size_t layer, ad::Var video, ad::Var audio)>;

std::pair<ad::Var, ad::Var> deep_stack(const Bindings& p, ad::Var video, ad::Var audio, std::size_t depth,
                                       const LkaConfig& cfg, const FusionHook& hook = {});

}  // namespace macb::lka
