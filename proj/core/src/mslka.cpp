#include "macb/mslka.hpp"

#include <tuple>

#include "macb/conv.hpp"
#include "macb/error.hpp"
#include "macb/rng.hpp"

namespace macb::lka {

using ad::Var;

namespace {

Shape kernel_shape(std::size_t out, std::size_t in, std::size_t extent, std::size_t rank) {
  Shape s{out, in};
  for (std::size_t i = 0; i < rank; ++i) s.push_back(extent);
  return s;
}

std::size_t taps(std::size_t extent, std::size_t rank) {
  std::size_t t = 1;
  for (std::size_t i = 0; i < rank; ++i) t *= extent;
  return t;
}

std::string group_name(const std::string& prefix, std::size_t g) { return prefix + ".g" + std::to_string(g); }

}  // namespace

void LkaConfig::validate() const {
  if (channels == 0 || n_groups == 0) throw ConfigError("lka: channels and groups must be positive");
  if (channels % n_groups != 0)
    throw ConfigError("lka: " + std::to_string(channels) + " channels do not split into " + std::to_string(n_groups) +
                      " groups");
  if (scales.empty()) throw ConfigError("lka: at least one scale required");
  for (const auto& s : scales)
    if (s.dilation == 0 || s.kernel == 0) throw ConfigError("lka: kernel and dilation must be positive");
  if (gate_kernel % 2 == 0 || gsau_kernel % 2 == 0) throw ConfigError("lka: gate kernels must be odd");
}

std::size_t dw_extent(Scale s) { return 2 * s.dilation - 1; }
std::size_t dwd_extent(Scale s) { return (s.kernel + s.dilation - 1) / s.dilation; }

Var pointwise(Var x, Var w, Var b) {
  const Shape shape = x.shape();
  const std::size_t c_in = shape.at(0);
  if (w.rank() != 2 || w.dim(1) != c_in)
    throw ShapeError(x.tape().next_label("pointwise"), "weight " + shape_str(w.shape()) + " for input " + shape_str(shape));
  const std::size_t c_out = w.dim(0);
  const std::size_t positions = x.value().size() / c_in;
  Var y = ad::matmul(w, ad::reshape(x, {c_in, positions}));
  if (b.valid()) y = ad::add(y, ad::reshape(b, {c_out, 1}));
  Shape out = shape;
  out[0] = c_out;
  return ad::reshape(y, out);
}

Var depthwise(Var x, Var w, std::size_t dilation, Var b) {
  const std::size_t rank = x.rank() - 1;
  const std::size_t c = x.dim(0);
  std::vector<std::size_t> kernel(w.shape().begin() + 2, w.shape().end());
  auto spec = ad::same_padding(kernel, std::vector<std::size_t>(rank, dilation), c);
  Var y = ad::conv(x, w, spec);
  if (b.valid()) {
    Shape bs{c};
    for (std::size_t i = 0; i < rank; ++i) bs.push_back(1);
    y = ad::add(y, ad::reshape(b, bs));
  }
  return y;
}

Var stlka(Var x, Var w_dw, Var w_dwd, Var w_pw, Scale s) {
  Var y = depthwise(x, w_dw, 1);
  y = depthwise(y, w_dwd, s.dilation);
  return pointwise(y, w_pw);
}

Var mstlka(const Bindings& p, const std::string& prefix, Var x, const LkaConfig& cfg) {
  cfg.validate();
  if (x.dim(0) != cfg.channels)
    throw ShapeError(x.tape().next_label("mstlka"), "expected " + std::to_string(cfg.channels) + " channels, got " +
                                                        shape_str(x.shape()));
  const std::size_t cg = cfg.group_channels();
  std::vector<Var> outs;
  for (std::size_t g = 0; g < cfg.n_groups; ++g) {
    const std::string gp = group_name(prefix, g);
    Var xg = ad::slice(x, 0, g * cg, (g + 1) * cg);
    Var att = stlka(xg, p[gp + ".dw"], p[gp + ".dwd"], p[gp + ".pw"], cfg.scale_for(g));
    Var gate = depthwise(xg, p[gp + ".gate.w"], 1, p[gp + ".gate.b"]);
    outs.push_back(ad::mul(gate, att));
  }
  return outs.size() == 1 ? outs[0] : ad::concat(outs, 0);
}

Var channel_layer_norm(const Bindings& p, const std::string& prefix, Var x) {
  const Shape shape = x.shape();
  const std::size_t c = shape[0];
  const std::size_t positions = x.value().size() / c;
  Var t = ad::transpose(ad::reshape(x, {c, positions}));  // [P, C]
  Var n = ad::layer_norm(t);
  n = ad::add(ad::mul(n, p[prefix + ".g"]), p[prefix + ".b"]);
  return ad::reshape(ad::transpose(n), shape);
}

Var gsau(const Bindings& p, const std::string& prefix, Var u, Var v) {
  return ad::mul(depthwise(u, p[prefix + ".w"], 1), v);
}

Var lka_block(const Bindings& p, const std::string& prefix, Var h, const LkaConfig& cfg) {
  auto f = [&](int i, Var x) {
    const std::string fp = prefix + ".f" + std::to_string(i);
    return pointwise(x, p[fp + ".w"], p[fp + ".b"]);
  };
  Var n = channel_layer_norm(p, prefix + ".ln1", h);
  Var attn = ad::mul(mstlka(p, prefix + ".lka", f(1, n), cfg), f(2, n));
  h = ad::add(h, ad::mul(p[prefix + ".lambda1"], f(3, attn)));
  n = channel_layer_norm(p, prefix + ".ln2", h);
  Var gated = gsau(p, prefix + ".gsau", f(4, n), f(5, n));
  return ad::add(h, ad::mul(p[prefix + ".lambda2"], f(6, gated)));
}

Var mstlka_block(const Bindings& p, const std::string& prefix, Var h, const LkaConfig& cfg) {
  if (h.rank() != 4) throw ShapeError(h.tape().next_label("mstlka_block"), "expected [C, T, H, W], got " + shape_str(h.shape()));
  return lka_block(p, prefix, h, cfg);
}

Var mftlka_block(const Bindings& p, const std::string& prefix, Var h, const LkaConfig& cfg) {
  if (h.rank() != 3) throw ShapeError(h.tape().next_label("mftlka_block"), "expected [C, T, F], got " + shape_str(h.shape()));
  return lka_block(p, prefix, h, cfg);
}

void init_block(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t spatial_rank, const LkaConfig& cfg) {
  cfg.validate();
  const std::size_t c = cfg.channels;
  const std::size_t cg = cfg.group_channels();
  for (const char* ln : {".ln1", ".ln2"}) {
    store.init_constant(prefix + ln + ".g", {c}, 1.0);
    store.init_constant(prefix + ln + ".b", {c}, 0.0);
  }
  for (int i = 1; i <= 6; ++i) {
    const std::string fp = prefix + ".f" + std::to_string(i);
    store.set(fp + ".w", rng.xavier({c, c}, c, c));
    store.init_constant(fp + ".b", {c}, 0.0);
  }
  store.init_constant(prefix + ".lambda1", {}, 0.0);
  store.init_constant(prefix + ".lambda2", {}, 0.0);
  for (std::size_t g = 0; g < cfg.n_groups; ++g) {
    const std::string gp = group_name(prefix + ".lka", g);
    const Scale s = cfg.scale_for(g);
    const std::size_t k1 = dw_extent(s), k2 = dwd_extent(s);
    store.set(gp + ".dw", rng.xavier(kernel_shape(cg, 1, k1, spatial_rank), taps(k1, spatial_rank), taps(k1, spatial_rank)));
    store.set(gp + ".dwd", rng.xavier(kernel_shape(cg, 1, k2, spatial_rank), taps(k2, spatial_rank), taps(k2, spatial_rank)));
    store.set(gp + ".pw", rng.xavier({cg, cg}, cg, cg));
    const std::size_t kg = cfg.gate_kernel;
    store.set(gp + ".gate.w", rng.xavier(kernel_shape(cg, 1, kg, spatial_rank), taps(kg, spatial_rank), taps(kg, spatial_rank)));
    store.init_constant(gp + ".gate.b", {cg}, 0.0);
  }
  const std::size_t ks = cfg.gsau_kernel;
  store.set(prefix + ".gsau.w", rng.xavier(kernel_shape(c, 1, ks, spatial_rank), taps(ks, spatial_rank), taps(ks, spatial_rank)));
}

void check_depth(std::size_t depth, const LkaConfig& cfg) {
  if (depth % 2 != 0 && !cfg.allow_odd_depth)
    throw ConfigError("deep_stack: depth " + std::to_string(depth) + " is odd; set allow_odd_depth to override");
}

void init_stack(ParamStore& store, Rng& rng, std::size_t depth, const LkaConfig& cfg) {
  check_depth(depth, cfg);
  for (std::size_t i = 0; i < depth; ++i) {
    init_block(store, rng, video_block_name(i), 3, cfg);
    init_block(store, rng, audio_block_name(i), 2, cfg);
  }
}

std::pair<Var, Var> deep_stack(const Bindings& p, Var video, Var audio, std::size_t depth, const LkaConfig& cfg,
                               const FusionHook& hook) {
  check_depth(depth, cfg);
  for (std::size_t i = 0; i < depth; ++i) {
    video = mstlka_block(p, video_block_name(i), video, cfg);
    audio = mftlka_block(p, audio_block_name(i), audio, cfg);
    if (hook) std::tie(video, audio) = hook(i, video, audio);
  }
  return {video, audio};
}

}  // namespace macb::lka
