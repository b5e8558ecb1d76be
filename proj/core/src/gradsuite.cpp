#include "macb/gradsuite.hpp"

#include <cmath>
#include <algorithm>
#include <functional>
#include <memory>

#include "macb/classify.hpp"
#include "macb/conv.hpp"
#include "macb/encoders.hpp"
#include "macb/error.hpp"
#include "macb/fusion.hpp"
#include "macb/layers.hpp"
#include "macb/macl.hpp"
#include "macb/model.hpp"
#include "macb/mslka.hpp"
#include "macb/rng.hpp"

namespace macb::check {

using ad::Var;

namespace {

struct Case {
  ParamStore params;
  TensorMap inputs;
  GraphFn graph;
  std::size_t per_tensor = 0;
};

using Factory = std::function<Case(std::uint64_t seed)>;

struct Entry {
  std::string module;
  std::string name;
  Factory make;
};

// Entries bounded away from zero so kinks stay out of the probe interval.
Tensor away_from_zero(Rng& rng, Shape shape, double gap = 0.2) {
  Tensor t = rng.normal_tensor(std::move(shape));
  for (auto& v : t.data()) v = (v < 0 ? -1.0 : 1.0) * (gap + std::abs(v));
  return t;
}

// sum(y * R) with R fixed by the seed, so every output entry matters.
Var weighted_sum(Var y, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xfeed));
  return ad::sum(ad::mul(y, y.tape().constant(rng.normal_tensor(y.shape()))));
}

Entry unary(const std::string& name, std::function<Var(Var)> op, std::function<Tensor(Rng&)> init) {
  return {"autodiff", name, [=](std::uint64_t seed) {
            Rng rng(mix_seed(seed, std::hash<std::string>{}(name)));
            Case c;
            c.params.set("x", init(rng));
            c.graph = [=](ad::Tape&, const Bindings& p, const Bindings&) { return weighted_sum(op(p["x"]), seed); };
            return c;
          }};
}

Entry binary(const std::string& name, std::function<Var(Var, Var)> op, Shape a, Shape b, bool positive_b = false) {
  return {"autodiff", name, [=](std::uint64_t seed) {
            Rng rng(mix_seed(seed, std::hash<std::string>{}(name)));
            Case c;
            c.params.set("a", rng.normal_tensor(a));
            c.params.set("b", positive_b ? rng.uniform_tensor(b, 0.5, 2.0) : rng.normal_tensor(b));
            c.graph = [=](ad::Tape&, const Bindings& p, const Bindings&) { return weighted_sum(op(p["a"], p["b"]), seed); };
            return c;
          }};
}

std::vector<Entry> autodiff_entries() {
  auto normal = [](Shape s) { return [s](Rng& r) { return r.normal_tensor(s); }; };
  auto kinked = [](Shape s) { return [s](Rng& r) { return away_from_zero(r, s); }; };
  auto positive = [](Shape s) { return [s](Rng& r) { return r.uniform_tensor(s, 0.5, 2.0); }; };
  const Shape m{3, 4};
  std::vector<Entry> e;
  e.push_back(binary("add", ad::add, m, m));
  e.push_back(binary("add_broadcast", ad::add, {3, 4}, {1, 4}));
  e.push_back(binary("sub", ad::sub, m, {3, 1}));
  e.push_back(binary("mul", ad::mul, m, m));
  e.push_back(binary("mul_scalar", ad::mul, m, {}));
  e.push_back(binary("div", ad::div, m, m, true));
  e.push_back(binary("matmul", ad::matmul, {3, 4}, {4, 2}));
  e.push_back(unary("neg", ad::neg, normal(m)));
  e.push_back(unary("scale", [](Var x) { return ad::scale(x, -1.7); }, normal(m)));
  e.push_back(unary("add_scalar", [](Var x) { return ad::add_scalar(x, 0.3); }, normal(m)));
  e.push_back(unary("relu", ad::relu, kinked(m)));
  e.push_back(unary("sigmoid", ad::sigmoid, normal(m)));
  e.push_back(unary("tanh", ad::tanh, normal(m)));
  e.push_back(unary("exp", ad::exp, normal(m)));
  e.push_back(unary("log", ad::log, positive(m)));
  e.push_back(unary("abs", ad::abs, kinked(m)));
  e.push_back(unary("sqrt", ad::sqrt, positive(m)));
  e.push_back(unary("square", ad::square, normal(m)));
  e.push_back(unary("clamp", [](Var x) { return ad::clamp(x, -1.0, 1.0); },
                    [m](Rng& r) {
                      Tensor t = r.uniform_tensor(m, -0.8, 0.8);
                      t[0] = 1.5;
                      t[1] = -1.5;
                      return t;
                    }));
  e.push_back(unary("transpose", ad::transpose, normal(m)));
  e.push_back(unary("permute", [](Var x) { return ad::permute(x, {2, 0, 1}); }, normal({2, 3, 4})));
  e.push_back(unary("reshape", [](Var x) { return ad::reshape(x, {6, 2}); }, normal(m)));
  e.push_back(unary("softmax", ad::softmax, normal(m)));
  e.push_back(unary("log_softmax", ad::log_softmax, normal(m)));
  e.push_back(unary("layer_norm", [](Var x) { return ad::layer_norm(x); }, normal(m)));
  e.push_back(unary("sum", ad::sum, normal(m)));
  e.push_back(unary("mean", ad::mean, normal(m)));
  e.push_back(unary("sum_axis", [](Var x) { return ad::sum_axis(x, 1); }, normal({2, 3, 4})));
  e.push_back(unary("mean_axis", [](Var x) { return ad::mean_axis(x, 0, true); }, normal(m)));
  e.push_back(unary("var", ad::var, normal(m)));
  e.push_back(unary("var_axis", [](Var x) { return ad::var_axis(x, 0); }, normal(m)));
  e.push_back(unary("slice", [](Var x) { return ad::slice(x, 1, 1, 3); }, normal(m)));
  e.push_back(binary("concat", [](Var a, Var b) { return ad::concat({a, b}, 1); }, {3, 2}, {3, 4}));
  e.push_back(binary("stack", [](Var a, Var b) { return ad::stack({a, b}); }, {3}, {3}));
  return e;
}

Entry conv_entry(const std::string& name, Shape input, Shape weight, std::size_t groups, std::size_t dilation) {
  return {"conv", name, [=](std::uint64_t seed) {
            Rng rng(mix_seed(seed, std::hash<std::string>{}(name)));
            Case c;
            c.params.set("x", rng.normal_tensor(input));
            c.params.set("w", rng.normal_tensor(weight));
            std::vector<std::size_t> k(weight.begin() + 2, weight.end());
            auto spec = ad::same_padding(k, std::vector<std::size_t>(k.size(), dilation), groups);
            c.graph = [=](ad::Tape&, const Bindings& p, const Bindings&) {
              return weighted_sum(ad::conv(p["x"], p["w"], spec), seed);
            };
            return c;
          }};
}

std::vector<Entry> conv_entries() {
  return {conv_entry("conv1d", {2, 7}, {3, 2, 3}, 1, 2), conv_entry("conv2d_depthwise", {2, 5, 4}, {2, 1, 3, 2}, 2, 1),
          conv_entry("conv3d_dilated", {2, 3, 5, 5}, {2, 1, 3, 3, 3}, 2, 2),
          conv_entry("conv3d_dense", {2, 3, 4, 4}, {2, 2, 2, 2, 2}, 1, 1)};
}

enc::EncoderConfig small_encoder() {
  enc::EncoderConfig e;
  e.d_model = 8;
  e.n_heads = 2;
  e.d_ff = 12;
  e.n_layers = 1;
  e.video_frames = 2;
  e.video_height = e.video_width = 8;
  e.patch_h = e.patch_w = 4;
  e.mel_frames = 4;
  e.n_mels = 6;
  return e;
}

std::vector<Entry> encoder_entries() {
  std::vector<Entry> e;
  e.push_back({"encoders", "video_encoder", [](std::uint64_t seed) {
                 Rng rng(mix_seed(seed, 21));
                 const auto cfg = small_encoder();
                 Case c;
                 enc::init_video_encoder(c.params, rng, cfg);
                 c.inputs["video"] = rng.normal_tensor({cfg.video_frames, cfg.video_channels, cfg.video_height, cfg.video_width});
                 c.graph = [=](ad::Tape&, const Bindings& p, const Bindings& in) {
                   auto out = enc::encode_video(p, in["video"], cfg);
                   return ad::add(weighted_sum(out.tokens, seed), weighted_sum(out.pooled, seed + 1));
                 };
                 c.per_tensor = 4;
                 return c;
               }});
  e.push_back({"encoders", "audio_encoder", [](std::uint64_t seed) {
                 Rng rng(mix_seed(seed, 22));
                 const auto cfg = small_encoder();
                 Case c;
                 enc::init_audio_encoder(c.params, rng, cfg);
                 c.inputs["logmel"] = rng.normal_tensor({cfg.mel_frames, cfg.n_mels});
                 c.graph = [=](ad::Tape&, const Bindings& p, const Bindings& in) {
                   return weighted_sum(enc::encode_audio(p, in["logmel"], cfg).tokens, seed);
                 };
                 c.per_tensor = 4;
                 return c;
               }});
  return e;
}

// Random unit rows.
Tensor unit_rows(Rng& rng, std::size_t n, std::size_t d) {
  Tensor t = rng.normal_tensor({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += t[i * d + j] * t[i * d + j];
    for (std::size_t j = 0; j < d; ++j) t[i * d + j] /= std::sqrt(s);
  }
  return t;
}

std::vector<Entry> macl_entries() {
  enum class Which { kAv, kVa, kVv, kAa, kTotal };
  auto make = [](const std::string& name, Which which) {
    return Entry{"macl", name, [=](std::uint64_t seed) {
                   Rng rng(mix_seed(seed, 31 + static_cast<int>(which)));
                   const std::size_t b = 4, d = 6, dm = 8;
                   macl::MaclConfig mc;
                   mc.d_proj = d;
                   mc.queue_size = 6;
                   Case c;
                   macl::init_params(c.params, rng, mc, dm);
                   c.params.at("tau.beta") = rng.uniform_tensor({3}, -0.3, 0.3);
                   for (const char* k : {"fv", "fa", "fv2", "fa2"}) c.params.set(k, rng.normal_tensor({b, dm}));
                   auto qv = std::make_shared<macl::NegativeQueue>(mc.queue_size, d);
                   auto qa = std::make_shared<macl::NegativeQueue>(mc.queue_size, d);
                   std::vector<macl::SampleTag> tags, qtags;
                   for (std::size_t i = 0; i < b; ++i) tags.push_back({static_cast<int>(i % 2), static_cast<int>(i % 3)});
                   for (std::size_t i = 0; i < mc.queue_size; ++i) qtags.push_back({static_cast<int>(i % 3), static_cast<int>(i % 2)});
                   qv->push(unit_rows(rng, mc.queue_size, d), qtags);
                   qa->push(unit_rows(rng, mc.queue_size, d), qtags);
                   auto state = macl::initial_temperature(mc);
                   // A later step, so the history path through "tau.hist" is live.
                   state.steps = 3;
                   state.tau = 0.4;
                   state.history = {0.1, -0.2, 0.3, 0.05};
                   state.dtau_prev = 0.02;
                   state.grad_prev = -0.5;
                   mc.tau0 = 0.3;
                   state.tau0 = 0.3;
                   c.graph = [=](ad::Tape&, const Bindings& p, const Bindings&) {
                     Var xv = macl::project(p, "proj_v", p["fv"]);
                     Var xa = macl::project(p, "proj_a", p["fa"]);
                     Var s = macl::similarity_matrix(xv, xa);
                     Var w = macl::attention_weights(p, s);
                     auto terms = macl::compute_tau(p, s, w, state);
                     Var tau = macl::gate_and_smooth(p, terms.tau_new, state).tau;
                     macl::MaclInputs in;
                     in.x_v = xv;
                     in.x_a = xa;
                     in.x_v_aug = macl::project(p, "proj_v", p["fv2"]);
                     in.x_a_aug = macl::project(p, "proj_a", p["fa2"]);
                     in.queue_v = qv.get();
                     in.queue_a = qa.get();
                     in.tags = tags;
                     in.tau = tau;
                     auto l = macl::macl_total(in, mc);
                     switch (which) {
                       case Which::kAv: return l.av;
                       case Which::kVa: return l.va;
                       case Which::kVv: return l.vv;
                       case Which::kAa: return l.aa;
                       case Which::kTotal: break;
                     }
                     return l.total;
                   };
                   return c;
                 }};
  };
  return {make("L_av", Which::kAv), make("L_va", Which::kVa), make("L_vv", Which::kVv), make("L_aa", Which::kAa),
          make("L_C", Which::kTotal)};
}

Entry composite_distance_entry() {
  return {"fusion", "composite_distance", [](std::uint64_t seed) {
            Rng rng(mix_seed(seed, 42));
            const std::size_t d = 3;
            Tensor pts({40, d});
            for (std::size_t i = 0; i < 40; ++i)
              for (std::size_t j = 0; j < d; ++j) pts[i * d + j] = (i < 20 ? 2.0 : -2.0) + rng.normal();
            fusion::FusionConfig fc;
            fc.k_max = 2;
            const auto model = std::make_shared<fusion::ClusterModel>(fusion::fit_clusters(pts, fc, seed));
            Case c;
            c.params.set("x", rng.normal_tensor({5, d}));
            c.graph = [=](ad::Tape&, const Bindings& p, const Bindings&) {
              return weighted_sum(fusion::composite_distances(p["x"], *model, 0.5), seed);
            };
            return c;
          }};
}

std::vector<Entry> fusion_entries() {
  return {composite_distance_entry(), {"fusion", "importance_and_fuse", [](std::uint64_t seed) {
             Rng rng(mix_seed(seed, 41));
             const std::size_t b = 5, d = 6;
             Case c;
             fusion::init_params(c.params, rng, "fv", d);
             fusion::init_params(c.params, rng, "fa", d);
             for (const char* k : {"feat_v", "feat_a", "V", "A"}) c.params.set(k, rng.normal_tensor({b, d}));
             // Keep the attention branch clear of its ReLU kink.
             c.params.at("fv.f.b") = Tensor({1}, 2.0);
             c.params.at("fa.f.b") = Tensor({1}, 2.0);
             const Tensor dv = rng.uniform_tensor({b}, 0.1, 2.0), da = rng.uniform_tensor({b}, 0.1, 2.0);
             fusion::FusionConfig fc;
             c.graph = [=](ad::Tape&, const Bindings& p, const Bindings&) {
               Var rv = fusion::importance_scores(p, "fv", p["feat_v"], dv, fc);
               Var ra = fusion::importance_scores(p, "fa", p["feat_a"], da, fc);
               auto f = fusion::fuse(p["V"], p["A"], rv, ra);
               return ad::add(weighted_sum(f.x_fused, seed), weighted_sum(fusion::modulate(p["V"], f.x_fused), seed + 7));
             };
             return c;
           }}};
}

lka::LkaConfig small_lka() {
  lka::LkaConfig l;
  l.channels = 4;
  l.n_groups = 2;
  return l;
}

Entry block_entry(const std::string& name, Shape lattice) {
  return {"mslka", name, [=](std::uint64_t seed) {
            Rng rng(mix_seed(seed, 51 + lattice.size()));
            const auto cfg = small_lka();
            Case c;
            lka::init_block(c.params, rng, "blk", lattice.size() - 1, cfg);
            c.params.at("blk.lambda1") = Tensor::scalar(0.7);
            c.params.at("blk.lambda2") = Tensor::scalar(-0.4);
            c.inputs["h"] = rng.normal_tensor(lattice);
            c.graph = [=](ad::Tape&, const Bindings& p, const Bindings& in) {
              return weighted_sum(lka::lka_block(p, "blk", in["h"], cfg), seed);
            };
            c.per_tensor = 6;
            return c;
          }};
}

std::vector<Entry> mslka_entries() {
  return {block_entry("mstlka_block", {4, 3, 4, 4}), block_entry("mftlka_block", {4, 6, 5})};
}

std::vector<Entry> classify_entries() {
  std::vector<Entry> e;
  e.push_back({"classify", "rfmf", [](std::uint64_t seed) {
                 Rng rng(mix_seed(seed, 61));
                 Case c;
                 nn::init_attention(c.params, rng, cls::kRfmfPrefix, 8);
                 c.params.set("a", rng.normal_tensor({3, 8}));
                 c.params.set("v", rng.normal_tensor({2, 8}));
                 c.graph = [=](ad::Tape&, const Bindings& p, const Bindings&) {
                   return weighted_sum(cls::rfmf(p, p["a"], p["v"], 4).m, seed);
                 };
                 return c;
               }});
  e.push_back({"classify", "L_sample", [](std::uint64_t seed) {
                 Rng rng(mix_seed(seed, 62));
                 Case c;
                 ParamStore buffers;
                 cls::init_sample_head(c.params, buffers, rng, "head", 8);
                 c.params.set("pooled", rng.normal_tensor({6, 8}));
                 Tensor y({6});
                 for (std::size_t i = 0; i < 6; ++i) y[i] = static_cast<double>(i % 2);
                 cls::HeadConfig hc;
                 hc.d_model = 8;
                 hc.rfmf_heads = 2;
                 c.graph = [=](ad::Tape&, const Bindings& p, const Bindings&) {
                   Rng drop(mix_seed(seed, 63));
                   auto out = cls::sample_head(p, "head", p["pooled"], cls::Mode::kTrain, buffers, &drop, hc);
                   return cls::sample_loss(out.prob, y);
                 };
                 return c;
               }});
  e.push_back({"classify", "L_frame", [](std::uint64_t seed) {
                 Rng rng(mix_seed(seed, 64));
                 Case c;
                 c.params.init_linear(rng, "fr.l1", 8, 6);
                 c.params.init_linear(rng, "fr.l2", 6, 1);
                 c.params.set("feats", rng.normal_tensor({7, 8}));
                 Tensor y({7});
                 for (std::size_t i = 0; i < 7; ++i) y[i] = i == 3 ? -1.0 : static_cast<double>((i / 2) % 2);
                 c.graph = [=](ad::Tape&, const Bindings& p, const Bindings&) {
                   return cls::frame_loss(cls::frame_head(p, "fr", p["feats"]), y);
                 };
                 return c;
               }});
  return e;
}

std::vector<Entry> pipeline_entries() {
  return {{"pipeline", "total_loss_depth2", [](std::uint64_t seed) {
             data::GenConfig g;
             g.n_samples = 24;
             g.n_identities = 6;
             g.seed = seed;
             const auto ds = data::generate(g);
             model::ModelConfig mc;
             mc.depth = 2;
             auto m = std::make_shared<model::Model>(mc, mix_seed(seed, 71));
             // Non-zero residual scales so every block parameter is on the path.
             for (std::size_t l = 0; l < mc.depth; ++l)
               for (const auto& blk : {lka::video_block_name(l), lka::audio_block_name(l)}) {
                 m->params.at(blk + ".lambda1") = Tensor::scalar(0.5);
                 m->params.at(blk + ".lambda2") = Tensor::scalar(0.5);
               }
             std::vector<std::size_t> all(g.n_samples);
             for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
             auto clips = std::make_shared<std::vector<model::Prepared>>(model::prepare_all(ds, all, mc));
             std::vector<int> labels;
             for (const auto& cl : *clips) labels.push_back(cl.label);
             mc.fusion.k_max = 2;
             model::Model tmp(mc, mix_seed(seed, 71));
             tmp.params = m->params;
             model::refit_clusters(tmp, model::embed(tmp, *clips), labels, seed);
             m->clusters_v = tmp.clusters_v;
             m->clusters_a = tmp.clusters_a;
             std::vector<macl::SampleTag> tags;
             for (const auto& cl : *clips) tags.push_back(cl.tag);
             Rng qrng(mix_seed(seed, 72));
             m->queue_v.push(unit_rows(qrng, tags.size(), mc.macl.d_proj), tags);
             m->queue_a.push(unit_rows(qrng, tags.size(), mc.macl.d_proj), tags);
             Case c;
             c.params = m->params;
             c.graph = [=](ad::Tape& tape, const Bindings& p, const Bindings&) {
               std::vector<const model::Prepared*> batch;
               for (std::size_t i = 0; i < 2; ++i) batch.push_back(&(*clips)[i]);
               Rng rng(mix_seed(seed, 73));
               return model::forward(tape, p, *m, batch, cls::Mode::kTrain, &rng).objectives.total;
             };
             c.per_tensor = 1;
             return c;
           }}};
}

std::vector<Entry> all_entries() {
  std::vector<Entry> e;
  for (auto&& group : {autodiff_entries(), conv_entries(), encoder_entries(), macl_entries(), fusion_entries(),
                       mslka_entries(), classify_entries(), pipeline_entries()})
    e.insert(e.end(), group.begin(), group.end());
  return e;
}

}  // namespace

std::vector<std::string> modules() {
  return {"autodiff", "conv", "encoders", "macl", "fusion", "mslka", "classify", "pipeline"};
}

std::vector<CaseResult> run(const std::string& module, std::size_t n_seeds, double tol) {
  const auto mods = modules();
  if (module != "all" && std::find(mods.begin(), mods.end(), module) == mods.end())
    throw ConfigError("grad-check: unknown module '" + module + "'");
  std::vector<CaseResult> out;
  for (const auto& entry : all_entries()) {
    if (module != "all" && entry.module != module) continue;
    CaseResult r;
    r.module = entry.module;
    r.name = entry.name;
    for (std::size_t s = 0; s < n_seeds; ++s) {
      Case c = entry.make(s);
      const auto rep = check_gradients(c.graph, c.params, c.inputs, 1e-6, c.per_tensor, mix_seed(s, 5));
      r.coordinates += rep.coordinates;
      if (rep.max_rel_error >= r.max_rel_error) {
        r.max_rel_error = rep.max_rel_error;
        r.worst = rep.worst + " seed " + std::to_string(s);
      }
      ++r.seeds;
    }
    r.passed = r.max_rel_error <= tol;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace macb::check
