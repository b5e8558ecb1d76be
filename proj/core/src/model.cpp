#include "macb/model.hpp"

#include <algorithm>
#include <cmath>

#include "macb/error.hpp"
#include "macb/layers.hpp"
#include "macb/rng.hpp"

namespace macb::model {

using ad::Var;

namespace {

const char* const kAdapter = "adapt";

std::string adapter_name(std::size_t layer) { return std::string(kAdapter) + std::to_string(layer); }

// [C, S...] -> [C]
Var channel_mean(Var x) {
  const std::size_t c = x.dim(0);
  return ad::mean_axis(ad::reshape(x, {c, x.value().size() / c}), 1);
}

Var video_lattice(const Bindings& p, Var tokens, const ModelConfig& cfg) {
  const auto& e = cfg.enc;
  const std::size_t c = cfg.lka.channels, s = cfg.video_sub;
  Var f = nn::linear(p, "detok_v", tokens);  // [N, C s s]
  f = ad::reshape(f, {e.grid_t(), e.grid_h(), e.grid_w(), c, s, s});
  f = ad::permute(f, {3, 0, 1, 4, 2, 5});
  return ad::reshape(f, cfg.video_lattice());
}

Var audio_lattice(const Bindings& p, Var tokens, const ModelConfig& cfg) {
  const std::size_t c = cfg.lka.channels, fr = cfg.audio_freq;
  Var f = nn::linear(p, "detok_a", tokens);  // [T_a, C F]
  f = ad::reshape(f, {tokens.dim(0), c, fr});
  return ad::permute(f, {1, 0, 2});
}

// One token per video frame from [C, T', H', W'].
Var video_frames(const Bindings& p, Var lattice) {
  Var f = ad::permute(lattice, {1, 0, 2, 3});
  f = ad::reshape(f, {f.dim(0), f.value().size() / f.dim(0)});
  return nn::linear(p, "retok_v", f);
}

Var audio_steps(const Bindings& p, Var lattice) {
  Var f = ad::permute(lattice, {1, 0, 2});
  f = ad::reshape(f, {f.dim(0), f.value().size() / f.dim(0)});
  return nn::linear(p, "retok_a", f);
}

// Audio step t covers video frame t * T / T_a.
Tensor audio_frame_labels(const Tensor& video_labels, std::size_t audio_steps) {
  const std::size_t t = video_labels.size();
  Tensor out({audio_steps});
  for (std::size_t i = 0; i < audio_steps; ++i) out[i] = video_labels[i * t / audio_steps];
  return out;
}

Tensor gather_rows(const std::vector<Tensor>& rows) {
  const std::size_t w = rows.front().size();
  Tensor out({rows.size(), w});
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(rows[i].data().begin(), w, out.data().begin() + i * w);
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  mel.validate();
  enc.validate();
  macl.validate();
  fusion.validate();
  lka.validate();
  head.validate();
  lka::check_depth(depth, lka);
  if (head.d_model != enc.d_model) throw ConfigError("model: head width must equal encoder width");
  if (enc.n_mels != mel.n_mels) throw ConfigError("model: encoder and Mel front-end disagree on n_mels");
  if (eta < 0.0) throw ConfigError("model: eta must be >= 0");
  if (video_sub == 0 || audio_freq == 0) throw ConfigError("model: lattice extents must be positive");
  if (enc.video_frames % enc.grid_t() != 0) throw ConfigError("model: video frames must split evenly");
}

Shape ModelConfig::video_lattice() const {
  return {lka.channels, enc.grid_t(), enc.grid_h() * video_sub, enc.grid_w() * video_sub};
}

Shape ModelConfig::audio_lattice() const { return {lka.channels, enc.audio_tokens(), audio_freq}; }

Prepared prepare(const data::AvSample& s, const ModelConfig& cfg) {
  Prepared p;
  p.video = s.video;
  Tensor lm = audio::log_mel_spectrogram(s.audio, cfg.mel);
  if (lm.dim(0) < cfg.enc.mel_frames)
    throw ShapeError("prepare", "clip yields " + std::to_string(lm.dim(0)) + " Mel frames, need " +
                                    std::to_string(cfg.enc.mel_frames));
  Tensor crop({cfg.enc.mel_frames, lm.dim(1)});
  std::copy_n(lm.data().begin(), crop.size(), crop.data().begin());
  double mean = 0.0, var = 0.0;
  for (double v : crop.data()) mean += v;
  mean /= static_cast<double>(crop.size());
  for (double v : crop.data()) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(crop.size())) + 1e-8;
  for (auto& v : crop.data()) v = (v - mean) / sd;
  p.logmel = std::move(crop);
  p.label = s.label;
  p.frame_labels = s.frame_labels;
  p.tag = {s.identity, static_cast<int>(s.cls)};
  return p;
}

std::vector<Prepared> prepare_all(const data::Dataset& ds, const std::vector<std::size_t>& indices,
                                  const ModelConfig& cfg) {
  std::vector<Prepared> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(prepare(ds.samples.at(i), cfg));
  return out;
}

Tensor augment(const Tensor& x, Rng& rng, double noise, std::size_t max_shift) {
  const std::size_t t = x.dim(0);
  const std::size_t row = x.size() / t;
  const long shift = max_shift == 0 ? 0 : static_cast<long>(rng.index(2 * max_shift + 1)) - static_cast<long>(max_shift);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < t; ++i) {
    const long src = std::clamp(static_cast<long>(i) - shift, 0L, static_cast<long>(t) - 1);
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(src) * row), row,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * row));
  }
  for (auto& v : out.data()) v += rng.normal(0.0, noise);
  return out;
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  init_params(params, buffers, rng, cfg_);
  temperature = macl::initial_temperature(cfg_.macl);
  queue_v = macl::NegativeQueue(cfg_.macl.queue_size, cfg_.macl.d_proj);
  queue_a = macl::NegativeQueue(cfg_.macl.queue_size, cfg_.macl.d_proj);
}

Model::Model(ModelConfig cfg, ParamStore p, ParamStore b) : params(std::move(p)), buffers(std::move(b)), cfg_(std::move(cfg)) {
  cfg_.validate();
  temperature = macl::initial_temperature(cfg_.macl);
  queue_v = macl::NegativeQueue(cfg_.macl.queue_size, cfg_.macl.d_proj);
  queue_a = macl::NegativeQueue(cfg_.macl.queue_size, cfg_.macl.d_proj);
}

bool Model::is_shared(const std::string& name) {
  for (const char* pre : {"enc_v.", "enc_a.", "lka_", "detok_", "retok_", kAdapter})
    if (name.rfind(pre, 0) == 0) return true;
  return false;
}

void init_params(ParamStore& params, ParamStore& buffers, Rng& rng, const ModelConfig& cfg) {
  cfg.validate();
  enc::init_video_encoder(params, rng, cfg.enc);
  enc::init_audio_encoder(params, rng, cfg.enc);
  macl::init_params(params, rng, cfg.macl, cfg.enc.d_model);
  fusion::init_params(params, rng, "fuse_v", cfg.enc.d_model);
  fusion::init_params(params, rng, "fuse_a", cfg.enc.d_model);
  const std::size_t d = cfg.enc.d_model, c = cfg.lka.channels;
  params.init_linear(rng, "detok_v", d, c * cfg.video_sub * cfg.video_sub);
  params.init_linear(rng, "detok_a", d, c * cfg.audio_freq);
  const Shape vl = cfg.video_lattice(), al = cfg.audio_lattice();
  params.init_linear(rng, "retok_v", shape_size(vl) / vl[1], d);
  params.init_linear(rng, "retok_a", shape_size(al) / al[1], d);
  lka::init_stack(params, rng, cfg.depth, cfg.lka);
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    // Multiplier starts near 1 so modulation begins close to the identity.
    params.init_linear(rng, adapter_name(l), c, c);
    for (auto& w : params.at(adapter_name(l) + ".w").data()) w *= 0.1;
    params.init_constant(adapter_name(l) + ".b", {c}, 1.0);
  }
  cls::init_params(params, buffers, rng, cfg.head);
}

ForwardResult forward(ad::Tape& tape, const Bindings& p, const Model& model, const std::vector<const Prepared*>& batch,
                      cls::Mode mode, Rng* rng) {
  const ModelConfig& cfg = model.config();
  const bool train = mode == cls::Mode::kTrain;
  if (batch.empty()) throw ConfigError("forward: empty batch");
  if (train && !rng) throw ConfigError("forward: training mode needs a generator");
  const std::size_t b = batch.size();
  ForwardResult r;

  std::vector<Var> v_tokens, a_tokens, v_pooled, a_pooled;
  for (const Prepared* s : batch) {
    auto ev = enc::encode_video(p, tape.constant(s->video), cfg.enc);
    auto ea = enc::encode_audio(p, tape.constant(s->logmel), cfg.enc);
    v_tokens.push_back(ev.tokens);
    a_tokens.push_back(ea.tokens);
    v_pooled.push_back(ev.pooled);
    a_pooled.push_back(ea.pooled);
  }
  Var pv = ad::stack(v_pooled), pa = ad::stack(a_pooled);  // [B, d]
  r.x_v = macl::project(p, "proj_v", pv);
  r.x_a = macl::project(p, "proj_a", pa);

  std::vector<macl::SampleTag> tags;
  for (const Prepared* s : batch) tags.push_back(s->tag);
  auto zero = [&] { return tape.constant(Tensor::scalar(0.0)); };
  r.parts.av = r.parts.va = r.parts.vv = r.parts.aa = zero();
  const auto& fl = cfg.flags;
  if (train && fl.use_macl && (fl.use_cross || fl.use_intra)) {
    Var s = macl::similarity_matrix(r.x_v, r.x_a);
    Var w = macl::attention_weights(p, s);
    r.tau_terms = macl::compute_tau(p, s, w, model.temperature);
    r.gate = macl::gate_and_smooth(p, r.tau_terms.tau_new, model.temperature);
    r.has_tau = true;
    macl::MaclInputs in;
    in.x_v = r.x_v;
    in.x_a = r.x_a;
    if (fl.use_intra) {
      std::vector<Var> vv, aa;
      for (const Prepared* c : batch) {
        vv.push_back(enc::encode_video(p, tape.constant(augment(c->video, *rng, cfg.aug_noise, cfg.aug_shift)), cfg.enc).pooled);
        aa.push_back(enc::encode_audio(p, tape.constant(augment(c->logmel, *rng, cfg.aug_noise, cfg.aug_shift)), cfg.enc).pooled);
      }
      in.x_v_aug = macl::project(p, "proj_v", ad::stack(vv));
      in.x_a_aug = macl::project(p, "proj_a", ad::stack(aa));
    }
    in.queue_v = &model.queue_v;
    in.queue_a = &model.queue_a;
    in.tags = tags;
    in.tau = r.gate.tau;
    in.use_cross = fl.use_cross;
    in.use_intra = fl.use_intra;
    r.contrastive = macl::macl_total(in, cfg.macl);
    r.parts.av = r.contrastive.av;
    r.parts.va = r.contrastive.va;
    r.parts.vv = r.contrastive.vv;
    r.parts.aa = r.contrastive.aa;
  }

  // Per-sample importance, fixed across layers.
  Var raw_v, raw_a;
  r.d_v = Tensor({b}, 0.0);
  r.d_a = Tensor({b}, 0.0);
  if (fl.use_weights && model.clusters_v && model.clusters_a) {
    Var dv = fusion::composite_distances(r.x_v, *model.clusters_v, cfg.fusion.beta);
    Var da = fusion::composite_distances(r.x_a, *model.clusters_a, cfg.fusion.beta);
    r.d_v = dv.value();
    r.d_a = da.value();
    raw_v = fusion::importance_scores(p, "fuse_v", pv, dv, cfg.fusion);
    raw_a = fusion::importance_scores(p, "fuse_a", pa, da, cfg.fusion);
  } else {
    raw_v = raw_a = tape.constant(Tensor({b}, 1.0));
  }

  std::vector<Var> vl, al;
  for (std::size_t i = 0; i < b; ++i) {
    vl.push_back(video_lattice(p, v_tokens[i], cfg));
    al.push_back(audio_lattice(p, a_tokens[i], cfg));
  }
  r.w_v = Tensor({b}, 0.5);
  r.w_a = Tensor({b}, 0.5);
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    std::vector<Var> vm, am;
    for (std::size_t i = 0; i < b; ++i) {
      vl[i] = lka::mstlka_block(p, lka::video_block_name(l), vl[i], cfg.lka);
      al[i] = lka::mftlka_block(p, lka::audio_block_name(l), al[i], cfg.lka);
      vm.push_back(channel_mean(vl[i]));
      am.push_back(channel_mean(al[i]));
    }
    auto fused = fusion::fuse(ad::stack(vm), ad::stack(am), raw_v, raw_a);
    if (l == 0) {
      r.w_v = fused.w_v.value();
      r.w_a = fused.w_a.value();
    }
    Var mult = nn::linear(p, adapter_name(l), fused.x_fused);  // [B, C]
    for (std::size_t i = 0; i < b; ++i) {
      Var row = ad::reshape(ad::slice(mult, 0, i, i + 1), {cfg.lka.channels});
      vl[i] = fusion::modulate(vl[i], row);
      al[i] = fusion::modulate(al[i], row);
    }
  }

  std::vector<Var> pooled_m, fv, fa;
  std::vector<Tensor> lv, la;
  for (std::size_t i = 0; i < b; ++i) {
    Var vt = video_frames(p, vl[i]);
    Var at = audio_steps(p, al[i]);
    Var pv_i = cls::frame_head(p, cls::kFrameVideo, vt);
    Var pa_i = cls::frame_head(p, cls::kFrameAudio, at);
    r.frame_prob_v.push_back(pv_i.value());
    r.frame_prob_a.push_back(pa_i.value());
    fv.push_back(pv_i);
    fa.push_back(pa_i);
    lv.push_back(batch[i]->frame_labels);
    la.push_back(audio_frame_labels(batch[i]->frame_labels, at.dim(0)));
    auto joint = cls::rfmf(p, at, vt, cfg.head.rfmf_heads);
    pooled_m.push_back(ad::mean_axis(joint.m, 0));
  }
  r.head = cls::sample_head(p, cls::kSampleHead, ad::stack(pooled_m), mode, model.buffers, rng, cfg.head);
  r.prob = r.head.prob;
  Tensor labels({b});
  for (std::size_t i = 0; i < b; ++i) labels[i] = batch[i]->label;
  r.parts.sample = cls::sample_loss(r.prob, labels);
  Tensor flv = gather_rows(lv), fla = gather_rows(la);
  r.parts.frame_video = cls::frame_loss(ad::concat(fv, 0), flv.reshaped({flv.size()}));
  r.parts.frame_audio = cls::frame_loss(ad::concat(fa, 0), fla.reshaped({fla.size()}));
  r.objectives = cls::total_loss(r.parts, cfg.eta);
  return r;
}

Embeddings embed(const Model& model, const std::vector<Prepared>& clips, std::size_t batch) {
  const auto& cfg = model.config();
  std::vector<Tensor> xv, xa;
  for (std::size_t start = 0; start < clips.size(); start += batch) {
    ad::Tape tape;
    Bindings p;
    // Only the encoders and projections are needed.
    for (const auto& [name, value] : model.params)
      if (name.rfind("enc_", 0) == 0 || name.rfind("proj_", 0) == 0) p.set(name, tape.constant(value));
    const std::size_t end = std::min(clips.size(), start + batch);
    std::vector<Var> pv, pa;
    for (std::size_t i = start; i < end; ++i) {
      pv.push_back(enc::encode_video(p, tape.constant(clips[i].video), cfg.enc).pooled);
      pa.push_back(enc::encode_audio(p, tape.constant(clips[i].logmel), cfg.enc).pooled);
    }
    Tensor v = macl::project(p, "proj_v", ad::stack(pv)).value();
    Tensor a = macl::project(p, "proj_a", ad::stack(pa)).value();
    const std::size_t w = v.dim(1);
    for (std::size_t i = 0; i < end - start; ++i) {
      xv.emplace_back(Shape{w}, std::vector<double>(v.data().begin() + i * w, v.data().begin() + (i + 1) * w));
      xa.emplace_back(Shape{w}, std::vector<double>(a.data().begin() + i * w, a.data().begin() + (i + 1) * w));
    }
  }
  return {gather_rows(xv), gather_rows(xa)};
}

void refit_clusters(Model& model, const Embeddings& e, const std::vector<int>& labels, std::uint64_t seed) {
  const auto& fc = model.config().fusion;
  model.clusters_v = fusion::fit_clusters_labeled(e.x_v, labels, fc, mix_seed(seed, 1));
  model.clusters_a = fusion::fit_clusters_labeled(e.x_a, labels, fc, mix_seed(seed, 2));
}

}  // namespace macb::model
