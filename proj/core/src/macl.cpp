#include "macb/macl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "macb/error.hpp"
#include "macb/layers.hpp"
#include "macb/rng.hpp"

namespace macb::macl {

using ad::Var;

namespace {
constexpr double kMasked = -1e9;
}

void MaclConfig::validate() const {
  if (margin < 0.0) throw ConfigError("macl: margin must be >= 0");
  if (queue_size < 1) throw ConfigError("macl: queue size must be >= 1");
  if (!(tau_min > 0.0 && tau_min < tau_max)) throw ConfigError("macl: need 0 < tau_min < tau_max");
  if (!(tau0 >= tau_min && tau0 <= tau_max)) throw ConfigError("macl: tau0 must lie in [tau_min, tau_max]");
  if (d_proj == 0) throw ConfigError("macl: d_proj must be positive");
}

void NegativeQueue::push(const Tensor& embeddings, const std::vector<SampleTag>& tags) {
  if (embeddings.rank() != 2 || embeddings.dim(0) != tags.size())
    throw ShapeError("NegativeQueue::push", "embeddings " + shape_str(embeddings.shape()) + " with " +
                                                std::to_string(tags.size()) + " tags");
  if (dim_ == 0) dim_ = embeddings.dim(1);
  if (embeddings.dim(1) != dim_) throw ShapeError("NegativeQueue::push", "embedding width changed");
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const auto row = embeddings.data().subspan(i * dim_, dim_);
    rows_.emplace_back(row.begin(), row.end());
    tags_.push_back(tags[i]);
    while (rows_.size() > capacity_) {
      rows_.pop_front();
      tags_.pop_front();
    }
  }
}

Tensor NegativeQueue::embeddings() const {
  if (rows_.empty()) throw ShapeError("NegativeQueue::embeddings", "queue is empty");
  std::vector<double> flat;
  flat.reserve(rows_.size() * dim_);
  for (const auto& r : rows_) flat.insert(flat.end(), r.begin(), r.end());
  return Tensor({rows_.size(), dim_}, std::move(flat));
}

TemperatureState initial_temperature(const MaclConfig& cfg) {
  cfg.validate();
  TemperatureState s;
  s.tau = cfg.tau0;
  s.tau0 = cfg.tau0;
  s.tau_min = cfg.tau_min;
  s.tau_max = cfg.tau_max;
  s.history.assign(cfg.history_dim, 0.0);
  s.h_prev.assign(cfg.history_dim, 0.0);
  return s;
}

void init_params(ParamStore& store, Rng& rng, const MaclConfig& cfg, std::size_t d_model) {
  cfg.validate();
  store.init_linear(rng, "proj_v", d_model, cfg.d_proj);
  store.init_linear(rng, "proj_a", d_model, cfg.d_proj);
  store.init_linear(rng, "tau.attn1", 3, cfg.attn_hidden);
  store.init_linear(rng, "tau.attn2", cfg.attn_hidden, 1);
  store.init_constant("tau.beta", {3}, 0.0);
  store.init_linear(rng, "tau.gate1", cfg.history_dim + 2, cfg.gate_hidden);
  store.init_linear(rng, "tau.gate2", cfg.gate_hidden, 1);
  store.set("tau.hist", rng.xavier({cfg.history_dim + 1, cfg.history_dim}, cfg.history_dim + 1, cfg.history_dim));
}

Var project(const Bindings& p, const std::string& prefix, Var features) {
  return nn::l2_normalize_rows(nn::linear(p, prefix, features));
}

Var similarity_matrix(Var x, Var y) {
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(1))
    throw ShapeError(x.tape().next_label("similarity_matrix"), shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  return ad::matmul(x, ad::transpose(y));
}

Var attention_weights(const Bindings& p, Var s) {
  const std::size_t b = s.dim(0);
  const std::size_t n = s.value().size();
  Var flat = ad::reshape(s, {n, 1});
  Var dev = ad::sub(flat, ad::mean(s));
  // |x - y| = sqrt(2 - 2 x.y) for unit vectors
  Var dist = ad::sqrt(ad::add_scalar(ad::relu(ad::add_scalar(ad::scale(flat, -2.0), 2.0)), 1e-12));
  Var feats = ad::concat({flat, dev, dist}, 1);
  Var h = ad::tanh(nn::linear(p, "tau.attn1", feats));
  Var logits = nn::linear(p, "tau.attn2", h);
  return ad::reshape(ad::softmax(ad::reshape(logits, {1, n})), {b, s.dim(1)});
}

TauTerms compute_tau(const Bindings& p, Var s, Var w, const TemperatureState& state) {
  TauTerms t;
  t.phi_var = ad::var(s);
  Var dev = ad::abs(ad::sub(s, ad::mean(s)));
  t.phi_skew = ad::sum(ad::mul(w, ad::mul(ad::square(dev), dev)));
  t.phi_entropy = ad::neg(ad::sum(ad::mul(w, ad::log(w))));
  Var phi = ad::concat({ad::reshape(t.phi_var, {1}), ad::reshape(t.phi_skew, {1}), ad::reshape(t.phi_entropy, {1})}, 0);
  Var expo = ad::sum(ad::mul(p["tau.beta"], phi));
  t.tau_new = ad::clamp(ad::scale(ad::exp(expo), state.tau0), state.tau_min, state.tau_max);
  return t;
}

GateResult gate_and_smooth(const Bindings& p, Var tau_new, const TemperatureState& state) {
  ad::Tape& tape = tau_new.tape();
  const std::size_t hd = state.history.size();
  GateResult r;
  if (state.steps == 0) {
    r.h_prev = tape.constant(Tensor({1, hd}, 0.0));
  } else {
    std::vector<double> in = state.history;
    in.push_back(state.tau);
    r.h_prev = ad::tanh(ad::matmul(tape.constant(Tensor({1, hd + 1}, std::move(in))), p["tau.hist"]));
  }
  Var stats = tape.constant(Tensor({1, 2}, {state.dtau_prev, state.grad_prev}));
  Var gate_in = ad::concat({r.h_prev, stats}, 1);
  Var hidden = ad::tanh(nn::linear(p, "tau.gate1", gate_in));
  r.gamma = ad::reshape(ad::sigmoid(nn::linear(p, "tau.gate2", hidden)), {});
  // gamma * tau_prev + (1 - gamma) * tau_new, written so equal inputs come back exactly.
  Var tn = ad::reshape(tau_new, {});
  Var blend = ad::add(tn, ad::mul(r.gamma, ad::add_scalar(ad::neg(tn), state.tau)));
  // Rounding can still push the blend an ulp past a bound.
  r.tau = ad::clamp(blend, state.tau_min, state.tau_max);
  return r;
}

void advance(TemperatureState& state, double tau_t, const Tensor& h_prev, double grad_tau) {
  if (!std::isfinite(tau_t) || !std::isfinite(grad_tau)) throw NumericalError("temperature update is not finite");
  state.history.assign(h_prev.data().begin(), h_prev.data().end());
  state.h_prev = state.history;
  state.dtau_prev = tau_t - state.tau;
  state.tau = std::clamp(tau_t, state.tau_min, state.tau_max);
  state.grad_prev = grad_tau;
  ++state.steps;
}

Var contrastive_loss(Var anchors, Var positives, const NegativeQueue& queue, const std::vector<SampleTag>& tags,
                     Var tau, const MaclConfig& cfg, ContrastiveDiagnostics* diag,
                     const std::vector<bool>& anchor_mask) {
  ad::Tape& tape = anchors.tape();
  if (anchors.shape() != positives.shape() || anchors.rank() != 2)
    throw ShapeError(tape.next_label("contrastive_loss"),
                     "anchors " + shape_str(anchors.shape()) + " vs positives " + shape_str(positives.shape()));
  const std::size_t b = anchors.dim(0);
  if (tags.size() != b) throw ShapeError(tape.next_label("contrastive_loss"), "one tag per anchor required");
  if (!anchor_mask.empty() && anchor_mask.size() != b)
    throw ShapeError(tape.next_label("contrastive_loss"), "one mask entry per anchor required");
  Var inv_tau = ad::div(tape.constant(Tensor::scalar(1.0)), ad::reshape(tau, {}));
  Var pos = ad::mul(ad::sum_axis(ad::mul(anchors, positives), 1, true), inv_tau);  // [B,1]
  ContrastiveDiagnostics local;
  local.empty_queue = queue.empty();
  Var rows = pos;
  if (!queue.empty()) {
    const std::size_t k = queue.size();
    const Tensor qe = queue.embeddings();
    Var q = tape.constant(qe);
    Var neg = ad::matmul(anchors, ad::transpose(q));  // [B,K]
    Tensor mask({b, k}, 0.0);
    const auto& qtags = queue.tags();
    for (std::size_t i = 0; i < b; ++i) {
      std::vector<std::size_t> valid;
      for (std::size_t j = 0; j < k; ++j)
        if (!(qtags[j] == tags[i])) valid.push_back(j);
      if (cfg.nearest_k && valid.size() > cfg.nearest_count) {
        const auto& nv = neg.value();
        std::stable_sort(valid.begin(), valid.end(),
                         [&](std::size_t x, std::size_t y) { return nv[i * k + x] > nv[i * k + y]; });
        valid.resize(cfg.nearest_count);
      }
      for (std::size_t j = 0; j < k; ++j) mask[i * k + j] = kMasked;
      for (auto j : valid) mask[i * k + j] = 0.0;
      local.valid_negatives += valid.size();
    }
    Var neg_logits = ad::add(ad::mul(ad::add_scalar(neg, -cfg.margin), inv_tau), tape.constant(std::move(mask)));
    rows = ad::concat({pos, neg_logits}, 1);
  }
  Var ls = ad::slice(ad::log_softmax(rows), 1, 0, 1);
  if (diag) *diag = local;
  if (anchor_mask.empty()) return ad::neg(ad::mean(ls));
  const auto active = static_cast<std::size_t>(std::count(anchor_mask.begin(), anchor_mask.end(), true));
  if (active == 0) return tape.constant(Tensor::scalar(0.0));
  Tensor w({b, 1}, 0.0);
  for (std::size_t i = 0; i < b; ++i) w[i] = anchor_mask[i] ? -1.0 / static_cast<double>(active) : 0.0;
  return ad::sum(ad::mul(ls, tape.constant(std::move(w))));
}

MaclLosses macl_total(const MaclInputs& in, const MaclConfig& cfg) {
  ad::Tape& tape = in.x_v.tape();
  MaclLosses out;
  auto zero = [&] { return tape.constant(Tensor::scalar(0.0)); };
  if (in.use_cross) {
    std::vector<bool> real;
    if (cfg.cross_real_only)
      for (const auto& t : in.tags) real.push_back(t.cls == 0);
    out.av = contrastive_loss(in.x_a, in.x_v, *in.queue_v, in.tags, in.tau, cfg, &out.diag_av, real);
    out.va = contrastive_loss(in.x_v, in.x_a, *in.queue_a, in.tags, in.tau, cfg, &out.diag_va, real);
  } else {
    out.av = zero();
    out.va = zero();
  }
  if (in.use_intra) {
    if (!in.x_v_aug.valid() || !in.x_a_aug.valid()) throw ConfigError("macl: intra-modal losses need augmented views");
    out.vv = contrastive_loss(in.x_v, in.x_v_aug, *in.queue_v, in.tags, in.tau, cfg, &out.diag_vv);
    out.aa = contrastive_loss(in.x_a, in.x_a_aug, *in.queue_a, in.tags, in.tau, cfg, &out.diag_aa);
  } else {
    out.vv = zero();
    out.aa = zero();
  }
  out.total = ad::scale(ad::add(ad::add(out.va, out.av), ad::add(out.vv, out.aa)), 0.25);
  return out;
}

FusionGuidance fusion_guidance_weights(Tensor x_v, Tensor x_a, std::vector<SampleTag> tags, std::vector<int> labels) {
  return FusionGuidance{std::move(x_v), std::move(x_a), std::move(tags), std::move(labels)};
}

}  // namespace macb::macl
