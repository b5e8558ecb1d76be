#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "macb/error.hpp"
#include "macb/gradcheck.hpp"
#include "macb/layers.hpp"
#include "macb/macl.hpp"
#include "macb/rng.hpp"

using namespace macb;
using namespace macb::macl;
using ad::Var;

namespace {

Tensor unit_rows(Rng& rng, std::size_t n, std::size_t d) {
  Tensor t = rng.normal_tensor({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += t[i * d + j] * t[i * d + j];
    for (std::size_t j = 0; j < d; ++j) t[i * d + j] /= std::sqrt(s);
  }
  return t;
}

double dot_rows(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  const std::size_t d = a.dim(1);
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) s += a[i * d + k] * b[j * d + k];
  return s;
}

ParamStore tau_params(std::uint64_t seed) {
  Rng rng(seed);
  ParamStore p;
  MaclConfig cfg;
  init_params(p, rng, cfg, 4);
  return p;
}

// f_theta with a zero output layer is constant.
void flatten_attention(ParamStore& p) {
  for (auto& v : p.at("tau.attn2.w").data()) v = 0.0;
}

// Scalar form of the loss: -(1/B) sum_i log(e^{p_i/t} / (e^{p_i/t} + sum_k e^{(n_ik - m)/t})).
double loop_loss(const Tensor& a, const Tensor& pos, const Tensor& q, const std::vector<SampleTag>& qt,
                 const std::vector<SampleTag>& tags, double tau, double m) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    const double p = dot_rows(a, i, pos, i) / tau;
    double denom = std::exp(p);
    for (std::size_t k = 0; k < q.dim(0); ++k)
      if (!(qt[k] == tags[i])) denom += std::exp((dot_rows(a, i, q, k) - m) / tau);
    total += -(p - std::log(denom));
  }
  return total / a.dim(0);
}

}  // namespace

TEST(MaclConfig, Validation) {
  MaclConfig c;
  EXPECT_NO_THROW(c.validate());
  c.margin = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.queue_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.tau_min = 6.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Projection, RowsHaveUnitNorm) {
  Rng rng(1);
  ParamStore p;
  init_params(p, rng, MaclConfig{}, 8);
  ad::Tape t;
  const Tensor x = project(bind_constants(t, p), "proj_v", t.constant(rng.normal_tensor({5, 8}))).value();
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(dot_rows(x, i, x, i), 1.0, 1e-12);
}

TEST(Similarity, OrthonormalGivesIdentity) {
  ad::Tape t;
  const Tensor x = Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_EQ(similarity_matrix(t.constant(x), t.constant(x)).value(), x);
}

TEST(Similarity, NegatedRowsGiveMinusOneDiagonal) {
  Rng rng(2);
  const Tensor x = unit_rows(rng, 4, 5);
  Tensor y = x;
  for (auto& v : y.data()) v = -v;
  ad::Tape t;
  const Tensor s = similarity_matrix(t.constant(x), t.constant(y)).value();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(s[i * 4 + i], -1.0, 1e-12);
}

TEST(Similarity, MatchesLoopAndStaysInRange) {
  Rng rng(3);
  const Tensor x = unit_rows(rng, 5, 6), y = unit_rows(rng, 5, 6);
  ad::Tape t;
  const Tensor s = similarity_matrix(t.constant(x), t.constant(y)).value();
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      EXPECT_EQ(s[i * 5 + j], dot_rows(x, i, y, j));
      EXPECT_LE(std::abs(s[i * 5 + j]), 1.0 + 1e-12);
    }
}

TEST(AttentionWeights, ConstantScorerIsUniform) {
  auto p = tau_params(4);
  flatten_attention(p);
  Rng rng(4);
  ad::Tape t;
  const Tensor w = attention_weights(bind_constants(t, p), t.constant(rng.uniform_tensor({3, 3}, -1, 1))).value();
  for (double v : w.data()) EXPECT_NEAR(v, 1.0 / 9.0, 1e-15);
}

TEST(AttentionWeights, SingleSample) {
  auto p = tau_params(5);
  ad::Tape t;
  const Tensor w = attention_weights(bind_constants(t, p), t.constant(Tensor({1, 1}, 0.3))).value();
  EXPECT_EQ(w.shape(), (Shape{1, 1}));
  EXPECT_DOUBLE_EQ(w[0], 1.0);
}

TEST(AttentionWeights, SumToOneAndPositive) {
  auto p = tau_params(6);
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    ad::Tape t;
    const Tensor w = attention_weights(bind_constants(t, p), t.constant(rng.uniform_tensor({4, 4}, -1, 1))).value();
    double s = 0.0;
    for (double v : w.data()) {
      EXPECT_GT(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(ComputeTau, ZeroBetaGivesBase) {
  auto p = tau_params(7);
  auto state = initial_temperature(MaclConfig{});
  Rng rng(7);
  ad::Tape t;
  auto b = bind_constants(t, p);
  Var s = t.constant(rng.uniform_tensor({4, 4}, -1, 1));
  EXPECT_DOUBLE_EQ(compute_tau(b, s, attention_weights(b, s), state).tau_new.item(), 0.07);
}

TEST(ComputeTau, ConstantSimilarity) {
  auto p = tau_params(8);
  flatten_attention(p);
  p.at("tau.beta") = Tensor::vector({0.3, -0.2, 0.1});
  auto state = initial_temperature(MaclConfig{});
  ad::Tape t;
  auto b = bind_constants(t, p);
  Var s = t.constant(Tensor({3, 3}, 0.4));
  const auto terms = compute_tau(b, s, attention_weights(b, s), state);
  EXPECT_NEAR(terms.phi_var.item(), 0.0, 1e-15);
  EXPECT_NEAR(terms.phi_skew.item(), 0.0, 1e-15);
  EXPECT_NEAR(terms.phi_entropy.item(), std::log(9.0), 1e-12);
  EXPECT_NEAR(terms.tau_new.item(), 0.07 * std::exp(0.1 * std::log(9.0)), 1e-14);
}

TEST(ComputeTau, MatchesScalarRecomputation) {
  auto p = tau_params(9);
  p.at("tau.beta") = Tensor::vector({0.1, 0.05, 0.02});
  auto state = initial_temperature(MaclConfig{});
  Rng rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = unit_rows(rng, 4, 3), y = unit_rows(rng, 4, 3);
    ad::Tape t;
    auto b = bind_constants(t, p);
    Var s = similarity_matrix(t.constant(x), t.constant(y));
    Var w = attention_weights(b, s);
    const double tau = compute_tau(b, s, w, state).tau_new.item();
    const auto& sv = s.value();
    const auto& wv = w.value();
    double mean = 0.0;
    for (double v : sv.data()) mean += v;
    mean /= 16;
    double var = 0.0, skew = 0.0, ent = 0.0;
    for (std::size_t i = 0; i < 16; ++i) {
      var += (sv[i] - mean) * (sv[i] - mean) / 16;
      skew += wv[i] * std::pow(std::abs(sv[i] - mean), 3);
      ent -= wv[i] * std::log(wv[i]);
    }
    const double expect = std::clamp(0.07 * std::exp(0.1 * var + 0.05 * skew + 0.02 * ent), 0.01, 5.0);
    EXPECT_NEAR(tau, expect, 1e-14);
  }
}

TEST(ComputeTau, ClampedToBounds) {
  auto p = tau_params(10);
  p.at("tau.beta") = Tensor::vector({0, 0, 50});
  auto state = initial_temperature(MaclConfig{});
  Rng rng(10);
  ad::Tape t;
  auto b = bind_constants(t, p);
  Var s = t.constant(rng.uniform_tensor({4, 4}, -1, 1));
  EXPECT_DOUBLE_EQ(compute_tau(b, s, attention_weights(b, s), state).tau_new.item(), 5.0);
  p.at("tau.beta") = Tensor::vector({0, 0, -50});
  ad::Tape t2;
  auto b2 = bind_constants(t2, p);
  Var s2 = t2.constant(rng.uniform_tensor({4, 4}, -1, 1));
  EXPECT_DOUBLE_EQ(compute_tau(b2, s2, attention_weights(b2, s2), state).tau_new.item(), 0.01);
}

TEST(GateAndSmooth, FixedPointWhenEqual) {
  auto p = tau_params(11);
  auto state = initial_temperature(MaclConfig{});
  state.tau = 0.4;
  ad::Tape t;
  const auto g = gate_and_smooth(bind_constants(t, p), t.constant(Tensor::scalar(0.4)), state);
  EXPECT_NEAR(g.tau.item(), 0.4, 1e-15);
}

TEST(GateAndSmooth, ConvexCombinationArithmetic) {
  auto p = tau_params(12);
  auto state = initial_temperature(MaclConfig{});
  state.tau = 1.0;
  ad::Tape t;
  const auto g = gate_and_smooth(bind_constants(t, p), t.constant(Tensor::scalar(2.0)), state);
  const double gamma = g.gamma.item();
  EXPECT_GT(gamma, 0.0);
  EXPECT_LT(gamma, 1.0);
  EXPECT_NEAR(g.tau.item(), gamma * 1.0 + (1 - gamma) * 2.0, 1e-15);
}

TEST(GateAndSmooth, SaturatedGateKeepsPrevious) {
  auto p = tau_params(13);
  p.at("tau.gate2.b") = Tensor::vector({60.0});
  for (auto& v : p.at("tau.gate2.w").data()) v = 0.0;
  auto state = initial_temperature(MaclConfig{});
  state.tau = 1.0;
  ad::Tape t;
  const auto g = gate_and_smooth(bind_constants(t, p), t.constant(Tensor::scalar(2.0)), state);
  EXPECT_NEAR(g.tau.item(), 1.0, 1e-12);
}

TEST(Temperature, StaysInBoundsOverRandomStream) {
  auto p = tau_params(14);
  Rng rng(14);
  MaclConfig cfg;
  auto state = initial_temperature(cfg);
  for (int step = 0; step < 1000; ++step) {
    if (step % 50 == 0) {
      p.at("tau.beta") = rng.uniform_tensor({3}, -20, 20);
      p.at("tau.gate2.b") = rng.uniform_tensor({1}, -5, 5);
    }
    ad::Tape t;
    auto b = bind_constants(t, p);
    Var s = similarity_matrix(t.constant(unit_rows(rng, 4, 3)), t.constant(unit_rows(rng, 4, 3)));
    const auto terms = compute_tau(b, s, attention_weights(b, s), state);
    const auto g = gate_and_smooth(b, terms.tau_new, state);
    const double prev = state.tau, fresh = terms.tau_new.item(), now = g.tau.item();
    EXPECT_GE(now, std::min(prev, fresh) - 1e-15);
    EXPECT_LE(now, std::max(prev, fresh) + 1e-15);
    EXPECT_GE(now, cfg.tau_min);
    EXPECT_LE(now, cfg.tau_max);
    advance(state, now, g.h_prev.value(), rng.normal(0.0, 10.0));
  }
  EXPECT_EQ(state.steps, 1000u);
}

TEST(Temperature, AdvanceRejectsNonFinite) {
  auto state = initial_temperature(MaclConfig{});
  EXPECT_THROW(advance(state, std::nan(""), Tensor({1, 4}), 0.0), NumericalError);
}

TEST(Queue, FifoWithCapacity) {
  NegativeQueue q(3, 2);
  EXPECT_TRUE(q.empty());
  std::vector<SampleTag> tags{{0, 0}, {1, 0}};
  q.push(Tensor::matrix(2, 2, {1, 0, 0, 1}), tags);
  q.push(Tensor::matrix(2, 2, {-1, 0, 0, -1}), {{2, 1}, {3, 1}});
  EXPECT_EQ(q.size(), 3u);
  EXPECT_EQ(q.embeddings(), Tensor::matrix(3, 2, {0, 1, -1, 0, 0, -1}));
  EXPECT_EQ(q.tags().front().identity, 1);
  EXPECT_THROW(q.push(Tensor({1, 3}), {{0, 0}}), ShapeError);
}

TEST(Contrastive, ClosedFormSingleNegative) {
  NegativeQueue q(1, 2);
  q.push(Tensor::matrix(1, 2, {-1, 0}), {{1, 1}});
  MaclConfig cfg;
  cfg.margin = 0.0;
  ad::Tape t;
  Var a = t.constant(Tensor::matrix(1, 2, {1, 0}));
  const double l = contrastive_loss(a, a, q, {{0, 0}}, t.constant(Tensor::scalar(1.0)), cfg).item();
  EXPECT_NEAR(l, std::log(1 + std::exp(-2.0)), 1e-14);
}

TEST(Contrastive, HugeMarginRemovesNegatives) {
  NegativeQueue q(1, 2);
  q.push(Tensor::matrix(1, 2, {1, 0}), {{1, 1}});
  MaclConfig cfg;
  cfg.margin = 1e4;
  ad::Tape t;
  Var a = t.constant(Tensor::matrix(1, 2, {1, 0}));
  EXPECT_LT(contrastive_loss(a, a, q, {{0, 0}}, t.constant(Tensor::scalar(1.0)), cfg).item(), 1e-12);
}

TEST(Contrastive, EmptyQueueFlagged) {
  NegativeQueue q(4, 2);
  ad::Tape t;
  Var a = t.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  ContrastiveDiagnostics d;
  const double l = contrastive_loss(a, a, q, {{0, 0}, {1, 0}}, t.constant(Tensor::scalar(0.1)), MaclConfig{}, &d).item();
  EXPECT_TRUE(d.empty_queue);
  EXPECT_NEAR(l, 0.0, 1e-15);
}

TEST(Contrastive, MatchesScalarLoopWithMaskedNegatives) {
  Rng rng(15);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor a = unit_rows(rng, 4, 5), pos = unit_rows(rng, 4, 5), qe = unit_rows(rng, 4, 5);
    std::vector<SampleTag> tags{{0, 0}, {1, 1}, {2, 0}, {3, 2}}, qt{{0, 0}, {1, 0}, {2, 0}, {9, 3}};
    NegativeQueue q(4, 5);
    q.push(qe, qt);
    MaclConfig cfg;
    const double tau = rng.uniform(0.05, 2.0);
    ad::Tape t;
    ContrastiveDiagnostics d;
    const double l =
        contrastive_loss(t.constant(a), t.constant(pos), q, tags, t.constant(Tensor::scalar(tau)), cfg, &d).item();
    EXPECT_NEAR(l, loop_loss(a, pos, qe, qt, tags, tau, cfg.margin), 1e-10);
    EXPECT_EQ(d.valid_negatives, 16u - 2u);
    EXPECT_GE(l, 0.0);
  }
}

TEST(Contrastive, NearestKKeepsMostSimilar) {
  Rng rng(16);
  const Tensor a = unit_rows(rng, 2, 4), qe = unit_rows(rng, 6, 4);
  std::vector<SampleTag> tags{{0, 0}, {1, 0}}, qt(6, SampleTag{5, 1});
  NegativeQueue q(6, 4);
  q.push(qe, qt);
  MaclConfig cfg;
  cfg.nearest_k = true;
  cfg.nearest_count = 2;
  ad::Tape t;
  const double l = contrastive_loss(t.constant(a), t.constant(a), q, tags, t.constant(Tensor::scalar(0.5)), cfg).item();
  double expect = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    std::vector<double> sims;
    for (std::size_t k = 0; k < 6; ++k) sims.push_back(dot_rows(a, i, qe, k));
    std::sort(sims.rbegin(), sims.rend());
    double denom = std::exp(1.0 / 0.5);
    for (int k = 0; k < 2; ++k) denom += std::exp((sims[k] - cfg.margin) / 0.5);
    expect += -(1.0 / 0.5 - std::log(denom)) / 2;
  }
  EXPECT_NEAR(l, expect, 1e-12);
}

TEST(Contrastive, DecreasesAsPositiveSimilarityRises) {
  NegativeQueue q(2, 2);
  q.push(Tensor::matrix(2, 2, {0.6, 0.8, -1, 0}), {{1, 1}, {2, 1}});
  double prev = 1e9;
  for (double theta = 3.0; theta >= 0.0; theta -= 0.25) {
    ad::Tape t;
    Var a = t.constant(Tensor::matrix(1, 2, {1, 0}));
    Var pos = t.constant(Tensor::matrix(1, 2, {std::cos(theta), std::sin(theta)}));
    const double l = contrastive_loss(a, pos, q, {{0, 0}}, t.constant(Tensor::scalar(0.2)), MaclConfig{}).item();
    EXPECT_LT(l, prev);
    prev = l;
  }
}

TEST(Contrastive, GradientStepPullsPositivesTogether) {
  Rng rng(17);
  ParamStore p;
  p.set("a", rng.normal_tensor({2, 3}));
  p.set("v", rng.normal_tensor({2, 3}));
  const std::vector<SampleTag> tags{{0, 0}, {1, 1}};
  auto stats = [&](const ParamStore& q) {
    ad::Tape t;
    const Tensor a = nn::l2_normalize_rows(t.constant(q.at("a"))).value();
    const Tensor v = nn::l2_normalize_rows(t.constant(q.at("v"))).value();
    return std::pair{(dot_rows(a, 0, v, 0) + dot_rows(a, 1, v, 1)) / 2, (dot_rows(a, 0, v, 1) + dot_rows(a, 1, v, 0)) / 2};
  };
  // The queues hold the other modality's current batch.
  ad::Tape t0;
  NegativeQueue qv(2, 3), qa(2, 3);
  qv.push(nn::l2_normalize_rows(t0.constant(p.at("v"))).value(), tags);
  qa.push(nn::l2_normalize_rows(t0.constant(p.at("a"))).value(), tags);
  const GraphFn g = [&](ad::Tape& t, const Bindings& b, const Bindings&) {
    Var a = nn::l2_normalize_rows(b["a"]), v = nn::l2_normalize_rows(b["v"]);
    Var tau = t.constant(Tensor::scalar(0.5));
    return contrastive_loss(a, v, qv, tags, tau, MaclConfig{}) + contrastive_loss(v, a, qa, tags, tau, MaclConfig{});
  };
  const auto before = stats(p);
  const auto r = forward_backward(g, p, {});
  ParamStore q = p;
  for (auto& [name, tensor] : q)
    for (std::size_t i = 0; i < tensor.size(); ++i) tensor[i] -= 0.05 * r.grads.at(name)[i];
  const auto after = stats(q);
  EXPECT_GT(after.first, before.first);
  EXPECT_LT(after.second, before.second);
}

TEST(MaclTotal, MeanOfComponents) {
  Rng rng(18);
  ad::Tape t;
  MaclInputs in;
  in.x_v = t.constant(unit_rows(rng, 3, 4));
  in.x_a = t.constant(unit_rows(rng, 3, 4));
  in.x_v_aug = t.constant(unit_rows(rng, 3, 4));
  in.x_a_aug = t.constant(unit_rows(rng, 3, 4));
  NegativeQueue qv(4, 4), qa(4, 4);
  qv.push(unit_rows(rng, 4, 4), {{5, 0}, {6, 1}, {7, 0}, {8, 1}});
  qa.push(unit_rows(rng, 4, 4), {{5, 0}, {6, 1}, {7, 0}, {8, 1}});
  in.queue_v = &qv;
  in.queue_a = &qa;
  in.tags = {{0, 0}, {1, 1}, {2, 0}};
  in.tau = t.constant(Tensor::scalar(0.3));
  const auto l = macl_total(in, MaclConfig{});
  const double mean = (l.av.item() + l.va.item() + l.vv.item() + l.aa.item()) / 4;
  EXPECT_NEAR(l.total.item(), mean, 1e-15);
  const double av = contrastive_loss(in.x_a, in.x_v, qv, in.tags, in.tau, MaclConfig{}).item();
  EXPECT_DOUBLE_EQ(l.av.item(), av);
  in.use_intra = false;
  const auto c = macl_total(in, MaclConfig{});
  EXPECT_EQ(c.vv.item(), 0.0);
  EXPECT_NEAR(c.total.item(), (c.av.item() + c.va.item()) / 4, 1e-15);
}

TEST(FusionGuidance, PassThrough) {
  const Tensor v = Tensor::matrix(1, 2, {1, 2}), a = Tensor::matrix(1, 2, {3, 4});
  const auto g = fusion_guidance_weights(v, a, {{7, 1}}, {1});
  EXPECT_EQ(g.x_v, v);
  EXPECT_EQ(g.x_a, a);
  EXPECT_EQ(g.tags.front().identity, 7);
  EXPECT_EQ(g.labels, std::vector<int>{1});
}
