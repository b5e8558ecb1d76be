#include <cmath>

#include <gtest/gtest.h>

#include "macb/conv.hpp"
#include "macb/error.hpp"
#include "macb/gradcheck.hpp"
#include "macb/mslka.hpp"
#include "macb/rng.hpp"

using namespace macb;
using namespace macb::lka;
using ad::Var;

namespace {

// Depthwise 3-D "same" convolution: effective extent e = d (k - 1) + 1, padding
// floor((e - 1) / 2) below and the rest above.
Tensor naive_dw3(const Tensor& x, const Tensor& w, std::size_t d) {
  const std::size_t c = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3), k = w.dim(2);
  const long lo = static_cast<long>((d * (k - 1)) / 2);
  Tensor y(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (long t = 0; t < static_cast<long>(T); ++t)
      for (long h = 0; h < static_cast<long>(H); ++h)
        for (long ww = 0; ww < static_cast<long>(W); ++ww) {
          double acc = 0.0;
          for (std::size_t a = 0; a < k; ++a)
            for (std::size_t b = 0; b < k; ++b)
              for (std::size_t e = 0; e < k; ++e) {
                const long ti = t + static_cast<long>(a * d) - lo, hi = h + static_cast<long>(b * d) - lo,
                           wi = ww + static_cast<long>(e * d) - lo;
                if (ti < 0 || hi < 0 || wi < 0 || ti >= static_cast<long>(T) || hi >= static_cast<long>(H) ||
                    wi >= static_cast<long>(W))
                  continue;
                acc += w[((ch * k + a) * k + b) * k + e] * x.at({ch, static_cast<std::size_t>(ti),
                                                                 static_cast<std::size_t>(hi), static_cast<std::size_t>(wi)});
              }
          y.at({ch, static_cast<std::size_t>(t), static_cast<std::size_t>(h), static_cast<std::size_t>(ww)}) = acc;
        }
  return y;
}

Tensor naive_pw(const Tensor& x, const Tensor& w) {
  const std::size_t cin = x.dim(0), cout = w.dim(0), n = x.size() / cin;
  Shape s = x.shape();
  s[0] = cout;
  Tensor y(s);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t i = 0; i < cin; ++i)
      for (std::size_t p = 0; p < n; ++p) y[o * n + p] += w[o * cin + i] * x[i * n + p];
  return y;
}

Tensor naive_stlka(const Tensor& x, const Tensor& dw, const Tensor& dwd, const Tensor& pw, Scale s) {
  return naive_pw(naive_dw3(naive_dw3(x, dw, 1), dwd, s.dilation), pw);
}

Tensor center_tap(std::size_t c, std::size_t k, std::size_t rank) {
  Shape s{c, 1};
  for (std::size_t i = 0; i < rank; ++i) s.push_back(k);
  Tensor w(s);
  const std::size_t taps = w.size() / c;
  for (std::size_t ch = 0; ch < c; ++ch) w[ch * taps + taps / 2] = 1.0;
  return w;
}

Tensor eye(std::size_t c) {
  Tensor w({c, c});
  for (std::size_t i = 0; i < c; ++i) w[i * c + i] = 1.0;
  return w;
}

LkaConfig small_cfg() {
  LkaConfig c;
  c.channels = 4;
  c.n_groups = 2;
  return c;
}

}  // namespace

TEST(LkaConfig, Validation) {
  LkaConfig c;
  EXPECT_NO_THROW(c.validate());
  c.channels = 15;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.gate_kernel = 4;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Extents, FromKernelAndDilation) {
  EXPECT_EQ(dw_extent({5, 2}), 3u);
  EXPECT_EQ(dwd_extent({5, 2}), 3u);
  EXPECT_EQ(dw_extent({9, 3}), 5u);
  EXPECT_EQ(dwd_extent({9, 3}), 3u);
  EXPECT_EQ(dwd_extent({7, 2}), 4u);
}

TEST(Stlka, IdentityKernelsPassThrough) {
  Rng rng(1);
  const Tensor x = rng.normal_tensor({2, 3, 5, 5});
  const Scale s{5, 2};
  ad::Tape t;
  Var y = stlka(t.constant(x), t.constant(center_tap(2, dw_extent(s), 3)), t.constant(center_tap(2, dwd_extent(s), 3)),
                t.constant(eye(2)), s);
  EXPECT_EQ(y.value(), x);
}

TEST(Stlka, ZeroInputZeroOutput) {
  Rng rng(2);
  const Scale s{5, 2};
  ad::Tape t;
  Var y = stlka(t.constant(Tensor({2, 3, 5, 5})), t.constant(rng.normal_tensor({2, 1, 3, 3, 3})),
                t.constant(rng.normal_tensor({2, 1, 3, 3, 3})), t.constant(rng.normal_tensor({2, 2})), s);
  for (double v : y.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Stlka, MatchesNaiveConvolutionOn50Shapes) {
  Rng rng(3);
  const Scale scales[] = {{5, 2}, {7, 2}, {9, 3}, {3, 1}};
  for (int trial = 0; trial < 50; ++trial) {
    const Scale s = scales[trial % 4];
    const std::size_t c = 1 + rng.index(3);
    const Shape xs{c, 2 + rng.index(4), 3 + rng.index(4), 3 + rng.index(4)};
    const Tensor x = rng.normal_tensor(xs);
    const Tensor dw = rng.normal_tensor({c, 1, dw_extent(s), dw_extent(s), dw_extent(s)});
    const Tensor dwd = rng.normal_tensor({c, 1, dwd_extent(s), dwd_extent(s), dwd_extent(s)});
    const Tensor pw = rng.normal_tensor({c, c});
    ad::Tape t;
    const Tensor y = stlka(t.constant(x), t.constant(dw), t.constant(dwd), t.constant(pw), s).value();
    EXPECT_LT(max_abs_diff(y, naive_stlka(x, dw, dwd, pw, s)), 1e-10) << "trial " << trial;
  }
}

TEST(Stlka, ImpulseResponseStaysInReceptiveField) {
  // K = 7, d = 2: taps at offsets {-1, 0, 1} then {-3, -1, 1, 3}, so the
  // composed response covers exactly [-4, 4] on every axis.
  const Scale s{7, 2};
  Rng rng(4);
  Tensor x({1, 11, 11, 11});
  x.at({0, 5, 5, 5}) = 1.0;
  const Tensor dw = rng.uniform_tensor({1, 1, 3, 3, 3}, 0.5, 1.5);
  const Tensor dwd = rng.uniform_tensor({1, 1, 4, 4, 4}, 0.5, 1.5);
  ad::Tape t;
  const Tensor y = stlka(t.constant(x), t.constant(dw), t.constant(dwd), t.constant(eye(1)), s).value();
  EXPECT_LT(max_abs_diff(y, naive_stlka(x, dw, dwd, eye(1), s)), 1e-12);
  for (std::size_t a = 0; a < 11; ++a)
    for (std::size_t b = 0; b < 11; ++b)
      for (std::size_t c = 0; c < 11; ++c) {
        const bool inside = std::abs(static_cast<int>(a) - 5) <= 4 && std::abs(static_cast<int>(b) - 5) <= 4 &&
                            std::abs(static_cast<int>(c) - 5) <= 4;
        if (inside)
          EXPECT_GT(y.at({0, a, b, c}), 0.0);
        else
          EXPECT_EQ(y.at({0, a, b, c}), 0.0);
      }
}

TEST(Stlka, SamePaddingAcceptsTinyInputs) {
  const Scale s{9, 3};
  ad::Tape t;
  const Tensor y = stlka(t.constant(Tensor({1, 1, 1, 1}, 1.0)), t.constant(Tensor({1, 1, 5, 5, 5})),
                         t.constant(Tensor({1, 1, 3, 3, 3})), t.constant(eye(1)), s)
                       .value();
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
}

TEST(Conv, KernelLargerThanPaddedInputRaises) {
  ad::Tape t;
  ad::ConvSpec spec;
  spec.groups = 1;
  EXPECT_THROW(ad::conv3d(t.constant(Tensor({1, 3, 3, 3})), t.constant(Tensor({1, 1, 5, 5, 5})), spec), ShapeError);
}

class Mstlka : public ::testing::Test {
 protected:
  void SetUp() override {
    Rng rng(5);
    init_block(params, rng, "b", 3, cfg);
    x = rng.normal_tensor({4, 3, 5, 5});
  }
  LkaConfig cfg = small_cfg();
  ParamStore params;
  Tensor x;
};

TEST_F(Mstlka, GroupsMatchPerGroupOracle) {
  ad::Tape t;
  const Tensor y = mstlka(bind_constants(t, params), "b.lka", t.constant(x), cfg).value();
  for (std::size_t g = 0; g < 2; ++g) {
    const std::string gp = "b.lka.g" + std::to_string(g);
    Tensor xg({2, 3, 5, 5});
    for (std::size_t i = 0; i < xg.size(); ++i) xg[i] = x[g * xg.size() + i];
    const Tensor att = naive_stlka(xg, params.at(gp + ".dw"), params.at(gp + ".dwd"), params.at(gp + ".pw"), cfg.scale_for(g));
    const Tensor gate = naive_dw3(xg, params.at(gp + ".gate.w"), 1);
    for (std::size_t i = 0; i < xg.size(); ++i)
      EXPECT_NEAR(y[g * xg.size() + i], (gate[i] + params.at(gp + ".gate.b")[i / 75]) * att[i], 1e-10);
  }
}

TEST_F(Mstlka, SingleGroupUnitGateIsStlka) {
  LkaConfig one = cfg;
  one.n_groups = 1;
  ParamStore p;
  Rng rng(6);
  init_block(p, rng, "b", 3, one);
  p.at("b.lka.g0.gate.w") = Tensor(p.at("b.lka.g0.gate.w").shape(), 0.0);
  p.at("b.lka.g0.gate.b") = Tensor({4}, 1.0);
  ad::Tape t;
  auto b = bind_constants(t, p);
  const Tensor y = mstlka(b, "b.lka", t.constant(x), one).value();
  const Tensor z = stlka(t.constant(x), b["b.lka.g0.dw"], b["b.lka.g0.dwd"], b["b.lka.g0.pw"], one.scale_for(0)).value();
  EXPECT_EQ(y, z);
}

TEST_F(Mstlka, ZeroGateZeroOutput) {
  for (std::size_t g = 0; g < 2; ++g) {
    const std::string gp = "b.lka.g" + std::to_string(g);
    params.at(gp + ".gate.w") = Tensor(params.at(gp + ".gate.w").shape(), 0.0);
  }
  ad::Tape t;
  for (double v : mstlka(bind_constants(t, params), "b.lka", t.constant(x), cfg).value().data()) EXPECT_EQ(v, 0.0);
}

TEST_F(Mstlka, IndivisibleChannelsRaise) {
  LkaConfig bad = cfg;
  bad.n_groups = 3;
  ad::Tape t;
  EXPECT_THROW(mstlka(bind_constants(t, params), "b.lka", t.constant(x), bad), ConfigError);
}

TEST_F(Mstlka, BlockIsIdentityAtZeroLambda) {
  ad::Tape t;
  EXPECT_EQ(mstlka_block(bind_constants(t, params), "b", t.constant(x), cfg).value(), x);
}

TEST_F(Mstlka, BlockPreservesShapeAndMoves) {
  params.at("b.lambda1") = Tensor::scalar(0.5);
  params.at("b.lambda2") = Tensor::scalar(0.5);
  ad::Tape t;
  const Tensor y = mstlka_block(bind_constants(t, params), "b", t.constant(x), cfg).value();
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_GT(max_abs_diff(y, x), 1e-3);
  EXPECT_THROW(mstlka_block(bind_constants(t, params), "b", t.constant(Tensor({4, 3, 5})), cfg), ShapeError);
}

TEST_F(Mstlka, ChannelLayerNormStats) {
  ad::Tape t;
  const Tensor n = channel_layer_norm(bind_constants(t, params), "b.ln1", t.constant(x)).value();
  const std::size_t positions = x.size() / 4;
  for (std::size_t p = 0; p < positions; ++p) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 4; ++c) m += n[c * positions + p];
    m /= 4;
    for (std::size_t c = 0; c < 4; ++c) v += std::pow(n[c * positions + p] - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 4, 1.0, 1e-3);
  }
}

TEST_F(Mstlka, BlockGradientsMatchFiniteDifference) {
  params.at("b.lambda1") = Tensor::scalar(0.3);
  params.at("b.lambda2") = Tensor::scalar(-0.6);
  Rng rng(7);
  TensorMap in{{"x", x}, {"r", rng.normal_tensor(x.shape())}};
  const auto rep = check_gradients(
      [&](ad::Tape&, const Bindings& b, const Bindings& i) { return ad::sum(mstlka_block(b, "b", i["x"], cfg) * i["r"]); },
      params, in, 1e-6, 5, 7);
  EXPECT_LE(rep.max_rel_error, 1e-4) << rep.worst;
}

TEST(Mftlka, IdentityShapeAndGradient) {
  const auto cfg = small_cfg();
  Rng rng(8);
  ParamStore p;
  init_block(p, rng, "a", 2, cfg);
  const Tensor h = rng.normal_tensor({4, 6, 5});
  {
    ad::Tape t;
    EXPECT_EQ(mftlka_block(bind_constants(t, p), "a", t.constant(h), cfg).value(), h);
  }
  p.at("a.lambda1") = Tensor::scalar(0.4);
  p.at("a.lambda2") = Tensor::scalar(0.4);
  TensorMap in{{"h", h}, {"r", rng.normal_tensor(h.shape())}};
  const auto rep = check_gradients(
      [&](ad::Tape&, const Bindings& b, const Bindings& i) { return ad::sum(mftlka_block(b, "a", i["h"], cfg) * i["r"]); },
      p, in, 1e-6, 5, 8);
  EXPECT_LE(rep.max_rel_error, 1e-4) << rep.worst;
}

TEST(DeepStack, DepthZeroIsIdentityAndOddRejected) {
  const auto cfg = small_cfg();
  Rng rng(9);
  ParamStore p;
  init_stack(p, rng, 0, cfg);
  ad::Tape t;
  const Tensor v = rng.normal_tensor({4, 2, 4, 4}), a = rng.normal_tensor({4, 6, 4});
  auto [ov, oa] = deep_stack(bind_constants(t, p), t.constant(v), t.constant(a), 0, cfg);
  EXPECT_EQ(ov.value(), v);
  EXPECT_EQ(oa.value(), a);
  EXPECT_THROW(init_stack(p, rng, 3, cfg), ConfigError);
  auto odd = cfg;
  odd.allow_odd_depth = true;
  EXPECT_NO_THROW(init_stack(p, rng, 3, odd));
}

TEST(DeepStack, DepthTwoIsTwoBlocksWithHook) {
  const auto cfg = small_cfg();
  Rng rng(10);
  ParamStore p;
  init_stack(p, rng, 2, cfg);
  for (const char* n : {"lka_v0", "lka_v1", "lka_a0", "lka_a1"}) {
    p.at(std::string(n) + ".lambda1") = Tensor::scalar(0.5);
    p.at(std::string(n) + ".lambda2") = Tensor::scalar(0.5);
  }
  const Tensor v = rng.normal_tensor({4, 2, 4, 4}), a = rng.normal_tensor({4, 6, 4});
  std::size_t calls = 0;
  auto hook = [&](std::size_t, Var vv, Var aa) {
    ++calls;
    return std::pair{ad::scale(vv, 0.5), aa};
  };
  ad::Tape t;
  auto b = bind_constants(t, p);
  auto [ov, oa] = deep_stack(b, t.constant(v), t.constant(a), 2, cfg, hook);
  EXPECT_EQ(calls, 2u);
  Var mv = ad::scale(mstlka_block(b, "lka_v1", ad::scale(mstlka_block(b, "lka_v0", t.constant(v), cfg), 0.5), cfg), 0.5);
  Var ma = mftlka_block(b, "lka_a1", mftlka_block(b, "lka_a0", t.constant(a), cfg), cfg);
  EXPECT_EQ(ov.value(), mv.value());
  EXPECT_EQ(oa.value(), ma.value());
}

TEST(DeepStack, Deterministic) {
  const auto cfg = small_cfg();
  auto run = [&] {
    Rng rng(11);
    ParamStore p;
    init_stack(p, rng, 4, cfg);
    for (auto& [name, v] : p)
      if (name.find("lambda") != std::string::npos) v = Tensor::scalar(0.3);
    ad::Tape t;
    return deep_stack(bind_constants(t, p), t.constant(rng.normal_tensor({4, 2, 4, 4})),
                      t.constant(rng.normal_tensor({4, 6, 4})), 4, cfg)
        .first.value();
  };
  EXPECT_EQ(run(), run());
}
