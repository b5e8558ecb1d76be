#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "macb/audio.hpp"
#include "macb/error.hpp"
#include "macb/rng.hpp"

using namespace macb;
using namespace macb::audio;

namespace {

Tensor sine(std::size_t n, double freq, double sr, double amp = 1.0) {
  Tensor s({n});
  for (std::size_t i = 0; i < n; ++i) s[i] = amp * std::sin(2.0 * std::numbers::pi * freq * i / sr);
  return s;
}

}  // namespace

TEST(MelConfig, Validation) {
  MelConfig c;
  EXPECT_NO_THROW(c.validate());
  c.hop = 500;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.f_max = 9000;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.n_mels = 1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Stft, FrameCount) {
  MelConfig c;
  EXPECT_EQ(frame_count(400, c), 1u);
  EXPECT_EQ(frame_count(5360, c), 32u);
  EXPECT_EQ(stft(Tensor({5360}), c).shape(), (Shape{32, 257}));
  EXPECT_GE(signal_length_for(32, c), 5360u);
  EXPECT_EQ(frame_count(signal_length_for(32, c), c), 32u);
}

TEST(Stft, ShortSignalRaises) {
  EXPECT_THROW(stft(Tensor({399}), MelConfig{}), ShapeError);
}

TEST(Stft, ZeroSignal) {
  const Tensor s = stft(Tensor({1000}), MelConfig{});
  for (double v : s.data()) EXPECT_EQ(v, 0.0);
}

TEST(Stft, DcLandsInBinZero) {
  // Periodic Hann has no leakage into bin 1 of a full-length DFT; with zero
  // padding to 512 the DC energy still dominates bin 0.
  MelConfig c;
  c.window = c.fft_size = 512;
  c.hop = 256;
  const Tensor s = stft(Tensor({512}, 1.0), c);
  double total = 0.0;
  for (double v : s.data()) total += v * v;
  EXPECT_GT(s[0] * s[0] / total, 0.6);
  for (std::size_t f = 2; f < c.bins(); ++f) EXPECT_LT(s[f], 1e-9) << f;
}

TEST(Stft, BinCenteredSineConcentratesEnergy) {
  MelConfig c;
  const std::size_t bin = 40;
  const double freq = bin * c.sample_rate / c.fft_size;
  const Tensor s = stft(sine(2000, freq, c.sample_rate), c);
  for (std::size_t t = 0; t < s.dim(0); ++t) {
    double total = 0.0, lobe = 0.0;
    for (std::size_t f = 0; f < c.bins(); ++f) {
      const double e = s[t * c.bins() + f] * s[t * c.bins() + f];
      total += e;
      if (f + 2 >= bin && f <= bin + 2) lobe += e;
    }
    EXPECT_GT(lobe / total, 0.9) << "frame " << t;
    std::size_t arg = 0;
    for (std::size_t f = 1; f < c.bins(); ++f)
      if (s[t * c.bins() + f] > s[t * c.bins() + arg]) arg = f;
    EXPECT_EQ(arg, bin);
  }
}

TEST(Fft, Radix2MatchesDirectDft) {
  Rng rng(9);
  for (std::size_t n : {1u, 2u, 8u, 64u, 512u}) {
    std::vector<double> x(n);
    for (auto& v : x) v = rng.normal();
    const auto a = dft(x), b = fft_radix2(x);
    for (std::size_t k = 0; k < n; ++k) EXPECT_LT(std::abs(a[k] - b[k]), 1e-9);
  }
  std::vector<double> bad(6);
  EXPECT_THROW(fft_radix2(bad), ConfigError);
}

TEST(Stft, MethodsAgree) {
  Rng rng(4);
  const Tensor sig = rng.normal_tensor({1200});
  EXPECT_LT(max_abs_diff(stft(sig, MelConfig{}, FftMethod::kDirect), stft(sig, MelConfig{}, FftMethod::kRadix2)), 1e-9);
}

TEST(Stft, DirectDftOracleOnOneFrame) {
  MelConfig c;
  Rng rng(8);
  const Tensor sig = rng.normal_tensor({c.window});
  const auto win = hann_window(c.window);
  const Tensor s = stft(sig, c);
  for (std::size_t f = 0; f < c.bins(); ++f) {
    double re = 0.0, im = 0.0;
    for (std::size_t n = 0; n < c.window; ++n) {
      const double ang = -2.0 * std::numbers::pi * f * n / c.fft_size;
      re += sig[n] * win[n] * std::cos(ang);
      im += sig[n] * win[n] * std::sin(ang);
    }
    EXPECT_NEAR(s[f], std::hypot(re, im), 1e-9);
  }
}

TEST(Hann, Periodic) {
  const auto w = hann_window(4);
  EXPECT_NEAR(w[0], 0.0, 1e-15);
  EXPECT_NEAR(w[1], 0.5, 1e-15);
  EXPECT_NEAR(w[2], 1.0, 1e-15);
  EXPECT_NEAR(w[3], 0.5, 1e-15);
}

TEST(Mel, ScaleRoundTrip) {
  for (double hz : {0.0, 100.0, 1000.0, 7999.0}) EXPECT_NEAR(mel_to_hz(hz_to_mel(hz)), hz, 1e-9);
}

TEST(Mel, FilterRowsNonNegativeAndNonEmpty) {
  const Tensor fb = mel_filterbank(MelConfig{});
  ASSERT_EQ(fb.shape(), (Shape{64, 257}));
  for (std::size_t m = 0; m < 64; ++m) {
    double mx = 0.0;
    for (std::size_t f = 0; f < 257; ++f) {
      EXPECT_GE(fb[m * 257 + f], 0.0);
      mx = std::max(mx, fb[m * 257 + f]);
    }
    EXPECT_GT(mx, 0.0) << "row " << m;
  }
}

TEST(Mel, ProjectMatchesDoubleLoop) {
  MelConfig c;
  Rng rng(12);
  const Tensor mag = rng.uniform_tensor({5, c.bins()}, 0.0, 3.0);
  const Tensor fb = mel_filterbank(c);
  const Tensor m = mel_project(mag, fb);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t k = 0; k < c.n_mels; ++k) {
      double s = 0.0;
      for (std::size_t f = 0; f < c.bins(); ++f) s += fb[k * c.bins() + f] * mag[t * c.bins() + f] * mag[t * c.bins() + f];
      EXPECT_EQ(m[t * c.n_mels + k], s);
    }
}

TEST(Mel, OnesGiveRowSums) {
  MelConfig c;
  const Tensor fb = mel_filterbank(c);
  const Tensor m = mel_project(Tensor({1, c.bins()}, 1.0), fb);
  for (std::size_t k = 0; k < c.n_mels; ++k) {
    double s = 0.0;
    for (std::size_t f = 0; f < c.bins(); ++f) s += fb[k * c.bins() + f];
    EXPECT_NEAR(m[k], s, 1e-12);
  }
}

TEST(Mel, SingleBinPicksFilterColumn) {
  MelConfig c;
  const Tensor fb = mel_filterbank(c);
  Tensor mag({1, c.bins()});
  mag[30] = 1.0;
  const Tensor m = mel_project(mag, fb);
  for (std::size_t k = 0; k < c.n_mels; ++k) EXPECT_EQ(m[k], fb[k * c.bins() + 30]);
}

TEST(Mel, LinearInPower) {
  MelConfig c;
  Rng rng(13);
  const Tensor fb = mel_filterbank(c);
  const Tensor x = rng.uniform_tensor({3, c.bins()}, 0, 1), y = rng.uniform_tensor({3, c.bins()}, 0, 1);
  // Linear in |S|^2: feed power through sqrt.
  Tensor mix(x.shape());
  const double a = 0.7, b = 2.5;
  for (std::size_t i = 0; i < x.size(); ++i) mix[i] = std::sqrt(a * x[i] * x[i] + b * y[i] * y[i]);
  const Tensor mx = mel_project(x, fb), my = mel_project(y, fb), mm = mel_project(mix, fb);
  for (std::size_t i = 0; i < mm.size(); ++i) EXPECT_NEAR(mm[i], a * mx[i] + b * my[i], 1e-12 * (1 + std::abs(mm[i])));
}

TEST(Mel, EnergyScalesWithSquare) {
  MelConfig c;
  Rng rng(14);
  const Tensor sig = rng.normal_tensor({1000});
  Tensor sig3 = sig;
  for (auto& v : sig3.data()) v *= 3.0;
  const Tensor m1 = mel_project(stft(sig, c), c), m3 = mel_project(stft(sig3, c), c);
  for (std::size_t i = 0; i < m1.size(); ++i) EXPECT_NEAR(m3[i], 9.0 * m1[i], 1e-9 * (1 + m3[i]));
}

TEST(LogMel, FloorAndRoundTrip) {
  const double floor = 1e-6;
  const Tensor z = log_mel(Tensor({1, 2}), floor);
  EXPECT_DOUBLE_EQ(z[0], std::log(floor));
  EXPECT_NEAR(log_mel(Tensor({1}, 1.0 - floor), floor)[0], 0.0, 1e-15);
  Rng rng(15);
  const Tensor m = rng.uniform_tensor({4, 8}, 0.0, 10.0);
  const Tensor l = log_mel(m, floor);
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_NEAR(std::exp(l[i]) - floor, m[i], 1e-12 * (1 + m[i]));
}
