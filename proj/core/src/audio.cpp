#include "macb/audio.hpp"

#include <bit>
#include <cmath>
#include <numbers>

#include "macb/error.hpp"

namespace macb::audio {

void MelConfig::validate() const {
  if (hop == 0 || hop > window) throw ConfigError("mel: need 0 < hop <= window");
  if (window > fft_size) throw ConfigError("mel: need window <= fft_size");
  if (n_mels < 2) throw ConfigError("mel: need at least 2 mel bands");
  if (!(sample_rate > 0.0)) throw ConfigError("mel: sample_rate must be positive");
  if (!(f_min >= 0.0 && f_min < f_max && f_max <= sample_rate / 2.0))
    throw ConfigError("mel: need 0 <= f_min < f_max <= sample_rate/2");
}

std::vector<std::complex<double>> dft(std::span<const double> x) {
  const std::size_t n = x.size();
  std::vector<std::complex<double>> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    double re = 0.0, im = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      // reduce the phase index first to keep the argument small
      const double ang = -2.0 * std::numbers::pi * static_cast<double>((k * t) % n) / static_cast<double>(n);
      re += x[t] * std::cos(ang);
      im += x[t] * std::sin(ang);
    }
    out[k] = {re, im};
  }
  return out;
}

std::vector<std::complex<double>> fft_radix2(std::span<const double> x) {
  const std::size_t n = x.size();
  if (n == 0 || !std::has_single_bit(n)) throw ConfigError("fft_radix2: length must be a power of two");
  std::vector<std::complex<double>> a(x.begin(), x.end());
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t j = 0; j < len / 2; ++j) {
        const std::complex<double> w(std::cos(ang * static_cast<double>(j)), std::sin(ang * static_cast<double>(j)));
        const auto u = a[i + j];
        const auto v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
      }
    }
  }
  return a;
}

std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  return w;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::size_t frame_count(std::size_t signal_length, const MelConfig& cfg) {
  if (signal_length < cfg.window) throw ShapeError("stft", "signal shorter than one window");
  return (signal_length - cfg.window) / cfg.hop + 1;
}

std::size_t signal_length_for(std::size_t frames, const MelConfig& cfg) {
  return cfg.window + (frames - 1) * cfg.hop;
}

Tensor stft(const Tensor& signal, const MelConfig& cfg, FftMethod method) {
  cfg.validate();
  if (signal.rank() != 1) throw ShapeError("stft", "signal must be 1-D, got " + shape_str(signal.shape()));
  const std::size_t frames = frame_count(signal.size(), cfg);
  const std::size_t bins = cfg.bins();
  const bool radix2 = method == FftMethod::kRadix2 ||
                      (method == FftMethod::kAuto && std::has_single_bit(cfg.fft_size));
  const auto win = hann_window(cfg.window);
  Tensor mag({frames, bins});
  std::vector<double> buf(cfg.fft_size);
  for (std::size_t t = 0; t < frames; ++t) {
    std::fill(buf.begin(), buf.end(), 0.0);
    for (std::size_t i = 0; i < cfg.window; ++i) buf[i] = signal[t * cfg.hop + i] * win[i];
    const auto spec = radix2 ? fft_radix2(buf) : dft(buf);
    for (std::size_t f = 0; f < bins; ++f) mag.at({t, f}) = std::abs(spec[f]);
  }
  return mag;
}

Tensor mel_filterbank(const MelConfig& cfg) {
  cfg.validate();
  const std::size_t bins = cfg.bins();
  const double mlo = hz_to_mel(cfg.f_min), mhi = hz_to_mel(cfg.f_max);
  std::vector<double> edges(cfg.n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(mlo + (mhi - mlo) * static_cast<double>(i) / static_cast<double>(cfg.n_mels + 1));
  Tensor fb({cfg.n_mels, bins});
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    bool any = false;
    for (std::size_t f = 0; f < bins; ++f) {
      const double hz = static_cast<double>(f) * cfg.sample_rate / static_cast<double>(cfg.fft_size);
      double w = 0.0;
      if (hz > left && hz <= center)
        w = (hz - left) / (center - left);
      else if (hz > center && hz < right)
        w = (right - hz) / (right - center);
      fb.at({m, f}) = w;
      any = any || w > 0.0;
    }
    if (!any)
      throw ConfigError("mel filter " + std::to_string(m) + " covers no FFT bin; use fewer mel bands or a larger fft");
  }
  return fb;
}

Tensor mel_project(const Tensor& magnitude, const Tensor& filterbank) {
  if (magnitude.rank() != 2 || filterbank.rank() != 2 || magnitude.dim(1) != filterbank.dim(1))
    throw ShapeError("mel_project", shape_str(magnitude.shape()) + " vs filterbank " + shape_str(filterbank.shape()));
  const std::size_t frames = magnitude.dim(0), bins = magnitude.dim(1), mels = filterbank.dim(0);
  Tensor out({frames, mels});
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t m = 0; m < mels; ++m) {
      double s = 0.0;
      for (std::size_t f = 0; f < bins; ++f) {
        const double a = magnitude[t * bins + f];
        s += filterbank[m * bins + f] * a * a;
      }
      out[t * mels + m] = s;
    }
  return out;
}

Tensor mel_project(const Tensor& magnitude, const MelConfig& cfg) {
  return mel_project(magnitude, mel_filterbank(cfg));
}

Tensor log_mel(const Tensor& mel, double floor) {
  if (!(floor > 0.0)) throw ConfigError("log_mel: floor must be positive");
  Tensor out(mel.shape());
  for (std::size_t i = 0; i < mel.size(); ++i) out[i] = std::log(mel[i] + floor);
  return out;
}

Tensor log_mel_spectrogram(const Tensor& signal, const MelConfig& cfg, double floor) {
  return log_mel(mel_project(stft(signal, cfg), cfg), floor);
}

}  // namespace macb::audio
