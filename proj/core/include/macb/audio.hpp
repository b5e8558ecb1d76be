#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

#include "macb/tensor.hpp"

// Raw waveform -> log-Mel spectrogram.
namespace macb::audio {

struct MelConfig {
  double sample_rate = 16000.0;
  std::size_t window = 400;
  std::size_t hop = 160;
  std::size_t fft_size = 512;
  std::size_t n_mels = 64;
  double f_min = 0.0;
  double f_max = 8000.0;

  // hop <= window <= fft_size, 0 <= f_min < f_max <= sample_rate / 2, n_mels >= 2
  void validate() const;
  std::size_t bins() const { return fft_size / 2 + 1; }
};

enum class FftMethod { kAuto, kDirect, kRadix2 };

// O(N^2) DFT of a real sequence; returns all N coefficients.
std::vector<std::complex<double>> dft(std::span<const double> x);
// Iterative radix-2 FFT; N must be a power of two.
std::vector<std::complex<double>> fft_radix2(std::span<const double> x);

// Periodic Hann window of length n.
std::vector<double> hann_window(std::size_t n);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// floor((len - window) / hop) + 1
std::size_t frame_count(std::size_t signal_length, const MelConfig& cfg);
// Minimum signal length that yields `frames` frames.
std::size_t signal_length_for(std::size_t frames, const MelConfig& cfg);

// |S(t, f)| of Hann-windowed frames zero-padded to fft_size: [T, fft_size/2+1].
Tensor stft(const Tensor& signal, const MelConfig& cfg, FftMethod method = FftMethod::kAuto);

// Triangular Mel filters H_m(f) over [f_min, f_max]: [n_mels, fft_size/2+1].
Tensor mel_filterbank(const MelConfig& cfg);

// M(t, m) = sum_f H_m(f) |S(t, f)|^2
Tensor mel_project(const Tensor& magnitude, const Tensor& filterbank);
Tensor mel_project(const Tensor& magnitude, const MelConfig& cfg);

// log(M + floor)
Tensor log_mel(const Tensor& mel, double floor = 1e-6);

Tensor log_mel_spectrogram(const Tensor& signal, const MelConfig& cfg, double floor = 1e-6);

}  // namespace macb::audio
