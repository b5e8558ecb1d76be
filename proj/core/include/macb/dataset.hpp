#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "macb/rng.hpp"
#include "macb/tensor.hpp"


// Synthetic audio-visual clips. A moving blob's vertical position drives the
// pitch of a harmonic tone; fakes replace that shared motion on a frame
// segment of one or both modalities and add rendering artifacts.
namespace macb::data {

enum class AvClass : int { kRealReal = 0, kFakeVideo = 1, kFakeAudio = 2, kFakeBoth = 3 };
const char* class_name(AvClass c);
inline bool video_fake(AvClass c) { return c == AvClass::kFakeVideo || c == AvClass::kFakeBoth; }
inline bool audio_fake(AvClass c) { return c == AvClass::kFakeAudio || c == AvClass::kFakeBoth; }

struct AvSample {
  Tensor video;         // [T, C, H, W]
  Tensor audio;         // [n_audio]
  int label = 0;        // 1 = fake
  Tensor frame_labels;  // [T], 1 where any modality is manipulated
  AvClass cls = AvClass::kRealReal;
  int identity = 0;
};

struct GenConfig {
  std::size_t n_samples = 640;
  std::size_t n_identities = 20;
  std::array<double, 4> mix = {0.4, 0.2, 0.2, 0.2};
  double delta = 0.6;
  std::size_t min_segment = 3;
  std::size_t max_segment = 5;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;
  std::size_t frames = 8;
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  double sample_rate = 16000.0;
  std::size_t audio_samples = 5360;
  double video_noise = 0.03;
  double audio_noise = 0.01;
  // Scale of the rendering artifacts on fake segments (color shift, checkerboard,
  // harmonic boost, extra audio noise); 0 leaves only the broken correlation.
  double artifact = 0.15;

  void validate() const;
};

struct Dataset {
  GenConfig config;
  std::vector<AvSample> samples;
  std::vector<int> split;  // 0 train, 1 test

  std::vector<std::size_t> indices(int which) const;
  std::vector<std::size_t> train_indices() const { return indices(0); }
  std::vector<std::size_t> test_indices() const { return indices(1); }
};

// Deterministic in cfg. Classes follow cfg.mix; the split holds out whole
// identities, chosen to keep the class mix close to the global one.
Dataset generate(const GenConfig& cfg);

void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

// Smooth trajectory in [-1, 1] evaluated at normalized time u in [0, 1].
struct Trajectory {
  double amp1 = 0.6, freq1 = 1.0, phase1 = 0.0;
  double amp2 = 0.4, freq2 = 2.0, phase2 = 0.0;
  double at(double u) const;
};
Trajectory random_trajectory(Rng& rng);

}  // namespace macb::data
