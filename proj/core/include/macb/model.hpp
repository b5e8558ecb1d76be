#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "macb/audio.hpp"
#include "macb/classify.hpp"
#include "macb/dataset.hpp"
#include "macb/encoders.hpp"
#include "macb/fusion.hpp"
#include "macb/macl.hpp"
#include "macb/mslka.hpp"

// End-to-end detector: encoders, contrastive alignment, cluster-guided
// fusion inside the large-kernel stack, joint attention and heads.
namespace macb::model {

struct Flags {
  bool use_macl = true;
  bool use_intra = true;
  bool use_cross = true;
  bool use_weights = true;
  bool use_pareto = true;
};

struct ModelConfig {
  audio::MelConfig mel;
  enc::EncoderConfig enc;
  macl::MaclConfig macl;
  fusion::FusionConfig fusion;
  lka::LkaConfig lka;
  cls::HeadConfig head;
  std::size_t depth = 2;
  double eta = 1.0;
  Flags flags;
  double aug_noise = 0.05;
  std::size_t aug_shift = 1;
  // Each video token expands to a video_sub x video_sub spatial patch of the lattice.
  std::size_t video_sub = 2;
  // Frequency extent of the audio lattice.
  std::size_t audio_freq = 4;

  void validate() const;
  Shape video_lattice() const;  // [C, T', H', W']
  Shape audio_lattice() const;  // [C, T_a, F']
};

/// A clip ready for the network: standardized log-Mel features and tags.
struct Prepared {
  Tensor video;         // [T, C, H, W]
  Tensor logmel;        // [mel_frames, n_mels]
  int label = 0;
  Tensor frame_labels;  // [T]
  macl::SampleTag tag;
};

Prepared prepare(const data::AvSample& s, const ModelConfig& cfg);
std::vector<Prepared> prepare_all(const data::Dataset& ds, const std::vector<std::size_t>& indices,
                                  const ModelConfig& cfg);

// Additive noise and a random shift of up to `max_shift` steps along axis 0,
// replicating the edge.
Tensor augment(const Tensor& x, Rng& rng, double noise, std::size_t max_shift);

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);
  Model(ModelConfig cfg, ParamStore params, ParamStore buffers);

  const ModelConfig& config() const { return cfg_; }
  ParamStore params;
  ParamStore buffers;
  macl::TemperatureState temperature;
  macl::NegativeQueue queue_v, queue_a;
  std::optional<fusion::ClusterModel> clusters_v, clusters_a;

  // Encoders and the deep stack with its lattice adapters.
  static bool is_shared(const std::string& name);

 private:
  ModelConfig cfg_;
};

void init_params(ParamStore& params, ParamStore& buffers, Rng& rng, const ModelConfig& cfg);

struct ForwardResult {
  cls::Objectives objectives;
  cls::LossParts parts;
  ad::Var prob;                 // [B]
  ad::Var x_v, x_a;             // projected embeddings [B, d_proj]
  bool has_tau = false;
  macl::TauTerms tau_terms;
  macl::GateResult gate;
  macl::MaclLosses contrastive;
  cls::SampleHeadOutput head;
  Tensor d_v, d_a;              // composite distances, [B]
  Tensor w_v, w_a;              // fusion weights of the first layer (0.5 when unused)
  std::vector<Tensor> frame_prob_v, frame_prob_a;
};

// Training mode adds contrastive losses, batch statistics and dropout, and
// needs `rng`. Evaluation mode is deterministic.
ForwardResult forward(ad::Tape& tape, const Bindings& p, const Model& model, const std::vector<const Prepared*>& batch,
                      cls::Mode mode, Rng* rng);

// Projected embeddings of every clip with constant parameters.
struct Embeddings {
  Tensor x_v, x_a;  // [N, d_proj]
};
Embeddings embed(const Model& model, const std::vector<Prepared>& clips, std::size_t batch = 16);

// Refits both modalities' cluster models from embeddings.
void refit_clusters(Model& model, const Embeddings& e, const std::vector<int>& labels, std::uint64_t seed);

}  // namespace macb::model
