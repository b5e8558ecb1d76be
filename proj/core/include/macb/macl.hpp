#pragma once

#include <cstddef>
#include <deque>
#include <string>
#include <vector>

#include "macb/autodiff.hpp"
#include "macb/param_store.hpp"

// Multimodal adaptive contrastive learning: margin InfoNCE against negative
// queues, with a temperature driven by batch similarity statistics and
// smoothed through a learned gate.
namespace macb::macl {

struct MaclConfig {
  double margin = 0.2;
  std::size_t queue_size = 32;
  std::size_t d_proj = 16;
  double tau0 = 0.07;
  double tau_min = 0.01;
  double tau_max = 5.0;
  // Restrict each anchor's negatives to its `nearest_count` most similar
  // valid queue entries.
  bool nearest_k = false;
  std::size_t nearest_count = 8;
  // Cross-modal terms average over real anchors only: a fake clip's audio and
  // video are not a matching pair.
  bool cross_real_only = false;
  std::size_t attn_hidden = 8;
  std::size_t gate_hidden = 8;
  std::size_t history_dim = 4;

  void validate() const;
};

// Negatives must differ from the anchor in identity or authenticity class.
struct SampleTag {
  int identity = 0;
  int cls = 0;
  friend bool operator==(const SampleTag&, const SampleTag&) = default;
};

/// FIFO ring of detached, L2-normalized embeddings.
class NegativeQueue {
 public:
  explicit NegativeQueue(std::size_t capacity = 32, std::size_t dim = 0) : capacity_(capacity), dim_(dim) {}

  // Appends rows of `embeddings` [B, d], evicting the oldest beyond capacity.
  void push(const Tensor& embeddings, const std::vector<SampleTag>& tags);
  void clear() { rows_.clear(); tags_.clear(); }

  std::size_t size() const { return rows_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return rows_.empty(); }
  // [size, d], oldest first. Requires !empty().
  Tensor embeddings() const;
  const std::deque<SampleTag>& tags() const { return tags_; }

 private:
  std::size_t capacity_;
  std::size_t dim_;
  std::deque<std::vector<double>> rows_;
  std::deque<SampleTag> tags_;
};

/// Temperature history carried between steps. Values are plain numbers: the
/// graph treats them as constants.
struct TemperatureState {
  double tau = 0.07;       // tau_{t-1}
  double tau0 = 0.07;
  double tau_min = 0.01;
  double tau_max = 5.0;
  std::vector<double> history;  // h_{t-2}, input to the h_{t-1} recurrence
  std::vector<double> h_prev;   // h_{t-1} as last evaluated
  double dtau_prev = 0.0;
  double grad_prev = 0.0;
  std::size_t steps = 0;
};

TemperatureState initial_temperature(const MaclConfig& cfg);

// Projection heads "proj_v" / "proj_a", f_theta "tau.attn", coefficients
// "tau.beta", gate MLP "tau.gate" and history map "tau.hist".
void init_params(ParamStore& store, Rng& rng, const MaclConfig& cfg, std::size_t d_model);

// Linear map to d_proj, rows L2-normalized.
ad::Var project(const Bindings& p, const std::string& prefix, ad::Var features);

// S_ij = x_i . y_j
ad::Var similarity_matrix(ad::Var x, ad::Var y);

// Softmax over all B^2 entries of f_theta([s_ij, s_ij - mean(S), |x_i - y_j|]),
// the distance recovered from s_ij for unit rows.
ad::Var attention_weights(const Bindings& p, ad::Var s);

struct TauTerms {
  ad::Var phi_var;       // Var(S)
  ad::Var phi_skew;      // sum W |S - mean S|^3
  ad::Var phi_entropy;   // -sum W log W
  ad::Var tau_new;       // clamp(tau0 * exp(beta . phi), tau_min, tau_max)
};
TauTerms compute_tau(const Bindings& p, ad::Var s, ad::Var w, const TemperatureState& state);

struct GateResult {
  ad::Var tau;    // tau_t = gamma tau_{t-1} + (1 - gamma) tau_new
  ad::Var gamma;
  ad::Var h_prev; // h_{t-1}
};
GateResult gate_and_smooth(const Bindings& p, ad::Var tau_new, const TemperatureState& state);

// Commits step t: tau_t, the evaluated h_{t-1}, and dL/dtau_t.
void advance(TemperatureState& state, double tau_t, const Tensor& h_prev, double grad_tau);

struct ContrastiveDiagnostics {
  bool empty_queue = false;
  std::size_t valid_negatives = 0;
};

// -(1/B) sum_i log( e^{p_i/tau} / (e^{p_i/tau} + sum_k e^{(n_ik - m)/tau}) ),
// p_i = anchor_i . positive_i, n_ik = anchor_i . queue_k over valid k.
// With `anchor_mask` only anchors marked true enter the mean; none gives 0.
ad::Var contrastive_loss(ad::Var anchors, ad::Var positives, const NegativeQueue& queue,
                         const std::vector<SampleTag>& tags, ad::Var tau, const MaclConfig& cfg,
                         ContrastiveDiagnostics* diag = nullptr, const std::vector<bool>& anchor_mask = {});

struct MaclInputs {
  ad::Var x_v, x_a;          // main-view embeddings [B, d_proj]
  ad::Var x_v_aug, x_a_aug;  // second views; may be invalid when intra is off
  const NegativeQueue* queue_v = nullptr;
  const NegativeQueue* queue_a = nullptr;
  std::vector<SampleTag> tags;
  ad::Var tau;
  bool use_cross = true;
  bool use_intra = true;
};

struct MaclLosses {
  ad::Var av, va, vv, aa;  // disabled components are constant zeros
  ad::Var total;           // (va + av + vv + aa) / 4
  ContrastiveDiagnostics diag_av, diag_va, diag_vv, diag_aa;
};

MaclLosses macl_total(const MaclInputs& in, const MaclConfig& cfg);

// Embeddings and labels handed to cluster-guided fusion.
struct FusionGuidance {
  Tensor x_v, x_a;
  std::vector<SampleTag> tags;
  std::vector<int> labels;
};
FusionGuidance fusion_guidance_weights(Tensor x_v, Tensor x_a, std::vector<SampleTag> tags, std::vector<int> labels);

}  // namespace macb::macl
