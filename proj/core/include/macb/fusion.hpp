#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "macb/autodiff.hpp"
#include "macb/param_store.hpp"

// Cluster-guided modality weighting and fusion.
namespace macb::fusion {

struct FusionConfig {
  std::size_t k_max = 4;
  double beta = 0.5;
  double gamma = 0.5;
  double eps = 1e-6;
  bool label_aware = true;
  std::size_t attn_heads = 2;
  std::size_t kmeans_iters = 50;
  double kmeans_tol = 1e-6;
  double cov_reg = 1e-3;
  // Mean silhouette below this is reported as weak structure.
  double weak_silhouette = 0.5;

  void validate() const;
};

struct KMeansResult {
  Tensor centers;                      // [K, d]
  std::vector<std::size_t> assignment;
  std::size_t iterations = 0;
  bool reseeded = false;
};

KMeansResult kmeans(const Tensor& x, std::size_t k, std::uint64_t seed, std::size_t max_iters = 50,
                    double tol = 1e-6);

// Mean silhouette; singleton clusters score 0, as do points whose intra and
// nearest-other distances are both 0.
double mean_silhouette(const Tensor& x, const std::vector<std::size_t>& assignment, std::size_t k);

struct ClusterModel {
  Tensor centers;                  // [K, d]
  std::vector<Tensor> covariance;  // [d, d] each, regularized
  std::vector<Tensor> cholesky;    // lower factors of covariance
  std::vector<std::size_t> chosen_k;  // one entry per fitted group (real, fake) or a single entry
  double d_max = 1.0;
  double silhouette = 0.0;
  bool degenerate = false;
  std::vector<std::string> warnings;

  std::size_t k() const { return centers.dim(0); }
  std::size_t dim() const { return centers.dim(1); }
};

// k-means for every K in 2..k_max, keeping the best mean silhouette.
ClusterModel fit_clusters(const Tensor& x, const FusionConfig& cfg, std::uint64_t seed);

// Fits real (label 0) and fake (label 1) rows separately and pools the
// centers. Falls back to fit_clusters when cfg.label_aware is false.
ClusterModel fit_clusters_labeled(const Tensor& x, const std::vector<int>& labels, const FusionConfig& cfg,
                                  std::uint64_t seed);

// Cholesky factor of a symmetric positive-definite matrix.
Tensor cholesky(const Tensor& a);

double mahalanobis(std::span<const double> x, const ClusterModel& model, std::size_t cluster);

struct Distance {
  double mahalanobis = 0.0;
  double cosine = 0.0;  // 1 - cos(x, c)
  double composite = 0.0;
  std::size_t cluster = 0;
  bool zero_norm = false;
};

Distance composite_distance(std::span<const double> x, const ClusterModel& model, double beta);

// Composite distance of each row of x [B, d].
Tensor composite_distances(const Tensor& x, const ClusterModel& model, double beta);
// Same values on the tape; the nearest cluster is picked from the current values.
ad::Var composite_distances(ad::Var x, const ClusterModel& model, double beta);

// "<prefix>.attn" two-head batch self-attention and "<prefix>.f" scalar map.
void init_params(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t d);

// gamma * relu(f(attn(feat))) + (1 - gamma) / (D + eps), shape [B].
ad::Var importance_scores(const Bindings& p, const std::string& prefix, ad::Var feat, ad::Var distances,
                          const FusionConfig& cfg);
ad::Var importance_scores(const Bindings& p, const std::string& prefix, ad::Var feat, const Tensor& distances,
                          const FusionConfig& cfg);

struct Fused {
  ad::Var x_fused;  // [B, d]
  ad::Var w_v, w_a; // [B]
  std::vector<bool> fallback;
};

// w_v = raw_v / (raw_v + raw_a), w_a = 1 - w_v; zero sums use 0.5 / 0.5.
Fused fuse(ad::Var v_feat, ad::Var a_feat, ad::Var raw_v, ad::Var raw_a);

// Elementwise product, broadcasting x_fused over trailing lattice axes.
ad::Var modulate(ad::Var deep, ad::Var x_fused);

}  // namespace macb::fusion
