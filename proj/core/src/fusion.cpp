#include "macb/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "macb/error.hpp"
#include "macb/layers.hpp"
#include "macb/rng.hpp"

namespace macb::fusion {

using ad::Var;

namespace {

double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

std::size_t nearest(const double* x, const Tensor& centers, double* best_out = nullptr) {
  const std::size_t d = centers.dim(1);
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centers.dim(0); ++c) {
    const double v = sq_dist(x, centers.data().data() + c * d, d);
    if (v < bd) {
      bd = v;
      best = c;
    }
  }
  if (best_out) *best_out = bd;
  return best;
}

Tensor rows(const Tensor& x, const std::vector<std::size_t>& idx) {
  const std::size_t d = x.dim(1);
  Tensor out({idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(x.data().data() + idx[i] * d, d, out.data().data() + i * d);
  return out;
}

// Forward then backward substitution against L L^T.
std::vector<double> solve_lower(const Tensor& l, std::span<const double> b) {
  const std::size_t n = b.size();
  std::vector<double> z(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t j = 0; j < i; ++j) s -= l[i * n + j] * z[j];
    z[i] = s / l[i * n + i];
  }
  return z;
}

void add_covariances(ClusterModel& m, const Tensor& x, const std::vector<std::size_t>& assignment,
                     std::size_t first_cluster, double reg) {
  const std::size_t d = x.dim(1);
  for (std::size_t c = first_cluster; c < m.k(); ++c) {
    Tensor cov({d, d}, 0.0);
    std::size_t n = 0;
    const double* mu = m.centers.data().data() + c * d;
    for (std::size_t i = 0; i < assignment.size(); ++i) {
      if (assignment[i] + first_cluster != c) continue;
      ++n;
      const double* xi = x.data().data() + i * d;
      for (std::size_t r = 0; r < d; ++r)
        for (std::size_t s = 0; s < d; ++s) cov[r * d + s] += (xi[r] - mu[r]) * (xi[s] - mu[s]);
    }
    if (n > 1)
      for (auto& v : cov.data()) v /= static_cast<double>(n - 1);
    else
      std::fill(cov.data().begin(), cov.data().end(), 0.0);
    for (std::size_t r = 0; r < d; ++r) cov[r * d + r] += reg;
    m.cholesky.push_back(cholesky(cov));
    m.covariance.push_back(std::move(cov));
  }
}

struct GroupFit {
  KMeansResult km;
  double silhouette = -2.0;
  std::size_t k = 0;
};

GroupFit best_k(const Tensor& x, const FusionConfig& cfg, std::uint64_t seed) {
  const std::size_t n = x.dim(0);
  if (n < 2 * cfg.k_max)
    throw ConfigError("fit_clusters: " + std::to_string(n) + " points cannot support k_max = " +
                      std::to_string(cfg.k_max) + "; use k_max <= " + std::to_string(n / 2));
  GroupFit best;
  for (std::size_t k = 2; k <= cfg.k_max; ++k) {
    auto km = kmeans(x, k, mix_seed(seed, k), cfg.kmeans_iters, cfg.kmeans_tol);
    const double s = mean_silhouette(x, km.assignment, k);
    if (s > best.silhouette) best = GroupFit{std::move(km), s, k};
  }
  return best;
}

bool has_duplicate_centers(const Tensor& centers) {
  const std::size_t k = centers.dim(0), d = centers.dim(1);
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = a + 1; b < k; ++b)
      if (sq_dist(centers.data().data() + a * d, centers.data().data() + b * d, d) == 0.0) return true;
  return false;
}

void finish(ClusterModel& m, const Tensor& x, const FusionConfig& cfg) {
  m.d_max = 0.0;
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    const auto row = x.data().subspan(i * x.dim(1), x.dim(1));
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < m.k(); ++c) best = std::min(best, mahalanobis(row, m, c));
    m.d_max = std::max(m.d_max, best);
  }
  // All points on their centers: keep the first term finite.
  if (m.d_max <= 0.0) m.d_max = 1.0;
  if (has_duplicate_centers(m.centers)) {
    m.degenerate = true;
    m.warnings.push_back("degenerate clustering: coincident centers");
  }
  if (m.silhouette < cfg.weak_silhouette)
    m.warnings.push_back("weak cluster structure: mean silhouette " + std::to_string(m.silhouette));
}

}  // namespace

void FusionConfig::validate() const {
  if (k_max < 2) throw ConfigError("fusion: k_max must be >= 2");
  if (beta < 0.0 || beta > 1.0) throw ConfigError("fusion: beta must lie in [0, 1]");
  if (gamma < 0.0 || gamma > 1.0) throw ConfigError("fusion: gamma must lie in [0, 1]");
  if (eps <= 0.0) throw ConfigError("fusion: eps must be positive");
  if (cov_reg <= 0.0) throw ConfigError("fusion: covariance regularization must be positive");
}

KMeansResult kmeans(const Tensor& x, std::size_t k, std::uint64_t seed, std::size_t max_iters, double tol) {
  if (x.rank() != 2) throw ShapeError("kmeans", "expected [N, d], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (k == 0 || k > n) throw ConfigError("kmeans: need 1 <= k <= N");
  Rng rng(seed);
  KMeansResult r;
  r.centers = Tensor({k, d});
  const double* xs = x.data().data();
  double* cs = r.centers.data().data();

  // k-means++ seeding
  std::copy_n(xs + rng.index(n) * d, d, cs);
  std::vector<double> d2(n);
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < c; ++j) best = std::min(best, sq_dist(xs + i * d, cs + j * d, d));
      d2[i] = best;
      total += best;
    }
    std::size_t pick = 0;
    if (total <= 0.0) {
      pick = rng.index(n);
    } else {
      double u = rng.uniform(0.0, total);
      for (pick = 0; pick + 1 < n; ++pick) {
        if (u < d2[pick]) break;
        u -= d2[pick];
      }
    }
    std::copy_n(xs + pick * d, d, cs + c * d);
  }

  r.assignment.assign(n, 0);
  Tensor next({k, d});
  std::vector<std::size_t> counts(k);
  for (r.iterations = 1; r.iterations <= max_iters; ++r.iterations) {
    std::vector<double> dist(n);
    for (std::size_t i = 0; i < n; ++i) r.assignment[i] = nearest(xs + i * d, r.centers, &dist[i]);
    std::fill(next.data().begin(), next.data().end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[r.assignment[i]];
      for (std::size_t j = 0; j < d; ++j) next[r.assignment[i] * d + j] += xs[i * d + j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        // Re-seed from the point farthest from its center.
        const std::size_t far = static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin());
        std::copy_n(xs + far * d, d, next.data().data() + c * d);
        dist[far] = -1.0;
        r.reseeded = true;
        continue;
      }
      for (std::size_t j = 0; j < d; ++j) next[c * d + j] /= static_cast<double>(counts[c]);
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) shift = std::max(shift, std::sqrt(sq_dist(cs + c * d, next.data().data() + c * d, d)));
    r.centers = next;
    cs = r.centers.data().data();
    if (shift < tol) break;
  }
  r.iterations = std::min(r.iterations, max_iters);
  for (std::size_t i = 0; i < n; ++i) r.assignment[i] = nearest(xs + i * d, r.centers);
  return r;
}

double mean_silhouette(const Tensor& x, const std::vector<std::size_t>& assignment, std::size_t k) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (assignment.size() != n) throw ShapeError("mean_silhouette", "assignment length mismatch");
  std::vector<std::size_t> counts(k, 0);
  for (auto a : assignment) ++counts.at(a);
  double total = 0.0;
  std::vector<double> sums(k);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) sums[assignment[j]] += std::sqrt(sq_dist(x.data().data() + i * d, x.data().data() + j * d, d));
    const std::size_t own = assignment[i];
    if (counts[own] <= 1) continue;
    const double a = sums[own] / static_cast<double>(counts[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c)
      if (c != own && counts[c] > 0) b = std::min(b, sums[c] / static_cast<double>(counts[c]));
    if (!std::isfinite(b)) continue;
    const double denom = std::max(a, b);
    if (denom > 0.0) total += (b - a) / denom;
  }
  return total / static_cast<double>(n);
}

Tensor cholesky(const Tensor& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) throw ShapeError("cholesky", "expected a square matrix");
  const std::size_t n = a.dim(0);
  Tensor l({n, n}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = a[i * n + j];
      for (std::size_t p = 0; p < j; ++p) s -= l[i * n + p] * l[j * n + p];
      if (i == j) {
        if (!(s > 0.0)) throw NumericalError("cholesky: matrix is not positive definite");
        l[i * n + i] = std::sqrt(s);
      } else {
        l[i * n + j] = s / l[j * n + j];
      }
    }
  }
  return l;
}

ClusterModel fit_clusters(const Tensor& x, const FusionConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (x.rank() != 2) throw ShapeError("fit_clusters", "expected [N, d], got " + shape_str(x.shape()));
  auto g = best_k(x, cfg, seed);
  ClusterModel m;
  m.centers = g.km.centers;
  m.chosen_k = {g.k};
  m.silhouette = g.silhouette;
  add_covariances(m, x, g.km.assignment, 0, cfg.cov_reg);
  finish(m, x, cfg);
  return m;
}

ClusterModel fit_clusters_labeled(const Tensor& x, const std::vector<int>& labels, const FusionConfig& cfg,
                                  std::uint64_t seed) {
  if (!cfg.label_aware) return fit_clusters(x, cfg, seed);
  cfg.validate();
  if (labels.size() != x.dim(0)) throw ShapeError("fit_clusters_labeled", "one label per row required");
  const std::size_t d = x.dim(1);
  ClusterModel m;
  std::vector<double> centers;
  double sil_weighted = 0.0;
  for (int label : {0, 1}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == label) idx.push_back(i);
    if (idx.empty()) continue;
    const Tensor sub = rows(x, idx);
    auto g = best_k(sub, cfg, mix_seed(seed, static_cast<std::uint64_t>(label) + 101));
    const std::size_t first = centers.size() / d;
    centers.insert(centers.end(), g.km.centers.data().begin(), g.km.centers.data().end());
    m.centers = Tensor({centers.size() / d, d}, centers);
    add_covariances(m, sub, g.km.assignment, first, cfg.cov_reg);
    m.chosen_k.push_back(g.k);
    sil_weighted += g.silhouette * static_cast<double>(idx.size());
  }
  if (centers.empty()) throw ConfigError("fit_clusters_labeled: no labeled rows");
  m.silhouette = sil_weighted / static_cast<double>(x.dim(0));
  finish(m, x, cfg);
  return m;
}

double mahalanobis(std::span<const double> x, const ClusterModel& model, std::size_t cluster) {
  const std::size_t d = model.dim();
  if (x.size() != d) throw ShapeError("mahalanobis", "point width " + std::to_string(x.size()) + " vs " + std::to_string(d));
  std::vector<double> diff(d);
  for (std::size_t i = 0; i < d; ++i) diff[i] = x[i] - model.centers[cluster * d + i];
  const auto z = solve_lower(model.cholesky.at(cluster), diff);
  double s = 0.0;
  for (double v : z) s += v * v;
  return std::sqrt(s);
}

Distance composite_distance(std::span<const double> x, const ClusterModel& model, double beta) {
  if (beta < 0.0 || beta > 1.0) throw ConfigError("composite_distance: beta must lie in [0, 1]");
  Distance r;
  r.mahalanobis = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < model.k(); ++c) {
    const double m = mahalanobis(x, model, c);
    if (m < r.mahalanobis) {
      r.mahalanobis = m;
      r.cluster = c;
    }
  }
  const std::size_t d = model.dim();
  const double* c = model.centers.data().data() + r.cluster * d;
  double dot = 0.0, nx = 0.0, nc = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    dot += x[i] * c[i];
    nx += x[i] * x[i];
    nc += c[i] * c[i];
  }
  if (nx == 0.0 || nc == 0.0) {
    r.cosine = 1.0;
    r.zero_norm = true;
  } else {
    r.cosine = 1.0 - dot / (std::sqrt(nx) * std::sqrt(nc));
  }
  r.composite = beta * (r.mahalanobis / model.d_max) + (1.0 - beta) * r.cosine;
  return r;
}

Tensor composite_distances(const Tensor& x, const ClusterModel& model, double beta) {
  const std::size_t b = x.dim(0), d = x.dim(1);
  Tensor out({b});
  for (std::size_t i = 0; i < b; ++i) out[i] = composite_distance(x.data().subspan(i * d, d), model, beta).composite;
  return out;
}

Var composite_distances(Var x, const ClusterModel& model, double beta) {
  ad::Tape& tape = x.tape();
  if (x.rank() != 2 || x.dim(1) != model.dim())
    throw ShapeError(tape.next_label("composite_distances"), shape_str(x.shape()) + " vs cluster width " +
                                                                 std::to_string(model.dim()));
  const std::size_t b = x.dim(0), d = x.dim(1);
  // (L^-1)^T per cluster, so z = (x - c) (L^-1)^T is a row product.
  std::vector<Tensor> inv_t;
  for (std::size_t k = 0; k < model.k(); ++k) {
    Tensor m({d, d}, 0.0);
    std::vector<double> e(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
      e.assign(d, 0.0);
      e[j] = 1.0;
      const auto col = solve_lower(model.cholesky.at(k), e);
      for (std::size_t i = 0; i < d; ++i) m[j * d + i] = col[i];
    }
    inv_t.push_back(std::move(m));
  }
  std::vector<Var> out;
  for (std::size_t i = 0; i < b; ++i) {
    const auto ref = composite_distance(x.value().data().subspan(i * d, d), model, beta);
    const std::size_t k = ref.cluster;
    Tensor c({1, d});
    double nc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      c[j] = model.centers[k * d + j];
      nc += c[j] * c[j];
    }
    Var row = ad::slice(x, 0, i, i + 1);
    Var z = ad::matmul(ad::sub(row, tape.constant(c)), tape.constant(inv_t[k]));
    Var maha = ad::sqrt(ad::sum(ad::square(z)));
    Var cosine = tape.constant(Tensor::scalar(1.0));
    if (!ref.zero_norm) {
      Var dot = ad::sum(ad::mul(row, tape.constant(c)));
      cosine = ad::add_scalar(ad::neg(ad::scale(ad::div(dot, ad::sqrt(ad::sum(ad::square(row)))), 1.0 / std::sqrt(nc))), 1.0);
    }
    out.push_back(ad::add(ad::scale(maha, beta / model.d_max), ad::scale(cosine, 1.0 - beta)));
  }
  return ad::stack(out);
}

void init_params(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t d) {
  nn::init_attention(store, rng, prefix + ".attn", d);
  store.init_linear(rng, prefix + ".f", d, 1);
}

Var importance_scores(const Bindings& p, const std::string& prefix, Var feat, Var distances,
                      const FusionConfig& cfg) {
  ad::Tape& tape = feat.tape();
  const std::size_t b = feat.dim(0);
  if (distances.shape() != Shape{b})
    throw ShapeError(tape.next_label("importance_scores"), "distances " + shape_str(distances.shape()) +
                                                               " for batch of " + std::to_string(b));
  for (std::size_t i = 0; i < b; ++i)
    if (distances.value()[i] < 0.0) throw NumericalError("importance_scores: negative distance");
  auto attended = nn::self_attention(p, prefix + ".attn", feat, cfg.attn_heads).out;
  Var score = ad::reshape(nn::linear(p, prefix + ".f", attended), {b});
  Var inv = ad::div(tape.constant(Tensor({b}, 1.0 - cfg.gamma)), ad::add_scalar(distances, cfg.eps));
  return ad::add(ad::scale(ad::relu(score), cfg.gamma), inv);
}

Var importance_scores(const Bindings& p, const std::string& prefix, Var feat, const Tensor& distances,
                      const FusionConfig& cfg) {
  return importance_scores(p, prefix, feat, feat.tape().constant(distances), cfg);
}

Fused fuse(Var v_feat, Var a_feat, Var raw_v, Var raw_a) {
  ad::Tape& tape = v_feat.tape();
  if (v_feat.shape() != a_feat.shape() || v_feat.rank() != 2)
    throw ShapeError(tape.next_label("fuse"), shape_str(v_feat.shape()) + " vs " + shape_str(a_feat.shape()));
  const std::size_t b = v_feat.dim(0);
  if (raw_v.shape() != Shape{b} || raw_a.shape() != Shape{b})
    throw ShapeError(tape.next_label("fuse"), "raw scores must be [B]");
  Fused f;
  f.fallback.assign(b, false);
  Tensor bump({b}, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    const double rv = raw_v.value()[i], ra = raw_a.value()[i];
    if (rv < 0.0 || ra < 0.0) throw NumericalError("fuse: raw scores must be non-negative");
    if (rv + ra == 0.0) {
      f.fallback[i] = true;
      bump[i] = 1.0;
    }
  }
  Var num = ad::add(raw_v, tape.constant(bump));
  for (auto& v : bump.data()) v *= 2.0;
  Var den = ad::add(ad::add(raw_v, raw_a), tape.constant(std::move(bump)));
  f.w_v = ad::div(num, den);
  f.w_a = ad::add_scalar(ad::neg(f.w_v), 1.0);
  Var wv = ad::reshape(f.w_v, {b, 1});
  Var wa = ad::reshape(f.w_a, {b, 1});
  f.x_fused = ad::add(ad::mul(v_feat, wv), ad::mul(a_feat, wa));
  return f;
}

Var modulate(Var deep, Var x_fused) {
  // Append unit axes so a [C] multiplier scales whole channels of [C, S...].
  Shape s = x_fused.shape();
  while (s.size() < deep.rank()) s.push_back(1);
  return ad::mul(deep, ad::reshape(x_fused, s));
}

}  // namespace macb::fusion
