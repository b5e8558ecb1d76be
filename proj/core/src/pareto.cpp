#include "macb/pareto.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "macb/error.hpp"
#include "macb/rng.hpp"

namespace macb::pareto {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void check_pair(std::span<const double> g_m, std::span<const double> g_u) {
  if (g_m.size() != g_u.size())
    throw ShapeError("pareto", "gradient lengths " + std::to_string(g_m.size()) + " and " + std::to_string(g_u.size()));
  for (std::size_t i = 0; i < g_m.size(); ++i)
    if (!std::isfinite(g_m[i]) || !std::isfinite(g_u[i])) throw NumericalError("pareto: non-finite gradient entry");
}

}  // namespace

void ParetoConfig::validate() const {
  if (lambda0 < 0.0) throw ConfigError("pareto: lambda0 must be >= 0");
  if (kappa <= 0.0) throw ConfigError("pareto: kappa must be > 0");
  if (pgd_steps < 1) throw ConfigError("pareto: pgd_steps must be >= 1");
  if (pgd_lr <= 0.0) throw ConfigError("pareto: pgd_lr must be > 0");
  if (tie_alpha < 0.0 || tie_alpha > 1.0) throw ConfigError("pareto: tie_alpha must lie in [0, 1]");
}

Cosine cos_theta(std::span<const double> g_m, std::span<const double> g_u) {
  check_pair(g_m, g_u);
  const double nm = std::sqrt(dot(g_m, g_m)), nu = std::sqrt(dot(g_u, g_u));
  if (nm == 0.0 || nu == 0.0) return {0.0, true};
  return {std::clamp(dot(g_m, g_u) / (nm * nu), -1.0, 1.0), false};
}

double adaptive_lambda(double cos, const ParetoConfig& cfg) { return cfg.lambda0 / (1.0 + std::exp(cfg.kappa * cos)); }

double augmented_objective(std::span<const double> g_m, std::span<const double> g_u, double alpha, double lambda) {
  double norm2 = 0.0;
  for (std::size_t i = 0; i < g_m.size(); ++i) {
    const double v = alpha * g_m[i] + (1.0 - alpha) * g_u[i];
    norm2 += v * v;
  }
  return norm2 + lambda * alpha * (1.0 - alpha) * std::abs(dot(g_m, g_u));
}

double augmented_derivative(std::span<const double> g_m, std::span<const double> g_u, double alpha, double lambda) {
  // d/da ||g_u + a (g_m - g_u)||^2 = 2 (g_u + a (g_m - g_u)) . (g_m - g_u)
  double s = 0.0;
  for (std::size_t i = 0; i < g_m.size(); ++i) {
    const double diff = g_m[i] - g_u[i];
    s += (g_u[i] + alpha * diff) * diff;
  }
  return 2.0 * s + lambda * (1.0 - 2.0 * alpha) * std::abs(dot(g_m, g_u));
}

Alpha solve_alpha(std::span<const double> g_m, std::span<const double> g_u, double lambda, const ParetoConfig& cfg) {
  cfg.validate();
  check_pair(g_m, g_u);
  if (!std::isfinite(lambda) || lambda < 0.0) throw NumericalError("solve_alpha: lambda must be finite and >= 0");
  // The objective is quadratic in alpha: a2 alpha^2 + a1 alpha + a0.
  double diff2 = 0.0;
  for (std::size_t i = 0; i < g_m.size(); ++i) diff2 += (g_m[i] - g_u[i]) * (g_m[i] - g_u[i]);
  const double c = std::abs(dot(g_m, g_u));
  const double curvature = 2.0 * diff2 - 2.0 * lambda * c;
  const double scale = std::abs(curvature);
  Alpha r;
  const double gm2 = dot(g_m, g_m);
  if (scale <= 1e-300 || diff2 <= 1e-30 * std::max(1.0, gm2)) {
    // Linear or constant in alpha.
    const double d0 = augmented_derivative(g_m, g_u, 0.5, lambda);
    if (d0 == 0.0 || diff2 == 0.0) {
      r.alpha_m = cfg.tie_alpha;
      r.tie = true;
    } else {
      r.alpha_m = d0 > 0.0 ? 0.0 : 1.0;
    }
    r.alpha_u = 1.0 - r.alpha_m;
    r.converged = true;
    return r;
  }
  double a = 0.5;
  for (r.iterations = 1; r.iterations <= cfg.pgd_steps; ++r.iterations) {
    const double g = augmented_derivative(g_m, g_u, a, lambda);
    if (!std::isfinite(g)) throw NumericalError("solve_alpha: non-finite derivative");
    const double next = std::clamp(a - cfg.pgd_lr * g / scale, 0.0, 1.0);
    const double step = std::abs(next - a);
    a = next;
    if (step < cfg.tol) {
      r.converged = true;
      break;
    }
  }
  r.iterations = std::min(r.iterations, cfg.pgd_steps);
  if (curvature < 0.0) {
    // Concave: the minimum sits on a boundary.
    const double f0 = augmented_objective(g_m, g_u, 0.0, lambda), f1 = augmented_objective(g_m, g_u, 1.0, lambda);
    a = f0 < f1 ? 0.0 : (f1 < f0 ? 1.0 : a);
  }
  r.alpha_m = a;
  r.alpha_u = 1.0 - a;
  return r;
}

const char* branch_name(Branch b) {
  switch (b) {
    case Branch::kNonConflict: return "nonconflict";
    case Branch::kConflict: return "conflict";
    case Branch::kDegenerate: return "degenerate";
    case Branch::kZero: return "zero";
  }
  return "unknown";
}

Combined combine(std::span<const double> g_m, std::span<const double> g_u, const ParetoConfig& cfg, Rng* noise_rng) {
  cfg.validate();
  check_pair(g_m, g_u);
  const std::size_t n = g_m.size();
  Combined c;
  c.h.assign(n, 0.0);
  c.norm_m = std::sqrt(dot(g_m, g_m));
  c.norm_u = std::sqrt(dot(g_u, g_u));
  const Cosine cs = cos_theta(g_m, g_u);
  c.cos = cs.value;
  c.degenerate = cs.degenerate;
  if (c.norm_m == 0.0 && c.norm_u == 0.0) {
    c.branch = Branch::kZero;
    return c;
  }
  if (c.cos >= 0.0) {
    c.branch = Branch::kNonConflict;
    c.lambda = 0.1 * cfg.lambda0;
    for (std::size_t i = 0; i < n; ++i) c.h[i] = 0.5 * g_m[i] + 0.5 * g_u[i];
  } else {
    c.branch = Branch::kConflict;
    c.lambda = adaptive_lambda(c.cos, cfg);
    const Alpha a = solve_alpha(g_m, g_u, c.lambda, cfg);
    c.alpha_m = a.alpha_m;
    c.alpha_u = a.alpha_u;
    std::vector<double> dir(n), sum(n);
    for (std::size_t i = 0; i < n; ++i) {
      dir[i] = a.alpha_m * g_m[i] + a.alpha_u * g_u[i];
      sum[i] = g_m[i] + g_u[i];
    }
    const double dn = std::sqrt(dot(dir, dir));
    if (dn < cfg.degenerate_norm) {
      // Exact opposition: keep each gradient's part orthogonal to the other.
      c.branch = Branch::kDegenerate;
      c.degenerate = true;
      const double mu = dot(g_m, g_u);
      for (std::size_t i = 0; i < n; ++i) {
        const double pm = g_m[i] - mu / (c.norm_u * c.norm_u) * g_u[i];
        const double pu = g_u[i] - mu / (c.norm_m * c.norm_m) * g_m[i];
        c.h[i] = 0.5 * (pm + pu);
      }
    } else {
      const double magnitude = (1.0 + std::abs(c.cos) / (1.0 + c.norm_m / c.norm_u)) * std::sqrt(dot(sum, sum));
      for (std::size_t i = 0; i < n; ++i) c.h[i] = dir[i] / dn * magnitude;
    }
  }
  if (cfg.noise && noise_rng) {
    const double sigma = cfg.noise_scale * std::sqrt(dot(c.h, c.h));
    for (auto& v : c.h) v += noise_rng->normal(0.0, sigma);
  }
  return c;
}

void Optimizer::step(ParamStore& params, const ParamStore& grads) {
  ++t_;
  for (auto& [name, value] : params) {
    if (!grads.contains(name)) continue;
    const Tensor& g = grads.at(name);
    if (g.shape() != value.shape()) throw ShapeError("Optimizer::step", "gradient shape for " + name);
    auto& m = m_[name];
    m.resize(value.size(), 0.0);
    if (cfg_.kind == OptimizerKind::kSgd) {
      for (std::size_t i = 0; i < value.size(); ++i) {
        m[i] = cfg_.momentum * m[i] + g[i];
        value[i] -= cfg_.lr * m[i];
      }
    } else {
      auto& v = v_[name];
      v.resize(value.size(), 0.0);
      const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
      const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
      for (std::size_t i = 0; i < value.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        value[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      }
    }
  }
}

UpdateResult apply_update(ParamStore& params, const ParamStore& grads_m, const ParamStore& grads_u,
                          const SharedPredicate& shared, const ParetoConfig& cfg, bool use_pareto, Optimizer& opt,
                          Rng* noise_rng) {
  ParamStore total;
  std::vector<std::string> shared_names;
  std::vector<double> gm, gu;
  for (const auto& [name, value] : params) {
    const bool has_m = grads_m.contains(name), has_u = grads_u.contains(name);
    if (!has_m && !has_u) continue;
    Tensor zero(value.shape(), 0.0);
    const Tensor& a = has_m ? grads_m.at(name) : zero;
    const Tensor& b = has_u ? grads_u.at(name) : zero;
    if (use_pareto && shared && shared(name)) {
      shared_names.push_back(name);
      gm.insert(gm.end(), a.data().begin(), a.data().end());
      gu.insert(gu.end(), b.data().begin(), b.data().end());
      continue;
    }
    Tensor s(value.shape());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = a[i] + b[i];
    total.set(name, std::move(s));
  }
  UpdateResult r;
  if (!shared_names.empty()) {
    r.used_pareto = true;
    r.combined = combine(gm, gu, cfg, noise_rng);
    std::size_t off = 0;
    for (const auto& name : shared_names) {
      const Tensor& value = params.at(name);
      Tensor h(value.shape());
      std::copy_n(r.combined.h.begin() + static_cast<std::ptrdiff_t>(off), value.size(), h.data().begin());
      off += value.size();
      total.set(name, std::move(h));
    }
  }
  opt.step(params, total);
  return r;
}

std::vector<double> load_vector(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<double> v;
  std::string tok;
  while (in >> tok) {
    for (char& ch : tok)
      if (ch == ',') ch = ' ';
    std::istringstream ts(tok);
    double x;
    while (ts >> x) v.push_back(x);
    if (!ts.eof()) throw IoError(path + ": not a number: " + tok);
  }
  if (v.empty()) throw IoError(path + ": empty gradient vector");
  return v;
}

void save_vector(const std::string& path, std::span<const double> v) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out.precision(17);
  for (double x : v) out << x << '\n';
}

}  // namespace macb::pareto
