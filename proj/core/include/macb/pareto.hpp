#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "macb/param_store.hpp"

// Two-objective gradient combination on the simplex with an adaptive
// orthogonality penalty, plus the optimizers that consume the result.
namespace macb::pareto {

struct ParetoConfig {
  double lambda0 = 0.5;
  double kappa = 4.0;
  std::size_t pgd_steps = 50;
  // Step in units of the inverse curvature of the 1-D objective.
  double pgd_lr = 1.0;
  double tol = 1e-8;
  double tie_alpha = 0.5;
  bool noise = false;
  double noise_scale = 0.01;
  double degenerate_norm = 1e-12;

  void validate() const;
};

struct Cosine {
  double value = 0.0;
  bool degenerate = false;  // at least one vector is zero
};

Cosine cos_theta(std::span<const double> g_m, std::span<const double> g_u);

// lambda0 / (1 + exp(kappa cos))
double adaptive_lambda(double cos, const ParetoConfig& cfg);

// ||a g_m + (1 - a) g_u||^2 + lambda a (1 - a) |g_m . g_u|
double augmented_objective(std::span<const double> g_m, std::span<const double> g_u, double alpha, double lambda);
double augmented_derivative(std::span<const double> g_m, std::span<const double> g_u, double alpha, double lambda);

struct Alpha {
  double alpha_m = 0.5;
  double alpha_u = 0.5;
  std::size_t iterations = 0;
  bool converged = false;
  bool tie = false;
};

Alpha solve_alpha(std::span<const double> g_m, std::span<const double> g_u, double lambda, const ParetoConfig& cfg);

enum class Branch { kNonConflict, kConflict, kDegenerate, kZero };
const char* branch_name(Branch b);

struct Combined {
  std::vector<double> h;
  double cos = 0.0;
  double norm_m = 0.0, norm_u = 0.0;
  double alpha_m = 0.5, alpha_u = 0.5;
  double lambda = 0.0;
  Branch branch = Branch::kNonConflict;
  bool degenerate = false;
};

// cos >= 0: plain average. cos < 0: min-norm direction rescaled to
// (1 + |cos| / (1 + |g_m| / |g_u|)) |g_m + g_u|.
Combined combine(std::span<const double> g_m, std::span<const double> g_u, const ParetoConfig& cfg,
                 Rng* noise_rng = nullptr);

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double lr = 3e-4;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg = {}) : cfg_(cfg) {}
  void step(ParamStore& params, const ParamStore& grads);
  const OptimizerConfig& config() const { return cfg_; }
  std::size_t steps() const { return t_; }

 private:
  OptimizerConfig cfg_;
  std::map<std::string, std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct UpdateResult {
  Combined combined;
  bool used_pareto = false;
};

using SharedPredicate = std::function<bool(const std::string& name)>;

// Shared parameters take the combined gradient (or g_m + g_u with Pareto
// off); the rest take g_m + g_u, whichever objectives reach them.
UpdateResult apply_update(ParamStore& params, const ParamStore& grads_m, const ParamStore& grads_u,
                          const SharedPredicate& shared, const ParetoConfig& cfg, bool use_pareto, Optimizer& opt,
                          Rng* noise_rng = nullptr);

// Serialized flat gradient vectors for the inspection tool.
std::vector<double> load_vector(const std::string& path);
void save_vector(const std::string& path, std::span<const double> v);

}  // namespace macb::pareto
