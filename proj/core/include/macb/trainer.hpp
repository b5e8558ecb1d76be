#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "macb/dataset.hpp"
#include "macb/model.hpp"
#include "macb/pareto.hpp"

// Training loop, evaluation, checkpoints and ablation recipes.
namespace macb::train {

struct TrainConfig {
  model::ModelConfig model;
  std::size_t epochs = 10;
  std::size_t batch = 16;
  pareto::OptimizerConfig optimizer;
  pareto::ParetoConfig pareto;
  std::uint64_t seed = 0;
  // Stop after this many steps when non-zero.
  std::size_t max_steps = 0;

  void validate() const;
};

struct StepLog {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss_m = 0.0, loss_u = 0.0, loss_c = 0.0, loss_total = 0.0;
  double tau = 0.0, gamma = 0.0;
  double phi_var = 0.0, phi_skew = 0.0, phi_entropy = 0.0;
  double cos = 0.0;
  std::string branch = "none";
  double alpha_m = 0.5;
  double lambda = 0.0;
  double batch_acc = 0.0;
};

std::string step_csv_header();
std::string step_csv_row(const StepLog& s);

struct EpochLog {
  std::size_t epoch = 0;
  double mean_total = 0.0;
  double mean_m = 0.0;
  double mean_u = 0.0;
};

struct TrainResult {
  model::Model model;
  std::vector<StepLog> steps;
  std::vector<EpochLog> epochs;
};

// Trains on the dataset's train split. Each step row is written to
// `step_csv` as it completes.
TrainResult train(const data::Dataset& ds, const TrainConfig& cfg, std::ostream* step_csv = nullptr);

struct EvalResult {
  double acc = 0.0;
  std::optional<double> auc;
  double frame_acc = 0.0;
  std::optional<double> frame_auc;
  std::vector<double> probs;
  std::vector<int> labels;
};

EvalResult evaluate(const model::Model& model, const data::Dataset& ds, const std::vector<std::size_t>& indices,
                    std::size_t batch = 16);

std::string metrics_csv_header();
std::string metrics_csv_row(const std::string& split, const EvalResult& r);
// One row per sample: index, label, probability.
std::string predictions_csv(const EvalResult& r);

// Fusion inspection rows (D_v, D_a, w_v, w_a) per sample.
std::string fusion_csv(const model::Model& model, const data::Dataset& ds, const std::vector<std::size_t>& indices,
                       std::size_t batch = 16);

void save_checkpoint(const std::string& path, const TrainConfig& cfg, const model::Model& model);
struct Checkpoint {
  TrainConfig config;
  model::Model model;
};
Checkpoint load_checkpoint(const std::string& path);

struct AblationRow {
  std::string variant;
  std::vector<double> acc, auc;
  double mean_acc = 0.0, mean_auc = 0.0;
  double delta_acc = 0.0, delta_auc = 0.0;  // relative to the reference row
};

// Recipes: "contrastive" (full model and four ablations), "depth" (0, 2, 4,
// 6, 8) and "pareto" (on, off).
std::vector<std::string> recipe_variants(const std::string& recipe);
TrainConfig variant_config(const std::string& recipe, const std::string& variant, const TrainConfig& base);
std::vector<AblationRow> run_ablation(const std::string& recipe, const data::Dataset& ds, const TrainConfig& base,
                                      const std::vector<std::uint64_t>& seeds, std::ostream* progress = nullptr);
std::string ablation_csv(const std::vector<AblationRow>& rows);

// Logistic regression on pooled features of untrained encoders: a floor for
// how much the generator leaks through trivial statistics.
double linear_probe_auc(const data::Dataset& ds, const model::ModelConfig& cfg, std::uint64_t seed);

}  // namespace macb::train
