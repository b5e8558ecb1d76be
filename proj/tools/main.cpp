// macb: data generation, training, evaluation and diagnostics.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "macb/config.hpp"
#include "macb/error.hpp"
#include "macb/gradsuite.hpp"
#include "macb/pareto.hpp"
#include "macb/trainer.hpp"

namespace {

using namespace macb;

config::RunConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  return config::load(path);
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  return f;
}

void write_file(const std::string& path, const std::string& text) {
  auto f = open_out(path);
  f << text;
  if (!f) throw IoError("write failed: " + path);
}

std::string fmt_auc(const std::optional<double>& a) {
  if (!a) return "undefined";
  std::ostringstream s;
  s << std::setprecision(6) << *a;
  return s.str();
}

std::vector<std::uint64_t> seed_list(std::uint64_t first, std::size_t n) {
  std::vector<std::uint64_t> s;
  for (std::size_t i = 0; i < n; ++i) s.push_back(first + i);
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"macb: audio-visual deepfake detector"};
  app.require_subcommand(1);

  std::string cfg_path, data_path, out_path, ckpt_path, log_path, metrics_path, preds_path;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic audio-visual dataset");
  gen->add_option("--config", cfg_path, "Config file");
  gen->add_option("--out", out_path, "Dataset file")->required();

  auto* tr = app.add_subcommand("train", "Train on a dataset's train split");
  tr->add_option("--config", cfg_path, "Config file");
  tr->add_option("--data", data_path, "Dataset file")->required();
  tr->add_option("--out", ckpt_path, "Checkpoint file")->required();
  tr->add_option("--log", log_path, "Per-step CSV log (default <out>.steps.csv)");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  ev->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
  ev->add_option("--data", data_path, "Dataset file")->required();
  ev->add_option("--metrics", metrics_path, "Metrics CSV (default stdout)");
  ev->add_option("--predictions", preds_path, "Per-sample predictions CSV");
  std::string split = "test";
  ev->add_option("--split", split, "train, test or all")->check(CLI::IsMember({"train", "test", "all"}));

  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient checks");
  std::string module = "all";
  std::size_t gc_seeds = 20;
  double gc_tol = 1e-4;
  gc->add_option("--module", module, "Module name or all");
  gc->add_option("--seeds", gc_seeds, "Seeds per case");
  gc->add_option("--tol", gc_tol, "Relative error tolerance");

  auto* ab = app.add_subcommand("run-ablation", "Run an ablation recipe");
  std::string recipe;
  std::size_t n_seeds = 3;
  std::uint64_t first_seed = 0;
  ab->add_option("--recipe", recipe, "contrastive, depth or pareto")->required();
  ab->add_option("--config", cfg_path, "Config file");
  ab->add_option("--data", data_path, "Dataset file (generated from the config when absent)");
  ab->add_option("--out", out_path, "Comparison CSV (default stdout)");
  ab->add_option("--seeds", n_seeds, "Number of training seeds");
  ab->add_option("--first-seed", first_seed, "First training seed");

  auto* ip = app.add_subcommand("inspect-pareto", "Combine two gradient vectors");
  std::string gm_path, gu_path;
  ip->add_option("--gm", gm_path, "Multimodal gradient file")->required();
  ip->add_option("--gu", gu_path, "Unimodal gradient file")->required();
  ip->add_option("--config", cfg_path, "Config file");
  ip->add_option("--out", out_path, "Write the combined vector here");

  auto* in = app.add_subcommand("inspect", "Per-sample fusion distances and weights");
  in->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
  in->add_option("--data", data_path, "Dataset file")->required();
  in->add_option("--out", out_path, "CSV (default stdout)");

  auto* cal = app.add_subcommand("calibrate", "Check generator difficulty against a trained model and a linear probe");
  cal->add_option("--config", cfg_path, "Config file");

  auto* dump = app.add_subcommand("dump-config", "Print every config key with its value");
  dump->add_option("--config", cfg_path, "Config file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      const auto cfg = load_config(cfg_path);
      data::save_dataset(out_path, data::generate(cfg.gen));
      std::cout << "wrote " << cfg.gen.n_samples << " samples to " << out_path << "\n";
    } else if (*tr) {
      const auto cfg = load_config(cfg_path);
      const auto ds = data::load_dataset(data_path);
      auto log = open_out(log_path.empty() ? ckpt_path + ".steps.csv" : log_path);
      auto result = train::train(ds, cfg.train, &log);
      train::save_checkpoint(ckpt_path, cfg.train, result.model);
      for (const auto& e : result.epochs)
        std::cout << "epoch " << e.epoch << " loss " << e.mean_total << " (L_m " << e.mean_m << ", L_u " << e.mean_u
                  << ")\n";
    } else if (*ev) {
      const auto ck = train::load_checkpoint(ckpt_path);
      const auto ds = data::load_dataset(data_path);
      std::vector<std::size_t> idx(ds.samples.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      if (split != "all") idx = ds.indices(split == "train" ? 0 : 1);
      const auto r = train::evaluate(ck.model, ds, idx);
      const std::string text = train::metrics_csv_header() + "\n" + train::metrics_csv_row(split, r) + "\n";
      if (metrics_path.empty())
        std::cout << text;
      else
        write_file(metrics_path, text);
      if (!preds_path.empty()) write_file(preds_path, train::predictions_csv(r));
    } else if (*gc) {
      const auto t0 = std::chrono::steady_clock::now();
      bool ok = true;
      for (const auto& r : check::run(module, gc_seeds, gc_tol)) {
        ok = ok && r.passed;
        std::printf("%-4s %-9s %-22s seeds=%zu coords=%zu max_rel_err=%.3e worst=%s\n", r.passed ? "PASS" : "FAIL",
                    r.module.c_str(), r.name.c_str(), r.seeds, r.coordinates, r.max_rel_error, r.worst.c_str());
      }
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::printf("%s in %.1f s\n", ok ? "all passed" : "FAILURES", secs);
      return ok ? 0 : 2;
    } else if (*ab) {
      const auto cfg = load_config(cfg_path);
      const auto ds = data_path.empty() ? data::generate(cfg.gen) : data::load_dataset(data_path);
      const auto rows = train::run_ablation(recipe, ds, cfg.train, seed_list(first_seed, n_seeds), &std::cerr);
      const auto text = train::ablation_csv(rows);
      if (out_path.empty())
        std::cout << text;
      else
        write_file(out_path, text);
    } else if (*ip) {
      const auto cfg = load_config(cfg_path);
      const auto gm = pareto::load_vector(gm_path);
      const auto gu = pareto::load_vector(gu_path);
      if (gm.size() != gu.size()) throw ConfigError("inspect-pareto: vectors differ in length");
      const auto c = pareto::combine(gm, gu, cfg.train.pareto);
      double h_norm = 0.0;
      for (double v : c.h) h_norm += v * v;
      std::printf("cos,branch,alpha_m,alpha_u,lambda,norm_gm,norm_gu,norm_h\n");
      std::printf("%.12g,%s,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g\n", c.cos, pareto::branch_name(c.branch), c.alpha_m,
                  c.alpha_u, c.lambda, c.norm_m, c.norm_u, std::sqrt(h_norm));
      if (!out_path.empty()) pareto::save_vector(out_path, c.h);
    } else if (*in) {
      const auto ck = train::load_checkpoint(ckpt_path);
      const auto ds = data::load_dataset(data_path);
      const auto text = train::fusion_csv(ck.model, ds, ds.test_indices());
      if (out_path.empty())
        std::cout << text;
      else
        write_file(out_path, text);
    } else if (*cal) {
      const auto cfg = load_config(cfg_path);
      const auto ds = data::generate(cfg.gen);
      const double probe = train::linear_probe_auc(ds, cfg.train.model, cfg.train.seed);
      const auto result = train::train(ds, cfg.train);
      const auto r = train::evaluate(result.model, ds, ds.test_indices());
      const bool full_ok = r.auc && *r.auc >= 0.85;
      const bool probe_ok = probe >= 0.55 && probe <= 0.9;
      std::printf("full model: acc=%.4f auc=%s (want auc in [0.85, 1])%s\n", r.acc, fmt_auc(r.auc).c_str(),
                  full_ok ? "" : "  OUT OF RANGE");
      std::printf("linear probe: auc=%.4f (want [0.55, 0.9])%s\n", probe, probe_ok ? "" : "  OUT OF RANGE");
      if (!full_ok || !probe_ok) std::printf("adjust gen.delta and regenerate\n");
      return full_ok && probe_ok ? 0 : 1;
    } else if (*dump) {
      std::cout << config::to_text(load_config(cfg_path));
    }
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
