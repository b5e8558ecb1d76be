#include "macb/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "macb/config.hpp"
#include "macb/error.hpp"
#include "macb/metrics.hpp"
#include "macb/rng.hpp"

namespace macb::train {

using ad::Var;

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << (v == 0.0 ? 0.0 : v);
  return os.str();
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt(*v) : "NA"; }

ParamStore collect_grads(const ad::Tape& tape, const Bindings& p) {
  ParamStore g;
  for (const auto& [name, var] : p.all())
    if (tape.has_grad(var.id())) g.set(name, tape.grad(var));
  return g;
}

double batch_accuracy(const Tensor& prob, const std::vector<const model::Prepared*>& batch) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) hits += (prob[i] >= 0.5 ? 1 : 0) == batch[i]->label;
  return static_cast<double>(hits) / static_cast<double>(batch.size());
}

void write_cluster(std::ostream& os, const fusion::ClusterModel& m) {
  write_tensor(os, m.centers);
  io::write_u32(os, static_cast<std::uint32_t>(m.covariance.size()));
  for (const auto& c : m.covariance) write_tensor(os, c);
  io::write_u32(os, static_cast<std::uint32_t>(m.chosen_k.size()));
  for (auto k : m.chosen_k) io::write_u32(os, static_cast<std::uint32_t>(k));
  io::write_f64(os, m.d_max);
  io::write_f64(os, m.silhouette);
  io::write_u32(os, m.degenerate ? 1 : 0);
}

fusion::ClusterModel read_cluster(std::istream& is) {
  fusion::ClusterModel m;
  m.centers = read_tensor(is);
  const auto n = io::read_u32(is);
  for (std::uint32_t i = 0; i < n; ++i) {
    m.covariance.push_back(read_tensor(is));
    m.cholesky.push_back(fusion::cholesky(m.covariance.back()));
  }
  const auto nk = io::read_u32(is);
  for (std::uint32_t i = 0; i < nk; ++i) m.chosen_k.push_back(io::read_u32(is));
  m.d_max = io::read_f64(is);
  m.silhouette = io::read_f64(is);
  m.degenerate = io::read_u32(is) != 0;
  return m;
}

std::vector<int> labels_of(const std::vector<model::Prepared>& clips) {
  std::vector<int> out;
  for (const auto& c : clips) out.push_back(c.label);
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  pareto.validate();
  if (epochs == 0) throw ConfigError("train: epochs must be >= 1");
  if (batch < 2) throw ConfigError("train: batch must be >= 2");
  if (optimizer.lr <= 0.0) throw ConfigError("train: learning rate must be positive");
}

std::string step_csv_header() {
  return "step,epoch,loss_m,loss_u,loss_c,loss_total,tau,gamma,phi_var,phi_skew,phi_entropy,cos,branch,alpha_m,"
         "lambda,batch_acc";
}

std::string step_csv_row(const StepLog& s) {
  std::ostringstream os;
  os << s.step << ',' << s.epoch << ',' << fmt(s.loss_m) << ',' << fmt(s.loss_u) << ',' << fmt(s.loss_c) << ','
     << fmt(s.loss_total) << ',' << fmt(s.tau) << ',' << fmt(s.gamma) << ',' << fmt(s.phi_var) << ','
     << fmt(s.phi_skew) << ',' << fmt(s.phi_entropy) << ',' << fmt(s.cos) << ',' << s.branch << ','
     << fmt(s.alpha_m) << ',' << fmt(s.lambda) << ',' << fmt(s.batch_acc);
  return os.str();
}

TrainResult train(const data::Dataset& ds, const TrainConfig& cfg, std::ostream* step_csv) {
  cfg.validate();
  const auto train_idx = ds.train_indices();
  if (train_idx.size() < 2 * cfg.batch) throw ConfigError("train: dataset needs at least two batches");
  const auto clips = model::prepare_all(ds, train_idx, cfg.model);
  const auto labels = labels_of(clips);
  TrainResult result{model::Model(cfg.model, mix_seed(cfg.seed, 11)), {}, {}};
  model::Model& m = result.model;
  pareto::Optimizer opt(cfg.optimizer);
  Rng rng(mix_seed(cfg.seed, 13));
  const auto& flags = cfg.model.flags;
  if (step_csv) *step_csv << step_csv_header() << '\n';

  std::size_t step = 0;
  bool stop = false;
  for (std::size_t epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    if (flags.use_weights) model::refit_clusters(m, model::embed(m, clips), labels, mix_seed(cfg.seed, 1000 + epoch));
    std::vector<std::size_t> order(clips.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(mix_seed(cfg.seed, 2000 + epoch));
    std::shuffle(order.begin(), order.end(), shuffle.engine());
    EpochLog el;
    el.epoch = epoch;
    std::size_t n_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      std::vector<const model::Prepared*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch); ++i) batch.push_back(&clips[order[i]]);
      if (batch.size() < 2) continue;  // batch statistics need two samples
      ad::Tape tape;
      Bindings p = bind_variables(tape, m.params);
      model::ForwardResult f;
      try {
        f = model::forward(tape, p, m, batch, cls::Mode::kTrain, &rng);
      } catch (const NumericalError& e) {
        throw NumericalError("step " + std::to_string(step) + " (epoch " + std::to_string(epoch) + "): " + e.what());
      }
      tape.backward(f.objectives.multimodal);
      ParamStore gm = collect_grads(tape, p);
      double grad_tau = 0.0;
      if (f.has_tau && tape.has_grad(f.gate.tau.id())) grad_tau += tape.grad(f.gate.tau).item();
      tape.backward(f.objectives.unimodal);
      ParamStore gu = collect_grads(tape, p);
      if (f.has_tau && tape.has_grad(f.gate.tau.id())) grad_tau += tape.grad(f.gate.tau).item();

      auto upd = pareto::apply_update(m.params, gm, gu, model::Model::is_shared, cfg.pareto, flags.use_pareto, opt, &rng);
      cls::update_running_stats(m.buffers, cls::kSampleHead, f.head, cfg.model.head);
      if (flags.use_macl) {
        std::vector<macl::SampleTag> tags;
        for (auto* c : batch) tags.push_back(c->tag);
        m.queue_v.push(f.x_v.value(), tags);
        m.queue_a.push(f.x_a.value(), tags);
      }

      StepLog s;
      s.step = step;
      s.epoch = epoch;
      s.loss_m = f.objectives.multimodal.item();
      s.loss_u = f.objectives.unimodal.item();
      s.loss_total = f.objectives.total.item();
      if (f.has_tau) {
        s.loss_c = f.contrastive.total.item();
        s.tau = f.gate.tau.item();
        s.gamma = f.gate.gamma.item();
        s.phi_var = f.tau_terms.phi_var.item();
        s.phi_skew = f.tau_terms.phi_skew.item();
        s.phi_entropy = f.tau_terms.phi_entropy.item();
        macl::advance(m.temperature, s.tau, f.gate.h_prev.value(), grad_tau);
      }
      if (upd.used_pareto) {
        s.cos = upd.combined.cos;
        s.branch = pareto::branch_name(upd.combined.branch);
        s.alpha_m = upd.combined.alpha_m;
        s.lambda = upd.combined.lambda;
      }
      s.batch_acc = batch_accuracy(f.prob.value(), batch);
      if (!std::isfinite(s.loss_total)) throw NumericalError("non-finite loss at step " + std::to_string(step));
      if (step_csv) *step_csv << step_csv_row(s) << '\n';
      result.steps.push_back(s);
      el.mean_total += s.loss_total;
      el.mean_m += s.loss_m;
      el.mean_u += s.loss_u;
      ++n_steps;
      ++step;
      if (cfg.max_steps != 0 && step >= cfg.max_steps) {
        stop = true;
        break;
      }
    }
    if (n_steps > 0) {
      el.mean_total /= static_cast<double>(n_steps);
      el.mean_m /= static_cast<double>(n_steps);
      el.mean_u /= static_cast<double>(n_steps);
    }
    result.epochs.push_back(el);
  }
  return result;
}

EvalResult evaluate(const model::Model& m, const data::Dataset& ds, const std::vector<std::size_t>& indices,
                    std::size_t batch) {
  if (indices.empty()) throw ConfigError("evaluate: no samples");
  const auto clips = model::prepare_all(ds, indices, m.config());
  EvalResult r;
  std::vector<double> fp_v, fp_a;
  std::vector<int> fl_v, fl_a;
  for (std::size_t start = 0; start < clips.size(); start += batch) {
    std::vector<const model::Prepared*> b;
    for (std::size_t i = start; i < std::min(clips.size(), start + batch); ++i) b.push_back(&clips[i]);
    ad::Tape tape;
    Bindings p = bind_constants(tape, m.params);
    auto f = model::forward(tape, p, m, b, cls::Mode::kEval, nullptr);
    for (std::size_t i = 0; i < b.size(); ++i) {
      r.probs.push_back(f.prob.value()[i]);
      r.labels.push_back(b[i]->label);
      const Tensor& lv = b[i]->frame_labels;
      const Tensor& pv = f.frame_prob_v[i];
      const Tensor& pa = f.frame_prob_a[i];
      for (std::size_t t = 0; t < pv.size(); ++t) {
        fp_v.push_back(pv[t]);
        fl_v.push_back(static_cast<int>(lv[t]));
      }
      for (std::size_t t = 0; t < pa.size(); ++t) {
        fp_a.push_back(pa[t]);
        fl_a.push_back(static_cast<int>(lv[t * lv.size() / pa.size()]));
      }
    }
  }
  r.acc = metrics::accuracy(r.probs, r.labels);
  r.auc = metrics::auc(r.probs, r.labels);
  r.frame_acc = 0.5 * (metrics::accuracy(fp_v, fl_v) + metrics::accuracy(fp_a, fl_a));
  const auto av = metrics::auc(fp_v, fl_v), aa = metrics::auc(fp_a, fl_a);
  if (av && aa) r.frame_auc = 0.5 * (*av + *aa);
  return r;
}

std::string metrics_csv_header() { return "split,n,acc,auc,frame_acc,frame_auc"; }

std::string metrics_csv_row(const std::string& split, const EvalResult& r) {
  return split + "," + std::to_string(r.probs.size()) + "," + fmt(r.acc) + "," + fmt_opt(r.auc) + "," +
         fmt(r.frame_acc) + "," + fmt_opt(r.frame_auc);
}

std::string predictions_csv(const EvalResult& r) {
  std::string out = "index,label,prob\n";
  for (std::size_t i = 0; i < r.probs.size(); ++i)
    out += std::to_string(i) + "," + std::to_string(r.labels[i]) + "," + fmt(r.probs[i]) + "\n";
  return out;
}

std::string fusion_csv(const model::Model& m, const data::Dataset& ds, const std::vector<std::size_t>& indices,
                       std::size_t batch) {
  const auto clips = model::prepare_all(ds, indices, m.config());
  std::string out = "index,label,class,d_v,d_a,w_v,w_a\n";
  for (std::size_t start = 0; start < clips.size(); start += batch) {
    std::vector<const model::Prepared*> b;
    for (std::size_t i = start; i < std::min(clips.size(), start + batch); ++i) b.push_back(&clips[i]);
    ad::Tape tape;
    Bindings p = bind_constants(tape, m.params);
    auto f = model::forward(tape, p, m, b, cls::Mode::kEval, nullptr);
    for (std::size_t i = 0; i < b.size(); ++i) {
      const auto idx = indices[start + i];
      out += std::to_string(idx) + "," + std::to_string(b[i]->label) + "," +
             data::class_name(ds.samples[idx].cls) + "," + fmt(f.d_v[i]) + "," + fmt(f.d_a[i]) + "," +
             fmt(f.w_v[i]) + "," + fmt(f.w_a[i]) + "\n";
    }
  }
  return out;
}

void save_checkpoint(const std::string& path, const TrainConfig& cfg, const model::Model& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os.write("MCKP", 4);
  io::write_u32(os, 1);
  config::RunConfig rc;
  rc.train = cfg;
  io::write_string(os, config::to_text(rc));
  write_params(os, m.params);
  write_params(os, m.buffers);
  io::write_u32(os, m.clusters_v && m.clusters_a ? 1 : 0);
  if (m.clusters_v && m.clusters_a) {
    write_cluster(os, *m.clusters_v);
    write_cluster(os, *m.clusters_a);
  }
  if (!os) throw IoError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "MCKP") throw IoError(path + ": not a checkpoint");
  if (io::read_u32(is) != 1) throw IoError(path + ": unsupported checkpoint version");
  config::RunConfig rc;
  config::apply(config::parse_key_values(io::read_string(is)), rc);
  ParamStore params = read_params(is);
  ParamStore buffers = read_params(is);
  Checkpoint ck{rc.train, model::Model(rc.train.model, std::move(params), std::move(buffers))};
  if (io::read_u32(is) == 1) {
    ck.model.clusters_v = read_cluster(is);
    ck.model.clusters_a = read_cluster(is);
  }
  return ck;
}

std::vector<std::string> recipe_variants(const std::string& recipe) {
  if (recipe == "contrastive") return {"w/o L_C", "w/o L_intra", "w/o L_cross", "w/o w", "full"};
  if (recipe == "depth") return {"D=0", "D=2", "D=4", "D=6", "D=8"};
  if (recipe == "pareto") return {"pareto on", "pareto off"};
  throw ConfigError("unknown recipe '" + recipe + "' (contrastive, depth, pareto)");
}

TrainConfig variant_config(const std::string& recipe, const std::string& variant, const TrainConfig& base) {
  TrainConfig c = base;
  auto& f = c.model.flags;
  if (recipe == "contrastive") {
    if (variant == "w/o L_C") f.use_macl = false;
    else if (variant == "w/o L_intra") f.use_intra = false;
    else if (variant == "w/o L_cross") f.use_cross = false;
    else if (variant == "w/o w") f.use_weights = false;
    else if (variant != "full") throw ConfigError("unknown variant " + variant);
  } else if (recipe == "depth") {
    if (variant.rfind("D=", 0) != 0) throw ConfigError("unknown variant " + variant);
    c.model.depth = std::stoul(variant.substr(2));
  } else if (recipe == "pareto") {
    if (variant == "pareto off") f.use_pareto = false;
    else if (variant != "pareto on") throw ConfigError("unknown variant " + variant);
  } else {
    recipe_variants(recipe);
  }
  return c;
}

std::vector<AblationRow> run_ablation(const std::string& recipe, const data::Dataset& ds, const TrainConfig& base,
                                      const std::vector<std::uint64_t>& seeds, std::ostream* progress) {
  if (seeds.empty()) throw ConfigError("run_ablation: need at least one seed");
  std::vector<AblationRow> rows;
  for (const auto& v : recipe_variants(recipe)) {
    AblationRow row;
    row.variant = v;
    for (auto seed : seeds) {
      TrainConfig c = variant_config(recipe, v, base);
      c.seed = seed;
      auto tr = train(ds, c);
      auto ev = evaluate(tr.model, ds, ds.test_indices());
      row.acc.push_back(ev.acc);
      row.auc.push_back(ev.auc.value_or(std::nan("")));
      if (progress) *progress << recipe << " " << v << " seed " << seed << ": acc " << ev.acc << " auc " << fmt_opt(ev.auc) << std::endl;
    }
    row.mean_acc = std::accumulate(row.acc.begin(), row.acc.end(), 0.0) / static_cast<double>(row.acc.size());
    row.mean_auc = std::accumulate(row.auc.begin(), row.auc.end(), 0.0) / static_cast<double>(row.auc.size());
    rows.push_back(row);
  }
  // Deltas against the full model, the first depth, or Pareto on.
  const AblationRow& ref = recipe == "contrastive" ? rows.back() : rows.front();
  const double ra = ref.mean_acc, ru = ref.mean_auc;
  for (auto& r : rows) {
    r.delta_acc = r.mean_acc - ra;
    r.delta_auc = r.mean_auc - ru;
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "variant,seeds,mean_acc,mean_auc,delta_acc,delta_auc\n";
  for (const auto& r : rows)
    out += r.variant + "," + std::to_string(r.acc.size()) + "," + fmt(r.mean_acc) + "," + fmt(r.mean_auc) + "," +
           fmt(r.delta_acc) + "," + fmt(r.delta_auc) + "\n";
  return out;
}

double linear_probe_auc(const data::Dataset& ds, const model::ModelConfig& cfg, std::uint64_t seed) {
  model::Model m(cfg, seed);
  auto features = [&](const std::vector<std::size_t>& idx, std::vector<int>& labels) {
    const auto clips = model::prepare_all(ds, idx, cfg);
    ad::Tape tape;
    Bindings p = bind_constants(tape, m.params);
    const std::size_t d = cfg.enc.d_model;
    Tensor x({clips.size(), 2 * d});
    for (std::size_t i = 0; i < clips.size(); ++i) {
      const Tensor v = enc::encode_video(p, tape.constant(clips[i].video), cfg.enc).pooled.value();
      const Tensor a = enc::encode_audio(p, tape.constant(clips[i].logmel), cfg.enc).pooled.value();
      std::copy_n(v.data().begin(), d, x.data().begin() + i * 2 * d);
      std::copy_n(a.data().begin(), d, x.data().begin() + i * 2 * d + d);
      labels.push_back(clips[i].label);
    }
    return x;
  };
  std::vector<int> ytr, yte;
  Tensor xtr = features(ds.train_indices(), ytr), xte = features(ds.test_indices(), yte);
  const std::size_t n = xtr.dim(0), k = xtr.dim(1);
  // Standardize with training statistics.
  std::vector<double> mu(k, 0.0), sd(k, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) mu[j] += xtr[i * k + j] / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) sd[j] += (xtr[i * k + j] - mu[j]) * (xtr[i * k + j] - mu[j]) / static_cast<double>(n);
  for (auto& s : sd) s = std::sqrt(s) + 1e-8;
  auto z = [&](const Tensor& x, std::size_t i, std::size_t j) { return (x[i * k + j] - mu[j]) / sd[j]; };
  std::vector<double> w(k, 0.0);
  double bias = 0.0;
  const double lr = 0.1, l2 = 1e-3;
  for (int it = 0; it < 500; ++it) {
    std::vector<double> gw(k, 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = bias;
      for (std::size_t j = 0; j < k; ++j) s += w[j] * z(xtr, i, j);
      const double err = 1.0 / (1.0 + std::exp(-s)) - ytr[i];
      for (std::size_t j = 0; j < k; ++j) gw[j] += err * z(xtr, i, j) / static_cast<double>(n);
      gb += err / static_cast<double>(n);
    }
    for (std::size_t j = 0; j < k; ++j) w[j] -= lr * (gw[j] + l2 * w[j]);
    bias -= lr * gb;
  }
  std::vector<double> scores;
  for (std::size_t i = 0; i < xte.dim(0); ++i) {
    double s = bias;
    for (std::size_t j = 0; j < k; ++j) s += w[j] * z(xte, i, j);
    scores.push_back(s);
  }
  return metrics::auc(scores, yte).value_or(std::nan(""));
}

}  // namespace macb::train
