#include "macb/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "macb/error.hpp"

namespace macb::config {

namespace {

struct Key {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad(const std::string& key, const std::string& value, const char* want) {
  throw ConfigError("config key '" + key + "': expected " + want + ", got '" + value + "'");
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad(key, v, "a number");
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad(key, v, "a non-negative integer");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  bad(key, v, "a boolean");
}

// Shortest text that parses back to the same double.
std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class Field>
Key size_key(std::string name, Field field) {
  return {name, [name, field](RunConfig& c, const std::string& v) { field(c) = static_cast<std::size_t>(parse_u64(name, v)); },
          [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); }};
}

template <class Field>
Key double_key(std::string name, Field field) {
  return {name, [name, field](RunConfig& c, const std::string& v) { field(c) = parse_double(name, v); },
          [field](const RunConfig& c) { return fmt(field(const_cast<RunConfig&>(c))); }};
}

template <class Field>
Key bool_key(std::string name, Field field) {
  return {name, [name, field](RunConfig& c, const std::string& v) { field(c) = parse_bool(name, v); },
          [field](const RunConfig& c) { return std::string(field(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

template <class Field>
Key u64_key(std::string name, Field field) {
  return {name, [name, field](RunConfig& c, const std::string& v) { field(c) = parse_u64(name, v); },
          [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); }};
}

#define FIELD(expr) [](RunConfig& c) -> auto& { return expr; }

const std::vector<Key>& registry() {
  static const std::vector<Key> keys = [] {
    std::vector<Key> k;
    // generator
    k.push_back(size_key("gen.n_samples", FIELD(c.gen.n_samples)));
    k.push_back(size_key("gen.n_identities", FIELD(c.gen.n_identities)));
    k.push_back({"gen.mix",
                 [](RunConfig& c, const std::string& v) {
                   std::stringstream ss(v);
                   std::string part;
                   std::size_t i = 0;
                   while (std::getline(ss, part, ',')) {
                     if (i >= 4) bad("gen.mix", v, "four comma-separated proportions");
                     c.gen.mix[i++] = parse_double("gen.mix", trim(part));
                   }
                   if (i != 4) bad("gen.mix", v, "four comma-separated proportions");
                 },
                 [](const RunConfig& c) {
                   return fmt(c.gen.mix[0]) + "," + fmt(c.gen.mix[1]) + "," + fmt(c.gen.mix[2]) + "," + fmt(c.gen.mix[3]);
                 }});
    k.push_back(double_key("gen.delta", FIELD(c.gen.delta)));
    k.push_back(size_key("gen.min_segment", FIELD(c.gen.min_segment)));
    k.push_back(size_key("gen.max_segment", FIELD(c.gen.max_segment)));
    k.push_back(double_key("gen.test_fraction", FIELD(c.gen.test_fraction)));
    k.push_back(u64_key("gen.seed", FIELD(c.gen.seed)));
    k.push_back(size_key("gen.frames", FIELD(c.gen.frames)));
    k.push_back(size_key("gen.channels", FIELD(c.gen.channels)));
    k.push_back(size_key("gen.height", FIELD(c.gen.height)));
    k.push_back(size_key("gen.width", FIELD(c.gen.width)));
    k.push_back(size_key("gen.audio_samples", FIELD(c.gen.audio_samples)));
    k.push_back(double_key("gen.sample_rate", FIELD(c.gen.sample_rate)));
    k.push_back(double_key("gen.video_noise", FIELD(c.gen.video_noise)));
    k.push_back(double_key("gen.audio_noise", FIELD(c.gen.audio_noise)));
    k.push_back(double_key("gen.artifact", FIELD(c.gen.artifact)));
    // audio front end
    k.push_back(double_key("mel.sample_rate", FIELD(c.train.model.mel.sample_rate)));
    k.push_back(size_key("mel.window", FIELD(c.train.model.mel.window)));
    k.push_back(size_key("mel.hop", FIELD(c.train.model.mel.hop)));
    k.push_back(size_key("mel.fft_size", FIELD(c.train.model.mel.fft_size)));
    k.push_back(size_key("mel.n_mels", FIELD(c.train.model.mel.n_mels)));
    k.push_back(double_key("mel.f_min", FIELD(c.train.model.mel.f_min)));
    k.push_back(double_key("mel.f_max", FIELD(c.train.model.mel.f_max)));
    // encoders
    k.push_back(size_key("enc.d_model", FIELD(c.train.model.enc.d_model)));
    k.push_back(size_key("enc.n_layers", FIELD(c.train.model.enc.n_layers)));
    k.push_back(size_key("enc.n_heads", FIELD(c.train.model.enc.n_heads)));
    k.push_back(size_key("enc.d_ff", FIELD(c.train.model.enc.d_ff)));
    k.push_back(size_key("enc.video_frames", FIELD(c.train.model.enc.video_frames)));
    k.push_back(size_key("enc.video_channels", FIELD(c.train.model.enc.video_channels)));
    k.push_back(size_key("enc.video_height", FIELD(c.train.model.enc.video_height)));
    k.push_back(size_key("enc.video_width", FIELD(c.train.model.enc.video_width)));
    k.push_back(size_key("enc.patch_t", FIELD(c.train.model.enc.patch_t)));
    k.push_back(size_key("enc.patch_h", FIELD(c.train.model.enc.patch_h)));
    k.push_back(size_key("enc.patch_w", FIELD(c.train.model.enc.patch_w)));
    k.push_back(size_key("enc.mel_frames", FIELD(c.train.model.enc.mel_frames)));
    k.push_back(size_key("enc.n_mels", FIELD(c.train.model.enc.n_mels)));
    k.push_back(size_key("enc.frame_pool", FIELD(c.train.model.enc.frame_pool)));
    k.push_back(bool_key("enc.positional", FIELD(c.train.model.enc.positional)));
    // contrastive learning
    k.push_back(double_key("macl.margin", FIELD(c.train.model.macl.margin)));
    k.push_back(size_key("macl.queue_size", FIELD(c.train.model.macl.queue_size)));
    k.push_back(size_key("macl.d_proj", FIELD(c.train.model.macl.d_proj)));
    k.push_back(double_key("macl.tau0", FIELD(c.train.model.macl.tau0)));
    k.push_back(double_key("macl.tau_min", FIELD(c.train.model.macl.tau_min)));
    k.push_back(double_key("macl.tau_max", FIELD(c.train.model.macl.tau_max)));
    k.push_back(bool_key("macl.nearest_k", FIELD(c.train.model.macl.nearest_k)));
    k.push_back(size_key("macl.nearest_count", FIELD(c.train.model.macl.nearest_count)));
    k.push_back(bool_key("macl.cross_real_only", FIELD(c.train.model.macl.cross_real_only)));
    k.push_back(size_key("macl.attn_hidden", FIELD(c.train.model.macl.attn_hidden)));
    k.push_back(size_key("macl.gate_hidden", FIELD(c.train.model.macl.gate_hidden)));
    k.push_back(size_key("macl.history_dim", FIELD(c.train.model.macl.history_dim)));
    // fusion
    k.push_back(size_key("fusion.k_max", FIELD(c.train.model.fusion.k_max)));
    k.push_back(double_key("fusion.beta", FIELD(c.train.model.fusion.beta)));
    k.push_back(double_key("fusion.gamma", FIELD(c.train.model.fusion.gamma)));
    k.push_back(double_key("fusion.eps", FIELD(c.train.model.fusion.eps)));
    k.push_back(bool_key("fusion.label_aware", FIELD(c.train.model.fusion.label_aware)));
    k.push_back(size_key("fusion.attn_heads", FIELD(c.train.model.fusion.attn_heads)));
    k.push_back(size_key("fusion.kmeans_iters", FIELD(c.train.model.fusion.kmeans_iters)));
    k.push_back(double_key("fusion.kmeans_tol", FIELD(c.train.model.fusion.kmeans_tol)));
    k.push_back(double_key("fusion.cov_reg", FIELD(c.train.model.fusion.cov_reg)));
    k.push_back(double_key("fusion.weak_silhouette", FIELD(c.train.model.fusion.weak_silhouette)));
    // large-kernel stack
    k.push_back(size_key("lka.channels", FIELD(c.train.model.lka.channels)));
    k.push_back(size_key("lka.n_groups", FIELD(c.train.model.lka.n_groups)));
    k.push_back({"lka.scales",
                 [](RunConfig& c, const std::string& v) {
                   std::vector<lka::Scale> scales;
                   std::stringstream ss(v);
                   std::string part;
                   while (std::getline(ss, part, ',')) {
                     part = trim(part);
                     const auto colon = part.find(':');
                     if (colon == std::string::npos) bad("lka.scales", v, "kernel:dilation pairs");
                     scales.push_back({static_cast<std::size_t>(parse_u64("lka.scales", part.substr(0, colon))),
                                       static_cast<std::size_t>(parse_u64("lka.scales", part.substr(colon + 1)))});
                   }
                   if (scales.empty()) bad("lka.scales", v, "kernel:dilation pairs");
                   c.train.model.lka.scales = scales;
                 },
                 [](const RunConfig& c) {
                   std::string out;
                   for (const auto& s : c.train.model.lka.scales) {
                     if (!out.empty()) out += ",";
                     out += std::to_string(s.kernel) + ":" + std::to_string(s.dilation);
                   }
                   return out;
                 }});
    k.push_back(size_key("lka.gate_kernel", FIELD(c.train.model.lka.gate_kernel)));
    k.push_back(size_key("lka.gsau_kernel", FIELD(c.train.model.lka.gsau_kernel)));
    k.push_back(bool_key("lka.allow_odd_depth", FIELD(c.train.model.lka.allow_odd_depth)));
    // heads
    k.push_back(size_key("head.rfmf_heads", FIELD(c.train.model.head.rfmf_heads)));
    k.push_back(double_key("head.dropout", FIELD(c.train.model.head.dropout)));
    k.push_back(size_key("head.frame_hidden", FIELD(c.train.model.head.frame_hidden)));
    k.push_back(double_key("head.bn_momentum", FIELD(c.train.model.head.bn_momentum)));
    k.push_back(double_key("head.bn_eps", FIELD(c.train.model.head.bn_eps)));
    k.push_back(bool_key("head.per_modality_sample_heads", FIELD(c.train.model.head.per_modality_sample_heads)));
    // model wiring
    k.push_back(size_key("model.depth", FIELD(c.train.model.depth)));
    k.push_back(double_key("model.eta", FIELD(c.train.model.eta)));
    k.push_back(double_key("model.aug_noise", FIELD(c.train.model.aug_noise)));
    k.push_back(size_key("model.aug_shift", FIELD(c.train.model.aug_shift)));
    k.push_back(size_key("model.video_sub", FIELD(c.train.model.video_sub)));
    k.push_back(size_key("model.audio_freq", FIELD(c.train.model.audio_freq)));
    k.push_back(bool_key("flags.use_macl", FIELD(c.train.model.flags.use_macl)));
    k.push_back(bool_key("flags.use_intra", FIELD(c.train.model.flags.use_intra)));
    k.push_back(bool_key("flags.use_cross", FIELD(c.train.model.flags.use_cross)));
    k.push_back(bool_key("flags.use_weights", FIELD(c.train.model.flags.use_weights)));
    k.push_back(bool_key("flags.use_pareto", FIELD(c.train.model.flags.use_pareto)));
    // gradient combination
    k.push_back(double_key("pareto.lambda0", FIELD(c.train.pareto.lambda0)));
    k.push_back(double_key("pareto.kappa", FIELD(c.train.pareto.kappa)));
    k.push_back(size_key("pareto.pgd_steps", FIELD(c.train.pareto.pgd_steps)));
    k.push_back(double_key("pareto.pgd_lr", FIELD(c.train.pareto.pgd_lr)));
    k.push_back(double_key("pareto.tol", FIELD(c.train.pareto.tol)));
    k.push_back(double_key("pareto.tie_alpha", FIELD(c.train.pareto.tie_alpha)));
    k.push_back(bool_key("pareto.noise", FIELD(c.train.pareto.noise)));
    k.push_back(double_key("pareto.noise_scale", FIELD(c.train.pareto.noise_scale)));
    // optimizer and schedule
    k.push_back({"optim.kind",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "sgd") c.train.optimizer.kind = pareto::OptimizerKind::kSgd;
                   else if (v == "adam") c.train.optimizer.kind = pareto::OptimizerKind::kAdam;
                   else bad("optim.kind", v, "sgd or adam");
                 },
                 [](const RunConfig& c) {
                   return std::string(c.train.optimizer.kind == pareto::OptimizerKind::kSgd ? "sgd" : "adam");
                 }});
    k.push_back(double_key("optim.lr", FIELD(c.train.optimizer.lr)));
    k.push_back(double_key("optim.momentum", FIELD(c.train.optimizer.momentum)));
    k.push_back(double_key("optim.beta1", FIELD(c.train.optimizer.beta1)));
    k.push_back(double_key("optim.beta2", FIELD(c.train.optimizer.beta2)));
    k.push_back(double_key("optim.eps", FIELD(c.train.optimizer.eps)));
    k.push_back(size_key("train.epochs", FIELD(c.train.epochs)));
    k.push_back(size_key("train.batch", FIELD(c.train.batch)));
    k.push_back(u64_key("train.seed", FIELD(c.train.seed)));
    k.push_back(size_key("train.max_steps", FIELD(c.train.max_steps)));
    return k;
  }();
  return keys;
}

#undef FIELD

}  // namespace

KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (kv.count(key)) throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    kv[key] = value;
  }
  return kv;
}

KeyValues read_key_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

void apply(const KeyValues& kv, RunConfig& cfg) {
  const auto& keys = registry();
  for (const auto& [name, value] : kv) {
    auto it = std::find_if(keys.begin(), keys.end(), [&](const Key& k) { return k.name == name; });
    if (it == keys.end()) throw ConfigError("unknown config key '" + name + "'");
    it->set(cfg, value);
  }
  cfg.train.model.head.d_model = cfg.train.model.enc.d_model;
}

RunConfig load(const std::string& path) {
  RunConfig cfg;
  config::apply(read_key_values(path), cfg);
  return cfg;
}

std::string to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : registry()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

std::vector<std::string> known_keys() {
  std::vector<std::string> out;
  for (const auto& k : registry()) out.push_back(k.name);
  return out;
}

}  // namespace macb::config
