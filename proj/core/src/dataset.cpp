#include "macb/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "macb/error.hpp"

namespace macb::data {

namespace {

constexpr std::uint32_t kVersion = 1;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct Style {
  std::array<double, 3> color{};
  std::array<double, 3> background{};
  double sigma = 2.0;
  double f0 = 180.0;
  std::array<double, 3> harmonics{};
};

Style identity_style(std::uint64_t seed, std::size_t id) {
  Rng rng(mix_seed(seed, 0x1d000 + id));
  Style s;
  for (auto& c : s.color) c = rng.uniform(0.4, 1.0);
  for (auto& b : s.background) b = rng.uniform(0.0, 0.2);
  s.sigma = rng.uniform(1.5, 3.0);
  s.f0 = rng.uniform(120.0, 250.0);
  double total = 0.0;
  for (auto& h : s.harmonics) total += (h = rng.uniform(0.2, 1.0));
  for (auto& h : s.harmonics) h /= total;
  return s;
}

// Per-modality motion: the shared trajectory, or inside the fake segment a
// delta-mix with an independent one.
struct Motion {
  Trajectory x, y;
  Trajectory alt_x, alt_y;
  bool fake = false;
  std::size_t seg_begin = 0, seg_end = 0;
  std::size_t frames = 8;
  double delta = 0.0;

  bool in_segment(double u) const {
    if (!fake) return false;
    const auto f = std::min(frames - 1, static_cast<std::size_t>(u * static_cast<double>(frames)));
    return f >= seg_begin && f < seg_end;
  }
  double px(double u) const { return in_segment(u) ? (1 - delta) * x.at(u) + delta * alt_x.at(u) : x.at(u); }
  double py(double u) const { return in_segment(u) ? (1 - delta) * y.at(u) + delta * alt_y.at(u) : y.at(u); }
};

Tensor render_video(const GenConfig& cfg, const Style& st, const Motion& m, Rng& rng) {
  const std::size_t t_n = cfg.frames, c_n = cfg.channels, h_n = cfg.height, w_n = cfg.width;
  Tensor v({t_n, c_n, h_n, w_n});
  const double cy0 = (static_cast<double>(h_n) - 1.0) / 2.0, cx0 = (static_cast<double>(w_n) - 1.0) / 2.0;
  for (std::size_t t = 0; t < t_n; ++t) {
    const double u = (static_cast<double>(t) + 0.5) / static_cast<double>(t_n);
    const double cy = cy0 + 0.3 * static_cast<double>(h_n) * m.py(u);
    const double cx = cx0 + 0.3 * static_cast<double>(w_n) * m.px(u);
    const bool art = m.in_segment(u);
    for (std::size_t c = 0; c < c_n; ++c) {
      const double color = st.color[c % 3] + (art && c == 0 ? 0.3 * cfg.artifact * m.delta : 0.0);
      for (std::size_t i = 0; i < h_n; ++i)
        for (std::size_t j = 0; j < w_n; ++j) {
          const double di = static_cast<double>(i) - cy, dj = static_cast<double>(j) - cx;
          double val = st.background[c % 3] + color * std::exp(-(di * di + dj * dj) / (2.0 * st.sigma * st.sigma));
          if (art) val += 0.15 * cfg.artifact * m.delta * (((i + j) % 2 == 0) ? 1.0 : -1.0);
          val += rng.normal(0.0, cfg.video_noise);
          v[((t * c_n + c) * h_n + i) * w_n + j] = val;
        }
    }
  }
  return v;
}

Tensor render_audio(const GenConfig& cfg, const Style& st, const Motion& m, Rng& rng) {
  const std::size_t n = cfg.audio_samples;
  Tensor a({n});
  double phase = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double u = static_cast<double>(k) / static_cast<double>(n);
    const bool art = m.in_segment(u);
    const double f = st.f0 * std::exp2(0.5 * m.py(u));
    phase += kTwoPi * f / cfg.sample_rate;
    double s = 0.0;
    for (std::size_t h = 0; h < st.harmonics.size(); ++h) {
      double w = st.harmonics[h];
      if (art && h == 2) w += 0.5 * cfg.artifact * m.delta;
      s += w * std::sin(static_cast<double>(h + 1) * phase);
    }
    s *= 0.3;
    s += rng.normal(0.0, cfg.audio_noise + (art ? 0.1 * cfg.artifact * m.delta : 0.0));
    a[k] = s;
  }
  return a;
}

// Class sequence with running counts kept as close to the mix as possible.
std::vector<AvClass> class_sequence(const GenConfig& cfg) {
  std::vector<AvClass> seq(cfg.n_samples);
  std::array<double, 4> count{};
  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    std::size_t best = 0;
    double best_deficit = -1e300;
    for (std::size_t c = 0; c < 4; ++c) {
      const double deficit = cfg.mix[c] * static_cast<double>(i + 1) - count[c];
      if (deficit > best_deficit + 1e-12) {
        best_deficit = deficit;
        best = c;
      }
    }
    count[best] += 1.0;
    seq[i] = static_cast<AvClass>(best);
  }
  return seq;
}

void write_config(std::ostream& os, const GenConfig& c) {
  io::write_u32(os, static_cast<std::uint32_t>(c.n_samples));
  io::write_u32(os, static_cast<std::uint32_t>(c.n_identities));
  for (double m : c.mix) io::write_f64(os, m);
  io::write_f64(os, c.delta);
  io::write_u32(os, static_cast<std::uint32_t>(c.min_segment));
  io::write_u32(os, static_cast<std::uint32_t>(c.max_segment));
  io::write_f64(os, c.test_fraction);
  io::write_u32(os, static_cast<std::uint32_t>(c.seed >> 32));
  io::write_u32(os, static_cast<std::uint32_t>(c.seed & 0xffffffffu));
  for (std::size_t v : {c.frames, c.channels, c.height, c.width, c.audio_samples})
    io::write_u32(os, static_cast<std::uint32_t>(v));
  io::write_f64(os, c.sample_rate);
  io::write_f64(os, c.video_noise);
  io::write_f64(os, c.audio_noise);
  io::write_f64(os, c.artifact);
}

GenConfig read_config(std::istream& is) {
  GenConfig c;
  c.n_samples = io::read_u32(is);
  c.n_identities = io::read_u32(is);
  for (double& m : c.mix) m = io::read_f64(is);
  c.delta = io::read_f64(is);
  c.min_segment = io::read_u32(is);
  c.max_segment = io::read_u32(is);
  c.test_fraction = io::read_f64(is);
  const std::uint64_t hi = io::read_u32(is), lo = io::read_u32(is);
  c.seed = (hi << 32) | lo;
  for (std::size_t* v : {&c.frames, &c.channels, &c.height, &c.width, &c.audio_samples}) *v = io::read_u32(is);
  c.sample_rate = io::read_f64(is);
  c.video_noise = io::read_f64(is);
  c.audio_noise = io::read_f64(is);
  c.artifact = io::read_f64(is);
  return c;
}

}  // namespace

const char* class_name(AvClass c) {
  switch (c) {
    case AvClass::kRealReal: return "RealVideo-RealAudio";
    case AvClass::kFakeVideo: return "FakeVideo-RealAudio";
    case AvClass::kFakeAudio: return "RealVideo-FakeAudio";
    case AvClass::kFakeBoth: return "FakeVideo-FakeAudio";
  }
  return "unknown";
}

double Trajectory::at(double u) const {
  return amp1 * std::sin(kTwoPi * freq1 * u + phase1) + amp2 * std::sin(kTwoPi * freq2 * u + phase2);
}

Trajectory random_trajectory(Rng& rng) {
  Trajectory t;
  t.amp1 = rng.uniform(0.4, 0.7);
  t.amp2 = 1.0 - t.amp1;
  t.freq1 = rng.uniform(0.5, 1.5);
  t.freq2 = rng.uniform(1.5, 3.0);
  t.phase1 = rng.uniform(0.0, kTwoPi);
  t.phase2 = rng.uniform(0.0, kTwoPi);
  return t;
}

void GenConfig::validate() const {
  const double total = mix[0] + mix[1] + mix[2] + mix[3];
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("gen: class mix must sum to 1");
  for (double m : mix)
    if (m < 0.0) throw ConfigError("gen: class mix entries must be >= 0");
  if (!(delta >= 0.0 && delta <= 1.0)) throw ConfigError("gen: delta must lie in [0, 1]");
  if (!(artifact >= 0.0)) throw ConfigError("gen: artifact must be >= 0");
  if (n_identities < 2 || n_samples < n_identities) throw ConfigError("gen: need >= 2 identities and >= 1 sample each");
  if (min_segment < 1 || min_segment > max_segment || max_segment > frames)
    throw ConfigError("gen: need 1 <= min_segment <= max_segment <= frames");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("gen: test_fraction must lie in (0, 1)");
  if (frames == 0 || channels == 0 || height == 0 || width == 0 || audio_samples == 0)
    throw ConfigError("gen: empty clip geometry");
}

std::vector<std::size_t> Dataset::indices(int which) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < split.size(); ++i)
    if (split[i] == which) out.push_back(i);
  return out;
}

Dataset generate(const GenConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.config = cfg;
  const auto classes = class_sequence(cfg);
  std::vector<Style> styles;
  for (std::size_t id = 0; id < cfg.n_identities; ++id) styles.push_back(identity_style(cfg.seed, id));

  // Contiguous identity blocks; the smooth class sequence spreads classes evenly.
  const std::size_t per_id = (cfg.n_samples + cfg.n_identities - 1) / cfg.n_identities;
  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    Rng rng(mix_seed(cfg.seed, i));
    AvSample s;
    s.identity = static_cast<int>(std::min(i / per_id, cfg.n_identities - 1));
    s.cls = classes[i];
    s.label = s.cls == AvClass::kRealReal ? 0 : 1;
    Motion vm, am;
    vm.frames = am.frames = cfg.frames;
    vm.delta = am.delta = cfg.delta;
    vm.x = am.x = random_trajectory(rng);
    vm.y = am.y = random_trajectory(rng);
    vm.alt_x = random_trajectory(rng);
    vm.alt_y = random_trajectory(rng);
    am.alt_x = random_trajectory(rng);
    am.alt_y = random_trajectory(rng);
    const std::size_t len = cfg.min_segment + rng.index(cfg.max_segment - cfg.min_segment + 1);
    const std::size_t begin = rng.index(cfg.frames - len + 1);
    s.frame_labels = Tensor({cfg.frames}, 0.0);
    if (s.label == 1) {
      vm.fake = video_fake(s.cls);
      am.fake = audio_fake(s.cls);
      vm.seg_begin = am.seg_begin = begin;
      vm.seg_end = am.seg_end = begin + len;
      for (std::size_t t = begin; t < begin + len; ++t) s.frame_labels[t] = 1.0;
    }
    const Style& st = styles[static_cast<std::size_t>(s.identity)];
    s.video = render_video(cfg, st, vm, rng);
    s.audio = render_audio(cfg, st, am, rng);
    ds.samples.push_back(std::move(s));
  }

  // Hold out whole identities.
  const std::size_t n_test =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(cfg.test_fraction * static_cast<double>(cfg.n_identities))),
                              1, cfg.n_identities - 1);
  std::vector<std::size_t> ids(cfg.n_identities);
  std::iota(ids.begin(), ids.end(), 0);
  Rng split_rng(mix_seed(cfg.seed, 0x5b117));
  std::shuffle(ids.begin(), ids.end(), split_rng.engine());
  std::vector<bool> held(cfg.n_identities, false);
  for (std::size_t k = 0; k < n_test; ++k) held[ids[k]] = true;
  ds.split.resize(cfg.n_samples);
  for (std::size_t i = 0; i < cfg.n_samples; ++i) ds.split[i] = held[static_cast<std::size_t>(ds.samples[i].identity)] ? 1 : 0;
  return ds;
}

void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os.write("MACD", 4);
  io::write_u32(os, kVersion);
  write_config(os, ds.config);
  io::write_u32(os, static_cast<std::uint32_t>(ds.samples.size()));
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    io::write_u32(os, static_cast<std::uint32_t>(s.identity));
    io::write_u32(os, static_cast<std::uint32_t>(s.cls));
    io::write_u32(os, static_cast<std::uint32_t>(s.label));
    io::write_u32(os, static_cast<std::uint32_t>(ds.split[i]));
    write_tensor(os, s.video);
    write_tensor(os, s.audio);
    write_tensor(os, s.frame_labels);
  }
  if (!os) throw IoError("write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "MACD") throw IoError(path + ": not a dataset file");
  if (io::read_u32(is) != kVersion) throw IoError(path + ": unsupported dataset version");
  Dataset ds;
  ds.config = read_config(is);
  const std::size_t n = io::read_u32(is);
  for (std::size_t i = 0; i < n; ++i) {
    AvSample s;
    s.identity = static_cast<int>(io::read_u32(is));
    const auto cls = io::read_u32(is);
    if (cls > 3) throw IoError(path + ": bad class id");
    s.cls = static_cast<AvClass>(cls);
    s.label = static_cast<int>(io::read_u32(is));
    ds.split.push_back(static_cast<int>(io::read_u32(is)));
    s.video = read_tensor(is);
    s.audio = read_tensor(is);
    s.frame_labels = read_tensor(is);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace macb::data
