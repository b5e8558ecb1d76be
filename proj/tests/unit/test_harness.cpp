#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "macb/config.hpp"
#include "macb/dataset.hpp"
#include "macb/error.hpp"
#include "macb/metrics.hpp"
#include "macb/rng.hpp"
#include "macb/trainer.hpp"

using namespace macb;

namespace {

double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i] / n, mb += b[i] / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb + 1e-300);
}

// Blob row centroid per frame, weighted by squared excess over the frame minimum.
std::vector<double> video_track(const data::AvSample& s) {
  const std::size_t T = s.video.dim(0), C = s.video.dim(1), H = s.video.dim(2), W = s.video.dim(3);
  std::vector<double> out;
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> img(H * W, 0.0);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < H * W; ++p) img[p] += s.video[(t * C + c) * H * W + p];
    const double lo = *std::min_element(img.begin(), img.end());
    double num = 0, den = 0;
    for (std::size_t p = 0; p < H * W; ++p) {
      const double w = (img[p] - lo) * (img[p] - lo);
      num += w * static_cast<double>(p / W);
      den += w;
    }
    out.push_back(num / den);
  }
  return out;
}

// log2 pitch per frame-aligned chunk: the f0 on a log grid over 80-400 Hz
// maximizing the summed DFT magnitude at its first three harmonics.
std::vector<double> audio_track(const data::AvSample& s, std::size_t frames, double rate) {
  const std::size_t chunk = s.audio.size() / frames;
  std::vector<double> out;
  for (std::size_t f = 0; f < frames; ++f) {
    double best = -1.0, best_lf = 0.0;
    for (double lf = std::log2(80.0); lf <= std::log2(400.0); lf += 1.0 / 48.0) {
      double score = 0.0;
      for (int h = 1; h <= 3; ++h) {
        const double w = 2.0 * std::numbers::pi * h * std::exp2(lf) / rate;
        double re = 0.0, im = 0.0;
        for (std::size_t k = 0; k < chunk; ++k) {
          re += s.audio[f * chunk + k] * std::cos(w * static_cast<double>(k));
          im += s.audio[f * chunk + k] * std::sin(w * static_cast<double>(k));
        }
        score += std::hypot(re, im);
      }
      if (score > best) best = score, best_lf = lf;
    }
    out.push_back(best_lf);
  }
  return out;
}

data::GenConfig small_gen(std::size_t n = 64) {
  data::GenConfig g;
  g.n_samples = n;
  g.n_identities = 8;
  g.delta = 1.0;
  return g;
}

train::TrainConfig small_train() {
  train::TrainConfig c;
  c.batch = 8;
  c.epochs = 2;
  c.model.depth = 2;
  c.model.fusion.k_max = 2;
  c.seed = 3;
  return c;
}

}  // namespace

TEST(Metrics, AucMatchesPairwiseOracleWithTies) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 20;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.index(6)) / 5.0;
      y[i] = static_cast<int>(rng.index(2));
    }
    y[0] = 0;
    y[1] = 1;
    EXPECT_NEAR(*metrics::auc(s, y), pairwise_auc(s, y), 1e-12) << "trial " << trial;
  }
}

TEST(Metrics, PerfectConstantAndSingleClass) {
  const std::vector<double> s{0.1, 0.9, 0.2, 0.8};
  const std::vector<int> y{0, 1, 0, 1}, y3{0, 0, 0, 1}, ones{1, 1, 1, 1};
  EXPECT_DOUBLE_EQ(*metrics::auc(s, y), 1.0);
  EXPECT_DOUBLE_EQ(metrics::accuracy(s, y), 1.0);
  const std::vector<double> flat(4, 0.3);
  EXPECT_DOUBLE_EQ(*metrics::auc(flat, y3), 0.5);
  EXPECT_DOUBLE_EQ(metrics::accuracy(flat, y3), 0.75);
  EXPECT_FALSE(metrics::auc(s, ones).has_value());
  EXPECT_DOUBLE_EQ(metrics::accuracy(std::vector<double>{0.5}, std::vector<int>{1}), 1.0);
}

TEST(Dataset, LabelInvariants) {
  const auto ds = data::generate(small_gen(80));
  ASSERT_EQ(ds.samples.size(), 80u);
  std::array<int, 4> count{};
  for (const auto& s : ds.samples) {
    ++count[static_cast<int>(s.cls)];
    EXPECT_EQ(s.label == 0, s.cls == data::AvClass::kRealReal);
    double frames = 0;
    for (double f : s.frame_labels.data()) frames += f;
    EXPECT_EQ(frames == 0.0, s.label == 0);
    EXPECT_EQ(s.video.shape(), (Shape{8, 3, 16, 16}));
    EXPECT_EQ(s.audio.size(), 5360u);
  }
  EXPECT_EQ(count[0], 32);
  EXPECT_EQ(count[1], 16);
}

TEST(Dataset, SplitIsIdentityDisjoint) {
  const auto ds = data::generate(small_gen(80));
  std::set<int> train_ids, test_ids;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) (ds.split[i] ? test_ids : train_ids).insert(ds.samples[i].identity);
  for (int id : test_ids) EXPECT_EQ(train_ids.count(id), 0u);
  EXPECT_FALSE(test_ids.empty());
  EXPECT_EQ(ds.train_indices().size() + ds.test_indices().size(), 80u);
}

TEST(Dataset, RoundTripAndDeterminism) {
  const auto ds = data::generate(small_gen(24));
  const auto path = (std::filesystem::temp_directory_path() / "macb_ds.bin").string();
  data::save_dataset(path, ds);
  const auto back = data::load_dataset(path);
  std::filesystem::remove(path);
  ASSERT_EQ(back.samples.size(), ds.samples.size());
  EXPECT_EQ(back.split, ds.split);
  EXPECT_EQ(back.config.artifact, ds.config.artifact);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    EXPECT_EQ(back.samples[i].video, ds.samples[i].video);
    EXPECT_EQ(back.samples[i].audio, ds.samples[i].audio);
    EXPECT_EQ(back.samples[i].frame_labels, ds.samples[i].frame_labels);
    EXPECT_EQ(back.samples[i].cls, ds.samples[i].cls);
  }
  EXPECT_EQ(data::generate(small_gen(24)).samples[5].audio, ds.samples[5].audio);
  EXPECT_THROW(data::load_dataset(path), IoError);
}

TEST(Dataset, FullStrengthBreaksCrossModalCorrelation) {
  auto g = small_gen(160);
  g.artifact = 0.0;
  const auto ds = data::generate(g);
  std::vector<double> real, fake;
  for (const auto& s : ds.samples) {
    const double r = pearson(video_track(s), audio_track(s, g.frames, g.sample_rate));
    (s.label ? fake : real).push_back(r);
  }
  double wins = 0;
  for (double r : real)
    for (double f : fake) wins += r > f;
  EXPECT_GE(wins / static_cast<double>(real.size() * fake.size()), 0.95);
}

TEST(Dataset, ConfigValidation) {
  auto g = small_gen();
  g.mix = {0.5, 0.5, 0.5, 0.0};
  EXPECT_THROW(data::generate(g), ConfigError);
  g = small_gen();
  g.delta = 1.5;
  EXPECT_THROW(data::generate(g), ConfigError);
}

TEST(Config, ParseApplyAndRoundTrip) {
  const auto kv = config::parse_key_values("# comment\n gen.delta = 0.25 \n\ntrain.epochs=3\n");
  EXPECT_EQ(kv.at("gen.delta"), "0.25");
  config::RunConfig c;
  config::apply(kv, c);
  EXPECT_DOUBLE_EQ(c.gen.delta, 0.25);
  EXPECT_EQ(c.train.epochs, 3u);
  config::RunConfig d;
  config::apply(config::parse_key_values(config::to_text(c)), d);
  EXPECT_EQ(config::to_text(d), config::to_text(c));
  EXPECT_GE(config::known_keys().size(), 40u);
  EXPECT_THROW(config::apply(config::parse_key_values("gen.nope = 1"), c), ConfigError);
  EXPECT_THROW(config::apply(config::parse_key_values("gen.delta = abc"), c), ConfigError);
  EXPECT_THROW(config::parse_key_values("no equals sign"), ConfigError);
  EXPECT_THROW(config::parse_key_values("a = 1\na = 2"), ConfigError);
}

TEST(Recipes, VariantNames) {
  EXPECT_EQ(train::recipe_variants("contrastive"),
            (std::vector<std::string>{"w/o L_C", "w/o L_intra", "w/o L_cross", "w/o w", "full"}));
  EXPECT_EQ(train::recipe_variants("depth"), (std::vector<std::string>{"D=0", "D=2", "D=4", "D=6", "D=8"}));
  EXPECT_EQ(train::recipe_variants("pareto").size(), 2u);
  EXPECT_THROW(train::recipe_variants("bogus"), ConfigError);
  const auto base = small_train();
  EXPECT_FALSE(train::variant_config("contrastive", "w/o L_C", base).model.flags.use_macl);
  EXPECT_FALSE(train::variant_config("contrastive", "w/o w", base).model.flags.use_weights);
  EXPECT_EQ(train::variant_config("depth", "D=6", base).model.depth, 6u);
  EXPECT_FALSE(train::variant_config("pareto", "pareto off", base).model.flags.use_pareto);
}

class Training : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { ds_ = new data::Dataset(data::generate(small_gen())); }
  static void TearDownTestSuite() { delete ds_; }
  static data::Dataset* ds_;
};
data::Dataset* Training::ds_ = nullptr;

TEST_F(Training, EpochAccounting) {
  const auto cfg = small_train();
  const auto r = train::train(*ds_, cfg);
  const std::size_t n = ds_->train_indices().size();
  const std::size_t per_epoch = n / cfg.batch + (n % cfg.batch >= 2 ? 1 : 0);
  ASSERT_EQ(r.epochs.size(), 2u);
  EXPECT_EQ(r.steps.size(), 2 * per_epoch);
  for (std::size_t i = 0; i < r.steps.size(); ++i) {
    EXPECT_EQ(r.steps[i].step, i);
    EXPECT_EQ(r.steps[i].epoch, i / per_epoch);
    EXPECT_TRUE(std::isfinite(r.steps[i].loss_total));
  }
}

TEST_F(Training, FixedSeedGivesIdenticalLogsAndCheckpoints) {
  auto cfg = small_train();
  cfg.max_steps = 6;
  std::ostringstream a, b;
  const auto ra = train::train(*ds_, cfg, &a);
  const auto rb = train::train(*ds_, cfg, &b);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(ra.model.params, rb.model.params);
  EXPECT_EQ(a.str().substr(0, a.str().find('\n')), train::step_csv_header());
  const auto ea = train::evaluate(ra.model, *ds_, ds_->test_indices());
  EXPECT_EQ(train::metrics_csv_row("test", ea), train::metrics_csv_row("test", train::evaluate(rb.model, *ds_, ds_->test_indices())));
}

TEST_F(Training, CheckpointRoundTrip) {
  auto cfg = small_train();
  cfg.max_steps = 2;
  const auto r = train::train(*ds_, cfg);
  const auto path = (std::filesystem::temp_directory_path() / "macb_ckpt.bin").string();
  train::save_checkpoint(path, cfg, r.model);
  const auto ck = train::load_checkpoint(path);
  std::filesystem::remove(path);
  EXPECT_EQ(ck.model.params, r.model.params);
  EXPECT_EQ(ck.model.buffers, r.model.buffers);
  const auto idx = ds_->test_indices();
  EXPECT_EQ(train::evaluate(ck.model, *ds_, idx).probs, train::evaluate(r.model, *ds_, idx).probs);
}

TEST_F(Training, BareModelLossDecreases) {
  auto cfg = small_train();
  cfg.model.depth = 0;
  cfg.model.flags = {false, false, false, false, false};
  cfg.epochs = 100;
  cfg.max_steps = 200;
  cfg.optimizer.lr = 1e-3;
  const auto r = train::train(*ds_, cfg);
  ASSERT_EQ(r.steps.size(), 200u);
  double first = 0, last = 0;
  for (std::size_t i = 0; i < 20; ++i) first += r.steps[i].loss_total, last += r.steps[180 + i].loss_total;
  EXPECT_LT(last, 0.8 * first);
}

TEST_F(Training, TooFewSamplesRejected) {
  auto cfg = small_train();
  cfg.batch = 64;
  EXPECT_THROW(train::train(*ds_, cfg), ConfigError);
}
