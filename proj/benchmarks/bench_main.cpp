#include <benchmark/benchmark.h>

#include <vector>

#include "macb/audio.hpp"
#include "macb/autodiff.hpp"
#include "macb/conv.hpp"
#include "macb/dataset.hpp"
#include "macb/model.hpp"
#include "macb/pareto.hpp"
#include "macb/rng.hpp"

using namespace macb;

static void BM_Conv3dDepthwise(benchmark::State& state) {
  const auto k = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor x = rng.normal_tensor({16, 4, 8, 8});
  const Tensor w = rng.normal_tensor({16, 1, k, k, k});
  const auto spec = ad::same_padding({k, k, k}, {1, 1, 1}, 16);
  for (auto _ : state) {
    ad::Tape tape;
    auto y = ad::conv3d(tape.variable(x), tape.variable(w), spec);
    tape.backward(ad::sum(y));
    benchmark::DoNotOptimize(tape.grad(y));
  }
}
BENCHMARK(BM_Conv3dDepthwise)->Arg(3)->Arg(5)->Arg(7);

static void BM_LogMel(benchmark::State& state) {
  audio::MelConfig cfg;
  Rng rng(2);
  const Tensor sig = rng.normal_tensor({16000});
  const auto method = state.range(0) == 0 ? audio::FftMethod::kDirect : audio::FftMethod::kAuto;
  for (auto _ : state) {
    const Tensor spec = audio::stft(sig, cfg, method);
    benchmark::DoNotOptimize(audio::log_mel(audio::mel_project(spec, cfg)));
  }
}
BENCHMARK(BM_LogMel)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

static void BM_SolveAlpha(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  std::vector<double> gm(n), gu(n);
  for (std::size_t i = 0; i < n; ++i) {
    gm[i] = rng.normal();
    gu[i] = rng.normal();
  }
  pareto::ParetoConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(pareto::solve_alpha(gm, gu, 0.3, cfg));
}
BENCHMARK(BM_SolveAlpha)->Arg(256)->Arg(65536);

static void BM_ModelStep(benchmark::State& state) {
  data::GenConfig gen;
  gen.n_samples = 16;
  gen.n_identities = 4;
  const auto ds = data::generate(gen);
  model::ModelConfig cfg;
  model::Model m(cfg, 0);
  std::vector<std::size_t> idx(ds.samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto clips = model::prepare_all(ds, idx, cfg);
  std::vector<const model::Prepared*> batch;
  for (const auto& c : clips) batch.push_back(&c);
  Rng rng(4);
  for (auto _ : state) {
    ad::Tape tape;
    const auto p = bind_variables(tape, m.params);
    auto r = model::forward(tape, p, m, batch, cls::Mode::kTrain, &rng);
    tape.backward(r.objectives.total);
    benchmark::DoNotOptimize(r.prob);
  }
}
BENCHMARK(BM_ModelStep)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
