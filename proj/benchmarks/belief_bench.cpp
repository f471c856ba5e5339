#include "crsim/belief.hpp"
#include "crsim/synthetic.hpp"

#include <benchmark/benchmark.h>

namespace {

using namespace crsim;

void BM_MhSample(benchmark::State& state) {
  SyntheticConfig sc;
  sc.items = 500;
  sc.users = 1;
  sc.seed = 9;
  const auto corpus = make_synthetic_corpus(sc);
  const LikelihoodModel model{&corpus.catalog, &corpus.cavs, BehaviorConfig{}, RejectLikelihood{}};
  BeliefState belief(corpus.priors.front(), SamplerConfig{});
  for (std::int64_t t = 0; t < state.range(0); ++t) {
    const std::size_t a = static_cast<std::size_t>(2 * t), b = a + 1;
    if (t % 2 == 0)
      belief.update({ItemQuery{{a, b}}, ItemChoice{0}}, corpus.cavs.size());
    else
      belief.update({AttrQuery{a, static_cast<std::size_t>(t) % corpus.cavs.size()}, AttrAnswer{1}}, corpus.cavs.size());
  }
  for (auto _ : state) benchmark::DoNotOptimize(mh_sample(belief, model));
}
BENCHMARK(BM_MhSample)->Arg(0)->Arg(7)->Unit(benchmark::kMillisecond);

}  // namespace
