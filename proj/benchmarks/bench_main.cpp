#include <benchmark/benchmark.h>

#include "advae/checkpoint.hpp"
#include "advae/trainer.hpp"

using namespace advae;

namespace {

// (C, N, H, W) activations, the layout used between layers.
Tensor<float> activations(std::size_t c, std::size_t n, std::size_t s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> x({c, n, s, s});
  for (auto& v : x.values()) v = static_cast<float>(rng.normal());
  return x;
}

void BM_Conv3x3Stride2Forward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto s = static_cast<std::size_t>(state.range(1));
  Rng rng(1);
  nn::Sequential<float> net;
  net.add<nn::Conv2d<float>>("conv", c, 2 * c, 3, 2, 1, rng);
  const auto x = activations(c, 32, s, 2);
  for (auto _ : state) benchmark::DoNotOptimize(net.infer(x));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_Conv3x3Stride2Forward)->Args({3, 64})->Args({32, 32})->Args({64, 16})->Unit(benchmark::kMillisecond);

void BM_Conv3x3Stride2Backward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto s = static_cast<std::size_t>(state.range(1));
  Rng rng(1);
  nn::Sequential<float> net;
  net.add<nn::Conv2d<float>>("conv", c, 2 * c, 3, 2, 1, rng);
  const auto x = activations(c, 32, s, 2);
  nn::Tape<float> tape;
  const auto y = net.forward(x, nn::Mode::train, &tape);
  Tensor<float> g(y.shape(), 1.0f);
  for (auto _ : state) benchmark::DoNotOptimize(net.backward(g, tape, true));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_Conv3x3Stride2Backward)->Args({3, 64})->Args({32, 32})->Args({64, 16})->Unit(benchmark::kMillisecond);

void BM_RenderFace(benchmark::State& state) {
  const auto size = static_cast<std::size_t>(state.range(0));
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(render_face(sample_topic_params("beauty", seed++), size));
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_RenderFace)->Arg(32)->Arg(64)->Arg(128)->Unit(benchmark::kMicrosecond);

// One optimizer step of the desk-scale CVAE (64 px, d = 100) on a batch of 32.
void BM_CvaeTrainStep(benchmark::State& state) {
  DatasetManifest m;
  m.config.topics = {"beauty"};
  m.config.image_size = 64;
  std::vector<ImageTensor> images;
  for (std::size_t i = 0; i < 32; ++i) {
    const auto p = sample_topic_params("beauty", i);
    images.push_back(render_face(p, 64));
    ManifestRecord r;
    r.topic = "beauty";
    r.params = p;
    r.labels = derive_labels(p);
    m.records.push_back(r);
  }
  ClassifierConfig cc;
  cc.kind = ClassifierKind::attribute;
  cc.classes = 12;
  const Classifier ca(cc, 1);
  cc.kind = ClassifierKind::expression;
  cc.classes = 8;
  const Classifier ce(cc, 2);
  const auto phi = FeatureExtractor::from_classifier(ca);
  TrainingConfig t;
  t.epochs = 1'000'000;
  CvaeTrainer trainer(t, m, images, {&ca, &ce, &phi});
  for (auto _ : state) benchmark::DoNotOptimize(trainer.run_epoch());
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_CvaeTrainStep)->Unit(benchmark::kMillisecond);

void BM_CheckpointSerialize(benchmark::State& state) {
  const auto ckpt = cvae_checkpoint(Cvae(CvaeConfig{}, 3));
  std::size_t bytes = 0;
  for (auto _ : state) {
    const auto out = serialize_checkpoint(ckpt);
    bytes = out.size();
    benchmark::DoNotOptimize(out.data());
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * bytes));
}
BENCHMARK(BM_CheckpointSerialize)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
