#include <benchmark/benchmark.h>

#include "rstm/metrics.hpp"
#include "rstm/pipeline.hpp"
#include "rstm/rng.hpp"
#include "rstm/toyfaces.hpp"

using namespace rstm;

namespace {

Tensor<float> random_tensor(const std::vector<int>& dims, std::uint64_t seed) {
    Tensor<float> t(dims);
    Rng rng(seed);
    for (auto& v : t.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    return t;
}

void bench_conv2d(benchmark::State& state) {
    Tape<float> tape;
    Tensor<float> x = random_tensor({4, 32, 32, 32}, 1);
    Tensor<float> w = random_tensor({64, 32, 3, 3}, 2);
    Tensor<float> b = random_tensor({64}, 3);
    Var<float> vx = tape.constant(x), vw = tape.constant(w), vb = tape.constant(b);
    for (auto _ : state) {
        Var<float> y = conv2d(vx, vw, vb, 1, 1);
        benchmark::DoNotOptimize(y.val().data.data());
    }
}
BENCHMARK(bench_conv2d)->Unit(benchmark::kMillisecond);

void bench_conv2d_backward(benchmark::State& state) {
    for (auto _ : state) {
        Tape<float> tape;
        Tensor<float> x = random_tensor({4, 32, 32, 32}, 1);
        Tensor<float> w = random_tensor({64, 32, 3, 3}, 2);
        Tensor<float> b = random_tensor({64}, 3);
        Var<float> y = conv2d(tape.param(x), tape.param(w), tape.param(b), 1, 1);
        tape.backward(mean_all(y));
        benchmark::DoNotOptimize(w.grad.data());
    }
}
BENCHMARK(bench_conv2d_backward)->Unit(benchmark::kMillisecond);

void bench_softmax_rows(benchmark::State& state) {
    Tape<float> tape;
    Var<float> x = tape.constant(random_tensor({512, 256}, 4));
    for (auto _ : state) {
        Var<float> y = softmax_rows(x);
        benchmark::DoNotOptimize(y.val().data.data());
    }
}
BENCHMARK(bench_softmax_rows)->Unit(benchmark::kMicrosecond);

void bench_style_attention(benchmark::State& state) {
    ModelConfig cfg;
    ParamStore<float> ps;
    init_generator_params(ps, cfg, 5);
    std::vector<std::vector<char>> valid(8, std::vector<char>(kNumClasses, 1));
    Tensor<float> s = random_tensor({8, cfg.num_classes, cfg.style_dim}, 6);
    for (auto _ : state) {
        Tape<float> tape;
        StyleBatch<float> sb{tape.constant(s), valid};
        StyleBatch<float> out = mrsa_attend(tape, ps, sb, sb, cfg, false);
        benchmark::DoNotOptimize(out.styles.val().data.data());
    }
}
BENCHMARK(bench_style_attention)->Unit(benchmark::kMicrosecond);

void bench_generator_forward(benchmark::State& state) {
    RunConfig rc;
    ModelConfig cfg = model_config_from(rc);
    ParamStore<float> ps;
    init_generator_params(ps, cfg, 7);
    Dataset ds;
    for (int i = 0; i < 2; ++i) {
        FaceSpec spec = sample_face(40 + static_cast<std::uint64_t>(i), Split::kStudio);
        Image img;
        SegMask mask;
        render(spec, &img, &mask);
        ds.images.push_back(img);
        ds.masks.push_back(mask);
    }
    Tensor<float> batch = images_to_tensor(ds.images);
    for (auto _ : state) {
        Tape<float> tape;
        Var<float> y = generate(tape, ps, tape.constant(batch), ds.masks, cfg, false, false);
        benchmark::DoNotOptimize(y.val().data.data());
    }
}
BENCHMARK(bench_generator_forward)->Unit(benchmark::kMillisecond);

void bench_render(benchmark::State& state) {
    std::uint64_t seed = 0;
    for (auto _ : state) {
        FaceSpec spec = sample_face(seed++, Split::kWild);
        Image img;
        SegMask mask;
        render(spec, &img, &mask);
        benchmark::DoNotOptimize(img.pixels.data());
    }
}
BENCHMARK(bench_render)->Unit(benchmark::kMicrosecond);

void bench_psnr(benchmark::State& state) {
    Image a(64, 64), b(64, 64);
    Rng rng(8);
    for (auto& v : a.pixels) v = static_cast<float>(rng.uniform());
    for (auto& v : b.pixels) v = static_cast<float>(rng.uniform());
    for (auto _ : state) benchmark::DoNotOptimize(psnr(a, b));
}
BENCHMARK(bench_psnr)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
