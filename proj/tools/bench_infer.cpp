// Latency probe for the full restoration stack (streak net, atmosphere net,
// vapor net) at a given size; used to size the default channel widths.
#include <chrono>
#include <cstdio>
#include <cstdlib>

#include "derain/networks.hpp"

using namespace derain;
using namespace derain::nn;

int main(int argc, char** argv) {
  set_gemm_threads(1);
  ArchConfig cfg;
  if (argc > 1) cfg.base_channels = std::atoi(argv[1]);
  if (argc > 2) cfg.vnet_channels = std::atoi(argv[2]);
  const int size = argc > 3 ? std::atoi(argv[3]) : 512;
  const int reps = argc > 4 ? std::atoi(argv[4]) : 3;

  auto ps = init_params<float>("snet", cfg, 1);
  auto pv = init_params<float>("vnet", cfg, 2);
  auto pa = init_params<float>("anet", cfg, 3);

  Rng rng(1234);
  Tensor<float> img(1, 3, size, size);
  for (auto& v : img.data) v = float(rng.uniform01());
  Var<float> x = Var<float>::leaf(std::move(img), false);

  double best = 1e30;
  for (int r = 0; r < reps; ++r) {
    NoGradGuard ng;
    auto t0 = std::chrono::steady_clock::now();
    Var<float> ts = snet_forward(x, ps);
    Var<float> a = anet_forward(x, pa);
    Var<float> tv = vnet_forward(x, ts, pv);
    (void)broadcast_atmosphere(a, size, size);
    (void)tv;
    auto t1 = std::chrono::steady_clock::now();
    const double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    std::printf("  rep %d: %.1f ms\n", r, ms);
    if (ms < best) best = ms;
  }
  std::printf("%dx%d base=%d vnet=%d : %.1f ms (min of %d)\n", size, size, cfg.base_channels,
              cfg.vnet_channels, best, reps);
  return 0;
}
