#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <vector>

#include "bayesnas/autodiff/ops.hpp"
#include "bayesnas/error.hpp"
#include "bayesnas/nn/network.hpp"
#include "bayesnas/rng.hpp"

namespace bayesnas {

struct FlopCount {
  std::uint64_t prefix = 0;  // per batch, deterministic modules before the first stochastic one
  std::uint64_t suffix = 0;  // per batch and sample
  std::uint64_t full = 0;    // N * (prefix + suffix)
  std::uint64_t frozen = 0;  // prefix + N * suffix

  double speedup() const { return frozen ? static_cast<double>(full) / static_cast<double>(frozen) : 0.0; }
};

/// Multiply-accumulate counts for N-sample prediction on a batch.
inline FlopCount count_flops(const Network& net, const Shape& input_shape, std::size_t batch, std::size_t n) {
  if (n < 1) throw UsageError("count_flops needs at least one sample");
  const auto macs = net.module_macs(input_shape);
  const std::size_t split = net.first_stochastic();
  FlopCount f;
  for (std::size_t i = 0; i < macs.size(); ++i) (i < split ? f.prefix : f.suffix) += macs[i];
  f.prefix *= batch;
  f.suffix *= batch;
  f.full = n * (f.prefix + f.suffix);
  f.frozen = f.prefix + n * f.suffix;
  return f;
}

struct Latency {
  double mean_ms = 0.0;
  double std_ms = 0.0;
};

/// Wall-clock time of one N-sample prediction on `x`, averaged over `runs`
/// after `warmup` discarded runs. Frozen mode evaluates the deterministic
/// prefix once per prediction; full mode re-runs the whole network per sample.
inline Latency measure_latency(const Network& net, const Tensor& x, std::size_t n, bool frozen, std::size_t runs = 300,
                               std::size_t warmup = 10, std::uint64_t seed = 0) {
  if (runs == 0) throw UsageError("measure_latency needs at least one run");
  NoGrad guard;
  Rng rng(seed, 0x1A7);
  auto once = [&] {
    auto s = frozen ? mc_samples(net, x, n, rng) : mc_samples_full(net, x, n, rng);
    return s.back().numel();
  };
  volatile std::size_t sink = 0;
  for (std::size_t i = 0; i < warmup; ++i) sink = sink + once();
  std::vector<double> ms;
  ms.reserve(runs);
  for (std::size_t i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    sink = sink + once();
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  Latency l;
  for (double v : ms) l.mean_ms += v;
  l.mean_ms /= static_cast<double>(runs);
  for (double v : ms) l.std_ms += (v - l.mean_ms) * (v - l.mean_ms);
  l.std_ms = runs > 1 ? std::sqrt(l.std_ms / static_cast<double>(runs - 1)) : 0.0;
  return l;
}

}  // namespace bayesnas
