#pragma once

#include <functional>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "rdg/models.hpp"

namespace rdg {

enum class BenchSuite { kBalancedness, kScaling, kThreads };
const char* to_string(BenchSuite s);
BenchSuite parse_suite(const std::string& s);

struct BenchRow {
  std::string model;
  std::string mode;
  int batch = 1;
  int threads = 1;
  std::string shape;
  int n_instances = 0;  // nodes per instance
  double instances_per_s = 0.0;
  double mean_ms = 0.0;  // per run (one batch)
  double p95_ms = 0.0;
  double median_ms = 0.0;
  std::string phase;  // train or infer

  friend bool operator==(const BenchRow&, const BenchRow&) = default;
};

struct BenchConfig {
  BenchSuite suite = BenchSuite::kBalancedness;
  std::vector<ModelMode> modes{ModelMode::kRecursive};
  ModelKind model = ModelKind::kTreeRNN;
  int d = 32;
  int vocab = 100;
  int threads = 8;  // balancedness and scaling
  int warmup = 10;
  int runs = 100;
  std::uint64_t seed = 0;
  // Overrides of the suite grids; empty keeps the defaults.
  std::vector<int> batches;
  std::vector<int> sizes;
  std::vector<int> thread_counts;
  std::vector<TreeShape> shapes;
};

struct Timing {
  double mean_ms = 0.0;
  double median_ms = 0.0;
  double p95_ms = 0.0;
};
Timing summarize(std::vector<double> samples_ms);

// Balancedness: training steps, 64 leaves, shapes x batches {1,10,25}.
// Scaling: forward, balanced N in {15,...,511}, batch 1.
// Threads: forward, 255-node balanced and linear trees, threads {1,2,4,8}.
std::vector<BenchRow> run_bench(const BenchConfig& cfg, const std::function<void(const BenchRow&)>& on_row = {});

void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows);
std::vector<BenchRow> read_bench_csv(std::istream& is);

}  // namespace rdg
