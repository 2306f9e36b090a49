#include "rdg/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "rdg/trainer.hpp"

namespace rdg {

const char* to_string(BenchSuite s) {
  switch (s) {
    case BenchSuite::kBalancedness: return "balancedness";
    case BenchSuite::kScaling: return "scaling";
    case BenchSuite::kThreads: return "threads";
  }
  return "?";
}

BenchSuite parse_suite(const std::string& s) {
  if (s == "balancedness") return BenchSuite::kBalancedness;
  if (s == "scaling") return BenchSuite::kScaling;
  if (s == "threads") return BenchSuite::kThreads;
  throw std::invalid_argument("unknown suite '" + s + "' (balancedness|scaling|threads)");
}

Timing summarize(std::vector<double> samples_ms) {
  Timing t;
  if (samples_ms.empty()) return t;
  std::sort(samples_ms.begin(), samples_ms.end());
  const std::size_t n = samples_ms.size();
  t.mean_ms = std::accumulate(samples_ms.begin(), samples_ms.end(), 0.0) / static_cast<double>(n);
  t.median_ms = n % 2 ? samples_ms[n / 2] : 0.5 * (samples_ms[n / 2 - 1] + samples_ms[n / 2]);
  // Nearest-rank percentile.
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
  t.p95_ms = samples_ms[std::max<std::size_t>(rank, 1) - 1];
  return t;
}

namespace {

using Clock = std::chrono::steady_clock;

struct Case {
  ModelMode mode;
  TreeShape shape;
  int leaves;
  int batch;
  int threads;
  bool train;
};

BenchRow measure(const BenchConfig& cfg, const Case& c) {
  std::mt19937_64 rng(cfg.seed);
  ModelConfig mc;
  mc.kind = cfg.model;
  mc.d = cfg.d;
  mc.V = cfg.vocab;
  mc.C = 2;
  mc.capacity = 2 * c.leaves - 1;
  BuiltModel m = build_model(mc, c.mode);
  if (c.train) attach_gradients(m);
  ModelParams params = init_params(mc, rng);
  const Feeds pf = param_feeds(params);

  // A pool of distinct instances, cycled through batch by batch.
  std::vector<TreeInstance> pool;
  const int pool_size = std::max(c.batch * 4, 16);
  for (int i = 0; i < pool_size; ++i) pool.push_back(generate_synthetic(c.shape, c.leaves, mc.V, mc.C, rng));
  std::vector<Feeds> all;
  for (const auto& t : pool) all.push_back(make_feeds(m, t, pf));

  Executor ex(c.threads);
  RunOptions opts;
  opts.threads = c.threads;
  std::size_t next = 0;
  auto one = [&] {
    std::vector<Feeds> batch;
    for (int k = 0; k < c.batch; ++k) batch.push_back(all[next++ % all.size()]);
    if (c.train) {
      run_training_batch(ex, m.train_graph, m.grads, batch, opts);
    } else {
      ex.run_batch(m.graph, batch, {m.logits}, opts);
    }
  };
  for (int i = 0; i < cfg.warmup; ++i) one();
  std::vector<double> samples;
  for (int i = 0; i < std::max(cfg.runs, 1); ++i) {
    const auto t0 = Clock::now();
    one();
    samples.push_back(std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
  }
  const Timing t = summarize(samples);
  BenchRow row;
  row.model = to_string(cfg.model);
  row.mode = to_string(c.mode);
  row.batch = c.batch;
  row.threads = c.threads;
  row.shape = to_string(c.shape);
  row.n_instances = 2 * c.leaves - 1;
  row.instances_per_s = c.batch / (std::max(t.median_ms, 1e-6) / 1000.0);
  row.mean_ms = t.mean_ms;
  row.p95_ms = t.p95_ms;
  row.median_ms = t.median_ms;
  row.phase = c.train ? "train" : "infer";
  return row;
}

template <class T>
std::vector<T> or_default(const std::vector<T>& v, std::vector<T> d) {
  return v.empty() ? d : v;
}

}  // namespace

std::vector<BenchRow> run_bench(const BenchConfig& cfg, const std::function<void(const BenchRow&)>& on_row) {
  std::vector<Case> cases;
  switch (cfg.suite) {
    case BenchSuite::kBalancedness:
      for (ModelMode mode : cfg.modes) {
        for (int b : or_default(cfg.batches, {1, 10, 25})) {
          for (TreeShape s : or_default(cfg.shapes, {TreeShape::kBalanced, TreeShape::kModerate, TreeShape::kLinear})) {
            cases.push_back({mode, s, 64, b, cfg.threads, true});
          }
        }
      }
      break;
    case BenchSuite::kScaling:
      for (ModelMode mode : cfg.modes) {
        for (int n : or_default(cfg.sizes, {15, 31, 63, 127, 255, 511})) {
          if (n < 1 || ((n + 1) & n) != 0) throw std::invalid_argument("scaling sizes must be 2^k - 1");
          cases.push_back({mode, TreeShape::kBalanced, (n + 1) / 2, or_default(cfg.batches, {1}).front(), cfg.threads, false});
        }
      }
      break;
    case BenchSuite::kThreads:
      for (ModelMode mode : cfg.modes) {
        for (TreeShape s : or_default(cfg.shapes, {TreeShape::kBalanced, TreeShape::kLinear})) {
          for (int th : or_default(cfg.thread_counts, {1, 2, 4, 8})) {
            cases.push_back({mode, s, 128, or_default(cfg.batches, {1}).front(), th, false});
          }
        }
      }
      break;
  }
  std::vector<BenchRow> rows;
  for (const Case& c : cases) {
    rows.push_back(measure(cfg, c));
    if (on_row) on_row(rows.back());
  }
  return rows;
}

namespace {
constexpr const char* kHeader =
    "model,mode,batch,threads,shape,n_instances,instances_per_s,mean_ms,p95_ms,median_ms,phase";
}

void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
  os << kHeader << '\n';
  for (const BenchRow& r : rows) {
    std::ostringstream line;
    line << std::setprecision(17) << r.model << ',' << r.mode << ',' << r.batch << ',' << r.threads << ',' << r.shape
         << ',' << r.n_instances << ',' << r.instances_per_s << ',' << r.mean_ms << ',' << r.p95_ms << ','
         << r.median_ms << ',' << r.phase;
    os << line.str() << '\n';
  }
}

std::vector<BenchRow> read_bench_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kHeader) throw std::runtime_error("bench CSV: unexpected header");
  std::vector<BenchRow> rows;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 11) throw std::runtime_error("bench CSV line " + std::to_string(lineno) + ": expected 11 fields");
    BenchRow r;
    try {
      r.model = f[0];
      r.mode = f[1];
      r.batch = std::stoi(f[2]);
      r.threads = std::stoi(f[3]);
      r.shape = f[4];
      r.n_instances = std::stoi(f[5]);
      r.instances_per_s = std::stod(f[6]);
      r.mean_ms = std::stod(f[7]);
      r.p95_ms = std::stod(f[8]);
      r.median_ms = std::stod(f[9]);
      r.phase = f[10];
    } catch (const std::exception&) {
      throw std::runtime_error("bench CSV line " + std::to_string(lineno) + ": bad number");
    }
    rows.push_back(r);
  }
  return rows;
}

}  // namespace rdg
