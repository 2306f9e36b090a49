// Acceptance suite: one PASS/FAIL line per criterion.
//
// Timing sub-checks (throughput orderings, scaling ratio, recursive-vs-iterative wall time)
// need real parallel hardware. On a machine with fewer than 8 hardware threads a failure
// confined to those sub-checks is still printed as FAIL, tagged "hardware-bound", and does
// not set the exit code. Every other failure does.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <future>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "rdg/bench.hpp"
#include "rdg/trainer.hpp"

using namespace rdg;
using Clock = std::chrono::steady_clock;

namespace {

constexpr unsigned kParallelCores = 8;

struct Outcome {
  bool pass = true;
  bool timing_only = true;  // every failed sub-check was a timing one
  std::ostringstream detail;

  void check(bool ok, const std::string& what, bool timing = false) {
    if (ok) return;
    pass = false;
    if (!timing) timing_only = false;
    detail << " [failed: " << what << "]";
  }
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double rel_err(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::int64_t r = 0; r < a.rows(); ++r) {
    for (std::int64_t c = 0; c < a.cols(); ++c) {
      const double den = std::max({std::abs(a(r, c)), std::abs(b(r, c)), 1e-8});
      worst = std::max(worst, std::abs(a(r, c) - b(r, c)) / den);
    }
  }
  return worst;
}

const ModelKind kKinds[] = {ModelKind::kTreeRNN, ModelKind::kRNTN, ModelKind::kTreeLSTM};

void gradient_correctness(Outcome& o) {
  const auto t0 = Clock::now();
  for (ModelKind k : kKinds) {
    GradCheckConfig gc;
    gc.trials = 50;
    gc.max_nodes = 31;
    gc.tol = 1e-4;
    gc.abs_floor = 1e-7;
    const GradCheckReport rep = grad_check(k, gc);
    double worst = 0.0;
    std::size_t checked = 0;
    for (const auto& p : rep.params) {
      worst = std::max(worst, p.worst_rel);
      checked += p.checked;
    }
    o.detail << " " << to_string(k) << " worst_rel=" << worst << " elems=" << checked;
    o.check(rep.passed && rep.trials == 50, std::string(to_string(k)) + " finite differences");
  }
  const double s = seconds_since(t0);
  o.detail << " time=" << s << "s";
  o.check(s < 300.0, "runtime < 5 min");
}

void triple_oracle(Outcome& o) {
  const auto t0 = Clock::now();
  for (ModelKind k : kKinds) {
    ModelConfig cfg;
    cfg.kind = k;
    cfg.d = 5;
    cfg.V = 12;
    cfg.C = 3;
    cfg.capacity = 31;
    double worst_loss = 0.0, worst_grad = 0.0;
    for (bool per_node : {false, true}) {
      cfg.per_node_loss = per_node;
      std::mt19937_64 rng(1000 + static_cast<int>(k) * 7 + per_node);
      ModelParams params = init_params(cfg, rng);
      for (auto& [name, t] : params) {
        if (name[0] == 'b') t = random_init(t.shape(), 0.3, rng);
      }
      BuiltModel rec = build_recursive(cfg);
      BuiltModel it = build_iterative(cfg);
      attach_gradients(rec);
      attach_gradients(it);
      Executor ex(4);
      RunOptions opts;
      opts.threads = 4;
      std::uniform_int_distribution<int> leaves(1, 16), shape(0, 2);
      for (int i = 0; i < 50; ++i) {
        const auto sh = static_cast<TreeShape>(shape(rng));
        int l = leaves(rng);
        if (sh == TreeShape::kBalanced) l = 1 << (l % 5);
        TreeInstance t = generate_synthetic(sh, l, cfg.V, cfg.C, rng);
        const OracleResult orc = oracle_forward_backward(cfg, params, t);
        StepResult a = run_training_step(ex, rec.train_graph, rec.grads, make_feeds(rec, t, param_feeds(params)), opts);
        StepResult b = run_training_step(ex, it.train_graph, it.grads, make_feeds(it, t, param_feeds(params)), opts);
        worst_loss = std::max({worst_loss, std::abs(a.loss - orc.loss), std::abs(b.loss - orc.loss),
                               std::abs(a.loss - b.loss)});
        for (const auto& [name, g] : orc.grads) {
          worst_grad = std::max({worst_grad, rel_err(a.grads.at(name), g), rel_err(b.grads.at(name), g),
                                 rel_err(a.grads.at(name), b.grads.at(name))});
        }
      }
    }
    o.detail << " " << to_string(k) << " loss_delta=" << worst_loss << " grad_rel=" << worst_grad;
    o.check(worst_loss < 1e-9, std::string(to_string(k)) + " loss within 1e-9");
    o.check(worst_grad < 1e-7, std::string(to_string(k)) + " grads within 1e-7 relative");
  }
  const double s = seconds_since(t0);
  o.detail << " instances=100/model time=" << s << "s";
  o.check(s < 300.0, "runtime < 5 min");
}

void balancedness(Outcome& o) {
  BenchConfig c;
  c.suite = BenchSuite::kBalancedness;
  c.modes = {ModelMode::kRecursive};
  c.threads = 8;
  c.runs = 100;
  c.warmup = 10;
  std::map<std::pair<std::string, int>, double> ips;
  for (const BenchRow& r : run_bench(c)) ips[{r.shape, r.batch}] = r.instances_per_s;
  for (int b : {1, 10, 25}) {
    const double bal = ips.at({"balanced", b}), mod = ips.at({"moderate", b}), lin = ips.at({"linear", b});
    o.detail << " b=" << b << ":" << bal << ">" << mod << ">" << lin;
    o.check(bal > mod && mod > lin, "balanced > moderate > linear at batch " + std::to_string(b), true);
  }
  std::map<std::string, double> gain;
  for (const char* s : {"balanced", "moderate", "linear"}) gain[s] = ips.at({s, 25}) / ips.at({s, 1});
  o.detail << " gain(1->25) balanced=" << gain["balanced"] << " moderate=" << gain["moderate"]
           << " linear=" << gain["linear"];
  o.check(gain["linear"] > gain["balanced"] && gain["linear"] > gain["moderate"], "linear has the largest batch gain",
          true);
}

void parallel_scaling(Outcome& o) {
  BenchConfig c;
  c.suite = BenchSuite::kScaling;
  c.modes = {ModelMode::kRecursive, ModelMode::kIterative};
  c.threads = 8;
  c.runs = 100;
  c.warmup = 10;
  std::map<std::pair<std::string, int>, double> med;
  for (const BenchRow& r : run_bench(c)) med[{r.mode, r.n_instances}] = r.median_ms;
  const double rec = med.at({"recursive", 511}) / med.at({"recursive", 15});
  const double it = med.at({"iterative", 511}) / med.at({"iterative", 15});
  o.detail << " T511/T15 recursive=" << rec << " iterative=" << it << " ratio=" << rec / it;
  o.check(rec <= 0.5 * it, "recursive ratio <= 0.5 x iterative ratio", true);

  ModelConfig cfg;
  cfg.kind = ModelKind::kTreeRNN;
  cfg.d = 8;
  cfg.V = 20;
  std::mt19937_64 rng(4);
  ModelParams params = init_params(cfg, rng);
  BuiltModel m = build_recursive(cfg);
  TreeInstance t = generate_synthetic(TreeShape::kBalanced, 128, cfg.V, cfg.C, rng);
  Executor ex(128);
  RunOptions opts;
  opts.threads = 128;
  opts.kernel_latency = std::chrono::milliseconds(20);
  const RunResult r = ex.run(m.graph, make_feeds(m, t, param_feeds(params)), {m.loss}, opts);
  o.detail << " nodes=" << t.size() << " peak_concurrency=" << r.stats.peak_concurrency
           << " peak_cells=" << r.stats.peak_cells;
  o.check(t.size() == 255 && r.stats.peak_concurrency >= 64, "peak concurrency >= 64 on 255 nodes");
}

void scheduler_stress(Outcome& o) {
  struct Setup {
    ModelConfig cfg;
    ModelParams params;
    BuiltModel rec, it;
  };
  std::vector<Setup> setups;
  for (ModelKind k : kKinds) {
    Setup s;
    s.cfg.kind = k;
    s.cfg.d = 4;
    s.cfg.V = 10;
    s.cfg.C = 3;
    s.cfg.capacity = 31;
    s.cfg.per_node_loss = k != ModelKind::kRNTN;
    std::mt19937_64 rng(50 + static_cast<int>(k));
    s.params = init_params(s.cfg, rng);
    s.rec = build_recursive(s.cfg);
    s.it = build_iterative(s.cfg);
    attach_gradients(s.rec);
    attach_gradients(s.it);
    setups.push_back(std::move(s));
  }

  struct Tally {
    int done = 0;
    double worst = 0.0;
    std::uint64_t writes = 0, reads = 0;
    std::size_t left = 0;
    std::string error;
  };
  auto body = [&setups]() {
    Tally tally;
    std::mt19937_64 rng(2024);
    Executor ref(1);
    std::uniform_int_distribution<int> threads(1, 16), leaves(1, 16), shape(0, 2), batch(1, 3), pick(0, 2);
    try {
      for (int iter = 0; iter < 1000; ++iter) {
        Setup& s = setups[pick(rng)];
        BuiltModel& m = iter % 2 ? s.it : s.rec;
        std::vector<Feeds> feeds;
        const int n = batch(rng);
        for (int i = 0; i < n; ++i) {
          const auto sh = static_cast<TreeShape>(shape(rng));
          int l = leaves(rng);
          if (sh == TreeShape::kBalanced) l = 1 << (l % 5);
          feeds.push_back(make_feeds(m, generate_synthetic(sh, l, s.cfg.V, s.cfg.C, rng), param_feeds(s.params)));
        }
        const int th = threads(rng);
        Executor ex(th);
        RunOptions opts;
        opts.threads = th;
        auto got = run_training_batch(ex, m.train_graph, m.grads, feeds, opts);
        auto want = run_training_batch(ref, m.train_graph, m.grads, feeds);
        for (int i = 0; i < n; ++i) {
          tally.worst = std::max(tally.worst, std::abs(got[i].loss - want[i].loss));
          for (const auto& [name, g] : want[i].grads) {
            tally.worst = std::max(tally.worst, max_abs_diff(got[i].grads.at(name), g));
          }
          tally.writes += got[i].stats.cache_writes;
          tally.reads += got[i].stats.cache_reads;
          tally.left += got[i].stats.cache_left;
        }
        ++tally.done;
      }
    } catch (const std::exception& e) {
      tally.error = e.what();
    }
    return tally;
  };
  auto fut = std::async(std::launch::async, body);
  if (fut.wait_for(std::chrono::minutes(10)) != std::future_status::ready) {
    std::cout << "criterion 5 scheduler safety/liveness: FAIL [deadlock: no progress within 10 min]" << std::endl;
    std::_Exit(1);
  }
  const Tally t = fut.get();
  o.detail << " iterations=" << t.done << " max_delta=" << t.worst << " cache_writes=" << t.writes
           << " cache_reads=" << t.reads << " left=" << t.left;
  o.check(t.error.empty(), "error: " + t.error);
  o.check(t.done == 1000, "1000 iterations");
  o.check(t.writes == t.reads && t.left == 0, "every cache write read exactly once");
  o.check(t.worst <= 1e-9, "thread counts agree within 1e-9");
}

void convergence(Outcome& o) {
  std::mt19937_64 data_rng(42);
  std::vector<TreeInstance> train_set, valid;
  for (int i = 0; i < 2000; ++i) train_set.push_back(generate_synthetic(TreeShape::kBalanced, 16, 4, 2, data_rng));
  for (int i = 0; i < 500; ++i) valid.push_back(generate_synthetic(TreeShape::kBalanced, 16, 4, 2, data_rng));

  std::map<ModelMode, double> time_to_target;
  for (ModelMode mode : {ModelMode::kRecursive, ModelMode::kIterative}) {
    ModelConfig cfg;
    cfg.kind = ModelKind::kTreeRNN;
    cfg.d = 16;
    cfg.V = 4;
    cfg.C = 2;
    cfg.per_node_loss = true;
    cfg.capacity = 31;
    std::mt19937_64 rng(7);
    ModelParams params = init_params(cfg, rng);
    BuiltModel m = build_model(cfg, mode);
    TrainConfig tc;
    tc.epochs = 30;
    tc.threads = 8;
    tc.batch_size = 25;
    tc.lr = 0.05;
    tc.seed = 3;
    Executor ex(8);
    double wall = 0.0, acc = 0.0;
    int epoch = 0;
    struct Reached {};
    TrainHooks hooks;
    hooks.on_epoch = [&](const Metrics& mt) {
      wall = mt.wall_time_s;
      acc = mt.accuracy;
      epoch = mt.epoch;
      if (acc >= 0.93) throw Reached{};
    };
    try {
      train(ex, m, params, train_set, valid, tc, hooks);
    } catch (const Reached&) {
    }
    o.detail << " " << to_string(mode) << ": acc=" << acc << " epochs=" << epoch << " time=" << wall << "s";
    o.check(acc >= 0.93, std::string(to_string(mode)) + " reaches 93% within 30 epochs");
    o.check(wall < 600.0, "under 10 min");
    time_to_target[mode] = acc >= 0.93 ? wall : INFINITY;
  }
  o.check(time_to_target[ModelMode::kRecursive] < time_to_target[ModelMode::kIterative],
          "recursive reaches 93% faster than iterative", true);
}

void depth_guard(Outcome& o) {
  Graph g;
  SubGraphRef f = g.declare_subgraph("forever", {{Shape{1, 1}}, {Shape{1, 1}}});
  Graph b = g.new_body();
  Port a = b.arg(0, Shape{1, 1});
  auto outs = b.invoke(f, {b.unary(UnaryFn::kTanh, a)});
  g.define_subgraph(f, std::move(b), outs);
  Port y = g.invoke(f, {g.placeholder("x", Shape{1, 1})})[0];
  FinalizedGraph fg = g.finalize({y});

  auto fut = std::async(std::launch::async, [&] {
    const auto t0 = Clock::now();
    std::string msg;
    try {
      RunOptions opts;
      opts.threads = 4;
      run(fg, {{"x", share(Tensor::scalar(0.5))}}, {y}, opts);
    } catch (const ExecError& e) {
      msg = e.what();
    }
    return std::make_pair(msg, seconds_since(t0));
  });
  if (fut.wait_for(std::chrono::seconds(10)) != std::future_status::ready) {
    std::cout << "criterion 7 recursion-depth guard: FAIL [no error within 10 s]" << std::endl;
    std::_Exit(1);
  }
  const auto [msg, s] = fut.get();
  o.detail << " time=" << s << "s error=\"" << msg.substr(0, 60) << "\"";
  o.check(msg.find("recursion depth limit 512") != std::string::npos, "depth-limit error");
  o.check(s < 10.0, "under 10 s");
}

void mutual_recursion(Outcome& o) {
  // ping(x, n) = n == 0 ? x : pong(tanh(A x + a), n - 1)
  // pong(x, n) = n == 0 ? x : ping(sigmoid(B x), n - 1)
  const int depth = 20;
  const Tensor A(3, 3, {0.5, -0.3, 0.2, 0.1, 0.4, -0.6, -0.2, 0.3, 0.7});
  const Tensor Av(3, 1, {0.05, -0.1, 0.2});
  const Tensor B(3, 3, {-0.4, 0.6, 0.1, 0.3, -0.2, 0.5, 0.2, 0.2, -0.3});
  const Tensor x0(3, 1, {0.3, -0.7, 1.1});

  Graph g;
  Port is_zero = g.placeholder("is_zero", Shape{kAnyRows, 1});
  Port pa = g.constant(A), pav = g.constant(Av), pb = g.constant(B);
  Port one = g.constant(Tensor::scalar(1.0));
  const Signature sig{{Shape{3, 1}, Shape{1, 1}}, {Shape{3, 1}}};
  SubGraphRef ping = g.declare_subgraph("ping", sig);
  SubGraphRef pong = g.declare_subgraph("pong", sig);
  SubGraphRef done = g.declare_subgraph("done", sig);
  SubGraphRef ping_step = g.declare_subgraph("ping_step", sig);
  SubGraphRef pong_step = g.declare_subgraph("pong_step", sig);
  Port x = g.placeholder("x", Shape{3, 1});
  Port n = g.placeholder("n", Shape{1, 1});
  Port out = g.invoke(ping, {x, n})[0];
  auto define = [&](SubGraphRef ref, auto&& fn) {
    Graph b = g.new_body();
    Port bx = b.arg(0, Shape{3, 1});
    Port bn = b.arg(1, Shape{1, 1});
    std::vector<Port> outs = fn(b, bx, bn);
    g.define_subgraph(ref, std::move(b), outs);
  };
  // Callers first: every body refers to SubGraphs defined after it.
  define(ping, [&](Graph& b, Port bx, Port bn) { return b.cond(b.gather_row(is_zero, bn), done, ping_step, {bx, bn}); });
  define(pong, [&](Graph& b, Port bx, Port bn) { return b.cond(b.gather_row(is_zero, bn), done, pong_step, {bx, bn}); });
  define(ping_step, [&](Graph& b, Port bx, Port bn) {
    Port nx = b.unary(UnaryFn::kTanh, b.binary(BinaryFn::kAdd, b.matmul(pa, bx), pav));
    return b.invoke(pong, {nx, b.binary(BinaryFn::kSub, bn, one)});
  });
  define(pong_step, [&](Graph& b, Port bx, Port bn) {
    return b.invoke(ping, {b.unary(UnaryFn::kSigmoid, b.matmul(pb, bx)), b.binary(BinaryFn::kSub, bn, one)});
  });
  define(done, [&](Graph&, Port bx, Port) { return std::vector<Port>{bx}; });
  FinalizedGraph fg = g.finalize({out});

  std::vector<double> ref(x0.data().begin(), x0.data().end());
  for (int k = 0; k < depth; ++k) {
    std::vector<double> next(3);
    for (int r = 0; r < 3; ++r) {
      double s = k % 2 == 0 ? Av(r, 0) : 0.0;
      for (int c = 0; c < 3; ++c) s += (k % 2 == 0 ? A(r, c) : B(r, c)) * ref[c];
      next[r] = k % 2 == 0 ? std::tanh(s) : 1.0 / (1.0 + std::exp(-s));
    }
    ref = next;
  }

  Tensor zero_table(depth + 1, 1, 0.0);
  zero_table(0, 0) = 1.0;
  double worst = 0.0;
  int max_depth = 0;
  for (int th : {1, 4}) {
    RunOptions opts;
    opts.threads = th;
    const RunResult r = run(fg, {{"is_zero", share(zero_table)}, {"x", share(x0)}, {"n", share(Tensor::scalar(depth))}},
                            {out}, opts);
    for (int i = 0; i < 3; ++i) worst = std::max(worst, std::abs(r.values[0](i, 0) - ref[i]));
    max_depth = std::max(max_depth, r.stats.max_depth);
  }
  o.detail << " depth=" << depth << " max_abs_err=" << worst << " max_frame_depth=" << max_depth;
  o.check(worst <= 1e-12, "matches host reference within 1e-12");
  o.check(max_depth >= depth, "alternates to depth 20");
}

}  // namespace

int main() {
  const unsigned cores = std::max(1u, std::thread::hardware_concurrency());
  std::cout << "hardware threads: " << cores << std::endl;
  std::cout.precision(4);

  const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria{
      {"gradient correctness", gradient_correctness},
      {"triple-oracle equivalence", triple_oracle},
      {"balancedness ordering", balancedness},
      {"parallel scaling", parallel_scaling},
      {"scheduler safety/liveness", scheduler_stress},
      {"convergence", convergence},
      {"recursion-depth guard", depth_guard},
      {"forward declaration / mutual recursion", mutual_recursion},
  };
  int hard_failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    const auto t0 = Clock::now();
    try {
      criteria[i].second(o);
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    std::cout << "criterion " << i + 1 << " " << criteria[i].first << ": " << (o.pass ? "PASS" : "FAIL");
    if (!o.pass && o.timing_only && cores < kParallelCores) {
      std::cout << " (hardware-bound: " << cores << " hardware thread" << (cores == 1 ? "" : "s") << ", needs "
                << kParallelCores << ")";
    } else if (!o.pass) {
      ++hard_failures;
    }
    std::cout << " |" << o.detail.str() << " (" << seconds_since(t0) << "s)" << std::endl;
  }
  return hard_failures == 0 ? 0 : 1;
}
