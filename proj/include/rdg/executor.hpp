#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "rdg/graph.hpp"
#include "rdg/tensor.hpp"

namespace rdg {

class ExecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Path of Invoke/Cond node ids from the top-level frame; empty for the top-level frame.
using InvocationKey = std::vector<std::uint32_t>;
using KeyPtr = std::shared_ptr<const InvocationKey>;

// "/" for the root, otherwise "/3/7/7".
std::string format_key(const InvocationKey& key);

using SparsePtr = std::shared_ptr<const SparseRows>;

// Runtime value of one port. A SparseRows doubles as the symbolic zero produced by Zeros.
using Value = std::variant<std::monostate, TensorPtr, SparsePtr, KeyPtr>;

TensorPtr as_tensor(const Value& v);
Shape value_shape(const Value& v);

// Concurrent write-once table (key, node, port) -> value. Reads erase, so after a complete
// backward pass the table is empty again.
class ValueCache {
 public:
  ValueCache();
  ~ValueCache();
  ValueCache(const ValueCache&) = delete;
  ValueCache& operator=(const ValueCache&) = delete;

  void write(const InvocationKey& key, NodeId node, std::uint32_t port, Value value);
  Value read(const InvocationKey& key, NodeId node, std::uint32_t port);
  bool contains(const InvocationKey& key, NodeId node, std::uint32_t port) const;

  std::size_t size() const;
  std::uint64_t writes() const;
  std::uint64_t reads() const;
  void clear();

 private:
  struct Shard;
  std::unique_ptr<Shard[]> shards_;
  std::atomic<std::uint64_t> writes_{0};
  std::atomic<std::uint64_t> reads_{0};
};

struct KernelHooks {
  // Replaces the derivative used by UnaryGrad nodes (grad-check sensitivity fixtures).
  std::function<Tensor(UnaryFn, const Tensor& upstream, const Tensor& input, const Tensor& output)> unary_backward;
  // Called before every node execution, from the executing worker.
  std::function<void(const Node&, const InvocationKey&)> on_execute;
};

struct RunOptions {
  int threads = 1;
  int max_recursion_depth = 512;
  std::uint64_t seed = 0;
  // Artificial delay after each compute kernel; lets tests observe overlap of cheap kernels.
  std::chrono::microseconds kernel_latency{0};
  // Collect a trace; also switched on by RDG_TRACE=1.
  bool trace = false;
  KernelHooks hooks;
};

struct TraceEvent {
  std::int64_t timestamp_us;
  int worker;
  std::string key;
  NodeId node;
  OpKind kind;
};

struct RunStats {
  std::uint64_t nodes_executed = 0;
  std::uint64_t frames = 0;
  std::uint64_t cell_executions = 0;
  // Peak number of compute kernels (resp. cell kernels) in flight at once, across the whole run.
  int peak_concurrency = 0;
  int peak_cells = 0;
  // Longest chain of dependent cell executions.
  int critical_path_cells = 0;
  int max_depth = 0;
  std::uint64_t cache_writes = 0;
  std::uint64_t cache_reads = 0;
  // Entries left in the instance's cache when the run finished (released afterwards).
  std::size_t cache_left = 0;
};

using Feeds = std::map<std::string, TensorPtr>;

struct RunResult {
  std::vector<Tensor> values;
  RunStats stats;
  std::vector<TraceEvent> trace;
};

// Persistent worker pool around one global FIFO ready queue.
class Executor {
 public:
  explicit Executor(int threads);
  ~Executor();
  Executor(const Executor&) = delete;
  Executor& operator=(const Executor&) = delete;

  int threads() const;

  RunResult run(const FinalizedGraph& g, const Feeds& feeds, const std::vector<Port>& fetches,
                const RunOptions& opts = {});
  // Independent instances sharing the queue; each gets its own top-level frame and cache.
  std::vector<RunResult> run_batch(const FinalizedGraph& g, const std::vector<Feeds>& feeds,
                                   const std::vector<Port>& fetches, const RunOptions& opts = {});

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// One-shot run on a temporary pool of opts.threads workers.
RunResult run(const FinalizedGraph& g, const Feeds& feeds, const std::vector<Port>& fetches,
              const RunOptions& opts = {});

bool trace_requested(const RunOptions& opts);
void write_trace_csv(std::ostream& os, const std::vector<TraceEvent>& events);

struct GradientMap;

struct StepResult {
  double loss = 0.0;
  std::map<std::string, Tensor> grads;
  RunStats stats;
};

// Forward + backward of one instance; the cache is released when the step ends.
StepResult run_training_step(Executor& ex, const FinalizedGraph& g, const GradientMap& gm, const Feeds& feeds,
                             const RunOptions& opts = {});
std::vector<StepResult> run_training_batch(Executor& ex, const FinalizedGraph& g, const GradientMap& gm,
                                           const std::vector<Feeds>& feeds, const RunOptions& opts = {});
StepResult run_training_step(const FinalizedGraph& g, const GradientMap& gm, const Feeds& feeds,
                             const RunOptions& opts = {});

}  // namespace rdg
