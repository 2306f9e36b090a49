#include "rdg/executor.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <mutex>
#include <ostream>
#include <thread>
#include <unordered_map>

#include "rdg/autodiff.hpp"

namespace rdg {

std::string format_key(const InvocationKey& key) {
  if (key.empty()) return "/";
  std::string s;
  for (auto id : key) s += "/" + std::to_string(id);
  return s;
}

TensorPtr as_tensor(const Value& v) {
  if (auto t = std::get_if<TensorPtr>(&v)) return *t;
  if (auto s = std::get_if<SparsePtr>(&v)) return share((*s)->to_dense());
  throw ExecError(std::holds_alternative<KeyPtr>(v) ? "expected a matrix, got an invocation key"
                                                    : "expected a matrix, got no value");
}

Shape value_shape(const Value& v) {
  if (auto t = std::get_if<TensorPtr>(&v)) return (*t)->shape();
  if (auto s = std::get_if<SparsePtr>(&v)) return (*s)->shape();
  return kKeyShape;
}

namespace {

struct CacheKey {
  InvocationKey path;
  NodeId node;
  std::uint32_t port;
  bool operator==(const CacheKey&) const = default;
};

struct CacheKeyHash {
  std::size_t operator()(const CacheKey& k) const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](std::uint64_t v) {
      h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    };
    for (auto id : k.path) mix(id);
    mix(k.node);
    mix(k.port);
    return static_cast<std::size_t>(h);
  }
};

constexpr std::size_t kShards = 64;

std::string cache_label(const InvocationKey& key, NodeId node, std::uint32_t port) {
  std::string s = "key " + format_key(key) + " node " + std::to_string(node);
  if (port == kBranchRecordPort) return s + " (branch record)";
  return s + " port " + std::to_string(port);
}

}  // namespace

struct ValueCache::Shard {
  mutable std::mutex mu;
  std::unordered_map<CacheKey, Value, CacheKeyHash> map;
};

ValueCache::ValueCache() : shards_(new Shard[kShards]) {}
ValueCache::~ValueCache() = default;

void ValueCache::write(const InvocationKey& key, NodeId node, std::uint32_t port, Value value) {
  CacheKey k{key, node, port};
  Shard& s = shards_[CacheKeyHash{}(k) % kShards];
  {
    std::lock_guard lock(s.mu);
    if (!s.map.emplace(std::move(k), std::move(value)).second) {
      throw ExecError("duplicate cache write at " + cache_label(key, node, port));
    }
  }
  writes_.fetch_add(1, std::memory_order_relaxed);
}

Value ValueCache::read(const InvocationKey& key, NodeId node, std::uint32_t port) {
  CacheKey k{key, node, port};
  Shard& s = shards_[CacheKeyHash{}(k) % kShards];
  Value out;
  {
    std::lock_guard lock(s.mu);
    auto it = s.map.find(k);
    if (it == s.map.end()) {
      if (port == kBranchRecordPort) throw ExecError("forward/backward mismatch: no " + cache_label(key, node, port));
      throw ExecError("backward before forward: no cached value for " + cache_label(key, node, port));
    }
    out = std::move(it->second);
    s.map.erase(it);
  }
  reads_.fetch_add(1, std::memory_order_relaxed);
  return out;
}

bool ValueCache::contains(const InvocationKey& key, NodeId node, std::uint32_t port) const {
  CacheKey k{key, node, port};
  const Shard& s = shards_[CacheKeyHash{}(k) % kShards];
  std::lock_guard lock(s.mu);
  return s.map.contains(k);
}

std::size_t ValueCache::size() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < kShards; ++i) {
    std::lock_guard lock(shards_[i].mu);
    n += shards_[i].map.size();
  }
  return n;
}

std::uint64_t ValueCache::writes() const { return writes_.load(); }
std::uint64_t ValueCache::reads() const { return reads_.load(); }

void ValueCache::clear() {
  for (std::size_t i = 0; i < kShards; ++i) {
    std::lock_guard lock(shards_[i].mu);
    shards_[i].map.clear();
  }
}

bool trace_requested(const RunOptions& opts) {
  if (opts.trace) return true;
  const char* env = std::getenv("RDG_TRACE");
  return env != nullptr && std::string(env) == "1";
}

void write_trace_csv(std::ostream& os, const std::vector<TraceEvent>& events) {
  os << "timestamp_us,worker_id,key,node_id,op_kind\n";
  for (const auto& e : events) {
    os << e.timestamp_us << ',' << e.worker << ',' << e.key << ',' << e.node << ',' << to_string(e.kind) << '\n';
  }
}

namespace {

struct Slot {
  Value value;
  std::int32_t depth = 0;
};

struct Run;
struct Instance;

struct Frame {
  const ExecPlan* plan = nullptr;
  KeyPtr key;
  Instance* inst = nullptr;
  std::shared_ptr<Frame> parent;
  NodeId parent_node = 0;
  // Cond branch frames: parent output index for each body output.
  const std::vector<std::uint32_t>* out_map = nullptr;
  int depth = 0;
  // Cell depth of the Invoke/Cond that launched this frame; nodes inside start from it.
  std::int32_t base_depth = 0;
  std::vector<Slot> slots;
  std::unique_ptr<std::atomic<std::int32_t>[]> pending;
  std::atomic<std::uint32_t> remaining{0};
};

using FramePtr = std::shared_ptr<Frame>;

struct Instance {
  const Feeds* feeds = nullptr;
  ValueCache cache;
  FramePtr top;
  std::vector<Tensor> results;
  std::atomic<std::uint64_t> nodes{0};
  std::atomic<std::uint64_t> frames{0};
  std::atomic<std::uint64_t> cells{0};
  std::atomic<int> critical{0};
  std::atomic<int> max_depth{0};
};

void atomic_max(std::atomic<int>& a, int v) {
  int cur = a.load(std::memory_order_relaxed);
  while (v > cur && !a.compare_exchange_weak(cur, v, std::memory_order_relaxed)) {
  }
}

struct Run : std::enable_shared_from_this<Run> {
  const FinalizedGraph* graph = nullptr;
  const RunOptions* opts = nullptr;
  const std::vector<Port>* fetches = nullptr;
  bool tracing = false;
  std::chrono::steady_clock::time_point start;

  std::atomic<std::int64_t> inflight{0};
  std::atomic<bool> failed{false};
  std::atomic<int> instances_left{0};
  std::atomic<int> active_kernels{0};
  std::atomic<int> active_cells{0};
  std::atomic<int> peak_kernels{0};
  std::atomic<int> peak_cells{0};

  std::mutex mu;
  std::condition_variable done_cv;
  std::string error;
  std::vector<TraceEvent> trace;

  void fail(const std::string& msg) {
    std::lock_guard lock(mu);
    if (!failed.load()) error = msg;
    failed.store(true);
  }
  void notify() {
    { std::lock_guard lock(mu); }
    done_cv.notify_all();
  }
};

struct Task {
  FramePtr frame;
  NodeId node;
  // Shared so a worker can still signal completion after the control thread has returned.
  std::shared_ptr<Run> run;
};

}  // namespace

struct Executor::Impl {
  explicit Impl(int n) {
    if (n < 1) throw std::invalid_argument("executor needs at least one thread");
    for (int i = 0; i < n; ++i) workers.emplace_back([this, i] { worker_loop(i); });
  }

  ~Impl() {
    {
      std::lock_guard lock(mu);
      stopping = true;
    }
    cv.notify_all();
    for (auto& t : workers) t.join();
  }

  std::mutex mu;
  std::condition_variable cv;
  std::deque<Task> queue;
  bool stopping = false;
  std::vector<std::thread> workers;

  void enqueue(Run* run, FramePtr frame, NodeId node) {
    run->inflight.fetch_add(1);
    {
      std::lock_guard lock(mu);
      queue.push_back(Task{std::move(frame), node, run->shared_from_this()});
    }
    cv.notify_one();
  }

  void worker_loop(int worker_id) {
    for (;;) {
      Task task;
      {
        std::unique_lock lock(mu);
        cv.wait(lock, [&] { return stopping || !queue.empty(); });
        if (queue.empty()) return;
        task = std::move(queue.front());
        queue.pop_front();
      }
      Run* run = task.run.get();
      if (!run->failed.load()) {
        try {
          execute(worker_id, task.frame, task.node, *run);
        } catch (const std::exception& e) {
          const Node& n = *task.frame->plan->nodes[task.node].node;
          run->fail("node " + std::to_string(n.id) + " (" + to_string(n.kind) + ") at key " +
                    format_key(*task.frame->key) + ": " + e.what());
        }
      }
      task.frame.reset();
      if (run->inflight.fetch_sub(1) == 1) run->notify();
    }
  }

  FramePtr make_frame(const ExecPlan& plan, KeyPtr key, Instance* inst, FramePtr parent, NodeId parent_node,
                      int depth) {
    auto f = std::make_shared<Frame>();
    f->plan = &plan;
    f->key = std::move(key);
    f->inst = inst;
    f->parent = std::move(parent);
    f->parent_node = parent_node;
    f->depth = depth;
    f->slots.resize(plan.num_slots);
    f->pending.reset(new std::atomic<std::int32_t>[plan.nodes.size()]);
    for (std::size_t i = 0; i < plan.nodes.size(); ++i) f->pending[i].store(plan.nodes[i].initial_pending);
    f->remaining.store(static_cast<std::uint32_t>(plan.nodes.size()));
    inst->frames.fetch_add(1, std::memory_order_relaxed);
    atomic_max(inst->max_depth, depth);
    return f;
  }

  void start_frame(Run& run, const FramePtr& f) {
    if (f->plan->nodes.empty()) {
      finish_frame(run, f);
      return;
    }
    for (NodeId s : f->plan->sources) enqueue(&run, f, s);
  }

  void complete_node(Run& run, const FramePtr& f, NodeId id) {
    for (NodeId d : f->plan->nodes[id].dependents) {
      if (f->pending[d].fetch_sub(1, std::memory_order_acq_rel) == 1) enqueue(&run, f, d);
    }
    if (f->remaining.fetch_sub(1, std::memory_order_acq_rel) == 1) finish_frame(run, f);
  }

  void finish_frame(Run& run, const FramePtr& f) {
    const ExecPlan& plan = *f->plan;
    if (!f->parent) {
      Instance& inst = *f->inst;
      for (const Port& p : *run.fetches) inst.results.push_back(*as_tensor(f->slots[plan.slot_of(p)].value));
      run.instances_left.fetch_sub(1);
      return;
    }
    Frame& parent = *f->parent;
    const PlanNode& pn = parent.plan->nodes[f->parent_node];
    for (std::size_t j = 0; j < plan.outputs.size(); ++j) {
      const std::uint32_t target = f->out_map ? (*f->out_map)[j] : static_cast<std::uint32_t>(j);
      parent.slots[pn.first_slot + target] = f->slots[plan.outputs[j].slot];
    }
    complete_node(run, f->parent, f->parent_node);
  }

  void launch_child(Run& run, const FramePtr& f, NodeId id, const ExecPlan& plan, std::uint32_t key_node,
                    int depth, std::int32_t base_depth, const std::vector<const Slot*>& args,
                    const std::vector<std::uint32_t>* out_map) {
    auto key = std::make_shared<InvocationKey>(*f->key);
    key->push_back(key_node);
    FramePtr child = make_frame(plan, std::move(key), f->inst, f, id, depth);
    child->out_map = out_map;
    child->base_depth = base_depth;
    if (plan.arg_nodes.size() != args.size()) {
      throw ExecError("subgraph expects " + std::to_string(plan.arg_nodes.size()) + " inputs, got " +
                      std::to_string(args.size()));
    }
    for (std::size_t i = 0; i < args.size(); ++i) {
      child->slots[plan.nodes[plan.arg_nodes[i]].first_slot] = *args[i];
    }
    start_frame(run, child);
  }

  void execute(int worker_id, const FramePtr& fp, NodeId id, Run& run) {
    Frame& f = *fp;
    Instance& inst = *f.inst;
    const PlanNode& pn = f.plan->nodes[id];
    const Node& n = *pn.node;
    const RunOptions& opts = *run.opts;

    if (opts.hooks.on_execute) opts.hooks.on_execute(n, *f.key);
    if (run.tracing) {
      auto us = std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - run.start);
      std::lock_guard lock(run.mu);
      run.trace.push_back({us.count(), worker_id, format_key(*f.key), n.id, n.kind});
    }
    inst.nodes.fetch_add(1, std::memory_order_relaxed);

    std::vector<const Slot*> in;
    in.reserve(pn.inputs.size());
    std::int32_t depth = f.base_depth;
    for (const auto& i : pn.inputs) {
      const Slot& s = f.slots[i.slot];
      if (std::holds_alternative<std::monostate>(s.value)) {
        throw ExecError("input from node " + std::to_string(i.producer) + " not resolved");
      }
      depth = std::max(depth, s.depth);
      in.push_back(&s);
    }
    if (n.attrs.cell) ++depth;

    auto tensor = [&](std::size_t i) { return as_tensor(in[i]->value); };
    auto index = [&](std::size_t i) { return to_index(*tensor(i)); };
    auto set = [&](std::uint32_t port, Value v) {
      Slot& s = f.slots[pn.first_slot + port];
      s.value = std::move(v);
      s.depth = depth;
    };
    const NodeAttrs& a = n.attrs;

    switch (n.kind) {
      case OpKind::kPlaceholder:
        if (a.arg_index >= 0) {
          // Value was placed by the caller when the frame was created.
          break;
        }
        [[fallthrough]];
      case OpKind::kParameter: {
        auto it = inst.feeds->find(a.name);
        if (it == inst.feeds->end()) throw ExecError("placeholder '" + a.name + "' was not fed");
        set(0, it->second);
        break;
      }
      case OpKind::kConstant: set(0, a.constant); break;
      case OpKind::kZeros: set(0, std::make_shared<const SparseRows>(a.shape->rows, a.shape->cols)); break;
      case OpKind::kInvoke: {
        if (f.depth + 1 > opts.max_recursion_depth) {
          auto key = *f.key;
          key.push_back(n.id);
          throw ExecError("recursion depth limit " + std::to_string(opts.max_recursion_depth) +
                          " exceeded at key " + format_key(key));
        }
        launch_child(run, fp, id, run.graph->plan(a.callee), n.id, f.depth + 1, depth, in, nullptr);
        return;  // completes when the child frame does
      }
      case OpKind::kCond: {
        const bool take_then = tensor(0)->item() != 0.0;
        if (a.record_branch) inst.cache.write(*f.key, n.id, kBranchRecordPort, share(Tensor::scalar(take_then)));
        const auto& in_map = take_then ? a.then_in_map : a.else_in_map;
        const auto& out_map = take_then ? a.then_out_map : a.else_out_map;
        std::vector<bool> mapped(a.cond_out_shapes.size(), false);
        for (auto j : out_map) mapped[j] = true;
        for (std::uint32_t j = 0; j < mapped.size(); ++j) {
          if (!mapped[j]) {
            Shape s = a.cond_out_shapes[j];
            set(j, std::make_shared<const SparseRows>(s.rows, s.cols));
          }
        }
        std::vector<const Slot*> args;
        for (auto k : in_map) args.push_back(in[1 + k]);
        launch_child(run, fp, id, run.graph->plan(take_then ? a.callee : a.else_callee), n.id, f.depth, depth, args,
                     &out_map);
        return;
      }
      case OpKind::kCacheWrite: inst.cache.write(*f.key, a.ref_node, a.ref_port, in[0]->value); break;
      case OpKind::kCacheRead: {
        const InvocationKey& key = in.empty() ? *f.key : *std::get<KeyPtr>(in[0]->value);
        set(0, inst.cache.read(key, a.ref_node, a.ref_port));
        break;
      }
      case OpKind::kKeyExtend: {
        const bool based = !in.empty() && std::holds_alternative<KeyPtr>(in[0]->value);
        auto key = std::make_shared<InvocationKey>(based ? *std::get<KeyPtr>(in[0]->value) : *f.key);
        key->push_back(a.ref_node);
        set(0, KeyPtr(std::move(key)));
        break;
      }
      default: {
        const int k = run.active_kernels.fetch_add(1) + 1;
        atomic_max(run.peak_kernels, k);
        if (a.cell) {
          atomic_max(run.peak_cells, run.active_cells.fetch_add(1) + 1);
          inst.cells.fetch_add(1, std::memory_order_relaxed);
        }
        struct Leave {
          Run& r;
          bool cell;
          ~Leave() {
            r.active_kernels.fetch_sub(1);
            if (cell) r.active_cells.fetch_sub(1);
          }
        } leave{run, a.cell};
        compute(n, in, tensor, index, set, opts);
        if (opts.kernel_latency.count() > 0) std::this_thread::sleep_for(opts.kernel_latency);
        break;
      }
    }
    if (a.cell) atomic_max(inst.critical, depth);
    complete_node(run, fp, id);
  }

  template <class TensorFn, class IndexFn, class SetFn>
  static void compute(const Node& n, const std::vector<const Slot*>& in, TensorFn tensor, IndexFn index, SetFn set,
                      const RunOptions& opts) {
    const NodeAttrs& a = n.attrs;
    auto sparse = [&](std::size_t i) -> const SparseRows* {
      auto p = std::get_if<SparsePtr>(&in[i]->value);
      return p ? p->get() : nullptr;
    };
    switch (n.kind) {
      case OpKind::kMatMul: set(0, share(matmul(*tensor(0), *tensor(1), a.transpose_a, a.transpose_b))); break;
      case OpKind::kUnary: set(0, share(apply_unary(*tensor(0), a.unary))); break;
      case OpKind::kUnaryGrad: {
        auto up = tensor(0);
        TensorPtr x = in.size() > 1 ? tensor(1) : up;
        if (opts.hooks.unary_backward) {
          set(0, share(opts.hooks.unary_backward(a.unary, *up, *x, *x)));
        } else {
          set(0, share(unary_backward(a.unary, *up, *x, *x)));
        }
        break;
      }
      case OpKind::kBinary: set(0, share(apply_binary(*tensor(0), *tensor(1), a.binary))); break;
      case OpKind::kScalarMul: set(0, share(scale(*tensor(1), tensor(0)->item()))); break;
      case OpKind::kConcatRows: set(0, share(concat_rows(*tensor(0), *tensor(1)))); break;
      case OpKind::kSliceRows: set(0, share(slice_rows(*tensor(0), a.begin, a.count))); break;
      case OpKind::kTranspose: set(0, share(transpose(*tensor(0)))); break;
      case OpKind::kReshape: set(0, share(reshape(*tensor(0), *a.shape))); break;
      case OpKind::kGatherRow: {
        const auto i = index(1);
        if (auto s = sparse(0)) {
          set(0, share(s->row(i)));
        } else {
          set(0, share(gather_row(*tensor(0), i)));
        }
        break;
      }
      case OpKind::kScatterRow: {
        auto row = tensor(0);
        if (a.shape->rows < 0) throw ExecError("scatter_row into a table of unknown row count");
        SparseRows out(a.shape->rows, a.shape->cols);
        set(0, std::make_shared<const SparseRows>(out.with_row(index(1), row)));
        break;
      }
      case OpKind::kSetRow: {
        const auto i = index(1);
        auto row = tensor(2);
        if (auto s = sparse(0)) {
          set(0, std::make_shared<const SparseRows>(s->with_row(i, row)));
        } else {
          Tensor t = *tensor(0);
          if (i < 0 || i >= t.rows()) throw IndexError("set_row index " + std::to_string(i) + " outside " + t.shape().str());
          if (row->shape() != Shape{1, t.cols()}) throw DimensionError("set_row of " + row->shape().str());
          for (std::int64_t c = 0; c < t.cols(); ++c) t(i, c) = (*row)(0, c);
          set(0, share(std::move(t)));
        }
        break;
      }
      case OpKind::kClearRow: {
        const auto i = index(1);
        if (auto s = sparse(0)) {
          set(0, std::make_shared<const SparseRows>(s->without_row(i)));
        } else {
          Tensor t = *tensor(0);
          if (i < 0 || i >= t.rows()) throw IndexError("clear_row index " + std::to_string(i) + " outside " + t.shape().str());
          for (std::int64_t c = 0; c < t.cols(); ++c) t(i, c) = 0.0;
          set(0, share(std::move(t)));
        }
        break;
      }
      case OpKind::kSoftmaxXent: {
        auto r = softmax_cross_entropy(*tensor(0), index(1));
        set(0, share(Tensor::scalar(r.loss)));
        set(1, share(std::move(r.grad_logits)));
        break;
      }
      case OpKind::kGradAccum: {
        bool all_sparse = true;
        for (std::size_t i = 0; i < in.size(); ++i) all_sparse = all_sparse && sparse(i) != nullptr;
        if (all_sparse) {
          SparseRows acc = *sparse(0);
          for (std::size_t i = 1; i < in.size(); ++i) acc = add(acc, *sparse(i));
          set(0, std::make_shared<const SparseRows>(std::move(acc)));
          break;
        }
        // Fixed operand order keeps the sum bitwise reproducible.
        Tensor acc = *tensor(0);
        for (std::size_t i = 1; i < in.size(); ++i) {
          if (auto s = sparse(i)) {
            acc = add(acc, *s);
          } else {
            acc = apply_binary(acc, *tensor(i), BinaryFn::kAdd);
          }
        }
        set(0, share(std::move(acc)));
        break;
      }
      default: throw ExecError(std::string("no kernel for ") + to_string(n.kind));
    }
  }

  std::vector<RunResult> run_batch(const FinalizedGraph& g, const std::vector<Feeds>& feeds,
                                   const std::vector<Port>& fetches, const RunOptions& opts) {
    if (!g.valid()) throw ExecError("graph is not finalized");
    const Graph& top = g.top();
    for (const Port& p : fetches) {
      if (p.graph != top.uid() || p.node >= top.nodes().size() || p.index >= top.node(p.node).num_outputs()) {
        throw ExecError("fetch does not name an output of the top-level graph");
      }
    }
    for (const Feeds& fd : feeds) {
      for (const Node& n : top.nodes()) {
        if (n.kind != OpKind::kPlaceholder && n.kind != OpKind::kParameter) continue;
        auto it = fd.find(n.attrs.name);
        if (it == fd.end() || !it->second) {
          throw ExecError(std::string(n.kind == OpKind::kParameter ? "parameter" : "placeholder") + " '" +
                          n.attrs.name + "' (node " + std::to_string(n.id) + ") was not fed");
        }
        const Shape want = *n.out_shapes[0];
        const Shape got = it->second->shape();
        if ((want.rows >= 0 && want.rows != got.rows) || want.cols != got.cols) {
          throw ExecError("feed '" + n.attrs.name + "' has shape " + got.str() + ", expected " + want.str());
        }
      }
    }

    auto run_ptr = std::make_shared<Run>();
    Run& run = *run_ptr;
    run.graph = &g;
    run.opts = &opts;
    run.fetches = &fetches;
    run.tracing = trace_requested(opts);
    run.start = std::chrono::steady_clock::now();
    run.instances_left.store(static_cast<int>(feeds.size()));

    std::vector<std::unique_ptr<Instance>> insts;
    for (const Feeds& fd : feeds) {
      auto inst = std::make_unique<Instance>();
      inst->feeds = &fd;
      inst->top = make_frame(g.top_plan(), std::make_shared<InvocationKey>(), inst.get(), nullptr, 0, 0);
      insts.push_back(std::move(inst));
    }
    if (!feeds.empty()) {
      // Holding one unit of inflight while seeding keeps the run from looking finished early.
      run.inflight.fetch_add(1);
      for (auto& inst : insts) start_frame(run, inst->top);
      for (auto& inst : insts) inst->top.reset();
      if (run.inflight.fetch_sub(1) == 1) run.notify();
      std::unique_lock lock(run.mu);
      run.done_cv.wait(lock, [&] {
        return run.inflight.load() == 0 && (run.instances_left.load() == 0 || run.failed.load());
      });
    }
    if (run.failed.load()) throw ExecError(run.error);

    std::vector<RunResult> out;
    for (auto& inst : insts) {
      RunResult r;
      r.values = std::move(inst->results);
      r.stats.nodes_executed = inst->nodes.load();
      r.stats.frames = inst->frames.load();
      r.stats.cell_executions = inst->cells.load();
      r.stats.peak_concurrency = run.peak_kernels.load();
      r.stats.peak_cells = run.peak_cells.load();
      r.stats.critical_path_cells = inst->critical.load();
      r.stats.max_depth = inst->max_depth.load();
      r.stats.cache_writes = inst->cache.writes();
      r.stats.cache_reads = inst->cache.reads();
      r.stats.cache_left = inst->cache.size();
      if (run.tracing) r.trace = run.trace;
      out.push_back(std::move(r));
    }
    return out;
  }
};

Executor::Executor(int threads) : impl_(std::make_unique<Impl>(threads)) {}
Executor::~Executor() = default;

int Executor::threads() const { return static_cast<int>(impl_->workers.size()); }

RunResult Executor::run(const FinalizedGraph& g, const Feeds& feeds, const std::vector<Port>& fetches,
                        const RunOptions& opts) {
  std::vector<Feeds> batch{feeds};
  return std::move(impl_->run_batch(g, batch, fetches, opts).front());
}

std::vector<RunResult> Executor::run_batch(const FinalizedGraph& g, const std::vector<Feeds>& feeds,
                                           const std::vector<Port>& fetches, const RunOptions& opts) {
  return impl_->run_batch(g, feeds, fetches, opts);
}

RunResult run(const FinalizedGraph& g, const Feeds& feeds, const std::vector<Port>& fetches, const RunOptions& opts) {
  Executor ex(opts.threads);
  return ex.run(g, feeds, fetches, opts);
}

std::vector<StepResult> run_training_batch(Executor& ex, const FinalizedGraph& g, const GradientMap& gm,
                                           const std::vector<Feeds>& feeds, const RunOptions& opts) {
  if (!g.differentiated()) throw ExecError("training step needs a graph produced by differentiate");
  std::vector<Port> fetches{gm.loss};
  for (const auto& [name, port] : gm.param_grads) fetches.push_back(port);
  auto results = ex.run_batch(g, feeds, fetches, opts);
  std::vector<StepResult> out;
  for (auto& r : results) {
    StepResult s;
    s.loss = r.values[0].item();
    for (std::size_t i = 0; i < gm.param_grads.size(); ++i) s.grads.emplace(gm.param_grads[i].first, std::move(r.values[i + 1]));
    s.stats = r.stats;
    out.push_back(std::move(s));
  }
  return out;
}

StepResult run_training_step(Executor& ex, const FinalizedGraph& g, const GradientMap& gm, const Feeds& feeds,
                             const RunOptions& opts) {
  return std::move(run_training_batch(ex, g, gm, {feeds}, opts).front());
}

StepResult run_training_step(const FinalizedGraph& g, const GradientMap& gm, const Feeds& feeds,
                             const RunOptions& opts) {
  Executor ex(opts.threads);
  return run_training_step(ex, g, gm, feeds, opts);
}

}  // namespace rdg
