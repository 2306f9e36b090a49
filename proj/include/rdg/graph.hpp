#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rdg/tensor.hpp"

namespace rdg {

class BuildError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using NodeId = std::uint32_t;

// Rows value marking a table whose row count is only known when fed.
inline constexpr std::int64_t kAnyRows = -1;

// Shape used for ports that carry an invocation key instead of a matrix.
inline constexpr Shape kKeyShape{0, 0};
inline bool is_key(Shape s) { return s == kKeyShape; }

// Handle to one output of one node. `graph` is the uid of the owning Graph, which lets
// a SubGraph body refer to nodes of the outer graph (captured at definition time).
struct Port {
  std::uint32_t graph = 0;
  NodeId node = 0;
  std::uint32_t index = 0;

  friend bool operator==(const Port&, const Port&) = default;
  friend auto operator<=>(const Port&, const Port&) = default;
};

struct SubGraphRef {
  std::uint32_t index = 0;
  friend bool operator==(const SubGraphRef&, const SubGraphRef&) = default;
  friend auto operator<=>(const SubGraphRef&, const SubGraphRef&) = default;
};

enum class OpKind : std::uint8_t {
  kPlaceholder,
  kParameter,
  kConstant,
  kZeros,
  kMatMul,
  kUnary,
  kUnaryGrad,
  kBinary,
  kScalarMul,
  kConcatRows,
  kSliceRows,
  kTranspose,
  kReshape,
  kGatherRow,
  kScatterRow,
  kSetRow,
  kClearRow,
  kSoftmaxXent,
  kCond,
  kInvoke,
  kCacheWrite,
  kCacheRead,
  kGradAccum,
  kKeyExtend,
};

const char* to_string(OpKind k);

// Port index used by CacheRead/CacheWrite to address the branch record of a Cond node.
inline constexpr std::uint32_t kBranchRecordPort = 0xffffu;

struct NodeAttrs {
  UnaryFn unary = UnaryFn::kTanh;
  BinaryFn binary = BinaryFn::kAdd;
  bool transpose_a = false;
  bool transpose_b = false;
  std::int64_t begin = 0;
  std::int64_t count = 0;
  // Declared shape: Placeholder, Parameter, Zeros, Reshape target, ScatterRow rows, CacheRead.
  std::optional<Shape> shape;
  // Placeholder/Parameter name (feed key).
  std::string name;
  // Placeholder inside a SubGraph body: position in the body's input list.
  int arg_index = -1;
  TensorPtr constant;
  // Invoke target, or Cond then-branch.
  SubGraphRef callee{};
  // Cond else-branch.
  SubGraphRef else_callee{};
  // Invoke/Cond: number of inputs supplied by the caller (captures are appended after them).
  std::uint32_t user_arity = 0;
  // Cond: explicit output shapes; when a branch returns fewer values (gradient Conds),
  // out_map says which Cond output each branch output lands in; the rest are zeros.
  std::vector<Shape> cond_out_shapes;
  std::vector<std::uint32_t> then_out_map;
  std::vector<std::uint32_t> else_out_map;
  // Cond: filled at finalize. Operand positions (excluding the predicate) passed to each branch.
  std::vector<std::uint32_t> then_in_map;
  std::vector<std::uint32_t> else_in_map;
  // Cond: store the taken branch in the value cache (training graphs).
  bool record_branch = false;
  // CacheWrite/CacheRead: which forward value; KeyExtend: the Invoke/Cond node id appended.
  NodeId ref_node = 0;
  std::uint32_t ref_port = 0;
  // Marks the node producing a tree cell's state; counted by executor instrumentation.
  bool cell = false;
};

struct Node {
  NodeId id = 0;
  OpKind kind = OpKind::kConstant;
  std::vector<Port> inputs;
  // One entry per output; nullopt while Deferred.
  std::vector<std::optional<Shape>> out_shapes;
  NodeAttrs attrs;

  std::uint32_t num_outputs() const { return static_cast<std::uint32_t>(out_shapes.size()); }
};

struct Signature {
  std::vector<Shape> inputs;
  std::vector<Shape> outputs;
};

class Graph;
struct Registry;

struct SubGraphDef {
  std::string name;
  // Declared signature (caller-visible arguments only).
  Signature signature;
  std::shared_ptr<Graph> body;
  std::vector<Port> outputs;
  // Outer (top-level) ports appended to the body's inputs, in order.
  std::vector<Port> captures;

  bool defined() const { return body != nullptr; }
  std::size_t arity() const { return signature.inputs.size() + captures.size(); }
};

class FinalizedGraph;

// Mutable dataflow graph under construction. A top-level Graph owns the SubGraph registry;
// body graphs created with new_body() share it, and may reference top-level nodes directly.
class Graph {
 public:
  Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&& other) noexcept;
  Graph& operator=(Graph&& other) noexcept;

  std::uint32_t uid() const { return uid_; }
  bool is_body() const { return outer_uid_ != 0; }
  std::uint32_t outer_uid() const { return outer_uid_; }

  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& node(NodeId id) const;
  Port port(NodeId id, std::uint32_t index = 0) const { return Port{uid_, id, index}; }
  std::optional<Shape> shape_of(Port p) const;

  // Generic construction. Inputs may be local ports or, inside a body, top-level ports.
  NodeId add_node(OpKind kind, std::vector<Port> inputs, NodeAttrs attrs = {});

  Port placeholder(std::string name, std::optional<Shape> shape);
  Port parameter(std::string name, Shape shape);
  Port constant(Tensor value);
  Port zeros(Shape shape);
  Port matmul(Port a, Port b, bool transpose_a = false, bool transpose_b = false);
  Port unary(UnaryFn f, Port x);
  Port binary(BinaryFn f, Port a, Port b);
  Port scalar_mul(Port s, Port x);
  Port concat_rows(Port a, Port b);
  Port slice_rows(Port x, std::int64_t begin, std::int64_t count);
  Port transpose(Port x);
  Port reshape(Port x, Shape shape);
  Port gather_row(Port table, Port index);
  Port scatter_row(Port row, Port index, std::int64_t rows);
  Port set_row(Port table, Port index, Port row);
  Port clear_row(Port table, Port index);
  Port grad_accum(std::vector<Port> terms);
  // Outputs: (loss 1x1, d loss / d logits 1xC).
  std::pair<Port, Port> softmax_xent(Port logits, Port label);

  void mark_cell(Port p);
  // Resolves a Deferred placeholder shape before finalize.
  void set_shape(Port placeholder, Shape shape);

  // SubGraphs. The registry is shared by the top-level graph and every body.
  SubGraphRef declare_subgraph(std::string name, Signature signature);
  // New empty body whose outer scope is this registry's top-level graph. Its first
  // placeholders, created by arg(), are the SubGraph arguments.
  Graph new_body() const;
  Port arg(std::size_t index, Shape shape);
  void define_subgraph(SubGraphRef ref, Graph body, std::vector<Port> outputs);
  // Installs a body whose captures are already resolved (graph transformations).
  void define_subgraph_resolved(SubGraphRef ref, Graph body, std::vector<Port> outputs, std::vector<Port> captures);
  std::vector<Port> invoke(SubGraphRef ref, std::vector<Port> args);
  std::vector<Port> cond(Port predicate, SubGraphRef then_ref, SubGraphRef else_ref, std::vector<Port> args);
  // Cond whose branches may return subsets of its outputs; unmapped outputs are zeros.
  std::vector<Port> cond_mapped(Port predicate, SubGraphRef then_ref, SubGraphRef else_ref, std::vector<Port> args,
                                std::vector<Shape> out_shapes, std::vector<std::uint32_t> then_out_map,
                                std::vector<std::uint32_t> else_out_map);

  // Value-cache plumbing. A missing key input means the executing frame's own key.
  void cache_write(Port value, NodeId ref_node, std::uint32_t ref_port);
  Port cache_read(std::optional<Port> key, NodeId ref_node, std::uint32_t ref_port, Shape shape);
  // `after` adds an ordering-only input.
  Port key_extend(std::optional<Port> key, NodeId ref_node, std::optional<Port> after = std::nullopt);
  void set_record_branch(NodeId cond_node);

  // Mutable body of a defined SubGraph (top-level graph only; used by graph transformations).
  Graph& body(SubGraphRef ref);

  // Unfinalized deep copy of a finalized program: same node ids, fresh uids and registry.
  static Graph clone(const FinalizedGraph& g);

  const SubGraphDef& subgraph(SubGraphRef ref) const;
  std::size_t subgraph_count() const;
  std::optional<SubGraphRef> find_subgraph(const std::string& name) const;

  FinalizedGraph finalize(std::vector<Port> outputs = {});

  bool finalized() const { return finalized_; }

 private:
  friend class FinalizedGraph;
  friend struct Finalizer;
  friend FinalizedGraph finalize_program(Graph top, std::vector<Port> outputs, bool differentiated);

  Graph(std::shared_ptr<Registry> registry, std::uint32_t outer_uid);

  void require_mutable() const;
  Port single(NodeId id) const { return port(id, 0); }
  std::optional<Shape> input_shape(const Port& p) const;
  void infer_shapes(Node& n) const;

  std::uint32_t uid_;
  std::uint32_t outer_uid_ = 0;
  std::vector<Node> nodes_;
  std::shared_ptr<Registry> registry_;
  bool finalized_ = false;
};

struct Registry {
  std::vector<SubGraphDef> defs;
  std::map<std::string, std::uint32_t> by_name;
  // Top-level graph's nodes are needed to shape-check outer references from bodies.
  const Graph* top = nullptr;
};

// Execution plan of one graph (top-level or SubGraph body), precomputed at finalize.
struct PlanNode {
  struct Input {
    std::uint32_t slot;
    std::uint32_t producer;
  };
  const Node* node = nullptr;
  std::vector<Input> inputs;
  std::uint32_t first_slot = 0;
  std::vector<std::uint32_t> dependents;
  std::int32_t initial_pending = 0;
};

struct ExecPlan {
  const Graph* graph = nullptr;
  std::vector<PlanNode> nodes;
  std::vector<std::uint32_t> sources;
  // Slot (and producing node) for each output.
  std::vector<PlanNode::Input> outputs;
  std::vector<std::uint32_t> arg_nodes;
  std::uint32_t num_slots = 0;
  std::vector<std::uint32_t> topo_order;

  std::uint32_t slot_of(Port p) const { return nodes[p.node].first_slot + p.index; }
};

struct Program {
  std::unique_ptr<Graph> top;
  std::shared_ptr<Registry> registry;
  std::vector<Port> outputs;
  ExecPlan top_plan;
  std::vector<ExecPlan> plans;  // indexed by SubGraphRef
  bool differentiated = false;
};

// Immutable, thread-shareable graph ready for execution.
class FinalizedGraph {
 public:
  FinalizedGraph() = default;
  explicit FinalizedGraph(std::shared_ptr<const Program> program) : program_(std::move(program)) {}

  const Graph& top() const { return *program_->top; }
  const ExecPlan& top_plan() const { return program_->top_plan; }
  const ExecPlan& plan(SubGraphRef ref) const { return program_->plans.at(ref.index); }
  const SubGraphDef& subgraph(SubGraphRef ref) const { return program_->registry->defs.at(ref.index); }
  std::size_t subgraph_count() const { return program_->registry->defs.size(); }
  std::optional<SubGraphRef> find_subgraph(const std::string& name) const;
  const std::vector<Port>& outputs() const { return program_->outputs; }
  bool differentiated() const { return program_->differentiated; }
  const Program& program() const { return *program_; }
  bool valid() const { return program_ != nullptr; }

  // Deterministic text listing, one node per line, SubGraph bodies indented under their definition.
  std::string dump() const;

 private:
  std::shared_ptr<const Program> program_;
};

// Topological order of a graph's nodes; throws BuildError naming the offenders on a cycle.
std::vector<NodeId> topological_order(const Graph& g);

// Marks `program` as produced by differentiation; used by autodiff.
FinalizedGraph finalize_program(Graph top, std::vector<Port> outputs, bool differentiated);

}  // namespace rdg
