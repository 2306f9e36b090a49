#include "rdg/graph.hpp"

#include <algorithm>
#include <atomic>
#include <set>
#include <sstream>

namespace rdg {

namespace {

std::atomic<std::uint32_t> next_graph_uid{1};

std::string node_label(const Node& n) { return "node " + std::to_string(n.id) + " (" + to_string(n.kind) + ")"; }

[[noreturn]] void fail(const Node& n, const std::string& what) { throw BuildError(node_label(n) + ": " + what); }

bool dims_match(std::int64_t a, std::int64_t b) { return a < 0 || b < 0 || a == b; }

bool shapes_match(Shape a, Shape b) { return dims_match(a.rows, b.rows) && dims_match(a.cols, b.cols); }

std::int64_t add_dims(std::int64_t a, std::int64_t b) { return a < 0 || b < 0 ? kAnyRows : a + b; }

std::string fmt_port(const Port& p, std::uint32_t self_uid) {
  std::string s = (p.graph == self_uid ? "" : "^") + std::to_string(p.node);
  if (p.index != 0) s += ":" + std::to_string(p.index);
  return s;
}

}  // namespace

const char* to_string(OpKind k) {
  switch (k) {
    case OpKind::kPlaceholder: return "Placeholder";
    case OpKind::kParameter: return "Parameter";
    case OpKind::kConstant: return "Constant";
    case OpKind::kZeros: return "Zeros";
    case OpKind::kMatMul: return "MatMul";
    case OpKind::kUnary: return "Unary";
    case OpKind::kUnaryGrad: return "UnaryGrad";
    case OpKind::kBinary: return "Binary";
    case OpKind::kScalarMul: return "ScalarMul";
    case OpKind::kConcatRows: return "ConcatRows";
    case OpKind::kSliceRows: return "SliceRows";
    case OpKind::kTranspose: return "Transpose";
    case OpKind::kReshape: return "Reshape";
    case OpKind::kGatherRow: return "GatherRow";
    case OpKind::kScatterRow: return "ScatterRow";
    case OpKind::kSetRow: return "SetRow";
    case OpKind::kClearRow: return "ClearRow";
    case OpKind::kSoftmaxXent: return "SoftmaxXent";
    case OpKind::kCond: return "Cond";
    case OpKind::kInvoke: return "Invoke";
    case OpKind::kCacheWrite: return "CacheWrite";
    case OpKind::kCacheRead: return "CacheRead";
    case OpKind::kGradAccum: return "GradAccum";
    case OpKind::kKeyExtend: return "KeyExtend";
  }
  return "?";
}

Graph::Graph() : uid_(next_graph_uid++), registry_(std::make_shared<Registry>()) { registry_->top = this; }

Graph::Graph(std::shared_ptr<Registry> registry, std::uint32_t outer_uid)
    : uid_(next_graph_uid++), outer_uid_(outer_uid), registry_(std::move(registry)) {}

Graph::Graph(Graph&& other) noexcept
    : uid_(other.uid_),
      outer_uid_(other.outer_uid_),
      nodes_(std::move(other.nodes_)),
      registry_(std::move(other.registry_)),
      finalized_(other.finalized_) {
  if (registry_ && outer_uid_ == 0) registry_->top = this;
}

Graph& Graph::operator=(Graph&& other) noexcept {
  uid_ = other.uid_;
  outer_uid_ = other.outer_uid_;
  nodes_ = std::move(other.nodes_);
  registry_ = std::move(other.registry_);
  finalized_ = other.finalized_;
  if (registry_ && outer_uid_ == 0) registry_->top = this;
  return *this;
}

const Node& Graph::node(NodeId id) const {
  if (id >= nodes_.size()) throw BuildError("no node " + std::to_string(id) + " in graph");
  return nodes_[id];
}

std::optional<Shape> Graph::shape_of(Port p) const {
  if (p.graph != uid_) {
    if (registry_ && registry_->top && p.graph == registry_->top->uid_ && registry_->top != this) {
      return registry_->top->shape_of(p);
    }
    throw BuildError("port refers to node " + std::to_string(p.node) + " of an unrelated graph");
  }
  const Node& n = node(p.node);
  if (p.index >= n.num_outputs()) {
    throw BuildError(node_label(n) + " has no output " + std::to_string(p.index));
  }
  return n.out_shapes[p.index];
}

std::optional<Shape> Graph::input_shape(const Port& p) const { return shape_of(p); }

void Graph::require_mutable() const {
  if (finalized_) throw BuildError("graph already finalized");
}

void Graph::infer_shapes(Node& n) const {
  auto in = [&](std::size_t i) { return input_shape(n.inputs[i]); };
  auto arity = [&](std::size_t want) {
    if (n.inputs.size() != want) {
      fail(n, "expects " + std::to_string(want) + " inputs, got " + std::to_string(n.inputs.size()));
    }
  };
  auto matrix = [&](std::size_t i) {
    auto s = in(i);
    if (s && is_key(*s)) fail(n, "input " + std::to_string(i) + " is an invocation key, not a matrix");
    return s;
  };
  auto scalar = [&](std::size_t i) {
    auto s = matrix(i);
    if (s && !shapes_match(*s, Shape{1, 1})) fail(n, "input " + std::to_string(i) + " must be 1x1, got " + s->str());
  };
  const NodeAttrs& a = n.attrs;
  std::vector<std::optional<Shape>> out(1);

  switch (n.kind) {
    case OpKind::kPlaceholder:
    case OpKind::kParameter:
    case OpKind::kZeros:
      arity(0);
      out[0] = a.shape;
      break;
    case OpKind::kConstant:
      arity(0);
      if (!a.constant) fail(n, "constant without value");
      out[0] = a.constant->shape();
      break;
    case OpKind::kMatMul: {
      arity(2);
      auto x = matrix(0);
      auto y = matrix(1);
      if (x && y) {
        Shape sx = a.transpose_a ? Shape{x->cols, x->rows} : *x;
        Shape sy = a.transpose_b ? Shape{y->cols, y->rows} : *y;
        if (!dims_match(sx.cols, sy.rows)) fail(n, "matmul of " + sx.str() + " and " + sy.str());
        out[0] = Shape{sx.rows, sy.cols};
      }
      break;
    }
    case OpKind::kUnary:
    case OpKind::kTranspose:
      arity(1);
      if (auto x = matrix(0)) out[0] = n.kind == OpKind::kTranspose ? Shape{x->cols, x->rows} : *x;
      break;
    case OpKind::kUnaryGrad:
      if (n.inputs.size() != 1 && n.inputs.size() != 2) fail(n, "expects 1 or 2 inputs");
      out[0] = matrix(0);
      break;
    case OpKind::kBinary: {
      arity(2);
      auto x = matrix(0);
      auto y = matrix(1);
      if (x && y && !shapes_match(*x, *y)) fail(n, std::string(to_string(a.binary)) + " of " + x->str() + " and " + y->str());
      out[0] = x ? x : y;
      break;
    }
    case OpKind::kScalarMul:
      arity(2);
      scalar(0);
      out[0] = matrix(1);
      break;
    case OpKind::kConcatRows: {
      arity(2);
      auto x = matrix(0);
      auto y = matrix(1);
      if (x && y) {
        if (!dims_match(x->cols, y->cols)) fail(n, "concat_rows of " + x->str() + " and " + y->str());
        out[0] = Shape{add_dims(x->rows, y->rows), x->cols};
      }
      break;
    }
    case OpKind::kSliceRows:
      arity(1);
      if (auto x = matrix(0)) {
        if (a.begin < 0 || a.count < 1 || (x->rows >= 0 && a.begin + a.count > x->rows)) {
          fail(n, "slice outside " + x->str());
        }
        out[0] = Shape{a.count, x->cols};
      }
      break;
    case OpKind::kReshape:
      arity(1);
      if (!a.shape) fail(n, "reshape without target shape");
      if (auto x = matrix(0); x && x->rows >= 0 && x->size() != a.shape->size()) {
        fail(n, "reshape " + x->str() + " to " + a.shape->str());
      }
      out[0] = a.shape;
      break;
    case OpKind::kGatherRow:
      arity(2);
      scalar(1);
      if (auto t = matrix(0)) out[0] = Shape{1, t->cols};
      break;
    case OpKind::kScatterRow:
      arity(2);
      scalar(1);
      if (!a.shape) fail(n, "scatter_row without table shape");
      if (auto r = matrix(0); r && !shapes_match(*r, Shape{1, a.shape->cols})) fail(n, "row " + r->str());
      out[0] = a.shape;
      break;
    case OpKind::kSetRow: {
      arity(3);
      scalar(1);
      auto t = matrix(0);
      auto r = matrix(2);
      if (t && r && !shapes_match(*r, Shape{1, t->cols})) fail(n, "row " + r->str() + " into table " + t->str());
      out[0] = t;
      break;
    }
    case OpKind::kClearRow:
      arity(2);
      scalar(1);
      out[0] = matrix(0);
      break;
    case OpKind::kSoftmaxXent: {
      arity(2);
      scalar(1);
      auto l = matrix(0);
      if (l && l->rows != 1) fail(n, "logits must be 1xC, got " + l->str());
      out.resize(2);
      out[0] = Shape{1, 1};
      out[1] = l;
      break;
    }
    case OpKind::kGradAccum: {
      if (n.inputs.empty()) fail(n, "needs at least one term");
      std::optional<Shape> s;
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        auto t = matrix(i);
        if (t && s && !shapes_match(*t, *s)) fail(n, "terms of shape " + s->str() + " and " + t->str());
        if (t && !s) s = t;
      }
      out[0] = s;
      break;
    }
    case OpKind::kCacheWrite:
      arity(1);
      out.clear();
      break;
    case OpKind::kCacheRead:
      if (n.inputs.size() > 1) fail(n, "expects 0 or 1 inputs");
      if (n.inputs.size() == 1) {
        if (auto k = in(0); k && !is_key(*k)) fail(n, "cache key input must be an invocation key");
      }
      if (!a.shape) fail(n, "cache_read without shape");
      out[0] = a.shape;
      break;
    case OpKind::kKeyExtend:
      // Input 0 is the base key when it is one; any other input only orders execution.
      for (std::size_t i = 1; i < n.inputs.size(); ++i) {
        if (auto k = in(i); k && is_key(*k)) fail(n, "only input 0 may be an invocation key");
      }
      out[0] = kKeyShape;
      break;
    case OpKind::kInvoke: {
      const SubGraphDef& def = subgraph(a.callee);
      if (n.inputs.size() < a.user_arity || a.user_arity != def.signature.inputs.size()) {
        fail(n, "invoke of '" + def.name + "' with " + std::to_string(a.user_arity) + " arguments, signature takes " +
                    std::to_string(def.signature.inputs.size()));
      }
      for (std::size_t i = 0; i < a.user_arity; ++i) {
        auto s = in(i);
        if (s && !shapes_match(*s, def.signature.inputs[i])) {
          fail(n, "argument " + std::to_string(i) + " of '" + def.name + "' has shape " + s->str() + ", expected " +
                      def.signature.inputs[i].str());
        }
      }
      out.assign(def.signature.outputs.begin(), def.signature.outputs.end());
      break;
    }
    case OpKind::kCond: {
      if (n.inputs.size() < 1 + a.user_arity) fail(n, "missing predicate");
      scalar(0);
      const SubGraphDef& t = subgraph(a.callee);
      const SubGraphDef& e = subgraph(a.else_callee);
      if (t.signature.inputs.size() != a.user_arity || e.signature.inputs.size() != a.user_arity) {
        fail(n, "branches '" + t.name + "' and '" + e.name + "' must both take " + std::to_string(a.user_arity) +
                    " arguments");
      }
      for (std::size_t i = 0; i < a.user_arity; ++i) {
        auto s = in(i + 1);
        if (!shapes_match(t.signature.inputs[i], e.signature.inputs[i])) {
          fail(n, "branch signatures differ at input " + std::to_string(i));
        }
        if (s && !shapes_match(*s, t.signature.inputs[i])) {
          fail(n, "argument " + std::to_string(i) + " has shape " + s->str() + ", expected " + t.signature.inputs[i].str());
        }
      }
      auto check_out = [&](const SubGraphDef& d, const std::vector<std::uint32_t>& map) {
        if (d.signature.outputs.size() != map.size()) fail(n, "branch '" + d.name + "' output count mismatch");
        for (std::size_t j = 0; j < map.size(); ++j) {
          if (map[j] >= a.cond_out_shapes.size() || !shapes_match(d.signature.outputs[j], a.cond_out_shapes[map[j]])) {
            fail(n, "branch '" + d.name + "' output " + std::to_string(j) + " does not fit the Cond outputs");
          }
        }
      };
      check_out(t, a.then_out_map);
      check_out(e, a.else_out_map);
      out.assign(a.cond_out_shapes.begin(), a.cond_out_shapes.end());
      break;
    }
  }
  n.out_shapes = std::move(out);
}

NodeId Graph::add_node(OpKind kind, std::vector<Port> inputs, NodeAttrs attrs) {
  require_mutable();
  Node n;
  n.id = static_cast<NodeId>(nodes_.size());
  n.kind = kind;
  n.attrs = std::move(attrs);
  for (const Port& p : inputs) {
    if (p.graph == uid_) {
      if (p.node >= nodes_.size()) {
        throw BuildError("node " + std::to_string(n.id) + " (" + to_string(kind) + "): input " + std::to_string(p.node) +
                         " does not exist yet");
      }
    } else if (!(is_body() && p.graph == outer_uid_)) {
      throw BuildError("node " + std::to_string(n.id) + " (" + to_string(kind) +
                       "): input refers to a graph that is neither this graph nor its outer graph");
    }
  }
  n.inputs = std::move(inputs);
  infer_shapes(n);
  nodes_.push_back(std::move(n));
  return nodes_.back().id;
}

Port Graph::placeholder(std::string name, std::optional<Shape> shape) {
  NodeAttrs a;
  a.name = std::move(name);
  a.shape = shape;
  return single(add_node(OpKind::kPlaceholder, {}, std::move(a)));
}

Port Graph::parameter(std::string name, Shape shape) {
  if (is_body()) throw BuildError("parameter '" + name + "' must be declared in the top-level graph");
  NodeAttrs a;
  a.name = std::move(name);
  a.shape = shape;
  return single(add_node(OpKind::kParameter, {}, std::move(a)));
}

Port Graph::constant(Tensor value) {
  NodeAttrs a;
  a.constant = share(std::move(value));
  return single(add_node(OpKind::kConstant, {}, std::move(a)));
}

Port Graph::zeros(Shape shape) {
  NodeAttrs a;
  a.shape = shape;
  return single(add_node(OpKind::kZeros, {}, std::move(a)));
}

Port Graph::matmul(Port a, Port b, bool transpose_a, bool transpose_b) {
  NodeAttrs at;
  at.transpose_a = transpose_a;
  at.transpose_b = transpose_b;
  return single(add_node(OpKind::kMatMul, {a, b}, std::move(at)));
}

Port Graph::unary(UnaryFn f, Port x) {
  NodeAttrs a;
  a.unary = f;
  return single(add_node(OpKind::kUnary, {x}, std::move(a)));
}

Port Graph::binary(BinaryFn f, Port a, Port b) {
  NodeAttrs at;
  at.binary = f;
  return single(add_node(OpKind::kBinary, {a, b}, std::move(at)));
}

Port Graph::scalar_mul(Port s, Port x) { return single(add_node(OpKind::kScalarMul, {s, x})); }

Port Graph::concat_rows(Port a, Port b) { return single(add_node(OpKind::kConcatRows, {a, b})); }

Port Graph::slice_rows(Port x, std::int64_t begin, std::int64_t count) {
  NodeAttrs a;
  a.begin = begin;
  a.count = count;
  return single(add_node(OpKind::kSliceRows, {x}, std::move(a)));
}

Port Graph::transpose(Port x) { return single(add_node(OpKind::kTranspose, {x})); }

Port Graph::reshape(Port x, Shape shape) {
  NodeAttrs a;
  a.shape = shape;
  return single(add_node(OpKind::kReshape, {x}, std::move(a)));
}

Port Graph::gather_row(Port table, Port index) { return single(add_node(OpKind::kGatherRow, {table, index})); }

Port Graph::scatter_row(Port row, Port index, std::int64_t rows) {
  auto rs = shape_of(row);
  if (!rs) throw BuildError("scatter_row needs a row of known shape");
  NodeAttrs a;
  a.shape = Shape{rows, rs->cols};
  return single(add_node(OpKind::kScatterRow, {row, index}, std::move(a)));
}

Port Graph::set_row(Port table, Port index, Port row) { return single(add_node(OpKind::kSetRow, {table, index, row})); }

Port Graph::clear_row(Port table, Port index) { return single(add_node(OpKind::kClearRow, {table, index})); }

Port Graph::grad_accum(std::vector<Port> terms) { return single(add_node(OpKind::kGradAccum, std::move(terms))); }

std::pair<Port, Port> Graph::softmax_xent(Port logits, Port label) {
  NodeId id = add_node(OpKind::kSoftmaxXent, {logits, label});
  return {port(id, 0), port(id, 1)};
}

void Graph::mark_cell(Port p) {
  require_mutable();
  if (p.graph != uid_) throw BuildError("mark_cell on a node of another graph");
  nodes_.at(p.node).attrs.cell = true;
}

void Graph::set_shape(Port p, Shape shape) {
  require_mutable();
  if (p.graph != uid_) throw BuildError("set_shape on a node of another graph");
  Node& n = nodes_.at(p.node);
  if (n.kind != OpKind::kPlaceholder) fail(n, "only placeholders take a declared shape");
  if (n.attrs.shape && *n.attrs.shape != shape) fail(n, "shape already declared as " + n.attrs.shape->str());
  n.attrs.shape = shape;
  n.out_shapes[0] = shape;
}

SubGraphRef Graph::declare_subgraph(std::string name, Signature signature) {
  require_mutable();
  if (registry_->by_name.contains(name)) throw BuildError("subgraph '" + name + "' declared twice");
  SubGraphRef ref{static_cast<std::uint32_t>(registry_->defs.size())};
  SubGraphDef def;
  def.name = name;
  def.signature = std::move(signature);
  registry_->defs.push_back(std::move(def));
  registry_->by_name.emplace(std::move(name), ref.index);
  return ref;
}

Graph Graph::new_body() const {
  require_mutable();
  const std::uint32_t outer = is_body() ? outer_uid_ : uid_;
  return Graph(registry_, outer);
}

Port Graph::arg(std::size_t index, Shape shape) {
  if (!is_body()) throw BuildError("arg() is only valid inside a subgraph body");
  for (const Node& n : nodes_) {
    if (n.kind == OpKind::kPlaceholder && n.attrs.arg_index == static_cast<int>(index)) {
      throw BuildError("argument " + std::to_string(index) + " declared twice");
    }
  }
  NodeAttrs a;
  a.name = "arg" + std::to_string(index);
  a.shape = shape;
  a.arg_index = static_cast<int>(index);
  return single(add_node(OpKind::kPlaceholder, {}, std::move(a)));
}

const SubGraphDef& Graph::subgraph(SubGraphRef ref) const {
  if (ref.index >= registry_->defs.size()) throw BuildError("unknown subgraph ref " + std::to_string(ref.index));
  return registry_->defs[ref.index];
}

std::size_t Graph::subgraph_count() const { return registry_->defs.size(); }

std::optional<SubGraphRef> Graph::find_subgraph(const std::string& name) const {
  auto it = registry_->by_name.find(name);
  if (it == registry_->by_name.end()) return std::nullopt;
  return SubGraphRef{it->second};
}

void Graph::define_subgraph(SubGraphRef ref, Graph body, std::vector<Port> outputs) {
  require_mutable();
  SubGraphDef& def = registry_->defs.at(ref.index);
  if (def.defined()) throw BuildError("subgraph '" + def.name + "' is already defined");
  if (body.registry_ != registry_ || !body.is_body()) {
    throw BuildError("body of '" + def.name + "' was not created by new_body() on this graph");
  }
  const std::size_t n_args = def.signature.inputs.size();
  std::vector<bool> seen(n_args, false);
  for (const Node& n : body.nodes_) {
    if (n.kind == OpKind::kPlaceholder && n.attrs.arg_index >= 0) {
      auto i = static_cast<std::size_t>(n.attrs.arg_index);
      if (i >= n_args) fail(n, "argument index beyond the signature of '" + def.name + "'");
      if (n.attrs.shape != def.signature.inputs[i]) {
        fail(n, "argument shape differs from the signature of '" + def.name + "'");
      }
      seen[i] = true;
    }
  }
  for (std::size_t i = 0; i < n_args; ++i) {
    if (!seen[i]) body.arg(i, def.signature.inputs[i]);
  }
  if (outputs.size() != def.signature.outputs.size()) {
    throw BuildError("subgraph '" + def.name + "' returns " + std::to_string(outputs.size()) + " values, signature has " +
                     std::to_string(def.signature.outputs.size()));
  }

  // Capture analysis: every reference to an outer node becomes a fresh body input.
  std::map<Port, Port> capture_of;
  std::vector<Port> captures;
  auto localize = [&](Port p) {
    if (p.graph == body.uid_) return p;
    auto it = capture_of.find(p);
    if (it != capture_of.end()) return it->second;
    auto shape = shape_of(p);
    if (!shape) throw BuildError("subgraph '" + def.name + "' captures a node of unresolved shape");
    NodeAttrs a;
    a.name = "capture" + std::to_string(captures.size());
    a.shape = *shape;
    a.arg_index = static_cast<int>(n_args + captures.size());
    Node n;
    n.id = static_cast<NodeId>(body.nodes_.size());
    n.kind = OpKind::kPlaceholder;
    n.attrs = std::move(a);
    n.out_shapes = {shape};
    body.nodes_.push_back(std::move(n));
    Port local = body.port(body.nodes_.back().id);
    capture_of.emplace(p, local);
    captures.push_back(p);
    return local;
  };
  const std::size_t original = body.nodes_.size();
  for (std::size_t i = 0; i < original; ++i) {
    for (Port& p : body.nodes_[i].inputs) p = localize(p);
  }
  for (Port& p : outputs) p = localize(p);

  for (std::size_t j = 0; j < outputs.size(); ++j) {
    auto s = body.shape_of(outputs[j]);
    if (s && !shapes_match(*s, def.signature.outputs[j])) {
      throw BuildError("subgraph '" + def.name + "' output " + std::to_string(j) + " has shape " + s->str() +
                       ", signature says " + def.signature.outputs[j].str());
    }
  }
  def.body = std::make_shared<Graph>(std::move(body));
  def.outputs = std::move(outputs);
  def.captures = std::move(captures);
}

void Graph::define_subgraph_resolved(SubGraphRef ref, Graph body, std::vector<Port> outputs,
                                     std::vector<Port> captures) {
  require_mutable();
  SubGraphDef& def = registry_->defs.at(ref.index);
  if (def.defined()) throw BuildError("subgraph '" + def.name + "' is already defined");
  if (body.registry_ != registry_) throw BuildError("body of '" + def.name + "' belongs to another registry");
  for (const Node& n : body.nodes_) {
    for (const Port& p : n.inputs) {
      if (p.graph != body.uid_) fail(n, "resolved body of '" + def.name + "' still references an outer node");
    }
  }
  def.body = std::make_shared<Graph>(std::move(body));
  def.outputs = std::move(outputs);
  def.captures = std::move(captures);
}

std::vector<Port> Graph::invoke(SubGraphRef ref, std::vector<Port> args) {
  NodeAttrs a;
  a.callee = ref;
  a.user_arity = static_cast<std::uint32_t>(args.size());
  NodeId id = add_node(OpKind::kInvoke, std::move(args), std::move(a));
  std::vector<Port> out;
  for (std::uint32_t i = 0; i < nodes_[id].num_outputs(); ++i) out.push_back(port(id, i));
  return out;
}

std::vector<Port> Graph::cond(Port predicate, SubGraphRef then_ref, SubGraphRef else_ref, std::vector<Port> args) {
  const SubGraphDef& t = subgraph(then_ref);
  const SubGraphDef& e = subgraph(else_ref);
  if (t.signature.outputs.size() != e.signature.outputs.size()) {
    throw BuildError("cond branches '" + t.name + "' and '" + e.name + "' return different numbers of values");
  }
  for (std::size_t j = 0; j < t.signature.outputs.size(); ++j) {
    if (t.signature.outputs[j] != e.signature.outputs[j]) {
      throw BuildError("cond branches '" + t.name + "' and '" + e.name + "' differ at output " + std::to_string(j));
    }
  }
  NodeAttrs a;
  a.callee = then_ref;
  a.else_callee = else_ref;
  a.user_arity = static_cast<std::uint32_t>(args.size());
  a.cond_out_shapes = t.signature.outputs;
  for (std::uint32_t j = 0; j < t.signature.outputs.size(); ++j) {
    a.then_out_map.push_back(j);
    a.else_out_map.push_back(j);
  }
  std::vector<Port> inputs{predicate};
  inputs.insert(inputs.end(), args.begin(), args.end());
  NodeId id = add_node(OpKind::kCond, std::move(inputs), std::move(a));
  std::vector<Port> out;
  for (std::uint32_t i = 0; i < nodes_[id].num_outputs(); ++i) out.push_back(port(id, i));
  return out;
}

std::vector<Port> Graph::cond_mapped(Port predicate, SubGraphRef then_ref, SubGraphRef else_ref,
                                     std::vector<Port> args, std::vector<Shape> out_shapes,
                                     std::vector<std::uint32_t> then_out_map,
                                     std::vector<std::uint32_t> else_out_map) {
  NodeAttrs a;
  a.callee = then_ref;
  a.else_callee = else_ref;
  a.user_arity = static_cast<std::uint32_t>(args.size());
  a.cond_out_shapes = std::move(out_shapes);
  a.then_out_map = std::move(then_out_map);
  a.else_out_map = std::move(else_out_map);
  std::vector<Port> inputs{predicate};
  inputs.insert(inputs.end(), args.begin(), args.end());
  NodeId id = add_node(OpKind::kCond, std::move(inputs), std::move(a));
  std::vector<Port> out;
  for (std::uint32_t i = 0; i < nodes_[id].num_outputs(); ++i) out.push_back(port(id, i));
  return out;
}

void Graph::cache_write(Port value, NodeId ref_node, std::uint32_t ref_port) {
  NodeAttrs a;
  a.ref_node = ref_node;
  a.ref_port = ref_port;
  add_node(OpKind::kCacheWrite, {value}, std::move(a));
}

Port Graph::cache_read(std::optional<Port> key, NodeId ref_node, std::uint32_t ref_port, Shape shape) {
  NodeAttrs a;
  a.ref_node = ref_node;
  a.ref_port = ref_port;
  a.shape = shape;
  std::vector<Port> in;
  if (key) in.push_back(*key);
  return single(add_node(OpKind::kCacheRead, std::move(in), std::move(a)));
}

Port Graph::key_extend(std::optional<Port> key, NodeId ref_node, std::optional<Port> after) {
  NodeAttrs a;
  a.ref_node = ref_node;
  std::vector<Port> in;
  if (key) in.push_back(*key);
  if (after) in.push_back(*after);
  return single(add_node(OpKind::kKeyExtend, std::move(in), std::move(a)));
}

void Graph::set_record_branch(NodeId cond_node) {
  require_mutable();
  Node& n = nodes_.at(cond_node);
  if (n.kind != OpKind::kCond) fail(n, "branch records exist only for Cond nodes");
  n.attrs.record_branch = true;
}

Graph& Graph::body(SubGraphRef ref) {
  require_mutable();
  if (is_body()) throw BuildError("body() must be called on the top-level graph");
  SubGraphDef& def = registry_->defs.at(ref.index);
  if (!def.defined()) throw BuildError("subgraph '" + def.name + "' has no body");
  return *def.body;
}

Graph Graph::clone(const FinalizedGraph& g) {
  const Program& prog = g.program();
  Graph top;
  std::map<std::uint32_t, std::uint32_t> uid_map{{prog.top->uid(), top.uid()}};
  auto remap_nodes = [&](const Graph& from, Graph& to) {
    to.nodes_ = from.nodes_;
    for (Node& n : to.nodes_) {
      for (Port& p : n.inputs) p.graph = uid_map.at(p.graph);
    }
  };
  std::vector<Graph> bodies;
  for (const SubGraphDef& d : prog.registry->defs) {
    Graph b(top.registry_, top.uid());
    uid_map.emplace(d.body->uid(), b.uid());
    bodies.push_back(std::move(b));
  }
  remap_nodes(*prog.top, top);
  for (std::size_t i = 0; i < bodies.size(); ++i) {
    const SubGraphDef& d = prog.registry->defs[i];
    remap_nodes(*d.body, bodies[i]);
    SubGraphDef copy;
    copy.name = d.name;
    copy.signature = d.signature;
    for (Port p : d.outputs) copy.outputs.push_back({uid_map.at(p.graph), p.node, p.index});
    for (Port p : d.captures) copy.captures.push_back({uid_map.at(p.graph), p.node, p.index});
    copy.body = std::make_shared<Graph>(std::move(bodies[i]));
    top.registry_->by_name.emplace(copy.name, static_cast<std::uint32_t>(top.registry_->defs.size()));
    top.registry_->defs.push_back(std::move(copy));
  }
  return top;
}

std::vector<NodeId> topological_order(const Graph& g) {
  const auto& nodes = g.nodes();
  std::vector<int> indegree(nodes.size(), 0);
  std::vector<std::vector<NodeId>> users(nodes.size());
  for (const Node& n : nodes) {
    for (const Port& p : n.inputs) {
      if (p.graph != g.uid()) continue;
      ++indegree[n.id];
      users[p.node].push_back(n.id);
    }
  }
  std::vector<NodeId> order;
  std::vector<NodeId> ready;
  for (const Node& n : nodes) {
    if (indegree[n.id] == 0) ready.push_back(n.id);
  }
  // Smallest id first keeps the order deterministic.
  std::make_heap(ready.begin(), ready.end(), std::greater<>());
  while (!ready.empty()) {
    std::pop_heap(ready.begin(), ready.end(), std::greater<>());
    NodeId id = ready.back();
    ready.pop_back();
    order.push_back(id);
    for (NodeId u : users[id]) {
      if (--indegree[u] == 0) {
        ready.push_back(u);
        std::push_heap(ready.begin(), ready.end(), std::greater<>());
      }
    }
  }
  if (order.size() != nodes.size()) {
    std::string offenders;
    for (const Node& n : nodes) {
      if (indegree[n.id] > 0) offenders += (offenders.empty() ? "" : ", ") + std::to_string(n.id);
    }
    throw BuildError("node-level cycle through nodes " + offenders);
  }
  return order;
}

struct Finalizer {
  Program& prog;

  std::vector<Graph*> graphs() {
    std::vector<Graph*> out{prog.top.get()};
    for (auto& d : prog.registry->defs) out.push_back(d.body.get());
    return out;
  }

  // Placeholder node of `body` that receives top-level port `c`, if captured.
  static std::optional<Port> capture_slot(const SubGraphDef& def, const Port& c) {
    for (std::size_t i = 0; i < def.captures.size(); ++i) {
      if (def.captures[i] == c) {
        const int want = static_cast<int>(def.signature.inputs.size() + i);
        for (const Node& n : def.body->nodes()) {
          if (n.kind == OpKind::kPlaceholder && n.attrs.arg_index == want) return def.body->port(n.id);
        }
      }
    }
    return std::nullopt;
  }

  static void add_capture(SubGraphDef& def, const Port& c, Shape shape) {
    Graph& body = *def.body;
    Node n;
    n.id = static_cast<NodeId>(body.nodes_.size());
    n.kind = OpKind::kPlaceholder;
    n.attrs.name = "capture" + std::to_string(def.captures.size());
    n.attrs.shape = shape;
    n.attrs.arg_index = static_cast<int>(def.arity());
    n.out_shapes = {shape};
    body.nodes_.push_back(std::move(n));
    def.captures.push_back(c);
  }

  void check_defined() {
    std::string missing;
    for (const auto& d : prog.registry->defs) {
      if (!d.defined()) missing += (missing.empty() ? "'" : ", '") + d.name + "'";
    }
    if (!missing.empty()) throw BuildError("undefined body for subgraph(s) " + missing);
  }

  // A body that invokes S must itself capture everything S captures (fixed point, since
  // recursion and mutual recursion make the call graph cyclic).
  void close_captures() {
    bool changed = true;
    while (changed) {
      changed = false;
      for (auto& def : prog.registry->defs) {
        for (const Node& n : std::vector<Node>(def.body->nodes())) {
          if (n.kind != OpKind::kInvoke && n.kind != OpKind::kCond) continue;
          std::vector<SubGraphRef> callees{n.attrs.callee};
          if (n.kind == OpKind::kCond) callees.push_back(n.attrs.else_callee);
          for (SubGraphRef r : callees) {
            const std::vector<Port> needed = prog.registry->defs[r.index].captures;
            for (const Port& c : needed) {
              if (capture_slot(def, c)) continue;
              add_capture(def, c, *prog.top->shape_of(c));
              changed = true;
            }
          }
        }
      }
    }
  }

  Port supply(const Graph& g, const SubGraphDef* owner, const Port& c) {
    if (owner == nullptr) return c;
    auto slot = capture_slot(*owner, c);
    if (!slot) throw BuildError("internal: capture not closed in '" + owner->name + "'");
    (void)g;
    return *slot;
  }

  void wire(Graph& g, const SubGraphDef* owner) {
    for (Node& n : g.nodes_) {
      if (n.kind == OpKind::kInvoke) {
        const SubGraphDef& callee = prog.registry->defs[n.attrs.callee.index];
        n.inputs.resize(n.attrs.user_arity);
        for (const Port& c : callee.captures) n.inputs.push_back(supply(g, owner, c));
      } else if (n.kind == OpKind::kCond) {
        const SubGraphDef& t = prog.registry->defs[n.attrs.callee.index];
        const SubGraphDef& e = prog.registry->defs[n.attrs.else_callee.index];
        const std::uint32_t k = n.attrs.user_arity;
        n.inputs.resize(1 + k);
        std::vector<Port> extra;
        auto operand = [&](const Port& c) {
          for (std::uint32_t i = 0; i < extra.size(); ++i) {
            if (extra[i] == c) return k + i;
          }
          extra.push_back(c);
          return k + static_cast<std::uint32_t>(extra.size() - 1);
        };
        auto in_map = [&](const SubGraphDef& d) {
          std::vector<std::uint32_t> m;
          for (std::uint32_t i = 0; i < k; ++i) m.push_back(i);
          for (const Port& c : d.captures) m.push_back(operand(c));
          return m;
        };
        n.attrs.then_in_map = in_map(t);
        n.attrs.else_in_map = in_map(e);
        for (const Port& c : extra) n.inputs.push_back(supply(g, owner, c));
      }
    }
  }

  void resolve_shapes(Graph& g, const std::string& where) {
    std::string unresolved;
    for (NodeId id : topological_order(g)) {
      Node& n = g.nodes_[id];
      g.infer_shapes(n);
      for (const auto& s : n.out_shapes) {
        if (!s) {
          unresolved += (unresolved.empty() ? "" : ", ") + std::to_string(id);
          break;
        }
      }
    }
    if (!unresolved.empty()) throw BuildError("unresolved shape in " + where + " at node(s) " + unresolved);
  }

  static ExecPlan build_plan(const Graph& g, const std::vector<Port>& outputs) {
    ExecPlan plan;
    plan.graph = &g;
    const auto& nodes = g.nodes();
    plan.nodes.resize(nodes.size());
    std::uint32_t slot = 0;
    for (const Node& n : nodes) {
      plan.nodes[n.id].node = &n;
      plan.nodes[n.id].first_slot = slot;
      slot += n.num_outputs();
    }
    plan.num_slots = slot;
    for (const Node& n : nodes) {
      PlanNode& pn = plan.nodes[n.id];
      for (const Port& p : n.inputs) {
        pn.inputs.push_back({plan.nodes[p.node].first_slot + p.index, p.node});
        plan.nodes[p.node].dependents.push_back(n.id);
      }
      pn.initial_pending = static_cast<std::int32_t>(n.inputs.size());
      if (n.inputs.empty()) plan.sources.push_back(n.id);
      if (n.kind == OpKind::kPlaceholder && n.attrs.arg_index >= 0) {
        auto i = static_cast<std::size_t>(n.attrs.arg_index);
        if (plan.arg_nodes.size() <= i) plan.arg_nodes.resize(i + 1, UINT32_MAX);
        plan.arg_nodes[i] = n.id;
      }
    }
    for (const Port& p : outputs) plan.outputs.push_back({plan.nodes[p.node].first_slot + p.index, p.node});
    plan.topo_order = topological_order(g);
    return plan;
  }

  void run() {
    check_defined();
    close_captures();
    wire(*prog.top, nullptr);
    for (auto& d : prog.registry->defs) wire(*d.body, &d);
    resolve_shapes(*prog.top, "top-level graph");
    for (auto& d : prog.registry->defs) resolve_shapes(*d.body, "subgraph '" + d.name + "'");
    for (const Port& p : prog.outputs) {
      if (p.graph != prog.top->uid()) throw BuildError("graph output does not belong to the top-level graph");
      prog.top->shape_of(p);
    }
    prog.top_plan = build_plan(*prog.top, prog.outputs);
    for (auto& d : prog.registry->defs) prog.plans.push_back(build_plan(*d.body, d.outputs));
  }
};

FinalizedGraph finalize_program(Graph top, std::vector<Port> outputs, bool differentiated) {
  if (top.is_body()) throw BuildError("finalize must be called on the top-level graph");
  if (top.finalized()) throw BuildError("graph already finalized");
  auto prog = std::make_shared<Program>();
  prog->registry = top.registry_;
  prog->top = std::make_unique<Graph>(std::move(top));
  prog->outputs = std::move(outputs);
  prog->differentiated = differentiated;
  Finalizer{*prog}.run();
  prog->top->finalized_ = true;
  for (auto& d : prog->registry->defs) d.body->finalized_ = true;
  return FinalizedGraph(std::move(prog));
}

FinalizedGraph Graph::finalize(std::vector<Port> outputs) {
  require_mutable();
  if (is_body()) throw BuildError("finalize must be called on the top-level graph");
  Graph moved(std::move(*this));
  finalized_ = true;
  registry_.reset();
  nodes_.clear();
  return finalize_program(std::move(moved), std::move(outputs), false);
}

std::optional<SubGraphRef> FinalizedGraph::find_subgraph(const std::string& name) const {
  const auto& by_name = program_->registry->by_name;
  auto it = by_name.find(name);
  if (it == by_name.end()) return std::nullopt;
  return SubGraphRef{it->second};
}

namespace {

void dump_graph(std::ostringstream& os, const Graph& g, const Registry& reg, const std::string& indent) {
  for (const Node& n : g.nodes()) {
    os << indent << n.id << ": " << to_string(n.kind);
    switch (n.kind) {
      case OpKind::kUnary:
      case OpKind::kUnaryGrad: os << "[" << to_string(n.attrs.unary) << "]"; break;
      case OpKind::kBinary: os << "[" << to_string(n.attrs.binary) << "]"; break;
      case OpKind::kMatMul:
        if (n.attrs.transpose_a || n.attrs.transpose_b) {
          os << "[" << (n.attrs.transpose_a ? "T" : "N") << (n.attrs.transpose_b ? "T" : "N") << "]";
        }
        break;
      case OpKind::kPlaceholder:
      case OpKind::kParameter: os << "[" << n.attrs.name << "]"; break;
      case OpKind::kInvoke: os << "[" << reg.defs[n.attrs.callee.index].name << "]"; break;
      case OpKind::kCond:
        os << "[" << reg.defs[n.attrs.callee.index].name << "|" << reg.defs[n.attrs.else_callee.index].name << "]";
        break;
      case OpKind::kCacheRead:
      case OpKind::kCacheWrite:
      case OpKind::kKeyExtend: os << "[" << n.attrs.ref_node << ":" << n.attrs.ref_port << "]"; break;
      default: break;
    }
    os << "(";
    for (std::size_t i = 0; i < n.inputs.size(); ++i) os << (i ? "," : "") << fmt_port(n.inputs[i], g.uid());
    os << ") -> ";
    if (n.out_shapes.empty()) os << "()";
    for (std::size_t i = 0; i < n.out_shapes.size(); ++i) {
      os << (i ? ", " : "") << (n.out_shapes[i] ? (is_key(*n.out_shapes[i]) ? "key" : n.out_shapes[i]->str()) : "?");
    }
    if (n.attrs.cell) os << " cell";
    os << "\n";
  }
}

}  // namespace

std::string FinalizedGraph::dump() const {
  std::ostringstream os;
  const Registry& reg = *program_->registry;
  os << "graph" << (program_->differentiated ? " (differentiated)" : "") << "\n";
  dump_graph(os, *program_->top, reg, "  ");
  os << "outputs:";
  for (const Port& p : program_->outputs) os << " " << fmt_port(p, program_->top->uid());
  os << "\n";
  for (const auto& d : reg.defs) {
    os << "subgraph " << d.name << " (in:";
    for (const Shape& s : d.signature.inputs) os << " " << (is_key(s) ? "key" : s.str());
    os << "; out:";
    for (const Shape& s : d.signature.outputs) os << " " << (is_key(s) ? "key" : s.str());
    os << "; captures:";
    for (const Port& c : d.captures) os << " " << c.node << (c.index ? ":" + std::to_string(c.index) : "");
    os << ")\n";
    dump_graph(os, *d.body, reg, "    ");
    os << "    outputs:";
    for (const Port& p : d.outputs) os << " " << fmt_port(p, d.body->uid());
    os << "\n";
  }
  return os.str();
}

}  // namespace rdg
