#include "rdg/autodiff.hpp"

#include <optional>
#include <set>

namespace rdg {

namespace {

using Flags = std::vector<std::vector<bool>>;  // [node][port]

Flags blank_flags(const Graph& g) {
  Flags f(g.nodes().size());
  for (const Node& n : g.nodes()) f[n.id].assign(n.num_outputs(), false);
  return f;
}

}  // namespace

struct Differentiator::State {
  FinalizedGraph fwd;
  Graph top;
  std::set<Port> wrt;
  std::vector<Port> wrt_order;

  // Differentiability of every forward port; index 0 is the top graph, 1 + i is SubGraph i.
  std::vector<Flags> diff;
  std::vector<std::vector<bool>> arg_diff;
  std::vector<std::vector<bool>> out_diff;

  std::map<std::uint32_t, SubGraphRef> grads;
  std::vector<std::set<Port>> needs_write;
  std::set<std::pair<int, NodeId>> record_conds;

  const Graph& fwd_graph(int sub) const {
    return sub < 0 ? fwd.top() : *fwd.subgraph(SubGraphRef{static_cast<std::uint32_t>(sub)}).body;
  }

  bool is_diff(int sub, const Port& p) const { return diff[sub + 1][p.node][p.index]; }

  // Forward port -> same node in the cloned top graph.
  Port in_clone_top(const Port& p) const { return Port{top.uid(), p.node, p.index}; }

  void analyze() {
    const std::size_t n_sub = fwd.subgraph_count();
    diff.push_back(blank_flags(fwd.top()));
    for (std::size_t i = 0; i < n_sub; ++i) {
      const SubGraphDef& d = fwd.subgraph(SubGraphRef{static_cast<std::uint32_t>(i)});
      diff.push_back(blank_flags(*d.body));
      arg_diff.emplace_back(d.arity(), false);
      out_diff.emplace_back(d.outputs.size(), false);
    }
    bool changed = true;
    auto raise = [&](std::vector<bool>::reference f, bool v) {
      if (v && !f) {
        f = true;
        changed = true;
      }
    };
    while (changed) {
      changed = false;
      for (int sub = -1; sub < static_cast<int>(n_sub); ++sub) {
        const Graph& g = fwd_graph(sub);
        Flags& fl = diff[sub + 1];
        auto in = [&](const Node& n, std::size_t i) { return fl[n.inputs[i].node][n.inputs[i].index]; };
        const auto& topo = sub < 0 ? fwd.top_plan().topo_order : fwd.plan(SubGraphRef{static_cast<std::uint32_t>(sub)}).topo_order;
        for (NodeId id : topo) {
          const Node& n = g.node(id);
          bool v = false;
          switch (n.kind) {
            case OpKind::kParameter: v = wrt.contains(g.port(id)); break;
            case OpKind::kPlaceholder:
              v = sub >= 0 && n.attrs.arg_index >= 0 && arg_diff[sub][n.attrs.arg_index];
              break;
            case OpKind::kMatMul:
            case OpKind::kBinary:
            case OpKind::kConcatRows: v = in(n, 0) || in(n, 1); break;
            case OpKind::kUnary:
            case OpKind::kTranspose:
            case OpKind::kReshape:
            case OpKind::kSliceRows:
            case OpKind::kGatherRow:
            case OpKind::kScatterRow:
            case OpKind::kClearRow:
            case OpKind::kSoftmaxXent: v = in(n, 0); break;
            case OpKind::kScalarMul: v = in(n, 1); break;
            case OpKind::kSetRow: v = in(n, 0) || in(n, 2); break;
            case OpKind::kGradAccum:
              for (std::size_t i = 0; i < n.inputs.size(); ++i) v = v || in(n, i);
              break;
            case OpKind::kInvoke: {
              const auto c = n.attrs.callee.index;
              for (std::size_t i = 0; i < n.inputs.size(); ++i) raise(arg_diff[c][i], in(n, i));
              for (std::size_t j = 0; j < out_diff[c].size(); ++j) raise(fl[id][j], out_diff[c][j]);
              continue;
            }
            case OpKind::kCond: {
              for (int b = 0; b < 2; ++b) {
                const auto c = (b == 0 ? n.attrs.callee : n.attrs.else_callee).index;
                const auto& in_map = b == 0 ? n.attrs.then_in_map : n.attrs.else_in_map;
                const auto& out_map = b == 0 ? n.attrs.then_out_map : n.attrs.else_out_map;
                for (std::size_t i = 0; i < in_map.size(); ++i) raise(arg_diff[c][i], in(n, 1 + in_map[i]));
                for (std::size_t j = 0; j < out_map.size(); ++j) raise(fl[id][out_map[j]], out_diff[c][j]);
              }
              continue;
            }
            default: break;
          }
          if (n.num_outputs() > 0) raise(fl[id][0], v);
        }
        if (sub >= 0) {
          const SubGraphDef& d = fwd.subgraph(SubGraphRef{static_cast<std::uint32_t>(sub)});
          for (std::size_t j = 0; j < d.outputs.size(); ++j) raise(out_diff[sub][j], fl[d.outputs[j].node][d.outputs[j].index]);
        }
      }
    }
  }

  // Builder for the gradient of one graph (the top level or one SubGraph body).
  struct Emitter {
    State& st;
    Graph& out;
    int sub;
    std::optional<Port> key;
    std::map<Port, std::vector<Port>> contrib;
    std::map<Port, Port> forward_memo;

    const Graph& fg() const { return st.fwd_graph(sub); }

    Port forward(const Port& p) {
      if (sub < 0) return st.in_clone_top(p);
      const Node& n = fg().node(p.node);
      const SubGraphDef& d = st.fwd.subgraph(SubGraphRef{static_cast<std::uint32_t>(sub)});
      const auto n_user = static_cast<int>(d.signature.inputs.size());
      if (n.kind == OpKind::kPlaceholder && n.attrs.arg_index >= n_user) {
        return st.in_clone_top(d.captures[n.attrs.arg_index - n_user]);
      }
      auto it = forward_memo.find(p);
      if (it != forward_memo.end()) return it->second;
      Port r = out.cache_read(key, p.node, p.index, *fg().shape_of(p));
      st.needs_write[sub].insert(p);
      forward_memo.emplace(p, r);
      return r;
    }

    void add(const Node& n, std::size_t input, Port g) {
      const Port& p = n.inputs[input];
      if (st.is_diff(sub, p)) contrib[p].push_back(g);
    }

    std::optional<Port> total(const Port& p) {
      auto it = contrib.find(p);
      if (it == contrib.end() || it->second.empty()) return std::nullopt;
      if (it->second.size() > 1) it->second = {out.grad_accum(it->second)};
      return it->second[0];
    }

    Port total_or_zeros(const Port& p, Shape shape) {
      auto g = total(p);
      return g ? *g : out.zeros(shape);
    }

    Port unary_grad(UnaryFn f, Port g, std::optional<Port> x) {
      NodeAttrs a;
      a.unary = f;
      std::vector<Port> in{g};
      if (x) in.push_back(*x);
      return out.port(out.add_node(OpKind::kUnaryGrad, std::move(in), std::move(a)));
    }

    Shape shape(const Port& p) const {
      auto s = fg().shape_of(p);
      if (!s || s->rows < 0) throw BuildError("gradient needs a fixed shape at node " + std::to_string(p.node));
      return *s;
    }

    void node_grad(const Node& n) {
      std::vector<std::optional<Port>> g(n.num_outputs());
      bool any = false;
      for (std::uint32_t k = 0; k < n.num_outputs(); ++k) {
        if (!st.diff[sub + 1][n.id][k]) continue;
        g[k] = total(fg().port(n.id, k));
        any = any || g[k].has_value();
      }
      if (!any) return;
      const NodeAttrs& a = n.attrs;
      auto fv = [&](std::size_t i) { return forward(n.inputs[i]); };
      auto diff_in = [&](std::size_t i) { return st.is_diff(sub, n.inputs[i]); };
      switch (n.kind) {
        case OpKind::kMatMul: {
          const Port up = *g[0];
          if (diff_in(0)) {
            add(n, 0, a.transpose_a ? out.matmul(fv(1), up, a.transpose_b, true) : out.matmul(up, fv(1), false, !a.transpose_b));
          }
          if (diff_in(1)) {
            add(n, 1, a.transpose_b ? out.matmul(up, fv(0), true, a.transpose_a) : out.matmul(fv(0), up, !a.transpose_a, false));
          }
          break;
        }
        case OpKind::kUnary: {
          std::optional<Port> x;
          if (a.unary == UnaryFn::kTanh || a.unary == UnaryFn::kSigmoid) x = forward(fg().port(n.id));
          if (a.unary == UnaryFn::kSquare) x = fv(0);
          add(n, 0, unary_grad(a.unary, *g[0], x));
          break;
        }
        case OpKind::kBinary:
          switch (a.binary) {
            case BinaryFn::kAdd:
              add(n, 0, *g[0]);
              add(n, 1, *g[0]);
              break;
            case BinaryFn::kSub:
              add(n, 0, *g[0]);
              if (diff_in(1)) add(n, 1, out.unary(UnaryFn::kNeg, *g[0]));
              break;
            case BinaryFn::kHadamard:
              if (diff_in(0)) add(n, 0, out.binary(BinaryFn::kHadamard, *g[0], fv(1)));
              if (diff_in(1)) add(n, 1, out.binary(BinaryFn::kHadamard, *g[0], fv(0)));
              break;
          }
          break;
        // The scalar coefficient is treated as a constant.
        case OpKind::kScalarMul: add(n, 1, out.scalar_mul(fv(0), *g[0])); break;
        case OpKind::kConcatRows: {
          const auto ra = shape(n.inputs[0]).rows;
          const auto rb = shape(n.inputs[1]).rows;
          if (diff_in(0)) add(n, 0, out.slice_rows(*g[0], 0, ra));
          if (diff_in(1)) add(n, 1, out.slice_rows(*g[0], ra, rb));
          break;
        }
        case OpKind::kSliceRows: {
          const Shape s = shape(n.inputs[0]);
          Port r = *g[0];
          if (a.begin > 0) r = out.concat_rows(out.zeros({a.begin, s.cols}), r);
          const auto rest = s.rows - a.begin - a.count;
          if (rest > 0) r = out.concat_rows(r, out.zeros({rest, s.cols}));
          add(n, 0, r);
          break;
        }
        case OpKind::kTranspose: add(n, 0, out.transpose(*g[0])); break;
        case OpKind::kReshape: add(n, 0, out.reshape(*g[0], shape(n.inputs[0]))); break;
        case OpKind::kGatherRow: add(n, 0, out.scatter_row(*g[0], fv(1), shape(n.inputs[0]).rows)); break;
        case OpKind::kScatterRow: add(n, 0, out.gather_row(*g[0], fv(1))); break;
        case OpKind::kSetRow:
          if (diff_in(0)) add(n, 0, out.clear_row(*g[0], fv(1)));
          if (diff_in(2)) add(n, 2, out.gather_row(*g[0], fv(1)));
          break;
        case OpKind::kClearRow: add(n, 0, out.clear_row(*g[0], fv(1))); break;
        case OpKind::kSoftmaxXent:
          if (g[0]) add(n, 0, out.scalar_mul(*g[0], forward(fg().port(n.id, 1))));
          break;
        case OpKind::kGradAccum:
          for (std::size_t i = 0; i < n.inputs.size(); ++i) add(n, i, *g[0]);
          break;
        case OpKind::kInvoke: invoke_grad(n, g); break;
        case OpKind::kCond: cond_grad(n, g); break;
        default: break;
      }
    }

    std::vector<Port> upstreams(const Node& n, std::vector<std::optional<Port>>& g) {
      std::vector<Port> ups;
      for (std::uint32_t k = 0; k < n.num_outputs(); ++k) ups.push_back(g[k] ? *g[k] : out.zeros(*n.out_shapes[k]));
      return ups;
    }

    // Key of the forward child frame. At the top level there is no key input, so the forward
    // node's first output orders the gradient call after the forward frame has finished.
    Port child_key(const Node& n) {
      if (sub >= 0 || n.num_outputs() == 0) return out.key_extend(key, n.id);
      return out.key_extend(std::nullopt, n.id, forward(fg().port(n.id, 0)));
    }

    void invoke_grad(const Node& n, std::vector<std::optional<Port>>& g) {
      const SubGraphRef callee = n.attrs.callee;
      const auto positions = st.diff_inputs(callee);
      if (positions.empty()) return;
      std::vector<Port> args = upstreams(n, g);
      args.push_back(child_key(n));
      const SubGraphRef gref = st.differentiate_subgraph(callee);
      auto outs = out.invoke(gref, std::move(args));
      for (std::size_t k = 0; k < positions.size(); ++k) add(n, positions[k], outs[k]);
    }

    void cond_grad(const Node& n, std::vector<std::optional<Port>>& g) {
      const NodeAttrs& a = n.attrs;
      const auto then_pos = st.diff_inputs(a.callee);
      const auto else_pos = st.diff_inputs(a.else_callee);
      if (then_pos.empty() && else_pos.empty()) return;
      // Gradient Cond outputs: one per operand (predicate excluded) that some branch differentiates.
      std::vector<std::uint32_t> operands;
      auto slot = [&](std::uint32_t operand) {
        for (std::uint32_t i = 0; i < operands.size(); ++i) {
          if (operands[i] == operand) return i;
        }
        operands.push_back(operand);
        return static_cast<std::uint32_t>(operands.size() - 1);
      };
      std::vector<std::uint32_t> then_map, else_map;
      for (auto i : then_pos) then_map.push_back(slot(a.then_in_map[i]));
      for (auto i : else_pos) else_map.push_back(slot(a.else_in_map[i]));
      std::vector<Shape> shapes;
      for (auto o : operands) shapes.push_back(shape(n.inputs[1 + o]));

      Port pred;
      if (sub < 0) {
        pred = forward(n.inputs[0]);
      } else {
        st.record_conds.insert({sub, n.id});
        pred = out.cache_read(key, n.id, kBranchRecordPort, Shape{1, 1});
      }
      std::vector<Port> args = upstreams(n, g);
      args.push_back(child_key(n));
      const SubGraphRef gt = st.differentiate_subgraph(a.callee);
      const SubGraphRef ge = st.differentiate_subgraph(a.else_callee);
      auto outs = out.cond_mapped(pred, gt, ge, std::move(args), std::move(shapes), std::move(then_map), std::move(else_map));
      for (std::size_t k = 0; k < operands.size(); ++k) add(n, 1 + operands[k], outs[k]);
    }

    void run(const std::vector<NodeId>& topo) {
      for (auto it = topo.rbegin(); it != topo.rend(); ++it) node_grad(fg().node(*it));
    }
  };

  std::vector<std::uint32_t> diff_inputs(SubGraphRef ref) const {
    std::vector<std::uint32_t> out;
    for (std::uint32_t i = 0; i < arg_diff[ref.index].size(); ++i) {
      if (arg_diff[ref.index][i]) out.push_back(i);
    }
    return out;
  }

  SubGraphRef differentiate_subgraph(SubGraphRef ref) {
    if (auto it = grads.find(ref.index); it != grads.end()) return it->second;
    const SubGraphDef& d = fwd.subgraph(ref);
    if (!d.defined()) throw BuildError("subgraph '" + d.name + "' has no body to differentiate");
    const ExecPlan& plan = fwd.plan(ref);
    const auto positions = diff_inputs(ref);

    Signature sig;
    for (Shape s : d.signature.outputs) sig.inputs.push_back(s);
    sig.inputs.push_back(kKeyShape);
    std::vector<Shape> in_shapes;
    for (auto i : positions) {
      Shape s = *d.body->node(plan.arg_nodes[i]).out_shapes[0];
      if (s.rows < 0) throw BuildError("subgraph '" + d.name + "': differentiable input of unknown row count");
      sig.outputs.push_back(s);
    }
    const SubGraphRef gref = top.declare_subgraph(d.name + "/grad", sig);
    grads.emplace(ref.index, gref);

    Graph body = top.new_body();
    std::vector<Port> ups;
    for (std::size_t j = 0; j < d.signature.outputs.size(); ++j) ups.push_back(body.arg(j, d.signature.outputs[j]));
    Port key = body.arg(d.signature.outputs.size(), kKeyShape);

    Emitter em{*this, body, static_cast<int>(ref.index), key, {}, {}};
    for (std::size_t j = 0; j < d.outputs.size(); ++j) {
      if (out_diff[ref.index][j]) em.contrib[d.outputs[j]].push_back(ups[j]);
    }
    em.run(plan.topo_order);
    std::vector<Port> outs;
    for (std::size_t k = 0; k < positions.size(); ++k) {
      outs.push_back(em.total_or_zeros(d.body->port(plan.arg_nodes[positions[k]]), sig.outputs[k]));
    }
    top.define_subgraph(gref, std::move(body), std::move(outs));
    return gref;
  }
};

Differentiator::Differentiator(const FinalizedGraph& g, std::vector<Port> wrt) : s_(std::make_unique<State>()) {
  if (!g.valid()) throw BuildError("differentiate needs a finalized graph");
  if (g.differentiated()) throw BuildError("graph is already a gradient graph; higher-order gradients are not supported");
  s_->fwd = g;
  s_->top = Graph::clone(g);
  for (const Port& p : wrt) {
    if (p.graph != g.top().uid() || g.top().node(p.node).kind != OpKind::kParameter) {
      throw BuildError("differentiate: wrt entries must be top-level Parameters");
    }
    s_->wrt.insert(p);
  }
  s_->wrt_order = std::move(wrt);
  s_->needs_write.resize(g.subgraph_count());
  s_->analyze();
}

Differentiator::~Differentiator() = default;

SubGraphRef Differentiator::differentiate_subgraph(SubGraphRef ref) { return s_->differentiate_subgraph(ref); }

std::vector<std::uint32_t> Differentiator::differentiable_inputs(SubGraphRef ref) const { return s_->diff_inputs(ref); }

std::pair<FinalizedGraph, GradientMap> Differentiator::finish(Port loss) {
  State& st = *s_;
  const Graph& ftop = st.fwd.top();
  if (loss.graph != ftop.uid()) throw BuildError("loss must be a port of the top-level graph");
  auto ls = ftop.shape_of(loss);
  if (!ls || *ls != Shape{1, 1}) throw BuildError("loss must be 1x1, got " + (ls ? ls->str() : std::string("?")));

  State::Emitter em{st, st.top, -1, std::nullopt, {}, {}};
  if (st.is_diff(-1, loss)) em.contrib[loss].push_back(st.top.constant(Tensor::scalar(1.0)));
  em.run(st.fwd.top_plan().topo_order);

  GradientMap gm;
  gm.loss = st.in_clone_top(loss);
  for (const Port& p : st.wrt_order) {
    // Reachable parameters always get their own GradAccum, even with a single term.
    auto it = em.contrib.find(p);
    Port gp;
    if (it == em.contrib.end() || it->second.empty()) {
      gp = st.top.zeros(*ftop.shape_of(p));
    } else if (it->second.size() == 1 && it->second[0].graph == st.top.uid() &&
               st.top.node(it->second[0].node).kind == OpKind::kGradAccum) {
      gp = it->second[0];
    } else {
      gp = st.top.grad_accum(it->second);
      it->second = {gp};
    }
    gm.param_grads.emplace_back(ftop.node(p.node).attrs.name, gp);
  }
  for (const auto& [fp, parts] : em.contrib) {
    if (fp.graph != ftop.uid()) continue;
    auto t = em.total(fp);
    if (t) gm.port_grads.emplace(st.in_clone_top(fp), *t);
  }
  for (const auto& [idx, ref] : st.grads) gm.subgraph_grads.emplace(idx, ref);

  for (std::size_t i = 0; i < st.needs_write.size(); ++i) {
    Graph& b = st.top.body(SubGraphRef{static_cast<std::uint32_t>(i)});
    for (const Port& p : st.needs_write[i]) b.cache_write(b.port(p.node, p.index), p.node, p.index);
  }
  for (const auto& [sub, id] : st.record_conds) {
    if (sub < 0) {
      st.top.set_record_branch(id);
    } else {
      st.top.body(SubGraphRef{static_cast<std::uint32_t>(sub)}).set_record_branch(id);
    }
  }

  std::vector<Port> outputs;
  for (const Port& p : st.fwd.outputs()) {
    gm.forward_outputs.push_back(st.in_clone_top(p));
    outputs.push_back(st.in_clone_top(p));
  }
  outputs.push_back(gm.loss);
  for (const auto& [name, p] : gm.param_grads) outputs.push_back(p);
  FinalizedGraph out = finalize_program(std::move(st.top), std::move(outputs), true);
  return {std::move(out), std::move(gm)};
}

std::pair<FinalizedGraph, GradientMap> differentiate(const FinalizedGraph& g, Port loss, const std::vector<Port>& wrt) {
  Differentiator d(g, wrt);
  return d.finish(loss);
}

std::size_t count_invokes(const FinalizedGraph& g, SubGraphRef ref, SubGraphRef target) {
  std::size_t n = 0;
  for (const Node& node : g.subgraph(ref).body->nodes()) {
    if (node.kind == OpKind::kInvoke && node.attrs.callee == target) ++n;
  }
  return n;
}

}  // namespace rdg
