#include <cmath>
#include <random>

#include "doctest.h"
#include "rdg/autodiff.hpp"
#include "rdg/models.hpp"

using namespace rdg;

namespace {

bool contains(const std::string& s, const std::string& part) { return s.find(part) != std::string::npos; }

Tensor grad_of(const StepResult& s, const std::string& name) { return s.grads.at(name); }

double loss_only(const FinalizedGraph& g, Port loss, const Feeds& feeds) { return run(g, feeds, {loss}).values[0].item(); }

// Unrolled static graph of a TreeRNN instance: no SubGraphs, weight sharing is plain fan-out.
struct Unrolled {
  FinalizedGraph graph;
  Port loss;
  std::vector<Port> params;
};

Unrolled unroll_treernn(const ModelConfig& cfg, const TreeInstance& t) {
  Graph g;
  std::map<std::string, Port> p;
  for (const auto& [name, shape] : param_shapes(cfg)) p.emplace(name, g.parameter(name, shape));
  std::vector<Port> rows(t.nodes.size());
  for (int i : t.topo_order) {
    const TreeNode& n = t.nodes[i];
    if (n.is_leaf()) {
      rows[i] = g.gather_row(p.at("E"), g.constant(Tensor::scalar(n.token)));
      continue;
    }
    Port hc = g.concat_rows(g.transpose(rows[n.left]), g.transpose(rows[n.right]));
    Port h = g.unary(UnaryFn::kTanh, g.binary(BinaryFn::kAdd, g.matmul(p.at("W"), hc), p.at("b")));
    rows[i] = g.transpose(h);
  }
  Port root = g.transpose(rows[t.root]);
  Port logits = g.transpose(g.binary(BinaryFn::kAdd, g.matmul(p.at("Ws"), root), p.at("bs")));
  Port loss = g.softmax_xent(logits, g.constant(Tensor::scalar(t.nodes[t.root].label))).first;
  Unrolled u;
  for (const auto& [name, port] : p) u.params.push_back(port);
  u.loss = loss;
  u.graph = g.finalize({loss});
  return u;
}

}  // namespace

TEST_CASE("sum of squares matches finite differences") {
  Graph g;
  Port x = g.placeholder("x", Shape{2, 1});
  Port w = g.parameter("W", Shape{3, 2});
  Port y = g.matmul(w, x);
  Port loss = g.matmul(y, y, true, false);
  FinalizedGraph fg = g.finalize({loss});
  auto [ext, gm] = differentiate(fg, loss, {w});
  REQUIRE(gm.param_grads.size() == 1);
  CHECK(gm.param_grads[0].first == "W");

  const Tensor X(2, 1, {0.7, -1.3});
  Tensor W(3, 2, {0.2, -0.5, 1.1, 0.4, -0.9, 0.3});
  Feeds f{{"x", share(X)}, {"W", share(W)}};
  RunResult r = run(ext, f, {gm.param_grads[0].second});
  const Tensor& dW = r.values[0];

  const double h = 1e-6;
  for (std::int64_t i = 0; i < 3; ++i) {
    for (std::int64_t j = 0; j < 2; ++j) {
      Tensor wp = W, wm = W;
      wp(i, j) += h;
      wm(i, j) -= h;
      const double lp = loss_only(fg, loss, {{"x", share(X)}, {"W", share(wp)}});
      const double lm = loss_only(fg, loss, {{"x", share(X)}, {"W", share(wm)}});
      const double fd = (lp - lm) / (2 * h);
      CHECK(std::abs(dW(i, j) - fd) <= 1e-5 * std::max(1.0, std::abs(fd)));
      // 2 (Wx)_i x_j
      const double yi = W(i, 0) * X(0, 0) + W(i, 1) * X(1, 0);
      CHECK(dW(i, j) == doctest::Approx(2 * yi * X(j, 0)).epsilon(1e-12));
    }
  }
}

TEST_CASE("unreachable parameter gets exact zeros") {
  Graph g;
  Port x = g.placeholder("x", Shape{1, 1});
  Port w = g.parameter("W", Shape{1, 1});
  Port unused = g.parameter("U", Shape{2, 3});
  Port loss = g.unary(UnaryFn::kSquare, g.matmul(w, x));
  FinalizedGraph fg = g.finalize({loss});
  auto [ext, gm] = differentiate(fg, loss, {w, unused});
  Feeds f{{"x", share(Tensor::scalar(2.0))}, {"W", share(Tensor::scalar(3.0))}, {"U", share(Tensor(2, 3, 5.0))}};
  RunResult r = run(ext, f, {gm.param_grads[0].second, gm.param_grads[1].second});
  CHECK(r.values[0].item() == doctest::Approx(2 * 6.0 * 2.0));
  CHECK(r.values[1] == Tensor::zeros({2, 3}));
}

TEST_CASE("each reachable parameter has one GradAccum") {
  Graph g;
  Port x = g.placeholder("x", Shape{2, 1});
  Port w = g.parameter("W", Shape{2, 2});
  Port v = g.parameter("V", Shape{1, 2});
  Port a = g.unary(UnaryFn::kTanh, g.matmul(w, x));
  Port b = g.unary(UnaryFn::kTanh, g.matmul(w, a));  // W used twice
  Port loss = g.matmul(v, b);
  FinalizedGraph fg = g.finalize({loss});
  auto [ext, gm] = differentiate(fg, loss, {w, v});
  for (const auto& [name, port] : gm.param_grads) {
    CAPTURE(name);
    CHECK(ext.top().node(port.node).kind == OpKind::kGradAccum);
  }
  CHECK(ext.top().node(gm.param_grads[0].second.node).inputs.size() == 2);
  CHECK(ext.top().node(gm.param_grads[1].second.node).inputs.size() == 1);
}

TEST_CASE("chain gradient consumes upstream gradient and forward value") {
  Graph g;
  Port a = g.parameter("a", Shape{1, 1});
  Port b = g.unary(UnaryFn::kTanh, a);     // op2
  Port c = g.unary(UnaryFn::kSquare, b);   // op3
  FinalizedGraph fg = g.finalize({c});
  auto [ext, gm] = differentiate(fg, c, {a});
  const Graph& top = ext.top();
  // The node ids of the forward graph are kept.
  CHECK(top.node(b.node).kind == OpKind::kUnary);
  const Node* sq_grad = nullptr;
  for (const Node& n : top.nodes()) {
    if (n.kind == OpKind::kUnaryGrad && n.attrs.unary == UnaryFn::kSquare) sq_grad = &n;
  }
  REQUIRE(sq_grad != nullptr);
  REQUIRE(sq_grad->inputs.size() == 2);
  CHECK(sq_grad->inputs[1] == top.port(b.node, 0));
  CHECK(gm.port_grads.count(top.port(c.node, 0)) == 1);
  CHECK(sq_grad->inputs[0] == gm.port_grads.at(top.port(c.node, 0)));

  RunResult r = run(ext, {{"a", share(Tensor::scalar(0.4))}}, {gm.param_grads[0].second});
  const double t = std::tanh(0.4);
  CHECK(r.values[0].item() == doctest::Approx(2 * t * (1 - t * t)).epsilon(1e-14));
}

TEST_CASE("non-scalar loss and second-order differentiation are rejected") {
  Graph g;
  Port w = g.parameter("W", Shape{2, 2});
  Port y = g.unary(UnaryFn::kTanh, w);
  Port s = g.matmul(g.slice_rows(y, 0, 1), g.slice_rows(y, 1, 1), false, true);
  FinalizedGraph fg = g.finalize({y, s});
  try {
    differentiate(fg, y, {w});
    FAIL("expected BuildError");
  } catch (const BuildError& e) {
    CHECK(contains(e.what(), "1x1"));
  }
  auto [ext, gm] = differentiate(fg, s, {w});
  try {
    differentiate(ext, gm.loss, {ext.top().port(w.node)});
    FAIL("expected BuildError");
  } catch (const BuildError& e) {
    CHECK(contains(e.what(), "higher-order"));
  }
  CHECK_THROWS_AS(differentiate(fg, s, {y}), BuildError);
}

TEST_CASE("cond routes gradient to the taken branch and not to the predicate") {
  Graph g;
  Port x = g.placeholder("x", Shape{2, 1});
  Port w = g.parameter("W", Shape{1, 2});
  Port pred = g.parameter("P", Shape{1, 1});
  SubGraphRef then_ref = g.declare_subgraph("then", {{Shape{1, 1}}, {Shape{1, 1}}});
  SubGraphRef else_ref = g.declare_subgraph("else", {{Shape{1, 1}}, {Shape{1, 1}}});
  {
    Graph body = g.new_body();
    Port out = body.unary(UnaryFn::kTanh, body.arg(0, Shape{1, 1}));
    g.define_subgraph(then_ref, std::move(body), {out});
  }
  {
    Graph body = g.new_body();
    Port out = body.unary(UnaryFn::kNeg, body.arg(0, Shape{1, 1}));
    g.define_subgraph(else_ref, std::move(body), {out});
  }
  Port z = g.matmul(w, x);
  Port loss = g.cond(pred, then_ref, else_ref, {z})[0];
  FinalizedGraph fg = g.finalize({loss});
  auto [ext, gm] = differentiate(fg, loss, {w, pred});

  const Tensor X(2, 1, {0.5, -0.25});
  const Tensor W(1, 2, {0.8, 0.6});
  const double zv = 0.8 * 0.5 - 0.6 * 0.25;
  for (double p : {1.0, 0.0}) {
    CAPTURE(p);
    Feeds f{{"x", share(X)}, {"W", share(W)}, {"P", share(Tensor::scalar(p))}};
    StepResult s = run_training_step(ext, gm, f);
    const double dz = p != 0.0 ? 1 - std::tanh(zv) * std::tanh(zv) : -1.0;
    CHECK(s.loss == doctest::Approx(p != 0.0 ? std::tanh(zv) : -zv));
    CHECK(grad_of(s, "W")(0, 0) == doctest::Approx(dz * 0.5).epsilon(1e-14));
    CHECK(grad_of(s, "W")(0, 1) == doctest::Approx(dz * -0.25).epsilon(1e-14));
    CHECK(grad_of(s, "P").item() == 0.0);
    CHECK(s.stats.cache_left == 0);
  }
}

TEST_CASE("missing cache entries are runtime errors") {
  for (std::uint32_t port : {0u, kBranchRecordPort}) {
    Graph g;
    Port x = g.placeholder("x", Shape{1, 1});
    Port fwd = g.unary(UnaryFn::kTanh, x);
    Port r = g.cache_read(std::nullopt, fwd.node, port, Shape{1, 1});
    FinalizedGraph fg = g.finalize({r});
    try {
      run(fg, {{"x", share(Tensor::scalar(1.0))}}, {r});
      FAIL("expected ExecError");
    } catch (const ExecError& e) {
      CHECK(contains(e.what(), port == 0 ? "backward before forward" : "forward/backward mismatch"));
    }
  }
}

TEST_CASE("gradient subgraphs mirror recursive invocations") {
  for (ModelKind kind : {ModelKind::kTreeRNN, ModelKind::kRNTN, ModelKind::kTreeLSTM}) {
    CAPTURE(to_string(kind));
    ModelConfig cfg;
    cfg.kind = kind;
    cfg.d = 3;
    cfg.V = 5;
    cfg.C = 2;
    BuiltModel m = build_recursive(cfg);
    const FinalizedGraph& fg = m.graph;
    const SubGraphRef model = *m.model_subgraph;
    const std::string base = fg.subgraph(model).name;
    const SubGraphRef leaf = *fg.find_subgraph(base + "/leaf");
    const SubGraphRef internal = *fg.find_subgraph(base + "/internal");
    CHECK(count_invokes(fg, internal, model) == 2);
    CHECK(count_invokes(fg, leaf, model) == 0);

    Differentiator d(fg, m.param_ports);
    const SubGraphRef g_model = d.differentiate_subgraph(model);
    CHECK(d.differentiate_subgraph(model) == g_model);
    const SubGraphRef g_internal = d.differentiate_subgraph(internal);
    const SubGraphRef g_leaf = d.differentiate_subgraph(leaf);
    auto [ext, gm] = d.finish(m.loss);
    CHECK(gm.subgraph_grads.at(model.index) == g_model);
    CHECK(count_invokes(ext, g_internal, g_model) == 2);
    std::size_t leaf_invokes = 0;
    for (const Node& n : ext.subgraph(g_leaf).body->nodes()) leaf_invokes += n.kind == OpKind::kInvoke;
    CHECK(leaf_invokes == 0);
    // Gradient SubGraph inputs: one upstream per forward output, then the key.
    const auto& sig = ext.subgraph(g_model).signature;
    REQUIRE(sig.inputs.size() == fg.subgraph(model).signature.outputs.size() + 1);
    CHECK(is_key(sig.inputs.back()));
  }
}

TEST_CASE("differentiate is deterministic") {
  ModelConfig cfg;
  cfg.kind = ModelKind::kTreeLSTM;
  cfg.d = 3;
  cfg.V = 4;
  cfg.per_node_loss = true;
  for (ModelMode mode : {ModelMode::kRecursive, ModelMode::kIterative}) {
    cfg.capacity = 7;
    BuiltModel m = build_model(cfg, mode);
    auto a = differentiate(m.graph, m.loss, m.param_ports);
    auto b = differentiate(m.graph, m.loss, m.param_ports);
    CHECK(a.first.dump() == b.first.dump());
    REQUIRE(a.second.param_grads.size() == b.second.param_grads.size());
    for (std::size_t i = 0; i < a.second.param_grads.size(); ++i) {
      CHECK(a.second.param_grads[i].first == b.second.param_grads[i].first);
      CHECK(a.second.param_grads[i].second.node == b.second.param_grads[i].second.node);
    }
  }
}

TEST_CASE("leaf-only instance touches only the leaf path") {
  ModelConfig cfg;
  cfg.kind = ModelKind::kTreeRNN;
  cfg.d = 3;
  cfg.V = 5;
  cfg.C = 2;
  std::mt19937_64 rng(4);
  ModelParams params = init_params(cfg, rng);
  TreeInstance t;
  t.nodes = {TreeNode{1, 3, -1, -1}};
  t.root = 0;
  t.topo_order = {0};
  BuiltModel m = build_recursive(cfg);
  attach_gradients(m);
  StepResult s = run_training_step(m.train_graph, m.grads, make_feeds(m, t, param_feeds(params)));
  CHECK(s.grads.at("W") == Tensor::zeros({3, 6}));
  CHECK(s.grads.at("b") == Tensor::zeros({3, 1}));
  const Tensor& dE = s.grads.at("E");
  for (std::int64_t r = 0; r < cfg.V; ++r) {
    double norm = 0;
    for (std::int64_t c = 0; c < cfg.d; ++c) norm += std::abs(dE(r, c));
    if (r == 3) CHECK(norm > 0);
    else CHECK(norm == 0.0);
  }
}

TEST_CASE("weight sharing equals the unrolled static graph") {
  ModelConfig cfg;
  cfg.kind = ModelKind::kTreeRNN;
  cfg.d = 3;
  cfg.V = 5;
  cfg.C = 3;
  cfg.capacity = 7;
  std::mt19937_64 rng(11);
  ModelParams params = init_params(cfg, rng);
  for (auto& [name, t] : params) {
    if (name == "b" || name == "bs") t = random_init(t.shape(), 0.3, rng);
  }
  BuiltModel rec = build_recursive(cfg);
  BuiltModel it = build_iterative(cfg);
  attach_gradients(rec);
  attach_gradients(it);
  int checked = 0;
  for (TreeShape shape : {TreeShape::kBalanced, TreeShape::kLinear, TreeShape::kModerate}) {
    for (int leaves : {1, 2, 3, 4}) {
      if (shape == TreeShape::kBalanced && leaves == 3) continue;
      TreeInstance t = generate_synthetic(shape, leaves, cfg.V, cfg.C, rng);
      REQUIRE(t.size() <= 7);
      Unrolled u = unroll_treernn(cfg, t);
      auto [ext, gm] = differentiate(u.graph, u.loss, u.params);
      StepResult ref = run_training_step(ext, gm, param_feeds(params));
      for (BuiltModel* m : {&rec, &it}) {
        StepResult s = run_training_step(m->train_graph, m->grads, make_feeds(*m, t, param_feeds(params)));
        CHECK(s.loss == doctest::Approx(ref.loss).epsilon(1e-13));
        for (const auto& [name, g] : ref.grads) {
          CAPTURE(name);
          CHECK(max_abs_diff(s.grads.at(name), g) <= 1e-12);
        }
      }
      ++checked;
    }
  }
  CHECK(checked == 11);
}
