#include "rdg/models.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace rdg {

namespace names {
constexpr const char* kIsLeaf = "is_leaf";
constexpr const char* kToken = "token";
constexpr const char* kLeft = "left";
constexpr const char* kRight = "right";
constexpr const char* kLabel = "label";
constexpr const char* kRoot = "root";
constexpr const char* kOrder = "order";
constexpr const char* kActive = "active";
}  // namespace names

const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::kTreeRNN: return "treernn";
    case ModelKind::kRNTN: return "rntn";
    case ModelKind::kTreeLSTM: return "treelstm";
  }
  return "?";
}

const char* to_string(ModelMode m) { return m == ModelMode::kRecursive ? "recursive" : "iterative"; }

ModelKind parse_model_kind(const std::string& s) {
  if (s == "treernn") return ModelKind::kTreeRNN;
  if (s == "rntn") return ModelKind::kRNTN;
  if (s == "treelstm") return ModelKind::kTreeLSTM;
  throw std::invalid_argument("unknown model '" + s + "' (treernn|rntn|treelstm)");
}

ModelMode parse_model_mode(const std::string& s) {
  if (s == "recursive") return ModelMode::kRecursive;
  if (s == "iterative") return ModelMode::kIterative;
  throw std::invalid_argument("unknown mode '" + s + "' (recursive|iterative)");
}

namespace {

const char* kGates[] = {"i", "fl", "fr", "o", "u"};
const char* kLeafGates[] = {"i", "o", "u"};

std::string model_name(ModelKind k) {
  switch (k) {
    case ModelKind::kTreeRNN: return "TreeRNN";
    case ModelKind::kRNTN: return "RNTN";
    case ModelKind::kTreeLSTM: return "TreeLSTM";
  }
  return "?";
}

}  // namespace

std::vector<std::pair<std::string, Shape>> param_shapes(const ModelConfig& cfg) {
  const std::int64_t d = cfg.d;
  std::vector<std::pair<std::string, Shape>> out{{"E", {cfg.V, d}}};
  switch (cfg.kind) {
    case ModelKind::kRNTN: out.push_back({"V", {2 * d * d, 2 * d}}); [[fallthrough]];
    case ModelKind::kTreeRNN:
      out.push_back({"W", {d, 2 * d}});
      out.push_back({"b", {d, 1}});
      break;
    case ModelKind::kTreeLSTM:
      for (const char* g : kGates) out.push_back({std::string("U_") + g, {d, 2 * d}});
      for (const char* g : kGates) out.push_back({std::string("b_") + g, {d, 1}});
      for (const char* g : kLeafGates) out.push_back({std::string("Wl_") + g, {d, d}});
      break;
  }
  out.push_back({"Ws", {cfg.C, d}});
  out.push_back({"bs", {cfg.C, 1}});
  return out;
}

ModelParams init_params(const ModelConfig& cfg, std::mt19937_64& rng) {
  if (cfg.d < 1 || cfg.V < 1 || cfg.C < 1) throw std::invalid_argument("d, V and C must be at least 1");
  ModelParams out;
  for (const auto& [name, s] : param_shapes(cfg)) {
    double scale = std::sqrt(6.0 / static_cast<double>(s.rows + s.cols));
    if (name == "E") scale = 0.5;
    if (name == "V") scale = 0.05;
    out.emplace(name, random_init(s, scale, rng));
  }
  return out;
}

namespace {

// Builds cell math into any graph; parameter ports live in the top-level graph.
struct Net {
  ModelConfig cfg;
  std::map<std::string, Port> p;
  Port is_leaf, token, left, right, label, root;

  struct State {
    Port h;  // 1 x d
    std::optional<Port> c;
    std::optional<Port> loss;
  };

  bool lstm() const { return cfg.kind == ModelKind::kTreeLSTM; }

  Port affine(Graph& g, const std::string& w, Port x, const std::string& b) {
    return g.binary(BinaryFn::kAdd, g.matmul(p.at(w), x), p.at(b));
  }

  State leaf_cell(Graph& g, Port idx) {
    Port tok = g.gather_row(token, idx);
    Port e = g.gather_row(p.at("E"), tok);
    if (!lstm()) {
      g.mark_cell(e);
      return {e, std::nullopt, std::nullopt};
    }
    Port x = g.transpose(e);
    Port i = g.unary(UnaryFn::kSigmoid, affine(g, "Wl_i", x, "b_i"));
    Port o = g.unary(UnaryFn::kSigmoid, affine(g, "Wl_o", x, "b_o"));
    Port u = g.unary(UnaryFn::kTanh, affine(g, "Wl_u", x, "b_u"));
    Port c = g.binary(BinaryFn::kHadamard, i, u);
    Port h = g.binary(BinaryFn::kHadamard, o, g.unary(UnaryFn::kTanh, c));
    g.mark_cell(h);
    return {g.transpose(h), g.transpose(c), std::nullopt};
  }

  State internal_cell(Graph& g, const State& l, const State& r) {
    Port hc = g.concat_rows(g.transpose(l.h), g.transpose(r.h));
    if (!lstm()) {
      Port a = affine(g, "W", hc, "b");
      if (cfg.kind == ModelKind::kRNTN) {
        // Row k of the reshaped product is (V_k hc)^T, so multiplying by hc gives hc^T V_k hc.
        Port vh = g.reshape(g.matmul(p.at("V"), hc), Shape{cfg.d, 2 * cfg.d});
        a = g.binary(BinaryFn::kAdd, g.matmul(vh, hc), a);
      }
      Port h = g.unary(UnaryFn::kTanh, a);
      g.mark_cell(h);
      return {g.transpose(h), std::nullopt, std::nullopt};
    }
    auto gate = [&](const char* name, UnaryFn f) {
      return g.unary(f, affine(g, std::string("U_") + name, hc, std::string("b_") + name));
    };
    Port i = gate("i", UnaryFn::kSigmoid);
    Port fl = gate("fl", UnaryFn::kSigmoid);
    Port fr = gate("fr", UnaryFn::kSigmoid);
    Port o = gate("o", UnaryFn::kSigmoid);
    Port u = gate("u", UnaryFn::kTanh);
    Port c = g.binary(BinaryFn::kHadamard, i, u);
    c = g.binary(BinaryFn::kAdd, c, g.binary(BinaryFn::kHadamard, fl, g.transpose(*l.c)));
    c = g.binary(BinaryFn::kAdd, c, g.binary(BinaryFn::kHadamard, fr, g.transpose(*r.c)));
    Port h = g.binary(BinaryFn::kHadamard, o, g.unary(UnaryFn::kTanh, c));
    g.mark_cell(h);
    return {g.transpose(h), g.transpose(c), std::nullopt};
  }

  Port logits(Graph& g, Port h_row) { return g.transpose(affine(g, "Ws", g.transpose(h_row), "bs")); }

  Port node_loss(Graph& g, Port h_row, Port idx) {
    return g.softmax_xent(logits(g, h_row), g.gather_row(label, idx)).first;
  }

  std::vector<Shape> state_shapes() const {
    std::vector<Shape> s{{1, cfg.d}};
    if (lstm()) s.push_back({1, cfg.d});
    if (cfg.per_node_loss) s.push_back({1, 1});
    return s;
  }

  std::vector<Port> pack(const State& s) const {
    std::vector<Port> out{s.h};
    if (lstm()) out.push_back(*s.c);
    if (cfg.per_node_loss) out.push_back(*s.loss);
    return out;
  }

  State unpack(const std::vector<Port>& v) const {
    State s{v[0], std::nullopt, std::nullopt};
    std::size_t k = 1;
    if (lstm()) s.c = v[k++];
    if (cfg.per_node_loss) s.loss = v[k++];
    return s;
  }
};

Net declare_inputs(Graph& top, const ModelConfig& cfg, BuiltModel& m) {
  Net net;
  net.cfg = cfg;
  const Shape table{kAnyRows, 1};
  net.is_leaf = top.placeholder(names::kIsLeaf, table);
  net.token = top.placeholder(names::kToken, table);
  net.left = top.placeholder(names::kLeft, table);
  net.right = top.placeholder(names::kRight, table);
  net.label = top.placeholder(names::kLabel, table);
  net.root = top.placeholder(names::kRoot, Shape{1, 1});
  for (const auto& [name, shape] : param_shapes(cfg)) {
    Port p = top.parameter(name, shape);
    net.p.emplace(name, p);
    m.param_names.push_back(name);
    m.param_ports.push_back(p);
  }
  return net;
}

void finish(BuiltModel& m, Graph& top, Net& net, const Net::State& root_state) {
  Port logits = net.logits(top, root_state.h);
  Port loss;
  if (net.cfg.per_node_loss) {
    loss = *root_state.loss;
  } else {
    loss = top.softmax_xent(logits, top.gather_row(net.label, net.root)).first;
  }
  m.graph = top.finalize({loss, logits});
  m.loss = loss;
  m.logits = logits;
}

void check_config(const ModelConfig& cfg) {
  if (cfg.d < 1 || cfg.V < 1 || cfg.C < 1) throw std::invalid_argument("d, V and C must be at least 1");
}

}  // namespace

BuiltModel build_recursive(const ModelConfig& cfg) {
  check_config(cfg);
  BuiltModel m;
  m.cfg = cfg;
  m.mode = ModelMode::kRecursive;
  Graph top;
  Net net = declare_inputs(top, cfg, m);
  const std::string name = model_name(cfg.kind);
  const Signature sig{{Shape{1, 1}}, net.state_shapes()};

  SubGraphRef model = top.declare_subgraph(name, sig);
  SubGraphRef leaf = top.declare_subgraph(name + "/leaf", sig);
  SubGraphRef internal = top.declare_subgraph(name + "/internal", sig);

  {
    Graph b = top.new_body();
    Port idx = b.arg(0, Shape{1, 1});
    auto outs = b.cond(b.gather_row(net.is_leaf, idx), leaf, internal, {idx});
    top.define_subgraph(model, std::move(b), outs);
  }
  {
    Graph b = top.new_body();
    Port idx = b.arg(0, Shape{1, 1});
    Net::State s = net.leaf_cell(b, idx);
    if (cfg.per_node_loss) s.loss = net.node_loss(b, s.h, idx);
    top.define_subgraph(leaf, std::move(b), net.pack(s));
  }
  {
    Graph b = top.new_body();
    Port idx = b.arg(0, Shape{1, 1});
    Net::State l = net.unpack(b.invoke(model, {b.gather_row(net.left, idx)}));
    Net::State r = net.unpack(b.invoke(model, {b.gather_row(net.right, idx)}));
    Net::State s = net.internal_cell(b, l, r);
    if (cfg.per_node_loss) {
      Port sub = b.binary(BinaryFn::kAdd, *l.loss, *r.loss);
      s.loss = b.binary(BinaryFn::kAdd, net.node_loss(b, s.h, idx), sub);
    }
    top.define_subgraph(internal, std::move(b), net.pack(s));
  }

  Net::State root = net.unpack(top.invoke(model, {net.root}));
  finish(m, top, net, root);
  m.model_subgraph = model;
  return m;
}

BuiltModel build_iterative(const ModelConfig& cfg) {
  check_config(cfg);
  if (cfg.capacity < 1) throw std::invalid_argument("capacity must be at least 1");
  BuiltModel m;
  m.cfg = cfg;
  m.mode = ModelMode::kIterative;
  Graph top;
  Net net = declare_inputs(top, cfg, m);
  const std::int64_t cap = cfg.capacity;
  const Shape tab{cap, cfg.d};
  Port order = top.placeholder(names::kOrder, Shape{cap, 1});
  Port active = top.placeholder(names::kActive, Shape{cap, 1});
  const std::string name = model_name(cfg.kind);

  // Carried state: h table, c table (TreeLSTM), running loss (per-node loss).
  std::vector<Shape> carried{tab};
  if (net.lstm()) carried.push_back(tab);
  if (cfg.per_node_loss) carried.push_back(Shape{1, 1});
  std::vector<Shape> step_in = carried;
  step_in.push_back(Shape{1, 1});
  std::vector<Shape> node_in{tab};
  if (net.lstm()) node_in.push_back(tab);
  node_in.push_back(Shape{1, 1});

  SubGraphRef step = top.declare_subgraph(name + "/step", {step_in, carried});
  SubGraphRef skip = top.declare_subgraph(name + "/skip", {step_in, carried});
  SubGraphRef leaf = top.declare_subgraph(name + "/leaf", {node_in, net.state_shapes()});
  SubGraphRef internal = top.declare_subgraph(name + "/internal", {node_in, net.state_shapes()});

  auto args = [&](Graph& b, const std::vector<Shape>& shapes) {
    std::vector<Port> a;
    for (std::size_t i = 0; i < shapes.size(); ++i) a.push_back(b.arg(i, shapes[i]));
    return a;
  };
  {
    Graph b = top.new_body();
    auto a = args(b, node_in);
    Port idx = a.back();
    Net::State s = net.leaf_cell(b, idx);
    if (cfg.per_node_loss) s.loss = net.node_loss(b, s.h, idx);
    top.define_subgraph(leaf, std::move(b), net.pack(s));
  }
  {
    Graph b = top.new_body();
    auto a = args(b, node_in);
    Port idx = a.back();
    auto child = [&](Port which) {
      Port ci = b.gather_row(which, idx);
      Net::State s{b.gather_row(a[0], ci), std::nullopt, std::nullopt};
      if (net.lstm()) s.c = b.gather_row(a[1], ci);
      return s;
    };
    Net::State l = child(net.left);
    Net::State r = child(net.right);
    Net::State s = net.internal_cell(b, l, r);
    if (cfg.per_node_loss) s.loss = net.node_loss(b, s.h, idx);
    top.define_subgraph(internal, std::move(b), net.pack(s));
  }
  {
    Graph b = top.new_body();
    auto a = args(b, step_in);
    Port idx = b.gather_row(order, a.back());
    std::vector<Port> node_args{a[0]};
    if (net.lstm()) node_args.push_back(a[1]);
    node_args.push_back(idx);
    Net::State s = net.unpack(b.cond(b.gather_row(net.is_leaf, idx), leaf, internal, node_args));
    std::vector<Port> outs{b.set_row(a[0], idx, s.h)};
    if (net.lstm()) outs.push_back(b.set_row(a[1], idx, *s.c));
    if (cfg.per_node_loss) outs.push_back(b.binary(BinaryFn::kAdd, a[outs.size()], *s.loss));
    top.define_subgraph(step, std::move(b), outs);
  }
  {
    Graph b = top.new_body();
    auto a = args(b, step_in);
    a.pop_back();
    top.define_subgraph(skip, std::move(b), a);
  }

  std::vector<Port> state{top.zeros(tab)};
  if (net.lstm()) state.push_back(top.zeros(tab));
  if (cfg.per_node_loss) state.push_back(top.constant(Tensor::scalar(0.0)));
  for (std::int64_t j = 0; j < cap; ++j) {
    Port jp = top.constant(Tensor::scalar(static_cast<double>(j)));
    std::vector<Port> in = state;
    in.push_back(jp);
    state = top.cond(top.gather_row(active, jp), step, skip, in);
  }
  Net::State root{top.gather_row(state[0], net.root), std::nullopt, std::nullopt};
  if (cfg.per_node_loss) root.loss = state.back();
  finish(m, top, net, root);
  return m;
}

BuiltModel build_model(const ModelConfig& cfg, ModelMode mode) {
  return mode == ModelMode::kRecursive ? build_recursive(cfg) : build_iterative(cfg);
}

void attach_gradients(BuiltModel& m) {
  if (m.train_graph.valid()) return;
  auto [g, gm] = differentiate(m.graph, m.loss, m.param_ports);
  m.train_graph = std::move(g);
  m.grads = std::move(gm);
}

Feeds param_feeds(const ModelParams& params) {
  Feeds f;
  for (const auto& [name, t] : params) f.emplace(name, share(t));
  return f;
}

Feeds make_feeds(const BuiltModel& m, const TreeInstance& t, const Feeds& params) {
  const int n = t.size();
  Tensor is_leaf(n, 1), token(n, 1), left(n, 1), right(n, 1), label(n, 1);
  for (int i = 0; i < n; ++i) {
    const TreeNode& nd = t.nodes[i];
    is_leaf(i, 0) = nd.is_leaf() ? 1.0 : 0.0;
    token(i, 0) = nd.is_leaf() ? nd.token : 0;
    left(i, 0) = nd.is_leaf() ? 0 : nd.left;
    right(i, 0) = nd.is_leaf() ? 0 : nd.right;
    label(i, 0) = nd.label;
    if (nd.is_leaf() && (nd.token < 0 || nd.token >= m.cfg.V)) {
      throw std::out_of_range("token id " + std::to_string(nd.token) + " outside vocabulary of " + std::to_string(m.cfg.V));
    }
    if (nd.label < 0 || nd.label >= m.cfg.C) {
      throw std::out_of_range("label " + std::to_string(nd.label) + " outside " + std::to_string(m.cfg.C) + " classes");
    }
  }
  Feeds f = params;
  f[names::kIsLeaf] = share(std::move(is_leaf));
  f[names::kToken] = share(std::move(token));
  f[names::kLeft] = share(std::move(left));
  f[names::kRight] = share(std::move(right));
  f[names::kLabel] = share(std::move(label));
  f[names::kRoot] = share(Tensor::scalar(t.root));
  if (m.mode == ModelMode::kIterative) {
    const int cap = m.cfg.capacity;
    if (n > cap) {
      throw std::length_error("instance of " + std::to_string(n) + " nodes exceeds the iterative capacity of " +
                              std::to_string(cap));
    }
    Tensor order(cap, 1), active(cap, 1);
    for (int j = 0; j < n; ++j) {
      order(j, 0) = t.topo_order[j];
      active(j, 0) = 1.0;
    }
    f[names::kOrder] = share(std::move(order));
    f[names::kActive] = share(std::move(active));
  }
  return f;
}

int argmax(const Tensor& row) {
  int best = 0;
  for (std::int64_t c = 1; c < row.cols(); ++c) {
    if (row(0, c) > row(0, best)) best = static_cast<int>(c);
  }
  return best;
}

ForwardResult forward(Executor& ex, const BuiltModel& m, const TreeInstance& t, const ModelParams& params,
                      const RunOptions& opts) {
  auto r = ex.run(m.graph, make_feeds(m, t, param_feeds(params)), {m.loss, m.logits}, opts);
  return {r.values[0].item(), r.values[1], argmax(r.values[1])};
}

namespace {

// Plain column-vector math for the oracle, deliberately separate from the Tensor kernels.
using Vec = std::vector<double>;

struct Mat {
  const Tensor* t;
  Vec mul(const Vec& x) const {
    Vec y(static_cast<std::size_t>(t->rows()), 0.0);
    for (std::int64_t r = 0; r < t->rows(); ++r) {
      double s = 0.0;
      for (std::int64_t c = 0; c < t->cols(); ++c) s += (*t)(r, c) * x[c];
      y[r] = s;
    }
    return y;
  }
  Vec mul_t(const Vec& y) const {
    Vec x(static_cast<std::size_t>(t->cols()), 0.0);
    for (std::int64_t r = 0; r < t->rows(); ++r) {
      for (std::int64_t c = 0; c < t->cols(); ++c) x[c] += (*t)(r, c) * y[r];
    }
    return x;
  }
};

Vec vadd(Vec a, const Vec& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

Vec col(const Tensor& t) { return Vec(t.data().begin(), t.data().end()); }

Vec sig(Vec a) {
  for (double& x : a) x = 1.0 / (1.0 + std::exp(-x));
  return a;
}

Vec tanhv(Vec a) {
  for (double& x : a) x = std::tanh(x);
  return a;
}

void outer_add(Tensor& g, const Vec& a, const Vec& b) {
  for (std::int64_t r = 0; r < g.rows(); ++r) {
    for (std::int64_t c = 0; c < g.cols(); ++c) g(r, c) += a[r] * b[c];
  }
}

void vec_add(Tensor& g, const Vec& a) {
  for (std::int64_t r = 0; r < g.rows(); ++r) g(r, 0) += a[r];
}

struct OracleNode {
  Vec x, hc, h, c, i, fl, fr, o, u;
};

class Oracle {
 public:
  Oracle(const ModelConfig& cfg, const ModelParams& p, const TreeInstance& t) : cfg_(cfg), p_(p), t_(t) {
    for (const auto& [name, s] : param_shapes(cfg)) {
      auto it = p.find(name);
      if (it == p.end() || it->second.shape() != s) throw std::invalid_argument("oracle: bad parameter '" + name + "'");
      grads_.emplace(name, Tensor(s));
    }
    nodes_.resize(t.nodes.size());
  }

  OracleResult run() {
    fwd(t_.root);
    OracleResult r;
    std::vector<Vec> dh(nodes_.size(), Vec(cfg_.d, 0.0)), dc(nodes_.size(), Vec(cfg_.d, 0.0));
    for (int i = 0; i < t_.size(); ++i) {
      if (!cfg_.per_node_loss && i != t_.root) continue;
      r.loss += classify(i, dh[i], i == t_.root ? &r.logits : nullptr);
    }
    if (cfg_.per_node_loss) classify_logits(t_.root, r.logits);
    bwd(t_.root, dh, dc);
    r.grads = std::move(grads_);
    r.root_h = Tensor(1, cfg_.d, nodes_[t_.root].h);
    return r;
  }

 private:
  const Tensor& P(const std::string& n) const { return p_.at(n); }
  Mat M(const std::string& n) const { return Mat{&p_.at(n)}; }
  Vec B(const std::string& n) const { return col(p_.at(n)); }
  bool lstm() const { return cfg_.kind == ModelKind::kTreeLSTM; }

  void fwd(int i) {
    const TreeNode& nd = t_.nodes[i];
    OracleNode& s = nodes_[i];
    const int d = cfg_.d;
    if (nd.is_leaf()) {
      const Tensor& E = P("E");
      s.x.assign(d, 0.0);
      for (int k = 0; k < d; ++k) s.x[k] = E(nd.token, k);
      if (!lstm()) {
        s.h = s.x;
        return;
      }
      s.i = sig(vadd(M("Wl_i").mul(s.x), B("b_i")));
      s.o = sig(vadd(M("Wl_o").mul(s.x), B("b_o")));
      s.u = tanhv(vadd(M("Wl_u").mul(s.x), B("b_u")));
      s.c.assign(d, 0.0);
      s.h.assign(d, 0.0);
      for (int k = 0; k < d; ++k) {
        s.c[k] = s.i[k] * s.u[k];
        s.h[k] = s.o[k] * std::tanh(s.c[k]);
      }
      return;
    }
    fwd(nd.left);
    fwd(nd.right);
    const OracleNode& l = nodes_[nd.left];
    const OracleNode& r = nodes_[nd.right];
    s.hc = l.h;
    s.hc.insert(s.hc.end(), r.h.begin(), r.h.end());
    if (!lstm()) {
      Vec a = vadd(M("W").mul(s.hc), B("b"));
      if (cfg_.kind == ModelKind::kRNTN) {
        for (int k = 0; k < d; ++k) a[k] += bilinear(k, s.hc);
      }
      s.h = tanhv(a);
      return;
    }
    s.i = sig(vadd(M("U_i").mul(s.hc), B("b_i")));
    s.fl = sig(vadd(M("U_fl").mul(s.hc), B("b_fl")));
    s.fr = sig(vadd(M("U_fr").mul(s.hc), B("b_fr")));
    s.o = sig(vadd(M("U_o").mul(s.hc), B("b_o")));
    s.u = tanhv(vadd(M("U_u").mul(s.hc), B("b_u")));
    s.c.assign(d, 0.0);
    s.h.assign(d, 0.0);
    for (int k = 0; k < d; ++k) {
      s.c[k] = s.i[k] * s.u[k] + s.fl[k] * l.c[k] + s.fr[k] * r.c[k];
      s.h[k] = s.o[k] * std::tanh(s.c[k]);
    }
  }

  // hc^T V_k hc with V_k the k-th 2d x 2d block of rows of V.
  double bilinear(int k, const Vec& hc) const {
    const Tensor& V = P("V");
    const int n = 2 * cfg_.d;
    double s = 0.0;
    for (int a = 0; a < n; ++a) {
      for (int b = 0; b < n; ++b) s += hc[a] * V(k * n + a, b) * hc[b];
    }
    return s;
  }

  void classify_logits(int i, Tensor& out) {
    Vec z = vadd(M("Ws").mul(nodes_[i].h), B("bs"));
    out = Tensor(1, cfg_.C, z);
  }

  double classify(int i, Vec& dh, Tensor* logits_out) {
    Vec z = vadd(M("Ws").mul(nodes_[i].h), B("bs"));
    if (logits_out) *logits_out = Tensor(1, cfg_.C, z);
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double total = 0.0;
    for (double v : z) total += std::exp(v - mx);
    const int label = t_.nodes[i].label;
    const double loss = -(z[label] - mx - std::log(total));
    Vec dz(z.size());
    for (std::size_t k = 0; k < z.size(); ++k) dz[k] = std::exp(z[k] - mx) / total - (static_cast<int>(k) == label);
    outer_add(grads_.at("Ws"), dz, nodes_[i].h);
    vec_add(grads_.at("bs"), dz);
    dh = vadd(dh, M("Ws").mul_t(dz));
    return loss;
  }

  void bwd(int i, std::vector<Vec>& dh_all, std::vector<Vec>& dc_all) {
    const TreeNode& nd = t_.nodes[i];
    const OracleNode& s = nodes_[i];
    const int d = cfg_.d;
    const Vec& dh = dh_all[i];
    Vec dx;  // grad wrt leaf input or wrt hc
    if (!lstm()) {
      if (nd.is_leaf()) {
        dx = dh;
      } else {
        Vec da(d);
        for (int k = 0; k < d; ++k) da[k] = dh[k] * (1.0 - s.h[k] * s.h[k]);
        outer_add(grads_.at("W"), da, s.hc);
        vec_add(grads_.at("b"), da);
        dx = M("W").mul_t(da);
        if (cfg_.kind == ModelKind::kRNTN) {
          const Tensor& V = P("V");
          Tensor& gV = grads_.at("V");
          const int n = 2 * d;
          for (int k = 0; k < d; ++k) {
            for (int a = 0; a < n; ++a) {
              for (int b = 0; b < n; ++b) {
                gV(k * n + a, b) += da[k] * s.hc[a] * s.hc[b];
                dx[a] += da[k] * V(k * n + a, b) * s.hc[b];
                dx[b] += da[k] * V(k * n + a, b) * s.hc[a];
              }
            }
          }
        }
      }
    } else {
      Vec dc = dc_all[i];
      Vec di(d), dfl(d), dfr(d), dout(d), du(d);
      for (int k = 0; k < d; ++k) {
        const double tc = std::tanh(s.c[k]);
        dout[k] = dh[k] * tc * s.o[k] * (1.0 - s.o[k]);
        dc[k] += dh[k] * s.o[k] * (1.0 - tc * tc);
        di[k] = dc[k] * s.u[k] * s.i[k] * (1.0 - s.i[k]);
        du[k] = dc[k] * s.i[k] * (1.0 - s.u[k] * s.u[k]);
      }
      if (nd.is_leaf()) {
        outer_add(grads_.at("Wl_i"), di, s.x);
        outer_add(grads_.at("Wl_o"), dout, s.x);
        outer_add(grads_.at("Wl_u"), du, s.x);
        vec_add(grads_.at("b_i"), di);
        vec_add(grads_.at("b_o"), dout);
        vec_add(grads_.at("b_u"), du);
        dx = vadd(vadd(M("Wl_i").mul_t(di), M("Wl_o").mul_t(dout)), M("Wl_u").mul_t(du));
      } else {
        const OracleNode& l = nodes_[nd.left];
        const OracleNode& r = nodes_[nd.right];
        for (int k = 0; k < d; ++k) {
          dfl[k] = dc[k] * l.c[k] * s.fl[k] * (1.0 - s.fl[k]);
          dfr[k] = dc[k] * r.c[k] * s.fr[k] * (1.0 - s.fr[k]);
          dc_all[nd.left][k] += dc[k] * s.fl[k];
          dc_all[nd.right][k] += dc[k] * s.fr[k];
        }
        const std::pair<const char*, const Vec*> parts[] = {{"i", &di}, {"fl", &dfl}, {"fr", &dfr}, {"o", &dout}, {"u", &du}};
        dx.assign(2 * d, 0.0);
        for (const auto& [g, da] : parts) {
          outer_add(grads_.at(std::string("U_") + g), *da, s.hc);
          vec_add(grads_.at(std::string("b_") + g), *da);
          dx = vadd(dx, M(std::string("U_") + g).mul_t(*da));
        }
      }
    }
    if (nd.is_leaf()) {
      Tensor& gE = grads_.at("E");
      for (int k = 0; k < d; ++k) gE(nd.token, k) += dx[k];
      return;
    }
    for (int k = 0; k < d; ++k) {
      dh_all[nd.left][k] += dx[k];
      dh_all[nd.right][k] += dx[d + k];
    }
    bwd(nd.left, dh_all, dc_all);
    bwd(nd.right, dh_all, dc_all);
  }

  ModelConfig cfg_;
  const ModelParams& p_;
  const TreeInstance& t_;
  std::vector<OracleNode> nodes_;
  std::map<std::string, Tensor> grads_;
};

}  // namespace

OracleResult oracle_forward_backward(const ModelConfig& cfg, const ModelParams& params, const TreeInstance& t) {
  return Oracle(cfg, params, t).run();
}

std::string checkpoint_json(const Checkpoint& ck) {
  const ModelConfig& cfg = ck.cfg;
  nlohmann::ordered_json j;
  j["format"] = "rdg-ckpt-1";
  j["kind"] = to_string(cfg.kind);
  j["d"] = cfg.d;
  j["V"] = cfg.V;
  j["C"] = cfg.C;
  j["per_node_loss"] = cfg.per_node_loss;
  j["vocab"] = ck.vocab;
  nlohmann::ordered_json ps = nlohmann::ordered_json::object();
  for (const auto& [name, t] : ck.params) {
    ps[name] = {{"rows", t.rows()}, {"cols", t.cols()}, {"data", std::vector<double>(t.data().begin(), t.data().end())}};
  }
  j["params"] = std::move(ps);
  return j.dump();
}

Checkpoint parse_checkpoint(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "rdg-ckpt-1") throw std::runtime_error("unsupported checkpoint format");
    ModelConfig cfg;
    cfg.kind = parse_model_kind(j.at("kind").get<std::string>());
    cfg.d = j.at("d").get<int>();
    cfg.V = j.at("V").get<int>();
    cfg.C = j.at("C").get<int>();
    cfg.per_node_loss = j.value("per_node_loss", false);
    ModelParams params;
    std::string diffs;
    const auto& ps = j.at("params");
    for (const auto& [name, shape] : param_shapes(cfg)) {
      if (!ps.contains(name)) {
        diffs += "  missing " + name + " (" + shape.str() + ")\n";
        continue;
      }
      const auto& e = ps.at(name);
      Shape got{e.at("rows").get<std::int64_t>(), e.at("cols").get<std::int64_t>()};
      if (got != shape) {
        diffs += "  " + name + ": checkpoint " + got.str() + ", model " + shape.str() + "\n";
        continue;
      }
      params.emplace(name, Tensor(got.rows, got.cols, e.at("data").get<std::vector<double>>()));
    }
    for (const auto& [name, e] : ps.items()) {
      if (!params.contains(name) && diffs.find(" " + name) == std::string::npos) diffs += "  unexpected " + name + "\n";
    }
    if (!diffs.empty()) throw std::runtime_error("checkpoint does not match the model:\n" + diffs);
    std::vector<std::string> vocab = j.value("vocab", std::vector<std::string>{});
    if (!vocab.empty() && static_cast<int>(vocab.size()) != cfg.V) {
      throw std::runtime_error("checkpoint vocabulary has " + std::to_string(vocab.size()) + " tokens but V = " +
                               std::to_string(cfg.V));
    }
    return {cfg, std::move(params), std::move(vocab)};
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
  out << checkpoint_json(ck) << '\n';
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

}  // namespace rdg
