#include "rdg/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <functional>
#include <sstream>

namespace rdg {

bool operator==(const TreeInstance& a, const TreeInstance& b) {
  if (a.root != b.root || a.topo_order != b.topo_order || a.nodes.size() != b.nodes.size()) return false;
  for (std::size_t i = 0; i < a.nodes.size(); ++i) {
    const TreeNode& x = a.nodes[i];
    const TreeNode& y = b.nodes[i];
    if (x.label != y.label || x.token != y.token || x.left != y.left || x.right != y.right) return false;
  }
  return true;
}

void validate(const TreeInstance& t) {
  const int n = t.size();
  if (n == 0) throw std::invalid_argument("empty tree");
  if (n % 2 == 0) throw std::invalid_argument("binary tree must have an odd node count, got " + std::to_string(n));
  if (t.root < 0 || t.root >= n) throw std::invalid_argument("root index out of range");
  std::vector<int> parents(n, 0);
  for (const TreeNode& nd : t.nodes) {
    if (nd.is_leaf()) {
      if (nd.right >= 0 || nd.token < 0) throw std::invalid_argument("malformed leaf");
      continue;
    }
    if (nd.right < 0 || nd.left >= n || nd.right >= n) throw std::invalid_argument("malformed internal node");
    ++parents[nd.left];
    ++parents[nd.right];
  }
  for (int i = 0; i < n; ++i) {
    if (parents[i] != (i == t.root ? 0 : 1)) throw std::invalid_argument("node " + std::to_string(i) + " is not in the tree exactly once");
  }
  if (static_cast<int>(t.topo_order.size()) != n) throw std::invalid_argument("topo_order has the wrong length");
  std::vector<int> pos(n, -1);
  for (int k = 0; k < n; ++k) {
    const int i = t.topo_order[k];
    if (i < 0 || i >= n || pos[i] >= 0) throw std::invalid_argument("topo_order is not a permutation");
    pos[i] = k;
  }
  for (int i = 0; i < n; ++i) {
    const TreeNode& nd = t.nodes[i];
    if (!nd.is_leaf() && (pos[nd.left] > pos[i] || pos[nd.right] > pos[i])) {
      throw std::invalid_argument("topo_order puts node " + std::to_string(i) + " before a child");
    }
  }
}

Vocab::Vocab() { add(kUnk); }

Vocab::Vocab(const std::vector<std::string>& tokens) {
  for (const auto& t : tokens) add(t);
  unk_id_ = add(kUnk);
}

int Vocab::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? unk_id_ : it->second;
}

int Vocab::add(std::string_view token) {
  auto [it, inserted] = ids_.emplace(std::string(token), static_cast<int>(tokens_.size()));
  if (inserted) tokens_.emplace_back(token);
  return it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id " + std::to_string(id) + " outside vocab");
  return tokens_[id];
}

bool Vocab::contains(std::string_view token) const { return ids_.contains(std::string(token)); }

namespace {

class SexprParser {
 public:
  SexprParser(std::string_view s, Vocab& vocab, bool grow) : s_(s), vocab_(vocab), grow_(grow) {}

  TreeInstance parse() {
    TreeInstance t;
    skip_ws();
    t.root = node(t);
    skip_ws();
    if (pos_ != s_.size()) throw ParseError("trailing characters after tree", pos_);
    t.topo_order.resize(t.nodes.size());
    for (int i = 0; i < t.size(); ++i) t.topo_order[i] = i;
    return t;
  }

 private:
  void skip_ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }

  void expect(char c) {
    skip_ws();
    if (pos_ >= s_.size() || s_[pos_] != c) {
      throw ParseError(std::string("expected '") + c + "'", pos_);
    }
    ++pos_;
  }

  std::string_view atom() {
    skip_ws();
    const std::size_t start = pos_;
    while (pos_ < s_.size() && !std::isspace(static_cast<unsigned char>(s_[pos_])) && s_[pos_] != '(' && s_[pos_] != ')') {
      ++pos_;
    }
    if (pos_ == start) throw ParseError("expected a token", pos_);
    return s_.substr(start, pos_ - start);
  }

  int label() {
    skip_ws();
    const std::size_t at = pos_;
    std::string_view a = atom();
    int v = 0;
    for (char c : a) {
      if (!std::isdigit(static_cast<unsigned char>(c)) || v > 1000000) throw ParseError("bad label '" + std::string(a) + "'", at);
      v = v * 10 + (c - '0');
    }
    return v;
  }

  int node(TreeInstance& t) {
    if (++depth_ > 100000) throw ParseError("tree too deep", pos_);
    expect('(');
    TreeNode n;
    n.label = label();
    skip_ws();
    if (pos_ < s_.size() && s_[pos_] == '(') {
      n.left = node(t);
      skip_ws();
      if (pos_ >= s_.size() || s_[pos_] != '(') throw ParseError("internal node needs two subtrees", pos_);
      n.right = node(t);
    } else {
      std::string_view tok = atom();
      n.token = grow_ ? vocab_.add(tok) : vocab_.id(tok);
    }
    skip_ws();
    if (pos_ < s_.size() && s_[pos_] != ')') throw ParseError("node has more than two children", pos_);
    expect(')');
    --depth_;
    t.nodes.push_back(n);
    return t.size() - 1;
  }

  std::string_view s_;
  Vocab& vocab_;
  bool grow_;
  std::size_t pos_ = 0;
  int depth_ = 0;
};

void write_node(std::ostringstream& os, const TreeInstance& t, int i, const Vocab& vocab) {
  const TreeNode& n = t.nodes[i];
  os << '(' << n.label << ' ';
  if (n.is_leaf()) {
    os << vocab.token(n.token);
  } else {
    write_node(os, t, n.left, vocab);
    os << ' ';
    write_node(os, t, n.right, vocab);
  }
  os << ')';
}

// Renumbers a tree so children precede parents (post-order) and fills labels.
TreeInstance finish_tree(const std::vector<TreeNode>& raw, int root, int n_classes) {
  TreeInstance t;
  std::vector<int> sums;
  std::function<int(int)> visit = [&](int i) -> int {
    TreeNode n = raw[i];
    int sum = 0;
    if (!n.is_leaf()) {
      const int l = visit(n.left);
      const int r = visit(n.right);
      n.left = l;
      n.right = r;
      sum = sums[l] + sums[r];
    } else {
      sum = n.token;
    }
    n.label = sum % n_classes;
    t.nodes.push_back(n);
    sums.push_back(sum);
    return t.size() - 1;
  };
  t.root = visit(root);
  t.topo_order.resize(t.nodes.size());
  for (int i = 0; i < t.size(); ++i) t.topo_order[i] = i;
  return t;
}

}  // namespace

TreeInstance parse_sexpr(std::string_view line, Vocab& vocab, bool grow) { return SexprParser(line, vocab, grow).parse(); }

std::string serialize(const TreeInstance& t, const Vocab& vocab) {
  std::ostringstream os;
  write_node(os, t, t.root, vocab);
  return os.str();
}

const char* to_string(TreeShape s) {
  switch (s) {
    case TreeShape::kBalanced: return "balanced";
    case TreeShape::kModerate: return "moderate";
    case TreeShape::kLinear: return "linear";
  }
  return "?";
}

TreeShape parse_shape(std::string_view s) {
  if (s == "balanced") return TreeShape::kBalanced;
  if (s == "moderate") return TreeShape::kModerate;
  if (s == "linear") return TreeShape::kLinear;
  throw std::invalid_argument("unknown tree shape '" + std::string(s) + "'");
}

TreeInstance generate_synthetic(TreeShape shape, int n_leaves, int vocab_size, int n_classes, std::mt19937_64& rng) {
  if (n_leaves < 1) throw std::invalid_argument("n_leaves must be at least 1");
  if (vocab_size < 1 || n_classes < 1) throw std::invalid_argument("vocab_size and n_classes must be at least 1");
  if (shape == TreeShape::kBalanced && (n_leaves & (n_leaves - 1)) != 0) {
    throw std::invalid_argument("balanced trees need a power-of-two leaf count, got " + std::to_string(n_leaves));
  }
  std::uniform_int_distribution<int> tok(0, vocab_size - 1);
  std::vector<TreeNode> raw;
  auto leaf = [&] {
    TreeNode n;
    n.token = tok(rng);
    raw.push_back(n);
    return static_cast<int>(raw.size()) - 1;
  };
  auto join = [&](int l, int r) {
    TreeNode n;
    n.left = l;
    n.right = r;
    raw.push_back(n);
    return static_cast<int>(raw.size()) - 1;
  };
  int root = 0;
  switch (shape) {
    case TreeShape::kBalanced: {
      std::function<int(int)> build = [&](int leaves) -> int {
        if (leaves == 1) return leaf();
        const int l = build(leaves / 2);
        const int r = build(leaves / 2);
        return join(l, r);
      };
      root = build(n_leaves);
      break;
    }
    case TreeShape::kLinear: {
      root = leaf();
      for (int i = 1; i < n_leaves; ++i) {
        const int r = leaf();
        root = join(root, r);
      }
      break;
    }
    case TreeShape::kModerate: {
      // Remy's algorithm: uniform over binary tree shapes with n_leaves leaves.
      root = leaf();
      std::vector<int> parent{-1};
      for (int i = 1; i < n_leaves; ++i) {
        std::uniform_int_distribution<int> pick(0, static_cast<int>(raw.size()) - 1);
        const int target = pick(rng);
        const int fresh = leaf();
        parent.push_back(-1);
        const bool fresh_left = std::bernoulli_distribution(0.5)(rng);
        const int up = parent[target];
        const int joined = fresh_left ? join(fresh, target) : join(target, fresh);
        parent.push_back(up);
        parent[target] = joined;
        parent[fresh] = joined;
        if (up < 0) {
          root = joined;
        } else if (raw[up].left == target) {
          raw[up].left = joined;
        } else {
          raw[up].right = joined;
        }
      }
      break;
    }
  }
  return finish_tree(raw, root, n_classes);
}

Vocab synthetic_vocab(int vocab_size) {
  std::vector<std::string> tokens;
  for (int i = 0; i < vocab_size; ++i) tokens.push_back("w" + std::to_string(i));
  return Vocab(tokens);
}

TreeStats tree_stats(const TreeInstance& t) {
  TreeStats s;
  s.n_nodes = t.size();
  std::vector<int> level_count;
  std::vector<std::pair<int, int>> stack{{t.root, 0}};
  while (!stack.empty()) {
    auto [i, d] = stack.back();
    stack.pop_back();
    if (static_cast<int>(level_count.size()) <= d) level_count.resize(d + 1, 0);
    ++level_count[d];
    s.depth = std::max(s.depth, d);
    const TreeNode& n = t.nodes[i];
    if (n.is_leaf()) {
      ++s.n_leaves;
    } else {
      stack.push_back({n.left, d + 1});
      stack.push_back({n.right, d + 1});
    }
  }
  s.max_parallelism = *std::max_element(level_count.begin(), level_count.end());
  return s;
}

std::vector<TreeInstance> parse_corpus(std::string_view text, Vocab& vocab, bool grow) {
  std::vector<TreeInstance> out;
  std::string errors;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    ++line_no;
    start = end + 1;
    std::size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string_view::npos || line[first] == '#') {
      if (end == text.size()) break;
      continue;
    }
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.remove_suffix(1);
    try {
      out.push_back(parse_sexpr(line, vocab, grow));
    } catch (const ParseError& e) {
      errors += "line " + std::to_string(line_no) + ": " + e.what() + "\n";
    }
    if (end == text.size()) break;
  }
  if (!errors.empty()) throw std::runtime_error("corpus parse errors:\n" + errors);
  return out;
}

std::vector<TreeInstance> load_corpus(const std::string& path, Vocab& vocab, bool grow) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_corpus(ss.str(), vocab, grow);
}

void write_corpus(const std::string& path, const std::vector<TreeInstance>& trees, const Vocab& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  for (const auto& t : trees) out << serialize(t, vocab) << '\n';
}

}  // namespace rdg
