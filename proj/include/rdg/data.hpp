#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace rdg {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at byte " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

struct TreeNode {
  int label = 0;
  int token = -1;  // leaves only
  int left = -1;   // internal nodes only
  int right = -1;

  bool is_leaf() const { return left < 0; }
};

// Binary tree with node indices assigned children-first, so the root has the largest index.
struct TreeInstance {
  std::vector<TreeNode> nodes;
  int root = 0;
  std::vector<int> topo_order;

  int size() const { return static_cast<int>(nodes.size()); }
  friend bool operator==(const TreeInstance& a, const TreeInstance& b);
};

// Throws std::invalid_argument if the tree is not a well-formed binary tree with a valid order.
void validate(const TreeInstance& t);

class Vocab {
 public:
  static constexpr const char* kUnk = "<unk>";

  Vocab();
  // Known tokens get ids 0..n-1 in order; unk comes last.
  explicit Vocab(const std::vector<std::string>& tokens);
  int id(std::string_view token) const;  // unk id when unknown
  int add(std::string_view token);
  const std::string& token(int id) const;
  bool contains(std::string_view token) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  int unk_id() const { return unk_id_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::unordered_map<std::string, int> ids_;
  std::vector<std::string> tokens_;
  int unk_id_ = 0;
};

// Leaf: (L token); internal: (L child child). L is a non-negative integer label.
TreeInstance parse_sexpr(std::string_view line, Vocab& vocab, bool grow);
std::string serialize(const TreeInstance& t, const Vocab& vocab);

enum class TreeShape { kBalanced, kModerate, kLinear };
const char* to_string(TreeShape s);
TreeShape parse_shape(std::string_view s);

// Labels: every node gets (sum of the token ids below it) mod n_classes.
TreeInstance generate_synthetic(TreeShape shape, int n_leaves, int vocab_size, int n_classes, std::mt19937_64& rng);

// Vocab mapping the synthetic tokens w0..w{vocab_size-1} to ids 0..vocab_size-1.
Vocab synthetic_vocab(int vocab_size);

struct TreeStats {
  int n_nodes = 0;
  int n_leaves = 0;
  int depth = 0;
  int max_parallelism = 0;
  friend bool operator==(const TreeStats&, const TreeStats&) = default;
};

TreeStats tree_stats(const TreeInstance& t);

// One s-expression per line; blank lines and '#' comments are skipped.
std::vector<TreeInstance> load_corpus(const std::string& path, Vocab& vocab, bool grow);
std::vector<TreeInstance> parse_corpus(std::string_view text, Vocab& vocab, bool grow);
void write_corpus(const std::string& path, const std::vector<TreeInstance>& trees, const Vocab& vocab);

}  // namespace rdg
