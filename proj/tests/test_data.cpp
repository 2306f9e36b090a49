#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "rdg/data.hpp"

using namespace rdg;

namespace {

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("rdg_test_" + name)).string();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  f << text;
}

}  // namespace

TEST_CASE("parse_sexpr examples") {
  Vocab v;
  TreeInstance t = parse_sexpr("(1 good)", v, true);
  CHECK(t.size() == 1);
  CHECK(t.nodes[t.root].label == 1);
  CHECK(t.nodes[t.root].is_leaf());

  TreeInstance u = parse_sexpr("(0 (1 not) (1 good))", v, true);
  CHECK(u.size() == 3);
  CHECK(u.nodes[u.root].label == 0);
  CHECK(u.topo_order == std::vector<int>{0, 1, 2});
  CHECK(u.nodes[u.topo_order[0]].is_leaf());
  CHECK(u.nodes[u.topo_order[1]].is_leaf());

  CHECK_THROWS_AS(parse_sexpr("(1 (1 a) b)", v, true), ParseError);
}

TEST_CASE("parse errors carry byte offsets") {
  Vocab v;
  for (const char* bad : {"(1 good", "(x good)", "(1 (1 a) (1 b) (1 c))", "(1)", "1 good", "(1 good) extra", "(-1 a)"}) {
    CAPTURE(bad);
    CHECK_THROWS_AS(parse_sexpr(bad, v, true), ParseError);
  }
  try {
    parse_sexpr("(1 (1 a) b)", v, true);
  } catch (const ParseError& e) {
    CHECK(e.offset() == 9);
    CHECK(std::string(e.what()).find("at byte 9") != std::string::npos);
  }
}

TEST_CASE("vocab growth and unknown tokens") {
  Vocab v;
  parse_sexpr("(0 (1 a) (1 b))", v, true);
  CHECK(v.size() == 3);
  TreeInstance t = parse_sexpr("(0 (1 a) (1 zzz))", v, false);
  CHECK(v.size() == 3);
  CHECK(t.nodes[1].token == v.unk_id());
  for (int i = 0; i < v.size(); ++i) CHECK(v.id(v.token(i)) == i);
  Vocab copy(v.tokens());
  CHECK(copy.tokens() == v.tokens());
  CHECK(copy.unk_id() == v.unk_id());
}

TEST_CASE("serialize round trip") {
  Vocab v;
  std::mt19937_64 rng(1);
  Vocab sv = synthetic_vocab(7);
  for (TreeShape s : {TreeShape::kBalanced, TreeShape::kModerate, TreeShape::kLinear}) {
    for (int i = 0; i < 20; ++i) {
      TreeInstance t = generate_synthetic(s, s == TreeShape::kBalanced ? 8 : 1 + static_cast<int>(rng() % 12), 7, 3, rng);
      Vocab copy = sv;
      CHECK(parse_sexpr(serialize(t, sv), copy, false) == t);
    }
  }
  const std::string line = "(0 (1 not) (2 (1 very) (2 good)))";
  CHECK(serialize(parse_sexpr(line, v, true), v) == line);
}

TEST_CASE("synthetic trees") {
  std::mt19937_64 rng(5);
  TreeInstance b = generate_synthetic(TreeShape::kBalanced, 8, 10, 2, rng);
  CHECK(b.size() == 15);
  CHECK(tree_stats(b).depth == 3);
  TreeInstance l = generate_synthetic(TreeShape::kLinear, 8, 10, 2, rng);
  CHECK(l.size() == 15);
  CHECK(tree_stats(l).depth == 7);
  for (int i = 0; i < l.size(); ++i) {
    const TreeNode& n = l.nodes[i];
    if (!n.is_leaf()) CHECK((l.nodes[n.left].is_leaf() || l.nodes[n.right].is_leaf()));
  }
  CHECK_THROWS_AS(generate_synthetic(TreeShape::kBalanced, 6, 10, 2, rng), std::invalid_argument);

  std::mt19937_64 r1(77), r2(77);
  CHECK(generate_synthetic(TreeShape::kModerate, 8, 10, 2, r1) == generate_synthetic(TreeShape::kModerate, 8, 10, 2, r2));

  double depth_sum = 0.0;
  for (int i = 0; i < 1000; ++i) depth_sum += tree_stats(generate_synthetic(TreeShape::kModerate, 8, 10, 2, rng)).depth;
  const double mean = depth_sum / 1000.0;
  CHECK(mean > 3.0);
  CHECK(mean < 7.0);
}

TEST_CASE("synthetic invariants") {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 300; ++i) {
    const TreeShape s = static_cast<TreeShape>(i % 3);
    const int leaves = s == TreeShape::kBalanced ? 1 << (i % 6) : 1 + static_cast<int>(rng() % 40);
    TreeInstance t = generate_synthetic(s, leaves, 5, 3, rng);
    CHECK(t.size() == 2 * leaves - 1);
    CHECK_NOTHROW(validate(t));
    std::vector<int> pos(t.size());
    for (int k = 0; k < t.size(); ++k) pos[t.topo_order[k]] = k;
    for (int k = 0; k < t.size(); ++k) {
      const TreeNode& n = t.nodes[k];
      if (n.is_leaf()) {
        CHECK(n.label == n.token % 3);
      } else {
        CHECK(pos[n.left] < pos[k]);
        CHECK(pos[n.right] < pos[k]);
        CHECK(n.label == (t.nodes[n.left].label + t.nodes[n.right].label) % 3);
      }
    }
  }
}

TEST_CASE("tree_stats") {
  std::mt19937_64 rng(1);
  CHECK(tree_stats(generate_synthetic(TreeShape::kBalanced, 8, 4, 2, rng)) == TreeStats{15, 8, 3, 8});
  CHECK(tree_stats(generate_synthetic(TreeShape::kLinear, 8, 4, 2, rng)) == TreeStats{15, 8, 7, 2});
  CHECK(tree_stats(generate_synthetic(TreeShape::kLinear, 1, 4, 2, rng)) == TreeStats{1, 1, 0, 1});
}

TEST_CASE("validate rejects malformed trees") {
  TreeInstance t;
  t.nodes = {TreeNode{0, 0, -1, -1}, TreeNode{0, 1, -1, -1}, TreeNode{0, -1, 0, 0}};
  t.root = 2;
  t.topo_order = {0, 1, 2};
  CHECK_THROWS_AS(validate(t), std::invalid_argument);
  t.nodes[2].right = 1;
  CHECK_NOTHROW(validate(t));
  t.topo_order = {2, 0, 1};
  CHECK_THROWS_AS(validate(t), std::invalid_argument);
}

TEST_CASE("load_corpus") {
  const std::string path = tmp_path("corpus.txt");
  write_file(path, "# comment\n(1 a)\n\n(0 (1 a) (1 b))\n(1 c)\n");
  Vocab v;
  auto trees = load_corpus(path, v, true);
  REQUIRE(trees.size() == 3);
  CHECK(trees[0].size() == 1);
  CHECK(trees[1].size() == 3);
  CHECK(trees[2].size() == 1);

  Vocab frozen = v;
  auto again = load_corpus(path, frozen, false);
  CHECK(again == trees);
  CHECK(frozen.tokens() == v.tokens());

  write_file(path, "(1 a)\n(1 (1 a) b)\n(0 c)\n");
  try {
    Vocab w;
    load_corpus(path, w, true);
    FAIL("expected a parse error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS(load_corpus(tmp_path("missing.txt"), v, false));

  std::mt19937_64 rng(3);
  std::vector<TreeInstance> gen;
  for (int i = 0; i < 5; ++i) gen.push_back(generate_synthetic(TreeShape::kModerate, 5, 6, 2, rng));
  write_corpus(path, gen, synthetic_vocab(6));
  Vocab sv = synthetic_vocab(6);
  CHECK(load_corpus(path, sv, false) == gen);
  std::remove(path.c_str());
}
