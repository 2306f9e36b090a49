#pragma once

#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rdg/autodiff.hpp"
#include "rdg/data.hpp"
#include "rdg/executor.hpp"
#include "rdg/graph.hpp"
#include "rdg/tensor.hpp"

namespace rdg {

enum class ModelKind { kTreeRNN, kRNTN, kTreeLSTM };
enum class ModelMode { kRecursive, kIterative };

const char* to_string(ModelKind k);
const char* to_string(ModelMode m);
ModelKind parse_model_kind(const std::string& s);
ModelMode parse_model_mode(const std::string& s);

struct ModelConfig {
  ModelKind kind = ModelKind::kTreeLSTM;
  int d = 32;
  int V = 1;
  int C = 2;
  // Sum the cross-entropy of every node instead of the root only.
  bool per_node_loss = false;
  // Iterative mode: number of unrolled steps (largest instance in nodes).
  int capacity = 63;
};

using ModelParams = std::map<std::string, Tensor>;

// Parameter shapes in a fixed order; hidden states are d x 1 columns.
std::vector<std::pair<std::string, Shape>> param_shapes(const ModelConfig& cfg);
ModelParams init_params(const ModelConfig& cfg, std::mt19937_64& rng);

struct BuiltModel {
  ModelConfig cfg;
  ModelMode mode = ModelMode::kRecursive;
  FinalizedGraph graph;
  Port loss;
  Port logits;  // 1 x C, root classifier output
  std::vector<std::string> param_names;
  std::vector<Port> param_ports;
  // Recursive mode: the SubGraph invoked per tree node.
  std::optional<SubGraphRef> model_subgraph;

  // Training graph, built on first use.
  FinalizedGraph train_graph;
  GradientMap grads;
};

BuiltModel build_recursive(const ModelConfig& cfg);
BuiltModel build_iterative(const ModelConfig& cfg);
BuiltModel build_model(const ModelConfig& cfg, ModelMode mode);
// Adds the differentiated graph for all parameters.
void attach_gradients(BuiltModel& m);

Feeds param_feeds(const ModelParams& params);
// Topology tables of one instance plus the given parameter feeds.
Feeds make_feeds(const BuiltModel& m, const TreeInstance& t, const Feeds& params);

struct ForwardResult {
  double loss;
  Tensor logits;
  int prediction;
};

int argmax(const Tensor& row);

ForwardResult forward(Executor& ex, const BuiltModel& m, const TreeInstance& t, const ModelParams& params,
                      const RunOptions& opts = {});

struct OracleResult {
  double loss = 0.0;
  Tensor logits{1, 1};
  std::map<std::string, Tensor> grads;
  Tensor root_h{1, 1};
};

// Direct host-language evaluation with a hand-written backward pass; independent of the graph code.
OracleResult oracle_forward_backward(const ModelConfig& cfg, const ModelParams& params, const TreeInstance& t);

struct Checkpoint {
  ModelConfig cfg;
  ModelParams params;
  std::vector<std::string> vocab;  // token per id; empty when not stored
};

// {format: "rdg-ckpt-1", kind, d, V, C, per_node_loss, vocab: [...], params: {name: {rows, cols, data}}}.
void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);
std::string checkpoint_json(const Checkpoint& ck);
// Throws std::runtime_error naming every parameter whose shape disagrees with the config.
Checkpoint parse_checkpoint(const std::string& text);

}  // namespace rdg
