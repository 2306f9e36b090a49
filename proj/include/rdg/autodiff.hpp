#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "rdg/graph.hpp"

namespace rdg {

struct GradientMap {
  // Top-level forward port -> port carrying d(loss)/d(port) in the extended graph.
  std::map<Port, Port> port_grads;
  // Forward SubGraph index -> its gradient SubGraph.
  std::map<std::uint32_t, SubGraphRef> subgraph_grads;
  Port loss;
  // (parameter name, gradient port), in the order of `wrt`.
  std::vector<std::pair<std::string, Port>> param_grads;
  // Ports of the forward outputs, re-addressed in the extended graph.
  std::vector<Port> forward_outputs;
};

// Incremental form of differentiate(), exposing the memoized per-SubGraph step.
class Differentiator {
 public:
  Differentiator(const FinalizedGraph& g, std::vector<Port> wrt);
  ~Differentiator();

  // Gradient SubGraph of `ref`: inputs (upstream grad per output, invocation key), outputs
  // the grads of its differentiable inputs (arguments, then captures). Memoized.
  SubGraphRef differentiate_subgraph(SubGraphRef ref);
  // Positions of `ref`'s inputs that receive a gradient.
  std::vector<std::uint32_t> differentiable_inputs(SubGraphRef ref) const;

  std::pair<FinalizedGraph, GradientMap> finish(Port loss);

 private:
  struct State;
  std::unique_ptr<State> s_;
};

// Builds the training graph: forward (with cache writes and branch records) plus the
// gradient of `loss` with respect to each Parameter in `wrt`. Ports of `g` remain valid
// node ids in the result; use GradientMap for the new ports.
std::pair<FinalizedGraph, GradientMap> differentiate(const FinalizedGraph& g, Port loss, const std::vector<Port>& wrt);

// Counts Invoke nodes in the body of `ref` that target `target`.
std::size_t count_invokes(const FinalizedGraph& g, SubGraphRef ref, SubGraphRef target);

}  // namespace rdg
