#pragma once

#include <functional>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rdg/models.hpp"

namespace rdg {

struct TrainConfig {
  int batch_size = 25;
  int epochs = 10;
  double lr = 0.05;
  double l2 = 0.0;
  int threads = 1;
  std::uint64_t seed = 0;
  // Evaluate every this many epochs (and after the last one); 0 disables evaluation.
  int eval_every = 1;
};

struct Metrics {
  int epoch = 0;
  double wall_time_s = 0.0;  // cumulative since training started
  double instances_per_s = 0.0;
  double loss_mean = 0.0;
  double accuracy = 0.0;  // NaN when the epoch was not evaluated
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(long step, double loss)
      : std::runtime_error("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) + ")"),
        step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

using Grads = std::map<std::string, Tensor>;

struct AdagradState {
  Grads accum;
};

// g' = g + l2*p; state += g'^2; p -= lr * g' / (sqrt(state) + 1e-8).
void adagrad_update(ModelParams& params, const Grads& grads, AdagradState& state, double lr, double l2);

// Sum of per-instance gradients over one batch, reduced in instance order.
struct BatchGrad {
  Grads grads;
  double loss_sum = 0.0;
};
BatchGrad batch_gradient(Executor& ex, BuiltModel& m, const ModelParams& params,
                         const std::vector<const TreeInstance*>& batch, const RunOptions& opts = {});

struct TrainHooks {
  std::function<void(const Metrics&)> on_epoch;
};

// Requires attach_gradients(m) or calls it. Accuracy is measured on `valid` when it is
// non-empty, otherwise on the training set.
std::vector<Metrics> train(Executor& ex, BuiltModel& m, ModelParams& params, const std::vector<TreeInstance>& corpus,
                           const std::vector<TreeInstance>& valid, const TrainConfig& cfg, const TrainHooks& hooks = {});

// Forward only, `batch` instances in flight at a time. epoch is 0.
Metrics evaluate(Executor& ex, const BuiltModel& m, const ModelParams& params, const std::vector<TreeInstance>& corpus,
                 int batch = 25, std::vector<int>* predictions = nullptr);

void write_metrics_header(std::ostream& os);
void write_metrics_row(std::ostream& os, const Metrics& m);
std::vector<Metrics> read_metrics_csv(std::istream& is);

struct ParamCheck {
  std::string name;
  double worst_rel = 0.0;  // over elements with magnitude of at least abs_floor / tol
  double worst_abs = 0.0;
  std::size_t failures = 0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  ModelKind kind = ModelKind::kTreeRNN;
  int trials = 0;
  std::vector<ParamCheck> params;
  bool passed = true;
  double seconds = 0.0;
};

struct GradCheckConfig {
  int trials = 10;
  double tol = 1e-4;
  double abs_floor = 1e-7;
  double step = 1e-5;
  int max_nodes = 31;
  int d = 4;
  int V = 6;
  int C = 3;
  std::uint64_t seed = 1;
  ModelMode mode = ModelMode::kRecursive;
  RunOptions run;  // hooks let tests corrupt kernels
};

// Engine gradients against central finite differences of the engine's own forward loss.
GradCheckReport grad_check(ModelKind kind, const GradCheckConfig& cfg);

}  // namespace rdg
