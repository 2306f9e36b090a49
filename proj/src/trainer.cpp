#include "rdg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

namespace rdg {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

}  // namespace

void adagrad_update(ModelParams& params, const Grads& grads, AdagradState& state, double lr, double l2) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("gradient for unknown parameter '" + name + "'");
    Tensor& p = it->second;
    if (p.shape() != g.shape()) {
      throw DimensionError("adagrad: parameter '" + name + "' is " + p.shape().str() + " but its gradient is " +
                           g.shape().str());
    }
    auto [acc_it, fresh] = state.accum.try_emplace(name, Tensor(p.shape()));
    Tensor& acc = acc_it->second;
    if (acc.shape() != p.shape()) throw DimensionError("adagrad: state for '" + name + "' has the wrong shape");
    for (std::int64_t r = 0; r < p.rows(); ++r) {
      for (std::int64_t c = 0; c < p.cols(); ++c) {
        const double gi = g(r, c) + l2 * p(r, c);
        acc(r, c) += gi * gi;
        p(r, c) -= lr * gi / (std::sqrt(acc(r, c)) + 1e-8);
      }
    }
  }
}

BatchGrad batch_gradient(Executor& ex, BuiltModel& m, const ModelParams& params,
                         const std::vector<const TreeInstance*>& batch, const RunOptions& opts) {
  attach_gradients(m);
  const Feeds pf = param_feeds(params);
  std::vector<Feeds> feeds;
  feeds.reserve(batch.size());
  for (const TreeInstance* t : batch) feeds.push_back(make_feeds(m, *t, pf));
  auto steps = run_training_batch(ex, m.train_graph, m.grads, feeds, opts);
  BatchGrad out;
  for (const auto& [name, t] : params) out.grads.emplace(name, Tensor(t.shape()));
  for (const StepResult& s : steps) {
    out.loss_sum += s.loss;
    for (const auto& [name, g] : s.grads) {
      Tensor& acc = out.grads.at(name);
      for (std::int64_t r = 0; r < g.rows(); ++r) {
        for (std::int64_t c = 0; c < g.cols(); ++c) acc(r, c) += g(r, c);
      }
    }
  }
  return out;
}

std::vector<Metrics> train(Executor& ex, BuiltModel& m, ModelParams& params, const std::vector<TreeInstance>& corpus,
                           const std::vector<TreeInstance>& valid, const TrainConfig& cfg, const TrainHooks& hooks) {
  if (corpus.empty()) throw std::invalid_argument("training corpus is empty");
  if (cfg.batch_size < 1) throw std::invalid_argument("batch size must be at least 1");
  attach_gradients(m);
  RunOptions opts;
  opts.threads = cfg.threads;
  opts.seed = cfg.seed;

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg.seed);
  AdagradState state;
  std::vector<Metrics> out;
  long step = 0;
  const auto t_start = Clock::now();

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const auto t_epoch = Clock::now();
    double loss_sum = 0.0;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<const TreeInstance*> batch;
      for (std::size_t k = at; k < std::min(order.size(), at + cfg.batch_size); ++k) batch.push_back(&corpus[order[k]]);
      BatchGrad bg = batch_gradient(ex, m, params, batch, opts);
      ++step;
      if (!std::isfinite(bg.loss_sum)) throw DivergenceError(step, bg.loss_sum);
      loss_sum += bg.loss_sum;
      adagrad_update(params, bg.grads, state, cfg.lr, cfg.l2);
    }
    const double epoch_s = seconds_since(t_epoch);

    Metrics mt;
    mt.epoch = epoch;
    mt.loss_mean = loss_sum / static_cast<double>(corpus.size());
    mt.instances_per_s = static_cast<double>(corpus.size()) / std::max(epoch_s, 1e-9);
    mt.accuracy = std::numeric_limits<double>::quiet_NaN();
    const bool eval_now = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
    if (eval_now) mt.accuracy = evaluate(ex, m, params, valid.empty() ? corpus : valid, cfg.batch_size).accuracy;
    mt.wall_time_s = seconds_since(t_start);
    out.push_back(mt);
    if (hooks.on_epoch) hooks.on_epoch(mt);
  }
  return out;
}

Metrics evaluate(Executor& ex, const BuiltModel& m, const ModelParams& params, const std::vector<TreeInstance>& corpus,
                 int batch, std::vector<int>* predictions) {
  Metrics mt;
  if (predictions) predictions->clear();
  if (corpus.empty()) return mt;
  batch = std::max(batch, 1);
  const Feeds pf = param_feeds(params);
  const auto t0 = Clock::now();
  std::size_t correct = 0;
  double loss_sum = 0.0;
  for (std::size_t at = 0; at < corpus.size(); at += static_cast<std::size_t>(batch)) {
    std::vector<Feeds> feeds;
    const std::size_t end = std::min(corpus.size(), at + batch);
    for (std::size_t k = at; k < end; ++k) feeds.push_back(make_feeds(m, corpus[k], pf));
    auto results = ex.run_batch(m.graph, feeds, {m.loss, m.logits});
    for (std::size_t k = at; k < end; ++k) {
      const RunResult& r = results[k - at];
      const int pred = argmax(r.values[1]);
      if (predictions) predictions->push_back(pred);
      correct += pred == corpus[k].nodes[corpus[k].root].label;
      loss_sum += r.values[0].item();
    }
  }
  const double s = seconds_since(t0);
  mt.wall_time_s = s;
  mt.instances_per_s = static_cast<double>(corpus.size()) / std::max(s, 1e-9);
  mt.loss_mean = loss_sum / static_cast<double>(corpus.size());
  mt.accuracy = static_cast<double>(correct) / static_cast<double>(corpus.size());
  return mt;
}

void write_metrics_header(std::ostream& os) { os << "epoch,wall_time_s,instances_per_s,loss,accuracy\n"; }

void write_metrics_row(std::ostream& os, const Metrics& m) {
  std::ostringstream line;
  line << std::setprecision(17) << m.epoch << ',' << m.wall_time_s << ',' << m.instances_per_s << ',' << m.loss_mean
       << ',';
  if (std::isnan(m.accuracy)) {
    line << "nan";
  } else {
    line << m.accuracy;
  }
  os << line.str() << '\n';
}

std::vector<Metrics> read_metrics_csv(std::istream& is) {
  std::vector<Metrics> out;
  std::string line;
  if (!std::getline(is, line) || line != "epoch,wall_time_s,instances_per_s,loss,accuracy") {
    throw std::runtime_error("metrics CSV: unexpected header");
  }
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 5) throw std::runtime_error("metrics CSV line " + std::to_string(lineno) + ": expected 5 fields");
    Metrics m;
    try {
      m.epoch = std::stoi(f[0]);
      m.wall_time_s = std::stod(f[1]);
      m.instances_per_s = std::stod(f[2]);
      m.loss_mean = std::stod(f[3]);
      m.accuracy = f[4] == "nan" ? std::numeric_limits<double>::quiet_NaN() : std::stod(f[4]);
    } catch (const std::exception&) {
      throw std::runtime_error("metrics CSV line " + std::to_string(lineno) + ": bad number");
    }
    out.push_back(m);
  }
  return out;
}

GradCheckReport grad_check(ModelKind kind, const GradCheckConfig& cfg) {
  const auto t0 = Clock::now();
  GradCheckReport rep;
  rep.kind = kind;
  rep.trials = cfg.trials;
  ModelConfig mc;
  mc.kind = kind;
  mc.d = cfg.d;
  mc.V = cfg.V;
  mc.C = cfg.C;
  mc.capacity = cfg.max_nodes;
  for (const auto& [name, s] : param_shapes(mc)) rep.params.push_back({name, 0.0, 0.0, 0, 0});
  if (cfg.trials <= 0) return rep;

  BuiltModel m = build_model(mc, cfg.mode);
  attach_gradients(m);
  Executor ex(std::max(cfg.run.threads, 1));
  std::mt19937_64 rng(cfg.seed);
  const int max_leaves = std::max(1, (cfg.max_nodes + 1) / 2);
  std::uniform_int_distribution<int> leaves(1, max_leaves);

  for (int trial = 0; trial < cfg.trials; ++trial) {
    ModelParams params = init_params(mc, rng);
    // Nonzero biases so every term is exercised.
    for (auto& [name, t] : params) {
      if (t.cols() == 1) t = random_init(t.shape(), 0.5, rng);
    }
    TreeInstance tree = generate_synthetic(TreeShape::kModerate, leaves(rng), mc.V, mc.C, rng);
    StepResult s = run_training_step(ex, m.train_graph, m.grads, make_feeds(m, tree, param_feeds(params)), cfg.run);

    auto loss_at = [&](const ModelParams& p) {
      return ex.run(m.graph, make_feeds(m, tree, param_feeds(p)), {m.loss}, cfg.run).values[0].item();
    };
    for (ParamCheck& pc : rep.params) {
      Tensor& p = params.at(pc.name);
      const Tensor& g = s.grads.at(pc.name);
      for (std::int64_t r = 0; r < p.rows(); ++r) {
        for (std::int64_t c = 0; c < p.cols(); ++c) {
          const double keep = p(r, c);
          p(r, c) = keep + cfg.step;
          const double up = loss_at(params);
          p(r, c) = keep - cfg.step;
          const double down = loss_at(params);
          p(r, c) = keep;
          const double fd = (up - down) / (2.0 * cfg.step);
          const double diff = std::abs(fd - g(r, c));
          const double mag = std::max(std::abs(fd), std::abs(g(r, c)));
          ++pc.checked;
          pc.worst_abs = std::max(pc.worst_abs, diff);
          const double rel = mag > 0.0 ? diff / mag : 0.0;
          if (mag >= cfg.abs_floor / cfg.tol) pc.worst_rel = std::max(pc.worst_rel, rel);
          if (diff > cfg.abs_floor && rel > cfg.tol) ++pc.failures;
        }
      }
    }
  }
  for (const ParamCheck& pc : rep.params) rep.passed = rep.passed && pc.failures == 0;
  rep.seconds = seconds_since(t0);
  return rep;
}

}  // namespace rdg
