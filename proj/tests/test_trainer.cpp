#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "doctest.h"
#include "rdg/trainer.hpp"

using namespace rdg;

namespace {

ModelConfig small_cfg(ModelKind kind, int d = 4, int V = 8, int C = 2) {
  ModelConfig c;
  c.kind = kind;
  c.d = d;
  c.V = V;
  c.C = C;
  return c;
}

std::vector<TreeInstance> synthetic(TreeShape shape, int leaves, int count, int V, int C, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TreeInstance> out;
  for (int i = 0; i < count; ++i) out.push_back(generate_synthetic(shape, leaves, V, C, rng));
  return out;
}

const ModelKind kAllKinds[] = {ModelKind::kTreeRNN, ModelKind::kRNTN, ModelKind::kTreeLSTM};

}  // namespace

TEST_CASE("adagrad closed forms") {
  ModelParams p{{"w", Tensor(2, 2, 0.5)}};
  AdagradState st;
  adagrad_update(p, {{"w", Tensor(2, 2, 1.0)}}, st, 0.1, 0.0);
  for (double v : p.at("w").data()) CHECK(v == doctest::Approx(0.5 - 0.1 / (1.0 + 1e-8)).epsilon(1e-15));

  const Tensor before = p.at("w");
  adagrad_update(p, {{"w", Tensor(2, 2, 0.0)}}, st, 0.1, 0.0);
  CHECK(p.at("w") == before);

  ModelParams q{{"w", Tensor(1, 3, 0.0)}};
  AdagradState s2;
  adagrad_update(q, {{"w", Tensor(1, 3, 0.7)}}, s2, 0.2, 0.0);
  const double first = std::abs(q.at("w")(0, 0));
  const double mid = q.at("w")(0, 0);
  adagrad_update(q, {{"w", Tensor(1, 3, 0.7)}}, s2, 0.2, 0.0);
  const double second = std::abs(q.at("w")(0, 0) - mid);
  CHECK(second < first);
  CHECK(second == doctest::Approx(0.2 * 0.7 / (std::sqrt(2 * 0.49) + 1e-8)));

  // l2 folds into the gradient.
  ModelParams r{{"w", Tensor::scalar(2.0)}};
  AdagradState s3;
  adagrad_update(r, {{"w", Tensor::scalar(0.0)}}, s3, 0.1, 0.5);
  CHECK(r.at("w").item() == doctest::Approx(2.0 - 0.1 * 1.0 / (1.0 + 1e-8)));

  CHECK_THROWS_AS(adagrad_update(p, {{"w", Tensor(3, 2, 1.0)}}, st, 0.1, 0.0), DimensionError);
}

TEST_CASE("lr 0 leaves parameters bitwise unchanged") {
  ModelConfig cfg = small_cfg(ModelKind::kTreeLSTM);
  std::mt19937_64 rng(2);
  ModelParams params = init_params(cfg, rng);
  const ModelParams before = params;
  auto corpus = synthetic(TreeShape::kModerate, 5, 12, cfg.V, cfg.C, 3);
  BuiltModel m = build_recursive(cfg);
  Executor ex(1);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 5;
  tc.lr = 0.0;
  train(ex, m, params, corpus, {}, tc);
  CHECK(params == before);
}

TEST_CASE("batch gradient is the sum of instance gradients") {
  for (ModelKind kind : kAllKinds) {
    CAPTURE(to_string(kind));
    ModelConfig cfg = small_cfg(kind);
    std::mt19937_64 rng(5);
    ModelParams params = init_params(cfg, rng);
    auto trees = synthetic(TreeShape::kModerate, 6, 4, cfg.V, cfg.C, 7);
    BuiltModel m = build_recursive(cfg);
    Executor ex(4);
    RunOptions opts;
    opts.threads = 4;

    const int k = 5;
    std::vector<const TreeInstance*> same(k, &trees[0]);
    BatchGrad single = batch_gradient(ex, m, params, {&trees[0]}, opts);
    BatchGrad rep = batch_gradient(ex, m, params, same, opts);
    CHECK(rep.loss_sum == doctest::Approx(k * single.loss_sum).epsilon(1e-12));
    for (const auto& [name, g] : single.grads) {
      CAPTURE(name);
      CHECK(max_abs_diff(rep.grads.at(name), scale(g, k)) <= 1e-9);
    }

    std::vector<const TreeInstance*> all;
    for (const auto& t : trees) all.push_back(&t);
    BatchGrad batch = batch_gradient(ex, m, params, all, opts);
    Grads sum;
    for (const auto& t : trees) {
      BatchGrad one = batch_gradient(ex, m, params, {&t}, opts);
      for (const auto& [name, g] : one.grads) {
        auto [it, fresh] = sum.emplace(name, g);
        if (!fresh) it->second = apply_binary(it->second, g, BinaryFn::kAdd);
      }
    }
    for (const auto& [name, g] : sum) CHECK(max_abs_diff(batch.grads.at(name), g) <= 1e-9);
  }
}

TEST_CASE("untrained model is at chance on balanced two-class data") {
  ModelConfig cfg = small_cfg(ModelKind::kTreeRNN, 8, 20, 2);
  std::mt19937_64 rng(17);
  ModelParams params = init_params(cfg, rng);
  auto corpus = synthetic(TreeShape::kBalanced, 8, 600, cfg.V, cfg.C, 19);
  BuiltModel m = build_recursive(cfg);
  Executor ex(1);
  Metrics mt = evaluate(ex, m, params, corpus);
  CHECK(mt.accuracy >= 0.4);
  CHECK(mt.accuracy <= 0.6);
  CHECK(mt.instances_per_s > 0);
}

TEST_CASE("threads 1 vs 8 give identical predictions") {
  for (ModelMode mode : {ModelMode::kRecursive, ModelMode::kIterative}) {
    ModelConfig cfg = small_cfg(ModelKind::kTreeLSTM, 6, 10, 3);
    cfg.capacity = 15;
    std::mt19937_64 rng(23);
    ModelParams params = init_params(cfg, rng);
    auto corpus = synthetic(TreeShape::kModerate, 8, 40, cfg.V, cfg.C, 29);
    BuiltModel m = build_model(cfg, mode);
    std::vector<int> p1, p8;
    Executor e1(1), e8(8);
    Metrics a = evaluate(e1, m, params, corpus, 25, &p1);
    Metrics b = evaluate(e8, m, params, corpus, 25, &p8);
    CHECK(p1 == p8);
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.loss_mean == b.loss_mean);
  }
}

TEST_CASE("grad check passes on all models and catches a broken derivative") {
  for (ModelKind kind : kAllKinds) {
    CAPTURE(to_string(kind));
    GradCheckConfig gc;
    gc.trials = 3;
    GradCheckReport rep = grad_check(kind, gc);
    CHECK(rep.passed);
    CHECK(rep.trials == 3);
    CHECK_FALSE(rep.params.empty());
    for (const auto& p : rep.params) {
      CAPTURE(p.name);
      CHECK(p.failures == 0);
      CHECK(p.checked > 0);
      CHECK(p.worst_rel < 1e-4);
    }
  }

  GradCheckConfig bad;
  bad.trials = 2;
  bad.run.hooks.unary_backward = [](UnaryFn f, const Tensor& up, const Tensor& in, const Tensor& out) {
    Tensor g = unary_backward(f, up, in, out);
    return f == UnaryFn::kTanh ? scale(g, 1.1) : g;
  };
  GradCheckReport rep = grad_check(ModelKind::kTreeRNN, bad);
  CHECK_FALSE(rep.passed);
  std::size_t failures = 0;
  for (const auto& p : rep.params) failures += p.failures;
  CHECK(failures > 0);

  GradCheckConfig none;
  none.trials = 0;
  GradCheckReport empty = grad_check(ModelKind::kTreeLSTM, none);
  CHECK(empty.passed);
  CHECK(empty.trials == 0);
  for (const auto& p : empty.params) CHECK(p.checked == 0);
}

TEST_CASE("small steps descend on a fixed instance") {
  for (ModelKind kind : kAllKinds) {
    CAPTURE(to_string(kind));
    ModelConfig cfg = small_cfg(kind, 4, 8, 3);
    std::mt19937_64 rng(31);
    ModelParams params = init_params(cfg, rng);
    TreeInstance t = synthetic(TreeShape::kModerate, 5, 1, cfg.V, cfg.C, 37)[0];
    BuiltModel m = build_recursive(cfg);
    Executor ex(1);
    AdagradState st;
    double prev = std::numeric_limits<double>::infinity();
    for (int step = 0; step < 5; ++step) {
      BatchGrad g = batch_gradient(ex, m, params, {&t});
      CHECK(g.loss_sum < prev);
      prev = g.loss_sum;
      adagrad_update(params, g.grads, st, 1e-3, 0.0);
    }
  }
}

TEST_CASE("training is reproducible for a fixed seed") {
  ModelConfig cfg = small_cfg(ModelKind::kTreeRNN, 6, 10, 2);
  auto corpus = synthetic(TreeShape::kModerate, 6, 30, cfg.V, cfg.C, 41);
  auto run_once = [&] {
    std::mt19937_64 rng(43);
    ModelParams params = init_params(cfg, rng);
    BuiltModel m = build_recursive(cfg);
    Executor ex(1);
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 7;
    tc.seed = 9;
    auto metrics = train(ex, m, params, corpus, {}, tc);
    return std::make_pair(metrics, params);
  };
  auto [m1, p1] = run_once();
  auto [m2, p2] = run_once();
  REQUIRE(m1.size() == 2);
  REQUIRE(m2.size() == 2);
  for (std::size_t i = 0; i < m1.size(); ++i) {
    CHECK(m1[i].epoch == m2[i].epoch);
    CHECK(m1[i].loss_mean == m2[i].loss_mean);
    CHECK(m1[i].accuracy == m2[i].accuracy);
    CHECK(m1[i].accuracy >= 0.0);
    CHECK(m1[i].accuracy <= 1.0);
  }
  CHECK(p1 == p2);
}

TEST_CASE("eval_every controls which epochs are evaluated") {
  ModelConfig cfg = small_cfg(ModelKind::kTreeRNN);
  auto corpus = synthetic(TreeShape::kLinear, 3, 10, cfg.V, cfg.C, 2);
  std::mt19937_64 rng(1);
  ModelParams params = init_params(cfg, rng);
  BuiltModel m = build_recursive(cfg);
  Executor ex(1);
  TrainConfig tc;
  tc.epochs = 3;
  tc.eval_every = 2;
  int seen = 0;
  auto metrics = train(ex, m, params, corpus, {}, tc, TrainHooks{[&](const Metrics&) { ++seen; }});
  CHECK(seen == 3);
  REQUIRE(metrics.size() == 3);
  CHECK(std::isnan(metrics[0].accuracy));
  CHECK_FALSE(std::isnan(metrics[1].accuracy));
  CHECK_FALSE(std::isnan(metrics[2].accuracy));
  for (int i = 0; i < 3; ++i) CHECK(metrics[i].wall_time_s >= (i ? metrics[i - 1].wall_time_s : 0.0));
}

TEST_CASE("metrics CSV round trip") {
  std::vector<Metrics> rows{{1, 0.125, 1234.5678901234567, 0.69314718055994529, 0.5},
                            {2, 0.3, 1e-3, 1.0 / 3.0, std::numeric_limits<double>::quiet_NaN()}};
  std::stringstream ss;
  write_metrics_header(ss);
  for (const auto& r : rows) write_metrics_row(ss, r);
  CHECK(ss.str().rfind("epoch,wall_time_s,instances_per_s,loss,accuracy\n", 0) == 0);
  auto back = read_metrics_csv(ss);
  REQUIRE(back.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(back[i].epoch == rows[i].epoch);
    CHECK(back[i].wall_time_s == rows[i].wall_time_s);
    CHECK(back[i].instances_per_s == rows[i].instances_per_s);
    CHECK(back[i].loss_mean == rows[i].loss_mean);
    if (std::isnan(rows[i].accuracy)) CHECK(std::isnan(back[i].accuracy));
    else CHECK(back[i].accuracy == rows[i].accuracy);
  }
}

TEST_CASE("non-finite loss aborts with the step index") {
  ModelConfig cfg = small_cfg(ModelKind::kTreeRNN);
  std::mt19937_64 rng(3);
  ModelParams params = init_params(cfg, rng);
  params.at("Ws")(0, 0) = std::numeric_limits<double>::quiet_NaN();
  auto corpus = synthetic(TreeShape::kBalanced, 2, 10, cfg.V, cfg.C, 4);
  BuiltModel m = build_recursive(cfg);
  Executor ex(1);
  TrainConfig tc;
  tc.batch_size = 5;
  try {
    train(ex, m, params, corpus, {}, tc);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(e.step() == 1);
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
}

TEST_CASE("trained model fits training data at least as well as validation") {
  ModelConfig cfg = small_cfg(ModelKind::kTreeRNN, 12, 10, 2);
  cfg.per_node_loss = true;
  auto train_set = synthetic(TreeShape::kModerate, 4, 150, cfg.V, cfg.C, 51);
  auto valid = synthetic(TreeShape::kModerate, 4, 100, cfg.V, cfg.C, 53);
  std::mt19937_64 rng(55);
  ModelParams params = init_params(cfg, rng);
  BuiltModel m = build_recursive(cfg);
  Executor ex(1);
  TrainConfig tc;
  tc.epochs = 8;
  tc.batch_size = 10;
  tc.lr = 0.1;
  tc.eval_every = 0;
  train(ex, m, params, train_set, valid, tc);
  const double tr = evaluate(ex, m, params, train_set).accuracy;
  const double va = evaluate(ex, m, params, valid).accuracy;
  MESSAGE("train " << tr << " valid " << va);
  CHECK(tr >= va - 0.05);
  CHECK(tr > 0.6);
}
