#include "rdg/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <set>

#include "CLI11.hpp"
#include "rdg/bench.hpp"
#include "rdg/trainer.hpp"

namespace rdg {

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainArgs {
  std::string model = "treelstm";
  std::string mode = "recursive";
  std::string data;
  std::string valid;
  int hidden = 32;
  int batch = 25;
  int epochs = 10;
  int threads = 1;
  std::uint64_t seed = 0;
  double lr = 0.05;
  double l2 = 0.0;
  int classes = 0;
  bool per_node_loss = false;
  std::string out = "rdg.ckpt.json";
  std::string metrics;
};

struct InferArgs {
  std::string ckpt;
  std::string data;
  std::string mode = "recursive";
  int threads = 1;
  int batch = 25;
  std::string trace = "rdg_trace.csv";
  bool quiet = false;
};

struct BenchArgs {
  std::string suite;
  std::vector<std::string> modes{"recursive"};
  std::string model = "treernn";
  std::string out;
  int hidden = 32;
  int threads = 8;
  int runs = 100;
  int warmup = 10;
  std::uint64_t seed = 0;
};

struct GenArgs {
  std::string shape;
  int leaves = 0;
  int count = 0;
  int vocab = 100;
  int classes = 2;
  std::uint64_t seed = 0;
  std::string out;
};

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write '" + path + "'");
  return f;
}

int max_nodes(const std::vector<TreeInstance>& a, const std::vector<TreeInstance>& b) {
  int n = 1;
  for (const auto* v : {&a, &b}) {
    for (const auto& t : *v) n = std::max(n, t.size());
  }
  return n;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  ModelConfig mc;
  try {
    mc.kind = parse_model_kind(a.model);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  ModelMode mode;
  try {
    mode = parse_model_mode(a.mode);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  Vocab vocab;
  auto corpus = load_corpus(a.data, vocab, true);
  std::vector<TreeInstance> valid;
  if (!a.valid.empty()) valid = load_corpus(a.valid, vocab, false);
  if (corpus.empty()) throw std::runtime_error("no trees in '" + a.data + "'");

  int max_label = 0;
  for (const auto* v : {&corpus, &valid}) {
    for (const auto& t : *v) {
      for (const auto& n : t.nodes) max_label = std::max(max_label, n.label);
    }
  }
  mc.d = a.hidden;
  mc.V = vocab.size();
  mc.C = a.classes > 0 ? a.classes : std::max(2, max_label + 1);
  mc.per_node_loss = a.per_node_loss;
  mc.capacity = max_nodes(corpus, valid);

  std::mt19937_64 rng(a.seed);
  ModelParams params = init_params(mc, rng);
  BuiltModel m = build_model(mc, mode);
  TrainConfig tc;
  tc.batch_size = a.batch;
  tc.epochs = a.epochs;
  tc.lr = a.lr;
  tc.l2 = a.l2;
  tc.threads = a.threads;
  tc.seed = a.seed;

  std::ofstream metrics;
  if (!a.metrics.empty()) {
    metrics = open_out(a.metrics);
    write_metrics_header(metrics);
  }
  out << "training " << to_string(mc.kind) << " (" << to_string(mode) << ") on " << corpus.size() << " trees, V="
      << mc.V << " C=" << mc.C << " d=" << mc.d << " batch=" << tc.batch_size << " threads=" << tc.threads << "\n";
  TrainHooks hooks;
  hooks.on_epoch = [&](const Metrics& mt) {
    out << "epoch " << mt.epoch << "  loss " << std::fixed << std::setprecision(4) << mt.loss_mean << "  acc "
        << mt.accuracy << "  " << std::setprecision(1) << mt.instances_per_s << " inst/s  " << std::setprecision(2)
        << mt.wall_time_s << "s\n"
        << std::defaultfloat;
    if (metrics.is_open()) write_metrics_row(metrics, mt);
  };
  Executor ex(tc.threads);
  try {
    train(ex, m, params, corpus, valid, tc, hooks);
  } catch (const DivergenceError& e) {
    out << "error: " << e.what() << "\n";
    return 1;
  }
  save_checkpoint(a.out, Checkpoint{mc, params, vocab.tokens()});
  out << "wrote " << a.out << "\n";
  return 0;
}

int cmd_infer(const InferArgs& a, std::ostream& out) {
  ModelMode mode;
  try {
    mode = parse_model_mode(a.mode);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  Checkpoint ck = load_checkpoint(a.ckpt);
  Vocab vocab = ck.vocab.empty() ? synthetic_vocab(ck.cfg.V) : Vocab(ck.vocab);
  auto corpus = load_corpus(a.data, vocab, false);
  ck.cfg.capacity = max_nodes(corpus, {});
  BuiltModel m = build_model(ck.cfg, mode);
  Executor ex(a.threads);

  std::vector<int> preds;
  const Metrics mt = evaluate(ex, m, ck.params, corpus, a.batch, &preds);
  if (!a.quiet) {
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      out << i << '\t' << preds[i] << '\t' << corpus[i].nodes[corpus[i].root].label << '\n';
    }
  }
  out << "accuracy " << std::setprecision(6) << mt.accuracy << "  instances " << corpus.size() << "  "
      << mt.instances_per_s << " inst/s\n";

  RunOptions probe;
  if (trace_requested(probe) && !corpus.empty()) {
    // Trace one representative instance; tracing every batch would dwarf the run itself.
    RunOptions opts;
    opts.threads = a.threads;
    opts.trace = true;
    auto r = ex.run(m.graph, make_feeds(m, corpus.front(), param_feeds(ck.params)), {m.logits}, opts);
    std::ofstream f = open_out(a.trace);
    write_trace_csv(f, r.trace);
    out << "trace of instance 0 written to " << a.trace << "\n";
  }
  return 0;
}

int cmd_bench(const BenchArgs& a, std::ostream& out) {
  BenchConfig c;
  try {
    c.suite = parse_suite(a.suite);
    c.model = parse_model_kind(a.model);
    c.modes.clear();
    for (const auto& m : a.modes) c.modes.push_back(parse_model_mode(m));
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  c.d = a.hidden;
  c.threads = a.threads;
  c.runs = a.runs;
  c.warmup = a.warmup;
  c.seed = a.seed;
  std::ofstream csv;
  if (!a.out.empty()) csv = open_out(a.out);
  auto rows = run_bench(c, [&](const BenchRow& r) {
    out << r.mode << ' ' << r.phase << ' ' << r.shape << " N=" << r.n_instances << " batch=" << r.batch
        << " threads=" << r.threads << "  " << std::fixed << std::setprecision(1) << r.instances_per_s
        << " inst/s  median " << std::setprecision(3) << r.median_ms << " ms  p95 " << r.p95_ms << " ms\n"
        << std::defaultfloat;
  });
  if (csv.is_open()) write_bench_csv(csv, rows);
  return 0;
}

int cmd_gendata(const GenArgs& a, std::ostream& out) {
  TreeShape shape;
  try {
    shape = parse_shape(a.shape);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (a.leaves < 1) throw UsageError("--leaves must be at least 1");
  if (shape == TreeShape::kBalanced && (a.leaves & (a.leaves - 1)) != 0) {
    throw UsageError("balanced trees need a power-of-two leaf count, got " + std::to_string(a.leaves));
  }
  if (a.count < 0 || a.vocab < 1 || a.classes < 1) throw UsageError("--count, --vocab and --classes must be positive");
  std::mt19937_64 rng(a.seed);
  std::vector<TreeInstance> trees;
  for (int i = 0; i < a.count; ++i) trees.push_back(generate_synthetic(shape, a.leaves, a.vocab, a.classes, rng));
  write_corpus(a.out, trees, synthetic_vocab(a.vocab));
  out << "wrote " << trees.size() << " trees to " << a.out << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"rdg: recursive dataflow graphs for tree-structured models"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "train a model and write a checkpoint");
  train_cmd->add_option("--model", ta.model, "treernn|rntn|treelstm")->capture_default_str();
  train_cmd->add_option("--mode", ta.mode, "recursive|iterative")->capture_default_str();
  train_cmd->add_option("--data", ta.data, "training corpus (one s-expression per line)")->required();
  train_cmd->add_option("--valid", ta.valid, "validation corpus");
  train_cmd->add_option("--hidden", ta.hidden, "hidden size d")->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--batch", ta.batch, "instances per step")->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--epochs", ta.epochs)->capture_default_str()->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--threads", ta.threads)->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--seed", ta.seed)->capture_default_str();
  train_cmd->add_option("--lr", ta.lr, "AdaGrad learning rate")->capture_default_str();
  train_cmd->add_option("--l2", ta.l2)->capture_default_str();
  train_cmd->add_option("--classes", ta.classes, "number of classes (default: largest label + 1)");
  train_cmd->add_flag("--per-node-loss", ta.per_node_loss, "supervise every node, not just the root");
  train_cmd->add_option("--out", ta.out, "checkpoint path")->capture_default_str();
  train_cmd->add_option("--metrics", ta.metrics, "per-epoch metrics CSV");

  InferArgs ia;
  auto* infer_cmd = app.add_subcommand("infer", "predict root labels with a checkpoint");
  infer_cmd->add_option("--ckpt", ia.ckpt)->required();
  infer_cmd->add_option("--data", ia.data)->required();
  infer_cmd->add_option("--mode", ia.mode, "recursive|iterative")->capture_default_str();
  infer_cmd->add_option("--threads", ia.threads)->capture_default_str()->check(CLI::PositiveNumber);
  infer_cmd->add_option("--batch", ia.batch)->capture_default_str()->check(CLI::PositiveNumber);
  infer_cmd->add_option("--trace", ia.trace, "trace CSV path when RDG_TRACE=1")->capture_default_str();
  infer_cmd->add_flag("--quiet", ia.quiet, "only print the summary");

  BenchArgs ba;
  auto* bench_cmd = app.add_subcommand("bench", "throughput benchmarks");
  bench_cmd->add_option("--suite", ba.suite, "balancedness|scaling|threads")->required();
  bench_cmd->add_option("--mode,--modes", ba.modes, "recursive and/or iterative")->delimiter(',')->capture_default_str();
  bench_cmd->add_option("--model", ba.model)->capture_default_str();
  bench_cmd->add_option("--hidden", ba.hidden)->capture_default_str()->check(CLI::PositiveNumber);
  bench_cmd->add_option("--threads", ba.threads, "pool size (balancedness, scaling)")->capture_default_str()->check(CLI::PositiveNumber);
  bench_cmd->add_option("--runs", ba.runs)->capture_default_str()->check(CLI::PositiveNumber);
  bench_cmd->add_option("--warmup", ba.warmup)->capture_default_str()->check(CLI::NonNegativeNumber);
  bench_cmd->add_option("--seed", ba.seed)->capture_default_str();
  bench_cmd->add_option("--out", ba.out, "BenchReport CSV");

  GenArgs ga;
  auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic corpus");
  gen_cmd->add_option("--shape", ga.shape, "balanced|moderate|linear")->required();
  gen_cmd->add_option("--leaves", ga.leaves)->required();
  gen_cmd->add_option("--count", ga.count)->required();
  gen_cmd->add_option("--vocab", ga.vocab)->capture_default_str();
  gen_cmd->add_option("--classes", ga.classes)->capture_default_str();
  gen_cmd->add_option("--seed", ga.seed)->capture_default_str();
  gen_cmd->add_option("--out", ga.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return 0;
    if (!app.get_subcommands().empty()) err << app.get_subcommands().front()->help();
    return 2;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(ta, out);
    if (infer_cmd->parsed()) return cmd_infer(ia, out);
    if (bench_cmd->parsed()) return cmd_bench(ba, out);
    if (gen_cmd->parsed()) return cmd_gendata(ga, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace rdg
