#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "ralnet/gradcheck.hpp"
#include "ralnet/parallel.hpp"
#include "ralnet/train.hpp"

namespace ralnet::cli {

void write_report(std::ostream& out, const EvalReport& report) {
  out << std::setprecision(10);
  out << "metric: " << report.metric << '\n' << "value: " << report.value << '\n';
  if (report.metric == "fpr95") out << "threshold: " << report.threshold << '\n';
  out << "count: " << report.count << '\n';
  for (std::size_t i = 0; i < report.per_set.size(); ++i) out << "per_set[" << i << "]: " << report.per_set[i] << '\n';
  for (const auto& [k, v] : report.metadata) out << k << ": " << v << '\n';
}

namespace {

struct Shared {
  std::uint64_t seed = 0;
  bool deterministic = true;
  int threads = 0;
  std::string config;
  std::string out;
};

void add_shared(CLI::App* app, Shared& s) {
  app->add_option("--seed", s.seed, "RNG seed");
  app->add_flag("--deterministic,!--no-deterministic", s.deterministic,
                "Fixed work partitioning for bitwise-reproducible results (default on)");
  app->add_option("--threads", s.threads, "Worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
  app->add_option("--out", s.out, "Output path");
  app->add_option("--config", s.config, "key=value file; command-line flags take precedence")
      ->check(CLI::ExistingFile);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Expands `--config FILE` into `--key=value` arguments placed ahead of the
// command-line ones. Keys already given on the command line are skipped;
// unknown keys throw.
std::vector<std::string> expand_config(const CLI::App& app, const std::vector<std::string>& args) {
  if (args.empty()) return args;
  const CLI::App* sub = nullptr;
  for (const CLI::App* c : app.get_subcommands([](const CLI::App*) { return true; })) {
    if (c->get_name() == args[0]) sub = c;
  }
  if (sub == nullptr) return args;

  std::string path;
  std::set<std::string> given;
  for (std::size_t i = 1; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) != 0) continue;
    const auto eq = a.find('=');
    const std::string name = a.substr(2, eq == std::string::npos ? std::string::npos : eq - 2);
    given.insert(name);
    if (name == "config") {
      if (eq != std::string::npos) {
        path = a.substr(eq + 1);
      } else if (i + 1 < args.size()) {
        path = args[i + 1];
      }
    }
  }
  if (path.empty() || !std::filesystem::is_regular_file(path)) return args;

  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
  std::vector<std::string> expanded{args[0]};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line.substr(0, line.find('#')));
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(path + ":" + std::to_string(line_no) + ": expected key=value");
    }
    std::string key = trim(t.substr(0, eq));
    std::replace(key.begin(), key.end(), '_', '-');
    if (key == "config" || key == "help" || sub->get_option_no_throw("--" + key) == nullptr) {
      throw std::invalid_argument(path + ":" + std::to_string(line_no) + ": unknown key '" + key + "' for " +
                                  sub->get_name());
    }
    if (given.count(key)) continue;
    expanded.push_back("--" + key + "=" + trim(t.substr(eq + 1)));
  }
  expanded.insert(expanded.end(), args.begin() + 1, args.end());
  return expanded;
}

void apply_exec(const Shared& s) {
  set_deterministic(s.deterministic);
  set_num_threads(s.threads);
}

PatchStore load_patches(const std::filesystem::path& p) {
  if (std::filesystem::is_directory(p)) return load_brown(p);
  return load_patch_store(p);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw std::runtime_error("failed writing '" + path + "'");
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string profile = "strategy1";
  std::string dataset_kind = "synthetic";
  std::string data;
  std::optional<int> synth_classes, synth_per_class;
  std::string val_data, val_pairs;
  std::optional<double> held_out;
  std::optional<std::size_t> pairs_total;
  std::optional<int> batch_size, epochs;
  std::string loss = "robust", similarity = "cosine";
  std::optional<double> margin, lr0, momentum, weight_decay, dropout;
  bool augment = false;
  bool validate_each_epoch = true;
  std::string log;
};

RunConfig build_run_config(const TrainArgs& a, const Shared& s) {
  RunConfig c;
  if (a.profile == "strategy1") {
    c = RunConfig::strategy1();
  } else if (a.profile == "strategy2") {
    c = RunConfig::strategy2();
  } else {
    throw std::invalid_argument("unknown profile '" + a.profile + "' (strategy1 | strategy2)");
  }
  c.dataset_kind = parse_dataset_kind(a.dataset_kind);
  c.dataset_path = a.data;
  if (a.synth_classes) c.synth_classes = *a.synth_classes;
  if (a.synth_per_class) c.synth_patches_per_class = *a.synth_per_class;
  c.val_data = a.val_data;
  c.val_pairs = a.val_pairs;
  if (a.held_out) c.held_out_fraction = *a.held_out;
  if (a.pairs_total) c.pairs_total = *a.pairs_total;
  if (a.batch_size) c.batch_size = *a.batch_size;
  if (a.epochs) c.epochs = *a.epochs;
  c.loss.variant = parse_loss_variant(a.loss);
  c.loss.similarity = parse_similarity_kind(a.similarity);
  if (a.margin) c.loss.margin = *a.margin;
  if (a.lr0) c.lr0 = *a.lr0;
  if (a.momentum) c.momentum = *a.momentum;
  if (a.weight_decay) c.weight_decay = *a.weight_decay;
  if (a.dropout) c.dropout_rate = *a.dropout;
  c.augment = a.augment;
  c.validate_each_epoch = a.validate_each_epoch;
  c.seed = s.seed;
  c.deterministic = s.deterministic;
  c.model_out = s.out;
  if (!a.log.empty()) {
    c.log_out = a.log;
  } else if (!s.out.empty()) {
    c.log_out = s.out + ".log.csv";
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

struct EvalBrownArgs {
  std::string model;
  std::vector<std::string> data;
  std::vector<std::string> pairs;
  std::string train_name;
  std::vector<std::string> test_names;
};

int cmd_eval_brown(const EvalBrownArgs& a, const Shared& s, std::ostream& out) {
  if (a.data.size() != a.pairs.size()) {
    throw std::invalid_argument("eval-brown: give one --pairs file per --data entry");
  }
  if (!a.test_names.empty() && a.test_names.size() != a.data.size()) {
    throw std::invalid_argument("eval-brown: give one --test-name per --data entry");
  }
  const DescriptorNet<float> net = load_model(a.model);
  const std::string train_name =
      a.train_name.empty() ? std::filesystem::path(a.model).stem().string() : a.train_name;

  std::ostringstream report;
  out << std::left << std::setw(16) << "Training" << std::setw(16) << "Test" << std::right << std::setw(10)
      << "FPR95 (%)" << '\n';
  double sum = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const PatchStore store = load_patches(a.data[i]);
    const TestPairSet pairs = load_test_pairs(a.pairs[i], store.size());
    EvalReport r = fpr95_report(score_pairs(net, store, pairs));
    const std::string test_name = a.test_names.empty() ? std::filesystem::path(a.data[i]).filename().string()
                                                       : a.test_names[i];
    out << std::left << std::setw(16) << train_name << std::setw(16) << test_name << std::right << std::setw(10)
        << std::fixed << std::setprecision(2) << r.value * 100.0 << std::defaultfloat << '\n';
    sum += r.value;
    r.metadata["train"] = train_name;
    r.metadata["test"] = test_name;
    write_report(report, r);
  }
  if (a.data.size() > 1) {
    out << std::left << std::setw(32) << "Mean" << std::right << std::setw(10) << std::fixed << std::setprecision(2)
        << sum / static_cast<double>(a.data.size()) * 100.0 << std::defaultfloat << '\n';
  }
  if (!s.out.empty()) write_text(s.out, report.str());
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalTasksArgs {
  std::string task;
  std::vector<std::string> first, second, labels;
  std::string reference;
  std::vector<std::string> targets;
  std::string queries, query_labels, pool, pool_labels;
  double distractor_ratio = 0.0;
};

EvalReport eval_task(const EvalTasksArgs& a) {
  if (a.task == "verification") {
    if (a.first.empty() || a.first.size() != a.second.size() || a.first.size() != a.labels.size()) {
      throw std::invalid_argument("verification: give matching counts of --first, --second and --labels");
    }
    std::vector<VerificationSet> sets;
    for (std::size_t i = 0; i < a.first.size(); ++i) {
      sets.push_back({import_descriptors(a.first[i]), import_descriptors(a.second[i]),
                      read_binary_labels(a.labels[i])});
    }
    return verification_map(sets);
  }
  if (a.task == "matching") {
    if (a.reference.empty() || a.targets.empty()) {
      throw std::invalid_argument("matching: --reference and at least one --target are required");
    }
    const Tensor<float> ref = import_descriptors(a.reference);
    std::vector<Tensor<float>> targets;
    for (const auto& t : a.targets) targets.push_back(import_descriptors(t));
    return matching_map(ref, targets);
  }
  if (a.task == "retrieval") {
    if (a.queries.empty() || a.query_labels.empty() || a.pool.empty() || a.pool_labels.empty()) {
      throw std::invalid_argument("retrieval: --queries, --query-labels, --pool and --pool-labels are required");
    }
    const auto ql = read_labels(a.query_labels);
    const auto pl = read_labels(a.pool_labels);
    return retrieval_map(import_descriptors(a.queries), ql, import_descriptors(a.pool), pl,
                         RetrievalOptions{a.distractor_ratio});
  }
  throw std::invalid_argument("unknown task '" + a.task + "' (verification | matching | retrieval)");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Robust angular loss descriptor toolkit"};
  app.require_subcommand(1);

  Shared shared;
  TrainArgs ta;
  CLI::App* train_cmd = app.add_subcommand("train", "Train a descriptor network");
  add_shared(train_cmd, shared);
  train_cmd->add_option("--profile", ta.profile, "strategy1 (200K pairs, batch 128, 50 epochs) | strategy2 "
                                                 "(5000K pairs, batch 512, 10 epochs)");
  train_cmd->add_option("--dataset-kind", ta.dataset_kind, "synthetic | store | brown");
  train_cmd->add_option("--data", ta.data, "Brown directory or RALP store (synthetic: generated when absent)");
  train_cmd->add_option("--synth-classes", ta.synth_classes);
  train_cmd->add_option("--synth-per-class", ta.synth_per_class);
  train_cmd->add_option("--val-data", ta.val_data, "Held-out Brown directory or RALP store");
  train_cmd->add_option("--val-pairs", ta.val_pairs, "Pair file for --val-data");
  train_cmd->add_option("--held-out", ta.held_out, "Fraction of classes held out for validation");
  train_cmd->add_option("--pairs-total", ta.pairs_total, "Pairs per epoch");
  train_cmd->add_option("--batch-size", ta.batch_size);
  train_cmd->add_option("--epochs", ta.epochs);
  train_cmd->add_option("--loss", ta.loss, "robust | hinge | contrastive");
  train_cmd->add_option("--similarity", ta.similarity, "cosine | l2");
  train_cmd->add_option("--margin", ta.margin);
  train_cmd->add_option("--lr0", ta.lr0);
  train_cmd->add_option("--momentum", ta.momentum);
  train_cmd->add_option("--weight-decay", ta.weight_decay);
  train_cmd->add_option("--dropout", ta.dropout);
  train_cmd->add_flag("--augment", ta.augment, "Random flips and quarter turns");
  train_cmd->add_flag("--validate-each-epoch,!--validate-at-end", ta.validate_each_epoch);
  train_cmd->add_option("--log", ta.log, "Training log CSV (default: <out>.log.csv)");

  EvalBrownArgs eb;
  CLI::App* eval_brown_cmd = app.add_subcommand("eval-brown", "FPR95 on Brown test pairs");
  add_shared(eval_brown_cmd, shared);
  eval_brown_cmd->add_option("--model", eb.model)->required();
  eval_brown_cmd->add_option("--data", eb.data, "Brown directory or RALP store (repeatable)")->required();
  eval_brown_cmd->add_option("--pairs", eb.pairs, "Pair file per --data (repeatable)")->required();
  eval_brown_cmd->add_option("--train-name", eb.train_name);
  eval_brown_cmd->add_option("--test-name", eb.test_names);

  EvalTasksArgs et;
  CLI::App* eval_tasks_cmd = app.add_subcommand("eval-tasks", "Verification, matching or retrieval mAP");
  add_shared(eval_tasks_cmd, shared);
  eval_tasks_cmd->add_option("--task", et.task, "verification | matching | retrieval")->required();
  eval_tasks_cmd->add_option("--first", et.first, "Descriptor file (repeatable)");
  eval_tasks_cmd->add_option("--second", et.second, "Descriptor file (repeatable)");
  eval_tasks_cmd->add_option("--labels", et.labels, "Pair labels (repeatable)");
  eval_tasks_cmd->add_option("--reference", et.reference);
  eval_tasks_cmd->add_option("--target", et.targets, "Descriptor file (repeatable)");
  eval_tasks_cmd->add_option("--queries", et.queries);
  eval_tasks_cmd->add_option("--query-labels", et.query_labels);
  eval_tasks_cmd->add_option("--pool", et.pool);
  eval_tasks_cmd->add_option("--pool-labels", et.pool_labels);
  eval_tasks_cmd->add_option("--distractor-ratio", et.distractor_ratio)->check(CLI::NonNegativeNumber);

  CLI::App* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  add_shared(gradcheck_cmd, shared);

  std::string describe_model, describe_patches_path;
  CLI::App* describe_cmd = app.add_subcommand("describe", "Descriptors for every patch of a store");
  add_shared(describe_cmd, shared);
  describe_cmd->add_option("--model", describe_model)->required();
  describe_cmd->add_option("--patches", describe_patches_path, "RALP store or Brown directory")->required();

  std::string surface_loss = "robust";
  double surface_margin = 1.0;
  int surface_grid = 256;
  CLI::App* surface_cmd = app.add_subcommand("loss-surface", "Loss and derivative magnitudes on a grid");
  add_shared(surface_cmd, shared);
  surface_cmd->add_option("--loss", surface_loss, "robust | hinge | contrastive");
  surface_cmd->add_option("--margin", surface_margin);
  surface_cmd->add_option("--grid", surface_grid)->check(CLI::Range(2, 1 << 14));

  int synth_classes = 2000, synth_per_class = 2;
  CLI::App* synth_cmd = app.add_subcommand("synth-gen", "Write a synthetic patch store");
  add_shared(synth_cmd, shared);
  synth_cmd->add_option("--classes", synth_classes)->check(CLI::PositiveNumber);
  synth_cmd->add_option("--per-class", synth_per_class)->check(CLI::PositiveNumber);

  std::vector<std::string> expanded;
  try {
    expanded = expand_config(app, args);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  std::vector<std::string> reversed(expanded.rbegin(), expanded.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    apply_exec(shared);
    if (train_cmd->parsed()) {
      const RunConfig cfg = build_run_config(ta, shared);
      const TrainResult r = train(cfg, &out);
      out << "initial val FPR95: " << r.initial_val_fpr95 * 100.0 << "%\n"
          << "final val FPR95: " << r.final_val_fpr95 * 100.0 << "%\n";
      if (!cfg.model_out.empty()) out << "model: " << cfg.model_out.string() << '\n';
      if (!cfg.log_out.empty()) out << "log: " << cfg.log_out.string() << '\n';
      return 0;
    }
    if (eval_brown_cmd->parsed()) return cmd_eval_brown(eb, shared, out);
    if (eval_tasks_cmd->parsed()) {
      const EvalReport r = eval_task(et);
      write_report(out, r);
      if (!shared.out.empty()) {
        std::ostringstream s;
        write_report(s, r);
        write_text(shared.out, s.str());
      }
      return 0;
    }
    if (gradcheck_cmd->parsed()) {
      const bool ok = print_gradcheck(out, run_gradcheck(shared.seed));
      return ok ? 0 : 1;
    }
    if (describe_cmd->parsed()) {
      if (shared.out.empty()) throw std::invalid_argument("describe: --out is required");
      const DescriptorNet<float> net = load_model(describe_model);
      const PatchStore store = load_patches(describe_patches_path);
      const Tensor<float> d = describe_store(net, store);
      export_descriptors(d, shared.out);
      out << "wrote " << d.shape().n << " x " << d.shape().c << " descriptors to " << shared.out << '\n';
      return 0;
    }
    if (surface_cmd->parsed()) {
      const auto cells = dump_loss_surface(parse_loss_variant(surface_loss), surface_margin, surface_grid);
      if (shared.out.empty()) {
        write_loss_surface_csv(out, cells);
      } else {
        std::ostringstream s;
        write_loss_surface_csv(s, cells);
        write_text(shared.out, s.str());
      }
      return 0;
    }
    if (synth_cmd->parsed()) {
      if (shared.out.empty()) throw std::invalid_argument("synth-gen: --out is required");
      const PatchStore store = generate_synthetic(synth_classes, synth_per_class, shared.seed);
      save_patch_store(store, shared.out);
      out << "wrote " << store.size() << " patches (" << synth_classes << " classes) to " << shared.out << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace ralnet::cli
