#include "ralnet/train.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "ralnet/parallel.hpp"

namespace ralnet {

DatasetKind parse_dataset_kind(std::string_view s) {
  if (s == "synthetic") return DatasetKind::Synthetic;
  if (s == "store") return DatasetKind::Store;
  if (s == "brown") return DatasetKind::Brown;
  throw std::invalid_argument("unknown dataset kind '" + std::string(s) + "' (synthetic | store | brown)");
}

RunConfig RunConfig::strategy1() {
  RunConfig c;
  c.pairs_total = 200'000;
  c.batch_size = 128;
  c.epochs = 50;
  return c;
}

RunConfig RunConfig::strategy2() {
  RunConfig c;
  c.pairs_total = 5'000'000;
  c.batch_size = 512;
  c.epochs = 10;
  return c;
}

void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("run config: " + m); };
  if (batch_size < 2) fail("batch_size must be >= 2, got " + std::to_string(batch_size));
  if (epochs < 1) fail("epochs must be >= 1, got " + std::to_string(epochs));
  if (!(lr0 > 0.0)) fail("lr0 must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) fail("momentum must be in [0, 1)");
  if (weight_decay < 0.0) fail("weight_decay must be >= 0");
  if (loss.margin < 0.0) fail("margin must be >= 0");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must be in [0, 1)");
  if (pairs_total < static_cast<std::size_t>(batch_size)) fail("pairs_total must be at least batch_size");
  if (!(held_out_fraction > 0.0 && held_out_fraction < 1.0)) fail("held_out_fraction must be in (0, 1)");
  if (dataset_kind != DatasetKind::Synthetic && dataset_path.empty()) fail("dataset path is required");
  if (dataset_kind == DatasetKind::Synthetic && dataset_path.empty() &&
      (synth_classes < 2 || synth_patches_per_class < 2)) {
    fail("synthetic data needs >= 2 classes with >= 2 patches each");
  }
  if (val_data.empty() != val_pairs.empty()) fail("val_data and val_pairs must be given together");
}

double learning_rate(double lr0, std::size_t step, std::size_t total_steps) {
  return lr0 * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
}

void write_training_log(std::ostream& out, const std::vector<LogRow>& rows) {
  out << "step,epoch,lr,loss,val_fpr95\n";
  std::ostringstream line;
  for (const LogRow& r : rows) {
    line.str("");
    line << std::setprecision(9) << r.step << ',' << r.epoch << ',' << r.lr << ',';
    if (r.loss) line << *r.loss;
    line << ',';
    if (r.val_fpr95) line << *r.val_fpr95;
    out << line.str() << '\n';
  }
}

Tensor<float> describe_patches(const DescriptorNet<float>& net, const PatchStore& store,
                               std::span<const std::uint32_t> indices, int batch_size) {
  const int dim = net.config().output_dim;
  Tensor<float> out(matrix_shape(static_cast<int>(indices.size()), dim));
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::size_t count = std::min<std::size_t>(batch_size, indices.size() - start);
    const Tensor<float> d = net.infer(store.gather(indices.subspan(start, count)));
    std::copy(d.vec().begin(), d.vec().end(), out.data() + start * dim);
  }
  return out;
}

Tensor<float> describe_store(const DescriptorNet<float>& net, const PatchStore& store, int batch_size) {
  std::vector<std::uint32_t> all(store.size());
  std::iota(all.begin(), all.end(), 0u);
  return describe_patches(net, store, all, batch_size);
}

ScoredPairSet score_pairs(const DescriptorNet<float>& net, const PatchStore& store, const TestPairSet& pairs) {
  std::vector<std::uint32_t> unique;
  for (const TestPair& p : pairs.pairs) {
    unique.push_back(p.first);
    unique.push_back(p.second);
  }
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  std::unordered_map<std::uint32_t, std::size_t> row;
  for (std::size_t i = 0; i < unique.size(); ++i) row[unique[i]] = i;
  const Tensor<float> desc = describe_patches(net, store, unique);
  ScoredPairSet set;
  for (const TestPair& p : pairs.pairs) {
    set.scores.push_back(cosine_score(desc.item(static_cast<int>(row[p.first])),
                                      desc.item(static_cast<int>(row[p.second]))));
    set.labels.push_back(p.match ? 1 : 0);
  }
  return set;
}

namespace {

PatchStore load_training_store(const RunConfig& c) {
  switch (c.dataset_kind) {
    case DatasetKind::Synthetic:
      if (c.dataset_path.empty()) return generate_synthetic(c.synth_classes, c.synth_patches_per_class, c.seed);
      return load_patch_store(c.dataset_path);
    case DatasetKind::Store:
      return load_patch_store(c.dataset_path);
    case DatasetKind::Brown:
      return load_brown(c.dataset_path);
  }
  throw std::invalid_argument("unknown dataset kind");
}

Tensor<float> stack_rows(const Tensor<float>& a, const Tensor<float>& b) {
  Shape s = a.shape();
  s.n += b.shape().n;
  Tensor<float> out(s);
  std::copy(a.vec().begin(), a.vec().end(), out.data());
  std::copy(b.vec().begin(), b.vec().end(), out.data() + a.size());
  return out;
}

Tensor<float> row_block(const Tensor<float>& t, int first, int count) {
  Shape s = t.shape();
  s.n = count;
  const std::size_t per = t.shape().per_item();
  std::vector<float> data(t.data() + first * per, t.data() + (first + count) * per);
  return Tensor<float>(s, std::move(data));
}

}  // namespace

TrainResult train(const RunConfig& config, std::ostream* progress) {
  config.validate();
  set_deterministic(config.deterministic);

  const PatchStore store = load_training_store(config);
  Rng master(config.seed);
  Rng split_rng = master.split();
  Rng val_rng = master.split();
  Rng pair_rng = master.split();
  Rng aug_rng = master.split();

  std::vector<std::uint32_t> train_classes;
  PatchStore val_store_owned;
  const PatchStore* val_store = &store;
  TestPairSet val_pairs;
  if (!config.val_data.empty()) {
    val_store_owned = config.val_data.extension() == ".ralp" ? load_patch_store(config.val_data)
                                                             : load_brown(config.val_data);
    val_store = &val_store_owned;
    val_pairs = load_test_pairs(config.val_pairs, val_store->size());
  } else {
    auto [tr, held] = split_classes(store, config.held_out_fraction, split_rng);
    train_classes = std::move(tr);
    val_pairs = make_validation_pairs(store, held, val_rng);
  }

  const ClassIndex index(store, train_classes);
  const std::vector<PairIndex> pair_list = make_pair_list(index, config.pairs_total, config.batch_size, pair_rng);
  const std::size_t steps_per_epoch = pair_list.size() / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(config.epochs);

  NetConfig net_cfg = NetConfig::l2net(config.seed, config.dropout_rate);
  TrainResult result{DescriptorNet<float>(net_cfg), {}, 0.0, 0.0, total_steps};
  DescriptorNet<float>& net = result.net;
  const auto params = net.params();

  std::size_t step = 0;
  auto validate = [&] {
    try {
      return fpr95(score_pairs(net, *val_store, val_pairs)).fpr;
    } catch (const NumericError& e) {
      throw NumericError("training diverged, validation after step " + std::to_string(step) + ": " + e.what());
    }
  };

  result.initial_val_fpr95 = validate();
  result.final_val_fpr95 = result.initial_val_fpr95;
  result.log.push_back({0, 0, config.lr0, std::nullopt, result.initial_val_fpr95});
  if (progress) {
    *progress << "epoch 0: val_fpr95 " << result.initial_val_fpr95 * 100.0 << "% (" << steps_per_epoch
              << " steps/epoch, " << total_steps << " total)\n";
  }

  const int n = config.batch_size;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b, ++step) {
      double lr = 0.0;
      double step_loss = 0.0;
      try {
        PairBatch batch = materialize(store, std::span<const PairIndex>(pair_list).subspan(b * n, n));
        if (config.augment) augment(batch, aug_rng);
        const Tensor<float> input = stack_rows(batch.anchors, batch.positives);
        net.zero_grad();
        const Tensor<float> desc = net.forward(input, Mode::Train);
        const Tensor<float> a = row_block(desc, 0, n);
        const Tensor<float> p = row_block(desc, n, n);
        const SimilarityMatrix<float> d = similarity_matrix(a, p, config.loss.similarity);
        const TripletSelection<float> sel = mine_hard_negatives(d);
        const LossResult loss = compute_loss(config.loss, sel);
        if (!std::isfinite(loss.loss)) throw NumericError("non-finite loss " + std::to_string(loss.loss));
        auto [ga, gp] = loss_backward_to_descriptors(a, p, d, sel, loss);
        net.backward(stack_rows(ga, gp));
        lr = learning_rate(config.lr0, step, total_steps);
        sgd_step<float>(params, lr, config.momentum, config.weight_decay);
        step_loss = loss.loss;
      } catch (const NumericError& e) {
        throw NumericError("training diverged at step " + std::to_string(step + 1) + ": " + e.what());
      }
      epoch_loss += step_loss;
      result.log.push_back({step + 1, epoch, lr, step_loss, std::nullopt});
    }
    if (config.validate_each_epoch || epoch == config.epochs) {
      result.final_val_fpr95 = validate();
      result.log.back().val_fpr95 = result.final_val_fpr95;
    }
    if (progress) {
      *progress << "epoch " << epoch << ": mean loss " << epoch_loss / static_cast<double>(steps_per_epoch);
      if (result.log.back().val_fpr95) *progress << ", val_fpr95 " << result.final_val_fpr95 * 100.0 << "%";
      *progress << '\n';
    }
  }

  if (!config.model_out.empty()) save_model(net, config.model_out);
  if (!config.log_out.empty()) {
    std::ofstream log(config.log_out);
    if (!log) throw std::runtime_error("cannot open log file '" + config.log_out.string() + "'");
    write_training_log(log, result.log);
  }
  return result;
}

}  // namespace ralnet
