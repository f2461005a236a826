#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ralnet/data.hpp"
#include "ralnet/eval.hpp"
#include "ralnet/loss.hpp"
#include "ralnet/net.hpp"

namespace ralnet {

enum class DatasetKind { Synthetic, Store, Brown };
DatasetKind parse_dataset_kind(std::string_view s);

struct RunConfig {
  DatasetKind dataset_kind = DatasetKind::Synthetic;
  std::filesystem::path dataset_path;  // Brown dir or RALP file; generated when synthetic and empty
  int synth_classes = 2000;
  int synth_patches_per_class = 2;

  // Optional held-out Brown subset; otherwise a seeded class split is used.
  std::filesystem::path val_data;
  std::filesystem::path val_pairs;
  double held_out_fraction = 0.1;

  std::size_t pairs_total = 200'000;
  int batch_size = 128;
  int epochs = 50;
  LossConfig loss;
  double lr0 = 10.0;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double dropout_rate = 0.3;
  bool augment = false;
  std::uint64_t seed = 0;
  bool deterministic = true;
  bool validate_each_epoch = true;

  std::filesystem::path model_out;
  std::filesystem::path log_out;

  // 200K pairs, batch 128, 50 epochs.
  static RunConfig strategy1();
  // 5000K pairs, batch 512, 10 epochs.
  static RunConfig strategy2();

  // Throws std::invalid_argument on batch_size < 2, epochs < 1, lr0 <= 0,
  // or other out-of-range values.
  void validate() const;
};

// lr0 * (1 - step / total_steps).
double learning_rate(double lr0, std::size_t step, std::size_t total_steps);

struct LogRow {
  std::size_t step = 0;
  int epoch = 0;
  double lr = 0.0;
  std::optional<double> loss;
  std::optional<double> val_fpr95;
};

// Header "step,epoch,lr,loss,val_fpr95"; absent values are empty fields.
void write_training_log(std::ostream& out, const std::vector<LogRow>& rows);

struct TrainResult {
  DescriptorNet<float> net;
  std::vector<LogRow> log;
  double initial_val_fpr95 = 0.0;
  double final_val_fpr95 = 0.0;
  std::size_t total_steps = 0;
};

// Runs the full loop and writes model_out / log_out if set. `progress`
// receives one line per epoch when non-null.
TrainResult train(const RunConfig& config, std::ostream* progress = nullptr);

// Eval-mode descriptors for the given store patches, in order.
Tensor<float> describe_patches(const DescriptorNet<float>& net, const PatchStore& store,
                               std::span<const std::uint32_t> indices, int batch_size = 256);
Tensor<float> describe_store(const DescriptorNet<float>& net, const PatchStore& store, int batch_size = 256);

// Cosine scores for every test pair.
ScoredPairSet score_pairs(const DescriptorNet<float>& net, const PatchStore& store, const TestPairSet& pairs);

}  // namespace ralnet
