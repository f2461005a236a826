#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ralnet/layers.hpp"

namespace ralnet {

struct ConvLayerSpec {
  int kernel = 3;
  int channels = 32;
  int stride = 1;
  int pad = 1;
  friend bool operator==(const ConvLayerSpec&, const ConvLayerSpec&) = default;
};

// Fully convolutional descriptor network: every conv is followed by batch
// norm, every conv but the last by ReLU, and dropout sits immediately before
// the last conv. The flattened output is L2-normalized per row.
struct NetConfig {
  std::vector<ConvLayerSpec> layers;
  double dropout_rate = 0.3;
  int output_dim = 128;
  int input_size = 32;
  std::uint64_t seed = 0;

  // conv3x3/32, conv3x3/32, conv3x3/64/s2, conv3x3/64, conv3x3/128/s2,
  // conv3x3/128, dropout, conv8x8/128/p0.
  static NetConfig l2net(std::uint64_t seed = 0, double dropout_rate = 0.3);

  // Throws std::invalid_argument unless the spatial arithmetic ends at 1x1
  // with output_dim channels and dropout_rate is in [0, 1).
  void validate() const;
};

template <typename T>
class DescriptorNet {
 public:
  explicit DescriptorNet(const NetConfig& config);

  const NetConfig& config() const { return config_; }

  // patches: N x 1 x S x S, pre-normalized. Returns N x output_dim unit rows.
  // Train mode caches intermediates for backward() and updates BN running
  // statistics.
  Tensor<T> forward(const Tensor<T>& patches, Mode mode);

  // Eval-mode forward; does not touch any state and is safe to call
  // concurrently.
  Tensor<T> infer(const Tensor<T>& patches) const;

  // Consumes the cache of the last train-mode forward, accumulates
  // gradients into every parameter buffer and returns dL/dpatches.
  Tensor<T> backward(const Tensor<T>& grad_descriptors);

  // ReLU on/off state of every unit in the last train-mode forward, block by
  // block. Used to keep finite-difference probes on one linear piece.
  std::vector<std::uint8_t> activation_pattern() const;

  void zero_grad();
  std::vector<ParamBuffer<T>*> params();
  std::vector<const ParamBuffer<T>*> params() const;
  std::vector<BatchNormState<T>*> batch_norms();
  std::vector<const BatchNormState<T>*> batch_norms() const;
  std::size_t parameter_count() const;
  std::size_t layer_count() const { return blocks_.size(); }

  // Sets every BN layer's running statistics to the batch statistics of
  // `patches` (biased variance), layer by layer.
  void freeze_batch_statistics(const Tensor<T>& patches);

  // Reseeds the dropout mask generator.
  void reseed_dropout(std::uint64_t seed) { dropout_rng_ = Rng(seed); }

  template <typename U>
  DescriptorNet<U> cast() const;

 private:
  template <typename U>
  friend class DescriptorNet;

  struct Block {
    ConvLayerSpec spec;
    ParamBuffer<T> weights;
    BatchNormState<T> bn;
    bool relu = true;
  };
  struct Cache {
    bool valid = false;
    std::vector<Tensor<T>> conv_inputs;
    std::vector<BatchNormCache<T>> bn;
    Tensor<T> dropout_mask;
    Tensor<T> output;
    std::vector<T> norms;
  };

  DescriptorNet() = default;
  void check_input(const Tensor<T>& patches) const;

  NetConfig config_;
  std::vector<Block> blocks_;
  Rng dropout_rng_;
  Cache cache_;
};

// Model file ("RALN"): little-endian
//   magic[4] = "RALN", u32 version, u32 input_size, u32 entry_count,
//   entries: u32 op, u32 ndims, u32 dims[ndims], u32 nattrs, u32 attrs[nattrs]
//   payload: f32 arrays for every entry with data, in entry order.
// Ops: 1 conv (dims Cout,Cin,K,K; attrs stride,pad; payload weights),
//      2 batch norm (dims C; attrs eps and momentum as f32 bits; payload
//        running mean then running var),
//      3 relu, 4 dropout (attrs rate as f32 bits), 5 l2 normalize (dims d).
inline constexpr std::uint32_t kModelVersion = 1;

void save_model(const DescriptorNet<float>& net, const std::filesystem::path& path);
DescriptorNet<float> load_model(const std::filesystem::path& path);

std::vector<std::uint8_t> serialize_model(const DescriptorNet<float>& net);
DescriptorNet<float> deserialize_model(const std::vector<std::uint8_t>& bytes);

}  // namespace ralnet
