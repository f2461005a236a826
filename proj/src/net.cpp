#include "ralnet/net.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "ralnet/binary_io.hpp"

namespace ralnet {

NetConfig NetConfig::l2net(std::uint64_t seed, double dropout_rate) {
  NetConfig cfg;
  cfg.layers = {
      {3, 32, 1, 1}, {3, 32, 1, 1}, {3, 64, 2, 1}, {3, 64, 1, 1}, {3, 128, 2, 1}, {3, 128, 1, 1}, {8, 128, 1, 0},
  };
  cfg.dropout_rate = dropout_rate;
  cfg.output_dim = 128;
  cfg.input_size = 32;
  cfg.seed = seed;
  return cfg;
}

void NetConfig::validate() const {
  if (layers.empty()) throw std::invalid_argument("net config: no layers");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw std::invalid_argument("net config: dropout_rate must be in [0, 1), got " + std::to_string(dropout_rate));
  }
  if (input_size <= 0) throw std::invalid_argument("net config: input_size must be positive");
  int extent = input_size;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const ConvLayerSpec& l = layers[i];
    if (l.kernel <= 0 || l.channels <= 0) {
      throw std::invalid_argument("net config: layer " + std::to_string(i) + " has non-positive kernel or channels");
    }
    try {
      extent = conv_output_extent(extent, l.kernel, ConvSpec{l.stride, l.pad});
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("net config: layer " + std::to_string(i) + ": " + e.what());
    }
    if (l.stride != 1 && l.stride != 2) {
      throw std::invalid_argument("net config: layer " + std::to_string(i) + " stride must be 1 or 2");
    }
  }
  if (extent != 1) {
    throw std::invalid_argument("net config: final spatial extent is " + std::to_string(extent) + "x" +
                                std::to_string(extent) + ", expected 1x1");
  }
  if (layers.back().channels != output_dim) {
    throw std::invalid_argument("net config: last layer has " + std::to_string(layers.back().channels) +
                                " channels but output_dim is " + std::to_string(output_dim));
  }
}

template <typename T>
DescriptorNet<T>::DescriptorNet(const NetConfig& config) : config_(config) {
  config_.validate();
  Rng init(config_.seed);
  int in_c = 1;
  for (std::size_t i = 0; i < config_.layers.size(); ++i) {
    const ConvLayerSpec& l = config_.layers[i];
    Tensor<T> w(Shape{l.channels, in_c, l.kernel, l.kernel});
    // Kaiming fan-in uniform: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
    const double bound = std::sqrt(6.0 / (static_cast<double>(in_c) * l.kernel * l.kernel));
    for (std::size_t j = 0; j < w.size(); ++j) w[j] = static_cast<T>(init.uniform(-bound, bound));
    Block b;
    b.spec = l;
    b.weights = ParamBuffer<T>("conv" + std::to_string(i), std::move(w));
    b.bn = BatchNormState<T>(l.channels);
    b.relu = i + 1 < config_.layers.size();
    blocks_.push_back(std::move(b));
    in_c = l.channels;
  }
  dropout_rng_ = Rng(config_.seed ^ 0xd1b54a32d192ed03ULL);
}

template <typename T>
void DescriptorNet<T>::check_input(const Tensor<T>& patches) const {
  const Shape& s = patches.shape();
  if (s.c != 1 || s.h != config_.input_size || s.w != config_.input_size) {
    throw std::invalid_argument("descriptor net: expected N x 1 x " + std::to_string(config_.input_size) + " x " +
                                std::to_string(config_.input_size) + " patches, got " + s.str());
  }
  if (s.n < 1) throw std::invalid_argument("descriptor net: empty batch");
}

template <typename T>
Tensor<T> DescriptorNet<T>::forward(const Tensor<T>& patches, Mode mode) {
  if (mode == Mode::Eval) return infer(patches);
  check_input(patches);
  Cache c;
  c.conv_inputs.reserve(blocks_.size());
  c.bn.resize(blocks_.size());
  Tensor<T> x = patches;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    Block& b = blocks_[i];
    if (i + 1 == blocks_.size()) x = dropout_forward(x, config_.dropout_rate, dropout_rng_, mode, &c.dropout_mask);
    c.conv_inputs.push_back(x);
    Tensor<T> y = conv2d_forward(x, b.weights.value, ConvSpec{b.spec.stride, b.spec.pad});
    y = batch_norm_forward(y, b.bn, mode, &c.bn[i]);
    if (b.relu) y = relu_forward(y);
    y.require_finite(b.weights.name.c_str());
    x = std::move(y);
  }
  Tensor<T> out = l2_normalize_rows_forward(x.reshaped(matrix_shape(x.shape().n, static_cast<int>(x.shape().per_item()))),
                                            &c.norms);
  c.output = out;
  c.valid = true;
  cache_ = std::move(c);
  return out;
}

template <typename T>
Tensor<T> DescriptorNet<T>::infer(const Tensor<T>& patches) const {
  check_input(patches);
  Tensor<T> x = patches;
  for (const Block& b : blocks_) {
    Tensor<T> y = conv2d_forward(x, b.weights.value, ConvSpec{b.spec.stride, b.spec.pad});
    y = batch_norm_infer(y, b.bn);
    if (b.relu) y = relu_forward(y);
    y.require_finite(b.weights.name.c_str());
    x = std::move(y);
  }
  return l2_normalize_rows_forward(x.reshaped(matrix_shape(x.shape().n, static_cast<int>(x.shape().per_item()))));
}

template <typename T>
Tensor<T> DescriptorNet<T>::backward(const Tensor<T>& grad_descriptors) {
  if (!cache_.valid) throw std::logic_error("descriptor net: backward called without a train-mode forward");
  if (grad_descriptors.shape() != cache_.output.shape()) {
    throw std::invalid_argument("descriptor net: gradient " + grad_descriptors.shape().str() +
                                " does not match output " + cache_.output.shape().str());
  }
  Tensor<T> g = l2_normalize_rows_backward(cache_.output, std::span<const T>(cache_.norms), grad_descriptors);
  for (std::size_t i = blocks_.size(); i-- > 0;) {
    Block& b = blocks_[i];
    const BatchNormCache<T>& bc = cache_.bn[i];
    g = g.reshaped(bc.normalized.shape());
    if (b.relu) g = relu_backward(bc.normalized, g);
    g = batch_norm_backward(bc, g);
    g = conv2d_backward(cache_.conv_inputs[i], b.weights, ConvSpec{b.spec.stride, b.spec.pad}, g);
    if (i + 1 == blocks_.size()) g = dropout_backward(cache_.dropout_mask, g);
  }
  cache_ = Cache{};
  return g;
}

template <typename T>
std::vector<std::uint8_t> DescriptorNet<T>::activation_pattern() const {
  if (!cache_.valid) throw std::logic_error("descriptor net: no train-mode forward to inspect");
  std::vector<std::uint8_t> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (!blocks_[i].relu) continue;
    for (const T v : cache_.bn[i].normalized.vec()) out.push_back(v > T(0) ? 1 : 0);
  }
  return out;
}

template <typename T>
void DescriptorNet<T>::zero_grad() {
  for (Block& b : blocks_) b.weights.zero_grad();
}

template <typename T>
std::vector<ParamBuffer<T>*> DescriptorNet<T>::params() {
  std::vector<ParamBuffer<T>*> out;
  for (Block& b : blocks_) out.push_back(&b.weights);
  return out;
}

template <typename T>
std::vector<const ParamBuffer<T>*> DescriptorNet<T>::params() const {
  std::vector<const ParamBuffer<T>*> out;
  for (const Block& b : blocks_) out.push_back(&b.weights);
  return out;
}

template <typename T>
std::vector<BatchNormState<T>*> DescriptorNet<T>::batch_norms() {
  std::vector<BatchNormState<T>*> out;
  for (Block& b : blocks_) out.push_back(&b.bn);
  return out;
}

template <typename T>
std::vector<const BatchNormState<T>*> DescriptorNet<T>::batch_norms() const {
  std::vector<const BatchNormState<T>*> out;
  for (const Block& b : blocks_) out.push_back(&b.bn);
  return out;
}

template <typename T>
std::size_t DescriptorNet<T>::parameter_count() const {
  std::size_t n = 0;
  for (const Block& b : blocks_) n += b.weights.value.size();
  return n;
}

template <typename T>
void DescriptorNet<T>::freeze_batch_statistics(const Tensor<T>& patches) {
  check_input(patches);
  Tensor<T> x = patches;
  for (Block& b : blocks_) {
    Tensor<T> y = conv2d_forward(x, b.weights.value, ConvSpec{b.spec.stride, b.spec.pad});
    BatchNormState<T> scratch = b.bn;
    BatchNormCache<T> bc;
    y = batch_norm_forward(y, scratch, Mode::Train, &bc);
    for (int c = 0; c < b.bn.channels; ++c) {
      b.bn.running_mean[c] = bc.batch_mean[c];
      b.bn.running_var[c] = bc.batch_var[c];
    }
    if (b.relu) y = relu_forward(y);
    x = std::move(y);
  }
}

template <typename T>
template <typename U>
DescriptorNet<U> DescriptorNet<T>::cast() const {
  DescriptorNet<U> out;
  out.config_ = config_;
  out.dropout_rng_ = dropout_rng_;
  for (const Block& b : blocks_) {
    typename DescriptorNet<U>::Block nb;
    nb.spec = b.spec;
    nb.weights = ParamBuffer<U>(b.weights.name, b.weights.value.template cast<U>(), b.weights.decay_exempt);
    nb.bn = BatchNormState<U>(b.bn.channels);
    nb.bn.running_mean = b.bn.running_mean.template cast<U>();
    nb.bn.running_var = b.bn.running_var.template cast<U>();
    nb.bn.momentum = b.bn.momentum;
    nb.bn.eps = b.bn.eps;
    nb.relu = b.relu;
    out.blocks_.push_back(std::move(nb));
  }
  return out;
}

template class DescriptorNet<float>;
template class DescriptorNet<double>;
template DescriptorNet<double> DescriptorNet<float>::cast<double>() const;
template DescriptorNet<float> DescriptorNet<double>::cast<float>() const;
template DescriptorNet<float> DescriptorNet<float>::cast<float>() const;
template DescriptorNet<double> DescriptorNet<double>::cast<double>() const;

// ---------------------------------------------------------------------------
// Model file.

namespace {

enum class ModelOp : std::uint32_t { Conv = 1, BatchNorm = 2, Relu = 3, Dropout = 4, L2Normalize = 5 };

struct Entry {
  ModelOp op;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint32_t> attrs;
};

std::uint32_t f32_bits(double v) { return std::bit_cast<std::uint32_t>(static_cast<float>(v)); }
double bits_f32(std::uint32_t v) { return std::bit_cast<float>(v); }

}  // namespace

std::vector<std::uint8_t> serialize_model(const DescriptorNet<float>& net) {
  const NetConfig& cfg = net.config();
  const auto params = net.params();
  const auto bns = net.batch_norms();
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    const ConvLayerSpec& l = cfg.layers[i];
    const Shape& ws = params[i]->value.shape();
    if (i + 1 == cfg.layers.size()) entries.push_back({ModelOp::Dropout, {}, {f32_bits(cfg.dropout_rate)}});
    entries.push_back({ModelOp::Conv,
                       {static_cast<std::uint32_t>(ws.n), static_cast<std::uint32_t>(ws.c),
                        static_cast<std::uint32_t>(ws.h), static_cast<std::uint32_t>(ws.w)},
                       {static_cast<std::uint32_t>(l.stride), static_cast<std::uint32_t>(l.pad)}});
    entries.push_back({ModelOp::BatchNorm,
                       {static_cast<std::uint32_t>(bns[i]->channels)},
                       {f32_bits(bns[i]->eps), f32_bits(bns[i]->momentum)}});
    if (i + 1 < cfg.layers.size()) entries.push_back({ModelOp::Relu, {}, {}});
  }
  entries.push_back({ModelOp::L2Normalize, {static_cast<std::uint32_t>(cfg.output_dim)}, {}});

  ByteWriter w;
  w.magic("RALN");
  w.u32(kModelVersion);
  w.u32(static_cast<std::uint32_t>(cfg.input_size));
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const Entry& e : entries) {
    w.u32(static_cast<std::uint32_t>(e.op));
    w.u32(static_cast<std::uint32_t>(e.dims.size()));
    for (auto d : e.dims) w.u32(d);
    w.u32(static_cast<std::uint32_t>(e.attrs.size()));
    for (auto a : e.attrs) w.u32(a);
  }
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    w.f32s(params[i]->value.span());
    w.f32s(bns[i]->running_mean.span());
    w.f32s(bns[i]->running_var.span());
  }
  return w.take();
}

DescriptorNet<float> deserialize_model(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "model file");
  r.expect_magic("RALN");
  const std::uint32_t version = r.u32("version");
  if (version != kModelVersion) {
    throw FormatError("model file: unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(kModelVersion) + ")");
  }
  NetConfig cfg;
  cfg.input_size = static_cast<int>(r.u32("input size"));
  const std::uint32_t count = r.u32("entry count");
  if (count > 4096) throw FormatError("model file: implausible entry count " + std::to_string(count));
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.op = static_cast<ModelOp>(r.u32("op code"));
    const std::uint32_t nd = r.u32("dim count");
    if (nd > 8) throw FormatError("model file: implausible dim count");
    for (std::uint32_t k = 0; k < nd; ++k) e.dims.push_back(r.u32("dims"));
    const std::uint32_t na = r.u32("attr count");
    if (na > 8) throw FormatError("model file: implausible attr count");
    for (std::uint32_t k = 0; k < na; ++k) e.attrs.push_back(r.u32("attrs"));
    entries.push_back(std::move(e));
  }

  std::vector<double> eps, momentum;
  int prev_c = 1;
  for (const Entry& e : entries) {
    switch (e.op) {
      case ModelOp::Conv: {
        if (e.dims.size() != 4 || e.attrs.size() != 2 || e.dims[2] != e.dims[3]) {
          throw FormatError("model file: malformed conv entry");
        }
        if (static_cast<int>(e.dims[1]) != prev_c) throw FormatError("model file: conv input channels mismatch");
        cfg.layers.push_back({static_cast<int>(e.dims[2]), static_cast<int>(e.dims[0]), static_cast<int>(e.attrs[0]),
                              static_cast<int>(e.attrs[1])});
        prev_c = static_cast<int>(e.dims[0]);
        break;
      }
      case ModelOp::BatchNorm:
        if (e.dims.size() != 1 || e.attrs.size() != 2 || static_cast<int>(e.dims[0]) != prev_c) {
          throw FormatError("model file: malformed batch norm entry");
        }
        eps.push_back(bits_f32(e.attrs[0]));
        momentum.push_back(bits_f32(e.attrs[1]));
        break;
      case ModelOp::Dropout:
        if (e.attrs.size() != 1) throw FormatError("model file: malformed dropout entry");
        cfg.dropout_rate = bits_f32(e.attrs[0]);
        break;
      case ModelOp::L2Normalize:
        if (e.dims.size() != 1) throw FormatError("model file: malformed l2 normalize entry");
        cfg.output_dim = static_cast<int>(e.dims[0]);
        break;
      case ModelOp::Relu:
        break;
      default:
        throw FormatError("model file: unknown op code " + std::to_string(static_cast<std::uint32_t>(e.op)));
    }
  }
  if (eps.size() != cfg.layers.size()) throw FormatError("model file: every conv needs a batch norm entry");
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("model file: ") + e.what());
  }

  DescriptorNet<float> net(cfg);
  auto params = net.params();
  auto bns = net.batch_norms();
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    r.f32s(params[i]->value.span(), "conv weights");
    r.f32s(bns[i]->running_mean.span(), "batch norm mean");
    r.f32s(bns[i]->running_var.span(), "batch norm variance");
    bns[i]->eps = eps[i];
    bns[i]->momentum = momentum[i];
  }
  r.expect_end();
  return net;
}

void save_model(const DescriptorNet<float>& net, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_model(net));
}

DescriptorNet<float> load_model(const std::filesystem::path& path) { return deserialize_model(read_file_bytes(path)); }

}  // namespace ralnet
