#include "ralnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "ralnet/binary_io.hpp"
#include "ralnet/bmp.hpp"

namespace ralnet {

Tensor<float> PatchStore::gather(std::span<const std::uint32_t> indices) const {
  Tensor<float> t(Shape{static_cast<int>(indices.size()), 1, side, side});
  const std::size_t px = patch_pixels();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) {
      throw std::out_of_range("patch index " + std::to_string(indices[i]) + " out of range (store has " +
                              std::to_string(size()) + ")");
    }
    std::copy_n(pixels.data() + indices[i] * px, px, t.data() + i * px);
  }
  return t;
}

void normalize_patch(std::span<float> patch) {
  double sum = 0.0;
  for (float v : patch) sum += v;
  const double mean = sum / static_cast<double>(patch.size());
  double sq = 0.0;
  for (float v : patch) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(patch.size()));
  if (sd < kDegenerateStd) {
    std::fill(patch.begin(), patch.end(), 0.0f);
    return;
  }
  for (float& v : patch) v = static_cast<float>((v - mean) / sd);
}

// ---------------------------------------------------------------------------
// Bicubic resampling.

namespace {

constexpr double kCubicA = -0.5;

double cubic_weight(double x) {
  x = std::abs(x);
  if (x <= 1.0) return ((kCubicA + 2.0) * x - (kCubicA + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((kCubicA * x - 5.0 * kCubicA) * x + 8.0 * kCubicA) * x - 4.0 * kCubicA;
  return 0.0;
}

// Sample i of a line of length n, linearly extrapolated past the ends.
double line_sample(const double* line, std::ptrdiff_t stride, int n, int i) {
  if (i < 0) {
    const double f0 = line[0], f1 = n > 1 ? line[stride] : line[0];
    return f0 + i * (f1 - f0);
  }
  if (i >= n) {
    const double fl = line[(n - 1) * stride], fp = n > 1 ? line[(n - 2) * stride] : fl;
    return fl + (i - (n - 1)) * (fl - fp);
  }
  return line[i * stride];
}

struct Taps {
  int first;
  double w[4];
};

std::vector<Taps> make_taps(int src, int dst) {
  std::vector<Taps> taps(dst);
  const double scale = static_cast<double>(src) / dst;
  for (int d = 0; d < dst; ++d) {
    const double s = (d + 0.5) * scale - 0.5;
    const int i0 = static_cast<int>(std::floor(s));
    const double t = s - i0;
    taps[d] = {i0 - 1, {cubic_weight(t + 1.0), cubic_weight(t), cubic_weight(1.0 - t), cubic_weight(2.0 - t)}};
  }
  return taps;
}

}  // namespace

std::vector<float> resize_bicubic(std::span<const float> src, int src_side, int dst_side) {
  if (src_side <= 0 || dst_side <= 0 || src.size() != static_cast<std::size_t>(src_side) * src_side) {
    throw std::invalid_argument("resize_bicubic: expected a " + std::to_string(src_side) + "x" +
                                std::to_string(src_side) + " image, got " + std::to_string(src.size()) + " pixels");
  }
  const std::vector<Taps> taps = make_taps(src_side, dst_side);
  std::vector<double> in(src.begin(), src.end());
  // Horizontal pass: src_side rows x dst_side columns.
  std::vector<double> mid(static_cast<std::size_t>(src_side) * dst_side);
  for (int y = 0; y < src_side; ++y) {
    const double* line = in.data() + static_cast<std::size_t>(y) * src_side;
    for (int x = 0; x < dst_side; ++x) {
      const Taps& t = taps[x];
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) acc += t.w[k] * line_sample(line, 1, src_side, t.first + k);
      mid[static_cast<std::size_t>(y) * dst_side + x] = acc;
    }
  }
  std::vector<float> out(static_cast<std::size_t>(dst_side) * dst_side);
  for (int x = 0; x < dst_side; ++x) {
    const double* col = mid.data() + x;
    for (int y = 0; y < dst_side; ++y) {
      const Taps& t = taps[y];
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) acc += t.w[k] * line_sample(col, dst_side, src_side, t.first + k);
      out[static_cast<std::size_t>(y) * dst_side + x] = static_cast<float>(acc);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Brown dataset.

PatchStore load_brown(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw std::runtime_error("brown: '" + dir.string() + "' is not a directory");
  std::vector<fs::path> grids;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (e.is_regular_file() && name.starts_with("patches") && e.path().extension() == ".bmp") {
      grids.push_back(e.path());
    }
  }
  std::sort(grids.begin(), grids.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
  if (grids.empty()) throw std::runtime_error("brown: no patches*.bmp files in '" + dir.string() + "'");

  const fs::path info_path = dir / "info.txt";
  std::ifstream info(info_path);
  if (!info) throw std::runtime_error("brown: cannot open '" + info_path.string() + "'");
  std::vector<std::uint32_t> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(info, line)) {
    ++line_no;
    std::istringstream ls(line);
    long long id;
    if (!(ls >> id)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      throw std::runtime_error("brown: malformed line " + std::to_string(line_no) + " in info.txt");
    }
    if (id < 0) throw std::runtime_error("brown: negative point id on line " + std::to_string(line_no));
    ids.push_back(static_cast<std::uint32_t>(id));
  }
  const std::size_t k = ids.size();
  const std::size_t capacity = grids.size() * kBrownPatchesPerGrid;
  if (k > capacity || k <= capacity - kBrownPatchesPerGrid) {
    throw std::runtime_error("brown: patch count mismatch, info.txt lists " + std::to_string(k) + " patches but " +
                             std::to_string(grids.size()) + " grid file(s) hold between " +
                             std::to_string(capacity - kBrownPatchesPerGrid + 1) + " and " +
                             std::to_string(capacity));
  }

  PatchStore store;
  store.side = kPatchSide;
  store.provenance = Provenance::Brown;
  store.class_ids = std::move(ids);
  store.pixels.resize(k * store.patch_pixels());
  constexpr int per_row = kBrownGridSide / kBrownPatchSide;
  std::vector<float> big(static_cast<std::size_t>(kBrownPatchSide) * kBrownPatchSide);
  std::size_t next = 0;
  for (const fs::path& g : grids) {
    if (next >= k) break;
    const GrayImage img = read_bmp(g);
    if (img.width != kBrownGridSide || img.height != kBrownGridSide) {
      throw std::runtime_error("brown: " + g.string() + " is " + std::to_string(img.width) + "x" +
                               std::to_string(img.height) + ", expected 1024x1024");
    }
    for (int p = 0; p < kBrownPatchesPerGrid && next < k; ++p, ++next) {
      const int ox = (p % per_row) * kBrownPatchSide, oy = (p / per_row) * kBrownPatchSide;
      for (int y = 0; y < kBrownPatchSide; ++y) {
        for (int x = 0; x < kBrownPatchSide; ++x) {
          big[static_cast<std::size_t>(y) * kBrownPatchSide + x] = img.at(ox + x, oy + y) / 255.0f;
        }
      }
      const std::vector<float> small = resize_bicubic(big, kBrownPatchSide, kPatchSide);
      std::span<float> dst = store.patch(next);
      std::copy(small.begin(), small.end(), dst.begin());
      normalize_patch(dst);
    }
  }
  return store;
}

std::size_t TestPairSet::matches() const {
  return static_cast<std::size_t>(std::count_if(pairs.begin(), pairs.end(), [](const TestPair& p) { return p.match; }));
}

TestPairSet parse_test_pairs(const std::string& text, std::size_t store_size) {
  TestPairSet set;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::vector<long long> f;
    long long v;
    while (ls >> v) f.push_back(v);
    if (!ls.eof() || f.size() < 6 || f.size() > 7) {
      throw std::runtime_error("pairs file: malformed row " + std::to_string(line_no) + ": '" + line + "'");
    }
    for (int idx : {0, 3}) {
      if (f[idx] < 0 || static_cast<std::size_t>(f[idx]) >= store_size) {
        throw std::out_of_range("pairs file: row " + std::to_string(line_no) + " references patch " +
                                std::to_string(f[idx]) + " but the store has " + std::to_string(store_size));
      }
    }
    set.pairs.push_back({static_cast<std::uint32_t>(f[0]), static_cast<std::uint32_t>(f[3]), f[1] == f[4]});
  }
  return set;
}

TestPairSet load_test_pairs(const std::filesystem::path& file, std::size_t store_size) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open pairs file '" + file.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_test_pairs(ss.str(), store_size);
}

// ---------------------------------------------------------------------------
// Sampling.

ClassIndex::ClassIndex(const PatchStore& store, std::span<const std::uint32_t> class_filter) {
  std::map<std::uint32_t, std::vector<std::uint32_t>> groups;
  std::vector<std::uint32_t> filter(class_filter.begin(), class_filter.end());
  std::sort(filter.begin(), filter.end());
  for (std::uint32_t i = 0; i < store.size(); ++i) {
    const std::uint32_t c = store.class_ids[i];
    if (!filter.empty() && !std::binary_search(filter.begin(), filter.end(), c)) continue;
    groups[c].push_back(i);
  }
  for (auto& [c, m] : groups) {
    if (m.size() < 2) continue;
    classes_.push_back(c);
    members_.push_back(std::move(m));
  }
}

std::vector<PairIndex> sample_pair_indices(const ClassIndex& index, int n, Rng& rng) {
  if (n < 1) throw std::invalid_argument("sample_pair_batch: batch size must be positive");
  if (static_cast<std::size_t>(n) > index.eligible_classes()) {
    throw std::invalid_argument("sample_pair_batch: batch of " + std::to_string(n) + " needs " + std::to_string(n) +
                                " classes with >= 2 patches, only " + std::to_string(index.eligible_classes()) +
                                " available");
  }
  std::vector<std::uint32_t> order(index.eligible_classes());
  for (std::uint32_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<PairIndex> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    const std::size_t j = i + rng.below(order.size() - i);
    std::swap(order[i], order[j]);
    const auto& m = index.members(order[i]);
    const std::size_t a = rng.below(m.size());
    std::size_t p = rng.below(m.size() - 1);
    if (p >= a) ++p;
    out.push_back({m[a], m[p], index.classes()[order[i]]});
  }
  return out;
}

std::vector<PairIndex> make_pair_list(const ClassIndex& index, std::size_t pairs_total, int n, Rng& rng) {
  const std::size_t batches = std::max<std::size_t>(1, pairs_total / n);
  std::vector<PairIndex> out;
  out.reserve(batches * n);
  for (std::size_t b = 0; b < batches; ++b) {
    auto batch = sample_pair_indices(index, n, rng);
    out.insert(out.end(), batch.begin(), batch.end());
  }
  return out;
}

PairBatch materialize(const PatchStore& store, std::span<const PairIndex> pairs) {
  std::vector<std::uint32_t> a, p;
  PairBatch b;
  for (const PairIndex& pi : pairs) {
    a.push_back(pi.anchor);
    p.push_back(pi.positive);
    b.class_ids.push_back(pi.class_id);
  }
  b.anchors = store.gather(a);
  b.positives = store.gather(p);
  return b;
}

PairBatch sample_pair_batch(const PatchStore& store, int n, Rng& rng) {
  const ClassIndex index(store);
  const auto pairs = sample_pair_indices(index, n, rng);
  return materialize(store, pairs);
}

void apply_transform(std::span<const float> src, std::span<float> dst, int side, PatchTransform t) {
  const std::size_t n = static_cast<std::size_t>(side) * side;
  if (src.size() != n || dst.size() != n) throw std::invalid_argument("apply_transform: size mismatch");
  const int k = ((t.quarter_turns % 4) + 4) % 4;
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      // Invert the rotation to find the pre-rotation pixel, then the flip.
      int sy = y, sx = x;
      for (int r = 0; r < k; ++r) {
        // One counter-clockwise turn maps (y, x) <- (x, side-1-y).
        const int ny = sx, nx = side - 1 - sy;
        sy = ny;
        sx = nx;
      }
      if (t.flip) sx = side - 1 - sx;
      dst[static_cast<std::size_t>(y) * side + x] = src[static_cast<std::size_t>(sy) * side + sx];
    }
  }
}

void augment(PairBatch& batch, Rng& rng) {
  const int side = batch.anchors.shape().h;
  std::vector<float> tmp(static_cast<std::size_t>(side) * side);
  for (int i = 0; i < batch.size(); ++i) {
    PatchTransform t;
    t.flip = rng.bernoulli(0.5);
    t.quarter_turns = static_cast<int>(rng.below(4));
    if (!t.flip && t.quarter_turns == 0) continue;
    for (Tensor<float>* tensor : {&batch.anchors, &batch.positives}) {
      std::span<float> patch = tensor->item(i);
      std::copy(patch.begin(), patch.end(), tmp.begin());
      apply_transform(tmp, patch, side, t);
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic data.

namespace {

struct Texture {
  struct Wave {
    double fx, fy, amp, phase;
  };
  std::vector<Wave> waves;

  double operator()(double x, double y) const {
    double v = 0.0;
    for (const Wave& w : waves) v += w.amp * std::cos(w.fx * x + w.fy * y + w.phase);
    return v;
  }
};

Texture random_texture(Rng& rng, const SyntheticOptions& o) {
  Texture t;
  const double two_pi_per_side = 2.0 * std::numbers::pi / kPatchSide;
  for (int i = 0; i < o.components; ++i) {
    // Frequencies uniform over a disc of radius max_frequency cycles/patch.
    double fx, fy;
    do {
      fx = rng.uniform(-o.max_frequency, o.max_frequency);
      fy = rng.uniform(-o.max_frequency, o.max_frequency);
    } while (fx * fx + fy * fy > o.max_frequency * o.max_frequency || fx * fx + fy * fy < 0.25);
    t.waves.push_back({fx * two_pi_per_side, fy * two_pi_per_side, rng.normal(), rng.uniform(0.0, 2.0 * std::numbers::pi)});
  }
  return t;
}

}  // namespace

PatchStore generate_synthetic(int classes, int patches_per_class, std::uint64_t seed, const SyntheticOptions& o) {
  if (classes < 1 || patches_per_class < 1) {
    throw std::invalid_argument("generate_synthetic: classes and patches_per_class must be positive");
  }
  PatchStore store;
  store.side = kPatchSide;
  store.provenance = Provenance::Synthetic;
  const std::size_t total = static_cast<std::size_t>(classes) * patches_per_class;
  store.class_ids.resize(total);
  store.pixels.resize(total * store.patch_pixels());
  Rng rng(seed);
  const double c0 = (kPatchSide - 1) / 2.0;
  std::size_t next = 0;
  for (int c = 0; c < classes; ++c) {
    const Texture tex = random_texture(rng, o);
    for (int p = 0; p < patches_per_class; ++p, ++next) {
      const double angle = rng.uniform(-o.max_rotation, o.max_rotation);
      const double scale = std::exp(rng.uniform(-o.max_log_scale, o.max_log_scale));
      const double shear = rng.uniform(-0.05, 0.05);
      const double tx = rng.uniform(-o.max_shift, o.max_shift), ty = rng.uniform(-o.max_shift, o.max_shift);
      const double contrast = rng.uniform(0.7, 1.3), brightness = rng.uniform(-0.5, 0.5);
      const double ca = std::cos(angle) * scale, sa = std::sin(angle) * scale;
      std::span<float> dst = store.patch(next);
      for (int y = 0; y < kPatchSide; ++y) {
        for (int x = 0; x < kPatchSide; ++x) {
          const double u = x - c0, v = y - c0;
          const double wx = ca * u - sa * v + shear * v + tx;
          const double wy = sa * u + ca * v + ty;
          const double val = contrast * tex(wx, wy) + brightness + o.noise_std * rng.normal();
          dst[static_cast<std::size_t>(y) * kPatchSide + x] = static_cast<float>(val);
        }
      }
      normalize_patch(dst);
      store.class_ids[next] = static_cast<std::uint32_t>(c);
    }
  }
  return store;
}

void save_patch_store(const PatchStore& store, const std::filesystem::path& path) {
  ByteWriter w;
  w.magic("RALP");
  w.u32(static_cast<std::uint32_t>(store.size()));
  w.u32(static_cast<std::uint32_t>(store.side));
  for (auto c : store.class_ids) w.u32(c);
  w.f32s(store.pixels);
  write_file_bytes(path, w.bytes());
}

PatchStore load_patch_store(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes, "patch store '" + path.string() + "'");
  r.expect_magic("RALP");
  PatchStore store;
  store.provenance = Provenance::Stored;
  const std::uint32_t count = r.u32("count");
  store.side = static_cast<int>(r.u32("side"));
  if (store.side <= 0 || store.side > 4096) throw FormatError(r.what() + ": implausible side length");
  if (static_cast<std::uint64_t>(count) * (4 + 4ull * store.side * store.side) > r.remaining()) {
    throw FormatError(r.what() + ": truncated (header promises " + std::to_string(count) + " patches)");
  }
  store.class_ids.resize(count);
  for (auto& c : store.class_ids) c = r.u32("class ids");
  store.pixels.resize(static_cast<std::size_t>(count) * store.patch_pixels());
  r.f32s(store.pixels, "patch data");
  r.expect_end();
  return store;
}

std::pair<std::vector<std::uint32_t>, std::vector<std::uint32_t>> split_classes(const PatchStore& store,
                                                                                 double held_out_fraction, Rng& rng) {
  std::vector<std::uint32_t> classes(store.class_ids.begin(), store.class_ids.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() < 2) throw std::invalid_argument("split_classes: need at least 2 classes");
  rng.shuffle(classes);
  std::size_t held = static_cast<std::size_t>(std::llround(held_out_fraction * classes.size()));
  held = std::clamp<std::size_t>(held, 1, classes.size() - 1);
  std::vector<std::uint32_t> val(classes.begin(), classes.begin() + held);
  std::vector<std::uint32_t> train(classes.begin() + held, classes.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {std::move(train), std::move(val)};
}

TestPairSet make_validation_pairs(const PatchStore& store, std::span<const std::uint32_t> classes, Rng& rng) {
  const ClassIndex index(store, classes);
  if (index.eligible_classes() < 2) {
    throw std::invalid_argument("make_validation_pairs: need at least 2 classes with >= 2 patches");
  }
  TestPairSet set;
  for (std::size_t k = 0; k < index.eligible_classes(); ++k) {
    set.pairs.push_back({index.members(k)[0], index.members(k)[1], true});
  }
  const std::size_t positives = set.pairs.size();
  for (std::size_t i = 0; i < positives; ++i) {
    const std::size_t a = rng.below(index.eligible_classes());
    std::size_t b = rng.below(index.eligible_classes() - 1);
    if (b >= a) ++b;
    const auto& ma = index.members(a);
    const auto& mb = index.members(b);
    set.pairs.push_back({ma[rng.below(ma.size())], mb[rng.below(mb.size())], false});
  }
  return set;
}

}  // namespace ralnet
