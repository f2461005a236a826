#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ralnet/rng.hpp"
#include "ralnet/tensor.hpp"

namespace ralnet {

inline constexpr int kPatchSide = 32;
inline constexpr int kBrownPatchSide = 64;
inline constexpr int kBrownGridSide = 1024;
inline constexpr int kBrownPatchesPerGrid = (kBrownGridSide / kBrownPatchSide) * (kBrownGridSide / kBrownPatchSide);
inline constexpr double kDegenerateStd = 1e-6;

enum class Provenance { Brown, Synthetic, Stored };

// Square single-channel patches with a 3D point id each. Patches are stored
// contiguously and per-patch normalized.
struct PatchStore {
  int side = kPatchSide;
  std::vector<float> pixels;
  std::vector<std::uint32_t> class_ids;
  Provenance provenance = Provenance::Synthetic;

  std::size_t size() const { return class_ids.size(); }
  std::size_t patch_pixels() const { return static_cast<std::size_t>(side) * side; }
  std::span<const float> patch(std::size_t i) const {
    return std::span<const float>(pixels).subspan(i * patch_pixels(), patch_pixels());
  }
  std::span<float> patch(std::size_t i) { return std::span<float>(pixels).subspan(i * patch_pixels(), patch_pixels()); }

  // N x 1 x side x side tensor of the given patches, in order.
  Tensor<float> gather(std::span<const std::uint32_t> indices) const;
};

// Zero mean, unit (population) std in place; std below kDegenerateStd
// yields all zeros.
void normalize_patch(std::span<float> patch);

// Catmull-Rom (a = -0.5) bicubic resampling of a square image with
// half-pixel-centred sample positions. Taps that fall outside the image are
// linearly extrapolated from the two nearest border pixels, so degree-1
// polynomials are reproduced everywhere.
std::vector<float> resize_bicubic(std::span<const float> src, int src_side, int dst_side);

// Brown layout: patches*.bmp grids (lexicographic order) plus info.txt.
PatchStore load_brown(const std::filesystem::path& dir);

struct TestPair {
  std::uint32_t first = 0;
  std::uint32_t second = 0;
  bool match = false;
};

struct TestPairSet {
  std::vector<TestPair> pairs;
  std::size_t matches() const;
  std::size_t non_matches() const { return pairs.size() - matches(); }
};

// Rows "patchID1 pointID1 x patchID2 pointID2 x [x]"; label = equal point
// ids. Patch ids must be < store_size.
TestPairSet load_test_pairs(const std::filesystem::path& file, std::size_t store_size);
TestPairSet parse_test_pairs(const std::string& text, std::size_t store_size);

// ---------------------------------------------------------------------------
// Pair sampling.

struct PairIndex {
  std::uint32_t anchor = 0;
  std::uint32_t positive = 0;
  std::uint32_t class_id = 0;
};

// Patches grouped by class; only classes with >= 2 patches are eligible.
class ClassIndex {
 public:
  // With an empty filter every class is indexed.
  explicit ClassIndex(const PatchStore& store, std::span<const std::uint32_t> class_filter = {});

  std::size_t eligible_classes() const { return classes_.size(); }
  const std::vector<std::uint32_t>& classes() const { return classes_; }
  const std::vector<std::uint32_t>& members(std::size_t k) const { return members_[k]; }

 private:
  std::vector<std::uint32_t> classes_;
  std::vector<std::vector<std::uint32_t>> members_;
};

// N distinct classes without replacement and two distinct patches from each.
std::vector<PairIndex> sample_pair_indices(const ClassIndex& index, int n, Rng& rng);

// floor(pairs_total / n) class-unique batches of n pairs, concatenated.
// This is the fixed pair list one epoch walks through.
std::vector<PairIndex> make_pair_list(const ClassIndex& index, std::size_t pairs_total, int n, Rng& rng);

struct PairBatch {
  Tensor<float> anchors;    // N x 1 x S x S
  Tensor<float> positives;  // N x 1 x S x S
  std::vector<std::uint32_t> class_ids;

  int size() const { return static_cast<int>(class_ids.size()); }
};

PairBatch materialize(const PatchStore& store, std::span<const PairIndex> pairs);
PairBatch sample_pair_batch(const PatchStore& store, int n, Rng& rng);

// Horizontal flip (optional) followed by k counter-clockwise quarter turns.
struct PatchTransform {
  bool flip = false;
  int quarter_turns = 0;
};

void apply_transform(std::span<const float> src, std::span<float> dst, int side, PatchTransform t);

// Per pair: flip with probability 0.5, then k ~ U{0..3} quarter turns; the
// two members of a pair receive the same transform.
void augment(PairBatch& batch, Rng& rng);

// ---------------------------------------------------------------------------
// Synthetic data.

struct SyntheticOptions {
  int components = 6;        // cosine components per class texture
  double max_frequency = 3;  // cycles per patch width
  double max_rotation = 0.6;
  double max_log_scale = 0.2;
  double max_shift = 2.5;
  double noise_std = 0.6;  // relative to texture std
};

PatchStore generate_synthetic(int classes, int patches_per_class, std::uint64_t seed,
                              const SyntheticOptions& opts = {});

// "RALP" store file.
void save_patch_store(const PatchStore& store, const std::filesystem::path& path);
PatchStore load_patch_store(const std::filesystem::path& path);

// Seeded class split: returns (train_classes, held_out_classes) with
// round(fraction * total) classes held out (at least one).
std::pair<std::vector<std::uint32_t>, std::vector<std::uint32_t>> split_classes(const PatchStore& store,
                                                                                 double held_out_fraction,
                                                                                 Rng& rng);

// One matched pair per class (its first two patches) and an equal number
// of non-matched pairs drawn across distinct classes.
TestPairSet make_validation_pairs(const PatchStore& store, std::span<const std::uint32_t> classes, Rng& rng);

}  // namespace ralnet
