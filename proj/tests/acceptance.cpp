// One PASS/FAIL line per acceptance criterion; exit status 0 only when all pass.
// Optional arguments select criteria by number, e.g. `acceptance 4 5`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "ralnet/binary_io.hpp"
#include "ralnet/bmp.hpp"
#include "ralnet/gradcheck.hpp"
#include "ralnet/loss.hpp"
#include "ralnet/rng.hpp"
#include "ralnet/train.hpp"

using namespace ralnet;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail << "first failure: " << what << "; ";
    pass = pass && ok;
  }
};

int failures = 0;
std::vector<int> selected;

void report(int id, const std::string& title, const std::function<void(Outcome&)>& body) {
  if (!selected.empty() && std::find(selected.begin(), selected.end(), id) == selected.end()) return;
  Outcome o;
  const auto t0 = Clock::now();
  try {
    body(o);
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail << "exception: " << e.what() << "; ";
  }
  if (!o.pass) ++failures;
  std::ostringstream secs;
  secs << std::fixed << std::setprecision(1) << seconds_since(t0);
  std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << title << "  [" << o.detail.str()
            << secs.str() << " s]" << std::endl;
}

// ---------------------------------------------------------------------------
// Independent oracles.

struct MinedOracle {
  double neg;
  int row;
  int col;
};

// Scan every (k, l) in row-major order with exactly one index equal to i;
// strict improvement keeps the first maximum.
MinedOracle exhaustive_negative(const Tensor<double>& d, int i) {
  const int n = d.shape().n;
  MinedOracle best{-INFINITY, -1, -1};
  for (int k = 0; k < n; ++k)
    for (int l = 0; l < n; ++l) {
      if ((k == i) == (l == i)) continue;
      if (best.row < 0 || d.at(k, l) > best.neg) best = {d.at(k, l), k, l};
    }
  return best;
}

// Every distinct score as a candidate threshold; keep the largest with
// TPR >= 0.95.
double fpr95_sweep(const ScoredPairSet& s) {
  std::vector<double> cand = s.scores;
  std::sort(cand.begin(), cand.end(), std::greater<>());
  cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
  std::size_t pos = 0, neg = 0;
  for (auto l : s.labels) (l ? pos : neg)++;
  for (double t : cand) {
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < s.scores.size(); ++i)
      if (s.scores[i] >= t) (s.labels[i] ? tp : fp)++;
    if (static_cast<double>(tp) >= 0.95 * static_cast<double>(pos)) {
      return neg == 0 ? 0.0 : static_cast<double>(fp) / static_cast<double>(neg);
    }
  }
  return 1.0;
}

// Rank of item i = 1 + items ahead of it (higher score, or equal score and
// lower index). Precisions are summed in rank order.
double ap_bruteforce(const ScoredPairSet& s) {
  const std::size_t n = s.scores.size();
  auto ahead = [&](std::size_t j, std::size_t i) {
    return s.scores[j] > s.scores[i] || (s.scores[j] == s.scores[i] && j < i);
  };
  std::vector<std::pair<std::size_t, double>> at_rank;
  for (std::size_t i = 0; i < n; ++i) {
    if (!s.labels[i]) continue;
    std::size_t rank = 1, hits = 1;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && ahead(j, i)) {
        ++rank;
        if (s.labels[j]) ++hits;
      }
    at_rank.emplace_back(rank, static_cast<double>(hits) / static_cast<double>(rank));
  }
  if (at_rank.empty()) return 0.0;
  std::sort(at_rank.begin(), at_rank.end());
  double sum = 0.0;
  for (const auto& [r, p] : at_rank) sum += p;
  return sum / static_cast<double>(at_rank.size());
}

ScoredPairSet random_scored_set(Rng& rng) {
  ScoredPairSet s;
  const int n = 2 + static_cast<int>(rng.below(99));
  const bool coarse = rng.below(2) == 0;
  for (int i = 0; i < n; ++i) {
    s.scores.push_back(coarse ? static_cast<double>(rng.below(7)) / 6.0 : rng.uniform(-1.0, 1.0));
    s.labels.push_back(static_cast<std::uint8_t>(rng.below(2)));
  }
  // At least one match and one non-match.
  const auto m = rng.below(n);
  s.labels[m] = 1;
  s.labels[(m + 1 + rng.below(n - 1)) % n] = 0;
  return s;
}

Tensor<double> random_unit_rows(int n, int dim, Rng& rng) {
  Tensor<double> t(matrix_shape(n, dim));
  for (int r = 0; r < n; ++r) {
    double sq = 0.0;
    for (int k = 0; k < dim; ++k) sq += std::pow(t.at(r, k) = rng.normal(), 2);
    for (int k = 0; k < dim; ++k) t.at(r, k) /= std::sqrt(sq);
  }
  return t;
}

// One 1024x1024 grid of upscaled synthetic patches with 100 matched and
// 100 non-matched pairs.
fs::path write_brown_subset(const fs::path& dir, std::uint64_t seed) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  Rng rng(seed);
  const PatchStore synth = generate_synthetic(128, 2, seed);
  GrayImage img{1024, 1024, std::vector<std::uint8_t>(1024 * 1024)};
  const int side = synth.side;
  for (int p = 0; p < 256; ++p) {
    const int ox = (p % 16) * 64, oy = (p / 16) * 64;
    const auto px = synth.patch(p);
    double lo = *std::min_element(px.begin(), px.end()), hi = *std::max_element(px.begin(), px.end());
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        const double v = px[static_cast<std::size_t>(y * side / 64) * side + x * side / 64];
        img.pixels[static_cast<std::size_t>(oy + y) * 1024 + ox + x] =
            static_cast<std::uint8_t>(std::lround(255.0 * (v - lo) / std::max(hi - lo, 1e-9)));
      }
  }
  write_bmp(dir / "patches0000.bmp", img);
  std::ofstream info(dir / "info.txt");
  for (int p = 0; p < 256; ++p) info << synth.class_ids[p] << " 0\n";
  std::ofstream pairs(dir / "m50_200_200_0.txt");
  for (int c = 0; c < 100; ++c) {
    const int a = 2 * c, b = 2 * c + 1;
    pairs << a << ' ' << synth.class_ids[a] << " 0 " << b << ' ' << synth.class_ids[b] << " 0 0\n";
    const int x = 2 * c, y = 2 * static_cast<int>((c + 1 + rng.below(126)) % 128) + 1;
    pairs << x << ' ' << synth.class_ids[x] << " 0 " << y << ' ' << synth.class_ids[y] << " 0 0\n";
  }
  return dir;
}

}  // namespace

int main(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) selected.push_back(std::stoi(argv[i]));
  std::cout << std::setprecision(6);
  const fs::path work = fs::temp_directory_path() / "ralnet_acceptance";
  fs::create_directories(work);

  report(1, "gradient checks, layers < 1e-6, network < 1e-5, under 60 s", [](Outcome& o) {
    const auto t0 = Clock::now();
    const auto cases = run_gradcheck(1);
    const double t = seconds_since(t0);
    double worst_layer = 0.0, worst_net = 0.0;
    for (const auto& c : cases) {
      o.require(c.pass(), c.name);
      double& worst = c.tolerance > kLayerTolerance ? worst_net : worst_layer;
      worst = std::max(worst, c.max_rel_error);
    }
    o.require(cases.size() >= 10, "case count");
    o.require(t < 60.0, "runtime");
    o.detail << cases.size() << " cases, worst layer/loss " << worst_layer << ", worst network " << worst_net << "; ";
  });

  report(2, "robust loss identities", [](Outcome& o) {
    Rng rng(2);
    double worst_unit = 0.0;
    for (int t = 0; t < 1000; ++t) {
      const int n = 1 + static_cast<int>(rng.below(64));
      std::vector<double> v(n);
      for (auto& x : v) x = rng.uniform(-1.0, 1.0);
      worst_unit = std::max(worst_unit, std::abs(robust_angular_loss(v, v).loss - 1.0));
    }
    o.require(worst_unit < 1e-12, "L = 1 at pos = neg");

    const double lo = 1.0 - std::tanh(2.0), hi = 1.0 + std::tanh(2.0);
    double min_l = INFINITY, max_l = -INFINITY;
    for (int t = 0; t < 500; ++t) {
      const int n = 2 + static_cast<int>(rng.below(15));
      const Tensor<double> a = random_unit_rows(n, 8, rng), p = random_unit_rows(n, 8, rng);
      const auto sel = mine_hard_negatives(similarity_matrix(a, p, SimilarityKind::Cosine));
      for (int i = 0; i < n; ++i) {
        const double l = robust_angular_loss(std::span(&sel.pos[i], 1), std::span(&sel.neg[i], 1)).loss;
        min_l = std::min(min_l, l);
        max_l = std::max(max_l, l);
      }
    }
    for (const auto& [pos, neg] : {std::pair{1.0, -1.0}, std::pair{-1.0, 1.0}}) {
      const double l = robust_angular_loss(std::span(&pos, 1), std::span(&neg, 1)).loss;
      min_l = std::min(min_l, l);
      max_l = std::max(max_l, l);
    }
    o.require(min_l >= lo && max_l <= hi, "per-item bound");

    double worst_even = 0.0;
    for (int k = 0; k <= 200; ++k) {
      const double x = 2.0 * k / 200.0;
      const double pp = x / 2, pn = -x / 2;
      const auto plus = robust_angular_loss(std::span(&pp, 1), std::span(&pn, 1));
      const auto minus = robust_angular_loss(std::span(&pn, 1), std::span(&pp, 1));
      worst_even = std::max(worst_even, std::abs(std::abs(plus.dpos[0]) - std::abs(minus.dpos[0])));
      worst_even = std::max(worst_even, std::abs(std::abs(plus.dneg[0]) - std::abs(minus.dneg[0])));
    }
    o.require(worst_even < 1e-12, "|dL/dx| even");
    o.detail << "max |L-1| " << worst_unit << ", per-item L in [" << min_l << ", " << max_l << "] vs [" << lo << ", "
             << hi << "], max odd part " << worst_even << "; ";
  });

  report(3, "hard-negative mining equals the exhaustive search", [](Outcome& o) {
    Rng rng(3);
    int mismatches = 0;
    for (int t = 0; t < 1000; ++t) {
      const int n = 2 + static_cast<int>(rng.below(15));
      const bool ties = t % 2 == 0;
      SimilarityMatrix<double> d{SimilarityKind::Cosine, Tensor<double>(matrix_shape(n, n))};
      for (auto& v : d.values.vec()) v = ties ? static_cast<double>(rng.below(4)) / 3.0 : rng.uniform(-1.0, 1.0);
      const auto sel = mine_hard_negatives(d);
      for (int i = 0; i < n; ++i) {
        const MinedOracle m = exhaustive_negative(d.values, i);
        if (sel.pos[i] != d(i, i) || sel.neg[i] != m.neg || sel.neg_row[i] != m.row || sel.neg_col[i] != m.col) {
          ++mismatches;
        }
      }
    }
    o.require(mismatches == 0, "selection mismatch");
    o.detail << "1000 matrices, N in [2, 16], half with ties, " << mismatches << " mismatches; ";
  });

  report(4, "FPR95 and AP equal brute-force oracles, invariant under increasing maps", [](Outcome& o) {
    Rng rng(4);
    int fpr_bad = 0, ap_bad = 0, inv_bad = 0;
    for (int t = 0; t < 500; ++t) {
      const ScoredPairSet s = random_scored_set(rng);
      if (fpr95(s).fpr != fpr95_sweep(s)) ++fpr_bad;
      if (average_precision(s) != ap_bruteforce(s)) ++ap_bad;
      for (const auto& f : std::vector<std::function<double(double)>>{
               [](double x) { return 2.0 * x + 1.0; }, [](double x) { return std::exp(3.0 * x); },
               [](double x) { return x * x * x + x; }}) {
        ScoredPairSet m = s;
        for (auto& v : m.scores) v = f(v);
        if (fpr95(m).fpr != fpr95(s).fpr || average_precision(m) != average_precision(s)) ++inv_bad;
      }
    }
    o.require(fpr_bad == 0, "fpr95 oracle");
    o.require(ap_bad == 0, "AP oracle");
    o.require(inv_bad == 0, "monotone invariance");
    o.detail << "500 sets of 2..100 items: " << fpr_bad << " FPR95, " << ap_bad << " AP, " << inv_bad
             << " invariance mismatches; ";
  });

  report(5, "loss surfaces on a 256 x 256 grid", [](Outcome& o) {
    const int g = 256;
    const auto robust = dump_loss_surface(LossVariant::RobustAngular, 1.0, g);
    o.require(robust.size() == static_cast<std::size_t>(g) * g, "grid size");
    double global = 0.0, diag_min = INFINITY, min_mag = INFINITY;
    bool rows_peak_on_diagonal = true;
    for (int i = 0; i < g; ++i) {
      const auto* row = &robust[static_cast<std::size_t>(i) * g];
      o.require(row[i].pos == row[i].neg, "diagonal cell");
      double best = -1.0;
      int best_j = -1;
      for (int j = 0; j < g; ++j) {
        const double m = row[j].dpos_abs;
        min_mag = std::min({min_mag, row[j].dpos_abs, row[j].dneg_abs});
        global = std::max(global, m);
        if (m > best) best = m, best_j = j;
      }
      rows_peak_on_diagonal = rows_peak_on_diagonal && row[best_j].dpos_abs == row[i].dpos_abs;
      diag_min = std::min(diag_min, row[i].dpos_abs);
    }
    o.require(rows_peak_on_diagonal, "row maxima on the diagonal");
    o.require(diag_min == global, "global maximum along the whole diagonal");
    o.require(min_mag > 0.0, "robust derivative strictly positive");

    const auto hinge = dump_loss_surface(LossVariant::HingeTriplet, 1.0, g);
    std::size_t flat = 0, sloped = 0;
    bool flat_exact = true, sloped_nonzero = true;
    for (const auto& c : hinge) {
      if (c.pos - c.neg >= 1.0) {
        ++flat;
        flat_exact = flat_exact && c.dpos_abs == 0.0 && c.dneg_abs == 0.0 && c.loss == 0.0;
      } else {
        ++sloped;
        sloped_nonzero = sloped_nonzero && c.dpos_abs > 0.0 && c.dneg_abs > 0.0;
      }
    }
    o.require(flat > 0 && flat_exact, "hinge zero region");
    o.require(sloped_nonzero, "hinge slope outside the region");
    o.detail << "robust max |dL| " << global << " on diagonal, min " << min_mag << "; hinge zero cells " << flat
             << " of " << hinge.size() << "; ";
  });

  report(6, "desk-scale training on synthetic 2000 x 2: robust <= 25%, hinge <= 35%", [&](Outcome& o) {
    RunConfig base = RunConfig::strategy1();
    base.synth_classes = 2000;
    base.synth_patches_per_class = 2;
    base.held_out_fraction = 0.1;
    base.pairs_total = 1800;
    base.batch_size = 128;
    base.epochs = 5;
    base.seed = 1;

    auto run = [&](LossVariant v, const std::string& tag, double& secs) {
      RunConfig c = base;
      c.loss.variant = v;
      c.loss.margin = 1.0;
      c.model_out = work / (tag + ".raln");
      c.log_out = work / (tag + ".log.csv");
      std::cout << "  [" << tag << "]" << std::endl;
      const auto t0 = Clock::now();
      TrainResult r = train(c, &std::cout);
      secs = seconds_since(t0);
      return r;
    };
    double t_robust = 0, t_repeat = 0, t_hinge = 0;
    const TrainResult robust = run(LossVariant::RobustAngular, "robust", t_robust);
    const TrainResult repeat = run(LossVariant::RobustAngular, "robust_repeat", t_repeat);
    const TrainResult hinge = run(LossVariant::HingeTriplet, "hinge", t_hinge);

    o.require(robust.final_val_fpr95 <= 0.25, "robust final FPR95");
    o.require(robust.final_val_fpr95 < robust.initial_val_fpr95, "robust improved");
    o.require(hinge.final_val_fpr95 <= 0.35, "hinge final FPR95");
    o.require(hinge.final_val_fpr95 < hinge.initial_val_fpr95, "hinge improved");
    o.require(read_file_bytes(work / "robust.raln") == read_file_bytes(work / "robust_repeat.raln") &&
                  read_file_bytes(work / "robust.log.csv") == read_file_bytes(work / "robust_repeat.log.csv"),
              "seeded rerun reproduces the model and log");
    o.require(std::max({t_robust, t_repeat, t_hinge}) < 1800.0, "runtime");
    o.detail << std::fixed << std::setprecision(1) << "robust " << 100 * robust.initial_val_fpr95 << "% -> "
             << 100 * robust.final_val_fpr95 << "% in " << t_robust << " s, hinge " << 100 * hinge.initial_val_fpr95
             << "% -> " << 100 * hinge.final_val_fpr95 << "% in " << t_hinge << " s, "
             << robust.total_steps << " steps; ordering "
             << (robust.final_val_fpr95 < hinge.final_val_fpr95    ? "robust < hinge"
                 : robust.final_val_fpr95 == hinge.final_val_fpr95 ? "robust = hinge"
                                                                    : "robust > hinge")
             << " (reported only); " << std::defaultfloat;
  });

  report(7, "strategy profiles accepted unchanged; eval-brown prints the FPR95 table", [&](Outcome& o) {
    const RunConfig s1 = RunConfig::strategy1(), s2 = RunConfig::strategy2();
    o.require(s1.pairs_total == 200000 && s1.batch_size == 128 && s1.epochs == 50, "strategy1 values");
    o.require(s2.pairs_total == 5000000 && s2.batch_size == 512 && s2.epochs == 10, "strategy2 values");
    for (const RunConfig* s : {&s1, &s2}) {
      o.require(s->lr0 == 10.0 && s->momentum == 0.9 && s->weight_decay == 1e-4 && s->dropout_rate == 0.3,
                "optimiser values");
      s->validate();
    }
    const PatchStore store = generate_synthetic(1024, 2, 7);
    const ClassIndex index(store);
    Rng rng(7);
    for (const RunConfig* s : {&s1, &s2}) {
      const auto list = make_pair_list(index, s->pairs_total, s->batch_size, rng);
      const std::size_t batches = s->pairs_total / static_cast<std::size_t>(s->batch_size);
      o.require(list.size() == batches * static_cast<std::size_t>(s->batch_size), "pair list length");
      bool unique = true;
      for (std::size_t b = 0; b < std::min<std::size_t>(batches, 50); ++b) {
        std::vector<std::uint32_t> cls;
        for (int k = 0; k < s->batch_size; ++k) cls.push_back(list[b * s->batch_size + k].class_id);
        std::sort(cls.begin(), cls.end());
        unique = unique && std::adjacent_find(cls.begin(), cls.end()) == cls.end();
      }
      o.require(unique, "class-unique batches");
      o.detail << s->pairs_total << " pairs -> " << batches << " batches of " << s->batch_size << "; ";
    }

    DescriptorNet<float> net(NetConfig::l2net(7));
    save_model(net, work / "liberty.raln");
    std::vector<std::string> args{"eval-brown", "--model", (work / "liberty.raln").string()};
    const char* names[] = {"notredame", "yosemite"};
    for (int k = 0; k < 2; ++k) {
      const fs::path d = write_brown_subset(work / names[k], 20 + k);
      args.insert(args.end(), {"--data", d.string(), "--pairs", (d / "m50_200_200_0.txt").string()});
    }
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    o.require(code == 0, "eval-brown exit code: " + err.str());
    const std::string table = out.str();
    o.require(table.find("Training") != std::string::npos && table.find("FPR95 (%)") != std::string::npos,
              "table header");
    o.require(table.find("notredame") != std::string::npos && table.find("yosemite") != std::string::npos &&
                  table.find("Mean") != std::string::npos,
              "table rows");
    std::cout << table;
  });

  report(8, "identical train runs write bitwise-identical model and log", [&](Outcome& o) {
    auto train_once = [&](const std::string& tag) {
      std::ostringstream out, err;
      const int code = cli::run({"train", "--synth-classes", "200", "--batch-size", "16", "--pairs-total", "64",
                                 "--epochs", "2", "--seed", "8", "--augment", "--out", (work / tag).string()},
                                out, err);
      if (code != 0) throw std::runtime_error("train failed: " + err.str());
    };
    train_once("det_a.raln");
    train_once("det_b.raln");
    const auto ma = read_file_bytes(work / "det_a.raln"), mb = read_file_bytes(work / "det_b.raln");
    const auto la = read_file_bytes(work / "det_a.raln.log.csv"), lb = read_file_bytes(work / "det_b.raln.log.csv");
    o.require(ma == mb, "model bytes");
    o.require(la == lb, "log bytes");
    o.detail << ma.size() << " model bytes, " << la.size() << " log bytes compared; ";
  });

  std::cout << (failures == 0 ? "all criteria PASS" : std::to_string(failures) + " criteria FAIL") << std::endl;
  return failures == 0 ? 0 : 1;
}
