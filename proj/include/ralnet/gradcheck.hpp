#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "ralnet/tensor.hpp"

namespace ralnet {

inline constexpr double kFiniteDifferenceStep = 1e-5;
inline constexpr double kLayerTolerance = 1e-6;
inline constexpr double kNetworkTolerance = 1e-5;

struct GradcheckCase {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool pass() const { return max_rel_error < tolerance; }
};

// max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|); 0 when both are zero.
double max_relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric);

// Central differences of a scalar function w.r.t. every element of `x`
// (perturbed in place and restored).
std::vector<double> numeric_gradient(const std::function<double()>& f, std::vector<double>& x,
                                     double h = kFiniteDifferenceStep);

// Every finite-difference suite: numeric-core layers, loss variants through
// the similarity matrix, and the full descriptor network (Jacobian-vector
// products). All in 64-bit.
std::vector<GradcheckCase> run_gradcheck(std::uint64_t seed);

// One line per case plus a summary; returns true when all pass.
bool print_gradcheck(std::ostream& out, const std::vector<GradcheckCase>& cases);

}  // namespace ralnet
