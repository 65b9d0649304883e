#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "spn/autograd.hpp"

namespace spn::ag {

// Scalar function of bound parameters, recorded on the given tape.
using ScalarFn =
    std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

struct GradCheckOptions {
  double step = 1e-5;
  // 0 checks every coordinate; otherwise this many random unit directions.
  int directional_probes = 0;
  std::uint64_t seed = 1;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  int checks = 0;
  // Values at the worst check.
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  void record(double analytic, double numeric);
};

// Compares taped gradients of `f` at `params` with central differences.
// Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
GradCheckReport check_gradients(const ScalarFn& f, std::vector<Tensor<double>> params,
                                const GradCheckOptions& options = {});

}  // namespace spn::ag
