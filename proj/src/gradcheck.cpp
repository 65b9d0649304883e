#include "spn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace spn::ag {

namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor<double>>& params) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.bind(p, false));
  return f(tape, vars).item();
}

double rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace

void GradCheckReport::record(double analytic, double numeric) {
  const double e = rel_error(analytic, numeric);
  if (e > max_rel_error || checks == 0) {
    max_rel_error = e;
    worst_analytic = analytic;
    worst_numeric = numeric;
  }
  ++checks;
}

GradCheckReport check_gradients(const ScalarFn& f, std::vector<Tensor<double>> params,
                                const GradCheckOptions& options) {
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& p : params) vars.push_back(tape.bind(p, true));
    Var<double> loss = f(tape, vars);
    tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }

  GradCheckReport report;
  const double h = options.step;
  if (options.directional_probes <= 0) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (std::size_t j = 0; j < params[i].data.size(); ++j) {
        const double saved = params[i].data[j];
        params[i].data[j] = saved + h;
        const double up = evaluate(f, params);
        params[i].data[j] = saved - h;
        const double down = evaluate(f, params);
        params[i].data[j] = saved;
        const double numeric = (up - down) / (2 * h);
        report.record(analytic[i][j], numeric);
      }
    }
    return report;
  }

  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int probe = 0; probe < options.directional_probes; ++probe) {
    std::vector<std::vector<double>> dir(params.size());
    double norm2 = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      dir[i].resize(params[i].data.size());
      for (double& d : dir[i]) {
        d = normal(rng);
        norm2 += d * d;
      }
    }
    const double inv = 1.0 / std::sqrt(norm2);
    double directional = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (std::size_t j = 0; j < dir[i].size(); ++j) {
        dir[i][j] *= inv;
        directional += analytic[i][j] * dir[i][j];
      }
    }
    auto shifted = [&](double sign) {
      auto moved = params;
      for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t j = 0; j < dir[i].size(); ++j) moved[i].data[j] += sign * h * dir[i][j];
      return evaluate(f, moved);
    };
    const double numeric = (shifted(1.0) - shifted(-1.0)) / (2 * h);
    report.record(directional, numeric);
  }
  return report;
}

}  // namespace spn::ag
