#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rover/numerics/tape.hpp"

namespace rover {

class GradCheckError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradMismatch {
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct ParamGradCheck {
  std::string name;
  std::size_t count = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool pass = true;
  std::vector<GradMismatch> mismatches;
};

struct GradCheckReport {
  double loss = 0.0;
  double step = 0.0;
  double tolerance = 0.0;
  std::vector<ParamGradCheck> params;
  bool pass = true;

  const ParamGradCheck* find(const std::string& name) const {
    for (const auto& p : params)
      if (p.name == name) return &p;
    return nullptr;
  }
};

// Builds the scalar loss on a fresh tape from the current parameter values.
using LossBuilder = std::function<Var(Tape&)>;

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-12});
  return std::abs(analytic - numeric) / denom;
}

// Central-difference check of every scalar in `params` against reverse-mode
// gradients. Parameter values are restored on exit.
inline GradCheckReport finite_diff_check(const LossBuilder& f, std::span<Parameter* const> params, double h,
                                         double tol) {
  if (!(h >= 1e-7 && h <= 1e-3)) throw ContractError("finite_diff_check: step must lie in [1e-7, 1e-3]");

  auto evaluate = [&f]() {
    Tape tape(false);
    Var loss = f(tape);
    if (loss.value().size() != 1) throw ContractError("finite_diff_check: loss must be scalar");
    return loss.value()[0];
  };

  const double base0 = evaluate();
  const double base1 = evaluate();
  if (std::memcmp(&base0, &base1, sizeof(double)) != 0)
    throw GradCheckError("finite_diff_check: loss is not deterministic (" + std::to_string(base0) + " vs " +
                         std::to_string(base1) + ")");

  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape(true);
    Var loss = f(tape);
    tape.backward(loss);
  }

  GradCheckReport report;
  report.loss = base0;
  report.step = h;
  report.tolerance = tol;
  for (Parameter* p : params) {
    ParamGradCheck pc;
    pc.name = p->name;
    pc.count = p->value.size();
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double orig = p->value[i];
      p->value[i] = orig + h;
      const double fp = evaluate();
      p->value[i] = orig - h;
      const double fm = evaluate();
      p->value[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = p->grad[i];
      const double err = relative_error(analytic, numeric);
      // NaN compares false, so a non-finite error counts as a failure.
      if (!(err < tol)) {
        pc.pass = false;
        pc.mismatches.push_back({i, analytic, numeric});
      }
      if (!(err <= pc.max_rel_error)) {
        pc.max_rel_error = std::isnan(err) ? INFINITY : err;
        pc.worst_index = i;
        pc.worst_analytic = analytic;
        pc.worst_numeric = numeric;
      }
    }
    report.pass = report.pass && pc.pass;
    report.params.push_back(std::move(pc));
  }
  return report;
}

}  // namespace rover
