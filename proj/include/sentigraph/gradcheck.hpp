#pragma once

// Central-difference verification of autodiff gradients. The loss builder is
// re-run value-only for every perturbed parameter entry, so it must be
// deterministic (dropout disabled).

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "sentigraph/tensor.hpp"

namespace sg {

struct GradCheckFailure {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t entries_checked = 0;
  double epsilon = 0.0;
  double tolerance = 0.0;
  std::vector<GradCheckFailure> failures;
  // Entry with the largest relative error, kept even when it passes.
  GradCheckFailure worst;

  bool pass() const { return failures.empty(); }
};

// |analytic - numeric| / max(1, |analytic|, |numeric|): relative error for
// large gradients, absolute below magnitude 1 so exact zeros compare cleanly.
inline double gradcheck_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

inline GradCheckReport finite_difference_check(const std::function<Tensor()>& build_loss,
                                               ParamStore& params, double epsilon,
                                               double tolerance) {
  if (epsilon <= 0.0) throw std::invalid_argument("finite_difference_check: epsilon must be > 0");
  GradCheckReport report;
  report.epsilon = epsilon;
  report.tolerance = tolerance;

  params.zero_grad();
  Tensor loss = build_loss();
  if (!std::isfinite(loss.item()))
    throw NumericError("finite_difference_check: non-finite loss at unperturbed parameters");
  backward(loss);

  std::vector<std::vector<double>> analytic;
  for (const auto& [name, t] : params) analytic.push_back(t.grad());

  NoGradGuard nograd;
  auto eval = [&]() {
    const double v = build_loss().item();
    return v;
  };

  std::size_t pi = 0;
  for (auto& [name, t] : params) {
    auto& values = t.mutable_value();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + epsilon;
      const double fp = eval();
      values[i] = saved - epsilon;
      const double fm = eval();
      values[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericError("finite_difference_check: non-finite loss perturbing " + name + "[" +
                           std::to_string(i) + "]");
      const double numeric = (fp - fm) / (2.0 * epsilon);
      const double a = analytic[pi][i];
      const double rel = gradcheck_rel_error(a, numeric);
      ++report.entries_checked;
      if (rel >= report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = {name, i, a, numeric, rel};
      }
      if (rel >= tolerance) report.failures.push_back({name, i, a, numeric, rel});
    }
    ++pi;
  }
  return report;
}

}  // namespace sg
