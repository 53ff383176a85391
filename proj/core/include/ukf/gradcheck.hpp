#pragma once

// Central finite-difference gradient checking. The numeric side only ever
// calls the forward evaluation, so it stays independent of the recorded
// backward rules it is used to verify.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ukf/rng.hpp"
#include "ukf/tensor.hpp"

namespace ukf {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst;  // "<param>[i]" of the worst element
  int64_t checked = 0;

  bool pass(double tol) const { return max_rel_err < tol; }
};

// |a - n| / max(|a|, |n|, floor); the floor turns the comparison into an
// absolute check for near-zero gradients, where FD noise dominates.
inline double rel_err(double analytic, double numeric, double floor = 1e-2) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

// `forward` must be a pure function of the checked tensors: it re-runs the
// whole computation and returns the scalar loss value.
inline GradCheckReport check_gradients(
    const std::function<double()>& forward,
    const std::vector<std::pair<std::string, TensorPtr<double>>>& params,
    const std::function<void()>& compute_analytic, double h = 1e-4) {
  // Analytic pass first: populate grads.
  for (auto& [name, p] : params) p->zero_grad();
  compute_analytic();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& [name, p] : params) {
    p->ensure_grad();
    analytic.push_back(p->grad);
    p->zero_grad();
  }

  GradCheckReport rep;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi].second;
    for (size_t i = 0; i < p->data.size(); ++i) {
      const double keep = p->data[i];
      p->data[i] = keep + h;
      const double fp = forward();
      p->data[i] = keep - h;
      const double fm = forward();
      p->data[i] = keep;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = rel_err(analytic[pi][i], numeric);
      ++rep.checked;
      if (err > rep.max_rel_err) {
        rep.max_rel_err = err;
        rep.worst = params[pi].first + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

// Same, but only a random sample of elements per parameter (for large models).
inline GradCheckReport check_gradients_sampled(
    const std::function<double()>& forward,
    const std::vector<std::pair<std::string, TensorPtr<double>>>& params,
    const std::function<void()>& compute_analytic, int64_t samples, uint64_t seed,
    double h = 1e-4) {
  for (auto& [name, p] : params) p->zero_grad();
  compute_analytic();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  int64_t total = 0;
  for (auto& [name, p] : params) {
    p->ensure_grad();
    analytic.push_back(p->grad);
    p->zero_grad();
    total += p->numel();
  }

  Rng rng(seed);
  GradCheckReport rep;
  for (int64_t s = 0; s < samples; ++s) {
    int64_t flat = rng.uniform_int(0, total - 1);
    size_t pi = 0;
    while (flat >= params[pi].second->numel()) {
      flat -= params[pi].second->numel();
      ++pi;
    }
    auto& p = params[pi].second;
    const double keep = p->data[flat];
    p->data[flat] = keep + h;
    const double fp = forward();
    p->data[flat] = keep - h;
    const double fm = forward();
    p->data[flat] = keep;
    const double numeric = (fp - fm) / (2.0 * h);
    const double err = rel_err(analytic[pi][flat], numeric);
    ++rep.checked;
    if (err > rep.max_rel_err) {
      rep.max_rel_err = err;
      rep.worst = params[pi].first + "[" + std::to_string(flat) + "]";
    }
  }
  return rep;
}

}  // namespace ukf
