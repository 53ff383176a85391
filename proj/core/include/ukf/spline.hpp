#pragma once

// Clamped uniform B-spline basis via the Cox-de Boor recursion, plus the
// differentiable basis-expansion operation used by KAN layers. Inputs outside
// the grid domain are clamped before evaluation, never extrapolated.

#include <algorithm>
#include <cmath>
#include <vector>

#include "ukf/common.hpp"
#include "ukf/ops.hpp"
#include "ukf/tensor.hpp"

namespace ukf {

struct BSplineGrid {
  int degree = 3;     // spline order k
  int intervals = 5;  // interior intervals G
  double lo = -1.0;
  double hi = 1.0;
  std::vector<double> knots;  // clamped: k+1 repeated end knots each side

  BSplineGrid() { rebuild(); }

  BSplineGrid(int degree_, int intervals_, double lo_, double hi_)
      : degree(degree_), intervals(intervals_), lo(lo_), hi(hi_) {
    rebuild();
  }

  int basis_count() const { return intervals + degree; }

  void rebuild() {
    if (degree < 1 || intervals < 1) {
      throw ConfigError("BSplineGrid: degree and interval count must be >= 1");
    }
    if (!(lo < hi)) throw ConfigError("BSplineGrid: domain must satisfy lo < hi");
    const int k = degree, G = intervals;
    knots.assign(static_cast<size_t>(G + 2 * k + 1), 0.0);
    const double step = (hi - lo) / static_cast<double>(G);
    for (int i = 0; i <= k; ++i) knots[i] = lo;
    for (int i = 1; i < G; ++i) knots[k + i] = lo + step * i;
    for (int i = 0; i <= k; ++i) knots[k + G + i] = hi;
  }
};

// Evaluates all G+k basis functions at one (already clamped) point. When
// `derivs` is non-null it also fills dB_m/dx. Degenerate 0/0 knot spans
// contribute zero, per the usual convention.
template <typename T>
void bspline_basis_scalar(const BSplineGrid& grid, T x, T* values, T* derivs = nullptr) {
  const int k = grid.degree;
  const int n_knots = static_cast<int>(grid.knots.size());
  const int n_basis = grid.basis_count();
  const auto& t = grid.knots;
  const double xv = static_cast<double>(x);

  // degree-0 indicators; the last non-empty interval is right-closed so the
  // partition of unity holds at x == hi
  std::vector<double> cur(static_cast<size_t>(n_knots - 1), 0.0);
  for (int i = 0; i < n_knots - 1; ++i) {
    const bool inside = (t[i] <= xv && xv < t[i + 1]);
    const bool at_top = (xv >= grid.hi && t[i] < t[i + 1] && t[i + 1] >= grid.hi);
    cur[i] = (inside || at_top) ? 1.0 : 0.0;
  }

  std::vector<double> lower;  // degree k-1 values, kept for the derivative
  std::vector<double> prev(cur.size());
  for (int d = 1; d <= k; ++d) {
    prev.swap(cur);
    const int n_d = n_knots - d - 1;
    for (int i = 0; i < n_d; ++i) {
      double left = 0.0, right = 0.0;
      const double den_l = t[i + d] - t[i];
      const double den_r = t[i + d + 1] - t[i + 1];
      if (den_l > 0.0) left = (xv - t[i]) / den_l * prev[i];
      if (den_r > 0.0) right = (t[i + d + 1] - xv) / den_r * prev[i + 1];
      cur[i] = left + right;
    }
    if (d == k) lower.assign(prev.begin(), prev.end());  // degree k-1 values
  }

  for (int m = 0; m < n_basis; ++m) values[m] = static_cast<T>(cur[m]);
  if (derivs) {
    for (int m = 0; m < n_basis; ++m) {
      double dl = 0.0, dr = 0.0;
      const double den_l = t[m + k] - t[m];
      const double den_r = t[m + k + 1] - t[m + 1];
      if (den_l > 0.0) dl = lower[m] / den_l;
      if (den_r > 0.0) dr = lower[m + 1] / den_r;
      derivs[m] = static_cast<T>(k * (dl - dr));
    }
  }
}

// X[...] -> [..., G+k]: basis expansion of every element, clamped to the grid
// domain. Differentiable w.r.t. X (zero gradient where clamping is active).
template <typename T>
TensorPtr<T> bspline_basis(const TensorPtr<T>& x, const BSplineGrid& grid) {
  const int M = grid.basis_count();
  const int64_t n = x->numel();
  std::vector<int64_t> out_shape = x->shape;
  out_shape.push_back(M);
  auto out = make_tensor<T>(std::move(out_shape));
  const T lo = static_cast<T>(grid.lo), hi = static_cast<T>(grid.hi);
  for (int64_t i = 0; i < n; ++i) {
    const T xc = std::clamp(x->data[i], lo, hi);
    bspline_basis_scalar(grid, xc, out->data.data() + i * M);
  }
  if (detail::want_record<T>({&x})) {
    out->requires_grad = true;
    Tape<T>::active()->record([x, out, grid, M, n, lo, hi] {
      if (!out->has_grad() || !x->requires_grad) return;
      x->ensure_grad();
      std::vector<T> vals(static_cast<size_t>(M)), ders(static_cast<size_t>(M));
      for (int64_t i = 0; i < n; ++i) {
        const T xi = x->data[i];
        if (xi < lo || xi > hi) continue;  // clamped: no gradient flows
        bspline_basis_scalar(grid, xi, vals.data(), ders.data());
        const T* g = out->grad.data() + i * M;
        T acc = T(0);
        for (int m = 0; m < M; ++m) acc += g[m] * ders[m];
        x->grad[i] += acc;
      }
    });
  }
  detail::finish(out, "bspline_basis");
  return out;
}

}  // namespace ukf
