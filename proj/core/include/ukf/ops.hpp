#pragma once

// Neural kernels on dense tensors. Every operation validates shapes, computes
// its output, and (when a differentiation record is active and an input
// requires gradients) records its backward rule. Loop orders are fixed, so a
// given build produces bitwise-identical results run to run.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ukf/common.hpp"
#include "ukf/tensor.hpp"

namespace ukf {

enum class Mode { kTrain, kEval };

namespace detail {

template <typename T>
bool want_record(std::initializer_list<const TensorPtr<T>*> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  for (const TensorPtr<T>* in : inputs) {
    if ((*in)->requires_grad) return true;
  }
  return false;
}

template <typename T>
void finish(const TensorPtr<T>& out, const char* op_name) {
  assert_finite(out->data, op_name);
}

inline int64_t ceil_div_nonneg(int64_t a, int64_t b) {
  return a <= 0 ? 0 : (a + b - 1) / b;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (a->shape != b->shape) {
    throw ShapeError("add: shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
  }
  auto out = make_tensor<T>(a->shape);
  const size_t n = a->data.size();
  for (size_t i = 0; i < n; ++i) out->data[i] = a->data[i] + b->data[i];
  if (detail::want_record<T>({&a, &b})) {
    out->requires_grad = true;
    Tape<T>::active()->record([a, b, out] {
      if (!out->has_grad()) return;
      if (a->requires_grad) {
        a->ensure_grad();
        for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += out->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (size_t i = 0; i < b->grad.size(); ++i) b->grad[i] += out->grad[i];
      }
    });
  }
  detail::finish(out, "add");
  return out;
}

template <typename T>
TensorPtr<T> scale(const TensorPtr<T>& a, T c) {
  auto out = make_tensor<T>(a->shape);
  for (size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] * c;
  if (detail::want_record<T>({&a})) {
    out->requires_grad = true;
    Tape<T>::active()->record([a, out, c] {
      if (!out->has_grad() || !a->requires_grad) return;
      a->ensure_grad();
      for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += c * out->grad[i];
    });
  }
  detail::finish(out, "scale");
  return out;
}

template <typename T>
TensorPtr<T> square(const TensorPtr<T>& a) {
  auto out = make_tensor<T>(a->shape);
  for (size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] * a->data[i];
  if (detail::want_record<T>({&a})) {
    out->requires_grad = true;
    Tape<T>::active()->record([a, out] {
      if (!out->has_grad() || !a->requires_grad) return;
      a->ensure_grad();
      for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += T(2) * a->data[i] * out->grad[i];
    });
  }
  detail::finish(out, "square");
  return out;
}

template <typename T>
TensorPtr<T> silu(const TensorPtr<T>& a) {
  auto out = make_tensor<T>(a->shape);
  for (size_t i = 0; i < a->data.size(); ++i) {
    const T x = a->data[i];
    const T s = T(1) / (T(1) + std::exp(-x));
    out->data[i] = x * s;
  }
  if (detail::want_record<T>({&a})) {
    out->requires_grad = true;
    Tape<T>::active()->record([a, out] {
      if (!out->has_grad() || !a->requires_grad) return;
      a->ensure_grad();
      for (size_t i = 0; i < a->grad.size(); ++i) {
        const T x = a->data[i];
        const T s = T(1) / (T(1) + std::exp(-x));
        a->grad[i] += out->grad[i] * s * (T(1) + x * (T(1) - s));
      }
    });
  }
  detail::finish(out, "silu");
  return out;
}

template <typename T>
TensorPtr<T> relu(const TensorPtr<T>& a) {
  auto out = make_tensor<T>(a->shape);
  for (size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] > T(0) ? a->data[i] : T(0);
  if (detail::want_record<T>({&a})) {
    out->requires_grad = true;
    Tape<T>::active()->record([a, out] {
      if (!out->has_grad() || !a->requires_grad) return;
      a->ensure_grad();
      for (size_t i = 0; i < a->grad.size(); ++i) {
        if (a->data[i] > T(0)) a->grad[i] += out->grad[i];
      }
    });
  }
  detail::finish(out, "relu");
  return out;
}

template <typename T>
TensorPtr<T> reduce_sum(const TensorPtr<T>& a) {
  T acc = T(0);
  for (T v : a->data) acc += v;
  auto out = scalar_tensor<T>(acc);
  if (detail::want_record<T>({&a})) {
    out->requires_grad = true;
    Tape<T>::active()->record([a, out] {
      if (!out->has_grad() || !a->requires_grad) return;
      a->ensure_grad();
      const T g = out->grad[0];
      for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += g;
    });
  }
  detail::finish(out, "reduce_sum");
  return out;
}

template <typename T>
TensorPtr<T> reduce_mean(const TensorPtr<T>& a) {
  const T inv = T(1) / static_cast<T>(a->numel());
  T acc = T(0);
  for (T v : a->data) acc += v;
  auto out = scalar_tensor<T>(acc * inv);
  if (detail::want_record<T>({&a})) {
    out->requires_grad = true;
    Tape<T>::active()->record([a, out, inv] {
      if (!out->has_grad() || !a->requires_grad) return;
      a->ensure_grad();
      const T g = out->grad[0] * inv;
      for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += g;
    });
  }
  detail::finish(out, "reduce_mean");
  return out;
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> reshape(const TensorPtr<T>& a, std::vector<int64_t> new_shape) {
  if (numel_of(new_shape) != a->numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a->shape) + " as " +
                     shape_str(new_shape));
  }
  auto out = make_tensor<T>(std::move(new_shape), a->data);
  if (detail::want_record<T>({&a})) {
    out->requires_grad = true;
    Tape<T>::active()->record([a, out] {
      if (!out->has_grad() || !a->requires_grad) return;
      a->ensure_grad();
      for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += out->grad[i];
    });
  }
  return out;
}

// [N,C,H,W] -> [N, H*W, C]; token p = h*W + w (row-major over the patch grid).
template <typename T>
TensorPtr<T> spatial_to_tokens(const TensorPtr<T>& x) {
  if (x->shape.size() != 4) {
    throw ShapeError("spatial_to_tokens: expected [N,C,H,W], got " + shape_str(x->shape));
  }
  const int64_t N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int64_t L = H * W;
  auto out = make_tensor<T>({N, L, C});
  for (int64_t n = 0; n < N; ++n) {
    const T* xn = x->data.data() + n * C * L;
    T* on = out->data.data() + n * L * C;
    for (int64_t c = 0; c < C; ++c) {
      const T* xc = xn + c * L;
      for (int64_t p = 0; p < L; ++p) on[p * C + c] = xc[p];
    }
  }
  if (detail::want_record<T>({&x})) {
    out->requires_grad = true;
    Tape<T>::active()->record([x, out, N, C, L] {
      if (!out->has_grad() || !x->requires_grad) return;
      x->ensure_grad();
      for (int64_t n = 0; n < N; ++n) {
        T* gx = x->grad.data() + n * C * L;
        const T* go = out->grad.data() + n * L * C;
        for (int64_t c = 0; c < C; ++c) {
          T* gxc = gx + c * L;
          for (int64_t p = 0; p < L; ++p) gxc[p] += go[p * C + c];
        }
      }
    });
  }
  return out;
}

// [N,L,C] -> [N,C,H,W]; requires L == H*W.
template <typename T>
TensorPtr<T> tokens_to_spatial(const TensorPtr<T>& t, int64_t H, int64_t W) {
  if (t->shape.size() != 3) {
    throw ShapeError("tokens_to_spatial: expected [N,L,C], got " + shape_str(t->shape));
  }
  const int64_t N = t->shape[0], L = t->shape[1], C = t->shape[2];
  if (L != H * W) {
    throw ShapeError("tokens_to_spatial: token count " + std::to_string(L) +
                     " does not reshape to " + std::to_string(H) + "x" + std::to_string(W));
  }
  auto out = make_tensor<T>({N, C, H, W});
  for (int64_t n = 0; n < N; ++n) {
    const T* tn = t->data.data() + n * L * C;
    T* on = out->data.data() + n * C * L;
    for (int64_t c = 0; c < C; ++c) {
      T* oc = on + c * L;
      for (int64_t p = 0; p < L; ++p) oc[p] = tn[p * C + c];
    }
  }
  if (detail::want_record<T>({&t})) {
    out->requires_grad = true;
    Tape<T>::active()->record([t, out, N, C, L] {
      if (!out->has_grad() || !t->requires_grad) return;
      t->ensure_grad();
      for (int64_t n = 0; n < N; ++n) {
        T* gt = t->grad.data() + n * L * C;
        const T* go = out->grad.data() + n * C * L;
        for (int64_t c = 0; c < C; ++c) {
          const T* gc = go + c * L;
          for (int64_t p = 0; p < L; ++p) gt[p * C + c] += gc[p];
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> concat_channels(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (a->shape.size() != 4 || b->shape.size() != 4 || a->shape[0] != b->shape[0] ||
      a->shape[2] != b->shape[2] || a->shape[3] != b->shape[3]) {
    throw ShapeError("concat_channels: incompatible shapes " + shape_str(a->shape) + " and " +
                     shape_str(b->shape));
  }
  const int64_t N = a->shape[0], Ca = a->shape[1], Cb = b->shape[1];
  const int64_t HW = a->shape[2] * a->shape[3];
  auto out = make_tensor<T>({N, Ca + Cb, a->shape[2], a->shape[3]});
  for (int64_t n = 0; n < N; ++n) {
    std::copy_n(a->data.data() + n * Ca * HW, Ca * HW, out->data.data() + n * (Ca + Cb) * HW);
    std::copy_n(b->data.data() + n * Cb * HW, Cb * HW,
                out->data.data() + n * (Ca + Cb) * HW + Ca * HW);
  }
  if (detail::want_record<T>({&a, &b})) {
    out->requires_grad = true;
    Tape<T>::active()->record([a, b, out, N, Ca, Cb, HW] {
      if (!out->has_grad()) return;
      for (int64_t n = 0; n < N; ++n) {
        const T* go = out->grad.data() + n * (Ca + Cb) * HW;
        if (a->requires_grad) {
          a->ensure_grad();
          T* ga = a->grad.data() + n * Ca * HW;
          for (int64_t i = 0; i < Ca * HW; ++i) ga[i] += go[i];
        }
        if (b->requires_grad) {
          b->ensure_grad();
          T* gb = b->grad.data() + n * Cb * HW;
          for (int64_t i = 0; i < Cb * HW; ++i) gb[i] += go[Ca * HW + i];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// X[..., K] x W[K, N] -> [..., N]. Leading dims of X are treated as rows.
template <typename T>
TensorPtr<T> matmul(const TensorPtr<T>& x, const TensorPtr<T>& w) {
  if (x->shape.empty() || w->shape.size() != 2 || x->shape.back() != w->shape[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(x->shape) + " and " +
                     shape_str(w->shape));
  }
  const int64_t K = w->shape[0], N = w->shape[1];
  const int64_t R = x->numel() / K;
  std::vector<int64_t> out_shape(x->shape.begin(), x->shape.end() - 1);
  out_shape.push_back(N);
  auto out = make_tensor<T>(std::move(out_shape));
  for (int64_t r = 0; r < R; ++r) {
    const T* xr = x->data.data() + r * K;
    T* or_ = out->data.data() + r * N;
    for (int64_t k = 0; k < K; ++k) {
      const T xv = xr[k];
      if (xv == T(0)) continue;
      const T* wk = w->data.data() + k * N;
      for (int64_t n = 0; n < N; ++n) or_[n] += xv * wk[n];
    }
  }
  if (detail::want_record<T>({&x, &w})) {
    out->requires_grad = true;
    Tape<T>::active()->record([x, w, out, R, K, N] {
      if (!out->has_grad()) return;
      if (x->requires_grad) {
        x->ensure_grad();
        for (int64_t r = 0; r < R; ++r) {
          const T* gr = out->grad.data() + r * N;
          T* gx = x->grad.data() + r * K;
          for (int64_t k = 0; k < K; ++k) {
            const T* wk = w->data.data() + k * N;
            T acc = T(0);
            for (int64_t n = 0; n < N; ++n) acc += gr[n] * wk[n];
            gx[k] += acc;
          }
        }
      }
      if (w->requires_grad) {
        w->ensure_grad();
        for (int64_t r = 0; r < R; ++r) {
          const T* xr = x->data.data() + r * K;
          const T* gr = out->grad.data() + r * N;
          for (int64_t k = 0; k < K; ++k) {
            const T xv = xr[k];
            if (xv == T(0)) continue;
            T* gw = w->grad.data() + k * N;
            for (int64_t n = 0; n < N; ++n) gw[n] += xv * gr[n];
          }
        }
      }
    });
  }
  detail::finish(out, "matmul");
  return out;
}

// X[..., K] x W[N, K]^T -> [..., N]. Weight rows are output features.
template <typename T>
TensorPtr<T> matmul_nt(const TensorPtr<T>& x, const TensorPtr<T>& w) {
  if (x->shape.empty() || w->shape.size() != 2 || x->shape.back() != w->shape[1]) {
    throw ShapeError("matmul_nt: incompatible shapes " + shape_str(x->shape) + " and " +
                     shape_str(w->shape));
  }
  const int64_t N = w->shape[0], K = w->shape[1];
  const int64_t R = x->numel() / K;
  std::vector<int64_t> out_shape(x->shape.begin(), x->shape.end() - 1);
  out_shape.push_back(N);
  auto out = make_tensor<T>(std::move(out_shape));
  for (int64_t r = 0; r < R; ++r) {
    const T* xr = x->data.data() + r * K;
    T* or_ = out->data.data() + r * N;
    for (int64_t n = 0; n < N; ++n) {
      const T* wn = w->data.data() + n * K;
      T acc = T(0);
      for (int64_t k = 0; k < K; ++k) acc += xr[k] * wn[k];
      or_[n] = acc;
    }
  }
  if (detail::want_record<T>({&x, &w})) {
    out->requires_grad = true;
    Tape<T>::active()->record([x, w, out, R, K, N] {
      if (!out->has_grad()) return;
      if (x->requires_grad) {
        x->ensure_grad();
        for (int64_t r = 0; r < R; ++r) {
          const T* gr = out->grad.data() + r * N;
          T* gx = x->grad.data() + r * K;
          for (int64_t n = 0; n < N; ++n) {
            const T gv = gr[n];
            if (gv == T(0)) continue;
            const T* wn = w->data.data() + n * K;
            for (int64_t k = 0; k < K; ++k) gx[k] += gv * wn[k];
          }
        }
      }
      if (w->requires_grad) {
        w->ensure_grad();
        for (int64_t r = 0; r < R; ++r) {
          const T* xr = x->data.data() + r * K;
          const T* gr = out->grad.data() + r * N;
          for (int64_t n = 0; n < N; ++n) {
            const T gv = gr[n];
            if (gv == T(0)) continue;
            T* gw = w->grad.data() + n * K;
            for (int64_t k = 0; k < K; ++k) gw[k] += gv * xr[k];
          }
        }
      }
    });
  }
  detail::finish(out, "matmul_nt");
  return out;
}

// A[B,L,K] x Bm[B,M,K]^T -> [B,L,M] (per-batch Q.K^T).
template <typename T>
TensorPtr<T> bmm_nt(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (a->shape.size() != 3 || b->shape.size() != 3 || a->shape[0] != b->shape[0] ||
      a->shape[2] != b->shape[2]) {
    throw ShapeError("bmm_nt: incompatible shapes " + shape_str(a->shape) + " and " +
                     shape_str(b->shape));
  }
  const int64_t B = a->shape[0], L = a->shape[1], K = a->shape[2], M = b->shape[1];
  auto out = make_tensor<T>({B, L, M});
  for (int64_t bb = 0; bb < B; ++bb) {
    const T* ab = a->data.data() + bb * L * K;
    const T* bbp = b->data.data() + bb * M * K;
    T* ob = out->data.data() + bb * L * M;
    for (int64_t l = 0; l < L; ++l) {
      const T* al = ab + l * K;
      T* ol = ob + l * M;
      for (int64_t m = 0; m < M; ++m) {
        const T* bm = bbp + m * K;
        T acc = T(0);
        for (int64_t k = 0; k < K; ++k) acc += al[k] * bm[k];
        ol[m] = acc;
      }
    }
  }
  if (detail::want_record<T>({&a, &b})) {
    out->requires_grad = true;
    Tape<T>::active()->record([a, b, out, B, L, K, M] {
      if (!out->has_grad()) return;
      for (int64_t bb = 0; bb < B; ++bb) {
        const T* ab = a->data.data() + bb * L * K;
        const T* bbp = b->data.data() + bb * M * K;
        const T* gb = out->grad.data() + bb * L * M;
        if (a->requires_grad) {
          a->ensure_grad();
          T* ga = a->grad.data() + bb * L * K;
          for (int64_t l = 0; l < L; ++l) {
            const T* gl = gb + l * M;
            T* gal = ga + l * K;
            for (int64_t m = 0; m < M; ++m) {
              const T gv = gl[m];
              if (gv == T(0)) continue;
              const T* bm = bbp + m * K;
              for (int64_t k = 0; k < K; ++k) gal[k] += gv * bm[k];
            }
          }
        }
        if (b->requires_grad) {
          b->ensure_grad();
          T* gbm = b->grad.data() + bb * M * K;
          for (int64_t l = 0; l < L; ++l) {
            const T* gl = gb + l * M;
            const T* al = ab + l * K;
            for (int64_t m = 0; m < M; ++m) {
              const T gv = gl[m];
              if (gv == T(0)) continue;
              T* gm = gbm + m * K;
              for (int64_t k = 0; k < K; ++k) gm[k] += gv * al[k];
            }
          }
        }
      }
    });
  }
  detail::finish(out, "bmm_nt");
  return out;
}

// A[B,L,M] x V[B,M,K] -> [B,L,K] (per-batch attention application).
template <typename T>
TensorPtr<T> bmm(const TensorPtr<T>& a, const TensorPtr<T>& v) {
  if (a->shape.size() != 3 || v->shape.size() != 3 || a->shape[0] != v->shape[0] ||
      a->shape[2] != v->shape[1]) {
    throw ShapeError("bmm: incompatible shapes " + shape_str(a->shape) + " and " +
                     shape_str(v->shape));
  }
  const int64_t B = a->shape[0], L = a->shape[1], M = a->shape[2], K = v->shape[2];
  auto out = make_tensor<T>({B, L, K});
  for (int64_t bb = 0; bb < B; ++bb) {
    const T* ab = a->data.data() + bb * L * M;
    const T* vb = v->data.data() + bb * M * K;
    T* ob = out->data.data() + bb * L * K;
    for (int64_t l = 0; l < L; ++l) {
      const T* al = ab + l * M;
      T* ol = ob + l * K;
      for (int64_t m = 0; m < M; ++m) {
        const T av = al[m];
        if (av == T(0)) continue;
        const T* vm = vb + m * K;
        for (int64_t k = 0; k < K; ++k) ol[k] += av * vm[k];
      }
    }
  }
  if (detail::want_record<T>({&a, &v})) {
    out->requires_grad = true;
    Tape<T>::active()->record([a, v, out, B, L, M, K] {
      if (!out->has_grad()) return;
      for (int64_t bb = 0; bb < B; ++bb) {
        const T* ab = a->data.data() + bb * L * M;
        const T* vb = v->data.data() + bb * M * K;
        const T* gb = out->grad.data() + bb * L * K;
        if (a->requires_grad) {
          a->ensure_grad();
          T* ga = a->grad.data() + bb * L * M;
          for (int64_t l = 0; l < L; ++l) {
            const T* gl = gb + l * K;
            T* gal = ga + l * M;
            for (int64_t m = 0; m < M; ++m) {
              const T* vm = vb + m * K;
              T acc = T(0);
              for (int64_t k = 0; k < K; ++k) acc += gl[k] * vm[k];
              gal[m] += acc;
            }
          }
        }
        if (v->requires_grad) {
          v->ensure_grad();
          T* gv = v->grad.data() + bb * M * K;
          for (int64_t l = 0; l < L; ++l) {
            const T* al = ab + l * M;
            const T* gl = gb + l * K;
            for (int64_t m = 0; m < M; ++m) {
              const T av = al[m];
              if (av == T(0)) continue;
              T* gm = gv + m * K;
              for (int64_t k = 0; k < K; ++k) gm[k] += av * gl[k];
            }
          }
        }
      }
    });
  }
  detail::finish(out, "bmm");
  return out;
}

// S[N,L,L] + theta[L,L], broadcast over the batch (learnable attention bias).
template <typename T>
TensorPtr<T> add_position_bias(const TensorPtr<T>& s, const TensorPtr<T>& theta) {
  if (s->shape.size() != 3 || theta->shape.size() != 2 || s->shape[1] != theta->shape[0] ||
      s->shape[2] != theta->shape[1]) {
    throw ShapeError("add_position_bias: incompatible shapes " + shape_str(s->shape) + " and " +
                     shape_str(theta->shape));
  }
  const int64_t N = s->shape[0], LL = theta->numel();
  auto out = make_tensor<T>(s->shape);
  for (int64_t n = 0; n < N; ++n) {
    const T* sn = s->data.data() + n * LL;
    T* on = out->data.data() + n * LL;
    for (int64_t i = 0; i < LL; ++i) on[i] = sn[i] + theta->data[i];
  }
  if (detail::want_record<T>({&s, &theta})) {
    out->requires_grad = true;
    Tape<T>::active()->record([s, theta, out, N, LL] {
      if (!out->has_grad()) return;
      if (s->requires_grad) {
        s->ensure_grad();
        for (size_t i = 0; i < s->grad.size(); ++i) s->grad[i] += out->grad[i];
      }
      if (theta->requires_grad) {
        theta->ensure_grad();
        for (int64_t n = 0; n < N; ++n) {
          const T* gn = out->grad.data() + n * LL;
          for (int64_t i = 0; i < LL; ++i) theta->grad[i] += gn[i];
        }
      }
    });
  }
  detail::finish(out, "add_position_bias");
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

// X[N,Cin,H,W] * W[Cout,Cin,k,k], square kernel. "Same" padding is k/2 at
// stride 1; stride-2 calls are the explicit downsampling stages.
template <typename T>
TensorPtr<T> conv2d(const TensorPtr<T>& x, const TensorPtr<T>& w, int64_t stride,
                    int64_t padding) {
  if (x->shape.size() != 4 || w->shape.size() != 4 || w->shape[2] != w->shape[3]) {
    throw ShapeError("conv2d: expected X[N,Cin,H,W], W[Cout,Cin,k,k], got " +
                     shape_str(x->shape) + " and " + shape_str(w->shape));
  }
  if (x->shape[1] != w->shape[1]) {
    throw ShapeError("conv2d: input channel mismatch: X " + shape_str(x->shape) + " vs W " +
                     shape_str(w->shape));
  }
  if (stride < 1 || padding < 0) throw ConfigError("conv2d: stride must be >=1, padding >=0");
  const int64_t N = x->shape[0], Ci = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int64_t Co = w->shape[0], k = w->shape[2];
  const int64_t Ho = (H + 2 * padding - k) / stride + 1;
  const int64_t Wo = (W + 2 * padding - k) / stride + 1;
  if (Ho < 1 || Wo < 1) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " does not fit input " +
                     shape_str(x->shape) + " with padding " + std::to_string(padding));
  }
  auto out = make_tensor<T>({N, Co, Ho, Wo});
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t co = 0; co < Co; ++co) {
      T* op = out->data.data() + ((n * Co + co) * Ho) * Wo;
      for (int64_t ci = 0; ci < Ci; ++ci) {
        const T* xp = x->data.data() + ((n * Ci + ci) * H) * W;
        const T* wp = w->data.data() + ((co * Ci + ci) * k) * k;
        for (int64_t kh = 0; kh < k; ++kh) {
          for (int64_t kw = 0; kw < k; ++kw) {
            const T wv = wp[kh * k + kw];
            if (wv == T(0)) continue;
            const int64_t ow_lo = detail::ceil_div_nonneg(padding - kw, stride);
            const int64_t ow_hi_v = W - 1 - kw + padding;
            const int64_t ow_hi = std::min(Wo - 1, ow_hi_v < 0 ? int64_t(-1) : ow_hi_v / stride);
            for (int64_t oh = 0; oh < Ho; ++oh) {
              const int64_t ih = oh * stride + kh - padding;
              if (ih < 0 || ih >= H) continue;
              const T* xrow = xp + ih * W + (kw - padding);
              T* orow = op + oh * Wo;
              for (int64_t ow = ow_lo; ow <= ow_hi; ++ow) {
                orow[ow] += wv * xrow[ow * stride];
              }
            }
          }
        }
      }
    }
  }
  if (detail::want_record<T>({&x, &w})) {
    out->requires_grad = true;
    const int64_t s = stride, p = padding;
    Tape<T>::active()->record([x, w, out, N, Ci, Co, H, W, Ho, Wo, k, s, p] {
      if (!out->has_grad()) return;
      if (x->requires_grad) x->ensure_grad();
      if (w->requires_grad) w->ensure_grad();
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t co = 0; co < Co; ++co) {
          const T* gp = out->grad.data() + ((n * Co + co) * Ho) * Wo;
          for (int64_t ci = 0; ci < Ci; ++ci) {
            const T* xp = x->data.data() + ((n * Ci + ci) * H) * W;
            T* gxp = x->requires_grad ? x->grad.data() + ((n * Ci + ci) * H) * W : nullptr;
            const T* wp = w->data.data() + ((co * Ci + ci) * k) * k;
            T* gwp = w->requires_grad ? w->grad.data() + ((co * Ci + ci) * k) * k : nullptr;
            for (int64_t kh = 0; kh < k; ++kh) {
              for (int64_t kw = 0; kw < k; ++kw) {
                const T wv = wp[kh * k + kw];
                const int64_t ow_lo = detail::ceil_div_nonneg(p - kw, s);
                const int64_t ow_hi_v = W - 1 - kw + p;
                const int64_t ow_hi = std::min(Wo - 1, ow_hi_v < 0 ? int64_t(-1) : ow_hi_v / s);
                T wacc = T(0);
                for (int64_t oh = 0; oh < Ho; ++oh) {
                  const int64_t ih = oh * s + kh - p;
                  if (ih < 0 || ih >= H) continue;
                  const T* xrow = xp + ih * W + (kw - p);
                  T* gxrow = gxp ? gxp + ih * W + (kw - p) : nullptr;
                  const T* grow = gp + oh * Wo;
                  if (gxp) {
                    for (int64_t ow = ow_lo; ow <= ow_hi; ++ow) {
                      gxrow[ow * s] += wv * grow[ow];
                    }
                  }
                  if (gwp) {
                    for (int64_t ow = ow_lo; ow <= ow_hi; ++ow) {
                      wacc += xrow[ow * s] * grow[ow];
                    }
                  }
                }
                if (gwp) gwp[kh * k + kw] += wacc;
              }
            }
          }
        }
      }
    });
  }
  detail::finish(out, "conv2d");
  return out;
}

// One k x k kernel per channel, no cross-channel mixing. Stride 1.
template <typename T>
TensorPtr<T> depthwise_conv2d(const TensorPtr<T>& x, const TensorPtr<T>& w, int64_t padding) {
  if (x->shape.size() != 4 || w->shape.size() != 4 || w->shape[1] != 1 ||
      w->shape[2] != w->shape[3]) {
    throw ShapeError("depthwise_conv2d: expected X[N,C,H,W], W[C,1,k,k], got " +
                     shape_str(x->shape) + " and " + shape_str(w->shape));
  }
  if (x->shape[1] != w->shape[0]) {
    throw ShapeError("depthwise_conv2d: channel count mismatch: X " + shape_str(x->shape) +
                     " vs W " + shape_str(w->shape));
  }
  const int64_t N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int64_t k = w->shape[2];
  const int64_t Ho = H + 2 * padding - k + 1;
  const int64_t Wo = W + 2 * padding - k + 1;
  if (Ho < 1 || Wo < 1) {
    throw ShapeError("depthwise_conv2d: kernel does not fit input " + shape_str(x->shape));
  }
  auto out = make_tensor<T>({N, C, Ho, Wo});
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const T* xp = x->data.data() + ((n * C + c) * H) * W;
      const T* wp = w->data.data() + c * k * k;
      T* op = out->data.data() + ((n * C + c) * Ho) * Wo;
      for (int64_t kh = 0; kh < k; ++kh) {
        for (int64_t kw = 0; kw < k; ++kw) {
          const T wv = wp[kh * k + kw];
          if (wv == T(0)) continue;
          const int64_t ow_lo = std::max<int64_t>(0, padding - kw);
          const int64_t ow_hi = std::min(Wo - 1, W - 1 - kw + padding);
          for (int64_t oh = 0; oh < Ho; ++oh) {
            const int64_t ih = oh + kh - padding;
            if (ih < 0 || ih >= H) continue;
            const T* xrow = xp + ih * W + (kw - padding);
            T* orow = op + oh * Wo;
            for (int64_t ow = ow_lo; ow <= ow_hi; ++ow) orow[ow] += wv * xrow[ow];
          }
        }
      }
    }
  }
  if (detail::want_record<T>({&x, &w})) {
    out->requires_grad = true;
    const int64_t p = padding;
    Tape<T>::active()->record([x, w, out, N, C, H, W, Ho, Wo, k, p] {
      if (!out->has_grad()) return;
      if (x->requires_grad) x->ensure_grad();
      if (w->requires_grad) w->ensure_grad();
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
          const T* xp = x->data.data() + ((n * C + c) * H) * W;
          T* gxp = x->requires_grad ? x->grad.data() + ((n * C + c) * H) * W : nullptr;
          const T* wp = w->data.data() + c * k * k;
          T* gwp = w->requires_grad ? w->grad.data() + c * k * k : nullptr;
          const T* gp = out->grad.data() + ((n * C + c) * Ho) * Wo;
          for (int64_t kh = 0; kh < k; ++kh) {
            for (int64_t kw = 0; kw < k; ++kw) {
              const T wv = wp[kh * k + kw];
              const int64_t ow_lo = std::max<int64_t>(0, p - kw);
              const int64_t ow_hi = std::min(Wo - 1, W - 1 - kw + p);
              T wacc = T(0);
              for (int64_t oh = 0; oh < Ho; ++oh) {
                const int64_t ih = oh + kh - p;
                if (ih < 0 || ih >= H) continue;
                const T* xrow = xp + ih * W + (kw - p);
                T* gxrow = gxp ? gxp + ih * W + (kw - p) : nullptr;
                const T* grow = gp + oh * Wo;
                if (gxp) {
                  for (int64_t ow = ow_lo; ow <= ow_hi; ++ow) gxrow[ow] += wv * grow[ow];
                }
                if (gwp) {
                  for (int64_t ow = ow_lo; ow <= ow_hi; ++ow) wacc += xrow[ow] * grow[ow];
                }
              }
              if (gwp) gwp[kh * k + kw] += wacc;
            }
          }
        }
      }
    });
  }
  detail::finish(out, "depthwise_conv2d");
  return out;
}

// Per-channel bias on [N,C,H,W].
template <typename T>
TensorPtr<T> bias_channel(const TensorPtr<T>& x, const TensorPtr<T>& b) {
  if (x->shape.size() != 4 || b->shape.size() != 1 || b->shape[0] != x->shape[1]) {
    throw ShapeError("bias_channel: incompatible shapes " + shape_str(x->shape) + " and " +
                     shape_str(b->shape));
  }
  const int64_t N = x->shape[0], C = x->shape[1], HW = x->shape[2] * x->shape[3];
  auto out = make_tensor<T>(x->shape);
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const T bv = b->data[c];
      const T* xp = x->data.data() + (n * C + c) * HW;
      T* op = out->data.data() + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) op[i] = xp[i] + bv;
    }
  }
  if (detail::want_record<T>({&x, &b})) {
    out->requires_grad = true;
    Tape<T>::active()->record([x, b, out, N, C, HW] {
      if (!out->has_grad()) return;
      if (x->requires_grad) {
        x->ensure_grad();
        for (size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += out->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (int64_t n = 0; n < N; ++n) {
          for (int64_t c = 0; c < C; ++c) {
            const T* gp = out->grad.data() + (n * C + c) * HW;
            T acc = T(0);
            for (int64_t i = 0; i < HW; ++i) acc += gp[i];
            b->grad[c] += acc;
          }
        }
      }
    });
  }
  detail::finish(out, "bias_channel");
  return out;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

template <typename T>
struct BnState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);

  explicit BnState(int64_t channels = 0, T momentum_ = T(0.1))
      : running_mean(static_cast<size_t>(channels), T(0)),
        running_var(static_cast<size_t>(channels), T(1)),
        momentum(momentum_) {}
};

// Per-channel batch normalization over (N,H,W). Train mode uses batch
// statistics (biased variance) and updates the running stats by EMA; eval
// mode uses the running stats.
template <typename T>
TensorPtr<T> batchnorm2d(const TensorPtr<T>& x, const TensorPtr<T>& gamma,
                         const TensorPtr<T>& beta, BnState<T>& state, Mode mode,
                         T eps = T(1e-5)) {
  if (x->shape.size() != 4) {
    throw ShapeError("batchnorm2d: expected [N,C,H,W], got " + shape_str(x->shape));
  }
  const int64_t N = x->shape[0], C = x->shape[1], HW = x->shape[2] * x->shape[3];
  if (gamma->numel() != C || beta->numel() != C ||
      static_cast<int64_t>(state.running_mean.size()) != C) {
    throw ShapeError("batchnorm2d: parameter size does not match " + std::to_string(C) +
                     " channels");
  }
  if (eps <= T(0)) throw ConfigError("batchnorm2d: eps must be positive");
  const int64_t M = N * HW;
  std::vector<T> mean(C), invstd(C);
  if (mode == Mode::kTrain) {
    if (M < 2) {
      throw ContractError(
          "batchnorm2d: degenerate variance: train mode needs at least 2 elements per channel");
    }
    for (int64_t c = 0; c < C; ++c) {
      T sum = T(0);
      for (int64_t n = 0; n < N; ++n) {
        const T* xp = x->data.data() + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) sum += xp[i];
      }
      const T mu = sum / static_cast<T>(M);
      T var = T(0);
      for (int64_t n = 0; n < N; ++n) {
        const T* xp = x->data.data() + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          const T d = xp[i] - mu;
          var += d * d;
        }
      }
      var /= static_cast<T>(M);
      mean[c] = mu;
      invstd[c] = T(1) / std::sqrt(var + eps);
      state.running_mean[c] = (T(1) - state.momentum) * state.running_mean[c] + state.momentum * mu;
      state.running_var[c] = (T(1) - state.momentum) * state.running_var[c] + state.momentum * var;
    }
  } else {
    for (int64_t c = 0; c < C; ++c) {
      mean[c] = state.running_mean[c];
      invstd[c] = T(1) / std::sqrt(state.running_var[c] + eps);
    }
  }
  auto out = make_tensor<T>(x->shape);
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const T mu = mean[c], is = invstd[c], g = gamma->data[c], b = beta->data[c];
      const T* xp = x->data.data() + (n * C + c) * HW;
      T* op = out->data.data() + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) op[i] = g * (xp[i] - mu) * is + b;
    }
  }
  if (detail::want_record<T>({&x, &gamma, &beta})) {
    out->requires_grad = true;
    const bool batch_stats = (mode == Mode::kTrain);
    Tape<T>::active()->record(
        [x, gamma, beta, out, mean, invstd, N, C, HW, M, batch_stats] {
          if (!out->has_grad()) return;
          if (x->requires_grad) x->ensure_grad();
          if (gamma->requires_grad) gamma->ensure_grad();
          if (beta->requires_grad) beta->ensure_grad();
          for (int64_t c = 0; c < C; ++c) {
            const T mu = mean[c], is = invstd[c], g = gamma->data[c];
            T sum_g = T(0), sum_gx = T(0);
            for (int64_t n = 0; n < N; ++n) {
              const T* gp = out->grad.data() + (n * C + c) * HW;
              const T* xp = x->data.data() + (n * C + c) * HW;
              for (int64_t i = 0; i < HW; ++i) {
                sum_g += gp[i];
                sum_gx += gp[i] * (xp[i] - mu) * is;
              }
            }
            if (gamma->requires_grad) gamma->grad[c] += sum_gx;
            if (beta->requires_grad) beta->grad[c] += sum_g;
            if (x->requires_grad) {
              const T mean_g = sum_g / static_cast<T>(M);
              const T mean_gx = sum_gx / static_cast<T>(M);
              for (int64_t n = 0; n < N; ++n) {
                const T* gp = out->grad.data() + (n * C + c) * HW;
                const T* xp = x->data.data() + (n * C + c) * HW;
                T* gxp = x->grad.data() + (n * C + c) * HW;
                if (batch_stats) {
                  for (int64_t i = 0; i < HW; ++i) {
                    const T xhat = (xp[i] - mu) * is;
                    gxp[i] += g * is * (gp[i] - mean_g - xhat * mean_gx);
                  }
                } else {
                  for (int64_t i = 0; i < HW; ++i) gxp[i] += g * is * gp[i];
                }
              }
            }
          }
        });
  }
  detail::finish(out, "batchnorm2d");
  return out;
}

// Normalization over the last dimension with learnable scale/shift.
template <typename T>
TensorPtr<T> layernorm(const TensorPtr<T>& x, const TensorPtr<T>& gamma, const TensorPtr<T>& beta,
                       T eps = T(1e-5)) {
  if (x->shape.empty()) throw ShapeError("layernorm: scalar input");
  const int64_t D = x->shape.back();
  if (gamma->numel() != D || beta->numel() != D) {
    throw ShapeError("layernorm: parameter size does not match feature dim " + std::to_string(D));
  }
  const int64_t R = x->numel() / D;
  std::vector<T> mean(R), invstd(R);
  auto out = make_tensor<T>(x->shape);
  for (int64_t r = 0; r < R; ++r) {
    const T* xr = x->data.data() + r * D;
    T mu = T(0);
    for (int64_t d = 0; d < D; ++d) mu += xr[d];
    mu /= static_cast<T>(D);
    T var = T(0);
    for (int64_t d = 0; d < D; ++d) {
      const T dv = xr[d] - mu;
      var += dv * dv;
    }
    var /= static_cast<T>(D);
    const T is = T(1) / std::sqrt(var + eps);
    mean[r] = mu;
    invstd[r] = is;
    T* orow = out->data.data() + r * D;
    for (int64_t d = 0; d < D; ++d) {
      orow[d] = gamma->data[d] * (xr[d] - mu) * is + beta->data[d];
    }
  }
  if (detail::want_record<T>({&x, &gamma, &beta})) {
    out->requires_grad = true;
    Tape<T>::active()->record([x, gamma, beta, out, mean, invstd, R, D] {
      if (!out->has_grad()) return;
      if (x->requires_grad) x->ensure_grad();
      if (gamma->requires_grad) gamma->ensure_grad();
      if (beta->requires_grad) beta->ensure_grad();
      for (int64_t r = 0; r < R; ++r) {
        const T* xr = x->data.data() + r * D;
        const T* gr = out->grad.data() + r * D;
        const T mu = mean[r], is = invstd[r];
        T sum_h = T(0), sum_hx = T(0);
        for (int64_t d = 0; d < D; ++d) {
          const T xhat = (xr[d] - mu) * is;
          const T h = gr[d] * gamma->data[d];
          sum_h += h;
          sum_hx += h * xhat;
          if (gamma->requires_grad) gamma->grad[d] += gr[d] * xhat;
          if (beta->requires_grad) beta->grad[d] += gr[d];
        }
        if (x->requires_grad) {
          T* gx = x->grad.data() + r * D;
          const T mh = sum_h / static_cast<T>(D);
          const T mhx = sum_hx / static_cast<T>(D);
          for (int64_t d = 0; d < D; ++d) {
            const T xhat = (xr[d] - mu) * is;
            gx[d] += is * (gr[d] * gamma->data[d] - mh - xhat * mhx);
          }
        }
      }
    });
  }
  detail::finish(out, "layernorm");
  return out;
}

// ---------------------------------------------------------------------------
// Softmax, upsampling, loss
// ---------------------------------------------------------------------------

// Softmax over the last dimension (rows), computed with max-subtraction.
template <typename T>
TensorPtr<T> softmax_lastdim(const TensorPtr<T>& x) {
  if (x->shape.empty()) throw ShapeError("softmax_lastdim: scalar input");
  const int64_t L = x->shape.back();
  const int64_t R = x->numel() / L;
  auto out = make_tensor<T>(x->shape);
  for (int64_t r = 0; r < R; ++r) {
    const T* xr = x->data.data() + r * L;
    T* orow = out->data.data() + r * L;
    T m = xr[0];
    for (int64_t i = 1; i < L; ++i) m = std::max(m, xr[i]);
    T sum = T(0);
    for (int64_t i = 0; i < L; ++i) {
      orow[i] = std::exp(xr[i] - m);
      sum += orow[i];
    }
    const T inv = T(1) / sum;
    for (int64_t i = 0; i < L; ++i) orow[i] *= inv;
  }
  if (detail::want_record<T>({&x})) {
    out->requires_grad = true;
    Tape<T>::active()->record([x, out, R, L] {
      if (!out->has_grad() || !x->requires_grad) return;
      x->ensure_grad();
      for (int64_t r = 0; r < R; ++r) {
        const T* y = out->data.data() + r * L;
        const T* gy = out->grad.data() + r * L;
        T* gx = x->grad.data() + r * L;
        T dot = T(0);
        for (int64_t i = 0; i < L; ++i) dot += gy[i] * y[i];
        for (int64_t i = 0; i < L; ++i) gx[i] += y[i] * (gy[i] - dot);
      }
    });
  }
  detail::finish(out, "softmax_lastdim");
  return out;
}

// softmax_rows on an [L,L] matrix is the 2-D case of softmax_lastdim.
template <typename T>
TensorPtr<T> softmax_rows(const TensorPtr<T>& m) {
  if (m->shape.size() != 2) {
    throw ShapeError("softmax_rows: expected a 2-D matrix, got " + shape_str(m->shape));
  }
  return softmax_lastdim(m);
}

// 2x bilinear upsampling with half-pixel centers (constant-preserving).
template <typename T>
TensorPtr<T> bilinear_upsample2x(const TensorPtr<T>& x) {
  if (x->shape.size() != 4) {
    throw ShapeError("bilinear_upsample2x: expected [N,C,H,W], got " + shape_str(x->shape));
  }
  const int64_t N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int64_t Ho = 2 * H, Wo = 2 * W;
  // Half-pixel mapping: src = (dst + 0.5)/2 - 0.5, borders clamped.
  auto taps = [](int64_t dst_size, int64_t src_size) {
    std::vector<int64_t> i0(dst_size), i1(dst_size);
    std::vector<T> f(dst_size);
    for (int64_t o = 0; o < dst_size; ++o) {
      const double s = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
      const int64_t lo = static_cast<int64_t>(std::floor(s));
      f[o] = static_cast<T>(s - static_cast<double>(lo));
      i0[o] = std::clamp<int64_t>(lo, 0, src_size - 1);
      i1[o] = std::clamp<int64_t>(lo + 1, 0, src_size - 1);
    }
    return std::tuple(i0, i1, f);
  };
  auto [y0, y1, fy] = taps(Ho, H);
  auto [x0, x1, fx] = taps(Wo, W);
  auto out = make_tensor<T>({N, C, Ho, Wo});
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const T* xp = x->data.data() + (n * C + c) * H * W;
      T* op = out->data.data() + (n * C + c) * Ho * Wo;
      for (int64_t oy = 0; oy < Ho; ++oy) {
        const T* r0 = xp + y0[oy] * W;
        const T* r1 = xp + y1[oy] * W;
        const T wy1 = fy[oy], wy0 = T(1) - wy1;
        T* orow = op + oy * Wo;
        for (int64_t ox = 0; ox < Wo; ++ox) {
          const T wx1 = fx[ox], wx0 = T(1) - wx1;
          orow[ox] = wy0 * (wx0 * r0[x0[ox]] + wx1 * r0[x1[ox]]) +
                     wy1 * (wx0 * r1[x0[ox]] + wx1 * r1[x1[ox]]);
        }
      }
    }
  }
  if (detail::want_record<T>({&x})) {
    out->requires_grad = true;
    Tape<T>::active()->record([x, out, N, C, H, W, Ho, Wo, y0 = y0, y1 = y1, fy = fy, x0 = x0,
                               x1 = x1, fx = fx] {
      if (!out->has_grad() || !x->requires_grad) return;
      x->ensure_grad();
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
          T* gx = x->grad.data() + (n * C + c) * H * W;
          const T* gp = out->grad.data() + (n * C + c) * Ho * Wo;
          for (int64_t oy = 0; oy < Ho; ++oy) {
            const T wy1 = fy[oy], wy0 = T(1) - wy1;
            T* g0 = gx + y0[oy] * W;
            T* g1 = gx + y1[oy] * W;
            const T* grow = gp + oy * Wo;
            for (int64_t ox = 0; ox < Wo; ++ox) {
              const T g = grow[ox];
              const T wx1 = fx[ox], wx0 = T(1) - wx1;
              g0[x0[ox]] += wy0 * wx0 * g;
              g0[x1[ox]] += wy0 * wx1 * g;
              g1[x0[ox]] += wy1 * wx0 * g;
              g1[x1[ox]] += wy1 * wx1 * g;
            }
          }
        }
      }
    });
  }
  detail::finish(out, "bilinear_upsample2x");
  return out;
}

// Mean negative log-likelihood over all pixels. Targets are class indices.
template <typename T>
TensorPtr<T> cross_entropy(const TensorPtr<T>& logits, const std::vector<uint8_t>& targets) {
  if (logits->shape.size() != 4) {
    throw ShapeError("cross_entropy: expected logits [N,C,H,W], got " + shape_str(logits->shape));
  }
  const int64_t N = logits->shape[0], C = logits->shape[1], H = logits->shape[2],
                W = logits->shape[3];
  if (static_cast<int64_t>(targets.size()) != N * H * W) {
    throw ShapeError("cross_entropy: target count " + std::to_string(targets.size()) +
                     " does not match " + std::to_string(N * H * W) + " pixels");
  }
  const int64_t HW = H * W;
  const int64_t count = N * HW;
  double acc = 0.0;
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t p = 0; p < HW; ++p) {
      const uint8_t t = targets[n * HW + p];
      if (t >= C) {
        const int64_t h = p / W, w = p % W;
        throw LabelError("cross_entropy: label value " + std::to_string(int(t)) +
                         " outside {0.." + std::to_string(C - 1) + "} at pixel (n=" +
                         std::to_string(n) + ", h=" + std::to_string(h) + ", w=" +
                         std::to_string(w) + ")");
      }
      const T* lp = logits->data.data() + (n * C) * HW + p;
      T m = lp[0];
      for (int64_t c = 1; c < C; ++c) m = std::max(m, lp[c * HW]);
      T sum = T(0);
      for (int64_t c = 0; c < C; ++c) sum += std::exp(lp[c * HW] - m);
      const T lse = m + std::log(sum);
      acc += static_cast<double>(lse - lp[int64_t(t) * HW]);
    }
  }
  auto out = scalar_tensor<T>(static_cast<T>(acc / static_cast<double>(count)));
  if (detail::want_record<T>({&logits})) {
    out->requires_grad = true;
    Tape<T>::active()->record([logits, out, targets, N, C, HW, W, count] {
      if (!out->has_grad() || !logits->requires_grad) return;
      logits->ensure_grad();
      const T gscale = out->grad[0] / static_cast<T>(count);
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t p = 0; p < HW; ++p) {
          const uint8_t t = targets[n * HW + p];
          const T* lp = logits->data.data() + (n * C) * HW + p;
          T* gp = logits->grad.data() + (n * C) * HW + p;
          T m = lp[0];
          for (int64_t c = 1; c < C; ++c) m = std::max(m, lp[c * HW]);
          T sum = T(0);
          for (int64_t c = 0; c < C; ++c) sum += std::exp(lp[c * HW] - m);
          const T inv = T(1) / sum;
          for (int64_t c = 0; c < C; ++c) {
            const T soft = std::exp(lp[c * HW] - m) * inv;
            gp[c * HW] += gscale * (soft - (c == int64_t(t) ? T(1) : T(0)));
          }
        }
      }
    });
  }
  detail::finish(out, "cross_entropy");
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// p <- p - lr * grad(p), then grads are cleared. Every registered parameter
// must have received a gradient.
template <typename T>
void sgd_step(const std::vector<TensorPtr<T>>& params, T lr) {
  if (!(lr >= T(0))) throw ConfigError("sgd_step: learning rate must be non-negative");
  for (const auto& p : params) {
    if (!p->requires_grad || !p->has_grad()) {
      throw ContractError("sgd_step: registered parameter is missing its gradient");
    }
  }
  for (const auto& p : params) {
    for (size_t i = 0; i < p->data.size(); ++i) p->data[i] -= lr * p->grad[i];
    p->zero_grad();
  }
}

}  // namespace ukf
