#pragma once

// GL-Trans decoder block: a local dual-convolution branch summed with a
// global biased self-attention branch, fused by a depthwise convolution and
// a 1x1 output projection with batch normalization.
//
//   F_local  = BN(W_1x1 * X) + BN(W_3x3 * X)
//   A        = softmax(Q K^T / sqrt(D_k) + theta),  Q/K/V from the token
//              sequence of X after a learnable channel-to-token projection
//   F_global = unflatten(value_proj_out(A V))
//   F_out    = BN(W_1x1_out * DWConv(F_local + F_global))
//
// theta is an L x L learnable position bias with L = H*W, so a block instance
// is bound to one spatial resolution; other resolutions are rejected.

#include <cmath>
#include <string>

#include "ukf/ops.hpp"
#include "ukf/rng.hpp"
#include "ukf/tensor.hpp"

namespace ukf {

template <typename T>
struct GlTransBlock {
  int64_t channels = 0;
  int64_t height = 0;
  int64_t width = 0;
  int64_t token_dim = 0;  // D
  int64_t head_dim = 0;   // D_k
  T bn_eps = T(1e-5);

  TensorPtr<T> w1x1, w3x3;  // local paths, each with its own BN state
  TensorPtr<T> bn1_gamma, bn1_beta;
  TensorPtr<T> bn2_gamma, bn2_beta;
  BnState<T> bn1, bn2;

  TensorPtr<T> input_proj;      // [C, D]
  TensorPtr<T> wq, wk, wv;      // [D, D_k]
  TensorPtr<T> theta;           // [L, L], zero-initialized
  TensorPtr<T> value_proj_out;  // [D_k, C]

  TensorPtr<T> dw_kernel;  // [C,1,3,3]
  TensorPtr<T> w1x1_out;   // [C,C,1,1]
  TensorPtr<T> bn3_gamma, bn3_beta;
  BnState<T> bn3;

  GlTransBlock() = default;

  GlTransBlock(int64_t C, int64_t H, int64_t W, int64_t D, int64_t Dk, T momentum = T(0.1),
               T eps = T(1e-5))
      : channels(C), height(H), width(W), token_dim(D), head_dim(Dk), bn_eps(eps),
        bn1(C, momentum), bn2(C, momentum), bn3(C, momentum) {
    if (C < 1 || H < 1 || W < 1 || D < 1 || Dk < 1) {
      throw ConfigError("GlTransBlock: all dimensions must be positive");
    }
    const int64_t L = H * W;
    w1x1 = make_tensor<T>({C, C, 1, 1}, true);
    w3x3 = make_tensor<T>({C, C, 3, 3}, true);
    bn1_gamma = ones({C});
    bn1_beta = make_tensor<T>({C}, true);
    bn2_gamma = ones({C});
    bn2_beta = make_tensor<T>({C}, true);
    input_proj = make_tensor<T>({C, D}, true);
    wq = make_tensor<T>({D, Dk}, true);
    wk = make_tensor<T>({D, Dk}, true);
    wv = make_tensor<T>({D, Dk}, true);
    theta = make_tensor<T>({L, L}, true);
    value_proj_out = make_tensor<T>({Dk, C}, true);
    dw_kernel = make_tensor<T>({C, 1, 3, 3}, true);
    w1x1_out = make_tensor<T>({C, C, 1, 1}, true);
    bn3_gamma = ones({C});
    bn3_beta = make_tensor<T>({C}, true);
  }

  void init(Rng& rng) {
    auto fill = [&rng](const TensorPtr<T>& t, double fan_in) {
      const double std = std::sqrt(2.0 / fan_in);
      for (auto& v : t->data) v = static_cast<T>(rng.normal(0.0, std));
    };
    fill(w1x1, channels);
    fill(w3x3, channels * 9);
    auto fill_proj = [&rng](const TensorPtr<T>& t, double fan_in) {
      const double std = std::sqrt(1.0 / fan_in);
      for (auto& v : t->data) v = static_cast<T>(rng.normal(0.0, std));
    };
    fill_proj(input_proj, channels);
    fill_proj(wq, token_dim);
    fill_proj(wk, token_dim);
    fill_proj(wv, token_dim);
    fill_proj(value_proj_out, head_dim);
    fill(dw_kernel, 9);
    fill(w1x1_out, channels);
    // theta stays zero: initial attention is purely content-based
  }

  void check_resolution(const TensorPtr<T>& x) const {
    if (x->shape.size() != 4 || x->shape[1] != channels) {
      throw ShapeError("GlTransBlock: expected [N," + std::to_string(channels) + ",H,W], got " +
                       shape_str(x->shape));
    }
    if (x->shape[2] != height || x->shape[3] != width) {
      throw ResolutionError("GlTransBlock: position bias is bound to " + std::to_string(height) +
                            "x" + std::to_string(width) + ", got input " + shape_str(x->shape));
    }
  }

  TensorPtr<T> local_branch(const TensorPtr<T>& x, Mode mode) {
    check_resolution(x);
    auto p1 = batchnorm2d(conv2d(x, w1x1, 1, 0), bn1_gamma, bn1_beta, bn1, mode, bn_eps);
    auto p3 = batchnorm2d(conv2d(x, w3x3, 1, 1), bn2_gamma, bn2_beta, bn2, mode, bn_eps);
    return add(p1, p3);
  }

  struct GlobalResult {
    TensorPtr<T> f_global;   // [N,C,H,W]
    TensorPtr<T> attention;  // [N,L,L], rows sum to 1
  };

  GlobalResult global_branch(const TensorPtr<T>& x) const {
    check_resolution(x);
    auto xseq = matmul(spatial_to_tokens(x), input_proj);  // [N,L,D]
    auto q = matmul(xseq, wq);
    auto k = matmul(xseq, wk);
    auto v = matmul(xseq, wv);
    const T inv_scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(head_dim)));
    auto scores = add_position_bias(scale(bmm_nt(q, k), inv_scale), theta);
    auto attn = softmax_lastdim(scores);
    auto mixed = bmm(attn, v);                       // [N,L,Dk]
    auto out_tokens = matmul(mixed, value_proj_out); // [N,L,C]
    return {tokens_to_spatial(out_tokens, height, width), attn};
  }

  TensorPtr<T> forward(const TensorPtr<T>& x, Mode mode) {
    auto fused = add(local_branch(x, mode), global_branch(x).f_global);
    auto dw = depthwise_conv2d(fused, dw_kernel, 1);
    return batchnorm2d(conv2d(dw, w1x1_out, 1, 0), bn3_gamma, bn3_beta, bn3, mode, bn_eps);
  }

 private:
  static TensorPtr<T> ones(std::vector<int64_t> shape) {
    auto t = make_tensor<T>(std::move(shape), true);
    std::fill(t->data.begin(), t->data.end(), T(1));
    return t;
  }
};

}  // namespace ukf
