#pragma once

// KAN layers: every edge (j,i) carries its own learnable activation
//   phi_ji(x) = base_weight[j,i] * silu(x) + sum_m spline_coeffs[j,i,m] * B_m(x)
// and node j sums phi_ji over the inputs. Tok-KAN tokenizes a feature map by
// patch embedding and runs residual KAN layers over the tokens.

#include <string>
#include <vector>

#include "ukf/ops.hpp"
#include "ukf/rng.hpp"
#include "ukf/spline.hpp"
#include "ukf/tensor.hpp"

namespace ukf {

template <typename T>
struct KanLayer {
  int64_t in_dim = 0;
  int64_t out_dim = 0;
  BSplineGrid grid;
  // [out_dim, in_dim * (G+k)] row-major over (in, basis); edge (j,i) owns the
  // coefficient slice [j, i*(G+k) .. (i+1)*(G+k)).
  TensorPtr<T> spline_coeffs;
  TensorPtr<T> base_weight;  // [out_dim, in_dim]

  KanLayer() = default;

  KanLayer(int64_t in, int64_t out, const BSplineGrid& g) : in_dim(in), out_dim(out), grid(g) {
    const int64_t M = grid.basis_count();
    spline_coeffs = make_tensor<T>({out_dim, in_dim * M}, true);
    base_weight = make_tensor<T>({out_dim, in_dim}, true);
  }

  void init(Rng& rng) {
    const double coeff_std = 0.1 / std::sqrt(static_cast<double>(grid.basis_count()));
    for (auto& v : spline_coeffs->data) v = static_cast<T>(rng.normal(0.0, coeff_std));
    const double base_std = std::sqrt(2.0 / static_cast<double>(in_dim));
    for (auto& v : base_weight->data) v = static_cast<T>(rng.normal(0.0, base_std));
  }

  // tokens [..., in_dim] -> [..., out_dim]
  TensorPtr<T> forward(const TensorPtr<T>& tokens) const {
    if (tokens->shape.empty() || tokens->shape.back() != in_dim) {
      throw ShapeError("KanLayer: token feature dim " + shape_str(tokens->shape) +
                       " does not match in_dim " + std::to_string(in_dim));
    }
    const int64_t M = grid.basis_count();
    auto basis = bspline_basis(tokens, grid);  // [..., in, M]
    std::vector<int64_t> merged(tokens->shape.begin(), tokens->shape.end() - 1);
    merged.push_back(in_dim * M);
    auto spline_part = matmul_nt(reshape(basis, std::move(merged)), spline_coeffs);
    auto base_part = matmul_nt(silu(tokens), base_weight);
    return add(spline_part, base_part);
  }
};

// Patch embedding: a P x P convolution with stride P followed by row-major
// flattening of the patch grid. x [N,C,H,W] -> tokens [N, (H/P)*(W/P), D_e].
template <typename T>
TensorPtr<T> patch_embed(const TensorPtr<T>& x, const TensorPtr<T>& proj, int64_t patch) {
  if (x->shape.size() != 4) {
    throw ShapeError("patch_embed: expected [N,C,H,W], got " + shape_str(x->shape));
  }
  if (x->shape[2] % patch != 0 || x->shape[3] % patch != 0) {
    throw ShapeError("patch_embed: spatial dims " + shape_str(x->shape) +
                     " not divisible by patch size " + std::to_string(patch));
  }
  return spatial_to_tokens(conv2d(x, proj, patch, 0));
}

// One Tok-KAN stage: patch embedding, then per-layer pre-norm residual KAN
// transforms, reshaped back to a spatial map. With zero-initialized KAN
// weights the stage is the identity on the embedded tokens.
template <typename T>
struct TokKanStage {
  int64_t in_channels = 0;
  int64_t embed_dim = 0;
  int64_t patch = 2;
  TensorPtr<T> patch_proj;  // [embed, in, P, P]
  std::vector<KanLayer<T>> layers;
  std::vector<TensorPtr<T>> norm_gamma;  // one per layer
  std::vector<TensorPtr<T>> norm_beta;

  TokKanStage() = default;

  TokKanStage(int64_t in_ch, int64_t embed, int64_t patch_, int64_t n_layers,
              const BSplineGrid& grid)
      : in_channels(in_ch), embed_dim(embed), patch(patch_) {
    patch_proj = make_tensor<T>({embed_dim, in_channels, patch, patch}, true);
    for (int64_t l = 0; l < n_layers; ++l) {
      layers.emplace_back(embed_dim, embed_dim, grid);
      auto g = make_tensor<T>({embed_dim}, true);
      std::fill(g->data.begin(), g->data.end(), T(1));
      norm_gamma.push_back(g);
      norm_beta.push_back(make_tensor<T>({embed_dim}, true));
    }
  }

  void init(Rng& rng) {
    const double std = std::sqrt(2.0 / static_cast<double>(in_channels * patch * patch));
    for (auto& v : patch_proj->data) v = static_cast<T>(rng.normal(0.0, std));
    for (auto& l : layers) l.init(rng);
  }

  // x [N,C,H,W] -> [N, embed, H/P, W/P]
  TensorPtr<T> forward(const TensorPtr<T>& x) const {
    auto tokens = patch_embed(x, patch_proj, patch);
    for (size_t l = 0; l < layers.size(); ++l) {
      auto normed = layernorm(tokens, norm_gamma[l], norm_beta[l]);
      tokens = add(tokens, layers[l].forward(normed));
    }
    return tokens_to_spatial(tokens, x->shape[2] / patch, x->shape[3] / patch);
  }
};

}  // namespace ukf
