#pragma once

// UKANFormer assembly: a convolutional encoder with stride-2 downsampling,
// Tok-KAN bottleneck stages, and a decoder that upsamples, fuses skip
// features, and runs either a GL-Trans block (UKANFormer) or a plain double
// convolution (UKAN baseline) per stage. The decoder choice is one config
// flag so the ablation differs in nothing else.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ukf/gl_trans.hpp"
#include "ukf/image.hpp"
#include "ukf/kan.hpp"
#include "ukf/ops.hpp"
#include "ukf/rng.hpp"
#include "ukf/spline.hpp"
#include "ukf/tensor.hpp"

namespace ukf {

enum class DecoderKind { kGlTrans, kPlainConv };

inline const char* decoder_kind_name(DecoderKind k) {
  return k == DecoderKind::kGlTrans ? "gl_trans" : "plain_conv";
}

inline DecoderKind decoder_kind_from_name(const std::string& s) {
  if (s == "gl_trans") return DecoderKind::kGlTrans;
  if (s == "plain_conv") return DecoderKind::kPlainConv;
  throw ConfigError("unknown decoder kind '" + s + "' (expected gl_trans or plain_conv)");
}

struct ModelConfig {
  int64_t in_channels = 3;
  int64_t num_classes = 2;
  std::vector<int64_t> encoder_channels = {16, 32, 64};
  std::vector<int64_t> tokkan_dims = {96, 128};  // embed dim per Tok-KAN stage
  int64_t tokkan_patch = 2;
  int64_t kan_layers_per_stage = 1;
  int spline_degree = 3;
  int spline_intervals = 5;
  double spline_lo = -1.0;
  double spline_hi = 1.0;
  DecoderKind decoder = DecoderKind::kGlTrans;
  int64_t attn_token_dim = 0;  // 0: use the stage's channel count
  int64_t attn_head_dim = 0;   // 0: max(4, channels/4)
  int64_t input_h = 32;
  int64_t input_w = 32;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  uint64_t seed = 0;
};

namespace detail_model {

template <typename T>
struct ConvBnRelu {
  TensorPtr<T> w;
  TensorPtr<T> gamma, beta;
  BnState<T> bn;
  int64_t stride = 1;
  int64_t pad = 1;
  T eps = T(1e-5);

  ConvBnRelu() = default;

  ConvBnRelu(int64_t in_ch, int64_t out_ch, int64_t k, int64_t stride_, double momentum,
             double eps_)
      : bn(out_ch, static_cast<T>(momentum)), stride(stride_), pad(k / 2),
        eps(static_cast<T>(eps_)) {
    w = make_tensor<T>({out_ch, in_ch, k, k}, true);
    gamma = make_tensor<T>({out_ch}, true);
    std::fill(gamma->data.begin(), gamma->data.end(), T(1));
    beta = make_tensor<T>({out_ch}, true);
  }

  void init(Rng& rng) {
    const int64_t fan_in = w->shape[1] * w->shape[2] * w->shape[3];
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : w->data) v = static_cast<T>(rng.normal(0.0, std));
  }

  TensorPtr<T> forward(const TensorPtr<T>& x, Mode mode) {
    return relu(batchnorm2d(conv2d(x, w, stride, pad), gamma, beta, bn, mode, eps));
  }
};

template <typename T>
struct DoubleConv {
  ConvBnRelu<T> a, b;

  DoubleConv() = default;

  DoubleConv(int64_t in_ch, int64_t out_ch, double momentum, double eps)
      : a(in_ch, out_ch, 3, 1, momentum, eps), b(out_ch, out_ch, 3, 1, momentum, eps) {}

  void init(Rng& rng) {
    a.init(rng);
    b.init(rng);
  }

  TensorPtr<T> forward(const TensorPtr<T>& x, Mode mode) {
    return b.forward(a.forward(x, mode), mode);
  }
};

}  // namespace detail_model

// Named handles to every learnable tensor and every persistent buffer
// (BN running statistics). Used by the optimizer and the checkpoint format.
template <typename T>
struct ParamRegistry {
  std::vector<std::pair<std::string, TensorPtr<T>>> trainable;
  std::vector<std::pair<std::string, std::vector<T>*>> buffers;

  void add(const std::string& name, const TensorPtr<T>& t) { trainable.emplace_back(name, t); }
  void add_buffer(const std::string& name, std::vector<T>* v) { buffers.emplace_back(name, v); }

  std::vector<TensorPtr<T>> tensors() const {
    std::vector<TensorPtr<T>> out;
    out.reserve(trainable.size());
    for (const auto& [name, t] : trainable) out.push_back(t);
    return out;
  }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : trainable) n += t->numel();
    return n;
  }
};

template <typename T>
struct ForwardOptions {
  Mode mode = Mode::kEval;
  int64_t zero_skip = -1;  // test hook: index of a skip tensor to suppress
};

template <typename T>
class UKanFormerModel {
 public:
  explicit UKanFormerModel(const ModelConfig& config) : cfg_(config) {
    validate(cfg_);
    const auto& ec = cfg_.encoder_channels;
    const int64_t S = static_cast<int64_t>(ec.size());
    const int64_t P = cfg_.tokkan_patch;
    BSplineGrid grid(cfg_.spline_degree, cfg_.spline_intervals, cfg_.spline_lo, cfg_.spline_hi);

    int64_t h = cfg_.input_h, w = cfg_.input_w;
    int64_t ch = cfg_.in_channels;
    for (int64_t i = 0; i < S; ++i) {
      encoder_.emplace_back(ch, ec[i], cfg_.bn_momentum, cfg_.bn_eps);
      downs_.emplace_back(ec[i], ec[i], 3, 2, cfg_.bn_momentum, cfg_.bn_eps);
      skip_channels_.push_back(ec[i]);
      skip_res_.emplace_back(h, w);
      ch = ec[i];
      h /= 2;
      w /= 2;
    }
    for (size_t j = 0; j < cfg_.tokkan_dims.size(); ++j) {
      skip_channels_.push_back(ch);
      skip_res_.emplace_back(h, w);
      tok_stages_.emplace_back(ch, cfg_.tokkan_dims[j], P, cfg_.kan_layers_per_stage, grid);
      ch = cfg_.tokkan_dims[j];
      h /= P;
      w /= P;
    }

    // decoder runs deepest-first over the recorded skips
    int64_t up_ch = ch;
    for (int64_t k = static_cast<int64_t>(skip_channels_.size()) - 1; k >= 0; --k) {
      DecoderStage stage;
      stage.skip_index = k;
      const int64_t sk_ch = skip_channels_[k];
      const auto [sh, sw] = skip_res_[k];
      stage.fuse = detail_model::ConvBnRelu<T>(up_ch + sk_ch, sk_ch, 1, 1, cfg_.bn_momentum,
                                               cfg_.bn_eps);
      if (cfg_.decoder == DecoderKind::kGlTrans) {
        const int64_t D = cfg_.attn_token_dim > 0 ? cfg_.attn_token_dim : sk_ch;
        const int64_t Dk = cfg_.attn_head_dim > 0 ? cfg_.attn_head_dim
                                                  : std::max<int64_t>(4, sk_ch / 4);
        stage.gl_trans.emplace(sk_ch, sh, sw, D, Dk, static_cast<T>(cfg_.bn_momentum),
                               static_cast<T>(cfg_.bn_eps));
      } else {
        stage.plain.emplace(sk_ch, sk_ch, cfg_.bn_momentum, cfg_.bn_eps);
      }
      decoder_.push_back(std::move(stage));
      up_ch = sk_ch;
    }

    head_w_ = make_tensor<T>({cfg_.num_classes, ec[0], 1, 1}, true);
    head_b_ = make_tensor<T>({cfg_.num_classes}, true);

    init_parameters();
    build_registry();
  }

  const ModelConfig& config() const { return cfg_; }
  ParamRegistry<T>& registry() { return registry_; }
  const ParamRegistry<T>& registry() const { return registry_; }
  int64_t parameter_count() const { return registry_.parameter_count(); }

  // image [N, in_channels, H, W] -> logits [N, num_classes, H, W]
  TensorPtr<T> forward(const TensorPtr<T>& image, const ForwardOptions<T>& opt) {
    if (image->shape.size() != 4 || image->shape[1] != cfg_.in_channels ||
        image->shape[2] != cfg_.input_h || image->shape[3] != cfg_.input_w) {
      throw ResolutionError("forward: expected [N," + std::to_string(cfg_.in_channels) + "," +
                            std::to_string(cfg_.input_h) + "," + std::to_string(cfg_.input_w) +
                            "], got " + shape_str(image->shape));
    }
    const Mode mode = opt.mode;
    std::vector<TensorPtr<T>> skips;
    auto cur = image;
    for (size_t i = 0; i < encoder_.size(); ++i) {
      cur = encoder_[i].forward(cur, mode);
      skips.push_back(cur);
      cur = downs_[i].forward(cur, mode);
    }
    for (auto& stage : tok_stages_) {
      skips.push_back(cur);
      cur = stage.forward(cur);
    }
    for (auto& stage : decoder_) {
      cur = bilinear_upsample2x(cur);
      auto skip = skips[stage.skip_index];
      if (opt.zero_skip == stage.skip_index) skip = scale(skip, T(0));
      cur = stage.fuse.forward(concat_channels(cur, skip), mode);
      if (stage.gl_trans) {
        cur = stage.gl_trans->forward(cur, mode);
      } else {
        cur = stage.plain->forward(cur, mode);
      }
    }
    return bias_channel(conv2d(cur, head_w_, 1, 0), head_b_);
  }

  TensorPtr<T> forward(const TensorPtr<T>& image, Mode mode) {
    ForwardOptions<T> opt;
    opt.mode = mode;
    return forward(image, opt);
  }

  // Per-pixel argmax over the two classes; ties go to background (class 0).
  std::vector<Mask> predict_mask(const TensorPtr<T>& image) {
    auto logits = forward(image, Mode::kEval);
    const int64_t N = logits->shape[0], C = logits->shape[1];
    const int64_t H = logits->shape[2], W = logits->shape[3];
    std::vector<Mask> out(static_cast<size_t>(N));
    for (int64_t n = 0; n < N; ++n) {
      Mask& m = out[n];
      m.width = static_cast<int>(W);
      m.height = static_cast<int>(H);
      m.v.assign(static_cast<size_t>(H * W), 0);
      const T* base = logits->data.data() + n * C * H * W;
      for (int64_t p = 0; p < H * W; ++p) {
        int best = 0;
        T best_v = base[p];
        for (int c = 1; c < C; ++c) {
          const T v = base[c * H * W + p];
          if (v > best_v) {  // strict: equal logits keep the background class
            best_v = v;
            best = c;
          }
        }
        m.v[p] = static_cast<uint8_t>(best);
      }
    }
    return out;
  }

  std::vector<TokKanStage<T>>& tok_stages() { return tok_stages_; }

 private:
  struct DecoderStage {
    int64_t skip_index = 0;
    detail_model::ConvBnRelu<T> fuse;
    std::optional<GlTransBlock<T>> gl_trans;
    std::optional<detail_model::DoubleConv<T>> plain;
  };

  static void validate(const ModelConfig& cfg) {
    if (cfg.encoder_channels.empty()) throw ConfigError("ModelConfig: encoder_channels is empty");
    for (size_t i = 1; i < cfg.encoder_channels.size(); ++i) {
      if (cfg.encoder_channels[i] <= cfg.encoder_channels[i - 1]) {
        throw ConfigError("ModelConfig: encoder_channels must be strictly increasing");
      }
    }
    if (cfg.tokkan_dims.empty()) throw ConfigError("ModelConfig: at least one Tok-KAN stage");
    if (cfg.tokkan_patch != 2) {
      throw ConfigError("ModelConfig: tokkan_patch must be 2 so each bottleneck stage matches "
                        "one 2x decoder upsample");
    }
    if (cfg.num_classes < 2) throw ConfigError("ModelConfig: num_classes must be >= 2");
    int64_t h = cfg.input_h, w = cfg.input_w;
    for (size_t i = 0; i < cfg.encoder_channels.size(); ++i) {
      if (h % 2 != 0 || w % 2 != 0) {
        throw ConfigError("ModelConfig: input " + std::to_string(cfg.input_h) + "x" +
                          std::to_string(cfg.input_w) + " is not divisible at encoder stage " +
                          std::to_string(i + 1));
      }
      h /= 2;
      w /= 2;
    }
    for (size_t j = 0; j < cfg.tokkan_dims.size(); ++j) {
      if (h % cfg.tokkan_patch != 0 || w % cfg.tokkan_patch != 0 || h == 0 || w == 0) {
        throw ConfigError("ModelConfig: bottleneck resolution is not divisible by the patch size "
                          "at Tok-KAN stage " + std::to_string(j + 1));
      }
      h /= cfg.tokkan_patch;
      w /= cfg.tokkan_patch;
    }
  }

  void init_parameters() {
    // independent streams per component: the ablation keeps the encoder,
    // bottleneck, and head draws identical across decoder variants
    Rng enc_rng(derive_seed(cfg_.seed, "init.encoder"));
    for (size_t i = 0; i < encoder_.size(); ++i) {
      encoder_[i].init(enc_rng);
      downs_[i].init(enc_rng);
    }
    Rng tok_rng(derive_seed(cfg_.seed, "init.tokkan"));
    for (auto& s : tok_stages_) s.init(tok_rng);
    Rng dec_rng(derive_seed(cfg_.seed, "init.decoder"));
    for (auto& s : decoder_) {
      s.fuse.init(dec_rng);
      if (s.gl_trans) s.gl_trans->init(dec_rng);
      if (s.plain) s.plain->init(dec_rng);
    }
    Rng head_rng(derive_seed(cfg_.seed, "init.head"));
    const double std = std::sqrt(2.0 / static_cast<double>(cfg_.encoder_channels[0]));
    for (auto& v : head_w_->data) v = static_cast<T>(head_rng.normal(0.0, std));
  }

  void add_cbr(const std::string& prefix, detail_model::ConvBnRelu<T>& m) {
    registry_.add(prefix + ".w", m.w);
    registry_.add(prefix + ".bn.gamma", m.gamma);
    registry_.add(prefix + ".bn.beta", m.beta);
    registry_.add_buffer(prefix + ".bn.running_mean", &m.bn.running_mean);
    registry_.add_buffer(prefix + ".bn.running_var", &m.bn.running_var);
  }

  void build_registry() {
    for (size_t i = 0; i < encoder_.size(); ++i) {
      const std::string p = "enc" + std::to_string(i);
      add_cbr(p + ".conv1", encoder_[i].a);
      add_cbr(p + ".conv2", encoder_[i].b);
      add_cbr(p + ".down", downs_[i]);
    }
    for (size_t j = 0; j < tok_stages_.size(); ++j) {
      const std::string p = "tok" + std::to_string(j);
      auto& s = tok_stages_[j];
      registry_.add(p + ".patch_proj", s.patch_proj);
      for (size_t l = 0; l < s.layers.size(); ++l) {
        const std::string lp = p + ".layer" + std::to_string(l);
        registry_.add(lp + ".norm.gamma", s.norm_gamma[l]);
        registry_.add(lp + ".norm.beta", s.norm_beta[l]);
        registry_.add(lp + ".kan.spline_coeffs", s.layers[l].spline_coeffs);
        registry_.add(lp + ".kan.base_weight", s.layers[l].base_weight);
      }
    }
    for (size_t d = 0; d < decoder_.size(); ++d) {
      const std::string p = "dec" + std::to_string(d);
      auto& s = decoder_[d];
      add_cbr(p + ".fuse", s.fuse);
      if (s.gl_trans) {
        auto& g = *s.gl_trans;
        registry_.add(p + ".glt.w1x1", g.w1x1);
        registry_.add(p + ".glt.w3x3", g.w3x3);
        registry_.add(p + ".glt.bn1.gamma", g.bn1_gamma);
        registry_.add(p + ".glt.bn1.beta", g.bn1_beta);
        registry_.add(p + ".glt.bn2.gamma", g.bn2_gamma);
        registry_.add(p + ".glt.bn2.beta", g.bn2_beta);
        registry_.add(p + ".glt.input_proj", g.input_proj);
        registry_.add(p + ".glt.wq", g.wq);
        registry_.add(p + ".glt.wk", g.wk);
        registry_.add(p + ".glt.wv", g.wv);
        registry_.add(p + ".glt.theta", g.theta);
        registry_.add(p + ".glt.value_proj_out", g.value_proj_out);
        registry_.add(p + ".glt.dw_kernel", g.dw_kernel);
        registry_.add(p + ".glt.w1x1_out", g.w1x1_out);
        registry_.add(p + ".glt.bn3.gamma", g.bn3_gamma);
        registry_.add(p + ".glt.bn3.beta", g.bn3_beta);
        registry_.add_buffer(p + ".glt.bn1.running_mean", &g.bn1.running_mean);
        registry_.add_buffer(p + ".glt.bn1.running_var", &g.bn1.running_var);
        registry_.add_buffer(p + ".glt.bn2.running_mean", &g.bn2.running_mean);
        registry_.add_buffer(p + ".glt.bn2.running_var", &g.bn2.running_var);
        registry_.add_buffer(p + ".glt.bn3.running_mean", &g.bn3.running_mean);
        registry_.add_buffer(p + ".glt.bn3.running_var", &g.bn3.running_var);
      }
      if (s.plain) {
        add_cbr(p + ".plain.conv1", s.plain->a);
        add_cbr(p + ".plain.conv2", s.plain->b);
      }
    }
    registry_.add("head.w", head_w_);
    registry_.add("head.b", head_b_);
  }

  ModelConfig cfg_;
  std::vector<detail_model::DoubleConv<T>> encoder_;
  std::vector<detail_model::ConvBnRelu<T>> downs_;
  std::vector<TokKanStage<T>> tok_stages_;
  std::vector<DecoderStage> decoder_;
  std::vector<int64_t> skip_channels_;
  std::vector<std::pair<int64_t, int64_t>> skip_res_;
  TensorPtr<T> head_w_, head_b_;
  ParamRegistry<T> registry_;
};

}  // namespace ukf
