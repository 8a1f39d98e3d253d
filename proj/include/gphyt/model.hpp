#pragma once

#include "gphyt/numerics.hpp"

#include <json.hpp>
#include <unsupported/Eigen/SpecialFunctions>

#include <string>
#include <vector>

namespace gphyt {

enum class ModelVariant { differentiator, direct };

inline const char* variant_name(ModelVariant v) {
  return v == ModelVariant::differentiator ? "differentiator" : "direct";
}

inline ModelVariant parse_variant(const std::string& s) {
  if (s == "differentiator") return ModelVariant::differentiator;
  if (s == "direct") return ModelVariant::direct;
  throw DataError("unknown model variant: " + s);
}

struct ModelConfig {
  int num_layers = 4;
  int embed_dim = 64;
  int mlp_dim = 256;
  int num_heads = 4;
  int patch_t = 1;
  int patch_h = 4;
  int patch_w = 4;
  int n_in = 4;
  int grid_h = 16;
  int grid_w = 32;
  int in_channels = 4 * kNumChannels;   // fields plus dx, dy, dt enrichment
  int out_channels = kNumChannels;
  IntegratorKind integrator = IntegratorKind::forward_euler;
  ModelVariant variant = ModelVariant::differentiator;

  int tokens_t() const { return n_in / patch_t; }
  int tokens_h() const { return grid_h / patch_h; }
  int tokens_w() const { return grid_w / patch_w; }
  int token_count() const { return tokens_t() * tokens_h() * tokens_w(); }
  int patch_dim() const { return patch_t * patch_h * patch_w * in_channels; }
  int out_patch_dim() const { return patch_t * patch_h * patch_w * out_channels; }
  int head_dim() const { return embed_dim / num_heads; }
  int cells() const { return grid_h * grid_w; }

  void validate() const {
    if (num_layers < 1 || embed_dim < 1 || mlp_dim < 1 || num_heads < 1)
      throw DataError("model config: dimensions must be positive");
    if (embed_dim % num_heads != 0)
      throw DataError("model config: embed_dim must be divisible by num_heads");
    if (grid_h % patch_h != 0 || grid_w % patch_w != 0)
      throw DataError("model config: grid must be divisible by the spatial patch size");
    if (n_in % patch_t != 0)
      throw DataError("model config: n_in must be divisible by patch_t");
    if (variant == ModelVariant::differentiator && integrator == IntegratorKind::none_direct)
      throw DataError("model config: differentiator variant needs an integrator");
  }

  /// Desk default; trains in minutes on CPU.
  static ModelConfig tiny() { return ModelConfig{}; }

  /// The S-scale reference configuration at the published grid size.
  static ModelConfig paper_s() {
    ModelConfig c;
    c.num_layers = 12;
    c.embed_dim = 192;
    c.mlp_dim = 768;
    c.num_heads = 3;
    c.patch_t = 4;
    c.patch_h = 16;
    c.patch_w = 16;
    c.grid_h = 128;
    c.grid_w = 256;
    return c;
  }

  nlohmann::json to_json() const {
    return {{"num_layers", num_layers}, {"embed_dim", embed_dim},   {"mlp_dim", mlp_dim},
            {"num_heads", num_heads},   {"patch_t", patch_t},       {"patch_h", patch_h},
            {"patch_w", patch_w},       {"n_in", n_in},             {"grid_h", grid_h},
            {"grid_w", grid_w},         {"in_channels", in_channels},
            {"out_channels", out_channels},
            {"integrator", integrator_name(integrator)},
            {"variant", variant_name(variant)}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.num_layers = j.at("num_layers").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.mlp_dim = j.at("mlp_dim").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.patch_t = j.at("patch_t").get<int>();
    c.patch_h = j.at("patch_h").get<int>();
    c.patch_w = j.at("patch_w").get<int>();
    c.n_in = j.at("n_in").get<int>();
    c.grid_h = j.at("grid_h").get<int>();
    c.grid_w = j.at("grid_w").get<int>();
    c.in_channels = j.at("in_channels").get<int>();
    c.out_channels = j.at("out_channels").get<int>();
    c.integrator = parse_integrator(j.at("integrator").get<std::string>());
    c.variant = parse_variant(j.at("variant").get<std::string>());
    return c;
  }
};

// ---------------------------------------------------------------------------
// Parameters. Everything is a dense matrix (vectors are n x 1) so that one
// visitor drives the optimizer, clipping, serialization, and checks.
// ---------------------------------------------------------------------------

template <typename Scalar>
struct LayerParams {
  Mat<Scalar> ln1_gamma, ln1_beta;   // E x 1
  Mat<Scalar> w_qkv, b_qkv;          // E x 3E, 3E x 1
  Mat<Scalar> w_out, b_out;          // E x E, E x 1
  Mat<Scalar> ln2_gamma, ln2_beta;   // E x 1
  Mat<Scalar> w_fc1, b_fc1;          // E x M, M x 1
  Mat<Scalar> w_fc2, b_fc2;          // M x E, E x 1
};

template <typename Scalar>
struct ModelParams {
  Mat<Scalar> tokenizer_w, tokenizer_b;      // P x E, E x 1
  Mat<Scalar> positional;                    // S x E
  std::vector<LayerParams<Scalar>> layers;
  Mat<Scalar> detokenizer_w, detokenizer_b;  // E x Q, Q x 1

  template <typename F>
  void visit(F&& fn) {
    fn("tokenizer.w", tokenizer_w);
    fn("tokenizer.b", tokenizer_b);
    fn("positional", positional);
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      auto& lp = layers[l];
      fn((p + "ln1.gamma").c_str(), lp.ln1_gamma);
      fn((p + "ln1.beta").c_str(), lp.ln1_beta);
      fn((p + "attn.w_qkv").c_str(), lp.w_qkv);
      fn((p + "attn.b_qkv").c_str(), lp.b_qkv);
      fn((p + "attn.w_out").c_str(), lp.w_out);
      fn((p + "attn.b_out").c_str(), lp.b_out);
      fn((p + "ln2.gamma").c_str(), lp.ln2_gamma);
      fn((p + "ln2.beta").c_str(), lp.ln2_beta);
      fn((p + "mlp.w_fc1").c_str(), lp.w_fc1);
      fn((p + "mlp.b_fc1").c_str(), lp.b_fc1);
      fn((p + "mlp.w_fc2").c_str(), lp.w_fc2);
      fn((p + "mlp.b_fc2").c_str(), lp.b_fc2);
    }
    fn("detokenizer.w", detokenizer_w);
    fn("detokenizer.b", detokenizer_b);
  }

  template <typename F>
  void visit(F&& fn) const {
    const_cast<ModelParams*>(this)->visit(
        [&fn](const char* name, Mat<Scalar>& m) { fn(name, static_cast<const Mat<Scalar>&>(m)); });
  }

  int64_t count() const {
    int64_t n = 0;
    visit([&n](const char*, const Mat<Scalar>& m) { n += m.size(); });
    return n;
  }

  void set_zero() {
    visit([](const char*, Mat<Scalar>& m) { m.setZero(); });
  }

  bool all_finite() const {
    bool ok = true;
    visit([&ok](const char*, const Mat<Scalar>& m) { ok = ok && m.allFinite(); });
    return ok;
  }

  static ModelParams zeros(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams p;
    const int e = cfg.embed_dim, m = cfg.mlp_dim;
    p.tokenizer_w = Mat<Scalar>::Zero(cfg.patch_dim(), e);
    p.tokenizer_b = Mat<Scalar>::Zero(e, 1);
    p.positional = Mat<Scalar>::Zero(cfg.token_count(), e);
    p.layers.resize(size_t(cfg.num_layers));
    for (auto& lp : p.layers) {
      lp.ln1_gamma = Mat<Scalar>::Zero(e, 1);
      lp.ln1_beta = Mat<Scalar>::Zero(e, 1);
      lp.w_qkv = Mat<Scalar>::Zero(e, 3 * e);
      lp.b_qkv = Mat<Scalar>::Zero(3 * e, 1);
      lp.w_out = Mat<Scalar>::Zero(e, e);
      lp.b_out = Mat<Scalar>::Zero(e, 1);
      lp.ln2_gamma = Mat<Scalar>::Zero(e, 1);
      lp.ln2_beta = Mat<Scalar>::Zero(e, 1);
      lp.w_fc1 = Mat<Scalar>::Zero(e, m);
      lp.b_fc1 = Mat<Scalar>::Zero(m, 1);
      lp.w_fc2 = Mat<Scalar>::Zero(m, e);
      lp.b_fc2 = Mat<Scalar>::Zero(e, 1);
    }
    p.detokenizer_w = Mat<Scalar>::Zero(e, cfg.out_patch_dim());
    p.detokenizer_b = Mat<Scalar>::Zero(cfg.out_patch_dim(), 1);
    return p;
  }

  /// 0.02-std normal weights and positional table, residual projections
  /// scaled down by sqrt(2 * num_layers), unit layer-norm gains, zero biases.
  static ModelParams init(const ModelConfig& cfg, uint64_t seed) {
    ModelParams p = zeros(cfg);
    Rng rng(seed);
    const Scalar std_base = Scalar(0.02);
    const Scalar std_resid = Scalar(0.02 / std::sqrt(2.0 * cfg.num_layers));
    auto fill = [&rng](Mat<Scalar>& m, Scalar stddev) {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = Scalar(rng.normal()) * stddev;
    };
    fill(p.tokenizer_w, std_base);
    fill(p.positional, std_base);
    for (auto& lp : p.layers) {
      lp.ln1_gamma.setOnes();
      lp.ln2_gamma.setOnes();
      fill(lp.w_qkv, std_base);
      fill(lp.w_out, std_resid);
      fill(lp.w_fc1, std_base);
      fill(lp.w_fc2, std_resid);
    }
    fill(p.detokenizer_w, std_resid);
    return p;
  }
};

/// Exact parameter count from the configured shapes.
inline int64_t param_count(const ModelConfig& cfg) {
  const int64_t e = cfg.embed_dim, m = cfg.mlp_dim;
  const int64_t tokenizer = int64_t(cfg.patch_dim()) * e + e;
  const int64_t positional = int64_t(cfg.token_count()) * e;
  const int64_t per_layer = 2 * e                // ln1
                            + e * 3 * e + 3 * e  // qkv
                            + e * e + e          // attention out
                            + 2 * e              // ln2
                            + e * m + m          // fc1
                            + m * e + e;         // fc2
  const int64_t detokenizer = e * int64_t(cfg.out_patch_dim()) + cfg.out_patch_dim();
  return tokenizer + positional + cfg.num_layers * per_layer + detokenizer;
}

inline int64_t transformer_stack_count(const ModelConfig& cfg) {
  const int64_t e = cfg.embed_dim, m = cfg.mlp_dim;
  return cfg.num_layers * (2 * e + e * 3 * e + 3 * e + e * e + e + 2 * e + e * m + m + m * e + e);
}

// ---------------------------------------------------------------------------
// Shared kernels. All operate on token matrices with one row per token; the
// batch is stacked along rows (sample b occupies rows [b*S, (b+1)*S)).
// ---------------------------------------------------------------------------

namespace nn {

template <typename Scalar>
constexpr Scalar kLnEps = Scalar(1e-5);

template <typename Scalar>
struct LayerNormTape {
  Mat<Scalar> x_hat;
  Vec<Scalar> inv_std;
};

template <typename Scalar>
void layer_norm_forward(const Mat<Scalar>& x, const Mat<Scalar>& gamma, const Mat<Scalar>& beta,
                        LayerNormTape<Scalar>& tape, Mat<Scalar>& out) {
  const Vec<Scalar> mean = x.rowwise().mean();
  Mat<Scalar> centered = x;
  centered.colwise() -= mean;
  const Vec<Scalar> var = centered.array().square().rowwise().mean();
  tape.inv_std = (var.array() + kLnEps<Scalar>).rsqrt().matrix();
  tape.x_hat = (centered.array().colwise() * tape.inv_std.array()).matrix();
  out = (tape.x_hat.array().rowwise() * gamma.col(0).transpose().array()).matrix();
  out.rowwise() += beta.col(0).transpose();
}

template <typename Scalar>
void layer_norm_backward(const Mat<Scalar>& d_out, const Mat<Scalar>& gamma,
                         const LayerNormTape<Scalar>& tape, Mat<Scalar>& d_gamma,
                         Mat<Scalar>& d_beta, Mat<Scalar>& d_x) {
  d_gamma.col(0) += (d_out.array() * tape.x_hat.array()).colwise().sum().matrix().transpose();
  d_beta.col(0) += d_out.colwise().sum().transpose();
  const Mat<Scalar> d_hat = (d_out.array().rowwise() * gamma.col(0).transpose().array()).matrix();
  const Vec<Scalar> m1 = d_hat.rowwise().mean();
  const Vec<Scalar> m2 = (d_hat.array() * tape.x_hat.array()).rowwise().mean();
  d_x = (((d_hat.colwise() - m1).array() - (tape.x_hat.array().colwise() * m2.array())).colwise() *
         tape.inv_std.array())
            .matrix();
}

template <typename Scalar>
void gelu_forward(const Mat<Scalar>& x, Mat<Scalar>& cdf, Mat<Scalar>& out) {
  const Scalar inv_sqrt2 = Scalar(0.7071067811865475244);
  cdf = (Scalar(0.5) * (Scalar(1) + (x.array() * inv_sqrt2).erf())).matrix();
  out = (x.array() * cdf.array()).matrix();
}

template <typename Scalar>
void gelu_backward(const Mat<Scalar>& d_out, const Mat<Scalar>& x, const Mat<Scalar>& cdf,
                   Mat<Scalar>& d_x) {
  const Scalar inv_sqrt2pi = Scalar(0.3989422804014326779);
  d_x = (d_out.array() *
         (cdf.array() + x.array() * ((-Scalar(0.5) * x.array().square()).exp() * inv_sqrt2pi)))
            .matrix();
}

/// Row-stacked multi-head softmax attention over all tokens of each sample.
/// probs[b*H + h] stores the S x S attention matrix for backward.
template <typename Scalar>
void attention_forward(const Mat<Scalar>& qkv, int batch, int seq, int heads,
                       std::vector<Mat<Scalar>>& probs, Mat<Scalar>& ctx) {
  const int e = int(qkv.cols()) / 3;
  const int dh = e / heads;
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
  probs.resize(size_t(batch) * heads);
  ctx.resize(qkv.rows(), e);
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const auto q = qkv.block(b * seq, h * dh, seq, dh);
      const auto k = qkv.block(b * seq, e + h * dh, seq, dh);
      const auto v = qkv.block(b * seq, 2 * e + h * dh, seq, dh);
      Mat<Scalar>& a = probs[size_t(b) * heads + h];
      a.noalias() = q * k.transpose();
      a *= scale;
      const Vec<Scalar> row_max = a.rowwise().maxCoeff();
      a = ((a.colwise() - row_max).array().exp()).matrix();
      const Vec<Scalar> row_sum = a.rowwise().sum();
      a.array().colwise() /= row_sum.array();
      ctx.block(b * seq, h * dh, seq, dh).noalias() = a * v;
    }
  }
}

template <typename Scalar>
void attention_backward(const Mat<Scalar>& d_ctx, const Mat<Scalar>& qkv,
                        const std::vector<Mat<Scalar>>& probs, int batch, int seq, int heads,
                        Mat<Scalar>& d_qkv) {
  const int e = int(qkv.cols()) / 3;
  const int dh = e / heads;
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
  d_qkv.resize(qkv.rows(), qkv.cols());
  d_qkv.setZero();
  Mat<Scalar> d_a, d_scores;
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const auto q = qkv.block(b * seq, h * dh, seq, dh);
      const auto k = qkv.block(b * seq, e + h * dh, seq, dh);
      const auto v = qkv.block(b * seq, 2 * e + h * dh, seq, dh);
      const Mat<Scalar>& a = probs[size_t(b) * heads + h];
      const auto d_ctx_b = d_ctx.block(b * seq, h * dh, seq, dh);

      d_qkv.block(b * seq, 2 * e + h * dh, seq, dh).noalias() = a.transpose() * d_ctx_b;
      d_a.noalias() = d_ctx_b * v.transpose();
      const Vec<Scalar> row_dot = (d_a.array() * a.array()).rowwise().sum();
      d_scores = (a.array() * (d_a.colwise() - row_dot).array()).matrix() * scale;
      d_qkv.block(b * seq, h * dh, seq, dh).noalias() = d_scores * k;
      d_qkv.block(b * seq, e + h * dh, seq, dh).noalias() = d_scores.transpose() * q;
    }
  }
}

}  // namespace nn

// ---------------------------------------------------------------------------
// Patch gather/scatter. Patch cells are ordered (channel, dt, dh, dw), tokens
// are ordered t-major then h then w; both orders are part of the model's
// serialization contract.
// ---------------------------------------------------------------------------

namespace detail {

/// Gathers one sample's enriched window into columns of patchesT
/// (patch_dim x token_count), starting at column col0.
template <typename Scalar>
void gather_patches(const std::vector<Mat<Scalar>>& enriched, const ModelConfig& cfg,
                    Mat<Scalar>& patchesT, int col0) {
  const int th = cfg.tokens_h(), tw = cfg.tokens_w(), tt = cfg.tokens_t();
  const int ph = cfg.patch_h, pw = cfg.patch_w, pt = cfg.patch_t;
  const int w = cfg.grid_w;
  for (int tp = 0; tp < tt; ++tp) {
    for (int hp = 0; hp < th; ++hp) {
      for (int wp = 0; wp < tw; ++wp) {
        const int s = (tp * th + hp) * tw + wp;
        Scalar* dst = patchesT.col(col0 + s).data();
        for (int c = 0; c < cfg.in_channels; ++c) {
          for (int dt = 0; dt < pt; ++dt) {
            const Scalar* src = enriched[size_t(tp * pt + dt)].col(c).data();
            for (int dh = 0; dh < ph; ++dh) {
              const int cell = (hp * ph + dh) * w + wp * pw;
              const int q0 = (((c * pt + dt) * ph + dh)) * pw;
              std::copy_n(src + cell, pw, dst + q0);
            }
          }
        }
      }
    }
  }
}

/// Writes the final temporal slice of out_patchesT (out_patch_dim x spatial
/// tokens of one sample) into pred (cells x C), starting at token column
/// col0. Patches tile the grid, so this is plain assignment.
template <typename Scalar>
void scatter_last_slice(const Mat<Scalar>& out_patchesT, const ModelConfig& cfg, int col0,
                        Mat<Scalar>& pred, int row0) {
  const int th = cfg.tokens_h(), tw = cfg.tokens_w();
  const int ph = cfg.patch_h, pw = cfg.patch_w, pt = cfg.patch_t;
  const int w = cfg.grid_w;
  const int dt_last = pt - 1;
  for (int hp = 0; hp < th; ++hp) {
    for (int wp = 0; wp < tw; ++wp) {
      const int s_sp = hp * tw + wp;
      const Scalar* src = out_patchesT.col(col0 + s_sp).data();
      for (int c = 0; c < cfg.out_channels; ++c) {
        Scalar* dst = pred.col(c).data() + row0;
        for (int dh = 0; dh < ph; ++dh) {
          const int cell = (hp * ph + dh) * w + wp * pw;
          const int q0 = ((c * pt + dt_last) * ph + dh) * pw;
          std::copy_n(src + q0, pw, dst + cell);
        }
      }
    }
  }
}

/// Adjoint of scatter_last_slice.
template <typename Scalar>
void gather_last_slice_grad(const Mat<Scalar>& d_pred, const ModelConfig& cfg, int row0,
                            Mat<Scalar>& d_out_patchesT, int col0) {
  const int th = cfg.tokens_h(), tw = cfg.tokens_w();
  const int ph = cfg.patch_h, pw = cfg.patch_w, pt = cfg.patch_t;
  const int w = cfg.grid_w;
  const int dt_last = pt - 1;
  for (int hp = 0; hp < th; ++hp) {
    for (int wp = 0; wp < tw; ++wp) {
      const int s_sp = hp * tw + wp;
      Scalar* dst = d_out_patchesT.col(col0 + s_sp).data();
      for (int c = 0; c < cfg.out_channels; ++c) {
        const Scalar* src = d_pred.col(c).data() + row0;
        for (int dh = 0; dh < ph; ++dh) {
          const int cell = (hp * ph + dh) * w + wp * pw;
          const int q0 = ((c * pt + dt_last) * ph + dh) * pw;
          std::copy_n(src + cell, pw, dst + q0);
        }
      }
    }
  }
}

/// Adjoint of gather_patches: scatter patch-cell gradients back onto the
/// enriched stack (disjoint tiling, so assignment).
template <typename Scalar>
void scatter_patch_grads(const Mat<Scalar>& d_patchesT, const ModelConfig& cfg, int col0,
                         std::vector<Mat<Scalar>>& d_enriched) {
  const int th = cfg.tokens_h(), tw = cfg.tokens_w(), tt = cfg.tokens_t();
  const int ph = cfg.patch_h, pw = cfg.patch_w, pt = cfg.patch_t;
  const int w = cfg.grid_w;
  for (int tp = 0; tp < tt; ++tp) {
    for (int hp = 0; hp < th; ++hp) {
      for (int wp = 0; wp < tw; ++wp) {
        const int s = (tp * th + hp) * tw + wp;
        const Scalar* src = d_patchesT.col(col0 + s).data();
        for (int c = 0; c < cfg.in_channels; ++c) {
          for (int dt = 0; dt < pt; ++dt) {
            Scalar* dst = d_enriched[size_t(tp * pt + dt)].col(c).data();
            for (int dh = 0; dh < ph; ++dh) {
              const int cell = (hp * ph + dh) * w + wp * pw;
              const int q0 = ((c * pt + dt) * ph + dh) * pw;
              std::copy_n(src + q0, pw, dst + cell);
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Spec-level single-sample operations. These share the kernels above with the
// batched engine, so tests on them cover the training path's math.
// ---------------------------------------------------------------------------

/// Tubelet tokenization of one enriched window: S tokens of width embed_dim,
/// each an affine map of its patch, token order t-major then h then w.
template <typename Scalar>
Mat<Scalar> tokenize(const std::vector<Mat<Scalar>>& enriched, const ModelParams<Scalar>& params,
                     const ModelConfig& cfg) {
  if (int(enriched.size()) != cfg.n_in) throw DataError("tokenize: wrong window length");
  if (enriched[0].rows() != cfg.cells() || enriched[0].cols() != cfg.in_channels)
    throw DataError("tokenize: frame shape mismatch");
  Mat<Scalar> patchesT(cfg.patch_dim(), cfg.token_count());
  detail::gather_patches(enriched, cfg, patchesT, 0);
  Mat<Scalar> tokens = patchesT.transpose() * params.tokenizer_w;
  tokens.rowwise() += params.tokenizer_b.col(0).transpose();
  return tokens;
}

template <typename Scalar>
void add_positions(Mat<Scalar>& tokens, const ModelParams<Scalar>& params) {
  if (tokens.rows() != params.positional.rows() || tokens.cols() != params.positional.cols())
    throw DataError("add_positions: shape mismatch");
  tokens += params.positional;
}

/// Pre-norm residual block: x + Attn(LN(x)), then + MLP(LN(.)).
template <typename Scalar>
Mat<Scalar> transformer_layer(const Mat<Scalar>& tokens, const LayerParams<Scalar>& lp,
                              const ModelConfig& cfg) {
  nn::LayerNormTape<Scalar> tape;
  Mat<Scalar> normed, ctx;
  std::vector<Mat<Scalar>> probs;
  nn::layer_norm_forward(tokens, lp.ln1_gamma, lp.ln1_beta, tape, normed);
  Mat<Scalar> qkv = normed * lp.w_qkv;
  qkv.rowwise() += lp.b_qkv.col(0).transpose();
  nn::attention_forward(qkv, 1, int(tokens.rows()), cfg.num_heads, probs, ctx);
  Mat<Scalar> stream = tokens;
  stream.noalias() += ctx * lp.w_out;
  stream.rowwise() += lp.b_out.col(0).transpose();
  nn::layer_norm_forward(stream, lp.ln2_gamma, lp.ln2_beta, tape, normed);
  Mat<Scalar> fc1 = normed * lp.w_fc1;
  fc1.rowwise() += lp.b_fc1.col(0).transpose();
  Mat<Scalar> cdf, act;
  nn::gelu_forward(fc1, cdf, act);
  stream.noalias() += act * lp.w_fc2;
  stream.rowwise() += lp.b_fc2.col(0).transpose();
  return stream;
}

/// Inverts tokenization shape-wise: every token becomes its patch of
/// out_channels values; returns all n_in temporal slices (cells x C each).
template <typename Scalar>
std::vector<Mat<Scalar>> detokenize(const Mat<Scalar>& tokens, const ModelParams<Scalar>& params,
                                    const ModelConfig& cfg) {
  if (tokens.rows() != cfg.token_count()) throw DataError("detokenize: wrong token count");
  Mat<Scalar> out_patchesT = params.detokenizer_w.transpose() * tokens.transpose();
  out_patchesT.colwise() += params.detokenizer_b.col(0);

  std::vector<Mat<Scalar>> slices(size_t(cfg.n_in), Mat<Scalar>(cfg.cells(), cfg.out_channels));
  const int th = cfg.tokens_h(), tw = cfg.tokens_w(), tt = cfg.tokens_t();
  const int ph = cfg.patch_h, pw = cfg.patch_w, pt = cfg.patch_t;
  for (int tp = 0; tp < tt; ++tp) {
    for (int hp = 0; hp < th; ++hp) {
      for (int wp = 0; wp < tw; ++wp) {
        const int s = (tp * th + hp) * tw + wp;
        const Scalar* src = out_patchesT.col(s).data();
        for (int c = 0; c < cfg.out_channels; ++c) {
          for (int dt = 0; dt < pt; ++dt) {
            Scalar* dst = slices[size_t(tp * pt + dt)].col(c).data();
            for (int dh = 0; dh < ph; ++dh) {
              const int cell = (hp * ph + dh) * cfg.grid_w + wp * pw;
              const int q0 = ((c * pt + dt) * ph + dh) * pw;
              std::copy_n(src + q0, pw, dst + cell);
            }
          }
        }
      }
    }
  }
  return slices;
}

// ---------------------------------------------------------------------------
// Batched engine with reverse-mode gradients. One tape per integrator stage;
// multi-stage integrators re-evaluate the differentiator with the stage state
// substituted for the last input frame, and backward chains through the
// substitutions via the enrichment adjoint.
// ---------------------------------------------------------------------------

template <typename Scalar>
struct BatchInput {
  std::vector<std::vector<Mat<Scalar>>> windows;  // [b][t]: (cells x C)
  GridShape<Scalar> shape;

  int batch() const { return int(windows.size()); }
};

template <typename Scalar>
class ModelEngine {
 public:
  explicit ModelEngine(const ModelConfig& cfg) : cfg_(cfg) { cfg_.validate(); }

  const ModelConfig& config() const { return cfg_; }

  /// Predictions for the whole batch, stacked: (B * cells) x C.
  /// Counts differentiator evaluations into eval_count when given.
  Mat<Scalar> forward(const ModelParams<Scalar>& params, const BatchInput<Scalar>& input,
                      long* eval_count = nullptr) {
    check_input(input);
    batch_ = input.batch();
    input_ = &input;
    stage_ = 0;

    if (cfg_.variant == ModelVariant::direct) {
      Mat<Scalar> pred = run_differentiator(params, nullptr);
      if (eval_count) *eval_count += 1;
      return pred;
    }

    Mat<Scalar> x_last(batch_ * cfg_.cells(), cfg_.out_channels);
    for (int b = 0; b < batch_; ++b) {
      x_last.middleRows(b * cfg_.cells(), cfg_.cells()) = input.windows[size_t(b)].back();
    }
    auto deriv = [&](const Mat<Scalar>& state) {
      if (eval_count) ++(*eval_count);
      return run_differentiator(params, stage_ == 0 ? nullptr : &state);
    };
    return integrate(cfg_.integrator, x_last, deriv, Scalar(1));
  }

  /// Accumulates parameter gradients for the loss gradient d_pred
  /// ((B * cells) x C). Must follow a forward() on the same input.
  void backward(const ModelParams<Scalar>& params, const Mat<Scalar>& d_pred,
                ModelParams<Scalar>& grads) {
    const Scalar step = Scalar(1);
    if (cfg_.variant == ModelVariant::direct) {
      backprop_differentiator(params, 0, d_pred, grads, nullptr);
      return;
    }
    switch (cfg_.integrator) {
      case IntegratorKind::forward_euler: {
        backprop_differentiator(params, 0, (step * d_pred).eval(), grads, nullptr);
        return;
      }
      case IntegratorKind::heun: {
        Mat<Scalar> g2;
        backprop_differentiator(params, 1, (step / 2 * d_pred).eval(), grads, &g2);
        backprop_differentiator(params, 0, (step / 2 * d_pred + step * g2).eval(), grads, nullptr);
        return;
      }
      case IntegratorKind::rk4: {
        Mat<Scalar> g4, g3, g2;
        backprop_differentiator(params, 3, (step / 6 * d_pred).eval(), grads, &g4);
        backprop_differentiator(params, 2, (step / 3 * d_pred + step * g4).eval(), grads, &g3);
        backprop_differentiator(params, 1, (step / 3 * d_pred + step / 2 * g3).eval(), grads, &g2);
        backprop_differentiator(params, 0, (step / 6 * d_pred + step / 2 * g2).eval(), grads,
                                nullptr);
        return;
      }
      case IntegratorKind::none_direct:
        break;
    }
    throw std::invalid_argument("backward: unsupported integrator");
  }

 private:
  struct LayerTape {
    nn::LayerNormTape<Scalar> ln1, ln2;
    Mat<Scalar> ln1_out, qkv, ctx, after_attn, ln2_out, fc1, cdf, act;
    std::vector<Mat<Scalar>> probs;
  };

  struct StageTape {
    Mat<Scalar> patchesT;      // P x (B*S)
    Mat<Scalar> tokens;        // (B*S) x E, after tokenizer + positions
    std::vector<LayerTape> layers;
    Mat<Scalar> final_stream;  // (B*S) x E
    Mat<Scalar> last_tokens;   // (B*S_sp) x E
  };

  void check_input(const BatchInput<Scalar>& input) const {
    if (input.windows.empty()) throw DataError("engine: empty batch");
    for (const auto& window : input.windows) {
      if (int(window.size()) != cfg_.n_in) throw DataError("engine: window length mismatch");
      if (window[0].rows() != cfg_.cells() || window[0].cols() != cfg_.out_channels)
        throw DataError("engine: frame shape mismatch");
    }
  }

  void check_finite(const Mat<Scalar>& m, int layer, const char* sublayer) const {
    if (!m.allFinite()) {
      throw NumericError("layer " + std::to_string(layer) + " " + sublayer +
                         ": non-finite activation");
    }
  }

  /// One differentiator evaluation over the batch; `state` non-null replaces
  /// each sample's last input frame (integrator stage re-evaluation).
  Mat<Scalar> run_differentiator(const ModelParams<Scalar>& params, const Mat<Scalar>* state) {
    const int s_count = cfg_.token_count();
    const int s_spatial = cfg_.tokens_h() * cfg_.tokens_w();
    const int cells = cfg_.cells();
    if (stage_ >= int(tapes_.size())) tapes_.resize(size_t(stage_) + 1);
    StageTape& tape = tapes_[size_t(stage_)];

    tape.patchesT.resize(cfg_.patch_dim(), batch_ * s_count);
    std::vector<Mat<Scalar>> window;
    for (int b = 0; b < batch_; ++b) {
      window = input_->windows[size_t(b)];
      if (state) window.back() = state->middleRows(b * cells, cells);
      const auto enriched = enrich_window(window, input_->shape);
      detail::gather_patches(enriched, cfg_, tape.patchesT, b * s_count);
    }

    tape.tokens.noalias() = tape.patchesT.transpose() * params.tokenizer_w;
    tape.tokens.rowwise() += params.tokenizer_b.col(0).transpose();
    for (int b = 0; b < batch_; ++b) {
      tape.tokens.middleRows(b * s_count, s_count) += params.positional;
    }

    tape.layers.resize(size_t(cfg_.num_layers));
    Mat<Scalar> stream = tape.tokens;
    for (int l = 0; l < cfg_.num_layers; ++l) {
      LayerTape& lt = tape.layers[size_t(l)];
      const LayerParams<Scalar>& lp = params.layers[size_t(l)];

      nn::layer_norm_forward(stream, lp.ln1_gamma, lp.ln1_beta, lt.ln1, lt.ln1_out);
      lt.qkv.noalias() = lt.ln1_out * lp.w_qkv;
      lt.qkv.rowwise() += lp.b_qkv.col(0).transpose();
      nn::attention_forward(lt.qkv, batch_, s_count, cfg_.num_heads, lt.probs, lt.ctx);
      stream.noalias() += lt.ctx * lp.w_out;
      stream.rowwise() += lp.b_out.col(0).transpose();
      check_finite(stream, l, "attention");
      lt.after_attn = stream;

      nn::layer_norm_forward(stream, lp.ln2_gamma, lp.ln2_beta, lt.ln2, lt.ln2_out);
      lt.fc1.noalias() = lt.ln2_out * lp.w_fc1;
      lt.fc1.rowwise() += lp.b_fc1.col(0).transpose();
      nn::gelu_forward(lt.fc1, lt.cdf, lt.act);
      stream.noalias() += lt.act * lp.w_fc2;
      stream.rowwise() += lp.b_fc2.col(0).transpose();
      check_finite(stream, l, "mlp");
    }
    tape.final_stream = stream;

    // Only the final temporal token block feeds the output slice; with
    // t-major token order it is a contiguous row block per sample.
    tape.last_tokens.resize(batch_ * s_spatial, cfg_.embed_dim);
    const int last_block = (cfg_.tokens_t() - 1) * s_spatial;
    for (int b = 0; b < batch_; ++b) {
      tape.last_tokens.middleRows(b * s_spatial, s_spatial) =
          stream.middleRows(b * s_count + last_block, s_spatial);
    }
    Mat<Scalar> out_patchesT = params.detokenizer_w.transpose() * tape.last_tokens.transpose();
    out_patchesT.colwise() += params.detokenizer_b.col(0);

    Mat<Scalar> pred(batch_ * cells, cfg_.out_channels);
    for (int b = 0; b < batch_; ++b) {
      detail::scatter_last_slice(out_patchesT, cfg_, b * s_spatial, pred, b * cells);
    }
    ++stage_;
    return pred;
  }

  /// Reverse pass through one recorded stage. d_state_out, when non-null,
  /// receives the gradient w.r.t. the substituted last-frame state.
  void backprop_differentiator(const ModelParams<Scalar>& params, int stage,
                               const Mat<Scalar>& d_pred, ModelParams<Scalar>& grads,
                               Mat<Scalar>* d_state_out) {
    const StageTape& tape = tapes_.at(size_t(stage));
    const int s_count = cfg_.token_count();
    const int s_spatial = cfg_.tokens_h() * cfg_.tokens_w();
    const int cells = cfg_.cells();

    Mat<Scalar> d_out_patchesT = Mat<Scalar>::Zero(cfg_.out_patch_dim(), batch_ * s_spatial);
    for (int b = 0; b < batch_; ++b) {
      detail::gather_last_slice_grad(d_pred, cfg_, b * cells, d_out_patchesT, b * s_spatial);
    }
    grads.detokenizer_w.noalias() += tape.last_tokens.transpose() * d_out_patchesT.transpose();
    grads.detokenizer_b.col(0) += d_out_patchesT.rowwise().sum();
    Mat<Scalar> d_last_tokens = d_out_patchesT.transpose() * params.detokenizer_w.transpose();

    Mat<Scalar> d_stream = Mat<Scalar>::Zero(batch_ * s_count, cfg_.embed_dim);
    const int last_block = (cfg_.tokens_t() - 1) * s_spatial;
    for (int b = 0; b < batch_; ++b) {
      d_stream.middleRows(b * s_count + last_block, s_spatial) =
          d_last_tokens.middleRows(b * s_spatial, s_spatial);
    }

    Mat<Scalar> d_branch, d_qkv, d_ctx, d_normed;
    for (int l = cfg_.num_layers - 1; l >= 0; --l) {
      const LayerTape& lt = tape.layers[size_t(l)];
      const LayerParams<Scalar>& lp = params.layers[size_t(l)];
      LayerParams<Scalar>& lg = grads.layers[size_t(l)];

      // MLP branch: stream_out = after_attn + act * w_fc2 + b_fc2.
      lg.w_fc2.noalias() += lt.act.transpose() * d_stream;
      lg.b_fc2.col(0) += d_stream.colwise().sum().transpose();
      d_branch.noalias() = d_stream * lp.w_fc2.transpose();
      nn::gelu_backward(d_branch, lt.fc1, lt.cdf, d_branch);
      lg.w_fc1.noalias() += lt.ln2_out.transpose() * d_branch;
      lg.b_fc1.col(0) += d_branch.colwise().sum().transpose();
      d_normed.noalias() = d_branch * lp.w_fc1.transpose();
      nn::layer_norm_backward(d_normed, lp.ln2_gamma, lt.ln2, lg.ln2_gamma, lg.ln2_beta, d_branch);
      d_stream += d_branch;  // residual path through after_attn

      // Attention branch: after_attn = input + ctx * w_out + b_out.
      lg.w_out.noalias() += lt.ctx.transpose() * d_stream;
      lg.b_out.col(0) += d_stream.colwise().sum().transpose();
      d_ctx.noalias() = d_stream * lp.w_out.transpose();
      nn::attention_backward(d_ctx, lt.qkv, lt.probs, batch_, s_count, cfg_.num_heads, d_qkv);
      lg.w_qkv.noalias() += lt.ln1_out.transpose() * d_qkv;
      lg.b_qkv.col(0) += d_qkv.colwise().sum().transpose();
      d_normed.noalias() = d_qkv * lp.w_qkv.transpose();
      nn::layer_norm_backward(d_normed, lp.ln1_gamma, lt.ln1, lg.ln1_gamma, lg.ln1_beta, d_branch);
      d_stream += d_branch;
    }

    // Tokenizer and positional table.
    for (int b = 0; b < batch_; ++b) {
      grads.positional += d_stream.middleRows(b * s_count, s_count);
    }
    grads.tokenizer_b.col(0) += d_stream.colwise().sum().transpose();
    grads.tokenizer_w.noalias() += tape.patchesT * d_stream;

    if (!d_state_out) return;

    // Gradient w.r.t. the substituted last frame, through the enrichment.
    Mat<Scalar> d_patchesT = params.tokenizer_w * d_stream.transpose();
    d_state_out->resize(batch_ * cells, cfg_.out_channels);
    std::vector<Mat<Scalar>> d_enriched(size_t(cfg_.n_in),
                                        Mat<Scalar>(cells, cfg_.in_channels));
    for (int b = 0; b < batch_; ++b) {
      detail::scatter_patch_grads(d_patchesT, cfg_, b * s_count, d_enriched);
      const auto d_frames = enrich_window_adjoint(d_enriched, input_->shape);
      d_state_out->middleRows(b * cells, cells) = d_frames.back();
    }
  }

  ModelConfig cfg_;
  const BatchInput<Scalar>* input_ = nullptr;
  int batch_ = 0;
  int stage_ = 0;
  std::vector<StageTape> tapes_;
};

// ---------------------------------------------------------------------------
// predict_next: the full Eq.-style assembly. The differentiator estimates the
// per-sampled-step change and the integrator advances the last input frame by
// one step; the direct variant emits the next state itself and never touches
// the integrator.
// ---------------------------------------------------------------------------

template <typename Scalar>
FieldFrame<Scalar> predict_next(const std::vector<FieldFrame<Scalar>>& inputs,
                                const ModelParams<Scalar>& params, const ModelConfig& cfg,
                                long* differentiator_evals = nullptr) {
  if (int(inputs.size()) != cfg.n_in) throw DataError("predict_next: wrong window length");
  BatchInput<Scalar> batch;
  batch.shape = GridShape<Scalar>{inputs[0].height(), inputs[0].width(), inputs[0].dx, inputs[0].dy};
  batch.windows.emplace_back();
  for (const auto& f : inputs) batch.windows[0].push_back(to_matrix(f));
  ModelEngine<Scalar> engine(cfg);
  Mat<Scalar> pred = engine.forward(params, batch, differentiator_evals);
  return to_frame(pred, inputs[0].height(), inputs[0].width(), inputs[0].dx, inputs[0].dy);
}

}  // namespace gphyt
