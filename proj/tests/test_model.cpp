#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gphyt/model.hpp"

#include <cmath>
#include <vector>

using namespace gphyt;

namespace {

Mat<double> random_mat(int rows, int cols, Rng& rng, double scale = 1.0) {
  Mat<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-scale, scale);
  return m;
}

ModelConfig micro_config() {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.embed_dim = 8;
  cfg.mlp_dim = 16;
  cfg.num_heads = 2;
  cfg.patch_t = 1;
  cfg.patch_h = 2;
  cfg.patch_w = 2;
  cfg.n_in = 2;
  cfg.grid_h = 4;
  cfg.grid_w = 4;
  return cfg;
}

BatchInput<double> random_batch(const ModelConfig& cfg, int batch, Rng& rng,
                                const std::array<bool, kNumChannels>& present) {
  BatchInput<double> input;
  input.shape = GridShape<double>{cfg.grid_h, cfg.grid_w, 0.5, 0.25};
  for (int b = 0; b < batch; ++b) {
    std::vector<Mat<double>> window;
    for (int t = 0; t < cfg.n_in; ++t) {
      Mat<double> f = random_mat(cfg.cells(), kNumChannels, rng);
      for (int c = 0; c < kNumChannels; ++c)
        if (!present[size_t(c)]) f.col(c).setZero();
      window.push_back(f);
    }
    input.windows.push_back(window);
  }
  return input;
}

// Masked MSE over present channels, averaged per sample then over the batch.
double masked_mse(const Mat<double>& pred, const Mat<double>& target, int cells,
                  const std::array<bool, kNumChannels>& present) {
  const int batch = int(pred.rows()) / cells;
  int n_present = 0;
  for (bool p : present) n_present += p ? 1 : 0;
  double total = 0;
  for (int b = 0; b < batch; ++b) {
    double s = 0;
    for (int c = 0; c < kNumChannels; ++c) {
      if (!present[size_t(c)]) continue;
      s += (pred.col(c).segment(b * cells, cells) - target.col(c).segment(b * cells, cells))
               .squaredNorm();
    }
    total += s / double(cells * n_present);
  }
  return total / batch;
}

Mat<double> masked_mse_grad(const Mat<double>& pred, const Mat<double>& target, int cells,
                            const std::array<bool, kNumChannels>& present) {
  const int batch = int(pred.rows()) / cells;
  int n_present = 0;
  for (bool p : present) n_present += p ? 1 : 0;
  Mat<double> d = Mat<double>::Zero(pred.rows(), pred.cols());
  for (int c = 0; c < kNumChannels; ++c) {
    if (!present[size_t(c)]) continue;
    d.col(c) = 2.0 * (pred.col(c) - target.col(c)) / double(cells * n_present * batch);
  }
  return d;
}

}  // namespace

TEST_CASE("token and patch shape arithmetic") {
  ModelConfig cfg = ModelConfig::tiny();
  // (n_in/p_t) * (H/p_h) * (W/p_w) with the desk grid 16x32 and patch (1,4,4).
  CHECK(cfg.token_count() == 4 * 4 * 8);
  CHECK(cfg.patch_dim() == 1 * 4 * 4 * 20);
  CHECK(cfg.out_patch_dim() == 1 * 4 * 4 * 5);
  CHECK(cfg.head_dim() == 16);

  SUBCASE("divisibility violations are rejected") {
    cfg.patch_h = 3;
    CHECK_THROWS_AS(cfg.validate(), DataError);
  }
}

TEST_CASE("tokenize: zero weights give the bias, linearity holds") {
  ModelConfig cfg = micro_config();
  auto params = ModelParams<double>::zeros(cfg);
  Rng rng(3);
  std::vector<Mat<double>> window;
  for (int t = 0; t < cfg.n_in; ++t) window.push_back(random_mat(cfg.cells(), cfg.in_channels, rng));

  SUBCASE("wrong window length is a shape error") {
    std::vector<Mat<double>> short_window(1, window[0]);
    CHECK_THROWS_AS((void)tokenize(short_window, params, cfg), DataError);
  }
  SUBCASE("zero weights, bias b: every token equals b") {
    for (int e = 0; e < cfg.embed_dim; ++e) params.tokenizer_b(e, 0) = 0.1 * (e + 1);
    auto tokens = tokenize(window, params, cfg);
    CHECK(tokens.rows() == cfg.token_count());
    for (int s = 0; s < cfg.token_count(); ++s)
      for (int e = 0; e < cfg.embed_dim; ++e)
        CHECK(tokens(s, e) == doctest::Approx(0.1 * (e + 1)).epsilon(1e-12));
  }
  SUBCASE("linear in the input when bias is zero") {
    params.tokenizer_w = random_mat(cfg.patch_dim(), cfg.embed_dim, rng);
    auto base = tokenize(window, params, cfg);
    std::vector<Mat<double>> scaled;
    for (const auto& f : window) scaled.push_back(2.5 * f);
    auto got = tokenize(scaled, params, cfg);
    CHECK(((got - 2.5 * base).array().abs() < 1e-12).all());
  }
}

TEST_CASE("add_positions identities") {
  ModelConfig cfg = micro_config();
  auto params = ModelParams<double>::zeros(cfg);
  Rng rng(4);
  Mat<double> tokens = random_mat(cfg.token_count(), cfg.embed_dim, rng);

  Mat<double> copy = tokens;
  add_positions(copy, params);  // zero table: identity
  CHECK((copy.array() == tokens.array()).all());

  params.positional = random_mat(cfg.token_count(), cfg.embed_dim, rng);
  Mat<double> zeros = Mat<double>::Zero(cfg.token_count(), cfg.embed_dim);
  add_positions(zeros, params);  // zero tokens: output equals table
  CHECK((zeros.array() == params.positional.array()).all());

  Mat<double> shifted = tokens;
  add_positions(shifted, params);
  CHECK(((shifted - tokens - params.positional).array().abs() == 0.0).all());
}

TEST_CASE("attention probabilities are a row-stochastic average") {
  Rng rng(5);
  const int seq = 6, embed = 8, heads = 2;
  Mat<double> qkv = random_mat(seq, 3 * embed, rng);
  std::vector<Mat<double>> probs;
  Mat<double> ctx;
  nn::attention_forward(qkv, 1, seq, heads, probs, ctx);
  REQUIRE(probs.size() == 2);
  for (const auto& a : probs) {
    for (int i = 0; i < seq; ++i) CHECK(a.row(i).sum() == doctest::Approx(1.0).epsilon(1e-6));
  }

  SUBCASE("identical tokens are preserved per head") {
    Mat<double> same = qkv.row(0).replicate(seq, 1);
    nn::attention_forward(same, 1, seq, heads, probs, ctx);
    for (int i = 0; i < seq; ++i) {
      // weighted average of equal values is the value itself
      CHECK(((ctx.row(i) - same.row(0).segment(2 * embed, embed)).array().abs() < 1e-12).all());
    }
  }
}

TEST_CASE("transformer layer matches a scalar-loop reference on 3 tokens") {
  const int seq = 3, embed = 4, mlp = 8;
  ModelConfig cfg;
  cfg.num_layers = 1;
  cfg.embed_dim = embed;
  cfg.mlp_dim = mlp;
  cfg.num_heads = 1;
  cfg.patch_t = cfg.patch_h = cfg.patch_w = 1;
  cfg.n_in = 1;
  cfg.grid_h = 1;
  cfg.grid_w = 3;  // token_count = 3

  Rng rng(6);
  LayerParams<double> lp;
  lp.ln1_gamma = random_mat(embed, 1, rng);
  lp.ln1_beta = random_mat(embed, 1, rng);
  lp.w_qkv = random_mat(embed, 3 * embed, rng);
  lp.b_qkv = random_mat(3 * embed, 1, rng);
  lp.w_out = random_mat(embed, embed, rng);
  lp.b_out = random_mat(embed, 1, rng);
  lp.ln2_gamma = random_mat(embed, 1, rng);
  lp.ln2_beta = random_mat(embed, 1, rng);
  lp.w_fc1 = random_mat(embed, mlp, rng);
  lp.b_fc1 = random_mat(mlp, 1, rng);
  lp.w_fc2 = random_mat(mlp, embed, rng);
  lp.b_fc2 = random_mat(embed, 1, rng);
  Mat<double> tokens = random_mat(seq, embed, rng);

  // Reference: plain loops, no shared code with the implementation.
  auto layer_norm_ref = [&](const Mat<double>& x, const Mat<double>& g, const Mat<double>& b) {
    Mat<double> out(x.rows(), x.cols());
    for (int i = 0; i < x.rows(); ++i) {
      double mean = 0;
      for (int j = 0; j < x.cols(); ++j) mean += x(i, j);
      mean /= x.cols();
      double var = 0;
      for (int j = 0; j < x.cols(); ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
      var /= x.cols();
      for (int j = 0; j < x.cols(); ++j)
        out(i, j) = g(j, 0) * (x(i, j) - mean) / std::sqrt(var + 1e-5) + b(j, 0);
    }
    return out;
  };
  Mat<double> h1 = layer_norm_ref(tokens, lp.ln1_gamma, lp.ln1_beta);
  Mat<double> q(seq, embed), k(seq, embed), v(seq, embed);
  for (int i = 0; i < seq; ++i) {
    for (int j = 0; j < embed; ++j) {
      double sq = lp.b_qkv(j, 0), sk = lp.b_qkv(embed + j, 0), sv = lp.b_qkv(2 * embed + j, 0);
      for (int m = 0; m < embed; ++m) {
        sq += h1(i, m) * lp.w_qkv(m, j);
        sk += h1(i, m) * lp.w_qkv(m, embed + j);
        sv += h1(i, m) * lp.w_qkv(m, 2 * embed + j);
      }
      q(i, j) = sq;
      k(i, j) = sk;
      v(i, j) = sv;
    }
  }
  Mat<double> ctx(seq, embed);
  for (int i = 0; i < seq; ++i) {
    std::vector<double> score(seq);
    double max_s = -1e300;
    for (int j = 0; j < seq; ++j) {
      double s = 0;
      for (int m = 0; m < embed; ++m) s += q(i, m) * k(j, m);
      score[j] = s / std::sqrt(double(embed));
      max_s = std::max(max_s, score[j]);
    }
    double z = 0;
    for (int j = 0; j < seq; ++j) {
      score[j] = std::exp(score[j] - max_s);
      z += score[j];
    }
    for (int m = 0; m < embed; ++m) {
      double s = 0;
      for (int j = 0; j < seq; ++j) s += score[j] / z * v(j, m);
      ctx(i, m) = s;
    }
  }
  Mat<double> stream = tokens;
  for (int i = 0; i < seq; ++i)
    for (int j = 0; j < embed; ++j) {
      double s = lp.b_out(j, 0);
      for (int m = 0; m < embed; ++m) s += ctx(i, m) * lp.w_out(m, j);
      stream(i, j) += s;
    }
  Mat<double> h2 = layer_norm_ref(stream, lp.ln2_gamma, lp.ln2_beta);
  Mat<double> want = stream;
  for (int i = 0; i < seq; ++i) {
    std::vector<double> act(mlp);
    for (int j = 0; j < mlp; ++j) {
      double s = lp.b_fc1(j, 0);
      for (int m = 0; m < embed; ++m) s += h2(i, m) * lp.w_fc1(m, j);
      act[j] = 0.5 * s * (1.0 + std::erf(s / std::sqrt(2.0)));
    }
    for (int j = 0; j < embed; ++j) {
      double s = lp.b_fc2(j, 0);
      for (int m = 0; m < mlp; ++m) s += act[m] * lp.w_fc2(m, j);
      want(i, j) += s;
    }
  }

  Mat<double> got = transformer_layer(tokens, lp, cfg);
  CHECK(((got - want).array().abs() < 1e-5).all());
  CHECK(((got - want).array().abs() < 1e-10).all());  // agreement is much tighter in practice
}

TEST_CASE("detokenize: zeros, linearity, and explicit inversion of tokenize") {
  ModelConfig cfg;
  cfg.num_layers = 1;
  cfg.embed_dim = 20;  // equals patch_dim so the tokenizer is square
  cfg.mlp_dim = 8;
  cfg.num_heads = 1;
  cfg.patch_t = 1;
  cfg.patch_h = 2;
  cfg.patch_w = 2;
  cfg.n_in = 1;
  cfg.grid_h = 4;
  cfg.grid_w = 4;
  cfg.in_channels = kNumChannels;  // raw fields, no enrichment
  cfg.out_channels = kNumChannels;

  auto params = ModelParams<double>::zeros(cfg);
  Rng rng(7);

  SUBCASE("zero tokens and zero bias give a zero stack") {
    auto slices = detokenize(Mat<double>(Mat<double>::Zero(cfg.token_count(), cfg.embed_dim)),
                             params, cfg);
    REQUIRE(slices.size() == 1);
    CHECK((slices[0].array() == 0.0).all());
  }
  SUBCASE("linear in tokens with zero bias") {
    params.detokenizer_w = random_mat(cfg.embed_dim, cfg.out_patch_dim(), rng);
    Mat<double> tokens = random_mat(cfg.token_count(), cfg.embed_dim, rng);
    auto a = detokenize(tokens, params, cfg);
    auto b = detokenize(Mat<double>(3.0 * tokens), params, cfg);
    CHECK(((b[0] - 3.0 * a[0]).array().abs() < 1e-12).all());
  }
  SUBCASE("detokenizer set to the tokenizer's inverse reproduces the input") {
    params.tokenizer_w = random_mat(cfg.patch_dim(), cfg.embed_dim, rng, 0.5);
    params.tokenizer_w += 0.5 * Mat<double>::Identity(20, 20);  // keep it well-conditioned
    params.detokenizer_w = params.tokenizer_w.inverse();
    std::vector<Mat<double>> window{random_mat(cfg.cells(), kNumChannels, rng)};
    auto tokens = tokenize(window, params, cfg);
    auto slices = detokenize(tokens, params, cfg);
    REQUIRE(slices.size() == 1);
    CHECK(((slices[0] - window[0]).array().abs() < 1e-4).all());
  }
}

TEST_CASE("predict_next: zero-parameter persistence and variant behavior") {
  ModelConfig cfg = micro_config();
  auto zero_params = ModelParams<double>::zeros(cfg);
  Rng rng(8);

  std::vector<FieldFrame<double>> inputs;
  for (int t = 0; t < cfg.n_in; ++t) {
    FieldFrame<double> f(cfg.grid_h, cfg.grid_w);
    for (auto& g : f.data)
      for (int i = 0; i < cfg.grid_h; ++i)
        for (int j = 0; j < cfg.grid_w; ++j) g(i, j) = rng.uniform(-1.0, 1.0);
    inputs.push_back(f);
  }

  SUBCASE("zero differentiator with any integrator returns the last frame bitwise") {
    for (auto kind : {IntegratorKind::forward_euler, IntegratorKind::heun, IntegratorKind::rk4}) {
      cfg.integrator = kind;
      auto out = predict_next(inputs, zero_params, cfg);
      for (int c = 0; c < kNumChannels; ++c) {
        CHECK((out.data[c] == inputs.back().data[c]).all());
      }
    }
  }
  SUBCASE("direct variant with zero parameters returns the zero frame") {
    cfg.variant = ModelVariant::direct;
    auto out = predict_next(inputs, zero_params, cfg);
    for (int c = 0; c < kNumChannels; ++c) CHECK((out.data[c] == 0.0).all());
  }
  SUBCASE("differentiator evaluation counts per integrator") {
    auto params = ModelParams<double>::init(cfg, 11);
    for (auto [kind, want] : {std::pair{IntegratorKind::forward_euler, 1L},
                              std::pair{IntegratorKind::heun, 2L},
                              std::pair{IntegratorKind::rk4, 4L}}) {
      cfg.integrator = kind;
      long evals = 0;
      (void)predict_next(inputs, params, cfg, &evals);
      CHECK(evals == want);
    }
  }
  SUBCASE("deterministic: identical inputs and params give bitwise-identical outputs") {
    auto params = ModelParams<double>::init(cfg, 12);
    auto a = predict_next(inputs, params, cfg);
    auto b = predict_next(inputs, params, cfg);
    for (int c = 0; c < kNumChannels; ++c) CHECK((a.data[c] == b.data[c]).all());
  }
}

TEST_CASE("parameter counting") {
  SUBCASE("hand count of every array on a minimal config") {
    ModelConfig cfg;
    cfg.num_layers = 1;
    cfg.embed_dim = 2;
    cfg.mlp_dim = 4;
    cfg.num_heads = 1;
    cfg.patch_t = cfg.patch_h = cfg.patch_w = 1;
    cfg.n_in = 1;
    cfg.grid_h = 1;
    cfg.grid_w = 1;
    cfg.in_channels = 1;
    cfg.out_channels = 1;
    // tokenizer 1*2+2=4, positional 1*2=2,
    // layer: ln1 4, qkv 2*6+6=18, out 2*2+2=6, ln2 4, fc1 2*4+4=12, fc2 4*2+2=10 -> 54,
    // detokenizer 2*1+1=3; total 63.
    CHECK(param_count(cfg) == 63);
    CHECK(ModelParams<float>::zeros(cfg).count() == 63);
  }
  SUBCASE("doubling mlp_dim adds exactly 2*embed*mlp + mlp per layer") {
    ModelConfig a = micro_config();
    ModelConfig b = a;
    b.mlp_dim = 2 * a.mlp_dim;
    CHECK(param_count(b) - param_count(a) ==
          int64_t(a.num_layers) * (2 * a.embed_dim * a.mlp_dim + a.mlp_dim));
  }
  SUBCASE("runtime count equals the closed form for random valid configs") {
    Rng rng(13);
    for (int i = 0; i < 10; ++i) {
      ModelConfig cfg;
      cfg.num_heads = 1 + int(rng.below(4));
      cfg.embed_dim = cfg.num_heads * (4 + int(rng.below(8)));
      cfg.mlp_dim = 8 + int(rng.below(64));
      cfg.num_layers = 1 + int(rng.below(4));
      cfg.patch_t = 1;
      cfg.patch_h = 2;
      cfg.patch_w = 2;
      cfg.n_in = 1 + int(rng.below(4));
      cfg.grid_h = 4;
      cfg.grid_w = 8;
      CHECK(ModelParams<float>::zeros(cfg).count() == param_count(cfg));
      CHECK(ModelConfig(cfg).token_count() ==
            (cfg.n_in / cfg.patch_t) * (cfg.grid_h / cfg.patch_h) * (cfg.grid_w / cfg.patch_w));
    }
  }
  SUBCASE("S-scale reference lands near the published 9.2M total") {
    ModelConfig s = ModelConfig::paper_s();
    const double total = double(param_count(s));
    MESSAGE("S-config transformer stack: ", transformer_stack_count(s),
            " params, total: ", int64_t(total));
    CHECK(std::abs(total - 9.2e6) / 9.2e6 < 0.15);
  }
}

TEST_CASE("non-finite activations are diagnosed with layer and sublayer") {
  ModelConfig cfg = micro_config();
  auto params = ModelParams<double>::init(cfg, 21);
  params.layers[1].w_fc1(0, 0) = std::numeric_limits<double>::infinity();
  Rng rng(22);
  auto input = random_batch(cfg, 1, rng, ChannelSet::all().present);
  ModelEngine<double> engine(cfg);
  CHECK_THROWS_WITH_AS((void)engine.forward(params, input),
                       doctest::Contains("layer 1 mlp: non-finite activation"), NumericError);
}

TEST_CASE("reverse-mode gradients match central finite differences") {
  const std::array<bool, kNumChannels> present{false, true, true, true, false};
  Rng rng(31);

  auto run_check = [&](IntegratorKind kind, ModelVariant variant, double eps) {
    ModelConfig cfg = micro_config();
    cfg.integrator = kind;
    cfg.variant = variant;
    auto params = ModelParams<double>::init(cfg, 41);
    auto input = random_batch(cfg, 2, rng, present);
    Mat<double> target = random_mat(2 * cfg.cells(), kNumChannels, rng);

    ModelEngine<double> engine(cfg);
    Mat<double> pred = engine.forward(params, input);
    auto grads = ModelParams<double>::zeros(cfg);
    engine.backward(params, masked_mse_grad(pred, target, cfg.cells(), present), grads);

    auto loss_of = [&](ModelParams<double>& p) {
      ModelEngine<double> e(cfg);
      return masked_mse(e.forward(p, input), target, cfg.cells(), present);
    };

    // Walk every parameter group; report the worst relative error per group.
    std::vector<std::pair<std::string, Mat<double>*>> groups;
    params.visit([&](const char* name, Mat<double>& m) { groups.emplace_back(name, &m); });
    std::vector<Mat<double>*> grad_mats;
    grads.visit([&](const char*, Mat<double>& m) { grad_mats.push_back(&m); });

    double worst = 0;
    for (size_t g = 0; g < groups.size(); ++g) {
      Mat<double>& p = *groups[g].second;
      const Mat<double>& analytic = *grad_mats[g];
      double max_diff = 0, max_mag = 0;
      for (Eigen::Index i = 0; i < p.size(); ++i) {
        const double saved = p.data()[i];
        p.data()[i] = saved + eps;
        const double up = loss_of(params);
        p.data()[i] = saved - eps;
        const double down = loss_of(params);
        p.data()[i] = saved;
        const double fd = (up - down) / (2 * eps);
        max_diff = std::max(max_diff, std::abs(fd - analytic.data()[i]));
        max_mag = std::max({max_mag, std::abs(fd), std::abs(analytic.data()[i])});
      }
      const double rel = max_diff / std::max(max_mag, 1e-12);
      INFO("group ", groups[g].first, " rel error ", rel);
      CHECK(rel < 1e-4);
      worst = std::max(worst, rel);
    }
    MESSAGE("worst relative gradient error (", std::string(integrator_name(kind)), "/",
            std::string(variant_name(variant)), "): ", worst);
  };

  SUBCASE("euler differentiator") { run_check(IntegratorKind::forward_euler,
                                              ModelVariant::differentiator, 1e-5); }
  SUBCASE("direct variant") { run_check(IntegratorKind::none_direct, ModelVariant::direct, 1e-5); }
  SUBCASE("heun chains stage gradients") { run_check(IntegratorKind::heun,
                                                     ModelVariant::differentiator, 1e-5); }
  SUBCASE("rk4 chains stage gradients") { run_check(IntegratorKind::rk4,
                                                    ModelVariant::differentiator, 1e-5); }
}
