#pragma once

#include "gphyt/model.hpp"
#include "gphyt/pipeline.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace gphyt {

struct TrainConfig {
  int total_steps = 5000;
  int warmup_steps = 250;
  double peak_lr = 1e-4;
  double final_lr = 1e-6;
  int batch_size = 16;
  double grad_clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  uint64_t seed = 1;
  int checkpoint_interval = 1000;
  int eval_interval = 500;
  int log_interval = 50;
  int val_samples = 256;
  SamplerConfig sampler;

  void validate() const {
    if (warmup_steps >= total_steps) throw DataError("train config: warmup must be below total steps");
    if (!(peak_lr > final_lr && final_lr > 0)) throw DataError("train config: need peak_lr > final_lr > 0");
    if (batch_size < 1) throw DataError("train config: batch_size must be positive");
  }

  nlohmann::json to_json() const {
    return {{"total_steps", total_steps},   {"warmup_steps", warmup_steps},
            {"peak_lr", peak_lr},           {"final_lr", final_lr},
            {"batch_size", batch_size},     {"grad_clip_norm", grad_clip_norm},
            {"beta1", beta1},               {"beta2", beta2},
            {"adam_eps", adam_eps},         {"weight_decay", weight_decay},
            {"seed", seed},                 {"checkpoint_interval", checkpoint_interval},
            {"eval_interval", eval_interval}, {"log_interval", log_interval},
            {"val_samples", val_samples},   {"n_in", sampler.n_in},
            {"delta_max", sampler.delta_max}, {"flips", sampler.flips}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.total_steps = j.value("total_steps", c.total_steps);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.peak_lr = j.value("peak_lr", c.peak_lr);
    c.final_lr = j.value("final_lr", c.final_lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.grad_clip_norm = j.value("grad_clip_norm", c.grad_clip_norm);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
    c.eval_interval = j.value("eval_interval", c.eval_interval);
    c.log_interval = j.value("log_interval", c.log_interval);
    c.val_samples = j.value("val_samples", c.val_samples);
    c.sampler.n_in = j.value("n_in", c.sampler.n_in);
    c.sampler.delta_max = j.value("delta_max", c.sampler.delta_max);
    c.sampler.flips = j.value("flips", c.sampler.flips);
    return c;
  }
};

/// Linear ramp 0 -> peak over warmup, then cosine decay peak -> final.
inline double lr_schedule(int step, const TrainConfig& cfg) {
  if (step <= cfg.warmup_steps) {
    return cfg.peak_lr * double(step) / double(cfg.warmup_steps);
  }
  const double progress = double(step - cfg.warmup_steps) / double(cfg.total_steps - cfg.warmup_steps);
  return cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the pre-clip norm.
template <typename Scalar>
Scalar clip_gradients(ModelParams<Scalar>& grads, Scalar max_norm) {
  double sumsq = 0.0;
  std::string bad;
  grads.visit([&](const char* name, Mat<Scalar>& m) {
    if (!m.allFinite() && bad.empty()) bad = name;
    sumsq += m.template cast<double>().squaredNorm();
  });
  if (!bad.empty()) throw NumericError("non-finite gradient in parameter " + bad);
  const Scalar norm = Scalar(std::sqrt(sumsq));
  if (norm > max_norm && norm > Scalar(0)) {
    const Scalar scale = max_norm / norm;
    grads.visit([scale](const char*, Mat<Scalar>& m) { m *= scale; });
  }
  return norm;
}

template <typename Scalar>
struct AdamState {
  ModelParams<Scalar> m, v;
  int64_t step = 0;

  static AdamState zeros(const ModelConfig& cfg) {
    AdamState s;
    s.m = ModelParams<Scalar>::zeros(cfg);
    s.v = ModelParams<Scalar>::zeros(cfg);
    return s;
  }
};

/// AdamW with decoupled weight decay and bias correction.
template <typename Scalar>
void adamw_update(ModelParams<Scalar>& params, const ModelParams<Scalar>& grads,
                  AdamState<Scalar>& state, Scalar lr, const TrainConfig& cfg) {
  state.step += 1;
  const Scalar b1 = Scalar(cfg.beta1), b2 = Scalar(cfg.beta2);
  const Scalar bc1 = Scalar(1) - Scalar(std::pow(cfg.beta1, double(state.step)));
  const Scalar bc2 = Scalar(1) - Scalar(std::pow(cfg.beta2, double(state.step)));
  const Scalar eps = Scalar(cfg.adam_eps);
  const Scalar wd = Scalar(cfg.weight_decay);

  std::vector<Mat<Scalar>*> ps, gs, ms, vs;
  params.visit([&](const char*, Mat<Scalar>& x) { ps.push_back(&x); });
  const_cast<ModelParams<Scalar>&>(grads).visit([&](const char*, Mat<Scalar>& x) { gs.push_back(&x); });
  state.m.visit([&](const char*, Mat<Scalar>& x) { ms.push_back(&x); });
  state.v.visit([&](const char*, Mat<Scalar>& x) { vs.push_back(&x); });

  for (size_t i = 0; i < ps.size(); ++i) {
    Mat<Scalar>& p = *ps[i];
    const Mat<Scalar>& g = *gs[i];
    Mat<Scalar>& m = *ms[i];
    Mat<Scalar>& v = *vs[i];
    m = b1 * m + (Scalar(1) - b1) * g;
    v = (b2 * v.array() + (Scalar(1) - b2) * g.array().square()).matrix();
    p.array() -= lr * ((m.array() / bc1) / ((v.array() / bc2).sqrt() + eps) + wd * p.array());
  }
}

// ---------------------------------------------------------------------------
// Loss: mean squared error over present channels only, averaged per sample
// and then over the batch, so masked channels contribute exactly zero and
// batch composition across datasets does not reweight anything.
// ---------------------------------------------------------------------------

template <typename Scalar>
Scalar masked_mse_loss(const Mat<Scalar>& pred, const Mat<Scalar>& target, int cells,
                       const std::vector<ChannelSet>& masks, Mat<Scalar>* d_pred = nullptr) {
  const int batch = int(masks.size());
  if (pred.rows() != int64_t(batch) * cells || pred.rows() != target.rows())
    throw DataError("loss: shape mismatch");
  if (d_pred) d_pred->setZero(pred.rows(), pred.cols());
  double total = 0;
  for (int b = 0; b < batch; ++b) {
    int n_present = 0;
    for (bool p : masks[size_t(b)].present) n_present += p ? 1 : 0;
    if (n_present == 0) throw DataError("loss: sample with no present channels");
    const double denom = double(cells) * n_present;
    double s = 0;
    for (int c = 0; c < kNumChannels; ++c) {
      if (!masks[size_t(b)].present[size_t(c)]) continue;
      const auto diff = pred.col(c).segment(b * cells, cells) - target.col(c).segment(b * cells, cells);
      s += double(diff.squaredNorm());
      if (d_pred) {
        d_pred->col(c).segment(b * cells, cells) = diff * Scalar(2.0 / (denom * batch));
      }
    }
    total += s / denom;
  }
  return Scalar(total / batch);
}

/// One training batch in model-ready layout.
struct TrainBatch {
  BatchInput<float> input;
  Matf targets;                    // (B*cells) x C
  std::vector<ChannelSet> masks;   // per sample
  std::string provenance;          // for fault reports
};

inline TrainBatch assemble_batch(const std::vector<SampleDesc>& descs, size_t offset, int batch_size,
                                 const CorpusCache& cache, const SamplerConfig& sampler_cfg,
                                 const ModelConfig& model_cfg) {
  TrainBatch batch;
  const int cells = model_cfg.cells();
  batch.targets.resize(int64_t(batch_size) * cells, kNumChannels);
  for (int b = 0; b < batch_size; ++b) {
    const SampleDesc& desc = descs[(offset + size_t(b)) % descs.size()];
    WindowSample w = materialize_window(desc, cache, sampler_cfg);
    if (b == 0) {
      batch.input.shape = w.shape;
      batch.provenance = cache.name(desc.dataset) + "/traj" + std::to_string(desc.trajectory) +
                         "@" + std::to_string(desc.start);
    }
    batch.input.windows.push_back(std::move(w.inputs));
    batch.targets.middleRows(int64_t(b) * cells, cells) = w.target;
    batch.masks.push_back(cache.mask(desc.dataset));
  }
  return batch;
}

/// Forward, loss, backward, clip, AdamW. Deterministic given the batch.
template <typename Scalar>
Scalar train_step(ModelParams<Scalar>& params, AdamState<Scalar>& adam, ModelEngine<Scalar>& engine,
                  const BatchInput<Scalar>& input, const Mat<Scalar>& targets,
                  const std::vector<ChannelSet>& masks, int step, const TrainConfig& cfg,
                  ModelParams<Scalar>& grads_scratch, const std::string& provenance = "") {
  const Mat<Scalar> pred = engine.forward(params, input);
  Mat<Scalar> d_pred;
  const Scalar loss = masked_mse_loss(pred, targets, engine.config().cells(), masks, &d_pred);
  if (!std::isfinite(double(loss))) {
    throw NumericError("non-finite training loss at step " + std::to_string(step) +
                       (provenance.empty() ? "" : " (batch " + provenance + ")"));
  }
  grads_scratch.set_zero();
  engine.backward(params, d_pred, grads_scratch);
  clip_gradients(grads_scratch, Scalar(cfg.grad_clip_norm));
  adamw_update(params, grads_scratch, adam, Scalar(lr_schedule(step + 1, cfg)), cfg);
  return loss;
}

// ---------------------------------------------------------------------------
// Full training run: epoch ordering, metrics.csv, checkpoints, resume. All
// randomness is a pure function of (seed, step), so a restored checkpoint
// continues bit-for-bit and twin runs are byte-identical.
// ---------------------------------------------------------------------------

struct TrainResult {
  float final_train_loss = 0;
  float final_val_loss = 0;
  std::filesystem::path checkpoint_path;
  std::filesystem::path metrics_path;
  int64_t steps_run = 0;
};

inline void save_training_checkpoint(const std::filesystem::path& path,
                                     const ModelParams<float>& params, const AdamState<float>& adam,
                                     int64_t step, const ModelConfig& model_cfg,
                                     const TrainConfig& train_cfg) {
  ArrayMap arrays;
  params.visit([&](const char* name, const Matf& m) { arrays["param/" + std::string(name)] = m; });
  adam.m.visit([&](const char* name, const Matf& m) { arrays["adam_m/" + std::string(name)] = m; });
  adam.v.visit([&](const char* name, const Matf& m) { arrays["adam_v/" + std::string(name)] = m; });
  json meta;
  meta["step"] = step;
  meta["adam_step"] = adam.step;
  meta["model_config"] = model_cfg.to_json();
  meta["train_config"] = train_cfg.to_json();
  write_checkpoint(path, meta, arrays);
}

struct LoadedCheckpoint {
  ModelParams<float> params;
  AdamState<float> adam;
  int64_t step = 0;
  ModelConfig model_cfg;
  TrainConfig train_cfg;
};

inline LoadedCheckpoint load_training_checkpoint(const std::filesystem::path& path) {
  json meta;
  ArrayMap arrays = read_checkpoint(path, &meta);
  LoadedCheckpoint out;
  out.model_cfg = ModelConfig::from_json(meta.at("model_config"));
  out.train_cfg = TrainConfig::from_json(meta.at("train_config"));
  out.step = meta.at("step").get<int64_t>();
  out.params = ModelParams<float>::zeros(out.model_cfg);
  out.adam = AdamState<float>::zeros(out.model_cfg);
  out.adam.step = meta.at("adam_step").get<int64_t>();
  auto fill = [&arrays](const std::string& prefix, ModelParams<float>& tree) {
    tree.visit([&](const char* name, Matf& m) {
      const auto it = arrays.find(prefix + name);
      if (it == arrays.end()) throw DataError("checkpoint missing array " + prefix + name);
      if (it->second.rows() != m.rows() || it->second.cols() != m.cols())
        throw DataError("checkpoint shape mismatch for " + prefix + name);
      m = it->second;
    });
  };
  fill("param/", out.params);
  fill("adam_m/", out.adam.m);
  fill("adam_v/", out.adam.v);
  return out;
}

class Trainer {
 public:
  Trainer(const Manifest& manifest, ModelConfig model_cfg, TrainConfig train_cfg,
          std::filesystem::path out_dir)
      : manifest_(manifest),
        model_cfg_(model_cfg),
        train_cfg_(train_cfg),
        out_dir_(std::move(out_dir)),
        datasets_(training_dataset_names(manifest)),
        cache_(manifest, datasets_, {"train", "val"}),
        engine_(model_cfg) {
    model_cfg_.validate();
    train_cfg_.validate();
    train_cfg_.sampler.n_in = model_cfg_.n_in;
    std::filesystem::create_directories(out_dir_);

    SamplerConfig canonical = train_cfg_.sampler;
    canonical.seed = 0;  // canonical order; epochs reshuffle below
    train_descs_ = enumerate_samples(manifest_, datasets_, "train", canonical);
    if (train_descs_.empty()) throw DataError("trainer: empty training split");
    SamplerConfig val_cfg = train_cfg_.sampler;
    val_cfg.seed = 0x7a1;
    val_descs_ = enumerate_samples(manifest_, datasets_, "val", val_cfg);
    if (int(val_descs_.size()) > train_cfg_.val_samples) {
      val_descs_.resize(size_t(train_cfg_.val_samples));
    }
  }

  /// Runs from `start_step` (0 for fresh) to total_steps.
  TrainResult run(ModelParams<float>& params, AdamState<float>& adam, int64_t start_step = 0) {
    const int batch = train_cfg_.batch_size;
    const int64_t steps_per_epoch =
        std::max<int64_t>(1, int64_t(train_descs_.size()) / batch);
    auto grads = ModelParams<float>::zeros(model_cfg_);

    const auto metrics_path = out_dir_ / "metrics.csv";
    std::ofstream metrics(metrics_path, start_step == 0 ? std::ios::trunc : std::ios::app);
    if (start_step == 0) metrics << "step,lr,train_loss,val_loss\n";

    std::vector<SampleDesc> epoch_order;
    int64_t epoch_of_order = -1;
    float loss = 0, val_loss = 0;
    for (int64_t step = start_step; step < train_cfg_.total_steps; ++step) {
      const int64_t epoch = step / steps_per_epoch;
      if (epoch != epoch_of_order) {
        epoch_order = train_descs_;
        deterministic_shuffle(epoch_order, Rng::derive(train_cfg_.seed, uint64_t(epoch)));
        epoch_of_order = epoch;
      }
      const size_t offset = size_t((step % steps_per_epoch) * batch);
      TrainBatch tb = assemble_batch(epoch_order, offset, batch, cache_, train_cfg_.sampler,
                                     model_cfg_);
      loss = train_step(params, adam, engine_, tb.input, tb.targets, tb.masks, int(step),
                        train_cfg_, grads, tb.provenance);

      const bool log_now = (step + 1) % train_cfg_.log_interval == 0 || step + 1 == train_cfg_.total_steps;
      const bool eval_now = (step + 1) % train_cfg_.eval_interval == 0 || step + 1 == train_cfg_.total_steps;
      if (eval_now) val_loss = validation_loss(params);
      if (log_now) {
        char line[160];
        std::snprintf(line, sizeof(line), "%lld,%.9g,%.9g,", (long long)(step + 1),
                      lr_schedule(int(step + 1), train_cfg_), double(loss));
        metrics << line;
        if (eval_now) {
          std::snprintf(line, sizeof(line), "%.9g", double(val_loss));
          metrics << line;
        }
        metrics << "\n";
        metrics.flush();
      }
      if ((step + 1) % train_cfg_.checkpoint_interval == 0 || step + 1 == train_cfg_.total_steps) {
        char name[48];
        std::snprintf(name, sizeof(name), "checkpoint_%06lld.bin", (long long)(step + 1));
        save_training_checkpoint(out_dir_ / name, params, adam, step + 1, model_cfg_, train_cfg_);
        if (step + 1 == train_cfg_.total_steps) {
          save_training_checkpoint(out_dir_ / "checkpoint.bin", params, adam, step + 1, model_cfg_,
                                   train_cfg_);
        }
      }
    }

    TrainResult result;
    result.final_train_loss = loss;
    result.final_val_loss = val_loss;
    result.checkpoint_path = out_dir_ / "checkpoint.bin";
    result.metrics_path = metrics_path;
    result.steps_run = train_cfg_.total_steps - start_step;
    return result;
  }

  float validation_loss(const ModelParams<float>& params) {
    if (val_descs_.empty()) return 0.0f;
    const int batch = train_cfg_.batch_size;
    double total = 0;
    int64_t batches = 0;
    for (size_t offset = 0; offset + size_t(batch) <= val_descs_.size(); offset += size_t(batch)) {
      TrainBatch tb = assemble_batch(val_descs_, offset, batch, cache_, train_cfg_.sampler,
                                     model_cfg_);
      const Matf pred = engine_.forward(params, tb.input);
      total += double(masked_mse_loss(pred, tb.targets, model_cfg_.cells(), tb.masks));
      ++batches;
    }
    return batches > 0 ? float(total / double(batches)) : 0.0f;
  }

  const std::vector<SampleDesc>& train_descriptors() const { return train_descs_; }

 private:
  Manifest manifest_;
  ModelConfig model_cfg_;
  TrainConfig train_cfg_;
  std::filesystem::path out_dir_;
  std::vector<std::string> datasets_;
  CorpusCache cache_;
  ModelEngine<float> engine_;
  std::vector<SampleDesc> train_descs_;
  std::vector<SampleDesc> val_descs_;
};

/// Train from scratch (or resume when resume_from is set) and return the
/// final checkpoint location.
inline TrainResult train_model(const Manifest& manifest, const ModelConfig& model_cfg,
                               const TrainConfig& train_cfg, const std::filesystem::path& out_dir,
                               const std::filesystem::path& resume_from = {}) {
  Trainer trainer(manifest, model_cfg, train_cfg, out_dir);
  ModelParams<float> params;
  AdamState<float> adam;
  int64_t start_step = 0;
  if (resume_from.empty()) {
    params = ModelParams<float>::init(model_cfg, Rng::derive(train_cfg.seed, 0x1717));
    adam = AdamState<float>::zeros(model_cfg);
  } else {
    LoadedCheckpoint loaded = load_training_checkpoint(resume_from);
    params = std::move(loaded.params);
    adam = std::move(loaded.adam);
    start_step = loaded.step;
  }
  return trainer.run(params, adam, start_step);
}

}  // namespace gphyt
