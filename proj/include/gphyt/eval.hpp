#pragma once

#include "gphyt/training.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

namespace gphyt {

/// Masked mean squared error of one sample (pred and target are cells x C).
inline double mse(const Matf& pred, const Matf& target, const ChannelSet& mask) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw DataError("mse: shape mismatch");
  int n_present = 0;
  double sum = 0;
  for (int c = 0; c < kNumChannels; ++c) {
    if (!mask.present[size_t(c)]) continue;
    ++n_present;
    sum += (pred.col(c) - target.col(c)).cast<double>().squaredNorm();
  }
  if (n_present == 0) throw DataError("mse: no present channels");
  return sum / (double(pred.rows()) * n_present);
}

struct Aggregate {
  double mean = 0;
  double median = 0;
};

inline Aggregate aggregate(std::vector<double> values) {
  Aggregate a;
  if (values.empty()) return a;
  double sum = 0;
  for (double v : values) sum += v;
  a.mean = sum / double(values.size());
  std::sort(values.begin(), values.end());
  const size_t n = values.size();
  a.median = n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  return a;
}

/// Variance-weighted RMSE: sqrt(MSE) / std(target) over present-channel
/// elements, per sample. 1.0 means "as wrong as predicting the mean".
/// Returns false (degenerate) when the target has no spread.
inline bool vrmse(const Matf& pred, const Matf& target, const ChannelSet& mask, double* out) {
  int n_present = 0;
  for (bool p : mask.present) n_present += p ? 1 : 0;
  if (n_present == 0) throw DataError("vrmse: no present channels");
  const double count = double(target.rows()) * n_present;
  double sum = 0, sumsq = 0;
  for (int c = 0; c < kNumChannels; ++c) {
    if (!mask.present[size_t(c)]) continue;
    sum += target.col(c).cast<double>().sum();
    sumsq += target.col(c).cast<double>().squaredNorm();
  }
  const double mean = sum / count;
  const double var = std::max(0.0, sumsq / count - mean * mean);
  if (var <= 0.0) return false;
  *out = std::sqrt(mse(pred, target, mask) / var);
  return true;
}

/// The weakest meaningful competitor: predict the last observed frame.
inline const Matf& persistence_baseline(const WindowSample& sample) {
  return sample.inputs.back();
}

template <typename Scalar>
const FieldFrame<Scalar>& persistence_baseline(const Sample<Scalar>& sample) {
  return sample.inputs.back();
}

// ---------------------------------------------------------------------------
// Batched split evaluation.
// ---------------------------------------------------------------------------

struct EvalOptions {
  int batch_size = 16;
  int64_t max_samples_per_dataset = 2000;  // deterministic cap after the seeded shuffle
  uint64_t seed = 0x5eed;
  std::string split = "test";
};

struct DatasetMetrics {
  std::string dataset;
  std::string variant;  // Known | New
  int64_t sample_count = 0;
  int64_t degenerate_excluded = 0;
  double average_mse = 0;
  double median_mse = 0;
  double average_vrmse = 0;
  double persistence_average_mse = 0;
  double persistence_median_mse = 0;
};

struct MetricReport {
  std::string model_id;
  int64_t checkpoint_step = 0;
  std::vector<DatasetMetrics> datasets;

  json to_json() const {
    json out;
    out["model_id"] = model_id;
    out["checkpoint_step"] = checkpoint_step;
    json list = json::array();
    for (const auto& d : datasets) {
      list.push_back({{"dataset", d.dataset},
                      {"variant", d.variant},
                      {"sample_count", d.sample_count},
                      {"degenerate_excluded", d.degenerate_excluded},
                      {"average_mse", d.average_mse},
                      {"median_mse", d.median_mse},
                      {"average_vrmse", d.average_vrmse},
                      {"persistence_average_mse", d.persistence_average_mse},
                      {"persistence_median_mse", d.persistence_median_mse}});
    }
    out["datasets"] = list;
    return out;
  }

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open for writing: " + path.string());
    os << "dataset,variant,samples,average_mse,median_mse,average_vrmse,"
          "persistence_average_mse,persistence_median_mse\n";
    char line[360];
    for (const auto& d : datasets) {
      std::snprintf(line, sizeof(line), "%s,%s,%lld,%.9g,%.9g,%.9g,%.9g,%.9g\n", d.dataset.c_str(),
                    d.variant.c_str(), (long long)d.sample_count, d.average_mse, d.median_mse,
                    d.average_vrmse, d.persistence_average_mse, d.persistence_median_mse);
      os << line;
    }
  }
};

/// Per-dataset single-step metrics of a model on one split, against the
/// persistence baseline. Evaluation never mutates parameters.
inline MetricReport evaluate(const ModelParams<float>& params, const ModelConfig& model_cfg,
                             const Manifest& manifest, const std::vector<std::string>& datasets,
                             const EvalOptions& opts) {
  MetricReport report;
  ModelEngine<float> engine(model_cfg);
  SamplerConfig sampler;
  sampler.n_in = model_cfg.n_in;
  sampler.seed = opts.seed;

  for (const auto& name : datasets) {
    const DatasetInfo& info = manifest.datasets.at(name);
    CorpusCache cache(manifest, {name}, {opts.split});
    auto descs = enumerate_samples(manifest, {name}, opts.split, sampler);
    if (int64_t(descs.size()) > opts.max_samples_per_dataset) {
      descs.resize(size_t(opts.max_samples_per_dataset));
    }
    if (descs.empty()) throw DataError("evaluate: no samples for " + name + "/" + opts.split);

    DatasetMetrics dm;
    dm.dataset = name;
    dm.variant = info.holdout ? "New" : "Known";
    std::vector<double> model_mses, model_vrmses, persist_mses;
    const int cells = model_cfg.cells();

    for (size_t offset = 0; offset < descs.size(); offset += size_t(opts.batch_size)) {
      const int b_count = int(std::min<size_t>(size_t(opts.batch_size), descs.size() - offset));
      BatchInput<float> input;
      std::vector<Matf> targets;
      targets.resize(size_t(b_count));
      for (int b = 0; b < b_count; ++b) {
        WindowSample w = materialize_window(descs[offset + size_t(b)], cache, sampler);
        if (b == 0) input.shape = w.shape;
        targets[size_t(b)] = std::move(w.target);
        input.windows.push_back(std::move(w.inputs));
      }
      const Matf pred = engine.forward(params, input);
      for (int b = 0; b < b_count; ++b) {
        const Matf pred_b = pred.middleRows(int64_t(b) * cells, cells);
        model_mses.push_back(mse(pred_b, targets[size_t(b)], info.channels));
        persist_mses.push_back(mse(input.windows[size_t(b)].back(), targets[size_t(b)], info.channels));
        double v = 0;
        if (vrmse(pred_b, targets[size_t(b)], info.channels, &v)) {
          model_vrmses.push_back(v);
        } else {
          ++dm.degenerate_excluded;
        }
      }
    }

    const Aggregate model_agg = aggregate(model_mses);
    const Aggregate persist_agg = aggregate(persist_mses);
    dm.sample_count = int64_t(model_mses.size());
    dm.average_mse = model_agg.mean;
    dm.median_mse = model_agg.median;
    dm.average_vrmse = aggregate(model_vrmses).mean;
    dm.persistence_average_mse = persist_agg.mean;
    dm.persistence_median_mse = persist_agg.median;
    report.datasets.push_back(dm);
  }
  return report;
}

/// Zero-shot protocol: the trained model on held-out systems, each normalized
/// with its own statistics; known systems are included for reference.
inline MetricReport zero_shot_eval(const ModelParams<float>& params, const ModelConfig& model_cfg,
                                   const Manifest& manifest, const EvalOptions& opts) {
  std::vector<std::string> datasets = training_dataset_names(manifest);
  const auto holdouts = holdout_dataset_names(manifest);
  if (holdouts.empty()) throw DataError("zero_shot_eval: no holdout datasets in manifest");
  datasets.insert(datasets.end(), holdouts.begin(), holdouts.end());
  return evaluate(params, model_cfg, manifest, datasets, opts);
}

// ---------------------------------------------------------------------------
// Autoregressive rollout: each prediction is appended and the oldest input
// dropped; no re-normalization drift correction.
// ---------------------------------------------------------------------------

using PredictFn = std::function<Matf(const std::vector<Matf>&)>;

struct RolloutResult {
  std::vector<double> mse_curve;  // one masked MSE per step
  std::vector<Matf> predictions;
};

inline RolloutResult rollout(const PredictFn& predict, std::vector<Matf> window,
                             const std::vector<Matf>& ground_truth, const ChannelSet& mask) {
  if (ground_truth.empty()) throw DataError("rollout: ground truth shorter than horizon");
  RolloutResult result;
  result.mse_curve.reserve(ground_truth.size());
  result.predictions.reserve(ground_truth.size());
  for (const auto& truth : ground_truth) {
    Matf next = predict(window);
    if (!next.allFinite()) throw NumericError("rollout: non-finite prediction");
    result.mse_curve.push_back(mse(next, truth, mask));
    window.erase(window.begin());
    window.push_back(next);
    result.predictions.push_back(std::move(next));
  }
  return result;
}

/// Model-backed predictor for rollout.
inline PredictFn model_predictor(const ModelParams<float>& params, const ModelConfig& model_cfg,
                                 GridShape<float> shape) {
  auto engine = std::make_shared<ModelEngine<float>>(model_cfg);
  return [engine, &params, shape](const std::vector<Matf>& window) {
    BatchInput<float> input;
    input.shape = shape;
    input.windows.push_back(window);
    return Matf(engine->forward(params, input));
  };
}

/// Rollout setup from a stored trajectory: normalized window at `start` with
/// stride `delta`, and `horizon` normalized ground-truth frames after it.
struct RolloutSetup {
  std::vector<Matf> window;
  std::vector<Matf> ground_truth;
  ChannelSet mask;
  GridShape<float> shape;
};

inline RolloutSetup make_rollout_setup(const Trajectoryf& traj, const NormStats& stats, int n_in,
                                       int start, int delta, int horizon) {
  const int last_needed = start + (n_in - 1 + horizon) * delta;
  if (last_needed >= traj.steps()) {
    throw DataError("rollout: trajectory has " + std::to_string(traj.steps()) +
                    " frames, need " + std::to_string(last_needed + 1));
  }
  RolloutSetup setup;
  setup.mask = traj.meta.channels;
  const auto& first = traj.frames.at(0);
  setup.shape = GridShape<float>{first.height(), first.width(), first.dx, first.dy};
  for (int k = 0; k < n_in; ++k) {
    setup.window.push_back(to_matrix(normalize(traj.frames[size_t(start + k * delta)], stats)));
  }
  for (int k = 0; k < horizon; ++k) {
    setup.ground_truth.push_back(
        to_matrix(normalize(traj.frames[size_t(start + (n_in + k) * delta)], stats)));
  }
  return setup;
}

inline void write_rollout_csv(const std::filesystem::path& path,
                              const std::vector<double>& curve) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  os << "step,mse\n";
  char line[64];
  for (size_t i = 0; i < curve.size(); ++i) {
    std::snprintf(line, sizeof(line), "%zu,%.9g\n", i + 1, curve[i]);
    os << line;
  }
}

// ---------------------------------------------------------------------------
// Ablation harnesses: identical seeds and budgets, one knob changed per run.
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string setting;
  double test_mse = 0;
  double persistence_mse = 0;
};

inline void write_ablation_csv(const std::filesystem::path& path,
                               const std::vector<AblationRow>& rows) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  os << "setting,test_mse,persistence_mse\n";
  char line[160];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%s,%.9g,%.9g\n", r.setting.c_str(), r.test_mse,
                  r.persistence_mse);
    os << line;
  }
}

inline double overall_test_mse(const MetricReport& report) {
  double sum = 0;
  for (const auto& d : report.datasets) sum += d.average_mse;
  return sum / double(report.datasets.size());
}

inline double overall_persistence_mse(const MetricReport& report) {
  double sum = 0;
  for (const auto& d : report.datasets) sum += d.persistence_average_mse;
  return sum / double(report.datasets.size());
}

/// Trains one model per integrator strategy (direct prediction plus the three
/// explicit schemes) and reports test MSE for each.
inline std::vector<AblationRow> ablate_integrators(const Manifest& manifest,
                                                   const ModelConfig& base_model,
                                                   const TrainConfig& base_train,
                                                   const std::filesystem::path& out_dir,
                                                   const EvalOptions& eval_opts = {}) {
  struct Setting {
    const char* name;
    ModelVariant variant;
    IntegratorKind integrator;
  };
  const Setting settings[] = {
      {"direct", ModelVariant::direct, IntegratorKind::none_direct},
      {"euler", ModelVariant::differentiator, IntegratorKind::forward_euler},
      {"heun", ModelVariant::differentiator, IntegratorKind::heun},
      {"rk4", ModelVariant::differentiator, IntegratorKind::rk4},
  };
  std::vector<AblationRow> rows;
  const auto datasets = training_dataset_names(manifest);
  for (const auto& s : settings) {
    ModelConfig cfg = base_model;
    cfg.variant = s.variant;
    cfg.integrator = s.integrator;
    auto result = train_model(manifest, cfg, base_train, out_dir / s.name);
    auto loaded = load_training_checkpoint(result.checkpoint_path);
    auto report = evaluate(loaded.params, cfg, manifest, datasets, eval_opts);
    rows.push_back({s.name, overall_test_mse(report), overall_persistence_mse(report)});
  }
  return rows;
}

/// Prompt-size study: vary the input window length (temporal patch 1), then
/// the temporal patch size at the base window length.
inline std::vector<AblationRow> ablate_prompt(const Manifest& manifest,
                                              const ModelConfig& base_model,
                                              const TrainConfig& base_train,
                                              const std::vector<int>& n_list,
                                              const std::vector<int>& patch_t_list,
                                              const std::filesystem::path& out_dir,
                                              const EvalOptions& eval_opts = {}) {
  std::vector<AblationRow> rows;
  const auto datasets = training_dataset_names(manifest);
  auto run_one = [&](const std::string& name, int n_in, int patch_t) {
    ModelConfig cfg = base_model;
    cfg.n_in = n_in;
    cfg.patch_t = patch_t;
    TrainConfig tc = base_train;
    tc.sampler.n_in = n_in;
    auto result = train_model(manifest, cfg, tc, out_dir / name);
    auto loaded = load_training_checkpoint(result.checkpoint_path);
    EvalOptions opts = eval_opts;
    auto report = evaluate(loaded.params, cfg, manifest, datasets, opts);
    rows.push_back({name, overall_test_mse(report), overall_persistence_mse(report)});
  };
  for (int n : n_list) run_one("n_in=" + std::to_string(n), n, 1);
  for (int pt : patch_t_list) run_one("patch_t=" + std::to_string(pt), base_model.n_in, pt);
  return rows;
}

/// FNV hash over all parameter bytes; evaluation must leave it unchanged.
inline uint64_t params_hash(const ModelParams<float>& params) {
  uint64_t h = 0xcbf29ce484222325ULL;
  params.visit([&h](const char*, const Matf& m) {
    h = fnv1a(m.data(), size_t(m.size()) * sizeof(float), h);
  });
  return h;
}

}  // namespace gphyt
