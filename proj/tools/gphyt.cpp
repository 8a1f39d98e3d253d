// gphyt: desk-scale multi-physics surrogate — data generation, training,
// evaluation, rollouts, and ablations behind one entry point.

#include <CLI11.hpp>

#include "gphyt/config_kv.hpp"
#include "gphyt/eval.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace gphyt;

namespace {

bool g_quiet = false;

void info(const std::string& line) {
  if (!g_quiet) std::cout << line << "\n";
}

std::string hex64(uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)h);
  return buf;
}

void write_run_json(const fs::path& out_dir, const std::string& command, const json& config,
                    uint64_t seed, const std::vector<fs::path>& outputs) {
  json run;
  run["version"] = std::string("gphyt-") + kVersion;
  run["command"] = command;
  run["seed"] = seed;
  run["config"] = config;
  json hashes = json::object();
  for (const auto& p : outputs) {
    if (fs::exists(p)) hashes[p.filename().string()] = hex64(hash_file(p));
  }
  run["output_hashes"] = hashes;
  std::ofstream os(out_dir / "run.json");
  os << run.dump(2) << "\n";
}

KvConfig load_layered(const std::string& path, const std::vector<std::string>& overrides) {
  KvConfig cfg = KvConfig::parse_file(path);
  for (const auto& o : overrides) cfg.apply_override(o);
  return cfg;
}

Manifest load_manifest_checked(const std::string& path) {
  Manifest manifest = Manifest::load(path);
  const auto problems = manifest.validate();
  if (!problems.empty()) {
    throw DataError("manifest invalid: " + problems.front() +
                    (problems.size() > 1 ? " (+" + std::to_string(problems.size() - 1) + " more)" : ""));
  }
  return manifest;
}

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  std::string token;
  std::stringstream ss(csv);
  while (std::getline(ss, token, ',')) out.push_back(std::stoi(token));
  return out;
}

void print_report(const MetricReport& report) {
  info("dataset                variant  samples   avg MSE      median MSE   avg VRMSE    persistence");
  for (const auto& d : report.datasets) {
    char line[200];
    std::snprintf(line, sizeof(line), "%-22s %-8s %-9lld %-12.4g %-12.4g %-12.4g %-12.4g",
                  d.dataset.c_str(), d.variant.c_str(), (long long)d.sample_count, d.average_mse,
                  d.median_mse, d.average_vrmse, d.persistence_average_mse);
    info(line);
  }
}

int run_gen_data(const std::string& config_path, const std::string& out,
                 const std::vector<std::string>& overrides, uint64_t seed, bool seed_given) {
  KvConfig cfg = load_layered(config_path, overrides);
  std::vector<SimSpec> specs;
  for (const auto& section : cfg.section_names()) {
    SimSpec spec = sim_spec_from(cfg, section);
    if (seed_given) spec.seed = Rng::derive(seed, specs.size());
    specs.push_back(spec);
  }
  if (specs.empty()) throw DataError("config defines no datasets");
  fs::create_directories(out);
  Manifest manifest = make_corpus(specs, out);
  int64_t files = 0;
  for (const auto& [name, ds] : manifest.datasets) files += int64_t(ds.trajectories.size());
  info("wrote " + std::to_string(files) + " trajectories across " +
       std::to_string(manifest.datasets.size()) + " datasets to " + out);
  write_run_json(out, "gen-data", cfg.to_json(), seed_given ? seed : 0,
                 {fs::path(out) / "manifest.json"});
  return 0;
}

int run_train(const std::string& data, const std::string& model_path,
              const std::string& train_path, const std::string& out,
              const std::string& resume, const std::vector<std::string>& overrides,
              uint64_t seed, bool seed_given) {
  Manifest manifest = load_manifest_checked(data);
  ModelConfig model_cfg = model_config_from(load_layered(model_path, overrides));
  TrainConfig train_cfg = train_config_from(load_layered(train_path, overrides));
  if (seed_given) train_cfg.seed = seed;
  fs::create_directories(out);

  info("training " + std::string(variant_name(model_cfg.variant)) + "/" +
       integrator_name(model_cfg.integrator) + " for " + std::to_string(train_cfg.total_steps) +
       " steps (" + std::to_string(param_count(model_cfg)) + " params)");
  TrainResult result = train_model(manifest, model_cfg, train_cfg, out,
                                   resume.empty() ? fs::path() : fs::path(resume));
  char line[160];
  std::snprintf(line, sizeof(line), "final train loss %.6g, val loss %.6g",
                double(result.final_train_loss), double(result.final_val_loss));
  info(line);

  json config;
  config["model"] = model_cfg.to_json();
  config["train"] = train_cfg.to_json();
  write_run_json(out, "train", config, train_cfg.seed,
                 {result.checkpoint_path, result.metrics_path});
  return 0;
}

int run_eval(const std::string& data, const std::string& checkpoint, const std::string& out,
             const std::string& split, bool zero_shot, int64_t max_samples) {
  Manifest manifest = load_manifest_checked(data);
  LoadedCheckpoint loaded = load_training_checkpoint(checkpoint);
  EvalOptions opts;
  opts.split = split;
  opts.max_samples_per_dataset = max_samples;

  MetricReport report = zero_shot ? zero_shot_eval(loaded.params, loaded.model_cfg, manifest, opts)
                                  : evaluate(loaded.params, loaded.model_cfg, manifest,
                                             training_dataset_names(manifest), opts);
  report.model_id = checkpoint;
  report.checkpoint_step = loaded.step;
  print_report(report);

  fs::create_directories(out);
  report.write_csv(fs::path(out) / "report.csv");
  std::ofstream(fs::path(out) / "report.json") << report.to_json().dump(2) << "\n";
  json config = {{"checkpoint", checkpoint}, {"split", split}, {"zero_shot", zero_shot}};
  write_run_json(out, "eval", config, 0,
                 {fs::path(out) / "report.csv", fs::path(out) / "report.json"});
  return 0;
}

int run_rollout(const std::string& data, const std::string& checkpoint, const std::string& out,
                const std::string& dataset, int trajectory, int start, int delta, int horizon) {
  Manifest manifest = load_manifest_checked(data);
  LoadedCheckpoint loaded = load_training_checkpoint(checkpoint);
  const auto it = manifest.datasets.find(dataset);
  if (it == manifest.datasets.end()) throw DataError("unknown dataset: " + dataset);
  const DatasetInfo& ds = it->second;

  const TrajectoryEntry* entry = nullptr;
  for (const auto& t : ds.trajectories) {
    if (trajectory >= 0 ? t.index == trajectory : t.split == "test") {
      entry = &t;
      break;
    }
  }
  if (!entry) throw DataError("no matching trajectory in " + dataset);
  Trajectoryf traj = read_trajectory(manifest.base_dir / entry->file);

  auto setup = make_rollout_setup(traj, ds.stats, loaded.model_cfg.n_in, start, delta, horizon);
  auto predict = model_predictor(loaded.params, loaded.model_cfg, setup.shape);
  RolloutResult result = rollout(predict, setup.window, setup.ground_truth, setup.mask);

  fs::create_directories(out);
  write_rollout_csv(fs::path(out) / "rollout.csv", result.mse_curve);

  // Raw frame dump of the predicted (denormalized) trajectory.
  Trajectoryf predicted;
  predicted.dt = traj.dt * float(delta);
  predicted.meta = traj.meta;
  predicted.meta.dataset = dataset + "_rollout";
  for (const auto& m : result.predictions) {
    predicted.frames.push_back(denormalize(
        to_frame(m, traj.frames[0].height(), traj.frames[0].width(), traj.frames[0].dx,
                 traj.frames[0].dy),
        ds.stats));
  }
  write_trajectory(predicted, fs::path(out) / "rollout_pred.bin");

  char line[160];
  std::snprintf(line, sizeof(line), "rollout over %d steps: first MSE %.4g, last MSE %.4g",
                horizon, result.mse_curve.front(), result.mse_curve.back());
  info(line);
  json config = {{"dataset", dataset}, {"trajectory", entry->index}, {"start", start},
                 {"delta", delta},     {"horizon", horizon},         {"checkpoint", checkpoint}};
  write_run_json(out, "rollout", config, 0,
                 {fs::path(out) / "rollout.csv", fs::path(out) / "rollout_pred.bin"});
  return 0;
}

int run_ablate(const std::string& data, const std::string& kind, const std::string& model_path,
               const std::string& train_path, const std::string& out,
               const std::string& n_list_csv, const std::string& patch_t_csv,
               const std::vector<std::string>& overrides, int64_t max_samples) {
  Manifest manifest = load_manifest_checked(data);
  ModelConfig model_cfg = model_config_from(load_layered(model_path, overrides));
  TrainConfig train_cfg = train_config_from(load_layered(train_path, overrides));
  fs::create_directories(out);
  EvalOptions opts;
  opts.max_samples_per_dataset = max_samples;

  std::vector<AblationRow> rows;
  if (kind == "integrators") {
    rows = ablate_integrators(manifest, model_cfg, train_cfg, out, opts);
  } else if (kind == "prompt") {
    rows = ablate_prompt(manifest, model_cfg, train_cfg, parse_int_list(n_list_csv),
                         parse_int_list(patch_t_csv), out, opts);
  } else {
    throw DataError("unknown ablation kind: " + kind + " (use integrators or prompt)");
  }
  const fs::path csv = fs::path(out) / (kind + ".csv");
  write_ablation_csv(csv, rows);
  json rows_json = json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"setting", r.setting},
                         {"test_mse", r.test_mse},
                         {"persistence_mse", r.persistence_mse}});
  }
  std::ofstream(fs::path(out) / (kind + ".json")) << rows_json.dump(2) << "\n";
  for (const auto& r : rows) {
    char line[160];
    std::snprintf(line, sizeof(line), "%-12s test MSE %.6g (persistence %.6g)", r.setting.c_str(),
                  r.test_mse, r.persistence_mse);
    info(line);
  }
  json config;
  config["model"] = model_cfg.to_json();
  config["train"] = train_cfg.to_json();
  config["kind"] = kind;
  write_run_json(out, "ablate", config, train_cfg.seed, {csv});
  return 0;
}

int run_inspect(const std::string& path) {
  Trajectoryf traj = read_trajectory(path);
  const auto& first = traj.frames.at(0);
  std::printf("dataset:   %s\n", traj.meta.dataset.c_str());
  std::printf("dims:      T=%d H=%d W=%d C=%d\n", traj.steps(), first.height(), first.width(),
              kNumChannels);
  std::printf("spacing:   dt=%g dx=%g dy=%g\n", double(traj.dt), double(first.dx),
              double(first.dy));
  std::printf("boundary:  %s\n", boundary_name(traj.meta.boundary));
  std::printf("seed:      %llu\n", (unsigned long long)traj.meta.seed);
  for (int c = 0; c < kNumChannels; ++c) {
    float lo = std::numeric_limits<float>::infinity();
    float hi = -std::numeric_limits<float>::infinity();
    for (const auto& frame : traj.frames) {
      lo = std::min(lo, frame.data[size_t(c)].minCoeff());
      hi = std::max(hi, frame.data[size_t(c)].maxCoeff());
    }
    std::printf("%-12s %-8s min %-12g max %-12g\n", channel_name(c),
                traj.meta.channels.present[size_t(c)] ? "present" : "masked", double(lo),
                double(hi));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* threads = std::getenv("GPHYT_THREADS")) {
    // Caps internal math parallelism; this build is effectively single-threaded.
    Eigen::setNbThreads(std::max(1, std::atoi(threads)));
  }

  CLI::App app{"gphyt: multi-physics surrogate training and evaluation at desk scale"};
  app.require_subcommand(1);
  app.add_flag("--quiet", g_quiet, "suppress progress output");
  uint64_t seed = 0;
  const auto seed_opt = app.add_option("--seed", seed, "override the run seed");

  std::string config_path, out_dir = "out";
  std::vector<std::string> overrides;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
  gen->add_option("--config", config_path, "dataset config file")->required();
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--set", overrides, "override config keys (section.key=value)");

  std::string data_path, model_path, train_path, resume_path;
  auto* train = app.add_subcommand("train", "train a model on a generated corpus");
  train->add_option("--data", data_path, "manifest.json path")->required();
  train->add_option("--model-config", model_path, "model config file")->required();
  train->add_option("--train-config", train_path, "training config file")->required();
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_option("--resume", resume_path, "checkpoint to resume from");
  train->add_option("--set", overrides, "override config keys (key=value)");

  std::string checkpoint_path, split = "test";
  bool zero_shot = false;
  int64_t max_samples = 2000;
  auto* eval_cmd = app.add_subcommand("eval", "single-step metrics on a split");
  eval_cmd->add_option("--data", data_path, "manifest.json path")->required();
  eval_cmd->add_option("--checkpoint", checkpoint_path, "trained checkpoint")->required();
  eval_cmd->add_option("--out", out_dir, "output directory")->required();
  eval_cmd->add_option("--split", split, "train | val | test");
  eval_cmd->add_flag("--zero-shot", zero_shot, "include holdout systems (zero-shot protocol)");
  eval_cmd->add_option("--max-samples", max_samples, "sample cap per dataset");

  std::string dataset;
  int trajectory = -1, start = 0, delta = 1, horizon = 20;
  auto* roll = app.add_subcommand("rollout", "autoregressive rollout against ground truth");
  roll->add_option("--data", data_path, "manifest.json path")->required();
  roll->add_option("--checkpoint", checkpoint_path, "trained checkpoint")->required();
  roll->add_option("--dataset", dataset, "dataset name")->required();
  roll->add_option("--out", out_dir, "output directory")->required();
  roll->add_option("--trajectory", trajectory, "trajectory index (default: first test)");
  roll->add_option("--start", start, "window start frame");
  roll->add_option("--delta", delta, "sampling increment");
  roll->add_option("--horizon", horizon, "rollout steps");

  std::string kind = "integrators", n_list = "1,2,4", patch_t_list = "2,4";
  auto* abl = app.add_subcommand("ablate", "train and compare ablation variants");
  abl->add_option("--data", data_path, "manifest.json path")->required();
  abl->add_option("--kind", kind, "integrators | prompt")->required();
  abl->add_option("--model-config", model_path, "model config file")->required();
  abl->add_option("--train-config", train_path, "training config file")->required();
  abl->add_option("--out", out_dir, "output directory")->required();
  abl->add_option("--n-list", n_list, "prompt ablation: input window lengths");
  abl->add_option("--patch-t-list", patch_t_list, "prompt ablation: temporal patch sizes");
  abl->add_option("--set", overrides, "override config keys (key=value)");
  abl->add_option("--max-samples", max_samples, "eval sample cap per dataset");

  std::string inspect_path;
  auto* ins = app.add_subcommand("inspect", "summarize a trajectory file");
  ins->add_option("file", inspect_path, "trajectory file")->required();

  try {
    app.parse(argc, argv);
    const bool seed_given = seed_opt->count() > 0;
    if (gen->parsed()) return run_gen_data(config_path, out_dir, overrides, seed, seed_given);
    if (train->parsed())
      return run_train(data_path, model_path, train_path, out_dir, resume_path, overrides, seed,
                       seed_given);
    if (eval_cmd->parsed())
      return run_eval(data_path, checkpoint_path, out_dir, split, zero_shot, max_samples);
    if (roll->parsed())
      return run_rollout(data_path, checkpoint_path, out_dir, dataset, trajectory, start, delta,
                         horizon);
    if (abl->parsed())
      return run_ablate(data_path, kind, model_path, train_path, out_dir, n_list, patch_t_list,
                        overrides, max_samples);
    if (ins->parsed()) return run_inspect(inspect_path);
    return 1;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric fault: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
