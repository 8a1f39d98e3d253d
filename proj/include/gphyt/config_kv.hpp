#pragma once

#include "gphyt/datagen.hpp"
#include "gphyt/model.hpp"
#include "gphyt/training.hpp"

#include <fstream>
#include <map>
#include <string>

namespace gphyt {

// ---------------------------------------------------------------------------
// Layered key/value configuration: `key = value` lines grouped by [section],
// '#' comments, overridden by `--set [section.]key=value`. The resolved map
// is persisted verbatim in run.json so sweeps have exact provenance.
// ---------------------------------------------------------------------------

class KvConfig {
 public:
  static KvConfig parse_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open config: " + path.string());
    KvConfig cfg;
    std::string line, section;
    int line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[' && line.back() == ']') {
        section = trim(line.substr(1, line.size() - 2));
        cfg.sections_[section];
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected key = value");
      }
      cfg.sections_[section][trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return cfg;
  }

  /// "--set section.key=value" (or "key=value" for the global section).
  void apply_override(const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw DataError("override needs key=value: " + spec);
    std::string key = trim(spec.substr(0, eq));
    std::string section;
    const auto dot = key.find('.');
    if (dot != std::string::npos) {
      section = key.substr(0, dot);
      key = key.substr(dot + 1);
    }
    sections_[section][key] = trim(spec.substr(eq + 1));
  }

  bool has(const std::string& section, const std::string& key) const {
    const auto s = sections_.find(section);
    return s != sections_.end() && s->second.count(key) > 0;
  }

  std::string get(const std::string& section, const std::string& key,
                  const std::string& fallback) const {
    const auto s = sections_.find(section);
    if (s == sections_.end()) return fallback;
    const auto k = s->second.find(key);
    return k == s->second.end() ? fallback : k->second;
  }

  double get_double(const std::string& section, const std::string& key, double fallback) const {
    return has(section, key) ? std::stod(get(section, key, "")) : fallback;
  }
  int get_int(const std::string& section, const std::string& key, int fallback) const {
    return has(section, key) ? std::stoi(get(section, key, "")) : fallback;
  }
  uint64_t get_u64(const std::string& section, const std::string& key, uint64_t fallback) const {
    return has(section, key) ? std::stoull(get(section, key, "")) : fallback;
  }
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
    if (!has(section, key)) return fallback;
    const std::string v = get(section, key, "");
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw DataError("bad boolean for " + key + ": " + v);
  }

  /// "lo:hi" or a single number for a degenerate range.
  ParamRange get_range(const std::string& section, const std::string& key,
                       ParamRange fallback) const {
    if (!has(section, key)) return fallback;
    const std::string v = get(section, key, "");
    const auto colon = v.find(':');
    if (colon == std::string::npos) {
      const double x = std::stod(v);
      return {x, x};
    }
    return {std::stod(v.substr(0, colon)), std::stod(v.substr(colon + 1))};
  }

  std::vector<std::string> section_names() const {
    std::vector<std::string> names;
    for (const auto& [name, _] : sections_)
      if (!name.empty()) names.push_back(name);
    return names;
  }

  nlohmann::json to_json() const {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [section, kv] : sections_) {
      nlohmann::json s = nlohmann::json::object();
      for (const auto& [k, v] : kv) s[k] = v;
      out[section.empty() ? "(global)" : section] = s;
    }
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
  }

  std::map<std::string, std::map<std::string, std::string>> sections_;
};

// ---------------------------------------------------------------------------
// Builders from config sections.
// ---------------------------------------------------------------------------

inline SimSpec sim_spec_from(const KvConfig& cfg, const std::string& section) {
  SimSpec spec;
  spec.name = section;
  spec.system = parse_system(cfg.get(section, "system", section));
  spec.boundary = parse_boundary(cfg.get(section, "boundary", "periodic"));
  const std::string grid = cfg.get(section, "grid", "16x32");
  const auto x = grid.find('x');
  if (x == std::string::npos) throw DataError(section + ": grid must be HxW");
  spec.height = std::stoi(grid.substr(0, x));
  spec.width = std::stoi(grid.substr(x + 1));
  spec.timesteps = cfg.get_int(section, "timesteps", spec.timesteps);
  spec.dt_sim = cfg.get_double(section, "dt_sim", spec.dt_sim);
  spec.store_stride = cfg.get_int(section, "store_stride", spec.store_stride);
  spec.domain_w = cfg.get_double(section, "domain_w", spec.domain_w);
  spec.domain_h = cfg.get_double(section, "domain_h", spec.domain_h);
  spec.nu = cfg.get_range(section, "nu", spec.nu);
  spec.advect_x = cfg.get_range(section, "advect_x", spec.advect_x);
  spec.advect_y = cfg.get_range(section, "advect_y", spec.advect_y);
  spec.ic_amplitude = cfg.get_range(section, "ic_amplitude", spec.ic_amplitude);
  spec.ic_offset = cfg.get_range(section, "ic_offset", spec.ic_offset);
  spec.ic_modes = cfg.get_int(section, "ic_modes", spec.ic_modes);
  spec.ic_cutoff = cfg.get_int(section, "ic_cutoff", spec.ic_cutoff);
  spec.trajectory_count = cfg.get_int(section, "trajectories", spec.trajectory_count);
  spec.seed = cfg.get_u64(section, "seed", spec.seed);
  spec.holdout = cfg.get_bool(section, "holdout", spec.holdout);
  return spec;
}

inline ModelConfig model_config_from(const KvConfig& cfg) {
  ModelConfig m;
  m.num_layers = cfg.get_int("", "num_layers", m.num_layers);
  m.embed_dim = cfg.get_int("", "embed_dim", m.embed_dim);
  m.mlp_dim = cfg.get_int("", "mlp_dim", m.mlp_dim);
  m.num_heads = cfg.get_int("", "num_heads", m.num_heads);
  m.patch_t = cfg.get_int("", "patch_t", m.patch_t);
  m.patch_h = cfg.get_int("", "patch_h", m.patch_h);
  m.patch_w = cfg.get_int("", "patch_w", m.patch_w);
  m.n_in = cfg.get_int("", "n_in", m.n_in);
  m.grid_h = cfg.get_int("", "grid_h", m.grid_h);
  m.grid_w = cfg.get_int("", "grid_w", m.grid_w);
  m.integrator = parse_integrator(cfg.get("", "integrator", integrator_name(m.integrator)));
  m.variant = parse_variant(cfg.get("", "variant", variant_name(m.variant)));
  m.validate();
  return m;
}

inline TrainConfig train_config_from(const KvConfig& cfg) {
  TrainConfig t;
  t.total_steps = cfg.get_int("", "total_steps", t.total_steps);
  t.warmup_steps = cfg.get_int("", "warmup_steps", t.warmup_steps);
  t.peak_lr = cfg.get_double("", "peak_lr", t.peak_lr);
  t.final_lr = cfg.get_double("", "final_lr", t.final_lr);
  t.batch_size = cfg.get_int("", "batch_size", t.batch_size);
  t.grad_clip_norm = cfg.get_double("", "grad_clip_norm", t.grad_clip_norm);
  t.beta1 = cfg.get_double("", "beta1", t.beta1);
  t.beta2 = cfg.get_double("", "beta2", t.beta2);
  t.weight_decay = cfg.get_double("", "weight_decay", t.weight_decay);
  t.seed = cfg.get_u64("", "seed", t.seed);
  t.checkpoint_interval = cfg.get_int("", "checkpoint_interval", t.checkpoint_interval);
  t.eval_interval = cfg.get_int("", "eval_interval", t.eval_interval);
  t.log_interval = cfg.get_int("", "log_interval", t.log_interval);
  t.val_samples = cfg.get_int("", "val_samples", t.val_samples);
  t.sampler.delta_max = cfg.get_int("", "delta_max", t.sampler.delta_max);
  t.sampler.flips = cfg.get_bool("", "flips", t.sampler.flips);
  t.validate();
  return t;
}

}  // namespace gphyt
