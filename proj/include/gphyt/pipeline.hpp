#pragma once

#include "gphyt/numerics.hpp"
#include "gphyt/storage.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace gphyt {

struct SamplerConfig {
  int n_in = 4;
  int n_out = 1;
  int delta_max = 8;
  bool flips = true;  // 4 deterministic variants: none, x, y, xy
  uint64_t seed = 0;

  int flip_variants() const { return flips ? 4 : 1; }
};

/// Unique samples for one corpus: flip_variants * n_traj *
/// sum over delta of max(0, T - delta * (N_in + N_out - 1)).
inline int64_t unique_sample_count(int t_total, int n_in, int n_out, int delta_max,
                                   int flip_variants, int64_t n_traj) {
  int64_t per_traj = 0;
  for (int delta = 1; delta <= delta_max; ++delta) {
    per_traj += std::max<int64_t>(0, t_total - int64_t(delta) * (n_in + n_out - 1));
  }
  return per_traj * flip_variants * n_traj;
}

/// Resolvable pointer to one (window, flip) combination.
struct SampleDesc {
  int32_t dataset = 0;  // index into the caller's dataset-name list
  int32_t trajectory = 0;
  int32_t start = 0;
  int16_t delta = 1;
  uint8_t flip = 0;  // bit 0 = flip_x, bit 1 = flip_y

  FlipSpec flip_spec() const { return FlipSpec{(flip & 1) != 0, (flip & 2) != 0}; }
  bool operator==(const SampleDesc&) const = default;
};

inline std::vector<std::string> training_dataset_names(const Manifest& manifest) {
  std::vector<std::string> names;
  for (const auto& [name, info] : manifest.datasets)
    if (!info.holdout) names.push_back(name);
  return names;
}

inline std::vector<std::string> holdout_dataset_names(const Manifest& manifest) {
  std::vector<std::string> names;
  for (const auto& [name, info] : manifest.datasets)
    if (info.holdout) names.push_back(name);
  return names;
}

/// All sample descriptors of a split, in canonical order (dataset, trajectory,
/// delta, start, flip) then shuffled with the config seed. Length equals
/// unique_sample_count summed over the split's trajectories.
inline std::vector<SampleDesc> enumerate_samples(const Manifest& manifest,
                                                 const std::vector<std::string>& datasets,
                                                 const std::string& split,
                                                 const SamplerConfig& cfg) {
  std::vector<SampleDesc> out;
  const int window_span = cfg.n_in + cfg.n_out - 1;
  for (int32_t d = 0; d < int32_t(datasets.size()); ++d) {
    const auto it = manifest.datasets.find(datasets[size_t(d)]);
    if (it == manifest.datasets.end()) throw DataError("unknown dataset: " + datasets[size_t(d)]);
    const DatasetInfo& info = it->second;
    for (const auto* entry : info.split_entries(split)) {
      for (int16_t delta = 1; delta <= cfg.delta_max; ++delta) {
        const int count = info.timesteps - int(delta) * window_span;
        for (int32_t start = 0; start < count; ++start) {
          for (uint8_t flip = 0; flip < uint8_t(cfg.flip_variants()); ++flip) {
            out.push_back(SampleDesc{d, int32_t(entry->index), start, delta, flip});
          }
        }
      }
    }
  }
  deterministic_shuffle(out, cfg.seed);
  return out;
}

// ---------------------------------------------------------------------------
// Per-dataset normalization. Masked channels are untouched (they stay zero);
// a present channel with zero spread cannot be normalized.
// ---------------------------------------------------------------------------

namespace detail {

inline void require_normalizable(const NormStats& stats) {
  for (int c = 0; c < kNumChannels; ++c) {
    if (stats.present[size_t(c)] && (stats.degenerate[size_t(c)] || stats.stddev[size_t(c)] <= 0.0)) {
      throw DataError(std::string("degenerate stats for present channel ") + channel_name(c));
    }
  }
}

}  // namespace detail

template <typename Scalar>
FieldFrame<Scalar> normalize(const FieldFrame<Scalar>& frame, const NormStats& stats) {
  detail::require_normalizable(stats);
  FieldFrame<Scalar> out = frame;
  for (int c = 0; c < kNumChannels; ++c) {
    if (!stats.present[size_t(c)]) continue;
    out.data[size_t(c)] =
        (frame.data[size_t(c)] - Scalar(stats.mean[size_t(c)])) / Scalar(stats.stddev[size_t(c)]);
  }
  return out;
}

template <typename Scalar>
FieldFrame<Scalar> denormalize(const FieldFrame<Scalar>& frame, const NormStats& stats) {
  detail::require_normalizable(stats);
  FieldFrame<Scalar> out = frame;
  for (int c = 0; c < kNumChannels; ++c) {
    if (!stats.present[size_t(c)]) continue;
    out.data[size_t(c)] =
        frame.data[size_t(c)] * Scalar(stats.stddev[size_t(c)]) + Scalar(stats.mean[size_t(c)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus cache: all trajectories of the requested splits held in memory.
// ---------------------------------------------------------------------------

class CorpusCache {
 public:
  CorpusCache(const Manifest& manifest, const std::vector<std::string>& datasets,
              const std::vector<std::string>& splits) {
    names_ = datasets;
    stats_.reserve(datasets.size());
    masks_.reserve(datasets.size());
    for (int32_t d = 0; d < int32_t(datasets.size()); ++d) {
      const auto it = manifest.datasets.find(datasets[size_t(d)]);
      if (it == manifest.datasets.end()) throw DataError("unknown dataset: " + datasets[size_t(d)]);
      stats_.push_back(it->second.stats);
      masks_.push_back(it->second.channels);
      for (const auto& split : splits) {
        for (const auto* entry : it->second.split_entries(split)) {
          trajectories_.emplace(Key{d, entry->index},
                                read_trajectory(manifest.base_dir / entry->file));
        }
      }
    }
  }

  const Trajectoryf& get(int dataset, int trajectory) const {
    const auto it = trajectories_.find(Key{dataset, trajectory});
    if (it == trajectories_.end()) {
      throw DataError("trajectory not cached: dataset " + std::to_string(dataset) + " index " +
                      std::to_string(trajectory));
    }
    return it->second;
  }

  const NormStats& stats(int dataset) const { return stats_.at(size_t(dataset)); }
  const ChannelSet& mask(int dataset) const { return masks_.at(size_t(dataset)); }
  const std::string& name(int dataset) const { return names_.at(size_t(dataset)); }
  int dataset_count() const { return int(names_.size()); }

 private:
  using Key = std::pair<int, int>;
  std::map<Key, Trajectoryf> trajectories_;
  std::vector<NormStats> stats_;
  std::vector<ChannelSet> masks_;
  std::vector<std::string> names_;
};

/// Frames loaded, normalized with the dataset's training stats, flip applied
/// to inputs and target consistently.
inline Samplef materialize(const SampleDesc& desc, const CorpusCache& cache,
                           const SamplerConfig& cfg) {
  const Trajectoryf& traj = cache.get(desc.dataset, desc.trajectory);
  const NormStats& stats = cache.stats(desc.dataset);
  const int target_index = desc.start + cfg.n_in * desc.delta;
  if (desc.start < 0 || target_index >= traj.steps()) {
    throw DataError("sample window out of range: start " + std::to_string(desc.start) + " delta " +
                    std::to_string(desc.delta) + " in trajectory of " +
                    std::to_string(traj.steps()) + " frames");
  }
  const FlipSpec flip = desc.flip_spec();
  Samplef sample;
  sample.delta = desc.delta;
  sample.flip = flip;
  sample.source = SampleSource{cache.name(desc.dataset), desc.trajectory, desc.start};
  sample.inputs.reserve(size_t(cfg.n_in));
  for (int k = 0; k < cfg.n_in; ++k) {
    const auto& frame = traj.frames[size_t(desc.start + k * desc.delta)];
    sample.inputs.push_back(apply_flip(normalize(frame, stats), flip));
  }
  sample.target = apply_flip(normalize(traj.frames[size_t(target_index)], stats), flip);
  return sample;
}

/// Model-ready form of a materialized sample.
struct WindowSample {
  std::vector<Matf> inputs;  // n_in matrices, (H*W) x C
  Matf target;               // (H*W) x C
  GridShape<float> shape;
};

inline WindowSample to_window(const Samplef& sample) {
  WindowSample w;
  w.shape = GridShape<float>{sample.target.height(), sample.target.width(), sample.target.dx,
                             sample.target.dy};
  w.inputs.reserve(sample.inputs.size());
  for (const auto& f : sample.inputs) w.inputs.push_back(to_matrix(f));
  w.target = to_matrix(sample.target);
  return w;
}

inline WindowSample materialize_window(const SampleDesc& desc, const CorpusCache& cache,
                                       const SamplerConfig& cfg) {
  return to_window(materialize(desc, cache, cfg));
}

}  // namespace gphyt
