#pragma once

#include "gphyt/storage.hpp"

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

namespace gphyt {

enum class System { heat2d, advection2d, burgers2d, advdiff2d };

inline const char* system_name(System s) {
  switch (s) {
    case System::heat2d: return "heat2d";
    case System::advection2d: return "advection2d";
    case System::burgers2d: return "burgers2d";
    case System::advdiff2d: return "advdiff2d";
  }
  return "?";
}

inline System parse_system(const std::string& s) {
  if (s == "heat2d") return System::heat2d;
  if (s == "advection2d") return System::advection2d;
  if (s == "burgers2d") return System::burgers2d;
  if (s == "advdiff2d") return System::advdiff2d;
  throw DataError("unknown system: " + s);
}

inline ChannelSet system_channels(System s) {
  switch (s) {
    case System::heat2d: return ChannelSet::of({kTemperature});
    case System::advection2d: return ChannelSet::of({kDensity});
    case System::burgers2d: return ChannelSet::of({kVelX, kVelY});
    case System::advdiff2d: return ChannelSet::of({kTemperature, kVelX, kVelY});
  }
  return ChannelSet{};
}

struct ParamRange {
  double lo = 0.0;
  double hi = 0.0;
  double sample(Rng& rng) const { return rng.uniform(lo, hi); }
  double max_abs() const { return std::max(std::abs(lo), std::abs(hi)); }
  bool empty() const { return lo == 0.0 && hi == 0.0; }
};

/// Desk-scale simulation recipe for one dataset.
struct SimSpec {
  std::string name;
  System system = System::heat2d;
  int height = 16;
  int width = 32;
  int timesteps = 64;       // stored frames
  double dt_sim = 0.05;
  int store_stride = 2;     // simulation steps per stored frame
  double domain_w = 2.0;
  double domain_h = 1.0;
  Boundary boundary = Boundary::periodic;
  ParamRange nu;                 // diffusivity
  ParamRange advect_x, advect_y; // constant advection speed (advection2d, advdiff2d)
  ParamRange ic_amplitude{-1.0, 1.0};
  ParamRange ic_offset;          // DC amplitude for scalar systems
  int ic_modes = 8;              // total sinusoids incl. the DC mode
  int ic_cutoff = 3;             // max integer wavenumber per axis
  int trajectory_count = 64;
  uint64_t seed = 1;
  bool holdout = false;

  double dx() const { return domain_w / width; }
  double dy() const { return domain_h / height; }

  /// Conservative bound on |velocity| anywhere in the run.
  double max_speed_bound() const {
    switch (system) {
      case System::heat2d: return 0.0;
      case System::advection2d:
      case System::advdiff2d:
        return std::max(advect_x.max_abs(), advect_y.max_abs());
      case System::burgers2d:
        // Upwind is monotone, so the initial bound holds for the whole run.
        return ic_amplitude.max_abs() * ic_modes;
    }
    return 0.0;
  }
};

/// Throws DataError when the spec violates a stability bound. Diffusion must
/// satisfy nu*dt*(1/dx^2 + 1/dy^2) <= 0.25; advective transport must satisfy
/// the upwind limit |u|*dt/min(dx,dy) <= 1 (corpus defaults stay below 0.5,
/// the limit itself admits the exact-shift regime at CFL = 1).
inline void validate_spec(const SimSpec& spec) {
  if (spec.height < 4 || spec.width < 4) throw DataError(spec.name + ": grid must be at least 4x4");
  if (spec.timesteps < 5) throw DataError(spec.name + ": need at least 5 stored frames");
  if (spec.store_stride < 1 || spec.dt_sim <= 0) throw DataError(spec.name + ": bad time stepping");
  if (spec.trajectory_count < 1) throw DataError(spec.name + ": need at least one trajectory");

  const double diff_number =
      spec.nu.max_abs() * spec.dt_sim * (1.0 / (spec.dx() * spec.dx()) + 1.0 / (spec.dy() * spec.dy()));
  if (spec.system != System::advection2d && diff_number > 0.25 + 1e-12) {
    throw DataError(spec.name + ": diffusion number " + std::to_string(diff_number) + " exceeds 0.25");
  }
  const double cfl = spec.max_speed_bound() * spec.dt_sim / std::min(spec.dx(), spec.dy());
  if (cfl > 1.0 + 1e-12) {
    throw DataError(spec.name + ": advective CFL " + std::to_string(cfl) + " exceeds 1");
  }
}

// ---------------------------------------------------------------------------
// Band-limited initial conditions: a sum of at most ic_modes sinusoids with
// integer wavenumbers up to ic_cutoff per axis (the first mode is a DC offset
// when an offset range is configured). Reproducible from the RNG state.
// ---------------------------------------------------------------------------

namespace detail {

inline Grid<double> band_limited_field(Rng& rng, int height, int width, const ParamRange& amp,
                                       const ParamRange& offset, int modes, int cutoff) {
  Grid<double> field = Grid<double>::Zero(height, width);
  int n_modes = 3 + static_cast<int>(rng.below(static_cast<uint64_t>(std::max(1, modes - 2))));
  if (!offset.empty()) {
    field.setConstant(offset.sample(rng));
    --n_modes;
  }
  constexpr double two_pi = 2.0 * 3.14159265358979323846;
  for (int m = 0; m < n_modes; ++m) {
    int kx = 0, ky = 0;
    while (kx == 0 && ky == 0) {
      kx = static_cast<int>(rng.below(static_cast<uint64_t>(cutoff + 1)));
      ky = static_cast<int>(rng.below(static_cast<uint64_t>(cutoff + 1)));
    }
    const double a = amp.sample(rng);
    const double phase = rng.uniform(0.0, two_pi);
    for (int i = 0; i < height; ++i) {
      const double fy = static_cast<double>(ky) * i / height;
      for (int j = 0; j < width; ++j) {
        const double fx = static_cast<double>(kx) * j / width;
        field(i, j) += a * std::cos(two_pi * (fx + fy) + phase);
      }
    }
  }
  return field;
}

}  // namespace detail

/// Per-trajectory parameters drawn before time stepping.
struct DrawnParams {
  double nu = 0.0;
  double ax = 0.0;
  double ay = 0.0;
};

inline DrawnParams draw_params(const SimSpec& spec, Rng& rng) {
  DrawnParams p;
  p.nu = spec.nu.sample(rng);
  p.ax = spec.advect_x.sample(rng);
  p.ay = spec.advect_y.sample(rng);
  return p;
}

/// Initial state for one trajectory; only the system's channels are filled.
inline FieldFrame<double> initial_condition(const SimSpec& spec, Rng& rng) {
  FieldFrame<double> f(spec.height, spec.width, spec.dx(), spec.dy());
  switch (spec.system) {
    case System::heat2d:
    case System::advdiff2d:
      f.data[kTemperature] = detail::band_limited_field(rng, spec.height, spec.width,
                                                        spec.ic_amplitude, spec.ic_offset,
                                                        spec.ic_modes, spec.ic_cutoff);
      break;
    case System::advection2d:
      f.data[kDensity] = detail::band_limited_field(rng, spec.height, spec.width,
                                                    spec.ic_amplitude, spec.ic_offset,
                                                    spec.ic_modes, spec.ic_cutoff);
      break;
    case System::burgers2d: {
      ParamRange no_offset;
      f.data[kVelX] = detail::band_limited_field(rng, spec.height, spec.width, spec.ic_amplitude,
                                                 no_offset, spec.ic_modes, spec.ic_cutoff);
      f.data[kVelY] = detail::band_limited_field(rng, spec.height, spec.width, spec.ic_amplitude,
                                                 no_offset, spec.ic_modes, spec.ic_cutoff);
      break;
    }
  }
  return f;
}

// ---------------------------------------------------------------------------
// Stepping kernels. FTCS for diffusion, first-order upwind for advection;
// chosen for the monotonicity guarantees the invariant tests rely on.
// ---------------------------------------------------------------------------

namespace detail {

// Neighbor values with boundary handling: periodic wraps, reflective clamps
// (zero-flux / Neumann mirror).
inline Grid<double> shift_xm(const Grid<double>& g, Boundary bc) {
  const auto rows = g.rows(), cols = g.cols();
  Grid<double> out(rows, cols);
  out.rightCols(cols - 1) = g.leftCols(cols - 1);
  out.col(0) = bc == Boundary::periodic ? g.col(cols - 1) : g.col(0);
  return out;
}
inline Grid<double> shift_xp(const Grid<double>& g, Boundary bc) {
  const auto rows = g.rows(), cols = g.cols();
  Grid<double> out(rows, cols);
  out.leftCols(cols - 1) = g.rightCols(cols - 1);
  out.col(cols - 1) = bc == Boundary::periodic ? g.col(0) : g.col(cols - 1);
  return out;
}
inline Grid<double> shift_ym(const Grid<double>& g, Boundary bc) {
  const auto rows = g.rows(), cols = g.cols();
  Grid<double> out(rows, cols);
  out.bottomRows(rows - 1) = g.topRows(rows - 1);
  out.row(0) = bc == Boundary::periodic ? g.row(rows - 1) : g.row(0);
  return out;
}
inline Grid<double> shift_yp(const Grid<double>& g, Boundary bc) {
  const auto rows = g.rows(), cols = g.cols();
  Grid<double> out(rows, cols);
  out.topRows(rows - 1) = g.bottomRows(rows - 1);
  out.row(rows - 1) = bc == Boundary::periodic ? g.row(0) : g.row(rows - 1);
  return out;
}

inline Grid<double> laplacian(const Grid<double>& g, Boundary bc, double dx, double dy) {
  return (shift_xp(g, bc) + shift_xm(g, bc) - 2.0 * g) / (dx * dx) +
         (shift_yp(g, bc) + shift_ym(g, bc) - 2.0 * g) / (dy * dy);
}

// Upwind advective derivative sum u * d/dx + v * d/dy with velocity fields.
inline Grid<double> upwind_advect(const Grid<double>& g, const Grid<double>& u,
                                  const Grid<double>& v, Boundary bc, double dx, double dy) {
  const Grid<double> dxb = (g - shift_xm(g, bc)) / dx;
  const Grid<double> dxf = (shift_xp(g, bc) - g) / dx;
  const Grid<double> dyb = (g - shift_ym(g, bc)) / dy;
  const Grid<double> dyf = (shift_yp(g, bc) - g) / dy;
  return u.max(0.0) * dxb + u.min(0.0) * dxf + v.max(0.0) * dyb + v.min(0.0) * dyf;
}

// Constant-speed upwind advection in convex-combination form. Weights are
// non-negative and sum to one exactly, which makes the scheme monotone on
// stored values and an exact circular shift at CFL = 1.
inline Grid<double> advect_constant(const Grid<double>& g, double ax, double ay, Boundary bc,
                                    double dx, double dy, double dt) {
  const double cxm = std::max(ax, 0.0) * dt / dx;   // weight of the west neighbor
  const double cxp = std::max(-ax, 0.0) * dt / dx;  // weight of the east neighbor
  const double cym = std::max(ay, 0.0) * dt / dy;
  const double cyp = std::max(-ay, 0.0) * dt / dy;
  Grid<double> out = (1.0 - cxm - cxp - cym - cyp) * g;
  if (cxm != 0.0) out += cxm * shift_xm(g, bc);
  if (cxp != 0.0) out += cxp * shift_xp(g, bc);
  if (cym != 0.0) out += cym * shift_ym(g, bc);
  if (cyp != 0.0) out += cyp * shift_yp(g, bc);
  return out;
}

// Slip walls for reflective velocity fields: zero normal component at walls.
inline void enforce_slip_walls(Grid<double>& u, Grid<double>& v) {
  u.col(0).setZero();
  u.col(u.cols() - 1).setZero();
  v.row(0).setZero();
  v.row(v.rows() - 1).setZero();
}

}  // namespace detail

/// Advance the system's channels by one simulation step.
inline void step_system(const SimSpec& spec, const DrawnParams& p, FieldFrame<double>& state) {
  const double dx = spec.dx(), dy = spec.dy(), dt = spec.dt_sim;
  const Boundary bc = spec.boundary;
  switch (spec.system) {
    case System::heat2d: {
      Grid<double>& T = state.data[kTemperature];
      T += dt * p.nu * detail::laplacian(T, bc, dx, dy);
      break;
    }
    case System::advection2d: {
      Grid<double>& rho = state.data[kDensity];
      rho = detail::advect_constant(rho, p.ax, p.ay, bc, dx, dy, dt);
      break;
    }
    case System::burgers2d: {
      const Grid<double> u = state.data[kVelX];
      const Grid<double> v = state.data[kVelY];
      state.data[kVelX] =
          u - dt * detail::upwind_advect(u, u, v, bc, dx, dy) + dt * p.nu * detail::laplacian(u, bc, dx, dy);
      state.data[kVelY] =
          v - dt * detail::upwind_advect(v, u, v, bc, dx, dy) + dt * p.nu * detail::laplacian(v, bc, dx, dy);
      if (bc == Boundary::reflective) {
        detail::enforce_slip_walls(state.data[kVelX], state.data[kVelY]);
      }
      break;
    }
    case System::advdiff2d: {
      Grid<double>& T = state.data[kTemperature];
      const Grid<double> diff = dt * p.nu * detail::laplacian(T, bc, dx, dy);
      T = detail::advect_constant(T, p.ax, p.ay, bc, dx, dy, dt) + diff;
      break;
    }
  }
}

namespace detail {

inline FieldFramef to_f32(const FieldFrame<double>& f) {
  FieldFramef out(f.height(), f.width(), static_cast<float>(f.dx), static_cast<float>(f.dy));
  for (int c = 0; c < kNumChannels; ++c) out.data[static_cast<size_t>(c)] = f.data[static_cast<size_t>(c)].cast<float>();
  return out;
}

inline void check_stable(const FieldFrame<double>& state, const SimSpec& spec, int step) {
  for (int c = 0; c < kNumChannels; ++c) {
    const auto& g = state.data[static_cast<size_t>(c)];
    if (!g.isFinite().all() || (g.abs() > 1e6).any()) {
      throw NumericError(spec.name + ": generation diverged at step " + std::to_string(step) +
                         " (channel " + channel_name(c) + ")");
    }
  }
}

}  // namespace detail

/// Deterministic in (spec.seed, trajectory_index).
inline Trajectoryf simulate_from(const SimSpec& spec, const DrawnParams& p,
                                 FieldFrame<double> state, uint64_t traj_seed) {
  validate_spec(spec);
  if (spec.system == System::advdiff2d) {
    state.data[kVelX].setConstant(p.ax);
    state.data[kVelY].setConstant(p.ay);
  }
  if (spec.system == System::burgers2d && spec.boundary == Boundary::reflective) {
    detail::enforce_slip_walls(state.data[kVelX], state.data[kVelY]);
  }

  Trajectoryf traj;
  traj.dt = static_cast<float>(spec.dt_sim * spec.store_stride);
  traj.meta.dataset = spec.name;
  traj.meta.boundary = spec.boundary;
  traj.meta.seed = traj_seed;
  traj.meta.channels = system_channels(spec.system);
  traj.frames.reserve(static_cast<size_t>(spec.timesteps));

  detail::check_stable(state, spec, 0);
  traj.frames.push_back(detail::to_f32(state));
  for (int frame = 1; frame < spec.timesteps; ++frame) {
    for (int s = 0; s < spec.store_stride; ++s) step_system(spec, p, state);
    detail::check_stable(state, spec, frame * spec.store_stride);
    traj.frames.push_back(detail::to_f32(state));
  }
  return traj;
}

inline Trajectoryf simulate(const SimSpec& spec, int trajectory_index) {
  const uint64_t traj_seed = Rng::derive(spec.seed, static_cast<uint64_t>(trajectory_index));
  Rng rng(traj_seed);
  const DrawnParams p = draw_params(spec, rng);
  FieldFrame<double> ic = initial_condition(spec, rng);
  return simulate_from(spec, p, std::move(ic), traj_seed);
}

// ---------------------------------------------------------------------------
// Corpus assembly: simulate every trajectory, write files, split by
// trajectory (never by frame) at 0.8/0.1/0.1 with a seeded shuffle, and
// compute NormStats from the training split only.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> assign_splits(int n, uint64_t seed) {
  if (n < 3) throw DataError("need at least 3 trajectories to split 0.8/0.1/0.1");
  const int n_val = std::max(1, static_cast<int>(std::llround(0.1 * n)));
  const int n_test = std::max(1, static_cast<int>(std::llround(0.1 * n)));
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  deterministic_shuffle(order, seed);
  std::vector<std::string> split(static_cast<size_t>(n));
  for (int k = 0; k < n; ++k) {
    const int idx = order[static_cast<size_t>(k)];
    split[static_cast<size_t>(idx)] = k < n - n_val - n_test ? "train" : (k < n - n_test ? "val" : "test");
  }
  return split;
}

}  // namespace detail

inline NormStats compute_norm_stats(const std::vector<const Trajectoryf*>& train_trajs,
                                    const ChannelSet& channels) {
  NormStats stats;
  stats.present = channels.present;
  for (int c = 0; c < kNumChannels; ++c) {
    if (!channels.present[static_cast<size_t>(c)]) continue;
    double sum = 0.0, sumsq = 0.0;
    int64_t count = 0;
    for (const auto* traj : train_trajs) {
      for (const auto& frame : traj->frames) {
        const auto& g = frame.data[static_cast<size_t>(c)];
        sum += g.template cast<double>().sum();
        sumsq += g.template cast<double>().square().sum();
        count += g.size();
      }
    }
    const double mean = count > 0 ? sum / static_cast<double>(count) : 0.0;
    const double var = count > 0 ? std::max(0.0, sumsq / static_cast<double>(count) - mean * mean) : 0.0;
    stats.mean[static_cast<size_t>(c)] = mean;
    stats.stddev[static_cast<size_t>(c)] = std::sqrt(var);
    if (stats.stddev[static_cast<size_t>(c)] < 1e-12) stats.degenerate[static_cast<size_t>(c)] = true;
  }
  return stats;
}

inline Manifest make_corpus(const std::vector<SimSpec>& specs, const std::filesystem::path& out_dir) {
  Manifest manifest;
  manifest.base_dir = out_dir;
  for (const auto& spec : specs) {
    if (manifest.datasets.count(spec.name)) throw DataError("duplicate dataset name: " + spec.name);
    validate_spec(spec);
    std::filesystem::create_directories(out_dir / spec.name);

    DatasetInfo info;
    info.system = system_name(spec.system);
    info.boundary = spec.boundary;
    info.holdout = spec.holdout;
    info.height = spec.height;
    info.width = spec.width;
    info.timesteps = spec.timesteps;
    info.dt = static_cast<float>(spec.dt_sim * spec.store_stride);
    info.dx = static_cast<float>(spec.dx());
    info.dy = static_cast<float>(spec.dy());
    info.channels = system_channels(spec.system);

    const auto splits = detail::assign_splits(spec.trajectory_count, Rng::derive(spec.seed, 0x5715));
    std::vector<Trajectoryf> train_kept;
    std::vector<const Trajectoryf*> train_ptrs;
    char filename[64];
    for (int i = 0; i < spec.trajectory_count; ++i) {
      Trajectoryf traj = simulate(spec, i);
      std::snprintf(filename, sizeof(filename), "traj_%04d.bin", i);
      const std::string rel = spec.name + "/" + filename;
      write_trajectory(traj, out_dir / rel);
      TrajectoryEntry entry;
      entry.file = rel;
      entry.index = i;
      entry.split = splits[static_cast<size_t>(i)];
      entry.seed = traj.meta.seed;
      info.trajectories.push_back(entry);
      if (entry.split == "train") train_kept.push_back(std::move(traj));
    }
    for (const auto& t : train_kept) train_ptrs.push_back(&t);
    info.stats = compute_norm_stats(train_ptrs, info.channels);
    manifest.datasets.emplace(spec.name, std::move(info));
  }
  manifest.save(out_dir / "manifest.json");
  return manifest;
}

// ---------------------------------------------------------------------------
// Desk corpus defaults: three training systems plus two zero-shot holdouts
// (new physics: advection-diffusion coupling; new boundary condition:
// reflective heat2d).
// ---------------------------------------------------------------------------

inline SimSpec desk_heat2d(uint64_t seed = 7001) {
  SimSpec s;
  s.name = "heat2d";
  s.system = System::heat2d;
  s.nu = {0.002, 0.006};
  s.dt_sim = 0.05;
  s.store_stride = 2;
  s.ic_offset = {0.5, 1.0};
  s.seed = seed;
  return s;
}

inline SimSpec desk_advection2d(uint64_t seed = 7002) {
  SimSpec s;
  s.name = "advection2d";
  s.system = System::advection2d;
  s.advect_x = {-0.6, 0.6};
  s.advect_y = {-0.6, 0.6};
  s.dt_sim = 0.05;
  s.store_stride = 2;
  s.ic_offset = {0.5, 1.0};
  s.seed = seed;
  return s;
}

inline SimSpec desk_burgers2d(uint64_t seed = 7003) {
  SimSpec s;
  s.name = "burgers2d";
  s.system = System::burgers2d;
  s.nu = {0.002, 0.006};
  s.dt_sim = 0.02;
  s.store_stride = 5;
  s.ic_amplitude = {-0.15, 0.15};
  s.seed = seed;
  return s;
}

inline SimSpec desk_advdiff2d(uint64_t seed = 9001) {
  SimSpec s;
  s.name = "advdiff2d";
  s.system = System::advdiff2d;
  s.nu = {0.002, 0.005};
  s.advect_x = {-0.5, 0.5};
  s.advect_y = {-0.5, 0.5};
  s.dt_sim = 0.05;
  s.store_stride = 2;
  s.ic_offset = {0.5, 1.0};
  s.trajectory_count = 16;
  s.seed = seed;
  s.holdout = true;
  return s;
}

inline SimSpec desk_heat2d_reflective(uint64_t seed = 9002) {
  SimSpec s = desk_heat2d(seed);
  s.name = "heat2d_reflective";
  s.boundary = Boundary::reflective;
  s.trajectory_count = 16;
  s.holdout = true;
  return s;
}

inline std::vector<SimSpec> desk_training_specs() {
  return {desk_heat2d(), desk_advection2d(), desk_burgers2d()};
}

inline std::vector<SimSpec> desk_holdout_specs() {
  return {desk_advdiff2d(), desk_heat2d_reflective()};
}

}  // namespace gphyt
