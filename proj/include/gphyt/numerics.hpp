#pragma once

#include "gphyt/fields.hpp"

#include <string>
#include <vector>

namespace gphyt {

enum class Axis { x, y };

// ---------------------------------------------------------------------------
// Central differences. Interior points use (f[i+1] - f[i-1]) / (2h); boundary
// points fall back to one-sided first-order differences so the operator is
// total without assuming periodicity.
// ---------------------------------------------------------------------------

template <typename Scalar>
Grid<Scalar> central_diff_grid(const Grid<Scalar>& g, Axis axis, Scalar h) {
  const int rows = static_cast<int>(g.rows());
  const int cols = static_cast<int>(g.cols());
  const int n = axis == Axis::x ? cols : rows;
  if (n < 3) {
    throw DataError("central_diff: need at least 3 points along axis, got " + std::to_string(n));
  }
  Grid<Scalar> out(rows, cols);
  const Scalar inv2h = Scalar(1) / (Scalar(2) * h);
  const Scalar invh = Scalar(1) / h;
  if (axis == Axis::x) {
    out.block(0, 1, rows, cols - 2) =
        (g.block(0, 2, rows, cols - 2) - g.block(0, 0, rows, cols - 2)) * inv2h;
    out.col(0) = (g.col(1) - g.col(0)) * invh;
    out.col(cols - 1) = (g.col(cols - 1) - g.col(cols - 2)) * invh;
  } else {
    out.block(1, 0, rows - 2, cols) =
        (g.block(2, 0, rows - 2, cols) - g.block(0, 0, rows - 2, cols)) * inv2h;
    out.row(0) = (g.row(1) - g.row(0)) * invh;
    out.row(rows - 1) = (g.row(rows - 1) - g.row(rows - 2)) * invh;
  }
  return out;
}

/// Adjoint of central_diff_grid: accumulates D^T u into acc.
template <typename Scalar>
void central_diff_grid_adjoint_add(const Grid<Scalar>& u, Axis axis, Scalar h,
                                   Grid<Scalar>& acc) {
  const int rows = static_cast<int>(u.rows());
  const int cols = static_cast<int>(u.cols());
  const Scalar inv2h = Scalar(1) / (Scalar(2) * h);
  const Scalar invh = Scalar(1) / h;
  if (axis == Axis::x) {
    acc.block(0, 0, rows, cols - 2) -= u.block(0, 1, rows, cols - 2) * inv2h;
    acc.block(0, 2, rows, cols - 2) += u.block(0, 1, rows, cols - 2) * inv2h;
    acc.col(0) -= u.col(0) * invh;
    acc.col(1) += u.col(0) * invh;
    acc.col(cols - 2) -= u.col(cols - 1) * invh;
    acc.col(cols - 1) += u.col(cols - 1) * invh;
  } else {
    acc.block(0, 0, rows - 2, cols) -= u.block(1, 0, rows - 2, cols) * inv2h;
    acc.block(2, 0, rows - 2, cols) += u.block(1, 0, rows - 2, cols) * inv2h;
    acc.row(0) -= u.row(0) * invh;
    acc.row(1) += u.row(0) * invh;
    acc.row(rows - 2) -= u.row(rows - 1) * invh;
    acc.row(rows - 1) += u.row(rows - 1) * invh;
  }
}

/// Spatial derivative of every channel of one frame.
template <typename Scalar>
std::array<Grid<Scalar>, kNumChannels> central_diff_spatial(const FieldFrame<Scalar>& frame,
                                                            Axis axis) {
  const Scalar h = axis == Axis::x ? frame.dx : frame.dy;
  std::array<Grid<Scalar>, kNumChannels> out;
  for (int c = 0; c < kNumChannels; ++c) {
    out[static_cast<size_t>(c)] = central_diff_grid(frame.data[static_cast<size_t>(c)], axis, h);
  }
  return out;
}

/// Temporal derivative across the input window, unit spacing in sampled-step
/// units (the physical delta-t is deliberately hidden from the model).
/// A single-frame window has derivative zero by convention.
template <typename Scalar>
std::vector<std::array<Grid<Scalar>, kNumChannels>> central_diff_time(
    const std::vector<FieldFrame<Scalar>>& frames) {
  const int t_count = static_cast<int>(frames.size());
  std::vector<std::array<Grid<Scalar>, kNumChannels>> out(static_cast<size_t>(t_count));
  if (t_count == 0) return out;
  const int h = frames[0].height();
  const int w = frames[0].width();
  if (t_count == 1) {
    for (int c = 0; c < kNumChannels; ++c) out[0][static_cast<size_t>(c)] = Grid<Scalar>::Zero(h, w);
    return out;
  }
  for (int c = 0; c < kNumChannels; ++c) {
    const size_t cc = static_cast<size_t>(c);
    out[0][cc] = frames[1].data[cc] - frames[0].data[cc];
    for (int t = 1; t + 1 < t_count; ++t) {
      out[static_cast<size_t>(t)][cc] =
          (frames[static_cast<size_t>(t + 1)].data[cc] - frames[static_cast<size_t>(t - 1)].data[cc]) *
          Scalar(0.5);
    }
    out[static_cast<size_t>(t_count - 1)][cc] =
        frames[static_cast<size_t>(t_count - 1)].data[cc] - frames[static_cast<size_t>(t_count - 2)].data[cc];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Enrichment on matrix windows: each frame (H*W) x C becomes (H*W) x 4C with
// channel layout [fields | d/dx | d/dy | d/dt]. All pieces are linear in the
// inputs, so the adjoint below is a fixed stencil as well.
// ---------------------------------------------------------------------------

template <typename Scalar>
struct GridShape {
  int height = 0;
  int width = 0;
  Scalar dx = Scalar(1);
  Scalar dy = Scalar(1);
};

namespace detail {

template <typename Scalar>
Eigen::Map<const Grid<Scalar>> col_as_grid(const Mat<Scalar>& m, int col, int h, int w) {
  return Eigen::Map<const Grid<Scalar>>(m.col(col).data(), h, w);
}

template <typename Scalar>
Eigen::Map<Grid<Scalar>> col_as_grid(Mat<Scalar>& m, int col, int h, int w) {
  return Eigen::Map<Grid<Scalar>>(m.col(col).data(), h, w);
}

}  // namespace detail

template <typename Scalar>
std::vector<Mat<Scalar>> enrich_window(const std::vector<Mat<Scalar>>& frames,
                                       const GridShape<Scalar>& shape) {
  const int t_count = static_cast<int>(frames.size());
  const int n = shape.height * shape.width;
  std::vector<Mat<Scalar>> out(static_cast<size_t>(t_count));
  Grid<Scalar> tmp;
  for (int t = 0; t < t_count; ++t) {
    const Mat<Scalar>& f = frames[static_cast<size_t>(t)];
    Mat<Scalar>& e = out[static_cast<size_t>(t)];
    e.resize(n, 4 * kNumChannels);
    e.leftCols(kNumChannels) = f;
    for (int c = 0; c < kNumChannels; ++c) {
      auto src = detail::col_as_grid(f, c, shape.height, shape.width);
      tmp = central_diff_grid(Grid<Scalar>(src), Axis::x, shape.dx);
      e.col(kNumChannels + c) = Eigen::Map<const Vec<Scalar>>(tmp.data(), n);
      tmp = central_diff_grid(Grid<Scalar>(src), Axis::y, shape.dy);
      e.col(2 * kNumChannels + c) = Eigen::Map<const Vec<Scalar>>(tmp.data(), n);
    }
    // d/dt block filled below once all frames are available.
  }
  for (int c = 0; c < kNumChannels; ++c) {
    const int dst = 3 * kNumChannels + c;
    if (t_count == 1) {
      out[0].col(dst).setZero();
      continue;
    }
    out[0].col(dst) = frames[1].col(c) - frames[0].col(c);
    for (int t = 1; t + 1 < t_count; ++t) {
      out[static_cast<size_t>(t)].col(dst) =
          (frames[static_cast<size_t>(t + 1)].col(c) - frames[static_cast<size_t>(t - 1)].col(c)) *
          Scalar(0.5);
    }
    out[static_cast<size_t>(t_count - 1)].col(dst) =
        frames[static_cast<size_t>(t_count - 1)].col(c) - frames[static_cast<size_t>(t_count - 2)].col(c);
  }
  return out;
}

/// Adjoint of enrich_window: gradient w.r.t. the enriched stack back to the
/// raw input frames.
template <typename Scalar>
std::vector<Mat<Scalar>> enrich_window_adjoint(const std::vector<Mat<Scalar>>& grad_enriched,
                                               const GridShape<Scalar>& shape) {
  const int t_count = static_cast<int>(grad_enriched.size());
  const int n = shape.height * shape.width;
  std::vector<Mat<Scalar>> grad(static_cast<size_t>(t_count));
  for (auto& g : grad) g = Mat<Scalar>::Zero(n, kNumChannels);

  Grid<Scalar> acc(shape.height, shape.width);
  for (int t = 0; t < t_count; ++t) {
    const Mat<Scalar>& ge = grad_enriched[static_cast<size_t>(t)];
    Mat<Scalar>& gf = grad[static_cast<size_t>(t)];
    gf += ge.leftCols(kNumChannels);
    for (int c = 0; c < kNumChannels; ++c) {
      acc.setZero();
      Grid<Scalar> ux = Eigen::Map<const Grid<Scalar>>(ge.col(kNumChannels + c).data(),
                                                       shape.height, shape.width);
      central_diff_grid_adjoint_add(ux, Axis::x, shape.dx, acc);
      Grid<Scalar> uy = Eigen::Map<const Grid<Scalar>>(ge.col(2 * kNumChannels + c).data(),
                                                       shape.height, shape.width);
      central_diff_grid_adjoint_add(uy, Axis::y, shape.dy, acc);
      gf.col(c) += Eigen::Map<const Vec<Scalar>>(acc.data(), n);
    }
  }

  // Adjoint of the temporal stencil (unit spacing).
  if (t_count >= 2) {
    for (int c = 0; c < kNumChannels; ++c) {
      const int src = 3 * kNumChannels + c;
      grad[1].col(c) += grad_enriched[0].col(src);
      grad[0].col(c) -= grad_enriched[0].col(src);
      for (int t = 1; t + 1 < t_count; ++t) {
        grad[static_cast<size_t>(t + 1)].col(c) += grad_enriched[static_cast<size_t>(t)].col(src) * Scalar(0.5);
        grad[static_cast<size_t>(t - 1)].col(c) -= grad_enriched[static_cast<size_t>(t)].col(src) * Scalar(0.5);
      }
      grad[static_cast<size_t>(t_count - 1)].col(c) +=
          grad_enriched[static_cast<size_t>(t_count - 1)].col(src);
      grad[static_cast<size_t>(t_count - 2)].col(c) -=
          grad_enriched[static_cast<size_t>(t_count - 1)].col(src);
    }
  }
  return grad;
}

/// Frame-level enrichment: N_in frames of C channels -> N_in matrices of 4C
/// channels, layout [fields | d/dx | d/dy | d/dt].
template <typename Scalar>
std::vector<Mat<Scalar>> enrich(const std::vector<FieldFrame<Scalar>>& frames) {
  std::vector<Mat<Scalar>> mats;
  mats.reserve(frames.size());
  for (const auto& f : frames) mats.push_back(to_matrix(f));
  GridShape<Scalar> shape{frames.at(0).height(), frames.at(0).width(), frames[0].dx, frames[0].dy};
  return enrich_window(mats, shape);
}

// ---------------------------------------------------------------------------
// Explicit time integrators.
// ---------------------------------------------------------------------------

enum class IntegratorKind { none_direct, forward_euler, heun, rk4 };

inline const char* integrator_name(IntegratorKind k) {
  switch (k) {
    case IntegratorKind::none_direct: return "none";
    case IntegratorKind::forward_euler: return "euler";
    case IntegratorKind::heun: return "heun";
    case IntegratorKind::rk4: return "rk4";
  }
  return "?";
}

inline IntegratorKind parse_integrator(const std::string& s) {
  if (s == "none" || s == "direct") return IntegratorKind::none_direct;
  if (s == "euler" || s == "forward_euler") return IntegratorKind::forward_euler;
  if (s == "heun") return IntegratorKind::heun;
  if (s == "rk4") return IntegratorKind::rk4;
  throw DataError("unknown integrator: " + s);
}

/// Derivative evaluations per step: 1 (Euler), 2 (Heun), 4 (RK4).
inline int integrator_stages(IntegratorKind k) {
  switch (k) {
    case IntegratorKind::none_direct: return 0;
    case IntegratorKind::forward_euler: return 1;
    case IntegratorKind::heun: return 2;
    case IntegratorKind::rk4: return 4;
  }
  return 0;
}

namespace detail {

inline bool state_finite(double x) { return std::isfinite(x); }
inline bool state_finite(float x) { return std::isfinite(x); }
template <typename Derived>
bool state_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}
template <typename Derived>
bool state_finite(const Eigen::ArrayBase<Derived>& m) {
  return m.allFinite();
}

inline void check_stage(bool finite, IntegratorKind kind, const char* stage) {
  if (!finite) {
    throw NumericError(std::string(integrator_name(kind)) + ": non-finite state at stage " + stage);
  }
}

}  // namespace detail

/// One explicit step X -> X + step * combination(deriv_fn evaluations).
/// deriv_fn is invoked exactly 1/2/4 times for euler/heun/rk4.
template <typename State, typename Fn, typename Scalar>
State integrate(IntegratorKind kind, const State& state, Fn&& deriv_fn, Scalar step) {
  switch (kind) {
    case IntegratorKind::none_direct:
      throw std::invalid_argument("integrate: none_direct has no integration step");
    case IntegratorKind::forward_euler: {
      State k1 = deriv_fn(state);
      detail::check_stage(detail::state_finite(k1), kind, "k1");
      return state + step * k1;
    }
    case IntegratorKind::heun: {
      State k1 = deriv_fn(state);
      detail::check_stage(detail::state_finite(k1), kind, "k1");
      State k2 = deriv_fn(state + step * k1);
      detail::check_stage(detail::state_finite(k2), kind, "k2");
      return state + (step / Scalar(2)) * (k1 + k2);
    }
    case IntegratorKind::rk4: {
      const Scalar half = step / Scalar(2);
      State k1 = deriv_fn(state);
      detail::check_stage(detail::state_finite(k1), kind, "k1");
      State k2 = deriv_fn(state + half * k1);
      detail::check_stage(detail::state_finite(k2), kind, "k2");
      State k3 = deriv_fn(state + half * k2);
      detail::check_stage(detail::state_finite(k3), kind, "k3");
      State k4 = deriv_fn(state + step * k3);
      detail::check_stage(detail::state_finite(k4), kind, "k4");
      return state + (step / Scalar(6)) * (k1 + Scalar(2) * k2 + Scalar(2) * k3 + k4);
    }
  }
  throw std::invalid_argument("integrate: unknown integrator kind");
}

}  // namespace gphyt
