#pragma once

#include "gphyt/common.hpp"

#include <array>
#include <cstdio>
#include <string>
#include <vector>

namespace gphyt {

// Canonical channel order, identical across all datasets and modules.
enum Channel : int {
  kPressure = 0,
  kDensity = 1,
  kTemperature = 2,
  kVelX = 3,
  kVelY = 4,
};

inline constexpr int kNumChannels = 5;

inline const char* channel_name(int c) {
  static const char* names[kNumChannels] = {"pressure", "density", "temperature",
                                            "vel_x", "vel_y"};
  return (c >= 0 && c < kNumChannels) ? names[c] : "?";
}

/// Which channels carry real data; absent channels are zero everywhere.
struct ChannelSet {
  std::array<bool, kNumChannels> present{};

  static ChannelSet all() {
    ChannelSet s;
    s.present.fill(true);
    return s;
  }
  static ChannelSet of(std::initializer_list<int> channels) {
    ChannelSet s;
    for (int c : channels) s.present[static_cast<size_t>(c)] = true;
    return s;
  }
  bool operator==(const ChannelSet&) const = default;
};

enum class Boundary { periodic, reflective, open };

inline const char* boundary_name(Boundary b) {
  switch (b) {
    case Boundary::periodic: return "periodic";
    case Boundary::reflective: return "reflective";
    case Boundary::open: return "open";
  }
  return "?";
}

inline Boundary parse_boundary(const std::string& s) {
  if (s == "periodic") return Boundary::periodic;
  if (s == "reflective") return Boundary::reflective;
  if (s == "open") return Boundary::open;
  throw DataError("unknown boundary tag: " + s);
}

/// One time instant of the multi-channel state on an H x W grid.
template <typename Scalar>
struct FieldFrame {
  std::array<Grid<Scalar>, kNumChannels> data;
  Scalar dx = Scalar(1);
  Scalar dy = Scalar(1);

  FieldFrame() = default;
  FieldFrame(int height, int width, Scalar dx_phys = Scalar(1), Scalar dy_phys = Scalar(1))
      : dx(dx_phys), dy(dy_phys) {
    for (auto& g : data) g = Grid<Scalar>::Zero(height, width);
  }

  int height() const { return static_cast<int>(data[0].rows()); }
  int width() const { return static_cast<int>(data[0].cols()); }
};

using FieldFramef = FieldFrame<float>;

struct TrajectoryMeta {
  std::string dataset;
  Boundary boundary = Boundary::periodic;
  uint64_t seed = 0;
  ChannelSet channels;
};

/// Ordered frames on one grid, uniformly spaced dt_phys apart.
template <typename Scalar>
struct Trajectory {
  std::vector<FieldFrame<Scalar>> frames;
  Scalar dt = Scalar(1);
  TrajectoryMeta meta;

  int steps() const { return static_cast<int>(frames.size()); }
};

using Trajectoryf = Trajectory<float>;

struct FlipSpec {
  bool flip_x = false;
  bool flip_y = false;
  bool operator==(const FlipSpec&) const = default;
};

struct SampleSource {
  std::string dataset;
  int trajectory = 0;
  int start = 0;
};

/// One training item: N_in input frames, one target, and how it was sampled.
template <typename Scalar>
struct Sample {
  std::vector<FieldFrame<Scalar>> inputs;
  FieldFrame<Scalar> target;
  int delta = 1;
  FlipSpec flip;
  SampleSource source;
};

using Samplef = Sample<float>;

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Mirror along the flipped axes. Mirrored physics needs mirrored velocity
/// vectors, so vel_x is negated under an x-flip and vel_y under a y-flip.
/// Exact involution for every flip combination.
template <typename Scalar>
FieldFrame<Scalar> apply_flip(const FieldFrame<Scalar>& frame, bool flip_x, bool flip_y) {
  FieldFrame<Scalar> out = frame;
  for (int c = 0; c < kNumChannels; ++c) {
    Grid<Scalar>& g = out.data[static_cast<size_t>(c)];
    if (flip_x) g = g.rowwise().reverse().eval();  // mirror width
    if (flip_y) g = g.colwise().reverse().eval();  // mirror height
    if ((c == kVelX && flip_x) || (c == kVelY && flip_y)) g = -g;
  }
  return out;
}

template <typename Scalar>
FieldFrame<Scalar> apply_flip(const FieldFrame<Scalar>& frame, FlipSpec flip) {
  return apply_flip(frame, flip.flip_x, flip.flip_y);
}

/// Returns every violated invariant; empty means valid.
template <typename Scalar>
std::vector<std::string> validate_frame(const FieldFrame<Scalar>& frame, const ChannelSet& mask) {
  std::vector<std::string> violations;
  const int h = frame.height();
  const int w = frame.width();
  if (h < 4 || w < 4) {
    violations.push_back("grid too small: " + std::to_string(h) + "x" + std::to_string(w) +
                         " (need at least 4x4)");
  }
  char buf[128];
  for (int c = 0; c < kNumChannels; ++c) {
    const Grid<Scalar>& g = frame.data[static_cast<size_t>(c)];
    if (!g.isFinite().all()) {
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
          if (!std::isfinite(static_cast<double>(g(i, j)))) {
            std::snprintf(buf, sizeof(buf), "non-finite at (%d,%d,%d)", i, j, c);
            violations.emplace_back(buf);
          }
        }
      }
    }
    if (!mask.present[static_cast<size_t>(c)] && (g != Scalar(0)).any()) {
      violations.push_back(std::string("masked channel nonzero: ") + channel_name(c));
    }
  }
  return violations;
}

// ---------------------------------------------------------------------------
// Matrix view: (H*W) x C with spatial index h * W + w. Column c is exactly
// the row-major bytes of channel c, so conversion is a straight copy.
// ---------------------------------------------------------------------------

template <typename Scalar>
Mat<Scalar> to_matrix(const FieldFrame<Scalar>& frame) {
  const int n = frame.height() * frame.width();
  Mat<Scalar> m(n, kNumChannels);
  for (int c = 0; c < kNumChannels; ++c) {
    m.col(c) = Eigen::Map<const Vec<Scalar>>(frame.data[static_cast<size_t>(c)].data(), n);
  }
  return m;
}

template <typename Scalar>
FieldFrame<Scalar> to_frame(const Mat<Scalar>& m, int height, int width,
                            Scalar dx = Scalar(1), Scalar dy = Scalar(1)) {
  FieldFrame<Scalar> f(height, width, dx, dy);
  for (int c = 0; c < kNumChannels; ++c) {
    Eigen::Map<Vec<Scalar>>(f.data[static_cast<size_t>(c)].data(), height * width) = m.col(c);
  }
  return f;
}

/// Per-dataset, per-channel statistics from the training split.
/// Masked channels carry (0, 1); a present channel with zero spread is
/// flagged degenerate and rejected at normalization time.
struct NormStats {
  std::array<double, kNumChannels> mean{};
  std::array<double, kNumChannels> stddev{1.0, 1.0, 1.0, 1.0, 1.0};
  std::array<bool, kNumChannels> present{};
  std::array<bool, kNumChannels> degenerate{};
};

}  // namespace gphyt
