#pragma once

#include "gphyt/fields.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace gphyt {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Trajectory files.
//
// Layout: one JSON header line terminated by '\n', then T*H*W*C little-endian
// IEEE-754 32-bit reals in (t, h, w, c) row-major order. The layout is the
// on-disk contract and is bit-exact across platforms.
// ---------------------------------------------------------------------------

inline constexpr const char* kTrajectoryMagic = "GPHYT1";
inline constexpr const char* kCheckpointMagic = "GPHYC1";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void write_f32_le(std::ostream& os, const float* data, size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * 4));
  } else {
    for (size_t i = 0; i < count; ++i) {
      const uint32_t u = std::bit_cast<uint32_t>(data[i]);
      const char bytes[4] = {char(u & 0xff), char((u >> 8) & 0xff), char((u >> 16) & 0xff),
                             char((u >> 24) & 0xff)};
      os.write(bytes, 4);
    }
  }
}

inline bool read_f32_le(std::istream& is, float* data, size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * 4));
    return static_cast<size_t>(is.gcount()) == count * 4;
  } else {
    for (size_t i = 0; i < count; ++i) {
      unsigned char bytes[4];
      is.read(reinterpret_cast<char*>(bytes), 4);
      if (is.gcount() != 4) return false;
      const uint32_t u = uint32_t(bytes[0]) | (uint32_t(bytes[1]) << 8) |
                         (uint32_t(bytes[2]) << 16) | (uint32_t(bytes[3]) << 24);
      data[i] = std::bit_cast<float>(u);
    }
    return true;
  }
}

inline json mask_to_json(const ChannelSet& m) {
  json a = json::array();
  for (bool b : m.present) a.push_back(b);
  return a;
}

inline ChannelSet mask_from_json(const json& a) {
  ChannelSet m;
  if (!a.is_array() || a.size() != kNumChannels) throw DataError("bad presence_mask");
  for (int c = 0; c < kNumChannels; ++c) m.present[static_cast<size_t>(c)] = a[static_cast<size_t>(c)].get<bool>();
  return m;
}

}  // namespace detail

inline void write_trajectory(const Trajectoryf& traj, const std::filesystem::path& path) {
  if (traj.frames.empty()) throw DataError("write_trajectory: empty trajectory");
  const int t_count = traj.steps();
  const int h = traj.frames[0].height();
  const int w = traj.frames[0].width();

  json header;
  header["magic"] = kTrajectoryMagic;
  header["dataset"] = traj.meta.dataset;
  header["T"] = t_count;
  header["H"] = h;
  header["W"] = w;
  header["C"] = kNumChannels;
  header["dt_phys"] = static_cast<double>(traj.dt);
  header["dx_phys"] = static_cast<double>(traj.frames[0].dx);
  header["dy_phys"] = static_cast<double>(traj.frames[0].dy);
  header["boundary"] = boundary_name(traj.meta.boundary);
  header["presence_mask"] = detail::mask_to_json(traj.meta.channels);
  header["seed"] = traj.meta.seed;

  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  os << header.dump() << '\n';

  std::vector<float> payload(static_cast<size_t>(t_count) * h * w * kNumChannels);
  size_t k = 0;
  for (int t = 0; t < t_count; ++t) {
    const auto& frame = traj.frames[static_cast<size_t>(t)];
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        for (int c = 0; c < kNumChannels; ++c) payload[k++] = frame.data[static_cast<size_t>(c)](i, j);
      }
    }
  }
  detail::write_f32_le(os, payload.data(), payload.size());
  if (!os) throw DataError("write failed: " + path.string());
}

inline Trajectoryf read_trajectory(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open trajectory: " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw DataError("missing header: " + path.string());

  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw DataError("unparseable header in " + path.string() + ": " + e.what());
  }
  if (header.value("magic", "") != kTrajectoryMagic) {
    throw DataError("bad magic in " + path.string());
  }
  const int t_count = header.at("T").get<int>();
  const int h = header.at("H").get<int>();
  const int w = header.at("W").get<int>();
  const int c_count = header.at("C").get<int>();
  if (t_count <= 0 || h <= 0 || w <= 0 || c_count != kNumChannels) {
    throw DataError("dimension mismatch in " + path.string());
  }

  Trajectoryf traj;
  traj.dt = static_cast<float>(header.at("dt_phys").get<double>());
  traj.meta.dataset = header.value("dataset", "");
  traj.meta.boundary = parse_boundary(header.at("boundary").get<std::string>());
  traj.meta.seed = header.at("seed").get<uint64_t>();
  traj.meta.channels = detail::mask_from_json(header.at("presence_mask"));
  const float dx = static_cast<float>(header.at("dx_phys").get<double>());
  const float dy = static_cast<float>(header.at("dy_phys").get<double>());

  const size_t total = static_cast<size_t>(t_count) * h * w * kNumChannels;
  std::vector<float> payload(total);
  if (!detail::read_f32_le(is, payload.data(), total)) {
    throw DataError("truncated payload in " + path.string());
  }
  // Anything left over means the header dims do not match the payload.
  char probe;
  if (is.read(&probe, 1); is.gcount() != 0) {
    throw DataError("dimension mismatch in " + path.string() + " (payload longer than header dims)");
  }

  traj.frames.assign(static_cast<size_t>(t_count), FieldFramef(h, w, dx, dy));
  size_t k = 0;
  for (int t = 0; t < t_count; ++t) {
    auto& frame = traj.frames[static_cast<size_t>(t)];
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        for (int c = 0; c < kNumChannels; ++c) frame.data[static_cast<size_t>(c)](i, j) = payload[k++];
      }
    }
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Checkpoints: a JSON header line describing named float arrays, then the
// arrays' raw data (f32 little-endian, column-major) in header order.
// The array map is ordered by name, so bytes are deterministic.
// ---------------------------------------------------------------------------

using ArrayMap = std::map<std::string, Matf>;

inline void write_checkpoint(const std::filesystem::path& path, const json& extra,
                             const ArrayMap& arrays) {
  json header;
  header["magic"] = kCheckpointMagic;
  header["version"] = kCheckpointVersion;
  json list = json::array();
  for (const auto& [name, mat] : arrays) {
    list.push_back({{"name", name}, {"rows", mat.rows()}, {"cols", mat.cols()}});
  }
  header["arrays"] = list;
  if (!extra.is_null()) header["meta"] = extra;

  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  os << header.dump() << '\n';
  for (const auto& [name, mat] : arrays) {
    detail::write_f32_le(os, mat.data(), static_cast<size_t>(mat.size()));
  }
  if (!os) throw DataError("write failed: " + path.string());
}

inline ArrayMap read_checkpoint(const std::filesystem::path& path, json* meta_out = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw DataError("missing header: " + path.string());
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw DataError("unparseable checkpoint header: " + std::string(e.what()));
  }
  if (header.value("magic", "") != kCheckpointMagic) throw DataError("bad magic in " + path.string());
  const int version = header.value("version", -1);
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint version mismatch in " + path.string() + ": got " +
                    std::to_string(version) + ", want " + std::to_string(kCheckpointVersion));
  }
  ArrayMap arrays;
  for (const auto& entry : header.at("arrays")) {
    const std::string name = entry.at("name").get<std::string>();
    const Eigen::Index rows = entry.at("rows").get<Eigen::Index>();
    const Eigen::Index cols = entry.at("cols").get<Eigen::Index>();
    Matf m(rows, cols);
    if (!detail::read_f32_le(is, m.data(), static_cast<size_t>(m.size()))) {
      throw DataError("truncated checkpoint payload in " + path.string() + " at array " + name);
    }
    arrays.emplace(name, std::move(m));
  }
  if (meta_out) *meta_out = header.contains("meta") ? header["meta"] : json();
  return arrays;
}

// ---------------------------------------------------------------------------
// Corpus manifest.
// ---------------------------------------------------------------------------

struct TrajectoryEntry {
  std::string file;   // relative to the manifest directory
  int index = 0;
  std::string split;  // train | val | test
  uint64_t seed = 0;
};

struct DatasetInfo {
  std::string system;
  Boundary boundary = Boundary::periodic;
  bool holdout = false;
  int height = 0;
  int width = 0;
  int timesteps = 0;
  float dt = 1.0f;
  float dx = 1.0f;
  float dy = 1.0f;
  ChannelSet channels;
  NormStats stats;
  std::vector<TrajectoryEntry> trajectories;

  std::vector<const TrajectoryEntry*> split_entries(const std::string& split) const {
    std::vector<const TrajectoryEntry*> out;
    for (const auto& t : trajectories)
      if (t.split == split) out.push_back(&t);
    return out;
  }
};

struct Manifest {
  std::map<std::string, DatasetInfo> datasets;
  std::filesystem::path base_dir;  // directory the manifest was loaded from

  void save(const std::filesystem::path& path) const;
  static Manifest load(const std::filesystem::path& path);
  std::vector<std::string> validate() const;
};

inline void Manifest::save(const std::filesystem::path& path) const {
  json root;
  root["magic"] = "GPHYT-MANIFEST";
  root["version"] = 1;
  json ds = json::object();
  for (const auto& [name, info] : datasets) {
    json d;
    d["system"] = info.system;
    d["boundary"] = boundary_name(info.boundary);
    d["holdout"] = info.holdout;
    d["height"] = info.height;
    d["width"] = info.width;
    d["timesteps"] = info.timesteps;
    d["dt_phys"] = info.dt;
    d["dx_phys"] = info.dx;
    d["dy_phys"] = info.dy;
    d["presence_mask"] = detail::mask_to_json(info.channels);
    json stats;
    stats["mean"] = info.stats.mean;
    stats["std"] = info.stats.stddev;
    stats["present"] = info.stats.present;
    stats["degenerate"] = info.stats.degenerate;
    d["norm_stats"] = stats;
    json trajs = json::array();
    for (const auto& t : info.trajectories) {
      trajs.push_back({{"file", t.file}, {"index", t.index}, {"split", t.split}, {"seed", t.seed}});
    }
    d["trajectories"] = trajs;
    ds[name] = d;
  }
  root["datasets"] = ds;
  std::ofstream os(path);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  os << root.dump(2) << '\n';
}

inline Manifest Manifest::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest: " + path.string());
  json root;
  try {
    is >> root;
  } catch (const json::exception& e) {
    throw DataError("unparseable manifest " + path.string() + ": " + e.what());
  }
  if (root.value("magic", "") != "GPHYT-MANIFEST") throw DataError("bad manifest magic in " + path.string());

  Manifest m;
  m.base_dir = path.parent_path();
  for (const auto& [name, d] : root.at("datasets").items()) {
    DatasetInfo info;
    info.system = d.at("system").get<std::string>();
    info.boundary = parse_boundary(d.at("boundary").get<std::string>());
    info.holdout = d.value("holdout", false);
    info.height = d.at("height").get<int>();
    info.width = d.at("width").get<int>();
    info.timesteps = d.at("timesteps").get<int>();
    info.dt = d.at("dt_phys").get<float>();
    info.dx = d.at("dx_phys").get<float>();
    info.dy = d.at("dy_phys").get<float>();
    info.channels = detail::mask_from_json(d.at("presence_mask"));
    const json& stats = d.at("norm_stats");
    info.stats.mean = stats.at("mean").get<std::array<double, kNumChannels>>();
    info.stats.stddev = stats.at("std").get<std::array<double, kNumChannels>>();
    info.stats.present = stats.at("present").get<std::array<bool, kNumChannels>>();
    info.stats.degenerate = stats.at("degenerate").get<std::array<bool, kNumChannels>>();
    for (const auto& t : d.at("trajectories")) {
      TrajectoryEntry e;
      e.file = t.at("file").get<std::string>();
      e.index = t.at("index").get<int>();
      e.split = t.at("split").get<std::string>();
      e.seed = t.at("seed").get<uint64_t>();
      info.trajectories.push_back(e);
    }
    m.datasets.emplace(name, std::move(info));
  }
  return m;
}

inline std::vector<std::string> Manifest::validate() const {
  std::vector<std::string> problems;
  for (const auto& [name, info] : datasets) {
    for (const auto& t : info.trajectories) {
      if (t.split != "train" && t.split != "val" && t.split != "test") {
        problems.push_back(name + "/" + t.file + ": unknown split '" + t.split + "'");
      }
      if (!std::filesystem::exists(base_dir / t.file)) {
        problems.push_back(name + "/" + t.file + ": file missing");
      }
    }
  }
  return problems;
}

/// FNV-1a over a whole file; used for reproducibility checks.
inline uint64_t hash_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open for hashing: " + path.string());
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[65536];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    h = fnv1a(buf, static_cast<size_t>(is.gcount()), h);
  }
  return h;
}

}  // namespace gphyt
