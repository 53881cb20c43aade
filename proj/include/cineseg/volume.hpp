#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cineseg/common.hpp"

namespace cineseg {

enum class Phase { ED, ES };

inline const char* to_string(Phase p) { return p == Phase::ED ? "ED" : "ES"; }
inline Phase phase_from_string(const std::string& s) {
  if (s == "ED") return Phase::ED;
  if (s == "ES") return Phase::ES;
  throw DataError("unknown phase tag: " + s);
}

enum class Diagnosis { NOR = 0, DCM = 1, HCM = 2, MINF = 3, RV = 4 };
constexpr int kNumDiagnoses = 5;

inline const char* to_string(Diagnosis d) {
  switch (d) {
    case Diagnosis::NOR: return "NOR";
    case Diagnosis::DCM: return "DCM";
    case Diagnosis::HCM: return "HCM";
    case Diagnosis::MINF: return "MINF";
    case Diagnosis::RV: return "RV";
  }
  return "?";
}
inline Diagnosis diagnosis_from_string(const std::string& s) {
  for (int i = 0; i < kNumDiagnoses; ++i)
    if (s == to_string(static_cast<Diagnosis>(i))) return static_cast<Diagnosis>(i);
  throw DataError("unknown diagnosis label: " + s);
}

inline const char* diagnosis_long_name(Diagnosis d) {
  switch (d) {
    case Diagnosis::NOR: return "Normal";
    case Diagnosis::DCM: return "Dilated cardiomyopathy";
    case Diagnosis::HCM: return "Hypertrophic cardiomyopathy";
    case Diagnosis::MINF: return "Myocardial infarction";
    case Diagnosis::RV: return "Right ventricular abnormality";
  }
  return "?";
}

// Fixed label coding shared by every dataset this library touches. Adapters
// for external archives must remap onto this table.
enum SegClass : uint8_t {
  kBackground = 0,
  kLeftVentricle = 1,
  kMyocardium = 2,
  kRightVentricle = 3,
};
constexpr int kNumSegClasses = 4;
constexpr std::array<const char*, kNumSegClasses> kSegClassNames = {"BG", "LV", "Myo", "RV"};
constexpr std::array<SegClass, 3> kForegroundClasses = {kLeftVentricle, kMyocardium,
                                                        kRightVentricle};

/// One short-axis scalar volume. Memory order is x-fastest, then y, then z,
/// exactly matching the on-disk payload.
struct CineVolume {
  int height = 0;  // H (y)
  int width = 0;   // W (x)
  int depth = 0;   // D (z)
  double spacing_x = 1.0;
  double spacing_y = 1.0;
  double slice_thickness = 1.0;
  Phase phase = Phase::ED;
  std::string subject_id;
  std::vector<float> voxels;

  float& at(int x, int y, int z) {
    return voxels[static_cast<size_t>(x) + static_cast<size_t>(width) * (y + static_cast<size_t>(height) * z)];
  }
  float at(int x, int y, int z) const {
    return voxels[static_cast<size_t>(x) + static_cast<size_t>(width) * (y + static_cast<size_t>(height) * z)];
  }
  size_t numel() const {
    return static_cast<size_t>(width) * static_cast<size_t>(height) * static_cast<size_t>(depth);
  }

  void validate() const {
    require_data(height >= 1 && width >= 1 && depth >= 1, "volume dims must be >= 1");
    require_data(spacing_x > 0 && spacing_y > 0 && slice_thickness > 0,
                 "volume spacing must be positive");
    require_data(voxels.size() == numel(), "voxel buffer size does not match dims");
    for (float v : voxels)
      require_data(std::isfinite(v), "volume contains non-finite voxel values");
  }
};

/// Integer class-id volume paired with a CineVolume of identical shape.
struct LabelVolume {
  int height = 0;
  int width = 0;
  int depth = 0;
  double spacing_x = 1.0;
  double spacing_y = 1.0;
  double slice_thickness = 1.0;
  Phase phase = Phase::ED;
  std::string subject_id;
  std::vector<uint8_t> labels;

  uint8_t& at(int x, int y, int z) {
    return labels[static_cast<size_t>(x) + static_cast<size_t>(width) * (y + static_cast<size_t>(height) * z)];
  }
  uint8_t at(int x, int y, int z) const {
    return labels[static_cast<size_t>(x) + static_cast<size_t>(width) * (y + static_cast<size_t>(height) * z)];
  }
  size_t numel() const {
    return static_cast<size_t>(width) * static_cast<size_t>(height) * static_cast<size_t>(depth);
  }

  void validate() const {
    require_data(height >= 1 && width >= 1 && depth >= 1, "label dims must be >= 1");
    require_data(labels.size() == numel(), "label buffer size does not match dims");
    for (uint8_t v : labels)
      require_data(v < kNumSegClasses, "label volume holds an out-of-range class id");
  }
};

namespace detail {

inline nlohmann::json sidecar_common(int H, int W, int D, double sx, double sy, double t,
                                     Phase phase, const std::string& subject,
                                     const std::string& kind) {
  nlohmann::json j;
  j["shape"] = {H, W, D};
  j["spacing"] = {sx, sy};
  j["thickness"] = t;
  j["phase"] = to_string(phase);
  j["kind"] = kind;
  j["subject"] = subject;
  return j;
}

inline nlohmann::json read_sidecar(const std::string& path, const std::string& expect_kind) {
  std::string side = path + ".json";
  std::ifstream in(side);
  require_data(in.good(), "missing sidecar: " + side);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw DataError("unparseable sidecar " + side + ": " + e.what());
  }
  for (const char* key : {"shape", "spacing", "thickness", "phase", "kind", "subject"})
    require_data(j.contains(key), std::string("sidecar missing field '") + key + "': " + side);
  require_data(j["kind"].get<std::string>() == expect_kind,
               "sidecar kind mismatch (expected " + expect_kind + "): " + side);
  return j;
}

template <typename T>
void write_payload(const std::string& path, const std::vector<T>& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require_data(out.good(), "cannot open for write: " + path);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(T)));
  require_data(out.good(), "write failed: " + path);
}

template <typename T>
void read_payload(const std::string& path, std::vector<T>& buf, size_t count) {
  std::ifstream in(path, std::ios::binary);
  require_data(in.good(), "cannot open volume payload: " + path);
  in.seekg(0, std::ios::end);
  auto bytes = static_cast<size_t>(in.tellg());
  require_data(bytes == count * sizeof(T),
               strprintf("payload byte count mismatch in %s: have %zu, sidecar implies %zu",
                         path.c_str(), bytes, count * sizeof(T)));
  in.seekg(0);
  buf.resize(count);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  require_data(in.good(), "short read: " + path);
}

}  // namespace detail

/// Writes `<path>` (raw little-endian f32, x-fastest) plus `<path>.json`.
inline void save_volume(const CineVolume& v, const std::string& path) {
  v.validate();
  detail::write_payload(path, v.voxels);
  nlohmann::json j = detail::sidecar_common(v.height, v.width, v.depth, v.spacing_x, v.spacing_y,
                                            v.slice_thickness, v.phase, v.subject_id, "intensity");
  std::ofstream side(path + ".json", std::ios::trunc);
  require_data(side.good(), "cannot open sidecar for write: " + path + ".json");
  side << j.dump(2) << "\n";
}

inline CineVolume load_volume(const std::string& path) {
  nlohmann::json j = detail::read_sidecar(path, "intensity");
  CineVolume v;
  auto shape = j["shape"];
  require_data(shape.is_array() && shape.size() == 3, "sidecar shape must be [H,W,D]: " + path);
  v.height = shape[0].get<int>();
  v.width = shape[1].get<int>();
  v.depth = shape[2].get<int>();
  v.spacing_x = j["spacing"][0].get<double>();
  v.spacing_y = j["spacing"][1].get<double>();
  v.slice_thickness = j["thickness"].get<double>();
  v.phase = phase_from_string(j["phase"].get<std::string>());
  v.subject_id = j["subject"].get<std::string>();
  require_data(v.height >= 1 && v.width >= 1 && v.depth >= 1, "non-positive dims in " + path);
  detail::read_payload(path, v.voxels, v.numel());
  v.validate();
  return v;
}

inline void save_label_volume(const LabelVolume& m, const std::string& path) {
  m.validate();
  detail::write_payload(path, m.labels);
  nlohmann::json j = detail::sidecar_common(m.height, m.width, m.depth, m.spacing_x, m.spacing_y,
                                            m.slice_thickness, m.phase, m.subject_id, "label");
  std::ofstream side(path + ".json", std::ios::trunc);
  require_data(side.good(), "cannot open sidecar for write: " + path + ".json");
  side << j.dump(2) << "\n";
}

inline LabelVolume load_label_volume(const std::string& path) {
  nlohmann::json j = detail::read_sidecar(path, "label");
  LabelVolume m;
  auto shape = j["shape"];
  require_data(shape.is_array() && shape.size() == 3, "sidecar shape must be [H,W,D]: " + path);
  m.height = shape[0].get<int>();
  m.width = shape[1].get<int>();
  m.depth = shape[2].get<int>();
  m.spacing_x = j["spacing"][0].get<double>();
  m.spacing_y = j["spacing"][1].get<double>();
  m.slice_thickness = j["thickness"].get<double>();
  m.phase = phase_from_string(j["phase"].get<std::string>());
  m.subject_id = j["subject"].get<std::string>();
  require_data(m.height >= 1 && m.width >= 1 && m.depth >= 1, "non-positive dims in " + path);
  detail::read_payload(path, m.labels, m.numel());
  m.validate();
  return m;
}

}  // namespace cineseg
