#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cineseg/volume.hpp"

namespace cineseg {

enum class Split { Train = 0, Val = 1, Test = 2 };
constexpr int kNumSplits = 3;

inline const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}
inline Split split_from_string(const std::string& s) {
  for (int i = 0; i < kNumSplits; ++i)
    if (s == to_string(static_cast<Split>(i))) return static_cast<Split>(i);
  throw DataError("unknown split tag: " + s);
}

/// Paired ED/ES volumes with their labels; the unit of training/evaluation.
struct SubjectRecord {
  std::string subject_id;
  CineVolume ed_image;
  LabelVolume ed_label;
  CineVolume es_image;
  LabelVolume es_label;
  Diagnosis diagnosis = Diagnosis::NOR;
  Split split = Split::Train;

  void validate() const {
    ed_image.validate();
    es_image.validate();
    ed_label.validate();
    es_label.validate();
    require_data(ed_image.height == es_image.height && ed_image.width == es_image.width,
                 subject_id + ": ED and ES in-plane dimensions differ");
    require_data(ed_image.spacing_x == es_image.spacing_x &&
                     ed_image.spacing_y == es_image.spacing_y,
                 subject_id + ": ED and ES spacing differ");
    require_data(ed_label.height == ed_image.height && ed_label.width == ed_image.width &&
                     ed_label.depth == ed_image.depth,
                 subject_id + ": ED label shape does not match its volume");
    require_data(es_label.height == es_image.height && es_label.width == es_image.width &&
                     es_label.depth == es_image.depth,
                 subject_id + ": ES label shape does not match its volume");
  }
};

/// One manifest row: relative paths plus diagnosis and split assignment.
struct ManifestEntry {
  std::string subject_id;
  std::string ed_image, ed_label, es_image, es_label;  // paths relative to the manifest
  Diagnosis diagnosis = Diagnosis::NOR;
  Split split = Split::Train;
};

struct Manifest {
  std::vector<ManifestEntry> records;
  std::array<int, kNumSplits> split_counts = {0, 0, 0};
  uint64_t seed = 0;

  std::vector<const ManifestEntry*> split_entries(Split s) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& r : records)
      if (r.split == s) out.push_back(&r);
    return out;
  }
};

/// Deterministic stratified split. Exactly counts[s] subjects land in split s;
/// per-diagnosis counts stay within one of perfect proportional balance. When
/// the counts sum to fewer subjects than provided, the leftover subjects are
/// dropped from the manifest (pre-condition keeps the sum <= the total).
inline Manifest split_manifest(std::vector<ManifestEntry> records,
                               const std::array<int, kNumSplits>& counts, uint64_t seed) {
  int total_req = counts[0] + counts[1] + counts[2];
  require_config(counts[0] >= 0 && counts[1] >= 0 && counts[2] >= 0,
                 "split counts must be non-negative");
  require_config(total_req <= static_cast<int>(records.size()),
                 strprintf("split counts sum to %d but only %zu records exist", total_req,
                           records.size()));

  // Group indices per diagnosis, shuffled independently per class.
  std::map<int, std::vector<size_t>> by_class;
  for (size_t i = 0; i < records.size(); ++i)
    by_class[static_cast<int>(records[i].diagnosis)].push_back(i);
  for (auto& [cls, idx] : by_class) {
    Rng rng(mix_seed(seed, {0x5717ULL, static_cast<uint64_t>(cls)}));
    rng.shuffle(idx);
  }

  int total_have = static_cast<int>(records.size());
  // Largest-remainder apportionment of each split quota across classes.
  struct Cell {
    int cls;
    int split;
    double frac;
  };
  std::map<int, std::array<int, kNumSplits>> quota;
  for (auto& [cls, idx] : by_class) quota[cls] = {0, 0, 0};

  for (int s = 0; s < kNumSplits; ++s) {
    if (counts[s] == 0) continue;
    std::vector<Cell> cells;
    int assigned = 0;
    for (auto& [cls, idx] : by_class) {
      double ideal = static_cast<double>(counts[s]) * static_cast<double>(idx.size()) /
                     static_cast<double>(total_have);
      int base = static_cast<int>(std::floor(ideal));
      quota[cls][s] = base;
      assigned += base;
      cells.push_back({cls, s, ideal - base});
    }
    std::sort(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) {
      if (a.frac != b.frac) return a.frac > b.frac;
      return a.cls < b.cls;
    });
    for (const Cell& c : cells) {
      if (assigned >= counts[s]) break;
      quota[c.cls][s] += 1;
      ++assigned;
    }
    require_config(assigned == counts[s], "stratified apportionment failed");
  }

  // A class can be over-subscribed across the three splits when remainders
  // collide; shift the excess to the largest classes deterministically.
  for (auto& [cls, q] : quota) {
    int want = q[0] + q[1] + q[2];
    int have = static_cast<int>(by_class[cls].size());
    while (want > have) {
      // Steal back from the split with the largest quota in this class.
      int s = static_cast<int>(std::max_element(q.begin(), q.end()) - q.begin());
      q[s] -= 1;
      want -= 1;
      // Give the freed slot to the class with the most spare capacity.
      int best_cls = -1;
      int best_spare = 0;
      for (auto& [c2, q2] : quota) {
        int spare = static_cast<int>(by_class[c2].size()) - (q2[0] + q2[1] + q2[2]);
        if (spare > best_spare) {
          best_spare = spare;
          best_cls = c2;
        }
      }
      require_config(best_cls >= 0, "cannot satisfy split counts with class sizes");
      quota[best_cls][s] += 1;
      if (best_cls == cls) want += 1;
    }
  }

  Manifest out;
  out.seed = seed;
  out.split_counts = counts;
  for (auto& [cls, idx] : by_class) {
    size_t cursor = 0;
    for (int s = 0; s < kNumSplits; ++s) {
      for (int k = 0; k < quota[cls][s]; ++k) {
        ManifestEntry e = records[idx[cursor++]];
        e.split = static_cast<Split>(s);
        out.records.push_back(e);
      }
    }
  }
  std::sort(out.records.begin(), out.records.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) {
              return a.subject_id < b.subject_id;
            });
  return out;
}

inline void save_manifest(const Manifest& m, const std::string& path) {
  nlohmann::json j;
  j["seed"] = m.seed;
  j["split_counts"] = {m.split_counts[0], m.split_counts[1], m.split_counts[2]};
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : m.records) {
    nlohmann::json e;
    e["subject"] = r.subject_id;
    e["ed_image"] = r.ed_image;
    e["ed_label"] = r.ed_label;
    e["es_image"] = r.es_image;
    e["es_label"] = r.es_label;
    e["diagnosis"] = to_string(r.diagnosis);
    e["split"] = to_string(r.split);
    recs.push_back(e);
  }
  j["records"] = recs;
  std::ofstream out(path, std::ios::trunc);
  require_data(out.good(), "cannot write manifest: " + path);
  out << j.dump(2) << "\n";
}

inline Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  require_data(in.good(), "cannot open manifest: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw DataError(std::string("unparseable manifest: ") + e.what());
  }
  Manifest m;
  m.seed = j.value("seed", 0ULL);
  if (j.contains("split_counts"))
    for (int s = 0; s < kNumSplits; ++s) m.split_counts[s] = j["split_counts"][s].get<int>();
  require_data(j.contains("records"), "manifest missing 'records': " + path);
  for (const auto& e : j["records"]) {
    ManifestEntry r;
    r.subject_id = e.at("subject").get<std::string>();
    r.ed_image = e.at("ed_image").get<std::string>();
    r.ed_label = e.at("ed_label").get<std::string>();
    r.es_image = e.at("es_image").get<std::string>();
    r.es_label = e.at("es_label").get<std::string>();
    r.diagnosis = diagnosis_from_string(e.at("diagnosis").get<std::string>());
    r.split = split_from_string(e.at("split").get<std::string>());
    m.records.push_back(r);
  }
  return m;
}

/// Loads the four volumes behind a manifest entry. `root` is the manifest's
/// directory.
inline SubjectRecord load_subject(const ManifestEntry& e, const std::string& root) {
  namespace fs = std::filesystem;
  auto resolve = [&](const std::string& rel) { return (fs::path(root) / rel).string(); };
  SubjectRecord rec;
  rec.subject_id = e.subject_id;
  rec.diagnosis = e.diagnosis;
  rec.split = e.split;
  rec.ed_image = load_volume(resolve(e.ed_image));
  rec.ed_label = load_label_volume(resolve(e.ed_label));
  rec.es_image = load_volume(resolve(e.es_image));
  rec.es_label = load_label_volume(resolve(e.es_label));
  rec.validate();
  return rec;
}

}  // namespace cineseg
