#pragma once

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cineseg/metrics.hpp"
#include "cineseg/volume.hpp"

namespace cineseg {

/// Slice-summation volume: Area_z (labelled pixels x pixel area) times slice
/// thickness, summed over z, in millilitres.
inline double structure_volume(const LabelVolume& lab, int class_id, double sx, double sy,
                               double thickness) {
  require_data(class_id >= 0 && class_id < kNumSegClasses, "structure_volume: bad class id");
  size_t count = 0;
  for (uint8_t v : lab.labels) count += v == class_id ? 1 : 0;
  return static_cast<double>(count) * sx * sy * thickness / 1000.0;
}

inline double ejection_fraction(double edv_ml, double esv_ml) {
  if (edv_ml <= 0.0) throw NumericError("ejection fraction undefined: EDV <= 0");
  return (edv_ml - esv_ml) / edv_ml * 100.0;
}

/// Myocardial volume to mass at 1.05 g/mL.
inline double lv_mass(double myo_volume_ml) {
  require_data(myo_volume_ml >= 0, "lv_mass: negative volume");
  return myo_volume_ml * 1.05;
}

enum class Provenance { Predicted, Reference };

struct ClinicalIndices {
  std::string subject_id;
  double lv_edv_ml = 0, lv_esv_ml = 0;
  double rv_edv_ml = 0, rv_esv_ml = 0;
  double lvef_pct = 0, rvef_pct = 0;
  bool lvef_defined = false, rvef_defined = false;
  double lv_mass_g = 0;
  Provenance provenance = Provenance::Predicted;

  bool lvef_abnormal() const { return lvef_defined && (lvef_pct < 0 || lvef_pct > 100); }
  bool rvef_abnormal() const { return rvef_defined && (rvef_pct < 0 || rvef_pct > 100); }
  bool lv_esv_exceeds_edv() const { return lv_esv_ml > lv_edv_ml; }
  bool rv_esv_exceeds_edv() const { return rv_esv_ml > rv_edv_ml; }
};

/// Indices from a paired ED/ES label volume set. Phases come from the tags on
/// the labels, never from volume extrema. LV mass uses the ED myocardium.
inline ClinicalIndices compute_indices(const LabelVolume& ed, const LabelVolume& es,
                                       Provenance prov = Provenance::Predicted) {
  require_data(ed.phase == Phase::ED && es.phase == Phase::ES,
               "compute_indices: phase tags do not match ED/ES order");
  ClinicalIndices ix;
  ix.subject_id = ed.subject_id;
  ix.provenance = prov;
  ix.lv_edv_ml = structure_volume(ed, kLeftVentricle, ed.spacing_x, ed.spacing_y,
                                  ed.slice_thickness);
  ix.lv_esv_ml = structure_volume(es, kLeftVentricle, es.spacing_x, es.spacing_y,
                                  es.slice_thickness);
  ix.rv_edv_ml = structure_volume(ed, kRightVentricle, ed.spacing_x, ed.spacing_y,
                                  ed.slice_thickness);
  ix.rv_esv_ml = structure_volume(es, kRightVentricle, es.spacing_x, es.spacing_y,
                                  es.slice_thickness);
  if (ix.lv_edv_ml > 0) {
    ix.lvef_pct = ejection_fraction(ix.lv_edv_ml, ix.lv_esv_ml);
    ix.lvef_defined = true;
  }
  if (ix.rv_edv_ml > 0) {
    ix.rvef_pct = ejection_fraction(ix.rv_edv_ml, ix.rv_esv_ml);
    ix.rvef_defined = true;
  }
  ix.lv_mass_g = lv_mass(
      structure_volume(ed, kMyocardium, ed.spacing_x, ed.spacing_y, ed.slice_thickness));
  return ix;
}

// ---------------------------------------------------------------------------
// Tolerance grading

enum class ToleranceStatus { Pass, Borderline, Fail };

inline const char* to_string(ToleranceStatus s) {
  switch (s) {
    case ToleranceStatus::Pass: return "Pass";
    case ToleranceStatus::Borderline: return "Borderline";
    case ToleranceStatus::Fail: return "Fail";
  }
  return "?";
}

/// Banded acceptance threshold: Pass strictly below `pass_below`, Borderline
/// up to `fail_above`, Fail beyond.
struct ToleranceBand {
  double pass_below = 0;
  double fail_above = 0;
};

/// Inter-observer tolerance bands for each clinical parameter.
inline std::map<std::string, ToleranceBand> default_tolerances() {
  return {
      {"LVEF", {5.0, 5.0}},    {"LVEDV", {10.0, 15.0}}, {"LVESV", {10.0, 15.0}},
      {"RVEF", {8.0, 8.0}},    {"RVEDV", {12.0, 15.0}}, {"RVESV", {12.0, 15.0}},
      {"LVMass", {10.0, 50.0}},
  };
}

struct ToleranceRow {
  std::string parameter;
  double mae = 0;
  double std_dev = 0;  // sample std of the absolute errors
  ToleranceBand band;
  ToleranceStatus status = ToleranceStatus::Pass;
  int n_pairs = 0;
};

struct ToleranceReport {
  std::vector<ToleranceRow> rows;

  const ToleranceRow* find(const std::string& name) const {
    for (const auto& r : rows)
      if (r.parameter == name) return &r;
    return nullptr;
  }
};

/// MAE of predicted vs reference indices per parameter, graded against the
/// tolerance bands. Inputs are paired by subject id; unpaired subjects are an
/// error. EF rows skip pairs where either side is undefined.
inline ToleranceReport mae_report(const std::vector<ClinicalIndices>& pred,
                                  const std::vector<ClinicalIndices>& ref,
                                  const std::map<std::string, ToleranceBand>& thresholds =
                                      default_tolerances()) {
  std::map<std::string, const ClinicalIndices*> by_id;
  for (const auto& r : ref) by_id[r.subject_id] = &r;
  require_data(by_id.size() == ref.size(), "mae_report: duplicate reference subjects");

  struct Acc {
    std::vector<double> abs_err;
  };
  std::map<std::string, Acc> acc;
  for (const auto& p : pred) {
    auto it = by_id.find(p.subject_id);
    require_data(it != by_id.end(), "mae_report: unpaired subject " + p.subject_id);
    const ClinicalIndices& r = *it->second;
    auto push = [&](const char* name, double a, double b, bool ok = true) {
      if (ok) acc[name].abs_err.push_back(std::fabs(a - b));
    };
    push("LVEDV", p.lv_edv_ml, r.lv_edv_ml);
    push("LVESV", p.lv_esv_ml, r.lv_esv_ml);
    push("RVEDV", p.rv_edv_ml, r.rv_edv_ml);
    push("RVESV", p.rv_esv_ml, r.rv_esv_ml);
    push("LVMass", p.lv_mass_g, r.lv_mass_g);
    push("LVEF", p.lvef_pct, r.lvef_pct, p.lvef_defined && r.lvef_defined);
    push("RVEF", p.rvef_pct, r.rvef_pct, p.rvef_defined && r.rvef_defined);
  }

  ToleranceReport report;
  for (const auto& [name, band] : thresholds) {
    ToleranceRow row;
    row.parameter = name;
    row.band = band;
    auto it = acc.find(name);
    if (it != acc.end() && !it->second.abs_err.empty()) {
      const auto& es = it->second.abs_err;
      row.n_pairs = static_cast<int>(es.size());
      double mean = 0;
      for (double e : es) mean += e;
      mean /= es.size();
      row.mae = mean;
      double var = 0;
      for (double e : es) var += (e - mean) * (e - mean);
      row.std_dev = es.size() > 1 ? std::sqrt(var / (es.size() - 1)) : 0.0;
    }
    if (row.mae < band.pass_below) row.status = ToleranceStatus::Pass;
    else if (row.mae <= band.fail_above) row.status = ToleranceStatus::Borderline;
    else row.status = ToleranceStatus::Fail;
    report.rows.push_back(row);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Structured report

/// NOR cohort reference statistics (mean, sd) used for the +-2 SD normal
/// bands quoted in reports.
struct NormalBands {
  double lv_edv_mean = 130.1, lv_edv_sd = 26.4;
  double rv_edv_mean = 153.2, rv_edv_sd = 36.6;
  double myo_vol_mean = 97.6, myo_vol_sd = 24.6;
  double lvef_mean = 60.3, lvef_sd = 5.1;

  std::pair<double, double> lv_edv_band() const {
    return {lv_edv_mean - 2 * lv_edv_sd, lv_edv_mean + 2 * lv_edv_sd};
  }
  std::pair<double, double> rv_edv_band() const {
    return {rv_edv_mean - 2 * rv_edv_sd, rv_edv_mean + 2 * rv_edv_sd};
  }
  std::pair<double, double> lvef_band() const {
    return {lvef_mean - 2 * lvef_sd, lvef_mean + 2 * lvef_sd};
  }
  std::pair<double, double> lv_mass_band() const {
    return {(myo_vol_mean - 2 * myo_vol_sd) * 1.05, (myo_vol_mean + 2 * myo_vol_sd) * 1.05};
  }
};

namespace detail {
inline std::string band_note(double value, std::pair<double, double> band, const char* unit) {
  const char* rel = value < band.first ? "below" : (value > band.second ? "above" : "within");
  return strprintf("(%s normal range [%.1f, %.1f] %s)", rel, band.first, band.second, unit);
}
}  // namespace detail

struct ClinicalReport {
  std::string text;
  nlohmann::json json;
};

/// Deterministic templated report: identical inputs give identical bytes.
inline ClinicalReport generate_report(const ClinicalIndices& ix,
                                      const std::vector<double>& disease_probs,
                                      const std::string& subject_id,
                                      const NormalBands& bands = NormalBands{}) {
  require_data(disease_probs.size() == kNumDiagnoses,
               "generate_report: disease probability vector must have 5 entries");
  int top = argmax_class(disease_probs);
  std::string text;
  text += "==== Cardiac function report ====\n";
  text += "Subject: " + subject_id + "\n\n";
  text += "Left ventricle:\n";
  text += strprintf("  EDV: %.1f ml %s\n", ix.lv_edv_ml,
                    detail::band_note(ix.lv_edv_ml, bands.lv_edv_band(), "ml").c_str());
  text += strprintf("  ESV: %.1f ml\n", ix.lv_esv_ml);
  if (ix.lvef_defined)
    text += strprintf("  EF:  %.1f %% %s\n", ix.lvef_pct,
                      detail::band_note(ix.lvef_pct, bands.lvef_band(), "%").c_str());
  else
    text += "  EF:  undefined (EDV is zero)\n";
  text += "Right ventricle:\n";
  text += strprintf("  EDV: %.1f ml %s\n", ix.rv_edv_ml,
                    detail::band_note(ix.rv_edv_ml, bands.rv_edv_band(), "ml").c_str());
  text += strprintf("  ESV: %.1f ml\n", ix.rv_esv_ml);
  if (ix.rvef_defined)
    text += strprintf("  EF:  %.1f %% (no reference band)\n", ix.rvef_pct);
  else
    text += "  EF:  undefined (EDV is zero)\n";
  text += strprintf("LV mass (ED): %.1f g %s\n", ix.lv_mass_g,
                    detail::band_note(ix.lv_mass_g, bands.lv_mass_band(), "g").c_str());
  text += "\n";
  text += strprintf("Diagnosis: %s (%.0f%%)\n",
                    diagnosis_long_name(static_cast<Diagnosis>(top)), disease_probs[top] * 100.0);
  text += "Class probabilities:";
  for (int c = 0; c < kNumDiagnoses; ++c)
    text += strprintf(" %s %.0f%%%s", to_string(static_cast<Diagnosis>(c)),
                      disease_probs[c] * 100.0, c + 1 < kNumDiagnoses ? "," : "\n");

  std::vector<std::string> flags;
  if (ix.lvef_defined && ix.lvef_pct < 0) flags.push_back("negative ejection fraction (LV)");
  if (ix.rvef_defined && ix.rvef_pct < 0) flags.push_back("negative ejection fraction (RV)");
  if (ix.lv_esv_exceeds_edv()) flags.push_back("LV ESV exceeds EDV; check phase assignment");
  if (ix.rv_esv_exceeds_edv()) flags.push_back("RV ESV exceeds EDV; check phase assignment");
  if (!flags.empty()) {
    text += "Flags:\n";
    for (const auto& f : flags) text += "  - " + f + "\n";
  }
  text += "\nReference bands: NOR cohort mean +/- 2 SD.\n";
  text += "Automated analysis; not a substitute for clinical judgement.\n";

  nlohmann::json j;
  j["subject"] = subject_id;
  j["lv"] = {{"edv_ml", ix.lv_edv_ml},
             {"esv_ml", ix.lv_esv_ml},
             {"ef_pct", ix.lvef_defined ? nlohmann::json(ix.lvef_pct) : nlohmann::json()}};
  j["rv"] = {{"edv_ml", ix.rv_edv_ml},
             {"esv_ml", ix.rv_esv_ml},
             {"ef_pct", ix.rvef_defined ? nlohmann::json(ix.rvef_pct) : nlohmann::json()}};
  j["lv_mass_g"] = ix.lv_mass_g;
  j["diagnosis"] = {{"label", to_string(static_cast<Diagnosis>(top))},
                    {"name", diagnosis_long_name(static_cast<Diagnosis>(top))},
                    {"probability", disease_probs[top]}};
  nlohmann::json probs_json;
  for (int c = 0; c < kNumDiagnoses; ++c)
    probs_json[to_string(static_cast<Diagnosis>(c))] = disease_probs[c];
  j["probabilities"] = probs_json;
  j["flags"] = flags;
  return {text, j};
}

}  // namespace cineseg
