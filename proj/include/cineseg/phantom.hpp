#pragma once

#include <array>
#include <cmath>
#include <string>

#include "cineseg/dataset.hpp"
#include "cineseg/volume.hpp"

namespace cineseg {

/// Closed-form intersection area of two circles (lens), radii r1/r2, centre
/// distance d. Handles the disjoint and contained cases.
inline double circle_intersection_area(double d, double r1, double r2) {
  if (d >= r1 + r2) return 0.0;
  double rmin = std::min(r1, r2);
  if (d <= std::fabs(r1 - r2)) return M_PI * rmin * rmin;
  double a1 = std::acos((d * d + r1 * r1 - r2 * r2) / (2.0 * d * r1));
  double a2 = std::acos((d * d + r2 * r2 - r1 * r1) / (2.0 * d * r2));
  double tri = 0.5 * std::sqrt((-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2));
  return r1 * r1 * a1 + r2 * r2 * a2 - tri;
}

/// Per-phase concentric geometry, millimetres. The LV cavity is a filled
/// disk, the myocardium the annulus out to r_myo, the RV a crescent: a disk
/// centred `rv_distance` to the left of the LV centre, minus everything
/// within r_myo + rv_gap of the LV centre.
struct PhantomShape {
  double r_lv = 12.0;
  double r_myo = 17.0;
  double rv_radius = 11.0;
  double rv_distance = 22.0;
};

struct PhantomConfig {
  int width = 64, height = 64, depth = 10;
  double spacing_x = 1.0, spacing_y = 1.0, slice_thickness = 10.0;
  double center_x_mm = 38.0, center_y_mm = 32.0;
  PhantomShape ed, es;
  bool rv_enabled = true;
  double rv_gap = 1.0;
  double boundary_margin_mm = 1.0;
  // Tissue means in arbitrary intensity units plus additive Gaussian noise.
  double bg_mean = 0.10, lv_mean = 0.95, myo_mean = 0.55, rv_mean = 0.80;
  double noise_sigma = 0.04;
  uint64_t seed = 0;
  std::string subject_id = "phantom";
  Diagnosis diagnosis = Diagnosis::NOR;
};

/// Exact areas/volumes implied by a PhantomConfig, attached to generated
/// records so tests can compare rasterized measurements against closed form.
struct PhantomTruth {
  double lv_area_ed = 0, lv_area_es = 0;    // mm^2 per slice
  double myo_area_ed = 0, myo_area_es = 0;
  double rv_area_ed = 0, rv_area_es = 0;
  double lv_edv_ml = 0, lv_esv_ml = 0, lv_ef_pct = 0;
  double rv_edv_ml = 0, rv_esv_ml = 0, rv_ef_pct = 0;
  double myo_ed_ml = 0;
  double lv_mass_g = 0;
};

namespace detail {

inline void check_shape_fits(const PhantomConfig& cfg, const PhantomShape& s, const char* tag) {
  require_config(s.r_myo > s.r_lv,
                 strprintf("%s: myocardial outer radius (%g) must exceed LV radius (%g)", tag,
                           s.r_myo, s.r_lv));
  double W = cfg.width * cfg.spacing_x, H = cfg.height * cfg.spacing_y;
  double m = cfg.boundary_margin_mm;
  auto inside = [&](double cx, double cy, double r) {
    return cx - r >= m && cx + r <= W - m && cy - r >= m && cy + r <= H - m;
  };
  require_config(inside(cfg.center_x_mm, cfg.center_y_mm, s.r_myo),
                 strprintf("%s: myocardium overlaps the image boundary", tag));
  if (cfg.rv_enabled)
    require_config(inside(cfg.center_x_mm - s.rv_distance, cfg.center_y_mm, s.rv_radius),
                   strprintf("%s: RV overlaps the image boundary", tag));
}

inline double shape_area(const PhantomConfig& cfg, const PhantomShape& s, SegClass cls) {
  switch (cls) {
    case kLeftVentricle:
      return M_PI * s.r_lv * s.r_lv;
    case kMyocardium:
      return M_PI * (s.r_myo * s.r_myo - s.r_lv * s.r_lv);
    case kRightVentricle: {
      if (!cfg.rv_enabled) return 0.0;
      double blocked = circle_intersection_area(s.rv_distance, s.rv_radius, s.r_myo + cfg.rv_gap);
      return M_PI * s.rv_radius * s.rv_radius - blocked;
    }
    default:
      return 0.0;
  }
}

inline void rasterize_phase(const PhantomConfig& cfg, const PhantomShape& s, Phase phase,
                            CineVolume& img, LabelVolume& lab) {
  img.height = lab.height = cfg.height;
  img.width = lab.width = cfg.width;
  img.depth = lab.depth = cfg.depth;
  img.spacing_x = lab.spacing_x = cfg.spacing_x;
  img.spacing_y = lab.spacing_y = cfg.spacing_y;
  img.slice_thickness = lab.slice_thickness = cfg.slice_thickness;
  img.phase = lab.phase = phase;
  img.subject_id = lab.subject_id = cfg.subject_id;
  img.voxels.assign(img.numel(), 0.f);
  lab.labels.assign(lab.numel(), kBackground);

  double rv_cx = cfg.center_x_mm - s.rv_distance, rv_cy = cfg.center_y_mm;
  double block_r = s.r_myo + cfg.rv_gap;
  Rng noise(mix_seed(cfg.seed, {0xA0D1u, static_cast<uint64_t>(phase)}));

  for (int z = 0; z < cfg.depth; ++z) {
    for (int y = 0; y < cfg.height; ++y) {
      double py = (y + 0.5) * cfg.spacing_y;
      for (int x = 0; x < cfg.width; ++x) {
        double px = (x + 0.5) * cfg.spacing_x;
        double dx = px - cfg.center_x_mm, dy = py - cfg.center_y_mm;
        double d_lv = std::sqrt(dx * dx + dy * dy);
        uint8_t cls = kBackground;
        if (d_lv < s.r_lv) {
          cls = kLeftVentricle;
        } else if (d_lv < s.r_myo) {
          cls = kMyocardium;
        } else if (cfg.rv_enabled) {
          double rx = px - rv_cx, ry = py - rv_cy;
          if (rx * rx + ry * ry < s.rv_radius * s.rv_radius && d_lv >= block_r)
            cls = kRightVentricle;
        }
        lab.at(x, y, z) = cls;
        double mean = cfg.bg_mean;
        if (cls == kLeftVentricle) mean = cfg.lv_mean;
        else if (cls == kMyocardium) mean = cfg.myo_mean;
        else if (cls == kRightVentricle) mean = cfg.rv_mean;
        img.at(x, y, z) = static_cast<float>(mean + noise.normal(0.0, cfg.noise_sigma));
      }
    }
  }
}

}  // namespace detail

inline PhantomTruth phantom_truth(const PhantomConfig& cfg) {
  PhantomTruth t;
  t.lv_area_ed = detail::shape_area(cfg, cfg.ed, kLeftVentricle);
  t.lv_area_es = detail::shape_area(cfg, cfg.es, kLeftVentricle);
  t.myo_area_ed = detail::shape_area(cfg, cfg.ed, kMyocardium);
  t.myo_area_es = detail::shape_area(cfg, cfg.es, kMyocardium);
  t.rv_area_ed = detail::shape_area(cfg, cfg.ed, kRightVentricle);
  t.rv_area_es = detail::shape_area(cfg, cfg.es, kRightVentricle);
  double slab = cfg.depth * cfg.slice_thickness / 1000.0;  // mm^2 -> ml per unit area
  t.lv_edv_ml = t.lv_area_ed * slab;
  t.lv_esv_ml = t.lv_area_es * slab;
  t.rv_edv_ml = t.rv_area_ed * slab;
  t.rv_esv_ml = t.rv_area_es * slab;
  t.myo_ed_ml = t.myo_area_ed * slab;
  t.lv_mass_g = t.myo_ed_ml * 1.05;
  t.lv_ef_pct = t.lv_edv_ml > 0 ? (t.lv_edv_ml - t.lv_esv_ml) / t.lv_edv_ml * 100.0 : 0.0;
  t.rv_ef_pct = t.rv_edv_ml > 0 ? (t.rv_edv_ml - t.rv_esv_ml) / t.rv_edv_ml * 100.0 : 0.0;
  return t;
}

/// Rasterizes an analytic two-phase cardiac phantom. Labels never overlap:
/// LV wins over Myo wins over RV; background is the complement.
inline SubjectRecord generate_phantom(const PhantomConfig& cfg, PhantomTruth* truth = nullptr) {
  require_config(cfg.width >= 1 && cfg.height >= 1 && cfg.depth >= 1,
                 "phantom dims must be >= 1");
  require_config(cfg.spacing_x > 0 && cfg.spacing_y > 0 && cfg.slice_thickness > 0,
                 "phantom spacing must be positive");
  detail::check_shape_fits(cfg, cfg.ed, "ED");
  detail::check_shape_fits(cfg, cfg.es, "ES");

  SubjectRecord rec;
  rec.subject_id = cfg.subject_id;
  rec.diagnosis = cfg.diagnosis;
  detail::rasterize_phase(cfg, cfg.ed, Phase::ED, rec.ed_image, rec.ed_label);
  detail::rasterize_phase(cfg, cfg.es, Phase::ES, rec.es_image, rec.es_label);
  rec.validate();
  if (truth) *truth = phantom_truth(cfg);
  return rec;
}

/// Intensity/noise regime; `shifted` flips myocardium-cavity contrast and
/// raises noise, giving the domain gap used by the few-shot study.
struct PhantomDomain {
  double bg_mean = 0.10, lv_mean = 0.95, myo_mean = 0.55, rv_mean = 0.80;
  double noise_sigma = 0.04;
  double geometry_scale = 1.0;
};

inline PhantomDomain source_domain() { return PhantomDomain{}; }
inline PhantomDomain shifted_domain() {
  PhantomDomain d;
  d.bg_mean = 0.30;
  d.lv_mean = 0.55;
  d.myo_mean = 0.90;
  d.rv_mean = 0.45;
  d.noise_sigma = 0.10;
  d.geometry_scale = 0.92;
  return d;
}

/// Grid/geometry of the rasterized volume; defaults match the 64 mm field
/// the class geometry below was tuned on. Other extents scale the anatomy
/// proportionally.
struct PhantomGrid {
  int width = 64, height = 64, depth = 10;
  double spacing_x = 1.0, spacing_y = 1.0, slice_thickness = 10.0;
};

/// Class-dependent geometry so the diagnosis is recoverable from shape alone:
/// DCM dilates the cavity with a thin wall and low EF, HCM thickens the wall,
/// MINF lowers EF at normal size, RV enlarges the right ventricle.
inline PhantomConfig phantom_config_for_class(Diagnosis diag, uint64_t seed,
                                              const std::string& subject_id,
                                              const PhantomDomain& dom = PhantomDomain{},
                                              const PhantomGrid& grid = PhantomGrid{}) {
  Rng rng(mix_seed(seed, {0xC1A55u, static_cast<uint64_t>(diag)}));
  PhantomConfig cfg;
  cfg.seed = mix_seed(seed, {0x9015Eu});
  cfg.subject_id = subject_id;
  cfg.diagnosis = diag;
  cfg.width = grid.width;
  cfg.height = grid.height;
  cfg.depth = grid.depth;
  cfg.spacing_x = grid.spacing_x;
  cfg.spacing_y = grid.spacing_y;
  cfg.slice_thickness = grid.slice_thickness;
  cfg.bg_mean = dom.bg_mean;
  cfg.lv_mean = dom.lv_mean;
  cfg.myo_mean = dom.myo_mean;
  cfg.rv_mean = dom.rv_mean;
  cfg.noise_sigma = dom.noise_sigma;
  double fov_scale = std::min(grid.width * grid.spacing_x, grid.height * grid.spacing_y) / 64.0;
  cfg.boundary_margin_mm *= fov_scale;
  cfg.rv_gap *= fov_scale;
  cfg.center_x_mm = (39.5 + rng.uniform(-0.5, 0.5)) * fov_scale;
  cfg.center_y_mm = (32.0 + rng.uniform(-1.0, 1.0)) * fov_scale;

  double r_lv, wall, ef, r_rv, rv_ef;
  switch (diag) {
    case Diagnosis::DCM:
      r_lv = rng.uniform(16.0, 18.0);
      wall = rng.uniform(3.5, 4.5);
      ef = rng.uniform(12.0, 25.0);
      r_rv = rng.uniform(9.0, 10.5);
      rv_ef = rng.uniform(30.0, 45.0);
      break;
    case Diagnosis::HCM:
      r_lv = rng.uniform(9.0, 11.0);
      wall = rng.uniform(9.0, 11.0);
      ef = rng.uniform(60.0, 72.0);
      r_rv = rng.uniform(9.0, 11.0);
      rv_ef = rng.uniform(45.0, 60.0);
      break;
    case Diagnosis::MINF:
      r_lv = rng.uniform(13.0, 15.0);
      wall = rng.uniform(4.5, 5.5);
      ef = rng.uniform(25.0, 38.0);
      r_rv = rng.uniform(9.5, 11.5);
      rv_ef = rng.uniform(40.0, 55.0);
      break;
    case Diagnosis::RV:
      r_lv = rng.uniform(10.0, 12.0);
      wall = rng.uniform(5.0, 6.0);
      ef = rng.uniform(35.0, 50.0);
      r_rv = rng.uniform(12.5, 14.0);
      rv_ef = rng.uniform(25.0, 40.0);
      break;
    case Diagnosis::NOR:
    default:
      r_lv = rng.uniform(11.0, 13.0);
      wall = rng.uniform(5.0, 6.0);
      ef = rng.uniform(55.0, 65.0);
      r_rv = rng.uniform(10.0, 12.0);
      rv_ef = rng.uniform(45.0, 60.0);
      break;
  }
  double g = dom.geometry_scale * fov_scale;
  r_lv *= g;
  wall *= g;
  r_rv *= g;

  cfg.ed.r_lv = r_lv;
  cfg.ed.r_myo = r_lv + wall;
  cfg.ed.rv_radius = r_rv;
  cfg.ed.rv_distance = cfg.ed.r_myo + cfg.rv_gap + 0.25 * r_rv;

  double shrink = std::sqrt(1.0 - ef / 100.0);
  cfg.es.r_lv = r_lv * shrink;
  cfg.es.r_myo = cfg.es.r_lv + wall * 1.2;  // systolic wall thickening
  cfg.es.rv_radius = r_rv * std::sqrt(1.0 - rv_ef / 100.0);
  cfg.es.rv_distance = cfg.es.r_myo + cfg.rv_gap + 0.25 * cfg.es.rv_radius;
  return cfg;
}

}  // namespace cineseg
