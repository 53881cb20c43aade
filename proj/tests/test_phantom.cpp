#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cineseg/phantom.hpp"

using namespace cineseg;

namespace {

double rasterized_area(const LabelVolume& lab, int cls, int z) {
  double n = 0;
  for (int y = 0; y < lab.height; ++y)
    for (int x = 0; x < lab.width; ++x)
      if (lab.at(x, y, z) == cls) n += 1;
  return n * lab.spacing_x * lab.spacing_y;
}

}  // namespace

TEST_CASE("analytic LV volume: 400 mm^2 disk over 10 slices of 10 mm is 40 ml") {
  PhantomConfig cfg;
  cfg.ed.r_lv = std::sqrt(400.0 / M_PI);
  cfg.ed.r_myo = cfg.ed.r_lv + 5.0;
  cfg.depth = 10;
  cfg.slice_thickness = 10.0;
  PhantomTruth t = phantom_truth(cfg);
  CHECK(t.lv_edv_ml == Catch::Approx(40.0).epsilon(1e-12));
}

TEST_CASE("analytic EF: areas 500 vs 200 mm^2 give 60 percent") {
  PhantomConfig cfg;
  cfg.ed.r_lv = std::sqrt(500.0 / M_PI);
  cfg.ed.r_myo = cfg.ed.r_lv + 4.0;
  cfg.es.r_lv = std::sqrt(200.0 / M_PI);
  cfg.es.r_myo = cfg.es.r_lv + 5.0;
  PhantomTruth t = phantom_truth(cfg);
  CHECK(t.lv_ef_pct == Catch::Approx(60.0).margin(1e-12));
}

TEST_CASE("rasterized areas match analytic within 2 percent at 64x64, 1 mm") {
  PhantomConfig cfg;  // defaults: 64x64, 1 mm spacing
  cfg.seed = 21;
  PhantomTruth t;
  SubjectRecord rec = generate_phantom(cfg, &t);
  for (int z = 0; z < cfg.depth; ++z) {
    CHECK(rasterized_area(rec.ed_label, kLeftVentricle, z) ==
          Catch::Approx(t.lv_area_ed).epsilon(0.02));
    CHECK(rasterized_area(rec.ed_label, kMyocardium, z) ==
          Catch::Approx(t.myo_area_ed).epsilon(0.02));
    CHECK(rasterized_area(rec.ed_label, kRightVentricle, z) ==
          Catch::Approx(t.rv_area_ed).epsilon(0.02));
    CHECK(rasterized_area(rec.es_label, kLeftVentricle, z) ==
          Catch::Approx(t.lv_area_es).epsilon(0.02));
  }
}

TEST_CASE("phantom structures partition the image: labels in range, all present") {
  PhantomConfig cfg;
  cfg.seed = 3;
  SubjectRecord rec = generate_phantom(cfg);
  std::array<size_t, kNumSegClasses> hist = {0, 0, 0, 0};
  for (uint8_t v : rec.ed_label.labels) {
    REQUIRE(v < kNumSegClasses);
    hist[v]++;
  }
  for (size_t n : hist) CHECK(n > 0);
}

TEST_CASE("invalid geometry is rejected") {
  PhantomConfig cfg;
  cfg.ed.r_myo = cfg.ed.r_lv - 1.0;
  CHECK_THROWS_AS(generate_phantom(cfg), ConfigError);

  PhantomConfig big;
  big.ed.r_myo = 40.0;  // larger than the 64 mm field allows at this centre
  big.ed.r_lv = 30.0;
  CHECK_THROWS_AS(generate_phantom(big), ConfigError);
}

TEST_CASE("phantom generation is deterministic") {
  PhantomConfig cfg;
  cfg.seed = 17;
  SubjectRecord a = generate_phantom(cfg);
  SubjectRecord b = generate_phantom(cfg);
  CHECK(a.ed_image.voxels == b.ed_image.voxels);
  CHECK(a.es_image.voxels == b.es_image.voxels);
  CHECK(a.ed_label.labels == b.ed_label.labels);
}

TEST_CASE("class-dependent geometry builds for every diagnosis and seed") {
  for (uint64_t seed = 0; seed < 40; ++seed)
    for (int c = 0; c < kNumDiagnoses; ++c) {
      PhantomConfig cfg = phantom_config_for_class(static_cast<Diagnosis>(c), seed,
                                                   strprintf("s%02d_%d", (int)seed, c));
      REQUIRE_NOTHROW(generate_phantom(cfg));
    }
}

TEST_CASE("DCM phantoms have lower EF and larger cavities than NOR") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    PhantomTruth nor = phantom_truth(phantom_config_for_class(Diagnosis::NOR, seed, "n"));
    PhantomTruth dcm = phantom_truth(phantom_config_for_class(Diagnosis::DCM, seed, "d"));
    CHECK(dcm.lv_ef_pct < nor.lv_ef_pct);
    CHECK(dcm.lv_edv_ml > nor.lv_edv_ml);
  }
}

TEST_CASE("shifted domain keeps valid geometry") {
  for (uint64_t seed = 0; seed < 10; ++seed)
    for (int c = 0; c < kNumDiagnoses; ++c) {
      PhantomConfig cfg = phantom_config_for_class(static_cast<Diagnosis>(c), seed, "s",
                                                   shifted_domain());
      REQUIRE_NOTHROW(generate_phantom(cfg));
    }
}

TEST_CASE("circle intersection area agrees with Monte Carlo") {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    double r1 = rng.uniform(3.0, 10.0), r2 = rng.uniform(3.0, 10.0);
    double d = rng.uniform(0.0, r1 + r2 + 2.0);
    double analytic = circle_intersection_area(d, r1, r2);
    // Sample the bounding box of circle 1.
    int hits = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
      double x = rng.uniform(-r1, r1), y = rng.uniform(-r1, r1);
      if (x * x + y * y <= r1 * r1) {
        double dx = x - d;
        if (dx * dx + y * y <= r2 * r2) ++hits;
      }
    }
    double mc = 4.0 * r1 * r1 * hits / n;
    CHECK(analytic == Catch::Approx(mc).margin(0.05 * r1 * r1 + 0.5));
  }
}
