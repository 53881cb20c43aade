#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "cineseg/losses.hpp"

using namespace cineseg;

namespace {

// ---------------------------------------------------------------------------
// Brute-force Lovasz extension oracle, straight from the definition: sort the
// error vector descending, walk the prefix chain of mispredicted pixels, and
// accumulate e_i * (Delta(S_i) - Delta(S_{i-1})) with Delta the Jaccard loss
// of the prefix set against the ground truth. Independent of lovasz_grad.

double jaccard_loss_of_set(const std::vector<int>& gt, const std::vector<bool>& members) {
  size_t g_minus_m = 0, g_union_m = 0;
  for (size_t i = 0; i < gt.size(); ++i) {
    bool g = gt[i] == 1, m = members[i];
    if (g && !m) ++g_minus_m;
    if (g || m) ++g_union_m;
  }
  if (g_union_m == 0) return 0.0;
  return 1.0 - static_cast<double>(g_minus_m) / static_cast<double>(g_union_m);
}

double lovasz_extension_bruteforce(const std::vector<double>& errors, const std::vector<int>& gt) {
  size_t n = errors.size();
  std::vector<uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
    if (errors[a] != errors[b]) return errors[a] > errors[b];
    return a < b;
  });
  std::vector<bool> members(n, false);
  double prev = jaccard_loss_of_set(gt, members);  // Delta(empty) = 0
  double value = 0.0;
  for (size_t r = 0; r < n; ++r) {
    members[order[r]] = true;
    double cur = jaccard_loss_of_set(gt, members);
    value += errors[order[r]] * (cur - prev);
    prev = cur;
  }
  return value;
}

double lovasz_extension_impl(const std::vector<double>& errors, const std::vector<int>& gt) {
  size_t n = errors.size();
  std::vector<uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
    if (errors[a] != errors[b]) return errors[a] > errors[b];
    return a < b;
  });
  std::vector<int> gt_sorted(n);
  for (size_t r = 0; r < n; ++r) gt_sorted[r] = gt[order[r]];
  std::vector<double> g = lovasz_grad(gt_sorted);
  double v = 0;
  for (size_t r = 0; r < n; ++r) v += errors[order[r]] * g[r];
  return v;
}

ProbMap random_probs(int k, int h, int w, uint64_t seed) {
  ProbMap p(k, h, w);
  Rng rng(seed);
  size_t n = static_cast<size_t>(h) * w;
  for (size_t i = 0; i < n; ++i) {
    double sum = 0;
    std::vector<double> e(k);
    for (int c = 0; c < k; ++c) {
      e[c] = std::exp(rng.normal());
      sum += e[c];
    }
    for (int c = 0; c < k; ++c) p.v[static_cast<size_t>(c) * n + i] = e[c] / sum;
  }
  return p;
}

MaskPlane random_mask(int h, int w, int k, uint64_t seed) {
  MaskPlane m(h, w);
  Rng rng(seed);
  for (auto& v : m.v) v = static_cast<uint8_t>(rng.index(k));
  return m;
}

ProbMap one_hot_probs(const MaskPlane& m, int k) {
  ProbMap p(k, m.h, m.w);
  size_t n = m.v.size();
  for (size_t i = 0; i < n; ++i) p.v[static_cast<size_t>(m.v[i]) * n + i] = 1.0;
  return p;
}

}  // namespace

TEST_CASE("lovasz_grad base cases") {
  CHECK(lovasz_grad({1}) == std::vector<double>{1.0});
  auto g = lovasz_grad({1, 1});
  REQUIRE(g.size() == 2);
  CHECK(g[0] == Catch::Approx(0.5).margin(1e-15));
  CHECK(g[1] == Catch::Approx(0.5).margin(1e-15));
  CHECK(lovasz_grad({}).empty());
}

TEST_CASE("lovasz extension matches the brute-force sorted-prefix oracle") {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    size_t n = 1 + rng.index(12);
    std::vector<int> gt(n);
    std::vector<double> err(n);
    for (size_t i = 0; i < n; ++i) {
      gt[i] = rng.bernoulli(0.5) ? 1 : 0;
      err[i] = rng.uniform();
    }
    double impl = lovasz_extension_impl(err, gt);
    double oracle = lovasz_extension_bruteforce(err, gt);
    REQUIRE(std::fabs(impl - oracle) < 1e-9);
  }
}

TEST_CASE("soft dice: perfect, disjoint, and the 2x2 toy value") {
  MaskPlane t = random_mask(6, 6, 4, 1);
  t.v[0] = 1;
  t.v[1] = 2;
  t.v[2] = 3;  // ensure all foreground present
  ProbMap perfect = one_hot_probs(t, 4);
  CHECK(soft_dice_loss(perfect, t) < 1e-6);

  // Prediction puts zero mass on every target-foreground pixel.
  ProbMap wrong(4, t.h, t.w);
  size_t n = t.v.size();
  for (size_t i = 0; i < n; ++i) wrong.v[i] = 1.0;  // all mass on background
  CHECK(soft_dice_loss(wrong, t) > 1.0 - 1e-3);

  // 2x2, one foreground class: P = 0.5 on both target pixels, 0 elsewhere.
  MaskPlane toy(2, 2);
  toy.at(0, 0) = 1;
  toy.at(1, 0) = 1;
  ProbMap p(2, 2, 2);
  p.at(1, 0, 0) = 0.5;
  p.at(1, 1, 0) = 0.5;
  for (size_t i = 0; i < 4; ++i) p.v[i] = 1.0 - p.v[4 + i];
  double loss = soft_dice_loss(p, toy);
  CHECK(loss == Catch::Approx(1.0 - (2.0 * 1.0 + 1e-6) / (1.0 + 2.0 + 1e-6)).margin(1e-12));
  CHECK(loss == Catch::Approx(1.0 / 3.0).margin(1e-6));
}

TEST_CASE("pixel CE: perfect, uniform, and the hand-built two-pixel case") {
  MaskPlane t = random_mask(4, 4, 4, 2);
  ProbMap perfect = one_hot_probs(t, 4);
  CHECK(pixel_ce_loss(perfect, t) <= 1e-6);

  ProbMap uniform(4, 4, 4);
  for (auto& v : uniform.v) v = 0.25;
  CHECK(pixel_ce_loss(uniform, t) == Catch::Approx(std::log(4.0)).margin(1e-12));

  MaskPlane two(1, 2);
  ProbMap p(2, 1, 2);
  p.at(0, 0, 0) = 0.8;
  p.at(1, 0, 0) = 0.2;
  p.at(0, 1, 0) = 0.6;
  p.at(1, 1, 0) = 0.4;
  double expect = -(std::log(0.8) + std::log(0.6)) / 2.0;
  CHECK(pixel_ce_loss(p, two) == Catch::Approx(expect).margin(1e-12));
  CHECK(expect == Catch::Approx(0.3669).margin(5e-4));
}

TEST_CASE("fused log-softmax CE agrees with the probability form") {
  Rng rng(77);
  MaskPlane t = random_mask(8, 8, 4, 3);
  ProbMap logits(4, 8, 8);
  for (auto& v : logits.v) v = rng.normal(0.0, 3.0);
  ProbMap probs = logits;
  size_t n = 64;
  for (size_t i = 0; i < n; ++i) {
    double mx = -1e300;
    for (int c = 0; c < 4; ++c) mx = std::max(mx, probs.v[c * n + i]);
    double sum = 0;
    for (int c = 0; c < 4; ++c) {
      probs.v[c * n + i] = std::exp(probs.v[c * n + i] - mx);
      sum += probs.v[c * n + i];
    }
    for (int c = 0; c < 4; ++c) probs.v[c * n + i] /= sum;
  }
  CHECK(std::fabs(pixel_ce_loss_fused(logits, t) - pixel_ce_loss(probs, t)) < 1e-9);
}

TEST_CASE("lovasz softmax: perfect prediction, single pixel, oracle match") {
  MaskPlane t = random_mask(4, 4, 4, 4);
  t.v[0] = 1;
  ProbMap perfect = one_hot_probs(t, 4);
  CHECK(lovasz_softmax_loss(perfect, t) == Catch::Approx(0.0).margin(1e-12));

  MaskPlane single(1, 1);
  single.at(0, 0) = 1;
  ProbMap p(2, 1, 1);
  p.at(1, 0, 0) = 0.3;
  p.at(0, 0, 0) = 0.7;
  CHECK(lovasz_softmax_loss(p, single) == Catch::Approx(0.7).margin(1e-12));

  // Random 4x4 K=4 vs. a manual per-class oracle under the present-class rule.
  for (uint64_t seed = 0; seed < 30; ++seed) {
    MaskPlane m = random_mask(4, 4, 4, 100 + seed);
    ProbMap probs = random_probs(4, 4, 4, 200 + seed);
    size_t n = 16;
    double expect = 0.0;
    int classes = 0;
    for (int c = 1; c < 4; ++c) {
      std::vector<int> gt(n);
      bool present = false;
      for (size_t i = 0; i < n; ++i) {
        gt[i] = m.v[i] == c ? 1 : 0;
        present |= gt[i] == 1;
      }
      if (!present) continue;
      std::vector<double> err(n);
      for (size_t i = 0; i < n; ++i) err[i] = std::fabs(gt[i] - probs.v[c * n + i]);
      expect += lovasz_extension_bruteforce(err, gt);
      ++classes;
    }
    if (classes == 0) continue;
    expect /= classes;
    CHECK(lovasz_softmax_loss(probs, m) == Catch::Approx(expect).margin(1e-9));
  }
}

TEST_CASE("lovasz handles absent foreground") {
  MaskPlane bg(3, 3);  // all background
  ProbMap p = random_probs(4, 3, 3, 8);
  bool flag = false;
  CHECK(lovasz_softmax_loss(p, bg, LovaszMode::PresentForeground, nullptr, &flag) == 0.0);
  CHECK(flag);
  // AllForeground mode still produces a finite value.
  double v = lovasz_softmax_loss(p, bg, LovaszMode::AllForeground, nullptr, &flag);
  CHECK(std::isfinite(v));
  CHECK(v >= 0.0);
}

TEST_CASE("label-smoothed CE: smoothed target, alpha zero, uniform probs") {
  std::vector<double> probs = {0.1, 0.2, 0.3, 0.25, 0.15};
  // alpha=0.1, K=5: target 0.92 on the true class, 0.02 elsewhere.
  double expect = 0.0;
  for (int c = 0; c < 5; ++c) {
    double y = c == 2 ? 0.92 : 0.02;
    expect -= y * std::log(probs[c]);
  }
  CHECK(label_smooth_ce(probs, 2, 0.1) == Catch::Approx(expect).margin(1e-12));

  double plain = -std::log(probs[2]);
  CHECK(label_smooth_ce(probs, 2, 0.0) == Catch::Approx(plain).margin(1e-12));

  std::vector<double> uniform(5, 0.2);
  for (int c = 0; c < 5; ++c)
    CHECK(label_smooth_ce(uniform, c, 0.1) == Catch::Approx(std::log(5.0)).margin(1e-12));
}

TEST_CASE("composite loss recombines exactly and respects zero weights") {
  MaskPlane t = random_mask(6, 6, 4, 5);
  ProbMap probs = random_probs(4, 6, 6, 6);
  std::vector<double> dis = {0.1, 0.5, 0.2, 0.1, 0.1};
  LossWeights w;
  LossBreakdown b = composite_loss(probs, nullptr, t, dis, 1, w);
  double recombined = w.lambda_seg * (b.dice + b.ce + w.lambda_lov * b.lovasz) +
                      w.lambda_cls * b.cls;
  CHECK(std::fabs(b.total - recombined) < 1e-12);
  CHECK(w.lambda_seg == 1.0);
  CHECK(w.lambda_lov == 0.3);
  CHECK(w.lambda_cls == 0.1);

  LossWeights nocls = w;
  nocls.lambda_cls = 0.0;
  std::vector<double> dis2 = {0.9, 0.025, 0.025, 0.025, 0.025};
  LossBreakdown b1 = composite_loss(probs, nullptr, t, dis, 1, nocls);
  LossBreakdown b2 = composite_loss(probs, nullptr, t, dis2, 3, nocls);
  CHECK(b1.total == b2.total);

  LossWeights neg = w;
  neg.lambda_lov = -0.1;
  CHECK_THROWS_AS(composite_loss(probs, nullptr, t, dis, 1, neg), ConfigError);
}

TEST_CASE("composite total equals the weighted sum of hand-derived terms") {
  // Reuse the three DERIVED per-term cases in one assembled check.
  MaskPlane toy(2, 2);
  toy.at(0, 0) = 1;
  toy.at(1, 0) = 1;
  ProbMap p(2, 2, 2);
  p.at(1, 0, 0) = 0.5;
  p.at(1, 1, 0) = 0.5;
  for (size_t i = 0; i < 4; ++i) p.v[i] = 1.0 - p.v[4 + i];
  std::vector<double> uniform(5, 0.2);
  LossWeights w;
  w.fused_ce = false;
  LossBreakdown b = composite_loss(p, nullptr, toy, uniform, 0, w);
  double dice = 1.0 - (2.0 * 1.0 + 1e-6) / (3.0 + 1e-6);
  // Target pixels hold p=0.5 for class 1; background pixels hold p=1 exactly.
  double ce = -(2.0 * std::log(0.5)) / 4.0;
  std::vector<double> err = {0.5, 0.5, 0.0, 0.0};
  std::vector<int> gt = {1, 1, 0, 0};
  double lov = lovasz_extension_bruteforce(err, gt);
  double cls = std::log(5.0);
  CHECK(b.dice == Catch::Approx(dice).margin(1e-12));
  CHECK(b.ce == Catch::Approx(ce).margin(1e-12));
  CHECK(b.lovasz == Catch::Approx(lov).margin(1e-9));
  CHECK(b.cls == Catch::Approx(cls).margin(1e-12));
  CHECK(b.total ==
        Catch::Approx(1.0 * (dice + ce + 0.3 * lov) + 0.1 * cls).margin(1e-9));
}

TEST_CASE("all loss terms are non-negative, finite, and positive off-target") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    MaskPlane t = random_mask(5, 5, 4, 300 + seed);
    ProbMap probs = random_probs(4, 5, 5, 400 + seed);
    std::vector<double> dis = {0.2, 0.2, 0.2, 0.2, 0.2};
    LossBreakdown b = composite_loss(probs, nullptr, t, dis, static_cast<int>(seed % 5),
                                     LossWeights{});
    for (double v : {b.dice, b.ce, b.lovasz, b.cls, b.total}) {
      CHECK(std::isfinite(v));
      CHECK(v >= 0.0);
    }
    // Away from the exact one-hot target the seg terms are strictly positive.
    CHECK(b.dice > 1e-6);
    CHECK(b.ce > 1e-6);
  }
}

TEST_CASE("gradients of each term match finite differences at non-tie points") {
  MaskPlane t = random_mask(4, 4, 4, 12);
  t.v[0] = 1;
  t.v[5] = 2;
  t.v[9] = 3;
  ProbMap probs = random_probs(4, 4, 4, 13);
  const double h = 1e-6;

  auto check_grad = [&](auto value_of, const ProbMap& analytic) {
    Rng pick(99);
    for (int trial = 0; trial < 40; ++trial) {
      size_t idx = pick.index(probs.v.size());
      ProbMap plus = probs, minus = probs;
      plus.v[idx] += h;
      minus.v[idx] -= h;
      double fd = (value_of(plus) - value_of(minus)) / (2 * h);
      double an = analytic.v[idx];
      double denom = std::max({1e-6, std::fabs(fd), std::fabs(an)});
      CHECK(std::fabs(fd - an) / denom < 1e-4);
    }
  };

  ProbMap d_dice(4, 4, 4);
  soft_dice_loss(probs, t, 1e-6, &d_dice);
  check_grad([&](const ProbMap& p) { return soft_dice_loss(p, t); }, d_dice);

  ProbMap d_ce(4, 4, 4);
  pixel_ce_loss(probs, t, &d_ce);
  check_grad([&](const ProbMap& p) { return pixel_ce_loss(p, t); }, d_ce);

  ProbMap d_lov(4, 4, 4);
  lovasz_softmax_loss(probs, t, LovaszMode::PresentForeground, &d_lov);
  check_grad([&](const ProbMap& p) { return lovasz_softmax_loss(p, t); }, d_lov);

  std::vector<double> dis = {0.3, 0.25, 0.15, 0.2, 0.1};
  std::vector<double> d_cls(5, 0.0);
  label_smooth_ce(dis, 2, 0.1, &d_cls);
  for (int c = 0; c < 5; ++c) {
    auto plus = dis, minus = dis;
    plus[c] += h;
    minus[c] -= h;
    double fd = (label_smooth_ce(plus, 2, 0.1) - label_smooth_ce(minus, 2, 0.1)) / (2 * h);
    CHECK(std::fabs(fd - d_cls[c]) / std::max(1e-6, std::fabs(fd)) < 1e-4);
  }
}

TEST_CASE("raising the true-class probability never hurts dice or CE") {
  Rng rng(55);
  for (int trial = 0; trial < 50; ++trial) {
    MaskPlane t = random_mask(4, 4, 4, 500 + trial);
    ProbMap probs = random_probs(4, 4, 4, 600 + trial);
    size_t n = 16;
    size_t i = rng.index(n);
    int c = t.v[i];
    double before_d = soft_dice_loss(probs, t), before_c = pixel_ce_loss(probs, t);
    probs.v[static_cast<size_t>(c) * n + i] =
        std::min(1.0, probs.v[static_cast<size_t>(c) * n + i] + 0.05);
    CHECK(soft_dice_loss(probs, t) <= before_d + 1e-12);
    CHECK(pixel_ce_loss(probs, t) <= before_c + 1e-12);
  }
}
