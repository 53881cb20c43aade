#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "cineseg/preprocess.hpp"
#include "cineseg/volume.hpp"

namespace cineseg {

constexpr double kProbFloor = 1e-12;

/// Which foreground classes enter the Lovasz average. `PresentForeground`
/// skips classes absent from the ground truth (default); `AllForeground`
/// keeps every foreground class like the literal 1/C formula.
enum class LovaszMode { PresentForeground, AllForeground };

struct LossWeights {
  double lambda_seg = 1.0;
  double lambda_lov = 0.3;
  double lambda_cls = 0.1;
  double label_smoothing = 0.1;
  double dice_eps = 1e-6;
  LovaszMode lovasz_mode = LovaszMode::PresentForeground;
  bool fused_ce = true;  // compute the CE value from logits via log-softmax

  void validate() const {
    require_config(lambda_seg >= 0 && lambda_lov >= 0 && lambda_cls >= 0,
                   "loss weights must be non-negative");
    require_config(label_smoothing >= 0 && label_smoothing < 1,
                   "label smoothing must lie in [0,1)");
    require_config(dice_eps > 0, "dice epsilon must be positive");
  }
};

struct LossBreakdown {
  double total = 0, dice = 0, ce = 0, lovasz = 0, cls = 0;
  bool lovasz_no_foreground = false;
};

namespace detail {
inline void check_seg_shapes(const ProbMap& probs, const MaskPlane& target) {
  require_data(probs.h == target.h && probs.w == target.w,
               "loss: probability map and target shapes differ");
  require_data(probs.k >= 2, "loss: need at least two classes");
}
}  // namespace detail

/// Soft Dice over foreground classes: 1 - mean_c (2 sum PG + eps)/(sum P + sum G + eps).
/// Background is excluded; a class absent from both P and G contributes a
/// perfect term through the epsilon.
inline double soft_dice_loss(const ProbMap& probs, const MaskPlane& target, double eps = 1e-6,
                             ProbMap* d_probs = nullptr) {
  detail::check_seg_shapes(probs, target);
  size_t n = static_cast<size_t>(probs.h) * probs.w;
  int fg = probs.k - 1;
  double loss = 0.0;
  for (int c = 1; c < probs.k; ++c) {
    const double* p = &probs.v[static_cast<size_t>(c) * n];
    double inter = 0, psum = 0, gsum = 0;
    for (size_t i = 0; i < n; ++i) {
      bool g = target.v[i] == c;
      inter += g ? p[i] : 0.0;
      psum += p[i];
      gsum += g ? 1.0 : 0.0;
    }
    double num = 2.0 * inter + eps, den = psum + gsum + eps;
    loss += 1.0 - num / den;
    if (d_probs) {
      double* dp = &d_probs->v[static_cast<size_t>(c) * n];
      double inv_fg = 1.0 / fg;
      for (size_t i = 0; i < n; ++i) {
        double dnum = target.v[i] == c ? 2.0 : 0.0;
        dp[i] += -inv_fg * (dnum * den - num) / (den * den);
      }
    }
  }
  return loss / fg;
}

/// Pixel-wise multi-class cross entropy over all classes including
/// background, mean over pixels. Probabilities are floored at 1e-12.
inline double pixel_ce_loss(const ProbMap& probs, const MaskPlane& target,
                            ProbMap* d_probs = nullptr) {
  detail::check_seg_shapes(probs, target);
  size_t n = static_cast<size_t>(probs.h) * probs.w;
  double loss = 0.0;
  for (size_t i = 0; i < n; ++i) {
    int c = target.v[i];
    require_data(c < probs.k, "loss: target class id out of range");
    double p = std::max(probs.v[static_cast<size_t>(c) * n + i], kProbFloor);
    loss -= std::log(p);
    if (d_probs) d_probs->v[static_cast<size_t>(c) * n + i] += -1.0 / (p * static_cast<double>(n));
  }
  return loss / static_cast<double>(n);
}

/// Same value as pixel_ce_loss but evaluated from logits via log-softmax;
/// agrees with the probability form to ~1e-9 and is the training default.
inline double pixel_ce_loss_fused(const ProbMap& logits, const MaskPlane& target) {
  detail::check_seg_shapes(logits, target);
  size_t n = static_cast<size_t>(logits.h) * logits.w;
  double loss = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double mx = -1e300;
    for (int c = 0; c < logits.k; ++c)
      mx = std::max(mx, logits.v[static_cast<size_t>(c) * n + i]);
    double lse = 0.0;
    for (int c = 0; c < logits.k; ++c)
      lse += std::exp(logits.v[static_cast<size_t>(c) * n + i] - mx);
    lse = mx + std::log(lse);
    loss += lse - logits.v[static_cast<size_t>(target.v[i]) * n + i];
  }
  return loss / static_cast<double>(n);
}

/// Discrete gradient of the Jaccard loss along the sorted-prefix chain.
/// Input is the ground-truth indicator permuted by descending prediction
/// error; output weights make <sorted errors, g> the Lovasz extension value.
inline std::vector<double> lovasz_grad(const std::vector<int>& gt_sorted) {
  size_t p = gt_sorted.size();
  std::vector<double> jaccard(p);
  if (p == 0) return jaccard;
  double gts = 0;
  for (int g : gt_sorted) gts += g;
  double inter = gts, uni = gts;
  for (size_t k = 0; k < p; ++k) {
    inter -= gt_sorted[k];
    uni += 1 - gt_sorted[k];
    jaccard[k] = uni > 0 ? 1.0 - inter / uni : 0.0;
  }
  for (size_t k = p; k-- > 1;) jaccard[k] -= jaccard[k - 1];
  return jaccard;
}

namespace detail {

/// Per-class Lovasz term: errors |G - P| sorted descending (stable on pixel
/// index), dotted with lovasz_grad of the permuted ground truth.
inline double lovasz_class_term(const double* p, const MaskPlane& target, int cls, size_t n,
                                double* dp) {
  std::vector<double> err(n);
  for (size_t i = 0; i < n; ++i) {
    double g = target.v[i] == cls ? 1.0 : 0.0;
    err[i] = std::fabs(g - p[i]);
  }
  std::vector<uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
    if (err[a] != err[b]) return err[a] > err[b];
    return a < b;
  });
  std::vector<int> gt_sorted(n);
  for (size_t r = 0; r < n; ++r) gt_sorted[r] = target.v[order[r]] == cls ? 1 : 0;
  std::vector<double> g = lovasz_grad(gt_sorted);
  double loss = 0.0;
  for (size_t r = 0; r < n; ++r) loss += err[order[r]] * g[r];
  if (dp) {
    for (size_t r = 0; r < n; ++r) {
      uint32_t i = order[r];
      // d|G-P|/dP is -1 on ground-truth pixels, +1 elsewhere.
      dp[i] += (gt_sorted[r] ? -1.0 : 1.0) * g[r];
    }
  }
  return loss;
}

}  // namespace detail

/// Lovasz-Softmax surrogate, averaged over the chosen foreground classes.
/// Returns 0 and sets `no_foreground` when no foreground class is present
/// under PresentForeground mode.
inline double lovasz_softmax_loss(const ProbMap& probs, const MaskPlane& target,
                                  LovaszMode mode = LovaszMode::PresentForeground,
                                  ProbMap* d_probs = nullptr, bool* no_foreground = nullptr) {
  detail::check_seg_shapes(probs, target);
  size_t n = static_cast<size_t>(probs.h) * probs.w;
  std::vector<int> classes;
  for (int c = 1; c < probs.k; ++c) {
    bool present = false;
    for (size_t i = 0; i < n && !present; ++i) present = target.v[i] == c;
    if (mode == LovaszMode::AllForeground || present) classes.push_back(c);
  }
  if (no_foreground) *no_foreground = classes.empty();
  if (classes.empty()) return 0.0;

  double loss = 0.0;
  std::vector<double> dtmp;
  for (int c : classes) {
    const double* p = &probs.v[static_cast<size_t>(c) * n];
    double* dp = nullptr;
    if (d_probs) {
      dtmp.assign(n, 0.0);
      dp = dtmp.data();
    }
    loss += detail::lovasz_class_term(p, target, c, n, dp);
    if (d_probs) {
      double scale = 1.0 / classes.size();
      double* out = &d_probs->v[static_cast<size_t>(c) * n];
      for (size_t i = 0; i < n; ++i) out[i] += scale * dtmp[i];
    }
  }
  return loss / classes.size();
}

/// Label-smoothed classification CE: targets (1-a)*onehot + a/K.
inline double label_smooth_ce(const std::vector<double>& disease_probs, int true_class,
                              double alpha, std::vector<double>* d_probs = nullptr) {
  int k = static_cast<int>(disease_probs.size());
  require_data(true_class >= 0 && true_class < k, "classification target out of range");
  double loss = 0.0;
  for (int c = 0; c < k; ++c) {
    double y = (c == true_class ? 1.0 - alpha : 0.0) + alpha / k;
    double p = std::max(disease_probs[c], kProbFloor);
    loss -= y * std::log(p);
    if (d_probs) (*d_probs)[c] += -y / p;
  }
  return loss;
}

struct SegLossGrads {
  ProbMap d_seg_probs;              // dL/dP, same layout as the probability map
  std::vector<double> d_disease;    // dL/dp_k for the diagnostic head
};

/// Composite objective:
///   total = lambda_seg * (dice + ce + lambda_lov * lovasz) + lambda_cls * cls.
/// The breakdown recombines to the total exactly. Gradients, when requested,
/// are with respect to the softmax outputs (segmentation and disease probs).
inline LossBreakdown composite_loss(const ProbMap& seg_probs, const ProbMap* seg_logits,
                                    const MaskPlane& seg_target,
                                    const std::vector<double>& disease_probs, int disease_target,
                                    const LossWeights& w, SegLossGrads* grads = nullptr) {
  w.validate();
  LossBreakdown out;
  ProbMap* dp = nullptr;
  std::vector<double>* dd = nullptr;
  ProbMap d_dicelov;
  std::vector<double> d_cls;
  if (grads) {
    grads->d_seg_probs = ProbMap(seg_probs.k, seg_probs.h, seg_probs.w);
    grads->d_disease.assign(disease_probs.size(), 0.0);
    dp = &grads->d_seg_probs;
    dd = &grads->d_disease;
  }

  out.dice = soft_dice_loss(seg_probs, seg_target, w.dice_eps, nullptr);
  out.lovasz = lovasz_softmax_loss(seg_probs, seg_target, w.lovasz_mode, nullptr,
                                   &out.lovasz_no_foreground);
  out.ce = (w.fused_ce && seg_logits) ? pixel_ce_loss_fused(*seg_logits, seg_target)
                                      : pixel_ce_loss(seg_probs, seg_target, nullptr);
  out.cls = label_smooth_ce(disease_probs, disease_target, w.label_smoothing, nullptr);
  out.total = w.lambda_seg * (out.dice + out.ce + w.lambda_lov * out.lovasz) +
              w.lambda_cls * out.cls;

  if (grads) {
    ProbMap d_one(seg_probs.k, seg_probs.h, seg_probs.w);
    soft_dice_loss(seg_probs, seg_target, w.dice_eps, &d_one);
    // Accumulate: lambda_seg * (d_dice + d_ce + lambda_lov * d_lov).
    ProbMap d_lov(seg_probs.k, seg_probs.h, seg_probs.w);
    lovasz_softmax_loss(seg_probs, seg_target, w.lovasz_mode, &d_lov, nullptr);
    ProbMap d_ce(seg_probs.k, seg_probs.h, seg_probs.w);
    pixel_ce_loss(seg_probs, seg_target, &d_ce);
    for (size_t i = 0; i < dp->v.size(); ++i)
      dp->v[i] = w.lambda_seg * (d_one.v[i] + d_ce.v[i] + w.lambda_lov * d_lov.v[i]);
    std::vector<double> dc(disease_probs.size(), 0.0);
    label_smooth_ce(disease_probs, disease_target, w.label_smoothing, &dc);
    for (size_t i = 0; i < dd->size(); ++i) (*dd)[i] = w.lambda_cls * dc[i];
  }
  return out;
}

}  // namespace cineseg
