#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <vector>

#include "cineseg/preprocess.hpp"
#include "cineseg/volume.hpp"

namespace cineseg {

/// Binary mask over an H x W x D grid, x-fastest like volumes. D = 1 gives
/// the 2D case.
struct BinaryMask {
  int h = 0, w = 0, d = 1;
  std::vector<uint8_t> v;

  BinaryMask() = default;
  BinaryMask(int h_, int w_, int d_ = 1)
      : h(h_), w(w_), d(d_), v(static_cast<size_t>(h_) * w_ * d_, 0) {}
  uint8_t& at(int x, int y, int z = 0) {
    return v[static_cast<size_t>(x) + static_cast<size_t>(w) * (y + static_cast<size_t>(h) * z)];
  }
  uint8_t at(int x, int y, int z = 0) const {
    return v[static_cast<size_t>(x) + static_cast<size_t>(w) * (y + static_cast<size_t>(h) * z)];
  }
  size_t count() const {
    size_t n = 0;
    for (uint8_t b : v) n += b ? 1 : 0;
    return n;
  }
};

inline BinaryMask mask_for_class(const LabelVolume& lab, int cls) {
  BinaryMask m(lab.height, lab.width, lab.depth);
  for (size_t i = 0; i < lab.labels.size(); ++i) m.v[i] = lab.labels[i] == cls ? 1 : 0;
  return m;
}

struct OverlapScores {
  double dice = 0, iou = 0;
  bool both_empty = false;
};

/// Exact set-cardinality Dice and IoU. Both-empty pairs score 1 with a flag
/// (perfect agreement on absence); exactly one empty scores 0.
inline OverlapScores dice_iou(const BinaryMask& pred, const BinaryMask& gt) {
  require_data(pred.h == gt.h && pred.w == gt.w && pred.d == gt.d,
               "dice_iou: mask shapes differ");
  size_t inter = 0, s = 0, g = 0;
  for (size_t i = 0; i < pred.v.size(); ++i) {
    bool a = pred.v[i], b = gt.v[i];
    inter += (a && b) ? 1 : 0;
    s += a ? 1 : 0;
    g += b ? 1 : 0;
  }
  OverlapScores out;
  if (s == 0 && g == 0) {
    out.dice = out.iou = 1.0;
    out.both_empty = true;
    return out;
  }
  out.dice = 2.0 * static_cast<double>(inter) / static_cast<double>(s + g);
  out.iou = static_cast<double>(inter) / static_cast<double>(s + g - inter);
  return out;
}

struct PrecisionRecall {
  double precision = 0, recall = 0;
  bool precision_defined = true, recall_defined = true;
};

inline PrecisionRecall precision_recall(const BinaryMask& pred, const BinaryMask& gt) {
  require_data(pred.h == gt.h && pred.w == gt.w && pred.d == gt.d,
               "precision_recall: mask shapes differ");
  size_t inter = 0, s = 0, g = 0;
  for (size_t i = 0; i < pred.v.size(); ++i) {
    bool a = pred.v[i], b = gt.v[i];
    inter += (a && b) ? 1 : 0;
    s += a ? 1 : 0;
    g += b ? 1 : 0;
  }
  PrecisionRecall out;
  if (s == 0) out.precision_defined = false;
  else out.precision = static_cast<double>(inter) / static_cast<double>(s);
  if (g == 0) out.recall_defined = false;
  else out.recall = static_cast<double>(inter) / static_cast<double>(g);
  return out;
}

/// Boundary voxels under the face-connectivity complement test: a mask voxel
/// whose 6-neighbourhood (4 in 2D) leaves the mask or the grid.
inline std::vector<std::array<double, 3>> boundary_points(const BinaryMask& m, double sx,
                                                          double sy, double sz) {
  std::vector<std::array<double, 3>> pts;
  for (int z = 0; z < m.d; ++z)
    for (int y = 0; y < m.h; ++y)
      for (int x = 0; x < m.w; ++x) {
        if (!m.at(x, y, z)) continue;
        bool edge = x == 0 || x == m.w - 1 || !m.at(x - 1, y, z) || !m.at(x + 1, y, z) ||
                    y == 0 || y == m.h - 1 || !m.at(x, y - 1, z) || !m.at(x, y + 1, z);
        if (!edge && m.d > 1)
          edge = z == 0 || z == m.d - 1 || !m.at(x, y, z - 1) || !m.at(x, y, z + 1);
        if (edge) pts.push_back({x * sx, y * sy, z * sz});
      }
  return pts;
}

namespace detail {

// Minimal 3D kd-tree for nearest-neighbour queries over boundary points.
class KdTree {
 public:
  explicit KdTree(std::vector<std::array<double, 3>> pts) : pts_(std::move(pts)) {
    idx_.resize(pts_.size());
    std::iota(idx_.begin(), idx_.end(), static_cast<uint32_t>(0));
    if (!idx_.empty()) build(0, idx_.size(), 0);
  }

  double min_dist2(const std::array<double, 3>& q) const {
    double best = 1e300;
    query(0, idx_.size(), 0, q, best);
    return best;
  }

 private:
  void build(size_t lo, size_t hi, int axis) {
    if (hi - lo <= 1) return;
    size_t mid = (lo + hi) / 2;
    std::nth_element(idx_.begin() + lo, idx_.begin() + mid, idx_.begin() + hi,
                     [&](uint32_t a, uint32_t b) { return pts_[a][axis] < pts_[b][axis]; });
    build(lo, mid, (axis + 1) % 3);
    build(mid + 1, hi, (axis + 1) % 3);
  }

  void query(size_t lo, size_t hi, int axis, const std::array<double, 3>& q,
             double& best) const {
    if (lo >= hi) return;
    size_t mid = (lo + hi) / 2;
    const auto& p = pts_[idx_[mid]];
    double d2 = 0;
    for (int a = 0; a < 3; ++a) d2 += (p[a] - q[a]) * (p[a] - q[a]);
    best = std::min(best, d2);
    double delta = q[axis] - p[axis];
    int next = (axis + 1) % 3;
    if (delta < 0) {
      query(lo, mid, next, q, best);
      if (delta * delta < best) query(mid + 1, hi, next, q, best);
    } else {
      query(mid + 1, hi, next, q, best);
      if (delta * delta < best) query(lo, mid, next, q, best);
    }
  }

  std::vector<std::array<double, 3>> pts_;
  std::vector<uint32_t> idx_;
};

/// Linear-interpolation percentile of an unsorted sample (NumPy 'linear').
inline double percentile_linear(std::vector<double> xs, double q) {
  require_data(!xs.empty(), "percentile of empty sample");
  std::sort(xs.begin(), xs.end());
  if (xs.size() == 1) return xs[0];
  double rank = q * static_cast<double>(xs.size() - 1);
  size_t lo = static_cast<size_t>(std::floor(rank));
  if (lo >= xs.size() - 1) return xs.back();
  double frac = rank - static_cast<double>(lo);
  return xs[lo] + frac * (xs[lo + 1] - xs[lo]);
}

}  // namespace detail

struct HausdorffResult {
  double hd95 = 0, hd100 = 0;
  bool defined = false;
};

/// Symmetric boundary distances under anisotropic physical scaling. HD100 is
/// the classic max-min Hausdorff distance; HD95 takes the 95th percentile of
/// each directed distance set before the outer max. Undefined (flagged) when
/// either mask is empty.
inline HausdorffResult hd95(const BinaryMask& pred, const BinaryMask& gt, double sx, double sy,
                            double sz) {
  require_data(pred.h == gt.h && pred.w == gt.w && pred.d == gt.d, "hd95: mask shapes differ");
  HausdorffResult out;
  auto ps = boundary_points(pred, sx, sy, sz);
  auto gs = boundary_points(gt, sx, sy, sz);
  if (ps.empty() || gs.empty()) return out;

  detail::KdTree tree_g(gs), tree_p(ps);
  std::vector<double> d_pg(ps.size()), d_gp(gs.size());
  for (size_t i = 0; i < ps.size(); ++i) d_pg[i] = std::sqrt(tree_g.min_dist2(ps[i]));
  for (size_t i = 0; i < gs.size(); ++i) d_gp[i] = std::sqrt(tree_p.min_dist2(gs[i]));

  out.defined = true;
  out.hd100 = std::max(*std::max_element(d_pg.begin(), d_pg.end()),
                       *std::max_element(d_gp.begin(), d_gp.end()));
  out.hd95 = std::max(detail::percentile_linear(d_pg, 0.95),
                      detail::percentile_linear(d_gp, 0.95));
  return out;
}

// ---------------------------------------------------------------------------
// Classification metrics

struct ConfusionCounts {
  long tp = 0, fp = 0, tn = 0, fn = 0;
  long total() const { return tp + fp + tn + fn; }
};

struct ClassMetrics {
  ConfusionCounts counts;
  double accuracy = 0, precision = 0, recall = 0, specificity = 0, f1 = 0, auc = 0;
  bool precision_defined = true;
  bool auc_defined = true;
  bool present = true;  // class appears in the labels
};

struct ClassificationReport {
  std::vector<ClassMetrics> per_class;
  double overall_accuracy = 0;  // micro accuracy, trace / n
  double macro_precision = 0, macro_recall = 0, macro_specificity = 0, macro_f1 = 0;
  double macro_auc = 0;
  double macro_accuracy = 0;
};

/// One-vs-rest AUC via the rank-sum formulation with midrank tie handling;
/// equivalent to trapezoidal ROC integration.
inline double auc_midrank(const std::vector<double>& scores, const std::vector<bool>& positive,
                          bool* defined = nullptr) {
  size_t n = scores.size();
  size_t npos = 0;
  for (bool b : positive) npos += b ? 1 : 0;
  size_t nneg = n - npos;
  if (npos == 0 || nneg == 0) {
    if (defined) *defined = false;
    return 0.0;
  }
  if (defined) *defined = true;
  std::vector<uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
    if (scores[a] != scores[b]) return scores[a] < scores[b];
    return a < b;
  });
  std::vector<double> rank(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double rank_sum = 0;
  for (size_t k = 0; k < n; ++k)
    if (positive[k]) rank_sum += rank[k];
  return (rank_sum - static_cast<double>(npos) * (npos + 1) / 2.0) /
         (static_cast<double>(npos) * static_cast<double>(nneg));
}

/// Per-class one-vs-rest confusion metrics plus overall row. `probs[i]` is
/// the predicted distribution for subject i; `preds` are argmax class ids.
inline ClassificationReport classification_metrics(const std::vector<int>& preds,
                                                   const std::vector<int>& labels,
                                                   const std::vector<std::vector<double>>& probs,
                                                   int num_classes) {
  require_data(preds.size() == labels.size(), "classification: preds/labels length mismatch");
  require_data(probs.empty() || probs.size() == labels.size(),
               "classification: probs length mismatch");
  size_t n = labels.size();
  require_data(n > 0, "classification: empty evaluation set");
  ClassificationReport rep;
  rep.per_class.resize(num_classes);

  long correct = 0;
  for (size_t i = 0; i < n; ++i)
    if (preds[i] == labels[i]) ++correct;
  rep.overall_accuracy = static_cast<double>(correct) / static_cast<double>(n);

  int defined_auc = 0, defined_prec = 0;
  for (int c = 0; c < num_classes; ++c) {
    ClassMetrics& m = rep.per_class[c];
    for (size_t i = 0; i < n; ++i) {
      bool is_c = labels[i] == c, pred_c = preds[i] == c;
      if (is_c && pred_c) ++m.counts.tp;
      else if (!is_c && pred_c) ++m.counts.fp;
      else if (is_c && !pred_c) ++m.counts.fn;
      else ++m.counts.tn;
    }
    const auto& cc = m.counts;
    m.present = (cc.tp + cc.fn) > 0;
    m.accuracy = static_cast<double>(cc.tp + cc.tn) / static_cast<double>(cc.total());
    m.precision_defined = (cc.tp + cc.fp) > 0;
    m.precision = m.precision_defined
                      ? static_cast<double>(cc.tp) / static_cast<double>(cc.tp + cc.fp)
                      : 0.0;
    m.recall = m.present ? static_cast<double>(cc.tp) / static_cast<double>(cc.tp + cc.fn) : 0.0;
    m.specificity = (cc.tn + cc.fp) > 0
                        ? static_cast<double>(cc.tn) / static_cast<double>(cc.tn + cc.fp)
                        : 0.0;
    m.f1 = (m.precision + m.recall) > 0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
                                        : 0.0;
    if (!probs.empty()) {
      std::vector<double> scores(n);
      std::vector<bool> pos(n);
      for (size_t i = 0; i < n; ++i) {
        require_data(probs[i].size() == static_cast<size_t>(num_classes),
                     "classification: probability row has wrong length");
        scores[i] = probs[i][c];
        pos[i] = labels[i] == c;
      }
      m.auc = auc_midrank(scores, pos, &m.auc_defined);
    } else {
      m.auc_defined = false;
    }
    rep.macro_accuracy += m.accuracy / num_classes;
    rep.macro_recall += m.recall / num_classes;
    rep.macro_specificity += m.specificity / num_classes;
    rep.macro_f1 += m.f1 / num_classes;
    if (m.precision_defined) {
      rep.macro_precision += m.precision;
      ++defined_prec;
    }
    if (m.auc_defined) {
      rep.macro_auc += m.auc;
      ++defined_auc;
    }
  }
  rep.macro_precision = defined_prec > 0 ? rep.macro_precision / defined_prec : 0.0;
  rep.macro_auc = defined_auc > 0 ? rep.macro_auc / defined_auc : 0.0;
  return rep;
}

/// Deterministic argmax (lowest class index wins ties).
inline int argmax_class(const std::vector<double>& probs) {
  int best = 0;
  for (int c = 1; c < static_cast<int>(probs.size()); ++c)
    if (probs[c] > probs[best]) best = c;
  return best;
}

/// Per-pixel argmax over a probability map, producing a label plane.
inline MaskPlane argmax_mask(const ProbMap& probs) {
  MaskPlane out(probs.h, probs.w);
  size_t n = static_cast<size_t>(probs.h) * probs.w;
  for (size_t i = 0; i < n; ++i) {
    int best = 0;
    double bv = probs.v[i];
    for (int c = 1; c < probs.k; ++c) {
      double v = probs.v[static_cast<size_t>(c) * n + i];
      if (v > bv) {
        bv = v;
        best = c;
      }
    }
    out.v[i] = static_cast<uint8_t>(best);
  }
  return out;
}

}  // namespace cineseg
