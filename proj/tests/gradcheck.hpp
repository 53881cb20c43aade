#pragma once

// Shared finite-difference gradient checker for the full composite loss
// through the model. Central differences in double precision; coordinates
// whose perturbation crosses a Lovasz sorting tie are excluded (the loss is
// piecewise linear there and a central difference straddles the kink).

#include <algorithm>
#include <numeric>
#include <vector>

#include "cineseg/losses.hpp"
#include "cineseg/model.hpp"
#include "cineseg/phantom.hpp"

namespace gradcheck {

using namespace cineseg;

struct Result {
  int checked = 0;
  int passed = 0;
  int excluded = 0;
  double worst_rel = 0.0;
};

/// Loss value from one forward pass; optionally also the per-class
/// descending-error Lovasz sort permutations, used to detect tie crossings
/// between the two FD evaluation points.
inline double loss_value(const ModelParameters& mp, const SliceStack& stack,
                         const MaskPlane& target, int disease_target, const LossWeights& w,
                         std::vector<std::vector<uint32_t>>* orders_out = nullptr) {
  PredictionBundle b = model_forward(stack, mp, false, 0);
  if (orders_out) {
    orders_out->clear();
    size_t n = target.v.size();
    for (int c = 1; c < b.seg_probs.k; ++c) {
      bool present = false;
      for (size_t i = 0; i < n; ++i) present |= target.v[i] == c;
      if (!present) continue;
      std::vector<double> err(n);
      for (size_t i = 0; i < n; ++i) {
        double g = target.v[i] == c ? 1.0 : 0.0;
        err[i] = std::fabs(g - b.seg_probs.v[static_cast<size_t>(c) * n + i]);
      }
      std::vector<uint32_t> order(n);
      std::iota(order.begin(), order.end(), 0u);
      std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t bb) {
        if (err[a] != err[bb]) return err[a] > err[bb];
        return a < bb;
      });
      orders_out->push_back(std::move(order));
    }
  }
  return composite_loss(b.seg_probs, &b.seg_logits, target, b.disease_probs, disease_target, w)
      .total;
}

/// Checks `samples` coordinates spread over every parameter tensor.
inline Result run(ModelParameters& mp, const SliceStack& stack, const MaskPlane& target,
                  int disease_target, const LossWeights& w, int samples, double h, double rel_tol,
                  uint64_t seed) {
  // Analytic gradient via the reverse pass.
  ForwardCache cache;
  PredictionBundle bundle = model_forward(stack, mp, false, 0, &cache);
  SegLossGrads lg;
  composite_loss(bundle.seg_probs, &bundle.seg_logits, target, bundle.disease_probs,
                 disease_target, w, &lg);
  NamedTensors grads = mp.params.zeros_like();
  model_backward(cache, mp, lg.d_seg_probs.v, lg.d_disease, grads);

  // Spread the sample budget across tensors proportionally, at least one per
  // tensor, deterministically.
  int64_t total = mp.params.total_numel();
  std::vector<std::pair<size_t, int64_t>> picks;  // (tensor index, flat coord)
  Rng rng(mix_seed(seed, {0xFDFDu}));
  for (size_t ti = 0; ti < mp.params.size(); ++ti) {
    int64_t n = mp.params.tensors[ti].numel();
    int k = std::max<int>(1, static_cast<int>(std::llround(
                                 static_cast<double>(samples) * n / static_cast<double>(total))));
    for (int j = 0; j < k; ++j) picks.emplace_back(ti, static_cast<int64_t>(rng.index(n)));
  }
  Rng trim_rng(mix_seed(seed, {0x7717u}));
  while (static_cast<int>(picks.size()) > samples)
    picks.erase(picks.begin() + static_cast<long>(trim_rng.index(picks.size())));

  Result res;
  std::vector<std::vector<uint32_t>> ord_plus, ord_minus;
  for (auto [ti, ci] : picks) {
    double* coord = &mp.params.tensors[ti].data[static_cast<size_t>(ci)];
    double saved = *coord;
    *coord = saved + h;
    double f_plus = loss_value(mp, stack, target, disease_target, w, &ord_plus);
    *coord = saved - h;
    double f_minus = loss_value(mp, stack, target, disease_target, w, &ord_minus);
    *coord = saved;

    if (ord_plus != ord_minus) {
      ++res.excluded;
      continue;
    }
    double fd = (f_plus - f_minus) / (2.0 * h);
    double an = grads.tensors[ti].data[static_cast<size_t>(ci)];
    // Floor the denominator at 1e-6: below that the quotient (loss noise
    // ~1e-15 over 2h) dominates a central difference, so components smaller
    // than the floor are held to an absolute tolerance of rel_tol * 1e-6.
    double denom = std::max({std::fabs(fd), std::fabs(an), 1e-6});
    double rel = std::fabs(fd - an) / denom;
    ++res.checked;
    if (rel < rel_tol) ++res.passed;
    res.worst_rel = std::max(res.worst_rel, rel);
  }
  return res;
}

/// The toy 16x16 configuration used by the gradient-check criterion.
inline ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 4;
  cfg.embed_dim = 32;
  cfg.depth = 12;
  cfg.num_heads = 4;
  cfg.mlp_ratio = 2.0;
  cfg.decoder_channels = 16;
  cfg.dropout = 0.0;
  return cfg;
}

/// A 16x16 sample with all three foreground classes present, derived from the
/// analytic phantom through the real preprocessing path.
inline void tiny_sample(SliceStack& stack, MaskPlane& mask) {
  PhantomConfig pc;
  pc.seed = 4242;
  SubjectRecord rec = generate_phantom(pc);
  CineVolume norm = normalize_volume(rec.ed_image);
  SliceStack full = build_stack(norm, 4);
  stack = resize_stack(full, 16);
  mask = resize_nearest(extract_label_slice(rec.ed_label, 4), 16, 16);
}

}  // namespace gradcheck
