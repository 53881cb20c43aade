#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <vector>

#include "cineseg/volume.hpp"

namespace cineseg {

struct Plane {
  int h = 0, w = 0;
  std::vector<float> v;

  Plane() = default;
  Plane(int h_, int w_) : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, 0.f) {}
  float& at(int x, int y) { return v[static_cast<size_t>(y) * w + x]; }
  float at(int x, int y) const { return v[static_cast<size_t>(y) * w + x]; }
};

struct MaskPlane {
  int h = 0, w = 0;
  std::vector<uint8_t> v;

  MaskPlane() = default;
  MaskPlane(int h_, int w_) : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, 0) {}
  uint8_t& at(int x, int y) { return v[static_cast<size_t>(y) * w + x]; }
  uint8_t at(int x, int y) const { return v[static_cast<size_t>(y) * w + x]; }
};

/// Channel-major [K, H, W] probability (or logit) map.
struct ProbMap {
  int k = 0, h = 0, w = 0;
  std::vector<double> v;

  ProbMap() = default;
  ProbMap(int k_, int h_, int w_) : k(k_), h(h_), w(w_), v(static_cast<size_t>(k_) * h_ * w_, 0.0) {}
  double& at(int c, int x, int y) { return v[(static_cast<size_t>(c) * h + y) * w + x]; }
  double at(int c, int x, int y) const { return v[(static_cast<size_t>(c) * h + y) * w + x]; }
};

/// 2.5D input: (z-1, z, z+1) planes of one subject's volume.
struct SliceStack {
  int h = 0, w = 0;
  std::array<Plane, 3> planes;
  int center_index = 0;
  std::string subject_id;
  Phase phase = Phase::ED;
};

/// Global volume-wise z-score over all voxels; never per slice. Constant
/// volumes map to all zeros through the epsilon.
inline CineVolume normalize_volume(const CineVolume& v) {
  v.validate();
  constexpr double kEps = 1e-6;
  double n = static_cast<double>(v.voxels.size());
  double mean = 0.0;
  for (float x : v.voxels) mean += x;
  mean /= n;
  double var = 0.0;
  for (float x : v.voxels) {
    double d = x - mean;
    var += d * d;
  }
  var /= n;  // population variance, matching the volume-wise definition
  double inv = 1.0 / (std::sqrt(var) + kEps);
  CineVolume out = v;
  for (float& x : out.voxels) x = static_cast<float>((x - mean) * inv);
  return out;
}

inline Plane extract_slice(const CineVolume& v, int z) {
  Plane p(v.height, v.width);
  for (int y = 0; y < v.height; ++y)
    for (int x = 0; x < v.width; ++x) p.at(x, y) = v.at(x, y, z);
  return p;
}

inline MaskPlane extract_label_slice(const LabelVolume& m, int z) {
  MaskPlane p(m.height, m.width);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) p.at(x, y) = m.at(x, y, z);
  return p;
}

/// Clamped-replication context stack: planes (I_{z-1}, I_z, I_{z+1}) with
/// indices clamped to [0, D-1]. D = 1 yields three copies of the only slice.
inline SliceStack build_stack(const CineVolume& v, int z) {
  require_data(z >= 0 && z < v.depth,
               strprintf("slice index %d out of range for depth %d", z, v.depth));
  auto clamp_z = [&](int zz) { return std::max(0, std::min(v.depth - 1, zz)); };
  SliceStack s;
  s.h = v.height;
  s.w = v.width;
  s.center_index = z;
  s.subject_id = v.subject_id;
  s.phase = v.phase;
  s.planes[0] = extract_slice(v, clamp_z(z - 1));
  s.planes[1] = extract_slice(v, z);
  s.planes[2] = extract_slice(v, clamp_z(z + 1));
  return s;
}

/// Bilinear resample with pixel-center alignment (align-corners disabled);
/// out-of-range source taps clamp to the edge.
inline Plane resize_bilinear(const Plane& in, int oh, int ow) {
  require_config(oh >= 1 && ow >= 1, "resize target must be >= 1");
  if (oh == in.h && ow == in.w) return in;
  Plane out(oh, ow);
  double sy = static_cast<double>(in.h) / oh, sx = static_cast<double>(in.w) / ow;
  for (int y = 0; y < oh; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    double wy = fy - y0;
    int y0c = std::max(0, std::min(in.h - 1, y0));
    int y1c = std::max(0, std::min(in.h - 1, y0 + 1));
    for (int x = 0; x < ow; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      double wx = fx - x0;
      int x0c = std::max(0, std::min(in.w - 1, x0));
      int x1c = std::max(0, std::min(in.w - 1, x0 + 1));
      double top = (1.0 - wx) * in.at(x0c, y0c) + wx * in.at(x1c, y0c);
      double bot = (1.0 - wx) * in.at(x0c, y1c) + wx * in.at(x1c, y1c);
      out.at(x, y) = static_cast<float>((1.0 - wy) * top + wy * bot);
    }
  }
  return out;
}

/// Nearest-neighbour resample; the label set can only shrink, never grow.
inline MaskPlane resize_nearest(const MaskPlane& in, int oh, int ow) {
  require_config(oh >= 1 && ow >= 1, "resize target must be >= 1");
  if (oh == in.h && ow == in.w) return in;
  MaskPlane out(oh, ow);
  double sy = static_cast<double>(in.h) / oh, sx = static_cast<double>(in.w) / ow;
  for (int y = 0; y < oh; ++y) {
    int iy = std::min(in.h - 1, static_cast<int>(std::floor((y + 0.5) * sy)));
    for (int x = 0; x < ow; ++x) {
      int ix = std::min(in.w - 1, static_cast<int>(std::floor((x + 0.5) * sx)));
      out.at(x, y) = in.at(ix, iy);
    }
  }
  return out;
}

inline std::pair<Plane, MaskPlane> resize_pair(const Plane& image, const MaskPlane& mask,
                                               int size) {
  return {resize_bilinear(image, size, size), resize_nearest(mask, size, size)};
}

inline SliceStack resize_stack(const SliceStack& s, int size) {
  SliceStack out = s;
  out.h = out.w = size;
  for (int i = 0; i < 3; ++i) out.planes[i] = resize_bilinear(s.planes[i], size, size);
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentationConfig {
  double rotation_deg = 30.0;
  double rotation_p = 0.5;
  double ssr_shift = 0.10;    // max translation, fraction of the side
  double ssr_scale = 0.20;    // max isotropic scale change
  double ssr_rotate_deg = 0;  // the dedicated rotation op carries the angle
  double ssr_p = 0.5;
  double elastic_alpha = 1.0;
  double elastic_sigma = 50.0;
  double elastic_alpha_affine = 50.0;
  double elastic_p = 0.3;
  int grid_num_steps = 5;
  double grid_distort_limit = 0.3;
  double grid_p = 0.3;
  double hflip_p = 0.5;
  double vflip_p = 0.5;
  double noise_var_min = 10.0;  // 0-255-equivalent variance range
  double noise_var_max = 50.0;
  double noise_scale = 1.0 / 255.0;  // converts 0-255 sigma to normalized units
  double noise_p = 0.2;
  uint64_t rng_seed = 0;

  void validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    require_config(prob(rotation_p) && prob(ssr_p) && prob(elastic_p) && prob(grid_p) &&
                       prob(hflip_p) && prob(vflip_p) && prob(noise_p),
                   "augmentation probabilities must lie in [0,1]");
    require_config(rotation_deg >= 0 && ssr_shift >= 0 && ssr_scale >= 0 && ssr_scale < 1 &&
                       elastic_alpha >= 0 && elastic_sigma > 0 && elastic_alpha_affine >= 0 &&
                       grid_num_steps >= 1 && grid_distort_limit >= 0 && grid_distort_limit < 1 &&
                       noise_var_min >= 0 && noise_var_max >= noise_var_min && noise_scale >= 0,
                   "augmentation ranges must be non-negative (scale/distort < 1)");
  }
};

struct AppliedAugmentations {
  bool rotation = false, ssr = false, elastic = false, grid = false;
  bool hflip = false, vflip = false, noise = false;
};

namespace detail {

// Row-major 2x3 affine acting on pixel-center coordinates.
struct Affine {
  double a = 1, b = 0, c = 0, d = 0, e = 1, f = 0;  // [a b c; d e f]

  static Affine identity() { return {}; }
  std::pair<double, double> apply(double x, double y) const {
    return {a * x + b * y + c, d * x + e * y + f};
  }
  Affine compose(const Affine& o) const {  // this after o
    return {a * o.a + b * o.d, a * o.b + b * o.e, a * o.c + b * o.f + c,
            d * o.a + e * o.d, d * o.b + e * o.e, d * o.c + e * o.f + f};
  }
  Affine inverse() const {
    double det = a * e - b * d;
    require_data(std::fabs(det) > 1e-12, "singular augmentation affine");
    double ia = e / det, ib = -b / det, id = -d / det, ie = a / det;
    return {ia, ib, -(ia * c + ib * f), id, ie, -(id * c + ie * f)};
  }
};

inline Affine rotation_about(double cx, double cy, double rad, double scale = 1.0) {
  double co = std::cos(rad) * scale, si = std::sin(rad) * scale;
  return {co, -si, cx - co * cx + si * cy, si, co, cy - si * cx - co * cy};
}

inline float sample_bilinear_const(const Plane& p, double x, double y) {
  int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  double wx = x - x0, wy = y - y0;
  auto tap = [&](int xx, int yy) -> double {
    if (xx < 0 || yy < 0 || xx >= p.w || yy >= p.h) return 0.0;
    return p.at(xx, yy);
  };
  double top = (1 - wx) * tap(x0, y0) + wx * tap(x0 + 1, y0);
  double bot = (1 - wx) * tap(x0, y0 + 1) + wx * tap(x0 + 1, y0 + 1);
  return static_cast<float>((1 - wy) * top + wy * bot);
}

inline uint8_t sample_nearest_const(const MaskPlane& p, double x, double y) {
  int xx = static_cast<int>(std::floor(x + 0.5)), yy = static_cast<int>(std::floor(y + 0.5));
  if (xx < 0 || yy < 0 || xx >= p.w || yy >= p.h) return 0;
  return p.at(xx, yy);
}

/// Separable box-truncated Gaussian blur (3 sigma radius) on a double field.
inline void gaussian_blur(std::vector<double>& f, int h, int w, double sigma) {
  int rad = std::max(1, static_cast<int>(std::lround(3.0 * sigma)));
  std::vector<double> kern(2 * rad + 1);
  double sum = 0;
  for (int i = -rad; i <= rad; ++i) {
    kern[i + rad] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += kern[i + rad];
  }
  for (double& k : kern) k /= sum;
  std::vector<double> tmp(f.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int i = -rad; i <= rad; ++i) {
        int xx = std::max(0, std::min(w - 1, x + i));
        s += kern[i + rad] * f[static_cast<size_t>(y) * w + xx];
      }
      tmp[static_cast<size_t>(y) * w + x] = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int i = -rad; i <= rad; ++i) {
        int yy = std::max(0, std::min(h - 1, y + i));
        s += kern[i + rad] * tmp[static_cast<size_t>(yy) * w + x];
      }
      f[static_cast<size_t>(y) * w + x] = s;
    }
}

/// Solves the affine sending three source anchor points to three targets.
inline Affine affine_from_points(const std::array<std::array<double, 2>, 3>& src,
                                 const std::array<std::array<double, 2>, 3>& dst) {
  // Solve two 3x3 systems [x y 1] * [a b c]^T = x' by Cramer's rule.
  double m[3][3];
  for (int i = 0; i < 3; ++i) {
    m[i][0] = src[i][0];
    m[i][1] = src[i][1];
    m[i][2] = 1.0;
  }
  auto det3 = [](double a[3][3]) {
    return a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) -
           a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0]) +
           a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
  };
  double base[3][3];
  std::copy(&m[0][0], &m[0][0] + 9, &base[0][0]);
  double d0 = det3(base);
  require_data(std::fabs(d0) > 1e-9, "degenerate anchor triangle");
  Affine out;
  double* coef[2][3] = {{&out.a, &out.b, &out.c}, {&out.d, &out.e, &out.f}};
  for (int row = 0; row < 2; ++row) {
    for (int j = 0; j < 3; ++j) {
      double t[3][3];
      std::copy(&m[0][0], &m[0][0] + 9, &t[0][0]);
      for (int i = 0; i < 3; ++i) t[i][j] = dst[i][row];
      *coef[row][j] = det3(t) / d0;
    }
  }
  return out;
}

}  // namespace detail

/// Applies one stochastic augmentation draw. The same spatial transform hits
/// all three planes and the mask (mask via nearest neighbour); intensity
/// noise never touches the mask. Fully determined by the rng state.
inline AppliedAugmentations augment(SliceStack& stack, MaskPlane& mask,
                                    const AugmentationConfig& cfg, Rng& rng) {
  cfg.validate();
  require_data(mask.h == stack.h && mask.w == stack.w, "augment: mask and stack misaligned");
  AppliedAugmentations applied;
  int h = stack.h, w = stack.w;
  double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;

  // Stage 1: composed affine (rotation, then shift-scale-rotate).
  detail::Affine fwd = detail::Affine::identity();
  bool any_affine = false;
  if (rng.bernoulli(cfg.rotation_p)) {
    applied.rotation = true;
    any_affine = true;
    double theta = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) * M_PI / 180.0;
    fwd = detail::rotation_about(cx, cy, theta).compose(fwd);
  }
  if (rng.bernoulli(cfg.ssr_p)) {
    applied.ssr = true;
    any_affine = true;
    double tx = rng.uniform(-cfg.ssr_shift, cfg.ssr_shift) * w;
    double ty = rng.uniform(-cfg.ssr_shift, cfg.ssr_shift) * h;
    double sc = 1.0 + rng.uniform(-cfg.ssr_scale, cfg.ssr_scale);
    double rot = rng.uniform(-cfg.ssr_rotate_deg, cfg.ssr_rotate_deg) * M_PI / 180.0;
    detail::Affine m = detail::rotation_about(cx, cy, rot, sc);
    m.c += tx;
    m.f += ty;
    fwd = m.compose(fwd);
  }
  auto warp_affine = [&](const detail::Affine& inv) {
    for (auto& plane : stack.planes) {
      Plane outp(h, w);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          auto [sx, sy] = inv.apply(x, y);
          outp.at(x, y) = detail::sample_bilinear_const(plane, sx, sy);
        }
      plane = std::move(outp);
    }
    MaskPlane outm(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        auto [sx, sy] = inv.apply(x, y);
        outm.at(x, y) = detail::sample_nearest_const(mask, sx, sy);
      }
    mask = std::move(outm);
  };
  if (any_affine) warp_affine(fwd.inverse());

  // Stage 2: elastic deformation (blurred random field + anchor-affine).
  if (rng.bernoulli(cfg.elastic_p)) {
    applied.elastic = true;
    std::vector<double> dx(static_cast<size_t>(h) * w), dy(dx.size());
    for (auto& v : dx) v = rng.uniform(-1.0, 1.0);
    for (auto& v : dy) v = rng.uniform(-1.0, 1.0);
    detail::gaussian_blur(dx, h, w, cfg.elastic_sigma);
    detail::gaussian_blur(dy, h, w, cfg.elastic_sigma);
    double s = std::min(h, w) / 3.0;
    std::array<std::array<double, 2>, 3> src = {{{cx - s, cy - s}, {cx + s, cy - s}, {cx - s, cy + s}}};
    auto dst = src;
    for (auto& pt : dst) {
      pt[0] += rng.uniform(-cfg.elastic_alpha_affine, cfg.elastic_alpha_affine);
      pt[1] += rng.uniform(-cfg.elastic_alpha_affine, cfg.elastic_alpha_affine);
    }
    detail::Affine inv = detail::affine_from_points(src, dst).inverse();
    for (auto& plane : stack.planes) {
      Plane outp(h, w);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          auto [ax, ay] = inv.apply(x, y);
          size_t i = static_cast<size_t>(y) * w + x;
          outp.at(x, y) = detail::sample_bilinear_const(plane, ax + cfg.elastic_alpha * dx[i],
                                                        ay + cfg.elastic_alpha * dy[i]);
        }
      plane = std::move(outp);
    }
    MaskPlane outm(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        auto [ax, ay] = inv.apply(x, y);
        size_t i = static_cast<size_t>(y) * w + x;
        outm.at(x, y) = detail::sample_nearest_const(mask, ax + cfg.elastic_alpha * dx[i],
                                                     ay + cfg.elastic_alpha * dy[i]);
      }
    mask = std::move(outm);
  }

  // Stage 3: grid distortion via per-axis piecewise-linear monotone warps.
  if (rng.bernoulli(cfg.grid_p)) {
    applied.grid = true;
    int n = cfg.grid_num_steps;
    auto make_axis = [&](int size) {
      std::vector<double> knots(n + 1, 0.0);
      double total = 0;
      std::vector<double> widths(n);
      for (int i = 0; i < n; ++i) {
        widths[i] = (1.0 + rng.uniform(-cfg.grid_distort_limit, cfg.grid_distort_limit));
        total += widths[i];
      }
      for (int i = 0; i < n; ++i) knots[i + 1] = knots[i] + widths[i] / total * size;
      return knots;  // source positions of uniformly spaced output knots
    };
    std::vector<double> kx = make_axis(w), ky = make_axis(h);
    auto axis_map = [&](const std::vector<double>& knots, int size, double o) {
      double step = static_cast<double>(size) / n;
      int seg = std::min(n - 1, static_cast<int>(o / step));
      double t = (o - seg * step) / step;
      return knots[seg] + t * (knots[seg + 1] - knots[seg]);
    };
    for (auto& plane : stack.planes) {
      Plane outp(h, w);
      for (int y = 0; y < h; ++y) {
        double sy = axis_map(ky, h, y);
        for (int x = 0; x < w; ++x)
          outp.at(x, y) = detail::sample_bilinear_const(plane, axis_map(kx, w, x), sy);
      }
      plane = std::move(outp);
    }
    MaskPlane outm(h, w);
    for (int y = 0; y < h; ++y) {
      double sy = axis_map(ky, h, y);
      for (int x = 0; x < w; ++x)
        outm.at(x, y) = detail::sample_nearest_const(mask, axis_map(kx, w, x), sy);
    }
    mask = std::move(outm);
  }

  // Stage 4: exact flips (no interpolation, involutive).
  if (rng.bernoulli(cfg.hflip_p)) {
    applied.hflip = true;
    for (auto& plane : stack.planes)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w / 2; ++x) std::swap(plane.at(x, y), plane.at(w - 1 - x, y));
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w / 2; ++x) std::swap(mask.at(x, y), mask.at(w - 1 - x, y));
  }
  if (rng.bernoulli(cfg.vflip_p)) {
    applied.vflip = true;
    for (auto& plane : stack.planes)
      for (int y = 0; y < h / 2; ++y)
        for (int x = 0; x < w; ++x) std::swap(plane.at(x, y), plane.at(x, h - 1 - y));
    for (int y = 0; y < h / 2; ++y)
      for (int x = 0; x < w; ++x) std::swap(mask.at(x, y), mask.at(x, h - 1 - y));
  }

  // Stage 5: additive Gaussian noise, intensity only.
  if (rng.bernoulli(cfg.noise_p)) {
    applied.noise = true;
    double var = rng.uniform(cfg.noise_var_min, cfg.noise_var_max);
    double sigma = std::sqrt(var) * cfg.noise_scale;
    for (auto& plane : stack.planes)
      for (auto& px : plane.v) px = static_cast<float>(px + rng.normal(0.0, sigma));
  }
  return applied;
}

// ---------------------------------------------------------------------------
// Test-time augmentation

inline SliceStack flip_stack_h(const SliceStack& s) {
  SliceStack out = s;
  for (auto& plane : out.planes)
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w / 2; ++x) std::swap(plane.at(x, y), plane.at(out.w - 1 - x, y));
  return out;
}

inline SliceStack flip_stack_v(const SliceStack& s) {
  SliceStack out = s;
  for (auto& plane : out.planes)
    for (int y = 0; y < out.h / 2; ++y)
      for (int x = 0; x < out.w; ++x) std::swap(plane.at(x, y), plane.at(x, out.h - 1 - y));
  return out;
}

inline ProbMap flip_probs_h(const ProbMap& p) {
  ProbMap out = p;
  for (int c = 0; c < p.k; ++c)
    for (int y = 0; y < p.h; ++y)
      for (int x = 0; x < p.w / 2; ++x) std::swap(out.at(c, x, y), out.at(c, p.w - 1 - x, y));
  return out;
}

inline ProbMap flip_probs_v(const ProbMap& p) {
  ProbMap out = p;
  for (int c = 0; c < p.k; ++c)
    for (int y = 0; y < p.h / 2; ++y)
      for (int x = 0; x < p.w; ++x) std::swap(out.at(c, x, y), out.at(c, x, p.h - 1 - y));
  return out;
}

/// Three-view TTA: mean of the identity view and the two undone flip views.
inline ProbMap tta_predict(const std::function<ProbMap(const SliceStack&)>& predict,
                           const SliceStack& stack) {
  ProbMap base = predict(stack);
  ProbMap ph = flip_probs_h(predict(flip_stack_h(stack)));
  ProbMap pv = flip_probs_v(predict(flip_stack_v(stack)));
  require_data(ph.v.size() == base.v.size() && pv.v.size() == base.v.size(),
               "TTA: predictor output shape varies across views");
  ProbMap out = base;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = (base.v[i] + ph.v[i] + pv.v[i]) / 3.0;
  return out;
}

}  // namespace cineseg
