#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "cineseg/common.hpp"
#include "cineseg/tensor.hpp"

// Primitive forward/backward kernels for the encoder-decoder model. All math
// in double; every backward mirrors its forward exactly so central finite
// differences validate the full chain.
namespace cineseg::nn {

constexpr double kLayerNormEps = 1e-5;

// Y[T,O] = X[T,I] W[I,O] + b
inline void linear_forward(int64_t T, int64_t I, int64_t O, const double* X, const double* W,
                           const double* b, double* Y) {
  gemm_nn(T, O, I, X, W, Y, false);
  if (b)
    for (int64_t t = 0; t < T; ++t)
      for (int64_t o = 0; o < O; ++o) Y[t * O + o] += b[o];
}

inline void linear_backward(int64_t T, int64_t I, int64_t O, const double* X, const double* W,
                            const double* dY, double* dX, double* dW, double* db) {
  if (dX) gemm_nt(T, O, I, dY, W, dX, true);
  if (dW) gemm_tn(T, O, I, X, dY, dW, true);
  if (db)
    for (int64_t t = 0; t < T; ++t)
      for (int64_t o = 0; o < O; ++o) db[o] += dY[t * O + o];
}

struct LayerNormCache {
  std::vector<double> xhat;  // [T*D]
  std::vector<double> rstd;  // [T]
  std::vector<double> y;     // [T*D]
};

inline void layernorm_forward(int64_t T, int64_t D, const double* X, const double* gamma,
                              const double* beta, LayerNormCache& c) {
  c.xhat.resize(static_cast<size_t>(T * D));
  c.rstd.resize(static_cast<size_t>(T));
  c.y.resize(static_cast<size_t>(T * D));
  for (int64_t t = 0; t < T; ++t) {
    const double* x = X + t * D;
    double mean = 0;
    for (int64_t d = 0; d < D; ++d) mean += x[d];
    mean /= D;
    double var = 0;
    for (int64_t d = 0; d < D; ++d) {
      double dd = x[d] - mean;
      var += dd * dd;
    }
    var /= D;
    double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    c.rstd[t] = rstd;
    for (int64_t d = 0; d < D; ++d) {
      double xh = (x[d] - mean) * rstd;
      c.xhat[t * D + d] = xh;
      c.y[t * D + d] = xh * gamma[d] + beta[d];
    }
  }
}

inline void layernorm_backward(int64_t T, int64_t D, const LayerNormCache& c, const double* gamma,
                               const double* dY, double* dX, double* dgamma, double* dbeta) {
  for (int64_t t = 0; t < T; ++t) {
    const double* dy = dY + t * D;
    const double* xh = c.xhat.data() + t * D;
    double m1 = 0, m2 = 0;
    for (int64_t d = 0; d < D; ++d) {
      double dxh = dy[d] * gamma[d];
      m1 += dxh;
      m2 += dxh * xh[d];
    }
    m1 /= D;
    m2 /= D;
    double rstd = c.rstd[t];
    for (int64_t d = 0; d < D; ++d) {
      double dxh = dy[d] * gamma[d];
      dX[t * D + d] += rstd * (dxh - m1 - xh[d] * m2);
      if (dgamma) dgamma[d] += dy[d] * xh[d];
      if (dbeta) dbeta[d] += dy[d];
    }
  }
}

/// Row-wise softmax in place.
inline void softmax_rows(int64_t rows, int64_t cols, double* X) {
  for (int64_t r = 0; r < rows; ++r) {
    double* x = X + r * cols;
    double mx = x[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double sum = 0;
    for (int64_t j = 0; j < cols; ++j) {
      x[j] = std::exp(x[j] - mx);
      sum += x[j];
    }
    for (int64_t j = 0; j < cols; ++j) x[j] /= sum;
  }
}

/// dX for Y = softmax(X) given Y and dY: y * (dy - sum(y*dy)).
inline void softmax_backward_rows(int64_t rows, int64_t cols, const double* Y, const double* dY,
                                  double* dX) {
  for (int64_t r = 0; r < rows; ++r) {
    const double* y = Y + r * cols;
    const double* dy = dY + r * cols;
    double dot = 0;
    for (int64_t j = 0; j < cols; ++j) dot += y[j] * dy[j];
    for (int64_t j = 0; j < cols; ++j) dX[r * cols + j] += y[j] * (dy[j] - dot);
  }
}

// Exact GELU (Gaussian CDF form).
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
inline double gelu_grad(double x) {
  double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * phi;
}

inline void gelu_forward(const double* X, double* Y, size_t n) {
  for (size_t i = 0; i < n; ++i) Y[i] = gelu(X[i]);
}
inline void gelu_backward(const double* X, const double* dY, double* dX, size_t n) {
  for (size_t i = 0; i < n; ++i) dX[i] += dY[i] * gelu_grad(X[i]);
}

// 1x1 convolution == channel-mixing linear over the flattened spatial axis.
// X[Ci, HW], W[Co, Ci], Y[Co, HW].
inline void conv1x1_forward(int64_t Ci, int64_t Co, int64_t HW, const double* X, const double* W,
                            const double* b, double* Y) {
  gemm_nn(Co, HW, Ci, W, X, Y, false);
  if (b)
    for (int64_t o = 0; o < Co; ++o)
      for (int64_t i = 0; i < HW; ++i) Y[o * HW + i] += b[o];
}

inline void conv1x1_backward(int64_t Ci, int64_t Co, int64_t HW, const double* X, const double* W,
                             const double* dY, double* dX, double* dW, double* db) {
  if (dX) gemm_tn(Co, HW, Ci, W, dY, dX, true);
  if (dW) gemm_nt(Co, HW, Ci, dY, X, dW, true);
  if (db)
    for (int64_t o = 0; o < Co; ++o)
      for (int64_t i = 0; i < HW; ++i) db[o] += dY[o * HW + i];
}

// 3x3 same-padding convolution on a [C, G, G] grid, zero border.
// W layout: [Co, Ci, 3, 3].
inline void conv3x3_forward(int64_t Ci, int64_t Co, int64_t G, const double* X, const double* W,
                            const double* b, double* Y) {
  for (int64_t o = 0; o < Co; ++o) {
    for (int64_t y = 0; y < G; ++y)
      for (int64_t x = 0; x < G; ++x) {
        double s = b ? b[o] : 0.0;
        for (int64_t i = 0; i < Ci; ++i) {
          const double* xin = X + i * G * G;
          const double* w = W + ((o * Ci + i) * 9);
          for (int dy = -1; dy <= 1; ++dy) {
            int64_t yy = y + dy;
            if (yy < 0 || yy >= G) continue;
            for (int dx = -1; dx <= 1; ++dx) {
              int64_t xx = x + dx;
              if (xx < 0 || xx >= G) continue;
              s += w[(dy + 1) * 3 + (dx + 1)] * xin[yy * G + xx];
            }
          }
        }
        Y[(o * G + y) * G + x] = s;
      }
  }
}

inline void conv3x3_backward(int64_t Ci, int64_t Co, int64_t G, const double* X, const double* W,
                             const double* dY, double* dX, double* dW, double* db) {
  for (int64_t o = 0; o < Co; ++o) {
    const double* dy_o = dY + o * G * G;
    if (db) {
      double s = 0;
      for (int64_t i = 0; i < G * G; ++i) s += dy_o[i];
      db[o] += s;
    }
    for (int64_t i = 0; i < Ci; ++i) {
      const double* xin = X + i * G * G;
      double* dxin = dX ? dX + i * G * G : nullptr;
      const double* w = W + ((o * Ci + i) * 9);
      double* dw = dW ? dW + ((o * Ci + i) * 9) : nullptr;
      for (int64_t y = 0; y < G; ++y)
        for (int64_t x = 0; x < G; ++x) {
          double g = dy_o[y * G + x];
          if (g == 0.0) continue;
          for (int dy = -1; dy <= 1; ++dy) {
            int64_t yy = y + dy;
            if (yy < 0 || yy >= G) continue;
            for (int dx = -1; dx <= 1; ++dx) {
              int64_t xx = x + dx;
              if (xx < 0 || xx >= G) continue;
              if (dw) dw[(dy + 1) * 3 + (dx + 1)] += g * xin[yy * G + xx];
              if (dxin) dxin[yy * G + xx] += g * w[(dy + 1) * 3 + (dx + 1)];
            }
          }
        }
    }
  }
}

// Bilinear upsample [C, G, G] -> [C, S, S], pixel-center alignment, edge
// clamped; the backward scatters the same four tap weights.
inline void upsample_bilinear_forward(int64_t C, int64_t G, int64_t S, const double* X,
                                      double* Y) {
  double scale = static_cast<double>(G) / static_cast<double>(S);
  for (int64_t y = 0; y < S; ++y) {
    double fy = (y + 0.5) * scale - 0.5;
    int64_t y0 = static_cast<int64_t>(std::floor(fy));
    double wy = fy - y0;
    int64_t y0c = std::clamp<int64_t>(y0, 0, G - 1), y1c = std::clamp<int64_t>(y0 + 1, 0, G - 1);
    for (int64_t x = 0; x < S; ++x) {
      double fx = (x + 0.5) * scale - 0.5;
      int64_t x0 = static_cast<int64_t>(std::floor(fx));
      double wx = fx - x0;
      int64_t x0c = std::clamp<int64_t>(x0, 0, G - 1), x1c = std::clamp<int64_t>(x0 + 1, 0, G - 1);
      for (int64_t c = 0; c < C; ++c) {
        const double* xc = X + c * G * G;
        Y[(c * S + y) * S + x] = (1 - wy) * ((1 - wx) * xc[y0c * G + x0c] + wx * xc[y0c * G + x1c]) +
                                 wy * ((1 - wx) * xc[y1c * G + x0c] + wx * xc[y1c * G + x1c]);
      }
    }
  }
}

inline void upsample_bilinear_backward(int64_t C, int64_t G, int64_t S, const double* dY,
                                       double* dX) {
  double scale = static_cast<double>(G) / static_cast<double>(S);
  for (int64_t y = 0; y < S; ++y) {
    double fy = (y + 0.5) * scale - 0.5;
    int64_t y0 = static_cast<int64_t>(std::floor(fy));
    double wy = fy - y0;
    int64_t y0c = std::clamp<int64_t>(y0, 0, G - 1), y1c = std::clamp<int64_t>(y0 + 1, 0, G - 1);
    for (int64_t x = 0; x < S; ++x) {
      double fx = (x + 0.5) * scale - 0.5;
      int64_t x0 = static_cast<int64_t>(std::floor(fx));
      double wx = fx - x0;
      int64_t x0c = std::clamp<int64_t>(x0, 0, G - 1), x1c = std::clamp<int64_t>(x0 + 1, 0, G - 1);
      for (int64_t c = 0; c < C; ++c) {
        double g = dY[(c * S + y) * S + x];
        double* xc = dX + c * G * G;
        xc[y0c * G + x0c] += (1 - wy) * (1 - wx) * g;
        xc[y0c * G + x1c] += (1 - wy) * wx * g;
        xc[y1c * G + x0c] += wy * (1 - wx) * g;
        xc[y1c * G + x1c] += wy * wx * g;
      }
    }
  }
}

/// Inverted dropout: keep-probability 1-p, kept activations scaled by
/// 1/(1-p). Mask generation is fully determined by the rng.
inline void dropout_mask(Rng& rng, double p, std::vector<uint8_t>& mask, size_t n) {
  mask.resize(n);
  for (size_t i = 0; i < n; ++i) mask[i] = rng.uniform() >= p ? 1 : 0;
}

inline void dropout_apply(const std::vector<uint8_t>& mask, double p, double* x, size_t n) {
  double scale = 1.0 / (1.0 - p);
  for (size_t i = 0; i < n; ++i) x[i] = mask[i] ? x[i] * scale : 0.0;
}

inline void dropout_backward(const std::vector<uint8_t>& mask, double p, double* dx, size_t n) {
  double scale = 1.0 / (1.0 - p);
  for (size_t i = 0; i < n; ++i) dx[i] = mask[i] ? dx[i] * scale : 0.0;
}

}  // namespace cineseg::nn
