#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "cineseg/common.hpp"

namespace cineseg {

// Dense row-major double tensor. Heavy math below works on raw pointers; this
// type exists to carry shapes around (parameters, gradients, checkpoints).
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  double* ptr() { return data.data(); }
  const double* ptr() const { return data.data(); }
  void zero() { std::fill(data.begin(), data.end(), 0.0); }

  double& at(int64_t i) { return data[static_cast<size_t>(i)]; }
  double& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
  double at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }
};

// Ordered name -> tensor registry. Order is fixed at construction so
// checkpoints, gradient reductions and optimizer sweeps are reproducible.
struct NamedTensors {
  std::vector<std::string> names;
  std::vector<Tensor> tensors;
  std::unordered_map<std::string, size_t> index;

  Tensor& add(const std::string& name, std::vector<int64_t> shape) {
    index.emplace(name, names.size());
    names.push_back(name);
    tensors.emplace_back(std::move(shape));
    return tensors.back();
  }
  bool has(const std::string& name) const { return index.count(name) > 0; }
  Tensor& get(const std::string& name) { return tensors[index.at(name)]; }
  const Tensor& get(const std::string& name) const { return tensors[index.at(name)]; }
  size_t size() const { return names.size(); }

  int64_t total_numel() const {
    int64_t n = 0;
    for (const auto& t : tensors) n += t.numel();
    return n;
  }

  /// Same names/shapes, all zeros.
  NamedTensors zeros_like() const {
    NamedTensors out;
    out.names = names;
    out.index = index;
    out.tensors.reserve(tensors.size());
    for (const auto& t : tensors) out.tensors.emplace_back(t.shape);
    return out;
  }

  void zero_all() {
    for (auto& t : tensors) t.zero();
  }

  void add_scaled(const NamedTensors& other, double scale) {
    for (size_t i = 0; i < tensors.size(); ++i) {
      const double* src = other.tensors[i].ptr();
      double* dst = tensors[i].ptr();
      int64_t n = tensors[i].numel();
      for (int64_t k = 0; k < n; ++k) dst[k] += scale * src[k];
    }
  }
};

// C[M,N] (+)= A[M,K] * B[K,N]
inline void gemm_nn(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C,
                    bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, 0.0);
  for (int64_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    double* c = C + i * N;
    for (int64_t k = 0; k < K; ++k) {
      double av = a[k];
      if (av == 0.0) continue;
      const double* b = B + k * N;
      for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[K,N] (+)= A[M,K]^T * B[M,N]
inline void gemm_tn(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C,
                    bool accumulate) {
  if (!accumulate) std::fill(C, C + K * N, 0.0);
  for (int64_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    const double* b = B + i * N;
    for (int64_t k = 0; k < K; ++k) {
      double av = a[k];
      if (av == 0.0) continue;
      double* c = C + k * N;
      for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,K] (+)= A[M,N] * B[K,N]^T
inline void gemm_nt(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C,
                    bool accumulate) {
  if (!accumulate) std::fill(C, C + M * K, 0.0);
  for (int64_t i = 0; i < M; ++i) {
    const double* a = A + i * N;
    double* c = C + i * K;
    for (int64_t k = 0; k < K; ++k) {
      const double* b = B + k * N;
      double s = 0.0;
      for (int64_t j = 0; j < N; ++j) s += a[j] * b[j];
      c[k] += s;
    }
  }
}

}  // namespace cineseg
