#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "cineseg/nn.hpp"
#include "cineseg/preprocess.hpp"
#include "cineseg/tensor.hpp"

namespace cineseg {

struct ModelConfig {
  int image_size = 56;   // S
  int patch_size = 8;    // P
  int embed_dim = 64;    // D
  int depth = 12;        // L
  int num_heads = 4;
  double mlp_ratio = 4.0;
  int decoder_channels = 32;  // C_out
  std::array<int, 4> tap_layers = {3, 6, 9, 12};
  int num_seg_classes = 4;
  int num_disease_classes = 5;
  double dropout = 0.1;

  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int seq_len() const { return num_patches() + 1; }
  int mlp_hidden() const { return static_cast<int>(embed_dim * mlp_ratio); }
  int head_dim() const { return embed_dim / num_heads; }

  void validate() const {
    require_config(image_size >= 1 && patch_size >= 1 && embed_dim >= 1 && depth >= 1 &&
                       num_heads >= 1 && decoder_channels >= 1,
                   "model dimensions must be positive");
    require_config(image_size % patch_size == 0, "image_size must be divisible by patch_size");
    require_config(embed_dim % num_heads == 0, "embed_dim must be divisible by num_heads");
    require_config(mlp_ratio > 0, "mlp_ratio must be positive");
    require_config(num_seg_classes >= 2, "need at least two segmentation classes");
    require_config(num_disease_classes >= 2, "need at least two disease classes");
    require_config(dropout >= 0 && dropout < 1, "dropout must lie in [0,1)");
    for (int i = 0; i + 1 < 4; ++i)
      require_config(tap_layers[i] < tap_layers[i + 1],
                     "tap_layers must be strictly ascending (no silent reordering)");
    require_config(tap_layers[0] >= 1 && tap_layers[3] <= depth,
                   "tap_layers must lie within [1, depth]");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},
                     {"patch_size", c.patch_size},
                     {"embed_dim", c.embed_dim},
                     {"depth", c.depth},
                     {"num_heads", c.num_heads},
                     {"mlp_ratio", c.mlp_ratio},
                     {"decoder_channels", c.decoder_channels},
                     {"tap_layers", c.tap_layers},
                     {"num_seg_classes", c.num_seg_classes},
                     {"num_disease_classes", c.num_disease_classes},
                     {"dropout", c.dropout}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.image_size = j.value("image_size", c.image_size);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.depth = j.value("depth", c.depth);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.decoder_channels = j.value("decoder_channels", c.decoder_channels);
  if (j.contains("tap_layers")) {
    auto v = j.at("tap_layers");
    require_config(v.is_array() && v.size() == 4, "tap_layers must hold exactly 4 layers");
    for (int i = 0; i < 4; ++i) c.tap_layers[i] = v[i].get<int>();
  }
  c.num_seg_classes = j.value("num_seg_classes", c.num_seg_classes);
  c.num_disease_classes = j.value("num_disease_classes", c.num_disease_classes);
  c.dropout = j.value("dropout", c.dropout);
}

/// Closed-form learnable parameter count; tested against the allocated sizes.
inline int64_t parameter_count(const ModelConfig& c) {
  int64_t D = c.embed_dim, H = c.mlp_hidden(), C = c.decoder_channels;
  int64_t K = c.num_seg_classes, Kd = c.num_disease_classes;
  int64_t patch_in = 3LL * c.patch_size * c.patch_size;
  int64_t per_block = 2 * D                      // ln1
                      + 3 * (D * D + D)          // q,k,v
                      + (D * D + D)              // out projection
                      + 2 * D                    // ln2
                      + (D * H + H) + (H * D + D);  // mlp
  return (patch_in * D + D)                      // patch embedding
         + (c.num_patches() + 1) * D             // positional table
         + D                                     // cls token
         + c.depth * per_block
         + 4 * (D * C + C)                       // lateral 1x1
         + 3 * (C * C * 9 + C)                   // fusion 3x3
         + (C * K + K)                           // segmentation 1x1
         + 2 * D + (D * D + D) + (D * Kd + Kd);  // diagnostic head
}

struct ModelParameters {
  ModelConfig config;
  NamedTensors params;

  static ModelParameters build(const ModelConfig& cfg) {
    cfg.validate();
    ModelParameters mp;
    mp.config = cfg;
    NamedTensors& t = mp.params;
    int64_t D = cfg.embed_dim, H = cfg.mlp_hidden(), C = cfg.decoder_channels;
    int64_t patch_in = 3LL * cfg.patch_size * cfg.patch_size;
    t.add("embed.weight", {patch_in, D});
    t.add("embed.bias", {D});
    t.add("pos", {cfg.num_patches() + 1, D});
    t.add("cls", {D});
    for (int l = 1; l <= cfg.depth; ++l) {
      std::string b = "block" + std::to_string(l) + ".";
      t.add(b + "ln1.gamma", {D});
      t.add(b + "ln1.beta", {D});
      t.add(b + "attn.wq", {D, D});
      t.add(b + "attn.bq", {D});
      t.add(b + "attn.wk", {D, D});
      t.add(b + "attn.bk", {D});
      t.add(b + "attn.wv", {D, D});
      t.add(b + "attn.bv", {D});
      t.add(b + "attn.wo", {D, D});
      t.add(b + "attn.bo", {D});
      t.add(b + "ln2.gamma", {D});
      t.add(b + "ln2.beta", {D});
      t.add(b + "mlp.w1", {D, H});
      t.add(b + "mlp.b1", {H});
      t.add(b + "mlp.w2", {H, D});
      t.add(b + "mlp.b2", {D});
    }
    for (int l : cfg.tap_layers) {
      std::string base = "decoder.lateral" + std::to_string(l) + ".";
      t.add(base + "weight", {C, D});
      t.add(base + "bias", {C});
    }
    for (int i = 0; i < 3; ++i) {
      std::string base = "decoder.fuse" + std::to_string(cfg.tap_layers[i]) + ".";
      t.add(base + "weight", {C, C, 3, 3});
      t.add(base + "bias", {C});
    }
    t.add("decoder.out.weight", {static_cast<int64_t>(cfg.num_seg_classes), C});
    t.add("decoder.out.bias", {static_cast<int64_t>(cfg.num_seg_classes)});
    t.add("head.ln.gamma", {D});
    t.add("head.ln.beta", {D});
    t.add("head.w1", {D, D});
    t.add("head.b1", {D});
    t.add("head.w2", {D, static_cast<int64_t>(cfg.num_disease_classes)});
    t.add("head.b2", {static_cast<int64_t>(cfg.num_disease_classes)});
    return mp;
  }

  /// Truncated-normal (sigma 0.02) weights, zero biases, unit layer norms.
  static ModelParameters init(const ModelConfig& cfg, uint64_t seed) {
    ModelParameters mp = build(cfg);
    Rng rng(mix_seed(seed, {0x1417u}));
    for (size_t i = 0; i < mp.params.size(); ++i) {
      const std::string& name = mp.params.names[i];
      Tensor& t = mp.params.tensors[i];
      bool is_bias = name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with("b1") ||
                     name.ends_with("b2") || name.ends_with("bq") || name.ends_with("bk") ||
                     name.ends_with("bv") || name.ends_with("bo");
      bool is_gamma = name.ends_with(".gamma");
      if (is_gamma) {
        std::fill(t.data.begin(), t.data.end(), 1.0);
      } else if (is_bias) {
        t.zero();
      } else {
        for (double& v : t.data) v = rng.trunc_normal(0.02);
      }
    }
    return mp;
  }
};

/// Token rows [N, D] -> channel-major grid [D, G, G], row-major patch order.
inline std::vector<double> tokens_to_grid(const std::vector<double>& tokens, int N, int D) {
  int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(N))));
  require_data(g * g == N, "tokens_to_grid: token count is not a perfect square");
  std::vector<double> grid(static_cast<size_t>(D) * N);
  for (int n = 0; n < N; ++n)
    for (int d = 0; d < D; ++d)
      grid[static_cast<size_t>(d) * N + n] = tokens[static_cast<size_t>(n) * D + d];
  return grid;
}

inline std::vector<double> grid_to_tokens(const std::vector<double>& grid, int N, int D) {
  std::vector<double> tokens(static_cast<size_t>(N) * D);
  for (int n = 0; n < N; ++n)
    for (int d = 0; d < D; ++d)
      tokens[static_cast<size_t>(n) * D + d] = grid[static_cast<size_t>(d) * N + n];
  return tokens;
}

struct PredictionBundle {
  ProbMap seg_logits;
  ProbMap seg_probs;
  std::vector<double> disease_probs;
  std::vector<double> cls_token;  // final-layer CLS state feeding the head
};

// ---------------------------------------------------------------------------
// Forward cache

namespace detail {

struct BlockCache {
  nn::LayerNormCache ln1, ln2;
  std::vector<double> q, k, v;    // [T*D]
  std::vector<double> attn;       // [heads*T*T] post-softmax
  std::vector<double> ctx;        // [T*D] pre output-projection
  std::vector<double> z_mid;      // [T*D] after MSA residual
  std::vector<double> mlp_pre;    // [T*H]
  std::vector<double> mlp_act;    // [T*H] post-GELU, pre-dropout
  std::vector<uint8_t> mlp_mask;  // dropout mask (training only)
  std::vector<double> z_out;      // [T*D]
};

}  // namespace detail

struct ForwardCache {
  bool training = false;
  std::vector<double> input;    // [3*S*S]
  std::vector<double> patches;  // [N, 3*P*P]
  std::vector<double> tokens0;  // [T*D]
  std::vector<detail::BlockCache> blocks;
  std::array<std::vector<double>, 4> lat_pre;   // [C*N]
  std::array<std::vector<double>, 4> lat;       // [C*N]
  std::array<std::vector<double>, 4> fuse_sum;  // i<3: L_i + P_{i+1}
  std::array<std::vector<double>, 4> fuse_pre;  // conv3x3 output
  std::array<std::vector<double>, 4> p;         // P_l
  std::array<std::vector<uint8_t>, 4> p_mask;
  std::vector<double> seg_logits_small;  // [K*N]
  nn::LayerNormCache head_ln;
  std::vector<double> head_pre;  // [D]
  std::vector<double> head_act;  // [D]
  std::vector<double> disease_probs;
  std::vector<double> seg_probs;  // [K*S*S]
};

// ---------------------------------------------------------------------------
// Forward

/// Flattens non-overlapping P x P patches (channel-major within a patch) and
/// projects them to D, prepends the CLS token, adds positional embeddings.
inline std::vector<double> patch_embed(const SliceStack& stack, const ModelParameters& mp,
                                       std::vector<double>* patches_out = nullptr) {
  const ModelConfig& cfg = mp.config;
  require_data(stack.h == cfg.image_size && stack.w == cfg.image_size,
               strprintf("patch_embed: stack is %dx%d but the model expects %d", stack.h, stack.w,
                         cfg.image_size));
  int P = cfg.patch_size, g = cfg.grid(), N = cfg.num_patches(), D = cfg.embed_dim;
  int patch_in = 3 * P * P;
  std::vector<double> patches(static_cast<size_t>(N) * patch_in);
  for (int pr = 0; pr < g; ++pr)
    for (int pc = 0; pc < g; ++pc) {
      double* dst = &patches[(static_cast<size_t>(pr) * g + pc) * patch_in];
      int i = 0;
      for (int c = 0; c < 3; ++c)
        for (int py = 0; py < P; ++py)
          for (int px = 0; px < P; ++px)
            dst[i++] = stack.planes[c].at(pc * P + px, pr * P + py);
    }
  std::vector<double> tokens(static_cast<size_t>(N + 1) * D);
  const Tensor& E = mp.params.get("embed.weight");
  const Tensor& be = mp.params.get("embed.bias");
  nn::linear_forward(N, patch_in, D, patches.data(), E.ptr(), be.ptr(), tokens.data() + D);
  const Tensor& cls = mp.params.get("cls");
  std::copy(cls.data.begin(), cls.data.end(), tokens.begin());
  const Tensor& pos = mp.params.get("pos");
  for (size_t i = 0; i < tokens.size(); ++i) tokens[i] += pos.data[i];
  if (patches_out) *patches_out = std::move(patches);
  return tokens;
}

namespace detail {

inline void attention_forward(const ModelConfig& cfg, const double* x_ln, const NamedTensors& t,
                              const std::string& prefix, BlockCache& bc,
                              std::vector<double>& msa_out) {
  int T = cfg.seq_len(), D = cfg.embed_dim, h = cfg.num_heads, dk = cfg.head_dim();
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  bc.q.assign(static_cast<size_t>(T) * D, 0.0);
  bc.k.assign(static_cast<size_t>(T) * D, 0.0);
  bc.v.assign(static_cast<size_t>(T) * D, 0.0);
  nn::linear_forward(T, D, D, x_ln, t.get(prefix + "wq").ptr(), t.get(prefix + "bq").ptr(),
                     bc.q.data());
  nn::linear_forward(T, D, D, x_ln, t.get(prefix + "wk").ptr(), t.get(prefix + "bk").ptr(),
                     bc.k.data());
  nn::linear_forward(T, D, D, x_ln, t.get(prefix + "wv").ptr(), t.get(prefix + "bv").ptr(),
                     bc.v.data());
  bc.attn.assign(static_cast<size_t>(h) * T * T, 0.0);
  for (int hh = 0; hh < h; ++hh) {
    int off = hh * dk;
    double* A = &bc.attn[static_cast<size_t>(hh) * T * T];
    for (int i = 0; i < T; ++i)
      for (int j = 0; j < T; ++j) {
        double s = 0;
        const double* qi = &bc.q[static_cast<size_t>(i) * D + off];
        const double* kj = &bc.k[static_cast<size_t>(j) * D + off];
        for (int d = 0; d < dk; ++d) s += qi[d] * kj[d];
        A[static_cast<size_t>(i) * T + j] = s * inv_sqrt;
      }
    nn::softmax_rows(T, T, A);
  }
  bc.ctx.assign(static_cast<size_t>(T) * D, 0.0);
  for (int hh = 0; hh < h; ++hh) {
    int off = hh * dk;
    const double* A = &bc.attn[static_cast<size_t>(hh) * T * T];
    for (int i = 0; i < T; ++i) {
      double* ci = &bc.ctx[static_cast<size_t>(i) * D + off];
      for (int j = 0; j < T; ++j) {
        double a = A[static_cast<size_t>(i) * T + j];
        if (a == 0.0) continue;
        const double* vj = &bc.v[static_cast<size_t>(j) * D + off];
        for (int d = 0; d < dk; ++d) ci[d] += a * vj[d];
      }
    }
  }
  msa_out.assign(static_cast<size_t>(T) * D, 0.0);
  nn::linear_forward(T, D, D, bc.ctx.data(), t.get(prefix + "wo").ptr(),
                     t.get(prefix + "bo").ptr(), msa_out.data());
}

inline void attention_backward(const ModelConfig& cfg, const double* x_ln, const NamedTensors& t,
                               const std::string& prefix, const BlockCache& bc,
                               const double* d_msa_out, double* d_x_ln, NamedTensors& g) {
  int T = cfg.seq_len(), D = cfg.embed_dim, h = cfg.num_heads, dk = cfg.head_dim();
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<double> d_ctx(static_cast<size_t>(T) * D, 0.0);
  nn::linear_backward(T, D, D, bc.ctx.data(), t.get(prefix + "wo").ptr(), d_msa_out, d_ctx.data(),
                      g.get(prefix + "wo").ptr(), g.get(prefix + "bo").ptr());
  std::vector<double> d_q(static_cast<size_t>(T) * D, 0.0), d_k(d_q), d_v(d_q);
  std::vector<double> dA(static_cast<size_t>(T) * T), dS(static_cast<size_t>(T) * T);
  for (int hh = 0; hh < h; ++hh) {
    int off = hh * dk;
    const double* A = &bc.attn[static_cast<size_t>(hh) * T * T];
    // dA = d_ctx * V^T, dV += A^T * d_ctx (head slice)
    for (int i = 0; i < T; ++i)
      for (int j = 0; j < T; ++j) {
        double s = 0;
        const double* dci = &d_ctx[static_cast<size_t>(i) * D + off];
        const double* vj = &bc.v[static_cast<size_t>(j) * D + off];
        for (int d = 0; d < dk; ++d) s += dci[d] * vj[d];
        dA[static_cast<size_t>(i) * T + j] = s;
      }
    for (int j = 0; j < T; ++j) {
      double* dvj = &d_v[static_cast<size_t>(j) * D + off];
      for (int i = 0; i < T; ++i) {
        double a = A[static_cast<size_t>(i) * T + j];
        if (a == 0.0) continue;
        const double* dci = &d_ctx[static_cast<size_t>(i) * D + off];
        for (int d = 0; d < dk; ++d) dvj[d] += a * dci[d];
      }
    }
    std::fill(dS.begin(), dS.end(), 0.0);
    nn::softmax_backward_rows(T, T, A, dA.data(), dS.data());
    for (int i = 0; i < T; ++i) {
      double* dqi = &d_q[static_cast<size_t>(i) * D + off];
      for (int j = 0; j < T; ++j) {
        double s = dS[static_cast<size_t>(i) * T + j] * inv_sqrt;
        if (s == 0.0) continue;
        const double* kj = &bc.k[static_cast<size_t>(j) * D + off];
        double* dkj = &d_k[static_cast<size_t>(j) * D + off];
        const double* qi = &bc.q[static_cast<size_t>(i) * D + off];
        for (int d = 0; d < dk; ++d) {
          dqi[d] += s * kj[d];
          dkj[d] += s * qi[d];
        }
      }
    }
  }
  nn::linear_backward(T, D, D, x_ln, t.get(prefix + "wq").ptr(), d_q.data(), d_x_ln,
                      g.get(prefix + "wq").ptr(), g.get(prefix + "bq").ptr());
  nn::linear_backward(T, D, D, x_ln, t.get(prefix + "wk").ptr(), d_k.data(), d_x_ln,
                      g.get(prefix + "wk").ptr(), g.get(prefix + "bk").ptr());
  nn::linear_backward(T, D, D, x_ln, t.get(prefix + "wv").ptr(), d_v.data(), d_x_ln,
                      g.get(prefix + "wv").ptr(), g.get(prefix + "bv").ptr());
}

}  // namespace detail

/// Runs the L pre-norm residual blocks over an embedded token sequence.
/// Returns the CLS-stripped token states at each tap layer plus the final
/// CLS vector. `cache` must outlive a later model_backward call.
inline void encoder_forward(const std::vector<double>& tokens0, const ModelParameters& mp,
                            std::array<std::vector<double>, 4>& taps, std::vector<double>& cls_out,
                            ForwardCache* cache = nullptr, bool training = false,
                            Rng* drop_rng = nullptr) {
  const ModelConfig& cfg = mp.config;
  int T = cfg.seq_len(), D = cfg.embed_dim, H = cfg.mlp_hidden(), N = cfg.num_patches();
  require_data(static_cast<int>(tokens0.size()) == T * D, "encoder_forward: bad token length");
  const NamedTensors& t = mp.params;

  std::vector<detail::BlockCache> local_blocks;
  std::vector<detail::BlockCache>& blocks = cache ? cache->blocks : local_blocks;
  blocks.assign(cfg.depth, {});

  const std::vector<double>* z_prev = &tokens0;
  for (int l = 1; l <= cfg.depth; ++l) {
    detail::BlockCache& bc = blocks[l - 1];
    std::string b = "block" + std::to_string(l) + ".";
    nn::layernorm_forward(T, D, z_prev->data(), t.get(b + "ln1.gamma").ptr(),
                          t.get(b + "ln1.beta").ptr(), bc.ln1);
    std::vector<double> msa_out;
    detail::attention_forward(cfg, bc.ln1.y.data(), t, b + "attn.", bc, msa_out);
    bc.z_mid.resize(static_cast<size_t>(T) * D);
    for (size_t i = 0; i < bc.z_mid.size(); ++i) bc.z_mid[i] = (*z_prev)[i] + msa_out[i];

    nn::layernorm_forward(T, D, bc.z_mid.data(), t.get(b + "ln2.gamma").ptr(),
                          t.get(b + "ln2.beta").ptr(), bc.ln2);
    bc.mlp_pre.assign(static_cast<size_t>(T) * H, 0.0);
    nn::linear_forward(T, D, H, bc.ln2.y.data(), t.get(b + "mlp.w1").ptr(),
                       t.get(b + "mlp.b1").ptr(), bc.mlp_pre.data());
    bc.mlp_act.resize(bc.mlp_pre.size());
    nn::gelu_forward(bc.mlp_pre.data(), bc.mlp_act.data(), bc.mlp_act.size());
    std::vector<double> act_dropped = bc.mlp_act;
    if (training && cfg.dropout > 0) {
      nn::dropout_mask(*drop_rng, cfg.dropout, bc.mlp_mask, act_dropped.size());
      nn::dropout_apply(bc.mlp_mask, cfg.dropout, act_dropped.data(), act_dropped.size());
    }
    std::vector<double> mlp_out(static_cast<size_t>(T) * D, 0.0);
    nn::linear_forward(T, H, D, act_dropped.data(), t.get(b + "mlp.w2").ptr(),
                       t.get(b + "mlp.b2").ptr(), mlp_out.data());
    bc.z_out.resize(static_cast<size_t>(T) * D);
    for (size_t i = 0; i < bc.z_out.size(); ++i) bc.z_out[i] = bc.z_mid[i] + mlp_out[i];
    z_prev = &bc.z_out;
  }

  for (int i = 0; i < 4; ++i) {
    const auto& z = blocks[cfg.tap_layers[i] - 1].z_out;
    taps[i].assign(z.begin() + D, z.begin() + D + static_cast<size_t>(N) * D);
  }
  const auto& z_last = blocks[cfg.depth - 1].z_out;
  cls_out.assign(z_last.begin(), z_last.begin() + D);
}

/// Full forward pass: 2.5D stack -> segmentation probabilities + diagnosis.
/// Deterministic in evaluation mode; training mode is stochastic only through
/// the dropout rng seed.
inline PredictionBundle model_forward(const SliceStack& stack, const ModelParameters& mp,
                                      bool training = false, uint64_t dropout_seed = 0,
                                      ForwardCache* cache = nullptr) {
  const ModelConfig& cfg = mp.config;
  cfg.validate();
  int S = cfg.image_size, N = cfg.num_patches(), D = cfg.embed_dim, G = cfg.grid();
  int C = cfg.decoder_channels, K = cfg.num_seg_classes, Kd = cfg.num_disease_classes;
  const NamedTensors& t = mp.params;
  Rng drop_rng(mix_seed(dropout_seed, {0xD120u}));

  ForwardCache local;
  ForwardCache& fc = cache ? *cache : local;
  fc.training = training;

  std::vector<double> tokens0 = patch_embed(stack, mp, &fc.patches);
  fc.tokens0 = tokens0;
  std::array<std::vector<double>, 4> taps;
  std::vector<double> cls_final;
  encoder_forward(tokens0, mp, taps, cls_final, &fc, training, &drop_rng);

  // Pyramid decoder: lateral GELU(1x1) per tap, then top-down fusion from the
  // deepest tap; equal tap resolutions make the upsample between levels the
  // identity map.
  for (int i = 0; i < 4; ++i) {
    std::vector<double> grid = tokens_to_grid(taps[i], N, D);
    fc.lat_pre[i].assign(static_cast<size_t>(C) * N, 0.0);
    std::string base = "decoder.lateral" + std::to_string(cfg.tap_layers[i]) + ".";
    nn::conv1x1_forward(D, C, N, grid.data(), t.get(base + "weight").ptr(),
                        t.get(base + "bias").ptr(), fc.lat_pre[i].data());
    fc.lat[i].resize(fc.lat_pre[i].size());
    nn::gelu_forward(fc.lat_pre[i].data(), fc.lat[i].data(), fc.lat[i].size());
  }
  fc.p[3] = fc.lat[3];
  for (int i = 2; i >= 0; --i) {
    fc.fuse_sum[i].resize(fc.lat[i].size());
    for (size_t j = 0; j < fc.lat[i].size(); ++j)
      fc.fuse_sum[i][j] = fc.lat[i][j] + fc.p[i + 1][j];
    std::string base = "decoder.fuse" + std::to_string(cfg.tap_layers[i]) + ".";
    fc.fuse_pre[i].assign(static_cast<size_t>(C) * N, 0.0);
    nn::conv3x3_forward(C, C, G, fc.fuse_sum[i].data(), t.get(base + "weight").ptr(),
                        t.get(base + "bias").ptr(), fc.fuse_pre[i].data());
    fc.p[i].resize(fc.fuse_pre[i].size());
    nn::gelu_forward(fc.fuse_pre[i].data(), fc.p[i].data(), fc.p[i].size());
    if (training && cfg.dropout > 0) {
      nn::dropout_mask(drop_rng, cfg.dropout, fc.p_mask[i], fc.p[i].size());
      nn::dropout_apply(fc.p_mask[i], cfg.dropout, fc.p[i].data(), fc.p[i].size());
    }
  }

  fc.seg_logits_small.assign(static_cast<size_t>(K) * N, 0.0);
  nn::conv1x1_forward(C, K, N, fc.p[0].data(), t.get("decoder.out.weight").ptr(),
                      t.get("decoder.out.bias").ptr(), fc.seg_logits_small.data());

  PredictionBundle out;
  out.seg_logits = ProbMap(K, S, S);
  nn::upsample_bilinear_forward(K, G, S, fc.seg_logits_small.data(), out.seg_logits.v.data());
  out.seg_probs = out.seg_logits;
  {
    // Per-pixel softmax over channels: transpose-free strided pass.
    size_t n = static_cast<size_t>(S) * S;
    for (size_t i = 0; i < n; ++i) {
      double mx = out.seg_probs.v[i];
      for (int c = 1; c < K; ++c) mx = std::max(mx, out.seg_probs.v[c * n + i]);
      double sum = 0;
      for (int c = 0; c < K; ++c) {
        double e = std::exp(out.seg_probs.v[c * n + i] - mx);
        out.seg_probs.v[c * n + i] = e;
        sum += e;
      }
      for (int c = 0; c < K; ++c) out.seg_probs.v[c * n + i] /= sum;
    }
  }

  // Diagnostic head on the final CLS token.
  nn::layernorm_forward(1, D, cls_final.data(), t.get("head.ln.gamma").ptr(),
                        t.get("head.ln.beta").ptr(), fc.head_ln);
  fc.head_pre.assign(D, 0.0);
  nn::linear_forward(1, D, D, fc.head_ln.y.data(), t.get("head.w1").ptr(),
                     t.get("head.b1").ptr(), fc.head_pre.data());
  fc.head_act.resize(D);
  nn::gelu_forward(fc.head_pre.data(), fc.head_act.data(), fc.head_act.size());
  std::vector<double> disease_logits(Kd, 0.0);
  nn::linear_forward(1, D, Kd, fc.head_act.data(), t.get("head.w2").ptr(),
                     t.get("head.b2").ptr(), disease_logits.data());
  out.disease_probs = disease_logits;
  nn::softmax_rows(1, Kd, out.disease_probs.data());
  out.cls_token = cls_final;

  for (double v : out.seg_logits.v)
    if (!std::isfinite(v)) throw NumericError("non-finite segmentation logits");
  for (double v : out.disease_probs)
    if (!std::isfinite(v)) throw NumericError("non-finite diagnosis probabilities");

  fc.disease_probs = out.disease_probs;
  fc.seg_probs = out.seg_probs.v;
  return out;
}

/// Reverse pass. `d_seg_probs`/`d_disease_probs` are gradients w.r.t. the
/// softmax outputs; the softmax backward happens here. Gradients accumulate
/// into `grads` (same registry layout as the parameters).
inline void model_backward(const ForwardCache& fc, const ModelParameters& mp,
                           const std::vector<double>& d_seg_probs,
                           const std::vector<double>& d_disease_probs, NamedTensors& grads) {
  const ModelConfig& cfg = mp.config;
  int S = cfg.image_size, N = cfg.num_patches(), D = cfg.embed_dim, G = cfg.grid();
  int C = cfg.decoder_channels, K = cfg.num_seg_classes, Kd = cfg.num_disease_classes;
  int T = cfg.seq_len(), H = cfg.mlp_hidden();
  const NamedTensors& t = mp.params;

  // Segmentation branch: softmax backward per pixel, then down through the
  // upsample into the decoder.
  std::vector<double> d_logits(static_cast<size_t>(K) * S * S, 0.0);
  {
    size_t n = static_cast<size_t>(S) * S;
    for (size_t i = 0; i < n; ++i) {
      double dot = 0;
      for (int c = 0; c < K; ++c)
        dot += fc.seg_probs[c * n + i] * d_seg_probs[c * n + i];
      for (int c = 0; c < K; ++c)
        d_logits[c * n + i] = fc.seg_probs[c * n + i] * (d_seg_probs[c * n + i] - dot);
    }
  }
  std::vector<double> d_small(static_cast<size_t>(K) * N, 0.0);
  nn::upsample_bilinear_backward(K, G, S, d_logits.data(), d_small.data());

  std::array<std::vector<double>, 4> d_p;
  for (auto& v : d_p) v.assign(static_cast<size_t>(C) * N, 0.0);
  nn::conv1x1_backward(C, K, N, fc.p[0].data(), t.get("decoder.out.weight").ptr(), d_small.data(),
                       d_p[0].data(), grads.get("decoder.out.weight").ptr(),
                       grads.get("decoder.out.bias").ptr());

  std::array<std::vector<double>, 4> d_lat;
  for (auto& v : d_lat) v.assign(static_cast<size_t>(C) * N, 0.0);
  for (int i = 0; i <= 2; ++i) {
    std::vector<double>& dp = d_p[i];
    if (fc.training && cfg.dropout > 0)
      nn::dropout_backward(fc.p_mask[i], cfg.dropout, dp.data(), dp.size());
    std::vector<double> d_fuse_pre(dp.size(), 0.0);
    nn::gelu_backward(fc.fuse_pre[i].data(), dp.data(), d_fuse_pre.data(), dp.size());
    std::string base = "decoder.fuse" + std::to_string(cfg.tap_layers[i]) + ".";
    std::vector<double> d_sum(dp.size(), 0.0);
    nn::conv3x3_backward(C, C, G, fc.fuse_sum[i].data(), t.get(base + "weight").ptr(),
                         d_fuse_pre.data(), d_sum.data(), grads.get(base + "weight").ptr(),
                         grads.get(base + "bias").ptr());
    for (size_t j = 0; j < d_sum.size(); ++j) {
      d_lat[i][j] += d_sum[j];
      d_p[i + 1][j] += d_sum[j];
    }
  }
  d_lat[3] = d_p[3];

  std::array<std::vector<double>, 4> d_taps;
  for (int i = 0; i < 4; ++i) {
    std::vector<double> d_lat_pre(d_lat[i].size(), 0.0);
    nn::gelu_backward(fc.lat_pre[i].data(), d_lat[i].data(), d_lat_pre.data(), d_lat[i].size());
    std::string base = "decoder.lateral" + std::to_string(cfg.tap_layers[i]) + ".";
    // Recompute the tap grid from the cached block output.
    const auto& z = fc.blocks[cfg.tap_layers[i] - 1].z_out;
    std::vector<double> tap_tokens(z.begin() + D, z.begin() + D + static_cast<size_t>(N) * D);
    std::vector<double> grid = tokens_to_grid(tap_tokens, N, D);
    std::vector<double> d_grid(static_cast<size_t>(D) * N, 0.0);
    nn::conv1x1_backward(D, C, N, grid.data(), t.get(base + "weight").ptr(), d_lat_pre.data(),
                         d_grid.data(), grads.get(base + "weight").ptr(),
                         grads.get(base + "bias").ptr());
    d_taps[i] = grid_to_tokens(d_grid, N, D);
  }

  // Diagnostic head backward into the final CLS row.
  std::vector<double> d_cls(D, 0.0);
  {
    std::vector<double> d_dlogits(Kd, 0.0);
    double dot = 0;
    for (int c = 0; c < Kd; ++c) dot += fc.disease_probs[c] * d_disease_probs[c];
    for (int c = 0; c < Kd; ++c)
      d_dlogits[c] = fc.disease_probs[c] * (d_disease_probs[c] - dot);
    std::vector<double> d_act(D, 0.0);
    nn::linear_backward(1, D, Kd, fc.head_act.data(), t.get("head.w2").ptr(), d_dlogits.data(),
                        d_act.data(), grads.get("head.w2").ptr(), grads.get("head.b2").ptr());
    std::vector<double> d_pre(D, 0.0);
    nn::gelu_backward(fc.head_pre.data(), d_act.data(), d_pre.data(), D);
    std::vector<double> d_ln_y(D, 0.0);
    nn::linear_backward(1, D, D, fc.head_ln.y.data(), t.get("head.w1").ptr(), d_pre.data(),
                        d_ln_y.data(), grads.get("head.w1").ptr(), grads.get("head.b1").ptr());
    nn::layernorm_backward(1, D, fc.head_ln, t.get("head.ln.gamma").ptr(), d_ln_y.data(),
                           d_cls.data(), grads.get("head.ln.gamma").ptr(),
                           grads.get("head.ln.beta").ptr());
  }

  // Encoder backward, deepest block first, injecting tap and CLS gradients
  // at the layers where they were read.
  std::vector<double> d_z(static_cast<size_t>(T) * D, 0.0);
  std::copy(d_cls.begin(), d_cls.end(), d_z.begin());
  for (int l = cfg.depth; l >= 1; --l) {
    for (int i = 0; i < 4; ++i)
      if (cfg.tap_layers[i] == l) {
        const auto& dt = d_taps[i];
        for (int n = 0; n < N; ++n)
          for (int d = 0; d < D; ++d)
            d_z[static_cast<size_t>(n + 1) * D + d] += dt[static_cast<size_t>(n) * D + d];
      }
    const detail::BlockCache& bc = fc.blocks[l - 1];
    std::string b = "block" + std::to_string(l) + ".";

    // z_out = z_mid + mlp(...), so d_z feeds both the MLP chain and z_mid.
    std::vector<double> d_act_dropped(static_cast<size_t>(T) * H, 0.0);
    std::vector<double> act_dropped = bc.mlp_act;
    if (fc.training && cfg.dropout > 0)
      nn::dropout_apply(bc.mlp_mask, cfg.dropout, act_dropped.data(), act_dropped.size());
    nn::linear_backward(T, H, D, act_dropped.data(), t.get(b + "mlp.w2").ptr(), d_z.data(),
                        d_act_dropped.data(), grads.get(b + "mlp.w2").ptr(),
                        grads.get(b + "mlp.b2").ptr());
    if (fc.training && cfg.dropout > 0)
      nn::dropout_backward(bc.mlp_mask, cfg.dropout, d_act_dropped.data(), d_act_dropped.size());
    std::vector<double> d_mlp_pre(static_cast<size_t>(T) * H, 0.0);
    nn::gelu_backward(bc.mlp_pre.data(), d_act_dropped.data(), d_mlp_pre.data(), d_mlp_pre.size());
    std::vector<double> d_ln2_y(static_cast<size_t>(T) * D, 0.0);
    nn::linear_backward(T, D, H, bc.ln2.y.data(), t.get(b + "mlp.w1").ptr(), d_mlp_pre.data(),
                        d_ln2_y.data(), grads.get(b + "mlp.w1").ptr(),
                        grads.get(b + "mlp.b1").ptr());
    std::vector<double> d_z_mid = d_z;  // residual path
    nn::layernorm_backward(T, D, bc.ln2, t.get(b + "ln2.gamma").ptr(), d_ln2_y.data(),
                           d_z_mid.data(), grads.get(b + "ln2.gamma").ptr(),
                           grads.get(b + "ln2.beta").ptr());

    // z_mid = z_prev + msa(ln1(z_prev))
    std::vector<double> d_ln1_y(static_cast<size_t>(T) * D, 0.0);
    detail::attention_backward(cfg, bc.ln1.y.data(), t, b + "attn.", bc, d_z_mid.data(),
                               d_ln1_y.data(), grads);
    std::vector<double> d_z_prev = d_z_mid;  // residual path
    nn::layernorm_backward(T, D, bc.ln1, t.get(b + "ln1.gamma").ptr(), d_ln1_y.data(),
                           d_z_prev.data(), grads.get(b + "ln1.gamma").ptr(),
                           grads.get(b + "ln1.beta").ptr());
    d_z = std::move(d_z_prev);
  }

  // Embedding backward: positions, CLS, patch projection.
  {
    double* d_pos = grads.get("pos").ptr();
    for (size_t i = 0; i < d_z.size(); ++i) d_pos[i] += d_z[i];
    double* d_cls_tok = grads.get("cls").ptr();
    for (int d = 0; d < D; ++d) d_cls_tok[d] += d_z[d];
    int patch_in = 3 * cfg.patch_size * cfg.patch_size;
    nn::linear_backward(N, patch_in, D, fc.patches.data(), t.get("embed.weight").ptr(),
                        d_z.data() + D, nullptr, grads.get("embed.weight").ptr(),
                        grads.get("embed.bias").ptr());
  }
}

}  // namespace cineseg
