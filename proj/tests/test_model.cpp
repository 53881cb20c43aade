#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "cineseg/model.hpp"
#include "cineseg/phantom.hpp"
#include "gradcheck.hpp"

using namespace cineseg;

namespace {

ModelConfig toy_config() { return ModelConfig{}; }  // 56/8/64/12 defaults

SliceStack toy_stack(uint64_t seed, int size = 56) {
  PhantomConfig pc;
  pc.seed = seed;
  SubjectRecord rec = generate_phantom(pc);
  CineVolume norm = normalize_volume(rec.ed_image);
  return resize_stack(build_stack(norm, 5), size);
}

}  // namespace

TEST_CASE("model config validation") {
  ModelConfig bad = toy_config();
  bad.tap_layers = {6, 3, 9, 12};  // unsorted: rejected, never silently reordered
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = toy_config();
  bad.tap_layers = {3, 6, 9, 13};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = toy_config();
  bad.image_size = 55;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = toy_config();
  bad.embed_dim = 63;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_NOTHROW(toy_config().validate());
}

TEST_CASE("token counts follow (S/P)^2") {
  ModelConfig full;
  full.image_size = 224;
  full.patch_size = 14;
  full.embed_dim = 768;
  full.num_heads = 12;
  full.decoder_channels = 256;
  CHECK(full.num_patches() == 256);
  CHECK(full.seq_len() == 257);
  ModelConfig toy = toy_config();
  CHECK(toy.num_patches() == 49);
  CHECK(toy.seq_len() == 50);
}

TEST_CASE("parameter count matches the closed form and a hand-derived value") {
  ModelConfig cfg = toy_config();
  ModelParameters mp = ModelParameters::build(cfg);
  CHECK(mp.params.total_numel() == parameter_count(cfg));

  // Hand derivation for S=56 P=8 D=64 L=12 heads=4 r=4 C=32 K=4 Kd=5:
  int64_t D = 64, H = 256, C = 32;
  int64_t embed = (3 * 64) * D + D;  // 192*64 + 64
  int64_t pos_cls = 50 * D + D;
  int64_t block = 2 * D + 3 * (D * D + D) + (D * D + D) + 2 * D + (D * H + H) + (H * D + D);
  int64_t decoder = 4 * (D * C + C) + 3 * (C * C * 9 + C) + (C * 4 + 4);
  int64_t head = 2 * D + (D * D + D) + (D * 5 + 5);
  CHECK(parameter_count(cfg) == embed + pos_cls + 12 * block + decoder + head);
}

TEST_CASE("zero input with zero projection bias leaves only positional terms") {
  ModelConfig cfg = toy_config();
  ModelParameters mp = ModelParameters::init(cfg, 1);
  SliceStack zeros;
  zeros.h = zeros.w = cfg.image_size;
  for (auto& p : zeros.planes) p = Plane(cfg.image_size, cfg.image_size);
  std::vector<double> tokens = patch_embed(zeros, mp);
  const Tensor& pos = mp.params.get("pos");
  const Tensor& cls = mp.params.get("cls");
  int D = cfg.embed_dim;
  for (int d = 0; d < D; ++d)
    CHECK(tokens[d] == Catch::Approx(cls.data[d] + pos.data[d]).margin(1e-15));
  for (int n = 1; n < cfg.seq_len(); ++n)
    for (int d = 0; d < D; ++d)
      CHECK(tokens[static_cast<size_t>(n) * D + d] ==
            Catch::Approx(pos.data[static_cast<size_t>(n) * D + d]).margin(1e-15));
}

TEST_CASE("attention rows are probability distributions") {
  ModelConfig cfg = toy_config();
  ModelParameters mp = ModelParameters::init(cfg, 2);
  ForwardCache cache;
  model_forward(toy_stack(3), mp, false, 0, &cache);
  int T = cfg.seq_len();
  for (const auto& bc : cache.blocks) {
    REQUIRE(bc.attn.size() == static_cast<size_t>(cfg.num_heads) * T * T);
    for (int h = 0; h < cfg.num_heads; ++h)
      for (int i = 0; i < T; ++i) {
        double sum = 0;
        for (int j = 0; j < T; ++j)
          sum += bc.attn[(static_cast<size_t>(h) * T + i) * T + j];
        CHECK(std::fabs(sum - 1.0) < 1e-6);
      }
  }
}

TEST_CASE("zeroed output projections reduce every block to the identity") {
  ModelConfig cfg = toy_config();
  ModelParameters mp = ModelParameters::init(cfg, 5);
  for (int l = 1; l <= cfg.depth; ++l) {
    std::string b = "block" + std::to_string(l) + ".";
    mp.params.get(b + "attn.wo").zero();
    mp.params.get(b + "attn.bo").zero();
    mp.params.get(b + "mlp.w2").zero();
    mp.params.get(b + "mlp.b2").zero();
  }
  SliceStack s = toy_stack(7);
  std::vector<double> tokens0 = patch_embed(s, mp);
  std::array<std::vector<double>, 4> taps;
  std::vector<double> cls;
  encoder_forward(tokens0, mp, taps, cls);
  int D = cfg.embed_dim, N = cfg.num_patches();
  for (int i = 0; i < 4; ++i)
    for (int n = 0; n < N; ++n)
      for (int d = 0; d < D; ++d)
        CHECK(taps[i][static_cast<size_t>(n) * D + d] ==
              Catch::Approx(tokens0[static_cast<size_t>(n + 1) * D + d]).margin(1e-12));
  for (int d = 0; d < D; ++d) CHECK(cls[d] == Catch::Approx(tokens0[d]).margin(1e-12));
}

TEST_CASE("consistently permuting patch tokens permutes tap features identically") {
  ModelConfig cfg = toy_config();
  ModelParameters mp = ModelParameters::init(cfg, 8);
  int T = cfg.seq_len(), D = cfg.embed_dim, N = cfg.num_patches();
  Rng rng(11);
  std::vector<double> tokens(static_cast<size_t>(T) * D);
  for (auto& v : tokens) v = rng.normal();

  std::vector<int> perm(N);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  std::vector<double> permuted = tokens;
  for (int n = 0; n < N; ++n)
    for (int d = 0; d < D; ++d)
      permuted[static_cast<size_t>(n + 1) * D + d] =
          tokens[static_cast<size_t>(perm[n] + 1) * D + d];

  std::array<std::vector<double>, 4> taps_a, taps_b;
  std::vector<double> cls_a, cls_b;
  encoder_forward(tokens, mp, taps_a, cls_a);
  encoder_forward(permuted, mp, taps_b, cls_b);
  for (int i = 0; i < 4; ++i)
    for (int n = 0; n < N; ++n)
      for (int d = 0; d < D; ++d)
        CHECK(taps_b[i][static_cast<size_t>(n) * D + d] ==
              Catch::Approx(taps_a[i][static_cast<size_t>(perm[n]) * D + d]).margin(1e-10));
  for (int d = 0; d < D; ++d) CHECK(cls_b[d] == Catch::Approx(cls_a[d]).margin(1e-10));
}

TEST_CASE("token/grid reshapes invert each other and keep patch order") {
  int N = 49, D = 8;
  Rng rng(3);
  std::vector<double> tokens(static_cast<size_t>(N) * D);
  for (auto& v : tokens) v = rng.normal();
  auto grid = tokens_to_grid(tokens, N, D);
  REQUIRE(grid.size() == tokens.size());
  auto back = grid_to_tokens(grid, N, D);
  CHECK(back == tokens);

  // The first token (top-left patch) lands at grid position (0,0).
  for (int d = 0; d < D; ++d)
    CHECK(grid[static_cast<size_t>(d) * N + 0] == tokens[static_cast<size_t>(0) * D + d]);

  CHECK_THROWS_AS(tokens_to_grid(std::vector<double>(6 * D), 6, D), DataError);
}

TEST_CASE("pyramid fusion with identity convolutions matches hand computation") {
  ModelConfig cfg;
  cfg.image_size = 2;
  cfg.patch_size = 1;  // 2x2 grid, N=4
  cfg.embed_dim = 4;
  cfg.num_heads = 2;
  cfg.mlp_ratio = 2.0;
  cfg.decoder_channels = 3;
  cfg.dropout = 0.0;
  ModelParameters mp = ModelParameters::init(cfg, 13);
  // Identity-initialize the three fusion convs (centre tap = identity).
  for (int i = 0; i < 3; ++i) {
    std::string base = "decoder.fuse" + std::to_string(cfg.tap_layers[i]) + ".";
    Tensor& w = mp.params.get(base + "weight");
    w.zero();
    int C = cfg.decoder_channels;
    for (int o = 0; o < C; ++o) w.data[((static_cast<size_t>(o) * C + o) * 9) + 4] = 1.0;
    mp.params.get(base + "bias").zero();
  }
  SliceStack s;
  s.h = s.w = 2;
  Rng rng(17);
  for (auto& p : s.planes) {
    p = Plane(2, 2);
    for (auto& v : p.v) v = static_cast<float>(rng.normal());
  }
  ForwardCache fc;
  model_forward(s, mp, false, 0, &fc);
  auto gelu_ref = [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); };
  for (size_t j = 0; j < fc.p[2].size(); ++j)
    CHECK(fc.p[2][j] == Catch::Approx(gelu_ref(fc.lat[2][j] + fc.p[3][j])).margin(1e-12));
  for (size_t j = 0; j < fc.p[1].size(); ++j)
    CHECK(fc.p[1][j] == Catch::Approx(gelu_ref(fc.lat[1][j] + fc.p[2][j])).margin(1e-12));
  // P_12 is the deepest lateral unchanged.
  CHECK(fc.p[3] == fc.lat[3]);
}

TEST_CASE("zero taps with zero biases give zero decoder output") {
  ModelConfig cfg = toy_config();
  cfg.dropout = 0.0;
  ModelParameters mp = ModelParameters::build(cfg);  // all zeros
  SliceStack s;
  s.h = s.w = cfg.image_size;
  for (auto& p : s.planes) p = Plane(cfg.image_size, cfg.image_size);
  PredictionBundle b = model_forward(s, mp);
  for (double v : b.seg_logits.v) CHECK(v == 0.0);
  // Uniform probabilities after softmax over equal logits.
  for (double v : b.seg_probs.v) CHECK(v == Catch::Approx(0.25).margin(1e-12));
}

TEST_CASE("forward output shapes, softmax laws, and eval determinism") {
  ModelConfig cfg = toy_config();
  ModelParameters mp = ModelParameters::init(cfg, 21);
  SliceStack s = toy_stack(22);
  PredictionBundle a = model_forward(s, mp);
  CHECK(a.seg_logits.k == 4);
  CHECK(a.seg_logits.h == cfg.image_size);
  CHECK(a.seg_logits.w == cfg.image_size);
  REQUIRE(a.disease_probs.size() == 5);
  size_t n = static_cast<size_t>(cfg.image_size) * cfg.image_size;
  for (size_t i = 0; i < n; i += 97) {
    double sum = 0;
    for (int c = 0; c < 4; ++c) sum += a.seg_probs.v[c * n + i];
    CHECK(std::fabs(sum - 1.0) < 1e-5);
  }
  double dsum = 0;
  for (double v : a.disease_probs) {
    dsum += v;
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(std::fabs(dsum - 1.0) < 1e-6);

  PredictionBundle b = model_forward(s, mp);
  CHECK(a.seg_probs.v == b.seg_probs.v);  // bitwise equal in eval mode
  CHECK(a.disease_probs == b.disease_probs);
}

TEST_CASE("training dropout is seeded and changes with the seed") {
  ModelConfig cfg = toy_config();
  cfg.dropout = 0.2;
  ModelParameters mp = ModelParameters::init(cfg, 23);
  SliceStack s = toy_stack(24);
  PredictionBundle a1 = model_forward(s, mp, true, 555);
  PredictionBundle a2 = model_forward(s, mp, true, 555);
  PredictionBundle b = model_forward(s, mp, true, 556);
  CHECK(a1.seg_probs.v == a2.seg_probs.v);
  CHECK(a1.seg_probs.v != b.seg_probs.v);
}

TEST_CASE("analytic gradients match finite differences on the tiny model") {
  ModelConfig cfg = gradcheck::tiny_config();
  ModelParameters mp = ModelParameters::init(cfg, 31);
  SliceStack stack;
  MaskPlane mask;
  gradcheck::tiny_sample(stack, mask);
  // All three foreground classes must survive the 16x16 downsample.
  std::array<bool, 4> present = {false, false, false, false};
  for (uint8_t v : mask.v) present[v] = true;
  REQUIRE(present[1]);
  REQUIRE(present[2]);
  REQUIRE(present[3]);

  LossWeights w;
  auto res = gradcheck::run(mp, stack, mask, /*disease=*/2, w, 80, 1e-5, 1e-4, 977);
  INFO("checked " << res.checked << " excluded " << res.excluded << " worst " << res.worst_rel);
  REQUIRE(res.checked > 0);
  CHECK(static_cast<double>(res.passed) >= 0.99 * res.checked);
}
