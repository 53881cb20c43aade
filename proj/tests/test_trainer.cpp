#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "cineseg/phantom.hpp"
#include "cineseg/trainer.hpp"

using namespace cineseg;

namespace {

ModelConfig tiny_model() {
  ModelConfig m;
  m.image_size = 16;
  m.patch_size = 4;
  m.embed_dim = 16;
  m.num_heads = 2;
  m.mlp_ratio = 2.0;
  m.decoder_channels = 8;
  m.dropout = 0.0;
  return m;
}

TrainConfig tiny_config(int epochs, uint64_t seed) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 4;
  cfg.base_lr = 5e-4;
  cfg.warmup_epochs = epochs > 1 ? 1 : 0;
  cfg.val_every = 1;
  cfg.early_stop_patience = 1000;
  cfg.seed = seed;
  cfg.threads = 2;
  cfg.model = tiny_model();
  cfg.augmentation.rotation_p = cfg.augmentation.ssr_p = 0;
  cfg.augmentation.elastic_p = cfg.augmentation.grid_p = 0;
  cfg.augmentation.hflip_p = cfg.augmentation.vflip_p = 0;
  cfg.augmentation.noise_p = 0;
  return cfg;
}

Dataset tiny_dataset(int subjects, uint64_t seed, Split split = Split::Train, int depth = 2) {
  std::vector<SubjectRecord> recs;
  PhantomGrid grid;
  grid.depth = depth;
  for (int i = 0; i < subjects; ++i) {
    Diagnosis diag = static_cast<Diagnosis>(i % kNumDiagnoses);
    PhantomConfig pc = phantom_config_for_class(diag, mix_seed(seed, {(uint64_t)i}),
                                                strprintf("t%02d", i), source_domain(), grid);
    SubjectRecord rec = generate_phantom(pc);
    rec.split = split;
    recs.push_back(std::move(rec));
  }
  return Dataset::from_records(recs);
}

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("learning-rate schedule hits the published anchors") {
  // Table-like configuration: 300 epochs, 5 warm-up, 1 step per epoch.
  int64_t spe = 1, warm = 5 * spe, total = 300 * spe;
  double base = 1e-4;
  CHECK(lr_at(0, warm, total, base) == 0.0);
  CHECK(lr_at(warm, warm, total, base) == Catch::Approx(base).margin(1e-18));
  // Cosine interior follows the closed form exactly.
  int64_t mid = warm + (total - warm) / 2;
  double progress = double(mid - warm) / double(total - warm);
  CHECK(lr_at(mid, warm, total, base) ==
        Catch::Approx(base * 0.5 * (1 + std::cos(M_PI * progress))).margin(1e-18));
  // An even cosine span lands exactly on base/2 at its midpoint.
  CHECK(lr_at(5 + 100, 5, 5 + 200, base) == Catch::Approx(0.5 * base).margin(1e-9 * base));
  // Terminal learning rate is numerically negligible.
  CHECK(lr_at(total - 1, warm, total, base) < 1e-8);
  CHECK(lr_at(total, warm, total, base) == 0.0);

  // Continuity: |lr(s+1) - lr(s)| <= base*(1/warm + pi/(2*(total-warm))).
  double bound = base * (1.0 / warm + M_PI / (2.0 * (total - warm)));
  for (int64_t s = 0; s < total; ++s)
    CHECK(std::fabs(lr_at(s + 1, warm, total, base) - lr_at(s, warm, total, base)) <=
          bound + 1e-18);
}

TEST_CASE("adamw: zero learning rate leaves parameters untouched") {
  ModelParameters mp = ModelParameters::init(tiny_model(), 3);
  NamedTensors before = mp.params;
  NamedTensors grads = mp.params.zeros_like();
  Rng rng(5);
  for (auto& t : grads.tensors)
    for (auto& v : t.data) v = rng.normal();
  AdamWState st = AdamWState::init(mp.params);
  adamw_step(mp.params, grads, st, AdamWConfig{}, 0.0, {});
  for (size_t i = 0; i < mp.params.size(); ++i)
    CHECK(mp.params.tensors[i].data == before.tensors[i].data);
}

TEST_CASE("adamw applies decoupled decay before the moment update") {
  // Single scalar parameter, single step: hand-computed expectation.
  NamedTensors p;
  p.add("w", {1}).data[0] = 2.0;
  NamedTensors g = p.zeros_like();
  g.get("w").data[0] = 0.5;
  AdamWState st = AdamWState::init(p);
  AdamWConfig cfg;  // beta1 0.9, beta2 0.999, eps 1e-8, wd 0.01
  double lr = 0.1;
  adamw_step(p, g, st, cfg, lr, {});
  double theta = 2.0 * (1.0 - lr * 0.01);
  double m = 0.1 * 0.5, v = 0.001 * 0.25;
  double mhat = m / (1 - 0.9), vhat = v / (1 - 0.999);
  theta -= lr * mhat / (std::sqrt(vhat) + 1e-8);
  CHECK(p.get("w").data[0] == Catch::Approx(theta).margin(1e-15));
}

TEST_CASE("trainable mask freezes the requested prefix plus the embedding") {
  ModelParameters mp = ModelParameters::init(tiny_model(), 1);
  auto all = trainable_mask(mp, 0);
  for (uint8_t b : all) CHECK(b == 1);

  auto two = trainable_mask(mp, 2);
  for (size_t i = 0; i < mp.params.size(); ++i) {
    const std::string& name = mp.params.names[i];
    bool expect_frozen = name.starts_with("embed.") || name == "pos" || name == "cls" ||
                         name.starts_with("block1.") || name.starts_with("block2.");
    CHECK(static_cast<bool>(!two[i]) == expect_frozen);
  }

  auto full = trainable_mask(mp, mp.config.depth);
  for (size_t i = 0; i < mp.params.size(); ++i) {
    const std::string& name = mp.params.names[i];
    if (name.starts_with("block") || name.starts_with("embed.") || name == "pos" || name == "cls")
      CHECK(!full[i]);
    else
      CHECK(full[i]);
  }
  CHECK_THROWS_AS(trainable_mask(mp, mp.config.depth + 1), ConfigError);
}

TEST_CASE("frozen blocks stay bit-identical over training steps") {
  Dataset ds = tiny_dataset(2, 10);
  TrainConfig cfg = tiny_config(3, 77);
  cfg.freeze_blocks = 2;
  Trainer tr(cfg, &ds);
  tr.init_model();
  NamedTensors before = tr.model.params;
  tr.run_epoch();
  tr.run_epoch();
  tr.run_epoch();
  bool block3_changed = false;
  for (size_t i = 0; i < tr.model.params.size(); ++i) {
    const std::string& name = tr.model.params.names[i];
    if (name.starts_with("block1.") || name.starts_with("block2.") || name.starts_with("embed.") ||
        name == "pos" || name == "cls") {
      CHECK(tr.model.params.tensors[i].data == before.tensors[i].data);
    }
    if (name.starts_with("block3.") &&
        tr.model.params.tensors[i].data != before.tensors[i].data)
      block3_changed = true;
  }
  CHECK(block3_changed);
}

TEST_CASE("training is reproducible for a fixed seed") {
  Dataset ds = tiny_dataset(2, 20);
  auto run = [&](uint64_t seed) {
    TrainConfig cfg = tiny_config(3, seed);
    cfg.model.dropout = 0.1;  // exercise the seeded dropout path
    cfg.augmentation.hflip_p = 0.5;
    Trainer tr(cfg, &ds);
    tr.init_model();
    std::vector<double> losses;
    for (int e = 0; e < 3; ++e) losses.push_back(tr.run_epoch().total);
    return losses;
  };
  auto a = run(5), b = run(5), c = run(6);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(std::fabs(a[i] - b[i]) < 1e-6);
  CHECK(a != c);
}

TEST_CASE("checkpoints round-trip bitwise and resume reproduces the trajectory") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "cineseg_test_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);

  Dataset ds = tiny_dataset(2, 30);
  TrainConfig cfg = tiny_config(4, 99);

  // Uninterrupted 4-epoch run.
  Trainer full(cfg, &ds);
  full.init_model();
  std::vector<double> full_losses;
  for (int e = 0; e < 4; ++e) full_losses.push_back(full.run_epoch().total);

  // Two-epoch run, checkpoint, reload, continue.
  Trainer first(cfg, &ds);
  first.init_model();
  first.run_epoch();
  first.run_epoch();
  auto ck_path = (dir / "mid.ckpt").string();
  save_checkpoint(first.snapshot(), ck_path);

  // Bitwise round trip.
  CheckpointData loaded = load_checkpoint(ck_path);
  auto ck2_path = (dir / "mid2.ckpt").string();
  save_checkpoint(loaded, ck2_path);
  CHECK(file_bytes(ck_path) == file_bytes(ck2_path));

  Trainer resumed(cfg, &ds);
  resumed.load_state(loaded);
  std::vector<double> tail;
  tail.push_back(resumed.run_epoch().total);
  tail.push_back(resumed.run_epoch().total);
  CHECK(std::fabs(tail[0] - full_losses[2]) < 1e-6);
  CHECK(std::fabs(tail[1] - full_losses[3]) < 1e-6);
}

TEST_CASE("early stopping waits for the patience budget") {
  Dataset ds = tiny_dataset(1, 40);
  TrainConfig cfg = tiny_config(3, 7);
  cfg.early_stop_patience = 10;
  Trainer tr(cfg, &ds);
  tr.init_model();

  // Strictly improving: never stops.
  for (int e = 1; e <= 30; ++e) {
    tr.epoch = e;
    auto d = tr.note_validation(0.01 * e);
    CHECK_FALSE(d.stop);
  }
  CHECK(tr.best_epoch == 30);

  // Flat afterwards: stops exactly after 10 stale epochs.
  bool stopped = false;
  int stop_at = -1;
  for (int e = 31; e <= 60 && !stopped; ++e) {
    tr.epoch = e;
    auto d = tr.note_validation(0.3);  // no improvement beyond min_delta
    stopped = d.stop;
    stop_at = e;
  }
  CHECK(stopped);
  CHECK(stop_at == 40);  // 10 epochs after the epoch-30 best
}

TEST_CASE("restored best parameters reproduce the recorded validation dice") {
  Dataset ds = tiny_dataset(2, 50);
  TrainConfig cfg = tiny_config(3, 13);
  Trainer tr(cfg, &ds);
  tr.init_model();
  TrainSummary s = run_training(tr);
  REQUIRE(s.best_epoch >= 1);
  ValidationResult vr = tr.validate(Split::Train);
  CHECK(vr.mean_foreground_dice == Catch::Approx(s.best_val_dice).margin(1e-12));
}

TEST_CASE("validation is deterministic and accepts a stub predictor") {
  Dataset ds = tiny_dataset(2, 60);
  TrainConfig cfg = tiny_config(2, 15);
  Trainer tr(cfg, &ds);
  tr.init_model();

  ValidationResult v1 = tr.validate(Split::Train);
  ValidationResult v2 = tr.validate(Split::Train);
  CHECK(v1.mean_foreground_dice == v2.mean_foreground_dice);
  REQUIRE(v1.rows.size() == v2.rows.size());
  for (size_t i = 0; i < v1.rows.size(); ++i) {
    CHECK(v1.rows[i].overlap.dice == v2.rows[i].overlap.dice);
    CHECK(v1.rows[i].hd.hd95 == v2.rows[i].hd.hd95);
  }

  // Perfect predictor stub: reads the ground truth straight from the
  // dataset; every overlap score must be exactly 1.
  int S = cfg.model.image_size;
  auto perfect = [&](const SliceStack& stack) {
    ProbMap probs(cfg.model.num_seg_classes, S, S);
    for (const auto& ls : ds.subjects) {
      if (ls.subject_id != stack.subject_id) continue;
      const LabelVolume& lab = stack.phase == Phase::ED ? ls.ed_label : ls.es_label;
      MaskPlane m = resize_nearest(extract_label_slice(lab, stack.center_index), S, S);
      size_t n = static_cast<size_t>(S) * S;
      for (size_t i = 0; i < n; ++i)
        probs.v[static_cast<size_t>(m.v[i]) * n + i] = 1.0;
    }
    return probs;
  };
  ValidationResult vp = tr.validate(Split::Train, false, perfect);
  CHECK(vp.mean_foreground_dice == 1.0);
  CHECK_FALSE(vp.has_classification);  // stub predictors carry no diagnosis head
}

TEST_CASE("validation on an empty split is a data error") {
  Dataset ds = tiny_dataset(2, 70);
  TrainConfig cfg = tiny_config(2, 3);
  Trainer tr(cfg, &ds);
  tr.init_model();
  CHECK_THROWS_AS(tr.validate(Split::Test), DataError);
}

TEST_CASE("few-shot adaptation returns a loadable checkpoint and scores") {
  Dataset shifted = tiny_dataset(3, 80);
  shifted.subjects[2].split = Split::Test;

  TrainConfig cfg = tiny_config(2, 5);
  Trainer base(cfg, &shifted);
  base.init_model();
  base.run_epoch();
  CheckpointData ck = base.snapshot();

  TrainConfig fs_cfg = few_shot_config(cfg);
  fs_cfg.epochs = 2;
  fs_cfg.warmup_epochs = 1;
  fs_cfg.val_every = 2;
  CheckpointData adapted;
  FewShotPoint point = few_shot_finetune(ck, shifted, 2, fs_cfg, &adapted);
  CHECK(point.n_subjects == 2);
  CHECK(point.mean_dice >= 0.0);

  // The adapted checkpoint reloads into a trainer and validates cleanly.
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "cineseg_test_fewshot";
  fs::remove_all(dir);
  fs::create_directories(dir);
  save_checkpoint(adapted, (dir / "adapted.ckpt").string());
  CheckpointData re = load_checkpoint((dir / "adapted.ckpt").string());
  CHECK(re.model_config.image_size == cfg.model.image_size);
  Trainer check(fs_cfg, &shifted);
  check.load_state(re);
  ValidationResult vr = check.validate(Split::Test);
  CHECK(std::isfinite(vr.mean_foreground_dice));

  // Degenerate subset: all training subjects behaves like plain training.
  CheckpointData adapted_full;
  FewShotPoint full = few_shot_finetune(ck, shifted, 2, fs_cfg, &adapted_full);
  CHECK(full.mean_dice == Catch::Approx(point.mean_dice).margin(1e-12));
}

TEST_CASE("non-finite loss aborts with a diagnostic") {
  Dataset ds = tiny_dataset(1, 90);
  TrainConfig cfg = tiny_config(1, 8);
  Trainer tr(cfg, &ds);
  tr.init_model();
  // Poison one weight so the forward pass blows up.
  tr.model.params.get("embed.weight").data[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(tr.run_epoch(), NumericError);
}
