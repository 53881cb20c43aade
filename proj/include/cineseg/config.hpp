#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "cineseg/losses.hpp"
#include "cineseg/model.hpp"
#include "cineseg/preprocess.hpp"

namespace cineseg {

inline void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"lambda_seg", w.lambda_seg},
                     {"lambda_lov", w.lambda_lov},
                     {"lambda_cls", w.lambda_cls},
                     {"label_smoothing", w.label_smoothing},
                     {"dice_eps", w.dice_eps},
                     {"lovasz_mode",
                      w.lovasz_mode == LovaszMode::PresentForeground ? "present" : "all"},
                     {"fused_ce", w.fused_ce}};
}

inline void from_json(const nlohmann::json& j, LossWeights& w) {
  w.lambda_seg = j.value("lambda_seg", w.lambda_seg);
  w.lambda_lov = j.value("lambda_lov", w.lambda_lov);
  w.lambda_cls = j.value("lambda_cls", w.lambda_cls);
  w.label_smoothing = j.value("label_smoothing", w.label_smoothing);
  w.dice_eps = j.value("dice_eps", w.dice_eps);
  if (j.contains("lovasz_mode")) {
    std::string m = j["lovasz_mode"].get<std::string>();
    if (m == "present") w.lovasz_mode = LovaszMode::PresentForeground;
    else if (m == "all") w.lovasz_mode = LovaszMode::AllForeground;
    else throw ConfigError("loss.lovasz_mode: expected 'present' or 'all', got '" + m + "'");
  }
  w.fused_ce = j.value("fused_ce", w.fused_ce);
}

inline void to_json(nlohmann::json& j, const AugmentationConfig& a) {
  j = nlohmann::json{{"rotation_deg", a.rotation_deg},
                     {"rotation_p", a.rotation_p},
                     {"ssr_shift", a.ssr_shift},
                     {"ssr_scale", a.ssr_scale},
                     {"ssr_rotate_deg", a.ssr_rotate_deg},
                     {"ssr_p", a.ssr_p},
                     {"elastic_alpha", a.elastic_alpha},
                     {"elastic_sigma", a.elastic_sigma},
                     {"elastic_alpha_affine", a.elastic_alpha_affine},
                     {"elastic_p", a.elastic_p},
                     {"grid_num_steps", a.grid_num_steps},
                     {"grid_distort_limit", a.grid_distort_limit},
                     {"grid_p", a.grid_p},
                     {"hflip_p", a.hflip_p},
                     {"vflip_p", a.vflip_p},
                     {"noise_var_min", a.noise_var_min},
                     {"noise_var_max", a.noise_var_max},
                     {"noise_scale", a.noise_scale},
                     {"noise_p", a.noise_p},
                     {"rng_seed", a.rng_seed}};
}

inline void from_json(const nlohmann::json& j, AugmentationConfig& a) {
  a.rotation_deg = j.value("rotation_deg", a.rotation_deg);
  a.rotation_p = j.value("rotation_p", a.rotation_p);
  a.ssr_shift = j.value("ssr_shift", a.ssr_shift);
  a.ssr_scale = j.value("ssr_scale", a.ssr_scale);
  a.ssr_rotate_deg = j.value("ssr_rotate_deg", a.ssr_rotate_deg);
  a.ssr_p = j.value("ssr_p", a.ssr_p);
  a.elastic_alpha = j.value("elastic_alpha", a.elastic_alpha);
  a.elastic_sigma = j.value("elastic_sigma", a.elastic_sigma);
  a.elastic_alpha_affine = j.value("elastic_alpha_affine", a.elastic_alpha_affine);
  a.elastic_p = j.value("elastic_p", a.elastic_p);
  a.grid_num_steps = j.value("grid_num_steps", a.grid_num_steps);
  a.grid_distort_limit = j.value("grid_distort_limit", a.grid_distort_limit);
  a.grid_p = j.value("grid_p", a.grid_p);
  a.hflip_p = j.value("hflip_p", a.hflip_p);
  a.vflip_p = j.value("vflip_p", a.vflip_p);
  a.noise_var_min = j.value("noise_var_min", a.noise_var_min);
  a.noise_var_max = j.value("noise_var_max", a.noise_var_max);
  a.noise_scale = j.value("noise_scale", a.noise_scale);
  a.noise_p = j.value("noise_p", a.noise_p);
  a.rng_seed = j.value("rng_seed", a.rng_seed);
}

/// The unit of reproducibility: one JSON file holding everything a run needs
/// besides the dataset itself.
struct TrainConfig {
  int epochs = 300;
  int batch_size = 24;
  double base_lr = 1e-4;
  int warmup_epochs = 5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int checkpoint_every = 5;   // epochs between rolling checkpoints
  int early_stop_patience = 30;
  double early_stop_min_delta = 1e-4;
  int val_every = 1;          // epochs between validation passes
  uint64_t seed = 0;
  int threads = 0;            // 0 = auto (capped at 4)
  int freeze_blocks = 0;
  bool tta_validation = false;
  bool mixed_precision = false;  // pass-through flag; full precision at desk scale
  std::string manifest;
  LossWeights loss;
  ModelConfig model;
  AugmentationConfig augmentation;

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ConfigError(field + ": " + why);
    };
    if (epochs < 1) fail("epochs", "must be >= 1");
    if (batch_size < 1) fail("batch_size", "must be >= 1");
    if (!(base_lr > 0)) fail("base_lr", "must be positive");
    if (warmup_epochs < 0) fail("warmup_epochs", "must be >= 0");
    if (warmup_epochs >= epochs) fail("warmup_epochs", "must be smaller than epochs");
    if (weight_decay < 0) fail("weight_decay", "must be >= 0");
    if (beta1 < 0 || beta1 >= 1) fail("beta1", "must lie in [0,1)");
    if (beta2 < 0 || beta2 >= 1) fail("beta2", "must lie in [0,1)");
    if (checkpoint_every < 1) fail("checkpoint_every", "must be >= 1");
    if (early_stop_patience < 1) fail("early_stop_patience", "must be >= 1");
    if (val_every < 1) fail("val_every", "must be >= 1");
    if (freeze_blocks < 0 || freeze_blocks > model.depth)
      fail("freeze_blocks", "must lie in [0, model.depth]");
    try {
      loss.validate();
    } catch (const ConfigError& e) {
      fail("loss", e.what());
    }
    try {
      model.validate();
    } catch (const ConfigError& e) {
      fail("model", e.what());
    }
    try {
      augmentation.validate();
    } catch (const ConfigError& e) {
      fail("augmentation", e.what());
    }
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"base_lr", c.base_lr},
                     {"warmup_epochs", c.warmup_epochs},
                     {"weight_decay", c.weight_decay},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"adam_eps", c.adam_eps},
                     {"checkpoint_every", c.checkpoint_every},
                     {"early_stop_patience", c.early_stop_patience},
                     {"early_stop_min_delta", c.early_stop_min_delta},
                     {"val_every", c.val_every},
                     {"seed", c.seed},
                     {"threads", c.threads},
                     {"freeze_blocks", c.freeze_blocks},
                     {"tta_validation", c.tta_validation},
                     {"mixed_precision", c.mixed_precision},
                     {"manifest", c.manifest},
                     {"loss", c.loss},
                     {"model", c.model},
                     {"augmentation", c.augmentation}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.early_stop_min_delta = j.value("early_stop_min_delta", c.early_stop_min_delta);
  c.val_every = j.value("val_every", c.val_every);
  c.seed = j.value("seed", c.seed);
  c.threads = j.value("threads", c.threads);
  c.freeze_blocks = j.value("freeze_blocks", c.freeze_blocks);
  c.tta_validation = j.value("tta_validation", c.tta_validation);
  c.mixed_precision = j.value("mixed_precision", c.mixed_precision);
  c.manifest = j.value("manifest", c.manifest);
  if (j.contains("loss")) c.loss = j["loss"].get<LossWeights>();
  if (j.contains("model")) c.model = j["model"].get<ModelConfig>();
  if (j.contains("augmentation")) c.augmentation = j["augmentation"].get<AugmentationConfig>();
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  require_config(in.good(), "cannot open config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("unparseable config: ") + e.what());
  }
  TrainConfig cfg;
  try {
    cfg = j.get<TrainConfig>();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config schema violation: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

inline void save_train_config(const TrainConfig& cfg, const std::string& path) {
  nlohmann::json j = cfg;
  std::ofstream out(path, std::ios::trunc);
  require_data(out.good(), "cannot write config: " + path);
  out << j.dump(2) << "\n";
}

}  // namespace cineseg
