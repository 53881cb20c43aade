#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cineseg/checkpoint.hpp"
#include "cineseg/clinical.hpp"
#include "cineseg/config.hpp"
#include "cineseg/dataset.hpp"
#include "cineseg/losses.hpp"
#include "cineseg/metrics.hpp"
#include "cineseg/model.hpp"
#include "cineseg/optimizer.hpp"
#include "cineseg/preprocess.hpp"

namespace cineseg {

// Seed-stream salts; training rng is derived functionally from
// (seed, epoch, position) so resuming from an epoch boundary replays the
// exact remaining stream without serializing generator state.
constexpr uint64_t kShuffleSalt = 0x5AFEu;
constexpr uint64_t kAugmentSalt = 0xA6A6u;
constexpr uint64_t kDropoutSalt = 0xD0D0u;
constexpr uint64_t kFewShotSalt = 0xF377u;

struct LoadedSubject {
  std::string subject_id;
  Diagnosis diagnosis = Diagnosis::NOR;
  Split split = Split::Train;
  CineVolume ed_norm, es_norm;    // volume-wise z-scored
  LabelVolume ed_label, es_label;
};

struct SampleRef {
  int subject = 0;
  Phase phase = Phase::ED;
  int z = 0;
};

/// In-memory dataset: every volume normalized once at load.
struct Dataset {
  std::vector<LoadedSubject> subjects;

  static Dataset load(const Manifest& manifest, const std::string& root) {
    Dataset d;
    for (const auto& e : manifest.records) d.subjects.push_back(prepare(load_subject(e, root)));
    require_data(!d.subjects.empty(), "dataset is empty");
    return d;
  }

  static Dataset from_records(const std::vector<SubjectRecord>& recs) {
    Dataset d;
    for (const auto& r : recs) d.subjects.push_back(prepare(r));
    return d;
  }

  static LoadedSubject prepare(const SubjectRecord& rec) {
    rec.validate();
    LoadedSubject ls;
    ls.subject_id = rec.subject_id;
    ls.diagnosis = rec.diagnosis;
    ls.split = rec.split;
    ls.ed_norm = normalize_volume(rec.ed_image);
    ls.es_norm = normalize_volume(rec.es_image);
    ls.ed_label = rec.ed_label;
    ls.es_label = rec.es_label;
    return ls;
  }

  std::vector<SampleRef> samples(Split split) const {
    std::vector<SampleRef> out;
    for (int si = 0; si < static_cast<int>(subjects.size()); ++si) {
      if (subjects[si].split != split) continue;
      for (Phase ph : {Phase::ED, Phase::ES}) {
        int depth = ph == Phase::ED ? subjects[si].ed_norm.depth : subjects[si].es_norm.depth;
        for (int z = 0; z < depth; ++z) out.push_back({si, ph, z});
      }
    }
    return out;
  }

  int subject_count(Split split) const {
    int n = 0;
    for (const auto& s : subjects) n += s.split == split ? 1 : 0;
    return n;
  }
};

/// Per-tensor trainability for partial backbone freezing: freezing n > 0
/// blocks also freezes the patch embedding (with its positional table and
/// CLS token, which belong to the embedding stage).
inline std::vector<uint8_t> trainable_mask(const ModelParameters& mp, int freeze_blocks) {
  require_config(freeze_blocks >= 0 && freeze_blocks <= mp.config.depth,
                 "freeze_blocks out of range");
  std::vector<uint8_t> mask(mp.params.size(), 1);
  if (freeze_blocks == 0) return mask;
  for (size_t i = 0; i < mp.params.size(); ++i) {
    const std::string& name = mp.params.names[i];
    bool frozen = name.starts_with("embed.") || name == "pos" || name == "cls";
    if (name.starts_with("block")) {
      int idx = std::atoi(name.c_str() + 5);
      frozen |= idx >= 1 && idx <= freeze_blocks;
    }
    if (frozen) mask[i] = 0;
  }
  return mask;
}

struct EpochStats {
  double total = 0, dice = 0, ce = 0, lovasz = 0, cls = 0;
  double lr_last = 0;
  int steps = 0;
};

struct StepStats {
  int64_t step = 0;
  double total = 0, dice = 0, ce = 0, lovasz = 0, cls = 0, lr = 0;
};

struct ValidationRow {
  std::string subject;
  Phase phase = Phase::ED;
  int structure = 0;  // class id 1..3
  OverlapScores overlap;
  PrecisionRecall pr;
  HausdorffResult hd;
};

struct StructureSummary {
  double dice = 0, iou = 0, precision = 0, recall = 0, hd95 = 0;
  int n = 0, hd_defined = 0;
};

struct ValidationResult {
  double mean_foreground_dice = 0;
  std::vector<ValidationRow> rows;
  ClassificationReport classification;
  bool has_classification = false;
  std::vector<int> cls_preds, cls_labels;
  std::vector<std::vector<double>> cls_probs;
  std::vector<std::string> cls_subjects;

  /// Per-structure means over (subject, phase) rows; undefined distances are
  /// excluded with the defined count retained.
  std::map<int, StructureSummary> summarize() const {
    std::map<int, StructureSummary> out;
    for (const auto& r : rows) {
      auto& s = out[r.structure];
      s.dice += r.overlap.dice;
      s.iou += r.overlap.iou;
      s.precision += r.pr.precision;
      s.recall += r.pr.recall;
      if (r.hd.defined) {
        s.hd95 += r.hd.hd95;
        s.hd_defined += 1;
      }
      s.n += 1;
    }
    for (auto& [cls, s] : out) {
      if (s.n > 0) {
        s.dice /= s.n;
        s.iou /= s.n;
        s.precision /= s.n;
        s.recall /= s.n;
      }
      if (s.hd_defined > 0) s.hd95 /= s.hd_defined;
    }
    return out;
  }
};

using Predictor = std::function<ProbMap(const SliceStack&)>;

/// Segments a (normalized) volume slice by slice at the model resolution.
/// The output label volume carries spacing rescaled by the resize factor so
/// physical measurements stay comparable. Optionally accumulates the
/// slice-averaged disease probabilities.
inline LabelVolume predict_label_volume(const Predictor& predict, int image_size,
                                        const CineVolume& vol_norm, bool tta,
                                        std::vector<double>* disease_probs_sum = nullptr,
                                        const ModelParameters* model_for_cls = nullptr,
                                        bool tta_classification = false) {
  int S = image_size;
  LabelVolume pred;
  pred.height = pred.width = S;
  pred.depth = vol_norm.depth;
  pred.spacing_x = vol_norm.spacing_x * vol_norm.width / S;
  pred.spacing_y = vol_norm.spacing_y * vol_norm.height / S;
  pred.slice_thickness = vol_norm.slice_thickness;
  pred.phase = vol_norm.phase;
  pred.subject_id = vol_norm.subject_id;
  pred.labels.assign(pred.numel(), 0);
  for (int z = 0; z < vol_norm.depth; ++z) {
    SliceStack stack = resize_stack(build_stack(vol_norm, z), S);
    ProbMap probs = tta ? tta_predict(predict, stack) : predict(stack);
    MaskPlane pm = argmax_mask(probs);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) pred.at(x, y, z) = pm.at(x, y);
    if (disease_probs_sum && model_for_cls) {
      auto probs_of = [&](const SliceStack& st) {
        return model_forward(st, *model_for_cls, false, 0).disease_probs;
      };
      std::vector<double> dp = probs_of(stack);
      if (tta_classification) {
        auto hh = probs_of(flip_stack_h(stack));
        auto vv = probs_of(flip_stack_v(stack));
        for (size_t c = 0; c < dp.size(); ++c) dp[c] = (dp[c] + hh[c] + vv[c]) / 3.0;
      }
      for (size_t c = 0; c < dp.size(); ++c) (*disease_probs_sum)[c] += dp[c];
    }
  }
  return pred;
}

/// Nearest-neighbour resample of a label volume's in-plane grid.
inline LabelVolume resize_label_volume(const LabelVolume& lab, int size) {
  LabelVolume out;
  out.height = out.width = size;
  out.depth = lab.depth;
  out.spacing_x = lab.spacing_x * lab.width / size;
  out.spacing_y = lab.spacing_y * lab.height / size;
  out.slice_thickness = lab.slice_thickness;
  out.phase = lab.phase;
  out.subject_id = lab.subject_id;
  out.labels.assign(out.numel(), 0);
  for (int z = 0; z < lab.depth; ++z) {
    MaskPlane m = resize_nearest(extract_label_slice(lab, z), size, size);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) out.at(x, y, z) = m.at(x, y);
  }
  return out;
}

class Trainer {
 public:
  TrainConfig cfg;
  const Dataset* data = nullptr;
  ModelParameters model;
  AdamWState adam;
  std::vector<uint8_t> trainable;
  int64_t step = 0;
  int epoch = 0;  // completed epochs
  double best_val_dice = -1.0;
  int best_epoch = -1;
  int stale_epochs = 0;
  NamedTensors best_params;  // in-memory copy of the best validation weights
  bool has_best = false;

  Trainer(TrainConfig config, const Dataset* dataset) : cfg(std::move(config)), data(dataset) {
    cfg.validate();
    require_data(data != nullptr && !data->subjects.empty(), "trainer needs a dataset");
    train_samples_ = data->samples(Split::Train);
    require_data(!train_samples_.empty(), "training split is empty");
    steps_per_epoch_ =
        static_cast<int>((train_samples_.size() + cfg.batch_size - 1) / cfg.batch_size);
  }

  void init_model() {
    model = ModelParameters::init(cfg.model, cfg.seed);
    adam = AdamWState::init(model.params);
    trainable = trainable_mask(model, cfg.freeze_blocks);
  }

  void load_state(const CheckpointData& ck) {
    model = ModelParameters::build(ck.model_config);
    model.params = ck.params;
    adam.m = ck.adam_m;
    adam.v = ck.adam_v;
    adam.t = ck.adam_t;
    step = ck.step;
    epoch = ck.epoch;
    best_val_dice = ck.best_val_dice;
    best_epoch = ck.best_epoch;
    stale_epochs = ck.stale_epochs;
    cfg.model = ck.model_config;
    trainable = trainable_mask(model, cfg.freeze_blocks);
  }

  CheckpointData snapshot() const {
    CheckpointData ck;
    ck.model_config = model.config;
    ck.params = model.params;
    ck.adam_m = adam.m;
    ck.adam_v = adam.v;
    ck.adam_t = adam.t;
    ck.step = step;
    ck.epoch = epoch;
    ck.best_val_dice = best_val_dice;
    ck.best_epoch = best_epoch;
    ck.stale_epochs = stale_epochs;
    ck.seed = cfg.seed;
    ck.train_config = cfg;
    return ck;
  }

  int steps_per_epoch() const { return steps_per_epoch_; }

  double lr_for_step(int64_t s) const {
    return lr_at(s, static_cast<int64_t>(cfg.warmup_epochs) * steps_per_epoch_,
                 static_cast<int64_t>(cfg.epochs) * steps_per_epoch_, cfg.base_lr);
  }

  /// One full pass over the training split. Per-step loss rows go to
  /// `step_log` when provided.
  EpochStats run_epoch(std::vector<StepStats>* step_log = nullptr) {
    std::vector<SampleRef> order = train_samples_;
    Rng shuffle_rng(mix_seed(cfg.seed, {kShuffleSalt, static_cast<uint64_t>(epoch)}));
    shuffle_rng.shuffle(order);

    int threads = cfg.threads > 0 ? cfg.threads : default_threads();
    EpochStats stats;
    size_t pos = 0;
    int batch_index = 0;
    while (pos < order.size()) {
      size_t bsz = std::min<size_t>(cfg.batch_size, order.size() - pos);
      double lr = lr_for_step(step);

      struct Prepared {
        SliceStack stack;
        MaskPlane mask;
        int subject;
        int diagnosis;
      };
      std::vector<Prepared> prep(bsz);
      std::vector<ForwardCache> caches(bsz);
      std::vector<PredictionBundle> bundles(bsz);

      try {
        parallel_for(bsz, threads, [&](size_t i) {
          const SampleRef& ref = order[pos + i];
          const LoadedSubject& ls = data->subjects[ref.subject];
          const CineVolume& vol = ref.phase == Phase::ED ? ls.ed_norm : ls.es_norm;
          const LabelVolume& lab = ref.phase == Phase::ED ? ls.ed_label : ls.es_label;
          Prepared& p = prep[i];
          p.subject = ref.subject;
          p.diagnosis = static_cast<int>(ls.diagnosis);
          p.stack = resize_stack(build_stack(vol, ref.z), cfg.model.image_size);
          p.mask = resize_nearest(extract_label_slice(lab, ref.z), cfg.model.image_size,
                                  cfg.model.image_size);
          Rng aug_rng(mix_seed(cfg.seed, {kAugmentSalt, static_cast<uint64_t>(epoch),
                                          static_cast<uint64_t>(pos + i)}));
          augment(p.stack, p.mask, cfg.augmentation, aug_rng);
          bundles[i] = model_forward(p.stack, model, true,
                                     mix_seed(cfg.seed, {kDropoutSalt, static_cast<uint64_t>(step),
                                                         static_cast<uint64_t>(i)}),
                                     &caches[i]);
        });
      } catch (const NumericError& e) {
        throw NumericError(strprintf("epoch %d batch %d (first sample: subject %s): %s",
                                     epoch + 1, batch_index,
                                     data->subjects[order[pos].subject].subject_id.c_str(),
                                     e.what()));
      }

      // Segmentation terms per sample; gradients scaled for the batch mean.
      double sum_dice = 0, sum_ce = 0, sum_lov = 0;
      std::vector<std::vector<double>> d_probs(bsz);
      for (size_t i = 0; i < bsz; ++i) {
        const ProbMap& probs = bundles[i].seg_probs;
        ProbMap d_dice(probs.k, probs.h, probs.w), d_lov(probs.k, probs.h, probs.w),
            d_ce(probs.k, probs.h, probs.w);
        sum_dice += soft_dice_loss(probs, prep[i].mask, cfg.loss.dice_eps, &d_dice);
        sum_lov += lovasz_softmax_loss(probs, prep[i].mask, cfg.loss.lovasz_mode, &d_lov);
        sum_ce += cfg.loss.fused_ce ? pixel_ce_loss_fused(bundles[i].seg_logits, prep[i].mask)
                                    : pixel_ce_loss(probs, prep[i].mask);
        pixel_ce_loss(probs, prep[i].mask, &d_ce);
        d_probs[i].resize(probs.v.size());
        double scale = cfg.loss.lambda_seg / static_cast<double>(bsz);
        for (size_t j = 0; j < probs.v.size(); ++j)
          d_probs[i][j] =
              scale * (d_dice.v[j] + d_ce.v[j] + cfg.loss.lambda_lov * d_lov.v[j]);
      }

      // Classification per subject: slice probabilities averaged in
      // probability space before the loss, one term per subject in the batch.
      std::map<int, std::vector<size_t>> groups;
      for (size_t i = 0; i < bsz; ++i) groups[prep[i].subject].push_back(i);
      double sum_cls = 0;
      std::vector<std::vector<double>> d_disease(bsz,
                                                 std::vector<double>(cfg.model.num_disease_classes,
                                                                     0.0));
      for (const auto& [subject, members] : groups) {
        std::vector<double> avg(cfg.model.num_disease_classes, 0.0);
        for (size_t i : members)
          for (size_t c = 0; c < avg.size(); ++c) avg[c] += bundles[i].disease_probs[c];
        for (double& v : avg) v /= static_cast<double>(members.size());
        std::vector<double> d_avg(avg.size(), 0.0);
        sum_cls += label_smooth_ce(avg, prep[members[0]].diagnosis, cfg.loss.label_smoothing,
                                   &d_avg);
        double scale = cfg.loss.lambda_cls /
                       (static_cast<double>(groups.size()) * static_cast<double>(members.size()));
        for (size_t i : members)
          for (size_t c = 0; c < avg.size(); ++c) d_disease[i][c] = scale * d_avg[c];
      }

      double dice = sum_dice / bsz, ce = sum_ce / bsz, lov = sum_lov / bsz;
      double cls = sum_cls / static_cast<double>(groups.size());
      double total = cfg.loss.lambda_seg * (dice + ce + cfg.loss.lambda_lov * lov) +
                     cfg.loss.lambda_cls * cls;
      if (!std::isfinite(total))
        throw NumericError(strprintf(
            "non-finite loss at epoch %d step %lld (batch %d, first subject %s)", epoch + 1,
            static_cast<long long>(step), batch_index,
            data->subjects[prep[0].subject].subject_id.c_str()));

      // Backward into per-worker buffers, reduced in worker order.
      int nt = std::max(1, std::min<int>(threads, static_cast<int>(bsz)));
      std::vector<NamedTensors> worker_grads;
      worker_grads.reserve(nt);
      for (int t = 0; t < nt; ++t) worker_grads.push_back(model.params.zeros_like());
      parallel_chunks(bsz, nt, [&](size_t lo, size_t hi, int tid) {
        for (size_t i = lo; i < hi; ++i)
          model_backward(caches[i], model, d_probs[i], d_disease[i], worker_grads[tid]);
      });
      NamedTensors& grads = worker_grads[0];
      for (int t = 1; t < nt; ++t) grads.add_scaled(worker_grads[t], 1.0);

      AdamWConfig acfg{cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay};
      adamw_step(model.params, grads, adam, acfg, lr, trainable);

      if (step_log) step_log->push_back({step, total, dice, ce, lov, cls, lr});
      stats.total += total;
      stats.dice += dice;
      stats.ce += ce;
      stats.lovasz += lov;
      stats.cls += cls;
      stats.lr_last = lr;
      stats.steps += 1;
      ++step;
      pos += bsz;
      ++batch_index;
    }
    if (stats.steps > 0) {
      stats.total /= stats.steps;
      stats.dice /= stats.steps;
      stats.ce /= stats.steps;
      stats.lovasz /= stats.steps;
      stats.cls /= stats.steps;
    }
    ++epoch;
    return stats;
  }

  Predictor model_predictor() const {
    return [this](const SliceStack& s) { return model_forward(s, model, false, 0).seg_probs; };
  }

  /// Deterministic evaluation over one split. Optional TTA applies to the
  /// segmentation maps; the diagnosis is read from plain forwards unless
  /// `tta_classification` is set. A predictor override disables the
  /// classification block (it only yields segmentation maps).
  ValidationResult validate(Split split, bool tta = false, Predictor override_predictor = {},
                            bool tta_classification = false) const {
    std::vector<const LoadedSubject*> subjects;
    for (const auto& s : data->subjects)
      if (s.split == split) subjects.push_back(&s);
    require_data(!subjects.empty(),
                 strprintf("validation split '%s' is empty", to_string(split)));

    bool use_model = !override_predictor;
    Predictor predict = use_model ? model_predictor() : override_predictor;

    int S = cfg.model.image_size;
    struct SubjectOut {
      std::vector<ValidationRow> rows;
      std::vector<double> disease_sum;
      int disease_n = 0;
    };
    std::vector<SubjectOut> outs(subjects.size());
    int threads = cfg.threads > 0 ? cfg.threads : default_threads();

    parallel_for(subjects.size(), threads, [&](size_t si) {
      const LoadedSubject& ls = *subjects[si];
      SubjectOut& out = outs[si];
      out.disease_sum.assign(cfg.model.num_disease_classes, 0.0);
      for (Phase ph : {Phase::ED, Phase::ES}) {
        const CineVolume& vol = ph == Phase::ED ? ls.ed_norm : ls.es_norm;
        const LabelVolume& lab = ph == Phase::ED ? ls.ed_label : ls.es_label;
        LabelVolume pred = predict_label_volume(predict, S, vol, tta,
                                                use_model ? &out.disease_sum : nullptr,
                                                use_model ? &model : nullptr,
                                                tta_classification);
        if (use_model) out.disease_n += vol.depth;
        LabelVolume gt = resize_label_volume(lab, S);
        for (int cls : kForegroundClasses) {
          ValidationRow row;
          row.subject = ls.subject_id;
          row.phase = ph;
          row.structure = cls;
          BinaryMask pm = mask_for_class(pred, cls), gm = mask_for_class(gt, cls);
          row.overlap = dice_iou(pm, gm);
          row.pr = precision_recall(pm, gm);
          row.hd = hd95(pm, gm, pred.spacing_x, pred.spacing_y, pred.slice_thickness);
          out.rows.push_back(row);
        }
      }
    });

    ValidationResult result;
    for (size_t si = 0; si < subjects.size(); ++si) {
      for (auto& r : outs[si].rows) result.rows.push_back(std::move(r));
      if (use_model && outs[si].disease_n > 0) {
        std::vector<double> avg = outs[si].disease_sum;
        for (double& v : avg) v /= outs[si].disease_n;
        result.cls_probs.push_back(avg);
        result.cls_preds.push_back(argmax_class(avg));
        result.cls_labels.push_back(static_cast<int>(subjects[si]->diagnosis));
        result.cls_subjects.push_back(subjects[si]->subject_id);
      }
    }
    double dice_sum = 0;
    for (const auto& r : result.rows) dice_sum += r.overlap.dice;
    result.mean_foreground_dice = result.rows.empty() ? 0.0 : dice_sum / result.rows.size();
    if (!result.cls_labels.empty()) {
      result.classification = classification_metrics(result.cls_preds, result.cls_labels,
                                                     result.cls_probs,
                                                     cfg.model.num_disease_classes);
      result.has_classification = true;
    }
    return result;
  }

  struct EpochDecision {
    bool improved = false;
    bool stop = false;
  };

  /// Tracks the best validation Dice, keeps rolling/best checkpoints, and
  /// raises the stop signal after `early_stop_patience` epochs without an
  /// improvement above the min delta.
  EpochDecision note_validation(double val_dice, const std::string& run_dir = {}) {
    EpochDecision d;
    if (val_dice > best_val_dice + cfg.early_stop_min_delta) {
      best_val_dice = val_dice;
      best_epoch = epoch;
      stale_epochs = 0;
      best_params = model.params;  // deep copy
      has_best = true;
      d.improved = true;
      if (!run_dir.empty()) save_checkpoint(snapshot(), run_dir + "/best.ckpt");
    } else {
      stale_epochs += 1;
    }
    if (!run_dir.empty() && epoch % cfg.checkpoint_every == 0)
      save_checkpoint(snapshot(), run_dir + "/last.ckpt");
    d.stop = stale_epochs >= cfg.early_stop_patience;
    return d;
  }

  void restore_best() {
    if (has_best) model.params = best_params;
  }

 private:
  std::vector<SampleRef> train_samples_;
  int steps_per_epoch_ = 1;
};

// ---------------------------------------------------------------------------
// Full run driver

struct TrainSummary {
  int epochs_run = 0;
  bool stopped_early = false;
  double best_val_dice = -1;
  int best_epoch = -1;
  EpochStats last_epoch;
};

inline TrainSummary run_training(Trainer& trainer, const std::string& run_dir = {},
                                 std::ostream* steps_csv = nullptr,
                                 std::ostream* epochs_csv = nullptr) {
  if (steps_csv) *steps_csv << "step,total,dice,ce,lovasz,cls,lr\n";
  if (epochs_csv)
    *epochs_csv << "epoch,lr,train_total,train_dice,train_ce,train_lovasz,train_cls,val_dice\n";
  bool has_val_split = trainer.data->subject_count(Split::Val) > 0;
  Split val_split = has_val_split ? Split::Val : Split::Train;

  TrainSummary summary;
  while (trainer.epoch < trainer.cfg.epochs) {
    std::vector<StepStats> steps;
    EpochStats st = trainer.run_epoch(steps_csv ? &steps : nullptr);
    summary.last_epoch = st;
    if (steps_csv)
      for (const auto& s : steps)
        *steps_csv << s.step << ',' << fmt_g(s.total) << ',' << fmt_g(s.dice) << ','
                   << fmt_g(s.ce) << ',' << fmt_g(s.lovasz) << ',' << fmt_g(s.cls) << ','
                   << fmt_g(s.lr) << '\n';

    bool do_val = trainer.epoch % trainer.cfg.val_every == 0 ||
                  trainer.epoch >= trainer.cfg.epochs;
    double val_dice = std::numeric_limits<double>::quiet_NaN();
    Trainer::EpochDecision decision;
    if (do_val) {
      ValidationResult vr = trainer.validate(val_split, trainer.cfg.tta_validation);
      val_dice = vr.mean_foreground_dice;
      decision = trainer.note_validation(val_dice, run_dir);
    } else if (!run_dir.empty() && trainer.epoch % trainer.cfg.checkpoint_every == 0) {
      save_checkpoint(trainer.snapshot(), run_dir + "/last.ckpt");
    }
    if (epochs_csv)
      *epochs_csv << trainer.epoch << ',' << fmt_g(st.lr_last) << ',' << fmt_g(st.total) << ','
                  << fmt_g(st.dice) << ',' << fmt_g(st.ce) << ',' << fmt_g(st.lovasz) << ','
                  << fmt_g(st.cls) << ',' << (std::isnan(val_dice) ? "" : fmt_g(val_dice))
                  << '\n';
    if (decision.stop) {
      summary.stopped_early = true;
      break;
    }
  }
  trainer.restore_best();
  if (!run_dir.empty()) save_checkpoint(trainer.snapshot(), run_dir + "/last.ckpt");
  summary.epochs_run = trainer.epoch;
  summary.best_val_dice = trainer.best_val_dice;
  summary.best_epoch = trainer.best_epoch;
  return summary;
}

// ---------------------------------------------------------------------------
// Few-shot adaptation

struct FewShotPoint {
  int n_subjects = 0;
  double mean_dice = 0;
  ValidationResult scores;
};

/// Reduced-epoch fine-tuning schedule derived from a base configuration.
inline TrainConfig few_shot_config(TrainConfig base) {
  base.epochs = 50;
  base.base_lr = base.base_lr / 2.0;
  base.warmup_epochs = 2;
  base.early_stop_patience = 50;  // run the short schedule to completion
  return base;
}

/// Fine-tunes a base checkpoint on the first `n` shuffled training subjects
/// of the shifted-domain dataset and scores the shifted test split. Subsets
/// are nested across calls with the same seed.
inline FewShotPoint few_shot_finetune(const CheckpointData& base, const Dataset& shifted, int n,
                                      TrainConfig fs_cfg, CheckpointData* adapted_out = nullptr) {
  require_config(n >= 1, "few-shot subset must hold at least one subject");
  std::vector<int> train_ids;
  for (int i = 0; i < static_cast<int>(shifted.subjects.size()); ++i)
    if (shifted.subjects[i].split == Split::Train) train_ids.push_back(i);
  require_data(static_cast<int>(train_ids.size()) >= n,
               strprintf("few-shot subset of %d exceeds the %zu shifted training subjects", n,
                         train_ids.size()));
  Rng rng(mix_seed(fs_cfg.seed, {kFewShotSalt}));
  rng.shuffle(train_ids);
  train_ids.resize(n);

  Dataset subset;
  for (int id : train_ids) subset.subjects.push_back(shifted.subjects[id]);
  for (const auto& s : shifted.subjects)
    if (s.split == Split::Test) subset.subjects.push_back(s);

  // Clamp the batch to the subset so tiny subsets still form batches, and
  // keep the warm-up strictly inside very short schedules.
  int n_samples = static_cast<int>(subset.samples(Split::Train).size());
  fs_cfg.batch_size = std::max(1, std::min(fs_cfg.batch_size, n_samples));
  fs_cfg.warmup_epochs = std::min(fs_cfg.warmup_epochs, fs_cfg.epochs - 1);
  fs_cfg.model = base.model_config;

  Trainer trainer(fs_cfg, &subset);
  trainer.load_state(base);
  trainer.step = 0;
  trainer.epoch = 0;
  trainer.adam = AdamWState::init(trainer.model.params);
  trainer.best_val_dice = -1;
  trainer.stale_epochs = 0;
  run_training(trainer);

  FewShotPoint point;
  point.n_subjects = n;
  point.scores = trainer.validate(Split::Test, fs_cfg.tta_validation);
  point.mean_dice = point.scores.mean_foreground_dice;
  if (adapted_out) *adapted_out = trainer.snapshot();
  return point;
}

}  // namespace cineseg
