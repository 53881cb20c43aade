// Command-line surface: phantom generation, training, evaluation, inference,
// clinical reporting, and few-shot adaptation. Exit codes: 0 success,
// 2 config error, 3 data error, 4 numeric failure.

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cineseg/checkpoint.hpp"
#include "cineseg/clinical.hpp"
#include "cineseg/config.hpp"
#include "cineseg/dataset.hpp"
#include "cineseg/phantom.hpp"
#include "cineseg/trainer.hpp"
#include "cineseg/volume.hpp"

namespace fs = std::filesystem;
using namespace cineseg;

namespace {

std::string resolve_data_path(const std::string& path) {
  if (fs::exists(path)) return path;
  const char* root = std::getenv("CINESEG_DATA_ROOT");
  if (root && *root) {
    fs::path candidate = fs::path(root) / path;
    if (fs::exists(candidate)) return candidate.string();
  }
  return path;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  require_data(out.good(), "cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  write_text(path, j.dump(2) + "\n");
}

// One command process per run directory, enforced with an exclusive lock
// file next to the target.
class DirLock {
 public:
  explicit DirLock(const fs::path& target) : path_(target.string() + ".lock") {
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    require_data(fd_ >= 0, "another command holds the lock: " + path_);
  }
  ~DirLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      ::unlink(path_.c_str());
    }
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::string path_;
  int fd_ = -1;
};

// Stage-then-rename run directory: a command either replaces the target
// wholesale or leaves it untouched.
class StagedDir {
 public:
  StagedDir(const fs::path& target, bool force, bool in_place = false)
      : target_(target), in_place_(in_place) {
    if (in_place_) {
      require_data(fs::exists(target_), "cannot resume: " + target_.string() + " does not exist");
      work_ = target_;
      return;
    }
    require_config(force || !fs::exists(target_),
                   "output exists: " + target_.string() + " (use --force to replace)");
    work_ = target_;
    work_ += ".staging";
    fs::remove_all(work_);
    fs::create_directories(work_);
  }

  const fs::path& dir() const { return work_; }

  void commit() {
    if (in_place_) {
      committed_ = true;
      return;
    }
    fs::remove_all(target_);
    fs::rename(work_, target_);
    committed_ = true;
  }

  ~StagedDir() {
    if (!committed_ && !in_place_) fs::remove_all(work_);
  }

 private:
  fs::path target_, work_;
  bool in_place_ = false;
  bool committed_ = false;
};

std::array<int, 3> parse_counts(const std::string& text, int subjects) {
  if (text.empty()) {
    int test = std::max(1, subjects / 5);
    int val = std::max(1, subjects / 5);
    int train = subjects - val - test;
    require_config(train >= 1, "too few subjects for a three-way split");
    return {train, val, test};
  }
  std::array<int, 3> counts;
  if (sscanf(text.c_str(), "%d,%d,%d", &counts[0], &counts[1], &counts[2]) != 3)
    throw ConfigError("--counts expects three comma-separated integers");
  return counts;
}

// ---------------------------------------------------------------------------

struct PhantomArgs {
  std::string out;
  int subjects = 25;
  uint64_t seed = 0;
  int size = 64;
  int slices = 10;
  double spacing = 1.0;
  double thickness = 10.0;
  double noise = -1.0;  // <0: domain default
  std::string domain = "source";
  std::string counts;
  bool force = false;
};

int cmd_phantom(const PhantomArgs& a) {
  require_config(a.subjects >= 1, "--subjects must be >= 1");
  require_config(a.domain == "source" || a.domain == "shifted",
                 "--domain must be 'source' or 'shifted'");
  PhantomDomain dom = a.domain == "shifted" ? shifted_domain() : source_domain();
  if (a.noise >= 0) dom.noise_sigma = a.noise;
  PhantomGrid grid;
  grid.width = grid.height = a.size;
  grid.depth = a.slices;
  grid.spacing_x = grid.spacing_y = a.spacing;
  grid.slice_thickness = a.thickness;

  fs::path target(a.out);
  DirLock lock(target);
  StagedDir staged(target, a.force);
  fs::create_directories(staged.dir() / "volumes");

  std::vector<ManifestEntry> entries;
  nlohmann::json truths = nlohmann::json::object();
  for (int i = 0; i < a.subjects; ++i) {
    Diagnosis diag = static_cast<Diagnosis>(i % kNumDiagnoses);
    std::string id = strprintf("s%03d", i);
    PhantomConfig cfg = phantom_config_for_class(diag, mix_seed(a.seed, {(uint64_t)i}), id, dom,
                                                 grid);
    PhantomTruth truth;
    SubjectRecord rec = generate_phantom(cfg, &truth);
    ManifestEntry e;
    e.subject_id = id;
    e.diagnosis = diag;
    e.ed_image = "volumes/" + id + "_ed.vol";
    e.ed_label = "volumes/" + id + "_ed_gt.vol";
    e.es_image = "volumes/" + id + "_es.vol";
    e.es_label = "volumes/" + id + "_es_gt.vol";
    save_volume(rec.ed_image, (staged.dir() / e.ed_image).string());
    save_label_volume(rec.ed_label, (staged.dir() / e.ed_label).string());
    save_volume(rec.es_image, (staged.dir() / e.es_image).string());
    save_label_volume(rec.es_label, (staged.dir() / e.es_label).string());
    entries.push_back(e);
    truths[id] = {{"lv_edv_ml", truth.lv_edv_ml}, {"lv_esv_ml", truth.lv_esv_ml},
                  {"lv_ef_pct", truth.lv_ef_pct}, {"rv_edv_ml", truth.rv_edv_ml},
                  {"rv_esv_ml", truth.rv_esv_ml}, {"rv_ef_pct", truth.rv_ef_pct},
                  {"myo_ed_ml", truth.myo_ed_ml}, {"lv_mass_g", truth.lv_mass_g},
                  {"diagnosis", to_string(diag)}};
  }
  Manifest manifest = split_manifest(entries, parse_counts(a.counts, a.subjects), a.seed);
  save_manifest(manifest, (staged.dir() / "manifest.json").string());
  write_json(staged.dir() / "analytic_truth.json", truths);
  staged.commit();
  std::cout << "wrote " << a.subjects << " subjects to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string out;
  std::string manifest_override;
  long long seed = -1;
  int threads = -1;
  bool resume = false;
  bool force = false;
};

int cmd_train(const TrainArgs& a) {
  TrainConfig cfg = load_train_config(a.config);
  if (a.seed >= 0) cfg.seed = static_cast<uint64_t>(a.seed);
  if (a.threads >= 0) cfg.threads = a.threads;
  if (!a.manifest_override.empty()) cfg.manifest = a.manifest_override;
  cfg.validate();
  require_config(!cfg.manifest.empty(), "manifest: no dataset manifest configured");

  std::string manifest_path = resolve_data_path(cfg.manifest);
  Manifest manifest = load_manifest(manifest_path);
  Dataset dataset = Dataset::load(manifest, fs::path(manifest_path).parent_path().string());

  fs::path target(a.out);
  DirLock lock(target);
  StagedDir staged(target, a.force, a.resume);

  Trainer trainer(cfg, &dataset);
  if (a.resume) {
    CheckpointData ck = load_checkpoint((staged.dir() / "last.ckpt").string());
    trainer.load_state(ck);
  } else {
    trainer.init_model();
  }
  save_train_config(cfg, (staged.dir() / "config.json").string());

  auto mode = a.resume ? std::ios::app : std::ios::trunc;
  std::ofstream steps((staged.dir() / "steps.csv").string(), mode);
  std::ofstream epochs((staged.dir() / "epochs.csv").string(), mode);

  auto t0 = std::chrono::steady_clock::now();
  TrainSummary summary = run_training(trainer, staged.dir().string(), &steps, &epochs);
  double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  nlohmann::json sj = {{"best_val_dice", summary.best_val_dice},
                       {"best_epoch", summary.best_epoch},
                       {"epochs_run", summary.epochs_run},
                       {"stopped_early", summary.stopped_early},
                       {"steps_per_epoch", trainer.steps_per_epoch()},
                       {"wall_seconds", seconds},
                       {"final_train_loss",
                        {{"total", summary.last_epoch.total},
                         {"dice", summary.last_epoch.dice},
                         {"ce", summary.last_epoch.ce},
                         {"lovasz", summary.last_epoch.lovasz},
                         {"cls", summary.last_epoch.cls}}}};
  write_json(staged.dir() / "summary.json", sj);
  staged.commit();
  std::cout << strprintf("training done: best val dice %.4f at epoch %d (%d epochs, %.1f s)\n",
                         summary.best_val_dice, summary.best_epoch, summary.epochs_run, seconds);
  return 0;
}

// ---------------------------------------------------------------------------

TrainConfig config_from_checkpoint(const CheckpointData& ck) {
  TrainConfig cfg;
  if (!ck.train_config.is_null()) cfg = ck.train_config.get<TrainConfig>();
  cfg.model = ck.model_config;
  return cfg;
}

nlohmann::json summary_block(const std::map<int, StructureSummary>& per_structure) {
  nlohmann::json seg = nlohmann::json::object();
  StructureSummary mean;
  int structures = 0;
  for (const auto& [cls, s] : per_structure) {
    seg[kSegClassNames[cls]] = {{"dice", s.dice},       {"iou", s.iou},
                                {"precision", s.precision}, {"recall", s.recall},
                                {"hd95_mm", s.hd95},    {"n", s.n},
                                {"hd95_defined", s.hd_defined}};
    mean.dice += s.dice;
    mean.iou += s.iou;
    mean.precision += s.precision;
    mean.recall += s.recall;
    mean.hd95 += s.hd95;
    ++structures;
  }
  if (structures > 0) {
    seg["Mean"] = {{"dice", mean.dice / structures},
                   {"iou", mean.iou / structures},
                   {"precision", mean.precision / structures},
                   {"recall", mean.recall / structures},
                   {"hd95_mm", mean.hd95 / structures}};
  }
  return seg;
}

nlohmann::json classification_block(const ClassificationReport& rep) {
  nlohmann::json out = nlohmann::json::object();
  for (int c = 0; c < static_cast<int>(rep.per_class.size()); ++c) {
    const ClassMetrics& m = rep.per_class[c];
    out[to_string(static_cast<Diagnosis>(c))] = {
        {"acc", m.accuracy},     {"prec", m.precision}, {"recall", m.recall},
        {"spec", m.specificity}, {"f1", m.f1},          {"auc", m.auc},
        {"auc_defined", m.auc_defined},
        {"counts", {{"tp", m.counts.tp}, {"fp", m.counts.fp}, {"tn", m.counts.tn},
                    {"fn", m.counts.fn}}}};
  }
  out["Overall"] = {{"acc", rep.overall_accuracy}, {"prec", rep.macro_precision},
                    {"recall", rep.macro_recall},  {"spec", rep.macro_specificity},
                    {"f1", rep.macro_f1},          {"auc", rep.macro_auc}};
  return out;
}

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::string out;
  std::string split = "test";
  bool tta = false;
  bool force = false;
  int threads = -1;
};

int cmd_eval(const EvalArgs& a) {
  CheckpointData ck = load_checkpoint(resolve_data_path(a.checkpoint));
  TrainConfig cfg = config_from_checkpoint(ck);
  if (a.threads >= 0) cfg.threads = a.threads;

  std::string manifest_path = resolve_data_path(a.manifest);
  Manifest manifest = load_manifest(manifest_path);
  Dataset dataset = Dataset::load(manifest, fs::path(manifest_path).parent_path().string());

  Split split = Split::Test;
  if (a.split == "all") {
    for (auto& s : dataset.subjects) s.split = Split::Test;
  } else {
    split = split_from_string(a.split);
  }

  Trainer trainer(cfg, &dataset);
  trainer.load_state(ck);
  ValidationResult vr = trainer.validate(split, a.tta);

  fs::path target(a.out);
  DirLock lock(target);
  StagedDir staged(target, a.force);

  // Per-row segmentation scores.
  std::string csv = "subject,phase,structure,dice,iou,precision,recall,hd95_mm,hd95_defined\n";
  for (const auto& r : vr.rows)
    csv += strprintf("%s,%s,%s,%s,%s,%s,%s,%s,%d\n", r.subject.c_str(), to_string(r.phase),
                     kSegClassNames[r.structure], fmt_g(r.overlap.dice).c_str(),
                     fmt_g(r.overlap.iou).c_str(), fmt_g(r.pr.precision).c_str(),
                     fmt_g(r.pr.recall).c_str(), fmt_g(r.hd.defined ? r.hd.hd95 : -1.0).c_str(),
                     r.hd.defined ? 1 : 0);
  write_text(staged.dir() / "segscores.csv", csv);

  // Clinical indices: predicted vs reference, one row each per subject.
  std::vector<ClinicalIndices> pred_ix, ref_ix;
  Predictor predict = trainer.model_predictor();
  std::string ix_csv =
      "subject,provenance,lv_edv_ml,lv_esv_ml,lvef_pct,rv_edv_ml,rv_esv_ml,rvef_pct,lv_mass_g\n";
  auto ix_row = [&](const ClinicalIndices& ix) {
    ix_csv += strprintf("%s,%s,%s,%s,%s,%s,%s,%s,%s\n", ix.subject_id.c_str(),
                        ix.provenance == Provenance::Predicted ? "predicted" : "reference",
                        fmt_g(ix.lv_edv_ml).c_str(), fmt_g(ix.lv_esv_ml).c_str(),
                        ix.lvef_defined ? fmt_g(ix.lvef_pct).c_str() : "",
                        fmt_g(ix.rv_edv_ml).c_str(), fmt_g(ix.rv_esv_ml).c_str(),
                        ix.rvef_defined ? fmt_g(ix.rvef_pct).c_str() : "",
                        fmt_g(ix.lv_mass_g).c_str());
  };
  for (const auto& ls : dataset.subjects) {
    if (ls.split != split) continue;
    LabelVolume pred_ed = predict_label_volume(predict, cfg.model.image_size, ls.ed_norm, a.tta);
    LabelVolume pred_es = predict_label_volume(predict, cfg.model.image_size, ls.es_norm, a.tta);
    ClinicalIndices pi = compute_indices(pred_ed, pred_es, Provenance::Predicted);
    ClinicalIndices ri = compute_indices(ls.ed_label, ls.es_label, Provenance::Reference);
    pi.subject_id = ri.subject_id = ls.subject_id;
    pred_ix.push_back(pi);
    ref_ix.push_back(ri);
    ix_row(pi);
    ix_row(ri);
  }
  write_text(staged.dir() / "clinical_indices.csv", ix_csv);

  ToleranceReport tol = mae_report(pred_ix, ref_ix);
  std::string tol_csv = "parameter,mae,std,pass_below,fail_above,status,n_pairs\n";
  for (const auto& row : tol.rows)
    tol_csv += strprintf("%s,%s,%s,%s,%s,%s,%d\n", row.parameter.c_str(), fmt_g(row.mae).c_str(),
                         fmt_g(row.std_dev).c_str(), fmt_g(row.band.pass_below).c_str(),
                         fmt_g(row.band.fail_above).c_str(), to_string(row.status), row.n_pairs);
  write_text(staged.dir() / "tolerance.csv", tol_csv);

  nlohmann::json summary;
  summary["split"] = a.split;
  summary["tta"] = a.tta;
  summary["mean_foreground_dice"] = vr.mean_foreground_dice;
  summary["segmentation"] = summary_block(vr.summarize());
  if (vr.has_classification) {
    summary["classification"] = classification_block(vr.classification);
    write_json(staged.dir() / "classification.json", classification_block(vr.classification));
  }
  nlohmann::json tolerance = nlohmann::json::array();
  for (const auto& row : tol.rows)
    tolerance.push_back({{"parameter", row.parameter},
                         {"mae", row.mae},
                         {"std", row.std_dev},
                         {"pass_below", row.band.pass_below},
                         {"fail_above", row.band.fail_above},
                         {"status", to_string(row.status)},
                         {"n_pairs", row.n_pairs}});
  summary["tolerance"] = tolerance;
  write_json(staged.dir() / "summary.json", summary);
  staged.commit();
  std::cout << strprintf("eval: mean foreground dice %.4f over %zu rows\n",
                         vr.mean_foreground_dice, vr.rows.size());
  return 0;
}

// ---------------------------------------------------------------------------

struct InferArgs {
  std::string checkpoint;
  std::vector<std::string> volumes;
  std::string out;
  bool tta = false;
  bool force = false;
};

int cmd_infer(const InferArgs& a) {
  CheckpointData ck = load_checkpoint(resolve_data_path(a.checkpoint));
  ModelParameters model = ModelParameters::build(ck.model_config);
  model.params = ck.params;
  Predictor predict = [&model](const SliceStack& s) {
    return model_forward(s, model, false, 0).seg_probs;
  };

  fs::path target(a.out);
  DirLock lock(target);
  StagedDir staged(target, a.force);
  for (const auto& vp : a.volumes) {
    CineVolume vol = load_volume(resolve_data_path(vp));
    CineVolume norm = normalize_volume(vol);
    LabelVolume pred = predict_label_volume(predict, ck.model_config.image_size, norm, a.tta);
    // Back to the native in-plane grid so the mask overlays the input.
    LabelVolume native;
    native.height = vol.height;
    native.width = vol.width;
    native.depth = vol.depth;
    native.spacing_x = vol.spacing_x;
    native.spacing_y = vol.spacing_y;
    native.slice_thickness = vol.slice_thickness;
    native.phase = vol.phase;
    native.subject_id = vol.subject_id;
    native.labels.assign(native.numel(), 0);
    for (int z = 0; z < vol.depth; ++z) {
      MaskPlane m = resize_nearest(extract_label_slice(pred, z), vol.height, vol.width);
      for (int y = 0; y < vol.height; ++y)
        for (int x = 0; x < vol.width; ++x) native.at(x, y, z) = m.at(x, y);
    }
    std::string stem = fs::path(vp).stem().string();
    save_label_volume(native, (staged.dir() / (stem + "_pred.vol")).string());
  }
  staged.commit();
  std::cout << "segmented " << a.volumes.size() << " volume(s) into " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct ReportArgs {
  std::string checkpoint;
  std::string ed_path, es_path;
  std::string out;
  bool tta = false;
  bool force = false;
};

int cmd_report(const ReportArgs& a) {
  CheckpointData ck = load_checkpoint(resolve_data_path(a.checkpoint));
  ModelParameters model = ModelParameters::build(ck.model_config);
  model.params = ck.params;
  Predictor predict = [&model](const SliceStack& s) {
    return model_forward(s, model, false, 0).seg_probs;
  };

  CineVolume ed = load_volume(resolve_data_path(a.ed_path));
  CineVolume es = load_volume(resolve_data_path(a.es_path));
  require_data(ed.phase == Phase::ED, "--ed volume is not tagged as the ED phase");
  require_data(es.phase == Phase::ES, "--es volume is not tagged as the ES phase");

  CineVolume ed_norm = normalize_volume(ed), es_norm = normalize_volume(es);
  std::vector<double> disease_sum(ck.model_config.num_disease_classes, 0.0);
  LabelVolume pred_ed = predict_label_volume(predict, ck.model_config.image_size, ed_norm, a.tta,
                                             &disease_sum, &model);
  LabelVolume pred_es = predict_label_volume(predict, ck.model_config.image_size, es_norm, a.tta,
                                             &disease_sum, &model);
  for (double& v : disease_sum) v /= (ed.depth + es.depth);

  ClinicalIndices ix = compute_indices(pred_ed, pred_es, Provenance::Predicted);
  ix.subject_id = ed.subject_id;
  ClinicalReport rep = generate_report(ix, disease_sum, ed.subject_id);

  fs::path target(a.out);
  DirLock lock(target);
  StagedDir staged(target, a.force);
  write_text(staged.dir() / "report.txt", rep.text);
  write_json(staged.dir() / "report.json", rep.json);
  staged.commit();
  std::cout << rep.text;
  return 0;
}

// ---------------------------------------------------------------------------

struct FewShotArgs {
  std::string checkpoint;
  std::string manifest;
  std::string out;
  std::string sizes = "5,10,20,50";
  long long seed = -1;
  int epochs = 50;
  int threads = -1;
  bool force = false;
};

int cmd_fewshot(const FewShotArgs& a) {
  CheckpointData ck = load_checkpoint(resolve_data_path(a.checkpoint));
  TrainConfig base_cfg = config_from_checkpoint(ck);
  TrainConfig fs_cfg = few_shot_config(base_cfg);
  fs_cfg.epochs = a.epochs;
  fs_cfg.val_every = a.epochs;  // score once at the end of the short schedule
  fs_cfg.early_stop_patience = a.epochs;
  if (a.seed >= 0) fs_cfg.seed = static_cast<uint64_t>(a.seed);
  if (a.threads >= 0) fs_cfg.threads = a.threads;

  std::string manifest_path = resolve_data_path(a.manifest);
  Manifest manifest = load_manifest(manifest_path);
  Dataset shifted = Dataset::load(manifest, fs::path(manifest_path).parent_path().string());

  std::vector<int> sizes;
  {
    std::stringstream ss(a.sizes);
    std::string tok;
    while (std::getline(ss, tok, ',')) sizes.push_back(std::stoi(tok));
    require_config(!sizes.empty(), "--sizes must name at least one subset size");
  }

  fs::path target(a.out);
  DirLock lock(target);
  StagedDir staged(target, a.force);

  std::string csv =
      "n,mean_dice,mean_iou,mean_hd95,rv_dice,rv_iou,rv_hd95,myo_dice,myo_iou,myo_hd95,"
      "lv_dice,lv_iou,lv_hd95\n";
  nlohmann::json points = nlohmann::json::array();
  for (int n : sizes) {
    CheckpointData adapted;
    FewShotPoint point = few_shot_finetune(ck, shifted, n, fs_cfg, &adapted);
    save_checkpoint(adapted, (staged.dir() / strprintf("adapted_%d.ckpt", n)).string());
    auto per = point.scores.summarize();
    auto row = [&](int cls) { return per.count(cls) ? per[cls] : StructureSummary{}; };
    StructureSummary lv = row(kLeftVentricle), myo = row(kMyocardium), rv = row(kRightVentricle);
    StructureSummary mean;
    mean.dice = (lv.dice + myo.dice + rv.dice) / 3.0;
    mean.iou = (lv.iou + myo.iou + rv.iou) / 3.0;
    mean.hd95 = (lv.hd95 + myo.hd95 + rv.hd95) / 3.0;
    csv += strprintf("%d,%s,%s,%s,%s,%s,%s,%s,%s,%s,%s,%s,%s\n", n, fmt_g(mean.dice).c_str(),
                     fmt_g(mean.iou).c_str(), fmt_g(mean.hd95).c_str(), fmt_g(rv.dice).c_str(),
                     fmt_g(rv.iou).c_str(), fmt_g(rv.hd95).c_str(), fmt_g(myo.dice).c_str(),
                     fmt_g(myo.iou).c_str(), fmt_g(myo.hd95).c_str(), fmt_g(lv.dice).c_str(),
                     fmt_g(lv.iou).c_str(), fmt_g(lv.hd95).c_str());
    points.push_back({{"n", n},
                      {"mean_dice", point.mean_dice},
                      {"segmentation", summary_block(per)}});
    std::cout << strprintf("fewshot n=%d: mean dice %.4f\n", n, point.mean_dice);
  }
  write_text(staged.dir() / "fewshot.csv", csv);
  write_json(staged.dir() / "summary.json", {{"points", points}});
  staged.commit();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cineseg: cardiac cine MRI segmentation, diagnosis, and functional indices"};
  app.require_subcommand(1);

  PhantomArgs pa;
  auto* phantom = app.add_subcommand("phantom", "generate an analytic phantom dataset");
  phantom->add_option("--out", pa.out, "output dataset directory")->required();
  phantom->add_option("--subjects", pa.subjects, "number of subjects");
  phantom->add_option("--seed", pa.seed, "rng seed");
  phantom->add_option("--size", pa.size, "in-plane size in pixels");
  phantom->add_option("--slices", pa.slices, "slices per volume");
  phantom->add_option("--spacing", pa.spacing, "in-plane spacing in mm");
  phantom->add_option("--thickness", pa.thickness, "slice thickness in mm");
  phantom->add_option("--noise", pa.noise, "intensity noise sigma (domain default if unset)");
  phantom->add_option("--domain", pa.domain, "intensity domain: source | shifted");
  phantom->add_option("--counts", pa.counts, "train,val,test subject counts");
  phantom->add_flag("--force", pa.force, "replace an existing output directory");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a model from an experiment config");
  train->add_option("--config", ta.config, "experiment config JSON")->required();
  train->add_option("--out", ta.out, "run directory")->required();
  train->add_option("--seed", ta.seed, "override the config seed");
  train->add_option("--threads", ta.threads, "worker threads (0 = auto)");
  train->add_option("--manifest", ta.manifest_override, "override the config manifest path");
  train->add_flag("--resume", ta.resume, "resume from <out>/last.ckpt");
  train->add_flag("--force", ta.force, "replace an existing run directory");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint against a manifest");
  eval->add_option("--checkpoint", ea.checkpoint, "model checkpoint")->required();
  eval->add_option("--manifest", ea.manifest, "dataset manifest")->required();
  eval->add_option("--out", ea.out, "report directory")->required();
  eval->add_option("--split", ea.split, "train | val | test | all");
  eval->add_flag("--tta", ea.tta, "three-view test-time augmentation");
  eval->add_option("--threads", ea.threads, "worker threads");
  eval->add_flag("--force", ea.force, "replace an existing report directory");

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "segment volumes with a checkpoint");
  infer->add_option("--checkpoint", ia.checkpoint, "model checkpoint")->required();
  infer->add_option("--volume", ia.volumes, "input volume(s)")->required();
  infer->add_option("--out", ia.out, "output directory")->required();
  infer->add_flag("--tta", ia.tta, "three-view test-time augmentation");
  infer->add_flag("--force", ia.force, "replace an existing output directory");

  ReportArgs ra;
  auto* report = app.add_subcommand("report", "clinical report for an ED/ES pair");
  report->add_option("--checkpoint", ra.checkpoint, "model checkpoint")->required();
  report->add_option("--ed", ra.ed_path, "end-diastolic volume")->required();
  report->add_option("--es", ra.es_path, "end-systolic volume")->required();
  report->add_option("--out", ra.out, "report directory")->required();
  report->add_flag("--tta", ra.tta, "three-view test-time augmentation");
  report->add_flag("--force", ra.force, "replace an existing report directory");

  FewShotArgs fa;
  auto* fewshot = app.add_subcommand("fewshot", "few-shot adaptation study");
  fewshot->add_option("--checkpoint", fa.checkpoint, "base model checkpoint")->required();
  fewshot->add_option("--manifest", fa.manifest, "shifted-domain manifest")->required();
  fewshot->add_option("--out", fa.out, "study directory")->required();
  fewshot->add_option("--sizes", fa.sizes, "comma-separated subset sizes");
  fewshot->add_option("--seed", fa.seed, "override the study seed");
  fewshot->add_option("--epochs", fa.epochs, "fine-tuning epochs per subset");
  fewshot->add_option("--threads", fa.threads, "worker threads");
  fewshot->add_flag("--force", fa.force, "replace an existing study directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*phantom) return cmd_phantom(pa);
    if (*train) return cmd_train(ta);
    if (*eval) return cmd_eval(ea);
    if (*infer) return cmd_infer(ia);
    if (*report) return cmd_report(ra);
    if (*fewshot) return cmd_fewshot(fa);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
