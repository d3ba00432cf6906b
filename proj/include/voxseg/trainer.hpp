#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "voxseg/blocks.hpp"
#include "voxseg/metrics.hpp"
#include "voxseg/pipeline.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

// ---------------------------------------------------------------------------
// Training configuration: the full training recipe as defaults (Adam at 5e-4,
// 500 epochs, plateau x0.1 with patience 10, +-10 degree rotations and
// per-axis flips).
// ---------------------------------------------------------------------------

struct TrainConfig {
  ModelConfig model;
  double lr = 5e-4;
  int epochs = 500;
  int plateau_patience = 10;
  double plateau_factor = 0.1;
  double min_lr = 1e-7;
  double improvement_eps = 1e-6;  // val loss must beat the best by this much
  int batch_size = 2;
  std::uint64_t seed = 0;
  std::string loss = "combined";  // combined | dice | bce
  Shape patch_dims{48, 64, 48};
  double max_rotation_deg = 10.0;
  double flip_prob = 0.5;
  bool augment = true;
};

void validate_train_config(const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Optimizer and LR schedule
// ---------------------------------------------------------------------------

struct AdamState {
  std::map<std::string, Tensor> m;  // first-moment buffer per parameter name
  std::map<std::string, Tensor> v;  // second-moment buffer
  std::int64_t t = 0;               // completed steps
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// One bias-corrected Adam update over the named parameters. Gradients must
/// be populated (StateError otherwise); moment buffers are created lazily.
void adam_step(const std::vector<NamedTensor>& params, AdamState& state, double lr);

struct PlateauTracker {
  double best_val_loss = -1.0;  // negative = "no best yet" (serializable)
  int epochs_since_improvement = 0;
  double current_lr = 5e-4;
  double factor = 0.1;
  double min_lr = 1e-7;
  int patience = 10;
  double improvement_eps = 1e-6;
};

/// Feed one epoch's validation loss; returns the (possibly reduced) lr to
/// use from the next epoch on. The lr drops by `factor` exactly when
/// `patience` consecutive non-improving epochs accumulate, then the counter
/// resets; the lr never goes below `min_lr`.
double plateau_update(PlateauTracker& tracker, double val_loss);

// ---------------------------------------------------------------------------
// Datasets and training state
// ---------------------------------------------------------------------------

struct Case {
  Volume image;
  LabelMap labels;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;  // lr in effect during this epoch
};

/// Everything needed to resume training exactly: parameters, BN running
/// stats, Adam moments, step/epoch counters and the plateau tracker.
struct TrainerState {
  Model model;
  AdamState adam;
  std::int64_t step = 0;
  int epoch = 0;  // completed epochs
  PlateauTracker plateau;
};

/// Fresh state for a config: seeded model build plus recipe-initialized
/// optimizer and tracker.
TrainerState init_state(const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Checkpoints: "VXCKPT01" magic, length-prefixed JSON manifest (format
// version, model config, counters, plateau state, tensor directory), then
// concatenated little-endian float32 blobs. Round trips are bit-exact.
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const TrainerState& state);

TrainerState load_checkpoint(const std::string& path);

/// Load and verify the stored model config matches `expect` exactly
/// (CheckpointError otherwise).
TrainerState load_checkpoint(const std::string& path, const ModelConfig& expect);

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct FoldResult {
  std::vector<EpochRecord> history;  // epochs run by this call
  double best_val_loss = -1.0;
  int best_epoch = 0;
  Model best_model;  // parameters at the best validation epoch
};

/// Train fold `fold_index` of the split: validates on that fold, trains on
/// the other eight. Continues from `state` (fresh from init_state or a loaded
/// checkpoint) until cfg.epochs. When out_dir is non-empty, writes
/// history.jsonl (append per epoch), last.ckpt (every epoch) and best.ckpt
/// (on validation improvement). Aborts with NumericalError on non-finite
/// loss.
FoldResult train_fold(const TrainConfig& cfg, const std::vector<Case>& dataset,
                      const SplitPlan& split, int fold_index, TrainerState& state,
                      const std::string& out_dir = "");

struct FoldReport {
  int fold = 0;
  double best_val_loss = -1.0;
  int best_epoch = 0;
  double mean_dsc = 0.0;  // foreground means over the fold's validation cases
  double mean_ji = 0.0;
  double mean_nsd = 0.0;
  std::vector<EpochRecord> history;
};

struct CvReport {
  std::vector<FoldReport> folds;
  double mean_dsc = 0.0;  // arithmetic mean over folds
  double mean_ji = 0.0;
  double mean_nsd = 0.0;
};

/// Nine-fold cross-validation: fold i trains on the other eight folds and is
/// scored on fold i with the best-validation parameters.
CvReport cross_validate(const TrainConfig& cfg, const std::vector<Case>& dataset,
                        const SplitPlan& split, const std::string& out_dir = "");

// ---------------------------------------------------------------------------
// Inference and evaluation
// ---------------------------------------------------------------------------

/// Eval-mode prediction: z-score, pad_or_crop to patch_dims, forward, argmax
/// over channel logits, and write the labels back onto the original grid.
Tensor predict_labels(Model& model, const Volume& image, const Shape& patch_dims);

/// Metrics for each case against its ground truth.
std::vector<MetricsReport> evaluate(Model& model, const std::vector<Case>& cases,
                                    const Shape& patch_dims);

// ---------------------------------------------------------------------------
// History files: one JSON object per line (epoch, train_loss, val_loss, lr).
// ---------------------------------------------------------------------------

void append_history(const std::string& path, const EpochRecord& rec);
std::vector<EpochRecord> read_history(const std::string& path);

}  // namespace voxseg
