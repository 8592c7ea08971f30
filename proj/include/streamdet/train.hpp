#pragma once

// Training for the streaming detector. Each frame is one forward pass whose
// loss back-propagates through the current frame's trunk, heads, and the
// learnable fusion parameters only; the memory contents (point bank, stored
// feature/prediction maps) enter as constants and receive no gradient. After
// the backward pass the memories are updated with the frame's plain output
// values, so training a length-L segment costs exactly L single-frame passes
// and peak live state does not grow with L.

#include <cstdint>
#include <vector>

#include "streamdet/augment.hpp"
#include "streamdet/dataset.hpp"
#include "streamdet/pipeline.hpp"
#include "streamdet/sampler.hpp"

namespace streamdet {

struct LossConfig {
  double reg_weight = 1.0;   // weight of the box-regression term
  double sigma_cells = 1.0;  // Gaussian splat radius for heat targets
  double focal_gamma = 2.0;  // hard-example focusing exponent (0 = plain BCE)
  double focal_beta = 4.0;   // down-weight of negatives near box centers
};

struct LossResult {
  double total = 0.0;
  double heat = 0.0;  // mean focal BCE over all cells
  double reg = 0.0;   // mean smooth-L1 over gt cells and channels
  size_t n_pos = 0;   // gt boxes that fell inside the grid
};

/// One-channel Gaussian heat target on the given geometry: per box a splat
/// exp(-d^2 / (2 sigma^2)) in cell units anchored at the center cell (which
/// therefore carries an exact 1.0), max-combined across boxes.
ImageGrid heat_targets(const std::vector<GtBox>& gts, const GridSpec& spec,
                       double sigma_cells);

/// Loss on a raw prediction map (logit channel 0, regression 1..4).
/// heat: focal-style BCE against the splatted target, averaged over all
/// cells. Positive cells (target exactly 1) weigh the BCE by
/// (2(1-p))^gamma, the rest by (1-t)^beta (2p)^gamma; the modulators are 1
/// at p = 0.5, so with every parameter at zero and no boxes the total is
/// exactly ln 2 per cell, while confident background fades out of the
/// gradient instead of drowning the rare positives.
/// reg: smooth-L1 against (log w, log l, sin yaw, cos yaw) at each gt center
/// cell, averaged over gt cells and channels.
/// d_pm, when given, receives the gradient on the raw prediction map.
LossResult detection_loss(const ImageGrid& pm, const std::vector<GtBox>& gts,
                          const LossConfig& cfg, ImageGrid* d_pm);

struct TrainConfig {
  EngineConfig engine;  // fusion switches, bank capacity, decode gates
  LossConfig loss;
  // During training the point-bank feedback uses ground-truth boxes on
  // labeled frames (teacher forcing); inference always uses detections.
  bool fg_from_gt = true;

  int epochs = 8;
  int batch_size = 2;
  int max_seq_len = 10;
  bool use_dtsl = true;  // length curriculum; off = fixed max_seq_len
  bool seq_aug = false;  // geometric stream augmentation
  bool use_gt_paste = false;
  AugRanges aug;

  double lr = 0.05;
  double momentum = 0.9;
  double lr_decay = 1.0;      // multiplier applied every lr_decay_every epochs
  int lr_decay_every = 0;     // 0 disables decay
  uint64_t seed = 1;

  void validate() const;
};

/// Recurrent per-lane training state (the same memories the engine carries).
struct LaneState {
  MemoryBank mb;
  bool has_last = false;
  Pose last_pose;
  double last_time = 0.0;
};

/// Sizes the lane's memories for the model and clears them.
void init_lane(LaneState& lane, const ToyModel& model, const EngineConfig& cfg);

struct FrameLoss {
  LossResult loss;
  bool counted = false;  // false on unlabeled frames (forward only)
};

/// Forward + loss + backward for one frame on one lane. Mirrors the engine's
/// stage order. Gradients (if grads != nullptr and the frame is labeled) are
/// accumulated into the flat parameter-order vector; fusion parameters get
/// gradients only when their fusion actually ran this frame. The lane's
/// memories are updated with detached values afterwards.
FrameLoss train_frame(const ToyModel& model, const TrainConfig& cfg,
                      LaneState& lane, const FrameRecord& frame, bool reset,
                      ModelGrads* grads);

/// Plain SGD with momentum: v = mu * v - lr * g; p += v.
class SgdMomentum {
 public:
  SgdMomentum(size_t n_params, double lr, double momentum);
  void step(const std::vector<double*>& params,
            const std::vector<double>& grads);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  std::vector<double> velocity_;
  double lr_;
  double momentum_;
};

struct EpochStats {
  int epoch = 0;
  int target_len = 0;     // segment length used this epoch
  int segments = 0;       // per lane
  size_t frames = 0;      // frame passes performed (all lanes)
  size_t labeled_frames = 0;
  double mean_loss = 0.0; // over labeled frames
};

/// Schedule-driven trainer: one segment list per lane per epoch, lanes
/// advanced in lockstep, one optimizer step per frame position with the
/// lane gradients accumulated in fixed lane order. Fully deterministic for
/// a given seed.
class Trainer {
 public:
  Trainer(const ToyModel& model, const TrainConfig& cfg,
          std::vector<uint32_t> sequence_ids,
          std::vector<std::vector<FrameRecord>> sequences,
          const GtDatabase* gtdb = nullptr);

  EpochStats run_epoch(int epoch);
  std::vector<EpochStats> run();

  const ToyModel& model() const { return model_; }
  ToyModel& model() { return model_; }

 private:
  ToyModel model_;
  TrainConfig cfg_;
  std::vector<uint32_t> sequence_ids_;
  std::vector<std::vector<FrameRecord>> sequences_;
  const GtDatabase* gtdb_;
  std::vector<SampleIndex> samples_;
  std::vector<LaneState> lanes_;
  SgdMomentum opt_;
};

}  // namespace streamdet
