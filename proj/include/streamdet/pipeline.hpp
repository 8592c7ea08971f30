#pragma once

// The streaming engine: a single-frame detector wrapped with a recursively
// updated memory (point bank + feature-map history + prediction-map history).
// Each frame is processed once; history is carried forward by warping, so
// per-frame work stays constant no matter how many frames were seen. A
// sliding-window baseline that re-fuses the last k raw clouds every frame is
// provided for latency/accuracy comparisons.

#include <cstdint>
#include <deque>
#include <iosfwd>
#include <vector>

#include "streamdet/detector.hpp"
#include "streamdet/frame.hpp"
#include "streamdet/point_bank.hpp"

namespace streamdet {

/// Pipeline stages, in execution order; used for latency decomposition.
enum class Stage {
  kAlign = 0,   // motion-compensate the point bank (+ pose bookkeeping)
  kPcFuse,      // concatenate current points with the aligned bank
  kVoxelize,    // scatter the fused cloud into the BEV grid
  kFmFuse,      // warp + fuse the feature-map history, store back
  kForward,     // trunk + heads
  kPmFuse,      // warp + fuse the prediction-map history, store back
  kDecode,      // peaks -> boxes
  kPush,        // select foreground and append to the point bank
};
constexpr int kNumStages = 8;
const char* stage_name(Stage s);

/// Per-frame instrumentation: wall-clock per stage plus work counters that
/// make the constant-per-frame property testable without a clock.
struct StepStats {
  uint64_t frame_index = 0;
  size_t points_in = 0;         // raw points in the frame
  size_t points_voxelized = 0;  // points entering the voxelizer
  size_t bank_size = 0;         // point-bank residency after the step
  size_t grid_cells = 0;        // cells touched by warp + fuse passes
  double stage_micros[kNumStages] = {};
  double total_micros = 0.0;
};

/// Recursively updated state carried between frames.
struct MemoryBank {
  PointBank point;
  ImageGrid fm;
  ImageGrid pm;
  bool has_fm = false;
  bool has_pm = false;

  void clear();
  size_t resident_bytes() const;
};

struct EngineConfig {
  double score_min = 0.3;
  double nms_radius = 2.0;
  double fg_score_min = 0.3;  // feedback gate into the point bank
  double fg_margin = 0.1;     // box enlargement for foreground selection
  size_t bank_capacity = PointBank::kDefaultCapacity;
  bool pc_fusion = true;
  bool fm_fusion = true;
  bool pm_fusion = true;
};

class Engine {
 public:
  explicit Engine(const ToyModel& model, const EngineConfig& cfg = {});

  /// Processes one frame. Frames must arrive in chronological order; a
  /// reset clears all memory first (stream start). Returns the detections.
  std::vector<Detection> step(const FrameRecord& frame, bool reset);

  void reset();

  const StepStats& last_stats() const { return stats_; }
  const MemoryBank& bank() const { return mb_; }
  const ToyModel& model() const { return model_; }
  const EngineConfig& config() const { return cfg_; }
  uint64_t frames_seen() const { return frames_seen_; }
  size_t resident_bytes() const;

  /// Serializes / restores the full recurrent state (not the model), so a
  /// stream can be resumed elsewhere with bit-identical outputs.
  void save_state(std::ostream& os) const;
  void load_state(std::istream& is);

 private:
  ToyModel model_;
  EngineConfig cfg_;
  MemoryBank mb_;
  bool has_last_ = false;
  Pose last_pose_;
  double last_time_ = 0.0;
  uint64_t frames_seen_ = 0;
  StepStats stats_;
};

/// Sliding-window baseline: keeps the last (window - 1) raw clouds and
/// re-aligns + re-voxelizes all of them together with the current frame on
/// every step. window = 1 is the bare single-frame detector. Per-frame work
/// grows linearly with the window, which is exactly what the recursive
/// engine avoids.
class ConcatEngine {
 public:
  ConcatEngine(const ToyModel& model, int window,
               const EngineConfig& cfg = {});

  std::vector<Detection> step(const FrameRecord& frame, bool reset);
  void reset();
  const StepStats& last_stats() const { return stats_; }
  int window() const { return window_; }
  size_t resident_bytes() const;

 private:
  struct Past {
    PointCloud points;
    Pose pose;
    double time = 0.0;
  };
  ToyModel model_;
  EngineConfig cfg_;
  int window_;
  std::deque<Past> history_;
  bool has_last_ = false;
  double last_time_ = 0.0;
  uint64_t frames_seen_ = 0;
  StepStats stats_;
};

}  // namespace streamdet
