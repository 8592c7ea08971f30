#pragma once

// Stream-consistent data augmentation. Every frame of a stream segment shares
// one transform so that motion-compensated history stays geometrically
// consistent with the augmented present; the transform is a pure function of
// (base_seed, sequence_id, epoch). Ground-truth copy-paste places recorded
// objects into the stream and replays their own motion.

#include <cstdint>
#include <vector>

#include "streamdet/dataset.hpp"
#include "streamdet/frame.hpp"
#include "streamdet/geometry.hpp"

namespace streamdet {

/// Sampling ranges for the per-stream transform and copy-paste picks.
struct AugRanges {
  double flip_prob = 0.5;            // probability of an x-axis flip
  double rotation_max = 0.78539816339744831;  // +-pi/4 uniform
  double scale_min = 0.95;
  double scale_max = 1.05;
  double translation_sigma = 0.2;    // meters, per axis, zero-mean normal
  int n_paste = 0;                   // copy-paste picks per stream
  double paste_range = 20.0;         // placement |x|,|y| bound, meters
  int max_start = 0;                 // latest snippet start offset

  void validate() const;

  /// Zero-width ranges everywhere: derive_state yields the identity.
  static AugRanges none();
};

/// One copy-paste pick: which recorded object, where it is placed (box-center
/// pose relative to the stream anchor), and the offset at which its recorded
/// motion starts playing.
struct GtPick {
  uint64_t object_id = 0;
  Pose placement;
  int start_frame = 0;
};

/// Augmentation state of one stream segment. Identical keys produce identical
/// states. The anchor (ego pose of the segment's first frame) must be set
/// before pasting so placements stay world-fixed while the ego moves.
struct StreamAugState {
  uint64_t base_seed = 0;
  uint32_t sequence_id = 0;
  int epoch = 0;
  AugTransform aug;
  std::vector<GtPick> picks;

  bool anchored() const { return anchored_; }
  const Pose& anchor() const;
  void anchor_to(const Pose& stream_start_ego);

 private:
  bool anchored_ = false;
  Pose anchor_;
};

/// Derives the deterministic augmentation state for one stream segment.
/// flip ~ Bernoulli(flip_prob), rotation ~ U[-rotation_max, rotation_max],
/// scale ~ U[scale_min, scale_max], translation ~ N(0, translation_sigma)
/// per axis. db is required when ranges.n_paste > 0.
StreamAugState derive_state(uint64_t base_seed, uint32_t sequence_id,
                            int epoch, const AugRanges& ranges,
                            const GtDatabase* db = nullptr);

/// Applies the stream transform T_t * T_s * T_r * T_f to points and boxes and
/// tags the frame so downstream pose math conjugates relative poses. The ego
/// pose itself is left untouched.
FrameRecord augment_frame(const FrameRecord& frame,
                          const StreamAugState& state);

/// Merges the state's copy-paste picks into the frame. Each pick replays its
/// object's recorded motion relative to the placement pose; snippet indices
/// clamp at both ends, so short objects freeze at their last recorded frame.
/// Picks whose box overlaps an existing box (rotated IoU > 0.05) are skipped
/// for that frame. Requires state.anchored() when picks exist.
FrameRecord gt_paste(const FrameRecord& frame, const GtDatabase& db,
                     const StreamAugState& state, int frame_offset);

/// Track-id namespace for pasted boxes (top bit set).
constexpr uint32_t kPastedTrackBase = 0x80000000u;

}  // namespace streamdet
