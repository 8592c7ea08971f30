#pragma once

#include <deque>
#include <iosfwd>

#include "streamdet/frame.hpp"

namespace streamdet {

/// Point-style memory bank: fixed-capacity FIFO of foreground points kept in
/// the coordinates of the frame it was last aligned to. New foreground is
/// pushed per frame; the oldest points fall out once capacity is reached.
class PointBank {
 public:
  static constexpr size_t kDefaultCapacity = 50000;
  /// dt values handed to fusion are clamped at this floor (seconds).
  static constexpr double kDtFloor = -10.0;

  explicit PointBank(size_t capacity = kDefaultCapacity)
      : capacity_(capacity) {}

  struct Entry {
    double x, y, z;
    float intensity;
    double source_time;  // absolute seconds
  };

  size_t size() const { return queue_.size(); }
  size_t capacity() const { return capacity_; }
  bool empty() const { return queue_.empty(); }
  const Pose& last_pose() const { return last_pose_; }
  double last_time() const { return last_time_; }
  const std::deque<Entry>& entries() const { return queue_; }

  void clear();

  /// Replaces the bank contents wholesale; used when restoring a serialized
  /// snapshot. Entries must already be expressed in the given pose's frame.
  void restore(std::deque<Entry> entries, const Pose& pose, double time);

  /// Re-expresses all stored points in the frame given by pose_cur and
  /// recomputes their relative timestamps against time_cur. When aug is set
  /// the stream is augmented and the conjugated relative pose is used.
  void align_to(const Pose& pose_cur, double time_cur,
                const AugTransform* aug = nullptr);

  /// Appends points (expressed in the bank's current frame, taken at the
  /// bank's current time) and evicts oldest entries beyond capacity.
  void push_foreground(const PointCloud& pts);

  /// Bank contents as a point cloud with dt relative to the bank's time.
  PointCloud as_points() const;

  /// CSV snapshot: x,y,z,intensity,dt per line with a header row.
  void dump_csv(std::ostream& os) const;

  size_t resident_bytes() const { return queue_.size() * sizeof(Entry); }

 private:
  size_t capacity_;
  std::deque<Entry> queue_;
  Pose last_pose_;
  double last_time_ = 0.0;
};

/// PointConcat: current points first (dt forced to 0), then the bank's
/// aligned history. The bank must already be aligned to the current frame.
PointCloud fuse_points(const PointCloud& p_cur, const PointBank& bank);

/// Points whose BEV position lies inside any detection with
/// score >= score_min, boxes enlarged by margin meters.
PointCloud select_foreground(const PointCloud& pts,
                             const std::vector<Detection>& dets,
                             double score_min, double margin = 0.1);

}  // namespace streamdet
