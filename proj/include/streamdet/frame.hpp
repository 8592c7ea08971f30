#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "streamdet/geometry.hpp"

namespace streamdet {

/// One LiDAR return in current-frame coordinates. dt is the relative
/// timestamp in seconds, 0 for the current frame and negative for the past.
struct LidarPoint {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  float intensity = 0.0f;  // [0, 1]
  float dt = 0.0f;         // <= 0
};

using PointCloud = std::vector<LidarPoint>;

/// BEV detection box. w spans the box x axis, l the y axis before yaw.
struct Detection {
  double x = 0.0;
  double y = 0.0;
  double w = 1.0;  // > 0, meters
  double l = 1.0;  // > 0, meters
  double yaw = 0.0;
  double score = 0.0;  // [0, 1]
  int cls = 0;
};

/// Ground-truth box with height and track identity, in ego coordinates.
struct GtBox {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;  // box center height
  double w = 1.0;
  double l = 1.0;
  double h = 1.0;
  double yaw = 0.0;
  int cls = 0;
  uint32_t track_id = 0;

  Detection as_detection(double score = 1.0) const {
    return Detection{x, y, w, l, yaw, score, cls};
  }
};

/// One LiDAR sweep: points in ego coordinates, ego pose, ground truth.
/// The aug tag is runtime-only; it marks frames that went through stream
/// augmentation so downstream pose math uses the conjugated relative pose.
struct FrameRecord {
  double timestamp = 0.0;
  Pose ego_pose;
  PointCloud points;
  std::vector<GtBox> gt_boxes;
  bool labeled = true;
  std::optional<AugTransform> aug;  // not serialized
};

/// True if the BEV position (px, py) lies inside the detection box enlarged
/// by margin meters on every side.
bool point_in_box(double px, double py, const Detection& det, double margin);

/// Intersection-over-union of two rotated BEV rectangles.
double rotated_iou(const Detection& a, const Detection& b);

}  // namespace streamdet
