#include "streamdet/point_bank.hpp"

#include <algorithm>
#include <ostream>
#include <stdexcept>

namespace streamdet {

void PointBank::clear() {
  queue_.clear();
  last_pose_ = Pose();
  last_time_ = 0.0;
}

void PointBank::restore(std::deque<Entry> entries, const Pose& pose,
                        double time) {
  if (entries.size() > capacity_)
    throw std::invalid_argument("PointBank: restore exceeds capacity");
  queue_ = std::move(entries);
  last_pose_ = pose;
  last_time_ = time;
}

void PointBank::align_to(const Pose& pose_cur, double time_cur,
                         const AugTransform* aug) {
  if (time_cur < last_time_ && !queue_.empty())
    throw std::invalid_argument("PointBank: align_to time moved backwards");
  const Pose rel = (aug != nullptr)
                       ? augmented_relative_pose(pose_cur, last_pose_, *aug)
                       : relative_pose(pose_cur, last_pose_);
  const Eigen::Matrix3d lin = rel.rotation();
  const Eigen::Vector3d t = rel.translation_part();
  for (Entry& e : queue_) {
    const Eigen::Vector3d v = lin * Eigen::Vector3d(e.x, e.y, e.z) + t;
    e.x = v.x();
    e.y = v.y();
    e.z = v.z();
  }
  last_pose_ = pose_cur;
  last_time_ = time_cur;
}

void PointBank::push_foreground(const PointCloud& pts) {
  for (const LidarPoint& p : pts) {
    queue_.push_back(Entry{p.x, p.y, p.z, p.intensity, last_time_});
  }
  while (queue_.size() > capacity_) queue_.pop_front();
}

PointCloud PointBank::as_points() const {
  PointCloud out;
  out.reserve(queue_.size());
  for (const Entry& e : queue_) {
    const double dt = std::max(e.source_time - last_time_, kDtFloor);
    out.push_back(LidarPoint{e.x, e.y, e.z, e.intensity,
                             static_cast<float>(dt)});
  }
  return out;
}

void PointBank::dump_csv(std::ostream& os) const {
  os << "x,y,z,intensity,dt\n";
  for (const Entry& e : queue_) {
    const double dt = std::max(e.source_time - last_time_, kDtFloor);
    os << e.x << ',' << e.y << ',' << e.z << ',' << e.intensity << ',' << dt
       << '\n';
  }
}

PointCloud fuse_points(const PointCloud& p_cur, const PointBank& bank) {
  PointCloud out;
  out.reserve(p_cur.size() + bank.size());
  for (const LidarPoint& p : p_cur) {
    LidarPoint q = p;
    q.dt = 0.0f;
    out.push_back(q);
  }
  PointCloud hist = bank.as_points();
  out.insert(out.end(), hist.begin(), hist.end());
  return out;
}

PointCloud select_foreground(const PointCloud& pts,
                             const std::vector<Detection>& dets,
                             double score_min, double margin) {
  PointCloud out;
  if (dets.empty()) return out;
  std::vector<const Detection*> active;
  for (const Detection& d : dets) {
    if (d.score >= score_min) active.push_back(&d);
  }
  if (active.empty()) return out;
  for (const LidarPoint& p : pts) {
    for (const Detection* d : active) {
      if (point_in_box(p.x, p.y, *d, margin)) {
        out.push_back(p);
        break;
      }
    }
  }
  return out;
}

}  // namespace streamdet
