#include "streamdet/augment.hpp"

#include <cmath>
#include <stdexcept>

#include "streamdet/rng.hpp"

namespace streamdet {
namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kPasteIouMax = 0.05;

double wrap_angle(double a) {
  while (a > kPi) a -= 2 * kPi;
  while (a <= -kPi) a += 2 * kPi;
  return a;
}

// Yaw after reflection: the flip matrix maps direction (cos t, sin t) to a
// reflected direction whose angle is -t (x-axis flip, y negated) or pi - t
// (y-axis flip, x negated).
double flipped_yaw(FlipAxis flip, double yaw) {
  switch (flip) {
    case FlipAxis::kNone:
      return yaw;
    case FlipAxis::kX:
      return -yaw;
    case FlipAxis::kY:
      return wrap_angle(kPi - yaw);
  }
  throw std::invalid_argument("unknown flip axis");
}

}  // namespace

void AugRanges::validate() const {
  if (flip_prob < 0 || flip_prob > 1)
    throw std::invalid_argument("aug: flip probability outside [0,1]");
  if (rotation_max < 0)
    throw std::invalid_argument("aug: negative rotation range");
  if (scale_min <= 0 || scale_max < scale_min)
    throw std::invalid_argument("aug: bad scale range");
  if (translation_sigma < 0)
    throw std::invalid_argument("aug: negative translation sigma");
  if (n_paste < 0) throw std::invalid_argument("aug: negative paste count");
  if (paste_range <= 0) throw std::invalid_argument("aug: bad paste range");
  if (max_start < 0) throw std::invalid_argument("aug: negative start offset");
}

AugRanges AugRanges::none() {
  AugRanges r;
  r.flip_prob = 0.0;
  r.rotation_max = 0.0;
  r.scale_min = r.scale_max = 1.0;
  r.translation_sigma = 0.0;
  r.n_paste = 0;
  return r;
}

const Pose& StreamAugState::anchor() const {
  if (!anchored_)
    throw std::logic_error("aug state: anchor requested before anchor_to");
  return anchor_;
}

void StreamAugState::anchor_to(const Pose& stream_start_ego) {
  anchor_ = stream_start_ego;
  anchored_ = true;
}

StreamAugState derive_state(uint64_t base_seed, uint32_t sequence_id,
                            int epoch, const AugRanges& ranges,
                            const GtDatabase* db) {
  ranges.validate();
  StreamAugState state;
  state.base_seed = base_seed;
  state.sequence_id = sequence_id;
  state.epoch = epoch;

  // One keyed generator per stream with a fixed draw order; identical keys
  // reproduce identical states regardless of which lane evaluates them.
  Rng rng(hash_combine(
      base_seed,
      hash_combine(hash_str("stream_aug"),
                   hash_combine(sequence_id, static_cast<uint64_t>(
                                                 static_cast<int64_t>(epoch))))));

  if (ranges.flip_prob > 0 && rng.bernoulli(ranges.flip_prob))
    state.aug.flip = FlipAxis::kX;
  state.aug.rotation_z =
      ranges.rotation_max > 0
          ? rng.uniform(-ranges.rotation_max, ranges.rotation_max)
          : 0.0;
  state.aug.scale = ranges.scale_max > ranges.scale_min
                        ? rng.uniform(ranges.scale_min, ranges.scale_max)
                        : ranges.scale_min;
  if (ranges.translation_sigma > 0) {
    state.aug.translation = Eigen::Vector3d(
        ranges.translation_sigma * rng.normal(),
        ranges.translation_sigma * rng.normal(),
        ranges.translation_sigma * rng.normal());
  }

  if (ranges.n_paste > 0) {
    if (db == nullptr || db->objects.empty())
      throw std::invalid_argument(
          "aug: copy-paste requested without a ground-truth database");
    std::vector<uint64_t> ids;
    ids.reserve(db->objects.size());
    for (const auto& [id, obj] : db->objects) ids.push_back(id);
    for (int k = 0; k < ranges.n_paste; ++k) {
      GtPick pick;
      pick.object_id = ids[rng.uniform_index(ids.size())];
      const double x = rng.uniform(-ranges.paste_range, ranges.paste_range);
      const double y = rng.uniform(-ranges.paste_range, ranges.paste_range);
      const double yaw = rng.uniform(-kPi, kPi);
      const double h = db->objects.at(pick.object_id).h;
      // Box-center pose on flat ground, relative to the stream anchor.
      pick.placement =
          compose(Pose::translation(x, y, h / 2), Pose::rotation_z(yaw));
      pick.start_frame =
          ranges.max_start > 0
              ? static_cast<int>(rng.uniform_index(
                    static_cast<size_t>(ranges.max_start) + 1))
              : 0;
      state.picks.push_back(pick);
    }
  }
  return state;
}

FrameRecord augment_frame(const FrameRecord& frame,
                          const StreamAugState& state) {
  FrameRecord out = frame;
  out.aug = state.aug;
  if (state.aug.is_identity()) return out;

  const Eigen::Matrix4d m = state.aug.combined();
  for (LidarPoint& p : out.points) {
    const Eigen::Vector4d q = m * Eigen::Vector4d(p.x, p.y, p.z, 1.0);
    p.x = q.x();
    p.y = q.y();
    p.z = q.z();
  }
  for (GtBox& b : out.gt_boxes) {
    const Eigen::Vector4d c = m * Eigen::Vector4d(b.x, b.y, b.z, 1.0);
    b.x = c.x();
    b.y = c.y();
    b.z = c.z();
    b.yaw = wrap_angle(state.aug.rotation_z + flipped_yaw(state.aug.flip, b.yaw));
    b.w *= state.aug.scale;
    b.l *= state.aug.scale;
    b.h *= state.aug.scale;
  }
  return out;
}

FrameRecord gt_paste(const FrameRecord& frame, const GtDatabase& db,
                     const StreamAugState& state, int frame_offset) {
  if (state.picks.empty()) return frame;
  if (!state.anchored())
    throw std::logic_error("gt_paste: stream anchor not set");
  if (frame_offset < 0)
    throw std::invalid_argument("gt_paste: negative frame offset");

  FrameRecord out = frame;
  const Pose ego_inv = frame.ego_pose.inverse();
  for (size_t pi = 0; pi < state.picks.size(); ++pi) {
    const GtPick& pick = state.picks[pi];
    auto it = db.objects.find(pick.object_id);
    if (it == db.objects.end())
      throw std::invalid_argument("gt_paste: unknown object id");
    const GtObject& obj = it->second;

    // Snippet index: motion starts at start_frame and freezes at both ends.
    int idx = frame_offset - pick.start_frame;
    idx = std::max(0, std::min(idx, static_cast<int>(obj.frames.size()) - 1));
    const GtSnippet& snip = obj.frames[static_cast<size_t>(idx)];

    // World pose: the placement pose followed by the object's own recorded
    // motion relative to its first recorded pose.
    const Pose world_pose =
        compose(compose(state.anchor(), pick.placement),
                compose(obj.frames.front().world_pose.inverse(),
                        snip.world_pose));
    const Pose ego_pose = compose(ego_inv, world_pose);
    const Eigen::Vector3d center = ego_pose.apply(Eigen::Vector3d::Zero());

    GtBox box;
    box.x = center.x();
    box.y = center.y();
    box.z = center.z();
    box.w = obj.w;
    box.l = obj.l;
    box.h = obj.h;
    box.yaw = ego_pose.yaw();
    box.cls = obj.cls;
    box.track_id = kPastedTrackBase + static_cast<uint32_t>(pi);

    // Collision rule: overlap with anything already in the frame (original
    // boxes or earlier picks) skips this pick for this frame.
    const Detection cand = box.as_detection();
    bool collides = false;
    for (const GtBox& existing : out.gt_boxes) {
      if (rotated_iou(cand, existing.as_detection()) > kPasteIouMax) {
        collides = true;
        break;
      }
    }
    if (collides) continue;

    for (const LidarPoint& p : snip.points) {
      const Eigen::Vector3d q = ego_pose.apply(Eigen::Vector3d(p.x, p.y, p.z));
      out.points.push_back(LidarPoint{q.x(), q.y(), q.z(), p.intensity, 0.0f});
    }
    out.gt_boxes.push_back(box);
  }
  return out;
}

}  // namespace streamdet
