#include "streamdet/pipeline.hpp"

#include <zlib.h>

#include <algorithm>
#include <chrono>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace streamdet {
namespace {

using Clock = std::chrono::steady_clock;

double micros_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::micro>(Clock::now() - t0).count();
}

constexpr uint32_t kSnapshotMagic = 0x53444D42u;  // "SDMB"
constexpr uint32_t kSnapshotVersion = 1;

}  // namespace

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kAlign:
      return "align";
    case Stage::kPcFuse:
      return "pc_fuse";
    case Stage::kVoxelize:
      return "voxelize";
    case Stage::kFmFuse:
      return "fm_fuse";
    case Stage::kForward:
      return "forward";
    case Stage::kPmFuse:
      return "pm_fuse";
    case Stage::kDecode:
      return "decode";
    case Stage::kPush:
      return "push";
  }
  throw std::invalid_argument("unknown stage");
}

void MemoryBank::clear() {
  point.clear();
  fm.zero();
  pm.zero();
  has_fm = false;
  has_pm = false;
}

size_t MemoryBank::resident_bytes() const {
  return point.resident_bytes() + fm.resident_bytes() + pm.resident_bytes();
}

Engine::Engine(const ToyModel& model, const EngineConfig& cfg)
    : model_(model), cfg_(cfg) {
  model_.validate();
  mb_.point = PointBank(cfg_.bank_capacity);
  mb_.fm = ImageGrid(model_.input_spec);
  mb_.pm = ImageGrid(model_.pm_spec());
}

void Engine::reset() {
  mb_.clear();
  has_last_ = false;
  last_pose_ = Pose();
  last_time_ = 0.0;
}

std::vector<Detection> Engine::step(const FrameRecord& frame, bool reset) {
  if (reset) this->reset();
  if (has_last_ && frame.timestamp <= last_time_)
    throw std::invalid_argument("engine: non-monotonic timestamp");

  stats_ = StepStats{};
  stats_.frame_index = frames_seen_;
  stats_.points_in = frame.points.size();
  const size_t plane = static_cast<size_t>(model_.input_spec.width) *
                       model_.input_spec.height;
  const AugTransform* aug =
      frame.aug.has_value() ? &frame.aug.value() : nullptr;

  // Stage 1: motion compensation. The grid-history pose is the same relative
  // pose the point bank uses internally (conjugated when the stream is
  // augmented).
  auto t0 = Clock::now();
  Pose rel;
  if (has_last_) {
    rel = aug != nullptr
              ? augmented_relative_pose(frame.ego_pose, last_pose_, *aug)
              : relative_pose(frame.ego_pose, last_pose_);
  }
  if (cfg_.pc_fusion) {
    mb_.point.align_to(frame.ego_pose, frame.timestamp, aug);
  }
  stats_.stage_micros[static_cast<int>(Stage::kAlign)] = micros_since(t0);

  // Stage 2: point-cloud fusion (current first, dt = 0).
  t0 = Clock::now();
  PointCloud fused_cloud;
  if (cfg_.pc_fusion) {
    fused_cloud = fuse_points(frame.points, mb_.point);
  } else {
    fused_cloud = frame.points;
  }
  stats_.stage_micros[static_cast<int>(Stage::kPcFuse)] = micros_since(t0);

  // Stage 3: voxelize.
  t0 = Clock::now();
  ImageGrid x = voxelize_bev(fused_cloud, model_.input_spec);
  stats_.points_voxelized = fused_cloud.size();
  stats_.stage_micros[static_cast<int>(Stage::kVoxelize)] = micros_since(t0);

  // Stage 4: feature-map fusion; the memory keeps the fused map (recursive
  // update), so each past frame is folded in exactly once.
  t0 = Clock::now();
  if (cfg_.fm_fusion) {
    if (mb_.has_fm && has_last_) {
      const ImageGrid warped = warp(mb_.fm, rel);
      x = fuse(model_.fm_mode, x, warped,
               model_.fm_mode == FusionMode::kGru ? &model_.fm_gru : nullptr,
               model_.fm_mode == FusionMode::kConcat ? &model_.fm_concat
                                                     : nullptr);
      stats_.grid_cells += 2 * plane;  // one warp pass + one fuse pass
    }
    mb_.fm = x;
    mb_.has_fm = true;
  }
  stats_.stage_micros[static_cast<int>(Stage::kFmFuse)] = micros_since(t0);

  // Stage 5: trunk + heads.
  t0 = Clock::now();
  const ImageGrid hidden = model_hidden(model_, x);
  ImageGrid pm = model_heads(model_, hidden);
  stats_.stage_micros[static_cast<int>(Stage::kForward)] = micros_since(t0);

  // Stage 6: prediction-map fusion on raw logits, stored back fused.
  t0 = Clock::now();
  if (cfg_.pm_fusion) {
    if (mb_.has_pm && has_last_) {
      const ImageGrid warped = warp(mb_.pm, rel);
      pm = fuse(model_.pm_mode, pm, warped,
                model_.pm_mode == FusionMode::kGru ? &model_.pm_gru : nullptr,
                model_.pm_mode == FusionMode::kConcat ? &model_.pm_concat
                                                      : nullptr);
      stats_.grid_cells += 2 * plane;
    }
    mb_.pm = pm;
    mb_.has_pm = true;
  }
  stats_.stage_micros[static_cast<int>(Stage::kPmFuse)] = micros_since(t0);

  // Stage 7: decode.
  t0 = Clock::now();
  std::vector<Detection> dets =
      decode_pm(pm, cfg_.score_min, cfg_.nms_radius);
  stats_.stage_micros[static_cast<int>(Stage::kDecode)] = micros_since(t0);

  // Stage 8: foreground feedback from the *current* frame's raw points (the
  // bank already holds older ones).
  t0 = Clock::now();
  if (cfg_.pc_fusion) {
    const PointCloud fg = select_foreground(frame.points, dets,
                                            cfg_.fg_score_min, cfg_.fg_margin);
    mb_.point.push_foreground(fg);
  }
  stats_.bank_size = mb_.point.size();
  stats_.stage_micros[static_cast<int>(Stage::kPush)] = micros_since(t0);

  for (double v : stats_.stage_micros) stats_.total_micros += v;
  has_last_ = true;
  last_pose_ = frame.ego_pose;
  last_time_ = frame.timestamp;
  ++frames_seen_;
  return dets;
}

size_t Engine::resident_bytes() const {
  return mb_.resident_bytes();
}

// --- snapshot I/O -----------------------------------------------------------

namespace {

void put_u32(std::vector<unsigned char>& buf, uint32_t v) {
  buf.push_back(v & 0xFF);
  buf.push_back((v >> 8) & 0xFF);
  buf.push_back((v >> 16) & 0xFF);
  buf.push_back((v >> 24) & 0xFF);
}

void put_u64(std::vector<unsigned char>& buf, uint64_t v) {
  put_u32(buf, static_cast<uint32_t>(v & 0xFFFFFFFFULL));
  put_u32(buf, static_cast<uint32_t>(v >> 32));
}

void put_f64(std::vector<unsigned char>& buf, double v) {
  uint64_t bits = 0;
  std::memcpy(&bits, &v, 8);
  put_u64(buf, bits);
}

void put_f32(std::vector<unsigned char>& buf, float v) {
  uint32_t bits = 0;
  std::memcpy(&bits, &v, 4);
  put_u32(buf, bits);
}

void put_pose(std::vector<unsigned char>& buf, const Pose& p) {
  for (double v : p.to_row_major()) put_f64(buf, v);
}

void put_grid(std::vector<unsigned char>& buf, const ImageGrid& g) {
  for (double v : g.data()) put_f64(buf, v);
  for (double v : g.mask_plane()) put_f64(buf, v);
  for (double v : g.count_plane()) put_f64(buf, v);
}

class SnapshotReader {
 public:
  explicit SnapshotReader(std::istream& is) : is_(is) {}

  uint32_t u32() {
    unsigned char b[4];
    is_.read(reinterpret_cast<char*>(b), 4);
    if (!is_) throw std::runtime_error("snapshot: unexpected end of stream");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) |
           (static_cast<uint32_t>(b[3]) << 24);
  }
  uint64_t u64() {
    const uint64_t lo = u32();
    const uint64_t hi = u32();
    return lo | (hi << 32);
  }
  double f64() {
    const uint64_t bits = u64();
    double v = 0;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  float f32() {
    const uint32_t bits = u32();
    float v = 0;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  Pose pose() {
    std::array<double, 16> v{};
    for (double& x : v) x = f64();
    return Pose::from_row_major(v);
  }
  void grid(ImageGrid& g) {
    for (double& v : g.data()) v = f64();
    for (double& v : g.mask_plane()) v = f64();
    for (double& v : g.count_plane()) v = f64();
  }

 private:
  std::istream& is_;
};

}  // namespace

void Engine::save_state(std::ostream& os) const {
  std::vector<unsigned char> buf;
  put_u32(buf, kSnapshotMagic);
  put_u32(buf, kSnapshotVersion);
  put_u32(buf, has_last_ ? 1 : 0);
  put_pose(buf, last_pose_);
  put_f64(buf, last_time_);
  put_u64(buf, frames_seen_);

  put_u64(buf, mb_.point.capacity());
  put_u64(buf, mb_.point.size());
  for (const PointBank::Entry& e : mb_.point.entries()) {
    put_f64(buf, e.x);
    put_f64(buf, e.y);
    put_f64(buf, e.z);
    put_f32(buf, e.intensity);
    put_f64(buf, e.source_time);
  }
  put_pose(buf, mb_.point.last_pose());
  put_f64(buf, mb_.point.last_time());

  put_u32(buf, mb_.has_fm ? 1 : 0);
  put_grid(buf, mb_.fm);
  put_u32(buf, mb_.has_pm ? 1 : 0);
  put_grid(buf, mb_.pm);

  const uint32_t crc = static_cast<uint32_t>(
      crc32(crc32(0L, nullptr, 0), buf.data(), static_cast<uInt>(buf.size())));
  put_u32(buf, crc);
  os.write(reinterpret_cast<const char*>(buf.data()),
           static_cast<std::streamsize>(buf.size()));
  if (!os) throw std::runtime_error("snapshot: write failed");
}

void Engine::load_state(std::istream& is) {
  // The payload is parsed field by field; the trailing checksum is verified
  // against a re-encoding of what was read.
  SnapshotReader r(is);
  std::vector<unsigned char> seen;
  auto u32 = [&]() {
    const uint32_t v = r.u32();
    put_u32(seen, v);
    return v;
  };
  auto u64 = [&]() {
    const uint64_t v = r.u64();
    put_u64(seen, v);
    return v;
  };
  auto f64 = [&]() {
    const double v = r.f64();
    put_f64(seen, v);
    return v;
  };
  auto f32 = [&]() {
    const float v = r.f32();
    put_f32(seen, v);
    return v;
  };
  auto pose = [&]() {
    std::array<double, 16> v{};
    for (double& x : v) x = f64();
    return Pose::from_row_major(v);
  };
  auto grid = [&](ImageGrid& g) {
    for (double& v : g.data()) v = f64();
    for (double& v : g.mask_plane()) v = f64();
    for (double& v : g.count_plane()) v = f64();
  };

  if (u32() != kSnapshotMagic) throw std::runtime_error("snapshot: bad magic");
  if (u32() != kSnapshotVersion)
    throw std::runtime_error("snapshot: unsupported version");
  const bool has_last = u32() != 0;
  const Pose last_pose = pose();
  const double last_time = f64();
  const uint64_t frames_seen = u64();

  const uint64_t capacity = u64();
  if (capacity != mb_.point.capacity())
    throw std::runtime_error("snapshot: bank capacity mismatch");
  const uint64_t n = u64();
  std::deque<PointBank::Entry> entries;
  for (uint64_t i = 0; i < n; ++i) {
    PointBank::Entry e;
    e.x = f64();
    e.y = f64();
    e.z = f64();
    e.intensity = f32();
    e.source_time = f64();
    entries.push_back(e);
  }
  const Pose bank_pose = pose();
  const double bank_time = f64();

  const bool has_fm = u32() != 0;
  ImageGrid fm(model_.input_spec);
  grid(fm);
  const bool has_pm = u32() != 0;
  ImageGrid pm(model_.pm_spec());
  grid(pm);

  const uint32_t expect = static_cast<uint32_t>(crc32(
      crc32(0L, nullptr, 0), seen.data(), static_cast<uInt>(seen.size())));
  if (r.u32() != expect)
    throw std::runtime_error("snapshot: checksum mismatch");

  has_last_ = has_last;
  last_pose_ = last_pose;
  last_time_ = last_time;
  frames_seen_ = frames_seen;
  mb_.point.restore(std::move(entries), bank_pose, bank_time);
  mb_.fm = std::move(fm);
  mb_.pm = std::move(pm);
  mb_.has_fm = has_fm;
  mb_.has_pm = has_pm;
}

// --- sliding-window baseline ------------------------------------------------

ConcatEngine::ConcatEngine(const ToyModel& model, int window,
                           const EngineConfig& cfg)
    : model_(model), cfg_(cfg), window_(window) {
  if (window < 1)
    throw std::invalid_argument("window baseline: window must be >= 1");
  model_.validate();
}

void ConcatEngine::reset() {
  history_.clear();
  has_last_ = false;
  last_time_ = 0.0;
}

std::vector<Detection> ConcatEngine::step(const FrameRecord& frame,
                                          bool reset) {
  if (reset) this->reset();
  if (has_last_ && frame.timestamp <= last_time_)
    throw std::invalid_argument("window baseline: non-monotonic timestamp");

  stats_ = StepStats{};
  stats_.frame_index = frames_seen_;
  stats_.points_in = frame.points.size();
  const AugTransform* aug =
      frame.aug.has_value() ? &frame.aug.value() : nullptr;

  // Align every stored cloud to the current frame (work grows with the
  // window; that is the point of this baseline).
  auto t0 = Clock::now();
  PointCloud fused;
  size_t total = frame.points.size();
  for (const Past& p : history_) total += p.points.size();
  fused.reserve(total);
  for (const LidarPoint& p : frame.points) {
    fused.push_back(p);
    fused.back().dt = 0.0f;
  }
  stats_.stage_micros[static_cast<int>(Stage::kPcFuse)] = micros_since(t0);

  t0 = Clock::now();
  for (const Past& past : history_) {
    const Pose rel =
        aug != nullptr
            ? augmented_relative_pose(frame.ego_pose, past.pose, *aug)
            : relative_pose(frame.ego_pose, past.pose);
    const Eigen::Matrix3d lin = rel.rotation();
    const Eigen::Vector3d t = rel.translation_part();
    const float dt = static_cast<float>(
        std::max(past.time - frame.timestamp, PointBank::kDtFloor));
    for (const LidarPoint& p : past.points) {
      const Eigen::Vector3d v = lin * Eigen::Vector3d(p.x, p.y, p.z) + t;
      fused.push_back(LidarPoint{v.x(), v.y(), v.z(), p.intensity, dt});
    }
  }
  stats_.stage_micros[static_cast<int>(Stage::kAlign)] = micros_since(t0);

  t0 = Clock::now();
  const ImageGrid x = voxelize_bev(fused, model_.input_spec);
  stats_.points_voxelized = fused.size();
  stats_.stage_micros[static_cast<int>(Stage::kVoxelize)] = micros_since(t0);

  t0 = Clock::now();
  const ImageGrid hidden = model_hidden(model_, x);
  const ImageGrid pm = model_heads(model_, hidden);
  stats_.stage_micros[static_cast<int>(Stage::kForward)] = micros_since(t0);

  t0 = Clock::now();
  std::vector<Detection> dets =
      decode_pm(pm, cfg_.score_min, cfg_.nms_radius);
  stats_.stage_micros[static_cast<int>(Stage::kDecode)] = micros_since(t0);

  t0 = Clock::now();
  if (window_ > 1) {
    Past cur;
    cur.points = frame.points;
    cur.pose = frame.ego_pose;
    cur.time = frame.timestamp;
    history_.push_back(std::move(cur));
    while (history_.size() > static_cast<size_t>(window_ - 1))
      history_.pop_front();
  }
  size_t held = 0;
  for (const Past& p : history_) held += p.points.size();
  stats_.bank_size = held;
  stats_.stage_micros[static_cast<int>(Stage::kPush)] = micros_since(t0);

  for (double v : stats_.stage_micros) stats_.total_micros += v;
  has_last_ = true;
  last_time_ = frame.timestamp;
  ++frames_seen_;
  return dets;
}

size_t ConcatEngine::resident_bytes() const {
  size_t bytes = 0;
  for (const Past& p : history_)
    bytes += p.points.size() * sizeof(LidarPoint);
  return bytes;
}

}  // namespace streamdet
