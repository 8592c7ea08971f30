#include "streamdet/dataset.hpp"

#include <json.hpp>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "streamdet/rng.hpp"

namespace streamdet {
namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kDropoutMax = 0.98;

double wrap_angle(double a) {
  while (a > kPi) a -= 2 * kPi;
  while (a <= -kPi) a += 2 * kPi;
  return a;
}

struct WorldObject {
  uint32_t id = 0;
  bool moving = false;
  double cx = 0, cy = 0;  // world center at t = 0
  double yaw = 0;         // world yaw (heading for moving objects)
  double speed = 0;
  double w = 1, l = 1, h = 1;
  PointCloud pattern;  // fixed surface samples in object frame
};

// Surface sample in the object frame: four side faces plus the top, chosen
// with probability proportional to face area.
LidarPoint sample_on_box(Rng& rng, double w, double l, double h) {
  const double area_x = l * h;  // faces at x = +-w/2
  const double area_y = w * h;  // faces at y = +-l/2
  const double area_top = w * l;
  const double total = 2 * area_x + 2 * area_y + area_top;
  double pick = rng.uniform(0.0, total);
  LidarPoint p;
  p.intensity = static_cast<float>(rng.uniform(0.2, 1.0));
  const double u = rng.uniform();
  const double v = rng.uniform();
  if (pick < 2 * area_x) {
    p.x = pick < area_x ? w / 2 : -w / 2;
    p.y = (u - 0.5) * l;
    p.z = (v - 0.5) * h;
  } else if (pick < 2 * area_x + 2 * area_y) {
    pick -= 2 * area_x;
    p.y = pick < area_y ? l / 2 : -l / 2;
    p.x = (u - 0.5) * w;
    p.z = (v - 0.5) * h;
  } else {
    p.x = (u - 0.5) * w;
    p.y = (v - 0.5) * l;
    p.z = h / 2;
  }
  return p;
}

std::vector<WorldObject> build_world(const WorldConfig& cfg, uint64_t seed) {
  Rng rng(hash_combine(seed, hash_str("world")));
  std::vector<WorldObject> objects;
  const int total = cfg.n_static + cfg.n_moving;
  for (int i = 0; i < total; ++i) {
    WorldObject o;
    o.id = static_cast<uint32_t>(i);
    o.moving = i >= cfg.n_static;
    const double angle = rng.uniform(-kPi, kPi);
    const double radius =
        rng.uniform(cfg.placement_min_range, cfg.placement_max_range);
    o.cx = radius * std::cos(angle);
    o.cy = radius * std::sin(angle);
    o.yaw = rng.uniform(-kPi, kPi);
    o.w = rng.uniform(cfg.size_w_min, cfg.size_w_max);
    o.l = rng.uniform(cfg.size_l_min, cfg.size_l_max);
    o.h = rng.uniform(cfg.size_h_min, cfg.size_h_max);
    if (o.moving) o.speed = rng.uniform(cfg.speed_min, cfg.speed_max);

    Rng pattern_rng(hash_combine(seed, hash_combine(hash_str("pattern"), o.id)));
    o.pattern.reserve(cfg.points_per_object);
    for (int k = 0; k < cfg.points_per_object; ++k) {
      o.pattern.push_back(sample_on_box(pattern_rng, o.w, o.l, o.h));
    }
    objects.push_back(std::move(o));
  }
  return objects;
}

PointCloud build_ground_pattern(const WorldConfig& cfg, uint64_t seed) {
  Rng rng(hash_combine(seed, hash_str("ground")));
  PointCloud ground;
  ground.reserve(cfg.ground_points);
  for (int i = 0; i < cfg.ground_points; ++i) {
    // Radius linear in u gives the 1/r density falloff of a spinning LiDAR.
    const double r = cfg.lidar_range * rng.uniform();
    const double a = rng.uniform(-kPi, kPi);
    LidarPoint p;
    p.x = r * std::cos(a);
    p.y = r * std::sin(a);
    p.z = 0.0;
    p.intensity = static_cast<float>(rng.uniform(0.1, 0.5));
    ground.push_back(p);
  }
  return ground;
}

}  // namespace

EgoMode ego_mode_from_name(const std::string& name) {
  if (name == "straight") return EgoMode::kStraight;
  if (name == "arc") return EgoMode::kArc;
  if (name == "lane-change") return EgoMode::kLaneChange;
  throw std::invalid_argument("unknown ego mode: " + name);
}

const char* ego_mode_name(EgoMode m) {
  switch (m) {
    case EgoMode::kStraight:
      return "straight";
    case EgoMode::kArc:
      return "arc";
    case EgoMode::kLaneChange:
      return "lane-change";
  }
  throw std::invalid_argument("unknown ego mode");
}

void WorldConfig::validate() const {
  if (n_static < 0 || n_moving < 0)
    throw std::invalid_argument("world: negative object count");
  if (speed_min < 0 || speed_max < speed_min)
    throw std::invalid_argument("world: bad speed range");
  if (size_w_min <= 0 || size_w_max < size_w_min || size_l_min <= 0 ||
      size_l_max < size_l_min || size_h_min <= 0 || size_h_max < size_h_min)
    throw std::invalid_argument("world: bad size range");
  if (lidar_range <= 0) throw std::invalid_argument("world: bad lidar range");
  if (points_per_object < 0 || ground_points < 0)
    throw std::invalid_argument("world: negative point budget");
  if (dropout_per_meter < 0)
    throw std::invalid_argument("world: negative dropout rate");
  if (noise_sigma < 0) throw std::invalid_argument("world: negative noise");
  if (frame_rate <= 0) throw std::invalid_argument("world: bad frame rate");
  if (duration < 0) throw std::invalid_argument("world: negative duration");
  if (label_interval < 1)
    throw std::invalid_argument("world: label interval must be >= 1");
  if (placement_min_range <= 0 || placement_max_range < placement_min_range)
    throw std::invalid_argument("world: bad placement range");
  if (ego_speed < 0 || ego_radius <= 0 || lane_change_time <= 0)
    throw std::invalid_argument("world: bad ego trajectory parameters");
}

Pose ego_pose_at(const WorldConfig& cfg, double t) {
  switch (cfg.ego_mode) {
    case EgoMode::kStraight:
      return Pose::translation(cfg.ego_speed * t, 0, 0);
    case EgoMode::kArc: {
      const double theta = cfg.ego_speed / cfg.ego_radius * t;
      return compose(Pose::translation(cfg.ego_radius * std::sin(theta),
                                       cfg.ego_radius * (1 - std::cos(theta)),
                                       0),
                     Pose::rotation_z(theta));
    }
    case EgoMode::kLaneChange: {
      const double x = cfg.ego_speed * t;
      double y = cfg.lane_offset;
      double dy = 0.0;
      if (t < cfg.lane_change_time) {
        const double phase = kPi * t / cfg.lane_change_time;
        y = cfg.lane_offset * 0.5 * (1 - std::cos(phase));
        dy = cfg.lane_offset * 0.5 * (kPi / cfg.lane_change_time) *
             std::sin(phase);
      }
      const double yaw = std::atan2(dy, std::max(cfg.ego_speed, 1e-9));
      return compose(Pose::translation(x, y, 0), Pose::rotation_z(yaw));
    }
  }
  throw std::invalid_argument("unknown ego mode");
}

std::vector<FrameRecord> generate_sequence(const WorldConfig& cfg,
                                           uint64_t seed) {
  cfg.validate();
  const std::vector<WorldObject> objects = build_world(cfg, seed);
  const PointCloud ground = build_ground_pattern(cfg, seed);

  std::vector<FrameRecord> frames;
  frames.reserve(cfg.duration);
  for (int k = 0; k < cfg.duration; ++k) {
    const double t = static_cast<double>(k) / cfg.frame_rate;
    FrameRecord fr;
    fr.timestamp = t;
    fr.ego_pose = ego_pose_at(cfg, t);
    fr.labeled = (k % cfg.label_interval) == 0;
    const Pose ego_inv = fr.ego_pose.inverse();
    const double ego_yaw = fr.ego_pose.yaw();

    for (const WorldObject& o : objects) {
      const double cx = o.cx + o.speed * t * std::cos(o.yaw);
      const double cy = o.cy + o.speed * t * std::sin(o.yaw);
      const Eigen::Vector3d center_ego =
          ego_inv.apply(Eigen::Vector3d(cx, cy, o.h / 2));
      const double center_range = std::hypot(center_ego.x(), center_ego.y());

      // Per-(object, frame) stream for dropout and noise draws.
      Rng rng(hash_combine(
          seed, hash_combine(hash_str("frame"),
                             hash_combine(o.id, static_cast<uint64_t>(k)))));

      size_t budget = o.pattern.size();
      if (cfg.angular_resolution > 0 && center_range > 1.0) {
        // Apparent size shrinks with range: cap samples by the number of
        // beam steps across the object's mean footprint.
        const double apparent =
            0.5 * (o.w + o.l) / (center_range * cfg.angular_resolution);
        budget = std::min<size_t>(
            budget, static_cast<size_t>(std::max(1.0, std::floor(apparent))));
      }

      const double cos_y = std::cos(o.yaw);
      const double sin_y = std::sin(o.yaw);
      for (size_t i = 0; i < budget; ++i) {
        const LidarPoint& s = o.pattern[i];
        const double wx = cx + cos_y * s.x - sin_y * s.y;
        const double wy = cy + sin_y * s.x + cos_y * s.y;
        const double wz = o.h / 2 + s.z;
        Eigen::Vector3d pe = ego_inv.apply(Eigen::Vector3d(wx, wy, wz));
        const double range = std::hypot(pe.x(), pe.y());
        const double drop =
            std::min(kDropoutMax, cfg.dropout_per_meter * range);
        if (rng.uniform() < drop) continue;
        if (range > cfg.lidar_range) continue;
        if (cfg.noise_sigma > 0) {
          pe.x() += cfg.noise_sigma * rng.normal();
          pe.y() += cfg.noise_sigma * rng.normal();
          pe.z() += cfg.noise_sigma * rng.normal();
        }
        fr.points.push_back(
            LidarPoint{pe.x(), pe.y(), pe.z(), s.intensity, 0.0f});
      }

      if (center_range <= cfg.lidar_range) {
        GtBox box;
        box.x = center_ego.x();
        box.y = center_ego.y();
        box.z = center_ego.z();
        box.w = o.w;
        box.l = o.l;
        box.h = o.h;
        box.yaw = wrap_angle(o.yaw - ego_yaw);
        box.cls = 0;
        box.track_id = o.id;
        fr.gt_boxes.push_back(box);
      }
    }

    // Ground points live in the ego frame already (sensor-relative pattern).
    Rng ground_rng(hash_combine(
        seed, hash_combine(hash_str("ground_frame"), static_cast<uint64_t>(k))));
    for (const LidarPoint& g : ground) {
      const double range = std::hypot(g.x, g.y);
      const double drop = std::min(kDropoutMax, cfg.dropout_per_meter * range);
      if (ground_rng.uniform() < drop) continue;
      LidarPoint p = g;
      if (cfg.noise_sigma > 0) {
        p.x += cfg.noise_sigma * ground_rng.normal();
        p.y += cfg.noise_sigma * ground_rng.normal();
        p.z += cfg.noise_sigma * ground_rng.normal();
      }
      fr.points.push_back(p);
    }

    frames.push_back(std::move(fr));
  }
  return frames;
}

// --- binary helpers ---------------------------------------------------------

namespace {

void put_u32(std::vector<unsigned char>& buf, uint32_t v) {
  buf.push_back(v & 0xFF);
  buf.push_back((v >> 8) & 0xFF);
  buf.push_back((v >> 16) & 0xFF);
  buf.push_back((v >> 24) & 0xFF);
}

void put_f32(std::vector<unsigned char>& buf, float v) {
  uint32_t bits = 0;
  std::memcpy(&bits, &v, 4);
  put_u32(buf, bits);
}

void put_f64(std::vector<unsigned char>& buf, double v) {
  uint64_t bits = 0;
  std::memcpy(&bits, &v, 8);
  put_u32(buf, static_cast<uint32_t>(bits & 0xFFFFFFFFULL));
  put_u32(buf, static_cast<uint32_t>(bits >> 32));
}

class ByteCursor {
 public:
  ByteCursor(const unsigned char* data, size_t size) : p_(data), end_(data + size) {}

  uint32_t u32() {
    need(4);
    uint32_t v = static_cast<uint32_t>(p_[0]) | (static_cast<uint32_t>(p_[1]) << 8) |
                 (static_cast<uint32_t>(p_[2]) << 16) |
                 (static_cast<uint32_t>(p_[3]) << 24);
    p_ += 4;
    return v;
  }
  float f32() {
    const uint32_t bits = u32();
    float v = 0;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    const uint64_t lo = u32();
    const uint64_t hi = u32();
    const uint64_t bits = lo | (hi << 32);
    double v = 0;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  size_t remaining() const { return static_cast<size_t>(end_ - p_); }

 private:
  void need(size_t n) {
    if (remaining() < n) throw std::runtime_error("buffer underrun");
  }
  const unsigned char* p_;
  const unsigned char* end_;
};

std::vector<unsigned char> encode_frame(const FrameRecord& fr) {
  std::vector<unsigned char> buf;
  buf.reserve(32 + 16 * 8 + fr.points.size() * 20 + fr.gt_boxes.size() * 36);
  put_u32(buf, kFrameMagic);
  put_u32(buf, kFrameVersion);
  put_f64(buf, fr.timestamp);
  for (double v : fr.ego_pose.to_row_major()) put_f64(buf, v);
  put_u32(buf, static_cast<uint32_t>(fr.points.size()));
  put_u32(buf, static_cast<uint32_t>(fr.gt_boxes.size()));
  for (const LidarPoint& p : fr.points) {
    put_f32(buf, static_cast<float>(p.x));
    put_f32(buf, static_cast<float>(p.y));
    put_f32(buf, static_cast<float>(p.z));
    put_f32(buf, p.intensity);
    put_f32(buf, 0.0f);  // dt is zero on disk by definition
  }
  for (const GtBox& b : fr.gt_boxes) {
    put_f32(buf, static_cast<float>(b.x));
    put_f32(buf, static_cast<float>(b.y));
    put_f32(buf, static_cast<float>(b.z));
    put_f32(buf, static_cast<float>(b.w));
    put_f32(buf, static_cast<float>(b.l));
    put_f32(buf, static_cast<float>(b.h));
    put_f32(buf, static_cast<float>(b.yaw));
    put_f32(buf, static_cast<float>(b.cls));
    put_u32(buf, b.track_id);
  }
  return buf;
}

}  // namespace

void write_sequence(const std::filesystem::path& file,
                    const std::vector<FrameRecord>& frames) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + file.string());
  for (const FrameRecord& fr : frames) {
    const std::vector<unsigned char> buf = encode_frame(fr);
    uint32_t crc = static_cast<uint32_t>(
        crc32(crc32(0L, nullptr, 0), buf.data(),
              static_cast<uInt>(buf.size())));
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
    std::vector<unsigned char> tail;
    put_u32(tail, crc);
    out.write(reinterpret_cast<const char*>(tail.data()), 4);
  }
  if (!out) throw std::runtime_error("write failed: " + file.string());
}

SequenceReader::SequenceReader(const std::filesystem::path& file)
    : in_(file, std::ios::binary), path_(file.string()) {
  if (!in_) throw std::runtime_error("cannot open: " + path_);
}

std::optional<FrameRecord> SequenceReader::next() {
  // Fixed-size header first; a clean EOF before any header byte ends the
  // stream, anything partial is a truncation error.
  constexpr size_t kHeaderBytes = 4 + 4 + 8 + 16 * 8 + 4 + 4;
  buf_.resize(kHeaderBytes);
  in_.read(reinterpret_cast<char*>(buf_.data()), kHeaderBytes);
  const size_t got = static_cast<size_t>(in_.gcount());
  if (got == 0 && in_.eof()) return std::nullopt;
  const std::string at = " at record " + std::to_string(frames_read_);
  if (got < kHeaderBytes)
    throw std::runtime_error("sequence read: truncated header" + at);

  ByteCursor header(buf_.data(), kHeaderBytes);
  const uint32_t magic = header.u32();
  const uint32_t version = header.u32();
  if (magic != kFrameMagic)
    throw std::runtime_error("sequence read: bad magic" + at);
  if (version != kFrameVersion)
    throw std::runtime_error("sequence read: unsupported version" + at);
  FrameRecord fr;
  fr.timestamp = header.f64();
  std::array<double, 16> pose_v{};
  for (double& v : pose_v) v = header.f64();
  fr.ego_pose = Pose::from_row_major(pose_v);
  const uint32_t n_points = header.u32();
  const uint32_t n_boxes = header.u32();

  const size_t body = static_cast<size_t>(n_points) * 20 +
                      static_cast<size_t>(n_boxes) * 36 + 4;
  buf_.resize(kHeaderBytes + body);
  in_.read(reinterpret_cast<char*>(buf_.data() + kHeaderBytes),
           static_cast<std::streamsize>(body));
  if (static_cast<size_t>(in_.gcount()) < body)
    throw std::runtime_error("sequence read: truncated body" + at);

  const uint32_t crc_expect = static_cast<uint32_t>(
      crc32(crc32(0L, nullptr, 0), buf_.data(),
            static_cast<uInt>(kHeaderBytes + body - 4)));
  ByteCursor cur(buf_.data() + kHeaderBytes, body);
  fr.points.reserve(n_points);
  for (uint32_t i = 0; i < n_points; ++i) {
    LidarPoint p;
    p.x = cur.f32();
    p.y = cur.f32();
    p.z = cur.f32();
    p.intensity = cur.f32();
    p.dt = cur.f32();
    fr.points.push_back(p);
  }
  fr.gt_boxes.reserve(n_boxes);
  for (uint32_t i = 0; i < n_boxes; ++i) {
    GtBox b;
    b.x = cur.f32();
    b.y = cur.f32();
    b.z = cur.f32();
    b.w = cur.f32();
    b.l = cur.f32();
    b.h = cur.f32();
    b.yaw = cur.f32();
    b.cls = static_cast<int>(cur.f32());
    b.track_id = cur.u32();
    fr.gt_boxes.push_back(b);
  }
  const uint32_t crc_stored = cur.u32();
  if (crc_stored != crc_expect)
    throw std::runtime_error("sequence read: CRC mismatch" + at);

  ++frames_read_;
  return fr;
}

std::vector<FrameRecord> read_sequence(const std::filesystem::path& file) {
  SequenceReader reader(file);
  std::vector<FrameRecord> frames;
  while (auto fr = reader.next()) frames.push_back(std::move(*fr));
  return frames;
}

// --- manifest ---------------------------------------------------------------

void write_manifest(const std::filesystem::path& dir,
                    const DatasetManifest& manifest) {
  nlohmann::ordered_json j;
  j["version"] = manifest.version;
  j["frame_rate"] = manifest.frame_rate;
  j["label_interval"] = manifest.label_interval;
  j["sequences"] = nlohmann::ordered_json::array();
  for (const SequenceInfo& s : manifest.sequences) {
    j["sequences"].push_back({{"id", s.id}, {"file", s.file}, {"frames", s.frames}});
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out)
    throw std::runtime_error("cannot write manifest in " + dir.string());
  out << j.dump(2) << '\n';
}

DatasetManifest read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in)
    throw std::runtime_error("missing manifest.json in " + dir.string());
  nlohmann::json j;
  in >> j;
  DatasetManifest m;
  m.version = j.at("version").get<int>();
  if (m.version != 1)
    throw std::runtime_error("unsupported manifest version");
  m.frame_rate = j.at("frame_rate").get<double>();
  m.label_interval = j.at("label_interval").get<int>();
  for (const auto& js : j.at("sequences")) {
    SequenceInfo s;
    s.id = js.at("id").get<uint32_t>();
    s.file = js.at("file").get<std::string>();
    s.frames = js.at("frames").get<int>();
    m.sequences.push_back(std::move(s));
  }
  return m;
}

std::vector<SampleIndex> manifest_samples(const DatasetManifest& manifest) {
  std::vector<SampleIndex> samples;
  for (const SequenceInfo& s : manifest.sequences) {
    for (int k = 0; k < s.frames; ++k) {
      samples.push_back(
          {s.id, k, (k % manifest.label_interval) == 0});
    }
  }
  return samples;
}

// --- gt database ------------------------------------------------------------

GtDatabase build_gt_database(const std::filesystem::path& dataset_dir) {
  const DatasetManifest manifest = read_manifest(dataset_dir);
  GtDatabase db;
  bool any_labeled = false;
  for (const SequenceInfo& info : manifest.sequences) {
    SequenceReader reader(dataset_dir / info.file);
    int frame_index = 0;
    while (auto fr = reader.next()) {
      const bool labeled = (frame_index % manifest.label_interval) == 0;
      if (labeled && !fr->gt_boxes.empty()) {
        any_labeled = true;
        for (const GtBox& box : fr->gt_boxes) {
          const uint64_t id =
              (static_cast<uint64_t>(info.id) << 32) | box.track_id;
          GtObject& obj = db.objects[id];
          if (obj.frames.empty()) {
            obj.id = id;
            obj.cls = box.cls;
            obj.w = box.w;
            obj.l = box.l;
            obj.h = box.h;
          }
          GtSnippet snip;
          snip.frame_index = frame_index;
          // Object pose in the world: ego pose composed with the box pose.
          snip.world_pose = compose(
              fr->ego_pose, compose(Pose::translation(box.x, box.y, box.z),
                                    Pose::rotation_z(box.yaw)));
          // Points inside the box, re-expressed in the object frame.
          const Detection det = box.as_detection();
          const double cos_y = std::cos(box.yaw);
          const double sin_y = std::sin(box.yaw);
          for (const LidarPoint& p : fr->points) {
            if (!point_in_box(p.x, p.y, det, 0.1)) continue;
            const double dx = p.x - box.x;
            const double dy = p.y - box.y;
            LidarPoint q;
            q.x = cos_y * dx + sin_y * dy;
            q.y = -sin_y * dx + cos_y * dy;
            q.z = p.z - box.z;
            q.intensity = p.intensity;
            snip.points.push_back(q);
          }
          obj.frames.push_back(std::move(snip));
        }
      }
      ++frame_index;
    }
  }
  if (!any_labeled)
    throw std::runtime_error("gt database: dataset has no labeled boxes");
  return db;
}

void write_gt_database(const std::filesystem::path& dir, const GtDatabase& db) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json index;
  index["version"] = 1;
  index["objects"] = nlohmann::ordered_json::array();
  for (const auto& [id, obj] : db.objects) {
    const std::string file = "obj_" + std::to_string(id) + ".bin";
    nlohmann::ordered_json jo;
    jo["id"] = id;
    jo["class"] = obj.cls;
    jo["size"] = {obj.w, obj.l, obj.h};
    jo["file"] = file;
    nlohmann::ordered_json poses = nlohmann::ordered_json::array();
    for (const GtSnippet& s : obj.frames) {
      nlohmann::ordered_json jp;
      jp["frame"] = s.frame_index;
      jp["pose"] = s.world_pose.to_row_major();
      poses.push_back(std::move(jp));
    }
    jo["poses"] = std::move(poses);
    index["objects"].push_back(std::move(jo));

    std::vector<unsigned char> buf;
    put_u32(buf, static_cast<uint32_t>(obj.frames.size()));
    for (const GtSnippet& s : obj.frames) {
      put_u32(buf, static_cast<uint32_t>(s.points.size()));
      for (const LidarPoint& p : s.points) {
        put_f32(buf, static_cast<float>(p.x));
        put_f32(buf, static_cast<float>(p.y));
        put_f32(buf, static_cast<float>(p.z));
        put_f32(buf, p.intensity);
      }
    }
    std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + (dir / file).string());
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
  }
  std::ofstream out(dir / "index.json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write gt index in " + dir.string());
  out << index.dump(2) << '\n';
}

GtDatabase read_gt_database(const std::filesystem::path& dir) {
  std::ifstream in(dir / "index.json");
  if (!in) throw std::runtime_error("missing gt index in " + dir.string());
  nlohmann::json index;
  in >> index;
  if (index.at("version").get<int>() != 1)
    throw std::runtime_error("unsupported gt database version");

  GtDatabase db;
  for (const auto& jo : index.at("objects")) {
    GtObject obj;
    obj.id = jo.at("id").get<uint64_t>();
    obj.cls = jo.at("class").get<int>();
    obj.w = jo.at("size")[0].get<double>();
    obj.l = jo.at("size")[1].get<double>();
    obj.h = jo.at("size")[2].get<double>();

    std::ifstream bin(dir / jo.at("file").get<std::string>(),
                      std::ios::binary);
    if (!bin)
      throw std::runtime_error("missing snippet file for object " +
                               std::to_string(obj.id));
    std::vector<unsigned char> bytes(
        (std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
    ByteCursor cur(bytes.data(), bytes.size());
    const uint32_t n_frames = cur.u32();
    const auto& poses = jo.at("poses");
    if (poses.size() != n_frames)
      throw std::runtime_error("gt database: pose/snippet count mismatch");
    for (uint32_t i = 0; i < n_frames; ++i) {
      GtSnippet snip;
      snip.frame_index = poses[i].at("frame").get<int>();
      std::array<double, 16> pose_v{};
      const auto& jp = poses[i].at("pose");
      for (size_t k = 0; k < 16; ++k) pose_v[k] = jp[k].get<double>();
      snip.world_pose = Pose::from_row_major(pose_v);
      const uint32_t n_pts = cur.u32();
      snip.points.reserve(n_pts);
      for (uint32_t k = 0; k < n_pts; ++k) {
        LidarPoint p;
        p.x = cur.f32();
        p.y = cur.f32();
        p.z = cur.f32();
        p.intensity = cur.f32();
        snip.points.push_back(p);
      }
      obj.frames.push_back(std::move(snip));
    }
    db.objects[obj.id] = std::move(obj);
  }
  return db;
}

}  // namespace streamdet
