#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "streamdet/frame.hpp"
#include "streamdet/sampler.hpp"

namespace streamdet {

enum class EgoMode { kStraight, kArc, kLaneChange };

EgoMode ego_mode_from_name(const std::string& name);
const char* ego_mode_name(EgoMode m);

/// Synthetic world parameters. Objects are boxes scattered around the origin;
/// moving ones travel at constant velocity. Points are sampled from fixed
/// per-object surface patterns so that, with noise and dropout disabled, every
/// frame of a static scene yields identical point sets.
struct WorldConfig {
  int n_static = 6;
  int n_moving = 2;
  double speed_min = 2.0;  // m/s, moving objects
  double speed_max = 8.0;
  double size_w_min = 1.6, size_w_max = 2.2;  // meters
  double size_l_min = 3.5, size_l_max = 5.0;
  double size_h_min = 1.4, size_h_max = 1.8;

  double lidar_range = 60.0;       // meters
  int points_per_object = 150;     // nominal surface samples per object
  int ground_points = 600;         // ego-relative ground samples per frame
  double angular_resolution = 0.0; // rad; > 0 caps points by apparent size
  double dropout_per_meter = 0.0;  // keep prob = 1 - min(0.98, rate * range)
  double noise_sigma = 0.02;       // meters, Gaussian per axis

  double frame_rate = 10.0;  // Hz
  int duration = 0;          // frames; 0 means an empty sequence

  EgoMode ego_mode = EgoMode::kStraight;
  double ego_speed = 5.0;         // m/s
  double ego_radius = 50.0;       // arc mode, meters
  double lane_offset = 3.5;       // lane-change mode, meters
  double lane_change_time = 4.0;  // lane-change mode, seconds

  int label_interval = 1;          // every Nth frame labeled
  double placement_min_range = 8.0;
  double placement_max_range = 55.0;

  void validate() const;
};

/// Ego pose at time t, closed form (no per-step accumulation, so constant
/// velocities stay exact across long sequences).
Pose ego_pose_at(const WorldConfig& cfg, double t);

/// Deterministic synthetic sequence: same (cfg, seed) gives the same frames
/// on any platform. Ground truth contains every object within lidar range.
std::vector<FrameRecord> generate_sequence(const WorldConfig& cfg,
                                           uint64_t seed);

// --- Sequence file I/O -----------------------------------------------------
// Per-frame binary records: header {magic, version, timestamp, pose,
// n_points, n_boxes}, points as 5 x f32, boxes as 8 x f32 plus a u32 track
// id, all little-endian, with a trailing CRC32 per frame.

constexpr uint32_t kFrameMagic = 0x494E5446;  // "INTF"
constexpr uint32_t kFrameVersion = 1;

void write_sequence(const std::filesystem::path& file,
                    const std::vector<FrameRecord>& frames);

/// Streaming reader; holds one frame buffer regardless of sequence length.
/// Throws on bad magic/version, truncation, or CRC mismatch, naming the
/// failing record index.
class SequenceReader {
 public:
  explicit SequenceReader(const std::filesystem::path& file);

  /// Next frame, or nullopt at a clean end of file.
  std::optional<FrameRecord> next();

  size_t frames_read() const { return frames_read_; }
  /// Size of the reusable internal buffer; stays constant while streaming.
  size_t buffer_bytes() const { return buf_.capacity(); }

 private:
  std::ifstream in_;
  std::string path_;
  std::vector<unsigned char> buf_;
  size_t frames_read_ = 0;
};

std::vector<FrameRecord> read_sequence(const std::filesystem::path& file);

// --- Dataset directory -----------------------------------------------------

struct SequenceInfo {
  uint32_t id = 0;
  std::string file;  // relative to the dataset directory
  int frames = 0;
};

struct DatasetManifest {
  int version = 1;
  double frame_rate = 10.0;
  int label_interval = 1;
  std::vector<SequenceInfo> sequences;
};

void write_manifest(const std::filesystem::path& dir,
                    const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& dir);

/// Flattens a manifest into sampler input (one SampleIndex per frame, with
/// labeled flags from the labeling interval).
std::vector<SampleIndex> manifest_samples(const DatasetManifest& manifest);

// --- Ground-truth object database ------------------------------------------

/// One observation of a tracked object: its world pose that frame and the
/// LiDAR points that hit it, expressed in the object's own frame.
struct GtSnippet {
  int frame_index = 0;
  Pose world_pose;
  PointCloud points;
};

struct GtObject {
  uint64_t id = 0;  // (sequence_id << 32) | track_id
  int cls = 0;
  double w = 1.0, l = 1.0, h = 1.0;
  std::vector<GtSnippet> frames;
};

struct GtDatabase {
  std::map<uint64_t, GtObject> objects;
};

/// Scans every labeled frame of a dataset and collects per-track snippets.
/// Throws if the dataset has no labeled frames.
GtDatabase build_gt_database(const std::filesystem::path& dataset_dir);

/// Directory layout: index.json plus one binary snippet file per object.
void write_gt_database(const std::filesystem::path& dir, const GtDatabase& db);
GtDatabase read_gt_database(const std::filesystem::path& dir);

}  // namespace streamdet
