#pragma once

#include <atomic>
#include <iosfwd>
#include <string>
#include <vector>

#include "streamdet/geometry.hpp"

namespace streamdet {

/// Dense BEV grid: channels x height x width feature planes plus an occupancy
/// mask (binary) and occupancy count plane used by temporal fusion to tell
/// how many moments contributed to a cell. count == 0 exactly where mask == 0.
class ImageGrid {
 public:
  ImageGrid() { ++live_; }
  explicit ImageGrid(const GridSpec& spec);
  ImageGrid(const ImageGrid& o)
      : spec_(o.spec_), data_(o.data_), mask_(o.mask_), count_(o.count_) {
    ++live_;
  }
  ImageGrid(ImageGrid&& o) noexcept
      : spec_(o.spec_),
        data_(std::move(o.data_)),
        mask_(std::move(o.mask_)),
        count_(std::move(o.count_)) {
    ++live_;
  }
  ImageGrid& operator=(const ImageGrid&) = default;
  ImageGrid& operator=(ImageGrid&&) = default;
  ~ImageGrid() { --live_; }

  const GridSpec& spec() const { return spec_; }
  int width() const { return spec_.width; }
  int height() const { return spec_.height; }
  int channels() const { return spec_.channels; }
  size_t plane_size() const {
    return static_cast<size_t>(spec_.width) * spec_.height;
  }

  double& at(int c, int iy, int ix) {
    return data_[(static_cast<size_t>(c) * spec_.height + iy) * spec_.width +
                 ix];
  }
  double at(int c, int iy, int ix) const {
    return data_[(static_cast<size_t>(c) * spec_.height + iy) * spec_.width +
                 ix];
  }
  double& mask(int iy, int ix) {
    return mask_[static_cast<size_t>(iy) * spec_.width + ix];
  }
  double mask(int iy, int ix) const {
    return mask_[static_cast<size_t>(iy) * spec_.width + ix];
  }
  double& count(int iy, int ix) {
    return count_[static_cast<size_t>(iy) * spec_.width + ix];
  }
  double count(int iy, int ix) const {
    return count_[static_cast<size_t>(iy) * spec_.width + ix];
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }
  std::vector<double>& mask_plane() { return mask_; }
  const std::vector<double>& mask_plane() const { return mask_; }
  std::vector<double>& count_plane() { return count_; }
  const std::vector<double>& count_plane() const { return count_; }

  void zero();

  /// Checks finiteness, binary mask and the count/mask coupling; throws on
  /// violation.
  void validate() const;

  size_t resident_bytes() const {
    return (data_.capacity() + mask_.capacity() + count_.capacity()) *
           sizeof(double);
  }

  /// Binary dump: three u32 (width, height, channels) then the feature
  /// planes as little-endian f32.
  void dump_binary(std::ostream& os) const;
  /// Per-channel min/max/mean CSV summary.
  void dump_summary_csv(std::ostream& os) const;

  /// Number of ImageGrid instances currently alive; used by memory-bound
  /// tests to show training does not retain per-frame graphs.
  static long live_count() { return live_.load(); }

 private:
  GridSpec spec_{};
  std::vector<double> data_;
  std::vector<double> mask_;
  std::vector<double> count_;

  static std::atomic<long> live_;
};

}  // namespace streamdet
