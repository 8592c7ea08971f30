#include "streamdet/grid.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace streamdet {

std::atomic<long> ImageGrid::live_{0};

ImageGrid::ImageGrid(const GridSpec& spec) : spec_(spec) {
  spec.validate();
  data_.assign(static_cast<size_t>(spec.channels) * spec.height * spec.width,
               0.0);
  mask_.assign(plane_size(), 0.0);
  count_.assign(plane_size(), 0.0);
  ++live_;
}

void ImageGrid::zero() {
  std::fill(data_.begin(), data_.end(), 0.0);
  std::fill(mask_.begin(), mask_.end(), 0.0);
  std::fill(count_.begin(), count_.end(), 0.0);
}

void ImageGrid::validate() const {
  for (double v : data_) {
    if (!std::isfinite(v))
      throw std::runtime_error("ImageGrid: non-finite feature value");
  }
  for (size_t i = 0; i < mask_.size(); ++i) {
    if (mask_[i] != 0.0 && mask_[i] != 1.0)
      throw std::runtime_error("ImageGrid: mask is not binary");
    if (count_[i] < 0.0)
      throw std::runtime_error("ImageGrid: negative occupancy count");
    if ((count_[i] == 0.0) != (mask_[i] == 0.0))
      throw std::runtime_error("ImageGrid: count/mask mismatch");
  }
}

void ImageGrid::dump_binary(std::ostream& os) const {
  const uint32_t w = static_cast<uint32_t>(spec_.width);
  const uint32_t h = static_cast<uint32_t>(spec_.height);
  const uint32_t c = static_cast<uint32_t>(spec_.channels);
  os.write(reinterpret_cast<const char*>(&w), 4);
  os.write(reinterpret_cast<const char*>(&h), 4);
  os.write(reinterpret_cast<const char*>(&c), 4);
  for (double v : data_) {
    const float f = static_cast<float>(v);
    os.write(reinterpret_cast<const char*>(&f), 4);
  }
}

void ImageGrid::dump_summary_csv(std::ostream& os) const {
  os << "channel,min,max,mean\n";
  const size_t n = plane_size();
  for (int c = 0; c < spec_.channels; ++c) {
    double mn = std::numeric_limits<double>::infinity();
    double mx = -std::numeric_limits<double>::infinity();
    double sum = 0.0;
    for (size_t i = 0; i < n; ++i) {
      const double v = data_[c * n + i];
      mn = std::min(mn, v);
      mx = std::max(mx, v);
      sum += v;
    }
    os << c << ',' << mn << ',' << mx << ',' << sum / static_cast<double>(n)
       << '\n';
  }
}

}  // namespace streamdet
