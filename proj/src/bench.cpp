#include "streamdet/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>

namespace streamdet {

double least_squares_slope(const std::vector<double>& y) {
  const size_t n = y.size();
  if (n < 2) return 0.0;
  const double mean_x = (static_cast<double>(n) - 1.0) / 2.0;
  double mean_y = 0.0;
  for (double v : y) mean_y += v;
  mean_y /= static_cast<double>(n);
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double dx = static_cast<double>(i) - mean_x;
    num += dx * (y[i] - mean_y);
    den += dx * dx;
  }
  return num / den;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty())
    throw std::invalid_argument("percentile: empty sample");
  if (!(q >= 0.0 && q <= 1.0))
    throw std::invalid_argument("percentile: q outside [0, 1]");
  std::sort(values.begin(), values.end());
  const size_t rank = q <= 0.0
                          ? 0
                          : static_cast<size_t>(
                                std::ceil(q * static_cast<double>(values.size()))) -
                                1;
  return values[std::min(rank, values.size() - 1)];
}

namespace {

template <typename EngineT>
LatencyReport bench_impl(EngineT& engine, const std::vector<FrameRecord>& frames,
                         int warmup) {
  if (frames.empty())
    throw std::invalid_argument("bench: empty frame stream");
  if (warmup < 0 || static_cast<size_t>(warmup) >= frames.size())
    throw std::invalid_argument("bench: warmup must be in [0, frames)");

  LatencyReport r;
  r.frames = static_cast<int>(frames.size());
  r.warmup = warmup;
  r.stats.reserve(frames.size() - static_cast<size_t>(warmup));
  r.frame_micros.reserve(r.stats.capacity());

  using Clock = std::chrono::steady_clock;
  for (size_t i = 0; i < frames.size(); ++i) {
    const auto t0 = Clock::now();
    engine.step(frames[i], i == 0);
    const auto t1 = Clock::now();
    const double micros =
        std::chrono::duration<double, std::micro>(t1 - t0).count();
    const StepStats& st = engine.last_stats();
    r.peak_bank_size = std::max(r.peak_bank_size, st.bank_size);
    r.peak_resident_bytes = std::max(r.peak_resident_bytes,
                                     engine.resident_bytes());
    if (static_cast<int>(i) >= warmup) {
      r.stats.push_back(st);
      r.frame_micros.push_back(micros);
    }
  }

  double sum = 0.0;
  for (double v : r.frame_micros) sum += v;
  r.mean_micros = sum / static_cast<double>(r.frame_micros.size());
  r.p50_micros = percentile(r.frame_micros, 0.50);
  r.p99_micros = percentile(r.frame_micros, 0.99);
  r.slope_micros_per_frame = least_squares_slope(r.frame_micros);
  return r;
}

}  // namespace

LatencyReport bench_stream(Engine& engine,
                           const std::vector<FrameRecord>& frames,
                           int warmup) {
  return bench_impl(engine, frames, warmup);
}

LatencyReport bench_stream(ConcatEngine& engine,
                           const std::vector<FrameRecord>& frames,
                           int warmup) {
  return bench_impl(engine, frames, warmup);
}

void write_latency_csv(std::ostream& os, const LatencyReport& r) {
  os << "frame,stage,micros\n";
  char buf[96];
  for (size_t i = 0; i < r.frame_micros.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%llu,total,%.3f\n",
                  static_cast<unsigned long long>(r.stats[i].frame_index),
                  r.frame_micros[i]);
    os << buf;
  }
}

void write_stage_csv(std::ostream& os, const LatencyReport& r) {
  os << "frame,stage,micros\n";
  char buf[96];
  for (const StepStats& st : r.stats) {
    for (int s = 0; s < kNumStages; ++s) {
      std::snprintf(buf, sizeof buf, "%llu,%s,%.3f\n",
                    static_cast<unsigned long long>(st.frame_index),
                    stage_name(static_cast<Stage>(s)), st.stage_micros[s]);
      os << buf;
    }
  }
}

void write_latency_svg(std::ostream& os, const LatencyReport& r) {
  const int w = 800, h = 300, margin = 40;
  double max_y = 1.0;
  for (double v : r.frame_micros) max_y = std::max(max_y, v);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w
     << "\" height=\"" << h << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
  os << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
  os << "<line x1=\"" << margin << "\" y1=\"" << h - margin << "\" x2=\""
     << w - margin << "\" y2=\"" << h - margin
     << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
  os << "<line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin
     << "\" y2=\"" << h - margin << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f us", max_y);
  os << "<text x=\"4\" y=\"" << margin << "\" font-size=\"12\">" << buf
     << "</text>\n";
  os << "<text x=\"" << w - margin - 60 << "\" y=\"" << h - margin + 16
     << "\" font-size=\"12\">frame</text>\n";
  if (!r.frame_micros.empty()) {
    os << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1\" "
          "points=\"";
    const size_t n = r.frame_micros.size();
    for (size_t i = 0; i < n; ++i) {
      const double px =
          margin + (w - 2.0 * margin) *
                       (n == 1 ? 0.0
                               : static_cast<double>(i) /
                                     static_cast<double>(n - 1));
      const double py =
          h - margin - (h - 2.0 * margin) * (r.frame_micros[i] / max_y);
      std::snprintf(buf, sizeof buf, "%.1f,%.1f ", px, py);
      os << buf;
    }
    os << "\"/>\n";
  }
  os << "</svg>\n";
}

}  // namespace streamdet
