#pragma once

// Latency measurement over a frame stream. The first `warmup` frames are
// stepped but excluded from every statistic, so memory fill-up does not bias
// the summary. The least-squares slope of per-frame time over frame index is
// the headline number: a constant-work engine shows a slope indistinguishable
// from zero no matter how long the stream runs.

#include <iosfwd>
#include <vector>

#include "streamdet/pipeline.hpp"

namespace streamdet {

struct LatencyReport {
  int frames = 0;  // frames stepped in total
  int warmup = 0;  // leading frames excluded from statistics
  std::vector<StepStats> stats;      // post-warmup, in stream order
  std::vector<double> frame_micros;  // post-warmup wall time per frame
  double mean_micros = 0.0;
  double p50_micros = 0.0;
  double p99_micros = 0.0;
  double slope_micros_per_frame = 0.0;  // least-squares over frame index
  size_t peak_bank_size = 0;            // max point-bank residency seen
  size_t peak_resident_bytes = 0;       // max recurrent-state footprint
};

/// Ordinary least-squares slope of y against its index 0..n-1.
double least_squares_slope(const std::vector<double>& y);

/// Nearest-rank percentile (q in [0, 1]) of a sample.
double percentile(std::vector<double> values, double q);

/// Steps every frame through the engine (reset on the first) and collects
/// post-warmup statistics. Requires 0 <= warmup < frames.size().
LatencyReport bench_stream(Engine& engine,
                           const std::vector<FrameRecord>& frames,
                           int warmup = 50);
LatencyReport bench_stream(ConcatEngine& engine,
                           const std::vector<FrameRecord>& frames,
                           int warmup = 50);

/// One "frame,stage,micros" row per post-warmup frame with stage "total".
void write_latency_csv(std::ostream& os, const LatencyReport& r);

/// Full per-stage decomposition: one "frame,stage,micros" row per stage per
/// post-warmup frame.
void write_stage_csv(std::ostream& os, const LatencyReport& r);

/// Minimal self-contained SVG line plot of per-frame latency.
void write_latency_svg(std::ostream& os, const LatencyReport& r);

}  // namespace streamdet
