#include "streamdet/sampler.hpp"

#include <algorithm>
#include <ostream>
#include <set>
#include <stdexcept>

#include "streamdet/rng.hpp"

namespace streamdet {

size_t Schedule::total_frames() const {
  size_t n = 0;
  for (const auto& lane : lanes) {
    for (const Segment& seg : lane) n += seg.frames.size();
  }
  return n;
}

void Schedule::validate() const {
  if (batch_size < 1 || target_len < 1)
    throw std::invalid_argument("Schedule: bad batch_size or target_len");
  if (static_cast<int>(lanes.size()) != batch_size)
    throw std::invalid_argument("Schedule: lane count != batch_size");
  const size_t per_lane = lanes.empty() ? 0 : lanes.front().size();
  for (const auto& lane : lanes) {
    if (lane.size() != per_lane)
      throw std::invalid_argument("Schedule: lanes differ in segment count");
    for (const Segment& seg : lane) {
      if (seg.frames.empty())
        throw std::invalid_argument("Schedule: empty segment");
      if (static_cast<int>(seg.frames.size()) > target_len)
        throw std::invalid_argument("Schedule: segment longer than target");
      for (size_t i = 0; i < seg.frames.size(); ++i) {
        if (seg.frames[i].sequence_id != seg.sequence_id)
          throw std::invalid_argument("Schedule: mixed sequence in segment");
        if (i > 0 &&
            seg.frames[i].frame_index <= seg.frames[i - 1].frame_index)
          throw std::invalid_argument(
              "Schedule: frame_index not strictly increasing in segment");
      }
    }
  }
}

void DtslConfig::validate() const {
  if (l_max < 1) throw std::invalid_argument("DtslConfig: l_max must be >= 1");
  if (ep_all < 1)
    throw std::invalid_argument("DtslConfig: ep_all must be >= 1");
  if (ep_cur < 0 || ep_cur > ep_all)
    throw std::invalid_argument("DtslConfig: ep_cur out of [0, ep_all]");
}

int dtsl_length(const DtslConfig& cfg) {
  cfg.validate();
  // The ramp term is (4*ep_cur - ep_all) / (2*ep_all), clamped to [0, 1].
  const long long num = 4LL * cfg.ep_cur - cfg.ep_all;
  if (num <= 0) return 1;                            // clamped at 0
  if (num >= 2LL * cfg.ep_all) return cfg.l_max;     // clamped at 1
  const long long scaled = cfg.l_max * num;          // l_max * ramp numerator
  const long long floored = scaled / (2LL * cfg.ep_all);
  return static_cast<int>(std::max(1LL, floored));
}

std::map<uint32_t, std::vector<SampleIndex>> sort_sequences(
    const std::vector<SampleIndex>& samples) {
  std::map<uint32_t, std::vector<SampleIndex>> out;
  for (const SampleIndex& s : samples) {
    if (s.frame_index < 0)
      throw std::invalid_argument("sort_sequences: negative frame_index");
    out[s.sequence_id].push_back(s);
  }
  for (auto& [id, frames] : out) {
    std::stable_sort(frames.begin(), frames.end(),
                     [](const SampleIndex& a, const SampleIndex& b) {
                       return a.frame_index < b.frame_index;
                     });
    for (size_t i = 1; i < frames.size(); ++i) {
      if (frames[i].frame_index == frames[i - 1].frame_index)
        throw std::invalid_argument(
            "sort_sequences: duplicate (sequence, frame) pair");
    }
  }
  return out;
}

Schedule split_and_pad(
    const std::map<uint32_t, std::vector<SampleIndex>>& streams,
    int target_len, int batch_size, uint64_t seed) {
  if (target_len < 1)
    throw std::invalid_argument("split_and_pad: target_len must be >= 1");
  if (batch_size < 1)
    throw std::invalid_argument("split_and_pad: batch_size must be >= 1");

  // Cut sequences into consecutive segments; deterministic base order.
  std::vector<Segment> segments;
  for (const auto& [id, frames] : streams) {
    for (size_t start = 0; start < frames.size();
         start += static_cast<size_t>(target_len)) {
      Segment seg;
      seg.sequence_id = id;
      const size_t stop =
          std::min(frames.size(), start + static_cast<size_t>(target_len));
      seg.frames.assign(frames.begin() + start, frames.begin() + stop);
      segments.push_back(std::move(seg));
    }
  }
  if (segments.empty())
    throw std::invalid_argument("split_and_pad: no streams");

  // Pad to a multiple of batch_size by replicating distinct segments chosen
  // uniformly at random; a replica is marked so coverage tests can tell the
  // copies from the originals.
  Rng rng(seed);
  const size_t unique = segments.size();
  const size_t pad =
      (batch_size - unique % batch_size) % static_cast<size_t>(batch_size);
  std::vector<size_t> pick_pool(unique);
  for (size_t i = 0; i < unique; ++i) pick_pool[i] = i;
  rng.shuffle(pick_pool);
  for (size_t i = 0; i < pad; ++i) {
    Segment copy = segments[pick_pool[i % unique]];
    copy.replicated = true;
    segments.push_back(std::move(copy));
  }

  rng.shuffle(segments);

  Schedule schedule;
  schedule.batch_size = batch_size;
  schedule.target_len = target_len;
  schedule.lanes.resize(batch_size);
  for (size_t i = 0; i < segments.size(); ++i) {
    schedule.lanes[i % static_cast<size_t>(batch_size)].push_back(
        std::move(segments[i]));
  }
  schedule.validate();
  return schedule;
}

Schedule epoch_schedule(const std::vector<SampleIndex>& samples,
                        const DtslConfig& cfg, int batch_size,
                        uint64_t base_seed) {
  const int len = dtsl_length(cfg);
  return split_and_pad(sort_sequences(samples), len, batch_size,
                       hash_combine(base_seed, static_cast<uint64_t>(cfg.ep_cur)));
}

void dump_schedule_jsonl(const Schedule& schedule, std::ostream& os) {
  for (size_t lane = 0; lane < schedule.lanes.size(); ++lane) {
    for (size_t seg = 0; seg < schedule.lanes[lane].size(); ++seg) {
      const Segment& s = schedule.lanes[lane][seg];
      for (size_t i = 0; i < s.frames.size(); ++i) {
        os << "{\"lane\":" << lane << ",\"segment\":" << seg
           << ",\"seq\":" << s.frames[i].sequence_id
           << ",\"frame\":" << s.frames[i].frame_index
           << ",\"reset\":" << (i == 0 ? "true" : "false")
           << ",\"replicated\":" << (s.replicated ? "true" : "false") << "}\n";
      }
    }
  }
}

}  // namespace streamdet
