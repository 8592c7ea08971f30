#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <vector>

namespace streamdet {

/// One frame's position in the training set.
struct SampleIndex {
  uint32_t sequence_id = 0;
  int frame_index = 0;  // >= 0, ordinal within the sequence
  bool labeled = true;

  bool operator==(const SampleIndex&) const = default;
};

/// A consecutive run of frames from one sequence. The first frame of every
/// segment carries the reset flag: the memory bank is cleared there, so each
/// segment trains as an independent stream of bounded length.
struct Segment {
  uint32_t sequence_id = 0;
  std::vector<SampleIndex> frames;
  bool replicated = false;  // padding copy of another segment
};

/// Sampler output: per-lane ordered segment lists, all lanes equally long.
struct Schedule {
  int batch_size = 1;
  int target_len = 1;
  std::vector<std::vector<Segment>> lanes;

  int segments_per_lane() const {
    return lanes.empty() ? 0 : static_cast<int>(lanes.front().size());
  }
  size_t total_frames() const;
  /// Throws if any structural invariant is violated (lane shape, per-segment
  /// ordering, segment length bound).
  void validate() const;
};

/// Epoch-indexed curriculum: the maximum training sequence length ramps from
/// 1 in early epochs to l_max in the final quarter of training.
struct DtslConfig {
  int l_max = 1;
  int ep_all = 1;
  int ep_cur = 0;

  void validate() const;
};

/// Exact integer evaluation of
///   max(1, floor(l_max * min(1, max(0, 2 * ep_cur / ep_all - 0.5)))).
/// Integer arithmetic avoids misrounding near exact rational boundaries,
/// e.g. l_max=12, ep_all=6, ep_cur=2 is exactly 2 while the double-precision
/// evaluation of the same expression floors to 1.
int dtsl_length(const DtslConfig& cfg);

/// Groups samples by sequence, ascending frame_index, preserving labeled
/// flags. Rejects duplicate (sequence_id, frame_index) pairs.
std::map<uint32_t, std::vector<SampleIndex>> sort_sequences(
    const std::vector<SampleIndex>& samples);

/// Cuts every sequence into consecutive segments of at most target_len
/// frames (the final remainder stays short), pads the segment count to a
/// multiple of batch_size by replicating distinct randomly chosen segments,
/// shuffles, and deals segments round-robin to lanes. Deterministic per seed.
Schedule split_and_pad(const std::map<uint32_t, std::vector<SampleIndex>>& streams,
                       int target_len, int batch_size, uint64_t seed);

/// dtsl_length + sort_sequences + split_and_pad with the per-epoch seed
/// derived from (base_seed, ep_cur).
Schedule epoch_schedule(const std::vector<SampleIndex>& samples,
                        const DtslConfig& cfg, int batch_size,
                        uint64_t base_seed);

/// JSON-lines dump, one object per frame:
/// {"lane":..,"segment":..,"seq":..,"frame":..,"reset":..}
void dump_schedule_jsonl(const Schedule& schedule, std::ostream& os);

}  // namespace streamdet
