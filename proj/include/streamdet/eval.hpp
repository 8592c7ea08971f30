#pragma once

// Detection quality metrics. Matching is greedy in descending score order:
// each prediction claims the nearest still-unmatched ground-truth box of the
// same class in the same frame within a center-distance threshold. AP uses
// 101-point interpolation; mAP averages over every (class, threshold) cell.
// Greedy matching is the defined metric (not an approximation of an optimal
// assignment), which keeps evaluation deterministic and O(n log n).

#include <cstddef>
#include <iosfwd>
#include <vector>

#include "streamdet/frame.hpp"

namespace streamdet {

/// Center-distance thresholds (meters) averaged into mAP.
const std::vector<double>& default_ap_thresholds();

/// One (class, threshold) evaluation cell.
struct ApCell {
  int cls = 0;
  double threshold = 0.0;
  double ap = 0.0;
  size_t tp = 0;  // matched predictions
  size_t fp = 0;  // unmatched predictions
  size_t fn = 0;  // unmatched ground truths
};

struct EvalResult {
  std::vector<ApCell> cells;  // sorted by (class, threshold)
  double map = 0.0;           // mean AP over all cells
  // Error counts at the operating threshold: 2.0 m when present in the
  // threshold list, otherwise the middle entry.
  double operating_threshold = 0.0;
  size_t tp = 0, fp = 0, fn = 0;

  double ap_at(int cls, double threshold) const;
};

/// Frame-aligned evaluation: preds[i] and gts[i] describe the same frame.
/// Matching never crosses frames or classes. Classes are taken from the
/// ground truth; predictions of a class with no ground truth anywhere are
/// ignored (they have no recall denominator). Deterministic.
EvalResult evaluate(const std::vector<std::vector<Detection>>& preds,
                    const std::vector<std::vector<GtBox>>& gts,
                    const std::vector<double>& thresholds =
                        default_ap_thresholds());

/// CSV rows "class,threshold,ap{newline}" with a header line.
void write_ap_csv(std::ostream& os, const EvalResult& r);

}  // namespace streamdet
