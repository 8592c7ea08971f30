#include "streamdet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <set>
#include <stdexcept>

namespace streamdet {

const std::vector<double>& default_ap_thresholds() {
  static const std::vector<double> kThresholds{0.5, 1.0, 2.0, 4.0};
  return kThresholds;
}

double EvalResult::ap_at(int cls, double threshold) const {
  for (const ApCell& c : cells) {
    if (c.cls == cls && c.threshold == threshold) return c.ap;
  }
  throw std::out_of_range("eval: no AP cell for requested class/threshold");
}

namespace {

struct PredRef {
  double score = 0.0;
  int frame = 0;
  int index = 0;  // original position within the frame, for tie-breaking
  double x = 0.0, y = 0.0;
};

struct GtRef {
  double x = 0.0, y = 0.0;
};

/// 101-point interpolated AP from per-prediction hit flags in descending
/// score order (ties already broken deterministically upstream).
double interpolated_ap(const std::vector<char>& hits, size_t n_gt) {
  if (n_gt == 0) return 0.0;
  std::vector<double> precision, recall;
  size_t tp = 0, fp = 0;
  precision.reserve(hits.size());
  recall.reserve(hits.size());
  for (char h : hits) {
    if (h) ++tp; else ++fp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
  }
  // Running max of precision over suffixes gives, for each sample point, the
  // best precision at any recall >= that sample's recall.
  std::vector<double> best(precision.size());
  double run = 0.0;
  for (size_t i = precision.size(); i-- > 0;) {
    run = std::max(run, precision[i]);
    best[i] = run;
  }
  double sum = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    // First sample with recall >= r; recalls are non-decreasing.
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) sum += best[static_cast<size_t>(it - recall.begin())];
  }
  return sum / 101.0;
}

}  // namespace

EvalResult evaluate(const std::vector<std::vector<Detection>>& preds,
                    const std::vector<std::vector<GtBox>>& gts,
                    const std::vector<double>& thresholds) {
  if (preds.size() != gts.size())
    throw std::invalid_argument("evaluate: prediction/ground-truth frame counts differ");
  if (thresholds.empty())
    throw std::invalid_argument("evaluate: threshold list is empty");
  for (double t : thresholds)
    if (!(t > 0.0))
      throw std::invalid_argument("evaluate: thresholds must be positive");

  // Bucket by class. Classes come from the ground truth.
  std::set<int> classes;
  for (const auto& frame : gts)
    for (const GtBox& g : frame) classes.insert(g.cls);

  std::map<int, std::vector<PredRef>> preds_by_class;
  std::map<int, std::vector<std::vector<GtRef>>> gts_by_class;
  for (int cls : classes) {
    gts_by_class[cls].assign(gts.size(), {});
    preds_by_class[cls] = {};
  }
  for (size_t f = 0; f < gts.size(); ++f)
    for (const GtBox& g : gts[f])
      gts_by_class[g.cls][f].push_back(GtRef{g.x, g.y});
  for (size_t f = 0; f < preds.size(); ++f) {
    for (size_t i = 0; i < preds[f].size(); ++i) {
      const Detection& d = preds[f][i];
      auto it = preds_by_class.find(d.cls);
      if (it == preds_by_class.end()) continue;  // no gt of this class anywhere
      it->second.push_back(PredRef{d.score, static_cast<int>(f),
                                   static_cast<int>(i), d.x, d.y});
    }
  }

  std::vector<double> sorted_thresholds = thresholds;
  std::sort(sorted_thresholds.begin(), sorted_thresholds.end());
  const double operating =
      std::binary_search(sorted_thresholds.begin(), sorted_thresholds.end(), 2.0)
          ? 2.0
          : sorted_thresholds[sorted_thresholds.size() / 2];

  EvalResult result;
  result.operating_threshold = operating;
  for (int cls : classes) {
    auto& cls_preds = preds_by_class[cls];
    std::sort(cls_preds.begin(), cls_preds.end(),
              [](const PredRef& a, const PredRef& b) {
                if (a.score != b.score) return a.score > b.score;
                if (a.frame != b.frame) return a.frame < b.frame;
                return a.index < b.index;
              });
    size_t n_gt = 0;
    for (const auto& frame : gts_by_class[cls]) n_gt += frame.size();

    for (double thr : sorted_thresholds) {
      std::vector<std::vector<char>> used(gts.size());
      for (size_t f = 0; f < gts.size(); ++f)
        used[f].assign(gts_by_class[cls][f].size(), 0);

      std::vector<char> hits;
      hits.reserve(cls_preds.size());
      size_t tp = 0;
      for (const PredRef& p : cls_preds) {
        const auto& frame_gts = gts_by_class[cls][static_cast<size_t>(p.frame)];
        auto& frame_used = used[static_cast<size_t>(p.frame)];
        int best = -1;
        double best_d = thr;
        for (size_t g = 0; g < frame_gts.size(); ++g) {
          if (frame_used[g]) continue;
          const double d = std::hypot(p.x - frame_gts[g].x, p.y - frame_gts[g].y);
          if (d <= best_d) {
            best_d = d;
            best = static_cast<int>(g);
          }
        }
        if (best >= 0) {
          frame_used[static_cast<size_t>(best)] = 1;
          hits.push_back(1);
          ++tp;
        } else {
          hits.push_back(0);
        }
      }

      ApCell cell;
      cell.cls = cls;
      cell.threshold = thr;
      cell.ap = interpolated_ap(hits, n_gt);
      cell.tp = tp;
      cell.fp = hits.size() - tp;
      cell.fn = n_gt - tp;
      result.cells.push_back(cell);
      if (thr == operating) {
        result.tp += cell.tp;
        result.fp += cell.fp;
        result.fn += cell.fn;
      }
    }
  }

  std::sort(result.cells.begin(), result.cells.end(),
            [](const ApCell& a, const ApCell& b) {
              if (a.cls != b.cls) return a.cls < b.cls;
              return a.threshold < b.threshold;
            });
  if (!result.cells.empty()) {
    double sum = 0.0;
    for (const ApCell& c : result.cells) sum += c.ap;
    result.map = sum / static_cast<double>(result.cells.size());
  }
  return result;
}

void write_ap_csv(std::ostream& os, const EvalResult& r) {
  os << "class,threshold,ap\n";
  char buf[96];
  for (const ApCell& c : r.cells) {
    std::snprintf(buf, sizeof buf, "%d,%.6g,%.9g\n", c.cls, c.threshold, c.ap);
    os << buf;
  }
}

}  // namespace streamdet
