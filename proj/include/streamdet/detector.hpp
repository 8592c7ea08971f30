#pragma once

// The single-frame BEV detector: pillar-style voxelizer, a small convolutional
// trunk with heatmap + box-regression heads, center-style decoding, and
// checkpoint I/O. The model also owns the learnable fusion parameters used
// when history grids are merged in.

#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "streamdet/frame.hpp"
#include "streamdet/grid.hpp"
#include "streamdet/grid_fusion.hpp"
#include "streamdet/rng.hpp"

namespace streamdet {

/// Input channel contract of the voxelizer (and therefore the model).
constexpr int kVoxelChannels = 6;
/// Output channels of the prediction map: heat logit, log-w, log-l,
/// sin yaw, cos yaw.
constexpr int kPmChannels = 5;
/// Fixed per-cell point budget normalizing the density channel to [0,1].
constexpr double kDensityCap = 16.0;

/// Scatters points into a BEV grid with the fixed channel contract:
/// 0 occupancy, 1 density (count / 16, capped at 1), 2 mean z, 3 max z,
/// 4 mean intensity, 5 mean dt. Out-of-bounds points are dropped.
/// spec.channels must equal kVoxelChannels.
ImageGrid voxelize_bev(const PointCloud& points, const GridSpec& spec);

/// Trainable parameters. conv1 is a 3x3 same-padding convolution from
/// kVoxelChannels to c_mid with ReLU; the two heads are 1x1 convolutions.
struct ToyModel {
  GridSpec input_spec;  // channels == kVoxelChannels
  int c_mid = 8;
  FusionMode fm_mode = FusionMode::kConcat;
  // Concat is the default at both fusion points: its learned projections
  // keep the recursive map bounded over arbitrarily long streams, where
  // plain Add accumulates logits without bound and degrades once streams
  // run past the training segment length.
  FusionMode pm_mode = FusionMode::kConcat;

  // conv1_w layout: [(m * kVoxelChannels + c) * 9 + (ky * 3 + kx)].
  std::vector<double> conv1_w;
  std::vector<double> conv1_b;  // [c_mid]
  std::vector<double> heat_w;   // [c_mid]
  double heat_b = 0.0;
  std::vector<double> reg_w;    // [4 * c_mid], row j = output channel
  std::vector<double> reg_b;    // [4]

  // Learnable fusion parameters; only the ones matching the mode are used.
  ConcatWeights fm_concat;
  GruParams fm_gru;
  ConcatWeights pm_concat;
  GruParams pm_gru;

  /// Allocates and randomly initializes all parameters for the given
  /// geometry and fusion modes. Deterministic given the generator state.
  static ToyModel init(const GridSpec& input_spec, int c_mid,
                       FusionMode fm_mode, FusionMode pm_mode, Rng& rng);

  size_t param_count() const;
  void validate() const;

  /// The prediction-map geometry: input geometry with kPmChannels channels.
  GridSpec pm_spec() const;
};

/// Pointers to every scalar parameter in a fixed order (model weights first,
/// then active fusion parameters). The same order is used by gradients,
/// checkpoints, and the optimizer.
std::vector<double*> param_ptrs(ToyModel& m);
std::vector<const double*> param_ptrs(const ToyModel& m);

/// Gradient buffer shaped like the parameter vector of a given model.
struct ModelGrads {
  std::vector<double> values;
  explicit ModelGrads(const ToyModel& m) : values(m.param_count(), 0.0) {}
  void zero() { values.assign(values.size(), 0.0); }
  void accumulate(const ModelGrads& other);
};

/// ReLU(conv1(x)): the shared trunk activation. Mask and count planes are
/// carried over from the input unchanged (they track observation status).
ImageGrid model_hidden(const ToyModel& m, const ImageGrid& x);

/// Head outputs as one kPmChannels-channel grid of raw values
/// (pre-sigmoid heat logit in channel 0).
ImageGrid model_heads(const ToyModel& m, const ImageGrid& hidden);

/// Convenience single-frame forward pass: sigmoid heat map (1 channel) and
/// box regression map (4 channels).
std::pair<ImageGrid, ImageGrid> forward(const ToyModel& m, const ImageGrid& x);

/// Accumulates parameter gradients and (optionally) the input gradient for
/// the trunk + heads given the upstream gradient on the raw head outputs.
/// x and hidden must be the values from the forward pass.
void model_backward(const ToyModel& m, const ImageGrid& x,
                    const ImageGrid& hidden, const ImageGrid& d_pm,
                    ModelGrads* grads, ImageGrid* d_x);

/// Center-style decoding: cells that are strict 3x3 local maxima of the heat
/// map with score >= score_min become candidates; greedy radius suppression
/// keeps the highest-scoring candidate within nms_radius meters. Box size
/// and yaw come from the regression channels at the winning cell.
std::vector<Detection> decode_detections(const ImageGrid& heat,
                                         const ImageGrid& reg,
                                         double score_min, double nms_radius);

/// Decoding directly from the raw prediction map (sigmoid applied to the
/// logit channel internally).
std::vector<Detection> decode_pm(const ImageGrid& pm, double score_min,
                                 double nms_radius);

/// Checkpoint I/O: magic + version + geometry + modes + f32 parameter blob
/// with a trailing checksum.
void save_model(std::ostream& os, const ToyModel& m);
ToyModel load_model(std::istream& is);
void save_model_file(const std::string& path, const ToyModel& m);
ToyModel load_model_file(const std::string& path);

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace streamdet
