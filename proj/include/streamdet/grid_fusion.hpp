#pragma once

#include <vector>

#include "streamdet/grid.hpp"

namespace streamdet {

enum class FusionMode { kAdd, kMax, kConcat, kGru };

const char* fusion_mode_name(FusionMode m);
FusionMode fusion_mode_from_name(const std::string& name);

/// Per-cell GRU gate over concatenated [history, current] channel vectors.
/// Weights are row-major [C x 2C]; all mixing is 1x1 (no spatial extent).
struct GruParams {
  int channels = 0;
  std::vector<double> w_z, w_r, w_h;  // C x 2C
  std::vector<double> b_z, b_r, b_h;  // C

  static GruParams zeros(int channels);
  size_t param_count() const {
    return w_z.size() + w_r.size() + w_h.size() + b_z.size() + b_r.size() +
           b_h.size();
  }
  void validate(int expected_channels) const;
};

struct GruGrads {
  std::vector<double> w_z, w_r, w_h;
  std::vector<double> b_z, b_r, b_h;

  static GruGrads zeros(int channels);
  void accumulate(const GruGrads& o);
};

/// Channel projections used by Concat fusion. When learned weights are not
/// provided, fuse() falls back to fixed mean pooling over contiguous channel
/// groups. cur keeps ceil(C/2) output channels, history floor(C/2).
struct ConcatWeights {
  int channels = 0;
  std::vector<double> p_cur;   // k_cur x C, row-major
  std::vector<double> p_hist;  // k_hist x C

  static int k_cur(int channels) { return (channels + 1) / 2; }
  static int k_hist(int channels) { return channels / 2; }
  /// Mean pooling over contiguous buckets, the non-learned default.
  static ConcatWeights fixed(int channels);
};

/// Warps a history grid into the current frame: each output cell samples the
/// input at the location obtained by mapping the cell's metric center through
/// the inverse SE(2) action of t_rel. Features are sampled bilinearly with
/// zero padding; mask and count use nearest-neighbor so the mask stays binary.
ImageGrid warp(const ImageGrid& grid, const Pose& t_rel);

/// Temporal fusion of the current grid with warped history.
///   Add    - data and count sum, mask OR.
///   Max    - per-cell max between occupied inputs (where only one side is
///            occupied its values pass through unchanged), count max, mask OR.
///   Concat - both inputs projected to half the channels and concatenated,
///            current half first; mask OR, count max.
///   GRU    - z = sigm(Wz[h,x]+bz), r = sigm(Wr[h,x]+br),
///            hcand = tanh(Wh[r*h,x]+bh), out = (1-z)*h + z*hcand.
/// gru/concat params are required only for their modes.
ImageGrid fuse(FusionMode mode, const ImageGrid& i_cur,
               const ImageGrid& warped_hist, const GruParams* gru = nullptr,
               const ConcatWeights* concat = nullptr);

/// Analytic gradients of the GRU fusion with respect to parameters and the
/// current input x. No derivative with respect to the history h is computed
/// or returned; backpropagation into the memory bank is cut here.
void gru_backward(const GruParams& params, const ImageGrid& h,
                  const ImageGrid& x, const ImageGrid& upstream,
                  GruGrads* param_grads, ImageGrid* x_grad);

/// Gradient of fuse() with respect to the current input for the non-GRU
/// modes (Add, Max, Concat). Max needs both forward inputs to recover which
/// side won each cell.
ImageGrid fuse_backward_to_current(FusionMode mode, const ImageGrid& i_cur,
                                   const ImageGrid& warped_hist,
                                   const ImageGrid& upstream,
                                   const ConcatWeights* concat = nullptr);

/// Gradients of Concat fusion with respect to learned projection weights.
void concat_weight_grads(const ImageGrid& i_cur, const ImageGrid& warped_hist,
                         const ImageGrid& upstream, const ConcatWeights& w,
                         std::vector<double>* d_p_cur,
                         std::vector<double>* d_p_hist);

}  // namespace streamdet
