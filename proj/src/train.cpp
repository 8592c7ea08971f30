#include "streamdet/train.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "streamdet/grid_fusion.hpp"
#include "streamdet/rng.hpp"

namespace streamdet {

ImageGrid heat_targets(const std::vector<GtBox>& gts, const GridSpec& spec,
                       double sigma_cells) {
  if (!(sigma_cells > 0.0))
    throw std::invalid_argument("heat_targets: sigma must be positive");
  GridSpec one = spec;
  one.channels = 1;
  ImageGrid target(one);
  const int radius = static_cast<int>(std::ceil(3.0 * sigma_cells));
  for (const GtBox& g : gts) {
    const double fx = (g.x - spec.x_min) / spec.cell_size;
    const double fy = (g.y - spec.y_min) / spec.cell_size;
    const int cx = static_cast<int>(std::floor(fx));
    const int cy = static_cast<int>(std::floor(fy));
    if (cx < 0 || cx >= spec.width || cy < 0 || cy >= spec.height) continue;
    // The splat is anchored on the center cell itself so that cell carries
    // an exact 1.0: the loss needs an unambiguous positive set, and the
    // regression targets live at the same quantized cell.
    for (int iy = std::max(0, cy - radius);
         iy <= std::min(spec.height - 1, cy + radius); ++iy) {
      for (int ix = std::max(0, cx - radius);
           ix <= std::min(spec.width - 1, cx + radius); ++ix) {
        const double dx = static_cast<double>(ix - cx);
        const double dy = static_cast<double>(iy - cy);
        const double v =
            std::exp(-(dx * dx + dy * dy) / (2.0 * sigma_cells * sigma_cells));
        target.at(0, iy, ix) = std::max(target.at(0, iy, ix), v);
      }
    }
  }
  return target;
}

namespace {

inline double softplus(double z) {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::fabs(z)));
}

/// Hard-example-weighted BCE of heat logit z against splatted target t.
/// Positive cells (t exactly 1) are scaled by (2(1-p))^gamma, all others by
/// (1-t)^beta (2p)^gamma. Both modulators equal 1 at p = 0.5, so an all-zero
/// map against pure background scores exactly ln 2 per cell for any
/// gamma/beta; as background cells become confident their weight decays,
/// which keeps the rare positive cells trainable on large grids.
inline double focal_heat(double z, double t, double gamma, double beta,
                         double* dz) {
  const double p = sigmoid(z);
  if (t == 1.0) {
    const double m = std::pow(2.0 * (1.0 - p), gamma);
    const double nlog_p = softplus(-z);  // -log p, stable
    if (dz != nullptr) {
      const double dm =
          gamma > 0.0 ? -2.0 * gamma * std::pow(2.0 * (1.0 - p), gamma - 1.0) *
                            p * (1.0 - p)
                      : 0.0;
      *dz = dm * nlog_p - m * (1.0 - p);
    }
    return m * nlog_p;
  }
  const double c = std::pow(1.0 - t, beta);
  const double m = std::pow(2.0 * p, gamma);
  const double nlog_1mp = softplus(z);  // -log(1-p), stable
  if (dz != nullptr) {
    const double dm =
        gamma > 0.0
            ? 2.0 * gamma * std::pow(2.0 * p, gamma - 1.0) * p * (1.0 - p)
            : 0.0;
    *dz = c * (dm * nlog_1mp + m * p);
  }
  return c * m * nlog_1mp;
}

inline double smooth_l1(double d, double* dd) {
  const double a = std::fabs(d);
  if (a < 1.0) {
    if (dd != nullptr) *dd = d;
    return 0.5 * d * d;
  }
  if (dd != nullptr) *dd = d > 0.0 ? 1.0 : -1.0;
  return a - 0.5;
}

}  // namespace

LossResult detection_loss(const ImageGrid& pm, const std::vector<GtBox>& gts,
                          const LossConfig& cfg, ImageGrid* d_pm) {
  const GridSpec& spec = pm.spec();
  if (spec.channels != kPmChannels)
    throw std::invalid_argument("detection_loss: prediction map channel mismatch");
  if (!(cfg.reg_weight >= 0.0))
    throw std::invalid_argument("detection_loss: negative regression weight");
  if (!(cfg.focal_gamma >= 0.0) || !(cfg.focal_beta >= 0.0))
    throw std::invalid_argument("detection_loss: negative focal exponent");

  const ImageGrid target = heat_targets(gts, spec, cfg.sigma_cells);
  if (d_pm != nullptr) *d_pm = ImageGrid(spec);

  LossResult out;
  const size_t cells =
      static_cast<size_t>(spec.width) * static_cast<size_t>(spec.height);
  double heat_sum = 0.0;
  for (int iy = 0; iy < spec.height; ++iy) {
    for (int ix = 0; ix < spec.width; ++ix) {
      double dz = 0.0;
      heat_sum += focal_heat(pm.at(0, iy, ix), target.at(0, iy, ix),
                             cfg.focal_gamma, cfg.focal_beta,
                             d_pm != nullptr ? &dz : nullptr);
      if (d_pm != nullptr)
        d_pm->at(0, iy, ix) = dz / static_cast<double>(cells);
    }
  }
  out.heat = heat_sum / static_cast<double>(cells);

  // Regression only at in-bounds gt center cells.
  struct Pos {
    int ix, iy;
    double t[4];
  };
  std::vector<Pos> pos;
  for (const GtBox& g : gts) {
    if (!(g.w > 0.0) || !(g.l > 0.0))
      throw std::invalid_argument("detection_loss: non-positive box size");
    const int ix = static_cast<int>(std::floor((g.x - spec.x_min) / spec.cell_size));
    const int iy = static_cast<int>(std::floor((g.y - spec.y_min) / spec.cell_size));
    if (ix < 0 || ix >= spec.width || iy < 0 || iy >= spec.height) continue;
    Pos p;
    p.ix = ix;
    p.iy = iy;
    p.t[0] = std::log(g.w);
    p.t[1] = std::log(g.l);
    p.t[2] = std::sin(g.yaw);
    p.t[3] = std::cos(g.yaw);
    pos.push_back(p);
  }
  out.n_pos = pos.size();
  const double denom = 4.0 * static_cast<double>(std::max<size_t>(1, pos.size()));
  double reg_sum = 0.0;
  for (const Pos& p : pos) {
    for (int c = 0; c < 4; ++c) {
      double dd = 0.0;
      reg_sum += smooth_l1(pm.at(1 + c, p.iy, p.ix) - p.t[c],
                           d_pm != nullptr ? &dd : nullptr);
      if (d_pm != nullptr)
        d_pm->at(1 + c, p.iy, p.ix) += cfg.reg_weight * dd / denom;
    }
  }
  out.reg = reg_sum / denom;
  out.total = out.heat + cfg.reg_weight * out.reg;
  return out;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
  if (batch_size < 1)
    throw std::invalid_argument("train config: batch size must be >= 1");
  if (max_seq_len < 1)
    throw std::invalid_argument("train config: sequence length must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("train config: lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw std::invalid_argument("train config: momentum must be in [0, 1)");
  if (!(lr_decay > 0.0))
    throw std::invalid_argument("train config: lr decay must be positive");
  if (lr_decay_every < 0)
    throw std::invalid_argument("train config: lr decay interval must be >= 0");
  if (!(loss.sigma_cells > 0.0))
    throw std::invalid_argument("train config: sigma must be positive");
  if (!(loss.reg_weight >= 0.0))
    throw std::invalid_argument("train config: regression weight must be >= 0");
  if (seq_aug || use_gt_paste) aug.validate();
}

void init_lane(LaneState& lane, const ToyModel& model, const EngineConfig& cfg) {
  lane.mb.point = PointBank(cfg.bank_capacity);
  lane.mb.fm = ImageGrid(model.input_spec);
  lane.mb.pm = ImageGrid(model.pm_spec());
  lane.mb.has_fm = false;
  lane.mb.has_pm = false;
  lane.has_last = false;
  lane.last_time = 0.0;
}

namespace {

/// Offsets of the fusion-parameter regions inside the flat parameter vector
/// (model trunk/head parameters come first, fm fusion, then pm fusion).
struct FusionLayout {
  size_t off_fm = 0, n_fm = 0;
  size_t off_pm = 0, n_pm = 0;
};

size_t fusion_region_size(FusionMode mode, const ConcatWeights& cw,
                          const GruParams& gru) {
  switch (mode) {
    case FusionMode::kConcat:
      return cw.p_cur.size() + cw.p_hist.size();
    case FusionMode::kGru:
      return gru.param_count();
    default:
      return 0;
  }
}

FusionLayout fusion_layout(const ToyModel& m) {
  FusionLayout l;
  l.off_fm = m.conv1_w.size() + m.conv1_b.size() + m.heat_w.size() + 1 +
             m.reg_w.size() + m.reg_b.size();
  l.n_fm = fusion_region_size(m.fm_mode, m.fm_concat, m.fm_gru);
  l.off_pm = l.off_fm + l.n_fm;
  l.n_pm = fusion_region_size(m.pm_mode, m.pm_concat, m.pm_gru);
  return l;
}

void add_span(std::vector<double>& dst, size_t& off, const std::vector<double>& src) {
  for (double v : src) dst[off++] += v;
}

/// Backward through one fusion point: accumulates fusion-parameter gradients
/// at [offset..) of the flat vector and returns the gradient on the current
/// input. want_input skips the input gradient where nothing upstream needs it.
ImageGrid fusion_backward(FusionMode mode, const ImageGrid& cur,
                          const ImageGrid& warped_hist, const ImageGrid& upstream,
                          const ConcatWeights* cw, const GruParams* gru,
                          ModelGrads* grads, size_t offset, bool want_input) {
  switch (mode) {
    case FusionMode::kGru: {
      GruGrads gg = GruGrads::zeros(cur.spec().channels);
      ImageGrid d_x(cur.spec());
      gru_backward(*gru, warped_hist, cur, upstream,
                   grads != nullptr ? &gg : nullptr,
                   want_input ? &d_x : nullptr);
      if (grads != nullptr) {
        size_t off = offset;
        add_span(grads->values, off, gg.w_z);
        add_span(grads->values, off, gg.b_z);
        add_span(grads->values, off, gg.w_r);
        add_span(grads->values, off, gg.b_r);
        add_span(grads->values, off, gg.w_h);
        add_span(grads->values, off, gg.b_h);
      }
      return d_x;
    }
    case FusionMode::kConcat: {
      if (grads != nullptr) {
        std::vector<double> d_cur, d_hist;
        concat_weight_grads(cur, warped_hist, upstream, *cw, &d_cur, &d_hist);
        size_t off = offset;
        add_span(grads->values, off, d_cur);
        add_span(grads->values, off, d_hist);
      }
      if (!want_input) return ImageGrid(cur.spec());
      return fuse_backward_to_current(mode, cur, warped_hist, upstream, cw);
    }
    default:
      if (!want_input) return ImageGrid(cur.spec());
      return fuse_backward_to_current(mode, cur, warped_hist, upstream);
  }
}

}  // namespace

FrameLoss train_frame(const ToyModel& model, const TrainConfig& cfg,
                      LaneState& lane, const FrameRecord& frame, bool reset,
                      ModelGrads* grads) {
  const EngineConfig& ecfg = cfg.engine;
  if (reset) init_lane(lane, model, ecfg);
  if (lane.has_last && frame.timestamp <= lane.last_time)
    throw std::invalid_argument("train: non-monotonic timestamp");

  const AugTransform* aug =
      frame.aug.has_value() ? &frame.aug.value() : nullptr;

  Pose rel;
  if (lane.has_last) {
    rel = aug != nullptr
              ? augmented_relative_pose(frame.ego_pose, lane.last_pose, *aug)
              : relative_pose(frame.ego_pose, lane.last_pose);
  }
  if (ecfg.pc_fusion) {
    lane.mb.point.align_to(frame.ego_pose, frame.timestamp, aug);
  }

  PointCloud fused_cloud;
  if (ecfg.pc_fusion) {
    fused_cloud = fuse_points(frame.points, lane.mb.point);
  } else {
    fused_cloud = frame.points;
  }

  const ImageGrid x_vox = voxelize_bev(fused_cloud, model.input_spec);

  // Feature-map fusion (history constant; the fused map becomes the memory).
  bool fm_fused = false;
  ImageGrid warped_fm;
  ImageGrid x_used = x_vox;
  if (ecfg.fm_fusion) {
    if (lane.mb.has_fm && lane.has_last) {
      warped_fm = warp(lane.mb.fm, rel);
      x_used = fuse(model.fm_mode, x_vox, warped_fm,
                    model.fm_mode == FusionMode::kGru ? &model.fm_gru : nullptr,
                    model.fm_mode == FusionMode::kConcat ? &model.fm_concat
                                                         : nullptr);
      fm_fused = true;
    }
  }

  const ImageGrid hidden = model_hidden(model, x_used);
  ImageGrid pm_cur = model_heads(model, hidden);

  bool pm_fused = false;
  ImageGrid warped_pm;
  ImageGrid pm_out = pm_cur;
  if (ecfg.pm_fusion) {
    if (lane.mb.has_pm && lane.has_last) {
      warped_pm = warp(lane.mb.pm, rel);
      pm_out = fuse(model.pm_mode, pm_cur, warped_pm,
                    model.pm_mode == FusionMode::kGru ? &model.pm_gru : nullptr,
                    model.pm_mode == FusionMode::kConcat ? &model.pm_concat
                                                         : nullptr);
      pm_fused = true;
    }
  }

  FrameLoss result;
  if (frame.labeled && grads != nullptr) {
    ImageGrid d_pm;
    result.loss = detection_loss(pm_out, frame.gt_boxes, cfg.loss, &d_pm);
    result.counted = true;

    const FusionLayout layout = fusion_layout(model);
    ImageGrid d_pm_cur =
        pm_fused ? fusion_backward(model.pm_mode, pm_cur, warped_pm, d_pm,
                                   &model.pm_concat, &model.pm_gru, grads,
                                   layout.off_pm, /*want_input=*/true)
                 : std::move(d_pm);

    // Input gradient of the trunk is needed only to reach learnable
    // feature-fusion parameters.
    const bool need_dx =
        fm_fused && (model.fm_mode == FusionMode::kConcat ||
                     model.fm_mode == FusionMode::kGru);
    ImageGrid d_x(x_used.spec());  // model_backward accumulates in place
    model_backward(model, x_used, hidden, d_pm_cur, grads,
                   need_dx ? &d_x : nullptr);
    if (need_dx) {
      fusion_backward(model.fm_mode, x_vox, warped_fm, d_x, &model.fm_concat,
                      &model.fm_gru, grads, layout.off_fm,
                      /*want_input=*/false);
    }
  } else if (frame.labeled) {
    result.loss = detection_loss(pm_out, frame.gt_boxes, cfg.loss, nullptr);
    result.counted = true;
  }

  // Memory updates with plain (detached) values: the recursion carries
  // numbers forward, never gradient history.
  if (ecfg.fm_fusion) {
    lane.mb.fm = x_used;
    lane.mb.has_fm = true;
  }
  if (ecfg.pm_fusion) {
    lane.mb.pm = pm_out;
    lane.mb.has_pm = true;
  }
  if (ecfg.pc_fusion) {
    std::vector<Detection> feedback;
    if (cfg.fg_from_gt && frame.labeled) {
      feedback.reserve(frame.gt_boxes.size());
      for (const GtBox& g : frame.gt_boxes) feedback.push_back(g.as_detection());
    } else {
      feedback = decode_pm(pm_out, ecfg.score_min, ecfg.nms_radius);
    }
    const PointCloud fg = select_foreground(frame.points, feedback,
                                            ecfg.fg_score_min, ecfg.fg_margin);
    lane.mb.point.push_foreground(fg);
  }

  lane.has_last = true;
  lane.last_pose = frame.ego_pose;
  lane.last_time = frame.timestamp;
  return result;
}

SgdMomentum::SgdMomentum(size_t n_params, double lr, double momentum)
    : velocity_(n_params, 0.0), lr_(lr), momentum_(momentum) {}

void SgdMomentum::step(const std::vector<double*>& params,
                       const std::vector<double>& grads) {
  if (params.size() != velocity_.size() || grads.size() != velocity_.size())
    throw std::invalid_argument("optimizer: parameter count mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    velocity_[i] = momentum_ * velocity_[i] - lr_ * grads[i];
    *params[i] += velocity_[i];
  }
}

Trainer::Trainer(const ToyModel& model, const TrainConfig& cfg,
                 std::vector<uint32_t> sequence_ids,
                 std::vector<std::vector<FrameRecord>> sequences,
                 const GtDatabase* gtdb)
    : model_(model),
      cfg_(cfg),
      sequence_ids_(std::move(sequence_ids)),
      sequences_(std::move(sequences)),
      gtdb_(gtdb),
      opt_(model.param_count(), cfg.lr, cfg.momentum) {
  cfg_.validate();
  model_.validate();
  if (sequence_ids_.size() != sequences_.size())
    throw std::invalid_argument("trainer: id/sequence count mismatch");
  if (sequences_.empty())
    throw std::invalid_argument("trainer: no training sequences");
  if (cfg_.use_gt_paste && cfg_.aug.n_paste > 0 && gtdb_ == nullptr)
    throw std::invalid_argument("trainer: copy-paste requires a gt database");
  for (size_t s = 0; s < sequences_.size(); ++s) {
    if (sequences_[s].empty())
      throw std::invalid_argument("trainer: empty training sequence");
    for (size_t k = 0; k < sequences_[s].size(); ++k) {
      SampleIndex si;
      si.sequence_id = sequence_ids_[s];
      si.frame_index = static_cast<uint32_t>(k);
      si.labeled = sequences_[s][k].labeled;
      samples_.push_back(si);
    }
  }
  lanes_.resize(static_cast<size_t>(cfg_.batch_size));
  for (LaneState& lane : lanes_) init_lane(lane, model_, cfg_.engine);
}

EpochStats Trainer::run_epoch(int epoch) {
  DtslConfig dtsl;
  dtsl.l_max = cfg_.max_seq_len;
  dtsl.ep_all = cfg_.epochs;
  dtsl.ep_cur = cfg_.use_dtsl ? epoch : cfg_.epochs;
  const int target_len = dtsl_length(dtsl);

  const uint64_t epoch_seed = hash_combine(
      hash_combine(cfg_.seed, hash_str("epoch")), static_cast<uint64_t>(epoch));
  Schedule sched = split_and_pad(sort_sequences(samples_), target_len,
                                 cfg_.batch_size, epoch_seed);
  sched.validate();

  std::map<uint32_t, size_t> seq_pos;
  for (size_t s = 0; s < sequence_ids_.size(); ++s)
    seq_pos[sequence_ids_[s]] = s;

  EpochStats stats;
  stats.epoch = epoch;
  stats.target_len = target_len;
  stats.segments = sched.segments_per_lane();

  const bool any_aug = cfg_.seq_aug || cfg_.use_gt_paste;
  AugRanges ranges = cfg_.aug;
  if (!cfg_.seq_aug) {
    ranges.flip_prob = 0.0;
    ranges.rotation_max = 0.0;
    ranges.scale_min = 1.0;
    ranges.scale_max = 1.0;
    ranges.translation_sigma = 0.0;
  }
  if (!cfg_.use_gt_paste) ranges.n_paste = 0;

  double loss_sum = 0.0;
  ModelGrads grads(model_);
  for (int s = 0; s < sched.segments_per_lane(); ++s) {
    std::vector<const Segment*> segs(lanes_.size());
    std::vector<StreamAugState> states(lanes_.size());
    size_t max_len = 0;
    for (size_t l = 0; l < lanes_.size(); ++l) {
      segs[l] = &sched.lanes[l][static_cast<size_t>(s)];
      max_len = std::max(max_len, segs[l]->frames.size());
      if (any_aug) {
        states[l] =
            derive_state(cfg_.seed, segs[l]->sequence_id, epoch, ranges, gtdb_);
        const auto& seq = sequences_[seq_pos.at(segs[l]->sequence_id)];
        states[l].anchor_to(seq[segs[l]->frames.front().frame_index].ego_pose);
      }
    }
    for (size_t f = 0; f < max_len; ++f) {
      grads.zero();
      int counted = 0;
      for (size_t l = 0; l < lanes_.size(); ++l) {
        if (f >= segs[l]->frames.size()) continue;
        const SampleIndex& si = segs[l]->frames[f];
        FrameRecord frame =
            sequences_[seq_pos.at(si.sequence_id)][si.frame_index];
        if (cfg_.use_gt_paste && cfg_.aug.n_paste > 0) {
          frame = gt_paste(frame, *gtdb_, states[l], static_cast<int>(f));
        }
        if (cfg_.seq_aug) frame = augment_frame(frame, states[l]);
        const FrameLoss fl =
            train_frame(model_, cfg_, lanes_[l], frame, f == 0, &grads);
        ++stats.frames;
        if (fl.counted) {
          ++counted;
          ++stats.labeled_frames;
          loss_sum += fl.loss.total;
        }
      }
      if (counted > 0) {
        for (double& g : grads.values) g /= static_cast<double>(counted);
        auto params = param_ptrs(model_);
        opt_.step(params, grads.values);
      }
    }
  }
  if (cfg_.lr_decay_every > 0 && (epoch + 1) % cfg_.lr_decay_every == 0)
    opt_.set_lr(opt_.lr() * cfg_.lr_decay);

  stats.mean_loss = stats.labeled_frames > 0
                        ? loss_sum / static_cast<double>(stats.labeled_frames)
                        : 0.0;
  return stats;
}

std::vector<EpochStats> Trainer::run() {
  std::vector<EpochStats> out;
  out.reserve(static_cast<size_t>(cfg_.epochs));
  for (int ep = 0; ep < cfg_.epochs; ++ep) out.push_back(run_epoch(ep));
  return out;
}

}  // namespace streamdet
