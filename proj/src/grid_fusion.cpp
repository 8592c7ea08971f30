#include "streamdet/grid_fusion.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace streamdet {
namespace {

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

void require_same_shape(const ImageGrid& a, const ImageGrid& b,
                        const char* what) {
  if (!a.spec().same_geometry(b.spec()) ||
      a.spec().channels != b.spec().channels) {
    throw std::invalid_argument(std::string(what) +
                                ": grids differ in geometry or channels");
  }
}

// Snaps a fractional cell coordinate onto the lattice when it is within
// floating-point fuzz of a cell center, so integer-cell shifts and identity
// warps reproduce the input exactly.
double snap(double f) {
  const double r = std::round(f);
  return std::abs(f - r) < 1e-9 ? r : f;
}

}  // namespace

const char* fusion_mode_name(FusionMode m) {
  switch (m) {
    case FusionMode::kAdd:
      return "add";
    case FusionMode::kMax:
      return "max";
    case FusionMode::kConcat:
      return "concat";
    case FusionMode::kGru:
      return "gru";
  }
  throw std::invalid_argument("unknown fusion mode");
}

FusionMode fusion_mode_from_name(const std::string& name) {
  if (name == "add") return FusionMode::kAdd;
  if (name == "max") return FusionMode::kMax;
  if (name == "concat") return FusionMode::kConcat;
  if (name == "gru") return FusionMode::kGru;
  throw std::invalid_argument("unknown fusion mode: " + name);
}

GruParams GruParams::zeros(int channels) {
  GruParams p;
  p.channels = channels;
  const size_t w = static_cast<size_t>(channels) * 2 * channels;
  p.w_z.assign(w, 0.0);
  p.w_r.assign(w, 0.0);
  p.w_h.assign(w, 0.0);
  p.b_z.assign(channels, 0.0);
  p.b_r.assign(channels, 0.0);
  p.b_h.assign(channels, 0.0);
  return p;
}

void GruParams::validate(int expected_channels) const {
  const size_t w = static_cast<size_t>(expected_channels) * 2 * expected_channels;
  const size_t b = static_cast<size_t>(expected_channels);
  if (channels != expected_channels || w_z.size() != w || w_r.size() != w ||
      w_h.size() != w || b_z.size() != b || b_r.size() != b ||
      b_h.size() != b) {
    throw std::invalid_argument("GRU parameter shapes do not match channels");
  }
}

GruGrads GruGrads::zeros(int channels) {
  GruGrads g;
  const size_t w = static_cast<size_t>(channels) * 2 * channels;
  g.w_z.assign(w, 0.0);
  g.w_r.assign(w, 0.0);
  g.w_h.assign(w, 0.0);
  g.b_z.assign(channels, 0.0);
  g.b_r.assign(channels, 0.0);
  g.b_h.assign(channels, 0.0);
  return g;
}

void GruGrads::accumulate(const GruGrads& o) {
  auto add = [](std::vector<double>& dst, const std::vector<double>& src) {
    if (dst.size() != src.size()) {
      throw std::invalid_argument("GRU gradient shapes differ");
    }
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  };
  add(w_z, o.w_z);
  add(w_r, o.w_r);
  add(w_h, o.w_h);
  add(b_z, o.b_z);
  add(b_r, o.b_r);
  add(b_h, o.b_h);
}

ConcatWeights ConcatWeights::fixed(int channels) {
  ConcatWeights w;
  w.channels = channels;
  auto mean_pool = [channels](int k) {
    std::vector<double> p(static_cast<size_t>(k) * channels, 0.0);
    std::vector<int> bucket_size(k, 0);
    for (int c = 0; c < channels; ++c) ++bucket_size[c * k / channels];
    for (int c = 0; c < channels; ++c) {
      const int j = c * k / channels;
      p[static_cast<size_t>(j) * channels + c] = 1.0 / bucket_size[j];
    }
    return p;
  };
  w.p_cur = mean_pool(k_cur(channels));
  w.p_hist = mean_pool(k_hist(channels));
  return w;
}

ImageGrid warp(const ImageGrid& grid, const Pose& t_rel) {
  const GridSpec& spec = grid.spec();
  ImageGrid out(spec);
  // t_rel maps history-frame coordinates into the current frame; sampling
  // goes the other way, from each output cell back into the source grid.
  const Se2 inv = se2_of(t_rel).inverse();
  const int w = spec.width;
  const int h = spec.height;
  const int nc = spec.channels;
  for (int oy = 0; oy < h; ++oy) {
    for (int ox = 0; ox < w; ++ox) {
      const Eigen::Vector2d src = inv.apply(
          Eigen::Vector2d(spec.cell_center_x(ox), spec.cell_center_y(oy)));
      const double fx = snap((src.x() - spec.x_min) / spec.cell_size - 0.5);
      const double fy = snap((src.y() - spec.y_min) / spec.cell_size - 0.5);

      // Features: bilinear with zero padding outside the grid.
      const int x0 = static_cast<int>(std::floor(fx));
      const int y0 = static_cast<int>(std::floor(fy));
      const double wx = fx - x0;
      const double wy = fy - y0;
      const double corner_w[4] = {(1.0 - wx) * (1.0 - wy), wx * (1.0 - wy),
                                  (1.0 - wx) * wy, wx * wy};
      const int corner_x[4] = {x0, x0 + 1, x0, x0 + 1};
      const int corner_y[4] = {y0, y0, y0 + 1, y0 + 1};
      for (int c = 0; c < nc; ++c) {
        double acc = 0.0;
        for (int k = 0; k < 4; ++k) {
          const int ix = corner_x[k];
          const int iy = corner_y[k];
          if (ix < 0 || ix >= w || iy < 0 || iy >= h || corner_w[k] == 0.0) {
            continue;
          }
          acc += corner_w[k] * grid.at(c, iy, ix);
        }
        out.at(c, oy, ox) = acc;
      }

      // Mask and count: nearest neighbor, mask re-binarized.
      const int rx = static_cast<int>(std::lround(fx));
      const int ry = static_cast<int>(std::lround(fy));
      if (rx >= 0 && rx < w && ry >= 0 && ry < h) {
        out.mask(oy, ox) = grid.mask(ry, rx) >= 0.5 ? 1.0 : 0.0;
        out.count(oy, ox) = out.mask(oy, ox) > 0.0 ? grid.count(ry, rx) : 0.0;
      }
    }
  }
  return out;
}

ImageGrid fuse(FusionMode mode, const ImageGrid& i_cur,
               const ImageGrid& warped_hist, const GruParams* gru,
               const ConcatWeights* concat) {
  require_same_shape(i_cur, warped_hist, "fuse");
  const GridSpec& spec = i_cur.spec();
  const int nc = spec.channels;
  const size_t cells = static_cast<size_t>(spec.width) * spec.height;
  ImageGrid out(spec);

  for (size_t i = 0; i < cells; ++i) {
    const double cm = i_cur.mask_plane()[i];
    const double hm = warped_hist.mask_plane()[i];
    out.mask_plane()[i] = (cm > 0.0 || hm > 0.0) ? 1.0 : 0.0;
    out.count_plane()[i] =
        mode == FusionMode::kAdd
            ? i_cur.count_plane()[i] + warped_hist.count_plane()[i]
            : std::max(i_cur.count_plane()[i], warped_hist.count_plane()[i]);
  }

  switch (mode) {
    case FusionMode::kAdd: {
      for (size_t i = 0; i < i_cur.data().size(); ++i) {
        out.data()[i] = i_cur.data()[i] + warped_hist.data()[i];
      }
      break;
    }
    case FusionMode::kMax: {
      // Where only one side is occupied its values pass through unchanged;
      // where both are, take the per-channel max.
      for (size_t i = 0; i < cells; ++i) {
        const bool c_on = i_cur.mask_plane()[i] > 0.0;
        const bool h_on = warped_hist.mask_plane()[i] > 0.0;
        for (int c = 0; c < nc; ++c) {
          const size_t off = static_cast<size_t>(c) * cells + i;
          const double cv = i_cur.data()[off];
          const double hv = warped_hist.data()[off];
          double v = 0.0;
          if (c_on && h_on) {
            v = std::max(cv, hv);
          } else if (c_on) {
            v = cv;
          } else if (h_on) {
            v = hv;
          }
          out.data()[off] = v;
        }
      }
      break;
    }
    case FusionMode::kConcat: {
      ConcatWeights fixed_w;
      const ConcatWeights* w = concat;
      if (w == nullptr) {
        fixed_w = ConcatWeights::fixed(nc);
        w = &fixed_w;
      }
      const int kc = ConcatWeights::k_cur(nc);
      const int kh = ConcatWeights::k_hist(nc);
      if (w->channels != nc ||
          w->p_cur.size() != static_cast<size_t>(kc) * nc ||
          w->p_hist.size() != static_cast<size_t>(kh) * nc) {
        throw std::invalid_argument("concat weight shapes do not match grid");
      }
      for (size_t i = 0; i < cells; ++i) {
        for (int j = 0; j < kc; ++j) {
          double acc = 0.0;
          for (int c = 0; c < nc; ++c) {
            acc += w->p_cur[static_cast<size_t>(j) * nc + c] *
                   i_cur.data()[static_cast<size_t>(c) * cells + i];
          }
          out.data()[static_cast<size_t>(j) * cells + i] = acc;
        }
        for (int j = 0; j < kh; ++j) {
          double acc = 0.0;
          for (int c = 0; c < nc; ++c) {
            acc += w->p_hist[static_cast<size_t>(j) * nc + c] *
                   warped_hist.data()[static_cast<size_t>(c) * cells + i];
          }
          out.data()[static_cast<size_t>(kc + j) * cells + i] = acc;
        }
      }
      break;
    }
    case FusionMode::kGru: {
      if (gru == nullptr) {
        throw std::invalid_argument("GRU fusion requires parameters");
      }
      gru->validate(nc);
      std::vector<double> hx(2 * nc), rhx(2 * nc), z(nc);
      for (size_t i = 0; i < cells; ++i) {
        for (int c = 0; c < nc; ++c) {
          hx[c] = warped_hist.data()[static_cast<size_t>(c) * cells + i];
          hx[nc + c] = i_cur.data()[static_cast<size_t>(c) * cells + i];
        }
        for (int c = 0; c < nc; ++c) {
          double az = gru->b_z[c];
          double ar = gru->b_r[c];
          for (int k = 0; k < 2 * nc; ++k) {
            az += gru->w_z[static_cast<size_t>(c) * 2 * nc + k] * hx[k];
            ar += gru->w_r[static_cast<size_t>(c) * 2 * nc + k] * hx[k];
          }
          z[c] = sigmoid(az);
          rhx[c] = sigmoid(ar) * hx[c];
          rhx[nc + c] = hx[nc + c];
        }
        for (int c = 0; c < nc; ++c) {
          double ah = gru->b_h[c];
          for (int k = 0; k < 2 * nc; ++k) {
            ah += gru->w_h[static_cast<size_t>(c) * 2 * nc + k] * rhx[k];
          }
          out.data()[static_cast<size_t>(c) * cells + i] =
              (1.0 - z[c]) * hx[c] + z[c] * std::tanh(ah);
        }
      }
      break;
    }
  }
  return out;
}

void gru_backward(const GruParams& params, const ImageGrid& h,
                  const ImageGrid& x, const ImageGrid& upstream,
                  GruGrads* param_grads, ImageGrid* x_grad) {
  require_same_shape(h, x, "gru_backward");
  require_same_shape(h, upstream, "gru_backward");
  const GridSpec& spec = h.spec();
  const int nc = spec.channels;
  params.validate(nc);
  const size_t cells = static_cast<size_t>(spec.width) * spec.height;

  GruGrads grads = GruGrads::zeros(nc);
  ImageGrid dx(spec);

  std::vector<double> hx(2 * nc), rhx(2 * nc);
  std::vector<double> z(nc), r(nc), hcand(nc);
  std::vector<double> d_az(nc), d_ar(nc), d_ah(nc);
  for (size_t i = 0; i < cells; ++i) {
    for (int c = 0; c < nc; ++c) {
      hx[c] = h.data()[static_cast<size_t>(c) * cells + i];
      hx[nc + c] = x.data()[static_cast<size_t>(c) * cells + i];
    }
    for (int c = 0; c < nc; ++c) {
      double az = params.b_z[c];
      double ar = params.b_r[c];
      for (int k = 0; k < 2 * nc; ++k) {
        az += params.w_z[static_cast<size_t>(c) * 2 * nc + k] * hx[k];
        ar += params.w_r[static_cast<size_t>(c) * 2 * nc + k] * hx[k];
      }
      z[c] = sigmoid(az);
      r[c] = sigmoid(ar);
      rhx[c] = r[c] * hx[c];
      rhx[nc + c] = hx[nc + c];
    }
    for (int c = 0; c < nc; ++c) {
      double ah = params.b_h[c];
      for (int k = 0; k < 2 * nc; ++k) {
        ah += params.w_h[static_cast<size_t>(c) * 2 * nc + k] * rhx[k];
      }
      hcand[c] = std::tanh(ah);
    }

    // out_c = (1 - z_c) h_c + z_c hcand_c
    for (int c = 0; c < nc; ++c) {
      const double g = upstream.data()[static_cast<size_t>(c) * cells + i];
      d_az[c] = g * (hcand[c] - hx[c]) * z[c] * (1.0 - z[c]);
      d_ah[c] = g * z[c] * (1.0 - hcand[c] * hcand[c]);
    }
    // Back through the candidate: d rhx = Wh^T d_ah; its first half feeds the
    // reset gate, its second half goes straight to x.
    for (int c = 0; c < nc; ++c) {
      double d_rh = 0.0;
      double d_x2 = 0.0;
      for (int cc = 0; cc < nc; ++cc) {
        d_rh += params.w_h[static_cast<size_t>(cc) * 2 * nc + c] * d_ah[cc];
        d_x2 +=
            params.w_h[static_cast<size_t>(cc) * 2 * nc + nc + c] * d_ah[cc];
      }
      d_ar[c] = d_rh * hx[c] * r[c] * (1.0 - r[c]);
      dx.data()[static_cast<size_t>(c) * cells + i] += d_x2;
    }
    // Back through both sigmoid gates into the x half of [h, x]; the h half
    // is intentionally dropped.
    for (int c = 0; c < nc; ++c) {
      double d_x1 = 0.0;
      for (int cc = 0; cc < nc; ++cc) {
        d_x1 += params.w_z[static_cast<size_t>(cc) * 2 * nc + nc + c] * d_az[cc];
        d_x1 += params.w_r[static_cast<size_t>(cc) * 2 * nc + nc + c] * d_ar[cc];
      }
      dx.data()[static_cast<size_t>(c) * cells + i] += d_x1;
    }
    // Parameter gradients.
    for (int c = 0; c < nc; ++c) {
      for (int k = 0; k < 2 * nc; ++k) {
        grads.w_z[static_cast<size_t>(c) * 2 * nc + k] += d_az[c] * hx[k];
        grads.w_r[static_cast<size_t>(c) * 2 * nc + k] += d_ar[c] * hx[k];
        grads.w_h[static_cast<size_t>(c) * 2 * nc + k] += d_ah[c] * rhx[k];
      }
      grads.b_z[c] += d_az[c];
      grads.b_r[c] += d_ar[c];
      grads.b_h[c] += d_ah[c];
    }
  }

  if (param_grads != nullptr) *param_grads = std::move(grads);
  if (x_grad != nullptr) *x_grad = std::move(dx);
}

ImageGrid fuse_backward_to_current(FusionMode mode, const ImageGrid& i_cur,
                                   const ImageGrid& warped_hist,
                                   const ImageGrid& upstream,
                                   const ConcatWeights* concat) {
  require_same_shape(i_cur, warped_hist, "fuse_backward_to_current");
  require_same_shape(i_cur, upstream, "fuse_backward_to_current");
  const GridSpec& spec = i_cur.spec();
  const int nc = spec.channels;
  const size_t cells = static_cast<size_t>(spec.width) * spec.height;
  ImageGrid d_cur(spec);

  switch (mode) {
    case FusionMode::kAdd: {
      d_cur.data() = upstream.data();
      break;
    }
    case FusionMode::kMax: {
      // Gradient flows to the current input only where it produced the
      // output; ties go to the current side, matching the forward pass.
      for (size_t i = 0; i < cells; ++i) {
        const bool c_on = i_cur.mask_plane()[i] > 0.0;
        const bool h_on = warped_hist.mask_plane()[i] > 0.0;
        if (!c_on) continue;
        for (int c = 0; c < nc; ++c) {
          const size_t off = static_cast<size_t>(c) * cells + i;
          if (!h_on || i_cur.data()[off] >= warped_hist.data()[off]) {
            d_cur.data()[off] = upstream.data()[off];
          }
        }
      }
      break;
    }
    case FusionMode::kConcat: {
      ConcatWeights fixed_w;
      const ConcatWeights* w = concat;
      if (w == nullptr) {
        fixed_w = ConcatWeights::fixed(nc);
        w = &fixed_w;
      }
      const int kc = ConcatWeights::k_cur(nc);
      for (size_t i = 0; i < cells; ++i) {
        for (int c = 0; c < nc; ++c) {
          double acc = 0.0;
          for (int j = 0; j < kc; ++j) {
            acc += w->p_cur[static_cast<size_t>(j) * nc + c] *
                   upstream.data()[static_cast<size_t>(j) * cells + i];
          }
          d_cur.data()[static_cast<size_t>(c) * cells + i] = acc;
        }
      }
      break;
    }
    case FusionMode::kGru: {
      throw std::invalid_argument(
          "use gru_backward for GRU fusion gradients");
    }
  }
  return d_cur;
}

void concat_weight_grads(const ImageGrid& i_cur, const ImageGrid& warped_hist,
                         const ImageGrid& upstream, const ConcatWeights& w,
                         std::vector<double>* d_p_cur,
                         std::vector<double>* d_p_hist) {
  require_same_shape(i_cur, warped_hist, "concat_weight_grads");
  require_same_shape(i_cur, upstream, "concat_weight_grads");
  const GridSpec& spec = i_cur.spec();
  const int nc = spec.channels;
  const size_t cells = static_cast<size_t>(spec.width) * spec.height;
  const int kc = ConcatWeights::k_cur(nc);
  const int kh = ConcatWeights::k_hist(nc);
  if (w.channels != nc) {
    throw std::invalid_argument("concat weight shapes do not match grid");
  }

  d_p_cur->assign(static_cast<size_t>(kc) * nc, 0.0);
  d_p_hist->assign(static_cast<size_t>(kh) * nc, 0.0);
  for (size_t i = 0; i < cells; ++i) {
    for (int j = 0; j < kc; ++j) {
      const double g = upstream.data()[static_cast<size_t>(j) * cells + i];
      if (g == 0.0) continue;
      for (int c = 0; c < nc; ++c) {
        (*d_p_cur)[static_cast<size_t>(j) * nc + c] +=
            g * i_cur.data()[static_cast<size_t>(c) * cells + i];
      }
    }
    for (int j = 0; j < kh; ++j) {
      const double g =
          upstream.data()[static_cast<size_t>(kc + j) * cells + i];
      if (g == 0.0) continue;
      for (int c = 0; c < nc; ++c) {
        (*d_p_hist)[static_cast<size_t>(j) * nc + c] +=
            g * warped_hist.data()[static_cast<size_t>(c) * cells + i];
      }
    }
  }
}

}  // namespace streamdet
