#include "streamdet/detector.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <ostream>
#include <stdexcept>

namespace streamdet {
namespace {

constexpr uint32_t kCheckpointMagic = 0x5344434Bu;  // "SDCK"
constexpr uint32_t kCheckpointVersion = 1;

}  // namespace

ImageGrid voxelize_bev(const PointCloud& points, const GridSpec& spec) {
  if (spec.channels != kVoxelChannels)
    throw std::invalid_argument("voxelize: spec must have 6 channels");
  spec.validate();
  ImageGrid g(spec);
  // Accumulation passes: sums first, then one normalization sweep. Insertion
  // order over points does not matter beyond float addition order, which is
  // fixed by the input ordering.
  for (const LidarPoint& p : points) {
    const double fx = (p.x - spec.x_min) / spec.cell_size;
    const double fy = (p.y - spec.y_min) / spec.cell_size;
    if (fx < 0 || fy < 0) continue;
    const int ix = static_cast<int>(fx);
    const int iy = static_cast<int>(fy);
    if (ix >= spec.width || iy >= spec.height) continue;
    g.count(iy, ix) += 1.0;
    g.at(2, iy, ix) += p.z;                                   // mean z (sum)
    g.at(3, iy, ix) = g.count(iy, ix) == 1.0
                          ? p.z
                          : std::max(g.at(3, iy, ix), p.z);   // max z
    g.at(4, iy, ix) += static_cast<double>(p.intensity);      // mean (sum)
    g.at(5, iy, ix) += static_cast<double>(p.dt);             // mean (sum)
  }
  for (int iy = 0; iy < spec.height; ++iy) {
    for (int ix = 0; ix < spec.width; ++ix) {
      const double n = g.count(iy, ix);
      if (n == 0.0) continue;
      g.mask(iy, ix) = 1.0;
      g.at(0, iy, ix) = 1.0;
      g.at(1, iy, ix) = std::min(1.0, n / kDensityCap);
      g.at(2, iy, ix) /= n;
      g.at(4, iy, ix) /= n;
      g.at(5, iy, ix) /= n;
    }
  }
  return g;
}

ToyModel ToyModel::init(const GridSpec& input_spec, int c_mid,
                        FusionMode fm_mode, FusionMode pm_mode, Rng& rng) {
  if (input_spec.channels != kVoxelChannels)
    throw std::invalid_argument("model: input grid must have 6 channels");
  input_spec.validate();
  if (c_mid < 1) throw std::invalid_argument("model: c_mid must be >= 1");

  ToyModel m;
  m.input_spec = input_spec;
  m.c_mid = c_mid;
  m.fm_mode = fm_mode;
  m.pm_mode = pm_mode;

  auto uniform_fill = [&rng](std::vector<double>& v, double bound) {
    for (double& x : v) x = rng.uniform(-bound, bound);
  };
  m.conv1_w.resize(static_cast<size_t>(c_mid) * kVoxelChannels * 9);
  uniform_fill(m.conv1_w, 1.0 / std::sqrt(kVoxelChannels * 9.0));
  m.conv1_b.assign(c_mid, 0.0);
  m.heat_w.resize(c_mid);
  uniform_fill(m.heat_w, 1.0 / std::sqrt(static_cast<double>(c_mid)));
  m.heat_b = -2.0;  // background prior: sigmoid(-2) ~ 0.12
  m.reg_w.resize(static_cast<size_t>(4) * c_mid);
  uniform_fill(m.reg_w, 1.0 / std::sqrt(static_cast<double>(c_mid)));
  m.reg_b.assign(4, 0.0);
  // Initialize yaw cosine positive so decoded yaw starts near zero.
  m.reg_b[3] = 1.0;

  auto init_gru = [&rng](GruParams& g, int channels) {
    g = GruParams::zeros(channels);
    auto small = [&rng](std::vector<double>& v) {
      for (double& x : v) x = rng.uniform(-0.1, 0.1);
    };
    small(g.w_z);
    small(g.w_r);
    small(g.w_h);
    // Positive update-gate bias: start by mostly trusting the fresh frame.
    for (double& b : g.b_z) b = 2.0;
  };
  if (fm_mode == FusionMode::kConcat)
    m.fm_concat = ConcatWeights::fixed(kVoxelChannels);
  if (fm_mode == FusionMode::kGru) init_gru(m.fm_gru, kVoxelChannels);
  if (pm_mode == FusionMode::kConcat)
    m.pm_concat = ConcatWeights::fixed(kPmChannels);
  if (pm_mode == FusionMode::kGru) init_gru(m.pm_gru, kPmChannels);
  return m;
}

GridSpec ToyModel::pm_spec() const {
  GridSpec s = input_spec;
  s.channels = kPmChannels;
  return s;
}

namespace {

template <typename Model, typename Ptr>
std::vector<Ptr> collect_params(Model& m) {
  std::vector<Ptr> out;
  auto add_vec = [&out](auto& v) {
    for (auto& x : v) out.push_back(&x);
  };
  add_vec(m.conv1_w);
  add_vec(m.conv1_b);
  add_vec(m.heat_w);
  out.push_back(&m.heat_b);
  add_vec(m.reg_w);
  add_vec(m.reg_b);
  auto add_concat = [&add_vec](auto& cw) {
    add_vec(cw.p_cur);
    add_vec(cw.p_hist);
  };
  auto add_gru = [&add_vec](auto& g) {
    add_vec(g.w_z);
    add_vec(g.b_z);
    add_vec(g.w_r);
    add_vec(g.b_r);
    add_vec(g.w_h);
    add_vec(g.b_h);
  };
  if (m.fm_mode == FusionMode::kConcat) add_concat(m.fm_concat);
  if (m.fm_mode == FusionMode::kGru) add_gru(m.fm_gru);
  if (m.pm_mode == FusionMode::kConcat) add_concat(m.pm_concat);
  if (m.pm_mode == FusionMode::kGru) add_gru(m.pm_gru);
  return out;
}

}  // namespace

std::vector<double*> param_ptrs(ToyModel& m) {
  return collect_params<ToyModel, double*>(m);
}

std::vector<const double*> param_ptrs(const ToyModel& m) {
  return collect_params<const ToyModel, const double*>(m);
}

size_t ToyModel::param_count() const { return param_ptrs(*this).size(); }

void ToyModel::validate() const {
  input_spec.validate();
  if (input_spec.channels != kVoxelChannels)
    throw std::invalid_argument("model: input channel contract violated");
  if (c_mid < 1) throw std::invalid_argument("model: c_mid must be >= 1");
  const size_t want_conv = static_cast<size_t>(c_mid) * kVoxelChannels * 9;
  if (conv1_w.size() != want_conv || conv1_b.size() != static_cast<size_t>(c_mid) ||
      heat_w.size() != static_cast<size_t>(c_mid) ||
      reg_w.size() != static_cast<size_t>(4) * c_mid || reg_b.size() != 4)
    throw std::invalid_argument("model: parameter shape mismatch");
  for (const double* p : param_ptrs(*this)) {
    if (!std::isfinite(*p))
      throw std::invalid_argument("model: non-finite parameter");
  }
}

void ModelGrads::accumulate(const ModelGrads& other) {
  if (other.values.size() != values.size())
    throw std::invalid_argument("grads: size mismatch");
  for (size_t i = 0; i < values.size(); ++i) values[i] += other.values[i];
}

ImageGrid model_hidden(const ToyModel& m, const ImageGrid& x) {
  if (x.channels() != kVoxelChannels ||
      !x.spec().same_geometry(m.input_spec))
    throw std::invalid_argument("model: input grid geometry mismatch");
  GridSpec hs = m.input_spec;
  hs.channels = m.c_mid;
  ImageGrid hidden(hs);
  const int w = hs.width, h = hs.height;
  for (int mi = 0; mi < m.c_mid; ++mi) {
    for (int iy = 0; iy < h; ++iy) {
      for (int ix = 0; ix < w; ++ix) {
        double acc = m.conv1_b[mi];
        for (int c = 0; c < kVoxelChannels; ++c) {
          const size_t wbase = (static_cast<size_t>(mi) * kVoxelChannels + c) * 9;
          for (int ky = 0; ky < 3; ++ky) {
            const int sy = iy + ky - 1;
            if (sy < 0 || sy >= h) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int sx = ix + kx - 1;
              if (sx < 0 || sx >= w) continue;
              acc += m.conv1_w[wbase + ky * 3 + kx] * x.at(c, sy, sx);
            }
          }
        }
        hidden.at(mi, iy, ix) = acc > 0.0 ? acc : 0.0;
      }
    }
  }
  hidden.mask_plane() = x.mask_plane();
  hidden.count_plane() = x.count_plane();
  return hidden;
}

ImageGrid model_heads(const ToyModel& m, const ImageGrid& hidden) {
  if (hidden.channels() != m.c_mid)
    throw std::invalid_argument("model: hidden channel mismatch");
  ImageGrid pm(m.pm_spec());
  const int w = pm.width(), h = pm.height();
  for (int iy = 0; iy < h; ++iy) {
    for (int ix = 0; ix < w; ++ix) {
      double logit = m.heat_b;
      double reg[4] = {m.reg_b[0], m.reg_b[1], m.reg_b[2], m.reg_b[3]};
      for (int mi = 0; mi < m.c_mid; ++mi) {
        const double v = hidden.at(mi, iy, ix);
        logit += m.heat_w[mi] * v;
        for (int j = 0; j < 4; ++j)
          reg[j] += m.reg_w[static_cast<size_t>(j) * m.c_mid + mi] * v;
      }
      pm.at(0, iy, ix) = logit;
      for (int j = 0; j < 4; ++j) pm.at(1 + j, iy, ix) = reg[j];
    }
  }
  pm.mask_plane() = hidden.mask_plane();
  pm.count_plane() = hidden.count_plane();
  return pm;
}

std::pair<ImageGrid, ImageGrid> forward(const ToyModel& m,
                                        const ImageGrid& x) {
  const ImageGrid pm = model_heads(m, model_hidden(m, x));
  GridSpec hspec = m.input_spec;
  hspec.channels = 1;
  ImageGrid heat(hspec);
  GridSpec rspec = m.input_spec;
  rspec.channels = 4;
  ImageGrid reg(rspec);
  for (int iy = 0; iy < heat.height(); ++iy) {
    for (int ix = 0; ix < heat.width(); ++ix) {
      heat.at(0, iy, ix) = sigmoid(pm.at(0, iy, ix));
      for (int j = 0; j < 4; ++j) reg.at(j, iy, ix) = pm.at(1 + j, iy, ix);
    }
  }
  heat.mask_plane() = pm.mask_plane();
  heat.count_plane() = pm.count_plane();
  reg.mask_plane() = pm.mask_plane();
  reg.count_plane() = pm.count_plane();
  return {std::move(heat), std::move(reg)};
}

void model_backward(const ToyModel& m, const ImageGrid& x,
                    const ImageGrid& hidden, const ImageGrid& d_pm,
                    ModelGrads* grads, ImageGrid* d_x) {
  if (d_pm.channels() != kPmChannels)
    throw std::invalid_argument("backward: bad upstream channel count");
  const int w = m.input_spec.width, h = m.input_spec.height;

  // Gradient offsets into the flat parameter vector follow param_ptrs order.
  const size_t n_conv_w = m.conv1_w.size();
  const size_t off_conv_b = n_conv_w;
  const size_t off_heat_w = off_conv_b + m.conv1_b.size();
  const size_t off_heat_b = off_heat_w + m.heat_w.size();
  const size_t off_reg_w = off_heat_b + 1;
  const size_t off_reg_b = off_reg_w + m.reg_w.size();

  GridSpec hs = m.input_spec;
  hs.channels = m.c_mid;
  ImageGrid d_hidden(hs);

  for (int iy = 0; iy < h; ++iy) {
    for (int ix = 0; ix < w; ++ix) {
      const double d_logit = d_pm.at(0, iy, ix);
      double d_reg[4];
      for (int j = 0; j < 4; ++j) d_reg[j] = d_pm.at(1 + j, iy, ix);
      if (grads) {
        grads->values[off_heat_b] += d_logit;
        for (int j = 0; j < 4; ++j) grads->values[off_reg_b + j] += d_reg[j];
      }
      for (int mi = 0; mi < m.c_mid; ++mi) {
        const double v = hidden.at(mi, iy, ix);
        double dh = d_logit * m.heat_w[mi];
        for (int j = 0; j < 4; ++j)
          dh += d_reg[j] * m.reg_w[static_cast<size_t>(j) * m.c_mid + mi];
        if (grads) {
          grads->values[off_heat_w + mi] += d_logit * v;
          for (int j = 0; j < 4; ++j)
            grads->values[off_reg_w + static_cast<size_t>(j) * m.c_mid + mi] +=
                d_reg[j] * v;
        }
        // ReLU gate: gradient flows only where the activation is positive.
        d_hidden.at(mi, iy, ix) = v > 0.0 ? dh : 0.0;
      }
    }
  }

  for (int mi = 0; mi < m.c_mid; ++mi) {
    for (int iy = 0; iy < h; ++iy) {
      for (int ix = 0; ix < w; ++ix) {
        const double dpre = d_hidden.at(mi, iy, ix);
        if (dpre == 0.0) continue;
        if (grads) grads->values[off_conv_b + mi] += dpre;
        for (int c = 0; c < kVoxelChannels; ++c) {
          const size_t wbase = (static_cast<size_t>(mi) * kVoxelChannels + c) * 9;
          for (int ky = 0; ky < 3; ++ky) {
            const int sy = iy + ky - 1;
            if (sy < 0 || sy >= h) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int sx = ix + kx - 1;
              if (sx < 0 || sx >= w) continue;
              if (grads)
                grads->values[wbase + ky * 3 + kx] += dpre * x.at(c, sy, sx);
              if (d_x)
                d_x->at(c, sy, sx) += dpre * m.conv1_w[wbase + ky * 3 + kx];
            }
          }
        }
      }
    }
  }
}

std::vector<Detection> decode_detections(const ImageGrid& heat,
                                         const ImageGrid& reg,
                                         double score_min, double nms_radius) {
  if (heat.channels() != 1 || reg.channels() != 4 ||
      !heat.spec().same_geometry(reg.spec()))
    throw std::invalid_argument("decode: heat/reg geometry mismatch");
  const GridSpec& spec = heat.spec();
  struct Candidate {
    double score;
    int iy, ix;
  };
  std::vector<Candidate> cands;
  for (int iy = 0; iy < spec.height; ++iy) {
    for (int ix = 0; ix < spec.width; ++ix) {
      const double s = heat.at(0, iy, ix);
      if (s < score_min) continue;
      bool peak = true;
      for (int dy = -1; dy <= 1 && peak; ++dy) {
        for (int dx = -1; dx <= 1 && peak; ++dx) {
          if (dy == 0 && dx == 0) continue;
          const int ny = iy + dy, nx = ix + dx;
          if (ny < 0 || ny >= spec.height || nx < 0 || nx >= spec.width)
            continue;
          if (heat.at(0, ny, nx) >= s) peak = false;
        }
      }
      if (peak) cands.push_back({s, iy, ix});
    }
  }
  std::sort(cands.begin(), cands.end(), [&](const Candidate& a,
                                            const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.iy * spec.width + a.ix < b.iy * spec.width + b.ix;
  });

  std::vector<Detection> kept;
  for (const Candidate& c : cands) {
    const double cx = spec.cell_center_x(c.ix);
    const double cy = spec.cell_center_y(c.iy);
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (std::hypot(cx - k.x, cy - k.y) < nms_radius) {
        suppressed = true;
        break;
      }
    }
    if (suppressed) continue;
    Detection d;
    d.x = cx;
    d.y = cy;
    const double logw = std::clamp(reg.at(0, c.iy, c.ix), -4.0, 4.0);
    const double logl = std::clamp(reg.at(1, c.iy, c.ix), -4.0, 4.0);
    d.w = std::exp(logw);
    d.l = std::exp(logl);
    d.yaw = std::atan2(reg.at(2, c.iy, c.ix), reg.at(3, c.iy, c.ix));
    d.score = c.score;
    d.cls = 0;
    kept.push_back(d);
  }
  return kept;
}

std::vector<Detection> decode_pm(const ImageGrid& pm, double score_min,
                                 double nms_radius) {
  if (pm.channels() != kPmChannels)
    throw std::invalid_argument("decode: prediction map must have 5 channels");
  GridSpec hspec = pm.spec();
  hspec.channels = 1;
  ImageGrid heat(hspec);
  GridSpec rspec = pm.spec();
  rspec.channels = 4;
  ImageGrid reg(rspec);
  for (int iy = 0; iy < pm.height(); ++iy) {
    for (int ix = 0; ix < pm.width(); ++ix) {
      heat.at(0, iy, ix) = sigmoid(pm.at(0, iy, ix));
      for (int j = 0; j < 4; ++j) reg.at(j, iy, ix) = pm.at(1 + j, iy, ix);
    }
  }
  return decode_detections(heat, reg, score_min, nms_radius);
}

// --- checkpoint I/O ---------------------------------------------------------

namespace {

void put_u32(std::vector<unsigned char>& buf, uint32_t v) {
  buf.push_back(v & 0xFF);
  buf.push_back((v >> 8) & 0xFF);
  buf.push_back((v >> 16) & 0xFF);
  buf.push_back((v >> 24) & 0xFF);
}

void put_f32(std::vector<unsigned char>& buf, float v) {
  uint32_t bits = 0;
  std::memcpy(&bits, &v, 4);
  put_u32(buf, bits);
}

void put_f64(std::vector<unsigned char>& buf, double v) {
  uint64_t bits = 0;
  std::memcpy(&bits, &v, 8);
  put_u32(buf, static_cast<uint32_t>(bits & 0xFFFFFFFFULL));
  put_u32(buf, static_cast<uint32_t>(bits >> 32));
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: unexpected end of stream");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

float get_f32(std::istream& is) {
  const uint32_t bits = get_u32(is);
  float v = 0;
  std::memcpy(&v, &bits, 4);
  return v;
}

double get_f64(std::istream& is) {
  const uint64_t lo = get_u32(is);
  const uint64_t hi = get_u32(is);
  const uint64_t bits = lo | (hi << 32);
  double v = 0;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void save_model(std::ostream& os, const ToyModel& m) {
  m.validate();
  std::vector<unsigned char> buf;
  put_u32(buf, kCheckpointMagic);
  put_u32(buf, kCheckpointVersion);
  put_f64(buf, m.input_spec.x_min);
  put_f64(buf, m.input_spec.y_min);
  put_f64(buf, m.input_spec.cell_size);
  put_u32(buf, static_cast<uint32_t>(m.input_spec.width));
  put_u32(buf, static_cast<uint32_t>(m.input_spec.height));
  put_u32(buf, static_cast<uint32_t>(m.c_mid));
  put_u32(buf, static_cast<uint32_t>(m.fm_mode));
  put_u32(buf, static_cast<uint32_t>(m.pm_mode));
  const auto params = param_ptrs(m);
  put_u32(buf, static_cast<uint32_t>(params.size()));
  for (const double* p : params) put_f32(buf, static_cast<float>(*p));
  const uint32_t crc = static_cast<uint32_t>(
      crc32(crc32(0L, nullptr, 0), buf.data(), static_cast<uInt>(buf.size())));
  put_u32(buf, crc);
  os.write(reinterpret_cast<const char*>(buf.data()),
           static_cast<std::streamsize>(buf.size()));
  if (!os) throw std::runtime_error("checkpoint: write failed");
}

ToyModel load_model(std::istream& is) {
  // Re-encode while reading so the checksum covers exactly the bytes parsed.
  std::vector<unsigned char> seen;
  auto u32 = [&]() {
    const uint32_t v = get_u32(is);
    put_u32(seen, v);
    return v;
  };
  auto f64 = [&]() {
    const double v = get_f64(is);
    put_f64(seen, v);
    return v;
  };
  if (u32() != kCheckpointMagic)
    throw std::runtime_error("checkpoint: bad magic");
  if (u32() != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version");
  GridSpec spec;
  spec.x_min = f64();
  spec.y_min = f64();
  spec.cell_size = f64();
  spec.width = static_cast<int>(u32());
  spec.height = static_cast<int>(u32());
  spec.channels = kVoxelChannels;
  const int c_mid = static_cast<int>(u32());
  const FusionMode fm_mode = static_cast<FusionMode>(u32());
  const FusionMode pm_mode = static_cast<FusionMode>(u32());

  Rng rng(0);
  ToyModel m = ToyModel::init(spec, c_mid, fm_mode, pm_mode, rng);
  const auto params = param_ptrs(m);
  const uint32_t n = u32();
  if (n != params.size())
    throw std::runtime_error("checkpoint: parameter count mismatch");
  for (double* p : params) {
    const float v = get_f32(is);
    put_f32(seen, v);
    *p = static_cast<double>(v);
  }
  const uint32_t expect = static_cast<uint32_t>(crc32(
      crc32(0L, nullptr, 0), seen.data(), static_cast<uInt>(seen.size())));
  if (get_u32(is) != expect)
    throw std::runtime_error("checkpoint: checksum mismatch");
  m.validate();
  return m;
}

void save_model_file(const std::string& path, const ToyModel& m) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path);
  save_model(os, m);
}

ToyModel load_model_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  return load_model(is);
}

}  // namespace streamdet
