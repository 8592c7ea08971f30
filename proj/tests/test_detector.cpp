// Tests for the BEV voxelizer, the toy detection model (forward + analytic
// backward against finite differences), center decoding, and checkpoints.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "streamdet/detector.hpp"

using namespace streamdet;

namespace {

GridSpec small_spec(int w = 8, int h = 8) {
  GridSpec s;
  s.x_min = -4.0;
  s.y_min = -4.0;
  s.cell_size = 1.0;
  s.width = w;
  s.height = h;
  s.channels = kVoxelChannels;
  return s;
}

LidarPoint pt(double x, double y, double z, float intensity = 0.5f,
              float dt = 0.0f) {
  return LidarPoint{x, y, z, intensity, dt};
}

// Zero-initialized model (all weights and biases zero) for closed forms.
ToyModel zero_model(const GridSpec& spec, int c_mid) {
  Rng rng(1);
  ToyModel m = ToyModel::init(spec, c_mid, FusionMode::kAdd, FusionMode::kAdd,
                              rng);
  for (double* p : param_ptrs(m)) *p = 0.0;
  return m;
}

ImageGrid random_input(const GridSpec& spec, uint64_t seed,
                       double occupancy = 0.6) {
  ImageGrid g(spec);
  Rng rng(seed);
  for (int iy = 0; iy < spec.height; ++iy) {
    for (int ix = 0; ix < spec.width; ++ix) {
      if (rng.uniform() > occupancy) continue;
      g.mask(iy, ix) = 1.0;
      g.count(iy, ix) = 1.0 + rng.uniform_index(5);
      for (int c = 0; c < spec.channels; ++c)
        g.at(c, iy, ix) = rng.uniform(-1.0, 1.0);
    }
  }
  return g;
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

// Probe loss: inner product of the raw head output with fixed random weights.
double probe_loss(const ToyModel& m, const ImageGrid& x,
                  const ImageGrid& probe) {
  const ImageGrid pm = model_heads(m, model_hidden(m, x));
  double loss = 0;
  for (size_t i = 0; i < pm.data().size(); ++i)
    loss += probe.data()[i] * pm.data()[i];
  return loss;
}

}  // namespace

TEST_CASE("voxelize: no points gives a zero grid with zero mask") {
  const ImageGrid g = voxelize_bev({}, small_spec());
  for (double v : g.data()) CHECK(v == 0.0);
  for (double v : g.mask_plane()) CHECK(v == 0.0);
  for (double v : g.count_plane()) CHECK(v == 0.0);
}

TEST_CASE("voxelize: one point fills exactly one cell") {
  // Cell (iy=4, ix=4) spans [0,1)x[0,1); its center is (0.5, 0.5).
  const ImageGrid g = voxelize_bev({pt(0.5, 0.5, 1.7, 0.8f, -0.3f)},
                                   small_spec());
  int occupied = 0;
  for (int iy = 0; iy < 8; ++iy)
    for (int ix = 0; ix < 8; ++ix)
      if (g.mask(iy, ix) != 0.0) ++occupied;
  CHECK(occupied == 1);
  CHECK(g.mask(4, 4) == 1.0);
  CHECK(g.count(4, 4) == 1.0);
  CHECK(g.at(0, 4, 4) == 1.0);                                // occupancy
  CHECK(g.at(1, 4, 4) == doctest::Approx(1.0 / 16).epsilon(1e-12));
  CHECK(g.at(2, 4, 4) == doctest::Approx(1.7).epsilon(1e-12));  // mean z
  CHECK(g.at(3, 4, 4) == doctest::Approx(1.7).epsilon(1e-12));  // max z
  CHECK(g.at(4, 4, 4) == doctest::Approx(0.8).epsilon(1e-6));
  CHECK(g.at(5, 4, 4) == doctest::Approx(-0.3).epsilon(1e-6));
}

TEST_CASE("voxelize: three points in one cell aggregate correctly") {
  const PointCloud pts = {pt(0.2, 0.3, 0.0), pt(0.6, 0.1, 1.0),
                          pt(0.9, 0.9, 2.0)};
  const ImageGrid g = voxelize_bev(pts, small_spec());
  CHECK(g.count(4, 4) == 3.0);
  CHECK(g.at(2, 4, 4) == doctest::Approx(1.0).epsilon(1e-12));  // mean z
  CHECK(g.at(3, 4, 4) == doctest::Approx(2.0).epsilon(1e-12));  // max z
  CHECK(g.at(1, 4, 4) == doctest::Approx(3.0 / 16).epsilon(1e-12));
}

TEST_CASE("voxelize: out-of-bounds points are dropped, including the "
          "negative-fraction trap") {
  const PointCloud pts = {pt(100, 0, 0), pt(0, -100, 0), pt(-4.5, 0, 0),
                          pt(-4.0 - 1e-9, 0.5, 0)};
  // (-4.5, 0): fx = -0.5 truncates toward zero; must not land in bin 0.
  const ImageGrid g = voxelize_bev(pts, small_spec());
  for (double v : g.count_plane()) CHECK(v == 0.0);
}

TEST_CASE("voxelize: density saturates at the fixed cap") {
  PointCloud pts;
  for (int i = 0; i < 40; ++i) pts.push_back(pt(0.5, 0.5, 0.1));
  const ImageGrid g = voxelize_bev(pts, small_spec());
  CHECK(g.count(4, 4) == 40.0);
  CHECK(g.at(1, 4, 4) == 1.0);
}

TEST_CASE("voxelize rejects a grid without the channel contract") {
  GridSpec s = small_spec();
  s.channels = 4;
  CHECK_THROWS_AS(voxelize_bev({}, s), std::invalid_argument);
}

TEST_CASE("forward: zero input and zero parameters give heat 0.5 everywhere") {
  const GridSpec spec = small_spec();
  const ToyModel m = zero_model(spec, 3);
  const auto [heat, reg] = forward(m, ImageGrid(spec));
  for (double v : heat.data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
  for (double v : reg.data()) CHECK(v == 0.0);
}

TEST_CASE("forward: positive homogeneity with zero biases") {
  const GridSpec spec = small_spec();
  Rng rng(7);
  ToyModel m = ToyModel::init(spec, 4, FusionMode::kAdd, FusionMode::kAdd, rng);
  for (double& b : m.conv1_b) b = 0.0;
  m.heat_b = 0.0;
  m.reg_b.assign(4, 0.0);

  const ImageGrid x = random_input(spec, 11);
  ImageGrid ax = x;
  const double alpha = 2.5;
  for (double& v : ax.data()) v *= alpha;

  const ImageGrid pm1 = model_heads(m, model_hidden(m, x));
  const ImageGrid pm2 = model_heads(m, model_hidden(m, ax));
  for (size_t i = 0; i < pm1.data().size(); ++i) {
    CHECK(pm2.data()[i] == doctest::Approx(alpha * pm1.data()[i]).epsilon(1e-9));
  }
}

TEST_CASE("forward output carries the input observation mask") {
  const GridSpec spec = small_spec();
  Rng rng(3);
  const ToyModel m =
      ToyModel::init(spec, 3, FusionMode::kAdd, FusionMode::kAdd, rng);
  const ImageGrid x = random_input(spec, 5);
  const ImageGrid hidden = model_hidden(m, x);
  const ImageGrid pm = model_heads(m, hidden);
  CHECK(hidden.mask_plane() == x.mask_plane());
  CHECK(pm.mask_plane() == x.mask_plane());
  CHECK(pm.count_plane() == x.count_plane());
}

TEST_CASE("analytic gradients match central differences") {
  const GridSpec spec = small_spec();
  Rng rng(19);
  ToyModel m = ToyModel::init(spec, 3, FusionMode::kAdd, FusionMode::kAdd, rng);
  // Push activations away from the ReLU kink so finite differences are clean.
  for (double& b : m.conv1_b) b += 0.05;
  const ImageGrid x = random_input(spec, 29);

  ImageGrid probe(m.pm_spec());
  Rng prng(31);
  for (double& v : probe.data()) v = prng.uniform(-1.0, 1.0);

  // Analytic gradients.
  const ImageGrid hidden = model_hidden(m, x);
  ModelGrads grads(m);
  ImageGrid d_x(spec);
  model_backward(m, x, hidden, probe, &grads, &d_x);

  const double eps = 1e-5;
  double worst = 0;
  const auto params = param_ptrs(m);
  for (size_t i = 0; i < params.size(); ++i) {
    double* p = params[i];
    const double saved = *p;
    *p = saved + eps;
    const double lp = probe_loss(m, x, probe);
    *p = saved - eps;
    const double lm = probe_loss(m, x, probe);
    *p = saved;
    const double fd = (lp - lm) / (2 * eps);
    worst = std::max(worst, rel_err(fd, grads.values[i]));
  }
  CHECK(worst < 1e-5);

  // Input gradient at occupied cells.
  double worst_x = 0;
  ImageGrid xm = x;
  for (size_t i = 0; i < xm.data().size(); ++i) {
    if (i % 3 != 0) continue;  // subsample for speed
    const double saved = xm.data()[i];
    xm.data()[i] = saved + eps;
    const double lp = probe_loss(m, xm, probe);
    xm.data()[i] = saved - eps;
    const double lm = probe_loss(m, xm, probe);
    xm.data()[i] = saved;
    worst_x = std::max(worst_x, rel_err((lp - lm) / (2 * eps), d_x.data()[i]));
  }
  CHECK(worst_x < 1e-5);
}

TEST_CASE("decode: uniform heat below threshold yields nothing") {
  const GridSpec spec = small_spec();
  GridSpec hs = spec;
  hs.channels = 1;
  ImageGrid heat(hs);
  for (double& v : heat.data()) v = 0.5;
  GridSpec rs = spec;
  rs.channels = 4;
  const ImageGrid reg(rs);
  CHECK(decode_detections(heat, reg, 0.6, 2.0).empty());
  // Even with a permissive threshold a flat plateau has no strict peak.
  CHECK(decode_detections(heat, reg, 0.1, 2.0).empty());
}

TEST_CASE("decode: one sharp peak gives one detection with decoded box") {
  const GridSpec spec = small_spec();
  GridSpec hs = spec;
  hs.channels = 1;
  ImageGrid heat(hs);
  heat.at(0, 2, 5) = 0.9;
  GridSpec rs = spec;
  rs.channels = 4;
  ImageGrid reg(rs);
  reg.at(0, 2, 5) = std::log(1.8);
  reg.at(1, 2, 5) = std::log(4.2);
  reg.at(2, 2, 5) = std::sin(0.6);
  reg.at(3, 2, 5) = std::cos(0.6);

  const auto dets = decode_detections(heat, reg, 0.5, 2.0);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].x == doctest::Approx(spec.cell_center_x(5)).epsilon(1e-12));
  CHECK(dets[0].y == doctest::Approx(spec.cell_center_y(2)).epsilon(1e-12));
  CHECK(dets[0].score == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(dets[0].w == doctest::Approx(1.8).epsilon(1e-9));
  CHECK(dets[0].l == doctest::Approx(4.2).epsilon(1e-9));
  CHECK(dets[0].yaw == doctest::Approx(0.6).epsilon(1e-9));
}

TEST_CASE("decode: radius suppression keeps the stronger of two close peaks") {
  GridSpec spec = small_spec(16, 16);
  GridSpec hs = spec;
  hs.channels = 1;
  GridSpec rs = spec;
  rs.channels = 4;

  ImageGrid heat(hs);
  // Peaks one cell (= 1 m) apart with a gap cell between zero rows.
  heat.at(0, 8, 8) = 0.9;
  heat.at(0, 8, 9) = 0.8;
  const ImageGrid reg(rs);

  // 1 m apart, radius 2 m: only the 0.9 peak survives...
  auto dets = decode_detections(heat, reg, 0.5, 2.0);
  // ...but 0.8 at (8,9) is not a strict local max (neighbor holds 0.9), so
  // the suppression needs peaks that qualify independently first.
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].score == doctest::Approx(0.9));

  // Separate the peaks by two cells: both are strict maxima, still within
  // the 4 m radius -> greedy keeps the stronger one only.
  ImageGrid heat2(hs);
  heat2.at(0, 8, 6) = 0.7;
  heat2.at(0, 8, 9) = 0.95;
  dets = decode_detections(heat2, reg, 0.5, 4.0);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].score == doctest::Approx(0.95));

  // With a 2 m radius the 3 m separation lets both through, ordered by score.
  dets = decode_detections(heat2, reg, 0.5, 2.0);
  REQUIRE(dets.size() == 2);
  CHECK(dets[0].score == doctest::Approx(0.95));
  CHECK(dets[1].score == doctest::Approx(0.7));
}

TEST_CASE("decode_pm equals sigmoid-split decoding") {
  const GridSpec spec = small_spec();
  Rng rng(13);
  const ToyModel m =
      ToyModel::init(spec, 3, FusionMode::kAdd, FusionMode::kAdd, rng);
  const ImageGrid x = random_input(spec, 17);
  const ImageGrid pm = model_heads(m, model_hidden(m, x));
  const auto [heat, reg] = forward(m, x);
  const auto a = decode_pm(pm, 0.2, 1.5);
  const auto b = decode_detections(heat, reg, 0.2, 1.5);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].x == b[i].x);
    CHECK(a[i].y == b[i].y);
    CHECK(a[i].score == doctest::Approx(b[i].score).epsilon(1e-12));
    CHECK(a[i].yaw == doctest::Approx(b[i].yaw).epsilon(1e-12));
  }
}

TEST_CASE("parameter vector covers model and active fusion weights") {
  const GridSpec spec = small_spec();
  Rng rng(2);
  const int c_mid = 4;
  ToyModel m = ToyModel::init(spec, c_mid, FusionMode::kConcat,
                              FusionMode::kAdd, rng);
  // conv 4*6*9 + conv_b 4 + heat_w 4 + heat_b 1 + reg_w 16 + reg_b 4
  // + concat 3*6 + 3*6 = 36.
  CHECK(m.param_count() == 216 + 4 + 4 + 1 + 16 + 4 + 36);

  ToyModel g = ToyModel::init(spec, c_mid, FusionMode::kGru, FusionMode::kGru,
                              rng);
  // GRU per point: 3 * (C*2C + C); C=6 -> 234, C=5 -> 165.
  CHECK(g.param_count() == 245 + 234 + 165);
}

TEST_CASE("checkpoint round trip preserves everything at f32 precision") {
  const GridSpec spec = small_spec(12, 10);
  Rng rng(23);
  const ToyModel m = ToyModel::init(spec, 5, FusionMode::kConcat,
                                    FusionMode::kGru, rng);
  std::stringstream ss;
  save_model(ss, m);
  const ToyModel back = load_model(ss);
  CHECK(back.c_mid == 5);
  CHECK(back.fm_mode == FusionMode::kConcat);
  CHECK(back.pm_mode == FusionMode::kGru);
  CHECK(back.input_spec.same_geometry(spec));
  const auto pa = param_ptrs(m);
  const auto pb = param_ptrs(back);
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(*pb[i] == static_cast<double>(static_cast<float>(*pa[i])));
  }
  // Saving the loaded model reproduces identical bytes (f32 idempotence).
  std::stringstream ss2;
  save_model(ss2, back);
  std::stringstream ss3;
  save_model(ss3, back);
  CHECK(ss2.str() == ss3.str());
}

TEST_CASE("checkpoint rejects corruption and bad headers") {
  const GridSpec spec = small_spec();
  Rng rng(29);
  const ToyModel m =
      ToyModel::init(spec, 3, FusionMode::kAdd, FusionMode::kAdd, rng);
  std::stringstream ss;
  save_model(ss, m);
  std::string bytes = ss.str();

  std::string corrupt = bytes;
  corrupt[corrupt.size() / 2] ^= 0x10;
  std::stringstream cs(corrupt);
  CHECK_THROWS_AS(load_model(cs), std::runtime_error);

  std::string badmagic = bytes;
  badmagic[0] ^= 0xFF;
  std::stringstream bs(badmagic);
  CHECK_THROWS_WITH_AS(load_model(bs), doctest::Contains("magic"),
                       std::runtime_error);

  std::string truncated = bytes.substr(0, bytes.size() - 8);
  std::stringstream ts(truncated);
  CHECK_THROWS_AS(load_model(ts), std::runtime_error);
}

TEST_CASE("model validation rejects broken shapes and values") {
  const GridSpec spec = small_spec();
  Rng rng(31);
  ToyModel m = ToyModel::init(spec, 3, FusionMode::kAdd, FusionMode::kAdd, rng);
  CHECK_NOTHROW(m.validate());
  ToyModel bad = m;
  bad.conv1_w.pop_back();
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  ToyModel nan = m;
  nan.heat_b = std::nan("");
  CHECK_THROWS_AS(nan.validate(), std::invalid_argument);
}
