#include "streamdet/frame.hpp"

#include <algorithm>
#include <cmath>

namespace streamdet {

bool point_in_box(double px, double py, const Detection& det, double margin) {
  const double c = std::cos(det.yaw), s = std::sin(det.yaw);
  const double dx = px - det.x, dy = py - det.y;
  // Rotate the point into the box frame.
  const double bx = c * dx + s * dy;
  const double by = -s * dx + c * dy;
  return std::abs(bx) <= det.w * 0.5 + margin &&
         std::abs(by) <= det.l * 0.5 + margin;
}

namespace {

struct Vec2 {
  double x, y;
};

void box_corners(const Detection& d, Vec2 out[4]) {
  const double c = std::cos(d.yaw), s = std::sin(d.yaw);
  const double hw = d.w * 0.5, hl = d.l * 0.5;
  // Counter-clockwise so clipping keeps the interior on the left.
  const double cx[4] = {hw, -hw, -hw, hw};
  const double cy[4] = {hl, hl, -hl, -hl};
  for (int i = 0; i < 4; ++i) {
    out[i].x = d.x + c * cx[i] - s * cy[i];
    out[i].y = d.y + s * cx[i] + c * cy[i];
  }
}

double polygon_area(const std::vector<Vec2>& p) {
  double a = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const Vec2& u = p[i];
    const Vec2& v = p[(i + 1) % p.size()];
    a += u.x * v.y - v.x * u.y;
  }
  return std::abs(a) * 0.5;
}

// Sutherland-Hodgman clip of a convex polygon against the half-plane left of
// edge (a, b).
std::vector<Vec2> clip_edge(const std::vector<Vec2>& poly, Vec2 a, Vec2 b) {
  std::vector<Vec2> out;
  const double ex = b.x - a.x, ey = b.y - a.y;
  auto side = [&](const Vec2& p) {
    return ex * (p.y - a.y) - ey * (p.x - a.x);
  };
  const size_t n = poly.size();
  for (size_t i = 0; i < n; ++i) {
    const Vec2& cur = poly[i];
    const Vec2& nxt = poly[(i + 1) % n];
    const double sc = side(cur), sn = side(nxt);
    if (sc >= 0) out.push_back(cur);
    if ((sc > 0 && sn < 0) || (sc < 0 && sn > 0)) {
      const double t = sc / (sc - sn);
      out.push_back({cur.x + t * (nxt.x - cur.x), cur.y + t * (nxt.y - cur.y)});
    }
  }
  return out;
}

}  // namespace

double rotated_iou(const Detection& a, const Detection& b) {
  Vec2 ca[4], cb[4];
  box_corners(a, ca);
  box_corners(b, cb);
  std::vector<Vec2> poly(ca, ca + 4);
  for (int i = 0; i < 4 && !poly.empty(); ++i) {
    poly = clip_edge(poly, cb[i], cb[(i + 1) % 4]);
  }
  if (poly.size() < 3) return 0.0;
  const double inter = polygon_area(poly);
  const double area_a = a.w * a.l, area_b = b.w * b.l;
  const double uni = area_a + area_b - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace streamdet
