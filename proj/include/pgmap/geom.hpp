#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

namespace pgmap {

inline constexpr double kPi = 3.14159265358979323846;

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2() = default;
  Vec2(double x_, double y_) : x(x_), y(y_) {}

  Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  Vec2 operator/(double s) const { return {x / s, y / s}; }
  Vec2& operator+=(const Vec2& o) { x += o.x; y += o.y; return *this; }
  bool operator==(const Vec2& o) const { return x == o.x && y == o.y; }

  double norm() const { return std::hypot(x, y); }
  double squared_norm() const { return x * x + y * y; }
};

inline double dot(const Vec2& a, const Vec2& b) { return a.x * b.x + a.y * b.y; }
inline double cross(const Vec2& a, const Vec2& b) { return a.x * b.y - a.y * b.x; }
inline double distance(const Vec2& a, const Vec2& b) { return (a - b).norm(); }

// Fold an arbitrary angle into [0, pi). Line orientations are undirected.
inline double fold_angle_pi(double a) {
  double r = std::fmod(a, kPi);
  if (r < 0) r += kPi;
  if (r >= kPi) r -= kPi;  // fmod can round up to pi
  return r;
}

// Absolute difference of two undirected orientations, in [0, pi/2].
inline double angle_diff_pi(double a, double b) {
  double d = std::fabs(fold_angle_pi(a) - fold_angle_pi(b));
  return std::min(d, kPi - d);
}

// Parameter t in [0,1] of the closest point on segment [a,b] to p.
inline double project_param(const Vec2& p, const Vec2& a, const Vec2& b) {
  const Vec2 ab = b - a;
  const double len2 = ab.squared_norm();
  if (len2 <= 0.0) return 0.0;
  return std::clamp(dot(p - a, ab) / len2, 0.0, 1.0);
}

inline Vec2 closest_point_on_segment(const Vec2& p, const Vec2& a, const Vec2& b) {
  const double t = project_param(p, a, b);
  return a + (b - a) * t;
}

inline double dist_point_segment(const Vec2& p, const Vec2& a, const Vec2& b) {
  return distance(p, closest_point_on_segment(p, a, b));
}

inline double dist_segment_segment(const Vec2& a1, const Vec2& a2, const Vec2& b1,
                                   const Vec2& b2) {
  const double d1 = cross(a2 - a1, b1 - a1);
  const double d2 = cross(a2 - a1, b2 - a1);
  const double d3 = cross(b2 - b1, a1 - b1);
  const double d4 = cross(b2 - b1, a2 - b1);
  if (((d1 > 0) != (d2 > 0)) && ((d3 > 0) != (d4 > 0))) return 0.0;  // proper crossing
  return std::min(std::min(dist_point_segment(b1, a1, a2), dist_point_segment(b2, a1, a2)),
                  std::min(dist_point_segment(a1, b1, b2), dist_point_segment(a2, b1, b2)));
}

// Intersection of two infinite lines given as point + direction. Returns false
// when near-parallel (|sin| of the angle between them below min_sin).
inline bool intersect_lines(const Vec2& p1, const Vec2& d1, const Vec2& p2, const Vec2& d2,
                            Vec2& out, double min_sin = 1e-6) {
  const double denom = cross(d1, d2);
  const double scale = d1.norm() * d2.norm();
  if (scale <= 0.0 || std::fabs(denom) < min_sin * scale) return false;
  const double t = cross(p2 - p1, d2) / denom;
  out = p1 + d1 * t;
  return true;
}

// Signed area of a ring (closing edge implied). Positive = counter-clockwise
// in the usual mathematical sense of the (x, y) coordinates as given.
inline double signed_area(const std::vector<Vec2>& ring) {
  double a = 0.0;
  const std::size_t n = ring.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2& p = ring[i];
    const Vec2& q = ring[(i + 1) % n];
    a += p.x * q.y - q.x * p.y;
  }
  return 0.5 * a;
}

inline double polyline_length(const std::vector<Vec2>& pts, bool closed = false) {
  double len = 0.0;
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) len += distance(pts[i], pts[i + 1]);
  if (closed && pts.size() >= 2) len += distance(pts.back(), pts.front());
  return len;
}

// Distance from p to a closed ring plus the arc-length parameter of the
// nearest location along the ring.
inline std::pair<double, double> project_onto_ring(const Vec2& p, const std::vector<Vec2>& ring) {
  double best_d = std::numeric_limits<double>::infinity();
  double best_s = 0.0;
  double s = 0.0;
  const std::size_t n = ring.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2& a = ring[i];
    const Vec2& b = ring[(i + 1) % n];
    const double t = project_param(p, a, b);
    const Vec2 q = a + (b - a) * t;
    const double d = distance(p, q);
    const double seg_len = distance(a, b);
    if (d < best_d) {
      best_d = d;
      best_s = s + t * seg_len;
    }
    s += seg_len;
  }
  return {best_d, best_s};
}

// Even-odd crossing test. Points exactly on the boundary are arbitrary.
inline bool point_in_ring(const std::vector<Vec2>& ring, const Vec2& p) {
  bool in = false;
  for (std::size_t i = 0, j = ring.size() - 1; i < ring.size(); j = i++) {
    const Vec2& a = ring[i];
    const Vec2& b = ring[j];
    if ((a.y > p.y) != (b.y > p.y)) {
      const double x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
      if (p.x < x) in = !in;
    }
  }
  return in;
}

// True if segments (a1,a2) and (b1,b2) properly cross or touch.
inline bool segments_intersect(const Vec2& a1, const Vec2& a2, const Vec2& b1, const Vec2& b2) {
  auto orient = [](const Vec2& p, const Vec2& q, const Vec2& r) {
    const double v = cross(q - p, r - p);
    if (v > 1e-12) return 1;
    if (v < -1e-12) return -1;
    return 0;
  };
  auto on_seg = [](const Vec2& p, const Vec2& q, const Vec2& r) {
    return std::min(p.x, r.x) - 1e-12 <= q.x && q.x <= std::max(p.x, r.x) + 1e-12 &&
           std::min(p.y, r.y) - 1e-12 <= q.y && q.y <= std::max(p.y, r.y) + 1e-12;
  };
  const int o1 = orient(a1, a2, b1), o2 = orient(a1, a2, b2);
  const int o3 = orient(b1, b2, a1), o4 = orient(b1, b2, a2);
  if (o1 != o2 && o3 != o4) return true;
  if (o1 == 0 && on_seg(a1, b1, a2)) return true;
  if (o2 == 0 && on_seg(a1, b2, a2)) return true;
  if (o3 == 0 && on_seg(b1, a1, b2)) return true;
  if (o4 == 0 && on_seg(b1, a2, b2)) return true;
  return false;
}

// Simple-polygon check: no two non-adjacent edges intersect.
inline bool ring_is_simple(const std::vector<Vec2>& ring) {
  const std::size_t n = ring.size();
  if (n < 3) return false;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const std::size_t ni = (i + 1) % n;
      const std::size_t nj = (j + 1) % n;
      if (ni == j || nj == i || i == j) continue;
      if (segments_intersect(ring[i], ring[ni], ring[j], ring[nj])) return false;
    }
  }
  return true;
}

}  // namespace pgmap
