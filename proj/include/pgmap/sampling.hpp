#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <unordered_map>
#include <vector>

#include "pgmap/core.hpp"
#include "pgmap/geom.hpp"

namespace pgmap {

enum class CandidateSource { Seg, Kp, Contour };

struct CandidatePoint {
  Vec2 position;
  int category = 0;
  double score = 0.0;
  CandidateSource source = CandidateSource::Kp;
};

// Closed contour with orientation; "CCW" means positive shoelace sign of the
// stored (x, y) coordinates.
struct Contour {
  std::vector<Vec2> points;
  bool ccw = true;

  double area() const { return signed_area(points); }
};

namespace detail {

// Quadratic 3x3 peak refinement: fit a parabola along each axis through the
// integer peak and move to its vertex (clamped to half a pixel).
inline Vec2 refine_peak(const Raster& r, int ch, int y, int x) {
  auto fit = [](double a, double b, double c) {
    const double denom = a - 2.0 * b + c;
    if (denom >= -1e-12) return 0.0;
    return std::clamp((a - c) / (2.0 * denom), -0.5, 0.5);
  };
  double dx = 0.0, dy = 0.0;
  if (x > 0 && x + 1 < r.w) dx = fit(r.at(y, x - 1, ch), r.at(y, x, ch), r.at(y, x + 1, ch));
  if (y > 0 && y + 1 < r.h) dy = fit(r.at(y - 1, x, ch), r.at(y, x, ch), r.at(y + 1, x, ch));
  return {x + dx, y + dy};
}

}  // namespace detail

// Local-maximum sampling. A pixel survives when it is >= every neighbor in the
// (2*window+1)^2 neighborhood, beats equal-valued neighbors lexicographically
// by (row, col), and is strictly greater than at least one neighbor (so flat
// regions yield nothing). Results sorted by score descending.
inline std::vector<CandidatePoint> nms_sample(const Raster& raster, int channel, int window,
                                              double min_score, int category = 0,
                                              CandidateSource source = CandidateSource::Kp,
                                              bool subpixel = false) {
  if (window < 1) throw BadInput("nms window must be >= 1");
  std::vector<CandidatePoint> out;
  for (int y = 0; y < raster.h; ++y) {
    for (int x = 0; x < raster.w; ++x) {
      const double v = raster.at(y, x, channel);
      if (v < min_score) continue;
      bool is_max = true;
      bool has_smaller = false;
      for (int dy = -window; dy <= window && is_max; ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= raster.h) continue;
        for (int dx = -window; dx <= window; ++dx) {
          const int xx = x + dx;
          if (xx < 0 || xx >= raster.w || (dx == 0 && dy == 0)) continue;
          const double u = raster.at(yy, xx, channel);
          if (u > v || (u == v && (yy < y || (yy == y && xx < x)))) {
            is_max = false;
            break;
          }
          if (u < v) has_smaller = true;
        }
      }
      if (!is_max || !has_smaller) continue;
      CandidatePoint cp;
      cp.position = subpixel ? detail::refine_peak(raster, channel, y, x)
                             : Vec2(static_cast<double>(x), static_cast<double>(y));
      cp.category = category;
      cp.score = raster.sample(cp.position.x, cp.position.y, channel);
      cp.source = source;
      out.push_back(cp);
    }
  }
  std::sort(out.begin(), out.end(), [](const CandidatePoint& a, const CandidatePoint& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.position.y != b.position.y) return a.position.y < b.position.y;
    return a.position.x < b.position.x;
  });
  return out;
}

// Category-priority NMS over combined candidates: within any window-radius
// (Chebyshev) cluster only the highest-priority candidate survives; ties break
// by score, then row-major position.
inline std::vector<CandidatePoint> priority_merge(const std::vector<CandidatePoint>& candidates,
                                                  const std::vector<int>& priority_order,
                                                  int window) {
  std::map<int, int> rank;
  for (std::size_t i = 0; i < priority_order.size(); ++i)
    rank[priority_order[i]] = static_cast<int>(i);
  std::vector<const CandidatePoint*> sorted;
  sorted.reserve(candidates.size());
  for (const auto& c : candidates) {
    if (!rank.count(c.category)) throw BadInput("candidate category not in priority order");
    sorted.push_back(&c);
  }
  std::sort(sorted.begin(), sorted.end(), [&](const CandidatePoint* a, const CandidatePoint* b) {
    const int ra = rank[a->category], rb = rank[b->category];
    if (ra != rb) return ra < rb;
    if (a->score != b->score) return a->score > b->score;
    if (a->position.y != b->position.y) return a->position.y < b->position.y;
    return a->position.x < b->position.x;
  });
  std::vector<CandidatePoint> kept;
  for (const CandidatePoint* c : sorted) {
    bool suppressed = false;
    for (const auto& k : kept) {
      const double cheb = std::max(std::fabs(c->position.x - k.position.x),
                                   std::fabs(c->position.y - k.position.y));
      if (cheb <= window) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(*c);
  }
  return kept;
}

namespace detail {

struct MarchingGrid {
  const Raster* r;
  int ch;
  double pad = 0.0;  // matches Raster::sample's zero padding

  double value(int y, int x) const {  // y, x in [-1, h] x [-1, w]
    if (y < 0 || y >= r->h || x < 0 || x >= r->w) return pad;
    return r->at(y, x, ch);
  }
};

}  // namespace detail

// Closed iso-contours of one raster channel via marching squares with linear
// sub-pixel interpolation along grid edges. The raster is padded with
// background so every contour closes. Outer contours come out CCW (positive
// shoelace), holes CW.
inline std::vector<Contour> trace_contours(const Raster& seg, int channel, double level) {
  if (level <= 0.0 || level >= 1.0) throw BadInput("contour level must be in (0,1)");
  if (seg.empty()) return {};
  detail::MarchingGrid g{&seg, channel};
  const int H = seg.h, W = seg.w;
  // Grid points are (y, x) with y in [-1, H], x in [-1, W]. Edge ids are
  // 2*((y+1)*(W+2) + (x+1)) for the horizontal edge from (y,x) to (y,x+1),
  // +1 for the vertical edge from (y,x) to (y+1,x).
  auto h_edge = [&](int y, int x) { return 2 * ((y + 1) * (W + 2) + (x + 1)); };
  auto v_edge = [&](int y, int x) { return 2 * ((y + 1) * (W + 2) + (x + 1)) + 1; };

  std::unordered_map<int, int> next;       // entry edge id -> exit edge id
  std::unordered_map<int, Vec2> crossing;  // edge id -> interpolated point
  auto cross_point = [&](int id, double xa, double ya, double va, double xb, double yb,
                         double vb) {
    if (!crossing.count(id)) {
      const double t = (level - va) / (vb - va);
      crossing[id] = Vec2(xa + t * (xb - xa), ya + t * (yb - ya));
    }
  };

  for (int y = -1; y < H; ++y) {
    for (int x = -1; x < W; ++x) {
      const double v0 = g.value(y, x);          // top-left
      const double v1 = g.value(y, x + 1);      // top-right
      const double v2 = g.value(y + 1, x + 1);  // bottom-right
      const double v3 = g.value(y + 1, x);      // bottom-left
      int code = 0;
      if (v0 >= level) code |= 1;
      if (v1 >= level) code |= 2;
      if (v2 >= level) code |= 4;
      if (v3 >= level) code |= 8;
      if (code == 0 || code == 15) continue;

      const int T = h_edge(y, x), R = v_edge(y, x + 1), B = h_edge(y + 1, x), L = v_edge(y, x);
      auto reg = [&](int id) {
        if (id == T) cross_point(id, x, y, v0, x + 1, y, v1);
        else if (id == R) cross_point(id, x + 1, y, v1, x + 1, y + 1, v2);
        else if (id == B) cross_point(id, x, y + 1, v3, x + 1, y + 1, v2);
        else cross_point(id, x, y, v0, x, y + 1, v3);
      };
      auto emit = [&](int from, int to) {
        reg(from);
        reg(to);
        next[from] = to;
      };
      switch (code) {
        case 1: emit(T, L); break;
        case 2: emit(R, T); break;
        case 3: emit(R, L); break;
        case 4: emit(B, R); break;
        case 6: emit(B, T); break;
        case 7: emit(B, L); break;
        case 8: emit(L, B); break;
        case 9: emit(T, B); break;
        case 11: emit(R, B); break;
        case 12: emit(L, R); break;
        case 13: emit(T, R); break;
        case 14: emit(L, T); break;
        case 5: {  // saddle: resolve with the cell-center average
          const bool center_in = 0.25 * (v0 + v1 + v2 + v3) >= level;
          if (center_in) {
            emit(T, R);
            emit(B, L);
          } else {
            emit(T, L);
            emit(B, R);
          }
          break;
        }
        case 10: {
          const bool center_in = 0.25 * (v0 + v1 + v2 + v3) >= level;
          if (center_in) {
            emit(L, T);
            emit(R, B);
          } else {
            emit(R, T);
            emit(L, B);
          }
          break;
        }
        default: break;
      }
    }
  }

  std::vector<Contour> out;
  std::unordered_map<int, bool> used;
  // Deterministic start order: iterate edges by id.
  std::vector<int> entries;
  entries.reserve(next.size());
  for (const auto& kv : next) entries.push_back(kv.first);
  std::sort(entries.begin(), entries.end());
  for (int start : entries) {
    if (used[start]) continue;
    Contour c;
    int e = start;
    do {
      used[e] = true;
      const Vec2 p = crossing[e];
      if (c.points.empty() || distance(c.points.back(), p) > 1e-12) c.points.push_back(p);
      auto it = next.find(e);
      if (it == next.end()) break;  // should not happen with padding
      e = it->second;
    } while (e != start);
    if (c.points.size() >= 2 && distance(c.points.back(), c.points.front()) <= 1e-12)
      c.points.pop_back();
    if (c.points.size() < 3) continue;
    c.ccw = signed_area(c.points) > 0;
    out.push_back(std::move(c));
  }
  return out;
}

namespace detail {

inline void dp_recurse(const std::vector<Vec2>& pts, std::size_t i0, std::size_t i1,
                       double tol, std::vector<bool>& keep) {
  if (i1 <= i0 + 1) return;
  double worst = -1.0;
  std::size_t worst_i = i0;
  for (std::size_t i = i0 + 1; i < i1; ++i) {
    const double d = dist_point_segment(pts[i], pts[i0], pts[i1]);
    if (d > worst) {
      worst = d;
      worst_i = i;
    }
  }
  if (worst > tol) {
    keep[worst_i] = true;
    dp_recurse(pts, i0, worst_i, tol, keep);
    dp_recurse(pts, worst_i, i1, tol, keep);
  }
}

// The recursion keeps every split anchor forever, even when later splits make
// it redundant (its neighbours' chord already covers its whole arc within
// tolerance). Drop such vertices until none remain; `idx` holds the kept
// positions into `pts`, treated cyclically when `closed`.
inline void dp_prune(const std::vector<Vec2>& pts, std::vector<std::size_t>& idx, double tol,
                     bool closed) {
  const std::size_t n = pts.size();
  const std::size_t min_keep = closed ? 3 : 2;
  bool changed = true;
  while (changed && idx.size() > min_keep) {
    changed = false;
    std::size_t k = closed ? 0 : 1;
    while (idx.size() > min_keep && k < idx.size() - (closed ? 0 : 1)) {
      const std::size_t m = idx.size();
      const std::size_t prev = idx[(k + m - 1) % m];
      const std::size_t next = idx[(k + 1) % m];
      double worst = 0.0;
      for (std::size_t i = (prev + 1) % n; i != next; i = (i + 1) % n) {
        worst = std::max(worst, dist_point_segment(pts[i], pts[prev], pts[next]));
        if (worst > tol) break;
      }
      if (worst <= tol) {
        idx.erase(idx.begin() + static_cast<std::ptrdiff_t>(k));
        changed = true;
      } else {
        ++k;
      }
    }
  }
}

}  // namespace detail

// Douglas-Peucker. Open chains keep their endpoints. Closed rings are split at
// the point farthest from the centroid and at the point farthest from that
// one, and each half is simplified independently.
inline std::vector<Vec2> simplify_dp(const std::vector<Vec2>& polyline, double tolerance,
                                     bool closed = false) {
  if (polyline.size() < 2) throw BadInput("simplify_dp needs >= 2 points");
  if (!closed) {
    std::vector<bool> keep(polyline.size(), false);
    keep.front() = keep.back() = true;
    detail::dp_recurse(polyline, 0, polyline.size() - 1, tolerance, keep);
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < polyline.size(); ++i)
      if (keep[i]) idx.push_back(i);
    detail::dp_prune(polyline, idx, tolerance, /*closed=*/false);
    std::vector<Vec2> out;
    for (std::size_t i : idx) out.push_back(polyline[i]);
    return out;
  }
  const std::size_t n = polyline.size();
  if (n < 3) return polyline;
  Vec2 centroid{0, 0};
  for (const auto& p : polyline) centroid += p;
  centroid = centroid / static_cast<double>(n);
  std::size_t a = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (distance(polyline[i], centroid) > distance(polyline[a], centroid)) a = i;
  std::size_t b = a;
  for (std::size_t i = 0; i < n; ++i)
    if (distance(polyline[i], polyline[a]) > distance(polyline[b], polyline[a])) b = i;
  if (b == a) b = (a + n / 2) % n;

  // rotate so the ring starts at anchor a; both arcs then recurse in index
  // space and the redundancy prune sees the whole ring cyclically
  std::vector<Vec2> rot(n);
  for (std::size_t i = 0; i < n; ++i) rot[i] = polyline[(a + i) % n];
  const std::size_t bpos = (b + n - a) % n;
  std::vector<bool> keep(n, false);
  keep[0] = keep[bpos] = true;
  detail::dp_recurse(rot, 0, bpos, tolerance, keep);
  std::vector<Vec2> tail(rot.begin() + static_cast<std::ptrdiff_t>(bpos), rot.end());
  tail.push_back(rot.front());
  std::vector<bool> keep_tail(tail.size(), false);
  keep_tail.front() = keep_tail.back() = true;
  detail::dp_recurse(tail, 0, tail.size() - 1, tolerance, keep_tail);
  for (std::size_t i = 0; i + 1 < tail.size(); ++i)
    if (keep_tail[i]) keep[bpos + i] = true;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < n; ++i)
    if (keep[i]) idx.push_back(i);
  detail::dp_prune(rot, idx, tolerance, /*closed=*/true);
  std::vector<Vec2> out;
  for (std::size_t i : idx) out.push_back(rot[i]);
  return out;
}

// Order points by the arc-length parameter of their nearest location on the
// contour. Points whose projections land within 0.5 px of arc length are
// merged, keeping the higher-priority (then higher-score) point.
inline std::vector<CandidatePoint> project_and_order(const std::vector<CandidatePoint>& points,
                                                     const Contour& contour,
                                                     const std::vector<int>& priority_order = {}) {
  if (contour.points.size() < 3) throw BadInput("degenerate contour");
  std::map<int, int> rank;
  for (std::size_t i = 0; i < priority_order.size(); ++i)
    rank[priority_order[i]] = static_cast<int>(i);
  auto prio = [&](const CandidatePoint& c) {
    auto it = rank.find(c.category);
    return it == rank.end() ? static_cast<int>(rank.size()) : it->second;
  };

  struct Entry {
    CandidatePoint pt;
    double s;
  };
  std::vector<Entry> entries;
  entries.reserve(points.size());
  for (const auto& p : points)
    entries.push_back({p, project_onto_ring(p.position, contour.points).second});
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.s != b.s) return a.s < b.s;
    if (a.pt.position.y != b.pt.position.y) return a.pt.position.y < b.pt.position.y;
    return a.pt.position.x < b.pt.position.x;
  });

  const double ring_len = polyline_length(contour.points, /*closed=*/true);
  std::vector<Entry> merged;
  auto better = [&](const Entry& a, const Entry& b) {  // true if a should win
    const int pa = prio(a.pt), pb = prio(b.pt);
    if (pa != pb) return pa < pb;
    return a.pt.score > b.pt.score;
  };
  for (const auto& e : entries) {
    if (!merged.empty() && e.s - merged.back().s < 0.5) {
      if (better(e, merged.back())) merged.back() = e;
      continue;
    }
    merged.push_back(e);
  }
  // cyclic wrap: first and last may collide across the seam
  if (merged.size() >= 2 && (merged.front().s + ring_len) - merged.back().s < 0.5) {
    if (better(merged.back(), merged.front())) merged.front() = merged.back();
    merged.pop_back();
  }
  std::vector<CandidatePoint> out;
  out.reserve(merged.size());
  for (const auto& e : merged) out.push_back(e.pt);
  return out;
}

// Consecutive points become line segments; closed chains wrap. Each segment
// records the contour id and its cyclic index for per-contour grouping.
inline std::vector<Primitive> build_segments(const std::vector<Vec2>& ordered, bool closed,
                                             int contour_id = -1) {
  std::vector<Vec2> pts;
  for (const auto& p : ordered)
    if (pts.empty() || distance(pts.back(), p) > 1e-9) pts.push_back(p);
  if (closed && pts.size() >= 2 && distance(pts.back(), pts.front()) <= 1e-9) pts.pop_back();
  if (pts.size() < (closed ? 3u : 2u))
    throw BadInput(closed ? "closed chain needs >= 3 distinct points"
                          : "open chain needs >= 2 distinct points");
  if (closed && std::fabs(signed_area(pts)) < 1e-6) throw BadInput("degenerate polygon");
  std::vector<Primitive> segs;
  const std::size_t n = pts.size();
  const std::size_t count = closed ? n : n - 1;
  for (std::size_t i = 0; i < count; ++i) {
    const Vec2& a = pts[i];
    const Vec2& b = pts[(i + 1) % n];
    Primitive s = Primitive::segment(a.x, a.y, b.x, b.y);
    s.contour_id = contour_id;
    s.contour_index = static_cast<int>(i);
    segs.push_back(s);
  }
  return segs;
}

// Road point sampling: NMS over the four keypoint classes plus the
// segmentation foreground, category-priority merge, then the primitive cap
// (lowest scores dropped first).
inline PrimitiveGraph sample_road_points(const RasterBundle& bundle, const PipelineConfig& cfg,
                                         int max_primitives = -1) {
  if (max_primitives < 0) max_primitives = cfg.max_primitives_infer;
  std::vector<CandidatePoint> all;
  for (int ch = 1; ch < bundle.kp.c; ++ch) {
    auto v = nms_sample(bundle.kp, ch, cfg.nms_window, cfg.min_score, ch, CandidateSource::Kp,
                        cfg.subpixel_peaks);
    all.insert(all.end(), v.begin(), v.end());
  }
  if (!bundle.seg.empty() && bundle.seg.c >= 2) {
    auto v = nms_sample(bundle.seg, 1, cfg.nms_window, cfg.min_score, kSegDerived,
                        CandidateSource::Seg, cfg.subpixel_peaks);
    all.insert(all.end(), v.begin(), v.end());
  }
  auto kept = priority_merge(all, cfg.priority_order, cfg.nms_window);
  std::sort(kept.begin(), kept.end(), [](const CandidatePoint& a, const CandidatePoint& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.position.y != b.position.y) return a.position.y < b.position.y;
    return a.position.x < b.position.x;
  });
  if (static_cast<int>(kept.size()) > max_primitives) kept.resize(max_primitives);
  PrimitiveGraph g;
  for (const auto& c : kept)
    g.primitives.push_back(Primitive::point(c.position.x, c.position.y, c.category, c.score));
  g.init_relations();
  return g;
}

// Building segment sampling: trace contours, DP-simplify, inject corner
// keypoints, order along each ring, and emit per-contour segment chains.
inline PrimitiveGraph sample_building_segments(const RasterBundle& bundle,
                                               const PipelineConfig& cfg,
                                               int max_primitives = -1) {
  if (max_primitives < 0) max_primitives = cfg.max_primitives_infer;
  constexpr double kMinContourArea = 9.0;  // px^2, specks below this are noise
  PrimitiveGraph g;
  auto contours = trace_contours(bundle.seg, 1, cfg.contour_level);
  std::vector<CandidatePoint> corners;
  if (!bundle.kp.empty() && bundle.kp.c >= 2)
    corners = nms_sample(bundle.kp, 1, cfg.nms_window, cfg.min_score, kCorner,
                         CandidateSource::Kp, cfg.subpixel_peaks);

  const std::vector<int> prio = {kCorner, kContour};
  int contour_id = 0;
  for (const auto& ring : contours) {
    if (std::fabs(signed_area(ring.points)) < kMinContourArea) continue;
    std::vector<Vec2> simplified = simplify_dp(ring.points, cfg.dp_tolerance, /*closed=*/true);
    std::vector<CandidatePoint> cands;
    for (const auto& v : simplified) {
      CandidatePoint cp;
      cp.position = v;
      cp.category = kContour;
      cp.score = bundle.seg.c >= 2 ? bundle.seg.sample(v.x, v.y, 1) : 1.0;
      cp.source = CandidateSource::Contour;
      cands.push_back(cp);
    }
    for (const auto& ckp : corners) {
      const double d = project_onto_ring(ckp.position, ring.points).first;
      if (d <= 2.0 * cfg.dp_tolerance) cands.push_back(ckp);
    }
    auto merged = priority_merge(cands, prio, cfg.nms_window);
    auto ordered = project_and_order(merged, ring, prio);
    if (ordered.size() < 3) continue;
    std::vector<Vec2> pts;
    for (const auto& c : ordered) pts.push_back(c.position);
    std::vector<Primitive> segs;
    try {
      segs = build_segments(pts, /*closed=*/true, contour_id);
    } catch (const BadInput&) {
      continue;  // degenerate speck
    }
    if (g.size() + static_cast<int>(segs.size()) > max_primitives) break;
    for (const auto& s : segs) g.primitives.push_back(s);
    ++contour_id;
  }
  g.init_relations();
  return g;
}

}  // namespace pgmap
