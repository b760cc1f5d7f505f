#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <utility>
#include <vector>

#include <pgmap/core.hpp>
#include <pgmap/decode.hpp>
#include <pgmap/geom.hpp>
#include <pgmap/rng.hpp>

// Synthetic scenes with exact ground truth: road networks as perturbed grids
// with optional crossing points, buildings as rectilinear shapes with
// deliberately split collinear edges. Rasters are built analytically so that
// with zero noise every ground-truth point is a strict local maximum of the
// corresponding channel.

namespace pgmap {

struct SceneSpec {
  Task task = Task::kRoad;
  int height = 192;
  int width = 192;

  // road geometry
  int grid_cells_min = 2;
  int grid_cells_max = 3;
  double node_jitter = 7.0;     // px, grid node displacement
  double curvature = 3.0;       // px, max perpendicular bow of road spans
  double edge_dropout = 0.2;    // fraction of grid edges removed
  int overlay_min = 0;          // X-crossings overlaid on grid cells
  int overlay_max = 1;
  bool require_connected = true;
  double interp_interval = 20.0;  // px between interpolated points

  // building geometry
  int building_min = 2;
  int building_max = 4;
  double rotate_fraction = 0.5;  // share of buildings rotated off-axis
  double split_prob = 0.5;       // chance to split an edge into collinear halves

  // noise
  double jitter_sigma = 0.0;  // px, keypoint bump displacement
  double kp_dropout = 0.0;    // probability of dropping a keypoint bump
  double blur_sigma = 0.0;    // px, raster probability blur

  std::uint64_t seed = 0;

  void validate() const {
    if (height < 64 || width < 64) throw BadInput("scene raster too small");
    if (grid_cells_min < 1 || grid_cells_max < grid_cells_min)
      throw BadInput("bad grid cell range");
    if (overlay_min < 0 || overlay_max < overlay_min) throw BadInput("bad overlay range");
    if (building_min < 1 || building_max < building_min)
      throw BadInput("bad building count range");
    if (edge_dropout < 0 || edge_dropout > 1 || split_prob < 0 || split_prob > 1 ||
        rotate_fraction < 0 || rotate_fraction > 1 || kp_dropout < 0 || kp_dropout > 1)
      throw BadInput("probabilities must lie in [0,1]");
    if (node_jitter < 0 || curvature < 0 || jitter_sigma < 0 || blur_sigma < 0)
      throw BadInput("noise magnitudes must be nonnegative");
    if (interp_interval <= 0) throw BadInput("interpolation interval must be positive");
  }
};

struct Scene {
  Task task = Task::kRoad;
  RasterBundle bundle;
  PrimitiveGraph gt;                          // primitives + relations
  RoadGraph gt_road;                          // road task only
  std::vector<BuildingPolygon> gt_polygons;   // building task only, unsplit rings
};

namespace synthdetail {

constexpr double kRoadHalfWidth = 5.0;  // buffer support; flat within kRoadCore
constexpr double kRoadCore = 2.5;       // flat-profile half width around centerlines
constexpr double kKpRadius = 3.0;       // keypoint bump support radius

inline bool all_connected(int n, const std::vector<std::pair<int, int>>& edges,
                          const std::vector<char>& alive) {
  if (n == 0) return true;
  std::vector<std::vector<int>> adj(n);
  for (std::size_t e = 0; e < edges.size(); ++e)
    if (alive[e]) {
      adj[edges[e].first].push_back(edges[e].second);
      adj[edges[e].second].push_back(edges[e].first);
    }
  std::vector<char> seen(n, 0);
  std::vector<int> stack = {0};
  seen[0] = 1;
  int count = 1;
  while (!stack.empty()) {
    const int v = stack.back();
    stack.pop_back();
    for (int u : adj[v])
      if (!seen[u]) {
        seen[u] = 1;
        ++count;
        stack.push_back(u);
      }
  }
  return count == n;
}

// quadratic bump 1 - r^2/radius^2, combined with max so peaks stay exact
inline void add_bump(Raster& r, int ch, const Vec2& c, double radius) {
  const int x0 = std::max(0, static_cast<int>(std::floor(c.x - radius)));
  const int x1 = std::min(r.w - 1, static_cast<int>(std::ceil(c.x + radius)));
  const int y0 = std::max(0, static_cast<int>(std::floor(c.y - radius)));
  const int y1 = std::min(r.h - 1, static_cast<int>(std::ceil(c.y + radius)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double d2 = (x - c.x) * (x - c.x) + (y - c.y) * (y - c.y);
      const double v = 1.0 - d2 / (radius * radius);
      if (v > r.at(y, x, ch)) r.at(y, x, ch) = v;
    }
}

inline void blur_channel(Raster& r, int ch, double sigma) {
  if (sigma <= 0) return;
  const int rad = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> k(2 * rad + 1);
  double s = 0;
  for (int i = 0; i <= 2 * rad; ++i) {
    k[i] = std::exp(-0.5 * (i - rad) * (i - rad) / (sigma * sigma));
    s += k[i];
  }
  for (double& v : k) v /= s;
  std::vector<double> tmp(static_cast<std::size_t>(r.h) * r.w, 0.0);
  for (int y = 0; y < r.h; ++y)
    for (int x = 0; x < r.w; ++x) {
      double acc = 0;
      for (int i = -rad; i <= rad; ++i) {
        const int xx = x + i;
        if (xx >= 0 && xx < r.w) acc += k[i + rad] * r.at(y, xx, ch);
      }
      tmp[static_cast<std::size_t>(y) * r.w + x] = acc;
    }
  for (int y = 0; y < r.h; ++y)
    for (int x = 0; x < r.w; ++x) {
      double acc = 0;
      for (int i = -rad; i <= rad; ++i) {
        const int yy = y + i;
        if (yy >= 0 && yy < r.h) acc += k[i + rad] * tmp[static_cast<std::size_t>(yy) * r.w + x];
      }
      r.at(y, x, ch) = acc;
    }
}

inline double dist_to_segments(const std::vector<std::pair<Vec2, Vec2>>& segs, const Vec2& p) {
  double best = 1e30;
  for (const auto& [a, b] : segs) best = std::min(best, dist_point_segment(p, a, b));
  return best;
}

inline double ring_distance(const std::vector<Vec2>& a, const std::vector<Vec2>& b) {
  double best = 1e30;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      best = std::min(best, dist_segment_segment(a[i], a[(i + 1) % a.size()], b[j],
                                                 b[(j + 1) % b.size()]));
  return best;
}

inline Vec2 ring_centroid(const std::vector<Vec2>& ring) {
  Vec2 c{0, 0};
  for (const auto& p : ring) c = c + p;
  return c * (1.0 / static_cast<double>(ring.size()));
}

// background channel keeps per-pixel values a distribution
inline void normalize_background(Raster& r) {
  for (int y = 0; y < r.h; ++y)
    for (int x = 0; x < r.w; ++x) {
      double s = 0;
      for (int ch = 1; ch < r.c; ++ch) s += r.at(y, x, ch);
      if (s > 1.0) {
        for (int ch = 1; ch < r.c; ++ch) r.at(y, x, ch) /= s;
        s = 1.0;
      }
      r.at(y, x, 0) = 1.0 - s;
    }
}

// feature stack standing in for learned visual features: intensity,
// foreground probability, boundary distance falloff, doubled-angle gradient
// orientation, constant bias
inline void finish_bundle(RasterBundle& b, const std::vector<std::pair<Vec2, Vec2>>& boundary,
                          const SceneSpec& spec) {
  const int h = b.seg.h, w = b.seg.w;
  if (spec.blur_sigma > 0) {
    blur_channel(b.seg, 1, spec.blur_sigma);
    for (int ch = 1; ch < b.kp.c; ++ch) blur_channel(b.kp, ch, spec.blur_sigma);
  }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double fg = std::clamp(b.seg.at(y, x, 1), 0.0, 1.0);
      b.seg.at(y, x, 1) = fg;
      b.seg.at(y, x, 0) = 1.0 - fg;
    }
  normalize_background(b.kp);

  b.features = Raster(h, w, 6);
  b.intensity = Raster(h, w, 3);
  auto fg_at = [&](int y, int x) {
    if (y < 0 || y >= h || x < 0 || x >= w) return 0.0;
    return b.seg.at(y, x, 1);
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double fg = fg_at(y, x);
      const double d = dist_to_segments(boundary, {static_cast<double>(x),
                                                   static_cast<double>(y)});
      const double gx = 0.5 * (fg_at(y, x + 1) - fg_at(y, x - 1));
      const double gy = 0.5 * (fg_at(y + 1, x) - fg_at(y - 1, x));
      const double g2 = gx * gx + gy * gy;
      double c2 = 0, s2 = 0;
      if (g2 > 1e-12) {
        const double wgt = std::clamp(3.0 * std::sqrt(g2), 0.0, 1.0);
        c2 = wgt * (gx * gx - gy * gy) / g2;
        s2 = wgt * 2.0 * gx * gy / g2;
      }
      b.features.at(y, x, 0) = 0.1 + 0.8 * fg;
      b.features.at(y, x, 1) = fg;
      b.features.at(y, x, 2) = std::clamp(1.0 - d / 10.0, 0.0, 1.0);
      b.features.at(y, x, 3) = c2;
      b.features.at(y, x, 4) = s2;
      b.features.at(y, x, 5) = 1.0;
      for (int ch = 0; ch < 3; ++ch) b.intensity.at(y, x, ch) = 0.1 + 0.8 * fg;
    }
}

// rectangle, L-shape, or notched rectangle centered near the origin, wound
// with positive signed area
inline std::vector<Vec2> base_shape(int type, double w, double h, Rng& rng) {
  const double x0 = -w / 2, x1 = w / 2, y0 = -h / 2, y1 = h / 2;
  if (type == 0) return {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}};
  if (type == 1) {
    const double cx = x0 + w * rng.uniform(0.35, 0.65);
    const double cy = y0 + h * rng.uniform(0.35, 0.65);
    return {{x0, y0}, {x1, y0}, {x1, cy}, {cx, cy}, {cx, y1}, {x0, y1}};
  }
  const double depth = rng.uniform(5.0, std::max(5.0, 0.45 * h));
  const double nw = rng.uniform(6.0, std::max(6.0, 0.5 * w));
  const double mid = std::clamp(rng.uniform(-0.15, 0.15) * w, x0 + 7.5, x1 - 7.5);
  double nx0 = std::max(mid - nw / 2, x0 + 5.0);
  double nx1 = std::min(mid + nw / 2, x1 - 5.0);
  if (nx1 - nx0 < 5.0) {
    nx0 = mid - 2.5;
    nx1 = mid + 2.5;
  }
  return {{x0, y0}, {x1, y0}, {x1, y1}, {nx1, y1}, {nx1, y1 - depth},
          {nx0, y1 - depth}, {nx0, y1}, {x0, y1}};
}

inline void rotate_ring(std::vector<Vec2>& ring, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  for (auto& p : ring) p = {c * p.x - s * p.y, s * p.x + c * p.y};
}

// insert collinear midpoints on long edges; vertex count capped at 12
inline std::vector<Vec2> split_ring(const std::vector<Vec2>& base, Rng& rng, double prob) {
  std::vector<Vec2> out;
  int vcount = static_cast<int>(base.size());
  for (std::size_t k = 0; k < base.size(); ++k) {
    const Vec2& a = base[k];
    const Vec2& b = base[(k + 1) % base.size()];
    out.push_back(a);
    const double u = rng.uniform();
    const double t = rng.uniform(0.4, 0.6);
    if (vcount < 12 && (b - a).norm() >= 14.0 && u < prob) {
      out.push_back(a + (b - a) * t);
      ++vcount;
    }
  }
  return out;
}

}  // namespace synthdetail

inline Scene gen_road_scene(const SceneSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Scene sc;
  sc.task = Task::kRoad;
  const int W = spec.width, H = spec.height;
  const int cells = rng.uniform_int(spec.grid_cells_min, spec.grid_cells_max);
  const int side = cells + 1;
  const double margin = 18.0;
  const double sx = (W - 2 * margin) / cells, sy = (H - 2 * margin) / cells;
  const double jit = std::min(spec.node_jitter, 0.25 * std::min(sx, sy));

  std::vector<Vec2> nodes;
  for (int gy = 0; gy < side; ++gy)
    for (int gx = 0; gx < side; ++gx)
      nodes.push_back({std::clamp(margin + gx * sx + rng.uniform(-jit, jit), 12.0, W - 12.0),
                       std::clamp(margin + gy * sy + rng.uniform(-jit, jit), 12.0, H - 12.0)});

  std::vector<std::pair<int, int>> edges;
  for (int gy = 0; gy < side; ++gy)
    for (int gx = 0; gx < side; ++gx) {
      const int id = gy * side + gx;
      if (gx + 1 < side) edges.push_back({id, id + 1});
      if (gy + 1 < side) edges.push_back({id, id + side});
    }

  // dropout that never isolates a node and optionally preserves connectivity
  std::vector<char> alive(edges.size(), 1);
  std::vector<int> deg(nodes.size(), 0);
  for (const auto& [a, b] : edges) {
    ++deg[a];
    ++deg[b];
  }
  std::vector<int> order(edges.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  for (int e : order) {
    if (rng.uniform() >= spec.edge_dropout) continue;
    const auto [a, b] = edges[e];
    if (deg[a] <= 1 || deg[b] <= 1) continue;
    alive[e] = 0;
    if (spec.require_connected &&
        !synthdetail::all_connected(static_cast<int>(nodes.size()), edges, alive)) {
      alive[e] = 1;
      continue;
    }
    --deg[a];
    --deg[b];
  }

  // X-crossings: a degree-4 point at a cell centre joined to the cell corners
  std::set<int> overlay_nodes;
  const int max_over = std::min(spec.overlay_max, cells * cells);
  const int n_over = rng.uniform_int(std::min(spec.overlay_min, max_over), max_over);
  std::vector<int> cell_order(static_cast<std::size_t>(cells) * cells);
  std::iota(cell_order.begin(), cell_order.end(), 0);
  rng.shuffle(cell_order);
  for (int k = 0; k < n_over; ++k) {
    const int cy = cell_order[k] / cells, cx = cell_order[k] % cells;
    const int n00 = cy * side + cx;
    const int corners[4] = {n00, n00 + 1, n00 + side + 1, n00 + side};
    Vec2 c = (nodes[corners[0]] + nodes[corners[1]] + nodes[corners[2]] + nodes[corners[3]]) *
             0.25;
    c.x += rng.uniform(-3, 3);
    c.y += rng.uniform(-3, 3);
    const int id = static_cast<int>(nodes.size());
    nodes.push_back(c);
    overlay_nodes.insert(id);
    for (int corner : corners) {
      edges.push_back({id, corner});
      alive.push_back(1);
    }
  }

  std::vector<int> degree(nodes.size(), 0);
  for (std::size_t e = 0; e < edges.size(); ++e)
    if (alive[e]) {
      ++degree[edges[e].first];
      ++degree[edges[e].second];
    }

  PrimitiveGraph gt;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    int cat = kEndpoint;
    if (overlay_nodes.count(static_cast<int>(i)))
      cat = kOverlay;
    else if (degree[i] >= 3)
      cat = kJunction;
    else if (degree[i] == 2)
      cat = kInterpolated;
    gt.primitives.push_back(Primitive::point(nodes[i].x, nodes[i].y, cat));
  }

  // every span gets at least one interpolated point so short spans decode cleanly
  std::vector<std::pair<int, int>> links;
  for (std::size_t e = 0; e < edges.size(); ++e) {
    if (!alive[e]) continue;
    const auto [a, b] = edges[e];
    const Vec2 pa = nodes[a], pb = nodes[b];
    const double len = (pb - pa).norm();
    const int n_i = std::max<long>(1, std::lround(len / spec.interp_interval) - 1);
    const double amp = rng.uniform(-spec.curvature, spec.curvature);
    const Vec2 u = (pb - pa) * (1.0 / len);
    const Vec2 perp{-u.y, u.x};
    int prev = a;
    for (int k = 1; k <= n_i; ++k) {
      const double t = k / (n_i + 1.0);
      const Vec2 pos = pa + u * (t * len) + perp * (amp * std::sin(kPi * t));
      const int idx = gt.size();
      gt.primitives.push_back(Primitive::point(pos.x, pos.y, kInterpolated));
      links.push_back({prev, idx});
      prev = idx;
    }
    links.push_back({prev, b});
  }
  gt.init_relations();
  for (const auto& [i, j] : links) gt.relations(i, j) = gt.relations(j, i) = 1;
  sc.gt_road = road_graph_from_primitives(gt);

  std::vector<std::pair<Vec2, Vec2>> center;
  for (const auto& [i, j] : links)
    center.push_back({gt.primitives[i].position(), gt.primitives[j].position()});

  RasterBundle& b = sc.bundle;
  b.seg = Raster(H, W, 2);
  const double glow_den = 2.0 * spec.interp_interval * spec.interp_interval;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const Vec2 p{static_cast<double>(x), static_cast<double>(y)};
      // flat within the core so on-road maxima come from the glow alone;
      // a sloped profile would alias against the pixel grid and mint
      // spurious ridge maxima
      const double d = synthdetail::dist_to_segments(center, p);
      const double tent =
          std::clamp((synthdetail::kRoadHalfWidth - d) /
                         (synthdetail::kRoadHalfWidth - synthdetail::kRoadCore),
                     0.0, 1.0);
      if (tent <= 0) continue;
      double glow = 0;
      for (const auto& q : gt.primitives) {
        const Vec2 dq = p - q.position();
        glow = std::max(glow, 1.0 - (dq.x * dq.x + dq.y * dq.y) / glow_den);
      }
      b.seg.at(y, x, 1) = tent * std::max(glow, 0.0);
    }

  b.kp = Raster(H, W, 5);
  for (const auto& prim : gt.primitives) {
    const double jx = rng.normal() * spec.jitter_sigma;
    const double jy = rng.normal() * spec.jitter_sigma;
    const bool drop = rng.uniform() < spec.kp_dropout;
    if (drop) continue;
    synthdetail::add_bump(b.kp, prim.category,
                          prim.position() + Vec2{jx, jy}, synthdetail::kKpRadius);
  }
  synthdetail::finish_bundle(b, center, spec);
  sc.gt = std::move(gt);
  return sc;
}

inline Scene gen_building_scene(const SceneSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Scene sc;
  sc.task = Task::kBuilding;
  const int W = spec.width, H = spec.height;
  const int want = rng.uniform_int(spec.building_min, spec.building_max);

  std::vector<std::vector<Vec2>> base_rings;
  for (int bi = 0; bi < want; ++bi) {
    for (int attempt = 0; attempt < 150; ++attempt) {
      const int type = rng.uniform_int(0, 2);
      const double bw = rng.uniform(18, 40), bh = rng.uniform(18, 40);
      std::vector<Vec2> ring = synthdetail::base_shape(type, bw, bh, rng);
      if (rng.uniform() < spec.rotate_fraction)
        synthdetail::rotate_ring(ring, rng.uniform(0.0, kPi / 2));
      double minx = 1e30, maxx = -1e30, miny = 1e30, maxy = -1e30;
      for (const auto& p : ring) {
        minx = std::min(minx, p.x);
        maxx = std::max(maxx, p.x);
        miny = std::min(miny, p.y);
        maxy = std::max(maxy, p.y);
      }
      const Vec2 shift{rng.uniform(8.0 - minx, W - 8.0 - maxx),
                       rng.uniform(8.0 - miny, H - 8.0 - maxy)};
      for (auto& p : ring) p = p + shift;
      bool ok = true;
      for (const auto& other : base_rings) {
        if (synthdetail::ring_distance(ring, other) < 4.0 ||
            point_in_ring(other, synthdetail::ring_centroid(ring)) ||
            point_in_ring(ring, synthdetail::ring_centroid(other))) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;
      base_rings.push_back(std::move(ring));
      break;
    }
  }

  std::vector<std::vector<Vec2>> rings;
  for (const auto& base : base_rings)
    rings.push_back(synthdetail::split_ring(base, rng, spec.split_prob));

  PrimitiveGraph gt;
  for (std::size_t bi = 0; bi < rings.size(); ++bi) {
    const auto& ring = rings[bi];
    for (std::size_t k = 0; k < ring.size(); ++k) {
      const Vec2& a = ring[k];
      const Vec2& b = ring[(k + 1) % ring.size()];
      Primitive s = Primitive::segment(a.x, a.y, b.x, b.y, kContour);
      s.contour_id = static_cast<int>(bi);
      s.contour_index = static_cast<int>(k);
      gt.primitives.push_back(s);
    }
  }
  gt.init_relations();
  for (int i = 0; i < gt.size(); ++i)
    for (int j = i + 1; j < gt.size(); ++j) {
      if (gt.primitives[i].contour_id != gt.primitives[j].contour_id) continue;
      const double di = segment_direction(gt.primitives[i]);
      const double dj = segment_direction(gt.primitives[j]);
      if (angle_diff_pi(di, dj) < kPi / 180.0) gt.relations(i, j) = gt.relations(j, i) = 1;
    }

  for (const auto& base : base_rings) {
    BuildingPolygon poly;
    poly.ring = base;
    for (std::size_t k = 0; k < base.size(); ++k) {
      const Vec2& a = base[k];
      const Vec2& b = base[(k + 1) % base.size()];
      poly.directions.push_back(fold_angle_pi(std::atan2(b.y - a.y, b.x - a.x)));
    }
    sc.gt_polygons.push_back(std::move(poly));
  }

  RasterBundle& b = sc.bundle;
  b.seg = Raster(H, W, 2);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 4; ++sy)
        for (int sx = 0; sx < 4; ++sx) {
          const double px = x + (sx + 0.5) / 4.0 - 0.5;
          const double py = y + (sy + 0.5) / 4.0 - 0.5;
          for (const auto& ring : rings)
            if (point_in_ring(ring, {px, py})) {
              ++hits;
              break;
            }
        }
      b.seg.at(y, x, 1) = hits / 16.0;
    }

  b.kp = Raster(H, W, 2);
  for (const auto& ring : rings)
    for (const auto& v : ring) {
      const double jx = rng.normal() * spec.jitter_sigma;
      const double jy = rng.normal() * spec.jitter_sigma;
      const bool drop = rng.uniform() < spec.kp_dropout;
      if (drop) continue;
      synthdetail::add_bump(b.kp, kCorner, v + Vec2{jx, jy}, synthdetail::kKpRadius);
    }

  std::vector<std::pair<Vec2, Vec2>> boundary;
  for (const auto& ring : rings)
    for (std::size_t k = 0; k < ring.size(); ++k)
      boundary.push_back({ring[k], ring[(k + 1) % ring.size()]});
  synthdetail::finish_bundle(b, boundary, spec);
  sc.gt = std::move(gt);
  return sc;
}

inline Scene gen_scene(const SceneSpec& spec) {
  return spec.task == Task::kRoad ? gen_road_scene(spec) : gen_building_scene(spec);
}

}  // namespace pgmap
