#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <tuple>
#include <utility>
#include <vector>

#include "pgmap/core.hpp"
#include "pgmap/decode.hpp"
#include "pgmap/geom.hpp"
#include "pgmap/rng.hpp"

namespace pgmap {

struct MetricConfig {
  // road graph comparison
  double seed_interval = 20.0;       // spacing of seed points along GT edges
  double match_radius = 8.0;         // seed/hole matching tolerance
  double hole_spacing = 5.0;         // graph-distance spacing of hole rings
  double propagation_radius = 100.0; // how far holes propagate from a seed
  double snap_radius = 8.0;          // path metric control-node snapping
  int apls_exhaustive_limit = 200;   // all node pairs up to this many nodes
  int apls_sample_pairs = 500;       // sampled pairs beyond the limit
  std::uint64_t apls_seed = 1;
  // polygon comparison
  int iou_supersample = 4;           // subsamples per pixel axis
  double mta_sample_step = 0.1;      // arc spacing of edge samples, px
  double match_iou = 0.5;            // instance matching threshold

  void validate() const {
    if (seed_interval <= 0 || match_radius <= 0 || hole_spacing <= 0 ||
        propagation_radius <= 0 || snap_radius <= 0)
      throw BadInput("graph metric distances must be positive");
    if (apls_exhaustive_limit < 2 || apls_sample_pairs < 1)
      throw BadInput("path metric needs at least one node pair");
    if (iou_supersample < 1 || mta_sample_step <= 0)
      throw BadInput("polygon metric sampling must be positive");
    if (match_iou <= 0 || match_iou > 1) throw BadInput("match threshold outside (0,1]");
  }
};

struct TopoResult {
  double precision = 0, recall = 0, f1 = 0;
  int matched_seeds = 0;
  int total_seeds = 0;
};

struct CiouResult {
  double ciou = 0, n_ratio = 0;
  int matches = 0;
};

namespace metricdetail {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

using Adjacency = std::vector<std::vector<std::pair<int, double>>>;

struct GraphGeom {
  std::vector<Vec2> nodes;
  std::vector<std::pair<int, int>> edges;
  std::vector<double> len;
  Adjacency adj;

  Vec2 point_at(int e, double s) const {
    const Vec2& a = nodes[edges[e].first];
    const Vec2& b = nodes[edges[e].second];
    if (len[e] <= 0) return a;
    return a + (b - a) * (s / len[e]);
  }
};

inline GraphGeom build_geom(const RoadGraph& g) {
  g.validate();
  GraphGeom gg;
  gg.nodes = g.nodes;
  gg.edges = g.edges;
  gg.adj.resize(g.nodes.size());
  gg.len.reserve(g.edges.size());
  for (const auto& [i, j] : g.edges) {
    const double w = distance(g.nodes[i], g.nodes[j]);
    gg.len.push_back(w);
    gg.adj[i].push_back({j, w});
    gg.adj[j].push_back({i, w});
  }
  return gg;
}

inline std::vector<double> dijkstra(const Adjacency& adj,
                                    const std::vector<std::pair<int, double>>& sources) {
  std::vector<double> dist(adj.size(), kInf);
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<Item>> pq;
  for (const auto& [n, d0] : sources)
    if (d0 < dist[n]) {
      dist[n] = d0;
      pq.push({d0, n});
    }
  while (!pq.empty()) {
    const auto [d, u] = pq.top();
    pq.pop();
    if (d > dist[u]) continue;
    for (const auto& [v, w] : adj[u])
      if (d + w < dist[v]) {
        dist[v] = d + w;
        pq.push({dist[v], v});
      }
  }
  return dist;
}

// a location on the graph: arc position s from edge.first, plus the distance
// from the query point it was projected from
struct GraphPoint {
  int edge = -1;
  double s = 0;
  Vec2 pos;
  double dist = kInf;
};

inline GraphPoint project_to_graph(const GraphGeom& gg, const Vec2& p) {
  GraphPoint best;
  for (std::size_t e = 0; e < gg.edges.size(); ++e) {
    const Vec2& a = gg.nodes[gg.edges[e].first];
    const Vec2& b = gg.nodes[gg.edges[e].second];
    const double t = project_param(p, a, b);
    const Vec2 q = a + (b - a) * t;
    const double d = distance(p, q);
    if (d < best.dist) best = {static_cast<int>(e), t * gg.len[e], q, d};
  }
  return best;
}

inline std::vector<double> node_dists_from(const GraphGeom& gg, const GraphPoint& src) {
  const auto [u, v] = gg.edges[src.edge];
  return dijkstra(gg.adj, {{u, src.s}, {v, gg.len[src.edge] - src.s}});
}

// every point of the graph at graph-distance exactly d from src (deduplicated)
inline std::vector<Vec2> ring_points(const GraphGeom& gg, const GraphPoint& src,
                                     const std::vector<double>& nd, double d) {
  const double tol = 1e-9 * (1.0 + d);
  std::vector<Vec2> out;
  for (std::size_t e = 0; e < gg.edges.size(); ++e) {
    const auto [u, v] = gg.edges[e];
    const double L = gg.len[e];
    const bool on_src = static_cast<int>(e) == src.edge;
    auto point_dist = [&](double s) {
      double best = kInf;
      if (std::isfinite(nd[u])) best = std::min(best, nd[u] + s);
      if (std::isfinite(nd[v])) best = std::min(best, nd[v] + (L - s));
      if (on_src) best = std::min(best, std::fabs(s - src.s));
      return best;
    };
    std::vector<double> cand;
    if (std::isfinite(nd[u])) cand.push_back(d - nd[u]);
    if (std::isfinite(nd[v])) cand.push_back(L - (d - nd[v]));
    if (on_src) {
      cand.push_back(src.s - d);
      cand.push_back(src.s + d);
    }
    for (double s : cand) {
      if (s < -tol || s > L + tol) continue;
      s = std::clamp(s, 0.0, L);
      if (std::fabs(point_dist(s) - d) <= tol) out.push_back(gg.point_at(static_cast<int>(e), s));
    }
  }
  std::sort(out.begin(), out.end(),
            [](const Vec2& a, const Vec2& b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
  std::vector<Vec2> uniq;
  for (const auto& p : out)
    if (uniq.empty() || distance(uniq.back(), p) > 1e-6) uniq.push_back(p);
  return uniq;
}

// seeds spaced along every edge, including both endpoints, deduplicated
inline std::vector<GraphPoint> sample_seeds(const GraphGeom& gg, double interval) {
  std::vector<GraphPoint> seeds;
  for (std::size_t e = 0; e < gg.edges.size(); ++e) {
    const double L = gg.len[e];
    for (int k = 0;; ++k) {
      const double s = k * interval;
      if (s > L) break;
      seeds.push_back({static_cast<int>(e), s, gg.point_at(static_cast<int>(e), s), 0.0});
    }
    seeds.push_back({static_cast<int>(e), L, gg.point_at(static_cast<int>(e), L), 0.0});
  }
  std::sort(seeds.begin(), seeds.end(), [](const GraphPoint& a, const GraphPoint& b) {
    return a.pos.x < b.pos.x || (a.pos.x == b.pos.x && a.pos.y < b.pos.y);
  });
  std::vector<GraphPoint> uniq;
  for (const auto& s : seeds)
    if (uniq.empty() || distance(uniq.back().pos, s.pos) > 1e-6) uniq.push_back(s);
  return uniq;
}

// greedy one-to-one matching of two point sets within a radius
inline int greedy_match(const std::vector<Vec2>& a, const std::vector<Vec2>& b, double radius) {
  std::vector<std::tuple<double, int, int>> cand;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) {
      const double d = distance(a[i], b[j]);
      if (d <= radius) cand.push_back({d, static_cast<int>(i), static_cast<int>(j)});
    }
  std::sort(cand.begin(), cand.end());
  std::vector<char> ua(a.size(), 0), ub(b.size(), 0);
  int matched = 0;
  for (const auto& [d, i, j] : cand) {
    if (ua[i] || ub[j]) continue;
    ua[i] = ub[j] = 1;
    ++matched;
  }
  return matched;
}

}  // namespace metricdetail

// Sub-graph similarity around seed points sampled on the ground-truth graph.
// Each seed is matched to the nearest predicted location; from both, "hole"
// points are propagated outward by graph distance and matched one-to-one.
inline TopoResult topo(const RoadGraph& pred, const RoadGraph& gt,
                       const MetricConfig& cfg = {}) {
  cfg.validate();
  if (gt.nodes.empty() || gt.edges.empty())
    throw BadInput("graph comparison needs a nonempty ground-truth graph");
  const metricdetail::GraphGeom gtg = metricdetail::build_geom(gt);
  const metricdetail::GraphGeom prg = metricdetail::build_geom(pred);

  const std::vector<metricdetail::GraphPoint> seeds =
      metricdetail::sample_seeds(gtg, cfg.seed_interval);
  TopoResult res;
  res.total_seeds = static_cast<int>(seeds.size());

  double sum_p = 0, sum_r = 0;
  for (const auto& seed : seeds) {
    metricdetail::GraphPoint proj;
    if (!prg.edges.empty()) proj = metricdetail::project_to_graph(prg, seed.pos);
    if (proj.dist > cfg.match_radius) continue;
    ++res.matched_seeds;

    const std::vector<double> nd_gt = metricdetail::node_dists_from(gtg, seed);
    const std::vector<double> nd_pr = metricdetail::node_dists_from(prg, proj);
    std::vector<Vec2> gt_holes, pr_holes;
    for (int k = 0; k * cfg.hole_spacing <= cfg.propagation_radius + 1e-9; ++k) {
      const double d = k * cfg.hole_spacing;
      for (const auto& p : metricdetail::ring_points(gtg, seed, nd_gt, d)) gt_holes.push_back(p);
      for (const auto& p : metricdetail::ring_points(prg, proj, nd_pr, d)) pr_holes.push_back(p);
    }
    const int m = metricdetail::greedy_match(gt_holes, pr_holes, cfg.match_radius);
    sum_p += pr_holes.empty() ? 0.0 : static_cast<double>(m) / pr_holes.size();
    sum_r += gt_holes.empty() ? 0.0 : static_cast<double>(m) / gt_holes.size();
  }
  if (res.matched_seeds > 0) {
    res.precision = sum_p / res.matched_seeds;
    res.recall = sum_r / res.matched_seeds;
    if (res.precision + res.recall > 0)
      res.f1 = 2 * res.precision * res.recall / (res.precision + res.recall);
  }
  return res;
}

namespace metricdetail {

// destination graph with the snapped control points spliced into its edges
struct Augmented {
  Adjacency adj;
  std::vector<int> virt;  // control index -> vertex id, -1 when unsnapped
};

inline Augmented inject_controls(const GraphGeom& gg, const std::vector<GraphPoint>& pts,
                                 double snap_radius) {
  Augmented aug;
  aug.adj = gg.adj;
  aug.virt.assign(pts.size(), -1);
  std::map<int, std::vector<std::pair<double, int>>> per_edge;
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (pts[i].edge >= 0 && pts[i].dist <= snap_radius)
      per_edge[pts[i].edge].push_back({pts[i].s, static_cast<int>(i)});

  auto drop_neighbor = [&](int from, int to) {
    auto& lst = aug.adj[from];
    for (std::size_t k = 0; k < lst.size(); ++k)
      if (lst[k].first == to) {
        lst.erase(lst.begin() + static_cast<std::ptrdiff_t>(k));
        return;
      }
  };
  auto link = [&](int a, int b, double w) {
    aug.adj[a].push_back({b, w});
    aug.adj[b].push_back({a, w});
  };

  for (auto& [e, lst] : per_edge) {
    std::sort(lst.begin(), lst.end());
    const auto [u, v] = gg.edges[e];
    drop_neighbor(u, v);
    drop_neighbor(v, u);
    int prev = u;
    double prev_s = 0;
    for (const auto& [s, ctrl] : lst) {
      const int vid = static_cast<int>(aug.adj.size());
      aug.adj.emplace_back();
      aug.virt[ctrl] = vid;
      link(prev, vid, s - prev_s);
      prev = vid;
      prev_s = s;
    }
    link(prev, v, gg.len[e] - prev_s);
  }
  return aug;
}

// one direction of the symmetric path-length comparison: control nodes are the
// source graph's vertices, snapped onto the destination graph
inline void apls_direction(const GraphGeom& src, const GraphGeom& dst, const MetricConfig& cfg,
                           std::vector<double>& contribs) {
  const int n = static_cast<int>(src.nodes.size());
  if (n < 2) return;

  std::vector<GraphPoint> snaps(n);
  if (!dst.edges.empty())
    for (int i = 0; i < n; ++i) snaps[i] = project_to_graph(dst, src.nodes[i]);
  const Augmented aug = inject_controls(dst, snaps, cfg.snap_radius);

  std::vector<std::pair<int, int>> pairs;
  if (n <= cfg.apls_exhaustive_limit) {
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) pairs.push_back({i, j});
  } else {
    Rng rng(cfg.apls_seed);
    for (int k = 0; k < cfg.apls_sample_pairs; ++k) {
      const int i = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n)));
      int j = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n)));
      while (j == i) j = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n)));
      pairs.push_back({std::min(i, j), std::max(i, j)});
    }
  }

  std::map<int, std::vector<double>> src_dist, dst_dist;
  for (const auto& [i, j] : pairs) {
    if (aug.virt[i] < 0 || aug.virt[j] < 0) {
      contribs.push_back(1.0);
      continue;
    }
    auto si = src_dist.find(i);
    if (si == src_dist.end()) si = src_dist.emplace(i, dijkstra(src.adj, {{i, 0.0}})).first;
    auto di = dst_dist.find(i);
    if (di == dst_dist.end())
      di = dst_dist.emplace(i, dijkstra(aug.adj, {{aug.virt[i], 0.0}})).first;
    const double l_src = si->second[static_cast<std::size_t>(j)];
    const double l_dst = di->second[static_cast<std::size_t>(aug.virt[j])];
    if (!std::isfinite(l_src) || !std::isfinite(l_dst)) {
      contribs.push_back(1.0);
    } else if (l_src < 1e-9) {
      contribs.push_back(l_dst < 1e-9 ? 0.0 : 1.0);
    } else {
      contribs.push_back(std::min(1.0, std::fabs(l_src - l_dst) / l_src));
    }
  }
}

}  // namespace metricdetail

// Path-length similarity: for node pairs of each graph, compare shortest-path
// lengths against the other graph through snapped control nodes. Unsnappable
// nodes and missing paths in either graph count as full errors.
inline double apls(const RoadGraph& pred, const RoadGraph& gt, const MetricConfig& cfg = {}) {
  cfg.validate();
  if (gt.nodes.empty()) throw BadInput("graph comparison needs a nonempty ground-truth graph");
  if (pred.nodes.empty()) return 0.0;
  const metricdetail::GraphGeom gtg = metricdetail::build_geom(gt);
  const metricdetail::GraphGeom prg = metricdetail::build_geom(pred);

  std::vector<double> fwd, rev;
  metricdetail::apls_direction(gtg, prg, cfg, fwd);
  metricdetail::apls_direction(prg, gtg, cfg, rev);
  double score = 0;
  int dirs = 0;
  for (const auto* c : {&fwd, &rev}) {
    if (c->empty()) continue;
    double total = 0;
    for (double v : *c) total += v;
    score += 1.0 - total / static_cast<double>(c->size());
    ++dirs;
  }
  return dirs > 0 ? score / dirs : 1.0;
}

namespace metricdetail {

inline void check_polygons(const std::vector<BuildingPolygon>& polys) {
  for (const auto& p : polys)
    if (p.ring.size() < 3 || !ring_is_simple(p.ring))
      throw BadInput("polygon metric given an invalid ring");
}

inline bool in_any(const std::vector<BuildingPolygon>& polys, const Vec2& p) {
  for (const auto& poly : polys)
    if (point_in_ring(poly.ring, p)) return true;
  return false;
}

}  // namespace metricdetail

// Rasterized-mask IoU of two polygon sets. The sampling grid is anchored to
// the joint bounding box so identical translations of both inputs cancel.
inline double polygon_iou(const std::vector<BuildingPolygon>& pred,
                          const std::vector<BuildingPolygon>& gt,
                          const MetricConfig& cfg = {}) {
  cfg.validate();
  metricdetail::check_polygons(pred);
  metricdetail::check_polygons(gt);
  if (pred.empty() && gt.empty()) return 1.0;
  if (pred.empty() || gt.empty()) return 0.0;

  double minx = metricdetail::kInf, miny = metricdetail::kInf;
  double maxx = -metricdetail::kInf, maxy = -metricdetail::kInf;
  for (const auto* set : {&pred, &gt})
    for (const auto& poly : *set)
      for (const auto& p : poly.ring) {
        minx = std::min(minx, p.x);
        miny = std::min(miny, p.y);
        maxx = std::max(maxx, p.x);
        maxy = std::max(maxy, p.y);
      }
  const Vec2 anchor{minx - 1.0, miny - 1.0};
  const int w = static_cast<int>(std::ceil(maxx - minx + 2.0));
  const int h = static_cast<int>(std::ceil(maxy - miny + 2.0));
  const int ss = cfg.iou_supersample;

  long long inter = 0, uni = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx) {
          const Vec2 p = anchor + Vec2{x + (sx + 0.5) / ss, y + (sy + 0.5) / ss};
          const bool a = metricdetail::in_any(pred, p);
          const bool b = metricdetail::in_any(gt, p);
          inter += (a && b) ? 1 : 0;
          uni += (a || b) ? 1 : 0;
        }
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

struct PolygonMatch {
  int pred = -1, gt = -1;
  double iou = 0;
};

// one-to-one instance matching by descending pairwise IoU
inline std::vector<PolygonMatch> match_polygons(const std::vector<BuildingPolygon>& pred,
                                                const std::vector<BuildingPolygon>& gt,
                                                const MetricConfig& cfg = {}) {
  cfg.validate();
  metricdetail::check_polygons(pred);
  metricdetail::check_polygons(gt);
  std::vector<std::tuple<double, int, int>> cand;
  for (std::size_t pi = 0; pi < pred.size(); ++pi)
    for (std::size_t gi = 0; gi < gt.size(); ++gi) {
      const double v = polygon_iou({pred[pi]}, {gt[gi]}, cfg);
      if (v >= cfg.match_iou) cand.push_back({-v, static_cast<int>(pi), static_cast<int>(gi)});
    }
  std::sort(cand.begin(), cand.end());
  std::vector<char> up(pred.size(), 0), ug(gt.size(), 0);
  std::vector<PolygonMatch> out;
  for (const auto& [nv, pi, gi] : cand) {
    if (up[pi] || ug[gi]) continue;
    up[pi] = ug[gi] = 1;
    out.push_back({pi, gi, -nv});
  }
  return out;
}

// IoU weighted by the relative vertex-count error, plus the raw vertex ratio,
// both averaged over matched instances
inline CiouResult ciou_nratio(const std::vector<BuildingPolygon>& pred,
                              const std::vector<BuildingPolygon>& gt,
                              const MetricConfig& cfg = {}) {
  CiouResult res;
  for (const auto& m : match_polygons(pred, gt, cfg)) {
    const double np = static_cast<double>(pred[m.pred].ring.size());
    const double ng = static_cast<double>(gt[m.gt].ring.size());
    const double d = std::fabs(np - ng) / (np + ng);
    res.ciou += m.iou * (1.0 - d);
    res.n_ratio += np / ng;
    ++res.matches;
  }
  if (res.matches > 0) {
    res.ciou /= res.matches;
    res.n_ratio /= res.matches;
  }
  return res;
}

// Max tangent-angle error per building, averaged over matched instances, in
// degrees. Each predicted edge is assigned to the ground-truth edge with the
// smallest mean distance over dense samples along the predicted edge.
inline std::optional<double> mta(const std::vector<BuildingPolygon>& pred,
                                 const std::vector<BuildingPolygon>& gt,
                                 const MetricConfig& cfg = {}) {
  const std::vector<PolygonMatch> matches = match_polygons(pred, gt, cfg);
  if (matches.empty()) return std::nullopt;

  double total = 0;
  for (const auto& m : matches) {
    const auto& pr = pred[m.pred].ring;
    const auto& gr = gt[m.gt].ring;
    double worst = 0;
    for (std::size_t i = 0; i < pr.size(); ++i) {
      const Vec2& a = pr[i];
      const Vec2& b = pr[(i + 1) % pr.size()];
      const double len = distance(a, b);
      if (len < 1e-12) continue;
      const int samples = std::max(2, static_cast<int>(std::ceil(len / cfg.mta_sample_step)));
      double best_mean = metricdetail::kInf;
      std::size_t best_edge = 0;
      for (std::size_t j = 0; j < gr.size(); ++j) {
        const Vec2& ga = gr[j];
        const Vec2& gb = gr[(j + 1) % gr.size()];
        double acc = 0;
        for (int k = 0; k < samples; ++k) {
          const Vec2 p = a + (b - a) * ((k + 0.5) / samples);
          acc += dist_point_segment(p, ga, gb);
        }
        const double mean = acc / samples;
        if (mean < best_mean) {
          best_mean = mean;
          best_edge = j;
        }
      }
      const Vec2& ga = gr[best_edge];
      const Vec2& gb = gr[(best_edge + 1) % gr.size()];
      const double ang = angle_diff_pi(std::atan2(b.y - a.y, b.x - a.x),
                                       std::atan2(gb.y - ga.y, gb.x - ga.x));
      worst = std::max(worst, ang * 180.0 / kPi);
    }
    total += worst;
  }
  return total / static_cast<double>(matches.size());
}

// aggregate report; mta is only meaningful when matched_polygons > 0
struct MetricReport {
  double topo_precision = 0, topo_recall = 0, topo_f1 = 0;
  double apls = 0;
  double iou = 0, ciou = 0, n_ratio = 0, mta = 0;
  int topo_matched_seeds = 0, topo_total_seeds = 0;
  int matched_polygons = 0;
  bool has_mta = false;
};

inline MetricReport road_metrics(const RoadGraph& pred, const RoadGraph& gt,
                                 const MetricConfig& cfg = {}) {
  MetricReport r;
  const TopoResult t = topo(pred, gt, cfg);
  r.topo_precision = t.precision;
  r.topo_recall = t.recall;
  r.topo_f1 = t.f1;
  r.topo_matched_seeds = t.matched_seeds;
  r.topo_total_seeds = t.total_seeds;
  r.apls = apls(pred, gt, cfg);
  return r;
}

inline MetricReport building_metrics(const std::vector<BuildingPolygon>& pred,
                                     const std::vector<BuildingPolygon>& gt,
                                     const MetricConfig& cfg = {}) {
  MetricReport r;
  r.iou = polygon_iou(pred, gt, cfg);
  const CiouResult c = ciou_nratio(pred, gt, cfg);
  r.ciou = c.ciou;
  r.n_ratio = c.n_ratio;
  r.matched_polygons = c.matches;
  if (const auto m = mta(pred, gt, cfg)) {
    r.mta = *m;
    r.has_mta = true;
  }
  return r;
}

}  // namespace pgmap
