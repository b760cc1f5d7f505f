#pragma once

#include <algorithm>
#include <iostream>
#include <map>
#include <set>
#include <vector>

#include <pgmap/core.hpp>
#include <pgmap/geom.hpp>
#include <pgmap/losses.hpp>
#include <pgmap/pls.hpp>
#include <pgmap/sampling.hpp>

// Decoding: refined primitives plus relationship probabilities become road
// graphs and simplified building polygons.

namespace pgmap {

struct RoadGraph {
  std::vector<Vec2> nodes;
  std::vector<std::pair<int, int>> edges;  // undirected, stored i < j
  std::vector<int> categories;

  void validate() const {
    if (categories.size() != nodes.size())
      throw BadInput("road graph category per node required");
    std::set<std::pair<int, int>> seen;
    for (const auto& [i, j] : edges) {
      if (i < 0 || j >= static_cast<int>(nodes.size()) || i >= j)
        throw BadInput("road graph edges must satisfy 0 <= i < j");
      if (!seen.insert({i, j}).second) throw BadInput("duplicate road edge");
    }
  }
};

struct BuildingPolygon {
  std::vector<Vec2> ring;           // closed (last != first), exterior CCW
  std::vector<double> directions;   // per-edge angle in [0, pi)

  void validate() const {
    if (ring.size() < 3) throw BadInput("polygon ring needs at least 3 vertices");
    if (directions.size() != ring.size())
      throw BadInput("polygon needs one direction per edge");
    if (!ring_is_simple(ring)) throw BadInput("polygon ring self-intersects");
  }
};

// The road-graph view of a point-primitive graph: nodes at primitive
// positions, one edge per label-1 relation.
inline RoadGraph road_graph_from_primitives(const PrimitiveGraph& g) {
  RoadGraph r;
  for (const auto& p : g.primitives) {
    if (p.kind != PrimitiveKind::Point) throw BadInput("road graph needs point primitives");
    r.nodes.push_back(p.position());
    r.categories.push_back(p.category);
  }
  for (int i = 0; i < g.size(); ++i)
    for (int j = i + 1; j < g.size(); ++j)
      if (g.relations(i, j) == 1) r.edges.push_back({i, j});
  return r;
}

namespace decodedetail {

// Connectivity probability matrix (relation class 1) of a decoded graph.
inline const Eigen::MatrixXd& class1_probs(const PrimitiveGraph& g) {
  if (g.relation_probs.size() < 2)
    throw BadInput("decoding needs per-class relation probabilities");
  const Eigen::MatrixXd& p = g.relation_probs[1];
  if (p.rows() != g.size() || p.cols() != g.size())
    throw BadInput("relation probability matrix shape mismatch");
  return p;
}

}  // namespace decodedetail

// Road assembly: each node selects its top-t_i neighbours (t_i by category)
// among those above the connectivity threshold, and an edge survives if
// either endpoint selected it. With use_sort disabled, every pair above the
// threshold connects directly.
inline RoadGraph decode_road(const PrimitiveGraph& graph, const PipelineConfig& cfg) {
  RoadGraph out;
  const int n = graph.size();
  if (n == 0) return out;
  const Eigen::MatrixXd& probs = decodedetail::class1_probs(graph);
  for (const auto& p : graph.primitives) {
    if (p.kind != PrimitiveKind::Point) throw BadInput("road decoding needs point primitives");
    out.nodes.push_back(p.position());
    out.categories.push_back(p.category);
  }

  std::set<std::pair<int, int>> edges;
  if (!cfg.use_sort) {
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        if (probs(i, j) > cfg.connect_threshold) edges.insert({i, j});
  } else {
    for (int i = 0; i < n; ++i) {
      std::vector<int> cand;
      for (int j = 0; j < n; ++j)
        if (j != i && probs(i, j) > cfg.connect_threshold) cand.push_back(j);
      std::stable_sort(cand.begin(), cand.end(), [&](int a, int b) {
        if (probs(i, a) != probs(i, b)) return probs(i, a) > probs(i, b);
        return a < b;
      });
      const int keep = std::min<int>(cand.size(), cfg.max_degree(graph.primitives[i].category));
      for (int k = 0; k < keep; ++k)
        edges.insert({std::min(i, cand[k]), std::max(i, cand[k])});
    }
  }
  out.edges.assign(edges.begin(), edges.end());
  return out;
}

namespace decodedetail {

// Length-weighted merged direction of a run of segments, as a unit surrogate.
inline Vec2 run_direction(const std::vector<Primitive>& segs, const Eigen::MatrixXd& dirs,
                          const std::vector<int>& members) {
  Vec2 acc{0, 0};
  for (int k : members) {
    Vec2 s{dirs(k, 0), dirs(k, 1)};
    const double n = s.norm();
    if (n < 1e-12) continue;
    acc = acc + s * (segs[k].length() / n);
  }
  const double n = acc.norm();
  if (n < 1e-12) {
    // degenerate: fall back to the first member's own geometry
    return surrogate_of(segment_direction(segs[members.front()]));
  }
  return acc * (1.0 / n);
}

// Length-weighted centroid of a run of segments.
inline Vec2 run_centroid(const std::vector<Primitive>& segs, const std::vector<int>& members) {
  Vec2 acc{0, 0};
  double total = 0;
  for (int k : members) {
    const double len = std::max(segs[k].length(), 1e-9);
    acc = acc + segs[k].midpoint() * len;
    total += len;
  }
  return acc * (1.0 / total);
}

}  // namespace decodedetail

// Polygon simplification for one contour: cyclically adjacent segment pairs
// whose inline probability clears the threshold are merged (shared vertex
// removed) until no adjacent pair remains above it; surviving vertices are
// rebuilt as intersections of the merged runs' support lines (midpoint +
// predicted direction), falling back to the original vertex when the lines
// are near-parallel or the intersection lands more than 3 px away. If the
// rebuilt ring degenerates or self-intersects, the original polygon wins.
inline BuildingPolygon merge_inline(const std::vector<Primitive>& segments,
                                    const Eigen::MatrixXd& inline_probs,
                                    const Eigen::MatrixXd& dirs,
                                    const PipelineConfig& cfg) {
  const int n = static_cast<int>(segments.size());
  if (n < 3) throw BadInput("contour needs at least 3 segments");
  for (const auto& s : segments)
    if (s.kind != PrimitiveKind::LineSegment)
      throw BadInput("inline merging needs segment primitives");
  if (inline_probs.rows() != n || inline_probs.cols() != n)
    throw BadInput("inline probability matrix shape mismatch");
  if (dirs.rows() != n || dirs.cols() != 2) throw BadInput("direction row per segment required");

  auto original = [&]() {
    BuildingPolygon poly;
    for (int k = 0; k < n; ++k) {
      poly.ring.push_back(segments[k].endpoint(0));
      poly.directions.push_back(segment_direction(segments[k]));
    }
    return poly;
  };

  // partition the cycle into maximal runs of inline-connected segments
  std::vector<char> merge_after(n, 0);  // pair (k, k+1 mod n)
  int breaks = 0;
  for (int k = 0; k < n; ++k) {
    merge_after[k] = inline_probs(k, (k + 1) % n) > cfg.connect_threshold;
    if (!merge_after[k]) ++breaks;
  }

  std::vector<std::vector<int>> runs;
  if (breaks < 3) {
    std::cerr << "warning: inline merging left fewer than 3 corners; keeping the"
                 " three strongest\n";
    // keep the 3 vertices whose incident segments disagree most in direction
    std::vector<std::pair<double, int>> corners;
    for (int k = 0; k < n; ++k) {
      const double prev = segment_direction(segments[(k + n - 1) % n]);
      const double cur = segment_direction(segments[k]);
      corners.push_back({angle_diff_pi(prev, cur), k});
    }
    std::stable_sort(corners.begin(), corners.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    std::vector<int> starts = {corners[0].second, corners[1].second, corners[2].second};
    std::sort(starts.begin(), starts.end());
    for (int r = 0; r < 3; ++r) {
      std::vector<int> members;
      for (int k = starts[r]; k != starts[(r + 1) % 3]; k = (k + 1) % n)
        members.push_back(k);
      runs.push_back(members);
    }
  } else {
    // walk from a run boundary
    int start = 0;
    while (merge_after[(start + n - 1) % n]) start = (start + 1) % n;
    int k = start;
    do {
      std::vector<int> members = {k};
      while (merge_after[k]) {
        k = (k + 1) % n;
        members.push_back(k);
      }
      runs.push_back(std::move(members));
      k = (k + 1) % n;
    } while (k != start);
  }

  const int m = static_cast<int>(runs.size());
  BuildingPolygon poly;
  for (int r = 0; r < m; ++r) {
    const auto& prev = runs[(r + m - 1) % m];
    const auto& cur = runs[r];
    // original shared vertex between the two runs
    const Vec2 orig = segments[cur.front()].endpoint(0);
    Vec2 vertex = orig;
    // vertices away from any merge keep their positions
    if (prev.size() > 1 || cur.size() > 1) {
      const Vec2 dp = decodedetail::run_direction(segments, dirs, prev);
      const Vec2 dc = decodedetail::run_direction(segments, dirs, cur);
      const Vec2 pp = decodedetail::run_centroid(segments, prev);
      const Vec2 pc = decodedetail::run_centroid(segments, cur);
      // surrogate -> spatial direction vectors
      const double ap = recover_angle(dp.x, dp.y);
      const double ac = recover_angle(dc.x, dc.y);
      Vec2 cross;
      if (intersect_lines(pp, {std::cos(ap), std::sin(ap)}, pc,
                          {std::cos(ac), std::sin(ac)}, cross, 1e-3) &&
          (cross - orig).norm() <= 3.0) {
        vertex = cross;
      }
    }
    poly.ring.push_back(vertex);
  }
  for (int r = 0; r < m; ++r) {
    const Vec2 a = poly.ring[r], b = poly.ring[(r + 1) % m];
    if ((b - a).norm() < 1e-9) return original();
    poly.directions.push_back(fold_angle_pi(std::atan2(b.y - a.y, b.x - a.x)));
  }
  if (!ring_is_simple(poly.ring) || std::fabs(signed_area(poly.ring)) < 1e-6)
    return original();
  return poly;
}

// Ground-truth relationship probabilities for sampled primitives: assign each
// primitive to its nearest GT primitive under the cap, then copy the GT
// relation as a one-hot distribution. Bypasses the learned relationship model.
inline void apply_oracle_relations(PrimitiveGraph& graph, const PrimitiveGraph& gt,
                                   double cap) {
  const int n = graph.size();
  const std::vector<int> assign = match_gt(graph.primitives, gt, cap);
  graph.relation_probs.assign(2, Eigen::MatrixXd::Zero(n, n));
  graph.relation_probs[0] = Eigen::MatrixXd::Ones(n, n);
  graph.init_relations();
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      int label = 0;
      if (assign[i] >= 0 && assign[j] >= 0)
        label = gt.relations(assign[i], assign[j]);
      if (label != 0) {
        graph.relations(i, j) = graph.relations(j, i) = label;
        graph.relation_probs[0](i, j) = graph.relation_probs[0](j, i) = 0.0;
        graph.relation_probs[1](i, j) = graph.relation_probs[1](j, i) = 1.0;
      }
    }
  }
}

// Primitive indices of each contour, ordered by position along the ring.
inline std::vector<std::vector<int>> group_by_contour(const std::vector<Primitive>& prims) {
  std::map<int, std::vector<int>> groups;
  for (std::size_t k = 0; k < prims.size(); ++k)
    groups[prims[k].contour_id].push_back(static_cast<int>(k));
  std::vector<std::vector<int>> out;
  for (auto& [id, members] : groups) {
    std::stable_sort(members.begin(), members.end(), [&](int a, int b) {
      return prims[a].contour_index < prims[b].contour_index;
    });
    out.push_back(std::move(members));
  }
  return out;
}

struct SceneDecodeResult {
  PrimitiveGraph graph;                    // refined primitives + relations
  RoadGraph road;                          // road task output
  std::vector<BuildingPolygon> buildings;  // building task output
};

namespace decodedetail {

// Run both model stages on already-sampled primitives, filling refined
// coordinates, direction estimates, and relationship probabilities. The pair
// set is built from the coordinates the relationship stage actually sees
// (refined in incremental mode, sampled otherwise).
inline Eigen::MatrixXd forward_scene(PrimitiveGraph& graph, const RasterBundle& bundle,
                                     const ParamStore& params, const PipelineConfig& cfg) {
  const int n = graph.size();
  const PrimitiveKind kind = graph.primitives.front().kind;
  const int d = kind == PrimitiveKind::Point ? 2 : 4;
  Eigen::MatrixXd coords(n, d);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < d; ++c) coords(i, c) = graph.primitives[i].coords[c];

  ad::Tape tape;
  ParamMap pm = lift(tape, params);
  ad::Value coords_v = tape.leaf(coords);
  RefineOut ref = forward_refine(tape, pm, bundle, coords_v, kind, cfg);
  const Eigen::MatrixXd refined = ref.refined.val();
  const Eigen::MatrixXd dirs = ref.dirs.val();
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < d; ++c) graph.primitives[i].coords[c] = refined(i, c);

  ad::Value relate_coords = cfg.incremental ? ref.refined : coords_v;
  std::vector<Primitive> pair_prims = graph.primitives;
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < d; ++c) pair_prims[i].coords[c] = relate_coords.val()(i, c);
  PairSet pairs = build_pairs(pair_prims, cfg.pair_distance_threshold);
  RelateOut rel = forward_relate(tape, pm, bundle, relate_coords, kind, pairs, cfg);
  graph.relation_probs.assign(2, Eigen::MatrixXd::Zero(n, n));
  graph.relation_probs[0] = Eigen::MatrixXd::Ones(n, n);
  graph.init_relations();
  const Eigen::MatrixXd probs = rel.pair_probs.val();
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto [i, j] = pairs.pairs[k];
    graph.relation_probs[0](i, j) = graph.relation_probs[0](j, i) = probs(k, 0);
    graph.relation_probs[1](i, j) = graph.relation_probs[1](j, i) = probs(k, 1);
    if (probs(k, 1) > probs(k, 0)) graph.relations(i, j) = graph.relations(j, i) = 1;
  }
  return dirs;
}

}  // namespace decodedetail

// Full inference for one scene: sample primitives, refine them, classify
// relationships, and decode the task-specific vector map.
inline SceneDecodeResult assemble_scene(const RasterBundle& bundle, const PipelineConfig& cfg,
                                        const ParamStore& params, Task task) {
  SceneDecodeResult out;
  if (task == Task::kRoad) {
    out.graph = sample_road_points(bundle, cfg);
    if (out.graph.size() == 0) return out;
    decodedetail::forward_scene(out.graph, bundle, params, cfg);
    out.road = decode_road(out.graph, cfg);
    return out;
  }

  out.graph = sample_building_segments(bundle, cfg);
  if (out.graph.size() == 0) return out;
  // refine + relate per contour so other buildings cannot interfere
  const auto groups = group_by_contour(out.graph.primitives);
  PrimitiveGraph merged;
  for (const auto& members : groups)
    merged.primitives.resize(merged.primitives.size() + members.size());
  merged.init_relations();
  merged.relation_probs.assign(2, Eigen::MatrixXd::Zero(merged.size(), merged.size()));
  merged.relation_probs[0] = Eigen::MatrixXd::Ones(merged.size(), merged.size());
  int off = 0;
  for (const auto& members : groups) {
    PrimitiveGraph local;
    for (int k : members) local.primitives.push_back(out.graph.primitives[k]);
    local.init_relations();
    const Eigen::MatrixXd dirs = decodedetail::forward_scene(local, bundle, params, cfg);
    if (local.size() >= 3)
      out.buildings.push_back(merge_inline(local.primitives, local.relation_probs[1], dirs, cfg));
    const int ln = local.size();
    for (int a = 0; a < ln; ++a) {
      merged.primitives[off + a] = local.primitives[a];
      for (int b = 0; b < ln; ++b) {
        merged.relations(off + a, off + b) = local.relations(a, b);
        merged.relation_probs[0](off + a, off + b) = local.relation_probs[0](a, b);
        merged.relation_probs[1](off + a, off + b) = local.relation_probs[1](a, b);
      }
    }
    off += ln;
  }
  out.graph = std::move(merged);
  return out;
}

// Inference with ground-truth relationship probabilities: primitives are
// sampled from the rasters as usual, but relations come from the nearest GT
// assignment and refinement is skipped. Upper-bounds what the relationship
// stage can contribute.
inline SceneDecodeResult oracle_scene(const RasterBundle& bundle, const PrimitiveGraph& gt,
                                      const PipelineConfig& cfg, Task task) {
  SceneDecodeResult out;
  if (task == Task::kRoad) {
    out.graph = sample_road_points(bundle, cfg);
    if (out.graph.size() == 0) return out;
    apply_oracle_relations(out.graph, gt, cfg.gt_match_cap);
    out.road = decode_road(out.graph, cfg);
    return out;
  }

  out.graph = sample_building_segments(bundle, cfg);
  if (out.graph.size() == 0) return out;
  apply_oracle_relations(out.graph, gt, cfg.gt_match_cap);
  for (const auto& members : group_by_contour(out.graph.primitives)) {
    const int n = static_cast<int>(members.size());
    if (n < 3) continue;
    std::vector<Primitive> prims;
    Eigen::MatrixXd probs(n, n), dirs(n, 2);
    for (int a = 0; a < n; ++a) {
      prims.push_back(out.graph.primitives[members[a]]);
      const Vec2 sur = surrogate_of(segment_direction(prims.back()));
      dirs(a, 0) = sur.x;
      dirs(a, 1) = sur.y;
      for (int b = 0; b < n; ++b)
        probs(a, b) = out.graph.relation_probs[1](members[a], members[b]);
    }
    out.buildings.push_back(merge_inline(prims, probs, dirs, cfg));
  }
  return out;
}

}  // namespace pgmap
