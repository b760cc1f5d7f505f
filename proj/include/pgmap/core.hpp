#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "pgmap/geom.hpp"

namespace pgmap {

// Errors that map to the CLI exit codes: BadInput -> 2, NumericError -> 3.
struct BadInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class PrimitiveKind { Point, LineSegment };

enum class Task { kRoad, kBuilding };

// Road keypoint categories (kp raster channels 1..4) plus the
// segmentation-derived candidate class. Buildings reuse kCorner/kContour.
enum Category : int {
  kJunction = 1,
  kOverlay = 2,
  kEndpoint = 3,
  kInterpolated = 4,
  kSegDerived = 5,
  kCorner = 1,
  kContour = 2,
};

// A geometric primitive: a point (x, y) or a line segment (x1, y1, x2, y2),
// in pixel coordinates (x = column, y = row, origin top-left, sub-pixel ok).
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::Point;
  std::array<double, 4> coords{0, 0, 0, 0};
  int category = 0;
  double score = 1.0;
  // For segments assembled from a traced contour: which contour and where in
  // its cyclic order. Used by per-contour grouping and inline merging.
  int contour_id = -1;
  int contour_index = -1;

  static Primitive point(double x, double y, int category = 0, double score = 1.0) {
    Primitive p;
    p.kind = PrimitiveKind::Point;
    p.coords = {x, y, 0, 0};
    p.category = category;
    p.score = score;
    return p;
  }

  static Primitive segment(double x1, double y1, double x2, double y2, int category = 0) {
    Primitive p;
    p.kind = PrimitiveKind::LineSegment;
    p.coords = {x1, y1, x2, y2};
    p.category = category;
    return p;
  }

  int dim() const { return kind == PrimitiveKind::Point ? 2 : 4; }
  Vec2 position() const { return {coords[0], coords[1]}; }
  Vec2 endpoint(int i) const { return {coords[2 * i], coords[2 * i + 1]}; }
  Vec2 midpoint() const {
    if (kind == PrimitiveKind::Point) return position();
    return {(coords[0] + coords[2]) * 0.5, (coords[1] + coords[3]) * 0.5};
  }
  double length() const {
    if (kind == PrimitiveKind::Point) return 0.0;
    return (endpoint(1) - endpoint(0)).norm();
  }

  bool finite() const {
    for (int i = 0; i < dim(); ++i)
      if (!std::isfinite(coords[i])) return false;
    return true;
  }
};

// Spatial distance between two primitives of the same kind: Euclidean for
// points, minimum segment-segment distance for line segments.
inline double primitive_distance(const Primitive& a, const Primitive& b) {
  if (a.kind == PrimitiveKind::Point) return distance(a.position(), b.position());
  return dist_segment_segment(a.endpoint(0), a.endpoint(1), b.endpoint(0), b.endpoint(1));
}

// The unified vector-map representation: N primitives plus a symmetric,
// zero-diagonal matrix of pairwise relationship labels (0 = no relationship).
// relation_probs, when present, holds one NxN matrix per relationship class
// with rows of the per-pair class distribution summing to 1.
struct PrimitiveGraph {
  std::vector<Primitive> primitives;
  Eigen::MatrixXi relations;
  std::vector<Eigen::MatrixXd> relation_probs;

  int size() const { return static_cast<int>(primitives.size()); }

  void init_relations() {
    relations = Eigen::MatrixXi::Zero(size(), size());
  }

  void validate() const {
    const int n = size();
    for (const auto& p : primitives) {
      if (!p.finite()) throw BadInput("primitive has non-finite coordinates");
      if (p.kind != primitives.front().kind)
        throw BadInput("mixed primitive kinds in one graph");
      if (p.kind == PrimitiveKind::LineSegment && p.length() <= 1e-9)
        throw BadInput("degenerate line segment");
    }
    if (relations.size() > 0) {
      if (relations.rows() != n || relations.cols() != n)
        throw BadInput("relationship matrix shape mismatch");
      for (int i = 0; i < n; ++i) {
        if (relations(i, i) != 0) throw BadInput("relationship diagonal must be zero");
        for (int j = 0; j < n; ++j) {
          if (relations(i, j) < 0) throw BadInput("negative relationship label");
          if (relations(i, j) != relations(j, i))
            throw BadInput("relationship matrix must be symmetric");
        }
      }
    }
    if (!relation_probs.empty()) {
      for (const auto& m : relation_probs)
        if (m.rows() != n || m.cols() != n) throw BadInput("relation_probs shape mismatch");
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          double s = 0.0;
          for (const auto& m : relation_probs) s += m(i, j);
          if (std::fabs(s - 1.0) > 1e-6)
            throw BadInput("relation_probs rows must sum to 1");
        }
    }
  }
};

// Unordered primitive pairs (stored i < j) within the spatial distance
// threshold, with optional relationship labels per pair.
struct PairSet {
  std::vector<std::pair<int, int>> pairs;
  std::vector<int> labels;  // empty or one label per pair

  std::size_t size() const { return pairs.size(); }

  void validate() const {
    if (!labels.empty() && labels.size() != pairs.size())
      throw BadInput("pair labels length mismatch");
    std::map<std::pair<int, int>, int> seen;
    for (const auto& [i, j] : pairs) {
      if (i < 0 || j < 0 || i >= j) throw BadInput("pairs must satisfy 0 <= i < j");
      if (seen.count({i, j})) throw BadInput("duplicate pair");
      seen[{i, j}] = 1;
    }
  }
};

// All unordered pairs of primitives closer than the distance threshold.
inline PairSet build_pairs(const std::vector<Primitive>& prims, double threshold) {
  PairSet ps;
  const int n = static_cast<int>(prims.size());
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (primitive_distance(prims[i], prims[j]) < threshold) ps.pairs.push_back({i, j});
  return ps;
}

// Dense H x W x C raster, row-major by pixel with interleaved channels.
struct Raster {
  int h = 0, w = 0, c = 0;
  std::vector<double> data;

  Raster() = default;
  Raster(int h_, int w_, int c_, double fill = 0.0)
      : h(h_), w(w_), c(c_), data(static_cast<std::size_t>(h_) * w_ * c_, fill) {}

  double& at(int y, int x, int ch) {
    return data[(static_cast<std::size_t>(y) * w + x) * c + ch];
  }
  double at(int y, int x, int ch) const {
    return data[(static_cast<std::size_t>(y) * w + x) * c + ch];
  }

  bool empty() const { return data.empty(); }

  // Bilinear sample with zero padding outside bounds; pixel (x, y) has its
  // value at integer coordinates (x = column, y = row).
  double sample(double x, double y, int ch) const {
    const int x0 = static_cast<int>(std::floor(x));
    const int y0 = static_cast<int>(std::floor(y));
    const double fx = x - x0, fy = y - y0;
    auto v = [&](int yy, int xx) -> double {
      if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
      return at(yy, xx, ch);
    };
    return (1 - fy) * ((1 - fx) * v(y0, x0) + fx * v(y0, x0 + 1)) +
           fy * ((1 - fx) * v(y0 + 1, x0) + fx * v(y0 + 1, x0 + 1));
  }
};

// Input bundle for one scene: RGB intensity, segmentation class probabilities,
// keypoint class probabilities, and hand-crafted feature channels.
struct RasterBundle {
  Raster intensity;  // H x W x 3 in [0,1]
  Raster seg;        // H x W x S, pixel distributions
  Raster kp;         // H x W x K, pixel distributions
  Raster features;   // H x W x C

  int height() const { return seg.h; }
  int width() const { return seg.w; }

  void validate() const {
    auto same = [&](const Raster& r) { return r.empty() || (r.h == seg.h && r.w == seg.w); };
    if (!same(intensity) || !same(kp) || !same(features))
      throw BadInput("raster bundle dimensions disagree");
    auto check_dist = [](const Raster& r, const char* name) {
      for (int y = 0; y < r.h; ++y)
        for (int x = 0; x < r.w; ++x) {
          double s = 0.0;
          for (int ch = 0; ch < r.c; ++ch) s += r.at(y, x, ch);
          if (std::fabs(s - 1.0) > 1e-6)
            throw BadInput(std::string(name) + " probabilities must sum to 1");
        }
    };
    if (!seg.empty()) check_dist(seg, "seg");
    if (!kp.empty()) check_dist(kp, "kp");
  }
};

// Per-primitive direction estimates: the doubled-angle surrogate vectors
// (cos 2A, sin 2A) and the recovered angles in [0, pi).
struct DirectionField {
  Eigen::MatrixX2d surrogate;
  Eigen::VectorXd angles;
};

// Recover the actual orientation from a surrogate vector (cos 2A, sin 2A).
inline double recover_angle(double c, double s) {
  const double n = std::hypot(c, s);
  if (n < 1e-9) throw NumericError("degenerate direction");
  double a = 0.5 * std::atan2(s / n, c / n);
  if (a < 0) a += kPi;
  if (a >= kPi) a -= kPi;
  return a;
}

inline Vec2 surrogate_of(double angle) {
  if (!std::isfinite(angle)) throw BadInput("non-finite angle");
  return {std::cos(2.0 * angle), std::sin(2.0 * angle)};
}

// Orientation of a line segment in [0, pi).
inline double segment_direction(const Primitive& seg) {
  if (seg.kind != PrimitiveKind::LineSegment) throw BadInput("not a line segment");
  const Vec2 d = seg.endpoint(1) - seg.endpoint(0);
  if (d.norm() <= 1e-9) throw BadInput("degenerate line segment");
  return fold_angle_pi(std::atan2(d.y, d.x));
}

// Per-term loss weights for the linear combination of training objectives.
struct LossWeights {
  double seg = 1.0;
  double kp = 1.0;
  double off = 1.0;
  double dir = 0.5;
  double rel = 1.0;
  double reg = 0.25;
  double aux = 0.5;
};

// Shared pipeline configuration. Defaults follow the desk-scale setup; every
// field is addressable from the CLI config file.
struct PipelineConfig {
  // sampling
  int nms_window = 3;          // px, NMS neighborhood radius
  double min_score = 0.3;      // NMS score floor
  bool subpixel_peaks = true;  // quadratic 3x3 refinement of NMS peaks
  std::vector<int> priority_order = {kJunction, kOverlay, kEndpoint, kInterpolated,
                                     kSegDerived};
  double dp_tolerance = 2.0;   // px, Douglas-Peucker
  double contour_level = 0.5;  // marching-squares iso level
  double interp_interval = 20.0;  // px between interpolated road points

  // pairing / relationships
  double pair_distance_threshold = 30.0;  // t, px
  double connect_threshold = 0.5;         // t_r, probability
  std::map<int, int> max_degree_map = {{kJunction, 3}, {kOverlay, 4}};
  int default_max_degree = 2;             // t_i for categories not in the map
  double gt_match_cap = 5.0;              // px, refined->GT assignment cap

  // primitive caps
  int max_primitives_train = 150;
  int max_primitives_infer = 300;

  // model / training
  int model_dim = 64;       // d_m
  int heads = 4;            // H
  int layers = 3;           // L
  int patch_size = 5;       // P
  int loi_samples = 8;
  double learning_rate = 2e-4;
  int batch_size = 4;
  double stage_fraction = 0.3;  // share of steps training PLS-1 alone
  bool embed_norm = true;       // L2-normalize pair features before last layer
  double aux_dir_weight = 0.5;
  double lovasz_weight = 1.0;   // lambda between CE and Lovász inside L_seg
  LossWeights loss_weights;

  // ablation arms
  bool incremental = true;  // relationship PLS consumes refined primitives
  bool use_reg = true;      // train with L_reg
  bool use_sort = true;     // top-t_i per-node selection vs plain thresholding

  int max_degree(int category) const {
    auto it = max_degree_map.find(category);
    return it == max_degree_map.end() ? default_max_degree : it->second;
  }

  void validate() const {
    if (nms_window < 1) throw BadInput("nms_window must be >= 1");
    if (dp_tolerance <= 0 || pair_distance_threshold <= 0 || interp_interval <= 0 ||
        gt_match_cap <= 0)
      throw BadInput("thresholds must be positive");
    if (connect_threshold <= 0 || connect_threshold >= 1)
      throw BadInput("connect_threshold must be in (0,1)");
    if (contour_level <= 0 || contour_level >= 1)
      throw BadInput("contour_level must be in (0,1)");
    if (max_primitives_train <= 0 || max_primitives_infer <= 0)
      throw BadInput("primitive caps must be positive");
    if (model_dim % heads != 0) throw BadInput("model_dim must be divisible by heads");
  }
};

}  // namespace pgmap
