#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <vector>

#include <pgmap/core.hpp>
#include <pgmap/geom.hpp>
#include <pgmap/tape.hpp>

// Training objectives. All losses are pure functions built on the reverse-mode
// tape; whatever selection logic they contain (matchings, sort orders) is
// decided from current values and held fixed during differentiation, which is
// exact almost everywhere for these piecewise-smooth objectives.

namespace pgmap {

namespace lossdetail {

// Mean negative log-probability of the labelled class, grouped by class so
// only selected entries pass through the log (probabilities of other classes
// may legitimately be zero).
inline ad::Value cross_entropy_rows(const ad::Value& probs,
                                    const std::vector<int>& labels) {
  const int m = probs.rows();
  const int s = probs.cols();
  if (m == 0) throw BadInput("cross entropy needs at least one row");
  if (static_cast<int>(labels.size()) != m)
    throw BadInput("cross entropy label count mismatch");
  std::vector<std::vector<int>> by_class(s);
  for (int i = 0; i < m; ++i) {
    if (labels[i] < 0 || labels[i] >= s) throw BadInput("label out of range");
    by_class[labels[i]].push_back(i);
  }
  ad::Value total;
  for (int c = 0; c < s; ++c) {
    if (by_class[c].empty()) continue;
    ad::Value sel = ad::gather_rows(ad::slice_cols(probs, c, 1), by_class[c]);
    ad::Value part = ad::sum_all(ad::log_(sel));
    total = total.tape ? ad::add(total, part) : part;
  }
  return ad::scale(total, -1.0 / m);
}

// Gradient of the Jaccard-loss Lovász extension at a point whose coordinates
// are sorted in decreasing order; gt_sorted is the ground-truth indicator in
// that same order.
inline Eigen::VectorXd lovasz_grad(const std::vector<char>& gt_sorted) {
  const int n = static_cast<int>(gt_sorted.size());
  double gts = 0;
  for (char g : gt_sorted) gts += g;
  Eigen::VectorXd jac(n);
  double inter = gts, uni = gts;
  for (int k = 0; k < n; ++k) {
    if (gt_sorted[k]) inter -= 1.0;
    else uni += 1.0;
    jac(k) = 1.0 - inter / uni;
  }
  for (int k = n - 1; k > 0; --k) jac(k) -= jac(k - 1);
  return jac;
}

}  // namespace lossdetail

// Flatten an image raster into one row of channel values per pixel
// (row-major pixel order), the layout the dense losses consume.
inline Eigen::MatrixXd flatten_probs(const Raster& r) {
  if (r.empty()) throw BadInput("empty raster");
  Eigen::MatrixXd m(r.h * r.w, r.c);
  for (int y = 0; y < r.h; ++y)
    for (int x = 0; x < r.w; ++x)
      for (int ch = 0; ch < r.c; ++ch) m(y * r.w + x, ch) = r.at(y, x, ch);
  return m;
}

// Integer class labels from one channel of a raster, one per pixel.
inline std::vector<int> flatten_labels(const Raster& r, int channel = 0) {
  if (r.empty()) throw BadInput("empty raster");
  if (channel < 0 || channel >= r.c) throw BadInput("label channel out of range");
  std::vector<int> out(static_cast<std::size_t>(r.h) * r.w);
  for (int y = 0; y < r.h; ++y)
    for (int x = 0; x < r.w; ++x)
      out[y * r.w + x] = static_cast<int>(std::lround(r.at(y, x, channel)));
  return out;
}

// Segmentation loss: cross entropy plus the Lovász-softmax term, the Lovász
// extension of the per-class Jaccard loss evaluated by the sorted-errors
// algorithm and averaged over classes present in the ground truth.
inline ad::Value loss_seg(const ad::Value& probs, const std::vector<int>& labels,
                          double lovasz_weight) {
  ad::Value ce = lossdetail::cross_entropy_rows(probs, labels);
  if (lovasz_weight == 0.0) return ce;
  const int m = probs.rows();
  const int s = probs.cols();
  ad::Tape& t = *probs.tape;
  ad::Value lov;
  int present = 0;
  for (int c = 0; c < s; ++c) {
    Eigen::VectorXd onehot = Eigen::VectorXd::Zero(m);
    for (int i = 0; i < m; ++i)
      if (labels[i] == c) onehot(i) = 1.0;
    if (onehot.sum() == 0.0) continue;
    ++present;
    // errors: 1 - p_c where gt is class c, p_c elsewhere (linear in p_c)
    ad::Value pc = ad::slice_cols(probs, c, 1);
    ad::Value errs = ad::add(t.leaf(onehot),
                             ad::hadamard(t.leaf((1.0 - 2.0 * onehot.array()).matrix()), pc));
    const Eigen::MatrixXd& ev = errs.val();
    std::vector<int> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return ev(a, 0) > ev(b, 0); });
    std::vector<char> gt_sorted(m);
    for (int k = 0; k < m; ++k) gt_sorted[k] = onehot(order[k]) > 0.5;
    Eigen::VectorXd g = lossdetail::lovasz_grad(gt_sorted);
    Eigen::VectorXd w(m);
    for (int k = 0; k < m; ++k) w(order[k]) = g(k);
    ad::Value term = ad::sum_all(ad::hadamard(errs, t.leaf(w)));
    lov = lov.tape ? ad::add(lov, term) : term;
  }
  if (present == 0) return ce;
  return ad::add(ce, ad::scale(lov, lovasz_weight / present));
}

// Key-point map loss: plain cross entropy.
inline ad::Value loss_kp(const ad::Value& probs, const std::vector<int>& labels) {
  return lossdetail::cross_entropy_rows(probs, labels);
}

namespace lossdetail {

// Vertex rows of a coordinate matrix: identity for points, stacked endpoint
// pairs for segments (vertex i and N+i belong to segment i).
inline ad::Value vertex_rows(const ad::Value& coords) {
  if (coords.cols() == 2) return coords;
  if (coords.cols() != 4) throw BadInput("coordinates must have 2 or 4 columns");
  return ad::concat_rows({ad::slice_cols(coords, 0, 2), ad::slice_cols(coords, 2, 2)});
}

// Closest point on a primitive's shape to p.
inline Vec2 closest_on_primitive(const Primitive& g, const Vec2& p) {
  if (g.kind == PrimitiveKind::Point) return g.position();
  return closest_point_on_segment(p, g.endpoint(0), g.endpoint(1));
}

}  // namespace lossdetail

// Bi-projection deformation loss: every ground-truth vertex is matched to its
// nearest predicted vertex, every predicted vertex left unmatched is projected
// onto the nearest point of the ground-truth shape, and the mean L2 distance
// over both stages is reported. Segments contribute their endpoint vertices.
inline ad::Value loss_off(const ad::Value& coords, const std::vector<Primitive>& gt) {
  if (gt.empty()) throw BadInput("deformation loss needs ground truth");
  if (coords.rows() == 0) throw BadInput("deformation loss needs predictions");
  ad::Tape& t = *coords.tape;
  ad::Value pv = lossdetail::vertex_rows(coords);
  const Eigen::MatrixXd& v = pv.val();
  const int m = pv.rows();

  std::vector<Vec2> gt_vertices;
  for (const auto& g : gt) {
    if (g.kind == PrimitiveKind::Point) {
      gt_vertices.push_back(g.position());
    } else {
      gt_vertices.push_back(g.endpoint(0));
      gt_vertices.push_back(g.endpoint(1));
    }
  }

  std::vector<int> match_idx;
  std::vector<Vec2> match_target;
  std::vector<char> matched(m, 0);
  for (const Vec2& gv : gt_vertices) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int u = 0; u < m; ++u) {
      const double d = (Vec2{v(u, 0), v(u, 1)} - gv).norm();
      if (d < best_d) {
        best_d = d;
        best = u;
      }
    }
    matched[best] = 1;
    match_idx.push_back(best);
    match_target.push_back(gv);
  }
  for (int u = 0; u < m; ++u) {
    if (matched[u]) continue;
    const Vec2 p{v(u, 0), v(u, 1)};
    Vec2 best_q{};
    double best_d = std::numeric_limits<double>::infinity();
    for (const auto& g : gt) {
      const Vec2 q = lossdetail::closest_on_primitive(g, p);
      const double d = (p - q).norm();
      if (d < best_d) {
        best_d = d;
        best_q = q;
      }
    }
    match_idx.push_back(u);
    match_target.push_back(best_q);
  }

  Eigen::MatrixXd targets(match_idx.size(), 2);
  for (std::size_t k = 0; k < match_target.size(); ++k)
    targets.row(k) << match_target[k].x, match_target[k].y;
  ad::Value diff = ad::sub(ad::gather_rows(pv, match_idx), t.leaf(targets));
  ad::Value d2 = ad::rowwise_sum(ad::hadamard(diff, diff));
  // tiny epsilon keeps sqrt differentiable when a match is exact
  return ad::mean_all(ad::sqrt_(ad::add_scalar(d2, 1e-18)));
}

// Direction loss: mean squared deviation between predicted and ground-truth
// surrogate direction rows.
inline ad::Value loss_dir(const ad::Value& dirs, const Eigen::MatrixXd& gt_dirs) {
  if (dirs.cols() != 2 || gt_dirs.cols() != 2)
    throw BadInput("direction rows must have 2 columns");
  if (dirs.rows() != gt_dirs.rows()) throw BadInput("direction count mismatch");
  if (dirs.rows() == 0) throw BadInput("direction loss needs at least one row");
  for (int i = 0; i < gt_dirs.rows(); ++i)
    if (std::fabs(gt_dirs.row(i).norm() - 1.0) > 1e-6)
      throw BadInput("ground-truth direction rows must be unit length");
  ad::Value d = ad::sub(dirs, dirs.tape->leaf(gt_dirs));
  return ad::scale(ad::sum_all(ad::hadamard(d, d)), 1.0 / dirs.rows());
}

// Relationship loss: cross entropy over the thresholded pair set. An empty
// pair set contributes nothing (a scene may genuinely have no nearby pairs).
inline ad::Value loss_rel(const ad::Value& pair_probs,
                          const std::vector<int>& labels) {
  if (!pair_probs.tape) throw BadInput("relationship loss needs a tape value");
  if (pair_probs.rows() == 0) {
    std::cerr << "warning: relationship loss over empty pair set\n";
    return pair_probs.tape->leaf(Eigen::MatrixXd::Zero(1, 1));
  }
  return lossdetail::cross_entropy_rows(pair_probs, labels);
}

enum class FPropMode { kSmooth, kQuantized };

// Direction-consistency kernel for one relation class: zero when the pair is
// unrelated, otherwise the cosine between doubled line directions — smooth by
// default; the quantized variant keeps the floor-division form for reference
// even though its gradient vanishes almost everywhere.
inline double f_prop(double dir_i, double dir_j, int r,
                     FPropMode mode = FPropMode::kSmooth) {
  if (r == 0) return 0.0;
  if (r != 1) throw BadInput("unknown relation class for direction consistency");
  const double d = dir_i - dir_j;
  if (mode == FPropMode::kSmooth) return std::cos(2.0 * d);
  return std::cos(2.0 * std::floor((d + 2.0 * kPi) / kPi));
}

// Shape regularization: for each candidate pair, penalize the deviation of the
// predicted pairwise direction consistency from its ground-truth value,
// weighted by the pair's relation-class probabilities and averaged over pairs.
// For surrogate rows S = (cos 2A, sin 2A), the smooth kernel is the dot
// product S_i . S_j = cos(2(A_i - A_j)); class 0 contributes nothing. The
// absolute deviation is Huber-smoothed (delta 1e-3) so the gradient is stable
// at zero error.
inline ad::Value loss_reg(const ad::Value& dirs, const Eigen::MatrixXd& gt_dirs,
                          const Eigen::MatrixXd& relation_probs,
                          const PairSet& pairs) {
  ad::Tape& t = *dirs.tape;
  if (dirs.cols() != 2 || gt_dirs.cols() != 2)
    throw BadInput("direction rows must have 2 columns");
  if (dirs.rows() != gt_dirs.rows()) throw BadInput("direction count mismatch");
  if (pairs.size() == 0) return t.leaf(Eigen::MatrixXd::Zero(1, 1));
  if (relation_probs.rows() != static_cast<int>(pairs.size()))
    throw BadInput("relation probability row per pair required");
  if (relation_probs.cols() != 2)
    throw BadInput("shape regularization supports 2 relation classes");
  std::vector<int> is, js;
  for (const auto& [i, j] : pairs.pairs) {
    if (i < 0 || j >= dirs.rows()) throw BadInput("pair index out of range");
    is.push_back(i);
    js.push_back(j);
  }
  ad::Value f = ad::rowwise_sum(
      ad::hadamard(ad::gather_rows(dirs, is), ad::gather_rows(dirs, js)));
  Eigen::VectorXd fbar(pairs.size());
  for (std::size_t k = 0; k < pairs.size(); ++k)
    fbar(k) = gt_dirs.row(pairs.pairs[k].first)
                  .dot(gt_dirs.row(pairs.pairs[k].second));
  ad::Value dev = ad::huber_(ad::sub(f, t.leaf(fbar)), 1e-3);
  ad::Value weighted = ad::hadamard(dev, t.leaf(relation_probs.col(1)));
  return ad::scale(ad::sum_all(weighted), 1.0 / static_cast<double>(pairs.size()));
}

// Auxiliary loss on the pre-attention heads: deformation plus weighted
// direction loss applied to the auxiliary predictions.
inline ad::Value loss_aux(const ad::Value& aux_coords,
                          const std::vector<Primitive>& gt,
                          const ad::Value& aux_dirs,
                          const Eigen::MatrixXd& gt_dirs, double dir_weight) {
  return ad::add(loss_off(aux_coords, gt),
                 ad::scale(loss_dir(aux_dirs, gt_dirs), dir_weight));
}

// Nearest-neighbour assignment of refined primitives to ground-truth
// primitives under a distance cap; many-to-one is allowed, -1 marks
// unassigned.
inline std::vector<int> match_gt(const std::vector<Primitive>& refined,
                                 const PrimitiveGraph& gt, double cap) {
  if (gt.size() == 0) throw BadInput("empty ground-truth graph");
  std::vector<int> assign(refined.size(), -1);
  for (std::size_t i = 0; i < refined.size(); ++i) {
    double best_d = std::numeric_limits<double>::infinity();
    int best = -1;
    for (int g = 0; g < gt.size(); ++g) {
      const double d = primitive_distance(refined[i], gt.primitives[g]);
      if (d < best_d) {
        best_d = d;
        best = g;
      }
    }
    if (best_d <= cap) assign[i] = best;
  }
  return assign;
}

// Relationship label for each candidate pair from a GT assignment: the GT
// relation of the assigned primitives, or 0 when either side is unassigned
// (co-assigned pairs land on the zero diagonal).
inline std::vector<int> pair_labels(const std::vector<int>& assignment,
                                    const PrimitiveGraph& gt,
                                    const PairSet& pairs) {
  std::vector<int> labels(pairs.size(), 0);
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto [i, j] = pairs.pairs[k];
    if (i < 0 || j < 0 || i >= static_cast<int>(assignment.size()) ||
        j >= static_cast<int>(assignment.size()))
      throw BadInput("pair index out of range");
    const int ai = assignment[i], aj = assignment[j];
    if (ai < 0 || aj < 0) continue;
    labels[k] = gt.relations(ai, aj);
  }
  return labels;
}

// Per-term scalar record of one training step; total is the configured linear
// combination.
struct LossBreakdown {
  double seg = 0, kp = 0, off = 0, dir = 0, rel = 0, reg = 0, aux = 0;
  double total = 0;

  void finalize(const LossWeights& w) {
    total = w.seg * seg + w.kp * kp + w.off * off + w.dir * dir + w.rel * rel +
            w.reg * reg + w.aux * aux;
  }
};

}  // namespace pgmap
