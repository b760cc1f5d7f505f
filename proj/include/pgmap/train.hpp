#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <pgmap/core.hpp>
#include <pgmap/decode.hpp>
#include <pgmap/losses.hpp>
#include <pgmap/pls.hpp>
#include <pgmap/rng.hpp>
#include <pgmap/sampling.hpp>
#include <pgmap/synthgen.hpp>
#include <pgmap/tape.hpp>

// Optimization loop: Adam over the parameter store, per-scene loss assembly
// on fresh tapes, and the staged schedule that trains refinement alone before
// switching the relationship stage on. Scenes are preprocessed once into
// SceneSamples so every step only pays for the forward/backward passes.

namespace pgmap {

using GradMap = std::map<std::string, Eigen::MatrixXd>;

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Moment accumulators keyed by tensor name. Steps are counted per tensor so
// bias correction stays exact for tensors that join the optimization late.
struct AdamState {
  std::map<std::string, Eigen::MatrixXd> m, v;
  std::map<std::string, long> steps;
};

inline void adam_update(ParamStore& params, const GradMap& grads,
                        const AdamConfig& opt, AdamState& state) {
  for (const auto& [name, g] : grads) {
    if (!params.has(name)) throw BadInput("gradient for unknown tensor " + name);
    Eigen::MatrixXd& w = params.tensors.at(name);
    if (g.rows() != w.rows() || g.cols() != w.cols())
      throw BadInput("gradient shape mismatch for " + name);
    Eigen::MatrixXd& m = state.m[name];
    Eigen::MatrixXd& v = state.v[name];
    if (m.size() == 0) m = Eigen::MatrixXd::Zero(w.rows(), w.cols());
    if (v.size() == 0) v = Eigen::MatrixXd::Zero(w.rows(), w.cols());
    const long t = ++state.steps[name];
    m = opt.beta1 * m + (1.0 - opt.beta1) * g;
    v = opt.beta2 * v + (1.0 - opt.beta2) * g.cwiseProduct(g).eval();
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(t));
    w.array() -= opt.lr * (m.array() / bc1) /
                 ((v.array() / bc2).sqrt() + opt.eps);
  }
}

// ---------------------------------------------------------------------------
// Scene preprocessing

// One attention group of a sample. Roads use a single group over every
// sampled point; buildings train one traced contour at a time, exactly the
// grouping inference uses, so a building never attends to its neighbours.
struct SampleGroup {
  std::vector<int> members;          // indices into SceneSample::sampled
  Eigen::MatrixXd coords;            // member rows of the sampled coordinates
  std::vector<Primitive> gt_prims;   // deformation targets for this group
  Eigen::MatrixXd gt_dirs;           // per-member unit direction surrogates
};

// Fixed per-scene training inputs. The probability rasters are inputs rather
// than the output of trainable parameters, so their losses are constants of
// the scene and get evaluated once here.
struct SceneSample {
  Task task = Task::kRoad;
  PrimitiveKind kind = PrimitiveKind::Point;
  RasterBundle bundle;
  PrimitiveGraph gt;
  std::vector<Primitive> sampled;
  std::vector<SampleGroup> groups;
  double seg_term = 0.0;
  double kp_term = 0.0;
  int trained_members = 0;

  bool usable() const { return trained_members > 0; }
};

namespace traindetail {

inline std::vector<Primitive> with_coords(const std::vector<Primitive>& base,
                                          const Eigen::MatrixXd& coords) {
  std::vector<Primitive> out = base;
  const int d = coords.cols();
  for (int i = 0; i < coords.rows(); ++i)
    for (int c = 0; c < d; ++c) out[i].coords[c] = coords(i, c);
  return out;
}

// Evaluate a dense raster loss once, off any training tape. Probabilities are
// clamped away from zero so hard-0 pixels under a mismatched label stay
// finite.
inline double const_raster_ce(const Raster& r, const std::vector<int>& labels,
                              double lovasz_weight) {
  ad::Tape tape;
  ad::Value probs = tape.leaf(flatten_probs(r).cwiseMax(1e-6));
  ad::Value loss = lovasz_weight > 0 ? loss_seg(probs, labels, lovasz_weight)
                                     : loss_kp(probs, labels);
  return loss.val()(0, 0);
}

// Geometry-derived per-pixel class labels. Roads label pixels out to the
// half-response distance of the rendered buffer profile; buildings label by
// ring membership at the pixel centre.
inline std::vector<int> seg_labels(const Scene& sc) {
  const int h = sc.bundle.seg.h, w = sc.bundle.seg.w;
  std::vector<int> labels(static_cast<std::size_t>(h) * w, 0);
  if (sc.task == Task::kRoad) {
    std::vector<std::pair<Vec2, Vec2>> edges;
    for (const auto& [a, b] : sc.gt_road.edges)
      edges.push_back({sc.gt_road.nodes[a], sc.gt_road.nodes[b]});
    if (edges.empty()) return labels;
    const double half =
        0.5 * (synthdetail::kRoadCore + synthdetail::kRoadHalfWidth);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (synthdetail::dist_to_segments(
                edges, {static_cast<double>(x), static_cast<double>(y)}) <= half)
          labels[y * w + x] = 1;
    return labels;
  }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (const auto& poly : sc.gt_polygons)
        if (point_in_ring(poly.ring,
                          {static_cast<double>(x), static_cast<double>(y)})) {
          labels[y * w + x] = 1;
          break;
        }
  return labels;
}

// Keypoint labels: the pixel nearest each ground-truth vertex carries its
// category, everything else is background.
inline std::vector<int> kp_labels(const Scene& sc) {
  const int h = sc.bundle.kp.h, w = sc.bundle.kp.w;
  const int channels = sc.bundle.kp.c;
  std::vector<int> labels(static_cast<std::size_t>(h) * w, 0);
  auto mark = [&](const Vec2& p, int category) {
    const int x = static_cast<int>(std::lround(p.x));
    const int y = static_cast<int>(std::lround(p.y));
    if (x < 0 || x >= w || y < 0 || y >= h) return;
    if (category <= 0 || category >= channels) return;
    labels[y * w + x] = category;
  };
  for (const auto& prim : sc.gt.primitives) {
    if (prim.kind == PrimitiveKind::Point) {
      mark(prim.position(), prim.category);
    } else {
      mark(prim.endpoint(0), kCorner);
    }
  }
  return labels;
}

// Unit surrogate of the local ground-truth orientation at a sampled
// primitive: the nearest ground-truth edge for points, the nearest
// ground-truth segment for segments.
inline Eigen::MatrixXd direction_targets(const std::vector<Primitive>& prims,
                                         const std::vector<Primitive>& gt_prims,
                                         const RoadGraph& gt_road) {
  Eigen::MatrixXd out(static_cast<int>(prims.size()), 2);
  for (std::size_t i = 0; i < prims.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    double angle = 0.0;
    if (prims[i].kind == PrimitiveKind::Point) {
      const Vec2 p = prims[i].position();
      for (const auto& [a, b] : gt_road.edges) {
        const Vec2 va = gt_road.nodes[a], vb = gt_road.nodes[b];
        const double d = dist_point_segment(p, va, vb);
        if (d < best) {
          best = d;
          angle = fold_angle_pi(std::atan2(vb.y - va.y, vb.x - va.x));
        }
      }
    } else {
      for (const auto& g : gt_prims) {
        const double d = primitive_distance(prims[i], g);
        if (d < best) {
          best = d;
          angle = segment_direction(g);
        }
      }
    }
    const Vec2 s = surrogate_of(angle);
    out(i, 0) = s.x;
    out(i, 1) = s.y;
  }
  return out;
}

inline Eigen::MatrixXd coords_of(const std::vector<Primitive>& prims, int d) {
  Eigen::MatrixXd m(static_cast<int>(prims.size()), d);
  for (std::size_t i = 0; i < prims.size(); ++i)
    for (int c = 0; c < d; ++c) m(static_cast<int>(i), c) = prims[i].coords[c];
  return m;
}

}  // namespace traindetail

// Preprocess one generated scene into its fixed training inputs. Building
// groups are tied to the ground-truth contour the majority of their members
// match; groups matching nothing are left out of the loss.
inline SceneSample prepare_sample(const Scene& sc, const PipelineConfig& cfg) {
  SceneSample s;
  s.task = sc.task;
  s.kind = sc.task == Task::kRoad ? PrimitiveKind::Point : PrimitiveKind::LineSegment;
  s.bundle = sc.bundle;
  s.gt = sc.gt;
  s.seg_term = traindetail::const_raster_ce(sc.bundle.seg,
                                            traindetail::seg_labels(sc),
                                            cfg.lovasz_weight);
  s.kp_term = traindetail::const_raster_ce(sc.bundle.kp,
                                           traindetail::kp_labels(sc), 0.0);
  if (sc.gt.size() == 0) return s;

  PrimitiveGraph sampled =
      sc.task == Task::kRoad
          ? sample_road_points(sc.bundle, cfg, cfg.max_primitives_train)
          : sample_building_segments(sc.bundle, cfg, cfg.max_primitives_train);
  s.sampled = sampled.primitives;
  if (s.sampled.empty()) return s;
  const int d = s.kind == PrimitiveKind::Point ? 2 : 4;

  if (sc.task == Task::kRoad) {
    SampleGroup g;
    g.members.resize(s.sampled.size());
    for (std::size_t i = 0; i < s.sampled.size(); ++i) g.members[i] = static_cast<int>(i);
    g.coords = traindetail::coords_of(s.sampled, d);
    g.gt_prims = sc.gt.primitives;
    g.gt_dirs = traindetail::direction_targets(s.sampled, sc.gt.primitives, sc.gt_road);
    s.trained_members = static_cast<int>(g.members.size());
    s.groups.push_back(std::move(g));
    return s;
  }

  for (const auto& members : group_by_contour(s.sampled)) {
    std::vector<Primitive> prims;
    for (int k : members) prims.push_back(s.sampled[k]);
    const std::vector<int> assign = match_gt(prims, sc.gt, cfg.gt_match_cap);
    std::map<int, int> votes;
    for (int a : assign)
      if (a >= 0) ++votes[sc.gt.primitives[a].contour_id];
    if (votes.empty()) continue;  // spurious contour, nothing to train against
    int best_contour = votes.begin()->first;
    for (const auto& [cid, n] : votes)
      if (n > votes[best_contour]) best_contour = cid;
    SampleGroup g;
    g.members = members;
    g.coords = traindetail::coords_of(prims, d);
    for (const auto& gp : sc.gt.primitives)
      if (gp.contour_id == best_contour) g.gt_prims.push_back(gp);
    g.gt_dirs = traindetail::direction_targets(prims, g.gt_prims, sc.gt_road);
    s.trained_members += static_cast<int>(g.members.size());
    s.groups.push_back(std::move(g));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Per-scene loss

struct SceneLossResult {
  LossBreakdown breakdown;
  GradMap grads;
};

// Assemble the training objective for one scene on a fresh tape and
// backpropagate. Groups are weighted by their share of trained primitives.
// stage2 switches the relationship stage (and its rel/reg terms) on; terms
// with zero weight are evaluated for reporting but kept out of the gradient.
inline SceneLossResult scene_loss(const ParamStore& params, const SceneSample& s,
                                  const PipelineConfig& cfg, bool stage2,
                                  bool want_grads = true) {
  if (!s.usable()) throw BadInput("scene sample has no trainable primitives");
  const LossWeights& w = cfg.loss_weights;
  ad::Tape tape;
  ParamMap pm = lift(tape, params);

  ad::Value total;
  auto accumulate = [&](const ad::Value& term, double k) {
    if (k == 0.0) return;
    ad::Value scaled = ad::scale(term, k);
    total = total.tape ? ad::add(total, scaled) : scaled;
  };

  SceneLossResult out;
  out.breakdown.seg = s.seg_term;
  out.breakdown.kp = s.kp_term;
  for (const auto& g : s.groups) {
    const double share =
        static_cast<double>(g.members.size()) / s.trained_members;
    ad::Value coords_v = tape.leaf(g.coords);
    RefineOut ref = forward_refine(tape, pm, s.bundle, coords_v, s.kind, cfg);

    ad::Value off_t = loss_off(ref.refined, g.gt_prims);
    ad::Value dir_t = loss_dir(ref.dirs, g.gt_dirs);
    ad::Value aux_t = loss_aux(ad::add(coords_v, ref.aux_off), g.gt_prims,
                               ref.aux_dirs, g.gt_dirs, cfg.aux_dir_weight);
    out.breakdown.off += share * off_t.val()(0, 0);
    out.breakdown.dir += share * dir_t.val()(0, 0);
    out.breakdown.aux += share * aux_t.val()(0, 0);
    accumulate(off_t, share * w.off);
    accumulate(dir_t, share * w.dir);
    accumulate(aux_t, share * w.aux);

    if (!stage2) continue;
    ad::Value relate_coords = cfg.incremental ? ref.refined : coords_v;
    std::vector<Primitive> relate_prims;
    for (int k : g.members) relate_prims.push_back(s.sampled[k]);
    relate_prims = traindetail::with_coords(relate_prims, relate_coords.val());
    PairSet pairs = build_pairs(relate_prims, cfg.pair_distance_threshold);
    if (pairs.size() == 0) continue;
    RelateOut rel =
        forward_relate(tape, pm, s.bundle, relate_coords, s.kind, pairs, cfg);
    const std::vector<int> assign = match_gt(relate_prims, s.gt, cfg.gt_match_cap);
    const std::vector<int> labels = pair_labels(assign, s.gt, pairs);
    ad::Value rel_t = loss_rel(rel.pair_probs, labels);
    out.breakdown.rel += share * rel_t.val()(0, 0);
    accumulate(rel_t, share * w.rel);
    if (cfg.use_reg) {
      ad::Value reg_t =
          loss_reg(ref.dirs, g.gt_dirs, rel.pair_probs.val(), pairs);
      out.breakdown.reg += share * reg_t.val()(0, 0);
      accumulate(reg_t, share * w.reg);
    }
  }

  out.breakdown.finalize(w);
  if (!std::isfinite(out.breakdown.total)) {
    std::ostringstream msg;
    msg << "non-finite training loss: seg=" << out.breakdown.seg
        << " kp=" << out.breakdown.kp << " off=" << out.breakdown.off
        << " dir=" << out.breakdown.dir << " rel=" << out.breakdown.rel
        << " reg=" << out.breakdown.reg << " aux=" << out.breakdown.aux;
    throw NumericError(msg.str());
  }
  if (want_grads && total.tape) {
    tape.backward(total);
    for (const auto& [name, leaf] : pm) out.grads[name] = leaf.grad();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainRow {
  int step = 0;
  LossBreakdown loss;  // batch means
};

// The portion of the weighted total the optimizer can actually move: the
// dense raster terms are constants of the input maps, so convergence gates
// read the total without them.
inline double trainable_total(const LossBreakdown& b, const LossWeights& w) {
  return b.total - w.seg * b.seg - w.kp * b.kp;
}

// First step index at which the relationship stage participates: incremental
// runs spend the leading fraction of the schedule on refinement alone.
inline int stage_split_step(const PipelineConfig& cfg, int steps) {
  if (!cfg.incremental) return 0;
  return static_cast<int>(std::floor(cfg.stage_fraction * steps));
}

// One optimizer step over a batch of samples. Forward/backward passes run on
// per-scene tapes (optionally across threads); gradients are reduced in batch
// order so the result is independent of the thread count.
inline LossBreakdown train_step(ParamStore& params, AdamState& adam,
                                const AdamConfig& opt,
                                const std::vector<const SceneSample*>& batch,
                                const PipelineConfig& cfg, bool stage2,
                                const std::string& tensor_prefix = "",
                                int threads = 1) {
  if (batch.empty()) throw BadInput("empty training batch");
  const int n = static_cast<int>(batch.size());
  std::vector<SceneLossResult> results(n);
  std::vector<std::exception_ptr> errors(n);
  auto run = [&](int i) {
    try {
      results[i] = scene_loss(params, *batch[i], cfg, stage2);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const int workers = std::max(1, std::min(threads, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) run(i);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t)
      pool.emplace_back([&, t] {
        for (int i = t; i < n; i += workers) run(i);
      });
    for (auto& t : pool) t.join();
  }
  for (int i = 0; i < n; ++i)
    if (errors[i]) std::rethrow_exception(errors[i]);

  LossBreakdown mean;
  GradMap grads;
  for (int i = 0; i < n; ++i) {
    const LossBreakdown& b = results[i].breakdown;
    mean.seg += b.seg / n;
    mean.kp += b.kp / n;
    mean.off += b.off / n;
    mean.dir += b.dir / n;
    mean.rel += b.rel / n;
    mean.reg += b.reg / n;
    mean.aux += b.aux / n;
    for (const auto& [name, g] : results[i].grads) {
      if (!tensor_prefix.empty() && name.rfind(tensor_prefix, 0) != 0) continue;
      auto it = grads.find(name);
      if (it == grads.end())
        grads[name] = g / n;
      else
        it->second += g / n;
    }
  }
  mean.finalize(cfg.loss_weights);
  adam_update(params, grads, opt, adam);
  return mean;
}

struct TrainOptions {
  int steps = 1000;
  std::uint64_t seed = 7;
  int threads = 1;
};

// Full schedule: batches drawn with replacement from the usable samples,
// refinement-only warmup when incremental mode is on, then joint training.
inline std::vector<TrainRow> train_run(ParamStore& params,
                                       const std::vector<SceneSample>& data,
                                       const PipelineConfig& cfg,
                                       const TrainOptions& opt) {
  std::vector<const SceneSample*> usable;
  for (const auto& s : data)
    if (s.usable()) usable.push_back(&s);
  if (usable.empty()) throw BadInput("no trainable scenes");

  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.learning_rate;
  AdamState adam;
  Rng rng(opt.seed);
  const int split = stage_split_step(cfg, opt.steps);
  std::vector<TrainRow> rows;
  rows.reserve(opt.steps);
  for (int step = 0; step < opt.steps; ++step) {
    const bool stage2 = step >= split;
    std::vector<const SceneSample*> batch;
    for (int b = 0; b < cfg.batch_size; ++b)
      batch.push_back(usable[rng.uniform_int(static_cast<std::uint64_t>(usable.size()))]);
    try {
      TrainRow row;
      row.step = step;
      row.loss = train_step(params, adam, adam_cfg, batch, cfg, stage2,
                            stage2 ? "" : "refine.", opt.threads);
      rows.push_back(row);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(step) + ": " + e.what());
    }
  }
  return rows;
}

// Per-step loss curve in CSV form, one column per term.
inline void write_loss_csv(const std::string& path,
                           const std::vector<TrainRow>& rows,
                           const LossWeights& w = LossWeights{}) {
  std::ofstream out(path);
  if (!out) throw BadInput("cannot write " + path);
  out << "step,seg,kp,off,dir,rel,reg,aux,total,trainable\n";
  for (const auto& r : rows)
    out << r.step << ',' << r.loss.seg << ',' << r.loss.kp << ',' << r.loss.off
        << ',' << r.loss.dir << ',' << r.loss.rel << ',' << r.loss.reg << ','
        << r.loss.aux << ',' << r.loss.total << ','
        << trainable_total(r.loss, w) << '\n';
}

// ---------------------------------------------------------------------------
// Evaluation helpers

// Matched-vertex error before and after refinement. The assignment is made
// from the sampled positions and held fixed so both numbers describe the same
// primitive pairs.
struct RefineEval {
  double initial = 0.0;
  double refined = 0.0;
  int matched = 0;
};

namespace traindetail {

inline double vertex_error(const Primitive& a, const Primitive& b) {
  if (a.kind == PrimitiveKind::Point) return distance(a.position(), b.position());
  const double straight = 0.5 * (distance(a.endpoint(0), b.endpoint(0)) +
                                 distance(a.endpoint(1), b.endpoint(1)));
  const double flipped = 0.5 * (distance(a.endpoint(0), b.endpoint(1)) +
                                distance(a.endpoint(1), b.endpoint(0)));
  return std::min(straight, flipped);
}

}  // namespace traindetail

inline RefineEval eval_refinement(const ParamStore& params, const SceneSample& s,
                                  const PipelineConfig& cfg) {
  RefineEval ev;
  double init_sum = 0, ref_sum = 0;
  for (const auto& g : s.groups) {
    ad::Tape tape;
    ParamMap pm = lift(tape, params);
    RefineOut ref = forward_refine(tape, pm, s.bundle, tape.leaf(g.coords),
                                   s.kind, cfg);
    std::vector<Primitive> initial;
    for (int k : g.members) initial.push_back(s.sampled[k]);
    const std::vector<Primitive> refined =
        traindetail::with_coords(initial, ref.refined.val());
    const std::vector<int> assign = match_gt(initial, s.gt, cfg.gt_match_cap);
    for (std::size_t i = 0; i < initial.size(); ++i) {
      if (assign[i] < 0) continue;
      const Primitive& gt = s.gt.primitives[assign[i]];
      init_sum += traindetail::vertex_error(initial[i], gt);
      ref_sum += traindetail::vertex_error(refined[i], gt);
      ++ev.matched;
    }
  }
  if (ev.matched > 0) {
    ev.initial = init_sum / ev.matched;
    ev.refined = ref_sum / ev.matched;
  }
  return ev;
}

// Relationship-classification accuracy over the candidate pairs the model
// actually scores, labelled through the same matching used in training.
struct RelationEval {
  int correct = 0;
  int total = 0;
  double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / total; }
};

inline RelationEval eval_relations(const ParamStore& params, const SceneSample& s,
                                   const PipelineConfig& cfg) {
  RelationEval ev;
  for (const auto& g : s.groups) {
    ad::Tape tape;
    ParamMap pm = lift(tape, params);
    ad::Value coords_v = tape.leaf(g.coords);
    RefineOut ref = forward_refine(tape, pm, s.bundle, coords_v, s.kind, cfg);
    ad::Value relate_coords = cfg.incremental ? ref.refined : coords_v;
    std::vector<Primitive> prims;
    for (int k : g.members) prims.push_back(s.sampled[k]);
    prims = traindetail::with_coords(prims, relate_coords.val());
    PairSet pairs = build_pairs(prims, cfg.pair_distance_threshold);
    if (pairs.size() == 0) continue;
    RelateOut rel =
        forward_relate(tape, pm, s.bundle, relate_coords, s.kind, pairs, cfg);
    const std::vector<int> assign = match_gt(prims, s.gt, cfg.gt_match_cap);
    const std::vector<int> labels = pair_labels(assign, s.gt, pairs);
    const Eigen::MatrixXd probs = rel.pair_probs.val();
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      const int pred = probs(static_cast<int>(k), 1) > probs(static_cast<int>(k), 0) ? 1 : 0;
      if (pred == labels[k]) ++ev.correct;
      ++ev.total;
    }
  }
  return ev;
}

}  // namespace pgmap
