#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "pgmap/core.hpp"
#include "pgmap/rng.hpp"
#include "pgmap/tape.hpp"

// Primitive Learning Structure: patch pooling over the feature raster, a
// projection MLP, fixed positional encoding, a pre-LN multi-head attention
// stack, and task heads. Two independently parameterized instances are used in
// sequence: "refine." predicts coordinate offsets and directions, "relate."
// consumes the refined primitives and classifies pairwise relationships.
namespace pgmap {

using Eigen::MatrixXd;

// ---- parameters ----

struct ParamStore {
  std::map<std::string, MatrixXd> tensors;  // ordered: deterministic iteration

  MatrixXd& operator[](const std::string& name) { return tensors[name]; }
  const MatrixXd& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw BadInput("unknown parameter tensor: " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return tensors.count(name) != 0; }

  void validate() const {
    for (const auto& [name, m] : tensors)
      if (!m.allFinite()) throw BadInput("non-finite parameter tensor: " + name);
  }
};

using ParamMap = std::map<std::string, ad::Value>;

inline ParamMap lift(ad::Tape& tape, const ParamStore& store) {
  ParamMap out;
  for (const auto& [name, m] : store.tensors) out.emplace(name, tape.leaf(m));
  return out;
}

namespace plsdetail {

inline const ad::Value& P(const ParamMap& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw BadInput("unknown parameter tensor: " + name);
  return it->second;
}

inline ad::Value linear(const ParamMap& params, const ad::Value& x, const std::string& w,
                        const std::string& b) {
  return ad::add_rowvec(ad::matmul(x, P(params, w)), P(params, b));
}

inline ad::Value layernorm_affine(const ParamMap& params, const ad::Value& x,
                                  const std::string& prefix) {
  return ad::add_rowvec(
      ad::mul_rowvec(ad::layernorm_rows(x), P(params, prefix + ".gain")),
      P(params, prefix + ".bias"));
}

}  // namespace plsdetail

// Fan-in uniform init for one PLS instance under `prefix` ("refine"/"relate").
// `pool_in` is the flattened patch width, `head_dim` the coordinate dimension
// (2 for points, 4 for segments); `pair_in` > 0 adds the relationship head.
inline void init_pls_instance(ParamStore& store, const std::string& prefix, Rng& rng,
                              const PipelineConfig& cfg, int pool_in, int head_dim,
                              int pair_in, int relation_classes) {
  const int d = cfg.model_dim;
  const int ffn = 2 * d;
  auto mat = [&](const std::string& name, int rows, int cols) {
    const double s = 1.0 / std::sqrt(static_cast<double>(rows));
    MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) m(r, c) = rng.uniform(-s, s);
    store[prefix + "." + name] = std::move(m);
  };
  auto zeros = [&](const std::string& name, int cols) {
    store[prefix + "." + name] = MatrixXd::Zero(1, cols);
  };
  auto ones = [&](const std::string& name, int cols) {
    store[prefix + "." + name] = MatrixXd::Ones(1, cols);
  };

  mat("pool.W", pool_in, d);
  zeros("pool.b", d);
  mat("proj.W1", d, d);
  zeros("proj.b1", d);
  mat("proj.W2", d, d);
  zeros("proj.b2", d);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string L = "layer" + std::to_string(l);
    ones(L + ".ln1.gain", d);
    zeros(L + ".ln1.bias", d);
    for (const char* w : {"Wq", "Wk", "Wv", "Wo"}) mat(L + ".attn." + w, d, d);
    for (const char* b : {"bq", "bk", "bv", "bo"}) zeros(L + ".attn." + b, d);
    ones(L + ".ln2.gain", d);
    zeros(L + ".ln2.bias", d);
    mat(L + ".ffn.W1", d, ffn);
    zeros(L + ".ffn.b1", ffn);
    mat(L + ".ffn.W2", ffn, d);
    zeros(L + ".ffn.b2", d);
  }
  ones("final_ln.gain", d);
  zeros("final_ln.bias", d);

  if (pair_in > 0) {
    mat("head.rel.W1", pair_in, d);
    zeros("head.rel.b1", d);
    mat("head.rel.W2", d, relation_classes);
    zeros("head.rel.b2", relation_classes);
  } else {
    mat("head.off.W", d, head_dim);
    zeros("head.off.b", head_dim);
    mat("head.dir.W", d, 2);
    zeros("head.dir.b", 2);
    mat("head.aux_off.W", d, head_dim);
    zeros("head.aux_off.b", head_dim);
    mat("head.aux_dir.W", d, 2);
    zeros("head.aux_dir.b", 2);
  }
}

inline int pool_input_width(PrimitiveKind kind, int patch_size, int feat_channels) {
  const int per_anchor = patch_size * patch_size * feat_channels;
  return kind == PrimitiveKind::Point ? per_anchor : 3 * per_anchor;
}

inline int loi_feature_width(const RasterBundle& b, int loi_samples) {
  return loi_samples * (b.features.c + b.seg.c + b.kp.c);
}

// Both PLS instances for one task.
inline ParamStore init_pls_params(const PipelineConfig& cfg, PrimitiveKind kind,
                                  const RasterBundle& proto, int relation_classes,
                                  std::uint64_t seed) {
  ParamStore store;
  Rng rng(seed);
  const int head_dim = kind == PrimitiveKind::Point ? 2 : 4;
  const int pool_in = pool_input_width(kind, cfg.patch_size, proto.features.c);
  init_pls_instance(store, "refine", rng, cfg, pool_in, head_dim, 0, relation_classes);
  const int pair_in = 2 * cfg.model_dim + (kind == PrimitiveKind::Point
                                               ? loi_feature_width(proto, cfg.loi_samples)
                                               : 0);
  init_pls_instance(store, "relate", rng, cfg, pool_in, head_dim, pair_in,
                    relation_classes);
  return store;
}

// ---- positional encoding ----

// coords01 is N x d with entries normalized to [0,1]. Each coordinate gets
// d_m/(2d) geometric frequencies in [pi, 100*pi]; output layout is
// [sin(args) | cos(args)] with args grouped coordinate-major. Frequencies are
// kept modest so finite-difference checks through the encoding stay accurate.
inline MatrixXd posenc_frequency_matrix(int d, int d_m) {
  if (d_m % (2 * d) != 0) throw BadInput("model_dim must be divisible by 2*coord_dim");
  const int F = d_m / (2 * d);
  MatrixXd omega = MatrixXd::Zero(d, d * F);
  for (int c = 0; c < d; ++c)
    for (int k = 0; k < F; ++k) {
      const double t = F > 1 ? static_cast<double>(k) / (F - 1) : 0.0;
      omega(c, c * F + k) = kPi * std::pow(100.0, t);
    }
  return omega;
}

inline ad::Value positional_encode(ad::Tape& tape, const ad::Value& coords01, int d_m) {
  const int d = coords01.cols();
  auto omega = tape.leaf(posenc_frequency_matrix(d, d_m));
  auto args = ad::matmul(coords01, omega);  // N x d_m/2
  return ad::concat_cols({ad::sin_(args), ad::cos_(args)});
}

// Non-tape convenience for tests.
inline MatrixXd positional_encode_values(const MatrixXd& coords01, int d_m) {
  ad::Tape tape;
  return positional_encode(tape, tape.leaf(coords01), d_m).val();
}

// ---- encoder ----

struct EncodeOut {
  ad::Value h_vis;    // N x d_m pooled + compressed visual features
  ad::Value h_prims;  // N x d_m contextualized features
  std::vector<std::vector<MatrixXd>> attention;  // [layer][head], rows sum to 1
};

namespace plsdetail {

// P x P unit-spaced bilinear crop around each position, flattened channel-
// minor; positions outside the raster zero-pad.
inline ad::Value crop_patch(ad::Tape& tape, const ad::Value& positions, const Raster* raster,
                            int patch_size) {
  std::vector<int> channels(raster->c);
  for (int i = 0; i < raster->c; ++i) channels[i] = i;
  const int r = patch_size / 2;
  std::vector<ad::Value> parts;
  parts.reserve(patch_size * patch_size);
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      MatrixXd off(1, 2);
      off << static_cast<double>(dx), static_cast<double>(dy);
      auto shifted = ad::add_rowvec(positions, tape.leaf(off));
      parts.push_back(ad::bilinear_sample(shifted, raster, channels));
    }
  return ad::concat_cols(parts);
}

}  // namespace plsdetail

// Visual feature of each primitive: patch crop at the point (or at both
// endpoints and the midpoint for segments), compressed to d_m.
inline ad::Value patch_pool(ad::Tape& tape, const ParamMap& params, const std::string& prefix,
                            const RasterBundle& bundle, const ad::Value& coords,
                            PrimitiveKind kind, const PipelineConfig& cfg) {
  ad::Value flat;
  if (kind == PrimitiveKind::Point) {
    flat = plsdetail::crop_patch(tape, coords, &bundle.features, cfg.patch_size);
  } else {
    auto e0 = ad::slice_cols(coords, 0, 2);
    auto e1 = ad::slice_cols(coords, 2, 2);
    auto mid = ad::scale(ad::add(e0, e1), 0.5);
    flat = ad::concat_cols({plsdetail::crop_patch(tape, e0, &bundle.features, cfg.patch_size),
                            plsdetail::crop_patch(tape, e1, &bundle.features, cfg.patch_size),
                            plsdetail::crop_patch(tape, mid, &bundle.features, cfg.patch_size)});
  }
  return ad::tanh_(plsdetail::linear(params, flat, prefix + ".pool.W", prefix + ".pool.b"));
}

inline EncodeOut pls_encode(ad::Tape& tape, const ParamMap& params, const std::string& prefix,
                            const RasterBundle& bundle, const ad::Value& coords,
                            PrimitiveKind kind, const PipelineConfig& cfg) {
  using plsdetail::layernorm_affine;
  using plsdetail::linear;
  EncodeOut out;
  out.h_vis = patch_pool(tape, params, prefix, bundle, coords, kind, cfg);

  // f_proj: two-layer MLP on the pooled features
  auto h1 = ad::tanh_(linear(params, out.h_vis, prefix + ".proj.W1", prefix + ".proj.b1"));
  auto h = linear(params, h1, prefix + ".proj.W2", prefix + ".proj.b2");

  // positional encoding of [0,1]-normalized coordinates
  const int d = coords.cols();
  MatrixXd norm(1, d);
  for (int c = 0; c < d; ++c)
    norm(0, c) = 1.0 / (c % 2 == 0 ? std::max(bundle.width(), 1)
                                   : std::max(bundle.height(), 1));
  auto coords01 = ad::mul_rowvec(coords, tape.leaf(norm));
  auto x = ad::add(h, positional_encode(tape, coords01, cfg.model_dim));

  const int dk = cfg.model_dim / cfg.heads;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string L = prefix + ".layer" + std::to_string(l);
    auto u = layernorm_affine(params, x, L + ".ln1");
    auto q = linear(params, u, L + ".attn.Wq", L + ".attn.bq");
    auto k = linear(params, u, L + ".attn.Wk", L + ".attn.bk");
    auto v = linear(params, u, L + ".attn.Wv", L + ".attn.bv");
    std::vector<ad::Value> heads;
    std::vector<MatrixXd> layer_attn;
    heads.reserve(cfg.heads);
    for (int hh = 0; hh < cfg.heads; ++hh) {
      auto qh = ad::slice_cols(q, hh * dk, dk);
      auto kh = ad::slice_cols(k, hh * dk, dk);
      auto vh = ad::slice_cols(v, hh * dk, dk);
      auto attn = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt_dk));
      layer_attn.push_back(attn.val());
      heads.push_back(ad::matmul(attn, vh));
    }
    out.attention.push_back(std::move(layer_attn));
    auto o = linear(params, ad::concat_cols(heads), L + ".attn.Wo", L + ".attn.bo");
    x = ad::add(x, o);
    auto w = layernorm_affine(params, x, L + ".ln2");
    auto f1 = ad::tanh_(linear(params, w, L + ".ffn.W1", L + ".ffn.b1"));
    x = ad::add(x, linear(params, f1, L + ".ffn.W2", L + ".ffn.b2"));
  }
  out.h_prims = layernorm_affine(params, x, prefix + ".final_ln");
  if (!out.h_prims.val().allFinite()) throw NumericError("numeric overflow");
  return out;
}

// ---- task forwards ----

struct RefineOut {
  ad::Value offsets;   // N x d
  ad::Value refined;   // N x d, input coords + offsets
  ad::Value dirs;      // N x 2, unit rows (doubled-angle surrogates)
  ad::Value aux_off;   // N x d, from h_vis directly
  ad::Value aux_dirs;  // N x 2, unit rows
  ad::Value h_vis;
  ad::Value h_prims;
  std::vector<std::vector<MatrixXd>> attention;
};

inline RefineOut forward_refine(ad::Tape& tape, const ParamMap& params,
                                const RasterBundle& bundle, const ad::Value& coords,
                                PrimitiveKind kind, const PipelineConfig& cfg) {
  using plsdetail::linear;
  if (coords.rows() < 1) throw BadInput("forward_refine needs at least one primitive");
  auto enc = pls_encode(tape, params, "refine", bundle, coords, kind, cfg);
  RefineOut out;
  out.h_vis = enc.h_vis;
  out.h_prims = enc.h_prims;
  out.attention = std::move(enc.attention);
  out.offsets = linear(params, enc.h_prims, "refine.head.off.W", "refine.head.off.b");
  out.refined = ad::add(coords, out.offsets);
  out.dirs = ad::l2_normalize_rows(
      linear(params, enc.h_prims, "refine.head.dir.W", "refine.head.dir.b"));
  out.aux_off = linear(params, enc.h_vis, "refine.head.aux_off.W", "refine.head.aux_off.b");
  out.aux_dirs = ad::l2_normalize_rows(
      linear(params, enc.h_vis, "refine.head.aux_dir.W", "refine.head.aux_dir.b"));
  return out;
}

struct RelateOut {
  ad::Value pair_logits;  // |U| x R, symmetrized
  ad::Value pair_probs;   // |U| x R, rows sum to 1
  ad::Value h_prims;
  std::vector<std::vector<MatrixXd>> attention;
};

namespace plsdetail {

// LOI features for ordered endpoint rows A -> B: bilinear samples of
// features/seg/kp at loi_samples midpoints of equal sub-intervals.
inline ad::Value loi_features(const RasterBundle& bundle, const ad::Value& a,
                              const ad::Value& b, int loi_samples) {
  std::vector<int> feat_ch(bundle.features.c), seg_ch(bundle.seg.c), kp_ch(bundle.kp.c);
  for (int i = 0; i < bundle.features.c; ++i) feat_ch[i] = i;
  for (int i = 0; i < bundle.seg.c; ++i) seg_ch[i] = i;
  for (int i = 0; i < bundle.kp.c; ++i) kp_ch[i] = i;
  std::vector<ad::Value> parts;
  parts.reserve(loi_samples);
  for (int s = 0; s < loi_samples; ++s) {
    const double t = (s + 0.5) / loi_samples;
    auto pos = ad::add(ad::scale(a, 1.0 - t), ad::scale(b, t));
    std::vector<ad::Value> at_pos;
    at_pos.push_back(ad::bilinear_sample(pos, &bundle.features, feat_ch));
    at_pos.push_back(ad::bilinear_sample(pos, &bundle.seg, seg_ch));
    at_pos.push_back(ad::bilinear_sample(pos, &bundle.kp, kp_ch));
    parts.push_back(ad::concat_cols(at_pos));
  }
  return ad::concat_cols(parts);
}

inline ad::Value pair_logits_directed(const ParamMap& params, const RasterBundle& bundle,
                                      const ad::Value& h, const ad::Value& coords,
                                      const std::vector<int>& I, const std::vector<int>& J,
                                      PrimitiveKind kind, const PipelineConfig& cfg) {
  auto hi = ad::gather_rows(h, I);
  auto hj = ad::gather_rows(h, J);
  ad::Value feat;
  if (kind == PrimitiveKind::Point) {
    auto pi = ad::gather_rows(coords, I);
    auto pj = ad::gather_rows(coords, J);
    feat = ad::concat_cols({hi, hj, loi_features(bundle, pi, pj, cfg.loi_samples)});
  } else {
    feat = ad::concat_cols({hi, hj});
  }
  auto z = ad::tanh_(linear(params, feat, "relate.head.rel.W1", "relate.head.rel.b1"));
  if (cfg.embed_norm) z = ad::l2_normalize_rows(z);
  return linear(params, z, "relate.head.rel.W2", "relate.head.rel.b2");
}

}  // namespace plsdetail

// Relationship classification over the selected pairs. `coords` are the
// (refined, in the incremental arm) primitive coordinates this instance pools
// from; pairs must respect the distance threshold.
inline RelateOut forward_relate(ad::Tape& tape, const ParamMap& params,
                                const RasterBundle& bundle, const ad::Value& coords,
                                PrimitiveKind kind, const PairSet& pairs,
                                const PipelineConfig& cfg) {
  // distance precondition, checked against current values
  std::vector<Primitive> current(coords.rows());
  for (int i = 0; i < coords.rows(); ++i) {
    if (kind == PrimitiveKind::Point)
      current[i] = Primitive::point(coords.val()(i, 0), coords.val()(i, 1));
    else
      current[i] = Primitive::segment(coords.val()(i, 0), coords.val()(i, 1),
                                      coords.val()(i, 2), coords.val()(i, 3));
  }
  for (const auto& [i, j] : pairs.pairs) {
    if (i < 0 || j < 0 || i >= coords.rows() || j >= coords.rows())
      throw BadInput("pair index out of range");
    if (primitive_distance(current[i], current[j]) >= cfg.pair_distance_threshold)
      throw BadInput("pair outside distance threshold");
  }

  auto enc = pls_encode(tape, params, "relate", bundle, coords, kind, cfg);
  RelateOut out;
  out.h_prims = enc.h_prims;
  out.attention = std::move(enc.attention);

  std::vector<int> I, J;
  I.reserve(pairs.size());
  J.reserve(pairs.size());
  for (const auto& [i, j] : pairs.pairs) {
    I.push_back(i);
    J.push_back(j);
  }
  if (pairs.pairs.empty()) {
    out.pair_logits = tape.leaf(MatrixXd::Zero(0, 0));
    out.pair_probs = out.pair_logits;
    return out;
  }
  auto fwd =
      plsdetail::pair_logits_directed(params, bundle, enc.h_prims, coords, I, J, kind, cfg);
  auto rev =
      plsdetail::pair_logits_directed(params, bundle, enc.h_prims, coords, J, I, kind, cfg);
  out.pair_logits = ad::scale(ad::add(fwd, rev), 0.5);
  out.pair_probs = ad::softmax_rows(out.pair_logits);
  if (!out.pair_logits.val().allFinite()) throw NumericError("numeric overflow");
  return out;
}

}  // namespace pgmap
