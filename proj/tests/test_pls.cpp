#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "pgmap/pls.hpp"
#include "pgmap/rng.hpp"

namespace {

using namespace pgmap;
using Eigen::MatrixXd;

PipelineConfig tiny_config() {
  PipelineConfig cfg;
  cfg.model_dim = 8;
  cfg.heads = 2;
  cfg.layers = 1;
  cfg.patch_size = 3;
  cfg.loi_samples = 2;
  return cfg;
}

RasterBundle random_bundle(Rng& rng, int h = 24, int w = 24, int feat_c = 3) {
  RasterBundle b;
  b.features = Raster(h, w, feat_c);
  b.seg = Raster(h, w, 2);
  b.kp = Raster(h, w, 3);
  for (auto& v : b.features.data) v = rng.uniform();
  for (auto& v : b.seg.data) v = rng.uniform(0.01, 0.99);
  for (auto& v : b.kp.data) v = rng.uniform(0.01, 0.99);
  return b;
}

// positions strictly inside bilinear cells so finite differences stay exact
MatrixXd cell_safe_coords(Rng& rng, int n, int d, int h, int w) {
  MatrixXd m(n, d);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < d; ++c) {
      const int hi = (c % 2 == 0 ? w : h) - 4;
      m(i, c) = rng.uniform_int(2, hi) + rng.uniform(0.25, 0.75);
    }
  return m;
}

TEST(Posenc, ZeroCoordinatePattern) {
  MatrixXd coords = MatrixXd::Zero(1, 2);
  MatrixXd enc = positional_encode_values(coords, 64);
  ASSERT_EQ(enc.cols(), 64);
  for (int c = 0; c < 32; ++c) EXPECT_EQ(enc(0, c), 0.0);       // sin half
  for (int c = 32; c < 64; ++c) EXPECT_EQ(enc(0, c), 1.0);      // cos half
}

TEST(Posenc, IdenticalCoordsIdenticalEncodings) {
  MatrixXd coords(3, 2);
  coords << 0.25, 0.5, 0.25, 0.5, 0.7, 0.1;
  MatrixXd enc = positional_encode_values(coords, 64);
  EXPECT_TRUE(enc.row(0).isApprox(enc.row(1)));
  EXPECT_FALSE(enc.row(0).isApprox(enc.row(2)));
}

TEST(Posenc, InjectiveOn64Grid) {
  // brute force: all 64x64 grid encodings pairwise distinct beyond 1e-6
  const int G = 64;
  MatrixXd coords(G * G, 2);
  for (int y = 0; y < G; ++y)
    for (int x = 0; x < G; ++x) {
      coords(y * G + x, 0) = static_cast<double>(x) / (G - 1);
      coords(y * G + x, 1) = static_cast<double>(y) / (G - 1);
    }
  MatrixXd enc = positional_encode_values(coords, 64);
  int collisions = 0;
  for (int i = 0; i < G * G && collisions == 0; ++i)
    for (int j = i + 1; j < G * G; ++j) {
      if ((enc.row(i) - enc.row(j)).cwiseAbs().maxCoeff() < 1e-6) {
        ++collisions;
        break;
      }
    }
  EXPECT_EQ(collisions, 0);
}

TEST(PatchPool, ConstantRasterGivesIdenticalRows) {
  PipelineConfig cfg = tiny_config();
  Rng rng(1);
  RasterBundle b = random_bundle(rng);
  for (auto& v : b.features.data) v = 0.37;
  ParamStore store = init_pls_params(cfg, PrimitiveKind::Point, b, 2, 5);
  ad::Tape tape;
  auto params = lift(tape, store);
  // keep all primitives away from the border so the crops see only constants
  MatrixXd coords(4, 2);
  coords << 5.2, 6.1, 12.7, 3.9, 8.4, 15.5, 18.1, 18.9;
  auto h = patch_pool(tape, params, "refine", b, tape.leaf(coords),
                      PrimitiveKind::Point, cfg);
  ASSERT_EQ(h.rows(), 4);
  ASSERT_EQ(h.cols(), cfg.model_dim);
  for (int i = 1; i < 4; ++i) EXPECT_TRUE(h.val().row(i).isApprox(h.val().row(0), 1e-12));

  // corner primitive: zero-padded crop, still finite
  MatrixXd corner(1, 2);
  corner << 0.0, 0.0;
  auto hc = patch_pool(tape, params, "refine", b, tape.leaf(corner),
                       PrimitiveKind::Point, cfg);
  EXPECT_TRUE(hc.val().allFinite());
}

TEST(Refine, ZeroHeadsGiveZeroOffsets) {
  PipelineConfig cfg = tiny_config();
  Rng rng(2);
  RasterBundle b = random_bundle(rng);
  ParamStore store = init_pls_params(cfg, PrimitiveKind::Point, b, 2, 6);
  store["refine.head.off.W"].setZero();
  store["refine.head.off.b"].setZero();
  ad::Tape tape;
  auto params = lift(tape, store);
  MatrixXd coords = cell_safe_coords(rng, 5, 2, 24, 24);
  auto out = forward_refine(tape, params, b, tape.leaf(coords), PrimitiveKind::Point, cfg);
  EXPECT_TRUE(out.offsets.val().isZero(0.0));
  EXPECT_TRUE(out.refined.val().isApprox(coords));
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(out.dirs.val().row(i).norm(), 1.0, 1e-6);
}

TEST(Refine, PermutationEquivariance) {
  PipelineConfig cfg = tiny_config();
  Rng rng(3);
  RasterBundle b = random_bundle(rng);
  ParamStore store = init_pls_params(cfg, PrimitiveKind::Point, b, 2, 7);
  MatrixXd coords = cell_safe_coords(rng, 6, 2, 24, 24);
  std::vector<int> perm = {3, 0, 5, 1, 4, 2};
  MatrixXd permuted(6, 2);
  for (int i = 0; i < 6; ++i) permuted.row(i) = coords.row(perm[i]);

  ad::Tape t1, t2;
  auto o1 = forward_refine(t1, lift(t1, store), b, t1.leaf(coords), PrimitiveKind::Point, cfg);
  auto o2 = forward_refine(t2, lift(t2, store), b, t2.leaf(permuted), PrimitiveKind::Point, cfg);
  for (int i = 0; i < 6; ++i) {
    EXPECT_TRUE(o2.offsets.val().row(i).isApprox(o1.offsets.val().row(perm[i]), 1e-6));
    EXPECT_TRUE(o2.dirs.val().row(i).isApprox(o1.dirs.val().row(perm[i]), 1e-6));
  }
}

TEST(Refine, AttentionRowsSumToOne) {
  PipelineConfig cfg = tiny_config();
  cfg.layers = 2;
  Rng rng(4);
  RasterBundle b = random_bundle(rng);
  ParamStore store = init_pls_params(cfg, PrimitiveKind::Point, b, 2, 8);
  ad::Tape tape;
  MatrixXd coords = cell_safe_coords(rng, 7, 2, 24, 24);
  auto out = forward_refine(tape, lift(tape, store), b, tape.leaf(coords),
                            PrimitiveKind::Point, cfg);
  ASSERT_EQ(out.attention.size(), 2u);
  for (const auto& layer : out.attention) {
    ASSERT_EQ(layer.size(), static_cast<std::size_t>(cfg.heads));
    for (const auto& head : layer)
      for (int r = 0; r < head.rows(); ++r) EXPECT_NEAR(head.row(r).sum(), 1.0, 1e-5);
  }
}

TEST(Refine, DeterministicInitAndForward) {
  PipelineConfig cfg = tiny_config();
  Rng rng(5);
  RasterBundle b = random_bundle(rng);
  ParamStore s1 = init_pls_params(cfg, PrimitiveKind::Point, b, 2, 99);
  ParamStore s2 = init_pls_params(cfg, PrimitiveKind::Point, b, 2, 99);
  ASSERT_EQ(s1.tensors.size(), s2.tensors.size());
  for (const auto& [name, m] : s1.tensors) EXPECT_TRUE(m == s2.tensors.at(name)) << name;

  MatrixXd coords = cell_safe_coords(rng, 5, 2, 24, 24);
  ad::Tape t1, t2;
  auto o1 = forward_refine(t1, lift(t1, s1), b, t1.leaf(coords), PrimitiveKind::Point, cfg);
  auto o2 = forward_refine(t2, lift(t2, s2), b, t2.leaf(coords), PrimitiveKind::Point, cfg);
  EXPECT_TRUE(o1.offsets.val() == o2.offsets.val());  // bit-identical
}

TEST(Relate, ProbabilitiesAndPairSymmetry) {
  PipelineConfig cfg = tiny_config();
  Rng rng(6);
  RasterBundle b = random_bundle(rng);
  ParamStore store = init_pls_params(cfg, PrimitiveKind::Point, b, 2, 11);
  MatrixXd coords = cell_safe_coords(rng, 4, 2, 24, 24);

  PairSet pairs = build_pairs(
      [&] {
        std::vector<Primitive> ps;
        for (int i = 0; i < 4; ++i) ps.push_back(Primitive::point(coords(i, 0), coords(i, 1)));
        return ps;
      }(),
      cfg.pair_distance_threshold);
  ASSERT_GT(pairs.size(), 0u);

  ad::Tape tape;
  auto out = forward_relate(tape, lift(tape, store), b, tape.leaf(coords),
                            PrimitiveKind::Point, pairs, cfg);
  ASSERT_EQ(out.pair_probs.rows(), static_cast<int>(pairs.size()));
  for (int r = 0; r < out.pair_probs.rows(); ++r)
    EXPECT_NEAR(out.pair_probs.val().row(r).sum(), 1.0, 1e-9);

  // swapping the two primitives of a pair leaves its probability unchanged:
  // permute rows 0 and 1 and relabel the pairs accordingly
  MatrixXd swapped = coords;
  swapped.row(0) = coords.row(1);
  swapped.row(1) = coords.row(0);
  PairSet relabeled = pairs;
  for (auto& [i, j] : relabeled.pairs) {
    auto flip = [](int v) { return v == 0 ? 1 : v == 1 ? 0 : v; };
    int a = flip(i), bb = flip(j);
    i = std::min(a, bb);
    j = std::max(a, bb);
  }
  ad::Tape tape2;
  auto out2 = forward_relate(tape2, lift(tape2, store), b, tape2.leaf(swapped),
                             PrimitiveKind::Point, relabeled, cfg);
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    // find the matching unordered pair in the relabeled set
    auto flip = [](int v) { return v == 0 ? 1 : v == 1 ? 0 : v; };
    const int a = std::min(flip(pairs.pairs[k].first), flip(pairs.pairs[k].second));
    const int bb = std::max(flip(pairs.pairs[k].first), flip(pairs.pairs[k].second));
    for (std::size_t m = 0; m < relabeled.pairs.size(); ++m)
      if (relabeled.pairs[m] == std::make_pair(a, bb))
        EXPECT_TRUE(out2.pair_probs.val().row(static_cast<int>(m)).isApprox(
            out.pair_probs.val().row(static_cast<int>(k)), 1e-9));
  }
}

TEST(Relate, RejectsPairsBeyondThreshold) {
  PipelineConfig cfg = tiny_config();
  cfg.pair_distance_threshold = 5.0;
  Rng rng(7);
  RasterBundle b = random_bundle(rng);
  ParamStore store = init_pls_params(cfg, PrimitiveKind::Point, b, 2, 12);
  MatrixXd coords(2, 2);
  coords << 3.3, 3.3, 20.4, 20.4;  // far apart
  PairSet pairs;
  pairs.pairs = {{0, 1}};
  ad::Tape tape;
  auto params = lift(tape, store);
  EXPECT_THROW(
      forward_relate(tape, params, b, tape.leaf(coords), PrimitiveKind::Point, pairs, cfg),
      BadInput);
}

TEST(Relate, UnusedInstanceGetsZeroGradient) {
  PipelineConfig cfg = tiny_config();
  Rng rng(8);
  RasterBundle b = random_bundle(rng);
  ParamStore store = init_pls_params(cfg, PrimitiveKind::Point, b, 2, 13);
  ad::Tape tape;
  auto params = lift(tape, store);
  MatrixXd coords = cell_safe_coords(rng, 5, 2, 24, 24);
  auto out = forward_refine(tape, params, b, tape.leaf(coords), PrimitiveKind::Point, cfg);
  tape.backward(ad::sum_all(ad::hadamard(out.offsets, out.offsets)));
  for (const auto& [name, v] : params) {
    if (name.rfind("relate.", 0) == 0)
      EXPECT_TRUE(v.grad().isZero(0.0)) << name;
  }
  bool any_refine_nonzero = false;
  for (const auto& [name, v] : params)
    if (name.rfind("refine.", 0) == 0 && !v.grad().isZero(0.0)) any_refine_nonzero = true;
  EXPECT_TRUE(any_refine_nonzero);
}

// Full finite-difference sweep over every parameter tensor of both instances
// plus the input coordinates, through the incremental path (relate pools at
// the refined coordinates, gradients flow through bilinear sampling and the
// positional encoding).
TEST(Gradients, FullModelFiniteDifferences) {
  PipelineConfig cfg = tiny_config();
  Rng rng(9);
  RasterBundle b = random_bundle(rng, 20, 20, 2);
  ParamStore store = init_pls_params(cfg, PrimitiveKind::Point, b, 2, 14);
  MatrixXd coords = cell_safe_coords(rng, 4, 2, 20, 20);

  std::vector<std::string> names;
  std::vector<MatrixXd> inputs;
  for (const auto& [name, m] : store.tensors) {
    names.push_back(name);
    inputs.push_back(m);
  }
  inputs.push_back(coords);

  PairSet pairs;
  pairs.pairs = {{0, 1}, {1, 2}, {0, 3}};
  MatrixXd w_off(4, 2), w_dir(4, 2), w_logit(3, 2);
  for (auto* m : {&w_off, &w_dir, &w_logit})
    for (int r = 0; r < m->rows(); ++r)
      for (int c = 0; c < m->cols(); ++c) (*m)(r, c) = rng.uniform(-1, 1);

  auto build = [&](ad::Tape& tape, std::vector<ad::Value>& in) {
    ParamMap params;
    for (std::size_t k = 0; k < names.size(); ++k) params.emplace(names[k], in[k]);
    auto c = in.back();
    auto ref = forward_refine(tape, params, b, c, PrimitiveKind::Point, cfg);
    auto rel = forward_relate(tape, params, b, ref.refined, PrimitiveKind::Point, pairs, cfg);
    auto loss = ad::sum_all(ad::hadamard(ref.refined, tape.leaf(w_off)));
    loss = ad::add(loss, ad::sum_all(ad::hadamard(ref.dirs, tape.leaf(w_dir))));
    loss = ad::add(loss, ad::sum_all(ad::hadamard(ref.aux_off, tape.leaf(w_off))));
    loss = ad::add(loss, ad::sum_all(ad::hadamard(ref.aux_dirs, tape.leaf(w_dir))));
    loss = ad::add(loss, ad::sum_all(ad::hadamard(rel.pair_logits, tape.leaf(w_logit))));
    return loss;
  };
  auto res = testutil::check_gradients(inputs, build);
  EXPECT_TRUE(res.ok) << res.detail << " (worst rel " << res.worst_rel << ")";
}

}  // namespace
