#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "pgmap/train.hpp"

namespace {

using namespace pgmap;
using Eigen::MatrixXd;

bool same_matrix(const MatrixXd& a, const MatrixXd& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
}

bool same_store(const ParamStore& a, const ParamStore& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (const auto& [name, m] : a.tensors) {
    auto it = b.tensors.find(name);
    if (it == b.tensors.end() || !same_matrix(m, it->second)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Adam

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamStore params;
  params.tensors["w"] = MatrixXd::Constant(1, 1, 5.0);
  AdamConfig opt;
  opt.lr = 0.01;
  AdamState state;
  GradMap grads;
  grads["w"] = MatrixXd::Constant(1, 1, 3.0);
  adam_update(params, grads, opt, state);
  // bias correction cancels on the first step, leaving lr * sign(g)
  EXPECT_NEAR(params.tensors["w"](0, 0), 5.0 - opt.lr, 1e-9);
}

TEST(Adam, MatchesScalarReference) {
  ParamStore params;
  params.tensors["w"] = MatrixXd::Zero(2, 2);
  params.tensors["w"] << 0.5, -1.0, 2.0, 0.1;
  MatrixXd ref = params.tensors["w"];
  AdamConfig opt;
  AdamState state;
  MatrixXd m = MatrixXd::Zero(2, 2), v = MatrixXd::Zero(2, 2);
  for (int t = 1; t <= 25; ++t) {
    GradMap grads;
    MatrixXd g(2, 2);
    g << std::sin(0.3 * t), std::cos(0.7 * t), 0.1 * t, -0.2;
    grads["w"] = g;
    adam_update(params, grads, opt, state);
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 2; ++c) {
        m(r, c) = opt.beta1 * m(r, c) + (1 - opt.beta1) * g(r, c);
        v(r, c) = opt.beta2 * v(r, c) + (1 - opt.beta2) * g(r, c) * g(r, c);
        const double mh = m(r, c) / (1 - std::pow(opt.beta1, t));
        const double vh = v(r, c) / (1 - std::pow(opt.beta2, t));
        ref(r, c) -= opt.lr * mh / (std::sqrt(vh) + opt.eps);
      }
  }
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c)
      EXPECT_DOUBLE_EQ(params.tensors["w"](r, c), ref(r, c));
}

TEST(Adam, LateTensorGetsFreshBiasCorrection) {
  ParamStore params;
  params.tensors["a"] = MatrixXd::Zero(1, 1);
  params.tensors["b"] = MatrixXd::Zero(1, 1);
  AdamConfig opt;
  AdamState state;
  for (int t = 0; t < 5; ++t) {
    GradMap grads;
    grads["a"] = MatrixXd::Constant(1, 1, 1.0);
    adam_update(params, grads, opt, state);
  }
  GradMap grads;
  grads["b"] = MatrixXd::Constant(1, 1, -4.0);
  adam_update(params, grads, opt, state);
  // b's own step counter starts at 1, so its first move is still ~lr
  EXPECT_NEAR(params.tensors["b"](0, 0), opt.lr, 1e-9);
}

TEST(Adam, ZeroGradientLeavesWeights) {
  ParamStore params;
  params.tensors["w"] = MatrixXd::Constant(2, 3, 1.5);
  const MatrixXd before = params.tensors["w"];
  AdamConfig opt;
  AdamState state;
  GradMap grads;
  grads["w"] = MatrixXd::Zero(2, 3);
  adam_update(params, grads, opt, state);
  EXPECT_TRUE(same_matrix(params.tensors["w"], before));
}

TEST(Adam, RejectsShapeMismatch) {
  ParamStore params;
  params.tensors["w"] = MatrixXd::Zero(2, 2);
  AdamConfig opt;
  AdamState state;
  GradMap grads;
  grads["w"] = MatrixXd::Zero(3, 2);
  EXPECT_THROW(adam_update(params, grads, opt, state), BadInput);
  grads.clear();
  grads["missing"] = MatrixXd::Zero(1, 1);
  EXPECT_THROW(adam_update(params, grads, opt, state), BadInput);
}

// ---------------------------------------------------------------------------
// Scene preprocessing

SceneSpec clean_road_spec(std::uint64_t seed, int size = 128) {
  SceneSpec spec;
  spec.task = Task::kRoad;
  spec.height = spec.width = size;
  spec.grid_cells_min = spec.grid_cells_max = 2;
  spec.seed = seed;
  return spec;
}

SceneSpec clean_building_spec(std::uint64_t seed, int size = 128) {
  SceneSpec spec;
  spec.task = Task::kBuilding;
  spec.height = spec.width = size;
  spec.building_min = 2;
  spec.building_max = 3;
  spec.seed = seed;
  return spec;
}

PipelineConfig small_config() {
  PipelineConfig cfg;
  cfg.model_dim = 16;
  cfg.heads = 2;
  cfg.layers = 2;
  cfg.patch_size = 3;
  cfg.loi_samples = 4;
  return cfg;
}

TEST(PrepareSample, RoadSceneMakesOneGroupWithUnitTargets) {
  const Scene sc = gen_road_scene(clean_road_spec(3));
  const PipelineConfig cfg = small_config();
  const SceneSample s = prepare_sample(sc, cfg);
  ASSERT_TRUE(s.usable());
  ASSERT_EQ(s.groups.size(), 1u);
  const SampleGroup& g = s.groups[0];
  EXPECT_EQ(static_cast<int>(g.members.size()), static_cast<int>(s.sampled.size()));
  EXPECT_EQ(s.trained_members, static_cast<int>(s.sampled.size()));
  ASSERT_EQ(g.coords.rows(), static_cast<int>(s.sampled.size()));
  ASSERT_EQ(g.coords.cols(), 2);
  for (std::size_t i = 0; i < s.sampled.size(); ++i) {
    EXPECT_EQ(g.coords(static_cast<int>(i), 0), s.sampled[i].coords[0]);
    EXPECT_EQ(g.coords(static_cast<int>(i), 1), s.sampled[i].coords[1]);
  }
  ASSERT_EQ(g.gt_dirs.rows(), g.coords.rows());
  for (int i = 0; i < g.gt_dirs.rows(); ++i)
    EXPECT_NEAR(g.gt_dirs.row(i).norm(), 1.0, 1e-9);
  EXPECT_TRUE(std::isfinite(s.seg_term));
  EXPECT_TRUE(std::isfinite(s.kp_term));
  EXPECT_GE(s.seg_term, 0.0);
  EXPECT_GE(s.kp_term, 0.0);
  // clean rasters should score close to their own geometry labels
  EXPECT_LT(s.seg_term, 1.0);
  EXPECT_LT(s.kp_term, 0.2);
}

TEST(PrepareSample, BuildingGroupsFollowContours) {
  const Scene sc = gen_building_scene(clean_building_spec(5));
  const PipelineConfig cfg = small_config();
  const SceneSample s = prepare_sample(sc, cfg);
  ASSERT_TRUE(s.usable());
  ASSERT_GE(s.groups.size(), 1u);
  int member_total = 0;
  for (const auto& g : s.groups) {
    member_total += static_cast<int>(g.members.size());
    ASSERT_FALSE(g.gt_prims.empty());
    const int cid = g.gt_prims.front().contour_id;
    for (const auto& gp : g.gt_prims) EXPECT_EQ(gp.contour_id, cid);
    const int sampled_cid = s.sampled[g.members.front()].contour_id;
    for (int k : g.members) EXPECT_EQ(s.sampled[k].contour_id, sampled_cid);
    for (int i = 0; i < g.gt_dirs.rows(); ++i)
      EXPECT_NEAR(g.gt_dirs.row(i).norm(), 1.0, 1e-9);
    ASSERT_EQ(g.coords.cols(), 4);
  }
  EXPECT_EQ(member_total, s.trained_members);
  // distinct groups train against distinct ground-truth contours
  std::set<int> gt_contours;
  for (const auto& g : s.groups) gt_contours.insert(g.gt_prims.front().contour_id);
  EXPECT_EQ(gt_contours.size(), s.groups.size());
}

TEST(PrepareSample, AxisAlignedWallsGetAxisAlignedTargets) {
  SceneSpec spec = clean_building_spec(8);
  spec.rotate_fraction = 0.0;
  spec.split_prob = 0.0;
  const Scene sc = gen_building_scene(spec);
  const SceneSample s = prepare_sample(sc, small_config());
  ASSERT_TRUE(s.usable());
  for (const auto& g : s.groups)
    for (int i = 0; i < g.gt_dirs.rows(); ++i) {
      EXPECT_NEAR(std::fabs(g.gt_dirs(i, 0)), 1.0, 1e-9);
      EXPECT_NEAR(g.gt_dirs(i, 1), 0.0, 1e-9);
    }
}

// ---------------------------------------------------------------------------
// Per-scene loss

TEST(SceneLoss, StageOneTouchesOnlyRefineTensors) {
  const Scene sc = gen_road_scene(clean_road_spec(11));
  const PipelineConfig cfg = small_config();
  const SceneSample s = prepare_sample(sc, cfg);
  ASSERT_TRUE(s.usable());
  const ParamStore params =
      init_pls_params(cfg, PrimitiveKind::Point, sc.bundle, 2, 17);

  const SceneLossResult stage1 = scene_loss(params, s, cfg, /*stage2=*/false);
  EXPECT_EQ(stage1.breakdown.rel, 0.0);
  EXPECT_EQ(stage1.breakdown.reg, 0.0);
  EXPECT_GT(stage1.breakdown.off, 0.0);
  double refine_norm = 0.0, relate_norm = 0.0;
  for (const auto& [name, g] : stage1.grads) {
    if (name.rfind("refine.", 0) == 0) refine_norm += g.cwiseAbs().sum();
    if (name.rfind("relate.", 0) == 0) relate_norm += g.cwiseAbs().sum();
  }
  EXPECT_GT(refine_norm, 0.0);
  EXPECT_EQ(relate_norm, 0.0);

  const SceneLossResult stage2 = scene_loss(params, s, cfg, /*stage2=*/true);
  EXPECT_GT(stage2.breakdown.rel, 0.0);
  relate_norm = 0.0;
  for (const auto& [name, g] : stage2.grads)
    if (name.rfind("relate.", 0) == 0) relate_norm += g.cwiseAbs().sum();
  EXPECT_GT(relate_norm, 0.0);
}

TEST(SceneLoss, BreakdownTotalIsTheWeightedTermSum) {
  const Scene sc = gen_road_scene(clean_road_spec(12));
  const PipelineConfig cfg = small_config();
  const SceneSample s = prepare_sample(sc, cfg);
  ASSERT_TRUE(s.usable());
  const ParamStore params =
      init_pls_params(cfg, PrimitiveKind::Point, sc.bundle, 2, 18);
  const SceneLossResult r = scene_loss(params, s, cfg, true);
  const LossBreakdown& b = r.breakdown;
  const LossWeights& w = cfg.loss_weights;
  const double want = w.seg * b.seg + w.kp * b.kp + w.off * b.off +
                      w.dir * b.dir + w.rel * b.rel + w.reg * b.reg +
                      w.aux * b.aux;
  EXPECT_NEAR(b.total, want, 1e-12);
  EXPECT_NEAR(trainable_total(b, w), want - w.seg * b.seg - w.kp * b.kp, 1e-12);
}

TEST(SceneLoss, ZeroWeightDropsTermFromGradient) {
  const Scene sc = gen_road_scene(clean_road_spec(13));
  PipelineConfig cfg = small_config();
  const SceneSample s = prepare_sample(sc, cfg);
  ASSERT_TRUE(s.usable());
  const ParamStore params =
      init_pls_params(cfg, PrimitiveKind::Point, sc.bundle, 2, 19);

  PipelineConfig only_aux = cfg;
  only_aux.loss_weights.off = 0.0;
  only_aux.loss_weights.dir = 0.0;
  only_aux.loss_weights.rel = 0.0;
  only_aux.loss_weights.reg = 0.0;
  only_aux.loss_weights.aux = 0.0;
  const SceneLossResult r = scene_loss(params, s, only_aux, true);
  // values still reported
  EXPECT_GT(r.breakdown.off, 0.0);
  // but nothing carries gradient
  double total_norm = 0.0;
  for (const auto& [name, g] : r.grads) total_norm += g.cwiseAbs().sum();
  EXPECT_EQ(total_norm, 0.0);
}

TEST(SceneLoss, DisablingRegSkipsTheTerm) {
  const Scene sc = gen_building_scene(clean_building_spec(14));
  PipelineConfig cfg = small_config();
  const SceneSample s = prepare_sample(sc, cfg);
  ASSERT_TRUE(s.usable());
  const ParamStore params =
      init_pls_params(cfg, PrimitiveKind::LineSegment, sc.bundle, 2, 20);
  PipelineConfig no_reg = cfg;
  no_reg.use_reg = false;
  const SceneLossResult with_reg = scene_loss(params, s, cfg, true);
  const SceneLossResult without = scene_loss(params, s, no_reg, true);
  EXPECT_GT(with_reg.breakdown.reg, 0.0);
  EXPECT_EQ(without.breakdown.reg, 0.0);
}

TEST(SceneLoss, GradientMatchesFiniteDifferences) {
  SceneSpec spec = clean_road_spec(15, 96);
  const Scene sc = gen_road_scene(spec);
  PipelineConfig cfg = small_config();
  cfg.use_reg = false;  // reg weights relation probabilities as constants
  const SceneSample s = prepare_sample(sc, cfg);
  ASSERT_TRUE(s.usable());
  ParamStore params = init_pls_params(cfg, PrimitiveKind::Point, sc.bundle, 2, 23);

  const SceneLossResult base = scene_loss(params, s, cfg, true);
  const LossWeights& w = cfg.loss_weights;
  Rng rng(99);
  const std::vector<std::string> names = {"refine.pool.W", "refine.head.off.W",
                                          "relate.head.rel.W1"};
  const double h = 1e-5;
  for (const auto& name : names) {
    const MatrixXd& g = base.grads.at(name);
    for (int trial = 0; trial < 3; ++trial) {
      const int r = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(g.rows())));
      const int c = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(g.cols())));
      const double saved = params.tensors[name](r, c);
      params.tensors[name](r, c) = saved + h;
      const double fp = trainable_total(
          scene_loss(params, s, cfg, true, /*want_grads=*/false).breakdown, w);
      params.tensors[name](r, c) = saved - h;
      const double fm = trainable_total(
          scene_loss(params, s, cfg, true, /*want_grads=*/false).breakdown, w);
      params.tensors[name](r, c) = saved;
      const double fd = (fp - fm) / (2 * h);
      const double an = g(r, c);
      if (std::fabs(fd) < 1e-8 && std::fabs(an) < 1e-8) continue;
      EXPECT_NEAR(an, fd, 2e-3 * std::max(1.0, std::fabs(fd)))
          << name << "(" << r << "," << c << ")";
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop

TEST(TrainStep, ThreadCountDoesNotChangeTheResult) {
  const Scene a = gen_road_scene(clean_road_spec(21));
  const Scene b = gen_road_scene(clean_road_spec(22));
  const PipelineConfig cfg = small_config();
  const SceneSample sa = prepare_sample(a, cfg);
  const SceneSample sb = prepare_sample(b, cfg);
  ASSERT_TRUE(sa.usable() && sb.usable());
  const ParamStore init =
      init_pls_params(cfg, PrimitiveKind::Point, a.bundle, 2, 29);
  const std::vector<const SceneSample*> batch = {&sa, &sb, &sa, &sb};

  ParamStore p1 = init, p4 = init;
  AdamState s1, s4;
  AdamConfig opt;
  const LossBreakdown b1 = train_step(p1, s1, opt, batch, cfg, true, "", 1);
  const LossBreakdown b4 = train_step(p4, s4, opt, batch, cfg, true, "", 4);
  EXPECT_EQ(b1.total, b4.total);
  EXPECT_TRUE(same_store(p1, p4));
}

TEST(TrainRun, DeterministicForAFixedSeed) {
  const Scene sc = gen_road_scene(clean_road_spec(31));
  PipelineConfig cfg = small_config();
  cfg.batch_size = 2;
  const std::vector<SceneSample> data = {prepare_sample(sc, cfg)};
  ASSERT_TRUE(data[0].usable());
  const ParamStore init =
      init_pls_params(cfg, PrimitiveKind::Point, sc.bundle, 2, 37);
  TrainOptions opt;
  opt.steps = 5;
  opt.seed = 123;

  ParamStore pa = init, pb = init;
  const auto rows_a = train_run(pa, data, cfg, opt);
  const auto rows_b = train_run(pb, data, cfg, opt);
  ASSERT_EQ(rows_a.size(), rows_b.size());
  EXPECT_EQ(rows_a.back().loss.total, rows_b.back().loss.total);
  EXPECT_TRUE(same_store(pa, pb));
}

TEST(TrainRun, ZeroStepsLeavesParamsUntouched) {
  const Scene sc = gen_road_scene(clean_road_spec(32));
  const PipelineConfig cfg = small_config();
  const std::vector<SceneSample> data = {prepare_sample(sc, cfg)};
  const ParamStore init =
      init_pls_params(cfg, PrimitiveKind::Point, sc.bundle, 2, 38);
  ParamStore p = init;
  TrainOptions opt;
  opt.steps = 0;
  const auto rows = train_run(p, data, cfg, opt);
  EXPECT_TRUE(rows.empty());
  EXPECT_TRUE(same_store(p, init));
}

TEST(TrainRun, StagingHoldsRelationStageBack) {
  const Scene sc = gen_road_scene(clean_road_spec(33));
  PipelineConfig cfg = small_config();
  cfg.batch_size = 1;
  cfg.incremental = true;
  cfg.stage_fraction = 0.3;
  const std::vector<SceneSample> data = {prepare_sample(sc, cfg)};
  const ParamStore init =
      init_pls_params(cfg, PrimitiveKind::Point, sc.bundle, 2, 39);
  ParamStore p = init;
  TrainOptions opt;
  opt.steps = 10;
  const auto rows = train_run(p, data, cfg, opt);
  ASSERT_EQ(rows.size(), 10u);
  const int split = stage_split_step(cfg, opt.steps);
  ASSERT_EQ(split, 3);
  for (int i = 0; i < split; ++i) {
    EXPECT_EQ(rows[i].loss.rel, 0.0);
    EXPECT_EQ(rows[i].loss.reg, 0.0);
  }
  for (std::size_t i = split; i < rows.size(); ++i) EXPECT_GT(rows[i].loss.rel, 0.0);

  // a pure warmup run must leave every relationship tensor at its init
  PipelineConfig warm = cfg;
  warm.stage_fraction = 1.0;
  ParamStore pw = init;
  TrainOptions wopt;
  wopt.steps = 3;
  train_run(pw, data, warm, wopt);
  bool refine_moved = false;
  for (const auto& [name, m] : pw.tensors) {
    if (name.rfind("relate.", 0) == 0)
      EXPECT_TRUE(same_matrix(m, init.tensors.at(name))) << name;
    else if (!same_matrix(m, init.tensors.at(name)))
      refine_moved = true;
  }
  EXPECT_TRUE(refine_moved);

  // parallel mode trains both stages from the very first step
  PipelineConfig par = cfg;
  par.incremental = false;
  EXPECT_EQ(stage_split_step(par, opt.steps), 0);
  ParamStore pp = init;
  const auto prows = train_run(pp, data, par, wopt);
  EXPECT_GT(prows.front().loss.rel, 0.0);
}

TEST(TrainRun, NonFiniteLossAbortsWithStepDiagnostic) {
  const Scene sc = gen_road_scene(clean_road_spec(34));
  PipelineConfig cfg = small_config();
  cfg.batch_size = 1;
  const std::vector<SceneSample> data = {prepare_sample(sc, cfg)};
  ParamStore p = init_pls_params(cfg, PrimitiveKind::Point, sc.bundle, 2, 40);
  p.tensors["refine.head.off.W"].array() =
      std::numeric_limits<double>::quiet_NaN();
  TrainOptions opt;
  opt.steps = 1;
  try {
    train_run(p, data, cfg, opt);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("non-finite"), std::string::npos) << msg;
  }
}

TEST(TrainRun, OverfittingOneSceneImprovesEverything) {
  SceneSpec spec = clean_road_spec(41);
  spec.jitter_sigma = 1.0;
  spec.blur_sigma = 0.5;
  const Scene sc = gen_road_scene(spec);
  PipelineConfig cfg = small_config();
  cfg.model_dim = 32;
  cfg.heads = 4;
  cfg.patch_size = 5;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 1;
  std::vector<SceneSample> data = {prepare_sample(sc, cfg)};
  ASSERT_TRUE(data[0].usable());
  ParamStore params =
      init_pls_params(cfg, PrimitiveKind::Point, sc.bundle, 2, 41);

  const RefineEval before_refine = eval_refinement(params, data[0], cfg);
  const RelationEval before_rel = eval_relations(params, data[0], cfg);
  ASSERT_GT(before_refine.matched, 0);
  ASSERT_GT(before_rel.total, 0);

  TrainOptions opt;
  opt.steps = 500;
  opt.seed = 5;
  const auto rows = train_run(params, data, cfg, opt);
  const double first = trainable_total(rows.front().loss, cfg.loss_weights);
  const double last = trainable_total(rows.back().loss, cfg.loss_weights);
  EXPECT_LT(last, 0.10 * first) << "first=" << first << " last=" << last;

  const RefineEval after_refine = eval_refinement(params, data[0], cfg);
  EXPECT_LT(after_refine.refined, after_refine.initial);
  EXPECT_LT(after_refine.refined, before_refine.refined);

  const RelationEval after_rel = eval_relations(params, data[0], cfg);
  EXPECT_GE(after_rel.accuracy(), before_rel.accuracy());
  EXPECT_GT(after_rel.accuracy(), 0.8);
}

TEST(WriteLossCsv, EmitsHeaderAndOneRowPerStep) {
  std::vector<TrainRow> rows(3);
  for (int i = 0; i < 3; ++i) {
    rows[i].step = i;
    rows[i].loss.seg = 0.5;
    rows[i].loss.off = 1.0 + i;
    rows[i].loss.finalize(LossWeights{});
  }
  const std::string path = ::testing::TempDir() + "loss_curve.csv";
  write_loss_csv(path, rows);
  std::ifstream in(path);
  ASSERT_TRUE(in.good());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "step,seg,kp,off,dir,rel,reg,aux,total,trainable");
  int count = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++count;
  EXPECT_EQ(count, 3);
  std::remove(path.c_str());
}

}  // namespace
