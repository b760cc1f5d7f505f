#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "pgmap/io.hpp"
#include "pgmap/train.hpp"

namespace {

using namespace pgmap;
namespace fs = std::filesystem;

std::string tmp(const std::string& name) { return testing::TempDir() + name; }

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  EXPECT_TRUE(in.good()) << path;
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
}

SceneSpec road_spec(std::uint64_t seed) {
  SceneSpec spec;
  spec.task = Task::kRoad;
  spec.height = spec.width = 96;
  spec.grid_cells_min = spec.grid_cells_max = 2;
  spec.seed = seed;
  return spec;
}

SceneSpec building_spec(std::uint64_t seed) {
  SceneSpec spec;
  spec.task = Task::kBuilding;
  spec.height = spec.width = 96;
  spec.building_min = spec.building_max = 2;
  spec.seed = seed;
  return spec;
}

// ---------------------------------------------------------------------------
// Raster container

TEST(RasterIo, RoundTripIsByteExact) {
  Raster r(7, 5, 3);
  Rng rng(11);
  for (double& v : r.data) v = rng.uniform(-2.0, 2.0);
  const std::string a = tmp("raster_a.pgrb");
  const std::string b = tmp("raster_b.pgrb");
  write_raster(a, r, {"one", "two", "three"});
  std::vector<std::string> names;
  Raster back = read_raster(a, &names);
  write_raster(b, back, names);
  EXPECT_EQ(read_file(a), read_file(b));
  ASSERT_EQ(names, (std::vector<std::string>{"one", "two", "three"}));
  ASSERT_EQ(back.h, r.h);
  ASSERT_EQ(back.w, r.w);
  ASSERT_EQ(back.c, r.c);
  for (std::size_t k = 0; k < r.data.size(); ++k)
    EXPECT_EQ(back.data[k], static_cast<double>(static_cast<float>(r.data[k])));
}

TEST(RasterIo, RejectsCorruptInput) {
  Raster r(2, 2, 1);
  const std::string path = tmp("raster_c.pgrb");
  EXPECT_THROW(write_raster(path, r, {"a", "b"}), BadInput);  // name count
  write_raster(path, r, {"a"});
  std::string bytes = read_file(path);
  bytes[0] = 'X';
  write_file(path, bytes);
  EXPECT_THROW(read_raster(path), BadInput);
  bytes[0] = 'P';
  write_file(path, bytes.substr(0, bytes.size() - 3));  // truncate payload
  EXPECT_THROW(read_raster(path), BadInput);
  EXPECT_THROW(read_raster(tmp("no_such_file.pgrb")), BadInput);
}

// ---------------------------------------------------------------------------
// Checkpoints

ParamStore small_params() {
  PipelineConfig cfg;
  cfg.model_dim = 16;
  cfg.heads = 2;
  cfg.layers = 1;
  RasterBundle proto;
  proto.seg = Raster(8, 8, 2);
  proto.kp = Raster(8, 8, 5);
  proto.features = Raster(8, 8, 6);
  proto.intensity = Raster(8, 8, 3);
  return init_pls_params(cfg, PrimitiveKind::Point, proto, 2, 3);
}

TEST(Checkpoint, RoundTripIsByteExact) {
  const ParamStore params = small_params();
  const std::string a = tmp("ck_a.pgck");
  const std::string b = tmp("ck_b.pgck");
  save_checkpoint(a, params);
  ParamStore back = load_checkpoint(a);
  save_checkpoint(b, back);
  EXPECT_EQ(read_file(a), read_file(b));
  ASSERT_EQ(back.tensors.size(), params.tensors.size());
  for (const auto& [name, m] : params.tensors) {
    const auto& other = back.tensors.at(name);
    ASSERT_EQ(other.rows(), m.rows());
    ASSERT_EQ(other.cols(), m.cols());
    for (int r = 0; r < m.rows(); ++r)
      for (int c = 0; c < m.cols(); ++c)
        EXPECT_EQ(other(r, c), static_cast<double>(static_cast<float>(m(r, c))));
  }
}

TEST(Checkpoint, ChecksumCatchesCorruption) {
  const std::string path = tmp("ck_c.pgck");
  save_checkpoint(path, small_params());
  std::string bytes = read_file(path);
  bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x40);
  write_file(path, bytes);
  try {
    load_checkpoint(path);
    FAIL() << "corrupt checkpoint accepted";
  } catch (const BadInput& e) {
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
  }
}

TEST(Checkpoint, RejectsWrongMagic) {
  const std::string path = tmp("ck_d.pgck");
  write_file(path, "NOPEnope");
  EXPECT_THROW(load_checkpoint(path), BadInput);
}

// ---------------------------------------------------------------------------
// Graph JSON

TEST(GraphJson, RoadRoundTrip) {
  const Scene sc = gen_scene(road_spec(3));
  const json j = road_graph_json(sc.gt_road);
  const RoadGraph back = road_graph_from_json(j);
  EXPECT_EQ(j.dump(), road_graph_json(back).dump());
  EXPECT_EQ(back.nodes.size(), sc.gt_road.nodes.size());
  EXPECT_EQ(back.edges, sc.gt_road.edges);
  EXPECT_EQ(back.categories, sc.gt_road.categories);
}

TEST(GraphJson, PrimitivesRoundTripWithRelations) {
  const Scene sc = gen_scene(road_spec(4));
  ASSERT_GT(sc.gt.size(), 0);
  const json j = primitive_graph_json(sc.gt);
  const PrimitiveGraph back = primitive_graph_from_json(j);
  EXPECT_EQ(j.dump(), primitive_graph_json(back).dump());
  ASSERT_EQ(back.size(), sc.gt.size());
  EXPECT_TRUE(back.relations == sc.gt.relations);
  ASSERT_EQ(back.relation_probs.size(), 2u);
  for (int i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back.primitives[i].category, sc.gt.primitives[i].category);
    for (int jj = 0; jj < back.size(); ++jj) {
      if (sc.gt.relations(i, jj) == 1) {
        EXPECT_EQ(back.relation_probs[1](i, jj), 1.0);
      }
    }
  }
}

TEST(GraphJson, SegmentsKeepContourMetadata) {
  const Scene sc = gen_scene(building_spec(5));
  const json j = primitive_graph_json(sc.gt);
  EXPECT_EQ(j.at("kind").get<std::string>(), "segment");
  const PrimitiveGraph back = primitive_graph_from_json(j);
  ASSERT_EQ(back.size(), sc.gt.size());
  for (int i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back.primitives[i].contour_id, sc.gt.primitives[i].contour_id);
    EXPECT_EQ(back.primitives[i].contour_index, sc.gt.primitives[i].contour_index);
    for (int c = 0; c < 4; ++c)
      EXPECT_EQ(back.primitives[i].coords[c], sc.gt.primitives[i].coords[c]);
  }
}

TEST(GraphJson, RejectsMalformedRows) {
  EXPECT_THROW(road_graph_from_json(json::parse(R"({"nodes":[[1,2]],"edges":[]})")),
               BadInput);
  EXPECT_THROW(primitive_graph_from_json(json::parse(
                   R"({"kind":"point","primitives":[[1,2,3]],"relations":[]})")),
               BadInput);
  EXPECT_THROW(primitive_graph_from_json(json::parse(
                   R"({"kind":"blob","primitives":[],"relations":[]})")),
               BadInput);
}

// ---------------------------------------------------------------------------
// GeoJSON

TEST(GeoJson, BuildingsRoundTrip) {
  const Scene sc = gen_scene(building_spec(6));
  ASSERT_FALSE(sc.gt_polygons.empty());
  const json j = geojson_buildings(sc.gt_polygons);
  const auto back = buildings_from_geojson(j);
  EXPECT_EQ(j.dump(), geojson_buildings(back).dump());
  ASSERT_EQ(back.size(), sc.gt_polygons.size());
  EXPECT_EQ(back[0].ring.size(), sc.gt_polygons[0].ring.size());
}

TEST(GeoJson, DerivesDirectionsWhenAbsent) {
  json ring = json::array({{0.0, 0.0}, {10.0, 0.0}, {10.0, 8.0}, {0.0, 8.0}, {0.0, 0.0}});
  json j = {{"type", "FeatureCollection"},
            {"features",
             json::array({{{"type", "Feature"},
                           {"geometry",
                            {{"type", "Polygon"}, {"coordinates", json::array({ring})}}},
                           {"properties", json::object()}}})}};
  const auto polys = buildings_from_geojson(j);
  ASSERT_EQ(polys.size(), 1u);
  ASSERT_EQ(polys[0].directions.size(), 4u);
  EXPECT_NEAR(polys[0].directions[0], 0.0, 1e-12);          // horizontal edge
  EXPECT_NEAR(polys[0].directions[1], kPi / 2, 1e-12);      // vertical edge
}

TEST(GeoJson, RoadsEmitOneLineStringPerEdge) {
  const Scene sc = gen_scene(road_spec(7));
  const json j = geojson_roads(sc.gt_road);
  EXPECT_EQ(j.at("type").get<std::string>(), "FeatureCollection");
  EXPECT_EQ(j.at("features").size(), sc.gt_road.edges.size());
}

// ---------------------------------------------------------------------------
// Scene directories

void expect_dirs_byte_identical(const std::string& a, const std::string& b) {
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(a))
    files.push_back(entry.path().filename().string());
  ASSERT_FALSE(files.empty());
  for (const auto& name : files) {
    EXPECT_TRUE(fs::exists(fs::path(b) / name)) << name;
    EXPECT_EQ(read_file(a + "/" + name), read_file(b + "/" + name)) << name;
  }
}

TEST(SceneDir, RoadWriteReadWriteIsByteIdentical) {
  const Scene sc = gen_scene(road_spec(8));
  const std::string a = tmp("scene_road_a");
  const std::string b = tmp("scene_road_b");
  write_scene(a, sc);
  const Scene back = read_scene(a);
  EXPECT_EQ(back.task, Task::kRoad);
  EXPECT_EQ(back.gt.size(), sc.gt.size());
  EXPECT_EQ(back.gt_road.edges, sc.gt_road.edges);
  write_scene(b, back);
  expect_dirs_byte_identical(a, b);
}

TEST(SceneDir, BuildingWriteReadWriteIsByteIdentical) {
  const Scene sc = gen_scene(building_spec(9));
  const std::string a = tmp("scene_bldg_a");
  const std::string b = tmp("scene_bldg_b");
  write_scene(a, sc);
  const Scene back = read_scene(a);
  EXPECT_EQ(back.task, Task::kBuilding);
  EXPECT_EQ(back.gt_polygons.size(), sc.gt_polygons.size());
  write_scene(b, back);
  expect_dirs_byte_identical(a, b);
}

TEST(SceneDir, ReadBackSceneIsTrainable) {
  const Scene sc = gen_scene(road_spec(10));
  const std::string dir = tmp("scene_trainable");
  write_scene(dir, sc);
  const Scene back = read_scene(dir);
  PipelineConfig cfg;
  cfg.model_dim = 16;
  cfg.heads = 2;
  cfg.layers = 1;
  const SceneSample sample = prepare_sample(back, cfg);
  EXPECT_TRUE(sample.usable());
}

TEST(SceneDir, ListsSortedSceneSubdirs) {
  const std::string root = tmp("dataset_list");
  fs::create_directories(root + "/s2");
  fs::create_directories(root + "/s0");
  fs::create_directories(root + "/s1");
  fs::create_directories(root + "/notes");  // no meta.json -> skipped
  for (const char* name : {"s0", "s1", "s2"})
    write_file(root + "/" + name + "/meta.json", "{}\n");
  EXPECT_EQ(list_scene_dirs(root), (std::vector<std::string>{"s0", "s1", "s2"}));
  EXPECT_THROW(list_scene_dirs(root + "/missing"), BadInput);
}

// ---------------------------------------------------------------------------
// Config text

PipelineConfig scrambled_config() {
  PipelineConfig cfg;
  cfg.nms_window = 5;
  cfg.min_score = 0.25;
  cfg.subpixel_peaks = false;
  cfg.priority_order = {2, 1, 5};
  cfg.dp_tolerance = 1.5;
  cfg.contour_level = 0.4;
  cfg.interp_interval = 12.5;
  cfg.pair_distance_threshold = 17.0;
  cfg.connect_threshold = 0.6;
  cfg.max_degree_map = {{1, 2}, {3, 6}};
  cfg.default_max_degree = 3;
  cfg.gt_match_cap = 4.0;
  cfg.max_primitives_train = 99;
  cfg.max_primitives_infer = 222;
  cfg.model_dim = 48;
  cfg.heads = 6;
  cfg.layers = 2;
  cfg.patch_size = 7;
  cfg.loi_samples = 5;
  cfg.learning_rate = 3.5e-4;
  cfg.batch_size = 2;
  cfg.stage_fraction = 0.25;
  cfg.embed_norm = false;
  cfg.aux_dir_weight = 0.75;
  cfg.lovasz_weight = 0.5;
  cfg.loss_weights = {0.9, 1.1, 0.8, 0.4, 1.2, 0.3, 0.6};
  cfg.incremental = false;
  cfg.use_reg = false;
  cfg.use_sort = false;
  return cfg;
}

TEST(ConfigText, EveryFieldRoundTrips) {
  const PipelineConfig cfg = scrambled_config();
  const std::string path = tmp("pipeline.cfg");
  write_config(path, cfg);
  const PipelineConfig back = read_config(path);
  EXPECT_EQ(config_text(back), config_text(cfg));
  EXPECT_EQ(back.nms_window, 5);
  EXPECT_EQ(back.priority_order, (std::vector<int>{2, 1, 5}));
  EXPECT_EQ(back.max_degree_map, (std::map<int, int>{{1, 2}, {3, 6}}));
  EXPECT_EQ(back.learning_rate, 3.5e-4);
  EXPECT_EQ(back.loss_weights.reg, 0.3);
  EXPECT_FALSE(back.use_sort);
}

TEST(ConfigText, DefaultsSurviveARoundTrip) {
  const std::string path = tmp("defaults.cfg");
  write_config(path, PipelineConfig{});
  EXPECT_EQ(config_text(read_config(path)), config_text(PipelineConfig{}));
}

TEST(ConfigText, RejectsUnknownKeysAndBadValues) {
  PipelineConfig cfg;
  EXPECT_THROW(apply_config_entry(cfg, "warp_speed", "9"), BadInput);
  EXPECT_THROW(apply_config_entry(cfg, "model_dim", "many"), BadInput);
  EXPECT_THROW(apply_config_entry(cfg, "embed_norm", "yes"), BadInput);
  EXPECT_THROW(apply_config_text(cfg, "model_dim: 32\n"), BadInput);
}

TEST(ConfigText, CommentsAndBlankLinesAreIgnored) {
  PipelineConfig cfg;
  apply_config_text(cfg, "# tuning\n\nmodel_dim = 32  # smaller\n heads = 2\n");
  EXPECT_EQ(cfg.model_dim, 32);
  EXPECT_EQ(cfg.heads, 2);
  EXPECT_EQ(cfg.layers, PipelineConfig{}.layers);  // untouched
}

// ---------------------------------------------------------------------------
// Manifest

TEST(Manifest, WritesCommandConfigAndPaths) {
  RunManifest m;
  m.command = "gen";
  m.config_snapshot = config_text(PipelineConfig{});
  m.seed = 42;
  m.inputs = {"in_a", "in_b"};
  m.outputs = {"out"};
  m.wall_clock = "2026-01-01T00:00:00Z";
  const std::string dir = tmp("manifest_dir");
  fs::create_directories(dir);
  write_manifest(dir, m);
  const json j = read_json(dir + "/manifest.json");
  EXPECT_EQ(j.at("command").get<std::string>(), "gen");
  EXPECT_EQ(j.at("seed").get<std::uint64_t>(), 42u);
  EXPECT_EQ(j.at("inputs").size(), 2u);
  EXPECT_EQ(j.at("config").get<std::string>(), config_text(PipelineConfig{}));
}

// ---------------------------------------------------------------------------
// SVG rendering

TEST(RenderSvg, EmitsLayeredDocument) {
  const Scene sc = gen_scene(road_spec(12));
  const std::string path = tmp("scene.svg");
  render_svg(path, &sc.bundle.intensity, &sc.gt_road, nullptr, &sc.gt_road, nullptr,
             &sc.gt, sc.bundle.intensity.w, sc.bundle.intensity.h);
  const std::string svg = read_file(path);
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  EXPECT_NE(svg.find("data:image/png;base64,iVBORw0KGgo"), std::string::npos);
  EXPECT_NE(svg.find("#1a9641"), std::string::npos);  // ground truth layer
  EXPECT_NE(svg.find("#d7191c"), std::string::npos);  // prediction layer
  EXPECT_NE(svg.find("stroke-dasharray"), std::string::npos);
}

TEST(RenderSvg, BuildingLayerUsesPolygons) {
  const Scene sc = gen_scene(building_spec(13));
  const std::string path = tmp("scene_bldg.svg");
  render_svg(path, &sc.bundle.intensity, nullptr, &sc.gt_polygons, nullptr, nullptr,
             nullptr, sc.bundle.intensity.w, sc.bundle.intensity.h);
  const std::string svg = read_file(path);
  EXPECT_NE(svg.find("<polygon"), std::string::npos);
  EXPECT_EQ(svg.find("stroke-dasharray"), std::string::npos);
}

}  // namespace
