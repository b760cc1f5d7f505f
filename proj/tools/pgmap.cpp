// pgmap: generate synthetic scenes, train the primitive model, run inference,
// evaluate predictions, and render results. Exit codes: 0 success, 2 bad
// input, 3 numeric failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <pgmap/io.hpp>
#include <pgmap/metrics.hpp>
#include <pgmap/train.hpp>

namespace {

using namespace pgmap;
namespace fs = std::filesystem;

constexpr const char* kVersion = "pgmap 0.1.0";

int env_threads() {
  const char* env = std::getenv("PGMAP_THREADS");
  if (!env) return 1;
  try {
    return std::max(1, std::stoi(env));
  } catch (const std::exception&) {
    throw BadInput("PGMAP_THREADS must be an integer");
  }
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string join_args(int argc, char** argv) {
  std::string out;
  for (int k = 0; k < argc; ++k) {
    if (k) out += ' ';
    out += argv[k];
  }
  return out;
}

std::string g_command_line;

// defaults -> config file -> --set overrides
PipelineConfig build_config(const std::string& config_path,
                            const std::vector<std::string>& sets) {
  PipelineConfig cfg;
  if (!config_path.empty()) apply_config_text(cfg, iodetail::slurp(config_path));
  for (const auto& kv : sets) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos) throw BadInput("--set expects key=value, got '" + kv + "'");
    apply_config_entry(cfg, iodetail::trim(kv.substr(0, eq)),
                       iodetail::trim(kv.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

RunManifest make_manifest(const std::string& config_snapshot, std::uint64_t seed,
                          std::vector<std::string> inputs,
                          std::vector<std::string> outputs) {
  RunManifest m;
  m.command = g_command_line;
  m.config_snapshot = config_snapshot;
  m.seed = seed;
  m.inputs = std::move(inputs);
  m.outputs = std::move(outputs);
  m.version = kVersion;
  m.wall_clock = utc_now();
  return m;
}

std::string scene_name(int index) {
  std::ostringstream name;
  name << "scene_" << std::setfill('0') << std::setw(4) << index;
  return name.str();
}

// ---------------------------------------------------------------------------
// gen

struct GenOptions {
  std::string spec_path;
  std::string out;
  int count = -1;              // overrides spec when >= 0
  std::int64_t seed = -1;      // overrides spec when >= 0
};

int run_gen(const GenOptions& opt) {
  GenSpec gen = read_gen_spec(opt.spec_path);
  if (opt.count >= 0) gen.count = opt.count;
  if (opt.seed >= 0) gen.scene.seed = static_cast<std::uint64_t>(opt.seed);
  if (gen.count <= 0) throw BadInput("scene count must be positive");
  gen.scene.validate();
  fs::create_directories(opt.out);
  std::vector<std::string> outputs;
  for (int k = 0; k < gen.count; ++k) {
    SceneSpec spec = gen.scene;
    spec.seed = gen.scene.seed + static_cast<std::uint64_t>(k);
    const std::string name = scene_name(k);
    write_scene(opt.out + "/" + name, gen_scene(spec));
    outputs.push_back(name);
  }
  write_manifest(opt.out, make_manifest(gen_spec_text(gen), gen.scene.seed,
                                        {opt.spec_path}, outputs));
  std::cout << "wrote " << gen.count << " scenes to " << opt.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainCliOptions {
  std::string data;
  std::string out;
  std::string config_path;
  std::vector<std::string> sets;
  int steps = 1000;
  std::uint64_t seed = 7;
  int threads = 0;  // 0 -> PGMAP_THREADS or 1
};

int run_train(const TrainCliOptions& opt) {
  const PipelineConfig cfg = build_config(opt.config_path, opt.sets);
  const std::vector<std::string> names = list_scene_dirs(opt.data);
  if (names.empty()) throw BadInput(opt.data + ": no scenes found");

  std::vector<SceneSample> samples;
  Task task = Task::kRoad;
  RasterBundle proto;
  for (std::size_t k = 0; k < names.size(); ++k) {
    const Scene sc = read_scene(opt.data + "/" + names[k]);
    if (k == 0) {
      task = sc.task;
      proto = sc.bundle;
    } else if (sc.task != task) {
      throw BadInput("training data mixes tasks: " + names[k]);
    }
    SceneSample sample = prepare_sample(sc, cfg);
    sample.bundle.intensity = Raster();  // imagery is not a model input
    samples.push_back(std::move(sample));
  }

  const PrimitiveKind kind =
      task == Task::kRoad ? PrimitiveKind::Point : PrimitiveKind::LineSegment;
  ParamStore params = init_pls_params(cfg, kind, proto, 2, opt.seed);

  TrainOptions topt;
  topt.steps = opt.steps;
  topt.seed = opt.seed;
  topt.threads = opt.threads > 0 ? opt.threads : env_threads();
  const std::vector<TrainRow> rows = train_run(params, samples, cfg, topt);

  fs::create_directories(opt.out);
  save_checkpoint(opt.out + "/checkpoint.pgck", params);
  write_loss_csv(opt.out + "/loss.csv", rows, cfg.loss_weights);
  write_manifest(opt.out, make_manifest(config_text(cfg), opt.seed, {opt.data},
                                        {"checkpoint.pgck", "loss.csv"}));
  if (!rows.empty())
    std::cout << "step " << rows.back().step << " total " << rows.back().loss.total
              << '\n';
  std::cout << "checkpoint written to " << opt.out << "/checkpoint.pgck\n";
  return 0;
}

// ---------------------------------------------------------------------------
// infer

struct InferOptions {
  std::string data;
  std::string checkpoint;
  std::string out;
  std::string config_path;
  std::vector<std::string> sets;
  bool oracle = false;
};

// Decoded building corners as a node/edge graph (ring adjacency).
RoadGraph corner_graph(const std::vector<BuildingPolygon>& polys) {
  RoadGraph g;
  for (const auto& poly : polys) {
    const int base = static_cast<int>(g.nodes.size());
    const int m = static_cast<int>(poly.ring.size());
    for (const auto& v : poly.ring) {
      g.nodes.push_back(v);
      g.categories.push_back(kCorner);
    }
    for (int k = 0; k < m; ++k) {
      const int a = base + k, b = base + (k + 1) % m;
      g.edges.emplace_back(std::min(a, b), std::max(a, b));
    }
  }
  return g;
}

int run_infer(const InferOptions& opt) {
  const PipelineConfig cfg = build_config(opt.config_path, opt.sets);
  const std::vector<std::string> names = list_scene_dirs(opt.data);
  if (names.empty()) throw BadInput(opt.data + ": no scenes found");

  ParamStore params;
  if (!opt.oracle) params = load_checkpoint(opt.checkpoint);
  bool params_checked = false;

  fs::create_directories(opt.out);
  std::vector<std::string> outputs;
  for (const auto& name : names) {
    const Scene sc = read_scene(opt.data + "/" + name);
    const PrimitiveKind kind =
        sc.task == Task::kRoad ? PrimitiveKind::Point : PrimitiveKind::LineSegment;
    if (!opt.oracle && !params_checked) {
      // surface shape mismatches before any forward pass
      const ParamStore expect = init_pls_params(cfg, kind, sc.bundle, 2, 0);
      for (const auto& [tname, m] : expect.tensors) {
        auto it = params.tensors.find(tname);
        if (it == params.tensors.end())
          throw BadInput(opt.checkpoint + ": missing tensor " + tname);
        if (it->second.rows() != m.rows() || it->second.cols() != m.cols())
          throw BadInput(opt.checkpoint + ": tensor " + tname +
                         " has the wrong shape for this config");
      }
      if (params.tensors.size() != expect.tensors.size())
        throw BadInput(opt.checkpoint + ": unexpected extra tensors");
      params_checked = true;
    }

    const SceneDecodeResult res = opt.oracle
                                      ? oracle_scene(sc.bundle, sc.gt, cfg, sc.task)
                                      : assemble_scene(sc.bundle, cfg, params, sc.task);
    const std::string dir = opt.out + "/" + name;
    fs::create_directories(dir);
    write_json(dir + "/primitives.json", primitive_graph_json(res.graph, kind));
    if (sc.task == Task::kRoad) {
      write_json(dir + "/graph.json", road_graph_json(res.road));
      write_json(dir + "/map.geojson", geojson_roads(res.road));
    } else {
      write_json(dir + "/graph.json", road_graph_json(corner_graph(res.buildings)));
      write_json(dir + "/map.geojson", geojson_buildings(res.buildings));
    }
    outputs.push_back(name);
  }
  write_manifest(opt.out, make_manifest(config_text(cfg), 0,
                                        {opt.data, opt.oracle ? "(oracle)" : opt.checkpoint},
                                        outputs));
  std::cout << "inferred " << names.size() << " scenes to " << opt.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::string pred;
  std::string data;
  std::string out;
};

json report_json(const MetricReport& r, Task task) {
  if (task == Task::kRoad)
    return json{{"topo_precision", r.topo_precision},
                {"topo_recall", r.topo_recall},
                {"topo_f1", r.topo_f1},
                {"apls", r.apls},
                {"topo_matched_seeds", r.topo_matched_seeds},
                {"topo_total_seeds", r.topo_total_seeds}};
  json j{{"iou", r.iou},
         {"ciou", r.ciou},
         {"n_ratio", r.n_ratio},
         {"matched_polygons", r.matched_polygons}};
  if (r.has_mta) j["mta"] = r.mta;
  return j;
}

int run_eval(const EvalOptions& opt) {
  const std::vector<std::string> names = list_scene_dirs(opt.data);
  if (names.empty()) throw BadInput(opt.data + ": no scenes found");

  json scenes = json::object();
  std::vector<std::string> missing;
  std::map<std::string, double> sums;
  int evaluated = 0;
  Task task = Task::kRoad;
  for (const auto& name : names) {
    const Scene sc = read_scene(opt.data + "/" + name);
    task = sc.task;
    const std::string pdir = opt.pred + "/" + name;
    const std::string artifact =
        sc.task == Task::kRoad ? pdir + "/graph.json" : pdir + "/map.geojson";
    if (!fs::exists(artifact)) {
      missing.push_back(name);
      continue;
    }
    MetricReport r;
    if (sc.task == Task::kRoad) {
      const RoadGraph pred = road_graph_from_json(read_json(artifact));
      r = road_metrics(pred, sc.gt_road);
    } else {
      const auto pred = buildings_from_geojson(read_json(artifact));
      r = building_metrics(pred, sc.gt_polygons);
    }
    const json jr = report_json(r, sc.task);
    scenes[name] = jr;
    for (const auto& [key, value] : jr.items())
      if (value.is_number()) sums[key] += value.get<double>();
    ++evaluated;
  }

  json aggregate = json::object();
  for (const auto& [key, total] : sums)
    aggregate[key] = evaluated ? total / evaluated : 0.0;
  const json report{{"task", task == Task::kRoad ? "road" : "building"},
                    {"evaluated", evaluated},
                    {"missing", missing},
                    {"scenes", scenes},
                    {"aggregate", aggregate}};
  fs::create_directories(opt.out);
  write_json(opt.out + "/report.json", report);
  write_manifest(opt.out,
                 make_manifest("", 0, {opt.pred, opt.data}, {"report.json"}));
  std::cout << "evaluated " << evaluated << " scenes";
  if (!missing.empty()) std::cout << " (" << missing.size() << " missing)";
  std::cout << "; report at " << opt.out << "/report.json\n";
  return 0;
}

// ---------------------------------------------------------------------------
// render

struct RenderOptions {
  std::string scene;
  std::string pred;  // per-scene prediction dir, optional
  std::string out;
};

int run_render(const RenderOptions& opt) {
  const Scene sc = read_scene(opt.scene);
  RoadGraph pred_road;
  std::vector<BuildingPolygon> pred_polys;
  PrimitiveGraph pred_prims;
  bool have_road = false, have_polys = false, have_prims = false;
  if (!opt.pred.empty()) {
    if (sc.task == Task::kRoad && fs::exists(opt.pred + "/graph.json")) {
      pred_road = road_graph_from_json(read_json(opt.pred + "/graph.json"));
      have_road = true;
    }
    if (sc.task == Task::kBuilding && fs::exists(opt.pred + "/map.geojson")) {
      pred_polys = buildings_from_geojson(read_json(opt.pred + "/map.geojson"));
      have_polys = true;
    }
    if (fs::exists(opt.pred + "/primitives.json")) {
      pred_prims = primitive_graph_from_json(read_json(opt.pred + "/primitives.json"));
      have_prims = true;
    }
  }
  render_svg(opt.out, &sc.bundle.intensity,
             sc.task == Task::kRoad ? &sc.gt_road : nullptr,
             sc.task == Task::kBuilding ? &sc.gt_polygons : nullptr,
             have_road ? &pred_road : nullptr, have_polys ? &pred_polys : nullptr,
             have_prims ? &pred_prims : nullptr, sc.bundle.intensity.w,
             sc.bundle.intensity.h);
  std::cout << "rendered " << opt.out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  g_command_line = join_args(argc, argv);

  CLI::App app{"primitive graph mapping pipeline"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  GenOptions gopt;
  CLI::App* gen = app.add_subcommand("gen", "generate synthetic scenes");
  gen->add_option("--spec", gopt.spec_path, "scene spec file")->required();
  gen->add_option("--out", gopt.out, "output dataset directory")->required();
  gen->add_option("--count", gopt.count, "override scene count");
  gen->add_option("--seed", gopt.seed, "override base seed");

  TrainCliOptions topt;
  CLI::App* train = app.add_subcommand("train", "train the primitive model");
  train->add_option("--data", topt.data, "scene dataset directory")->required();
  train->add_option("--out", topt.out, "output directory")->required();
  train->add_option("--config", topt.config_path, "pipeline config file");
  train->add_option("--set", topt.sets, "config override key=value");
  train->add_option("--steps", topt.steps, "optimizer steps");
  train->add_option("--seed", topt.seed, "init + batch seed");
  train->add_option("--threads", topt.threads, "worker threads (default PGMAP_THREADS)");

  InferOptions iopt;
  CLI::App* infer = app.add_subcommand("infer", "decode vector maps from scenes");
  infer->add_option("--data", iopt.data, "scene dataset directory")->required();
  infer->add_option("--checkpoint", iopt.checkpoint, "trained checkpoint");
  infer->add_option("--out", iopt.out, "output directory")->required();
  infer->add_option("--config", iopt.config_path, "pipeline config file");
  infer->add_option("--set", iopt.sets, "config override key=value");
  infer->add_flag("--oracle", iopt.oracle,
                  "use ground-truth relationship probabilities instead of the model");

  EvalOptions eopt;
  CLI::App* eval = app.add_subcommand("eval", "score predictions against ground truth");
  eval->add_option("--pred", eopt.pred, "inference output directory")->required();
  eval->add_option("--data", eopt.data, "ground-truth dataset directory")->required();
  eval->add_option("--out", eopt.out, "report directory")->required();

  RenderOptions ropt;
  CLI::App* render = app.add_subcommand("render", "render a scene to SVG");
  render->add_option("--scene", ropt.scene, "scene directory")->required();
  render->add_option("--pred", ropt.pred, "per-scene prediction directory");
  render->add_option("--out", ropt.out, "output SVG path")->required();

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return run_gen(gopt);
    if (train->parsed()) return run_train(topt);
    if (infer->parsed()) {
      if (!iopt.oracle && iopt.checkpoint.empty())
        throw BadInput("--checkpoint is required unless --oracle is set");
      return run_infer(iopt);
    }
    if (eval->parsed()) return run_eval(eopt);
    if (render->parsed()) return run_render(ropt);
    return 2;
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const BadInput& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
