#pragma once

#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include <pgmap/core.hpp>
#include <pgmap/decode.hpp>
#include <pgmap/pls.hpp>
#include <pgmap/synthgen.hpp>

// File formats. Binary containers carry little-endian headers and float32
// payloads; everything text-based goes through nlohmann::json so numbers get
// shortest round-trip formatting and write -> read -> write is byte-stable.

namespace pgmap {

using json = nlohmann::json;

namespace iodetail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

// Cursor-based reader that throws instead of running off the end.
struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw BadInput("truncated binary file");
  }
  std::uint16_t u16() {
    need(2);
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
    pos += 2;
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }
  std::uint32_t u32() {
    need(4);
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
    pos += 4;
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) |
           (static_cast<std::uint32_t>(p[3]) << 24);
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw BadInput("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw BadInput("cannot write " + path);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw BadInput("short write to " + path);
}

}  // namespace iodetail

// ---------------------------------------------------------------------------
// Raster container: magic "PGRB", version, H/W/C, channel-name table, then
// one row-major float32 plane per channel.

inline void write_raster(const std::string& path, const Raster& r,
                         const std::vector<std::string>& channel_names) {
  if (r.empty()) throw BadInput("refusing to write an empty raster");
  if (static_cast<int>(channel_names.size()) != r.c)
    throw BadInput("one channel name per channel required");
  std::string out = "PGRB";
  iodetail::put_u16(out, 1);
  iodetail::put_u32(out, static_cast<std::uint32_t>(r.h));
  iodetail::put_u32(out, static_cast<std::uint32_t>(r.w));
  iodetail::put_u32(out, static_cast<std::uint32_t>(r.c));
  for (const auto& name : channel_names) {
    iodetail::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
  }
  for (int ch = 0; ch < r.c; ++ch)
    for (int y = 0; y < r.h; ++y)
      for (int x = 0; x < r.w; ++x)
        iodetail::put_f32(out, static_cast<float>(r.at(y, x, ch)));
  iodetail::spit(path, out);
}

inline Raster read_raster(const std::string& path,
                          std::vector<std::string>* channel_names = nullptr) {
  const std::string buf = iodetail::slurp(path);
  iodetail::Reader rd{buf};
  if (rd.bytes(4) != "PGRB") throw BadInput(path + ": not a raster container");
  if (rd.u16() != 1) throw BadInput(path + ": unsupported raster version");
  const int h = static_cast<int>(rd.u32());
  const int w = static_cast<int>(rd.u32());
  const int c = static_cast<int>(rd.u32());
  if (h <= 0 || w <= 0 || c <= 0 || h > 1 << 16 || w > 1 << 16 || c > 1 << 10)
    throw BadInput(path + ": implausible raster header");
  std::vector<std::string> names;
  for (int ch = 0; ch < c; ++ch) names.push_back(rd.bytes(rd.u16()));
  Raster r(h, w, c);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) r.at(y, x, ch) = rd.f32();
  if (rd.pos != buf.size()) throw BadInput(path + ": trailing bytes");
  if (channel_names) *channel_names = std::move(names);
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoint: magic "PGCK", then named float32 tensors and a trailing CRC32
// of everything between the magic and the checksum.

inline void save_checkpoint(const std::string& path, const ParamStore& params) {
  std::string body;
  iodetail::put_u16(body, 1);
  iodetail::put_u32(body, static_cast<std::uint32_t>(params.tensors.size()));
  for (const auto& [name, m] : params.tensors) {
    iodetail::put_u16(body, static_cast<std::uint16_t>(name.size()));
    body += name;
    iodetail::put_u32(body, static_cast<std::uint32_t>(m.rows()));
    iodetail::put_u32(body, static_cast<std::uint32_t>(m.cols()));
    for (int r = 0; r < m.rows(); ++r)
      for (int c = 0; c < m.cols(); ++c)
        iodetail::put_f32(body, static_cast<float>(m(r, c)));
  }
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(body.data()),
            static_cast<uInt>(body.size())));
  std::string out = "PGCK" + body;
  iodetail::put_u32(out, crc);
  iodetail::spit(path, out);
}

inline ParamStore load_checkpoint(const std::string& path) {
  const std::string buf = iodetail::slurp(path);
  if (buf.size() < 8 || buf.compare(0, 4, "PGCK") != 0)
    throw BadInput(path + ": not a checkpoint");
  const std::string body = buf.substr(4, buf.size() - 8);
  iodetail::Reader tail{buf};
  tail.pos = buf.size() - 4;
  const std::uint32_t stored = tail.u32();
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(body.data()),
            static_cast<uInt>(body.size())));
  if (crc != stored) throw BadInput(path + ": checksum mismatch");
  iodetail::Reader rd{body};
  if (rd.u16() != 1) throw BadInput(path + ": unsupported checkpoint version");
  const std::uint32_t count = rd.u32();
  ParamStore params;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string name = rd.bytes(rd.u16());
    const int rows = static_cast<int>(rd.u32());
    const int cols = static_cast<int>(rd.u32());
    if (rows <= 0 || cols <= 0) throw BadInput(path + ": bad tensor shape");
    Eigen::MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) m(r, c) = rd.f32();
    params.tensors[name] = std::move(m);
  }
  if (rd.pos != body.size()) throw BadInput(path + ": trailing bytes");
  return params;
}

// ---------------------------------------------------------------------------
// Graph JSON

inline json road_graph_json(const RoadGraph& g) {
  json nodes = json::array();
  for (std::size_t i = 0; i < g.nodes.size(); ++i)
    nodes.push_back({g.nodes[i].x, g.nodes[i].y, g.categories[i]});
  json edges = json::array();
  for (const auto& [i, j] : g.edges) edges.push_back({i, j});
  return json{{"nodes", nodes}, {"edges", edges}};
}

inline RoadGraph road_graph_from_json(const json& j) {
  RoadGraph g;
  for (const auto& n : j.at("nodes")) {
    if (!n.is_array() || n.size() != 3) throw BadInput("node rows are [x,y,category]");
    g.nodes.push_back({n[0].get<double>(), n[1].get<double>()});
    g.categories.push_back(n[2].get<int>());
  }
  for (const auto& e : j.at("edges")) {
    if (!e.is_array() || e.size() != 2) throw BadInput("edge rows are [i,j]");
    g.edges.emplace_back(e[0].get<int>(), e[1].get<int>());
  }
  g.validate();
  return g;
}

// Primitive graphs: coordinate rows plus category/score/contour metadata, and
// the relationship matrix stored sparsely as [i, j, label, prob] for the
// upper triangle of non-zero labels.
inline json primitive_graph_json(const PrimitiveGraph& g,
                                 PrimitiveKind empty_kind = PrimitiveKind::Point) {
  const bool segments = g.size() > 0
                            ? g.primitives.front().kind == PrimitiveKind::LineSegment
                            : empty_kind == PrimitiveKind::LineSegment;
  json prims = json::array();
  for (const auto& p : g.primitives) {
    json row = json::array();
    const int d = p.kind == PrimitiveKind::Point ? 2 : 4;
    for (int c = 0; c < d; ++c) row.push_back(p.coords[c]);
    row.push_back(p.category);
    row.push_back(p.score);
    row.push_back(p.contour_id);
    row.push_back(p.contour_index);
    prims.push_back(row);
  }
  json rels = json::array();
  for (int i = 0; i < g.size(); ++i)
    for (int j = i + 1; j < g.size(); ++j) {
      const int label = g.relations.size() ? g.relations(i, j) : 0;
      if (label == 0) continue;
      const double prob =
          g.relation_probs.empty() ? 1.0 : g.relation_probs[label](i, j);
      rels.push_back({i, j, label, prob});
    }
  return json{{"kind", segments ? "segment" : "point"},
              {"primitives", prims},
              {"relations", rels}};
}

inline PrimitiveGraph primitive_graph_from_json(const json& j) {
  PrimitiveGraph g;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind != "point" && kind != "segment") throw BadInput("unknown primitive kind");
  const int d = kind == "point" ? 2 : 4;
  for (const auto& row : j.at("primitives")) {
    if (!row.is_array() || static_cast<int>(row.size()) != d + 4)
      throw BadInput("bad primitive row length");
    Primitive p = kind == "point"
                      ? Primitive::point(row[0].get<double>(), row[1].get<double>())
                      : Primitive::segment(row[0].get<double>(), row[1].get<double>(),
                                           row[2].get<double>(), row[3].get<double>());
    p.category = row[d].get<int>();
    p.score = row[d + 1].get<double>();
    p.contour_id = row[d + 2].get<int>();
    p.contour_index = row[d + 3].get<int>();
    g.primitives.push_back(p);
  }
  g.init_relations();
  const json& rels = j.at("relations");
  if (!rels.empty()) {
    const int n = g.size();
    g.relation_probs.assign(2, Eigen::MatrixXd::Zero(n, n));
    g.relation_probs[0] = Eigen::MatrixXd::Ones(n, n);
    for (const auto& r : rels) {
      if (!r.is_array() || r.size() != 4)
        throw BadInput("relation rows are [i,j,label,prob]");
      const int i = r[0].get<int>(), jj = r[1].get<int>();
      const int label = r[2].get<int>();
      const double prob = r[3].get<double>();
      if (i < 0 || jj < 0 || i >= n || jj >= n || i == jj)
        throw BadInput("relation index out of range");
      if (label != 1) throw BadInput("sparse relations store non-zero labels only");
      g.relations(i, jj) = g.relations(jj, i) = label;
      g.relation_probs[1](i, jj) = g.relation_probs[1](jj, i) = prob;
      g.relation_probs[0](i, jj) = g.relation_probs[0](jj, i) = 1.0 - prob;
    }
  }
  g.validate();
  return g;
}

// ---------------------------------------------------------------------------
// GeoJSON (pixel coordinates)

inline json geojson_roads(const RoadGraph& g) {
  json features = json::array();
  for (const auto& [i, j] : g.edges) {
    json coords = json::array();
    coords.push_back({g.nodes[i].x, g.nodes[i].y});
    coords.push_back({g.nodes[j].x, g.nodes[j].y});
    features.push_back(
        {{"type", "Feature"},
         {"geometry", {{"type", "LineString"}, {"coordinates", coords}}},
         {"properties", json::object()}});
  }
  return json{{"type", "FeatureCollection"}, {"features", features}};
}

inline json geojson_buildings(const std::vector<BuildingPolygon>& polys) {
  json features = json::array();
  for (const auto& poly : polys) {
    json ring = json::array();
    for (const auto& v : poly.ring) ring.push_back({v.x, v.y});
    ring.push_back({poly.ring.front().x, poly.ring.front().y});  // closed
    json props = json::object();
    props["directions"] = poly.directions;
    features.push_back(
        {{"type", "Feature"},
         {"geometry", {{"type", "Polygon"}, {"coordinates", json::array({ring})}}},
         {"properties", props}});
  }
  return json{{"type", "FeatureCollection"}, {"features", features}};
}

inline std::vector<BuildingPolygon> buildings_from_geojson(const json& j) {
  if (j.at("type").get<std::string>() != "FeatureCollection")
    throw BadInput("expected a FeatureCollection");
  std::vector<BuildingPolygon> polys;
  for (const auto& f : j.at("features")) {
    const json& geom = f.at("geometry");
    if (geom.at("type").get<std::string>() != "Polygon")
      throw BadInput("building features must be polygons");
    const json& ring = geom.at("coordinates").at(0);
    if (ring.size() < 4) throw BadInput("polygon ring too short");
    BuildingPolygon poly;
    for (std::size_t k = 0; k + 1 < ring.size(); ++k)
      poly.ring.push_back({ring[k][0].get<double>(), ring[k][1].get<double>()});
    if (f.contains("properties") && f["properties"].contains("directions")) {
      poly.directions = f["properties"]["directions"].get<std::vector<double>>();
    } else {
      for (std::size_t k = 0; k < poly.ring.size(); ++k) {
        const Vec2 a = poly.ring[k];
        const Vec2 b = poly.ring[(k + 1) % poly.ring.size()];
        double ang = std::atan2(b.y - a.y, b.x - a.x);
        if (ang < 0) ang += kPi;
        if (ang >= kPi) ang -= kPi;
        poly.directions.push_back(ang);
      }
    }
    poly.validate();
    polys.push_back(std::move(poly));
  }
  return polys;
}

// ---------------------------------------------------------------------------
// JSON file helpers (2-space indent, trailing newline, sorted keys)

inline void write_json(const std::string& path, const json& j) {
  iodetail::spit(path, j.dump(2) + "\n");
}

inline json read_json(const std::string& path) {
  const std::string text = iodetail::slurp(path);
  json j = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw BadInput(path + ": invalid JSON");
  return j;
}

// ---------------------------------------------------------------------------
// Scene directories

namespace iodetail {

inline std::vector<std::string> kp_channel_names(Task task, int c) {
  if (task == Task::kRoad && c == 5)
    return {"background", "junction", "overlay", "endpoint", "interpolated"};
  if (task == Task::kBuilding && c == 2) return {"background", "corner"};
  std::vector<std::string> names;
  for (int k = 0; k < c; ++k) names.push_back("kp" + std::to_string(k));
  return names;
}

}  // namespace iodetail

inline void write_scene(const std::string& dir, const Scene& sc) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  write_json(dir + "/meta.json",
             json{{"task", sc.task == Task::kRoad ? "road" : "building"}});
  write_raster(dir + "/seg.pgrb", sc.bundle.seg, {"background", "foreground"});
  write_raster(dir + "/kp.pgrb", sc.bundle.kp,
               iodetail::kp_channel_names(sc.task, sc.bundle.kp.c));
  write_raster(dir + "/features.pgrb", sc.bundle.features,
               {"intensity", "foreground", "distance", "dir_cos", "dir_sin", "bias"});
  write_raster(dir + "/intensity.pgrb", sc.bundle.intensity, {"red", "green", "blue"});
  write_json(dir + "/gt_primitives.json", primitive_graph_json(sc.gt));
  if (sc.task == Task::kRoad)
    write_json(dir + "/gt_road.json", road_graph_json(sc.gt_road));
  else
    write_json(dir + "/gt_polygons.geojson", geojson_buildings(sc.gt_polygons));
}

inline Scene read_scene(const std::string& dir) {
  Scene sc;
  const json meta = read_json(dir + "/meta.json");
  const std::string task = meta.at("task").get<std::string>();
  if (task != "road" && task != "building") throw BadInput(dir + ": unknown task");
  sc.task = task == "road" ? Task::kRoad : Task::kBuilding;
  sc.bundle.seg = read_raster(dir + "/seg.pgrb");
  sc.bundle.kp = read_raster(dir + "/kp.pgrb");
  sc.bundle.features = read_raster(dir + "/features.pgrb");
  sc.bundle.intensity = read_raster(dir + "/intensity.pgrb");
  sc.bundle.validate();
  sc.gt = primitive_graph_from_json(read_json(dir + "/gt_primitives.json"));
  if (sc.task == Task::kRoad)
    sc.gt_road = road_graph_from_json(read_json(dir + "/gt_road.json"));
  else
    sc.gt_polygons = buildings_from_geojson(read_json(dir + "/gt_polygons.geojson"));
  return sc;
}

// Scene subdirectories of a dataset directory, sorted by name.
inline std::vector<std::string> list_scene_dirs(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw BadInput(dir + ": not a directory");
  std::vector<std::string> out;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_directory() && fs::exists(entry.path() / "meta.json"))
      out.push_back(entry.path().filename().string());
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Config text: "key = value" lines, every PipelineConfig field addressable.

namespace iodetail {

inline std::string num(double v) { return json(v).dump(); }

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  std::size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw BadInput("config: bad number for " + key + ": '" + v + "'");
  }
}

inline int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const int i = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw BadInput("config: bad integer for " + key + ": '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw BadInput("config: bad boolean for " + key + ": '" + v + "'");
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      parts.push_back(trim(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  parts.push_back(trim(cur));
  return parts;
}

}  // namespace iodetail

inline void apply_config_entry(PipelineConfig& cfg, const std::string& key,
                               const std::string& value) {
  using iodetail::to_bool;
  using iodetail::to_double;
  using iodetail::to_int;
  if (key == "nms_window") cfg.nms_window = to_int(key, value);
  else if (key == "min_score") cfg.min_score = to_double(key, value);
  else if (key == "subpixel_peaks") cfg.subpixel_peaks = to_bool(key, value);
  else if (key == "priority_order") {
    cfg.priority_order.clear();
    for (const auto& part : iodetail::split(value, ','))
      cfg.priority_order.push_back(to_int(key, part));
  } else if (key == "dp_tolerance") cfg.dp_tolerance = to_double(key, value);
  else if (key == "contour_level") cfg.contour_level = to_double(key, value);
  else if (key == "interp_interval") cfg.interp_interval = to_double(key, value);
  else if (key == "pair_distance_threshold") cfg.pair_distance_threshold = to_double(key, value);
  else if (key == "connect_threshold") cfg.connect_threshold = to_double(key, value);
  else if (key == "max_degree_map") {
    cfg.max_degree_map.clear();
    for (const auto& part : iodetail::split(value, ',')) {
      const auto kv = iodetail::split(part, ':');
      if (kv.size() != 2) throw BadInput("config: max_degree_map entries are cat:deg");
      cfg.max_degree_map[to_int(key, kv[0])] = to_int(key, kv[1]);
    }
  } else if (key == "default_max_degree") cfg.default_max_degree = to_int(key, value);
  else if (key == "gt_match_cap") cfg.gt_match_cap = to_double(key, value);
  else if (key == "max_primitives_train") cfg.max_primitives_train = to_int(key, value);
  else if (key == "max_primitives_infer") cfg.max_primitives_infer = to_int(key, value);
  else if (key == "model_dim") cfg.model_dim = to_int(key, value);
  else if (key == "heads") cfg.heads = to_int(key, value);
  else if (key == "layers") cfg.layers = to_int(key, value);
  else if (key == "patch_size") cfg.patch_size = to_int(key, value);
  else if (key == "loi_samples") cfg.loi_samples = to_int(key, value);
  else if (key == "learning_rate") cfg.learning_rate = to_double(key, value);
  else if (key == "batch_size") cfg.batch_size = to_int(key, value);
  else if (key == "stage_fraction") cfg.stage_fraction = to_double(key, value);
  else if (key == "embed_norm") cfg.embed_norm = to_bool(key, value);
  else if (key == "aux_dir_weight") cfg.aux_dir_weight = to_double(key, value);
  else if (key == "lovasz_weight") cfg.lovasz_weight = to_double(key, value);
  else if (key == "loss_weights.seg") cfg.loss_weights.seg = to_double(key, value);
  else if (key == "loss_weights.kp") cfg.loss_weights.kp = to_double(key, value);
  else if (key == "loss_weights.off") cfg.loss_weights.off = to_double(key, value);
  else if (key == "loss_weights.dir") cfg.loss_weights.dir = to_double(key, value);
  else if (key == "loss_weights.rel") cfg.loss_weights.rel = to_double(key, value);
  else if (key == "loss_weights.reg") cfg.loss_weights.reg = to_double(key, value);
  else if (key == "loss_weights.aux") cfg.loss_weights.aux = to_double(key, value);
  else if (key == "incremental") cfg.incremental = to_bool(key, value);
  else if (key == "use_reg") cfg.use_reg = to_bool(key, value);
  else if (key == "use_sort") cfg.use_sort = to_bool(key, value);
  else throw BadInput("config: unknown key '" + key + "'");
}

inline std::string config_text(const PipelineConfig& cfg) {
  using iodetail::num;
  std::ostringstream out;
  auto b = [](bool v) { return v ? "true" : "false"; };
  out << "nms_window = " << cfg.nms_window << '\n';
  out << "min_score = " << num(cfg.min_score) << '\n';
  out << "subpixel_peaks = " << b(cfg.subpixel_peaks) << '\n';
  out << "priority_order = ";
  for (std::size_t k = 0; k < cfg.priority_order.size(); ++k)
    out << (k ? "," : "") << cfg.priority_order[k];
  out << '\n';
  out << "dp_tolerance = " << num(cfg.dp_tolerance) << '\n';
  out << "contour_level = " << num(cfg.contour_level) << '\n';
  out << "interp_interval = " << num(cfg.interp_interval) << '\n';
  out << "pair_distance_threshold = " << num(cfg.pair_distance_threshold) << '\n';
  out << "connect_threshold = " << num(cfg.connect_threshold) << '\n';
  out << "max_degree_map = ";
  {
    bool first = true;
    for (const auto& [cat, deg] : cfg.max_degree_map) {
      out << (first ? "" : ",") << cat << ':' << deg;
      first = false;
    }
  }
  out << '\n';
  out << "default_max_degree = " << cfg.default_max_degree << '\n';
  out << "gt_match_cap = " << num(cfg.gt_match_cap) << '\n';
  out << "max_primitives_train = " << cfg.max_primitives_train << '\n';
  out << "max_primitives_infer = " << cfg.max_primitives_infer << '\n';
  out << "model_dim = " << cfg.model_dim << '\n';
  out << "heads = " << cfg.heads << '\n';
  out << "layers = " << cfg.layers << '\n';
  out << "patch_size = " << cfg.patch_size << '\n';
  out << "loi_samples = " << cfg.loi_samples << '\n';
  out << "learning_rate = " << num(cfg.learning_rate) << '\n';
  out << "batch_size = " << cfg.batch_size << '\n';
  out << "stage_fraction = " << num(cfg.stage_fraction) << '\n';
  out << "embed_norm = " << b(cfg.embed_norm) << '\n';
  out << "aux_dir_weight = " << num(cfg.aux_dir_weight) << '\n';
  out << "lovasz_weight = " << num(cfg.lovasz_weight) << '\n';
  out << "loss_weights.seg = " << num(cfg.loss_weights.seg) << '\n';
  out << "loss_weights.kp = " << num(cfg.loss_weights.kp) << '\n';
  out << "loss_weights.off = " << num(cfg.loss_weights.off) << '\n';
  out << "loss_weights.dir = " << num(cfg.loss_weights.dir) << '\n';
  out << "loss_weights.rel = " << num(cfg.loss_weights.rel) << '\n';
  out << "loss_weights.reg = " << num(cfg.loss_weights.reg) << '\n';
  out << "loss_weights.aux = " << num(cfg.loss_weights.aux) << '\n';
  out << "incremental = " << b(cfg.incremental) << '\n';
  out << "use_reg = " << b(cfg.use_reg) << '\n';
  out << "use_sort = " << b(cfg.use_sort) << '\n';
  return out.str();
}

// Apply "key = value" lines (comments with #, blank lines allowed) on top of
// the given defaults.
inline void apply_config_text(PipelineConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string stripped = iodetail::trim(line.substr(0, line.find('#')));
    if (stripped.empty()) continue;
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw BadInput("config line " + std::to_string(lineno) + ": expected key = value");
    apply_config_entry(cfg, iodetail::trim(stripped.substr(0, eq)),
                       iodetail::trim(stripped.substr(eq + 1)));
  }
}

inline void write_config(const std::string& path, const PipelineConfig& cfg) {
  iodetail::spit(path, config_text(cfg));
}

inline PipelineConfig read_config(const std::string& path) {
  PipelineConfig cfg;
  apply_config_text(cfg, iodetail::slurp(path));
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Scene generation spec: same "key = value" shape as the pipeline config,
// plus a scene count.

struct GenSpec {
  SceneSpec scene;
  int count = 8;
};

inline void apply_gen_entry(GenSpec& gen, const std::string& key,
                            const std::string& value) {
  using iodetail::to_bool;
  using iodetail::to_double;
  using iodetail::to_int;
  SceneSpec& s = gen.scene;
  if (key == "task") {
    if (value == "road") s.task = Task::kRoad;
    else if (value == "building") s.task = Task::kBuilding;
    else throw BadInput("spec: task must be road or building");
  } else if (key == "count") gen.count = to_int(key, value);
  else if (key == "height") s.height = to_int(key, value);
  else if (key == "width") s.width = to_int(key, value);
  else if (key == "grid_cells_min") s.grid_cells_min = to_int(key, value);
  else if (key == "grid_cells_max") s.grid_cells_max = to_int(key, value);
  else if (key == "node_jitter") s.node_jitter = to_double(key, value);
  else if (key == "curvature") s.curvature = to_double(key, value);
  else if (key == "edge_dropout") s.edge_dropout = to_double(key, value);
  else if (key == "overlay_min") s.overlay_min = to_int(key, value);
  else if (key == "overlay_max") s.overlay_max = to_int(key, value);
  else if (key == "require_connected") s.require_connected = to_bool(key, value);
  else if (key == "interp_interval") s.interp_interval = to_double(key, value);
  else if (key == "building_min") s.building_min = to_int(key, value);
  else if (key == "building_max") s.building_max = to_int(key, value);
  else if (key == "rotate_fraction") s.rotate_fraction = to_double(key, value);
  else if (key == "split_prob") s.split_prob = to_double(key, value);
  else if (key == "jitter_sigma") s.jitter_sigma = to_double(key, value);
  else if (key == "kp_dropout") s.kp_dropout = to_double(key, value);
  else if (key == "blur_sigma") s.blur_sigma = to_double(key, value);
  else if (key == "seed") {
    try {
      std::size_t used = 0;
      s.seed = std::stoull(value, &used);
      if (used != value.size()) throw std::invalid_argument(value);
    } catch (const std::exception&) {
      throw BadInput("spec: bad seed '" + value + "'");
    }
  } else throw BadInput("spec: unknown key '" + key + "'");
}

inline std::string gen_spec_text(const GenSpec& gen) {
  using iodetail::num;
  const SceneSpec& s = gen.scene;
  std::ostringstream out;
  auto b = [](bool v) { return v ? "true" : "false"; };
  out << "task = " << (s.task == Task::kRoad ? "road" : "building") << '\n';
  out << "count = " << gen.count << '\n';
  out << "height = " << s.height << '\n';
  out << "width = " << s.width << '\n';
  out << "grid_cells_min = " << s.grid_cells_min << '\n';
  out << "grid_cells_max = " << s.grid_cells_max << '\n';
  out << "node_jitter = " << num(s.node_jitter) << '\n';
  out << "curvature = " << num(s.curvature) << '\n';
  out << "edge_dropout = " << num(s.edge_dropout) << '\n';
  out << "overlay_min = " << s.overlay_min << '\n';
  out << "overlay_max = " << s.overlay_max << '\n';
  out << "require_connected = " << b(s.require_connected) << '\n';
  out << "interp_interval = " << num(s.interp_interval) << '\n';
  out << "building_min = " << s.building_min << '\n';
  out << "building_max = " << s.building_max << '\n';
  out << "rotate_fraction = " << num(s.rotate_fraction) << '\n';
  out << "split_prob = " << num(s.split_prob) << '\n';
  out << "jitter_sigma = " << num(s.jitter_sigma) << '\n';
  out << "kp_dropout = " << num(s.kp_dropout) << '\n';
  out << "blur_sigma = " << num(s.blur_sigma) << '\n';
  out << "seed = " << s.seed << '\n';
  return out.str();
}

inline void apply_gen_text(GenSpec& gen, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string stripped = iodetail::trim(line.substr(0, line.find('#')));
    if (stripped.empty()) continue;
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw BadInput("spec line " + std::to_string(lineno) + ": expected key = value");
    apply_gen_entry(gen, iodetail::trim(stripped.substr(0, eq)),
                    iodetail::trim(stripped.substr(eq + 1)));
  }
}

inline GenSpec read_gen_spec(const std::string& path) {
  GenSpec gen;
  apply_gen_text(gen, iodetail::slurp(path));
  if (gen.count <= 0) throw BadInput("spec: count must be positive");
  gen.scene.validate();
  return gen;
}

// ---------------------------------------------------------------------------
// Run manifest: one per output directory.

struct RunManifest {
  std::string command;
  std::string config_snapshot;  // config_text at run time
  std::uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::string version = "pgmap 0.1.0";
  std::string wall_clock;  // informational; excluded from determinism checks
};

inline json manifest_json(const RunManifest& m) {
  return json{{"command", m.command},       {"config", m.config_snapshot},
              {"seed", m.seed},             {"inputs", m.inputs},
              {"outputs", m.outputs},       {"version", m.version},
              {"wall_clock", m.wall_clock}};
}

inline void write_manifest(const std::string& dir, const RunManifest& m) {
  write_json(dir + "/manifest.json", manifest_json(m));
}

// ---------------------------------------------------------------------------
// SVG rendering: PNG underlay plus GT (green), prediction (red), and dashed
// relationship overlays.

namespace iodetail {

inline std::string base64(const std::vector<unsigned char>& data) {
  static const char* alphabet =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((data.size() + 2) / 3 * 4);
  for (std::size_t i = 0; i < data.size(); i += 3) {
    std::uint32_t v = data[i] << 16;
    if (i + 1 < data.size()) v |= data[i + 1] << 8;
    if (i + 2 < data.size()) v |= data[i + 2];
    out += alphabet[(v >> 18) & 63];
    out += alphabet[(v >> 12) & 63];
    out += i + 1 < data.size() ? alphabet[(v >> 6) & 63] : '=';
    out += i + 2 < data.size() ? alphabet[v & 63] : '=';
  }
  return out;
}

inline void png_append(png_structp png, png_bytep data, png_size_t n) {
  auto* out = static_cast<std::vector<unsigned char>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + n);
}

// Encode the first three channels (or a replicated single channel) as 8-bit
// RGB, values clamped to [0, 1].
inline std::vector<unsigned char> encode_png_rgb(const Raster& r) {
  if (r.empty()) throw BadInput("cannot encode an empty raster");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw NumericError("png writer allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw NumericError("png info allocation failed");
  }
  std::vector<unsigned char> out;
  std::vector<unsigned char> row(static_cast<std::size_t>(r.w) * 3);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw NumericError("png encoding failed");
  }
  png_set_write_fn(png, &out, png_append, nullptr);
  png_set_IHDR(png, info, r.w, r.h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < r.h; ++y) {
    for (int x = 0; x < r.w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = r.at(y, x, r.c >= 3 ? c : 0);
        row[x * 3 + c] =
            static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, info);
  png_destroy_write_struct(&png, &info);
  return out;
}

inline std::string svg_points(const std::vector<Vec2>& pts) {
  std::string out;
  for (std::size_t k = 0; k < pts.size(); ++k) {
    if (k) out += ' ';
    out += num(pts[k].x) + "," + num(pts[k].y);
  }
  return out;
}

inline void svg_road_layer(std::ostream& out, const RoadGraph& g,
                           const std::string& color) {
  for (const auto& [i, j] : g.edges)
    out << "  <line x1=\"" << num(g.nodes[i].x) << "\" y1=\"" << num(g.nodes[i].y)
        << "\" x2=\"" << num(g.nodes[j].x) << "\" y2=\"" << num(g.nodes[j].y)
        << "\" stroke=\"" << color << "\" stroke-width=\"1.5\"/>\n";
  for (const auto& nd : g.nodes)
    out << "  <circle cx=\"" << num(nd.x) << "\" cy=\"" << num(nd.y)
        << "\" r=\"2\" fill=\"" << color << "\"/>\n";
}

inline void svg_polygon_layer(std::ostream& out,
                              const std::vector<BuildingPolygon>& polys,
                              const std::string& color) {
  for (const auto& poly : polys)
    out << "  <polygon points=\"" << svg_points(poly.ring) << "\" fill=\"none\" stroke=\""
        << color << "\" stroke-width=\"1.5\"/>\n";
}

}  // namespace iodetail

// Layered scene rendering. Any of the overlays may be null.
inline void render_svg(const std::string& path, const Raster* underlay,
                       const RoadGraph* gt_road,
                       const std::vector<BuildingPolygon>* gt_polys,
                       const RoadGraph* pred_road,
                       const std::vector<BuildingPolygon>* pred_polys,
                       const PrimitiveGraph* relations, int width, int height) {
  const std::string kGt = "#1a9641";    // green
  const std::string kPred = "#d7191c";  // red
  const std::string kRel = "#2b83ba";   // blue, dashed
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << ' ' << height
      << "\">\n";
  if (underlay) {
    out << "  <image width=\"" << underlay->w << "\" height=\"" << underlay->h
        << "\" href=\"data:image/png;base64,"
        << iodetail::base64(iodetail::encode_png_rgb(*underlay)) << "\"/>\n";
  }
  if (gt_road) iodetail::svg_road_layer(out, *gt_road, kGt);
  if (gt_polys) iodetail::svg_polygon_layer(out, *gt_polys, kGt);
  if (pred_road) iodetail::svg_road_layer(out, *pred_road, kPred);
  if (pred_polys) iodetail::svg_polygon_layer(out, *pred_polys, kPred);
  if (relations && relations->relations.size()) {
    for (int i = 0; i < relations->size(); ++i)
      for (int j = i + 1; j < relations->size(); ++j) {
        if (relations->relations(i, j) == 0) continue;
        const Vec2 a = relations->primitives[i].midpoint();
        const Vec2 b = relations->primitives[j].midpoint();
        out << "  <line x1=\"" << iodetail::num(a.x) << "\" y1=\"" << iodetail::num(a.y)
            << "\" x2=\"" << iodetail::num(b.x) << "\" y2=\"" << iodetail::num(b.y)
            << "\" stroke=\"" << kRel << "\" stroke-width=\"1\" stroke-dasharray=\"4 3\"/>\n";
      }
  }
  out << "</svg>\n";
  iodetail::spit(path, out.str());
}

}  // namespace pgmap
