#include "unidec/scene_sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace unidec {

using nlohmann::json;

double norm(Vec2 a) { return std::sqrt(a.x * a.x + a.y * a.y); }
double dist(Vec2 a, Vec2 b) { return norm(a - b); }

const char* command_word(Command c) {
  switch (c) {
    case Command::left: return "left";
    case Command::right: return "right";
    default: return "straight";
  }
}

bool point_in_box(Vec2 p, const ObjectBox& b) {
  const double c = std::cos(b.heading), s = std::sin(b.heading);
  const double dx = p.x - b.x, dy = p.y - b.y;
  const double u = c * dx + s * dy;   // along length
  const double v = -s * dx + c * dy;  // along width
  return std::abs(u) <= 0.5 * b.l && std::abs(v) <= 0.5 * b.w;
}

double point_segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double len2 = ab.x * ab.x + ab.y * ab.y;
  if (len2 <= 0.0) return dist(p, a);
  double t = ((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / len2;
  t = std::clamp(t, 0.0, 1.0);
  return dist(p, a + t * ab);
}

double polyline_distance(Vec2 p, const std::vector<Vec2>& pts) {
  double best = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i + 1 < pts.size(); ++i) {
    best = std::min(best, point_segment_distance(p, pts[i], pts[i + 1]));
  }
  if (pts.size() == 1) best = dist(p, pts[0]);
  return best;
}

void WorldConfig::validate() const {
  if (extent <= 0.0) throw ConfigError("world.extent must be > 0");
  if (n_objects_min < 0 || n_objects_min > n_objects_max)
    throw ConfigError("world object range must satisfy 0 <= min <= max");
  if (n_lanes_min < 0 || n_lanes_min > n_lanes_max)
    throw ConfigError("world lane range must satisfy 0 <= min <= max");
  if (horizon < 1) throw ConfigError("world.horizon must be >= 1");
  if (dt <= 0.0) throw ConfigError("world.dt must be > 0");
  if (grid_hw < 4) throw ConfigError("world.grid_hw must be >= 4");
  if (grid_channels < 3) throw ConfigError("world.grid_channels must be >= 3");
  if (lane_points < 2) throw ConfigError("world.lane_points must be >= 2");
  if (n_classes < 1) throw ConfigError("world.n_classes must be >= 1");
  if (speed_min <= 0.0 || speed_min > speed_max)
    throw ConfigError("world speed range must satisfy 0 < min <= max");
  if (clearance_radius <= 0.0) throw ConfigError("world.clearance_radius must be > 0");
}

namespace {

double half_diagonal(const ObjectBox& b) { return 0.5 * std::hypot(b.w, b.l); }

// Conservative: true when the disc of clearance_radius around every waypoint
// (and the ego start) stays clear of the box's circumscribed circle.
bool trajectory_clear(const std::vector<Vec2>& waypoints, const ObjectBox& b,
                      double clearance) {
  const double guard = clearance + half_diagonal(b);
  const Vec2 center{b.x, b.y};
  if (dist({0.0, 0.0}, center) <= guard) return false;
  for (const Vec2& w : waypoints) {
    if (dist(w, center) <= guard) return false;
  }
  return true;
}

Vec2 to_ego_frame(Vec2 p, const EgoState& ego) {
  const double c = std::cos(ego.heading), s = std::sin(ego.heading);
  const Vec2 d = p - ego.pos;
  return {c * d.x + s * d.y, -s * d.x + c * d.y};
}

bool object_in_corridor(const ObjectBox& b, const EgoState& ego, const WorldConfig& cfg) {
  const Vec2 p = to_ego_frame({b.x, b.y}, ego);
  return p.x >= 0.0 && p.x <= cfg.lookahead && std::abs(p.y) <= cfg.corridor_half_width;
}

double lane_heading_near(const std::vector<Vec2>& lane, Vec2 p) {
  size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i + 1 < lane.size(); ++i) {
    const double d = point_segment_distance(p, lane[i], lane[i + 1]);
    if (d < bd) {
      bd = d;
      best = i;
    }
  }
  const Vec2 t = lane[best + 1] - lane[best];
  return std::atan2(t.y, t.x);
}

const std::vector<std::string>& count_words() {
  static const std::vector<std::string> words = {
      "zero", "one", "two", "three", "four", "five", "six",
      "seven", "eight", "nine", "ten", "eleven", "twelve"};
  return words;
}

std::string count_word(size_t n) {
  const auto& w = count_words();
  return n < w.size() ? w[n] : std::string("many");
}

}  // namespace

std::vector<Vec2> oracle_plan(const SceneSample& scene, const WorldConfig& cfg) {
  const EgoState& ego = scene.ego;
  const double sign = scene.ego.command == Command::left    ? 1.0
                      : scene.ego.command == Command::right ? -1.0
                                                            : 0.0;
  bool slowdown = false;
  for (const ObjectBox& b : scene.objects) {
    if (object_in_corridor(b, ego, cfg)) {
      slowdown = true;
      break;
    }
  }

  // nearest lane to the ego start, if any
  const std::vector<Vec2>* lane = nullptr;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& ln : scene.lanes) {
    const double d = polyline_distance(ego.pos, ln);
    if (d < best) {
      best = d;
      lane = &ln;
    }
  }

  std::vector<Vec2> out;
  out.reserve(cfg.horizon);
  Vec2 pos = ego.pos;
  const int T = cfg.horizon;
  for (int k = 1; k <= T; ++k) {
    // Linear slowdown that never quite reaches zero inside the horizon, so
    // step spacing decreases strictly while lateral intent stays visible.
    const double vk = slowdown ? ego.speed * (1.0 - double(k) / double(T + 1)) : ego.speed;
    const double base = lane ? lane_heading_near(*lane, pos) : ego.heading;
    const double heading = base + sign * cfg.turn_rate * cfg.dt * double(k);
    pos = pos + (vk * cfg.dt) * Vec2{std::cos(heading), std::sin(heading)};
    out.push_back(to_ego_frame(pos, ego));
  }
  return out;
}

SceneSample generate_scene(uint64_t seed, const WorldConfig& cfg) {
  cfg.validate();
  Rng rng(seed);
  SceneSample s;
  s.seed = seed;

  s.ego.pos = {0.0, 0.0};
  s.ego.heading = 0.0;
  s.ego.speed = rng.uniform(cfg.speed_min, cfg.speed_max);
  s.ego.accel = rng.uniform(-1.0, 1.0);
  s.ego.command = static_cast<Command>(rng.uniform_int(0, 2));

  const int n_lanes = rng.uniform_int(cfg.n_lanes_min, cfg.n_lanes_max);
  for (int i = 0; i < n_lanes; ++i) {
    // first lane stays near the ego so lane-following is meaningful
    const double y0 = (i == 0) ? rng.uniform(-2.0, 2.0)
                               : rng.uniform(-0.6 * cfg.extent, 0.6 * cfg.extent);
    const double phi = rng.uniform(-0.15, 0.15);
    const double half_len = 0.75 * cfg.extent;
    const Vec2 dir{std::cos(phi), std::sin(phi)};
    std::vector<Vec2> lane(cfg.lane_points);
    for (int p = 0; p < cfg.lane_points; ++p) {
      const double t = (double(p) / double(cfg.lane_points - 1) - 0.5) * 2.0 * half_len;
      lane[p] = Vec2{0.0, y0} + t * dir;
    }
    s.lanes.push_back(std::move(lane));
  }

  const int n_objects = rng.uniform_int(cfg.n_objects_min, cfg.n_objects_max);
  const double place_span = std::max(1.0, cfg.extent - 3.0);
  for (int i = 0; i < n_objects; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < cfg.max_place_attempts; ++attempt) {
      ObjectBox b;
      b.x = rng.uniform(-place_span, place_span);
      b.y = rng.uniform(-place_span, place_span);
      b.w = rng.uniform(0.8, 2.0);
      b.l = rng.uniform(1.2, 3.0);
      b.heading = rng.uniform(-3.14159265358979323846, 3.14159265358979323846);
      b.cls = rng.uniform_int(0, cfg.n_classes - 1);
      b.speed = rng.uniform(0.0, cfg.speed_max);

      s.objects.push_back(b);
      const std::vector<Vec2> traj = oracle_plan(s, cfg);
      bool ok = true;
      for (const ObjectBox& obj : s.objects) {
        if (!trajectory_clear(traj, obj, cfg.clearance_radius)) {
          ok = false;
          break;
        }
      }
      if (ok) {
        placed = true;
        break;
      }
      s.objects.pop_back();
    }
    if (!placed) {
      throw RuntimeError("generate_scene: could not place object " + std::to_string(i) +
                         " after " + std::to_string(cfg.max_place_attempts) +
                         " attempts; config is too dense");
    }
  }

  s.gt_trajectory = oracle_plan(s, cfg);
  s.caption = caption_scene(s);
  return s;
}

GridFeatures rasterize(const SceneSample& scene, const WorldConfig& cfg) {
  GridFeatures g;
  g.hw = cfg.grid_hw;
  g.channels = cfg.grid_channels;
  const int n = g.hw * g.hw;
  g.raster.assign(static_cast<size_t>(g.channels) * n, 0.0);
  g.cell_centers.resize(n);

  const double cell = 2.0 * cfg.extent / cfg.grid_hw;
  for (int r = 0; r < g.hw; ++r) {
    for (int c = 0; c < g.hw; ++c) {
      g.cell_centers[r * g.hw + c] = {-cfg.extent + (c + 0.5) * cell,
                                      -cfg.extent + (r + 0.5) * cell};
    }
  }

  for (int i = 0; i < n; ++i) {
    const Vec2 p = g.cell_centers[i];
    for (const ObjectBox& b : scene.objects) {
      if (point_in_box(p, b)) {
        g.raster[i] = 1.0;
        break;
      }
    }
    for (const auto& lane : scene.lanes) {
      if (polyline_distance(p, lane) <= 0.5 * cell) {
        g.raster[static_cast<size_t>(n) + i] = 1.0;
        break;
      }
    }
    g.raster[static_cast<size_t>(2) * n + i] = 0.5 * (std::cos(scene.ego.heading) + 1.0);
  }
  return g;
}

std::vector<std::string> caption_scene(const SceneSample& scene) {
  std::vector<std::string> words = {"there", "are", count_word(scene.objects.size()),
                                    "objects", "ahead", "ego"};
  if (scene.ego.command == Command::straight) {
    words.push_back("goes");
    words.push_back("straight");
  } else {
    words.push_back("turns");
    words.push_back(command_word(scene.ego.command));
  }
  return words;
}

std::vector<std::string> caption_vocabulary() {
  std::vector<std::string> v = {"there", "are",  "objects", "ahead", "ego",
                                "goes",  "turns", "straight", "left",  "right",
                                "many"};
  for (const auto& w : count_words()) v.push_back(w);
  return v;
}

std::string scene_to_record(const SceneSample& s) {
  json rec;
  rec["seed"] = s.seed;
  std::vector<double> objs;
  for (const ObjectBox& b : s.objects) {
    objs.insert(objs.end(), {b.x, b.y, b.w, b.l, b.heading, double(b.cls), b.speed});
  }
  rec["objects"] = objs;
  std::vector<double> lanes;
  for (const auto& lane : s.lanes) {
    lanes.push_back(double(lane.size()));
    for (const Vec2& p : lane) {
      lanes.push_back(p.x);
      lanes.push_back(p.y);
    }
  }
  rec["lanes"] = lanes;
  rec["ego"] = std::vector<double>{s.ego.pos.x,  s.ego.pos.y, s.ego.heading,
                                   s.ego.speed,  s.ego.accel,
                                   double(static_cast<int>(s.ego.command))};
  std::vector<double> traj;
  for (const Vec2& p : s.gt_trajectory) {
    traj.push_back(p.x);
    traj.push_back(p.y);
  }
  rec["gt_trajectory"] = traj;
  std::string cap;
  for (size_t i = 0; i < s.caption.size(); ++i) {
    if (i) cap += ' ';
    cap += s.caption[i];
  }
  rec["caption"] = cap;
  return rec.dump();
}

SceneSample scene_from_record(const std::string& line) {
  json rec = json::parse(line);
  SceneSample s;
  s.seed = rec.at("seed").get<uint64_t>();
  const auto objs = rec.at("objects").get<std::vector<double>>();
  if (objs.size() % 7 != 0) throw RuntimeError("dataset record: malformed objects field");
  for (size_t i = 0; i < objs.size(); i += 7) {
    ObjectBox b;
    b.x = objs[i]; b.y = objs[i + 1]; b.w = objs[i + 2]; b.l = objs[i + 3];
    b.heading = objs[i + 4]; b.cls = int(objs[i + 5]); b.speed = objs[i + 6];
    s.objects.push_back(b);
  }
  const auto lanes = rec.at("lanes").get<std::vector<double>>();
  for (size_t i = 0; i < lanes.size();) {
    const size_t count = static_cast<size_t>(lanes[i++]);
    if (i + 2 * count > lanes.size()) throw RuntimeError("dataset record: malformed lanes field");
    std::vector<Vec2> lane(count);
    for (size_t p = 0; p < count; ++p) {
      lane[p] = {lanes[i], lanes[i + 1]};
      i += 2;
    }
    s.lanes.push_back(std::move(lane));
  }
  const auto ego = rec.at("ego").get<std::vector<double>>();
  if (ego.size() != 6) throw RuntimeError("dataset record: malformed ego field");
  s.ego.pos = {ego[0], ego[1]};
  s.ego.heading = ego[2];
  s.ego.speed = ego[3];
  s.ego.accel = ego[4];
  s.ego.command = static_cast<Command>(int(ego[5]));
  const auto traj = rec.at("gt_trajectory").get<std::vector<double>>();
  for (size_t i = 0; i + 1 < traj.size(); i += 2) s.gt_trajectory.push_back({traj[i], traj[i + 1]});
  std::istringstream iss(rec.at("caption").get<std::string>());
  std::string word;
  while (iss >> word) s.caption.push_back(word);
  return s;
}

void build_split(int n, uint64_t base_seed, const WorldConfig& cfg, const std::string& path) {
  if (n < 1) throw ConfigError("build_split: n must be >= 1");
  cfg.validate();
  std::ostringstream body;
  for (int i = 0; i < n; ++i) {
    body << scene_to_record(generate_scene(base_seed + static_cast<uint64_t>(i), cfg)) << '\n';
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeError("build_split: cannot open '" + path + "' for writing");
  out << body.str();
  if (!out.good()) throw RuntimeError("build_split: write failed for '" + path + "'");
}

std::vector<SceneSample> load_split(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeError("load_split: cannot open '" + path + "'");
  std::vector<SceneSample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(scene_from_record(line));
  }
  return out;
}

}  // namespace unidec
