#pragma once

#include <string>
#include <vector>

#include "unidec/common.hpp"
#include "unidec/rng.hpp"

namespace unidec {

struct Vec2 {
  double x = 0.0, y = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
double norm(Vec2 a);
double dist(Vec2 a, Vec2 b);

enum class Command { left = 0, straight = 1, right = 2 };
const char* command_word(Command c);  // "left" / "straight" / "right"

// Oriented box: heading rotates the length axis; left = +y throughout.
struct ObjectBox {
  double x = 0.0, y = 0.0;
  double w = 1.0, l = 2.0;  // width (lateral), length (along heading)
  double heading = 0.0;
  int cls = 0;
  double speed = 0.0;
};

bool point_in_box(Vec2 p, const ObjectBox& b);
double point_segment_distance(Vec2 p, Vec2 a, Vec2 b);
double polyline_distance(Vec2 p, const std::vector<Vec2>& pts);

struct EgoState {
  Vec2 pos;
  double heading = 0.0;
  double speed = 0.0;
  double accel = 0.0;
  Command command = Command::straight;
};

struct WorldConfig {
  double extent = 20.0;  // world spans [-extent, extent]^2
  int n_objects_min = 0, n_objects_max = 6;
  int n_lanes_min = 1, n_lanes_max = 3;
  int horizon = 6;   // future waypoints
  double dt = 0.5;   // seconds per waypoint
  int grid_hw = 8;   // raster is grid_hw x grid_hw
  int grid_channels = 3;
  int lane_points = 8;  // points per lane polyline
  int n_classes = 3;
  double speed_min = 2.0, speed_max = 6.0;
  // generation-time safety margin between trajectory/ego-start and any object
  // center minus that object's half diagonal; strictly wider than the default
  // evaluation ego radius so generated trajectories always grade collision-free
  double clearance_radius = 1.25;
  double turn_rate = 0.4;          // rad/s steering offset per command
  double lookahead = 8.0;          // slowdown corridor length ahead of ego
  double corridor_half_width = 2.0;
  int max_place_attempts = 1000;

  void validate() const;  // throws ConfigError
};

struct SceneSample {
  uint64_t seed = 0;
  std::vector<ObjectBox> objects;
  std::vector<std::vector<Vec2>> lanes;
  EgoState ego;
  std::vector<Vec2> gt_trajectory;  // ego frame, horizon entries
  std::vector<std::string> caption;
};

struct GridFeatures {
  int hw = 0, channels = 0;
  // raster[c * hw*hw + r*hw + col], values in [0,1]
  std::vector<double> raster;
  std::vector<Vec2> cell_centers;  // row-major, hw*hw entries
  double at(int c, int cell) const { return raster[static_cast<size_t>(c) * hw * hw + cell]; }
};

// Deterministic scene generation: same (seed, cfg) gives the identical sample.
// Objects are rejection-sampled so the planned trajectory keeps clearance to
// every placed object; throws RuntimeError when a config is too dense to place.
SceneSample generate_scene(uint64_t seed, const WorldConfig& cfg);

// Rule-based planner: follow the nearest lane (straight extrapolation when no
// lanes exist), steer a fixed per-command offset, and linearly shed speed when
// an object sits in the lookahead corridor. Ignores scene.gt_trajectory.
std::vector<Vec2> oracle_plan(const SceneSample& scene, const WorldConfig& cfg);

GridFeatures rasterize(const SceneSample& scene, const WorldConfig& cfg);

std::vector<std::string> caption_scene(const SceneSample& scene);

// Every word any caption can emit, plus nothing else.
std::vector<std::string> caption_vocabulary();

// Line-delimited dataset records; identical inputs produce a byte-identical file.
void build_split(int n, uint64_t base_seed, const WorldConfig& cfg, const std::string& path);
std::vector<SceneSample> load_split(const std::string& path);

std::string scene_to_record(const SceneSample& s);
SceneSample scene_from_record(const std::string& line);

}  // namespace unidec
