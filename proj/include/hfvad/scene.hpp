#pragma once

// Deterministic synthetic ego-view driving world.
//
// The ego camera looks down a straight road. Every surface is projected with a pinhole model
// whose vanishing point sits at (width/2, horizon); an object at longitudinal distance g and
// lateral offset X appears at x = cx + F*X/g with size proportional to 1/g. The lead vehicle
// shares the ego lane. Its distance (the gap) evolves as gap(t+1) = gap(t) - (v_ego(t) - v_lead(t)),
// so a braking lead grows on screen while it approaches.

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <json.hpp>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "hfvad/checkpoint.hpp"
#include "hfvad/common.hpp"
#include "hfvad/types.hpp"

namespace hfvad::scene {

using json = nlohmann::json;

/// Lead deceleration (world units/frame^2) separating normal speed fluctuation from sudden braking.
inline constexpr double kAnomalousDeceleration = 0.005;
inline constexpr int kLeadTrackId = 0;

enum class Environment { city, highway };

inline std::string to_string(Environment e) { return e == Environment::city ? "city" : "highway"; }
inline Environment environment_from_string(const std::string& s) {
  if (s == "city") return Environment::city;
  if (s == "highway") return Environment::highway;
  throw ConfigError("unknown environment '" + s + "'");
}

/// Ego speed from `start_frame` onward, until the next segment.
struct SpeedSegment {
  int start_frame = 0;
  double speed = 0.0;
};

struct BrakingEvent {
  int onset_frame = 0;
  double deceleration = 0.0;  // world units / frame^2
  int stop_duration = 0;      // frames the lead stays stopped after reaching zero speed
};

struct LeadVehicleConfig {
  double width = 1.8, height = 1.3;  // world units
  std::array<float, 3> color{0.75f, 0.2f, 0.15f};
  double initial_gap = 10.0;
  // Gentle periodic speed fluctuation around the ego speed (normal following behaviour).
  double drift_amplitude = 0.0;
  double drift_period = 90.0;
  double drift_phase = 0.0;
};

struct AgentsConfig {
  int count = 0;
  std::vector<int> lanes{-1, 1};  // lateral lanes relative to the ego lane
  double max_relative_speed = 0.06;
};

struct WeatherConfig {
  double noise_sigma = 0.0;   // additive Gaussian pixel noise, in [0, 0.2]
  double rain_density = 0.0;  // fraction of columns carrying a streak per frame, in [0, 1]
};

struct ScenarioConfig {
  std::string id = "scenario";
  std::uint64_t seed = 0;
  std::size_t height = 64, width = 64;
  int num_frames = 150;
  std::vector<SpeedSegment> ego_speed{{0, 0.3}};
  LeadVehicleConfig lead;
  AgentsConfig agents;
  std::vector<BrakingEvent> braking_events;
  WeatherConfig weather;
  Environment environment = Environment::city;

  void validate() const;
};

struct GroundTruthFrame {
  std::vector<BBox> boxes;
  std::vector<std::uint8_t> anomaly_mask;  // H*W, 1 inside the braking lead's visible silhouette
  bool anomalous = false;
  double lead_gap = 0, lead_speed = 0, ego_speed = 0;
};

struct GroundTruth {
  std::size_t height = 0, width = 0;
  std::vector<GroundTruthFrame> frames;
};

struct Scenario {
  ScenarioConfig config;
  std::vector<Image> frames;
  GroundTruth truth;
  std::vector<FlowField> motion;  // generator ground-truth motion, frames t -> t+1
};

/// Per-frame longitudinal state of the ego and the lead vehicle.
struct Kinematics {
  std::vector<double> ego_speed, ego_position, lead_speed, gap;
  std::vector<bool> braking;  // lead is in a braking phase (onset .. full stop, inclusive)
};

// ---------------------------------------------------------------------------
// Config validation and JSON

inline void ScenarioConfig::validate() const {
  if (height < 16 || width < 16) throw ConfigError(id + ": frame size must be at least 16x16");
  if (num_frames < 2) throw ConfigError(id + ": need at least 2 frames");
  if (ego_speed.empty() || ego_speed.front().start_frame != 0)
    throw ConfigError(id + ": ego speed profile must start at frame 0");
  for (std::size_t i = 0; i < ego_speed.size(); ++i) {
    if (ego_speed[i].speed < 0) throw ConfigError(id + ": negative ego speed");
    if (i && ego_speed[i].start_frame <= ego_speed[i - 1].start_frame)
      throw ConfigError(id + ": ego speed segments must be strictly increasing");
  }
  if (!(lead.initial_gap > 0)) throw ConfigError(id + ": lead gap must be positive");
  if (lead.width <= 0 || lead.height <= 0) throw ConfigError(id + ": lead size must be positive");
  if (lead.drift_period <= 0) throw ConfigError(id + ": drift period must be positive");
  if (agents.count < 0) throw ConfigError(id + ": negative agent count");
  if (agents.count > 0 && agents.lanes.empty()) throw ConfigError(id + ": agents need at least one lane");
  if (weather.noise_sigma < 0 || weather.noise_sigma > 0.2) throw ConfigError(id + ": noise sigma outside [0, 0.2]");
  if (weather.rain_density < 0 || weather.rain_density > 1) throw ConfigError(id + ": rain density outside [0, 1]");
  int prev_end = -1;
  for (const auto& b : braking_events) {
    if (!(b.deceleration > 0)) throw ConfigError(id + ": braking deceleration must be positive");
    if (b.onset_frame < 0 || b.onset_frame >= num_frames) throw ConfigError(id + ": braking onset outside the clip");
    if (b.stop_duration < 0) throw ConfigError(id + ": negative stop duration");
    if (b.onset_frame <= prev_end) throw ConfigError(id + ": overlapping braking events");
    prev_end = b.onset_frame;
  }
}

inline json to_json(const ScenarioConfig& c) {
  json j;
  j["id"] = c.id;
  j["seed"] = c.seed;
  j["frame_size"] = {c.height, c.width};
  j["num_frames"] = c.num_frames;
  j["ego_speed"] = json::array();
  for (const auto& s : c.ego_speed) j["ego_speed"].push_back({{"start_frame", s.start_frame}, {"speed", s.speed}});
  j["lead_vehicle"] = {{"width", c.lead.width},
                       {"height", c.lead.height},
                       {"color", c.lead.color},
                       {"initial_gap", c.lead.initial_gap},
                       {"drift_amplitude", c.lead.drift_amplitude},
                       {"drift_period", c.lead.drift_period},
                       {"drift_phase", c.lead.drift_phase}};
  j["other_agents"] = {
      {"count", c.agents.count}, {"lanes", c.agents.lanes}, {"max_relative_speed", c.agents.max_relative_speed}};
  j["braking_events"] = json::array();
  for (const auto& b : c.braking_events)
    j["braking_events"].push_back(
        {{"onset_frame", b.onset_frame}, {"deceleration", b.deceleration}, {"stop_duration", b.stop_duration}});
  j["weather"] = {{"noise_sigma", c.weather.noise_sigma}, {"rain_density", c.weather.rain_density}};
  j["environment"] = to_string(c.environment);
  return j;
}

inline ScenarioConfig scenario_from_json(const json& j) {
  ScenarioConfig c;
  try {
    c.id = j.at("id").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.height = j.at("frame_size").at(0).get<std::size_t>();
    c.width = j.at("frame_size").at(1).get<std::size_t>();
    c.num_frames = j.at("num_frames").get<int>();
    c.ego_speed.clear();
    for (const auto& s : j.at("ego_speed")) c.ego_speed.push_back({s.at("start_frame"), s.at("speed")});
    const auto& l = j.at("lead_vehicle");
    c.lead.width = l.at("width");
    c.lead.height = l.at("height");
    c.lead.color = l.at("color").get<std::array<float, 3>>();
    c.lead.initial_gap = l.at("initial_gap");
    c.lead.drift_amplitude = l.at("drift_amplitude");
    c.lead.drift_period = l.at("drift_period");
    c.lead.drift_phase = l.at("drift_phase");
    const auto& a = j.at("other_agents");
    c.agents.count = a.at("count");
    c.agents.lanes = a.at("lanes").get<std::vector<int>>();
    c.agents.max_relative_speed = a.at("max_relative_speed");
    for (const auto& b : j.at("braking_events"))
      c.braking_events.push_back({b.at("onset_frame"), b.at("deceleration"), b.at("stop_duration")});
    c.weather.noise_sigma = j.at("weather").at("noise_sigma");
    c.weather.rain_density = j.at("weather").at("rain_density");
    c.environment = environment_from_string(j.at("environment"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed scenario config: ") + e.what());
  }
  return c;
}

inline json to_json(const BBox& b) {
  return {{"x_min", b.x_min}, {"y_min", b.y_min}, {"x_max", b.x_max},       {"y_max", b.y_max},
          {"class", b.cls},   {"track_id", b.track_id}, {"provenance", to_string(b.provenance)}};
}

inline BBox bbox_from_json(const json& j) {
  BBox b;
  b.x_min = j.at("x_min");
  b.y_min = j.at("y_min");
  b.x_max = j.at("x_max");
  b.y_max = j.at("y_max");
  b.cls = j.value("class", std::string("vehicle"));
  b.track_id = j.value("track_id", -1);
  b.provenance = provenance_from_string(j.value("provenance", std::string("ground-truth")));
  return b;
}

// ---------------------------------------------------------------------------
// Kinematics

inline double ego_speed_at(const ScenarioConfig& c, int t) {
  double v = c.ego_speed.front().speed;
  for (const auto& s : c.ego_speed)
    if (s.start_frame <= t) v = s.speed;
  return v;
}

/// Integrates ego and lead motion. Throws ScenarioError when the lead collides with the ego
/// (gap reaches 0) or a braking event does not complete inside the clip.
inline Kinematics simulate_kinematics(const ScenarioConfig& c) {
  c.validate();
  const auto n = static_cast<std::size_t>(c.num_frames);
  Kinematics k;
  k.ego_speed.resize(n);
  k.ego_position.resize(n);
  k.lead_speed.resize(n);
  k.gap.resize(n);
  k.braking.assign(n, false);
  constexpr double kTwoPi = 6.283185307179586;
  auto cruise = [&](int t) {
    const double drift = c.lead.drift_amplitude * std::sin(kTwoPi * t / c.lead.drift_period + c.lead.drift_phase);
    return std::max(0.0, ego_speed_at(c, t) + drift);
  };
  enum class Phase { cruise, braking, stopped } phase = Phase::cruise;
  std::size_t next_event = 0;
  int stopped_left = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int t = static_cast<int>(i);
    k.ego_speed[i] = ego_speed_at(c, t);
    k.ego_position[i] = i ? k.ego_position[i - 1] + k.ego_speed[i - 1] : 0.0;
    if (phase == Phase::cruise && next_event < c.braking_events.size() &&
        c.braking_events[next_event].onset_frame == t) {
      phase = Phase::braking;
    }
    if (phase == Phase::braking) {
      const auto& ev = c.braking_events[next_event];
      const double prev = i ? k.lead_speed[i - 1] : cruise(t);
      k.lead_speed[i] = std::max(0.0, prev - ev.deceleration);
      k.braking[i] = true;
      if (k.lead_speed[i] == 0.0) {
        phase = Phase::stopped;
        stopped_left = ev.stop_duration;
        ++next_event;
      }
    } else if (phase == Phase::stopped && stopped_left > 0) {
      k.lead_speed[i] = 0.0;
      --stopped_left;
    } else {
      phase = Phase::cruise;
      k.lead_speed[i] = cruise(t);
    }
    k.gap[i] = i ? k.gap[i - 1] - (k.ego_speed[i - 1] - k.lead_speed[i - 1]) : c.lead.initial_gap;
    if (k.gap[i] <= 0.0) {
      throw ScenarioError(c.id + ": lead vehicle collision at frame " + std::to_string(t) +
                          " (gap reached 0); reduce ego speed or braking intensity");
    }
  }
  if (phase == Phase::braking) {
    throw ScenarioError(c.id + ": braking event starting at frame " +
                        std::to_string(c.braking_events[next_event].onset_frame) +
                        " does not reach a full stop inside the clip");
  }
  return k;
}

/// Per-frame lead deceleration v(t-1) - v(t), for t >= 1.
inline std::vector<double> lead_decelerations(const ScenarioConfig& c) {
  auto k = simulate_kinematics(c);
  std::vector<double> out;
  for (std::size_t i = 1; i < k.lead_speed.size(); ++i) out.push_back(k.lead_speed[i - 1] - k.lead_speed[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Rendering

namespace detail {

struct Camera {
  double focal, horizon, cx, height;  // height: camera height above the road (world units)
};

inline Camera camera_for(const ScenarioConfig& c) {
  return {1.5 * static_cast<double>(c.width), 0.42 * static_cast<double>(c.height), 0.5 * static_cast<double>(c.width),
          1.5};
}

inline double hash01(std::int64_t a, std::int64_t b, std::uint64_t salt) {
  const auto h = mix_seed(salt, {static_cast<std::uint64_t>(a), static_cast<std::uint64_t>(b)});
  return static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0);
}

struct Rect {
  double x0, y0, x1, y1;
};

inline double coverage(const Rect& r, std::size_t px, std::size_t py) {
  const double x = static_cast<double>(px), y = static_cast<double>(py);
  const double ox = std::max(0.0, std::min(x + 1, r.x1) - std::max(x, r.x0));
  const double oy = std::max(0.0, std::min(y + 1, r.y1) - std::max(y, r.y0));
  return ox * oy;
}

struct Vehicle {
  int track_id;
  double lateral;  // world X of the centre
  double width, height;
  std::array<float, 3> color;
  double gap, next_gap;
  bool is_lead;
};

inline Rect project(const Camera& cam, const Vehicle& v, double gap) {
  const double s = cam.focal / gap;
  const double cx = cam.cx + v.lateral * s;
  const double bottom = cam.horizon + cam.height * s;
  return {cx - 0.5 * v.width * s, bottom - v.height * s, cx + 0.5 * v.width * s, bottom};
}

inline void background_colour(const ScenarioConfig& c, const Camera& cam, double px, double py, double ego_pos,
                              float rgb[3]) {
  const std::uint64_t salt = mix_seed(c.seed, {0x7e47});
  if (py < cam.horizon) {
    // Static skyline at infinity.
    const double rel = py / cam.horizon;
    if (c.environment == Environment::city) {
      const auto block = static_cast<std::int64_t>(std::floor(px / (c.width / 10.0)));
      const double top = cam.horizon * (0.25 + 0.6 * hash01(block, 1, salt));
      if (py > top) {
        const bool window = std::fmod(px, 3.0) < 1.2 && std::fmod(py, 3.0) < 1.2;
        const float base = static_cast<float>(0.35 + 0.25 * hash01(block, 2, salt));
        const float w = window ? 0.25f : 0.0f;
        rgb[0] = base + w;
        rgb[1] = base + w;
        rgb[2] = base + 0.05f + w;
        return;
      }
      rgb[0] = static_cast<float>(0.55 + 0.2 * rel);
      rgb[1] = static_cast<float>(0.65 + 0.15 * rel);
      rgb[2] = 0.85f;
    } else {
      const double tree_line = cam.horizon * (0.8 + 0.12 * std::sin(px * 0.9 + 3 * hash01(0, 3, salt)));
      if (py > tree_line) {
        rgb[0] = 0.12f;
        rgb[1] = 0.35f;
        rgb[2] = 0.12f;
        return;
      }
      rgb[0] = static_cast<float>(0.45 + 0.25 * rel);
      rgb[1] = static_cast<float>(0.6 + 0.2 * rel);
      rgb[2] = 0.9f;
    }
    return;
  }
  const double depth = cam.focal * cam.height / std::max(py - cam.horizon, 1e-3);
  const double s = depth + ego_pos;
  const double lateral = (px - cam.cx) * depth / cam.focal;
  const double road_half = 5.25, lane = 3.5, mark = 0.15;
  const double ax = std::abs(lateral);
  if (ax > road_half + mark) {
    if (c.environment == Environment::city) {
      const double v = 0.55 + 0.12 * hash01(static_cast<std::int64_t>(std::floor(s / 1.5)),
                                            static_cast<std::int64_t>(std::floor(lateral / 1.5)), salt);
      rgb[0] = rgb[1] = rgb[2] = static_cast<float>(v);
    } else {
      const double v = hash01(static_cast<std::int64_t>(std::floor(s / 0.9)),
                              static_cast<std::int64_t>(std::floor(lateral / 0.9)), salt);
      rgb[0] = static_cast<float>(0.15 + 0.1 * v);
      rgb[1] = static_cast<float>(0.4 + 0.2 * v);
      rgb[2] = static_cast<float>(0.12 + 0.05 * v);
    }
    return;
  }
  const bool edge_line = ax > road_half - mark;
  const bool lane_line = std::abs(ax - 0.5 * lane) < mark && std::fmod(s + 1000.0, 6.0) < 3.0;
  if (edge_line || lane_line) {
    rgb[0] = rgb[1] = rgb[2] = 0.92f;
    return;
  }
  const double v = 0.28 + 0.14 * hash01(static_cast<std::int64_t>(std::floor(s / 0.8)),
                                        static_cast<std::int64_t>(std::floor(lateral / 0.8)), salt ^ 0x55);
  rgb[0] = rgb[1] = rgb[2] = static_cast<float>(v);
}

}  // namespace detail

namespace detail {

struct AgentState {
  int track_id;
  int lane;
  double gap, relative_speed;  // relative_speed > 0: pulling away
  std::array<float, 3> color;
};

inline std::array<float, 3> random_colour(Rng& rng) {
  std::uniform_real_distribution<float> d(0.15f, 0.95f);
  return {d(rng), d(rng), d(rng)};
}

/// Agent longitudinal states per frame. Agents leaving the visible range respawn far ahead
/// with a new track id.
inline std::vector<std::vector<AgentState>> simulate_agents(const ScenarioConfig& c) {
  constexpr double kNear = 5.0, kFar = 45.0;
  Rng rng(mix_seed(c.seed, {0xa6e7}));
  std::uniform_real_distribution<double> gap0(14.0, 32.0), speed(-c.agents.max_relative_speed, c.agents.max_relative_speed);
  std::uniform_int_distribution<std::size_t> lane_pick(0, c.agents.lanes.empty() ? 0 : c.agents.lanes.size() - 1);
  int next_id = kLeadTrackId + 1;
  std::vector<AgentState> live;
  for (int i = 0; i < c.agents.count; ++i)
    live.push_back({next_id++, c.agents.lanes[lane_pick(rng)], gap0(rng), speed(rng), random_colour(rng)});
  std::vector<std::vector<AgentState>> per_frame;
  for (int t = 0; t < c.num_frames; ++t) {
    per_frame.push_back(live);
    for (auto& a : live) {
      a.gap += a.relative_speed;
      if (a.gap < kNear || a.gap > kFar) {
        a = {next_id++, c.agents.lanes[lane_pick(rng)], kFar - 1.0,
             -std::abs(speed(rng)) - 0.02, random_colour(rng)};
      }
    }
  }
  return per_frame;
}

}  // namespace detail

/// Renders the clip and its ground truth. Pure function of the config.
inline Scenario generate_scenario(const ScenarioConfig& cfg) {
  const auto kin = simulate_kinematics(cfg);
  const auto agents = detail::simulate_agents(cfg);
  const auto cam = detail::camera_for(cfg);
  const std::size_t H = cfg.height, W = cfg.width, T = static_cast<std::size_t>(cfg.num_frames);
  Scenario sc;
  sc.config = cfg;
  sc.truth.height = H;
  sc.truth.width = W;
  const double lane_width = 3.5;

  for (std::size_t t = 0; t < T; ++t) {
    // Vehicles with their distance now and at t+1, drawn far to near.
    std::vector<detail::Vehicle> vehicles;
    const double lead_next = t + 1 < T ? kin.gap[t + 1] : kin.gap[t] - (kin.ego_speed[t] - kin.lead_speed[t]);
    vehicles.push_back({kLeadTrackId, 0.0, cfg.lead.width, cfg.lead.height, cfg.lead.color, kin.gap[t], lead_next, true});
    for (const auto& a : agents[t]) {
      double next = a.gap + a.relative_speed;
      if (t + 1 < T) {
        bool found = false;
        for (const auto& b : agents[t + 1])
          if (b.track_id == a.track_id) {
            next = b.gap;
            found = true;
          }
        if (!found) next = a.gap + a.relative_speed;
      }
      vehicles.push_back({a.track_id, a.lane * lane_width, 1.8, 1.4, a.color, a.gap, next, false});
    }
    std::stable_sort(vehicles.begin(), vehicles.end(), [](const auto& a, const auto& b) { return a.gap > b.gap; });

    Image img(3, H, W);
    FlowField motion(H, W);
    std::vector<int> owner(H * W, -1);  // index into `vehicles` of the visible surface (coverage >= 0.5)
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        float acc[3] = {0, 0, 0};
        for (int sy = 0; sy < 2; ++sy)
          for (int sx = 0; sx < 2; ++sx) {
            float rgb[3];
            detail::background_colour(cfg, cam, static_cast<double>(x) + 0.25 + 0.5 * sx,
                                      static_cast<double>(y) + 0.25 + 0.5 * sy, kin.ego_position[t], rgb);
            for (int ch = 0; ch < 3; ++ch) acc[ch] += 0.25f * rgb[ch];
          }
        for (int ch = 0; ch < 3; ++ch) img.at(static_cast<std::size_t>(ch), y, x) = acc[ch];
        // Road motion: a point at depth d moves to depth d - v_ego.
        const double py = static_cast<double>(y) + 0.5;
        if (py > cam.horizon) {
          const double depth = cam.focal * cam.height / (py - cam.horizon);
          const double next_depth = std::max(depth - kin.ego_speed[t], 0.25 * depth);
          const double k = depth / next_depth - 1.0;
          motion.u[y * W + x] = static_cast<float>((static_cast<double>(x) + 0.5 - cam.cx) * k);
          motion.v[y * W + x] = static_cast<float>((py - cam.horizon) * k);
        }
      }
    }

    GroundTruthFrame gt;
    gt.anomaly_mask.assign(H * W, 0);
    gt.lead_gap = kin.gap[t];
    gt.lead_speed = kin.lead_speed[t];
    gt.ego_speed = kin.ego_speed[t];
    for (std::size_t vi = 0; vi < vehicles.size(); ++vi) {
      const auto& v = vehicles[vi];
      const auto outer = detail::project(cam, v, v.gap);
      const double w = outer.x1 - outer.x0, h = outer.y1 - outer.y0;
      const double border = std::max(0.6, 0.1 * w);
      const detail::Rect body{outer.x0 + border, outer.y0 + border, outer.x1 - border, outer.y1 - border};
      const detail::Rect window{outer.x0 + 0.18 * w, outer.y0 + 0.15 * h, outer.x1 - 0.18 * w, outer.y0 + 0.45 * h};
      const detail::Rect light_l{outer.x0 + 0.08 * w, outer.y0 + 0.58 * h, outer.x0 + 0.28 * w, outer.y0 + 0.72 * h};
      const detail::Rect light_r{outer.x1 - 0.28 * w, outer.y0 + 0.58 * h, outer.x1 - 0.08 * w, outer.y0 + 0.72 * h};
      const std::array<float, 3> dark{0.06f, 0.06f, 0.08f}, glass{0.16f, 0.2f, 0.28f}, red{0.95f, 0.12f, 0.1f};
      const std::pair<const detail::Rect*, std::array<float, 3>> layers[] = {
          {&outer, dark}, {&body, v.color}, {&window, glass}, {&light_l, red}, {&light_r, red}};
      const auto bx0 = static_cast<long>(std::floor(outer.x0)), bx1 = static_cast<long>(std::ceil(outer.x1));
      const auto by0 = static_cast<long>(std::floor(outer.y0)), by1 = static_cast<long>(std::ceil(outer.y1));
      const double k = v.gap / std::max(v.next_gap, 1e-3) - 1.0;
      for (long y = std::max(0L, by0); y < std::min<long>(static_cast<long>(H), by1); ++y) {
        for (long x = std::max(0L, bx0); x < std::min<long>(static_cast<long>(W), bx1); ++x) {
          const auto ux = static_cast<std::size_t>(x), uy = static_cast<std::size_t>(y);
          for (const auto& [rect, col] : layers) {
            const double cov = detail::coverage(*rect, ux, uy);
            if (cov <= 0) continue;
            for (std::size_t ch = 0; ch < 3; ++ch) {
              float& p = img.at(ch, uy, ux);
              p = static_cast<float>(p * (1.0 - cov) + col[ch] * cov);
            }
          }
          if (detail::coverage(outer, ux, uy) >= 0.5) {
            owner[uy * W + ux] = static_cast<int>(vi);
            motion.u[uy * W + ux] = static_cast<float>((static_cast<double>(x) + 0.5 - cam.cx) * k);
            motion.v[uy * W + ux] = static_cast<float>((static_cast<double>(y) + 0.5 - cam.horizon) * k);
          }
        }
      }
      BBox box{static_cast<int>(bx0), static_cast<int>(by0), static_cast<int>(bx1), static_cast<int>(by1),
               "vehicle", v.track_id, Provenance::ground_truth};
      box = box.clipped(static_cast<int>(W), static_cast<int>(H));
      if (box.valid()) gt.boxes.push_back(box);
    }
    std::sort(gt.boxes.begin(), gt.boxes.end(), [](const BBox& a, const BBox& b) { return a.track_id < b.track_id; });

    if (kin.braking[t]) {
      for (std::size_t i = 0; i < H * W; ++i)
        if (owner[i] >= 0 && vehicles[static_cast<std::size_t>(owner[i])].is_lead) gt.anomaly_mask[i] = 1;
    }
    gt.anomalous = std::any_of(gt.anomaly_mask.begin(), gt.anomaly_mask.end(), [](auto m) { return m != 0; });

    // Weather: rain streaks then sensor noise.
    Rng wrng(mix_seed(cfg.seed, {0x3ea7, t}));
    if (cfg.weather.rain_density > 0) {
      std::bernoulli_distribution has_streak(cfg.weather.rain_density);
      std::uniform_int_distribution<std::size_t> start(0, H - 1), len(3, std::max<std::size_t>(4, H / 8));
      for (std::size_t x = 0; x < W; ++x) {
        if (!has_streak(wrng)) continue;
        const std::size_t y0 = start(wrng), l = len(wrng);
        for (std::size_t y = y0; y < std::min(H, y0 + l); ++y)
          for (std::size_t ch = 0; ch < 3; ++ch) img.at(ch, y, x) += 0.22f;
      }
    }
    if (cfg.weather.noise_sigma > 0) {
      std::normal_distribution<float> noise(0.0f, static_cast<float>(cfg.weather.noise_sigma));
      for (auto& p : img.data) p += noise(wrng);
    }
    for (auto& p : img.data) p = std::clamp(p, 0.0f, 1.0f);

    sc.frames.push_back(std::move(img));
    sc.truth.frames.push_back(std::move(gt));
    if (t + 1 < T) sc.motion.push_back(std::move(motion));
  }
  return sc;
}

// ---------------------------------------------------------------------------
// Dataset construction

struct SplitSpec {
  std::string name;
  int count = 0;
  bool anomalous = false;  // test splits carry one braking event per scenario
};

struct DatasetSpec {
  std::uint64_t seed = 1;
  std::size_t height = 64, width = 64;
  int num_frames = 150;
  std::vector<SplitSpec> splits{{"train", 20, false}, {"test", 8, true}};
};

/// Draws a scenario config for split member `index`. Normal scenarios keep a constant ego speed
/// (a few are stationary); anomalous ones add a sudden braking event, with the ego stopping
/// when the lead stops and both resuming after the stop.
inline ScenarioConfig make_scenario_config(const DatasetSpec& spec, const SplitSpec& split, int index) {
  Rng rng(mix_seed(spec.seed, {fnv1a(split.name), static_cast<std::uint64_t>(index)}));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  ScenarioConfig c;
  char id[64];
  std::snprintf(id, sizeof id, "%s_%03d", split.name.c_str(), index);
  c.id = id;
  c.seed = mix_seed(spec.seed, {fnv1a(split.name), static_cast<std::uint64_t>(index), 0x5eed});
  c.height = spec.height;
  c.width = spec.width;
  c.num_frames = spec.num_frames;
  c.environment = index % 2 == 0 ? Environment::city : Environment::highway;
  c.lead.initial_gap = uniform(8.5, 12.0);
  c.lead.color = detail::random_colour(rng);
  c.lead.drift_amplitude = uniform(0.0, 0.01);
  c.lead.drift_period = uniform(60.0, 120.0);
  c.lead.drift_phase = uniform(0.0, 6.283185307179586);
  c.agents.count = static_cast<int>(std::floor(uniform(split.anomalous ? 1.0 : 0.0, 3.999)));
  c.agents.lanes = {-1, 1};
  const double weather_pick = u01(rng);
  c.weather.noise_sigma = weather_pick < 0.4 ? 0.0 : (weather_pick < 0.75 ? 0.01 : 0.025);
  c.weather.rain_density = u01(rng) < 0.3 ? 0.03 : 0.0;
  if (!split.anomalous) {
    const double v = (index % 10 == 7) ? 0.0 : uniform(0.15, 0.4);
    c.ego_speed = {{0, v}};
    return c;
  }
  const double v0 = uniform(0.2, 0.4);
  const double min_end_gap = 4.5;
  // Braking distance lost: sum_k (v0 - v_lead(k)) <= v0^2 / (2 d) + v0; keep the end gap >= min_end_gap.
  const double d_floor = v0 * v0 / (2.0 * (c.lead.initial_gap - min_end_gap - v0));
  const double d = std::max(uniform(0.008, 0.02), d_floor);
  const int duration = static_cast<int>(std::ceil(v0 / d));
  const int stop_duration = 15;
  const int latest_onset = spec.num_frames - duration - stop_duration - 10;
  if (latest_onset < 40) throw ConfigError(c.id + ": clip too short for a braking event");
  const int onset = static_cast<int>(uniform(40.0, static_cast<double>(std::min(70, latest_onset)) + 0.999));
  c.braking_events = {{onset, d, stop_duration}};
  c.lead.drift_amplitude = 0.0;  // the lead reaches the brake onset at exactly the ego speed
  c.ego_speed = {{0, v0}};
  // Stop frame computed with the same recurrence the simulator uses.
  double v = v0;
  int stop = onset;
  for (;;) {
    v = std::max(0.0, v - d);
    if (v == 0.0) break;
    ++stop;
  }
  c.ego_speed.push_back({stop + 1, 0.0});
  c.ego_speed.push_back({stop + 1 + stop_duration, v0});
  return c;
}

inline std::vector<float> frames_payload(const std::vector<Image>& frames) {
  std::vector<float> out;
  for (const auto& f : frames) out.insert(out.end(), f.data.begin(), f.data.end());
  return out;
}

inline json truth_to_json(const ScenarioConfig& cfg, const GroundTruth& gt) {
  json j;
  j["scenario_id"] = cfg.id;
  j["num_frames"] = gt.frames.size();
  j["frame_size"] = {gt.height, gt.width};
  j["frames"] = json::array();
  for (std::size_t t = 0; t < gt.frames.size(); ++t) {
    const auto& f = gt.frames[t];
    json jf;
    jf["index"] = t;
    jf["anomalous"] = f.anomalous;
    jf["lead_gap"] = f.lead_gap;
    jf["lead_speed"] = f.lead_speed;
    jf["ego_speed"] = f.ego_speed;
    jf["boxes"] = json::array();
    for (const auto& b : f.boxes) jf["boxes"].push_back(to_json(b));
    j["frames"].push_back(std::move(jf));
  }
  return j;
}

/// Writes frames.vadt, masks.vadt, gt_flows.vadt and gt.json into `dir`.
inline void write_scenario(const std::filesystem::path& dir, const Scenario& sc) {
  const auto T = static_cast<std::uint32_t>(sc.frames.size());
  const auto H = static_cast<std::uint32_t>(sc.config.height), W = static_cast<std::uint32_t>(sc.config.width);
  io::save(dir / "frames.vadt", {{"frames", {T, 3, H, W}, frames_payload(sc.frames)}});
  std::vector<float> masks;
  masks.reserve(static_cast<std::size_t>(T) * H * W);
  for (const auto& f : sc.truth.frames)
    for (auto m : f.anomaly_mask) masks.push_back(m ? 1.0f : 0.0f);
  io::save(dir / "masks.vadt", {{"masks", {T, H, W}, std::move(masks)}});
  std::vector<float> motion;
  for (const auto& m : sc.motion) {
    motion.insert(motion.end(), m.u.begin(), m.u.end());
    motion.insert(motion.end(), m.v.begin(), m.v.end());
  }
  io::save(dir / "gt_flows.vadt", {{"flows", {T - 1, 2, H, W}, std::move(motion)}});
  write_file(dir / "gt.json", truth_to_json(sc.config, sc.truth).dump(1));
}

inline constexpr int kDatasetFormatVersion = 1;

/// Generates every split into `root` and records all scenario configs in root/manifest.json.
inline json build_dataset(const std::filesystem::path& root, const DatasetSpec& spec, unsigned jobs = 1) {
  std::set<std::string> names;
  for (const auto& s : spec.splits) {
    if (s.name.empty() || s.name.find('/') != std::string::npos) throw ConfigError("invalid split name '" + s.name + "'");
    if (!names.insert(s.name).second) throw ConfigError("overlapping split name '" + s.name + "'");
  }
  json manifest;
  manifest["format_version"] = kDatasetFormatVersion;
  manifest["seed"] = spec.seed;
  manifest["splits"] = json::object();
  std::vector<std::pair<std::string, ScenarioConfig>> work;
  for (const auto& s : spec.splits) {
    manifest["splits"][s.name] = json::array();
    for (int i = 0; i < s.count; ++i) {
      auto cfg = make_scenario_config(spec, s, i);
      if (!s.anomalous && !cfg.braking_events.empty()) throw ConfigError("normal split with braking events");
      manifest["splits"][s.name].push_back(to_json(cfg));
      work.emplace_back(s.name, std::move(cfg));
    }
  }
  parallel_for(work.size(), jobs, [&](std::size_t i) {
    const auto& [split, cfg] = work[i];
    write_scenario(root / split / cfg.id, generate_scenario(cfg));
  });
  write_file(root / "manifest.json", manifest.dump(1));
  return manifest;
}

/// Regenerates a dataset from an existing manifest (same layout, same bytes).
inline void rebuild_from_manifest(const std::filesystem::path& manifest_path, const std::filesystem::path& root,
                                  unsigned jobs = 1) {
  const auto manifest = json::parse(read_file(manifest_path));
  if (manifest.at("format_version").get<int>() != kDatasetFormatVersion)
    throw ConfigError("unsupported dataset format version");
  std::vector<std::pair<std::string, ScenarioConfig>> work;
  for (const auto& [split, list] : manifest.at("splits").items())
    for (const auto& c : list) work.emplace_back(split, scenario_from_json(c));
  parallel_for(work.size(), jobs, [&](std::size_t i) {
    write_scenario(root / work[i].first / work[i].second.id, generate_scenario(work[i].second));
  });
  write_file(root / "manifest.json", manifest.dump(1));
}

// ---------------------------------------------------------------------------
// Loading

struct LoadedScenario {
  std::string split, id;
  std::filesystem::path dir;
  std::vector<Image> frames;
  std::vector<std::vector<BBox>> boxes;       // ground-truth boxes per frame
  std::vector<std::vector<std::uint8_t>> masks;
  std::vector<bool> anomalous;
};

inline std::vector<Image> images_from_tensor(const io::NamedTensor& t) {
  if (t.shape.size() != 4) throw IoError("expected a (T,C,H,W) tensor in '" + t.name + "'");
  std::vector<Image> out;
  const std::size_t c = t.shape[1], h = t.shape[2], w = t.shape[3], n = c * h * w;
  for (std::size_t i = 0; i < t.shape[0]; ++i) {
    Image img(c, h, w);
    std::copy_n(t.values.begin() + static_cast<std::ptrdiff_t>(i * n), n, img.data.begin());
    out.push_back(std::move(img));
  }
  return out;
}

inline LoadedScenario load_scenario(const std::filesystem::path& dir, const std::string& split) {
  LoadedScenario s;
  s.split = split;
  s.id = dir.filename().string();
  s.dir = dir;
  s.frames = images_from_tensor(io::find(io::load(dir / "frames.vadt"), "frames"));
  const auto gt = json::parse(read_file(dir / "gt.json"));
  for (const auto& f : gt.at("frames")) {
    std::vector<BBox> boxes;
    for (const auto& b : f.at("boxes")) boxes.push_back(bbox_from_json(b));
    s.boxes.push_back(std::move(boxes));
    s.anomalous.push_back(f.at("anomalous").get<bool>());
  }
  const auto masks = io::find(io::load(dir / "masks.vadt"), "masks");
  const std::size_t hw = masks.shape.at(1) * masks.shape.at(2);
  for (std::size_t t = 0; t < masks.shape.at(0); ++t) {
    std::vector<std::uint8_t> m(hw);
    for (std::size_t i = 0; i < hw; ++i) m[i] = masks.values[t * hw + i] > 0.5f ? 1 : 0;
    s.masks.push_back(std::move(m));
  }
  if (s.boxes.size() != s.frames.size() || s.masks.size() != s.frames.size())
    throw IoError("inconsistent scenario files in " + dir.string());
  return s;
}

/// Scenario directories of a split in manifest order.
inline std::vector<std::filesystem::path> split_dirs(const std::filesystem::path& root, const std::string& split) {
  const auto manifest_path = root / "manifest.json";
  if (!std::filesystem::exists(manifest_path))
    throw MissingPrerequisite("dataset manifest not found: " + manifest_path.string() + " (run 'gen' first)");
  const auto manifest = json::parse(read_file(manifest_path));
  std::vector<std::filesystem::path> out;
  if (!manifest.at("splits").contains(split)) throw ConfigError("dataset has no split '" + split + "'");
  for (const auto& c : manifest.at("splits").at(split)) out.push_back(root / split / c.at("id").get<std::string>());
  return out;
}

}  // namespace hfvad::scene
