#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "csiloc/geometry.hpp"

namespace csiloc {

struct Scatterer {
  Vec2 position;
  double reflection = 0.7;  // amplitude kept per bounce, in (0, 1]
};

struct Blocker {
  Vec2 a, b;  // opaque segment endpoints
};

// One cell's full reference frame: radio parameters plus the scene geometry
// that makes its channel-to-location mapping unique. Units: meters, Hz,
// radians. All distances are in the scenario's own global frame.
struct ScenarioSpec {
  std::string id;
  Vec2 bs_position;
  double array_orientation_rad = 0.0;
  int num_antennas = 8;
  int num_subcarriers = 8;
  double carrier_hz = 3.5e9;
  double bandwidth_hz = 40e6;
  std::vector<Scatterer> scatterers;
  std::vector<Blocker> blockers;
  Rect user_region;
  std::uint64_t seed = 0;

  void validate() const;

  nlohmann::json to_json() const;
  static ScenarioSpec from_json(const nlohmann::json& j);

  static ScenarioSpec load(const std::string& path);
  void save(const std::string& path) const;
};

// Rejects keys outside `allowed`; the error names the unknown key.
void require_only_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                       const std::string& context);

// Parameters for the built-in scene randomizer used by gen-scenario and the
// experiment suite.
struct ScenarioGenOptions {
  int num_antennas = 8;
  int num_subcarriers = 8;
  double carrier_hz = 3.5e9;
  double bandwidth_hz = 40e6;
  double region_size_m = 24.0;
  int min_scatterers = 3;
  int max_scatterers = 6;
  int min_blockers = 0;
  int max_blockers = 2;
};

// Deterministic in (id, seed, options). The base station lands outside the
// user region at a seed-chosen bearing so that different scenarios get
// genuinely different geometry (array orientation, scatterer layout,
// obstruction pattern).
ScenarioSpec make_random_scenario(const std::string& id, std::uint64_t seed,
                                  const ScenarioGenOptions& opt = {});

}  // namespace csiloc
