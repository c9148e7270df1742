#include "csiloc/scenario.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "csiloc/rng.hpp"

namespace csiloc {

void require_only_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                       const std::string& context) {
  if (!j.is_object()) throw std::invalid_argument(context + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const auto& k : allowed)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok) throw std::invalid_argument(context + ": unknown key \"" + it.key() + "\"");
  }
}

namespace {

Vec2 vec2_from_json(const nlohmann::json& j, const std::string& context) {
  if (!j.is_array() || j.size() != 2)
    throw std::invalid_argument(context + ": expected [x, y] (two numbers)");
  return {j[0].get<double>(), j[1].get<double>()};
}

nlohmann::json vec2_to_json(Vec2 v) { return nlohmann::json::array({v.x, v.y}); }

}  // namespace

void ScenarioSpec::validate() const {
  if (id.empty()) throw std::invalid_argument("scenario: id must be nonempty");
  if (num_antennas < 1 || num_subcarriers < 1)
    throw std::invalid_argument("scenario '" + id + "': antenna and subcarrier counts must be >= 1");
  if (!(bandwidth_hz > 0)) throw std::invalid_argument("scenario '" + id + "': bandwidth must be > 0");
  if (!(carrier_hz > 0)) throw std::invalid_argument("scenario '" + id + "': carrier must be > 0");
  if (!(user_region.area() > 0))
    throw std::invalid_argument("scenario '" + id + "': user region must have positive area");
  for (const auto& s : scatterers)
    if (!(s.reflection > 0) || s.reflection > 1)
      throw std::invalid_argument("scenario '" + id + "': reflection coefficient " +
                                  std::to_string(s.reflection) + " outside (0, 1]");
}

nlohmann::json ScenarioSpec::to_json() const {
  nlohmann::json j;
  j["id"] = id;
  j["bs_position"] = vec2_to_json(bs_position);
  j["array_orientation_rad"] = array_orientation_rad;
  j["num_antennas"] = num_antennas;
  j["num_subcarriers"] = num_subcarriers;
  j["carrier_hz"] = carrier_hz;
  j["bandwidth_hz"] = bandwidth_hz;
  j["scatterers"] = nlohmann::json::array();
  for (const auto& s : scatterers)
    j["scatterers"].push_back({{"position", vec2_to_json(s.position)}, {"reflection", s.reflection}});
  j["blockers"] = nlohmann::json::array();
  for (const auto& b : blockers)
    j["blockers"].push_back({{"a", vec2_to_json(b.a)}, {"b", vec2_to_json(b.b)}});
  j["user_region"] = {{"xmin", user_region.xmin},
                      {"ymin", user_region.ymin},
                      {"xmax", user_region.xmax},
                      {"ymax", user_region.ymax}};
  j["seed"] = seed;
  return j;
}

ScenarioSpec ScenarioSpec::from_json(const nlohmann::json& j) {
  require_only_keys(j,
                    {"id", "bs_position", "array_orientation_rad", "num_antennas",
                     "num_subcarriers", "carrier_hz", "bandwidth_hz", "scatterers", "blockers",
                     "user_region", "seed"},
                    "scenario");
  ScenarioSpec s;
  try {
    s.id = j.at("id").get<std::string>();
    s.bs_position = vec2_from_json(j.at("bs_position"), "scenario.bs_position");
    s.array_orientation_rad = j.at("array_orientation_rad").get<double>();
    s.num_antennas = j.at("num_antennas").get<int>();
    s.num_subcarriers = j.at("num_subcarriers").get<int>();
    s.carrier_hz = j.at("carrier_hz").get<double>();
    s.bandwidth_hz = j.at("bandwidth_hz").get<double>();
    for (const auto& sj : j.at("scatterers")) {
      require_only_keys(sj, {"position", "reflection"}, "scenario.scatterers[]");
      Scatterer sc;
      sc.position = vec2_from_json(sj.at("position"), "scenario.scatterers[].position");
      sc.reflection = sj.at("reflection").get<double>();
      s.scatterers.push_back(sc);
    }
    for (const auto& bj : j.at("blockers")) {
      require_only_keys(bj, {"a", "b"}, "scenario.blockers[]");
      s.blockers.push_back({vec2_from_json(bj.at("a"), "scenario.blockers[].a"),
                            vec2_from_json(bj.at("b"), "scenario.blockers[].b")});
    }
    const auto& rj = j.at("user_region");
    require_only_keys(rj, {"xmin", "ymin", "xmax", "ymax"}, "scenario.user_region");
    s.user_region = {rj.at("xmin").get<double>(), rj.at("ymin").get<double>(),
                     rj.at("xmax").get<double>(), rj.at("ymax").get<double>()};
    s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("scenario: malformed document: ") + e.what());
  }
  s.validate();
  return s;
}

ScenarioSpec ScenarioSpec::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("scenario: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("scenario: '" + path + "' is not valid JSON: " + e.what());
  }
  return from_json(j);
}

void ScenarioSpec::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("scenario: cannot write '" + path + "'");
  out << to_json().dump(2) << '\n';
}

ScenarioSpec make_random_scenario(const std::string& id, std::uint64_t seed,
                                  const ScenarioGenOptions& opt) {
  Rng root(seed);
  Rng geo = root.derive("scene-geometry");

  ScenarioSpec s;
  s.id = id;
  s.seed = seed;
  s.num_antennas = opt.num_antennas;
  s.num_subcarriers = opt.num_subcarriers;
  s.carrier_hz = opt.carrier_hz;
  s.bandwidth_hz = opt.bandwidth_hz;
  const double L = opt.region_size_m;
  s.user_region = {0, 0, L, L};

  // BS on a ring just outside the region, boresight roughly toward the center
  const double bearing = geo.uniform(0, 2 * M_PI);
  const Vec2 center{L / 2, L / 2};
  const double ring = L * geo.uniform(0.75, 1.05);
  s.bs_position = {center.x + ring * std::cos(bearing), center.y + ring * std::sin(bearing)};
  const double toward = std::atan2(center.y - s.bs_position.y, center.x - s.bs_position.x);
  s.array_orientation_rad = toward + geo.uniform(-0.5, 0.5);

  const int n_sc = geo.uniform_int(opt.min_scatterers, opt.max_scatterers);
  for (int i = 0; i < n_sc; ++i) {
    Scatterer sc;
    // scatterers live in a margin band around and inside the region
    sc.position = {geo.uniform(-0.2 * L, 1.2 * L), geo.uniform(-0.2 * L, 1.2 * L)};
    sc.reflection = geo.uniform(0.5, 0.9);
    s.scatterers.push_back(sc);
  }

  const int n_bl = geo.uniform_int(opt.min_blockers, opt.max_blockers);
  for (int i = 0; i < n_bl; ++i) {
    // short interior wall; random midpoint and heading
    const Vec2 mid{geo.uniform(0.15 * L, 0.85 * L), geo.uniform(0.15 * L, 0.85 * L)};
    const double half = geo.uniform(1.0, 3.0);
    const double heading = geo.uniform(0, 2 * M_PI);
    const Vec2 dir{std::cos(heading), std::sin(heading)};
    s.blockers.push_back({mid - dir * half, mid + dir * half});
  }

  s.validate();
  return s;
}

}  // namespace csiloc
