#include "csiloc/channel.hpp"

#include <cmath>
#include <stdexcept>

namespace csiloc {
namespace {

bool segment_blocked(const ScenarioSpec& sc, Vec2 a, Vec2 b) {
  for (const auto& bl : sc.blockers)
    if (segments_intersect(a, b, bl.a, bl.b)) return true;
  return false;
}

double sin_arrival(const ScenarioSpec& sc, Vec2 from_point) {
  const double theta =
      std::atan2(from_point.y - sc.bs_position.y, from_point.x - sc.bs_position.x);
  return std::sin(theta - sc.array_orientation_rad);
}

}  // namespace

std::vector<Path> trace_paths(const ScenarioSpec& scenario, Vec2 user) {
  if (!scenario.user_region.contains(user))
    throw std::invalid_argument("trace_paths: user (" + std::to_string(user.x) + ", " +
                                std::to_string(user.y) + ") outside the user region of scenario '" +
                                scenario.id + "'");
  std::vector<Path> paths;
  const Vec2 bs = scenario.bs_position;

  if (!segment_blocked(scenario, bs, user)) {
    Path p;
    p.length_m = distance(bs, user);
    p.bounces = 0;
    p.sin_aoa = sin_arrival(scenario, user);
    p.gain = 1.0 / p.length_m;
    paths.push_back(p);
  }

  for (const auto& sc : scenario.scatterers) {
    if (segment_blocked(scenario, bs, sc.position)) continue;
    if (segment_blocked(scenario, sc.position, user)) continue;
    Path p;
    p.length_m = distance(bs, sc.position) + distance(sc.position, user);
    p.bounces = 1;
    p.sin_aoa = sin_arrival(scenario, sc.position);  // last segment into the array
    p.gain = sc.reflection / p.length_m;
    paths.push_back(p);
  }
  return paths;
}

CSIMatrix synthesize_csi(const std::vector<Path>& paths, const ScenarioSpec& scenario) {
  const int nt = scenario.num_antennas, nc = scenario.num_subcarriers;
  CSIMatrix out = CSIMatrix::zeros(nt, nc);
  for (const auto& p : paths)
    if (!std::isfinite(p.length_m) || !std::isfinite(p.sin_aoa) || !std::isfinite(p.gain))
      throw std::invalid_argument("synthesize_csi: non-finite path parameters");

  for (int m = 0; m < nt; ++m) {
    for (int k = 0; k < nc; ++k) {
      const double fk = (k - (nc - 1) / 2.0) * scenario.bandwidth_hz / nc;
      std::complex<double> acc{0, 0};
      for (const auto& p : paths) {
        const double tau = p.length_m / kSpeedOfLight;
        const double phase = M_PI * m * p.sin_aoa - 2.0 * M_PI * fk * tau;
        acc += p.gain * std::complex<double>(std::cos(phase), std::sin(phase));
      }
      out.at(m, k) = std::complex<float>(float(acc.real()), float(acc.imag()));
    }
  }
  return out;
}

CSIMatrix apply_csi_noise(const CSIMatrix& h, double sigma, Rng& rng) {
  if (sigma < 0) throw std::invalid_argument("apply_csi_noise: sigma must be >= 0");
  if (sigma == 0) return h;
  CSIMatrix out = h;
  for (auto& z : out.h) {
    const float d = float(rng.normal(1.0, sigma));
    z *= d;
  }
  return out;
}

std::vector<float> angle_delay_transform(const CSIMatrix& h) {
  const int nt = h.nt, nc = h.nc;
  // separable 2D DFT in double, then unitary scaling
  std::vector<std::complex<double>> rows(std::size_t(nt) * nc), full(std::size_t(nt) * nc);
  for (int m = 0; m < nt; ++m)
    for (int v = 0; v < nc; ++v) {
      std::complex<double> acc{0, 0};
      for (int k = 0; k < nc; ++k) {
        const double ang = -2.0 * M_PI * double(v) * double(k) / nc;
        const std::complex<double> z(h.at(m, k).real(), h.at(m, k).imag());
        acc += z * std::complex<double>(std::cos(ang), std::sin(ang));
      }
      rows[std::size_t(m) * nc + v] = acc;
    }
  for (int u = 0; u < nt; ++u)
    for (int v = 0; v < nc; ++v) {
      std::complex<double> acc{0, 0};
      for (int m = 0; m < nt; ++m) {
        const double ang = -2.0 * M_PI * double(u) * double(m) / nt;
        acc += rows[std::size_t(m) * nc + v] * std::complex<double>(std::cos(ang), std::sin(ang));
      }
      full[std::size_t(u) * nc + v] = acc;
    }
  std::vector<float> mag(std::size_t(nt) * nc);
  const double scale = 1.0 / std::sqrt(double(nt) * double(nc));
  for (std::size_t i = 0; i < mag.size(); ++i) mag[i] = float(std::abs(full[i]) * scale);
  return mag;
}

}  // namespace csiloc
