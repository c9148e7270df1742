#pragma once

#include <complex>
#include <vector>

#include "csiloc/rng.hpp"
#include "csiloc/scenario.hpp"

namespace csiloc {

inline constexpr double kSpeedOfLight = 299792458.0;

// One propagation path resolved from the scene geometry.
struct Path {
  double length_m = 0;  // total traveled distance
  int bounces = 0;      // 0 = line of sight
  double sin_aoa = 0;   // sin(theta - phi) of the segment arriving at the array
  double gain = 0;      // amplitude: reflection^bounces / length
};

// Frequency response across the array: antenna-major [N_t x N_c].
struct CSIMatrix {
  int nt = 0, nc = 0;
  std::vector<std::complex<float>> h;

  static CSIMatrix zeros(int nt, int nc) {
    CSIMatrix m;
    m.nt = nt;
    m.nc = nc;
    m.h.assign(std::size_t(nt) * nc, {0.f, 0.f});
    return m;
  }
  std::complex<float>& at(int m, int k) { return h[std::size_t(m) * nc + k]; }
  const std::complex<float>& at(int m, int k) const { return h[std::size_t(m) * nc + k]; }
};

// Resolves the direct path (if no blocker cuts BS-user) plus one single-bounce
// path per scatterer visible from both ends. Pure function of its arguments;
// an empty result means deep NLoS and is valid.
std::vector<Path> trace_paths(const ScenarioSpec& scenario, Vec2 user);

// H[m,k] = sum_l g_l * exp(i*pi*m*s_l) * exp(-i*2*pi*f_k*tau_l) with
// half-wavelength element spacing, tau = length/c, and subcarriers centered
// at baseband: f_k = (k - (N_c-1)/2) * B / N_c.
CSIMatrix synthesize_csi(const std::vector<Path>& paths, const ScenarioSpec& scenario);

// Hadamard corruption: every complex entry is scaled by one real draw from
// N(1, sigma^2) (phase preserved).
CSIMatrix apply_csi_noise(const CSIMatrix& h, double sigma, Rng& rng);

// Magnitude of the unitary 2D DFT of H, [N_t x N_c] row-major.
std::vector<float> angle_delay_transform(const CSIMatrix& h);

}  // namespace csiloc
