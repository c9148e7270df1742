#include "csiloc/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace csiloc {

std::string to_string(DatasetRole r) {
  return r == DatasetRole::training ? "training" : "testing";
}

DatasetRole dataset_role_from_string(const std::string& s) {
  if (s == "training") return DatasetRole::training;
  if (s == "testing") return DatasetRole::testing;
  throw std::invalid_argument("dataset: unknown role \"" + s + "\" (training|testing)");
}

Dataset generate_dataset(const ScenarioSpec& scenario, int count, DatasetRole role, Rng rng) {
  if (count < 1) throw std::invalid_argument("generate_dataset: count must be >= 1");
  scenario.validate();
  Dataset d;
  d.scenario = scenario;
  d.role = role;
  d.samples.reserve(count);

  const long redraw_budget = std::max<long>(100, count);  // sustained >50% failure aborts
  long redraws = 0;
  const Rect& reg = scenario.user_region;
  for (int i = 0; i < count; ++i) {
    Rng sr = rng.derive("sample", std::uint64_t(i));
    for (;;) {
      const Vec2 user{sr.uniform(reg.xmin, reg.xmax), sr.uniform(reg.ymin, reg.ymax)};
      const auto paths = trace_paths(scenario, user);
      if (paths.empty()) {
        if (++redraws > redraw_budget)
          throw std::runtime_error("generate_dataset: scene mostly blocked in scenario '" +
                                   scenario.id + "' (" + std::to_string(redraws) +
                                   " redraws for " + std::to_string(i) + " samples)");
        continue;
      }
      Sample s;
      s.csi = synthesize_csi(paths, scenario);
      s.loc_x = float(user.x - scenario.bs_position.x);
      s.loc_y = float(user.y - scenario.bs_position.y);
      d.samples.push_back(std::move(s));
      break;
    }
  }
  return d;
}

NeighborIndex NeighborIndex::build(const Dataset& d) {
  NeighborIndex idx;
  idx.points.reserve(d.samples.size());
  for (const auto& s : d.samples) idx.points.push_back(s.location());
  return idx;
}

std::vector<int> knn_search(const NeighborIndex& index, Vec2 query, int k) {
  const int n = index.size();
  if (k > n)
    throw std::invalid_argument("knn_search: k=" + std::to_string(k) + " exceeds index size " +
                                std::to_string(n));
  // (squared distance, index) pairs; nth_element then sort of the head.
  std::vector<std::pair<double, int>> dist(n);
  for (int i = 0; i < n; ++i) {
    const double dx = index.points[i].x - query.x, dy = index.points[i].y - query.y;
    dist[i] = {dx * dx + dy * dy, i};
  }
  if (k < n) std::nth_element(dist.begin(), dist.begin() + k, dist.end());
  std::sort(dist.begin(), dist.begin() + k);
  std::vector<int> out(k);
  for (int i = 0; i < k; ++i) out[i] = dist[i].second;
  return out;
}

std::vector<std::vector<int>> build_neighbor_lists(const Dataset& train, int n) {
  if (n >= train.size())
    throw std::invalid_argument("build_neighbor_lists: n=" + std::to_string(n) +
                                " must be below the dataset size " + std::to_string(train.size()));
  NeighborIndex idx = NeighborIndex::build(train);
  std::vector<std::vector<int>> lists(train.size());
  for (int a = 0; a < train.size(); ++a) {
    // n+1 nearest including the anchor itself, then force the anchor to
    // slot 0 (it is nearest to itself, but a coincident point with a lower
    // index could displace it under the tie rule; either way the non-anchor
    // entries stay ascending).
    std::vector<int> near = knn_search(idx, idx.points[a], n + 1);
    std::vector<int>& out = lists[a];
    out.reserve(n + 1);
    out.push_back(a);
    for (int id : near)
      if (id != a && int(out.size()) < n + 1) out.push_back(id);
  }
  return lists;
}

Vec2 coarse_location(Vec2 x, double l, Rng& rng) {
  if (l < 0) throw std::invalid_argument("coarse_location: l must be >= 0");
  if (l == 0) return x;
  const double c = rng.uniform(-l, l);
  const double d = rng.uniform(-l, l);
  return {x.x + c, x.y + d};
}

namespace {

constexpr char kMagic[4] = {'A', 'L', 'D', 'S'};
constexpr std::uint16_t kVersion = 1;

template <typename T>
void write_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_raw(std::istream& in, T& v, const std::string& what) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("dataset: truncated file while reading " + what);
}

}  // namespace

void save_dataset(const Dataset& d, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("dataset: cannot write '" + path + "'");

  nlohmann::json header;
  header["scenario"] = d.scenario.to_json();
  header["count"] = d.size();
  header["nt"] = d.nt();
  header["nc"] = d.nc();
  header["role"] = to_string(d.role);
  const std::string hs = header.dump();

  out.write(kMagic, 4);
  write_raw(out, kVersion);
  write_raw(out, std::uint32_t(hs.size()));
  out.write(hs.data(), std::streamsize(hs.size()));

  for (const auto& s : d.samples) {
    write_raw(out, s.loc_x);
    write_raw(out, s.loc_y);
    for (const auto& z : s.csi.h) {
      write_raw(out, z.real());
      write_raw(out, z.imag());
    }
  }
  if (!out) throw std::runtime_error("dataset: write failed for '" + path + "'");
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("dataset: cannot open '" + path + "'");

  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("dataset: '" + path + "' is not a dataset file (bad magic)");
  std::uint16_t version = 0;
  read_raw(in, version, "version");
  if (version != kVersion)
    throw std::runtime_error("dataset: '" + path + "' has unsupported version " +
                             std::to_string(version));
  std::uint32_t hlen = 0;
  read_raw(in, hlen, "header length");
  std::string hs(hlen, '\0');
  in.read(hs.data(), hlen);
  if (!in) throw std::runtime_error("dataset: truncated file while reading header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("dataset: '" + path + "' header is not valid JSON: " + e.what());
  }
  require_only_keys(header, {"scenario", "count", "nt", "nc", "role"}, "dataset header");

  Dataset d;
  d.scenario = ScenarioSpec::from_json(header.at("scenario"));
  d.role = dataset_role_from_string(header.at("role").get<std::string>());
  const int count = header.at("count").get<int>();
  const int nt = header.at("nt").get<int>();
  const int nc = header.at("nc").get<int>();
  if (nt != d.scenario.num_antennas || nc != d.scenario.num_subcarriers)
    throw std::runtime_error("dataset: '" + path + "' header dims disagree with its scenario");

  d.samples.resize(count);
  for (auto& s : d.samples) {
    read_raw(in, s.loc_x, "sample location");
    read_raw(in, s.loc_y, "sample location");
    s.csi = CSIMatrix::zeros(nt, nc);
    for (auto& z : s.csi.h) {
      float re = 0, im = 0;
      read_raw(in, re, "CSI values");
      read_raw(in, im, "CSI values");
      z = {re, im};
    }
  }
  return d;
}

double csi_component_rms(const Dataset& d) {
  double acc = 0;
  std::size_t n = 0;
  for (const auto& s : d.samples)
    for (const auto& z : s.csi.h) {
      acc += double(z.real()) * double(z.real()) + double(z.imag()) * double(z.imag());
      n += 2;
    }
  if (n == 0) throw std::invalid_argument("csi_component_rms: empty dataset");
  return std::sqrt(acc / double(n));
}

double mean_nearest_neighbor_spacing(const Dataset& d) {
  const int n = d.size();
  if (n < 2) throw std::invalid_argument("mean_nearest_neighbor_spacing: need >= 2 samples");
  double acc = 0;
  for (int i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    const Vec2 pi = d.samples[i].location();
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dx = pi.x - d.samples[j].location().x;
      const double dy = pi.y - d.samples[j].location().y;
      best = std::min(best, dx * dx + dy * dy);
    }
    acc += std::sqrt(best);
  }
  return acc / n;
}

}  // namespace csiloc
