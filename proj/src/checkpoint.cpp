#include "csiloc/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "csiloc/scenario.hpp"  // require_only_keys

namespace csiloc {

const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::mateformer: return "mateformer";
    case ModelKind::icl: return "icl";
    case ModelKind::d2l_raw: return "d2l-raw";
    case ModelKind::d2l_ad: return "d2l-ad";
    case ModelKind::multitask: return "multitask";
  }
  throw std::logic_error("unhandled model kind");
}

ModelKind model_kind_from_string(const std::string& s) {
  for (ModelKind k : {ModelKind::mateformer, ModelKind::icl, ModelKind::d2l_raw,
                      ModelKind::d2l_ad, ModelKind::multitask})
    if (s == to_string(k)) return k;
  throw std::invalid_argument(
      "unknown model kind '" + s + "' (mateformer | icl | d2l-raw | d2l-ad | multitask)");
}

nlohmann::json to_json(const MateformerConfig& cfg) {
  return {{"depth", cfg.depth}, {"d_model", cfg.d_model}, {"d_ff", cfg.d_ff},
          {"heads", cfg.heads}, {"nt", cfg.nt},           {"nc", cfg.nc}};
}

MateformerConfig mateformer_config_from_json(const nlohmann::json& j) {
  require_only_keys(j, {"depth", "d_model", "d_ff", "heads", "nt", "nc"}, "mateformer config");
  MateformerConfig cfg;
  cfg.depth = j.at("depth").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.d_ff = j.at("d_ff").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.nt = j.at("nt").get<int>();
  cfg.nc = j.at("nc").get<int>();
  cfg.validate();
  return cfg;
}

nlohmann::json to_json(const IclConfig& cfg) {
  return {{"depth", cfg.depth}, {"d_model", cfg.d_model}, {"heads", cfg.heads},
          {"nt", cfg.nt},       {"nc", cfg.nc},           {"max_pairs", cfg.max_pairs}};
}

IclConfig icl_config_from_json(const nlohmann::json& j) {
  require_only_keys(j, {"depth", "d_model", "heads", "nt", "nc", "max_pairs"}, "icl config");
  IclConfig cfg;
  cfg.depth = j.at("depth").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.nt = j.at("nt").get<int>();
  cfg.nc = j.at("nc").get<int>();
  cfg.max_pairs = j.at("max_pairs").get<int>();
  cfg.validate();
  return cfg;
}

nlohmann::json to_json(const D2lConfig& cfg) {
  return {{"hidden", cfg.hidden},
          {"features", to_string(cfg.features)},
          {"nt", cfg.nt},
          {"nc", cfg.nc}};
}

D2lConfig d2l_config_from_json(const nlohmann::json& j) {
  require_only_keys(j, {"hidden", "features", "nt", "nc"}, "d2l config");
  D2lConfig cfg;
  cfg.hidden = j.at("hidden").get<std::vector<int>>();
  cfg.features = feature_kind_from_string(j.at("features").get<std::string>());
  cfg.nt = j.at("nt").get<int>();
  cfg.nc = j.at("nc").get<int>();
  cfg.validate();
  return cfg;
}

nlohmann::json to_json(const MultitaskConfig& cfg) {
  return {{"hidden", cfg.hidden},
          {"features", to_string(cfg.features)},
          {"nt", cfg.nt},
          {"nc", cfg.nc},
          {"scenarios", cfg.scenarios}};
}

MultitaskConfig multitask_config_from_json(const nlohmann::json& j) {
  require_only_keys(j, {"hidden", "features", "nt", "nc", "scenarios"}, "multitask config");
  MultitaskConfig cfg;
  cfg.hidden = j.at("hidden").get<std::vector<int>>();
  cfg.features = feature_kind_from_string(j.at("features").get<std::string>());
  cfg.nt = j.at("nt").get<int>();
  cfg.nc = j.at("nc").get<int>();
  cfg.scenarios = j.at("scenarios").get<std::vector<std::string>>();
  cfg.validate();
  return cfg;
}

namespace {

constexpr char kMagic[4] = {'A', 'L', 'C', 'K'};
constexpr std::uint16_t kVersion = 1;

template <typename T>
void write_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_raw(std::istream& in, T& v, const std::string& what) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated file while reading " + what);
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write '" + path + "'");

  nlohmann::json manifest;
  manifest["kind"] = to_string(ck.kind);
  manifest["config"] = ck.config;
  manifest["meta"] = ck.meta;
  nlohmann::json plist = nlohmann::json::array();
  std::size_t offset = 0;
  for (int i = 0; i < ck.params.size(); ++i) {
    const auto& p = ck.params.at(i);
    plist.push_back({{"name", p.name}, {"shape", p.value.shape}, {"offset", offset}});
    offset += p.value.size();
  }
  manifest["params"] = std::move(plist);
  const std::string ms = manifest.dump();

  out.write(kMagic, 4);
  write_raw(out, kVersion);
  write_raw(out, std::uint32_t(ms.size()));
  out.write(ms.data(), std::streamsize(ms.size()));
  for (int i = 0; i < ck.params.size(); ++i) {
    const auto& vals = ck.params.at(i).value.v;
    out.write(reinterpret_cast<const char*>(vals.data()),
              std::streamsize(vals.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");

  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: '" + path + "' is not a checkpoint file (bad magic)");
  std::uint16_t version = 0;
  read_raw(in, version, "version");
  if (version != kVersion)
    throw std::runtime_error("checkpoint: '" + path + "' has unsupported version " +
                             std::to_string(version));
  std::uint32_t mlen = 0;
  read_raw(in, mlen, "manifest length");
  std::string ms(mlen, '\0');
  in.read(ms.data(), mlen);
  if (!in) throw std::runtime_error("checkpoint: truncated file while reading manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(ms);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint: '" + path + "' manifest is not valid JSON: " + e.what());
  }
  require_only_keys(manifest, {"kind", "config", "meta", "params"}, "checkpoint manifest");

  Checkpoint ck;
  ck.kind = model_kind_from_string(manifest.at("kind").get<std::string>());
  ck.config = manifest.at("config");
  ck.meta = manifest.at("meta");

  std::size_t expect_offset = 0;
  for (const auto& pj : manifest.at("params")) {
    require_only_keys(pj, {"name", "shape", "offset"}, "checkpoint parameter entry");
    const auto name = pj.at("name").get<std::string>();
    const auto shape = pj.at("shape").get<std::vector<int>>();
    if (pj.at("offset").get<std::size_t>() != expect_offset)
      throw std::runtime_error("checkpoint: '" + path + "' parameter '" + name +
                               "' offset disagrees with the preceding shapes");
    Tensor<float> t = Tensor<float>::zeros(shape);
    in.read(reinterpret_cast<char*>(t.v.data()), std::streamsize(t.v.size() * sizeof(float)));
    if (!in)
      throw std::runtime_error("checkpoint: truncated file while reading parameter '" + name +
                               "'");
    expect_offset += t.v.size();
    ck.params.add(name, std::move(t));
  }
  // demand exact length: trailing junk means the manifest lies about shapes
  char extra;
  if (in.read(&extra, 1))
    throw std::runtime_error("checkpoint: '" + path + "' has trailing bytes beyond the manifest");
  return ck;
}

namespace {

template <typename Model>
void require_same_inventory(const ParamSet<float>& got, const Model& fresh,
                            const std::string& kind) {
  const ParamSet<float>& want = fresh.params();
  if (got.size() != want.size())
    throw std::runtime_error("checkpoint: " + kind + " expects " + std::to_string(want.size()) +
                             " parameter groups, file has " + std::to_string(got.size()));
  for (int i = 0; i < want.size(); ++i) {
    if (got.at(i).name != want.at(i).name)
      throw std::runtime_error("checkpoint: " + kind + " parameter " + std::to_string(i) +
                               " should be '" + want.at(i).name + "', file has '" +
                               got.at(i).name + "'");
    if (got.at(i).value.shape != want.at(i).value.shape)
      throw std::runtime_error("checkpoint: " + kind + " parameter '" + got.at(i).name +
                               "' has shape " + shape_str(got.at(i).value.shape) + ", expected " +
                               shape_str(want.at(i).value.shape));
  }
}

}  // namespace

void check_checkpoint_params(const Checkpoint& ck) {
  switch (ck.kind) {
    case ModelKind::mateformer:
      require_same_inventory(ck.params,
                             Mateformer<float>::init(mateformer_config_from_json(ck.config), 0),
                             "mateformer");
      return;
    case ModelKind::icl:
      require_same_inventory(ck.params, Icl<float>::init(icl_config_from_json(ck.config), 0),
                             "icl");
      return;
    case ModelKind::d2l_raw:
    case ModelKind::d2l_ad: {
      const D2lConfig cfg = d2l_config_from_json(ck.config);
      const FeatureKind want =
          ck.kind == ModelKind::d2l_raw ? FeatureKind::raw : FeatureKind::angle_delay;
      if (cfg.features != want)
        throw std::runtime_error(std::string("checkpoint: kind '") + to_string(ck.kind) +
                                 "' disagrees with configured features '" +
                                 to_string(cfg.features) + "'");
      require_same_inventory(ck.params, D2lModel<float>::init(cfg, 0), to_string(ck.kind));
      return;
    }
    case ModelKind::multitask:
      require_same_inventory(ck.params,
                             Multitask<float>::init(multitask_config_from_json(ck.config), 0),
                             "multitask");
      return;
  }
  throw std::logic_error("unhandled model kind");
}

}  // namespace csiloc
