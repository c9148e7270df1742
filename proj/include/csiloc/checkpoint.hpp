#pragma once

#include <string>

#include "csiloc/baselines.hpp"
#include "csiloc/mateformer.hpp"
#include "csiloc/params.hpp"
#include "json.hpp"

namespace csiloc {

enum class ModelKind { mateformer, icl, d2l_raw, d2l_ad, multitask };

const char* to_string(ModelKind k);
ModelKind model_kind_from_string(const std::string& s);

nlohmann::json to_json(const MateformerConfig& cfg);
MateformerConfig mateformer_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const IclConfig& cfg);
IclConfig icl_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const D2lConfig& cfg);
D2lConfig d2l_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const MultitaskConfig& cfg);
MultitaskConfig multitask_config_from_json(const nlohmann::json& j);

// A trained (or freshly initialized) model at rest: kind tag, its config as
// JSON, free-form training metadata (seed, steps, input scales, ...), and the
// flat parameter arrays. On disk: "ALCK" magic, u16 version, u32 manifest
// length, manifest JSON, then every parameter's values as little-endian f32
// in manifest order.
struct Checkpoint {
  ModelKind kind = ModelKind::mateformer;
  nlohmann::json config;
  nlohmann::json meta;
  ParamSet<float> params;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Re-derives the parameter inventory from ck.config and demands exact
// name/shape agreement, so a mismatched manifest fails loudly, not at forward.
void check_checkpoint_params(const Checkpoint& ck);

}  // namespace csiloc
