#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "csiloc/checkpoint.hpp"
#include "csiloc/dataset.hpp"
#include "csiloc/geometry.hpp"
#include "csiloc/training.hpp"

namespace csiloc {

// Euclidean distance in meters.
double localization_error(Vec2 truth, Vec2 estimate);

struct ErrorSummary {
  double mean_m = 0;
  double p10_m = 0;
  double p90_m = 0;
  int count = 0;
};

// Mean plus nearest-rank percentiles: rank = ceil(q * count) on the ascending
// sort, 1-based.
ErrorSummary error_summary(const std::vector<double>& errors);

// direct:        one isolated input -> location (d2l and multitask families)
// neighborhood:  references are the k training pairs nearest to a coarse
//                location x' = truth + U[-l,l]^2 (analogy families)
// random:        references are k uniform training pairs
// iterative:     a random-mode prediction becomes x' for a neighborhood pass
enum class EvalMode { direct, neighborhood, random, iterative };
const char* to_string(EvalMode m);
EvalMode eval_mode_from_string(const std::string& s);

struct EvalOptions {
  EvalMode mode = EvalMode::direct;
  int n = 32;               // reference budget when k is unset
  int k = -1;               // reference count; -1 means n
  double l = 1.0;           // coarse-location half-width (meters)
  double noise_sigma = 0;   // multiplicative N(1, sigma^2) on evaluated inputs
  std::uint64_t seed = 1;
  int max_samples = -1;     // cap on evaluated test samples; -1 = all

  int refs() const { return k > 0 ? k : n; }
};

struct SampleRecord {
  Vec2 truth{0, 0};
  Vec2 coarse{0, 0};  // search center (or first-pass prediction); see has_coarse
  bool has_coarse = false;
  Vec2 pred{0, 0};
  double error_m = 0;
};

struct EvalResult {
  ErrorSummary summary;
  std::vector<SampleRecord> records;
};

// Scores a checkpoint on a test set. `train` supplies reference pairs for the
// analogy modes and may be null for direct mode. Mode/model-family mismatch
// is an error, as is a multitask checkpoint without the test scenario's head.
EvalResult eval_model(const Checkpoint& ck, const Dataset& test, const Dataset* train,
                      const EvalOptions& opt);

// 16-hex-digit FNV-1a of a canonical config string.
std::string config_hash_hex(const std::string& canonical);

// Runs one named protocol from a strict-JSON manifest (paths to datasets and
// checkpoints, protocol-specific fields) and returns the result table. Every
// row: experiment, model, train_scenarios, eval_scenario, mode, sweep_param,
// sweep_value, mean_m, p10_m, p90_m, count, seed, config_hash.
struct ExperimentResult {
  std::string csv;
  nlohmann::json effective_manifest;
};

ExperimentResult run_experiment(const nlohmann::json& manifest);

}  // namespace csiloc
