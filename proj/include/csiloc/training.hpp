#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "csiloc/checkpoint.hpp"
#include "csiloc/dataset.hpp"
#include "csiloc/mateformer.hpp"
#include "csiloc/rng.hpp"

namespace csiloc {

// How reference pairs are drawn for an analogy task: from the anchor's spatial
// neighborhood, or uniformly from the whole training set.
enum class SamplingMode { neighborhood, random };
const char* to_string(SamplingMode m);
SamplingMode sampling_mode_from_string(const std::string& s);

struct LrSchedule {
  double base = 1e-4;
  double factor = 0.2;
  long interval = 50000;
  long activation = 100000;  // first decay lands at activation + interval
};

double lr_at_step(long step, const LrSchedule& s);

struct TrainConfig {
  int batch_size = 64;
  long steps = 20000;
  LrSchedule schedule;
  int n = 32;  // neighbor count for list building; pair budget is n+1
  int p_min = 8, p_max = 32;
  int q_min = 1, q_max = 16;
  SamplingMode sampling = SamplingMode::neighborhood;
  std::uint64_t seed = 1;
  int log_every = 100;
  // parameters whose name starts with any of these never move (their
  // gradients are zeroed before the optimizer step)
  std::vector<std::string> freeze_prefixes;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
// Strict parse: unknown keys are rejected by name; absent keys keep their
// defaults. The "lr" sub-object carries the schedule.
TrainConfig train_config_from_json(const nlohmann::json& j);

// One analogy task at the index level: embed/query are positions in the
// training dataset. Kept separate from marshaling so the sampling
// distribution is testable on its own.
struct TaskIndices {
  int anchor = -1;  // -1 in random mode
  std::vector<int> embed;
  std::vector<int> query;
};

// Neighborhood mode: anchor uniform, then p and q independent
// without-replacement draws from the anchor's n+1 list (overlap across the
// two draws allowed). Random mode: the same two draws from the whole dataset.
TaskIndices sample_task_indices(int dataset_size,
                                const std::vector<std::vector<int>>& neighbor_lists,
                                SamplingMode mode, int p_min, int p_max, int q_min, int q_max,
                                Rng& rng);

// Marshaled task: model inputs plus the scaled [q x 2] target locations.
struct TrainingTask {
  AnalogyInputs<float> inputs;
  Tensor<float> targets;
  TaskIndices indices;
};

TrainingTask sample_analogy_batch(const Dataset& train,
                                  const std::vector<std::vector<int>>& neighbor_lists,
                                  SamplingMode mode, int p_min, int p_max, int q_min, int q_max,
                                  double csi_scale, Rng& rng);

// Periodic evaluation during training: label plus a scorer receiving the
// current parameters; its result lands in the metric log.
struct EvalHook {
  std::string label;
  std::function<double(const Checkpoint&)> score;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::string metrics_csv;  // header step,lr,train_loss[,eval_scenario_id,eval_mean_error]*
};

// Fresh parameters plus metadata (input scales measured on `train`, seed,
// step count). kind must agree with config_json's model family.
Checkpoint init_checkpoint(ModelKind kind, const nlohmann::json& config_json,
                           const TrainConfig& cfg, const std::vector<const Dataset*>& train);

// The training loop for every model family, including fine-tuning (pass a
// loaded checkpoint). Joint training draws one scenario per step, uniformly;
// neighborhoods never cross scenario boundaries. Aborts on non-finite loss
// naming the step. Input scales come from start.meta, never recomputed, so a
// fine-tuned model keeps the normalization it was trained with.
TrainResult train_model(Checkpoint start, const TrainConfig& cfg,
                        const std::vector<const Dataset*>& train,
                        const std::vector<EvalHook>& hooks = {});

}  // namespace csiloc
