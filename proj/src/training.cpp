#include "csiloc/training.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "csiloc/baselines.hpp"

namespace csiloc {

const char* to_string(SamplingMode m) {
  return m == SamplingMode::neighborhood ? "neighborhood" : "random";
}

SamplingMode sampling_mode_from_string(const std::string& s) {
  if (s == "neighborhood") return SamplingMode::neighborhood;
  if (s == "random") return SamplingMode::random;
  throw std::invalid_argument("unknown sampling mode '" + s + "' (neighborhood | random)");
}

double lr_at_step(long step, const LrSchedule& s) {
  if (step < 0) throw std::invalid_argument("lr_at_step: step must be >= 0");
  if (s.interval < 1) throw std::invalid_argument("lr_at_step: interval must be >= 1");
  const long decays = step <= s.activation ? 0 : (step - s.activation) / s.interval;
  return s.base * std::pow(s.factor, double(decays));
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (steps < 0) throw std::invalid_argument("train config: steps must be >= 0");
  if (log_every < 1) throw std::invalid_argument("train config: log_every must be >= 1");
  if (n < 1) throw std::invalid_argument("train config: n must be >= 1");
  if (p_min < 1 || p_min > p_max || p_max > n + 1)
    throw std::invalid_argument("train config: need 1 <= p_min <= p_max <= n+1, got [" +
                                std::to_string(p_min) + "," + std::to_string(p_max) +
                                "] with n=" + std::to_string(n));
  if (q_min < 1 || q_min > q_max || q_max > n + 1)
    throw std::invalid_argument("train config: need 1 <= q_min <= q_max <= n+1, got [" +
                                std::to_string(q_min) + "," + std::to_string(q_max) +
                                "] with n=" + std::to_string(n));
  if (!(schedule.base > 0)) throw std::invalid_argument("train config: base lr must be > 0");
  if (!(schedule.factor > 0)) throw std::invalid_argument("train config: decay factor must be > 0");
  if (schedule.interval < 1) throw std::invalid_argument("train config: interval must be >= 1");
  if (schedule.activation < 0)
    throw std::invalid_argument("train config: activation must be >= 0");
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return nlohmann::json{{"batch_size", cfg.batch_size},
                        {"steps", cfg.steps},
                        {"lr",
                         {{"base", cfg.schedule.base},
                          {"factor", cfg.schedule.factor},
                          {"interval", cfg.schedule.interval},
                          {"activation", cfg.schedule.activation}}},
                        {"n", cfg.n},
                        {"p_min", cfg.p_min},
                        {"p_max", cfg.p_max},
                        {"q_min", cfg.q_min},
                        {"q_max", cfg.q_max},
                        {"sampling", to_string(cfg.sampling)},
                        {"seed", cfg.seed},
                        {"log_every", cfg.log_every},
                        {"freeze_prefixes", cfg.freeze_prefixes}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  require_only_keys(j,
                    {"batch_size", "steps", "lr", "n", "p_min", "p_max", "q_min", "q_max",
                     "sampling", "seed", "log_every", "freeze_prefixes"},
                    "train config");
  TrainConfig c;
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
  if (j.contains("steps")) c.steps = j.at("steps").get<long>();
  if (j.contains("lr")) {
    const nlohmann::json& l = j.at("lr");
    require_only_keys(l, {"base", "factor", "interval", "activation"}, "lr schedule");
    if (l.contains("base")) c.schedule.base = l.at("base").get<double>();
    if (l.contains("factor")) c.schedule.factor = l.at("factor").get<double>();
    if (l.contains("interval")) c.schedule.interval = l.at("interval").get<long>();
    if (l.contains("activation")) c.schedule.activation = l.at("activation").get<long>();
  }
  if (j.contains("n")) c.n = j.at("n").get<int>();
  if (j.contains("p_min")) c.p_min = j.at("p_min").get<int>();
  if (j.contains("p_max")) c.p_max = j.at("p_max").get<int>();
  if (j.contains("q_min")) c.q_min = j.at("q_min").get<int>();
  if (j.contains("q_max")) c.q_max = j.at("q_max").get<int>();
  if (j.contains("sampling")) c.sampling = sampling_mode_from_string(j.at("sampling").get<std::string>());
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("log_every")) c.log_every = j.at("log_every").get<int>();
  if (j.contains("freeze_prefixes"))
    c.freeze_prefixes = j.at("freeze_prefixes").get<std::vector<std::string>>();
  c.validate();
  return c;
}

TaskIndices sample_task_indices(int dataset_size,
                                const std::vector<std::vector<int>>& neighbor_lists,
                                SamplingMode mode, int p_min, int p_max, int q_min, int q_max,
                                Rng& rng) {
  if (dataset_size < 1) throw std::invalid_argument("sample_task_indices: empty dataset");
  if (p_min < 1 || p_min > p_max || q_min < 1 || q_min > q_max)
    throw std::invalid_argument("sample_task_indices: bad p/q range");
  const int p = rng.uniform_int(p_min, p_max);
  const int q = rng.uniform_int(q_min, q_max);

  TaskIndices t;
  if (mode == SamplingMode::neighborhood) {
    if (int(neighbor_lists.size()) != dataset_size)
      throw std::invalid_argument("sample_task_indices: neighbor lists cover " +
                                  std::to_string(neighbor_lists.size()) + " samples, dataset has " +
                                  std::to_string(dataset_size));
    t.anchor = rng.uniform_int(0, dataset_size - 1);
    const std::vector<int>& list = neighbor_lists[t.anchor];
    const int budget = int(list.size());
    if (p > budget || q > budget)
      throw std::invalid_argument("sample_task_indices: p or q exceeds the pair budget n+1 = " +
                                  std::to_string(budget));
    for (int i : rng.sample_without_replacement(budget, p)) t.embed.push_back(list[i]);
    for (int i : rng.sample_without_replacement(budget, q)) t.query.push_back(list[i]);
  } else {
    if (p > dataset_size || q > dataset_size)
      throw std::invalid_argument("sample_task_indices: p or q exceeds the dataset size " +
                                  std::to_string(dataset_size));
    t.embed = rng.sample_without_replacement(dataset_size, p);
    t.query = rng.sample_without_replacement(dataset_size, q);
  }
  return t;
}

TrainingTask sample_analogy_batch(const Dataset& train,
                                  const std::vector<std::vector<int>>& neighbor_lists,
                                  SamplingMode mode, int p_min, int p_max, int q_min, int q_max,
                                  double csi_scale, Rng& rng) {
  TrainingTask task;
  task.indices = sample_task_indices(train.size(), neighbor_lists, mode, p_min, p_max, q_min,
                                     q_max, rng);
  std::vector<const CSIMatrix*> ref_csi, query_csi;
  std::vector<Vec2> ref_loc;
  for (int i : task.indices.embed) {
    ref_csi.push_back(&train.samples[i].csi);
    ref_loc.push_back(train.samples[i].location());
  }
  for (int i : task.indices.query) query_csi.push_back(&train.samples[i].csi);
  task.inputs = make_analogy_inputs<float>(ref_csi, ref_loc, query_csi, csi_scale);
  task.targets = Tensor<float>::zeros({int(task.indices.query.size()), 2});
  for (std::size_t r = 0; r < task.indices.query.size(); ++r) {
    const Sample& s = train.samples[task.indices.query[r]];
    task.targets.at(int(r), 0) = float(s.loc_x / kLocationScale);
    task.targets.at(int(r), 1) = float(s.loc_y / kLocationScale);
  }
  return task;
}

namespace {

double pooled_feature_rms(const std::vector<const Dataset*>& train, FeatureKind kind) {
  double acc = 0;
  std::size_t n = 0;
  for (const Dataset* d : train)
    for (const auto& s : d->samples) {
      for (float f : extract_features(s.csi, kind)) acc += double(f) * double(f);
      n += std::size_t(feature_dim(kind, s.csi.nt, s.csi.nc));
    }
  if (n == 0) throw std::invalid_argument("input scale: no samples to measure");
  const double rms = std::sqrt(acc / double(n));
  if (!(rms > 0)) throw std::runtime_error("input scale: training features are all zero");
  return rms;
}

void check_radio_dims(const std::vector<const Dataset*>& train, int nt, int nc) {
  for (const Dataset* d : train)
    if (d->nt() != nt || d->nc() != nc)
      throw std::invalid_argument("training data '" + d->scenario.id + "' is " +
                                  std::to_string(d->nt()) + "x" + std::to_string(d->nc()) +
                                  ", model expects " + std::to_string(nt) + "x" +
                                  std::to_string(nc));
}

std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

// Per-step gradient/loss producer; grads are pre-zeroed by the loop.
using StepFn = std::function<double(long step, int scenario_idx, Rng& step_rng,
                                    ParamSet<float>& params)>;

std::string run_loop(ParamSet<float>& params, Checkpoint& shell, const TrainConfig& cfg,
                     int n_scenarios, const std::vector<EvalHook>& hooks, const StepFn& step_fn) {
  AdamState<float> opt = AdamState<float>::for_params(params);
  Rng root(cfg.seed);

  std::string csv = "step,lr,train_loss";
  for (std::size_t i = 0; i < hooks.size(); ++i) csv += ",eval_scenario_id,eval_mean_error";
  csv += "\n";

  auto hook_row = [&]() {
    std::string out;
    if (hooks.empty()) return out;
    Checkpoint current;
    current.kind = shell.kind;
    current.config = shell.config;
    current.meta = shell.meta;
    current.params = params.cast<float>();
    for (const auto& h : hooks) out += "," + h.label + "," + fmt_g(h.score(current));
    return out;
  };

  double last_loss = 0;
  for (long t = 0; t < cfg.steps; ++t) {
    Rng step_rng = root.derive("step", std::uint64_t(t));
    const int si = n_scenarios > 1 ? step_rng.uniform_int(0, n_scenarios - 1) : 0;
    const double lr = lr_at_step(t, cfg.schedule);

    params.zero_grads();
    const double loss = step_fn(t, si, step_rng, params);
    if (!std::isfinite(loss))
      throw std::runtime_error("training diverged at step " + std::to_string(t) +
                               " (non-finite batch loss)");
    last_loss = loss;

    // logged state is pre-update: the first row of a fine-tune run scores the
    // loaded checkpoint untouched
    if (t % cfg.log_every == 0)
      csv += std::to_string(t) + "," + fmt_g(lr) + "," + fmt_g(loss) + hook_row() + "\n";

    for (int i = 0; i < params.size(); ++i)
      for (const auto& prefix : cfg.freeze_prefixes)
        if (params.at(i).name.rfind(prefix, 0) == 0) {
          for (auto& g : params.at(i).grad.v) g = 0;
          break;
        }
    adam_step(params, opt, lr);
  }
  if (cfg.steps > 0)
    csv += std::to_string(cfg.steps) + "," + fmt_g(lr_at_step(cfg.steps, cfg.schedule)) + "," +
           fmt_g(last_loss) + hook_row() + "\n";
  return csv;
}

template <typename Model>
double analogy_step(const Model& model, const Dataset& ds,
                    const std::vector<std::vector<int>>& neighbor_lists, const TrainConfig& cfg,
                    double csi_scale, Rng& step_rng, ParamSet<float>& params, Tape<float>& tape) {
  double mean_loss = 0;
  for (int b = 0; b < cfg.batch_size; ++b) {
    Rng task_rng = step_rng.derive("task", std::uint64_t(b));
    TrainingTask task = sample_analogy_batch(ds, neighbor_lists, cfg.sampling, cfg.p_min,
                                             cfg.p_max, cfg.q_min, cfg.q_max, csi_scale, task_rng);
    tape.reset();
    std::vector<Tape<float>::Var> leaves;
    auto pred = model.forward(tape, task.inputs, true, &leaves);
    auto loss = mse_loss(tape, pred, tape.constant(std::move(task.targets)));
    tape.backward(loss, 1.0f / float(cfg.batch_size));
    accumulate_param_grads(tape, leaves, params);
    mean_loss += double(tape.value(loss).v[0]) / double(cfg.batch_size);
  }
  return mean_loss;
}

template <typename Forward>
double direct_step(const Dataset& ds, const TrainConfig& cfg, FeatureKind kind,
                   double feature_scale, Rng& step_rng, ParamSet<float>& params,
                   Tape<float>& tape, const Forward& forward) {
  std::vector<const CSIMatrix*> batch(cfg.batch_size);
  Tensor<float> targets = Tensor<float>::zeros({cfg.batch_size, 2});
  for (int b = 0; b < cfg.batch_size; ++b) {
    const int i = step_rng.uniform_int(0, ds.size() - 1);
    batch[b] = &ds.samples[i].csi;
    targets.at(b, 0) = float(ds.samples[i].loc_x / kLocationScale);
    targets.at(b, 1) = float(ds.samples[i].loc_y / kLocationScale);
  }
  Tensor<float> x = feature_batch<float>(batch, kind, feature_scale);
  tape.reset();
  std::vector<Tape<float>::Var> leaves;
  auto pred = forward(tape, x, &leaves);
  auto loss = mse_loss(tape, pred, tape.constant(std::move(targets)));
  tape.backward(loss);
  accumulate_param_grads(tape, leaves, params);
  return double(tape.value(loss).v[0]);
}

}  // namespace

Checkpoint init_checkpoint(ModelKind kind, const nlohmann::json& config_json,
                           const TrainConfig& cfg, const std::vector<const Dataset*>& train) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("init_checkpoint: need >= 1 training dataset");

  Checkpoint ck;
  ck.kind = kind;
  ck.config = config_json;
  ck.meta["seed"] = cfg.seed;
  ck.meta["steps"] = 0;
  ck.meta["loc_scale"] = kLocationScale;
  ck.meta["sampling"] = to_string(cfg.sampling);
  {
    std::vector<std::string> ids;
    for (const Dataset* d : train) ids.push_back(d->scenario.id);
    ck.meta["train_scenarios"] = ids;
  }

  switch (kind) {
    case ModelKind::mateformer: {
      const auto mcfg = mateformer_config_from_json(config_json);
      check_radio_dims(train, mcfg.nt, mcfg.nc);
      ck.params = Mateformer<float>::init(mcfg, cfg.seed).params().cast<float>();
      ck.meta["csi_scale"] = pooled_feature_rms(train, FeatureKind::raw);
      break;
    }
    case ModelKind::icl: {
      const auto icfg = icl_config_from_json(config_json);
      check_radio_dims(train, icfg.nt, icfg.nc);
      if (cfg.p_max > icfg.max_pairs)
        throw std::invalid_argument("init_checkpoint: p_max " + std::to_string(cfg.p_max) +
                                    " exceeds icl max_pairs " + std::to_string(icfg.max_pairs));
      ck.params = Icl<float>::init(icfg, cfg.seed).params().cast<float>();
      ck.meta["csi_scale"] = pooled_feature_rms(train, FeatureKind::raw);
      break;
    }
    case ModelKind::d2l_raw:
    case ModelKind::d2l_ad: {
      const auto dcfg = d2l_config_from_json(config_json);
      check_radio_dims(train, dcfg.nt, dcfg.nc);
      ck.params = D2lModel<float>::init(dcfg, cfg.seed).params().cast<float>();
      ck.meta["feature_scale"] = pooled_feature_rms(train, dcfg.features);
      break;
    }
    case ModelKind::multitask: {
      const auto tcfg = multitask_config_from_json(config_json);
      check_radio_dims(train, tcfg.nt, tcfg.nc);
      ck.params = Multitask<float>::init(tcfg, cfg.seed).params().cast<float>();
      ck.meta["feature_scale"] = pooled_feature_rms(train, tcfg.features);
      break;
    }
  }
  check_checkpoint_params(ck);
  return ck;
}

TrainResult train_model(Checkpoint start, const TrainConfig& cfg,
                        const std::vector<const Dataset*>& train,
                        const std::vector<EvalHook>& hooks) {
  cfg.validate();
  check_checkpoint_params(start);
  if (train.empty()) throw std::invalid_argument("train_model: need >= 1 training dataset");
  for (std::size_t i = 0; i < train.size(); ++i)
    for (std::size_t j = i + 1; j < train.size(); ++j)
      if (train[i]->scenario.id == train[j]->scenario.id)
        throw std::invalid_argument("train_model: duplicate training scenario '" +
                                    train[i]->scenario.id + "'");

  TrainResult result;
  result.checkpoint = std::move(start);
  Checkpoint& ck = result.checkpoint;
  const int n_scen = int(train.size());
  Tape<float> tape;

  switch (ck.kind) {
    case ModelKind::mateformer: {
      const auto mcfg = mateformer_config_from_json(ck.config);
      check_radio_dims(train, mcfg.nt, mcfg.nc);
      const double csi_scale = ck.meta.at("csi_scale").get<double>();
      std::vector<std::vector<std::vector<int>>> lists(train.size());
      if (cfg.sampling == SamplingMode::neighborhood)
        for (std::size_t i = 0; i < train.size(); ++i)
          lists[i] = build_neighbor_lists(*train[i], cfg.n);
      Mateformer<float> model(mcfg, std::move(ck.params));
      result.metrics_csv = run_loop(
          model.params(), ck, cfg, n_scen, hooks,
          [&](long, int si, Rng& srng, ParamSet<float>& params) {
            return analogy_step(model, *train[si], lists[si], cfg, csi_scale, srng, params, tape);
          });
      ck.params = std::move(model.params());
      break;
    }
    case ModelKind::icl: {
      const auto icfg = icl_config_from_json(ck.config);
      check_radio_dims(train, icfg.nt, icfg.nc);
      if (cfg.p_max > icfg.max_pairs)
        throw std::invalid_argument("train_model: p_max " + std::to_string(cfg.p_max) +
                                    " exceeds icl max_pairs " + std::to_string(icfg.max_pairs));
      const double csi_scale = ck.meta.at("csi_scale").get<double>();
      std::vector<std::vector<std::vector<int>>> lists(train.size());
      if (cfg.sampling == SamplingMode::neighborhood)
        for (std::size_t i = 0; i < train.size(); ++i)
          lists[i] = build_neighbor_lists(*train[i], cfg.n);
      Icl<float> model(icfg, std::move(ck.params));
      result.metrics_csv = run_loop(
          model.params(), ck, cfg, n_scen, hooks,
          [&](long, int si, Rng& srng, ParamSet<float>& params) {
            return analogy_step(model, *train[si], lists[si], cfg, csi_scale, srng, params, tape);
          });
      ck.params = std::move(model.params());
      break;
    }
    case ModelKind::d2l_raw:
    case ModelKind::d2l_ad: {
      const auto dcfg = d2l_config_from_json(ck.config);
      check_radio_dims(train, dcfg.nt, dcfg.nc);
      const double fscale = ck.meta.at("feature_scale").get<double>();
      D2lModel<float> model(dcfg, std::move(ck.params));
      result.metrics_csv = run_loop(
          model.params(), ck, cfg, n_scen, hooks,
          [&](long, int si, Rng& srng, ParamSet<float>& params) {
            return direct_step(*train[si], cfg, dcfg.features, fscale, srng, params, tape,
                               [&](Tape<float>& tp, const Tensor<float>& x,
                                   std::vector<Tape<float>::Var>* leaves) {
                                 return model.forward(tp, x, true, leaves);
                               });
          });
      ck.params = std::move(model.params());
      break;
    }
    case ModelKind::multitask: {
      const auto tcfg = multitask_config_from_json(ck.config);
      check_radio_dims(train, tcfg.nt, tcfg.nc);
      const double fscale = ck.meta.at("feature_scale").get<double>();
      Multitask<float> model(tcfg, std::move(ck.params));
      for (const Dataset* d : train)
        if (!model.has_head(d->scenario.id))
          throw std::invalid_argument("train_model: multitask head missing for scenario '" +
                                      d->scenario.id + "'");
      result.metrics_csv = run_loop(
          model.params(), ck, cfg, n_scen, hooks,
          [&](long, int si, Rng& srng, ParamSet<float>& params) {
            return direct_step(*train[si], cfg, tcfg.features, fscale, srng, params, tape,
                               [&](Tape<float>& tp, const Tensor<float>& x,
                                   std::vector<Tape<float>::Var>* leaves) {
                                 return model.forward(tp, x, train[si]->scenario.id, true,
                                                      leaves);
                               });
          });
      ck.params = std::move(model.params());
      break;
    }
  }

  ck.meta["steps"] = ck.meta.at("steps").get<long>() + cfg.steps;
  return result;
}

}  // namespace csiloc
