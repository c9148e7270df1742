#include "csiloc/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "csiloc/baselines.hpp"
#include "csiloc/mateformer.hpp"

namespace csiloc {

namespace {

using nlohmann::json;

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

bool is_analogy(ModelKind k) { return k == ModelKind::mateformer || k == ModelKind::icl; }

void check_options(const EvalOptions& opt) {
  if (opt.n < 1) throw std::invalid_argument("eval options: n must be >= 1");
  if (opt.k != -1 && opt.k < 1)
    throw std::invalid_argument("eval options: k must be >= 1, or -1 to fall back to n");
  if (opt.l < 0) throw std::invalid_argument("eval options: l must be >= 0");
  if (opt.noise_sigma < 0) throw std::invalid_argument("eval options: noise_sigma must be >= 0");
  if (opt.max_samples != -1 && opt.max_samples < 1)
    throw std::invalid_argument("eval options: max_samples must be >= 1, or -1 for all");
}

EvalResult eval_direct(const Checkpoint& ck, const Dataset& test, int count,
                       const EvalOptions& opt) {
  const double loc_scale = ck.meta.at("loc_scale").get<double>();
  const double feature_scale = ck.meta.at("feature_scale").get<double>();

  FeatureKind features;
  std::function<Tape<float>::Var(Tape<float>&, const Tensor<float>&)> fwd;
  std::shared_ptr<void> model_keepalive;
  if (ck.kind == ModelKind::multitask) {
    MultitaskConfig cfg = multitask_config_from_json(ck.config);
    features = cfg.features;
    auto m = std::make_shared<Multitask<float>>(cfg, ck.params);
    if (!m->has_head(test.scenario.id))
      throw std::invalid_argument("multitask checkpoint has no head for scenario '" +
                                  test.scenario.id + "'");
    const std::string sid = test.scenario.id;
    fwd = [m, sid](Tape<float>& t, const Tensor<float>& x) { return m->forward(t, x, sid, false); };
    model_keepalive = m;
  } else {
    D2lConfig cfg = d2l_config_from_json(ck.config);
    features = cfg.features;
    auto m = std::make_shared<D2lModel<float>>(cfg, ck.params);
    fwd = [m](Tape<float>& t, const Tensor<float>& x) { return m->forward(t, x, false); };
    model_keepalive = m;
  }

  EvalResult res;
  res.records.reserve(count);
  std::vector<double> errors;
  errors.reserve(count);
  Rng root(opt.seed);

  const int chunk = 256;  // bounds tape memory on large test sets
  for (int base = 0; base < count; base += chunk) {
    const int b = std::min(chunk, count - base);
    std::vector<CSIMatrix> noisy;
    noisy.reserve(opt.noise_sigma > 0 ? b : 0);
    std::vector<const CSIMatrix*> ptrs(b);
    for (int j = 0; j < b; ++j) {
      const CSIMatrix& h = test.samples[base + j].csi;
      if (opt.noise_sigma > 0) {
        Rng nr = root.derive("noise", std::uint64_t(base + j));
        noisy.push_back(apply_csi_noise(h, opt.noise_sigma, nr));
        ptrs[j] = &noisy.back();
      } else {
        ptrs[j] = &h;
      }
    }
    Tensor<float> x = feature_batch<float>(ptrs, features, feature_scale);
    Tape<float> tape;
    const Tensor<float>& y = tape.value(fwd(tape, x));
    for (int j = 0; j < b; ++j) {
      SampleRecord rec;
      rec.truth = test.samples[base + j].location();
      rec.pred = {double(y.at(j, 0)) * loc_scale, double(y.at(j, 1)) * loc_scale};
      rec.error_m = localization_error(rec.truth, rec.pred);
      errors.push_back(rec.error_m);
      res.records.push_back(rec);
    }
  }
  res.summary = error_summary(errors);
  return res;
}

EvalResult eval_analogy(const Checkpoint& ck, const Dataset& test, const Dataset& train, int count,
                        const EvalOptions& opt) {
  const double loc_scale = ck.meta.at("loc_scale").get<double>();
  const double csi_scale = ck.meta.at("csi_scale").get<double>();

  const int k = opt.refs();
  if (k > train.size())
    throw std::invalid_argument("eval_model: k=" + std::to_string(k) +
                                " references exceed the training set (" +
                                std::to_string(train.size()) + " samples)");

  std::function<Vec2(const AnalogyInputs<float>&)> predict;
  std::shared_ptr<void> model_keepalive;
  if (ck.kind == ModelKind::mateformer) {
    MateformerConfig cfg = mateformer_config_from_json(ck.config);
    auto m = std::make_shared<Mateformer<float>>(cfg, ck.params);
    predict = [m, loc_scale](const AnalogyInputs<float>& in) {
      Tape<float> tape;
      const Tensor<float>& y = tape.value(m->forward(tape, in, false));
      return Vec2{double(y.at(0, 0)) * loc_scale, double(y.at(0, 1)) * loc_scale};
    };
    model_keepalive = m;
  } else {
    IclConfig cfg = icl_config_from_json(ck.config);
    if (k > cfg.max_pairs)
      throw std::invalid_argument("eval_model: k=" + std::to_string(k) +
                                  " exceeds the checkpoint's max_pairs=" +
                                  std::to_string(cfg.max_pairs));
    auto m = std::make_shared<Icl<float>>(cfg, ck.params);
    predict = [m, loc_scale](const AnalogyInputs<float>& in) {
      Tape<float> tape;
      const Tensor<float>& y = tape.value(m->forward(tape, in, false));
      return Vec2{double(y.at(0, 0)) * loc_scale, double(y.at(0, 1)) * loc_scale};
    };
    model_keepalive = m;
  }

  const NeighborIndex index = NeighborIndex::build(train);
  auto run_pass = [&](const std::vector<int>& idx, const CSIMatrix& query) {
    std::vector<const CSIMatrix*> ref_csi;
    std::vector<Vec2> ref_loc;
    ref_csi.reserve(idx.size());
    ref_loc.reserve(idx.size());
    for (int j : idx) {
      ref_csi.push_back(&train.samples[j].csi);
      ref_loc.push_back(train.samples[j].location());
    }
    return predict(make_analogy_inputs<float>(ref_csi, ref_loc, {&query}, csi_scale));
  };

  EvalResult res;
  res.records.reserve(count);
  std::vector<double> errors;
  errors.reserve(count);
  Rng root(opt.seed);

  for (int i = 0; i < count; ++i) {
    const Sample& s = test.samples[i];
    CSIMatrix noisy;
    const CSIMatrix* query = &s.csi;
    if (opt.noise_sigma > 0) {
      Rng nr = root.derive("noise", std::uint64_t(i));
      noisy = apply_csi_noise(s.csi, opt.noise_sigma, nr);
      query = &noisy;
    }

    SampleRecord rec;
    rec.truth = s.location();
    std::vector<int> idx;
    if (opt.mode == EvalMode::neighborhood) {
      Rng cr = root.derive("coarse", std::uint64_t(i));
      rec.coarse = coarse_location(rec.truth, opt.l, cr);
      rec.has_coarse = true;
      idx = knn_search(index, rec.coarse, k);
    } else {  // random and the first pass of iterative
      Rng rr = root.derive("refs", std::uint64_t(i));
      idx = rr.sample_without_replacement(train.size(), k);
    }
    Vec2 pred = run_pass(idx, *query);
    if (opt.mode == EvalMode::iterative) {
      // the coarse estimate is the first pass's prediction; the second pass
      // searches its neighborhood with the same checkpoint
      rec.coarse = pred;
      rec.has_coarse = true;
      pred = run_pass(knn_search(index, pred, k), *query);
    }
    rec.pred = pred;
    rec.error_m = localization_error(rec.truth, rec.pred);
    errors.push_back(rec.error_m);
    res.records.push_back(rec);
  }
  res.summary = error_summary(errors);
  return res;
}

}  // namespace

double localization_error(Vec2 truth, Vec2 estimate) { return distance(truth, estimate); }

ErrorSummary error_summary(const std::vector<double>& errors) {
  if (errors.empty()) throw std::invalid_argument("error_summary: no errors to summarize");
  ErrorSummary s;
  s.count = int(errors.size());
  double acc = 0;
  for (double e : errors) acc += e;
  s.mean_m = acc / s.count;
  std::vector<double> sorted = errors;
  std::sort(sorted.begin(), sorted.end());
  // nearest-rank with integer arithmetic: 1-based rank = ceil(tenths/10 * count)
  auto nearest_rank = [&](int tenths) { return sorted[(tenths * s.count + 9) / 10 - 1]; };
  s.p10_m = nearest_rank(1);
  s.p90_m = nearest_rank(9);
  return s;
}

const char* to_string(EvalMode m) {
  switch (m) {
    case EvalMode::direct: return "direct";
    case EvalMode::neighborhood: return "neighborhood";
    case EvalMode::random: return "random";
    case EvalMode::iterative: return "iterative";
  }
  throw std::logic_error("unknown EvalMode");
}

EvalMode eval_mode_from_string(const std::string& s) {
  if (s == "direct") return EvalMode::direct;
  if (s == "neighborhood") return EvalMode::neighborhood;
  if (s == "random") return EvalMode::random;
  if (s == "iterative") return EvalMode::iterative;
  throw std::invalid_argument("unknown eval mode '" + s + "'");
}

EvalResult eval_model(const Checkpoint& ck, const Dataset& test, const Dataset* train,
                      const EvalOptions& opt) {
  check_options(opt);
  if (test.size() == 0) throw std::invalid_argument("eval_model: empty test dataset");
  const int count = opt.max_samples > 0 ? std::min(test.size(), opt.max_samples) : test.size();

  if (opt.mode == EvalMode::direct) {
    if (is_analogy(ck.kind))
      throw std::invalid_argument(std::string("eval mode 'direct' needs a d2l or multitask "
                                              "checkpoint, not '") +
                                  to_string(ck.kind) + "'");
    return eval_direct(ck, test, count, opt);
  }
  if (!is_analogy(ck.kind))
    throw std::invalid_argument(std::string("eval mode '") + to_string(opt.mode) +
                                "' needs a mateformer or icl checkpoint, not '" +
                                to_string(ck.kind) + "'");
  if (train == nullptr)
    throw std::invalid_argument("eval_model: analogy modes need a training dataset for references");
  return eval_analogy(ck, test, *train, count, opt);
}

std::string config_hash_hex(const std::string& canonical) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(canonical)));
  return buf;
}

// ---------------------------------------------------------------------------
// experiment protocols

namespace {

// CSV cells are emitted unquoted, so separators inside values would silently
// shift columns
std::string csv_cell(const std::string& s) {
  if (s.find_first_of(",\n\"") != std::string::npos)
    throw std::invalid_argument("value not representable as a CSV cell: '" + s + "'");
  return s;
}

constexpr const char* kCsvHeader =
    "experiment,model,train_scenarios,eval_scenario,mode,sweep_param,sweep_value,"
    "mean_m,p10_m,p90_m,count,seed,config_hash\n";

std::string scenarios_of(const Checkpoint& ck) {
  std::string out;
  for (const auto& s : ck.meta.at("train_scenarios").get<std::vector<std::string>>()) {
    if (!out.empty()) out += "+";
    out += s;
  }
  return out;
}

struct Caches {
  std::map<std::string, std::shared_ptr<const Dataset>> datasets;
  std::map<std::string, std::shared_ptr<const Checkpoint>> checkpoints;

  std::shared_ptr<const Dataset> dataset(const std::string& path) {
    auto it = datasets.find(path);
    if (it != datasets.end()) return it->second;
    auto d = std::make_shared<const Dataset>(load_dataset(path));
    datasets.emplace(path, d);
    return d;
  }
  std::shared_ptr<const Checkpoint> checkpoint(const std::string& path) {
    auto it = checkpoints.find(path);
    if (it != checkpoints.end()) return it->second;
    auto c = std::make_shared<const Checkpoint>(load_checkpoint(path));
    checkpoints.emplace(path, c);
    return c;
  }
};

struct ModelRef {
  std::string path;
  std::shared_ptr<const Checkpoint> ck;
  EvalMode mode = EvalMode::direct;

  json effective() const { return json{{"checkpoint", path}, {"mode", to_string(mode)}}; }
};

struct DataRef {
  std::string train_path, test_path;
  std::shared_ptr<const Dataset> train, test;

  json effective() const { return json{{"train", train_path}, {"test", test_path}}; }
};

struct Common {
  std::string name;
  std::uint64_t seed = 1;
  EvalOptions base;  // mode filled per row
  json eff = json::object();
};

Common parse_common(const json& m, const char* name, const std::vector<std::string>& extra) {
  std::vector<std::string> keys = {"experiment", "seed", "eval"};
  keys.insert(keys.end(), extra.begin(), extra.end());
  require_only_keys(m, keys, std::string("experiment '") + name + "' manifest");

  Common c;
  c.name = name;
  if (m.contains("seed")) c.seed = m.at("seed").get<std::uint64_t>();
  if (m.contains("eval")) {
    const json& e = m.at("eval");
    require_only_keys(e, {"n", "k", "l", "max_samples"}, "eval options");
    if (e.contains("n")) c.base.n = e.at("n").get<int>();
    if (e.contains("k")) c.base.k = e.at("k").get<int>();
    if (e.contains("l")) c.base.l = e.at("l").get<double>();
    if (e.contains("max_samples")) c.base.max_samples = e.at("max_samples").get<int>();
  }
  c.base.seed = c.seed;
  c.eff["experiment"] = c.name;
  c.eff["seed"] = c.seed;
  c.eff["eval"] =
      json{{"n", c.base.n}, {"k", c.base.k}, {"l", c.base.l}, {"max_samples", c.base.max_samples}};
  return c;
}

ModelRef parse_model(const json& j, Caches& caches) {
  require_only_keys(j, {"checkpoint", "mode"}, "model entry");
  ModelRef r;
  r.path = j.at("checkpoint").get<std::string>();
  r.ck = caches.checkpoint(r.path);
  if (j.contains("mode"))
    r.mode = eval_mode_from_string(j.at("mode").get<std::string>());
  else
    r.mode = is_analogy(r.ck->kind) ? EvalMode::neighborhood : EvalMode::direct;
  return r;
}

std::vector<ModelRef> parse_models(const json& m, Caches& caches) {
  if (!m.contains("models") || !m.at("models").is_array() || m.at("models").empty())
    throw std::invalid_argument("experiment manifest needs a non-empty 'models' array");
  std::vector<ModelRef> out;
  for (const json& e : m.at("models")) out.push_back(parse_model(e, caches));
  return out;
}

DataRef parse_data_pair(const json& j, Caches& caches, const std::string& context) {
  require_only_keys(j, {"train", "test"}, context);
  DataRef d;
  d.train_path = j.at("train").get<std::string>();
  d.test_path = j.at("test").get<std::string>();
  d.train = caches.dataset(d.train_path);
  d.test = caches.dataset(d.test_path);
  return d;
}

struct RowWriter {
  std::string experiment;
  std::uint64_t seed = 1;
  std::string hash;
  std::string csv{kCsvHeader};

  void row(const Checkpoint& ck, const std::string& eval_scenario, EvalMode mode,
           const std::string& sweep_param, const std::string& sweep_value,
           const ErrorSummary& s) {
    csv += csv_cell(experiment) + "," + to_string(ck.kind) + "," + csv_cell(scenarios_of(ck)) +
           "," + csv_cell(eval_scenario) + "," + to_string(mode) + "," + csv_cell(sweep_param) +
           "," + csv_cell(sweep_value) + "," + fmt_g(s.mean_m) + "," + fmt_g(s.p10_m) + "," +
           fmt_g(s.p90_m) + "," + std::to_string(s.count) + "," + std::to_string(seed) + "," +
           hash + "\n";
  }
};

RowWriter writer_for(const Common& c) {
  RowWriter w;
  w.experiment = c.name;
  w.seed = c.seed;
  w.hash = config_hash_hex(c.eff.dump());
  return w;
}

// checkpoint list evaluated against a list of scenario datasets; used by the
// cross-scenario and joint-heldout protocols
ExperimentResult run_eval_grid(std::vector<DataRef> evals, std::vector<ModelRef> models,
                               Common c) {
  json eff_models = json::array();
  for (const ModelRef& mr : models) eff_models.push_back(mr.effective());
  json eff_evals = json::array();
  for (const DataRef& d : evals) eff_evals.push_back(d.effective());
  c.eff["models"] = eff_models;
  c.eff["evals"] = eff_evals;

  RowWriter w = writer_for(c);
  for (const ModelRef& mr : models) {
    for (const DataRef& d : evals) {
      EvalOptions opt = c.base;
      opt.mode = mr.mode;
      EvalResult r = eval_model(*mr.ck, *d.test, d.train.get(), opt);
      w.row(*mr.ck, d.test->scenario.id, opt.mode, "", "", r.summary);
    }
  }
  return {w.csv, c.eff};
}

ExperimentResult run_single_scenario(const json& m, Caches& caches) {
  Common c = parse_common(m, "single-scenario", {"models", "train", "test"});
  DataRef d;
  d.train_path = m.at("train").get<std::string>();
  d.test_path = m.at("test").get<std::string>();
  d.train = caches.dataset(d.train_path);
  d.test = caches.dataset(d.test_path);
  c.eff["train"] = d.train_path;
  c.eff["test"] = d.test_path;

  std::vector<ModelRef> models = parse_models(m, caches);
  json eff_models = json::array();
  for (const ModelRef& mr : models) eff_models.push_back(mr.effective());
  c.eff["models"] = eff_models;

  RowWriter w = writer_for(c);
  for (const ModelRef& mr : models) {
    EvalOptions opt = c.base;
    opt.mode = mr.mode;
    EvalResult r = eval_model(*mr.ck, *d.test, d.train.get(), opt);
    w.row(*mr.ck, d.test->scenario.id, opt.mode, "", "", r.summary);
  }
  return {w.csv, c.eff};
}

std::vector<DataRef> parse_evals(const json& m, Caches& caches) {
  if (!m.contains("evals") || !m.at("evals").is_array() || m.at("evals").empty())
    throw std::invalid_argument("experiment manifest needs a non-empty 'evals' array");
  std::vector<DataRef> out;
  for (const json& e : m.at("evals")) out.push_back(parse_data_pair(e, caches, "evals entry"));
  return out;
}

ExperimentResult run_cross_scenario(const json& m, Caches& caches) {
  Common c = parse_common(m, "cross-scenario", {"models", "evals"});
  std::vector<DataRef> evals = parse_evals(m, caches);
  if (evals.size() != 2)
    throw std::invalid_argument("cross-scenario expects exactly 2 'evals' entries (the trained "
                                "scenario and the unseen one); got " +
                                std::to_string(evals.size()));
  return run_eval_grid(std::move(evals), parse_models(m, caches), std::move(c));
}

ExperimentResult run_joint_heldout(const json& m, Caches& caches) {
  Common c = parse_common(m, "joint-heldout", {"models", "evals"});
  return run_eval_grid(parse_evals(m, caches), parse_models(m, caches), std::move(c));
}

// one model, one scenario, one option axis swept
template <typename T, typename Apply>
ExperimentResult run_sweep(const json& m, const char* name, Caches& caches,
                           const char* list_key, std::vector<T> defaults,
                           const char* sweep_param, Apply&& apply) {
  Common c = parse_common(m, name, {"model", "train", "test", list_key});
  if (!m.contains("model")) throw std::invalid_argument(std::string(name) + " needs a 'model'");
  ModelRef mr = parse_model(m.at("model"), caches);
  DataRef d;
  d.train_path = m.at("train").get<std::string>();
  d.test_path = m.at("test").get<std::string>();
  d.train = caches.dataset(d.train_path);
  d.test = caches.dataset(d.test_path);

  std::vector<T> values = defaults;
  if (m.contains(list_key)) values = m.at(list_key).get<std::vector<T>>();
  if (values.empty())
    throw std::invalid_argument(std::string(name) + ": '" + list_key + "' must be non-empty");

  c.eff["model"] = mr.effective();
  c.eff["train"] = d.train_path;
  c.eff["test"] = d.test_path;
  c.eff[list_key] = values;

  RowWriter w = writer_for(c);
  for (const T& v : values) {
    EvalOptions opt = c.base;
    opt.mode = mr.mode;
    apply(opt, v);
    EvalResult r = eval_model(*mr.ck, *d.test, d.train.get(), opt);
    w.row(*mr.ck, d.test->scenario.id, opt.mode, sweep_param, fmt_g(double(v)), r.summary);
  }
  return {w.csv, c.eff};
}

ExperimentResult run_neighbor_sweep(const json& m, Caches& caches) {
  return run_sweep<int>(m, "neighbor-sweep", caches, "ks", {2, 4, 8, 16, 32}, "k",
                        [](EvalOptions& o, int k) { o.k = k; });
}

ExperimentResult run_noise_sweep(const json& m, Caches& caches) {
  return run_sweep<double>(m, "noise-sweep", caches, "sigmas", {0, 0.05, 0.1, 0.2, 0.4},
                           "noise_sigma",
                           [](EvalOptions& o, double s) { o.noise_sigma = s; });
}

ExperimentResult run_initial_error_sweep(const json& m, Caches& caches) {
  return run_sweep<double>(m, "initial-error-sweep", caches, "ls", {0, 0.5, 1, 2, 4, 8}, "l",
                           [](EvalOptions& o, double l) {
                             o.mode = EvalMode::neighborhood;  // l only means anything here
                             o.l = l;
                           });
}

ExperimentResult run_sampling_modes(const json& m, Caches& caches) {
  Common c = parse_common(m, "sampling-modes",
                          {"neighborhood_model", "random_model", "train", "test"});
  if (!m.contains("neighborhood_model") || !m.contains("random_model"))
    throw std::invalid_argument(
        "sampling-modes needs 'neighborhood_model' and 'random_model' entries");
  ModelRef nb = parse_model(m.at("neighborhood_model"), caches);
  ModelRef rd = parse_model(m.at("random_model"), caches);
  DataRef d;
  d.train_path = m.at("train").get<std::string>();
  d.test_path = m.at("test").get<std::string>();
  d.train = caches.dataset(d.train_path);
  d.test = caches.dataset(d.test_path);

  c.eff["neighborhood_model"] = json{{"checkpoint", nb.path}};
  c.eff["random_model"] = json{{"checkpoint", rd.path}};
  c.eff["train"] = d.train_path;
  c.eff["test"] = d.test_path;

  RowWriter w = writer_for(c);
  // each strategy is scored with the checkpoint trained under the matching
  // reference distribution; iterative refines the random-trained model
  const std::pair<const ModelRef*, EvalMode> plan[] = {
      {&nb, EvalMode::neighborhood}, {&rd, EvalMode::random}, {&rd, EvalMode::iterative}};
  for (const auto& [mr, mode] : plan) {
    EvalOptions opt = c.base;
    opt.mode = mode;
    EvalResult r = eval_model(*mr->ck, *d.test, d.train.get(), opt);
    w.row(*mr->ck, d.test->scenario.id, mode, "", "", r.summary);
  }
  return {w.csv, c.eff};
}

std::vector<long> metric_steps(const std::string& metrics_csv) {
  std::vector<long> out;
  std::istringstream is(metrics_csv);
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(std::stol(line.substr(0, line.find(','))));
  return out;
}

ExperimentResult run_transfer(const json& m, Caches& caches) {
  Common c = parse_common(m, "transfer", {"models", "source", "target", "train_config"});
  if (!m.contains("source") || !m.contains("target") || !m.contains("train_config"))
    throw std::invalid_argument("transfer needs 'source', 'target' and 'train_config'");
  DataRef src = parse_data_pair(m.at("source"), caches, "transfer source");
  DataRef tgt = parse_data_pair(m.at("target"), caches, "transfer target");
  TrainConfig tc = train_config_from_json(m.at("train_config"));
  std::vector<ModelRef> models = parse_models(m, caches);

  json eff_models = json::array();
  for (const ModelRef& mr : models) eff_models.push_back(mr.effective());
  c.eff["models"] = eff_models;
  c.eff["source"] = src.effective();
  c.eff["target"] = tgt.effective();
  c.eff["train_config"] = to_json(tc);

  RowWriter w = writer_for(c);
  for (const ModelRef& mr : models) {
    EvalOptions opt = c.base;
    opt.mode = mr.mode;
    std::vector<ErrorSummary> on_src, on_tgt;
    EvalHook src_hook{"source_error", [&](const Checkpoint& ck) {
                        EvalResult r = eval_model(ck, *src.test, src.train.get(), opt);
                        on_src.push_back(r.summary);
                        return r.summary.mean_m;
                      }};
    EvalHook tgt_hook{"target_error", [&](const Checkpoint& ck) {
                        EvalResult r = eval_model(ck, *tgt.test, tgt.train.get(), opt);
                        on_tgt.push_back(r.summary);
                        return r.summary.mean_m;
                      }};
    TrainResult tr = train_model(*mr.ck, tc, {tgt.train.get()}, {src_hook, tgt_hook});

    const std::vector<long> steps = metric_steps(tr.metrics_csv);
    if (steps.size() != on_src.size() || steps.size() != on_tgt.size())
      throw std::logic_error("transfer: metric log and hook histories disagree");
    for (std::size_t i = 0; i < steps.size(); ++i) {
      const std::string sv = std::to_string(steps[i]);
      w.row(*mr.ck, src.test->scenario.id, opt.mode, "step", sv, on_src[i]);
      w.row(*mr.ck, tgt.test->scenario.id, opt.mode, "step", sv, on_tgt[i]);
    }
  }
  return {w.csv, c.eff};
}

}  // namespace

ExperimentResult run_experiment(const json& manifest) {
  if (!manifest.is_object())
    throw std::invalid_argument("experiment manifest must be a JSON object");
  if (!manifest.contains("experiment"))
    throw std::invalid_argument("experiment manifest needs an 'experiment' name");
  const std::string name = manifest.at("experiment").get<std::string>();

  Caches caches;
  if (name == "single-scenario") return run_single_scenario(manifest, caches);
  if (name == "cross-scenario") return run_cross_scenario(manifest, caches);
  if (name == "transfer") return run_transfer(manifest, caches);
  if (name == "joint-heldout") return run_joint_heldout(manifest, caches);
  if (name == "neighbor-sweep") return run_neighbor_sweep(manifest, caches);
  if (name == "noise-sweep") return run_noise_sweep(manifest, caches);
  if (name == "initial-error-sweep") return run_initial_error_sweep(manifest, caches);
  if (name == "sampling-modes") return run_sampling_modes(manifest, caches);
  throw std::invalid_argument(
      "unknown experiment '" + name +
      "'; expected one of: single-scenario, cross-scenario, transfer, joint-heldout, "
      "neighbor-sweep, noise-sweep, initial-error-sweep, sampling-modes");
}

}  // namespace csiloc
