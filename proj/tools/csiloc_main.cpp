#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "csiloc/baselines.hpp"
#include "csiloc/evaluation.hpp"
#include "csiloc/gradcheck.hpp"
#include "csiloc/mateformer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace csiloc;

namespace {

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw std::runtime_error("'" + path + "' is not valid JSON: " + e.what());
  }
  return j;
}

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << content;
  if (!out) throw std::runtime_error("short write to '" + path.string() + "'");
}

void require_input_file(const std::string& path, const char* what) {
  if (!fs::exists(path))
    throw std::runtime_error(std::string(what) + " '" + path + "' does not exist");
}

// Shared manifest plumbing: the output directory (overridable via
// CSILOC_OUT_DIR), the thread-count knob (CSILOC_THREADS; recorded and
// validated, execution is single-threaded throughout), and the optional
// "command" echo that effective configs carry.
struct RunContext {
  std::string command;
  json manifest;
  fs::path out;
  int threads = 1;
};

RunContext begin_run(const std::string& command, const std::string& manifest_path) {
  RunContext ctx;
  ctx.command = command;
  ctx.manifest = read_json_file(manifest_path);
  if (!ctx.manifest.is_object())
    throw std::runtime_error("manifest '" + manifest_path + "' must be a JSON object");

  if (ctx.manifest.contains("command")) {
    const std::string declared = ctx.manifest.at("command").get<std::string>();
    if (declared != command)
      throw std::runtime_error("manifest says command \"" + declared + "\" but subcommand '" +
                               command + "' was invoked");
  }

  if (const char* dir = std::getenv("CSILOC_OUT_DIR"); dir != nullptr && *dir != '\0')
    ctx.manifest["output"] = std::string(dir);
  if (!ctx.manifest.contains("output"))
    throw std::runtime_error("manifest needs an \"output\" directory");
  ctx.out = fs::path(ctx.manifest.at("output").get<std::string>());

  if (const char* th = std::getenv("CSILOC_THREADS"); th != nullptr && *th != '\0') {
    try {
      ctx.manifest["threads"] = std::stoi(th);
    } catch (const std::exception&) {
      throw std::runtime_error(std::string("CSILOC_THREADS='") + th + "' is not an integer");
    }
  }
  if (ctx.manifest.contains("threads")) ctx.threads = ctx.manifest.at("threads").get<int>();
  if (ctx.threads < 1) throw std::runtime_error("threads must be >= 1");
  return ctx;
}

std::uint64_t required_seed(const json& manifest) {
  if (!manifest.contains("seed")) throw std::runtime_error("manifest needs a \"seed\"");
  return manifest.at("seed").get<std::uint64_t>();
}

// Every run captures its fully defaulted configuration; re-running from that
// file is bit-identical, and a run directory refuses a *different* manifest.
void write_effective_config(const RunContext& ctx, json effective) {
  effective["command"] = ctx.command;
  effective["output"] = ctx.out.string();
  effective["threads"] = ctx.threads;
  const std::string text = effective.dump(2) + "\n";
  fs::create_directories(ctx.out);
  const fs::path path = ctx.out / "effective_config.json";
  if (fs::exists(path)) {
    std::ifstream in(path);
    std::stringstream existing;
    existing << in.rdbuf();
    if (existing.str() != text)
      throw std::runtime_error("'" + path.string() +
                               "' exists with a different configuration; refusing to mix runs "
                               "in one output directory");
  }
  write_text(path, text);
}

// ---------------------------------------------------------------------------
// gen-scenario

ScenarioGenOptions parse_gen_options(const json& j) {
  require_only_keys(j,
                    {"num_antennas", "num_subcarriers", "carrier_hz", "bandwidth_hz",
                     "region_size_m", "min_scatterers", "max_scatterers", "min_blockers",
                     "max_blockers"},
                    "scenario generator options");
  ScenarioGenOptions o;
  if (j.contains("num_antennas")) o.num_antennas = j.at("num_antennas").get<int>();
  if (j.contains("num_subcarriers")) o.num_subcarriers = j.at("num_subcarriers").get<int>();
  if (j.contains("carrier_hz")) o.carrier_hz = j.at("carrier_hz").get<double>();
  if (j.contains("bandwidth_hz")) o.bandwidth_hz = j.at("bandwidth_hz").get<double>();
  if (j.contains("region_size_m")) o.region_size_m = j.at("region_size_m").get<double>();
  if (j.contains("min_scatterers")) o.min_scatterers = j.at("min_scatterers").get<int>();
  if (j.contains("max_scatterers")) o.max_scatterers = j.at("max_scatterers").get<int>();
  if (j.contains("min_blockers")) o.min_blockers = j.at("min_blockers").get<int>();
  if (j.contains("max_blockers")) o.max_blockers = j.at("max_blockers").get<int>();
  return o;
}

json gen_options_to_json(const ScenarioGenOptions& o) {
  return json{{"num_antennas", o.num_antennas},
              {"num_subcarriers", o.num_subcarriers},
              {"carrier_hz", o.carrier_hz},
              {"bandwidth_hz", o.bandwidth_hz},
              {"region_size_m", o.region_size_m},
              {"min_scatterers", o.min_scatterers},
              {"max_scatterers", o.max_scatterers},
              {"min_blockers", o.min_blockers},
              {"max_blockers", o.max_blockers}};
}

int cmd_gen_scenario(RunContext& ctx) {
  require_only_keys(ctx.manifest, {"command", "output", "threads", "seed", "ids", "options"},
                    "gen-scenario manifest");
  const std::uint64_t seed = required_seed(ctx.manifest);
  if (!ctx.manifest.contains("ids") || !ctx.manifest.at("ids").is_array() ||
      ctx.manifest.at("ids").empty())
    throw std::runtime_error("gen-scenario needs a non-empty \"ids\" array");
  const auto ids = ctx.manifest.at("ids").get<std::vector<std::string>>();
  if (std::set<std::string>(ids.begin(), ids.end()).size() != ids.size())
    throw std::runtime_error("gen-scenario: duplicate scenario id");
  ScenarioGenOptions opt;
  if (ctx.manifest.contains("options")) opt = parse_gen_options(ctx.manifest.at("options"));

  write_effective_config(ctx, json{{"seed", seed},
                                   {"ids", ids},
                                   {"options", gen_options_to_json(opt)}});

  for (const std::string& id : ids) {
    // id-keyed so adding or reordering ids never changes existing scenes
    const std::uint64_t scenario_seed = seed + 0x9E3779B97F4A7C15ull * fnv1a64(id);
    ScenarioSpec spec = make_random_scenario(id, scenario_seed, opt);
    spec.save((ctx.out / (id + ".scenario.json")).string());
  }
  std::cout << "gen-scenario: wrote " << ids.size() << " scenario spec(s) to " << ctx.out.string()
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// gen-dataset

int cmd_gen_dataset(RunContext& ctx) {
  require_only_keys(ctx.manifest,
                    {"command", "output", "threads", "seed", "scenario", "train_count",
                     "test_count"},
                    "gen-dataset manifest");
  const std::uint64_t seed = required_seed(ctx.manifest);
  const std::string scenario_path = ctx.manifest.at("scenario").get<std::string>();
  require_input_file(scenario_path, "scenario spec");
  const int train_count = ctx.manifest.at("train_count").get<int>();
  const int test_count = ctx.manifest.at("test_count").get<int>();
  if (train_count < 1 || test_count < 1)
    throw std::runtime_error("gen-dataset: train_count and test_count must be >= 1");

  write_effective_config(ctx, json{{"seed", seed},
                                   {"scenario", scenario_path},
                                   {"train_count", train_count},
                                   {"test_count", test_count}});

  const ScenarioSpec spec = ScenarioSpec::load(scenario_path);
  Rng root(seed);
  const Dataset train =
      generate_dataset(spec, train_count, DatasetRole::training, root.derive("train"));
  const Dataset test =
      generate_dataset(spec, test_count, DatasetRole::testing, root.derive("test"));
  const std::string train_out = (ctx.out / (spec.id + "_train.ds")).string();
  const std::string test_out = (ctx.out / (spec.id + "_test.ds")).string();
  save_dataset(train, train_out);
  save_dataset(test, test_out);
  std::cout << "gen-dataset: " << spec.id << " -> " << train_count << " train / " << test_count
            << " test samples in " << ctx.out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

json normalized_model_config(ModelKind kind, const json& config) {
  switch (kind) {
    case ModelKind::mateformer: return to_json(mateformer_config_from_json(config));
    case ModelKind::icl: return to_json(icl_config_from_json(config));
    case ModelKind::d2l_raw:
    case ModelKind::d2l_ad: return to_json(d2l_config_from_json(config));
    case ModelKind::multitask: return to_json(multitask_config_from_json(config));
  }
  throw std::logic_error("unknown ModelKind");
}

int cmd_train(RunContext& ctx) {
  require_only_keys(ctx.manifest,
                    {"command", "output", "threads", "seed", "model", "init_from", "train_config",
                     "datasets"},
                    "train manifest");
  const std::uint64_t seed = required_seed(ctx.manifest);
  if (ctx.manifest.contains("model") == ctx.manifest.contains("init_from"))
    throw std::runtime_error("train needs exactly one of \"model\" (fresh) or \"init_from\" "
                             "(fine-tune)");
  if (!ctx.manifest.contains("datasets") || !ctx.manifest.at("datasets").is_array() ||
      ctx.manifest.at("datasets").empty())
    throw std::runtime_error("train needs a non-empty \"datasets\" array");

  if (!ctx.manifest.contains("train_config"))
    throw std::runtime_error("train needs a \"train_config\" (step count, batch size, ...)");
  json tc_json = ctx.manifest.at("train_config");
  if (tc_json.contains("seed"))
    throw std::runtime_error("train_config carries no \"seed\"; the manifest's top-level seed "
                             "drives training");
  TrainConfig tc = train_config_from_json(tc_json);
  tc.seed = seed;

  const auto dataset_paths = ctx.manifest.at("datasets").get<std::vector<std::string>>();
  for (const std::string& p : dataset_paths) require_input_file(p, "dataset");

  json eff{{"seed", seed}, {"datasets", dataset_paths}};
  json eff_tc = to_json(tc);
  eff_tc.erase("seed");
  eff["train_config"] = eff_tc;

  Checkpoint start;
  std::vector<Dataset> datasets;
  std::vector<const Dataset*> ptrs;
  datasets.reserve(dataset_paths.size());
  for (const std::string& p : dataset_paths) datasets.push_back(load_dataset(p));
  for (const Dataset& d : datasets) ptrs.push_back(&d);

  if (ctx.manifest.contains("model")) {
    const json& m = ctx.manifest.at("model");
    require_only_keys(m, {"kind", "config"}, "model entry");
    const ModelKind kind = model_kind_from_string(m.at("kind").get<std::string>());
    const json config = m.at("config");
    eff["model"] = json{{"kind", to_string(kind)},
                        {"config", normalized_model_config(kind, config)}};
    write_effective_config(ctx, eff);
    start = init_checkpoint(kind, config, tc, ptrs);
  } else {
    const std::string from = ctx.manifest.at("init_from").get<std::string>();
    require_input_file(from, "checkpoint");
    eff["init_from"] = from;
    write_effective_config(ctx, eff);
    start = load_checkpoint(from);
  }

  TrainResult result = train_model(std::move(start), tc, ptrs);
  const std::string ck_path = (ctx.out / "checkpoint.ck").string();
  save_checkpoint(result.checkpoint, ck_path);
  write_text(ctx.out / "metrics.csv", result.metrics_csv);

  std::string final_loss = "n/a";
  if (const auto nl = result.metrics_csv.find_last_of('\n', result.metrics_csv.size() - 2);
      nl != std::string::npos) {
    std::string row = result.metrics_csv.substr(nl + 1);
    while (!row.empty() && (row.back() == '\n' || row.back() == '\r')) row.pop_back();
    const auto c1 = row.find(','), c2 = row.find(',', c1 + 1);
    if (c2 != std::string::npos) final_loss = row.substr(c2 + 1, row.find(',', c2 + 1) - c2 - 1);
  }
  std::cout << "train: " << to_string(result.checkpoint.kind) << " for " << tc.steps
            << " step(s) on " << datasets.size() << " dataset(s) -> " << ck_path
            << " (last logged loss " << final_loss << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

int cmd_eval(RunContext& ctx) {
  require_only_keys(ctx.manifest,
                    {"command", "output", "threads", "seed", "checkpoint", "test", "train", "eval"},
                    "eval manifest");
  const std::uint64_t seed = required_seed(ctx.manifest);
  const std::string ck_path = ctx.manifest.at("checkpoint").get<std::string>();
  const std::string test_path = ctx.manifest.at("test").get<std::string>();
  require_input_file(ck_path, "checkpoint");
  require_input_file(test_path, "dataset");

  const Checkpoint ck = load_checkpoint(ck_path);
  EvalOptions opt;
  opt.seed = seed;
  opt.mode = (ck.kind == ModelKind::mateformer || ck.kind == ModelKind::icl)
                 ? EvalMode::neighborhood
                 : EvalMode::direct;
  if (ctx.manifest.contains("eval")) {
    const json& e = ctx.manifest.at("eval");
    require_only_keys(e, {"mode", "n", "k", "l", "noise_sigma", "max_samples"}, "eval options");
    if (e.contains("mode")) opt.mode = eval_mode_from_string(e.at("mode").get<std::string>());
    if (e.contains("n")) opt.n = e.at("n").get<int>();
    if (e.contains("k")) opt.k = e.at("k").get<int>();
    if (e.contains("l")) opt.l = e.at("l").get<double>();
    if (e.contains("noise_sigma")) opt.noise_sigma = e.at("noise_sigma").get<double>();
    if (e.contains("max_samples")) opt.max_samples = e.at("max_samples").get<int>();
  }

  json eff{{"seed", seed},
           {"checkpoint", ck_path},
           {"test", test_path},
           {"eval",
            {{"mode", to_string(opt.mode)},
             {"n", opt.n},
             {"k", opt.k},
             {"l", opt.l},
             {"noise_sigma", opt.noise_sigma},
             {"max_samples", opt.max_samples}}}};

  std::unique_ptr<Dataset> train;
  if (ctx.manifest.contains("train")) {
    const std::string train_path = ctx.manifest.at("train").get<std::string>();
    require_input_file(train_path, "dataset");
    eff["train"] = train_path;
    train = std::make_unique<Dataset>(load_dataset(train_path));
  }
  write_effective_config(ctx, eff);

  const Dataset test = load_dataset(test_path);
  const EvalResult r = eval_model(ck, test, train.get(), opt);

  json summary{{"mean_m", r.summary.mean_m},
               {"p10_m", r.summary.p10_m},
               {"p90_m", r.summary.p90_m},
               {"count", r.summary.count}};
  write_text(ctx.out / "summary.json", summary.dump(2) + "\n");

  std::string records = "truth_x,truth_y,coarse_x,coarse_y,has_coarse,pred_x,pred_y,error_m\n";
  for (const SampleRecord& rec : r.records) {
    records += fmt_g(rec.truth.x) + "," + fmt_g(rec.truth.y) + "," + fmt_g(rec.coarse.x) + "," +
               fmt_g(rec.coarse.y) + "," + (rec.has_coarse ? "1" : "0") + "," +
               fmt_g(rec.pred.x) + "," + fmt_g(rec.pred.y) + "," + fmt_g(rec.error_m) + "\n";
  }
  write_text(ctx.out / "records.csv", records);

  std::cout << "eval: " << to_string(ck.kind) << " (" << to_string(opt.mode) << ") mean "
            << fmt_g(r.summary.mean_m) << " m, p10 " << fmt_g(r.summary.p10_m) << " m, p90 "
            << fmt_g(r.summary.p90_m) << " m over " << r.summary.count << " sample(s)\n";
  return 0;
}

// ---------------------------------------------------------------------------
// experiment

int cmd_experiment(RunContext& ctx) {
  if (!ctx.manifest.contains("seed")) throw std::runtime_error("manifest needs a \"seed\"");
  json inner = ctx.manifest;  // protocol fields validated by run_experiment
  inner.erase("command");
  inner.erase("output");
  inner.erase("threads");
  const ExperimentResult result = run_experiment(inner);

  write_effective_config(ctx, result.effective_manifest);
  write_text(ctx.out / "results.csv", result.csv);

  const auto rows = std::count(result.csv.begin(), result.csv.end(), '\n') - 1;
  std::cout << "experiment '" << inner.at("experiment").get<std::string>() << "': " << rows
            << " row(s) -> " << (ctx.out / "results.csv").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

int cmd_gradcheck(RunContext& ctx) {
  require_only_keys(ctx.manifest, {"command", "output", "threads", "seed", "model", "probes"},
                    "gradcheck manifest");
  const std::uint64_t seed = required_seed(ctx.manifest);
  if (!ctx.manifest.contains("model")) throw std::runtime_error("gradcheck needs a \"model\"");
  const json& m = ctx.manifest.at("model");
  require_only_keys(m, {"kind", "config"}, "model entry");
  const ModelKind kind = model_kind_from_string(m.at("kind").get<std::string>());
  const json config = m.at("config");
  const int probes = ctx.manifest.value("probes", 20);
  if (probes < 1) throw std::runtime_error("gradcheck: probes must be >= 1");

  write_effective_config(ctx, json{{"seed", seed},
                                   {"probes", probes},
                                   {"model",
                                    {{"kind", to_string(kind)},
                                     {"config", normalized_model_config(kind, config)}}}});

  GradCheckReport rep;
  switch (kind) {
    case ModelKind::mateformer: {
      MateformerConfig cfg = mateformer_config_from_json(config);
      rep = analogy_gradcheck(Mateformer<double>::init(cfg, seed), cfg.csi_dim(), probes, seed);
      break;
    }
    case ModelKind::icl: {
      IclConfig cfg = icl_config_from_json(config);
      rep = analogy_gradcheck(Icl<double>::init(cfg, seed), cfg.csi_dim(), probes, seed);
      break;
    }
    case ModelKind::d2l_raw:
    case ModelKind::d2l_ad: {
      D2lConfig cfg = d2l_config_from_json(config);
      rep = direct_gradcheck(D2lModel<double>::init(cfg, seed), cfg.input_dim(), probes, seed,
                             [](D2lModel<double>& m, Tape<double>& t, const Tensor<double>& x,
                                bool track, auto leaves) { return m.forward(t, x, track, leaves); });
      break;
    }
    case ModelKind::multitask: {
      MultitaskConfig cfg = multitask_config_from_json(config);
      const std::string head = cfg.scenarios.front();
      rep = direct_gradcheck(Multitask<double>::init(cfg, seed),
                             feature_dim(cfg.features, cfg.nt, cfg.nc), probes, seed,
                             [&head](Multitask<double>& m, Tape<double>& t,
                                     const Tensor<double>& x, bool track, auto leaves) {
                               return m.forward(t, x, head, track, leaves);
                             });
      break;
    }
  }

  constexpr double kGate = 1e-4;
  const bool pass = rep.max_rel_error < kGate;
  std::cout << "gradcheck " << to_string(kind) << ": max rel err " << fmt_g(rep.max_rel_error)
            << " over " << rep.probes << " probes (worst " << rep.worst_param << "["
            << rep.worst_index << "]), gate " << fmt_g(kGate) << ": "
            << (pass ? "PASS" : "FAIL") << "\n";
  return pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CSI localization models: scenario simulation, training, evaluation"};
  app.require_subcommand(1);

  std::string manifest_path;
  const std::pair<const char*, const char*> commands[] = {
      {"gen-scenario", "Write randomized scenario specs from a manifest"},
      {"gen-dataset", "Sample train/test CSI datasets for a scenario"},
      {"train", "Train or fine-tune a model"},
      {"eval", "Score a checkpoint on a test dataset"},
      {"experiment", "Run a named multi-model evaluation protocol"},
      {"gradcheck", "Check analytic gradients against central differences"}};
  for (const auto& [name, desc] : commands)
    app.add_subcommand(name, desc)
        ->add_option("manifest", manifest_path, "path to the JSON run manifest")
        ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    RunContext ctx = begin_run(command, manifest_path);
    if (command == "gen-scenario") return cmd_gen_scenario(ctx);
    if (command == "gen-dataset") return cmd_gen_dataset(ctx);
    if (command == "train") return cmd_train(ctx);
    if (command == "eval") return cmd_eval(ctx);
    if (command == "experiment") return cmd_experiment(ctx);
    if (command == "gradcheck") return cmd_gradcheck(ctx);
    std::cerr << "error: unhandled command '" << command << "'\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
