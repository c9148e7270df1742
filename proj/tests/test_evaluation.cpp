#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "csiloc/evaluation.hpp"
#include "doctest.h"

using namespace csiloc;
using nlohmann::json;

namespace {

Dataset tiny_dataset(const std::string& id, std::uint64_t seed, int count, DatasetRole role,
                     int nt = 2, int nc = 2) {
  ScenarioGenOptions opt;
  opt.num_antennas = nt;
  opt.num_subcarriers = nc;
  opt.max_blockers = 0;
  ScenarioSpec spec = make_random_scenario(id, seed, opt);
  return generate_dataset(spec, count, role, Rng(seed).derive(to_string(role)));
}

std::vector<std::vector<std::string>> parse_csv(const std::string& csv) {
  std::vector<std::vector<std::string>> rows;
  std::stringstream ss(csv);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream row(line);
    std::string cell;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

TrainConfig small_train_config() {
  TrainConfig tc;
  tc.n = 4;
  tc.p_min = 1;
  tc.p_max = 4;
  tc.q_min = 1;
  tc.q_max = 2;
  tc.batch_size = 4;
  tc.steps = 0;
  return tc;
}

json mf_config_json() {
  MateformerConfig cfg;
  cfg.depth = 2;
  cfg.d_model = 8;
  cfg.d_ff = 8;
  cfg.heads = 2;
  cfg.nt = 2;
  cfg.nc = 2;
  return to_json(cfg);
}

json icl_config_json() {
  IclConfig cfg;
  cfg.depth = 1;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.nt = 2;
  cfg.nc = 2;
  cfg.max_pairs = 4;
  return to_json(cfg);
}

json d2l_config_json() {
  D2lConfig cfg;
  cfg.hidden = {16, 8};
  cfg.features = FeatureKind::raw;
  cfg.nt = 2;
  cfg.nc = 2;
  return to_json(cfg);
}

// datasets and untrained checkpoints shared by the experiment-protocol tests,
// written to the temp dir once per test run
struct World {
  Dataset s1_train, s1_test, s2_train, s2_test;
  std::string s1_train_p, s1_test_p, s2_train_p, s2_test_p;
  std::string mf_p, mf2_p, icl_p, d2l_p;
};

const World& world() {
  static const World w = [] {
    World v;
    const auto dir = std::filesystem::temp_directory_path();
    auto path = [&](const char* name) { return (dir / name).string(); };

    v.s1_train = tiny_dataset("s1", 11, 40, DatasetRole::training);
    v.s1_test = tiny_dataset("s1", 11, 12, DatasetRole::testing);
    v.s2_train = tiny_dataset("s2", 22, 40, DatasetRole::training);
    v.s2_test = tiny_dataset("s2", 22, 12, DatasetRole::testing);
    v.s1_train_p = path("csiloc_eval_s1_train.bin");
    v.s1_test_p = path("csiloc_eval_s1_test.bin");
    v.s2_train_p = path("csiloc_eval_s2_train.bin");
    v.s2_test_p = path("csiloc_eval_s2_test.bin");
    save_dataset(v.s1_train, v.s1_train_p);
    save_dataset(v.s1_test, v.s1_test_p);
    save_dataset(v.s2_train, v.s2_train_p);
    save_dataset(v.s2_test, v.s2_test_p);

    TrainConfig tc = small_train_config();
    v.mf_p = path("csiloc_eval_mf.ck");
    v.mf2_p = path("csiloc_eval_mf2.ck");
    v.icl_p = path("csiloc_eval_icl.ck");
    v.d2l_p = path("csiloc_eval_d2l.ck");
    save_checkpoint(init_checkpoint(ModelKind::mateformer, mf_config_json(), tc, {&v.s1_train}),
                    v.mf_p);
    tc.seed = 2;
    save_checkpoint(init_checkpoint(ModelKind::mateformer, mf_config_json(), tc, {&v.s1_train}),
                    v.mf2_p);
    tc.seed = 3;
    save_checkpoint(init_checkpoint(ModelKind::icl, icl_config_json(), tc, {&v.s1_train}),
                    v.icl_p);
    tc.seed = 4;
    save_checkpoint(init_checkpoint(ModelKind::d2l_raw, d2l_config_json(), tc, {&v.s1_train}),
                    v.d2l_p);
    return v;
  }();
  return w;
}

bool records_identical(const std::vector<SampleRecord>& a, const std::vector<SampleRecord>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i].truth == b[i].truth) || !(a[i].coarse == b[i].coarse) ||
        !(a[i].pred == b[i].pred) || a[i].has_coarse != b[i].has_coarse ||
        a[i].error_m != b[i].error_m)
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("localization error is the Euclidean distance") {
  CHECK(localization_error({0, 0}, {3, 4}) == 5.0);
  CHECK(localization_error({-1, 2}, {-1, 2}) == 0.0);
  CHECK(localization_error({1, 1}, {2, 2}) == doctest::Approx(std::sqrt(2.0)));
}

TEST_CASE("error summary: mean plus nearest-rank percentiles") {
  std::vector<double> one_to_ten = {10, 9, 8, 7, 6, 5, 4, 3, 2, 1};  // unsorted on purpose
  ErrorSummary s = error_summary(one_to_ten);
  CHECK(s.count == 10);
  CHECK(s.mean_m == doctest::Approx(5.5));
  CHECK(s.p10_m == 1.0);
  CHECK(s.p90_m == 9.0);

  ErrorSummary single = error_summary({7.5});
  CHECK(single.mean_m == 7.5);
  CHECK(single.p10_m == 7.5);
  CHECK(single.p90_m == 7.5);
  CHECK(single.count == 1);

  // double-precision ceil oracle across many list sizes
  Rng rng(99);
  for (int count = 1; count <= 300; count += 7) {
    std::vector<double> errs(count);
    for (double& e : errs) e = rng.uniform(0.0, 50.0);
    ErrorSummary got = error_summary(errs);
    std::vector<double> sorted = errs;
    std::sort(sorted.begin(), sorted.end());
    const int r10 = int(std::ceil(0.10 * count));
    const int r90 = int(std::ceil(0.90 * count));
    CHECK(got.p10_m == sorted[r10 - 1]);
    CHECK(got.p90_m == sorted[r90 - 1]);
    CHECK(got.p10_m <= got.p90_m);
  }

  CHECK_THROWS_AS(error_summary({}), std::invalid_argument);
}

TEST_CASE("eval mode names round-trip") {
  for (EvalMode m : {EvalMode::direct, EvalMode::neighborhood, EvalMode::random,
                     EvalMode::iterative})
    CHECK(eval_mode_from_string(to_string(m)) == m);
  CHECK_THROWS_WITH_AS(eval_mode_from_string("nearest"), "unknown eval mode 'nearest'",
                       std::invalid_argument);
}

TEST_CASE("config hash: 16 hex digits of FNV-1a") {
  CHECK(config_hash_hex("") == "cbf29ce484222325");  // the offset basis
  CHECK(config_hash_hex("abc") == config_hash_hex("abc"));
  CHECK(config_hash_hex("abc") != config_hash_hex("abd"));
  CHECK(config_hash_hex("x").size() == 16);
}

TEST_CASE("direct eval: consistent records, determinism, prefix stability") {
  const World& w = world();
  Checkpoint ck = load_checkpoint(w.d2l_p);

  EvalOptions opt;
  opt.mode = EvalMode::direct;
  opt.seed = 5;
  EvalResult r = eval_model(ck, w.s1_test, nullptr, opt);

  REQUIRE(int(r.records.size()) == w.s1_test.size());
  std::vector<double> errs;
  for (int i = 0; i < w.s1_test.size(); ++i) {
    const SampleRecord& rec = r.records[i];
    CHECK(rec.truth == w.s1_test.samples[i].location());
    CHECK(!rec.has_coarse);
    CHECK(rec.error_m == localization_error(rec.truth, rec.pred));
    errs.push_back(rec.error_m);
  }
  ErrorSummary oracle = error_summary(errs);
  CHECK(r.summary.mean_m == oracle.mean_m);
  CHECK(r.summary.p10_m == oracle.p10_m);
  CHECK(r.summary.p90_m == oracle.p90_m);
  CHECK(r.summary.count == oracle.count);

  EvalResult again = eval_model(ck, w.s1_test, nullptr, opt);
  CHECK(records_identical(r.records, again.records));

  EvalOptions head = opt;
  head.max_samples = 5;
  EvalResult prefix = eval_model(ck, w.s1_test, nullptr, head);
  REQUIRE(prefix.records.size() == 5);
  for (int i = 0; i < 5; ++i) CHECK(prefix.records[i].pred == r.records[i].pred);

  EvalOptions noisy = opt;
  noisy.noise_sigma = 0.3;
  EvalResult rn = eval_model(ck, w.s1_test, nullptr, noisy);
  CHECK(!records_identical(rn.records, r.records));  // noise moved the predictions
  CHECK(rn.records[0].truth == r.records[0].truth);
  EvalResult rn2 = eval_model(ck, w.s1_test, nullptr, noisy);
  CHECK(records_identical(rn.records, rn2.records));
}

TEST_CASE("mode/model family mismatches are rejected") {
  const World& w = world();
  Checkpoint mf = load_checkpoint(w.mf_p);
  Checkpoint d2l = load_checkpoint(w.d2l_p);

  EvalOptions direct;
  direct.mode = EvalMode::direct;
  CHECK_THROWS_WITH_AS(eval_model(mf, w.s1_test, &w.s1_train, direct),
                       "eval mode 'direct' needs a d2l or multitask checkpoint, not 'mateformer'",
                       std::invalid_argument);

  EvalOptions nbhd;
  nbhd.mode = EvalMode::neighborhood;
  nbhd.n = 4;
  CHECK_THROWS_WITH_AS(eval_model(d2l, w.s1_test, &w.s1_train, nbhd),
                       "eval mode 'neighborhood' needs a mateformer or icl checkpoint, not "
                       "'d2l-raw'",
                       std::invalid_argument);
  CHECK_THROWS_AS(eval_model(mf, w.s1_test, nullptr, nbhd), std::invalid_argument);

  EvalOptions too_many = nbhd;
  too_many.k = w.s1_train.size() + 1;
  CHECK_THROWS_AS(eval_model(mf, w.s1_test, &w.s1_train, too_many), std::invalid_argument);
}

TEST_CASE("multitask eval routes through the scenario's head") {
  const World& w = world();
  MultitaskConfig cfg;
  cfg.hidden = {16, 8};
  cfg.features = FeatureKind::raw;
  cfg.nt = 2;
  cfg.nc = 2;
  cfg.scenarios = {"s1", "s2"};
  Checkpoint ck = init_checkpoint(ModelKind::multitask, to_json(cfg), small_train_config(),
                                  {&w.s1_train, &w.s2_train});

  EvalOptions opt;
  opt.mode = EvalMode::direct;
  CHECK(eval_model(ck, w.s1_test, nullptr, opt).summary.count == w.s1_test.size());
  CHECK(eval_model(ck, w.s2_test, nullptr, opt).summary.count == w.s2_test.size());

  Dataset s3_test = tiny_dataset("s3", 33, 6, DatasetRole::testing);
  CHECK_THROWS_WITH_AS(eval_model(ck, s3_test, nullptr, opt),
                       "multitask checkpoint has no head for scenario 's3'",
                       std::invalid_argument);
}

TEST_CASE("neighborhood mode: search center stays within l of the truth") {
  const World& w = world();
  Checkpoint mf = load_checkpoint(w.mf_p);

  EvalOptions opt;
  opt.mode = EvalMode::neighborhood;
  opt.n = 4;
  opt.l = 2.0;
  opt.seed = 9;
  EvalResult r = eval_model(mf, w.s1_test, &w.s1_train, opt);
  bool center_moved = false;
  for (const SampleRecord& rec : r.records) {
    CHECK(rec.has_coarse);
    CHECK(std::abs(rec.coarse.x - rec.truth.x) <= opt.l);
    CHECK(std::abs(rec.coarse.y - rec.truth.y) <= opt.l);
    CHECK(rec.error_m == localization_error(rec.truth, rec.pred));
    if (!(rec.coarse == rec.truth)) center_moved = true;
  }
  CHECK(center_moved);

  opt.l = 0.0;  // degenerate draw: the true location is the search center
  EvalResult exact = eval_model(mf, w.s1_test, &w.s1_train, opt);
  for (const SampleRecord& rec : exact.records) CHECK(rec.coarse == rec.truth);
}

TEST_CASE("iterative mode: pass one is the random-mode prediction, pass two re-centers") {
  const World& w = world();
  Checkpoint mf = load_checkpoint(w.mf_p);

  EvalOptions opt;
  opt.mode = EvalMode::random;
  opt.n = 4;
  opt.seed = 13;
  EvalResult random_pass = eval_model(mf, w.s1_test, &w.s1_train, opt);

  opt.mode = EvalMode::iterative;
  EvalResult iter = eval_model(mf, w.s1_test, &w.s1_train, opt);
  REQUIRE(iter.records.size() == random_pass.records.size());
  bool refined_differs = false;
  for (std::size_t i = 0; i < iter.records.size(); ++i) {
    CHECK(iter.records[i].has_coarse);
    CHECK(iter.records[i].coarse == random_pass.records[i].pred);  // bitwise
    if (!(iter.records[i].pred == random_pass.records[i].pred)) refined_differs = true;
  }
  CHECK(refined_differs);
}

TEST_CASE("icl checkpoints run the analogy modes within their pair budget") {
  const World& w = world();
  Checkpoint icl = load_checkpoint(w.icl_p);

  EvalOptions opt;
  opt.mode = EvalMode::neighborhood;
  opt.n = 4;  // == max_pairs of the test config
  EvalResult r = eval_model(icl, w.s1_test, &w.s1_train, opt);
  CHECK(r.summary.count == w.s1_test.size());

  opt.k = 5;  // one over the checkpoint's max_pairs
  CHECK_THROWS_WITH_AS(eval_model(icl, w.s1_test, &w.s1_train, opt),
                       "eval_model: k=5 exceeds the checkpoint's max_pairs=4",
                       std::invalid_argument);
}

TEST_CASE("experiment: single-scenario emits one row per model") {
  const World& w = world();
  json manifest = {{"experiment", "single-scenario"},
                   {"seed", 7},
                   {"eval", {{"n", 4}}},
                   {"models",
                    {{{"checkpoint", w.mf_p}}, {{"checkpoint", w.d2l_p}}}},
                   {"train", w.s1_train_p},
                   {"test", w.s1_test_p}};
  ExperimentResult res = run_experiment(manifest);

  auto rows = parse_csv(res.csv);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == std::vector<std::string>{"experiment", "model", "train_scenarios",
                                            "eval_scenario", "mode", "sweep_param", "sweep_value",
                                            "mean_m", "p10_m", "p90_m", "count", "seed",
                                            "config_hash"});
  for (std::size_t i = 1; i < rows.size(); ++i) {
    REQUIRE(rows[i].size() == 13);
    CHECK(rows[i][0] == "single-scenario");
    CHECK(rows[i][2] == "s1");
    CHECK(rows[i][3] == "s1");
    CHECK(rows[i][10] == "12");
    CHECK(rows[i][11] == "7");
    CHECK(rows[i][12].size() == 16);
  }
  CHECK(rows[1][1] == "mateformer");
  CHECK(rows[1][4] == "neighborhood");
  CHECK(rows[2][1] == "d2l-raw");
  CHECK(rows[2][4] == "direct");
  CHECK(rows[1][12] == rows[2][12]);  // one manifest, one hash

  // the effective manifest pins every default; re-running it is bit-identical
  ExperimentResult again = run_experiment(res.effective_manifest);
  CHECK(again.csv == res.csv);
  CHECK(again.effective_manifest == res.effective_manifest);

  json different_seed = manifest;
  different_seed["seed"] = 8;
  CHECK(run_experiment(different_seed).csv != res.csv);
}

TEST_CASE("experiment: manifest validation failures name the problem") {
  const World& w = world();
  CHECK_THROWS_AS(run_experiment(json::array()), std::invalid_argument);
  CHECK_THROWS_AS(run_experiment(json{{"experiment", "mystery"}}), std::invalid_argument);

  json bad_key = {{"experiment", "single-scenario"},
                  {"models", {{{"checkpoint", w.d2l_p}}}},
                  {"train", w.s1_train_p},
                  {"test", w.s1_test_p},
                  {"extra", 1}};
  CHECK_THROWS_WITH_AS(run_experiment(bad_key),
                       "experiment 'single-scenario' manifest: unknown key \"extra\"",
                       std::invalid_argument);

  json bad_eval = {{"experiment", "single-scenario"},
                   {"eval", {{"samples", 5}}},
                   {"models", {{{"checkpoint", w.d2l_p}}}},
                   {"train", w.s1_train_p},
                   {"test", w.s1_test_p}};
  CHECK_THROWS_WITH_AS(run_experiment(bad_eval), "eval options: unknown key \"samples\"",
                       std::invalid_argument);

  json one_eval = {{"experiment", "cross-scenario"},
                   {"models", {{{"checkpoint", w.mf_p}}}},
                   {"evals", {{{"train", w.s1_train_p}, {"test", w.s1_test_p}}}}};
  CHECK_THROWS_AS(run_experiment(one_eval), std::invalid_argument);

  json no_models = {{"experiment", "single-scenario"},
                    {"models", json::array()},
                    {"train", w.s1_train_p},
                    {"test", w.s1_test_p}};
  CHECK_THROWS_AS(run_experiment(no_models), std::invalid_argument);
}

TEST_CASE("experiment: cross-scenario and joint-heldout cover every model x scenario cell") {
  const World& w = world();
  json manifest = {{"experiment", "cross-scenario"},
                   {"seed", 7},
                   {"eval", {{"n", 4}}},
                   {"models", {{{"checkpoint", w.mf_p}}, {{"checkpoint", w.d2l_p}}}},
                   {"evals",
                    {{{"train", w.s1_train_p}, {"test", w.s1_test_p}},
                     {{"train", w.s2_train_p}, {"test", w.s2_test_p}}}}};
  auto rows = parse_csv(run_experiment(manifest).csv);
  REQUIRE(rows.size() == 5);  // header + 2 models x 2 scenarios
  CHECK(rows[1][3] == "s1");
  CHECK(rows[2][3] == "s2");
  CHECK(rows[1][1] == "mateformer");
  CHECK(rows[3][1] == "d2l-raw");

  manifest["experiment"] = "joint-heldout";
  auto jrows = parse_csv(run_experiment(manifest).csv);
  REQUIRE(jrows.size() == 5);
  CHECK(jrows[1][0] == "joint-heldout");
}

TEST_CASE("experiment: sweeps carry the axis in sweep_param/sweep_value") {
  const World& w = world();

  json nbr = {{"experiment", "neighbor-sweep"},
              {"seed", 7},
              {"eval", {{"n", 4}}},
              {"model", {{"checkpoint", w.mf_p}}},
              {"train", w.s1_train_p},
              {"test", w.s1_test_p},
              {"ks", {1, 2}}};
  auto rows = parse_csv(run_experiment(nbr).csv);
  REQUIRE(rows.size() == 3);
  CHECK(rows[1][5] == "k");
  CHECK(rows[1][6] == "1");
  CHECK(rows[2][6] == "2");
  CHECK(rows[1][4] == "neighborhood");

  json noise = {{"experiment", "noise-sweep"},
                {"seed", 7},
                {"eval", {{"n", 4}}},
                {"model", {{"checkpoint", w.d2l_p}}},
                {"train", w.s1_train_p},
                {"test", w.s1_test_p},
                {"sigmas", {0.0, 0.3}}};
  auto nrows = parse_csv(run_experiment(noise).csv);
  REQUIRE(nrows.size() == 3);
  CHECK(nrows[1][5] == "noise_sigma");
  CHECK(nrows[1][6] == "0");
  CHECK(nrows[2][6] == "0.3");

  // a zero-noise sweep point reproduces the plain single-scenario evaluation
  json single = {{"experiment", "single-scenario"},
                 {"seed", 7},
                 {"eval", {{"n", 4}}},
                 {"models", {{{"checkpoint", w.d2l_p}}}},
                 {"train", w.s1_train_p},
                 {"test", w.s1_test_p}};
  auto srows = parse_csv(run_experiment(single).csv);
  CHECK(nrows[1][7] == srows[1][7]);  // mean_m
  CHECK(nrows[1][9] == srows[1][9]);  // p90_m
  CHECK(nrows[2][7] != srows[1][7]);  // noise at 0.3 moved it

  json init_err = {{"experiment", "initial-error-sweep"},
                   {"seed", 7},
                   {"eval", {{"n", 4}}},
                   {"model", {{"checkpoint", w.mf_p}}},
                   {"train", w.s1_train_p},
                   {"test", w.s1_test_p},
                   {"ls", {0.0, 1.0}}};
  auto irows = parse_csv(run_experiment(init_err).csv);
  REQUIRE(irows.size() == 3);
  CHECK(irows[1][4] == "neighborhood");
  CHECK(irows[1][5] == "l");
  CHECK(irows[1][6] == "0");
  CHECK(irows[2][6] == "1");
}

TEST_CASE("experiment: sampling-modes pairs each strategy with its checkpoint") {
  const World& w = world();
  json manifest = {{"experiment", "sampling-modes"},
                   {"seed", 7},
                   {"eval", {{"n", 4}}},
                   {"neighborhood_model", {{"checkpoint", w.mf_p}}},
                   {"random_model", {{"checkpoint", w.mf2_p}}},
                   {"train", w.s1_train_p},
                   {"test", w.s1_test_p}};
  auto rows = parse_csv(run_experiment(manifest).csv);
  REQUIRE(rows.size() == 4);
  CHECK(rows[1][4] == "neighborhood");
  CHECK(rows[2][4] == "random");
  CHECK(rows[3][4] == "iterative");
  for (int i = 1; i <= 3; ++i) CHECK(rows[i][1] == "mateformer");
}

TEST_CASE("experiment: transfer logs a pre-update row then the fine-tune curve") {
  const World& w = world();
  json manifest = {{"experiment", "transfer"},
                   {"seed", 7},
                   {"eval", {{"n", 4}}},
                   {"models", {{{"checkpoint", w.d2l_p}}, {{"checkpoint", w.mf_p}}}},
                   {"source", {{"train", w.s1_train_p}, {"test", w.s1_test_p}}},
                   {"target", {{"train", w.s2_train_p}, {"test", w.s2_test_p}}},
                   {"train_config",
                    {{"steps", 4},
                     {"log_every", 2},
                     {"batch_size", 4},
                     {"n", 4},
                     {"p_min", 1},
                     {"p_max", 4},
                     {"q_min", 1},
                     {"q_max", 2}}}};
  ExperimentResult res = run_experiment(manifest);
  auto rows = parse_csv(res.csv);
  // per model: steps {0, 2, 4} x {source, target}
  REQUIRE(rows.size() == 1 + 2 * 3 * 2);
  CHECK(rows[1][5] == "step");
  CHECK(rows[1][6] == "0");
  CHECK(rows[1][3] == "s1");
  CHECK(rows[2][3] == "s2");
  CHECK(rows[5][6] == "4");
  CHECK(rows[7][1] == "mateformer");

  // the step-0 source row scores the untouched starting checkpoint
  EvalOptions opt;
  opt.mode = EvalMode::direct;
  opt.n = 4;
  opt.seed = 7;
  EvalResult direct = eval_model(load_checkpoint(w.d2l_p), w.s1_test, &w.s1_train, opt);
  CHECK(std::stod(rows[1][7]) == doctest::Approx(direct.summary.mean_m).epsilon(1e-8));

  CHECK(run_experiment(manifest).csv == res.csv);
}
