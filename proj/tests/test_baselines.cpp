#include <cmath>
#include <cstring>
#include <vector>

#include "csiloc/baselines.hpp"
#include "csiloc/gradcheck.hpp"
#include "doctest.h"

using namespace csiloc;

namespace {

D2lConfig small_d2l() {
  D2lConfig cfg;
  cfg.hidden = {8, 4};
  cfg.features = FeatureKind::raw;
  cfg.nt = 2;
  cfg.nc = 2;
  return cfg;
}

IclConfig small_icl() {
  IclConfig cfg;
  cfg.depth = 2;
  cfg.d_model = 16;
  cfg.heads = 2;
  cfg.nt = 2;
  cfg.nc = 2;
  cfg.max_pairs = 3;
  return cfg;
}

template <typename T>
AnalogyInputs<T> random_inputs(int p, int q, int csi_dim, Rng rng) {
  AnalogyInputs<T> in;
  in.embed_csi = Tensor<T>::zeros({p, csi_dim});
  in.query_csi = Tensor<T>::zeros({q, csi_dim});
  in.embed_loc = Tensor<T>::zeros({p, 2});
  for (auto& v : in.embed_csi.v) v = T(rng.uniform(-1.0, 1.0));
  for (auto& v : in.query_csi.v) v = T(rng.uniform(-1.0, 1.0));
  for (auto& v : in.embed_loc.v) v = T(rng.uniform(-0.4, 0.4));
  in.x_init = compute_x_init(in.embed_loc);
  return in;
}

}  // namespace

TEST_CASE("feature extraction flattens raw and angle-delay representations") {
  CSIMatrix h = CSIMatrix::zeros(2, 2);
  h.at(0, 0) = {1.0f, -2.0f};
  h.at(0, 1) = {0.5f, 0.0f};
  h.at(1, 0) = {-1.5f, 3.0f};
  h.at(1, 1) = {0.0f, 0.25f};

  CHECK(feature_dim(FeatureKind::raw, 2, 2) == 8);
  CHECK(feature_dim(FeatureKind::angle_delay, 2, 2) == 4);

  auto raw = extract_features(h, FeatureKind::raw);
  REQUIRE(raw.size() == 8);
  CHECK(raw[0] == 1.0f);
  CHECK(raw[1] == -2.0f);
  CHECK(raw[4] == -1.5f);
  CHECK(raw[7] == 0.25f);

  auto ad = extract_features(h, FeatureKind::angle_delay);
  auto oracle = angle_delay_transform(h);
  REQUIRE(ad.size() == oracle.size());
  for (std::size_t i = 0; i < ad.size(); ++i) CHECK(ad[i] == oracle[i]);

  std::vector<const CSIMatrix*> batch{&h, &h};
  auto x = feature_batch<double>(batch, FeatureKind::raw, 2.0);
  REQUIRE(x.shape == std::vector<int>{2, 8});
  CHECK(x.at(0, 0) == 0.5);
  CHECK(x.at(1, 1) == -1.0);
  CHECK_THROWS_AS((void)feature_batch<double>(batch, FeatureKind::raw, 0.0),
                  std::invalid_argument);
  CSIMatrix other = CSIMatrix::zeros(1, 2);
  std::vector<const CSIMatrix*> mixed{&h, &other};
  CHECK_THROWS_AS((void)feature_batch<double>(mixed, FeatureKind::raw, 1.0),
                  std::invalid_argument);
}

TEST_CASE("d2l parameter count matches a closed-form audit") {
  auto model = D2lModel<float>::init(small_d2l(), 1);
  auto linear = [](int in, int out) { return in * out + out; };
  const std::size_t expected = std::size_t(linear(8, 8) + linear(8, 4) + linear(4, 2));
  CHECK(model.params().value_count() == expected);
  CHECK(model.params().index_of("fc0.w") >= 0);
  CHECK(model.params().index_of("fc1.b") >= 0);
  CHECK(model.params().index_of("out.w") >= 0);
  CHECK(model.params().index_of("fc2.w") == -1);
}

TEST_CASE("d2l zero weights map any input to zero output") {
  auto model = D2lModel<float>::init(small_d2l(), 2);
  for (int i = 0; i < model.params().size(); ++i)
    for (auto& v : model.params().at(i).value.v) v = 0.0f;
  Tensor<float> x = Tensor<float>::zeros({3, 8});
  Rng rng(7);
  for (auto& v : x.v) v = float(rng.uniform(-2, 2));
  Tape<float> tp;
  const Tensor<float>& y = tp.value(model.forward(tp, x, false));
  REQUIRE(y.shape == std::vector<int>{3, 2});
  for (float v : y.v) CHECK(v == 0.0f);

  Tensor<float> bad = Tensor<float>::zeros({3, 7});
  Tape<float> tp2;
  CHECK_THROWS_AS((void)model.forward(tp2, bad, false), std::invalid_argument);
}

TEST_CASE("d2l init is deterministic and within fan bounds") {
  auto a = D2lModel<float>::init(small_d2l(), 11);
  auto b = D2lModel<float>::init(small_d2l(), 11);
  for (int i = 0; i < a.params().size(); ++i) {
    const auto& va = a.params().at(i).value.v;
    const auto& vb = b.params().at(i).value.v;
    CHECK(std::memcmp(va.data(), vb.data(), va.size() * sizeof(float)) == 0);
  }
  const double lim = std::sqrt(6.0 / (8 + 8));
  for (float v : a.params().by_name("fc0.w").value.v) CHECK(std::abs(v) <= lim);
  for (float v : a.params().by_name("fc0.b").value.v) CHECK(v == 0.0f);
}

TEST_CASE("d2l analytic gradients match central differences") {
  const D2lConfig cfg = small_d2l();
  auto model = D2lModel<double>::init(cfg, 21);
  Tensor<double> x = Tensor<double>::zeros({3, 8});
  Tensor<double> targets = Tensor<double>::zeros({3, 2});
  Rng rng(22);
  for (auto& v : x.v) v = rng.uniform(-1, 1);
  for (auto& v : targets.v) v = rng.uniform(-0.3, 0.3);

  auto loss_of = [&](const ParamSet<double>& ps) -> double {
    D2lModel<double> m(cfg, ps.cast<double>());
    Tape<double> tp;
    auto l = mse_loss(tp, m.forward(tp, x, false), tp.constant(targets));
    return tp.value(l).v[0];
  };

  Tape<double> tp;
  std::vector<Tape<double>::Var> leaves;
  auto loss = mse_loss(tp, model.forward(tp, x, true, &leaves), tp.constant(targets));
  tp.backward(loss);
  model.params().zero_grads();
  accumulate_param_grads(tp, leaves, model.params());
  auto rep = finite_diff_gradcheck(loss_of, model.params(), 20, 1e-5, Rng(23));
  INFO("worst " << rep.worst_param << " analytic " << rep.worst_analytic << " central "
                << rep.worst_central);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("causal mask admits only positions at or before the query") {
  BoolMask m = build_causal_mask(4);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) CHECK(m.at(r, c) == (c <= r));
  CHECK_THROWS_AS((void)build_causal_mask(0), std::invalid_argument);
}

TEST_CASE("icl parameter count matches a closed-form audit") {
  const IclConfig cfg = small_icl();
  CHECK(cfg.d_ff() == 2 * cfg.d_model);
  CHECK(cfg.max_seq_len() == 7);
  auto model = Icl<float>::init(cfg, 1);
  auto linear = [](int in, int out) { return in * out + out; };
  const int d = cfg.d_model;
  const int layer = 2 * d + 4 * linear(d, d) + 2 * d + linear(d, 2 * d) + linear(2 * d, d);
  const std::size_t expected = std::size_t(linear(cfg.csi_dim(), d) + linear(2, d) +
                                           cfg.max_seq_len() * d + cfg.depth * layer + 2 * d +
                                           linear(d, 2));
  CHECK(model.params().value_count() == expected);
  CHECK(model.params().index_of("pos") >= 0);
  CHECK(model.params().index_of("l1.ffn.fc2.w") >= 0);
}

TEST_CASE("icl forward emits one prediction per query and honors max length") {
  const IclConfig cfg = small_icl();
  auto model = Icl<float>::init(cfg, 4);
  auto in = random_inputs<float>(2, 3, cfg.csi_dim(), Rng(31));
  Tape<float> tp;
  const Tensor<float>& y = tp.value(model.forward(tp, in, false));
  REQUIRE(y.shape == std::vector<int>{3, 2});
  for (float v : y.v) CHECK(std::isfinite(v));

  auto too_long = random_inputs<float>(cfg.max_pairs + 1, 1, cfg.csi_dim(), Rng(32));
  Tape<float> tp2;
  CHECK_THROWS_AS((void)model.forward(tp2, too_long, false), std::invalid_argument);
}

TEST_CASE("icl output at a slot ignores every later token") {
  const IclConfig cfg = small_icl();
  auto model = Icl<float>::init(cfg, 5);
  auto in = random_inputs<float>(3, 1, cfg.csi_dim(), Rng(41));  // sequence length 7

  Tape<float> tp;
  Tensor<float> base = tp.value(model.forward_sequence(tp, in, 0, false));
  REQUIRE(base.shape == std::vector<int>{7, 2});

  // perturbing the query token (slot 6) must leave slots 0..5 bit-identical
  AnalogyInputs<float> bumped_q = in;
  for (int c = 0; c < cfg.csi_dim(); ++c) bumped_q.query_csi.at(0, c) += 5.0f;
  Tape<float> tp2;
  Tensor<float> after_q = tp2.value(model.forward_sequence(tp2, bumped_q, 0, false));
  for (int s = 0; s < 6; ++s) {
    CHECK(after_q.at(s, 0) == base.at(s, 0));
    CHECK(after_q.at(s, 1) == base.at(s, 1));
  }
  CHECK((after_q.at(6, 0) != base.at(6, 0) || after_q.at(6, 1) != base.at(6, 1)));

  // perturbing pair 2's location (slot 5) must leave slots 0..4 bit-identical
  AnalogyInputs<float> bumped_x = in;
  bumped_x.embed_loc.at(2, 0) += 1.0f;
  Tape<float> tp3;
  Tensor<float> after_x = tp3.value(model.forward_sequence(tp3, bumped_x, 0, false));
  for (int s = 0; s < 5; ++s) {
    CHECK(after_x.at(s, 0) == base.at(s, 0));
    CHECK(after_x.at(s, 1) == base.at(s, 1));
  }
  CHECK((after_x.at(6, 0) != base.at(6, 0) || after_x.at(6, 1) != base.at(6, 1)));
}

TEST_CASE("icl query slot reads the last positional row regardless of p") {
  const IclConfig cfg = small_icl();  // table rows 0..6
  auto model = Icl<float>::init(cfg, 6);
  auto in = random_inputs<float>(1, 1, cfg.csi_dim(), Rng(51));  // uses rows 0, 1, and 6

  Tape<float> tp;
  Tensor<float> base = tp.value(model.forward(tp, in, false));

  auto perturbed_row = [&](int row) {
    Icl<float> other(cfg, model.params().cast<float>());
    for (int c = 0; c < cfg.d_model; ++c) other.params().by_name("pos").value.at(row, c) += 0.5f;
    Tape<float> t;
    return t.value(other.forward(t, in, false));
  };

  for (int unused_row : {2, 3, 4, 5}) {
    Tensor<float> y = perturbed_row(unused_row);
    CHECK(y.at(0, 0) == base.at(0, 0));
    CHECK(y.at(0, 1) == base.at(0, 1));
  }
  Tensor<float> y_last = perturbed_row(6);
  CHECK((y_last.at(0, 0) != base.at(0, 0) || y_last.at(0, 1) != base.at(0, 1)));
}

TEST_CASE("icl analytic gradients match central differences") {
  const IclConfig cfg = small_icl();
  auto model = Icl<double>::init(cfg, 61);
  auto in = random_inputs<double>(2, 1, cfg.csi_dim(), Rng(62));
  Tensor<double> targets = Tensor<double>::zeros({1, 2});
  targets.at(0, 0) = 0.1;
  targets.at(0, 1) = -0.2;

  auto loss_of = [&](const ParamSet<double>& ps) -> double {
    Icl<double> m(cfg, ps.cast<double>());
    Tape<double> tp;
    auto l = mse_loss(tp, m.forward(tp, in, false), tp.constant(targets));
    return tp.value(l).v[0];
  };

  Tape<double> tp;
  std::vector<Tape<double>::Var> leaves;
  auto loss = mse_loss(tp, model.forward(tp, in, true, &leaves), tp.constant(targets));
  tp.backward(loss);
  model.params().zero_grads();
  accumulate_param_grads(tp, leaves, model.params());

  // rows beyond this sequence's slots (4, 5) never enter the tape
  const auto& pos_grad = model.params().by_name("pos").grad;
  for (int row : {4, 5})
    for (int c = 0; c < cfg.d_model; ++c) CHECK(pos_grad.at(row, c) == 0.0);
  double used = 0;
  for (int c = 0; c < cfg.d_model; ++c) used += std::abs(pos_grad.at(6, c));
  CHECK(used > 0.0);

  auto rep = finite_diff_gradcheck(loss_of, model.params(), 20, 1e-5, Rng(63));
  INFO("worst " << rep.worst_param << " analytic " << rep.worst_analytic << " central "
                << rep.worst_central);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("multitask heads are scenario-routed and gradient-isolated") {
  MultitaskConfig cfg;
  cfg.hidden = {8};
  cfg.features = FeatureKind::raw;
  cfg.nt = 2;
  cfg.nc = 2;
  cfg.scenarios = {"s1", "s2"};
  auto model = Multitask<double>::init(cfg, 71);
  CHECK(model.has_head("s1"));
  CHECK(model.has_head("s2"));
  CHECK(!model.has_head("s9"));
  CHECK(is_backbone_param("fc0.w"));
  CHECK(!is_backbone_param("head.s1.w"));

  Tensor<double> x = Tensor<double>::zeros({2, 8});
  Rng rng(72);
  for (auto& v : x.v) v = rng.uniform(-1, 1);

  Tape<double> tp;
  Tensor<double> y1 = tp.value(model.forward(tp, x, "s1", false));
  Tape<double> tp2;
  Tensor<double> y2 = tp2.value(model.forward(tp2, x, "s2", false));
  bool differs = false;
  for (std::size_t i = 0; i < y1.v.size(); ++i)
    if (y1.v[i] != y2.v[i]) differs = true;
  CHECK(differs);
  Tape<double> tp3;
  CHECK_THROWS_AS((void)model.forward(tp3, x, "s9", false), std::invalid_argument);

  // backward through s1's loss: s2's head stays untouched, backbone moves
  Tape<double> tp4;
  std::vector<Tape<double>::Var> leaves;
  auto pred = model.forward(tp4, x, "s1", true, &leaves);
  auto loss = mse_loss(tp4, pred, tp4.constant(Tensor<double>::zeros({2, 2})));
  tp4.backward(loss);
  model.params().zero_grads();
  accumulate_param_grads(tp4, leaves, model.params());
  for (double g : model.params().by_name("head.s2.w").grad.v) CHECK(g == 0.0);
  for (double g : model.params().by_name("head.s2.b").grad.v) CHECK(g == 0.0);
  double backbone = 0, head1 = 0;
  for (double g : model.params().by_name("fc0.w").grad.v) backbone += g * g;
  for (double g : model.params().by_name("head.s1.w").grad.v) head1 += g * g;
  CHECK(backbone > 0.0);
  CHECK(head1 > 0.0);

  MultitaskConfig dup = cfg;
  dup.scenarios = {"a", "a"};
  CHECK_THROWS_AS(dup.validate(), std::invalid_argument);
}
