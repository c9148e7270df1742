#pragma once

#include <functional>
#include <string>
#include <vector>

#include "csiloc/mateformer.hpp"
#include "csiloc/params.hpp"
#include "csiloc/rng.hpp"

namespace csiloc {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  int worst_index = -1;
  double worst_analytic = 0.0;
  double worst_central = 0.0;
  int probes = 0;
};

// Central-difference check of analytic gradients, double precision only.
// `params` must arrive with .grad filled by a backward pass of the same loss
// that `loss_fn` evaluates. Probes `probes_per_group` random values in every
// parameter group; relative error uses max(1, |central|) in the denominator
// so tiny true gradients don't blow the ratio up.
inline GradCheckReport finite_diff_gradcheck(
    const std::function<double(const ParamSet<double>&)>& loss_fn,
    const ParamSet<double>& params, int probes_per_group, double h, Rng rng) {
  ParamSet<double> work = params.cast<double>();  // deep copy, grads reset
  GradCheckReport rep;
  for (int pi = 0; pi < work.size(); ++pi) {
    auto& p = work.at(pi);
    const auto& analytic = params.at(pi).grad;
    const int sz = int(p.value.size());
    if (sz == 0) continue;
    for (int probe = 0; probe < probes_per_group; ++probe) {
      const int idx = rng.uniform_int(0, sz - 1);
      const double saved = p.value.v[idx];
      p.value.v[idx] = saved + h;
      const double lp = loss_fn(work);
      p.value.v[idx] = saved - h;
      const double lm = loss_fn(work);
      p.value.v[idx] = saved;
      const double central = (lp - lm) / (2.0 * h);
      const double a = analytic.v[idx];
      const double rel = std::abs(a - central) / std::max(1.0, std::abs(central));
      ++rep.probes;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_param = p.name;
        rep.worst_index = idx;
        rep.worst_analytic = a;
        rep.worst_central = central;
      }
    }
  }
  return rep;
}

// Checks an analogy-family model (Mateformer or ICL) on one random task of
// 4 references and 2 queries. The model is taken by value: its grads are the
// scratch space for the analytic pass.
template <typename Model>
GradCheckReport analogy_gradcheck(Model model, int csi_dim, int probes, std::uint64_t seed) {
  Rng in_rng = Rng(seed).derive("inputs");
  AnalogyInputs<double> in;
  in.embed_csi = Tensor<double>::zeros({4, csi_dim});
  in.embed_loc = Tensor<double>::zeros({4, 2});
  in.query_csi = Tensor<double>::zeros({2, csi_dim});
  for (auto& v : in.embed_csi.v) v = in_rng.uniform(-1, 1);
  for (auto& v : in.embed_loc.v) v = in_rng.uniform(-0.2, 0.2);
  for (auto& v : in.query_csi.v) v = in_rng.uniform(-1, 1);
  in.x_init = compute_x_init(in.embed_loc);
  Tensor<double> targets = Tensor<double>::zeros({2, 2});
  for (auto& v : targets.v) v = in_rng.uniform(-0.3, 0.3);

  auto loss_of = [&](const ParamSet<double>& ps) {
    Model m(model.config(), ps.cast<double>());
    Tape<double> tape;
    auto l = mse_loss(tape, m.forward(tape, in, false), tape.constant(targets));
    return tape.value(l).v[0];
  };

  Tape<double> tape;
  std::vector<typename Tape<double>::Var> leaves;
  auto loss = mse_loss(tape, model.forward(tape, in, true, &leaves), tape.constant(targets));
  tape.backward(loss);
  model.params().zero_grads();
  accumulate_param_grads(tape, leaves, model.params());
  return finite_diff_gradcheck(loss_of, model.params(), probes, 1e-5, Rng(seed).derive("probes"));
}

// Checks a direct-regression model on a random batch of 8 inputs. The model
// is taken by value and stays alive across the backward pass, because tape
// leaves point straight into its parameter storage. `run(model, tape, x,
// track, leaves)` performs one forward pass.
template <typename Model, typename Run>
GradCheckReport direct_gradcheck(Model model, int input_dim, int probes, std::uint64_t seed,
                                 Run&& run) {
  Rng in_rng = Rng(seed).derive("inputs");
  Tensor<double> x = Tensor<double>::zeros({8, input_dim});
  for (auto& v : x.v) v = in_rng.uniform(-1, 1);
  Tensor<double> targets = Tensor<double>::zeros({8, 2});
  for (auto& v : targets.v) v = in_rng.uniform(-0.3, 0.3);

  auto loss_of = [&](const ParamSet<double>& ps) {
    Model m(model.config(), ps.cast<double>());
    Tape<double> tape;
    std::vector<typename Tape<double>::Var>* no_leaves = nullptr;
    auto l = mse_loss(tape, run(m, tape, x, false, no_leaves), tape.constant(targets));
    return tape.value(l).v[0];
  };

  Tape<double> tape;
  std::vector<typename Tape<double>::Var> leaves;
  auto loss = mse_loss(tape, run(model, tape, x, true, &leaves), tape.constant(targets));
  tape.backward(loss);
  model.params().zero_grads();
  accumulate_param_grads(tape, leaves, model.params());
  return finite_diff_gradcheck(loss_of, model.params(), probes, 1e-5, Rng(seed).derive("probes"));
}

}  // namespace csiloc
