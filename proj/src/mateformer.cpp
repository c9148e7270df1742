#include "csiloc/mateformer.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace csiloc {

void MateformerConfig::validate() const {
  if (depth < 1) throw std::invalid_argument("mateformer config: depth must be >= 1");
  if (heads < 1 || d_model % heads != 0)
    throw std::invalid_argument("mateformer config: d_model " + std::to_string(d_model) +
                                " must be divisible by heads " + std::to_string(heads));
  if (d_ff < 1 || nt < 1 || nc < 1)
    throw std::invalid_argument("mateformer config: d_ff and radio dims must be >= 1");
}

template <typename T>
std::array<T, 2> compute_x_init(const Tensor<T>& embed_loc) {
  if (embed_loc.shape.size() != 2 || embed_loc.shape[1] != 2 || embed_loc.shape[0] < 1)
    throw std::invalid_argument("compute_x_init: expected [p x 2] with p >= 1, got " +
                                shape_str(embed_loc.shape));
  const int p = embed_loc.shape[0];
  double sx = 0, sy = 0;
  for (int i = 0; i < p; ++i) {
    sx += double(embed_loc.at(i, 0));
    sy += double(embed_loc.at(i, 1));
  }
  return {T(sx / p), T(sy / p)};
}

BoolMask build_mask(int p, int q) {
  if (p < 1)
    throw std::invalid_argument(
        "build_mask: p must be >= 1 (p=0 would leave every attention row fully masked)");
  if (q < 0) throw std::invalid_argument("build_mask: q must be >= 0");
  const int len = p + q;
  BoolMask m(len, len, 0);
  for (int r = 0; r < len; ++r)
    for (int c = 0; c < p; ++c) m.set(r, c, true);
  return m;
}

template <typename T>
AnalogyInputs<T> make_analogy_inputs(const std::vector<const CSIMatrix*>& ref_csi,
                                     const std::vector<Vec2>& ref_loc,
                                     const std::vector<const CSIMatrix*>& query_csi,
                                     double csi_scale) {
  if (ref_csi.empty() || ref_csi.size() != ref_loc.size())
    throw std::invalid_argument("make_analogy_inputs: need matching, nonempty reference lists");
  if (query_csi.empty()) throw std::invalid_argument("make_analogy_inputs: need >= 1 query");
  if (!(csi_scale > 0)) throw std::invalid_argument("make_analogy_inputs: csi_scale must be > 0");
  const int nt = ref_csi[0]->nt, nc = ref_csi[0]->nc;
  const int dim = 2 * nt * nc;

  auto flatten_into = [&](const CSIMatrix& m, T* out) {
    if (m.nt != nt || m.nc != nc)
      throw std::invalid_argument("make_analogy_inputs: CSI dims disagree across the batch");
    for (std::size_t i = 0; i < m.h.size(); ++i) {
      out[2 * i] = T(double(m.h[i].real()) / csi_scale);
      out[2 * i + 1] = T(double(m.h[i].imag()) / csi_scale);
    }
  };

  AnalogyInputs<T> in;
  in.embed_csi = Tensor<T>::zeros({int(ref_csi.size()), dim});
  for (std::size_t i = 0; i < ref_csi.size(); ++i)
    flatten_into(*ref_csi[i], in.embed_csi.v.data() + i * dim);
  in.query_csi = Tensor<T>::zeros({int(query_csi.size()), dim});
  for (std::size_t i = 0; i < query_csi.size(); ++i)
    flatten_into(*query_csi[i], in.query_csi.v.data() + i * dim);
  in.embed_loc = Tensor<T>::zeros({int(ref_loc.size()), 2});
  for (std::size_t i = 0; i < ref_loc.size(); ++i) {
    in.embed_loc.at(int(i), 0) = T(ref_loc[i].x / kLocationScale);
    in.embed_loc.at(int(i), 1) = T(ref_loc[i].y / kLocationScale);
  }
  in.x_init = compute_x_init(in.embed_loc);
  return in;
}

namespace {

template <typename T>
void add_linear(ParamSet<T>& ps, const Rng& root, const std::string& name, int in, int out) {
  Rng r = root.derive(name);
  Tensor<T> w = Tensor<T>::zeros({in, out});
  const double limit = std::sqrt(6.0 / double(in + out));
  for (auto& x : w.v) x = T(r.uniform(-limit, limit));
  ps.add(name + ".w", std::move(w));
  ps.add(name + ".b", Tensor<T>::zeros({out}));
}

template <typename T>
void add_layer_norm(ParamSet<T>& ps, const std::string& name, int d) {
  ps.add(name + ".g", Tensor<T>::full({d}, T(1)));
  ps.add(name + ".b", Tensor<T>::zeros({d}));
}

template <typename T>
void add_attention(ParamSet<T>& ps, const Rng& root, const std::string& name, int d) {
  add_linear(ps, root, name + ".q", d, d);
  add_linear(ps, root, name + ".k", d, d);
  add_linear(ps, root, name + ".v", d, d);
  add_linear(ps, root, name + ".o", d, d);
}

template <typename T>
void add_ffn(ParamSet<T>& ps, const Rng& root, const std::string& name, int d, int d_ff) {
  add_layer_norm(ps, name + ".ln", d);
  add_linear(ps, root, name + ".fc1", d, d_ff);
  add_linear(ps, root, name + ".fc2", d_ff, d);
}

constexpr double kLnEps = 1e-5;

// Multi-head attention over already-normalized sources; queries/keys may come
// from a different sequence than the values.
template <typename T>
typename Tape<T>::Var attention(Tape<T>& tp, const MateformerConfig& cfg,
                                typename Tape<T>::Var q_in, typename Tape<T>::Var k_in,
                                typename Tape<T>::Var v_in, typename Tape<T>::Var wq,
                                typename Tape<T>::Var bq, typename Tape<T>::Var wk,
                                typename Tape<T>::Var bk, typename Tape<T>::Var wv,
                                typename Tape<T>::Var bv, typename Tape<T>::Var wo,
                                typename Tape<T>::Var bo,
                                const std::shared_ptr<const BoolMask>& mask) {
  auto Q = tp.add_row_bias(tp.matmul(q_in, wq), bq);
  auto K = tp.add_row_bias(tp.matmul(k_in, wk), bk);
  auto V = tp.add_row_bias(tp.matmul(v_in, wv), bv);
  const int dh = cfg.head_dim();
  const T inv_sqrt = T(1.0 / std::sqrt(double(dh)));
  std::vector<typename Tape<T>::Var> heads;
  heads.reserve(cfg.heads);
  for (int h = 0; h < cfg.heads; ++h) {
    auto Qh = tp.slice_cols(Q, h * dh, dh);
    auto Kh = tp.slice_cols(K, h * dh, dh);
    auto Vh = tp.slice_cols(V, h * dh, dh);
    auto att = tp.softmax_rows(tp.scale(tp.matmul(Qh, tp.transpose(Kh)), inv_sqrt), mask);
    heads.push_back(tp.matmul(att, Vh));
  }
  return tp.add_row_bias(tp.matmul(tp.concat_cols(heads), wo), bo);
}

}  // namespace

template <typename T>
Mateformer<T>::Mateformer(MateformerConfig cfg, ParamSet<T> params)
    : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
}

template <typename T>
Mateformer<T> Mateformer<T>::init(const MateformerConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng root(seed);
  ParamSet<T> ps;
  add_linear(ps, root, "embed_h", cfg.csi_dim(), cfg.d_model);
  add_linear(ps, root, "embed_x", 2, cfg.d_model);
  ps.add("type_known", Tensor<T>::zeros({cfg.d_model}));
  ps.add("type_init", Tensor<T>::zeros({cfg.d_model}));
  for (int k = 0; k < cfg.depth; ++k) {
    const std::string hk = "h" + std::to_string(k);
    add_layer_norm(ps, hk + ".att.ln", cfg.d_model);
    add_attention(ps, root, hk + ".att", cfg.d_model);
    add_ffn(ps, root, hk + ".ffn", cfg.d_model, cfg.d_ff);
    const std::string xk = "x" + std::to_string(k);
    add_layer_norm(ps, xk + ".att.ln_h", cfg.d_model);
    add_layer_norm(ps, xk + ".att.ln_x", cfg.d_model);
    add_attention(ps, root, xk + ".att", cfg.d_model);
    add_ffn(ps, root, xk + ".ffn", cfg.d_model, cfg.d_ff);
  }
  add_layer_norm(ps, "final_ln", cfg.d_model);
  add_linear(ps, root, "out", cfg.d_model, 2);
  return Mateformer(cfg, std::move(ps));
}

template <typename T>
typename Tape<T>::Var Mateformer<T>::forward(Tape<T>& tape, const AnalogyInputs<T>& in, bool track,
                                             std::vector<typename Tape<T>::Var>* out_leaves) const {
  const int p = in.p(), q = in.q();
  if (p < 1 || q < 1)
    throw std::invalid_argument("mateformer forward: need p >= 1 and q >= 1, got p=" +
                                std::to_string(p) + " q=" + std::to_string(q));
  if (in.embed_csi.shape[1] != cfg_.csi_dim() || in.query_csi.shape[1] != cfg_.csi_dim())
    throw std::invalid_argument("mateformer forward: CSI width " +
                                shape_str(in.embed_csi.shape) + " / " +
                                shape_str(in.query_csi.shape) + " does not match config width " +
                                std::to_string(cfg_.csi_dim()));
  if (in.embed_loc.shape != std::vector<int>{p, 2})
    throw std::invalid_argument("mateformer forward: embed_loc shape " +
                                shape_str(in.embed_loc.shape) + " must be [p x 2]");

  std::vector<typename Tape<T>::Var> leaves;
  leaves.reserve(params_.size());
  for (int i = 0; i < params_.size(); ++i) leaves.push_back(tape.leaf(&params_.at(i).value, track));
  if (out_leaves) *out_leaves = leaves;
  auto P = [&](const std::string& name) {
    const int i = params_.index_of(name);
    if (i < 0) throw std::logic_error("mateformer forward: missing parameter '" + name + "'");
    return leaves[i];
  };
  const auto mask = std::make_shared<const BoolMask>(build_mask(p, q));
  const T eps = T(kLnEps);

  auto csi_all = tape.concat_rows({tape.constant(in.embed_csi), tape.constant(in.query_csi)});
  auto H = tape.add_row_bias(tape.matmul(csi_all, P("embed_h.w")), P("embed_h.b"));

  auto x_known = tape.add_row_bias(tape.matmul(tape.constant(in.embed_loc), P("embed_x.w")),
                                   P("embed_x.b"));
  x_known = tape.add(x_known, tape.repeat_row(P("type_known"), p));
  Tensor<T> xq = Tensor<T>::zeros({q, 2});
  for (int i = 0; i < q; ++i) {
    xq.at(i, 0) = in.x_init[0];
    xq.at(i, 1) = in.x_init[1];
  }
  auto x_query = tape.add_row_bias(tape.matmul(tape.constant(std::move(xq)), P("embed_x.w")),
                                   P("embed_x.b"));
  x_query = tape.add(x_query, tape.repeat_row(P("type_init"), q));
  auto X = tape.concat_rows({x_known, x_query});

  for (int k = 0; k < cfg_.depth; ++k) {
    const std::string hk = "h" + std::to_string(k);
    const std::string xk = "x" + std::to_string(k);

    // location stack, layer k+1: queries/keys from this depth's H sequence,
    // values from the location sequence
    auto lnh = tape.layer_norm(H, P(xk + ".att.ln_h.g"), P(xk + ".att.ln_h.b"), eps);
    auto lnx = tape.layer_norm(X, P(xk + ".att.ln_x.g"), P(xk + ".att.ln_x.b"), eps);
    auto xat = attention(tape, cfg_, lnh, lnh, lnx, P(xk + ".att.q.w"), P(xk + ".att.q.b"),
                         P(xk + ".att.k.w"), P(xk + ".att.k.b"), P(xk + ".att.v.w"),
                         P(xk + ".att.v.b"), P(xk + ".att.o.w"), P(xk + ".att.o.b"), mask);
    auto X1 = tape.add(X, xat);
    auto xln = tape.layer_norm(X1, P(xk + ".ffn.ln.g"), P(xk + ".ffn.ln.b"), eps);
    auto xff = tape.add_row_bias(
        tape.matmul(tape.relu(tape.add_row_bias(tape.matmul(xln, P(xk + ".ffn.fc1.w")),
                                                P(xk + ".ffn.fc1.b"))),
                    P(xk + ".ffn.fc2.w")),
        P(xk + ".ffn.fc2.b"));
    auto Xn = tape.add(X1, xff);

    // channel stack advances alongside; its final layer's output would feed
    // only a nonexistent (depth+1)-th location layer, so skip computing it
    if (k + 1 < cfg_.depth) {
      auto lns = tape.layer_norm(H, P(hk + ".att.ln.g"), P(hk + ".att.ln.b"), eps);
      auto hat = attention(tape, cfg_, lns, lns, lns, P(hk + ".att.q.w"), P(hk + ".att.q.b"),
                           P(hk + ".att.k.w"), P(hk + ".att.k.b"), P(hk + ".att.v.w"),
                           P(hk + ".att.v.b"), P(hk + ".att.o.w"), P(hk + ".att.o.b"), mask);
      auto H1 = tape.add(H, hat);
      auto hln = tape.layer_norm(H1, P(hk + ".ffn.ln.g"), P(hk + ".ffn.ln.b"), eps);
      auto hff = tape.add_row_bias(
          tape.matmul(tape.relu(tape.add_row_bias(tape.matmul(hln, P(hk + ".ffn.fc1.w")),
                                                  P(hk + ".ffn.fc1.b"))),
                      P(hk + ".ffn.fc2.w")),
          P(hk + ".ffn.fc2.b"));
      H = tape.add(H1, hff);
    }
    X = Xn;
  }

  auto final_ln = tape.layer_norm(X, P("final_ln.g"), P("final_ln.b"), eps);
  auto out = tape.add_row_bias(tape.matmul(final_ln, P("out.w")), P("out.b"));
  return tape.slice_rows(out, p, q);
}

template <typename T>
void accumulate_param_grads(const Tape<T>& tape, const std::vector<typename Tape<T>::Var>& leaves,
                            ParamSet<T>& params) {
  if (int(leaves.size()) != params.size())
    throw std::invalid_argument("accumulate_param_grads: leaf count " +
                                std::to_string(leaves.size()) + " != parameter count " +
                                std::to_string(params.size()));
  for (int i = 0; i < params.size(); ++i) {
    const Tensor<T>& g = tape.grad(leaves[i]);
    Tensor<T>& dst = params.at(i).grad;
    for (std::size_t j = 0; j < dst.v.size(); ++j) dst.v[j] += g.v[j];
  }
}

template std::array<float, 2> compute_x_init<float>(const Tensor<float>&);
template std::array<double, 2> compute_x_init<double>(const Tensor<double>&);
template AnalogyInputs<float> make_analogy_inputs<float>(const std::vector<const CSIMatrix*>&,
                                                         const std::vector<Vec2>&,
                                                         const std::vector<const CSIMatrix*>&,
                                                         double);
template AnalogyInputs<double> make_analogy_inputs<double>(const std::vector<const CSIMatrix*>&,
                                                           const std::vector<Vec2>&,
                                                           const std::vector<const CSIMatrix*>&,
                                                           double);
template class Mateformer<float>;
template class Mateformer<double>;
template void accumulate_param_grads<float>(const Tape<float>&,
                                            const std::vector<Tape<float>::Var>&,
                                            ParamSet<float>&);
template void accumulate_param_grads<double>(const Tape<double>&,
                                             const std::vector<Tape<double>::Var>&,
                                             ParamSet<double>&);

}  // namespace csiloc
