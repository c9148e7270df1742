#include "csiloc/baselines.hpp"

#include <cmath>
#include <stdexcept>

namespace csiloc {

const char* to_string(FeatureKind k) {
  return k == FeatureKind::raw ? "raw" : "angle_delay";
}

FeatureKind feature_kind_from_string(const std::string& s) {
  if (s == "raw") return FeatureKind::raw;
  if (s == "angle_delay") return FeatureKind::angle_delay;
  throw std::invalid_argument("unknown feature kind '" + s + "' (raw | angle_delay)");
}

int feature_dim(FeatureKind k, int nt, int nc) {
  return k == FeatureKind::raw ? 2 * nt * nc : nt * nc;
}

std::vector<float> extract_features(const CSIMatrix& h, FeatureKind kind) {
  if (kind == FeatureKind::angle_delay) return angle_delay_transform(h);
  std::vector<float> out(2 * h.h.size());
  for (std::size_t i = 0; i < h.h.size(); ++i) {
    out[2 * i] = h.h[i].real();
    out[2 * i + 1] = h.h[i].imag();
  }
  return out;
}

template <typename T>
Tensor<T> feature_batch(const std::vector<const CSIMatrix*>& batch, FeatureKind kind,
                        double feature_scale) {
  if (batch.empty()) throw std::invalid_argument("feature_batch: empty batch");
  if (!(feature_scale > 0)) throw std::invalid_argument("feature_batch: scale must be > 0");
  const int dim = feature_dim(kind, batch[0]->nt, batch[0]->nc);
  Tensor<T> x = Tensor<T>::zeros({int(batch.size()), dim});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i]->nt != batch[0]->nt || batch[i]->nc != batch[0]->nc)
      throw std::invalid_argument("feature_batch: CSI dims disagree across the batch");
    const std::vector<float> f = extract_features(*batch[i], kind);
    for (int j = 0; j < dim; ++j) x.at(int(i), j) = T(double(f[j]) / feature_scale);
  }
  return x;
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

constexpr double kLnEps = 1e-5;

// [B x in] -> hidden relu stack -> [B x 2], reading weights through `P`.
template <typename T, typename Lookup>
typename Tape<T>::Var mlp_body(Tape<T>& tp, typename Tape<T>::Var x, int n_hidden,
                               const Lookup& P) {
  auto h = x;
  for (int i = 0; i < n_hidden; ++i) {
    const std::string fc = "fc" + std::to_string(i);
    h = tp.relu(tp.add_row_bias(tp.matmul(h, P(fc + ".w")), P(fc + ".b")));
  }
  return tp.add_row_bias(tp.matmul(h, P("out.w")), P("out.b"));
}

}  // namespace

// ---------------------------------------------------------------------------

void D2lConfig::validate() const {
  if (hidden.empty()) throw std::invalid_argument("d2l config: need >= 1 hidden layer");
  for (int w : hidden)
    if (w < 1) throw std::invalid_argument("d2l config: hidden widths must be >= 1");
  if (nt < 1 || nc < 1) throw std::invalid_argument("d2l config: radio dims must be >= 1");
}

template <typename T>
D2lModel<T>::D2lModel(D2lConfig cfg, ParamSet<T> params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
}

template <typename T>
D2lModel<T> D2lModel<T>::init(const D2lConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng root(seed);
  ParamSet<T> ps;
  int in = cfg.input_dim();
  for (std::size_t i = 0; i < cfg.hidden.size(); ++i) {
    add_linear(ps, root, "fc" + std::to_string(i), in, cfg.hidden[i]);
    in = cfg.hidden[i];
  }
  add_linear(ps, root, "out", in, 2);
  return D2lModel(cfg, std::move(ps));
}

template <typename T>
typename Tape<T>::Var D2lModel<T>::forward(Tape<T>& tape, const Tensor<T>& x, bool track,
                                           std::vector<typename Tape<T>::Var>* out_leaves) const {
  if (x.shape.size() != 2 || x.shape[1] != cfg_.input_dim() || x.shape[0] < 1)
    throw std::invalid_argument("d2l forward: features " + shape_str(x.shape) +
                                " must be [B x " + std::to_string(cfg_.input_dim()) + "]");
  std::vector<typename Tape<T>::Var> leaves;
  leaves.reserve(params_.size());
  for (int i = 0; i < params_.size(); ++i) leaves.push_back(tape.leaf(&params_.at(i).value, track));
  if (out_leaves) *out_leaves = leaves;
  auto P = [&](const std::string& name) { return leaves[params_.index_of(name)]; };
  return mlp_body(tape, tape.constant(x), int(cfg_.hidden.size()), P);
}

// ---------------------------------------------------------------------------

void IclConfig::validate() const {
  if (depth < 1) throw std::invalid_argument("icl config: depth must be >= 1");
  if (heads < 1 || d_model % heads != 0)
    throw std::invalid_argument("icl config: d_model " + std::to_string(d_model) +
                                " must be divisible by heads " + std::to_string(heads));
  if (nt < 1 || nc < 1) throw std::invalid_argument("icl config: radio dims must be >= 1");
  if (max_pairs < 1)
    throw std::invalid_argument("icl config: max_pairs must be >= 1 (sequence length 2p+1)");
}

BoolMask build_causal_mask(int len) {
  if (len < 1) throw std::invalid_argument("build_causal_mask: len must be >= 1");
  BoolMask m(len, len, 0);
  for (int r = 0; r < len; ++r)
    for (int c = 0; c <= r; ++c) m.set(r, c, true);
  return m;
}

template <typename T>
Icl<T>::Icl(IclConfig cfg, ParamSet<T> params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
}

template <typename T>
Icl<T> Icl<T>::init(const IclConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng root(seed);
  ParamSet<T> ps;
  add_linear(ps, root, "embed_h", cfg.csi_dim(), cfg.d_model);
  add_linear(ps, root, "embed_x", 2, cfg.d_model);
  {
    Rng r = root.derive("pos");
    Tensor<T> pos = Tensor<T>::zeros({cfg.max_seq_len(), cfg.d_model});
    const double limit = std::sqrt(6.0 / double(cfg.max_seq_len() + cfg.d_model));
    for (auto& x : pos.v) x = T(r.uniform(-limit, limit));
    ps.add("pos", std::move(pos));
  }
  for (int k = 0; k < cfg.depth; ++k) {
    const std::string lk = "l" + std::to_string(k);
    add_layer_norm(ps, lk + ".att.ln", cfg.d_model);
    add_linear(ps, root, lk + ".att.q", cfg.d_model, cfg.d_model);
    add_linear(ps, root, lk + ".att.k", cfg.d_model, cfg.d_model);
    add_linear(ps, root, lk + ".att.v", cfg.d_model, cfg.d_model);
    add_linear(ps, root, lk + ".att.o", cfg.d_model, cfg.d_model);
    add_layer_norm(ps, lk + ".ffn.ln", cfg.d_model);
    add_linear(ps, root, lk + ".ffn.fc1", cfg.d_model, cfg.d_ff());
    add_linear(ps, root, lk + ".ffn.fc2", cfg.d_ff(), cfg.d_model);
  }
  add_layer_norm(ps, "final_ln", cfg.d_model);
  add_linear(ps, root, "out", cfg.d_model, 2);
  return Icl(cfg, std::move(ps));
}

template <typename T>
typename Tape<T>::Var Icl<T>::sequence_body(
    Tape<T>& tape, const AnalogyInputs<T>& in, int query_index,
    const std::vector<typename Tape<T>::Var>& leaves) const {
  auto P = [&](const std::string& name) { return leaves[params_.index_of(name)]; };
  const int p = in.p();
  const int len = 2 * p + 1;
  const T eps = T(kLnEps);

  // positional rows gathered on-tape so the table trains: pair slots use rows
  // 0..2p-1, the query is pinned to the last row regardless of p
  std::vector<typename Tape<T>::Var> pos_rows;
  pos_rows.reserve(len);
  for (int s = 0; s < len; ++s) {
    const int row = (s == len - 1) ? cfg_.max_seq_len() - 1 : s;
    pos_rows.push_back(tape.slice_rows(P("pos"), row, 1));
  }
  auto pos_mat = tape.concat_rows(pos_rows);

  auto h_tok = tape.add_row_bias(
      tape.matmul(tape.concat_rows({tape.constant(in.embed_csi),
                                    tape.slice_rows(tape.constant(in.query_csi), query_index, 1)}),
                  P("embed_h.w")),
      P("embed_h.b"));
  auto x_tok = tape.add_row_bias(tape.matmul(tape.constant(in.embed_loc), P("embed_x.w")),
                                 P("embed_x.b"));
  // interleave [H1, x1, ..., Hp, xp, Hq]
  std::vector<typename Tape<T>::Var> slots;
  slots.reserve(len);
  for (int j = 0; j < p; ++j) {
    slots.push_back(tape.slice_rows(h_tok, j, 1));
    slots.push_back(tape.slice_rows(x_tok, j, 1));
  }
  slots.push_back(tape.slice_rows(h_tok, p, 1));
  auto seq = tape.add(tape.concat_rows(slots), pos_mat);

  const auto mask = std::make_shared<const BoolMask>(build_causal_mask(len));
  const int dh = cfg_.head_dim();
  const T inv_sqrt = T(1.0 / std::sqrt(double(dh)));
  for (int k = 0; k < cfg_.depth; ++k) {
    const std::string lk = "l" + std::to_string(k);
    auto ln = tape.layer_norm(seq, P(lk + ".att.ln.g"), P(lk + ".att.ln.b"), eps);
    auto Q = tape.add_row_bias(tape.matmul(ln, P(lk + ".att.q.w")), P(lk + ".att.q.b"));
    auto K = tape.add_row_bias(tape.matmul(ln, P(lk + ".att.k.w")), P(lk + ".att.k.b"));
    auto V = tape.add_row_bias(tape.matmul(ln, P(lk + ".att.v.w")), P(lk + ".att.v.b"));
    std::vector<typename Tape<T>::Var> heads;
    heads.reserve(cfg_.heads);
    for (int h = 0; h < cfg_.heads; ++h) {
      auto Qh = tape.slice_cols(Q, h * dh, dh);
      auto Kh = tape.slice_cols(K, h * dh, dh);
      auto Vh = tape.slice_cols(V, h * dh, dh);
      auto att = tape.softmax_rows(tape.scale(tape.matmul(Qh, tape.transpose(Kh)), inv_sqrt), mask);
      heads.push_back(tape.matmul(att, Vh));
    }
    auto att_out = tape.add_row_bias(tape.matmul(tape.concat_cols(heads), P(lk + ".att.o.w")),
                                     P(lk + ".att.o.b"));
    seq = tape.add(seq, att_out);
    auto fln = tape.layer_norm(seq, P(lk + ".ffn.ln.g"), P(lk + ".ffn.ln.b"), eps);
    auto ff = tape.add_row_bias(
        tape.matmul(tape.relu(tape.add_row_bias(tape.matmul(fln, P(lk + ".ffn.fc1.w")),
                                                P(lk + ".ffn.fc1.b"))),
                    P(lk + ".ffn.fc2.w")),
        P(lk + ".ffn.fc2.b"));
    seq = tape.add(seq, ff);
  }
  auto fin = tape.layer_norm(seq, P("final_ln.g"), P("final_ln.b"), eps);
  return tape.add_row_bias(tape.matmul(fin, P("out.w")), P("out.b"));
}

template <typename T>
typename Tape<T>::Var Icl<T>::forward_sequence(
    Tape<T>& tape, const AnalogyInputs<T>& in, int query_index, bool track,
    std::vector<typename Tape<T>::Var>* out_leaves) const {
  const int p = in.p(), q = in.q();
  if (p < 1 || q < 1)
    throw std::invalid_argument("icl forward: need p >= 1 and q >= 1, got p=" + std::to_string(p) +
                                " q=" + std::to_string(q));
  if (2 * p + 1 > cfg_.max_seq_len())
    throw std::invalid_argument("icl forward: sequence length " + std::to_string(2 * p + 1) +
                                " exceeds max " + std::to_string(cfg_.max_seq_len()));
  if (query_index < 0 || query_index >= q)
    throw std::invalid_argument("icl forward: query index out of range");
  if (in.embed_csi.shape[1] != cfg_.csi_dim() || in.query_csi.shape[1] != cfg_.csi_dim())
    throw std::invalid_argument("icl forward: CSI width does not match config width " +
                                std::to_string(cfg_.csi_dim()));
  if (in.embed_loc.shape != std::vector<int>{p, 2})
    throw std::invalid_argument("icl forward: embed_loc shape " + shape_str(in.embed_loc.shape) +
                                " must be [p x 2]");
  std::vector<typename Tape<T>::Var> leaves;
  leaves.reserve(params_.size());
  for (int i = 0; i < params_.size(); ++i) leaves.push_back(tape.leaf(&params_.at(i).value, track));
  if (out_leaves) *out_leaves = leaves;
  return sequence_body(tape, in, query_index, leaves);
}

template <typename T>
typename Tape<T>::Var Icl<T>::forward(Tape<T>& tape, const AnalogyInputs<T>& in, bool track,
                                      std::vector<typename Tape<T>::Var>* out_leaves) const {
  const int p = in.p(), q = in.q();
  if (p < 1 || q < 1)
    throw std::invalid_argument("icl forward: need p >= 1 and q >= 1, got p=" + std::to_string(p) +
                                " q=" + std::to_string(q));
  if (2 * p + 1 > cfg_.max_seq_len())
    throw std::invalid_argument("icl forward: sequence length " + std::to_string(2 * p + 1) +
                                " exceeds max " + std::to_string(cfg_.max_seq_len()));
  if (in.embed_csi.shape[1] != cfg_.csi_dim() || in.query_csi.shape[1] != cfg_.csi_dim())
    throw std::invalid_argument("icl forward: CSI width does not match config width " +
                                std::to_string(cfg_.csi_dim()));
  if (in.embed_loc.shape != std::vector<int>{p, 2})
    throw std::invalid_argument("icl forward: embed_loc shape " + shape_str(in.embed_loc.shape) +
                                " must be [p x 2]");
  std::vector<typename Tape<T>::Var> leaves;
  leaves.reserve(params_.size());
  for (int i = 0; i < params_.size(); ++i) leaves.push_back(tape.leaf(&params_.at(i).value, track));
  if (out_leaves) *out_leaves = leaves;
  std::vector<typename Tape<T>::Var> preds;
  preds.reserve(q);
  for (int i = 0; i < q; ++i) {
    auto full = sequence_body(tape, in, i, leaves);
    preds.push_back(tape.slice_rows(full, 2 * p, 1));
  }
  return q == 1 ? preds[0] : tape.concat_rows(preds);
}

// ---------------------------------------------------------------------------

void MultitaskConfig::validate() const {
  if (hidden.empty()) throw std::invalid_argument("multitask config: need >= 1 hidden layer");
  for (int w : hidden)
    if (w < 1) throw std::invalid_argument("multitask config: hidden widths must be >= 1");
  if (nt < 1 || nc < 1) throw std::invalid_argument("multitask config: radio dims must be >= 1");
  if (scenarios.empty()) throw std::invalid_argument("multitask config: need >= 1 scenario id");
  for (std::size_t i = 0; i < scenarios.size(); ++i)
    for (std::size_t j = i + 1; j < scenarios.size(); ++j)
      if (scenarios[i] == scenarios[j])
        throw std::invalid_argument("multitask config: duplicate scenario id '" + scenarios[i] +
                                    "'");
}

template <typename T>
Multitask<T>::Multitask(MultitaskConfig cfg, ParamSet<T> params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
}

template <typename T>
Multitask<T> Multitask<T>::init(const MultitaskConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng root(seed);
  ParamSet<T> ps;
  int in = cfg.input_dim();
  for (std::size_t i = 0; i < cfg.hidden.size(); ++i) {
    add_linear(ps, root, "fc" + std::to_string(i), in, cfg.hidden[i]);
    in = cfg.hidden[i];
  }
  for (const auto& id : cfg.scenarios) add_linear(ps, root, "head." + id, in, 2);
  return Multitask(cfg, std::move(ps));
}

template <typename T>
bool Multitask<T>::has_head(const std::string& scenario_id) const {
  return params_.index_of("head." + scenario_id + ".w") >= 0;
}

template <typename T>
typename Tape<T>::Var Multitask<T>::forward(
    Tape<T>& tape, const Tensor<T>& x, const std::string& scenario_id, bool track,
    std::vector<typename Tape<T>::Var>* out_leaves) const {
  if (!has_head(scenario_id))
    throw std::invalid_argument("multitask forward: no head for scenario '" + scenario_id + "'");
  if (x.shape.size() != 2 || x.shape[1] != cfg_.input_dim() || x.shape[0] < 1)
    throw std::invalid_argument("multitask forward: features " + shape_str(x.shape) +
                                " must be [B x " + std::to_string(cfg_.input_dim()) + "]");
  std::vector<typename Tape<T>::Var> leaves;
  leaves.reserve(params_.size());
  for (int i = 0; i < params_.size(); ++i) leaves.push_back(tape.leaf(&params_.at(i).value, track));
  if (out_leaves) *out_leaves = leaves;
  auto P = [&](const std::string& name) { return leaves[params_.index_of(name)]; };
  auto h = tape.constant(x);
  for (std::size_t i = 0; i < cfg_.hidden.size(); ++i) {
    const std::string fc = "fc" + std::to_string(i);
    h = tape.relu(tape.add_row_bias(tape.matmul(h, P(fc + ".w")), P(fc + ".b")));
  }
  const std::string head = "head." + scenario_id;
  return tape.add_row_bias(tape.matmul(h, P(head + ".w")), P(head + ".b"));
}

template Tensor<float> feature_batch<float>(const std::vector<const CSIMatrix*>&, FeatureKind,
                                            double);
template Tensor<double> feature_batch<double>(const std::vector<const CSIMatrix*>&, FeatureKind,
                                              double);
template class D2lModel<float>;
template class D2lModel<double>;
template class Icl<float>;
template class Icl<double>;
template class Multitask<float>;
template class Multitask<double>;

}  // namespace csiloc
