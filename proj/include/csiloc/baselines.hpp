#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "csiloc/channel.hpp"
#include "csiloc/mateformer.hpp"
#include "csiloc/params.hpp"
#include "csiloc/rng.hpp"
#include "csiloc/tape.hpp"

namespace csiloc {

// Input representation for the direct regressors: interleaved re/im of H, or
// magnitudes of its unitary 2D DFT (sparse in angle and delay).
enum class FeatureKind { raw, angle_delay };

const char* to_string(FeatureKind k);
FeatureKind feature_kind_from_string(const std::string& s);
int feature_dim(FeatureKind k, int nt, int nc);

// Unscaled feature vector of one CSI matrix in the chosen representation.
std::vector<float> extract_features(const CSIMatrix& h, FeatureKind kind);

// [B x dim] feature matrix, every entry divided by feature_scale.
template <typename T>
Tensor<T> feature_batch(const std::vector<const CSIMatrix*>& batch, FeatureKind kind,
                        double feature_scale);

// ---------------------------------------------------------------------------
// Direct data-to-label regressor: plain MLP from one channel snapshot to one
// scaled location. Carries the whole scenario mapping in its weights.

struct D2lConfig {
  std::vector<int> hidden{256, 128};
  FeatureKind features = FeatureKind::raw;
  int nt = 8;
  int nc = 8;

  int input_dim() const { return feature_dim(features, nt, nc); }
  void validate() const;
};

template <typename T>
class D2lModel {
 public:
  D2lModel(D2lConfig cfg, ParamSet<T> params);
  static D2lModel init(const D2lConfig& cfg, std::uint64_t seed);

  const D2lConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  template <typename U>
  D2lModel<U> cast() const {
    return D2lModel<U>(cfg_, params_.template cast<U>());
  }

  // x: [B x input_dim] scaled features -> [B x 2] scaled locations.
  typename Tape<T>::Var forward(Tape<T>& tape, const Tensor<T>& x, bool track,
                                std::vector<typename Tape<T>::Var>* out_leaves = nullptr) const;

 private:
  D2lConfig cfg_;
  ParamSet<T> params_;
};

// ---------------------------------------------------------------------------
// Decoder-only in-context baseline: reference pairs interleaved as
// [H1, x1, ..., Hp, xp, Hq], learned positional embeddings, causal masking,
// prediction read from the final slot. The query always takes the LAST row of
// the positional table, whatever p is.

struct IclConfig {
  int depth = 4;
  int d_model = 64;
  int heads = 4;
  int nt = 8;
  int nc = 8;
  int max_pairs = 32;

  int d_ff() const { return 2 * d_model; }  // doubled: no twin stack to carry capacity
  int max_seq_len() const { return 2 * max_pairs + 1; }
  int csi_dim() const { return 2 * nt * nc; }
  int head_dim() const { return d_model / heads; }
  void validate() const;
};

// Lower-triangular key mask: position i may attend to j <= i.
BoolMask build_causal_mask(int len);

template <typename T>
class Icl {
 public:
  Icl(IclConfig cfg, ParamSet<T> params);
  static Icl init(const IclConfig& cfg, std::uint64_t seed);

  const IclConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  template <typename U>
  Icl<U> cast() const {
    return Icl<U>(cfg_, params_.template cast<U>());
  }

  // One independent sequence per query; returns [q x 2] scaled locations.
  // in.x_init is ignored (the query's location is what the model must emit).
  typename Tape<T>::Var forward(Tape<T>& tape, const AnalogyInputs<T>& in, bool track,
                                std::vector<typename Tape<T>::Var>* out_leaves = nullptr) const;

  // Projected outputs of every slot of query_index's sequence, [2p+1 x 2].
  typename Tape<T>::Var forward_sequence(
      Tape<T>& tape, const AnalogyInputs<T>& in, int query_index, bool track,
      std::vector<typename Tape<T>::Var>* out_leaves = nullptr) const;

 private:
  typename Tape<T>::Var sequence_body(Tape<T>& tape, const AnalogyInputs<T>& in, int query_index,
                                      const std::vector<typename Tape<T>::Var>& leaves) const;

  IclConfig cfg_;
  ParamSet<T> params_;
};

// ---------------------------------------------------------------------------
// Multi-scenario regressor: one shared MLP backbone plus a linear head per
// scenario id. Parameter names: backbone "fc{i}.*", heads "head.<id>.*".

struct MultitaskConfig {
  std::vector<int> hidden{256, 128};
  FeatureKind features = FeatureKind::raw;
  int nt = 8;
  int nc = 8;
  std::vector<std::string> scenarios;

  int input_dim() const { return feature_dim(features, nt, nc); }
  void validate() const;
};

inline bool is_backbone_param(const std::string& name) { return name.rfind("head.", 0) != 0; }

template <typename T>
class Multitask {
 public:
  Multitask(MultitaskConfig cfg, ParamSet<T> params);
  static Multitask init(const MultitaskConfig& cfg, std::uint64_t seed);

  const MultitaskConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  bool has_head(const std::string& scenario_id) const;

  template <typename U>
  Multitask<U> cast() const {
    return Multitask<U>(cfg_, params_.template cast<U>());
  }

  // Routes through the named scenario's head; unknown id is an error. Leaves
  // cover every parameter (untouched heads keep zero gradients).
  typename Tape<T>::Var forward(Tape<T>& tape, const Tensor<T>& x, const std::string& scenario_id,
                                bool track,
                                std::vector<typename Tape<T>::Var>* out_leaves = nullptr) const;

 private:
  MultitaskConfig cfg_;
  ParamSet<T> params_;
};

extern template class D2lModel<float>;
extern template class D2lModel<double>;
extern template class Icl<float>;
extern template class Icl<double>;
extern template class Multitask<float>;
extern template class Multitask<double>;

}  // namespace csiloc
