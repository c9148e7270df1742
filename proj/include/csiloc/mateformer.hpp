#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <vector>

#include "csiloc/channel.hpp"
#include "csiloc/params.hpp"
#include "csiloc/rng.hpp"
#include "csiloc/tape.hpp"

namespace csiloc {

// Fixed location input scale (meters / 100 keeps desk-scale coordinates well
// inside [-1, 1]); CSI is scaled per reference dataset at marshaling time.
inline constexpr double kLocationScale = 100.0;

struct MateformerConfig {
  int depth = 4;
  int d_model = 64;
  int d_ff = 64;
  int heads = 4;
  int nt = 8;
  int nc = 8;

  int csi_dim() const { return 2 * nt * nc; }
  int head_dim() const { return d_model / heads; }
  void validate() const;
};

// One analogy task instance, already flattened and scaled: p reference pairs
// and q query channels. The same structure feeds the ICL baseline (which
// ignores x_init).
template <typename T>
struct AnalogyInputs {
  Tensor<T> embed_csi;   // [p x 2*Nt*Nc]
  Tensor<T> embed_loc;   // [p x 2]
  Tensor<T> query_csi;   // [q x 2*Nt*Nc]
  std::array<T, 2> x_init{T(0), T(0)};

  int p() const { return embed_csi.shape.empty() ? 0 : embed_csi.shape[0]; }
  int q() const { return query_csi.shape.empty() ? 0 : query_csi.shape[0]; }
};

// Arithmetic mean of the rows of a [p x 2] location tensor.
template <typename T>
std::array<T, 2> compute_x_init(const Tensor<T>& embed_loc);

// Key-side mask over the length-(p+q) token sequence: every row may attend
// only to the p embedded slots. Queries never serve as keys, so predictions
// cannot lean on other queries.
BoolMask build_mask(int p, int q);

// Flattens CSI matrices (interleaved re/im, antenna-major) and scales
// everything; x_init is the mean of the scaled reference locations.
template <typename T>
AnalogyInputs<T> make_analogy_inputs(const std::vector<const CSIMatrix*>& ref_csi,
                                     const std::vector<Vec2>& ref_loc,
                                     const std::vector<const CSIMatrix*>& query_csi,
                                     double csi_scale);

// Twin pre-norm transformer stacks over a shared token axis: the H stack
// self-attends over channel tokens; each x-stack layer takes queries and keys
// from the H stack's previous output and values from the location sequence,
// so attention computed on channels steers synthesis of locations. No
// positional encodings: the reference set is a set.
template <typename T>
class Mateformer {
 public:
  Mateformer(MateformerConfig cfg, ParamSet<T> params);
  static Mateformer init(const MateformerConfig& cfg, std::uint64_t seed);

  const MateformerConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  template <typename U>
  Mateformer<U> cast() const {
    return Mateformer<U>(cfg_, params_.template cast<U>());
  }

  // Returns the [q x 2] scaled predictions. With track=true parameter leaves
  // are tracked and reported through out_leaves (index-aligned with params).
  typename Tape<T>::Var forward(Tape<T>& tape, const AnalogyInputs<T>& in, bool track,
                                std::vector<typename Tape<T>::Var>* out_leaves = nullptr) const;

 private:
  MateformerConfig cfg_;
  ParamSet<T> params_;
};

// Adds every leaf gradient into params.grad (params and leaves index-aligned).
template <typename T>
void accumulate_param_grads(const Tape<T>& tape, const std::vector<typename Tape<T>::Var>& leaves,
                            ParamSet<T>& params);

extern template class Mateformer<float>;
extern template class Mateformer<double>;

}  // namespace csiloc
