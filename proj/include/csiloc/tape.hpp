#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "csiloc/tensor.hpp"

namespace csiloc {

// Reverse-mode autodiff over a linear tape of dense-tensor ops.
//
// Usage: push leaves (tracked parameters / untracked inputs), compose ops,
// call backward() on a scalar node. Node records are appended in execution
// order and replayed strictly in reverse; gradients of tracked nodes
// accumulate additively, so fan-out needs no special casing. reset() clears
// the tape for the next step while keeping vector capacity.
//
// All forward reductions (matmul dot products, softmax sums, layer-norm
// moments) accumulate in double even when T = float: predictions must be
// stable to ~1e-4 m under permutations of the embedded set, and float
// accumulators are too sloppy for that once sequences get long.
template <typename T>
class Tape {
 public:
  struct Var {
    std::int32_t id = -1;
    bool valid() const { return id >= 0; }
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf referencing caller-owned storage (no copy). The storage must outlive
  // every use of this tape. tracked=true allocates a gradient slot.
  Var leaf(const Tensor<T>* external, bool tracked);
  // Leaf owning its values; never tracked (plain input data).
  Var constant(Tensor<T> owned);

  const Tensor<T>& value(Var v) const;
  const Tensor<T>& grad(Var v) const;  // valid after backward() for tracked nodes
  bool tracked(Var v) const;
  std::size_t node_count() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = seed and replays the tape in reverse. loss must be
  // a scalar (single value) node on this tape.
  void backward(Var loss, T seed = T(1));
  void reset();

  // ---- ops ----
  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);  // elementwise
  Var add_scalar(Var a, T c);
  Var scale(Var a, T c);
  Var relu(Var a);
  // Row-wise softmax; mask (if given) must match the value's [rows x cols].
  // Masked entries are skipped entirely (never exp'd) and come out exactly 0;
  // a fully-masked row is an error naming the row.
  Var softmax_rows(Var a, std::shared_ptr<const BoolMask> mask = nullptr);
  // Normalizes over the last dimension (population variance, eps inside the
  // sqrt), then scales/shifts by gain/bias vectors of that dimension.
  Var layer_norm(Var a, Var gain, Var bias, T eps);
  Var add_row_bias(Var x, Var bias);   // x: [m x n], bias: [n]
  Var repeat_row(Var row, int rows);   // row: [n] or [1 x n] -> [rows x n]
  Var concat_rows(const std::vector<Var>& parts);
  Var concat_cols(const std::vector<Var>& parts);
  Var slice_rows(Var x, int first, int count);
  Var slice_cols(Var x, int first, int count);
  Var transpose(Var x);
  Var mean_all(Var x);  // -> scalar [1]

 private:
  struct Node {
    const Tensor<T>* ext = nullptr;  // external leaf storage, or
    Tensor<T> own;                   // owned values (constants and op outputs)
    Tensor<T> grad;                  // allocated iff tracked
    bool tracked = false;
    std::function<void(Tape&)> back;  // empty for leaves/constants
  };

  const Tensor<T>& node_value(int id) const {
    const Node& n = nodes_[id];
    return n.ext ? *n.ext : n.own;
  }
  Tensor<T>& node_grad(int id) { return nodes_[id].grad; }
  const Node& node(Var v) const;
  Var push(Tensor<T> values, bool tracked, std::function<void(Tape&)> back);
  void check_same_shape(const char* op, Var a, Var b) const;

  std::vector<Node> nodes_;
};

// Mean squared error between prediction and target (both [m x n] on-tape),
// averaged over every element.
template <typename T>
typename Tape<T>::Var mse_loss(Tape<T>& tape, typename Tape<T>::Var pred,
                               typename Tape<T>::Var target);

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace csiloc
