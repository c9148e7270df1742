#include "csiloc/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace csiloc {
namespace {

// Dot product of two contiguous arrays with double accumulation. Four fixed
// partial sums: deterministic order, and the compiler can keep them in
// vector registers without needing -ffast-math.
template <typename T>
double dot_acc(const T* x, const T* y, int n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += double(x[i + 0]) * double(y[i + 0]);
    s1 += double(x[i + 1]) * double(y[i + 1]);
    s2 += double(x[i + 2]) * double(y[i + 2]);
    s3 += double(x[i + 3]) * double(y[i + 3]);
  }
  for (; i < n; ++i) s0 += double(x[i]) * double(y[i]);
  return (s0 + s1) + (s2 + s3);
}

// C[m x n] = A[m x k] * B[k x n], row-major, double accumulators.
template <typename T>
void gemm(const T* A, const T* B, T* C, int m, int k, int n) {
  std::vector<double> acc(n);
  for (int i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const T* arow = A + std::size_t(i) * k;
    for (int t = 0; t < k; ++t) {
      const double av = double(arow[t]);
      const T* brow = B + std::size_t(t) * n;
      for (int j = 0; j < n; ++j) acc[j] += av * double(brow[j]);
    }
    T* crow = C + std::size_t(i) * n;
    for (int j = 0; j < n; ++j) crow[j] = T(acc[j]);
  }
}

}  // namespace

template <typename T>
const typename Tape<T>::Node& Tape<T>::node(Var v) const {
  if (!v.valid() || v.id >= std::int32_t(nodes_.size()))
    throw std::logic_error("tape: variable id " + std::to_string(v.id) + " is not on this tape");
  return nodes_[v.id];
}

template <typename T>
typename Tape<T>::Var Tape<T>::push(Tensor<T> values, bool tracked, std::function<void(Tape&)> back) {
  Node n;
  n.own = std::move(values);
  n.tracked = tracked;
  if (tracked) n.grad = Tensor<T>::zeros(n.own.shape);
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{std::int32_t(nodes_.size() - 1)};
}

template <typename T>
typename Tape<T>::Var Tape<T>::leaf(const Tensor<T>* external, bool tracked) {
  if (!external) throw std::invalid_argument("tape: leaf storage is null");
  Node n;
  n.ext = external;
  n.tracked = tracked;
  if (tracked) n.grad = Tensor<T>::zeros(external->shape);
  nodes_.push_back(std::move(n));
  return Var{std::int32_t(nodes_.size() - 1)};
}

template <typename T>
typename Tape<T>::Var Tape<T>::constant(Tensor<T> owned) {
  return push(std::move(owned), false, nullptr);
}

template <typename T>
const Tensor<T>& Tape<T>::value(Var v) const {
  node(v);
  return node_value(v.id);
}

template <typename T>
const Tensor<T>& Tape<T>::grad(Var v) const {
  const Node& n = node(v);
  if (!n.tracked) throw std::logic_error("tape: gradient requested for untracked node");
  return n.grad;
}

template <typename T>
bool Tape<T>::tracked(Var v) const {
  return node(v).tracked;
}

template <typename T>
void Tape<T>::backward(Var loss, T seed) {
  const Node& ln = node(loss);
  if (node_value(loss.id).size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(node_value(loss.id).shape));
  if (!ln.tracked)
    throw std::invalid_argument("backward: loss does not depend on any tracked parameter");
  nodes_[loss.id].grad.v[0] += seed;
  for (std::int32_t i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.tracked && n.back) n.back(*this);
  }
}

template <typename T>
void Tape<T>::reset() {
  nodes_.clear();
}

template <typename T>
void Tape<T>::check_same_shape(const char* op, Var a, Var b) const {
  const Tensor<T>& ta = value(a);
  const Tensor<T>& tb = value(b);
  if (!ta.same_shape(tb))
    throw std::invalid_argument(std::string(op) + ": shape mismatch: " + shape_str(ta.shape) +
                                " vs " + shape_str(tb.shape));
}

template <typename T>
typename Tape<T>::Var Tape<T>::matmul(Var a, Var b) {
  const Tensor<T>& A = value(a);
  const Tensor<T>& B = value(b);
  if (A.shape.size() != 2 || B.shape.size() != 2)
    throw std::invalid_argument("matmul: operands must be 2-D: " + shape_str(A.shape) + " vs " +
                                shape_str(B.shape));
  const int m = A.shape[0], k = A.shape[1], n = B.shape[1];
  if (B.shape[0] != k)
    throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(A.shape) +
                                " vs " + shape_str(B.shape));
  Tensor<T> C = Tensor<T>::zeros({m, n});
  gemm(A.v.data(), B.v.data(), C.v.data(), m, k, n);
  if (!tracked(a) && !tracked(b)) return push(std::move(C), false, nullptr);
  const std::int32_t aid = a.id, bid = b.id, oid = std::int32_t(nodes_.size());
  return push(std::move(C), true, [aid, bid, oid, m, k, n](Tape& tp) {
    const Tensor<T>& G = tp.nodes_[oid].grad;
    const Tensor<T>& A2 = tp.node_value(aid);
    const Tensor<T>& B2 = tp.node_value(bid);
    if (tp.nodes_[aid].tracked) {
      // dA = G * B^T: dA[i,t] is a dot of contiguous rows G[i,:] and B[t,:]
      Tensor<T>& dA = tp.node_grad(aid);
      for (int i = 0; i < m; ++i) {
        const T* grow = G.v.data() + std::size_t(i) * n;
        T* darow = dA.v.data() + std::size_t(i) * k;
        for (int t = 0; t < k; ++t)
          darow[t] += T(dot_acc(grow, B2.v.data() + std::size_t(t) * n, n));
      }
    }
    if (tp.nodes_[bid].tracked) {
      // dB = A^T * G: rank-1 accumulation keeps rows of G/dB contiguous
      Tensor<T>& dB = tp.node_grad(bid);
      for (int i = 0; i < m; ++i) {
        const T* arow = A2.v.data() + std::size_t(i) * k;
        const T* grow = G.v.data() + std::size_t(i) * n;
        for (int t = 0; t < k; ++t) {
          const T av = arow[t];
          T* dbrow = dB.v.data() + std::size_t(t) * n;
          for (int j = 0; j < n; ++j) dbrow[j] += av * grow[j];
        }
      }
    }
  });
}

template <typename T>
typename Tape<T>::Var Tape<T>::add(Var a, Var b) {
  check_same_shape("add", a, b);
  const Tensor<T>& A = value(a);
  const Tensor<T>& B = value(b);
  Tensor<T> out = A;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += B.v[i];
  if (!tracked(a) && !tracked(b)) return push(std::move(out), false, nullptr);
  const std::int32_t aid = a.id, bid = b.id, oid = std::int32_t(nodes_.size());
  return push(std::move(out), true, [aid, bid, oid](Tape& tp) {
    const Tensor<T>& G = tp.nodes_[oid].grad;
    if (tp.nodes_[aid].tracked) {
      Tensor<T>& dA = tp.node_grad(aid);
      for (std::size_t i = 0; i < G.v.size(); ++i) dA.v[i] += G.v[i];
    }
    if (tp.nodes_[bid].tracked) {
      Tensor<T>& dB = tp.node_grad(bid);
      for (std::size_t i = 0; i < G.v.size(); ++i) dB.v[i] += G.v[i];
    }
  });
}

template <typename T>
typename Tape<T>::Var Tape<T>::sub(Var a, Var b) {
  check_same_shape("sub", a, b);
  const Tensor<T>& A = value(a);
  const Tensor<T>& B = value(b);
  Tensor<T> out = A;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] -= B.v[i];
  if (!tracked(a) && !tracked(b)) return push(std::move(out), false, nullptr);
  const std::int32_t aid = a.id, bid = b.id, oid = std::int32_t(nodes_.size());
  return push(std::move(out), true, [aid, bid, oid](Tape& tp) {
    const Tensor<T>& G = tp.nodes_[oid].grad;
    if (tp.nodes_[aid].tracked) {
      Tensor<T>& dA = tp.node_grad(aid);
      for (std::size_t i = 0; i < G.v.size(); ++i) dA.v[i] += G.v[i];
    }
    if (tp.nodes_[bid].tracked) {
      Tensor<T>& dB = tp.node_grad(bid);
      for (std::size_t i = 0; i < G.v.size(); ++i) dB.v[i] -= G.v[i];
    }
  });
}

template <typename T>
typename Tape<T>::Var Tape<T>::mul(Var a, Var b) {
  check_same_shape("mul", a, b);
  const Tensor<T>& A = value(a);
  const Tensor<T>& B = value(b);
  Tensor<T> out = A;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= B.v[i];
  if (!tracked(a) && !tracked(b)) return push(std::move(out), false, nullptr);
  const std::int32_t aid = a.id, bid = b.id, oid = std::int32_t(nodes_.size());
  return push(std::move(out), true, [aid, bid, oid](Tape& tp) {
    const Tensor<T>& G = tp.nodes_[oid].grad;
    const Tensor<T>& A2 = tp.node_value(aid);
    const Tensor<T>& B2 = tp.node_value(bid);
    if (tp.nodes_[aid].tracked) {
      Tensor<T>& dA = tp.node_grad(aid);
      for (std::size_t i = 0; i < G.v.size(); ++i) dA.v[i] += G.v[i] * B2.v[i];
    }
    if (tp.nodes_[bid].tracked) {
      Tensor<T>& dB = tp.node_grad(bid);
      for (std::size_t i = 0; i < G.v.size(); ++i) dB.v[i] += G.v[i] * A2.v[i];
    }
  });
}

template <typename T>
typename Tape<T>::Var Tape<T>::add_scalar(Var a, T c) {
  Tensor<T> out = value(a);
  for (T& x : out.v) x += c;
  if (!tracked(a)) return push(std::move(out), false, nullptr);
  const std::int32_t aid = a.id, oid = std::int32_t(nodes_.size());
  return push(std::move(out), true, [aid, oid](Tape& tp) {
    const Tensor<T>& G = tp.nodes_[oid].grad;
    Tensor<T>& dA = tp.node_grad(aid);
    for (std::size_t i = 0; i < G.v.size(); ++i) dA.v[i] += G.v[i];
  });
}

template <typename T>
typename Tape<T>::Var Tape<T>::scale(Var a, T c) {
  Tensor<T> out = value(a);
  for (T& x : out.v) x *= c;
  if (!tracked(a)) return push(std::move(out), false, nullptr);
  const std::int32_t aid = a.id, oid = std::int32_t(nodes_.size());
  return push(std::move(out), true, [aid, oid, c](Tape& tp) {
    const Tensor<T>& G = tp.nodes_[oid].grad;
    Tensor<T>& dA = tp.node_grad(aid);
    for (std::size_t i = 0; i < G.v.size(); ++i) dA.v[i] += G.v[i] * c;
  });
}

template <typename T>
typename Tape<T>::Var Tape<T>::relu(Var a) {
  Tensor<T> out = value(a);
  for (T& x : out.v)
    if (!(x > T(0))) x = T(0);
  if (!tracked(a)) return push(std::move(out), false, nullptr);
  const std::int32_t aid = a.id, oid = std::int32_t(nodes_.size());
  return push(std::move(out), true, [aid, oid](Tape& tp) {
    const Tensor<T>& G = tp.nodes_[oid].grad;
    const Tensor<T>& A2 = tp.node_value(aid);
    Tensor<T>& dA = tp.node_grad(aid);
    for (std::size_t i = 0; i < G.v.size(); ++i)
      if (A2.v[i] > T(0)) dA.v[i] += G.v[i];
  });
}

template <typename T>
typename Tape<T>::Var Tape<T>::softmax_rows(Var a, std::shared_ptr<const BoolMask> mask) {
  const Tensor<T>& A = value(a);
  if (A.shape.size() != 2)
    throw std::invalid_argument("softmax_rows: operand must be 2-D, got " + shape_str(A.shape));
  const int rows = A.shape[0], cols = A.shape[1];
  if (mask && (mask->rows != rows || mask->cols != cols))
    throw std::invalid_argument("softmax_rows: mask shape [" + std::to_string(mask->rows) + "x" +
                                std::to_string(mask->cols) + "] does not match value shape " +
                                shape_str(A.shape));
  Tensor<T> out = Tensor<T>::zeros({rows, cols});
  for (int r = 0; r < rows; ++r) {
    const T* x = A.v.data() + std::size_t(r) * cols;
    T* y = out.v.data() + std::size_t(r) * cols;
    // Masked entries are skipped outright: they never enter the max or the
    // sum, so arbitrary (finite) values there cannot leak into the result.
    double mx = -std::numeric_limits<double>::infinity();
    int allowed = 0;
    for (int c = 0; c < cols; ++c) {
      if (mask && !mask->at(r, c)) continue;
      ++allowed;
      mx = std::max(mx, double(x[c]));
    }
    if (allowed == 0)
      throw std::invalid_argument("softmax_rows: row " + std::to_string(r) + " is fully masked");
    double sum = 0;
    for (int c = 0; c < cols; ++c) {
      if (mask && !mask->at(r, c)) continue;
      sum += std::exp(double(x[c]) - mx);
    }
    for (int c = 0; c < cols; ++c) {
      if (mask && !mask->at(r, c)) continue;
      y[c] = T(std::exp(double(x[c]) - mx) / sum);
    }
  }
  if (!tracked(a)) return push(std::move(out), false, nullptr);
  const std::int32_t aid = a.id, oid = std::int32_t(nodes_.size());
  return push(std::move(out), true, [aid, oid, rows, cols, mask](Tape& tp) {
    const Tensor<T>& G = tp.nodes_[oid].grad;
    const Tensor<T>& Y = tp.node_value(oid);
    Tensor<T>& dA = tp.node_grad(aid);
    for (int r = 0; r < rows; ++r) {
      const T* g = G.v.data() + std::size_t(r) * cols;
      const T* y = Y.v.data() + std::size_t(r) * cols;
      T* da = dA.v.data() + std::size_t(r) * cols;
      double common = 0;
      for (int c = 0; c < cols; ++c) {
        if (mask && !mask->at(r, c)) continue;
        common += double(g[c]) * double(y[c]);
      }
      for (int c = 0; c < cols; ++c) {
        if (mask && !mask->at(r, c)) continue;
        da[c] += T(double(y[c]) * (double(g[c]) - common));
      }
    }
  });
}

template <typename T>
typename Tape<T>::Var Tape<T>::layer_norm(Var a, Var gain, Var bias, T eps) {
  const Tensor<T>& A = value(a);
  const Tensor<T>& Gn = value(gain);
  const Tensor<T>& Bs = value(bias);
  if (A.shape.empty()) throw std::invalid_argument("layer_norm: operand has no shape");
  const int d = A.shape.back();
  if (d == 0) throw std::invalid_argument("layer_norm: last dimension is zero");
  if (int(Gn.size()) != d || int(Bs.size()) != d)
    throw std::invalid_argument("layer_norm: gain/bias sizes (" + std::to_string(Gn.size()) + ", " +
                                std::to_string(Bs.size()) + ") must equal last dimension of " +
                                shape_str(A.shape));
  const int rows = int(A.size()) / d;
  Tensor<T> out = Tensor<T>::zeros(A.shape);
  auto xhat = std::make_shared<std::vector<T>>(A.size());
  auto inv = std::make_shared<std::vector<double>>(rows);
  for (int r = 0; r < rows; ++r) {
    const T* x = A.v.data() + std::size_t(r) * d;
    T* y = out.v.data() + std::size_t(r) * d;
    T* xh = xhat->data() + std::size_t(r) * d;
    double mean = 0;
    for (int c = 0; c < d; ++c) mean += double(x[c]);
    mean /= d;
    double var = 0;
    for (int c = 0; c < d; ++c) {
      const double t = double(x[c]) - mean;
      var += t * t;
    }
    var /= d;  // population variance
    const double ivd = 1.0 / std::sqrt(var + double(eps));
    (*inv)[r] = ivd;
    for (int c = 0; c < d; ++c) {
      const double h = (double(x[c]) - mean) * ivd;
      xh[c] = T(h);
      y[c] = T(h * double(Gn.v[c]) + double(Bs.v[c]));
    }
  }
  if (!tracked(a) && !tracked(gain) && !tracked(bias)) return push(std::move(out), false, nullptr);
  const std::int32_t aid = a.id, gid = gain.id, bid = bias.id, oid = std::int32_t(nodes_.size());
  return push(std::move(out), true, [aid, gid, bid, oid, rows, d, xhat, inv](Tape& tp) {
    const Tensor<T>& G = tp.nodes_[oid].grad;
    const Tensor<T>& Gn2 = tp.node_value(gid);
    for (int r = 0; r < rows; ++r) {
      const T* g = G.v.data() + std::size_t(r) * d;
      const T* xh = xhat->data() + std::size_t(r) * d;
      if (tp.nodes_[aid].tracked) {
        // with ghat = g*gain: dx = (ghat - mean(ghat) - xhat*mean(ghat*xhat)) * inv
        double m1 = 0, m2 = 0;
        for (int c = 0; c < d; ++c) {
          const double gh = double(g[c]) * double(Gn2.v[c]);
          m1 += gh;
          m2 += gh * double(xh[c]);
        }
        m1 /= d;
        m2 /= d;
        T* da = tp.node_grad(aid).v.data() + std::size_t(r) * d;
        const double ivd = (*inv)[r];
        for (int c = 0; c < d; ++c) {
          const double gh = double(g[c]) * double(Gn2.v[c]);
          da[c] += T((gh - m1 - double(xh[c]) * m2) * ivd);
        }
      }
      if (tp.nodes_[gid].tracked) {
        T* dg = tp.node_grad(gid).v.data();
        for (int c = 0; c < d; ++c) dg[c] += g[c] * xh[c];
      }
      if (tp.nodes_[bid].tracked) {
        T* db = tp.node_grad(bid).v.data();
        for (int c = 0; c < d; ++c) db[c] += g[c];
      }
    }
  });
}

template <typename T>
typename Tape<T>::Var Tape<T>::add_row_bias(Var x, Var bias) {
  const Tensor<T>& X = value(x);
  const Tensor<T>& B = value(bias);
  if (X.shape.size() != 2)
    throw std::invalid_argument("add_row_bias: value must be 2-D, got " + shape_str(X.shape));
  const int m = X.shape[0], n = X.shape[1];
  if (int(B.size()) != n)
    throw std::invalid_argument("add_row_bias: bias size " + std::to_string(B.size()) +
                                " does not match columns of " + shape_str(X.shape));
  Tensor<T> out = X;
  for (int i = 0; i < m; ++i) {
    T* row = out.v.data() + std::size_t(i) * n;
    for (int j = 0; j < n; ++j) row[j] += B.v[j];
  }
  if (!tracked(x) && !tracked(bias)) return push(std::move(out), false, nullptr);
  const std::int32_t xid = x.id, bid = bias.id, oid = std::int32_t(nodes_.size());
  return push(std::move(out), true, [xid, bid, oid, m, n](Tape& tp) {
    const Tensor<T>& G = tp.nodes_[oid].grad;
    if (tp.nodes_[xid].tracked) {
      Tensor<T>& dX = tp.node_grad(xid);
      for (std::size_t i = 0; i < G.v.size(); ++i) dX.v[i] += G.v[i];
    }
    if (tp.nodes_[bid].tracked) {
      Tensor<T>& dB = tp.node_grad(bid);
      for (int i = 0; i < m; ++i) {
        const T* grow = G.v.data() + std::size_t(i) * n;
        for (int j = 0; j < n; ++j) dB.v[j] += grow[j];
      }
    }
  });
}

template <typename T>
typename Tape<T>::Var Tape<T>::repeat_row(Var row, int rows) {
  const Tensor<T>& R = value(row);
  if (rows <= 0) throw std::invalid_argument("repeat_row: rows must be positive");
  const int n = int(R.size());
  Tensor<T> out = Tensor<T>::zeros({rows, n});
  for (int i = 0; i < rows; ++i)
    std::copy(R.v.begin(), R.v.end(), out.v.begin() + std::size_t(i) * n);
  if (!tracked(row)) return push(std::move(out), false, nullptr);
  const std::int32_t rid = row.id, oid = std::int32_t(nodes_.size());
  return push(std::move(out), true, [rid, oid, rows, n](Tape& tp) {
    const Tensor<T>& G = tp.nodes_[oid].grad;
    Tensor<T>& dR = tp.node_grad(rid);
    for (int i = 0; i < rows; ++i) {
      const T* grow = G.v.data() + std::size_t(i) * n;
      for (int j = 0; j < n; ++j) dR.v[j] += grow[j];
    }
  });
}

template <typename T>
typename Tape<T>::Var Tape<T>::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  int cols = value(parts[0]).cols();
  int rows = 0;
  bool tr = false;
  for (Var p : parts) {
    const Tensor<T>& t = value(p);
    if (t.cols() != cols)
      throw std::invalid_argument("concat_rows: column mismatch: " + shape_str(t.shape) +
                                  " vs expected " + std::to_string(cols) + " columns");
    rows += t.rows();
    tr = tr || tracked(p);
  }
  Tensor<T> out = Tensor<T>::zeros({rows, cols});
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor<T>& t = value(p);
    std::copy(t.v.begin(), t.v.end(), out.v.begin() + off);
    off += t.v.size();
  }
  if (!tr) return push(std::move(out), false, nullptr);
  std::vector<std::int32_t> ids;
  for (Var p : parts) ids.push_back(p.id);
  const std::int32_t oid = std::int32_t(nodes_.size());
  return push(std::move(out), true, [ids, oid](Tape& tp) {
    const Tensor<T>& G = tp.nodes_[oid].grad;
    std::size_t off2 = 0;
    for (std::int32_t id : ids) {
      const std::size_t sz = tp.node_value(id).size();
      if (tp.nodes_[id].tracked) {
        Tensor<T>& dP = tp.node_grad(id);
        for (std::size_t i = 0; i < sz; ++i) dP.v[i] += G.v[off2 + i];
      }
      off2 += sz;
    }
  });
}

template <typename T>
typename Tape<T>::Var Tape<T>::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const int rows = value(parts[0]).rows();
  int cols = 0;
  bool tr = false;
  for (Var p : parts) {
    const Tensor<T>& t = value(p);
    if (t.rows() != rows)
      throw std::invalid_argument("concat_cols: row mismatch: " + shape_str(t.shape) +
                                  " vs expected " + std::to_string(rows) + " rows");
    cols += t.cols();
    tr = tr || tracked(p);
  }
  Tensor<T> out = Tensor<T>::zeros({rows, cols});
  int coff = 0;
  for (Var p : parts) {
    const Tensor<T>& t = value(p);
    const int pc = t.cols();
    for (int r = 0; r < rows; ++r)
      std::copy(t.v.begin() + std::size_t(r) * pc, t.v.begin() + std::size_t(r + 1) * pc,
                out.v.begin() + std::size_t(r) * cols + coff);
    coff += pc;
  }
  if (!tr) return push(std::move(out), false, nullptr);
  std::vector<std::int32_t> ids;
  std::vector<int> widths;
  for (Var p : parts) {
    ids.push_back(p.id);
    widths.push_back(value(p).cols());
  }
  const std::int32_t oid = std::int32_t(nodes_.size());
  return push(std::move(out), true, [ids, widths, oid, rows, cols](Tape& tp) {
    const Tensor<T>& G = tp.nodes_[oid].grad;
    int coff2 = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const int pc = widths[k];
      if (tp.nodes_[ids[k]].tracked) {
        Tensor<T>& dP = tp.node_grad(ids[k]);
        for (int r = 0; r < rows; ++r) {
          const T* grow = G.v.data() + std::size_t(r) * cols + coff2;
          T* drow = dP.v.data() + std::size_t(r) * pc;
          for (int j = 0; j < pc; ++j) drow[j] += grow[j];
        }
      }
      coff2 += pc;
    }
  });
}

template <typename T>
typename Tape<T>::Var Tape<T>::slice_rows(Var x, int first, int count) {
  const Tensor<T>& X = value(x);
  const int m = X.rows(), n = X.cols();
  if (first < 0 || count < 0 || first + count > m)
    throw std::invalid_argument("slice_rows: range [" + std::to_string(first) + ", " +
                                std::to_string(first + count) + ") out of bounds for " +
                                shape_str(X.shape));
  Tensor<T> out = Tensor<T>::zeros({count, n});
  std::copy(X.v.begin() + std::size_t(first) * n, X.v.begin() + std::size_t(first + count) * n,
            out.v.begin());
  if (!tracked(x)) return push(std::move(out), false, nullptr);
  const std::int32_t xid = x.id, oid = std::int32_t(nodes_.size());
  return push(std::move(out), true, [xid, oid, first, count, n](Tape& tp) {
    const Tensor<T>& G = tp.nodes_[oid].grad;
    Tensor<T>& dX = tp.node_grad(xid);
    for (std::size_t i = 0; i < std::size_t(count) * n; ++i)
      dX.v[std::size_t(first) * n + i] += G.v[i];
  });
}

template <typename T>
typename Tape<T>::Var Tape<T>::slice_cols(Var x, int first, int count) {
  const Tensor<T>& X = value(x);
  const int m = X.rows(), n = X.cols();
  if (first < 0 || count < 0 || first + count > n)
    throw std::invalid_argument("slice_cols: range [" + std::to_string(first) + ", " +
                                std::to_string(first + count) + ") out of bounds for " +
                                shape_str(X.shape));
  Tensor<T> out = Tensor<T>::zeros({m, count});
  for (int r = 0; r < m; ++r)
    std::copy(X.v.begin() + std::size_t(r) * n + first,
              X.v.begin() + std::size_t(r) * n + first + count,
              out.v.begin() + std::size_t(r) * count);
  if (!tracked(x)) return push(std::move(out), false, nullptr);
  const std::int32_t xid = x.id, oid = std::int32_t(nodes_.size());
  return push(std::move(out), true, [xid, oid, first, count, m, n](Tape& tp) {
    const Tensor<T>& G = tp.nodes_[oid].grad;
    Tensor<T>& dX = tp.node_grad(xid);
    for (int r = 0; r < m; ++r) {
      const T* grow = G.v.data() + std::size_t(r) * count;
      T* drow = dX.v.data() + std::size_t(r) * n + first;
      for (int j = 0; j < count; ++j) drow[j] += grow[j];
    }
  });
}

template <typename T>
typename Tape<T>::Var Tape<T>::transpose(Var x) {
  const Tensor<T>& X = value(x);
  const int m = X.rows(), n = X.cols();
  Tensor<T> out = Tensor<T>::zeros({n, m});
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c) out.v[std::size_t(c) * m + r] = X.v[std::size_t(r) * n + c];
  if (!tracked(x)) return push(std::move(out), false, nullptr);
  const std::int32_t xid = x.id, oid = std::int32_t(nodes_.size());
  return push(std::move(out), true, [xid, oid, m, n](Tape& tp) {
    const Tensor<T>& G = tp.nodes_[oid].grad;
    Tensor<T>& dX = tp.node_grad(xid);
    for (int c = 0; c < n; ++c)
      for (int r = 0; r < m; ++r) dX.v[std::size_t(r) * n + c] += G.v[std::size_t(c) * m + r];
  });
}

template <typename T>
typename Tape<T>::Var Tape<T>::mean_all(Var x) {
  const Tensor<T>& X = value(x);
  if (X.size() == 0) throw std::invalid_argument("mean_all: empty tensor");
  double s = 0;
  for (const T& v : X.v) s += double(v);
  Tensor<T> out({1}, {T(s / double(X.size()))});
  if (!tracked(x)) return push(std::move(out), false, nullptr);
  const std::int32_t xid = x.id, oid = std::int32_t(nodes_.size());
  const std::size_t sz = X.size();
  return push(std::move(out), true, [xid, oid, sz](Tape& tp) {
    const T g = tp.nodes_[oid].grad.v[0];
    Tensor<T>& dX = tp.node_grad(xid);
    const T w = g / T(double(sz));
    for (std::size_t i = 0; i < sz; ++i) dX.v[i] += w;
  });
}

template <typename T>
typename Tape<T>::Var mse_loss(Tape<T>& tape, typename Tape<T>::Var pred,
                               typename Tape<T>::Var target) {
  auto diff = tape.sub(pred, target);
  return tape.mean_all(tape.mul(diff, diff));
}

template class Tape<float>;
template class Tape<double>;
template Tape<float>::Var mse_loss<float>(Tape<float>&, Tape<float>::Var, Tape<float>::Var);
template Tape<double>::Var mse_loss<double>(Tape<double>&, Tape<double>::Var, Tape<double>::Var);

}  // namespace csiloc
