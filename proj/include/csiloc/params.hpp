#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "csiloc/tensor.hpp"

namespace csiloc {

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;  // same shape, zeroed between steps
};

// Named, ordered collection of trainable arrays. Order is creation order and
// is part of the model's serialized layout, so lookups by index are stable.
template <typename T>
class ParamSet {
 public:
  int add(std::string name, Tensor<T> value) {
    if (index_.count(name))
      throw std::invalid_argument("ParamSet: duplicate parameter name '" + name + "'");
    Param<T> p;
    p.grad = Tensor<T>::zeros(value.shape);
    p.value = std::move(value);
    p.name = std::move(name);
    index_[p.name] = int(params_.size());
    params_.push_back(std::move(p));
    return int(params_.size()) - 1;
  }

  int size() const { return int(params_.size()); }
  Param<T>& at(int i) { return params_.at(i); }
  const Param<T>& at(int i) const { return params_.at(i); }

  int index_of(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }
  Param<T>& by_name(const std::string& name) {
    int i = index_of(name);
    if (i < 0) throw std::invalid_argument("ParamSet: unknown parameter '" + name + "'");
    return params_[i];
  }
  const Param<T>& by_name(const std::string& name) const {
    int i = index_of(name);
    if (i < 0) throw std::invalid_argument("ParamSet: unknown parameter '" + name + "'");
    return params_[i];
  }

  void zero_grads() {
    for (auto& p : params_) std::fill(p.grad.v.begin(), p.grad.v.end(), T(0));
  }

  std::size_t value_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& p : params_) out.add(p.name, p.value.template cast<U>());
    return out;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Param<T>> params_;
  std::unordered_map<std::string, int> index_;
};

// Adam with bias correction. First/second moment estimates per value, shared
// step count; hyperparameters are the conventional ones.
template <typename T>
struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::int64_t t = 0;
  std::vector<Tensor<T>> m, v;

  static AdamState for_params(const ParamSet<T>& ps) {
    AdamState st;
    for (int i = 0; i < ps.size(); ++i) {
      st.m.push_back(Tensor<T>::zeros(ps.at(i).value.shape));
      st.v.push_back(Tensor<T>::zeros(ps.at(i).value.shape));
    }
    return st;
  }
};

// One optimizer step over params.grad. Moment updates and the applied delta
// are computed in double and stored back in T. Non-finite gradients abort
// with the parameter name and flat index.
template <typename T>
void adam_step(ParamSet<T>& params, AdamState<T>& st, double lr) {
  if (int(st.m.size()) != params.size())
    throw std::invalid_argument("adam_step: optimizer state tracks " +
                                std::to_string(st.m.size()) + " parameters, model has " +
                                std::to_string(params.size()));
  st.t += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, double(st.t));
  const double bc2 = 1.0 - std::pow(st.beta2, double(st.t));
  for (int i = 0; i < params.size(); ++i) {
    Param<T>& p = params.at(i);
    Tensor<T>& m = st.m[i];
    Tensor<T>& v = st.v[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = double(p.grad.v[j]);
      if (!std::isfinite(g))
        throw std::runtime_error("adam_step: non-finite gradient in '" + p.name + "' at index " +
                                 std::to_string(j));
      const double mn = st.beta1 * double(m.v[j]) + (1.0 - st.beta1) * g;
      const double vn = st.beta2 * double(v.v[j]) + (1.0 - st.beta2) * g * g;
      m.v[j] = T(mn);
      v.v[j] = T(vn);
      p.value.v[j] = T(double(p.value.v[j]) - lr * (mn / bc1) / (std::sqrt(vn / bc2) + st.eps));
    }
  }
}

}  // namespace csiloc
