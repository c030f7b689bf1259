#pragma once

#include "plug/rng.hpp"
#include "plug/tensor.hpp"

#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace plug {

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
};

// Named parameter registry. Registration order is the checkpoint tensor
// order, so it must be deterministic.
template <typename T>
class ParamStore {
 public:
  int add(const std::string& name, Tensor<T> init, bool trainable = true) {
    if (index_.count(name)) throw std::runtime_error("duplicate param: " + name);
    Param<T> p;
    p.name = name;
    p.grad = Tensor<T>(init.shape);
    p.value = std::move(init);
    p.trainable = trainable;
    params_.push_back(std::move(p));
    index_[name] = (int)params_.size() - 1;
    return (int)params_.size() - 1;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }
  int index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::runtime_error("no such param: " + name);
    return it->second;
  }
  Param<T>& get(const std::string& name) { return params_[index(name)]; }
  const Param<T>& get(const std::string& name) const { return params_[index(name)]; }
  Param<T>& at(int i) { return params_[i]; }
  const Param<T>& at(int i) const { return params_[i]; }
  int size() const { return (int)params_.size(); }

  void zero_grad() {
    for (auto& p : params_) p.grad.zero();
  }

  void set_trainable_by_prefix(const std::string& prefix, bool trainable) {
    for (auto& p : params_)
      if (p.name.rfind(prefix, 0) == 0) p.trainable = trainable;
  }

  int64_t count_trainable() const {
    int64_t n = 0;
    for (auto& p : params_)
      if (p.trainable) n += p.value.numel();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (auto& p : params_) out.add(p.name, p.value.template cast<U>(), p.trainable);
    return out;
  }

  std::vector<Param<T>>& all() { return params_; }
  const std::vector<Param<T>>& all() const { return params_; }

 private:
  std::vector<Param<T>> params_;
  std::unordered_map<std::string, int> index_;
};

// Init helpers
template <typename T>
Tensor<T> randn_tensor(std::vector<int> shape, Rng& rng, double stddev) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = (T)rng.normal(0.0, stddev);
  return t;
}

template <typename T>
Tensor<T> zeros_tensor(std::vector<int> shape) {
  return Tensor<T>(std::move(shape));
}

template <typename T>
Tensor<T> ones_tensor(std::vector<int> shape) {
  Tensor<T> t(std::move(shape));
  t.fill(T(1));
  return t;
}

}  // namespace plug
