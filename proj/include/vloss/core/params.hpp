#pragma once

// Named trainable tensors shared by reference between modules and the optimizer.

#include <random>
#include <string>
#include <vector>

#include "vloss/core/tensor.hpp"

namespace vloss {

enum class ParamGroup { main, text_encoder };

template <typename Scalar>
struct Param {
  std::string name;
  Tensor<Scalar> value;
  ParamGroup group = ParamGroup::main;
  bool decay = true;  // false for norms, embeddings and the no-object row
};

template <typename Scalar>
class ParamSet {
 public:
  /// Registers a leaf requiring grad; names must be unique.
  Tensor<Scalar> add(const std::string& name, Tensor<Scalar> init, ParamGroup group, bool decay) {
    if (find(name)) throw ValidationError("duplicate parameter '" + name + "'");
    Tensor<Scalar> leaf(init.shape(), init.values(), true);
    params_.push_back({name, leaf, group, decay});
    return leaf;
  }

  const Param<Scalar>* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }
  const Param<Scalar>& at(const std::string& name) const {
    const auto* p = find(name);
    if (!p) throw ValidationError("no parameter named '" + name + "'");
    return *p;
  }

  std::vector<Param<Scalar>>& items() { return params_; }
  const std::vector<Param<Scalar>>& items() const { return params_; }
  Index count() const {
    Index n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }
  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

 private:
  std::vector<Param<Scalar>> params_;
};

/// Order-sensitive hash of every parameter's name, shape and bytes.
template <typename Scalar>
std::uint64_t param_hash(const ParamSet<Scalar>& ps);

template <typename Scalar>
Tensor<Scalar> random_normal(const Shape& shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<Scalar> v(numel_of(shape));
  for (auto& x : v) x = static_cast<Scalar>(n(rng));
  return Tensor<Scalar>(shape, std::move(v));
}

}  // namespace vloss
