#pragma once

// Small building blocks over the tensor catalog: affine maps, norms,
// multi-head attention and feed-forward blocks.

#include <optional>
#include <random>

#include "vloss/core/params.hpp"

namespace vloss {

template <typename Scalar>
struct Linear {
  Tensor<Scalar> w;  // [in, out]
  Tensor<Scalar> b;  // [out] or undefined

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const;
};

/// Xavier-uniform weight, zero bias.
template <typename Scalar>
Linear<Scalar> make_linear(ParamSet<Scalar>& ps, const std::string& name, Index in, Index out,
                           std::mt19937_64& rng, ParamGroup group, bool bias = true);

template <typename Scalar>
struct Norm {
  Tensor<Scalar> gamma, beta;

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const;
};

template <typename Scalar>
Norm<Scalar> make_norm(ParamSet<Scalar>& ps, const std::string& name, Index dim, ParamGroup group);

template <typename Scalar>
struct Attention {
  Linear<Scalar> q, k, v, o;
  Index heads = 1;

  /// queries [Lq, D], keys/values [Lk, D]; `bias` [Lq, Lk] is added to the logits.
  Tensor<Scalar> operator()(const Tensor<Scalar>& queries, const Tensor<Scalar>& keys,
                            const Tensor<Scalar>& values, const Tensor<Scalar>* bias = nullptr) const;
};

template <typename Scalar>
Attention<Scalar> make_attention(ParamSet<Scalar>& ps, const std::string& name, Index dim, Index heads,
                                 std::mt19937_64& rng, ParamGroup group);

template <typename Scalar>
struct FeedForward {
  Linear<Scalar> up, down;

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const;
};

template <typename Scalar>
FeedForward<Scalar> make_ffn(ParamSet<Scalar>& ps, const std::string& name, Index dim, Index hidden,
                             std::mt19937_64& rng, ParamGroup group);

/// Large negative logit used to block attention entries.
inline constexpr double kBlocked = -1e9;

}  // namespace vloss
