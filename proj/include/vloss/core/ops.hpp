#pragma once

// Differentiable operation catalog. Every op allocates a fresh output and
// records a tape node when an input requires gradients.

#include <vector>

#include "vloss/core/tensor.hpp"

namespace vloss {

// Linear algebra. matmul accepts [m,k]x[k,n] or batched [b,m,k]x[b,k,n].
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

// Cross-correlation of a [C,H,W] input with [O,C,kh,kw] weights, explicit zero padding.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, Index stride = 1,
                      Index pad = 0);

// Elementwise binary ops with numpy-style broadcasting.
template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar factor);
template <typename Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& x, Scalar value);

// Unary.
template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x);  // subgradient 0 at 0
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x);  // exact erf form
template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& x);
/// Natural log; rejects non-positive entries unless `eps` > 0, in which case
/// the input is clamped to at least `eps`.
template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& x, Scalar eps = Scalar(0));
/// log(1 + e^x), evaluated without overflow.
template <typename Scalar>
Tensor<Scalar> softplus(const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, Index axis);
template <typename Scalar>
Tensor<Scalar> log_softmax(const Tensor<Scalar>& x, Index axis);

/// Normalizes over the last axis to zero mean, unit variance (no affine).
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, Scalar eps = Scalar(1e-5));
/// layer_norm followed by per-feature scale and shift of shape [last dim].
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, Scalar eps = Scalar(1e-5));

/// Mean over the two trailing (spatial) axes: [..., H, W] -> [...].
template <typename Scalar>
Tensor<Scalar> mean_pool_spatial(const Tensor<Scalar>& x);
/// Bilinear resize of the two trailing axes by an integer factor (align_corners=false).
template <typename Scalar>
Tensor<Scalar> bilinear_upsample(const Tensor<Scalar>& x, Index factor);

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape);
template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x, const std::vector<Index>& perm);
/// Swaps the last two axes.
template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, Index axis);
/// Half-open range [start, end) along `axis`.
template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& x, Index axis, Index start, Index end);
/// Rows of `table` [V,D] selected by `ids`, giving [ids.size(), D].
template <typename Scalar>
Tensor<Scalar> embedding_lookup(const Tensor<Scalar>& table, const std::vector<Index>& ids);
/// x / max(||x||, eps) along `axis`; eps = 0 rejects zero-norm slices.
template <typename Scalar>
Tensor<Scalar> l2_normalize(const Tensor<Scalar>& x, Index axis, Scalar eps = Scalar(0));

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x, Index axis, bool keepdim = false);
template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x, Index axis, bool keepdim = false);
/// Maximum along `axis`; the gradient flows to the first maximal entry.
template <typename Scalar>
Tensor<Scalar> max(const Tensor<Scalar>& x, Index axis, bool keepdim = false);

}  // namespace vloss
