#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "vloss/core/tensor.hpp"

namespace vloss {

/// Non-tensor arguments for name-dispatched ops.
struct OpAttrs {
  std::map<std::string, double> values;  // axis, stride, pad, factor, eps, start, end, keepdim
  std::vector<Index> ids;                // embedding_lookup
  std::vector<Index> perm;               // transpose
  Shape shape;                           // reshape

  double get(const std::string& key, double fallback) const {
    auto it = values.find(key);
    return it == values.end() ? fallback : it->second;
  }
};

/// Names accepted by `forward`, in catalog order.
const std::vector<std::string>& op_catalog();

/// Runs a catalog op by name. Unknown names and arity errors throw ValidationError.
template <typename Scalar>
Tensor<Scalar> forward(const std::string& op, const std::vector<Tensor<Scalar>>& inputs,
                       const OpAttrs& attrs = {});

/// Max over all input elements of |analytic - central difference| /
/// max(|analytic|, |cd|, 1e-8), for f64 inputs and step `step`.
///
/// Non-scalar outputs are reduced with fixed random weights drawn from `seed`.
double grad_check_fn(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& fn,
                     const std::vector<Tensor<double>>& inputs, std::uint64_t seed,
                     double step = 1e-5);

/// Samples inputs of the given shapes for `op` (kept away from kinks and
/// outside the op's domain edges) and returns `grad_check_fn`'s error.
double grad_check(const std::string& op, const std::vector<Shape>& shapes, std::uint64_t seed,
                  const OpAttrs& attrs = {});

/// A representative shape set and attrs for every catalog op.
struct GradCheckCase {
  std::string op;
  std::vector<Shape> shapes;
  OpAttrs attrs;
};
std::vector<GradCheckCase> default_grad_check_cases();

}  // namespace vloss
