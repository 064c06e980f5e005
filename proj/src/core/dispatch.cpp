#include "vloss/core/dispatch.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "vloss/core/ops.hpp"

namespace vloss {

const std::vector<std::string>& op_catalog() {
  static const std::vector<std::string> names = {
      "matmul",    "conv2d",       "add",        "sub",          "mul",
      "div",       "scale",        "add_scalar", "relu",         "gelu",
      "sigmoid",   "exp",          "log",        "softplus",     "softmax",
      "log_softmax", "layer_norm", "mean_pool_spatial", "bilinear_upsample", "reshape",
      "transpose", "concat",       "slice",      "embedding_lookup", "l2_normalize",
      "sum",       "mean",         "max"};
  return names;
}

namespace {

template <typename Scalar>
void expect_arity(const std::string& op, const std::vector<Tensor<Scalar>>& inputs, std::size_t n) {
  if (inputs.size() != n) {
    throw ValidationError(op + ": expected " + std::to_string(n) + " inputs, got " +
                          std::to_string(inputs.size()));
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> forward(const std::string& op, const std::vector<Tensor<Scalar>>& in,
                       const OpAttrs& attrs) {
  const auto axis = static_cast<Index>(attrs.get("axis", -1));
  const bool keepdim = attrs.get("keepdim", 0) != 0;
  if (op == "matmul") return expect_arity(op, in, 2), matmul(in[0], in[1]);
  if (op == "conv2d") {
    expect_arity(op, in, 2);
    return conv2d(in[0], in[1], static_cast<Index>(attrs.get("stride", 1)),
                  static_cast<Index>(attrs.get("pad", 0)));
  }
  if (op == "add") return expect_arity(op, in, 2), add(in[0], in[1]);
  if (op == "sub") return expect_arity(op, in, 2), sub(in[0], in[1]);
  if (op == "mul") return expect_arity(op, in, 2), mul(in[0], in[1]);
  if (op == "div") return expect_arity(op, in, 2), div(in[0], in[1]);
  if (op == "scale") return expect_arity(op, in, 1), scale(in[0], Scalar(attrs.get("factor", 1)));
  if (op == "add_scalar") return expect_arity(op, in, 1), add_scalar(in[0], Scalar(attrs.get("value", 0)));
  if (op == "relu") return expect_arity(op, in, 1), relu(in[0]);
  if (op == "gelu") return expect_arity(op, in, 1), gelu(in[0]);
  if (op == "sigmoid") return expect_arity(op, in, 1), sigmoid(in[0]);
  if (op == "exp") return expect_arity(op, in, 1), exp(in[0]);
  if (op == "log") return expect_arity(op, in, 1), log(in[0], Scalar(attrs.get("eps", 0)));
  if (op == "softplus") return expect_arity(op, in, 1), softplus(in[0]);
  if (op == "softmax") return expect_arity(op, in, 1), softmax(in[0], axis);
  if (op == "log_softmax") return expect_arity(op, in, 1), log_softmax(in[0], axis);
  if (op == "layer_norm") {
    const Scalar eps = Scalar(attrs.get("eps", 1e-5));
    if (in.size() == 3) return layer_norm(in[0], in[1], in[2], eps);
    return expect_arity(op, in, 1), layer_norm(in[0], eps);
  }
  if (op == "mean_pool_spatial") return expect_arity(op, in, 1), mean_pool_spatial(in[0]);
  if (op == "bilinear_upsample") {
    expect_arity(op, in, 1);
    return bilinear_upsample(in[0], static_cast<Index>(attrs.get("factor", 2)));
  }
  if (op == "reshape") return expect_arity(op, in, 1), reshape(in[0], attrs.shape);
  if (op == "transpose") {
    expect_arity(op, in, 1);
    return attrs.perm.empty() ? transpose(in[0]) : transpose(in[0], attrs.perm);
  }
  if (op == "concat") return concat(in, axis);
  if (op == "slice") {
    expect_arity(op, in, 1);
    return slice(in[0], axis, static_cast<Index>(attrs.get("start", 0)),
                 static_cast<Index>(attrs.get("end", 1)));
  }
  if (op == "embedding_lookup") return expect_arity(op, in, 1), embedding_lookup(in[0], attrs.ids);
  if (op == "l2_normalize") return expect_arity(op, in, 1), l2_normalize(in[0], axis, Scalar(attrs.get("eps", 0)));
  if (op == "sum") {
    expect_arity(op, in, 1);
    return attrs.values.count("axis") ? sum(in[0], axis, keepdim) : sum(in[0]);
  }
  if (op == "mean") {
    expect_arity(op, in, 1);
    return attrs.values.count("axis") ? mean(in[0], axis, keepdim) : mean(in[0]);
  }
  if (op == "max") return expect_arity(op, in, 1), max(in[0], axis, keepdim);
  throw ValidationError("unknown op '" + op + "'");
}

template Tensor<float> forward(const std::string&, const std::vector<Tensor<float>>&, const OpAttrs&);
template Tensor<double> forward(const std::string&, const std::vector<Tensor<double>>&, const OpAttrs&);

double grad_check_fn(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& fn,
                     const std::vector<Tensor<double>>& inputs, std::uint64_t seed, double step) {
  std::vector<Tensor<double>> leaves;
  for (const auto& t : inputs) leaves.emplace_back(t.shape(), t.values(), true);

  const Tensor<double> probe = fn(leaves);
  std::vector<double> weights(probe.numel(), 1.0);
  if (probe.numel() != 1) {
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_real_distribution<double> u(0.5, 1.5);
    for (auto& w : weights) w = (rng() & 1 ? 1.0 : -1.0) * u(rng);
  }
  auto objective = [&](const std::vector<Tensor<double>>& xs) {
    const Tensor<double> out = fn(xs);
    double total = 0;
    for (Index i = 0; i < out.numel(); ++i) total += weights[i] * out[i];
    return total;
  };
  auto reduce = [&](const Tensor<double>& out) {
    if (out.numel() == 1) return sum(out);
    return sum(mul(out, Tensor<double>(out.shape(), weights)));
  };
  const Tensor<double> loss = reduce(fn(leaves));
  backward(loss);

  double worst = 0;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    const auto analytic = leaves[k].grad();
    for (Index i = 0; i < leaves[k].numel(); ++i) {
      auto perturbed = [&](double delta) {
        std::vector<Tensor<double>> xs;
        for (std::size_t j = 0; j < leaves.size(); ++j) {
          std::vector<double> v = leaves[j].values();
          if (j == k) v[i] += delta;
          xs.emplace_back(leaves[j].shape(), std::move(v), false);
        }
        return objective(xs);
      };
      const double cd = (perturbed(step) - perturbed(-step)) / (2 * step);
      const double an = analytic.empty() ? 0.0 : analytic[i];
      const double denom = std::max({std::abs(an), std::abs(cd), 1e-8});
      worst = std::max(worst, std::abs(an - cd) / denom);
    }
  }
  return worst;
}

namespace {

std::vector<double> sample(std::mt19937_64& rng, Index n, const std::string& op) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> positive(0.5, 2.0);
  std::vector<double> v(n);
  for (auto& x : v) {
    if (op == "log" || op == "div_den") {
      x = positive(rng);
    } else {
      do {
        x = normal(rng);
      } while (op == "relu" && std::abs(x) < 0.05);
    }
  }
  if (op == "max") {
    // Spread values so no two are within the finite-difference step of each other.
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += 0.01 * static_cast<double>(i % 7);
  }
  return v;
}

}  // namespace

double grad_check(const std::string& op, const std::vector<Shape>& shapes, std::uint64_t seed,
                  const OpAttrs& attrs_in) {
  std::mt19937_64 rng(seed * 7919 + 17);
  OpAttrs attrs = attrs_in;
  std::vector<Tensor<double>> inputs;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const std::string kind = (op == "div" && i == 1) ? "div_den" : op;
    inputs.emplace_back(shapes[i], sample(rng, numel_of(shapes[i]), kind));
  }
  if (op == "embedding_lookup" && attrs.ids.empty()) {
    const Index vocab = shapes.at(0).at(0);
    std::uniform_int_distribution<Index> pick(0, vocab - 1);
    for (int i = 0; i < 5; ++i) attrs.ids.push_back(pick(rng));
  }
  if (op == "reshape" && attrs.shape.empty()) attrs.shape = {-1};
  return grad_check_fn([&](const std::vector<Tensor<double>>& xs) { return forward(op, xs, attrs); },
                       inputs, seed);
}

std::vector<GradCheckCase> default_grad_check_cases() {
  auto with = [](std::initializer_list<std::pair<const std::string, double>> kv) {
    OpAttrs a;
    a.values = kv;
    return a;
  };
  OpAttrs perm;
  perm.perm = {2, 0, 1};
  OpAttrs reshape_attrs;
  reshape_attrs.shape = {4, 6};
  return {
      {"matmul", {{2, 3}, {3, 4}}, {}},
      {"matmul", {{2, 3, 4}, {2, 4, 2}}, {}},
      {"conv2d", {{2, 5, 5}, {3, 2, 3, 3}}, with({{"stride", 1}, {"pad", 1}})},
      {"conv2d", {{2, 6, 6}, {2, 2, 3, 3}}, with({{"stride", 2}, {"pad", 1}})},
      {"add", {{3, 4}, {4}}, {}},
      {"sub", {{2, 3, 1}, {3, 4}}, {}},
      {"mul", {{3, 4}, {3, 1}}, {}},
      {"div", {{3, 4}, {3, 4}}, {}},
      {"scale", {{3, 4}}, with({{"factor", 1.7}})},
      {"add_scalar", {{3, 4}}, with({{"value", 0.3}})},
      {"relu", {{4, 5}}, {}},
      {"gelu", {{4, 5}}, {}},
      {"sigmoid", {{4, 5}}, {}},
      {"exp", {{4, 5}}, {}},
      {"log", {{4, 5}}, {}},
      {"softplus", {{4, 5}}, {}},
      {"softmax", {{3, 5}}, with({{"axis", 1}})},
      {"softmax", {{3, 4, 2}}, with({{"axis", 1}})},
      {"log_softmax", {{3, 5}}, with({{"axis", -1}})},
      {"layer_norm", {{4, 8}}, {}},
      {"layer_norm", {{4, 8}, {8}, {8}}, {}},
      {"mean_pool_spatial", {{3, 4, 5}}, {}},
      {"bilinear_upsample", {{2, 3, 3}}, with({{"factor", 2}})},
      {"reshape", {{2, 3, 4}}, reshape_attrs},
      {"transpose", {{2, 3, 4}}, perm},
      {"concat", {{2, 3}, {1, 3}, {3, 3}}, with({{"axis", 0}})},
      {"slice", {{4, 5}}, with({{"axis", 1}, {"start", 1}, {"end", 4}})},
      {"embedding_lookup", {{6, 4}}, {}},
      {"l2_normalize", {{3, 5}}, with({{"axis", 1}})},
      {"sum", {{3, 4}}, {}},
      {"sum", {{3, 4, 2}}, with({{"axis", 1}})},
      {"mean", {{3, 4}}, {}},
      {"mean", {{3, 4}}, with({{"axis", 0}})},
      {"max", {{3, 6}}, with({{"axis", 1}})},
  };
}

}  // namespace vloss
