#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "vloss/core/dispatch.hpp"
#include "vloss/core/ops.hpp"
#include "vloss/core/serialize.hpp"

using namespace vloss;
using T = Tensor<double>;

namespace {

T random_tensor(const Shape& shape, std::uint64_t seed, bool grad = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = n(rng);
  return T(shape, v, grad);
}

}  // namespace

TEST(Forward, SoftmaxOfUniformLogits) {
  const T y = softmax(T({1, 2}, {0, 0}), 1);
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_DOUBLE_EQ(y[1], 0.5);
}

TEST(Forward, MatmulByIdentity) {
  const T a = random_tensor({2, 3}, 3);
  const T eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const T y = matmul(a, eye);
  ASSERT_EQ(y.shape(), a.shape());
  for (Index i = 0; i < 6; ++i) EXPECT_EQ(y[i], a[i]);
}

TEST(Forward, Conv2dMatchesWindowedSum) {
  const T x = random_tensor({1, 4, 4}, 11);
  const T ones = T::full({1, 1, 3, 3}, 1.0);
  const T y = conv2d(x, ones, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 2}));
  for (int oy = 0; oy < 2; ++oy)
    for (int ox = 0; ox < 2; ++ox) {
      double window = 0;
      for (int u = 0; u < 3; ++u)
        for (int v = 0; v < 3; ++v) window += x[(oy + u) * 4 + ox + v];
      EXPECT_NEAR(y[oy * 2 + ox], window, 1e-12);
    }
}

TEST(Forward, Conv2dStrideAndPaddingShape) {
  const T x = random_tensor({3, 8, 8}, 1);
  const T w = random_tensor({5, 3, 3, 3}, 2);
  EXPECT_EQ(conv2d(x, w, 2, 1).shape(), (Shape{5, 4, 4}));
  // Zero padding: a corner output only sees the in-bounds part of the window.
  const T ones = T::full({1, 1, 3, 3}, 1.0);
  const T y = conv2d(T::full({1, 3, 3}, 1.0), ones, 1, 1);
  EXPECT_DOUBLE_EQ(y[0], 4.0);
  EXPECT_DOUBLE_EQ(y[4], 9.0);
}

TEST(Forward, BilinearUpsampleAlignCornersFalse) {
  const T y = bilinear_upsample(T({2, 2}, {1, 2, 3, 4}), 2);
  const std::vector<double> expected = {1,   1.25, 1.75, 2,   1.5, 1.75, 2.25, 2.5,
                                        2.5, 2.75, 3.25, 3.5, 3,   3.25, 3.75, 4};
  ASSERT_EQ(y.shape(), (Shape{4, 4}));
  for (Index i = 0; i < 16; ++i) EXPECT_NEAR(y[i], expected[i], 1e-15);
}

TEST(Forward, BroadcastAdd) {
  const T y = add(T({2, 3}, {1, 2, 3, 4, 5, 6}), T({3}, {10, 20, 30}));
  EXPECT_EQ(y.values(), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  EXPECT_THROW(add(T::zeros({2, 3}), T::zeros({2})), ValidationError);
}

TEST(Forward, TransposeAndReshape) {
  const T x({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(transpose(x).values(), (std::vector<double>{1, 4, 2, 5, 3, 6}));
  EXPECT_EQ(reshape(x, {3, -1}).shape(), (Shape{3, 2}));
  EXPECT_THROW(reshape(x, {4, 2}), ValidationError);
}

TEST(Forward, ConcatSliceEmbedding) {
  const T a({1, 2}, {1, 2}), b({2, 2}, {3, 4, 5, 6});
  const T c = concat<double>({a, b}, 0);
  EXPECT_EQ(c.values(), (std::vector<double>{1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(slice(c, 0, 1, 3).values(), b.values());
  EXPECT_EQ(embedding_lookup(c, {2, 0}).values(), (std::vector<double>{5, 6, 1, 2}));
  EXPECT_THROW(embedding_lookup(c, {3}), ValidationError);
}

TEST(Forward, Errors) {
  EXPECT_THROW(matmul(T::zeros({2, 3}), T::zeros({2, 3})), ValidationError);
  EXPECT_THROW(forward<double>("nope", {T::zeros({1})}), ValidationError);
  EXPECT_THROW(log(T({2}, {1.0, 0.0})), ValidationError);
  EXPECT_NO_THROW(log(T({2}, {1.0, 0.0}), 1e-12));
  EXPECT_THROW(l2_normalize(T::zeros({1, 3}), 1), ValidationError);
  EXPECT_THROW(conv2d(T::zeros({2, 4, 4}), T::zeros({1, 3, 3, 3})), ValidationError);
}

TEST(Forward, MatmulShapeErrorNamesDims) {
  try {
    matmul(T::zeros({2, 3}), T::zeros({4, 5}));
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4,5]"), std::string::npos);
  }
}

TEST(Backward, SumOfSquares) {
  const T x({2}, {1, 2}, true);
  backward(sum(mul(x, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Backward, SumOfSoftmaxHasZeroGradient) {
  const T x = random_tensor({1, 6}, 5, true);
  backward(sum(softmax(x, 1)));
  for (double g : x.grad()) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Backward, RejectsNonScalarLoss) { EXPECT_THROW(backward(T::zeros({2}, true)), ValidationError); }

TEST(Backward, ReturnsGradientMapKeyedById) {
  const T x({2}, {3, 4}, true);
  const T w({2}, {1, 1}, false);
  const auto grads = backward(sum(mul(x, w)));
  ASSERT_EQ(grads.count(x.id()), 1u);
  EXPECT_EQ(grads.at(x.id()), (std::vector<double>{1, 1}));
  EXPECT_EQ(grads.count(w.id()), 0u);
}

TEST(Backward, ReluSubgradientAtZeroIsZero) {
  const T x({3}, {-1, 0, 2}, true);
  backward(sum(relu(x)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{0, 0, 1}));
}

TEST(Backward, SharedSubexpressionAccumulates) {
  const T x({1}, {3}, true);
  const T y = mul(x, x);
  backward(sum(add(y, y)));  // 2x^2 -> 4x
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Tape, TopologicalOrder) {
  const T x({2}, {1, 2}, true);
  const T y = exp(x);
  const T z = sum(mul(y, x));
  const auto tape = record_tape(z);
  ASSERT_EQ(tape.entries.size(), 3u);
  EXPECT_EQ(tape.entries[0].op, "exp");
  EXPECT_EQ(tape.entries[1].op, "mul");
  EXPECT_EQ(tape.entries[2].op, "sum");
  EXPECT_EQ(tape.entries.back().output, z.id());
}

TEST(Tape, NoRecordingWithoutGradients) {
  const T y = exp(T({2}, {1, 2}));
  EXPECT_FALSE(y.requires_grad());
  EXPECT_EQ(y.producer(), nullptr);
}

TEST(GradCheck, SpecExamples) {
  EXPECT_LT(grad_check("matmul", {{2, 3}, {3, 4}}, 0), 1e-4);
  EXPECT_LT(grad_check("layer_norm", {{4, 8}}, 1), 1e-4);
  OpAttrs softmax_axis;
  softmax_axis.values["axis"] = 1;
  EXPECT_LT(grad_check("softmax", {{3, 5}}, 2, softmax_axis), 1e-4);
}

TEST(GradCheck, EveryCatalogOpTenSeeds) {
  std::set<std::string> covered;
  for (const auto& c : default_grad_check_cases()) {
    covered.insert(c.op);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const double err = grad_check(c.op, c.shapes, seed, c.attrs);
      EXPECT_LT(err, 1e-4) << c.op << " seed " << seed;
    }
  }
  for (const auto& name : op_catalog()) EXPECT_TRUE(covered.count(name)) << name;
}

TEST(Invariants, SoftmaxRowsSumToOne) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const T y = softmax(random_tensor({4, 7}, seed), 1);
    for (int r = 0; r < 4; ++r) {
      double s = 0;
      for (int j = 0; j < 7; ++j) {
        const double p = y[r * 7 + j];
        EXPECT_GT(p, 0.0);
        EXPECT_LT(p, 1.0);
        s += p;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Invariants, LayerNormMomentsAndL2Norm) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const T x = add_scalar(scale(random_tensor({5, 16}, seed), 3.0), 2.0);
    const T y = layer_norm(x);
    const T z = l2_normalize(x, 1);
    for (int r = 0; r < 5; ++r) {
      double mu = 0, var = 0, n2 = 0;
      for (int j = 0; j < 16; ++j) mu += y[r * 16 + j] / 16;
      for (int j = 0; j < 16; ++j) var += (y[r * 16 + j] - mu) * (y[r * 16 + j] - mu) / 16;
      for (int j = 0; j < 16; ++j) n2 += z[r * 16 + j] * z[r * 16 + j];
      EXPECT_LT(std::abs(mu), 1e-5);
      EXPECT_NEAR(var, 1.0, 1e-4);
      EXPECT_NEAR(std::sqrt(n2), 1.0, 1e-6);
    }
  }
}

TEST(Invariants, ForwardIsDeterministic) {
  const T x = random_tensor({2, 5, 5}, 4);
  const T w = random_tensor({3, 2, 3, 3}, 5);
  EXPECT_EQ(conv2d(x, w, 1, 1).values(), conv2d(x, w, 1, 1).values());
  EXPECT_EQ(gelu(x).values(), gelu(x).values());
}

TEST(Serialize, RoundTripAndHeaderLayout) {
  const Tensor<float> t({2, 3}, {1, 2, 3, 4, 5, 6});
  const std::string bytes = encode_tensor_bytes(t);
  ASSERT_EQ(bytes.size(), 4u + 4 + 8 + 1 + 24);
  EXPECT_EQ(bytes.substr(0, 4), "VLT1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 2u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[16]), 0u);  // f32 tag
  std::istringstream is(bytes);
  const auto back = read_tensor<float>(is);
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_EQ(back.values(), t.values());
}

TEST(Serialize, TruncatedPayloadReportsOffset) {
  const std::string bytes = encode_tensor_bytes(T({4}, {1, 2, 3, 4}));
  std::istringstream is(bytes.substr(0, bytes.size() - 3));
  try {
    read_tensor<double>(is);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset 37"), std::string::npos) << e.what();
  }
}

TEST(Serialize, BadMagic) {
  std::istringstream is(std::string("XXXX\0\0\0\0", 8));
  EXPECT_THROW(read_tensor<float>(is), ValidationError);
}
