#include <gtest/gtest.h>

#include <cmath>

#include "vloss/core/dispatch.hpp"
#include "vloss/core/ops.hpp"
#include "vloss/text/text_encoder.hpp"

using namespace vloss;
using T = Tensor<double>;

namespace {

struct Fixture {
  ParamSet<double> ps;
  Vocabulary vocab;
  TextEncoder<double> enc;
  T no_object;
};

Fixture make(Index layers = 2, std::uint64_t seed = 1, TextPooling pooling = TextPooling::eos) {
  Fixture f;
  f.vocab = build_vocab({"a photo of a red circle", "a green triangle on a sky", "blue rectangle grass"});
  TextEncoderConfig cfg;
  cfg.dim = 16;
  cfg.layers = layers;
  cfg.heads = 4;
  cfg.pooling = pooling;
  std::mt19937_64 rng(seed);
  f.enc = make_text_encoder(f.ps, cfg, f.vocab.size(), rng);
  f.no_object = f.ps.add("no_object", random_normal<double>({1, 16}, 0.5, rng), ParamGroup::main, false);
  return f;
}

void fill(T t, double v) {
  for (auto& x : t.mutable_data()) x = v;
}

}  // namespace

TEST(Vocab, ReservedThenFrequencyThenLexicographic) {
  const Vocabulary v = build_vocab({"a cat", "a dog"});
  EXPECT_EQ(v.tokens, (std::vector<std::string>{"<pad>", "<bos>", "<eos>", "<unk>", "a", "cat", "dog"}));
  EXPECT_EQ(v.id("zebra"), Vocabulary::kUnk);
}

TEST(Vocab, MinCountFilters) {
  const Vocabulary v = build_vocab({"x x", "y"}, 2);
  EXPECT_NE(v.id("x"), Vocabulary::kUnk);
  EXPECT_EQ(v.id("y"), Vocabulary::kUnk);
}

TEST(Vocab, DeterministicAndPersisted) {
  const std::vector<std::string> corpus{"The sky, the GRASS.", "a red circle"};
  const Vocabulary a = build_vocab(corpus), b = build_vocab(corpus);
  EXPECT_EQ(a, b);
  EXPECT_EQ(Vocabulary::from_json(a.to_json()), a);
  EXPECT_EQ(a.tokens[4], "the");
  EXPECT_THROW(build_vocab({}), ValidationError);
  EXPECT_THROW(Vocabulary::from_json("{\"a\": 0}"), ValidationError);
  EXPECT_THROW(Vocabulary::from_json("{\"a\": "), ValidationError);
}

TEST(Tokenize, WrapsWithBosEos) {
  const Vocabulary v = build_vocab({"a cat"});
  EXPECT_EQ(tokenize("a cat", v), (std::vector<Index>{1, v.id("a"), v.id("cat"), 2}));
  EXPECT_EQ(tokenize("", v), (std::vector<Index>{1, 2}));
  EXPECT_EQ(tokenize("A dog!", v), (std::vector<Index>{1, v.id("a"), 3, 2}));
}

TEST(Tokenize, TruncatesKeepingEos) {
  const Vocabulary v = build_vocab({"w"});
  std::string text;
  for (int i = 0; i < 60; ++i) text += "w ";
  const auto ids = tokenize(text, v, 48);
  EXPECT_EQ(ids.size(), 48u);
  EXPECT_EQ(ids.back(), Vocabulary::kEos);
  EXPECT_EQ(ids.front(), Vocabulary::kBos);
}

TEST(TextEncoder, DeterministicWithShapeD) {
  const Fixture f = make();
  for (const char* s : {"", "a red circle", "a green triangle on a sky and a blue rectangle"}) {
    const auto ids = tokenize(s, f.vocab);
    const T a = f.enc.encode({ids}), b = f.enc.encode({ids});
    EXPECT_EQ(a.shape(), (Shape{1, 16}));
    EXPECT_EQ(a.values(), b.values());
  }
}

TEST(TextEncoder, RejectsOutOfRangeIds) {
  const Fixture f = make();
  EXPECT_THROW(f.enc.encode({{1, f.vocab.size(), 2}}), ValidationError);
}

TEST(TextEncoder, SingleInertLayerIsNormalizedEosEmbedding) {
  // zero output projections make the block an identity; an identity head leaves layer_norm(tok + pos)
  Fixture f = make(1);
  fill(f.enc.blocks[0].attn.o.w, 0);
  fill(f.enc.blocks[0].ffn.down.w, 0);
  auto proj = f.enc.proj.w.mutable_data();
  for (Index i = 0; i < 16; ++i)
    for (Index j = 0; j < 16; ++j) proj[i * 16 + j] = i == j ? 1.0 : 0.0;
  const auto ids = tokenize("a red circle", f.vocab);
  const Index last = static_cast<Index>(ids.size()) - 1;
  const T out = f.enc.encode({ids});
  std::vector<double> x(16);
  double mu = 0, var = 0;
  for (Index d = 0; d < 16; ++d) {
    x[d] = f.enc.token_emb[Vocabulary::kEos * 16 + d] + f.enc.pos_emb[last * 16 + d];
    mu += x[d] / 16;
  }
  for (Index d = 0; d < 16; ++d) var += (x[d] - mu) * (x[d] - mu) / 16;
  for (Index d = 0; d < 16; ++d) EXPECT_NEAR(out[d], (x[d] - mu) / std::sqrt(var + 1e-5), 1e-12);
}

TEST(TextEncoder, SensitiveToTokenOrder) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (auto pool : {TextPooling::eos, TextPooling::mean}) {
      Fixture g = make(2, seed, pool);
      const T a = g.enc.encode({tokenize("red circle", g.vocab)});
      const T b = g.enc.encode({tokenize("circle red", g.vocab)});
      double diff = 0;
      for (Index i = 0; i < 16; ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
      EXPECT_GT(diff, 1e-6);
    }
  }
}

TEST(ClassEmbeddings, RowsFollowNamesAndNoObjectLast) {
  const Fixture f = make();
  const T e = build_class_embeddings({"red circle", "sky"}, kDefaultPromptTemplate, f.vocab, f.enc, f.no_object);
  EXPECT_EQ(e.shape(), (Shape{3, 16}));
  const T p = build_class_embeddings({"sky", "red circle"}, kDefaultPromptTemplate, f.vocab, f.enc, f.no_object);
  for (Index d = 0; d < 16; ++d) {
    EXPECT_EQ(e[d], p[16 + d]);
    EXPECT_EQ(e[16 + d], p[d]);
    EXPECT_EQ(e[32 + d], f.no_object[d]);
    EXPECT_EQ(p[32 + d], f.no_object[d]);
  }
  EXPECT_THROW(build_class_embeddings({"sky", "sky"}, kDefaultPromptTemplate, f.vocab, f.enc, f.no_object),
               ValidationError);
}

TEST(ClassEmbeddings, ExtensionKeepsExistingRowsBitIdentical) {
  const Fixture f = make();
  const T base = build_class_embeddings({"red circle", "sky"}, kDefaultPromptTemplate, f.vocab, f.enc, f.no_object);
  const T ext =
      build_class_embeddings({"red circle", "sky", "red rectangle"}, kDefaultPromptTemplate, f.vocab, f.enc, f.no_object);
  EXPECT_EQ(ext.shape(), (Shape{4, 16}));
  for (Index i = 0; i < 32; ++i) EXPECT_EQ(base[i], ext[i]);
  EXPECT_EQ(format_prompt(kDefaultPromptTemplate, "cat"), "a photo of a cat.");
}

TEST(TextEncoder, GradientsReachEveryWeight) {
  Fixture f = make(1);
  const auto ids = tokenize("a red circle on a sky", f.vocab);
  const T loss = sum(mul(f.enc.encode({ids}), f.enc.encode({ids})));
  backward(loss);
  for (const auto& p : f.ps.items()) {
    if (p.name == "no_object") continue;
    EXPECT_TRUE(p.value.has_grad()) << p.name;
  }
  // finite differences through the whole encoder w.r.t. the positional table
  const double err = grad_check_fn(
      [&](const std::vector<T>& in) {
        TextEncoder<double> e = f.enc;
        e.pos_emb = in[0];
        return sum(e.encode({ids}));
      },
      {T(f.enc.pos_emb.shape(), f.enc.pos_emb.values())}, 3);
  EXPECT_LT(err, 1e-4);
}
