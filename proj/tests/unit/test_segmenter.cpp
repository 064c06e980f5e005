#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <set>

#include "vloss/core/dispatch.hpp"
#include "vloss/core/ops.hpp"
#include "vloss/model/segmenter.hpp"

using namespace vloss;
using T = Tensor<double>;

namespace {

ModelConfig small_cfg(EncoderVariant v = EncoderVariant::fpn_style) {
  ModelConfig c;
  c.dim = 16;
  c.queries = 5;
  c.decoder_layers = 1;
  c.heads = 2;
  c.encoder = v;
  return c;
}

struct Model {
  ParamSet<double> ps;
  Segmenter<double> seg;
};

Model make(const ModelConfig& cfg, std::uint64_t seed = 0) {
  Model m;
  std::mt19937_64 rng(seed);
  m.seg = make_segmenter(m.ps, cfg, rng);
  return m;
}

T random_tensor(const Shape& shape, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  return random_normal<double>(shape, sd, rng);
}

T random_image(Index h, Index w, std::uint64_t seed, bool coords = true) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0, 1);
  std::vector<float> v(h * w * 3);
  for (auto& x : v) x = u(rng);
  return image_to_input<double>(Tensor<float>({h, w, 3}, v), coords);
}

void set(T t, const std::vector<double>& v) {
  auto d = t.mutable_data();
  ASSERT_EQ(d.size(), v.size());
  std::copy(v.begin(), v.end(), d.begin());
}

void fill(T t, double v) {
  for (auto& x : t.mutable_data()) x = v;
}

// Independent x2 bilinear resize (half-pixel centers, clamped edges).
std::vector<double> upsample2(const std::vector<double>& src, Index c, Index h, Index w) {
  std::vector<double> out(c * 4 * h * w);
  auto coord = [](Index i, Index n, Index& i0, Index& i1, double& f) {
    double s = (i + 0.5) / 2.0 - 0.5;
    s = std::max(0.0, s);
    i0 = std::min<Index>(static_cast<Index>(std::floor(s)), n - 1);
    i1 = std::min<Index>(i0 + 1, n - 1);
    f = s - i0;
  };
  for (Index ch = 0; ch < c; ++ch)
    for (Index y = 0; y < 2 * h; ++y)
      for (Index x = 0; x < 2 * w; ++x) {
        Index y0, y1, x0, x1;
        double fy, fx;
        coord(y, h, y0, y1, fy);
        coord(x, w, x0, x1, fx);
        auto at = [&](Index yy, Index xx) { return src[(ch * h + yy) * w + xx]; };
        out[(ch * 2 * h + y) * 2 * w + x] = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                                            fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
      }
  return out;
}

}  // namespace

TEST(Backbone, StrideShapes) {
  ModelConfig c = small_cfg();
  c.dim = 32;
  c.heads = 4;
  Model m = make(c);
  const auto pyr = m.seg.extract_features(random_image(64, 64, 1));
  EXPECT_EQ(pyr.levels[0].shape(), (Shape{32, 2, 2}));
  EXPECT_EQ(pyr.levels[1].shape(), (Shape{32, 4, 4}));
  EXPECT_EQ(pyr.levels[2].shape(), (Shape{32, 8, 8}));
  EXPECT_EQ(pyr.levels[3].shape(), (Shape{32, 16, 16}));
  const auto tall = m.seg.extract_features(random_image(96, 64, 2));
  EXPECT_EQ(tall.levels[0].shape(), (Shape{32, 3, 2}));
  EXPECT_EQ(tall.levels[3].shape(), (Shape{32, 24, 16}));
  EXPECT_THROW(m.seg.extract_features(random_image(48, 64, 2)), ValidationError);
}

TEST(Backbone, ZeroImageGivesZeroFeatures) {
  ModelConfig c = small_cfg();
  c.coord_channels = false;
  Model m = make(c);
  const auto pyr = m.seg.extract_features(T::zeros({3, 64, 64}));
  for (const auto& lv : pyr.levels)
    for (double v : lv.data()) EXPECT_EQ(v, 0.0);
}

TEST(Encoder, PreservesShapesAndVariantsDiffer) {
  const Model style = make(small_cfg(EncoderVariant::fpn_style), 3);
  const Model plain = make(small_cfg(EncoderVariant::fpn_plain), 3);
  const auto pyr = style.seg.extract_features(random_image(64, 64, 4));
  const auto a = style.seg.encode_multiscale(pyr), b = plain.seg.encode_multiscale(pyr);
  double diff = 0;
  for (Index l = 0; l < 4; ++l) {
    EXPECT_EQ(a.levels[l].shape(), pyr.levels[l].shape());
    EXPECT_EQ(b.levels[l].shape(), pyr.levels[l].shape());
  }
  for (Index i = 0; i < a.levels[0].numel(); ++i) diff = std::max(diff, std::abs(a.levels[0][i] - b.levels[0][i]));
  EXPECT_GT(diff, 1e-3);
  EXPECT_EQ(b.levels[0].values(), pyr.levels[0].values());
  EXPECT_THROW(parse_encoder_variant("deformable"), ValidationError);
}

TEST(Encoder, PlainTopDownRecursionByHand) {
  ModelConfig c = small_cfg(EncoderVariant::fpn_plain);
  c.dim = 4;
  c.heads = 1;
  Model m = make(c);
  const Index d = 4;
  for (Index l = 0; l < 3; ++l) {
    std::vector<double> eye(d * d, 0.0), center(d * d * 9, 0.0);
    for (Index i = 0; i < d; ++i) {
      eye[i * d + i] = 1;
      center[(i * d + i) * 9 + 4] = 1;
    }
    set(m.seg.lateral[l].w, eye);
    set(m.seg.smooth[l].w, center);
  }
  FeaturePyramid<double> pyr;
  for (Index l = 0; l < 4; ++l) pyr.levels[l] = random_tensor({d, Index(2) << l, Index(2) << l}, 10 + l);
  const auto out = m.seg.encode_multiscale(pyr);
  // f_l' = f_l + up(f_{l-1}')
  std::vector<double> prev = pyr.levels[0].values();
  for (Index l = 1; l < 4; ++l) {
    const Index hw = Index(1) << l;
    const auto up = upsample2(prev, d, hw, hw);
    std::vector<double> want(up.size());
    for (std::size_t i = 0; i < up.size(); ++i) want[i] = pyr.levels[l][i] + up[i];
    for (std::size_t i = 0; i < want.size(); ++i) ASSERT_NEAR(out.levels[l][i], want[i], 1e-12) << l;
    prev = want;
  }
}

TEST(GlobalPool, Examples) {
  EXPECT_EQ(global_pool(T::full({3, 4, 4}, 2.5)).values(), (std::vector<double>{2.5, 2.5, 2.5}));
  const T one = random_tensor({3, 1, 1}, 1);
  EXPECT_EQ(global_pool(one).values(), one.values());
  std::vector<double> checker(2 * 4 * 4);
  for (Index c = 0; c < 2; ++c)
    for (Index y = 0; y < 4; ++y)
      for (Index x = 0; x < 4; ++x) checker[(c * 4 + y) * 4 + x] = (x + y) % 2 ? 1.0 : -1.0;
  EXPECT_EQ(global_pool(T({2, 4, 4}, checker)).values(), (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(global_pool(one).shape(), (Shape{1, 3}));
}

TEST(Decoder, ShapesAndIdentityWithoutLayers) {
  const Model m = make(small_cfg(), 5);
  const auto refined = m.seg.encode_multiscale(m.seg.extract_features(random_image(64, 64, 6)));
  const T q0 = random_tensor({5, 16}, 7), g0 = random_tensor({1, 16}, 8);
  const auto qs = m.seg.decode_queries(q0, g0, refined);
  EXPECT_EQ(qs.e_obj.shape(), (Shape{5, 16}));
  EXPECT_EQ(qs.e_img.shape(), (Shape{1, 16}));
  ModelConfig c = small_cfg();
  c.decoder_layers = 0;
  const Model id = make(c, 5);
  const auto same = id.seg.decode_queries(q0, g0, refined);
  EXPECT_EQ(same.e_obj.values(), q0.values());
  EXPECT_EQ(same.e_img.values(), g0.values());
  EXPECT_THROW(m.seg.decode_queries(random_tensor({5, 8}, 1), g0, refined), ValidationError);
}

TEST(Decoder, QueryPermutationEquivariance) {
  ModelConfig c = small_cfg();
  c.decoder_layers = 2;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const Model m = make(c, seed);
    const auto refined = m.seg.encode_multiscale(m.seg.extract_features(random_image(64, 64, seed + 20)));
    const T q0 = random_tensor({5, 16}, seed + 30), g0 = global_pool(refined.levels[0]);
    const std::vector<Index> perm{3, 0, 4, 1, 2};
    const T pq0 = embedding_lookup(q0, perm);
    const auto a = m.seg.decode_queries(q0, g0, refined), b = m.seg.decode_queries(pq0, g0, refined);
    const T ma = m.seg.predict_masks(a.e_obj, refined.levels[3]), mb = m.seg.predict_masks(b.e_obj, refined.levels[3]);
    const T e_cls = random_tensor({4, 16}, seed + 40);
    const T ca = m.seg.classify(a.e_obj, e_cls), cb = m.seg.classify(b.e_obj, e_cls);
    const Index hw = ma.numel() / 5;
    for (Index i = 0; i < 5; ++i) {
      for (Index d = 0; d < 16; ++d) ASSERT_NEAR(b.e_obj[i * 16 + d], a.e_obj[perm[i] * 16 + d], 1e-12);
      for (Index p = 0; p < hw; ++p) ASSERT_NEAR(mb[i * hw + p], ma[perm[i] * hw + p], 1e-12);
      for (Index k = 0; k < 4; ++k) ASSERT_NEAR(cb[i * 4 + k], ca[perm[i] * 4 + k], 1e-12);
    }
    for (Index d = 0; d < 16; ++d) ASSERT_NEAR(a.e_img[d], b.e_img[d], 1e-12);
  }
}

TEST(MaskHead, InnerProductExamples) {
  ModelConfig c = small_cfg();
  c.mask_mlp = false;
  const Model m = make(c);
  const T f3 = random_tensor({16, 4, 4}, 1);
  std::vector<double> onehot(16, 0.0);
  onehot[5] = 1;
  const T mk = m.seg.predict_masks(T({1, 16}, onehot), f3);
  for (Index p = 0; p < 16; ++p) EXPECT_EQ(mk[p], f3[5 * 16 + p]);
  const T zero_masks = m.seg.predict_masks(T::zeros({2, 16}), f3);
  for (double v : zero_masks.data()) EXPECT_EQ(v, 0.0);
  const T q = random_tensor({1, 16}, 2);
  const T single = m.seg.predict_masks(q, f3), doubled = m.seg.predict_masks(scale(q, 2.0), f3);
  for (Index p = 0; p < 16; ++p) EXPECT_NEAR(doubled[p], 2 * single[p], 1e-12);
  // superposition for the literal head
  const T q2 = random_tensor({1, 16}, 3);
  const T sum_mask = m.seg.predict_masks(add(q, q2), f3), m2 = m.seg.predict_masks(q2, f3);
  for (Index p = 0; p < 16; ++p) EXPECT_NEAR(sum_mask[p], single[p] + m2[p], 1e-12);
  EXPECT_THROW(m.seg.predict_masks(T::zeros({2, 8}), f3), ValidationError);
}

TEST(Classifier, OrthonormalArgmaxAndExtension) {
  std::vector<double> eye(9, 0.0);
  for (Index i = 0; i < 3; ++i) eye[i * 3 + i] = 1;
  const T e_cls({3, 3}, eye);
  const T c = classify_queries(T({1, 3}, {0, 1, 0}), e_cls);
  EXPECT_EQ(c.shape(), (Shape{1, 3}));
  EXPECT_EQ(c[1], 1.0);
  EXPECT_EQ(c[0], 0.0);
  const T e_obj = random_tensor({4, 3}, 1), base = random_tensor({3, 3}, 2);
  const T ext = concat(std::vector<T>{base, random_tensor({1, 3}, 3)}, 0);
  const T c1 = classify_queries(e_obj, base), c2 = classify_queries(e_obj, ext);
  for (Index q = 0; q < 4; ++q)
    for (Index k = 0; k < 3; ++k) EXPECT_EQ(c1[q * 3 + k], c2[q * 4 + k]);
  const T scaled = classify_queries(T({1, 3}, {0, 2, 0}), e_cls, T::scalar(std::log(10.0)));
  EXPECT_NEAR(scaled[1], 10.0, 1e-12);
}

TEST(Segmenter, ForwardGradientsMatchFiniteDifferences) {
  ModelConfig c = small_cfg();
  c.dim = 8;
  c.queries = 3;
  Model m = make(c, 9);
  const T input = random_image(32, 32, 10);
  const T w = random_tensor({3, 8, 8}, 11);
  for (const char* name : {"decoder.query_init", "encoder.smooth3.w", "mask_head.fc2.w"}) {
    const T init = m.ps.at(name).value;
    const double err = grad_check_fn(
        [&](const std::vector<T>& in) {
          Segmenter<double> s = m.seg;
          if (std::string(name) == "decoder.query_init") s.query_init = in[0];
          if (std::string(name) == "encoder.smooth3.w") s.smooth[2].w = in[0];
          if (std::string(name) == "mask_head.fc2.w") s.mask_mlp[2].w = in[0];
          const auto out = s.forward(input);
          return add(sum(mul(out.mask_logits, w)), sum(out.e_img));
        },
        {T(init.shape(), init.values())}, 4);
    EXPECT_LT(err, 1e-4) << name;
  }
}

// ---- inference ----

namespace {

LabelSpace toy_labels() { return LabelSpace{{"cat", "dog", "sky"}, {true, true, false}}; }

}  // namespace

TEST(PanopticInference, SingleConfidentQuery) {
  // query 0: cat with prob 0.9 and mask > 0.5 on the left column; query 1: no-object
  const double l9 = std::log(0.9 / (0.1 / 3));
  const T c({2, 4}, {l9, 0, 0, 0, 0, 0, 0, 5});
  const T m({2, 2, 2}, {4, -4, 4, -4, 4, 4, 4, 4});
  const PanopticSeg seg = panoptic_inference(c, m, toy_labels());
  ASSERT_EQ(seg.segments.size(), 1u);
  EXPECT_EQ(seg.segments[0].category, 0);
  EXPECT_NEAR(seg.segments[0].score, 0.9, 1e-12);
  EXPECT_EQ(seg.label_map, (std::vector<Index>{1, 0, 1, 0}));
}

TEST(PanopticInference, AllNoObjectIsVoid) {
  const T c({2, 4}, {0, 0, 0, 5, 0, 0, 0, 5});
  const PanopticSeg seg = panoptic_inference(c, random_tensor({2, 3, 3}, 1), toy_labels());
  EXPECT_TRUE(seg.segments.empty());
  for (Index v : seg.label_map) EXPECT_EQ(v, 0);
}

TEST(PanopticInference, DisjointQueriesAndStuffMerging) {
  const T c({3, 4}, {6, 0, 0, 0, 0, 0, 6, 0, 0, 0, 6, 0});
  // query 0 top row, queries 1 and 2 (both sky) split the bottom row
  const T m({3, 2, 2}, {5, 5, -5, -5, -5, -5, 5, -5, -5, -5, -5, 5});
  const PanopticSeg seg = panoptic_inference(c, m, toy_labels());
  ASSERT_EQ(seg.segments.size(), 2u);
  EXPECT_EQ(seg.label_map, (std::vector<Index>{1, 1, 2, 2}));
  EXPECT_FALSE(seg.segments[1].is_thing);
  const PanopticSeg back = PanopticSeg::from_json(seg.to_json());
  EXPECT_EQ(back.label_map, seg.label_map);
  EXPECT_EQ(back.segments.size(), 2u);
}

TEST(PanopticInference, OverlapFilterDropsMostlyHiddenSegments) {
  // query 1 is less confident and loses 3 of its 4 pixels to query 0
  const T c({2, 4}, {8, 0, 0, 0, 0, 3, 0, 0});
  const T m({2, 2, 2}, {5, 5, 5, -5, 5, 5, 5, 5});
  const PanopticSeg seg = panoptic_inference(c, m, toy_labels());
  ASSERT_EQ(seg.segments.size(), 1u);
  EXPECT_EQ(seg.label_map, (std::vector<Index>{1, 1, 1, 0}));
}

TEST(PanopticInference, PartitionOverRandomInputs) {
  for (std::uint64_t s = 0; s < 30; ++s) {
    const T c = random_tensor({6, 4}, s, 3.0), m = random_tensor({6, 5, 5}, s + 100, 3.0);
    const PanopticSeg seg = panoptic_inference(c, m, toy_labels());
    std::set<Index> ids{0};
    for (const auto& sgm : seg.segments) EXPECT_TRUE(ids.insert(sgm.id).second);
    for (Index v : seg.label_map) EXPECT_TRUE(ids.count(v));
  }
}

TEST(InstanceInference, SortedClampedDominant) {
  const T c({2, 4}, {9, 0, 0, 0, 0, 1, 0, 0});
  const T m({2, 2, 2}, {6, 6, -6, -6, 1, 1, 1, 1});
  const auto all = instance_inference(c, m, toy_labels(), 100);
  EXPECT_EQ(all.size(), 4u);  // 2 queries x 2 thing classes
  EXPECT_EQ(all[0].query, 0);
  EXPECT_EQ(all[0].category, 0);
  for (std::size_t i = 1; i < all.size(); ++i) EXPECT_GE(all[i - 1].score, all[i].score);
  EXPECT_EQ(instance_inference(c, m, toy_labels(), 1).size(), 1u);
}

TEST(Segmenter, FloatForwardBackwardIsQuick) {
  ModelConfig c;
  c.dim = 32;
  c.queries = 10;
  ParamSet<float> ps;
  std::mt19937_64 rng(0);
  const Segmenter<float> seg = make_segmenter(ps, c, rng);
  const Tensor<float> input = image_to_input<float>(Tensor<float>::full({64, 64, 3}, 0.5f), true);
  const auto t0 = std::chrono::steady_clock::now();
  const auto out = seg.forward(input);
  backward(sum(bilinear_upsample(out.mask_logits, 4)));
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  std::printf("forward+backward: %.1f ms, %lld params\n", ms, static_cast<long long>(ps.count()));
  EXPECT_LT(ms, 2000.0);
}
