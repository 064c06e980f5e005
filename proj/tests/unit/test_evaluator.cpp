#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "vloss/verify/metric_reference.hpp"
#include "vloss/eval/evaluator.hpp"
#include "vloss/train/trainer.hpp"

using namespace vloss;

namespace {

Mask mask_from(Index h, Index w, std::initializer_list<Index> on) {
  Mask m(h, w);
  for (Index i : on) m.px[i] = 1;
  return m;
}

// One image, label map given row-major, segments (id, category) in id order.
PanopticSeg seg(Index h, Index w, std::vector<Index> map, std::vector<std::pair<Index, Index>> segs,
                const LabelSpace& l) {
  PanopticSeg s;
  s.h = h;
  s.w = w;
  s.label_map = std::move(map);
  for (auto [id, c] : segs) s.segments.push_back({id, c, static_cast<bool>(l.is_thing[c]), 1.0});
  return s;
}

LabelSpace two_class() {
  LabelSpace l;
  l.add("thing", true);
  l.add("stuff", false);
  return l;
}

std::vector<vloss::ref::Inst> as_ref(const std::vector<Detection>& d) {
  std::vector<vloss::ref::Inst> out;
  for (const auto& x : d) out.push_back({x.image, x.category, x.score, x.mask});
  return out;
}

std::vector<vloss::ref::Inst> as_ref(const std::vector<GtInstance>& g) {
  std::vector<vloss::ref::Inst> out;
  for (const auto& x : g) out.push_back({x.image, x.category, 1.0, x.mask});
  return out;
}

}  // namespace

// ---- IoU ----

TEST(Iou, HandValues) {
  EXPECT_EQ(compute_iou(mask_from(1, 3, {0, 1}), mask_from(1, 3, {1, 2})), 1.0 / 3.0);
  EXPECT_EQ(compute_iou(mask_from(1, 3, {0}), mask_from(1, 3, {2})), 0.0);
  EXPECT_EQ(compute_iou(Mask(2, 2), Mask(2, 2)), 0.0);
  EXPECT_THROW(compute_iou(Mask(2, 2), Mask(2, 3)), ValidationError);
}

TEST(Iou, SymmetricAndSelfOne) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 200; ++t) {
    const Mask a = vloss::ref::random_mask(rng, 4, 5, 0.4), b = vloss::ref::random_mask(rng, 4, 5, 0.4);
    EXPECT_EQ(compute_iou(a, b), compute_iou(b, a));
    if (a.area() > 0) EXPECT_EQ(compute_iou(a, a), 1.0);
  }
}

// ---- PQ ----

TEST(PanopticQuality, PerfectIsOne) {
  const LabelSpace l = two_class();
  const auto g = seg(2, 3, {1, 1, 2, 1, 2, 2}, {{1, 0}, {2, 1}}, l);
  const auto r = panoptic_quality({g}, {g}, l);
  EXPECT_EQ(r.pq_all, 1.0);
  EXPECT_EQ(r.pq_th, 1.0);
  EXPECT_EQ(r.pq_st, 1.0);
}

TEST(PanopticQuality, MatchPlusFalsePositive) {
  // GT thing covers 5 pixels; one prediction covers 4 of them (IoU 0.8) and a
  // second same-class prediction sits on ground.
  LabelSpace l2;
  l2.add("thing", true);
  l2.add("ground", false);
  const auto gt = seg(2, 5, {1, 1, 1, 1, 1, 2, 2, 2, 2, 2}, {{1, 0}, {2, 1}}, l2);
  const auto pred = seg(2, 5, {1, 1, 1, 1, 0, 2, 2, 0, 0, 0}, {{1, 0}, {2, 0}}, l2);
  const auto r = panoptic_quality({pred}, {gt}, l2);
  const ClassPQ* c = r.find(0);
  ASSERT_NE(c, nullptr);
  EXPECT_EQ(c->tp, 1);
  EXPECT_EQ(c->fp, 1);
  EXPECT_NEAR(c->pq, 0.8 / 1.5, 1e-12);
  EXPECT_NEAR(c->pq, c->sq * c->rq, 1e-12);
}

TEST(PanopticQuality, IouBelowHalfIsUnmatched) {
  LabelSpace l;
  l.add("thing", true);
  l.add("ground", false);
  // GT thing: 5 pixels. Prediction: 2 of them + 0 others -> IoU 0.4.
  const auto gt = seg(1, 10, {1, 1, 1, 1, 1, 2, 2, 2, 2, 2}, {{1, 0}, {2, 1}}, l);
  const auto pred = seg(1, 10, {1, 1, 0, 0, 0, 2, 2, 2, 2, 2}, {{1, 0}, {2, 1}}, l);
  const auto r = panoptic_quality({pred}, {gt}, l);
  const ClassPQ* c = r.find(0);
  ASSERT_NE(c, nullptr);
  EXPECT_EQ(c->tp, 0);
  EXPECT_EQ(c->fp, 1);
  EXPECT_EQ(c->fn, 1);
  EXPECT_EQ(c->pq, 0.0);
}

TEST(PanopticQuality, VoidExcludedFromUnion) {
  LabelSpace l;
  l.add("thing", true);
  // GT: 2 thing pixels, 2 VOID. Prediction covers all 4: IoU = 2 / (4 + 2 - 2 - 2) = 1.
  const auto gt = seg(1, 4, {1, 1, 0, 0}, {{1, 0}}, l);
  const auto pred = seg(1, 4, {1, 1, 1, 1}, {{1, 0}}, l);
  const auto r = panoptic_quality({pred}, {gt}, l);
  EXPECT_EQ(r.pq_all, 1.0);
}

TEST(PanopticQuality, MostlyVoidPredictionIsNotFalsePositive) {
  LabelSpace l;
  l.add("thing", true);
  const auto gt = seg(1, 6, {1, 1, 0, 0, 0, 0}, {{1, 0}}, l);
  const auto pred = seg(1, 6, {1, 1, 0, 2, 2, 2}, {{1, 0}, {2, 0}}, l);
  const auto r = panoptic_quality({pred}, {gt}, l);
  EXPECT_EQ(r.find(0)->fp, 0);
  EXPECT_EQ(r.pq_all, 1.0);
}

TEST(PanopticQuality, UnknownClassRejected) {
  const LabelSpace l = two_class();
  PanopticSeg g = seg(1, 2, {1, 1}, {{1, 0}}, l);
  g.segments[0].category = 5;
  EXPECT_THROW(panoptic_quality({g}, {g}, l), ValidationError);
  EXPECT_THROW(panoptic_quality({g, g}, {g}, l), ValidationError);
}

TEST(PanopticQuality, MatchesBruteForceReference) {
  const LabelSpace l = vloss::ref::small_labels();
  std::mt19937_64 rng(2024);
  for (int t = 0; t < 100; ++t) {
    std::vector<PanopticSeg> preds, gts;
    const int images = 1 + t % 3;
    for (int i = 0; i < images; ++i) {
      gts.push_back(vloss::ref::random_partition(rng, 4, 5, 5, l));
      preds.push_back(vloss::ref::perturb(rng, gts.back(), l));
    }
    const auto got = panoptic_quality(preds, gts, l);
    const auto want = vloss::ref::panoptic_quality(preds, gts, l);
    ASSERT_EQ(got.pq_all, want.all) << "case " << t;
    ASSERT_EQ(got.pq_th, want.th) << "case " << t;
    ASSERT_EQ(got.pq_st, want.st) << "case " << t;
    for (Index k = 0; k < l.size(); ++k) {
      const ClassPQ* c = got.find(k);
      ASSERT_EQ(c ? c->pq : -1.0, want.per_class[k]) << "case " << t << " class " << k;
      if (c) {
        EXPECT_NEAR(c->pq, c->sq * c->rq, 1e-12);
        EXPECT_GE(c->pq, 0.0);
        EXPECT_LE(c->pq, 1.0);
      }
    }
  }
}

TEST(PanopticQuality, MatchingIsUniqueAboveHalf) {
  // Over random partitions, no GT segment has two predictions with IoU > 0.5
  // and no prediction has two GT segments with IoU > 0.5.
  const LabelSpace l = vloss::ref::small_labels();
  std::mt19937_64 rng(77);
  for (int t = 0; t < 2000; ++t) {
    const auto g = vloss::ref::random_partition(rng, 4, 4, 6, l);
    const auto p = vloss::ref::perturb(rng, g, l);
    const SegMatch m = match_segments(p, g);
    std::map<Index, int> pc, gc;
    for (const auto& x : m.tp) {
      ++pc[x.pred_id];
      ++gc[x.gt_id];
    }
    for (auto [id, n] : pc) ASSERT_EQ(n, 1) << "case " << t;
    for (auto [id, n] : gc) ASSERT_EQ(n, 1) << "case " << t;
  }
}

TEST(PanopticQuality, ReportSerialises) {
  const LabelSpace l = two_class();
  const auto g = seg(2, 3, {1, 1, 2, 1, 2, 2}, {{1, 0}, {2, 1}}, l);
  const auto r = panoptic_quality({g}, {g}, l);
  const auto j = r.to_json();
  EXPECT_EQ(j["PQ_all"].get<double>(), 1.0);
  EXPECT_EQ(j["per_class"].size(), 2u);
  const std::string csv = r.to_csv();
  EXPECT_NE(csv.find("class,thing,1,1"), std::string::npos);
  EXPECT_EQ(r.to_csv(false).find("class,"), std::string::npos);
}

// ---- AP ----

TEST(MaskAp, ExactDetectionIsOne) {
  const Mask m = mask_from(2, 2, {0, 1});
  const auto r = mask_ap({{0, 0, 0.9, m}}, {{0, 0, m}});
  EXPECT_EQ(r.ap, 1.0);
  EXPECT_EQ(r.ap50, 1.0);
  EXPECT_EQ(r.ap75, 1.0);
  EXPECT_FALSE(r.empty);
}

TEST(MaskAp, ThresholdStraddling) {
  // |G| = 5, |D| = 3 inside G: IoU 0.6.
  const Mask g = mask_from(1, 5, {0, 1, 2, 3, 4}), d = mask_from(1, 5, {0, 1, 2});
  const auto r = mask_ap({{0, 0, 0.9, d}}, {{0, 0, g}});
  EXPECT_EQ(r.ap50, 1.0);
  EXPECT_EQ(r.ap75, 0.0);
  // 0.50, 0.55, 0.60 pass
  EXPECT_NEAR(r.ap, 0.3, 1e-12);
  EXPECT_LE(r.ap, r.ap50);
}

TEST(MaskAp, OneOfTwoFound) {
  const Mask a = mask_from(1, 4, {0, 1}), b = mask_from(1, 4, {2, 3});
  const auto r = mask_ap({{0, 0, 0.9, a}}, {{0, 0, a}, {0, 0, b}});
  // precision 1 for recall levels 0.00..0.50 (51 of 101 points)
  EXPECT_NEAR(r.ap50, 51.0 / 101.0, 1e-12);
}

TEST(MaskAp, EmptyFlagged) {
  const auto r = mask_ap({}, {});
  EXPECT_TRUE(r.empty);
  EXPECT_EQ(r.ap, 0.0);
}

TEST(MaskAp, MatchesBruteForceReference) {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0, 1);
  const auto thr = coco_iou_thresholds();
  for (int t = 0; t < 100; ++t) {
    std::vector<GtInstance> gts;
    std::vector<Detection> dets;
    const int images = 1 + t % 3;
    for (int im = 0; im < images; ++im) {
      const int ng = 1 + static_cast<int>(u(rng) * 3);
      for (int k = 0; k < ng; ++k) {
        const Index c = static_cast<Index>(u(rng) * 3);
        gts.push_back({im, c, vloss::ref::random_mask(rng, 3, 4, 0.5)});
        // a noisy copy, sometimes with the wrong class
        Mask m = gts.back().mask;
        for (auto& v : m.px)
          if (u(rng) < 0.15) v ^= 1;
        dets.push_back({im, u(rng) < 0.8 ? c : static_cast<Index>(u(rng) * 3), u(rng), m});
      }
      const int nf = static_cast<int>(u(rng) * 3);
      for (int k = 0; k < nf; ++k)
        dets.push_back({im, static_cast<Index>(u(rng) * 3), u(rng), vloss::ref::random_mask(rng, 3, 4, 0.5)});
    }
    const auto got = mask_ap(dets, gts, thr);
    const auto want = vloss::ref::mask_ap(as_ref(dets), as_ref(gts), thr);
    ASSERT_EQ(got.ap, want.ap) << "case " << t;
    for (std::size_t k = 0; k < thr.size(); ++k) ASSERT_EQ(got.ap_per_threshold[k], want.per_threshold[k]);
    EXPECT_LE(got.ap, got.ap50 + 1e-15);
    EXPECT_GE(got.ap, 0.0);
    EXPECT_LE(got.ap50, 1.0);
  }
}

TEST(MaskAp, FrequencyBuckets) {
  EXPECT_EQ(frequency_buckets({1, 5, 9}), (std::vector<int>{0, 1, 2}));
  const Mask m = mask_from(1, 2, {0});
  const auto r = mask_ap({{0, 0, 1.0, m}}, {{0, 0, m}, {0, 1, m}}, coco_iou_thresholds(), {0, 2});
  ASSERT_TRUE(r.buckets.has_value());
  EXPECT_DOUBLE_EQ((*r.buckets)[0], 1.0);
  EXPECT_EQ((*r.buckets)[2], 0.0);
  EXPECT_THROW(mask_ap({}, {{0, 3, m}}, coco_iou_thresholds(), {0, 1}), ValidationError);
}

// ---- class lists and retrieval ----

TEST(ClassList, Parses) {
  const LabelSpace l = read_class_list("# comment\nthing red circle\n\n  stuff sky  \nthing red circle\n");
  EXPECT_EQ(l.names, (std::vector<std::string>{"red circle", "sky"}));
  EXPECT_TRUE(l.is_thing[0]);
  EXPECT_FALSE(l.is_thing[1]);
  EXPECT_THROW(read_class_list("thing a\nstuff a\n"), ValidationError);
  EXPECT_THROW(read_class_list("object a\n"), ValidationError);
  EXPECT_THROW(read_class_list("thing\n"), ValidationError);
}

TEST(ClassList, ExtendAppendsAndRejectsConflicts) {
  LabelSpace a, b;
  a.add("x", true);
  a.add("sky", false);
  b.add("sky", false);
  b.add("y", true);
  const LabelSpace e = extend_label_space(a, b);
  EXPECT_EQ(e.names, (std::vector<std::string>{"x", "sky", "y"}));
  EXPECT_EQ(extend_label_space(a, a), a);
  LabelSpace c;
  c.add("x", false);
  EXPECT_THROW(extend_label_space(a, c), ValidationError);
}

TEST(RandomAssignment, KeepsMasksChangesOnlyThings) {
  const LabelSpace l = vloss::ref::small_labels();
  std::mt19937_64 rng(3);
  std::vector<PanopticSeg> p{vloss::ref::random_partition(rng, 4, 4, 5, l)};
  const auto q = random_class_assignment(p, l, 11);
  ASSERT_EQ(q.size(), 1u);
  EXPECT_EQ(q[0].label_map, p[0].label_map);
  for (std::size_t i = 0; i < p[0].segments.size(); ++i) {
    if (p[0].segments[i].is_thing) EXPECT_TRUE(l.is_thing[q[0].segments[i].category]);
    else EXPECT_EQ(q[0].segments[i].category, p[0].segments[i].category);
  }
  EXPECT_EQ(random_class_assignment(p, l, 11)[0].segments.size(), q[0].segments.size());
}

TEST(Retrieval, Accuracy) {
  auto t = Tensor<double>(Shape{3, 2}, std::vector<double>{1, 0, 0, 1, 1, 1});
  auto r = retrieval_accuracy(t, t);
  EXPECT_EQ(r.image_to_text, 1.0);
  EXPECT_EQ(r.text_to_image, 1.0);
  // rows 0 and 1 swapped on the text side
  auto s = Tensor<double>(Shape{3, 2}, std::vector<double>{0, 1, 1, 0, 1, 1});
  r = retrieval_accuracy(t, s);
  EXPECT_NEAR(r.image_to_text, 1.0 / 3.0, 1e-15);
  // identical rows tie: counted as a miss
  auto d = Tensor<double>(Shape{2, 2}, std::vector<double>{1, 0, 1, 0});
  EXPECT_EQ(retrieval_accuracy(d, d).image_to_text, 0.0);
  EXPECT_THROW(retrieval_accuracy(t, d), ValidationError);
}

// ---- model evaluation ----

namespace {

struct Fixture {
  SynthConfig sc;
  Split pan, held;
  VLModel<double> model;
};

Fixture tiny_fixture() {
  SynthConfig sc;
  sc.num_images = 2;
  sc.image_size = 32;
  sc.held_out_classes = {"yellow circle"};
  Split pan = generate_synth_panoptic(sc, 1);
  Split held = generate_synth_heldout(sc, 2);
  VLModelConfig mc;
  mc.seg.dim = mc.text.dim = 16;
  mc.seg.queries = 5;
  mc.seg.decoder_layers = 1;
  mc.seg.heads = 2;
  mc.seg.image_h = mc.seg.image_w = 32;
  mc.text.layers = 1;
  mc.text.heads = 2;
  std::vector<std::string> names = held.labels.names;
  auto vocab = build_run_vocab(names, {}, mc.prompt_template);
  return {sc, pan, held, make_vl_model<double>(mc, vocab, 4)};
}

}  // namespace

TEST(ZeroShot, IdentityExtensionGivesIdenticalMetrics) {
  Fixture f = tiny_fixture();
  const auto base = evaluate_split(f.model, f.pan, f.pan.labels);
  const auto ext = evaluate_split(f.model, f.pan, extend_label_space(f.pan.labels, f.pan.labels));
  EXPECT_EQ(base.pq.to_json().dump(), ext.pq.to_json().dump());
  EXPECT_EQ(base.ap.to_json().dump(), ext.ap.to_json().dump());
}

TEST(ZeroShot, ExtensionLeavesParametersAndReportsHeldOutClass) {
  Fixture f = tiny_fixture();
  const auto before = param_hash(f.model.params);
  const LabelSpace ext = extend_label_space(f.pan.labels, f.held.labels);
  const auto rep = evaluate_split(f.model, f.held, ext);
  EXPECT_EQ(rep.param_hash_before, before);
  EXPECT_EQ(rep.param_hash_after, before);
  EXPECT_EQ(param_hash(f.model.params), before);
  const ClassPQ* c = rep.pq.find(ext.index_of("yellow circle"));
  ASSERT_NE(c, nullptr);  // every held-out image contains the class, so it always has GT
  EXPECT_GE(c->fn + c->tp, 1);
  const auto j = rep.to_json();
  EXPECT_EQ(j["param_hash_before"], j["param_hash_after"]);
}

TEST(ZeroShot, MissingOrConflictingNamesRejected) {
  Fixture f = tiny_fixture();
  EXPECT_THROW(evaluate_split(f.model, f.held, f.pan.labels), ValidationError);
  LabelSpace bad = f.pan.labels;
  bad.is_thing[0] = !bad.is_thing[0];
  EXPECT_THROW(evaluate_split(f.model, f.pan, bad), ValidationError);
}

TEST(NoObject, CountsOnlyStuffOverlappingQueries) {
  Fixture f = tiny_fixture();
  const auto r = no_object_on_stuff(f.model, f.pan, f.pan.labels);
  EXPECT_GE(r.queries, 0);
  EXPECT_GE(r.mean_prob, 0.0);
  EXPECT_LE(r.mean_prob, 1.0);
  // a threshold no mask can exceed counts nothing
  EXPECT_EQ(no_object_on_stuff(f.model, f.pan, f.pan.labels, 1.0).queries, 0);
}
