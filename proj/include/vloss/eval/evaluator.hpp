#pragma once

// IoU, panoptic quality, mask AP and the zero-shot evaluation protocol.

#include <array>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "vloss/data/dataset.hpp"
#include "vloss/model/segmenter.hpp"
#include "vloss/model/vl_model.hpp"

namespace vloss {

/// |A ∩ B| / |A ∪ B|, 0 when the union is empty.
double compute_iou(const Mask& a, const Mask& b);

/// Ground truth as a segment table: annotation k becomes segment k + 1;
/// uncovered pixels are VOID (0).
PanopticSeg gt_panoptic(const Sample& s);

struct TPPair {
  Index pred_id = 0, gt_id = 0;
  double iou = 0.0;
};

/// Per-image matching between predicted and ground-truth segments of equal class.
struct SegMatch {
  std::vector<TPPair> tp;
  std::vector<Index> fp;  // predicted segment ids
  std::vector<Index> fn;  // ground-truth segment ids
};

/// Pairs with VOID-excluded IoU > 0.5. Predictions lying mostly on VOID are
/// neither matched nor counted as false positives.
SegMatch match_segments(const PanopticSeg& pred, const PanopticSeg& gt);

struct ClassPQ {
  Index category = 0;
  std::string name;
  bool is_thing = true;
  Index tp = 0, fp = 0, fn = 0;
  double iou_sum = 0.0;
  double pq = 0.0, sq = 0.0, rq = 0.0;
};

struct PQReport {
  double pq_all = 0.0, pq_th = 0.0, pq_st = 0.0;
  Index num_classes = 0, num_things = 0, num_stuff = 0;
  std::vector<ClassPQ> per_class;  // classes present in GT or predictions, by category

  const ClassPQ* find(Index category) const;
  /// Mean PQ over the listed categories that are present.
  std::optional<double> mean_pq(const std::vector<Index>& categories) const;
  nlohmann::ordered_json to_json(bool per_class = true) const;
  std::string to_csv(bool per_class = true) const;
};

/// Category ids in `preds` and `gts` index `labels`; unknown ids are rejected.
PQReport panoptic_quality(const std::vector<PanopticSeg>& preds, const std::vector<PanopticSeg>& gts,
                          const LabelSpace& labels);

struct GtInstance {
  Index image = 0;
  Index category = 0;
  Mask mask;
};

struct Detection {
  Index image = 0;
  Index category = 0;
  double score = 0.0;
  Mask mask;
};

std::vector<double> coco_iou_thresholds();  // .50:.05:.95

struct APReport {
  double ap = 0.0, ap50 = 0.0, ap75 = 0.0;
  std::vector<double> thresholds;
  std::vector<double> ap_per_threshold;
  /// Mean over thresholds per category with ground truth.
  std::vector<std::pair<Index, double>> per_class;
  /// Rare / common / frequent means when buckets were given.
  std::optional<std::array<double, 3>> buckets;
  /// True when there was no ground truth to score against.
  bool empty = false;

  nlohmann::ordered_json to_json() const;
};

/// Greedy score-ordered matching (IoU >= threshold), 101-point interpolated
/// precision, averaged over classes with ground truth. `class_bucket`, when
/// non-empty, tags each category 0 (rare), 1 (common) or 2 (frequent).
APReport mask_ap(const std::vector<Detection>& dets, const std::vector<GtInstance>& gts,
                 const std::vector<double>& iou_thresholds = coco_iou_thresholds(),
                 const std::vector<int>& class_bucket = {});

/// Terciles of per-class instance counts: 0 rare, 1 common, 2 frequent.
std::vector<int> frequency_buckets(const std::vector<Index>& instance_counts);

struct EvalOptions {
  InferenceConfig inference;
  Index top_k = 100;
};

struct EvalReport {
  LabelSpace labels;  // the class list predictions were made against
  PQReport pq;
  APReport ap;
  std::vector<PanopticSeg> predictions;
  std::uint64_t param_hash_before = 0, param_hash_after = 0;

  nlohmann::ordered_json to_json() const;
};

/// Runs the model over a split with `class_list` as the classifier vocabulary.
/// Split categories are mapped to `class_list` by name; a missing name or a
/// thing/stuff disagreement is rejected. No parameter changes (checked by hash).
template <typename Scalar>
EvalReport evaluate_split(const VLModel<Scalar>& model, const Split& split, const LabelSpace& class_list,
                          const EvalOptions& opts = {});

/// Adds the split's own names (in split order) after `base`; conflicts rejected.
LabelSpace extend_label_space(const LabelSpace& base, const LabelSpace& extra);

/// Same masks, each thing segment relabelled with a uniformly drawn thing class.
std::vector<PanopticSeg> random_class_assignment(const std::vector<PanopticSeg>& preds, const LabelSpace& labels,
                                                 std::uint64_t seed);

struct RetrievalReport {
  double image_to_text = 0.0, text_to_image = 0.0;  // top-1 accuracy
  Index pairs = 0;
};

/// Top-1 retrieval over cosine similarity of [B, D] embeddings, pair i <-> i.
/// Ties count as misses.
RetrievalReport retrieval_accuracy(const Tensor<double>& image_emb, const Tensor<double>& text_emb);

template <typename Scalar>
RetrievalReport evaluate_retrieval(const VLModel<Scalar>& model, const Split& split);

struct NoObjectReport {
  double mean_prob = 0.0;  // mean no-object probability over counted queries
  Index queries = 0;
};

/// Queries whose binary mask has IoU > `min_iou` with a ground-truth stuff
/// segment, and their mean no-object probability against `class_list`.
template <typename Scalar>
NoObjectReport no_object_on_stuff(const VLModel<Scalar>& model, const Split& split, const LabelSpace& class_list,
                                  double min_iou = 0.5);

/// Reads a class list: one "thing <name>" or "stuff <name>" per line; blank
/// lines and lines starting with '#' are skipped.
LabelSpace read_class_list(const std::string& text);

}  // namespace vloss
