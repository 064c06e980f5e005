#include "vloss/eval/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "vloss/core/ops.hpp"
#include "vloss/train/trainer.hpp"

namespace vloss {

double compute_iou(const Mask& a, const Mask& b) {
  if (a.h != b.h || a.w != b.w) {
    throw ValidationError("compute_iou: mask sizes " + std::to_string(a.h) + "x" + std::to_string(a.w) + " and " +
                          std::to_string(b.h) + "x" + std::to_string(b.w) + " differ");
  }
  Index inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.px.size(); ++i) {
    if (a.px[i] > 1 || b.px[i] > 1) throw ValidationError("compute_iou: masks must be binary");
    inter += a.px[i] & b.px[i];
    uni += a.px[i] | b.px[i];
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

PanopticSeg gt_panoptic(const Sample& s) {
  PanopticSeg g;
  g.h = s.height();
  g.w = s.width();
  g.label_map.assign(g.h * g.w, 0);
  for (std::size_t k = 0; k < s.annotations.size(); ++k) {
    const auto& a = s.annotations[k];
    const Index id = static_cast<Index>(k) + 1;
    g.segments.push_back({id, a.category, a.is_thing, 1.0});
    for (std::size_t i = 0; i < a.mask.px.size(); ++i)
      if (a.mask.px[i]) {
        if (g.label_map[i] != 0) throw ValidationError("gt_panoptic: sample " + s.id + " has overlapping segments");
        g.label_map[i] = id;
      }
  }
  return g;
}

namespace {

struct Overlaps {
  std::map<Index, Index> pred_area, gt_area, pred_void;
  std::map<std::pair<Index, Index>, Index> inter;
};

Overlaps count_overlaps(const PanopticSeg& pred, const PanopticSeg& gt) {
  if (pred.h != gt.h || pred.w != gt.w || pred.label_map.size() != gt.label_map.size()) {
    throw ValidationError("panoptic: prediction and ground truth sizes differ");
  }
  Overlaps o;
  for (std::size_t i = 0; i < gt.label_map.size(); ++i) {
    const Index p = pred.label_map[i], g = gt.label_map[i];
    if (p) ++o.pred_area[p];
    if (g) ++o.gt_area[g];
    if (p && !g) ++o.pred_void[p];
    if (p && g) ++o.inter[{p, g}];
  }
  return o;
}

const SegmentInfo* segment_by_id(const PanopticSeg& s, Index id) {
  for (const auto& x : s.segments)
    if (x.id == id) return &x;
  return nullptr;
}

}  // namespace

SegMatch match_segments(const PanopticSeg& pred, const PanopticSeg& gt) {
  const Overlaps o = count_overlaps(pred, gt);
  SegMatch m;
  std::map<Index, bool> pred_used, gt_used;
  for (const auto& [key, inter] : o.inter) {
    const auto [pid, gid] = key;
    const SegmentInfo* ps = segment_by_id(pred, pid);
    const SegmentInfo* gs = segment_by_id(gt, gid);
    if (!ps || !gs) throw ValidationError("panoptic: label map references a segment missing from the table");
    if (ps->category != gs->category) continue;
    const Index uni = o.pred_area.at(pid) + o.gt_area.at(gid) - inter - (o.pred_void.count(pid) ? o.pred_void.at(pid) : 0);
    const double iou = static_cast<double>(inter) / static_cast<double>(uni);
    if (iou > 0.5) {
      m.tp.push_back({pid, gid, iou});
      pred_used[pid] = gt_used[gid] = true;
    }
  }
  for (const auto& g : gt.segments) {
    if (!o.gt_area.count(g.id)) continue;  // empty segment
    if (!gt_used[g.id]) m.fn.push_back(g.id);
  }
  for (const auto& p : pred.segments) {
    if (!o.pred_area.count(p.id) || pred_used[p.id]) continue;
    const Index v = o.pred_void.count(p.id) ? o.pred_void.at(p.id) : 0;
    if (2 * v > o.pred_area.at(p.id)) continue;  // mostly VOID
    m.fp.push_back(p.id);
  }
  return m;
}

const ClassPQ* PQReport::find(Index category) const {
  for (const auto& c : per_class)
    if (c.category == category) return &c;
  return nullptr;
}

std::optional<double> PQReport::mean_pq(const std::vector<Index>& categories) const {
  double s = 0;
  Index n = 0;
  for (Index c : categories)
    if (const auto* x = find(c)) {
      s += x->pq;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return s / n;
}

nlohmann::ordered_json PQReport::to_json(bool with_classes) const {
  nlohmann::ordered_json j;
  j["PQ_all"] = pq_all;
  j["PQ_th"] = pq_th;
  j["PQ_st"] = pq_st;
  j["num_classes"] = num_classes;
  j["num_things"] = num_things;
  j["num_stuff"] = num_stuff;
  if (with_classes) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& c : per_class) {
      arr.push_back({{"category", c.category},
                     {"name", c.name},
                     {"isthing", c.is_thing},
                     {"PQ", c.pq},
                     {"SQ", c.sq},
                     {"RQ", c.rq},
                     {"TP", c.tp},
                     {"FP", c.fp},
                     {"FN", c.fn}});
    }
    j["per_class"] = arr;
  }
  return j;
}

std::string PQReport::to_csv(bool with_classes) const {
  std::ostringstream os;
  os.precision(9);
  os << "scope,name,isthing,PQ,SQ,RQ,TP,FP,FN\n";
  os << "all,,," << pq_all << ",,,,,\n";
  os << "things,,," << pq_th << ",,,,,\n";
  os << "stuff,,," << pq_st << ",,,,,\n";
  if (with_classes)
    for (const auto& c : per_class)
      os << "class," << c.name << "," << (c.is_thing ? 1 : 0) << "," << c.pq << "," << c.sq << "," << c.rq << ","
         << c.tp << "," << c.fp << "," << c.fn << "\n";
  return os.str();
}

PQReport panoptic_quality(const std::vector<PanopticSeg>& preds, const std::vector<PanopticSeg>& gts,
                          const LabelSpace& labels) {
  if (preds.size() != gts.size()) {
    throw ValidationError("panoptic_quality: " + std::to_string(preds.size()) + " predictions for " +
                          std::to_string(gts.size()) + " images");
  }
  const Index nc = labels.size();
  std::vector<ClassPQ> acc(nc);
  std::vector<bool> present(nc, false);
  auto check = [&](const PanopticSeg& s, const char* what) {
    for (const auto& x : s.segments)
      if (x.category < 0 || x.category >= nc) {
        throw ValidationError(std::string("panoptic_quality: unknown class id ") + std::to_string(x.category) +
                              " in " + what);
      }
  };
  for (std::size_t i = 0; i < preds.size(); ++i) {
    check(preds[i], "predictions");
    check(gts[i], "ground truth");
    const SegMatch m = match_segments(preds[i], gts[i]);
    for (const auto& tp : m.tp) {
      auto& c = acc[segment_by_id(gts[i], tp.gt_id)->category];
      ++c.tp;
      c.iou_sum += tp.iou;
    }
    for (Index id : m.fp) ++acc[segment_by_id(preds[i], id)->category].fp;
    for (Index id : m.fn) ++acc[segment_by_id(gts[i], id)->category].fn;
  }
  PQReport r;
  double s_all = 0, s_th = 0, s_st = 0;
  for (Index k = 0; k < nc; ++k) {
    ClassPQ& c = acc[k];
    if (c.tp + c.fp + c.fn == 0) continue;
    c.category = k;
    c.name = labels.names[k];
    c.is_thing = labels.is_thing[k];
    c.sq = c.tp ? c.iou_sum / c.tp : 0.0;
    c.rq = c.tp / (c.tp + 0.5 * c.fp + 0.5 * c.fn);
    c.pq = c.iou_sum / (c.tp + 0.5 * c.fp + 0.5 * c.fn);
    r.per_class.push_back(c);
    s_all += c.pq;
    ++r.num_classes;
    if (c.is_thing) {
      s_th += c.pq;
      ++r.num_things;
    } else {
      s_st += c.pq;
      ++r.num_stuff;
    }
  }
  r.pq_all = r.num_classes ? s_all / r.num_classes : 0.0;
  r.pq_th = r.num_things ? s_th / r.num_things : 0.0;
  r.pq_st = r.num_stuff ? s_st / r.num_stuff : 0.0;
  return r;
}

// ---- AP ----

std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back((50 + 5 * i) / 100.0);
  return t;
}

namespace {

// 101-point interpolated AP for one class at one threshold.
double class_ap(const std::vector<const Detection*>& dets, const std::vector<const GtInstance*>& gts, double thr) {
  if (gts.empty()) return 0.0;
  std::map<Index, std::vector<std::size_t>> gts_by_image;
  for (std::size_t g = 0; g < gts.size(); ++g) gts_by_image[gts[g]->image].push_back(g);
  std::vector<bool> taken(gts.size(), false);
  std::vector<double> precision, recall;
  Index tp = 0, fp = 0;
  for (const Detection* d : dets) {
    double best = -1;
    std::size_t best_g = 0;
    auto it = gts_by_image.find(d->image);
    if (it != gts_by_image.end())
      for (std::size_t g : it->second) {
        if (taken[g]) continue;
        const double iou = compute_iou(d->mask, gts[g]->mask);
        if (iou >= thr && iou > best) {
          best = iou;
          best_g = g;
        }
      }
    if (best >= 0) {
      taken[best_g] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / gts.size());
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double s = 0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    const auto at = std::lower_bound(recall.begin(), recall.end(), level - 1e-12);
    if (at != recall.end()) s += precision[at - recall.begin()];
  }
  return s / 101.0;
}

}  // namespace

APReport mask_ap(const std::vector<Detection>& dets, const std::vector<GtInstance>& gts,
                 const std::vector<double>& thresholds, const std::vector<int>& class_bucket) {
  APReport r;
  r.thresholds = thresholds;
  std::map<Index, std::vector<const GtInstance*>> gt_by_class;
  for (const auto& g : gts) gt_by_class[g.category].push_back(&g);
  std::map<Index, std::vector<const Detection*>> det_by_class;
  for (const auto& d : dets) det_by_class[d.category].push_back(&d);
  for (auto& [c, v] : det_by_class)
    std::stable_sort(v.begin(), v.end(), [](const Detection* a, const Detection* b) { return a->score > b->score; });
  r.ap_per_threshold.assign(thresholds.size(), 0.0);
  if (gt_by_class.empty()) {
    r.empty = true;
    return r;
  }
  std::array<double, 3> bucket_sum{}, bucket_n{};
  for (const auto& [c, g] : gt_by_class) {
    const auto it = det_by_class.find(c);
    const std::vector<const Detection*> none;
    const auto& d = it == det_by_class.end() ? none : it->second;
    double mean_c = 0;
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      const double ap = class_ap(d, g, thresholds[t]);
      r.ap_per_threshold[t] += ap / gt_by_class.size();
      mean_c += ap / thresholds.size();
    }
    r.per_class.emplace_back(c, mean_c);
    if (!class_bucket.empty()) {
      if (c < 0 || c >= static_cast<Index>(class_bucket.size()) || class_bucket[c] < 0 || class_bucket[c] > 2) {
        throw ValidationError("mask_ap: no frequency bucket for class " + std::to_string(c));
      }
      bucket_sum[class_bucket[c]] += mean_c;
      bucket_n[class_bucket[c]] += 1;
    }
  }
  r.ap = thresholds.empty() ? 0.0
                            : std::accumulate(r.ap_per_threshold.begin(), r.ap_per_threshold.end(), 0.0) /
                                  thresholds.size();
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    if (std::abs(thresholds[t] - 0.5) < 1e-9) r.ap50 = r.ap_per_threshold[t];
    if (std::abs(thresholds[t] - 0.75) < 1e-9) r.ap75 = r.ap_per_threshold[t];
  }
  if (!class_bucket.empty()) {
    std::array<double, 3> b{};
    for (int k = 0; k < 3; ++k) b[k] = bucket_n[k] ? bucket_sum[k] / bucket_n[k] : 0.0;
    r.buckets = b;
  }
  return r;
}

std::vector<int> frequency_buckets(const std::vector<Index>& counts) {
  std::vector<Index> sorted = counts;
  std::sort(sorted.begin(), sorted.end());
  std::vector<int> out(counts.size(), 0);
  if (counts.empty()) return out;
  const Index lo = sorted[sorted.size() / 3], hi = sorted[(2 * sorted.size()) / 3];
  for (std::size_t i = 0; i < counts.size(); ++i) out[i] = counts[i] < lo ? 0 : counts[i] < hi ? 1 : 2;
  return out;
}

nlohmann::ordered_json APReport::to_json() const {
  nlohmann::ordered_json j;
  j["AP"] = ap;
  j["AP50"] = ap50;
  j["AP75"] = ap75;
  j["empty"] = empty;
  j["thresholds"] = thresholds;
  j["AP_per_threshold"] = ap_per_threshold;
  auto pc = nlohmann::ordered_json::array();
  for (const auto& [c, v] : per_class) pc.push_back({{"category", c}, {"AP", v}});
  j["per_class"] = pc;
  if (buckets) j["AP_rcf"] = *buckets;
  return j;
}

// ---- model evaluation ----

LabelSpace extend_label_space(const LabelSpace& base, const LabelSpace& extra) {
  LabelSpace out = base;
  for (Index i = 0; i < extra.size(); ++i) {
    const Index at = out.index_of(extra.names[i]);
    if (at >= 0) {
      if (out.is_thing[at] != extra.is_thing[i]) {
        throw ValidationError("class '" + extra.names[i] + "' is a thing in one list and stuff in the other");
      }
      continue;
    }
    out.add(extra.names[i], extra.is_thing[i]);
  }
  return out;
}

LabelSpace read_class_list(const std::string& text) {
  LabelSpace out;
  std::istringstream is(text);
  std::string line;
  Index lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    const auto e = line.find_last_not_of(" \t\r");
    line = line.substr(b, e - b + 1);
    const auto sp = line.find_first_of(" \t");
    const std::string kind = line.substr(0, sp);
    const auto nb = sp == std::string::npos ? std::string::npos : line.find_first_not_of(" \t", sp);
    if ((kind != "thing" && kind != "stuff") || nb == std::string::npos) {
      throw ValidationError("class list line " + std::to_string(lineno) + ": expected 'thing <name>' or 'stuff <name>'");
    }
    const std::string name = line.substr(nb);
    const Index at = out.index_of(name);
    if (at >= 0) {
      if (out.is_thing[at] != (kind == "thing")) {
        throw ValidationError("class list line " + std::to_string(lineno) + ": '" + name +
                              "' listed as both thing and stuff");
      }
      continue;
    }
    out.add(name, kind == "thing");
  }
  out.validate();
  return out;
}

std::vector<PanopticSeg> random_class_assignment(const std::vector<PanopticSeg>& preds, const LabelSpace& labels,
                                                 std::uint64_t seed) {
  const auto things = labels.thing_ids();
  if (things.empty()) throw ValidationError("random_class_assignment: no thing classes");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, things.size() - 1);
  std::vector<PanopticSeg> out = preds;
  for (auto& p : out)
    for (auto& s : p.segments)
      if (s.is_thing) s.category = things[pick(rng)];
  return out;
}

nlohmann::ordered_json EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["classes"] = labels.names;
  j["panoptic"] = pq.to_json();
  j["instance"] = ap.to_json();
  j["param_hash_before"] = param_hash_before;
  j["param_hash_after"] = param_hash_after;
  return j;
}

template <typename Scalar>
EvalReport evaluate_split(const VLModel<Scalar>& model, const Split& split, const LabelSpace& class_list,
                          const EvalOptions& opts) {
  class_list.validate();
  std::vector<Index> remap(split.labels.size());
  for (Index k = 0; k < split.labels.size(); ++k) {
    const Index at = class_list.index_of(split.labels.names[k]);
    if (at < 0) {
      throw ValidationError("evaluate: class '" + split.labels.names[k] + "' of split '" + split.name +
                            "' is not in the class list");
    }
    if (class_list.is_thing[at] != split.labels.is_thing[k]) {
      throw ValidationError("evaluate: class '" + split.labels.names[k] + "' is a thing in one label space and stuff "
                            "in the other");
    }
    remap[k] = at;
  }
  EvalReport rep;
  rep.labels = class_list;
  rep.param_hash_before = param_hash(model.params);
  const Tensor<Scalar> e_cls = model.class_embeddings(class_list.names).detach();
  std::vector<PanopticSeg> gts;
  std::vector<GtInstance> gt_inst;
  std::vector<Detection> dets;
  for (std::size_t i = 0; i < split.samples.size(); ++i) {
    const Sample& s = split.samples[i];
    const auto pred = predict_image(model, s.image, e_cls);
    const Tensor<double> c = to_double(pred.class_logits.detach()), m = to_double(pred.mask_logits.detach());
    rep.predictions.push_back(panoptic_inference(c, m, class_list, opts.inference));
    PanopticSeg g = gt_panoptic(s);
    for (auto& seg : g.segments) seg.category = remap[seg.category];
    gts.push_back(std::move(g));
    for (const auto& a : s.annotations)
      if (a.is_thing) gt_inst.push_back({static_cast<Index>(i), remap[a.category], a.mask});
    for (auto& inst : instance_inference(c, m, class_list, opts.top_k))
      dets.push_back({static_cast<Index>(i), inst.category, inst.score, std::move(inst.mask)});
  }
  rep.pq = panoptic_quality(rep.predictions, gts, class_list);
  rep.ap = mask_ap(dets, gt_inst);
  rep.param_hash_after = param_hash(model.params);
  if (rep.param_hash_after != rep.param_hash_before) {
    throw RuntimeAbort("evaluate: parameters changed during evaluation");
  }
  return rep;
}

RetrievalReport retrieval_accuracy(const Tensor<double>& img, const Tensor<double>& txt) {
  if (img.rank() != 2 || img.shape() != txt.shape()) {
    throw ValidationError("retrieval: need equal [B, D] embeddings, got " + shape_str(img.shape()) + " and " +
                          shape_str(txt.shape()));
  }
  const Tensor<double> s = matmul(l2_normalize(img, 1, 1e-12), transpose(l2_normalize(txt, 1, 1e-12)));
  const Index b = img.dim(0);
  RetrievalReport r;
  r.pairs = b;
  if (b == 0) return r;
  Index i2t = 0, t2i = 0;
  for (Index i = 0; i < b; ++i) {
    bool row_best = true, col_best = true;
    for (Index j = 0; j < b; ++j) {
      if (j == i) continue;
      if (s[i * b + j] >= s[i * b + i]) row_best = false;
      if (s[j * b + i] >= s[i * b + i]) col_best = false;
    }
    i2t += row_best;
    t2i += col_best;
  }
  r.image_to_text = static_cast<double>(i2t) / b;
  r.text_to_image = static_cast<double>(t2i) / b;
  return r;
}

template <typename Scalar>
RetrievalReport evaluate_retrieval(const VLModel<Scalar>& model, const Split& split) {
  std::vector<Tensor<Scalar>> imgs;
  std::vector<std::string> caps;
  for (const auto& s : split.samples) {
    if (s.caption.empty()) throw ValidationError("retrieval: sample " + s.id + " has no caption");
    imgs.push_back(image_embedding(model, s.image).detach());
    caps.push_back(s.caption);
  }
  if (imgs.empty()) throw ValidationError("retrieval: split '" + split.name + "' is empty");
  return retrieval_accuracy(to_double(concat(imgs, 0)), to_double(model.encode_captions(caps).detach()));
}

template <typename Scalar>
NoObjectReport no_object_on_stuff(const VLModel<Scalar>& model, const Split& split, const LabelSpace& class_list,
                                  double min_iou) {
  const Tensor<Scalar> e_cls = model.class_embeddings(class_list.names).detach();
  NoObjectReport r;
  double sum = 0;
  for (const auto& s : split.samples) {
    const auto pred = predict_image(model, s.image, e_cls);
    const Tensor<double> p = softmax(to_double(pred.class_logits.detach()), 1);
    const Tensor<double> m = to_double(pred.mask_logits.detach());
    const Index n = m.dim(0), h = m.dim(1), w = m.dim(2), k = p.dim(1);
    for (Index q = 0; q < n; ++q) {
      Mask qm(h, w);
      for (Index i = 0; i < h * w; ++i) qm.px[i] = m[q * h * w + i] > 0 ? 1 : 0;
      bool on_stuff = false;
      for (const auto& a : s.annotations)
        if (!a.is_thing && compute_iou(qm, a.mask) > min_iou) on_stuff = true;
      if (!on_stuff) continue;
      sum += p[q * k + (k - 1)];
      ++r.queries;
    }
  }
  r.mean_prob = r.queries ? sum / r.queries : 0.0;
  return r;
}

template NoObjectReport no_object_on_stuff<float>(const VLModel<float>&, const Split&, const LabelSpace&, double);
template NoObjectReport no_object_on_stuff<double>(const VLModel<double>&, const Split&, const LabelSpace&, double);

template RetrievalReport evaluate_retrieval<float>(const VLModel<float>&, const Split&);
template RetrievalReport evaluate_retrieval<double>(const VLModel<double>&, const Split&);

template EvalReport evaluate_split<float>(const VLModel<float>&, const Split&, const LabelSpace&, const EvalOptions&);
template EvalReport evaluate_split<double>(const VLModel<double>&, const Split&, const LabelSpace&,
                                           const EvalOptions&);

}  // namespace vloss
