#pragma once

// Brute-force PQ / AP references written straight from the metric
// definitions, plus random small-scene generators. Nothing here calls into
// the evaluator.

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "vloss/data/dataset.hpp"
#include "vloss/model/segmenter.hpp"

namespace vloss::ref {

using vloss::Index;

struct PQResult {
  double all = 0, th = 0, st = 0;
  std::vector<double> per_class;  // -1 for absent classes
};

// Pixel-scan PQ. Segments with no pixels are ignored; a prediction with more
// than half its pixels on VOID is not a false positive.
inline PQResult panoptic_quality(const std::vector<vloss::PanopticSeg>& preds,
                                 const std::vector<vloss::PanopticSeg>& gts, const vloss::LabelSpace& labels) {
  const Index nc = labels.size();
  std::vector<double> iou_sum(nc, 0.0), tp(nc, 0.0), fp(nc, 0.0), fn(nc, 0.0);
  for (std::size_t im = 0; im < preds.size(); ++im) {
    const auto& P = preds[im];
    const auto& G = gts[im];
    const std::size_t npx = G.label_map.size();
    std::vector<bool> p_hit(P.segments.size(), false), g_hit(G.segments.size(), false);
    for (std::size_t a = 0; a < P.segments.size(); ++a)
      for (std::size_t b = 0; b < G.segments.size(); ++b) {
        if (P.segments[a].category != G.segments[b].category) continue;
        double inter = 0, pa = 0, ga = 0, pvoid = 0;
        for (std::size_t i = 0; i < npx; ++i) {
          const bool in_p = P.label_map[i] == P.segments[a].id;
          const bool in_g = G.label_map[i] == G.segments[b].id;
          if (in_p) pa += 1;
          if (in_g) ga += 1;
          if (in_p && in_g) inter += 1;
          if (in_p && G.label_map[i] == 0) pvoid += 1;
        }
        if (inter == 0) continue;
        const double iou = inter / (pa + ga - inter - pvoid);
        if (iou > 0.5) {
          iou_sum[G.segments[b].category] += iou;
          tp[G.segments[b].category] += 1;
          p_hit[a] = g_hit[b] = true;
        }
      }
    for (std::size_t b = 0; b < G.segments.size(); ++b) {
      const Index area = std::count(G.label_map.begin(), G.label_map.end(), G.segments[b].id);
      if (area > 0 && !g_hit[b]) fn[G.segments[b].category] += 1;
    }
    for (std::size_t a = 0; a < P.segments.size(); ++a) {
      Index area = 0, on_void = 0;
      for (std::size_t i = 0; i < npx; ++i)
        if (P.label_map[i] == P.segments[a].id) {
          ++area;
          if (G.label_map[i] == 0) ++on_void;
        }
      if (area > 0 && !p_hit[a] && 2 * on_void <= area) fp[P.segments[a].category] += 1;
    }
  }
  PQResult r;
  r.per_class.assign(nc, -1.0);
  double s_all = 0, s_th = 0, s_st = 0;
  int n_all = 0, n_th = 0, n_st = 0;
  for (Index k = 0; k < nc; ++k) {
    if (tp[k] + fp[k] + fn[k] == 0) continue;
    const double pq = iou_sum[k] / (tp[k] + 0.5 * fp[k] + 0.5 * fn[k]);
    r.per_class[k] = pq;
    s_all += pq;
    ++n_all;
    if (labels.is_thing[k]) {
      s_th += pq;
      ++n_th;
    } else {
      s_st += pq;
      ++n_st;
    }
  }
  r.all = n_all ? s_all / n_all : 0.0;
  r.th = n_th ? s_th / n_th : 0.0;
  r.st = n_st ? s_st / n_st : 0.0;
  return r;
}

struct Inst {
  Index image = 0, category = 0;
  double score = 0;
  vloss::Mask mask;
};

inline double mask_iou(const vloss::Mask& a, const vloss::Mask& b) {
  double i = 0, u = 0;
  for (std::size_t k = 0; k < a.px.size(); ++k) {
    i += (a.px[k] && b.px[k]) ? 1 : 0;
    u += (a.px[k] || b.px[k]) ? 1 : 0;
  }
  return u == 0 ? 0.0 : i / u;
}

// Mean over thresholds of the mean over GT-bearing classes of 101-point
// interpolated precision. Detections are taken in descending score order and
// each one claims the highest-IoU free GT (first on ties) at IoU >= t.
struct APResult {
  double ap = 0;
  std::vector<double> per_threshold;
};

inline APResult mask_ap(const std::vector<Inst>& dets, const std::vector<Inst>& gts, const std::vector<double>& thr) {
  std::vector<Index> classes;
  for (const auto& g : gts)
    if (std::find(classes.begin(), classes.end(), g.category) == classes.end()) classes.push_back(g.category);
  std::sort(classes.begin(), classes.end());
  APResult r;
  r.per_threshold.assign(thr.size(), 0.0);
  if (classes.empty()) return r;
  for (Index c : classes) {
    std::vector<Inst> d, g;
    for (const auto& x : dets)
      if (x.category == c) d.push_back(x);
    for (const auto& x : gts)
      if (x.category == c) g.push_back(x);
    std::stable_sort(d.begin(), d.end(), [](const Inst& a, const Inst& b) { return a.score > b.score; });
    for (std::size_t t = 0; t < thr.size(); ++t) {
      std::vector<bool> used(g.size(), false);
      std::vector<double> prec, rec;
      double ntp = 0;
      for (std::size_t i = 0; i < d.size(); ++i) {
        int pick = -1;
        double best = 0;
        for (std::size_t j = 0; j < g.size(); ++j) {
          if (used[j] || g[j].image != d[i].image) continue;
          const double iou = mask_iou(d[i].mask, g[j].mask);
          if (iou >= thr[t] && (pick < 0 || iou > best)) {
            pick = static_cast<int>(j);
            best = iou;
          }
        }
        if (pick >= 0) {
          used[pick] = true;
          ntp += 1;
        }
        prec.push_back(ntp / static_cast<double>(i + 1));
        rec.push_back(ntp / static_cast<double>(g.size()));
      }
      double s = 0;
      for (int k = 0; k <= 100; ++k) {
        double best = 0;
        for (std::size_t i = 0; i < prec.size(); ++i)
          if (rec[i] >= k / 100.0 - 1e-12) best = std::max(best, prec[i]);
        s += best;
      }
      r.per_threshold[t] += (s / 101.0) / static_cast<double>(classes.size());
    }
  }
  double s = 0;
  for (double v : r.per_threshold) s += v;
  r.ap = s / static_cast<double>(thr.size());
  return r;
}

// ---- random scenes ----

inline vloss::LabelSpace small_labels() {
  vloss::LabelSpace l;
  l.add("a", true);
  l.add("b", true);
  l.add("s", false);
  l.add("t", false);
  return l;
}

// A partition of an h x w grid into up to `max_segments` segments plus VOID,
// built from random rectangles painted in order. Segment ids are 1..n in
// table order; some ids may end up with no pixels.
inline vloss::PanopticSeg random_partition(std::mt19937_64& rng, Index h, Index w, Index max_segments,
                                           const vloss::LabelSpace& labels) {
  std::uniform_int_distribution<Index> nseg(1, max_segments), cat(0, labels.size() - 1);
  std::uniform_int_distribution<Index> ry(0, h - 1), rx(0, w - 1);
  vloss::PanopticSeg s;
  s.h = h;
  s.w = w;
  s.label_map.assign(h * w, 0);
  const Index n = nseg(rng);
  for (Index id = 1; id <= n; ++id) {
    const Index c = cat(rng);
    s.segments.push_back({id, c, static_cast<bool>(labels.is_thing[c]), 1.0});
    Index y0 = ry(rng), y1 = ry(rng), x0 = rx(rng), x1 = rx(rng);
    if (y0 > y1) std::swap(y0, y1);
    if (x0 > x1) std::swap(x0, x1);
    for (Index y = y0; y <= y1; ++y)
      for (Index x = x0; x <= x1; ++x) s.label_map[y * w + x] = id;
  }
  if (std::uniform_real_distribution<double>(0, 1)(rng) < 0.5) {
    // sprinkle VOID
    for (auto& v : s.label_map)
      if (std::uniform_real_distribution<double>(0, 1)(rng) < 0.15) v = 0;
  }
  return s;
}

// A prediction derived from `gt`: relabel some segments, move pixels between
// neighbours and add an extra segment so that matches, misses and false
// positives all occur.
inline vloss::PanopticSeg perturb(std::mt19937_64& rng, const vloss::PanopticSeg& gt, const vloss::LabelSpace& labels) {
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<Index> cat(0, labels.size() - 1);
  vloss::PanopticSeg p = gt;
  for (auto& s : p.segments)
    if (u(rng) < 0.2) {
      s.category = cat(rng);
      s.is_thing = labels.is_thing[s.category];
    }
  const Index extra = static_cast<Index>(p.segments.size()) + 1;
  const Index ec = cat(rng);
  p.segments.push_back({extra, ec, static_cast<bool>(labels.is_thing[ec]), 1.0});
  const double flip = u(rng) * 0.5;
  for (std::size_t i = 0; i < p.label_map.size(); ++i) {
    if (u(rng) >= flip) continue;
    const double r = u(rng);
    if (r < 0.3) p.label_map[i] = extra;
    else if (r < 0.4) p.label_map[i] = 0;
    else if (i + 1 < p.label_map.size()) p.label_map[i] = gt.label_map[i + 1];
  }
  return p;
}

inline vloss::Mask random_mask(std::mt19937_64& rng, Index h, Index w, double density) {
  std::uniform_real_distribution<double> u(0, 1);
  vloss::Mask m(h, w);
  for (auto& v : m.px) v = u(rng) < density ? 1 : 0;
  return m;
}

}  // namespace vloss::ref
