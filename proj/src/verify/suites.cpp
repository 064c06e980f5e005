#include "vloss/verify/suites.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <set>
#include <sstream>

#include "vloss/core/dispatch.hpp"
#include "vloss/core/ops.hpp"
#include "vloss/eval/evaluator.hpp"
#include "vloss/losses/hungarian.hpp"
#include "vloss/losses/losses.hpp"
#include "vloss/schedule/scheduler.hpp"
#include "vloss/verify/metric_reference.hpp"

namespace vloss {

bool SuiteReport::passed() const { return failures() == 0; }

Index SuiteReport::failures() const {
  return std::count_if(checks.begin(), checks.end(), [](const CheckResult& c) { return !c.ok; });
}

void SuiteReport::write_tap(std::ostream& os) const {
  os << "1.." << checks.size() << "\n";
  for (std::size_t i = 0; i < checks.size(); ++i) {
    const auto& c = checks[i];
    os << (c.ok ? "ok " : "not ok ") << (i + 1) << " - " << c.name;
    if (!c.detail.empty()) os << " # " << c.detail;
    os << "\n";
  }
}

namespace {

using T = Tensor<double>;
using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

std::string shape_list(const std::vector<Shape>& shapes) {
  std::string out;
  for (const auto& s : shapes) out += (out.empty() ? "" : ",") + shape_str(s);
  return out;
}

T random_tensor(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = n(rng);
  return T(shape, v);
}

T random_binary(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution b(0.4);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = b(rng) ? 1.0 : 0.0;
  return T(shape, v);
}

using LossFn = std::function<T(const std::vector<T>&)>;

struct LossCase {
  std::string name;
  std::function<std::pair<LossFn, std::vector<T>>(std::uint64_t)> make;
};

// Rows `idx` of x along axis 0.
T gather_rows(const T& x, const std::vector<Index>& idx) {
  std::vector<T> parts;
  for (Index i : idx) parts.push_back(slice(x, 0, i, i + 1));
  return concat(parts, 0);
}

std::vector<LossCase> loss_cases() {
  std::vector<LossCase> out;
  out.push_back({"loss/classification_all", [](std::uint64_t s) {
                   return std::pair<LossFn, std::vector<T>>{
                       [](const std::vector<T>& in) { return classification_loss(in[0], {0, 3, 2, 3}, ClsMode::all); },
                       {random_tensor({4, 4}, s)}};
                 }});
  out.push_back({"loss/classification_all_weighted", [](std::uint64_t s) {
                   return std::pair<LossFn, std::vector<T>>{[](const std::vector<T>& in) {
                                                              return classification_loss(in[0], {0, 3, 2, 3},
                                                                                         ClsMode::all, 0.1);
                                                            },
                                                            {random_tensor({4, 4}, s + 1)}};
                 }});
  out.push_back({"loss/classification_positive_only", [](std::uint64_t s) {
                   return std::pair<LossFn, std::vector<T>>{[](const std::vector<T>& in) {
                                                              return classification_loss(in[0], {0, 3, 2, 3},
                                                                                         ClsMode::positive_only);
                                                            },
                                                            {random_tensor({4, 4}, s + 2)}};
                 }});
  out.push_back({"loss/bce_mask", [](std::uint64_t s) {
                   const T t = random_binary({2, 6, 6}, s + 100);
                   return std::pair<LossFn, std::vector<T>>{
                       [t](const std::vector<T>& in) { return bce_mask_loss(in[0], t); }, {random_tensor({2, 6, 6}, s + 3)}};
                 }});
  out.push_back({"loss/dice", [](std::uint64_t s) {
                   const T t = random_binary({2, 6, 6}, s + 101);
                   return std::pair<LossFn, std::vector<T>>{
                       [t](const std::vector<T>& in) { return dice_loss(in[0], t); }, {random_tensor({2, 6, 6}, s + 4)}};
                 }});
  out.push_back({"loss/contrastive", [](std::uint64_t s) {
                   return std::pair<LossFn, std::vector<T>>{
                       [](const std::vector<T>& in) { return contrastive_loss(contrastive_sim(in[0], in[1], in[2])); },
                       {random_tensor({3, 4}, s + 5), random_tensor({3, 4}, s + 6), T::scalar(0.5)}};
                 }});
  out.push_back({"loss/contrastive_filip", [](std::uint64_t s) {
                   return std::pair<LossFn, std::vector<T>>{
                       [](const std::vector<T>& in) { return filip_contrastive_loss(in[0], in[1], in[2]); },
                       {random_tensor({2, 3, 4}, s + 7), random_tensor({2, 2, 4}, s + 8), T::scalar(0.5)}};
                 }});
  // The whole dense path: matching (fixed at the starting point), gathered
  // mask terms and the weighted total.
  out.push_back({"loss/dense_total", [](std::uint64_t s) {
                   const T c0 = random_tensor({4, 3}, s + 9), m0 = random_tensor({4, 5, 5}, s + 10);
                   MatchTargets<double> tg{{0, 1}, random_binary({2, 5, 5}, s + 102), {true, false}};
                   const MatchResult mr = match_queries(c0, m0, tg, LossWeights{});
                   const auto q = mr.matched_queries(), t = mr.matched_targets();
                   const T tm = gather_rows(tg.masks, t);
                   const auto y = mr.y;
                   return std::pair<LossFn, std::vector<T>>{[=](const std::vector<T>& in) {
                                                              LossTerms<double> terms;
                                                              terms.cls = classification_loss(in[0], y, ClsMode::all);
                                                              const T pm = gather_rows(in[1], q);
                                                              terms.bce = bce_mask_loss(pm, tm);
                                                              terms.dice = dice_loss(pm, tm);
                                                              return total_loss(terms, LossWeights{}, Stream::panoptic);
                                                            },
                                                            {c0, m0}};
                 }});
  out.push_back({"loss/caption_total", [](std::uint64_t s) {
                   return std::pair<LossFn, std::vector<T>>{[](const std::vector<T>& in) {
                                                              LossTerms<double> terms;
                                                              terms.con = contrastive_loss(
                                                                  contrastive_sim(in[0], in[1], in[2]));
                                                              return total_loss(terms, LossWeights{}, Stream::caption);
                                                            },
                                                            {random_tensor({4, 3}, s + 11),
                                                             random_tensor({4, 3}, s + 12), T::scalar(0.07)}};
                 }});
  return out;
}

}  // namespace

SuiteReport verify_gradcheck(int seeds, double tol) {
  const auto t0 = Clock::now();
  SuiteReport r;
  r.suite = "gradcheck";
  auto run = [&](const std::string& name, const std::function<double(std::uint64_t)>& err_of) {
    double worst = 0;
    std::string error;
    for (int s = 0; s < seeds; ++s) {
      try {
        worst = std::max(worst, err_of(static_cast<std::uint64_t>(s)));
      } catch (const std::exception& e) {
        error = e.what();
        break;
      }
    }
    const bool ok = error.empty() && std::isfinite(worst) && worst < tol;
    r.checks.push_back({name, ok, error.empty() ? "max rel err " + fmt(worst) : error});
  };
  for (const auto& c : default_grad_check_cases()) {
    run("op/" + c.op + " " + shape_list(c.shapes), [&](std::uint64_t s) { return grad_check(c.op, c.shapes, s, c.attrs); });
  }
  for (const auto& lc : loss_cases()) {
    run(lc.name, [&](std::uint64_t s) {
      auto [fn, in] = lc.make(s);
      return grad_check_fn(fn, in, s);
    });
  }
  r.seconds = since(t0);
  return r;
}

SuiteReport verify_hungarian(int cases, std::uint64_t seed) {
  const auto t0 = Clock::now();
  SuiteReport r;
  r.suite = "hungarian";
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Index> dim(1, 7);
  std::uniform_real_distribution<double> u(-5, 5);
  std::uniform_int_distribution<int> small(0, 3);
  Index agree = 0;
  std::string first_bad;
  for (int k = 0; k < cases; ++k) {
    const Index n = dim(rng), m = dim(rng);
    Eigen::MatrixXd c(n, m);
    const bool integer = k % 2 == 1;  // integer entries force ties
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < m; ++j) c(i, j) = integer ? small(rng) : u(rng);
    const Assignment a = match_hungarian(c);
    double total = 0;
    for (Index i = 0; i < n; ++i)
      if (a.col_of_row[i] >= 0) total += c(i, a.col_of_row[i]);
    const double want = brute_force_min_cost(c);
    const bool ok = total == want;
    if (ok) ++agree;
    else if (first_bad.empty()) first_bad = "case " + std::to_string(k) + ": " + fmt(total) + " vs " + fmt(want);
  }
  r.checks.push_back({"hungarian/exhaustive_oracle", agree == cases,
                      std::to_string(agree) + "/" + std::to_string(cases) + " match" +
                          (first_bad.empty() ? "" : "; first mismatch " + first_bad)});
  r.seconds = since(t0);
  return r;
}

namespace {

PanopticSeg make_seg(Index h, Index w, std::vector<Index> map, std::vector<std::pair<Index, Index>> segs,
                     const LabelSpace& l) {
  PanopticSeg s;
  s.h = h;
  s.w = w;
  s.label_map = std::move(map);
  for (auto [id, c] : segs) s.segments.push_back({id, c, static_cast<bool>(l.is_thing[c]), 1.0});
  return s;
}

}  // namespace

SuiteReport verify_metrics(int cases, std::uint64_t seed) {
  const auto t0 = Clock::now();
  SuiteReport r;
  r.suite = "metrics";

  // hand-worked values
  {
    LabelSpace l;
    l.add("thing", true);
    l.add("ground", false);
    const auto gt = make_seg(2, 5, {1, 1, 1, 1, 1, 2, 2, 2, 2, 2}, {{1, 0}, {2, 1}}, l);
    const auto pred = make_seg(2, 5, {1, 1, 1, 1, 0, 2, 2, 0, 0, 0}, {{1, 0}, {2, 0}}, l);
    const ClassPQ* c = panoptic_quality({pred}, {gt}, l).find(0);
    const double v = c ? c->pq : -1;
    r.checks.push_back({"pq/iou_0.8_plus_fp", std::abs(v - 0.8 / 1.5) <= 1e-12, "PQ " + fmt(v)});

    const auto gt2 = make_seg(1, 10, {1, 1, 1, 1, 1, 2, 2, 2, 2, 2}, {{1, 0}, {2, 1}}, l);
    const auto pred2 = make_seg(1, 10, {1, 1, 0, 0, 0, 2, 2, 2, 2, 2}, {{1, 0}, {2, 1}}, l);
    const ClassPQ* c2 = panoptic_quality({pred2}, {gt2}, l).find(0);
    const bool ok2 = c2 && c2->tp == 0 && c2->fp == 1 && c2->fn == 1 && std::abs(c2->pq) <= 1e-12;
    r.checks.push_back({"pq/iou_0.4_unmatched", ok2, c2 ? "PQ " + fmt(c2->pq) : "class missing"});
  }

  // brute-force PQ
  {
    const LabelSpace l = ref::small_labels();
    std::mt19937_64 rng(seed);
    int agree = 0;
    for (int t = 0; t < cases; ++t) {
      std::vector<PanopticSeg> preds, gts;
      const int images = 1 + t % 3;
      for (int i = 0; i < images; ++i) {
        gts.push_back(ref::random_partition(rng, 4, 5, 5, l));
        preds.push_back(ref::perturb(rng, gts.back(), l));
      }
      const auto got = panoptic_quality(preds, gts, l);
      const auto want = ref::panoptic_quality(preds, gts, l);
      bool ok = got.pq_all == want.all && got.pq_th == want.th && got.pq_st == want.st;
      for (Index k = 0; k < l.size(); ++k) {
        const ClassPQ* c = got.find(k);
        ok = ok && (c ? c->pq : -1.0) == want.per_class[k];
      }
      agree += ok;
    }
    r.checks.push_back({"pq/brute_force_reference", agree == cases,
                        std::to_string(agree) + "/" + std::to_string(cases) + " exact"});
  }

  // brute-force AP
  {
    std::mt19937_64 rng(seed + 1);
    std::uniform_real_distribution<double> u(0, 1);
    const auto thr = coco_iou_thresholds();
    int agree = 0;
    for (int t = 0; t < cases; ++t) {
      std::vector<GtInstance> gts;
      std::vector<Detection> dets;
      std::vector<ref::Inst> rg, rd;
      const int images = 1 + t % 3;
      for (int im = 0; im < images; ++im) {
        const int ng = 1 + static_cast<int>(u(rng) * 3);
        for (int k = 0; k < ng; ++k) {
          const Index c = static_cast<Index>(u(rng) * 3);
          gts.push_back({im, c, ref::random_mask(rng, 3, 4, 0.5)});
          Mask m = gts.back().mask;
          for (auto& v : m.px)
            if (u(rng) < 0.15) v ^= 1;
          dets.push_back({im, u(rng) < 0.8 ? c : static_cast<Index>(u(rng) * 3), u(rng), m});
        }
        const int nf = static_cast<int>(u(rng) * 3);
        for (int k = 0; k < nf; ++k)
          dets.push_back({im, static_cast<Index>(u(rng) * 3), u(rng), ref::random_mask(rng, 3, 4, 0.5)});
      }
      for (const auto& g : gts) rg.push_back({g.image, g.category, 1.0, g.mask});
      for (const auto& d : dets) rd.push_back({d.image, d.category, d.score, d.mask});
      const auto got = mask_ap(dets, gts, thr);
      const auto want = ref::mask_ap(rd, rg, thr);
      agree += got.ap == want.ap && got.ap_per_threshold == want.per_threshold;
    }
    r.checks.push_back({"ap/brute_force_reference", agree == cases,
                        std::to_string(agree) + "/" + std::to_string(cases) + " exact"});
  }
  r.seconds = since(t0);
  return r;
}

SuiteReport verify_scheduler(int configs, std::uint64_t seed) {
  const auto t0 = Clock::now();
  SuiteReport r;
  r.suite = "scheduler";
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Index> n(0, 20), total(1, 16);
  Index excl_bad = 0, exact_bad = 0, cap_bad = 0, det_bad = 0, plans = 0;
  for (int k = 0; k < configs; ++k) {
    const std::array<Index, 3> sz{n(rng), n(rng), n(rng)};
    const std::vector<DatasetHandle> h{{Stream::detection, sz[0], 2}, {Stream::panoptic, sz[1], 2},
                                       {Stream::caption, sz[2], 4}};
    const Index epochs = total(rng);
    const Index epoch = std::uniform_int_distribution<Index>(0, epochs - 1)(rng);
    const std::uint64_t s = rng();
    for (Strategy st : {Strategy::stt, Strategy::mix, Strategy::pretrain_finetune}) {
      ++plans;
      const EpochPlan p = build_epoch_plan(st, h, epoch, epochs, s);
      // exactness: every (stream, index) once, positions in order
      std::set<std::pair<int, Index>> seen;
      std::array<Index, 3> cnt{};
      bool exact = true;
      for (Index i = 0; i < p.size(); ++i) {
        const auto& t = p.tickets[i];
        const int si = static_cast<int>(t.stream);
        exact = exact && t.position == i && t.batch_index >= 0 && t.batch_index < sz[si] &&
                seen.insert({si, t.batch_index}).second;
        ++cnt[si];
      }
      if (st == Strategy::pretrain_finetune) {
        const bool pre = epoch < epochs / 2;
        exact = exact && cnt[2] == sz[2] && cnt[0] == (pre ? sz[0] : 0) && cnt[1] == (pre ? 0 : sz[1]);
      } else {
        exact = exact && cnt == sz;
      }
      exact_bad += !exact;
      if (st == Strategy::stt) {
        bool excl = p.boundary.has_value();
        Index warm_cap = 0, cool_cap = 0;
        if (excl) {
          for (Index i = 0; i < p.size(); ++i) {
            const Stream st_i = p.tickets[i].stream;
            if (i < *p.boundary && st_i == Stream::panoptic) excl = false;
            if (i >= *p.boundary && st_i == Stream::detection) excl = false;
            if (st_i == Stream::caption) ++(i < *p.boundary ? warm_cap : cool_cap);
          }
        }
        excl_bad += !excl;
        if (sz[2] >= 2 && sz[0] > 0 && sz[1] > 0 && (warm_cap == 0 || cool_cap == 0)) ++cap_bad;
      }
      const EpochPlan again = build_epoch_plan(st, h, epoch, epochs, s);
      det_bad += !(again.tickets == p.tickets && again.boundary == p.boundary);
    }
  }
  auto line = [&](const std::string& name, Index bad, Index of) {
    r.checks.push_back({name, bad == 0, std::to_string(of - bad) + "/" + std::to_string(of) + " hold"});
  };
  line("scheduler/stt_exclusion", excl_bad, configs);
  line("scheduler/per_epoch_exactness", exact_bad, plans);
  line("scheduler/caption_ubiquity", cap_bad, configs);
  line("scheduler/determinism", det_bad, plans);
  r.seconds = since(t0);
  return r;
}

const std::vector<std::string>& verify_suite_names() {
  static const std::vector<std::string> names{"gradcheck", "hungarian", "metrics", "scheduler"};
  return names;
}

SuiteReport run_verify_suite(const std::string& name) {
  if (name == "gradcheck") return verify_gradcheck();
  if (name == "hungarian") return verify_hungarian();
  if (name == "metrics") return verify_metrics();
  if (name == "scheduler") return verify_scheduler();
  throw ValidationError("unknown verify suite '" + name + "' (expected gradcheck, hungarian, metrics or scheduler)");
}

}  // namespace vloss
