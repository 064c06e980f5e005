// Acceptance run: one PASS/FAIL line per criterion, exit 0 iff all pass.
//
//   acceptance [path/to/vloss]      (the CLI is needed for criterion 10)
//
// VLOSS_ACCEPT_ONLY=1,4,10 restricts the run to the listed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "vloss/core/ops.hpp"
#include "vloss/eval/evaluator.hpp"
#include "vloss/losses/losses.hpp"
#include "vloss/train/trainer.hpp"
#include "vloss/verify/suites.hpp"

using namespace vloss;

namespace {

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool ok = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

std::string suite_detail(const SuiteReport& r) {
  std::string d = std::to_string(r.checks.size() - r.failures()) + "/" + std::to_string(r.checks.size()) +
                  " checks in " + fmt(r.seconds, 3) + " s";
  for (const auto& c : r.checks)
    if (!c.ok) d += "; failed " + c.name + " (" + c.detail + ")";
  return d;
}

// ---- 1-4: oracles ----

Outcome c1_gradients() {
  const auto r = verify_gradcheck(10, 1e-4);
  return {r.passed() && r.seconds < 300, suite_detail(r) + ", limit 300 s"};
}

Outcome c2_hungarian() {
  const auto r = verify_hungarian(1000, 2);
  return {r.passed() && r.seconds < 60, suite_detail(r) + "; " + r.checks[0].detail + ", limit 60 s"};
}

Outcome c3_metrics() {
  const auto r = verify_metrics(100, 3);
  return {r.passed(), suite_detail(r)};
}

Outcome c4_contrastive() {
  using T = Tensor<double>;
  const T one = T::scalar(1.0);
  // B = 1
  const T a1({1, 3}, std::vector<double>{0.3, -1.2, 2.0}), b1({1, 3}, std::vector<double>{1.0, 0.5, -0.7});
  const double l1 = contrastive_loss(contrastive_sim(a1, b1, T::scalar(0.07))).item();
  // B = 2 orthonormal pairs, tau = 1: log(1 + e^-1)
  const T e({2, 2}, std::vector<double>{1, 0, 0, 1});
  const double l2 = contrastive_loss(contrastive_sim(e, e, one)).item();
  // transpose invariance on a random similarity matrix
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0, 2);
  std::vector<double> sv(25);
  for (auto& x : sv) x = n(rng);
  const T s({5, 5}, sv);
  const double dt = std::abs(contrastive_loss(s).item() - contrastive_loss(transpose(s)).item());
  // FILIP with one token per side equals the pooled loss
  std::vector<double> iv(12), tv(12);
  for (auto& x : iv) x = n(rng);
  for (auto& x : tv) x = n(rng);
  const T img({4, 3}, iv), txt({4, 3}, tv), tau = T::scalar(0.3);
  const double clip = contrastive_loss(contrastive_sim(img, txt, tau)).item();
  const double filip = filip_contrastive_loss(reshape(img, {4, 1, 3}), reshape(txt, {4, 1, 3}), tau).item();
  const double df = std::abs(clip - filip);
  const bool ok = l1 == 0.0 && std::abs(l2 - 0.31326) <= 1e-4 && dt <= 1e-12 && df <= 1e-12;
  return {ok, "B=1 loss " + fmt(l1, 17) + ", B=2 orthonormal " + fmt(l2, 7) + " (target 0.31326 +- 1e-4), |L(S)-L(S^T)| " +
                  fmt(dt, 3) + ", |FILIP-CLIP| " + fmt(df, 3)};
}

// ---- 5-6: training runs ----

TrainConfig base_config() {
  TrainConfig c;
  c.model.seg.dim = c.model.text.dim = 32;
  c.model.seg.queries = 10;
  c.model.seg.decoder_layers = 3;
  return c;
}

void decay_at_paper_fractions(TrainConfig& c) { c.decay_epochs = {c.epochs * 8.0 / 12.0, c.epochs * 11.0 / 12.0}; }

Outcome c5_overfit() {
  const auto t0 = Clock::now();
  SynthConfig s;  // 8 images, 64x64, 3 things + 2 stuff
  TrainData d;
  d.panoptic = generate_synth_panoptic(s, 0);
  TrainConfig c = base_config();
  c.detection_split = c.caption_split = "";
  c.batch_panoptic = 8;
  c.epochs = 2000;  // one step per epoch
  decay_at_paper_fractions(c);
  const auto res = train<float>(c, d);
  const auto rep = evaluate_split(res.last.model, *d.panoptic, d.panoptic->labels);
  const double secs = since(t0);
  return {rep.pq.pq_all >= 0.9 && res.log.size() <= 2000 && secs < 1800,
          "train PQ_all " + fmt(rep.pq.pq_all) + " (>= 0.9) after " + std::to_string(res.log.size()) + " steps, " +
              fmt(secs, 4) + " s (< 1800)"};
}

Outcome c6_retrieval() {
  const auto t0 = Clock::now();
  SynthConfig s;
  s.num_images = 16;
  TrainData d;
  d.caption = generate_synth_captions(s, 0);
  TrainConfig c = base_config();
  c.panoptic_split = c.detection_split = "";
  c.batch_caption = 16;
  c.epochs = 1000;
  c.decay_epochs = {};
  const auto res = train<float>(c, d);
  const auto r = evaluate_retrieval(res.last.model, *d.caption);
  const double secs = since(t0);
  return {r.image_to_text == 1.0 && r.text_to_image == 1.0 && res.log.size() <= 1000 && secs < 600,
          "i2t " + fmt(r.image_to_text) + ", t2i " + fmt(r.text_to_image) + " after " + std::to_string(res.log.size()) +
              " steps, " + fmt(secs, 4) + " s (< 600)"};
}

// ---- 7-9: omni corpus ----

struct OmniRun {
  double pq_all = 0, pq_st = 0, pq_th = 0;
  double heldout_class_pq = 0, random_baseline_pq = 0;
  double no_object = 0;
  Index no_object_queries = 0;
  bool params_unchanged = false;
  bool heldout_reported = false;
};

struct OmniCorpus {
  SynthConfig synth;
  TrainData data;
  Split heldout;
};

OmniCorpus omni_corpus(std::uint64_t seed) {
  OmniCorpus o;
  auto& s = o.synth;
  s.num_images = 64;
  s.image_size = 32;
  s.stuff_classes = {"sky", "grass", "sand"};
  s.vocab_extra_classes = {"yellow star", "purple diamond"};
  s.held_out_classes = {"red rectangle"};
  o.data.panoptic = generate_synth_panoptic(s, seed * 10 + 1);
  o.data.detection = generate_synth_detection(s, seed * 10 + 2);
  o.data.caption = generate_synth_captions(s, seed * 10 + 3);
  SynthConfig hs = s;
  hs.num_images = 32;
  o.heldout = generate_synth_heldout(hs, 1000 + seed);
  return o;
}

OmniRun omni_run(const OmniCorpus& o, Strategy st, ClsMode mode, std::uint64_t seed) {
  TrainConfig c = base_config();
  c.model.seg.image_h = c.model.seg.image_w = o.synth.image_size;
  c.batch_panoptic = c.batch_detection = 4;
  c.batch_caption = 8;
  c.base_lr = 6e-4;
  c.epochs = 100;
  decay_at_paper_fractions(c);
  c.strategy = st;
  c.detection_cls = mode;
  c.seed = seed;
  const auto res = train<float>(c, o.data);
  const auto& model = res.last.model;

  OmniRun r;
  const LabelSpace classes = extend_label_space(res.last.labels, o.heldout.labels);
  const std::uint64_t h0 = param_hash(model.params);
  const EvalReport rep = evaluate_split(model, o.heldout, classes);
  r.params_unchanged = rep.param_hash_before == h0 && rep.param_hash_after == h0 && param_hash(model.params) == h0;
  r.pq_all = rep.pq.pq_all;
  r.pq_th = rep.pq.pq_th;
  r.pq_st = rep.pq.pq_st;

  std::vector<Index> heldout_ids;
  for (const auto& n : o.synth.held_out_classes) heldout_ids.push_back(classes.index_of(n));
  const auto mine = rep.pq.mean_pq(heldout_ids);
  r.heldout_reported = mine.has_value();
  r.heldout_class_pq = mine.value_or(0.0);

  std::vector<PanopticSeg> gts;
  for (const auto& smp : o.heldout.samples) {
    PanopticSeg g = gt_panoptic(smp);
    for (auto& seg : g.segments) seg.category = classes.index_of(o.heldout.labels.names[seg.category]);
    gts.push_back(std::move(g));
  }
  constexpr int kDraws = 20;
  for (int k = 0; k < kDraws; ++k) {
    const auto shuffled = random_class_assignment(rep.predictions, classes, 7000 + k);
    r.random_baseline_pq += panoptic_quality(shuffled, gts, classes).mean_pq(heldout_ids).value_or(0.0) / kDraws;
  }

  const auto no = no_object_on_stuff(model, o.heldout, classes);
  r.no_object = no.mean_prob;
  r.no_object_queries = no.queries;
  return r;
}

struct OmniResults {
  std::vector<OmniRun> stt, mix, pf, stt_all;
};

OmniResults omni_results() {
  OmniResults out;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const OmniCorpus o = omni_corpus(seed);
    const auto t0 = Clock::now();
    out.stt.push_back(omni_run(o, Strategy::stt, ClsMode::positive_only, seed));
    out.mix.push_back(omni_run(o, Strategy::mix, ClsMode::positive_only, seed));
    out.pf.push_back(omni_run(o, Strategy::pretrain_finetune, ClsMode::positive_only, seed));
    out.stt_all.push_back(omni_run(o, Strategy::stt, ClsMode::all, seed));
    std::printf("# omni seed %llu: %.0f s\n", static_cast<unsigned long long>(seed), since(t0));
    for (auto [name, v] : {std::pair{"stt", &out.stt}, {"mix", &out.mix}, {"pretrain_finetune", &out.pf},
                           {"stt/all", &out.stt_all}}) {
      const OmniRun& x = v->back();
      std::printf("#   %-17s PQ_all %.4f PQ_th %.4f PQ_st %.4f held-out class PQ %.4f (random %.4f) "
                  "no-object on stuff %.4f over %lld queries\n",
                  name, x.pq_all, x.pq_th, x.pq_st, x.heldout_class_pq, x.random_baseline_pq, x.no_object,
                  static_cast<long long>(x.no_object_queries));
    }
    std::fflush(stdout);
  }
  return out;
}

template <typename F>
double mean_of(const std::vector<OmniRun>& v, F f) {
  double s = 0;
  for (const auto& x : v) s += f(x);
  return v.empty() ? 0.0 : s / v.size();
}

Outcome c7_stt(const OmniResults& r) {
  const double st = mean_of(r.stt, [](const OmniRun& x) { return x.pq_st; });
  const double mx = mean_of(r.mix, [](const OmniRun& x) { return x.pq_st; });
  int wins = 0;
  std::string per_seed;
  for (std::size_t i = 0; i < r.stt.size(); ++i) {
    wins += r.stt[i].pq_all >= r.pf[i].pq_all;
    per_seed += (i ? ", " : "") + fmt(r.stt[i].pq_all) + " vs " + fmt(r.pf[i].pq_all);
  }
  return {st > mx && wins >= 2, "mean held-out PQ_st stt " + fmt(st) + " vs mix " + fmt(mx) +
                                    "; PQ_all stt vs pretrain_finetune per seed: " + per_seed + " (" +
                                    std::to_string(wins) + "/3 stt >=)"};
}

Outcome c8_positive_loss(const OmniResults& r) {
  const double all = mean_of(r.stt_all, [](const OmniRun& x) { return x.no_object; });
  const double pos = mean_of(r.stt, [](const OmniRun& x) { return x.no_object; });
  bool counted = true;
  for (const auto* v : {&r.stt, &r.stt_all})
    for (const auto& x : *v) counted = counted && x.no_object_queries > 0;
  return {counted && all > pos, "mean no-object probability on stuff-overlapping held-out queries: all " + fmt(all) +
                                    " vs positive_only " + fmt(pos)};
}

Outcome c9_zero_shot(const OmniResults& r) {
  bool hashes = true, reported = true;
  for (const auto* v : {&r.stt, &r.mix, &r.pf, &r.stt_all})
    for (const auto& x : *v) {
      hashes = hashes && x.params_unchanged;
      reported = reported && x.heldout_reported;
    }
  const double pq = mean_of(r.stt, [](const OmniRun& x) { return x.heldout_class_pq; });
  const double base = mean_of(r.stt, [](const OmniRun& x) { return x.random_baseline_pq; });
  return {hashes && reported && pq > base,
          std::string("parameter hash ") + (hashes ? "unchanged" : "CHANGED") + ", held-out class rows " +
              (reported ? "present" : "MISSING") + ", held-out class PQ (stt, 3 seeds) " + fmt(pq) +
              " vs random-class baseline " + fmt(base)};
}

// ---- 10 ----

Outcome c10_scheduler(const std::string& cli) {
  const auto r = verify_scheduler(200, 10);
  std::string detail = suite_detail(r);
  bool cli_ok = false;
  if (cli.empty()) {
    detail += "; CLI path not given";
  } else {
    const std::string cmd = "\"" + cli + "\" verify scheduler > /dev/null";
    const int rc = std::system(cmd.c_str());
    cli_ok = rc == 0;
    detail += "; `vloss verify scheduler` exit " + std::to_string(WIFEXITED(rc) ? WEXITSTATUS(rc) : -1);
  }
  return {r.passed() && cli_ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::string cli = argc > 1 ? argv[1] : "";
  std::set<int> only;
  if (const char* e = std::getenv("VLOSS_ACCEPT_ONLY")) {
    std::stringstream ss(e);
    std::string tok;
    while (std::getline(ss, tok, ',')) only.insert(std::stoi(tok));
  }
  auto wanted = [&](int k) { return only.empty() || only.count(k); };

  int failed = 0;
  auto report = [&](int k, const std::string& title, const std::function<Outcome()>& fn) {
    if (!wanted(k)) return;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& ex) {
      o = {false, std::string("exception: ") + ex.what()};
    }
    failed += !o.ok;
    std::printf("%s criterion %d (%s): %s [%.1f s]\n", o.ok ? "PASS" : "FAIL", k, title.c_str(), o.detail.c_str(),
                since(t0));
    std::fflush(stdout);
  };

  report(1, "gradient suite", c1_gradients);
  report(2, "Hungarian oracle", c2_hungarian);
  report(3, "metric oracles", c3_metrics);
  report(4, "contrastive correctness", c4_contrastive);
  report(5, "overfit run", c5_overfit);
  report(6, "retrieval run", c6_retrieval);
  if (wanted(7) || wanted(8) || wanted(9)) {
    std::optional<OmniResults> omni;
    std::string error;
    try {
      omni = omni_results();
    } catch (const std::exception& ex) {
      error = ex.what();
    }
    auto guarded = [&](auto fn) {
      return [&, fn]() -> Outcome {
        if (!omni) return {false, "omni runs failed: " + error};
        return fn(*omni);
      };
    };
    report(7, "STT direction", guarded(c7_stt));
    report(8, "positive-loss direction", guarded(c8_positive_loss));
    report(9, "zero-shot contract", guarded(c9_zero_shot));
  }
  report(10, "scheduler properties", [&] { return c10_scheduler(cli); });
  std::printf("%d criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
