#include "vloss/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "vloss/core/hash.hpp"
#include "vloss/core/ops.hpp"

namespace vloss {

template <typename Scalar>
OptimState<Scalar> OptimState<Scalar>::init(const ParamSet<Scalar>& ps, const AdamWHyper& h) {
  OptimState s;
  s.hyper = h;
  for (const auto& p : ps.items()) {
    s.m.emplace_back(p.value.numel(), Scalar(0));
    s.v.emplace_back(p.value.numel(), Scalar(0));
  }
  return s;
}

template <typename Scalar>
void adamw_update(std::span<Scalar> p, std::span<const Scalar> g, std::span<Scalar> m, std::span<Scalar> v, long t,
                  double lr, const AdamWHyper& h, bool decay) {
  if (g.size() != p.size() || m.size() != p.size() || v.size() != p.size()) {
    throw ValidationError("adamw: parameter, gradient and moment sizes differ (" + std::to_string(p.size()) + ", " +
                          std::to_string(g.size()) + ", " + std::to_string(m.size()) + ", " +
                          std::to_string(v.size()) + ")");
  }
  if (!(lr > 0)) throw ValidationError("adamw: learning rate must be positive");
  if (t < 1) throw ValidationError("adamw: step must be >= 1");
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  const double wd = decay ? h.weight_decay : 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = g[i];
    const double mi = h.beta1 * m[i] + (1 - h.beta1) * gi;
    const double vi = h.beta2 * v[i] + (1 - h.beta2) * gi * gi;
    m[i] = static_cast<Scalar>(mi);
    v[i] = static_cast<Scalar>(vi);
    const double pi = p[i];
    p[i] = static_cast<Scalar>(pi - lr * ((mi / c1) / (std::sqrt(vi / c2) + h.eps) + wd * pi));
  }
}

template <typename Scalar>
void adamw_step(ParamSet<Scalar>& ps, OptimState<Scalar>& state, double lr_main, double lr_text) {
  auto& items = ps.items();
  if (state.m.size() != items.size() || state.v.size() != items.size()) {
    throw ValidationError("adamw: optimizer state tracks " + std::to_string(state.m.size()) + " tensors, model has " +
                          std::to_string(items.size()));
  }
  ++state.t;
  std::vector<Scalar> zeros;
  for (std::size_t k = 0; k < items.size(); ++k) {
    auto& p = items[k];
    std::span<const Scalar> g = p.value.grad();
    if (!p.value.has_grad()) {
      zeros.assign(p.value.numel(), Scalar(0));
      g = zeros;
    }
    const double lr = p.group == ParamGroup::text_encoder ? lr_text : lr_main;
    adamw_update<Scalar>(p.value.mutable_data(), g, state.m[k], state.v[k], state.t, lr, state.hyper, p.decay);
  }
}

template <typename Scalar>
double grad_norm(const ParamSet<Scalar>& ps) {
  double sq = 0;
  for (const auto& p : ps.items())
    for (Scalar g : p.value.grad()) sq += static_cast<double>(g) * g;
  return std::sqrt(sq);
}

template <typename Scalar>
double clip_grad_norm(ParamSet<Scalar>& ps, double max_norm) {
  if (!(max_norm > 0)) throw ValidationError("clip_grad_norm: threshold must be positive");
  const double norm = grad_norm(ps);
  if (!std::isfinite(norm) || norm <= max_norm) return norm;
  const double f = max_norm / (norm + 1e-6);
  for (auto& p : ps.items()) {
    if (!p.value.has_grad()) continue;
    for (auto& g : detail::grad_buffer(p.value)) g = static_cast<Scalar>(g * f);
  }
  return norm;
}

// ---- config ----

void TrainConfig::validate() const {
  if (epochs < 1) throw ValidationError("train: epochs must be >= 1");
  if (!(base_lr > 0) || !(text_encoder_lr > 0)) throw ValidationError("train: learning rates must be positive");
  for (double d : decay_epochs) {
    if (!(d > 0) || d >= static_cast<double>(epochs)) {
      throw ValidationError("train: decay epoch " + std::to_string(d) + " must lie in (0, epochs)");
    }
  }
  if (!(decay_factor > 0) || decay_factor > 1) throw ValidationError("train: decay_factor must be in (0, 1]");
  if (batch_detection < 1 || batch_panoptic < 1 || batch_caption < 1) {
    throw ValidationError("train: batch sizes must be >= 1");
  }
  if (split_epoch && (*split_epoch < 0 || *split_epoch > epochs)) {
    throw ValidationError("train: split_epoch must lie in [0, epochs]");
  }
  weights.validate();
  if (!(adamw.beta1 >= 0 && adamw.beta1 < 1 && adamw.beta2 >= 0 && adamw.beta2 < 1 && adamw.eps > 0 &&
        adamw.weight_decay >= 0)) {
    throw ValidationError("train: need 0 <= beta < 1, eps > 0, weight_decay >= 0");
  }
  if (!(clip_norm > 0)) throw ValidationError("train: clip_norm must be positive");
  if (!(no_object_weight >= 0)) throw ValidationError("train: no_object_weight must be non-negative");
  if (max_steps && *max_steps < 1) throw ValidationError("train: max_steps must be >= 1");
  if (panoptic_split.empty() && detection_split.empty() && caption_split.empty()) {
    throw ValidationError("train: every stream is disabled");
  }
  model.validate();
}

namespace {

std::string cls_mode_name(ClsMode m) { return m == ClsMode::all ? "all" : "positive_only"; }

ClsMode parse_cls_mode(const std::string& s) {
  if (s == "all") return ClsMode::all;
  if (s == "positive_only") return ClsMode::positive_only;
  throw ValidationError("train: detection_cls must be 'all' or 'positive_only', got '" + s + "'");
}

void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
      throw ValidationError(where + ": unknown key '" + it.key() + "'");
    }
  }
}

}  // namespace

nlohmann::ordered_json TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["epochs"] = epochs;
  j["base_lr"] = base_lr;
  j["text_encoder_lr"] = text_encoder_lr;
  j["decay_epochs"] = decay_epochs;
  j["decay_factor"] = decay_factor;
  j["batch_detection"] = batch_detection;
  j["batch_panoptic"] = batch_panoptic;
  j["batch_caption"] = batch_caption;
  j["strategy"] = std::string(to_string(strategy));
  j["split_epoch"] = split_epoch ? nlohmann::ordered_json(*split_epoch) : nlohmann::ordered_json();
  j["seed"] = seed;
  j["weights"] = {{"cls", weights.cls}, {"bce", weights.bce}, {"dice", weights.dice}, {"con", weights.con}};
  j["adamw"] = {{"beta1", adamw.beta1},
                {"beta2", adamw.beta2},
                {"eps", adamw.eps},
                {"weight_decay", adamw.weight_decay}};
  j["clip_norm"] = clip_norm;
  j["detection_cls"] = cls_mode_name(detection_cls);
  j["no_object_weight"] = no_object_weight;
  j["hflip"] = hflip;
  j["deep_supervision"] = deep_supervision;
  j["max_steps"] = max_steps ? nlohmann::ordered_json(*max_steps) : nlohmann::ordered_json();
  j["panoptic_split"] = panoptic_split;
  j["detection_split"] = detection_split;
  j["caption_split"] = caption_split;
  j["model"] = model.to_json();
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  reject_unknown(j,
                 {"epochs", "base_lr", "text_encoder_lr", "decay_epochs", "decay_factor", "batch_detection",
                  "batch_panoptic", "batch_caption", "strategy", "split_epoch", "seed", "weights", "adamw",
                  "clip_norm", "detection_cls", "no_object_weight", "hflip", "deep_supervision", "max_steps", "panoptic_split",
                  "detection_split", "caption_split", "model"},
                 "train config");
  TrainConfig c;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.base_lr = j.value("base_lr", c.base_lr);
    c.text_encoder_lr = j.value("text_encoder_lr", c.text_encoder_lr);
    if (j.contains("decay_epochs")) c.decay_epochs = j.at("decay_epochs").get<std::vector<double>>();
    c.decay_factor = j.value("decay_factor", c.decay_factor);
    c.batch_detection = j.value("batch_detection", c.batch_detection);
    c.batch_panoptic = j.value("batch_panoptic", c.batch_panoptic);
    c.batch_caption = j.value("batch_caption", c.batch_caption);
    if (j.contains("strategy")) c.strategy = parse_strategy(j.at("strategy").get<std::string>());
    if (j.contains("split_epoch") && !j.at("split_epoch").is_null()) c.split_epoch = j.at("split_epoch").get<Index>();
    c.seed = j.value("seed", c.seed);
    if (j.contains("weights")) {
      const auto& w = j.at("weights");
      reject_unknown(w, {"cls", "bce", "dice", "con"}, "train config weights");
      c.weights.cls = w.value("cls", c.weights.cls);
      c.weights.bce = w.value("bce", c.weights.bce);
      c.weights.dice = w.value("dice", c.weights.dice);
      c.weights.con = w.value("con", c.weights.con);
    }
    if (j.contains("adamw")) {
      const auto& a = j.at("adamw");
      reject_unknown(a, {"beta1", "beta2", "eps", "weight_decay"}, "train config adamw");
      c.adamw.beta1 = a.value("beta1", c.adamw.beta1);
      c.adamw.beta2 = a.value("beta2", c.adamw.beta2);
      c.adamw.eps = a.value("eps", c.adamw.eps);
      c.adamw.weight_decay = a.value("weight_decay", c.adamw.weight_decay);
    }
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    if (j.contains("detection_cls")) c.detection_cls = parse_cls_mode(j.at("detection_cls").get<std::string>());
    c.no_object_weight = j.value("no_object_weight", c.no_object_weight);
    c.hflip = j.value("hflip", c.hflip);
    c.deep_supervision = j.value("deep_supervision", c.deep_supervision);
    if (j.contains("max_steps") && !j.at("max_steps").is_null()) c.max_steps = j.at("max_steps").get<long>();
    c.panoptic_split = j.value("panoptic_split", c.panoptic_split);
    c.detection_split = j.value("detection_split", c.detection_split);
    c.caption_split = j.value("caption_split", c.caption_split);
    if (j.contains("model")) c.model = VLModelConfig::from_json(j.at("model"));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

std::uint64_t TrainConfig::hash() const { return fnv1a(to_json().dump()); }

double lr_at(double epoch_progress, const TrainConfig& cfg, ParamGroup group) {
  if (!(epoch_progress >= 0) || epoch_progress > static_cast<double>(cfg.epochs)) {
    throw ValidationError("lr_at: progress " + std::to_string(epoch_progress) + " outside [0, " +
                          std::to_string(cfg.epochs) + "]");
  }
  double lr = group == ParamGroup::text_encoder ? cfg.text_encoder_lr : cfg.base_lr;
  for (double d : cfg.decay_epochs)
    if (epoch_progress >= d) lr *= cfg.decay_factor;
  return lr;
}

// ---- data ----

TrainData TrainData::load(const std::filesystem::path& root, const TrainConfig& cfg) {
  TrainData d;
  auto one = [&](const std::string& name, Stream s) -> std::optional<Split> {
    if (name.empty()) return std::nullopt;
    const auto dir = root / name;
    if (!std::filesystem::exists(dir / "index.json")) {
      throw ValidationError("train: missing " + std::string(to_string(s)) + " split at " + dir.string());
    }
    return load_dataset(dir, s);
  };
  d.panoptic = one(cfg.panoptic_split, Stream::panoptic);
  d.detection = one(cfg.detection_split, Stream::detection);
  d.caption = one(cfg.caption_split, Stream::caption);
  return d;
}

LabelSpace TrainData::label_space() const {
  std::vector<LabelSpace> spaces;
  if (panoptic) spaces.push_back(panoptic->labels);
  if (detection) spaces.push_back(detection->labels);
  return unify_label_space(spaces);
}

const Split* TrainData::split(Stream s) const {
  const auto& o = s == Stream::panoptic ? panoptic : s == Stream::detection ? detection : caption;
  return o ? &*o : nullptr;
}

Vocabulary vocab_for(const TrainData& data, const TrainConfig& cfg, const std::vector<std::string>& extra_names) {
  std::vector<std::string> names = data.label_space().names, captions;
  names.insert(names.end(), extra_names.begin(), extra_names.end());
  for (Stream s : {Stream::panoptic, Stream::detection, Stream::caption}) {
    if (const Split* sp = data.split(s))
      for (const auto& smp : sp->samples)
        if (!smp.caption.empty()) captions.push_back(smp.caption);
  }
  return build_run_vocab(names, captions, cfg.model.prompt_template);
}

// ---- loss recipes ----

template <typename Scalar>
MatchTargets<Scalar> make_targets(const Sample& s) {
  MatchTargets<Scalar> t;
  const Index h = s.height(), w = s.width();
  std::vector<Scalar> px;
  px.reserve(s.annotations.size() * h * w);
  for (const auto& a : s.annotations) {
    if (a.mask.h != h || a.mask.w != w) throw ValidationError("sample " + s.id + ": mask size differs from image");
    t.labels.push_back(a.category);
    t.is_thing.push_back(a.is_thing);
    for (auto v : a.mask.px) px.push_back(v ? Scalar(1) : Scalar(0));
  }
  t.masks = Tensor<Scalar>({static_cast<Index>(s.annotations.size()), h, w}, std::move(px));
  return t;
}

namespace {

template <typename Scalar>
void check_finite(const Tensor<Scalar>& t, const Sample& s) {
  for (Scalar v : t.data())
    if (!std::isfinite(static_cast<double>(v))) throw RuntimeAbort("non-finite predictions on sample " + s.id);
}

// Matched cls / bce / dice for one prediction set.
template <typename Scalar>
std::array<Tensor<Scalar>, 3> set_losses(const Tensor<Scalar>& c, const Tensor<Scalar>& mk,
                                         const MatchTargets<Scalar>& targets, const LossWeights& w, ClsMode mode,
                                         double no_object_weight) {
  const MatchResult match = match_queries(c, mk, targets, w);
  std::array<Tensor<Scalar>, 3> out;
  out[0] = classification_loss(c, match.y, mode, no_object_weight);
  const auto qs = match.matched_queries();
  if (qs.empty()) {
    out[1] = out[2] = Tensor<Scalar>::scalar(Scalar(0));
    return out;
  }
  const Index n = mk.dim(0), h = mk.dim(1), wd = mk.dim(2);
  const Index m = static_cast<Index>(qs.size());
  const Tensor<Scalar> picked = reshape(embedding_lookup(reshape(mk, {n, h * wd}), qs), {m, h, wd});
  std::vector<Scalar> tv;
  tv.reserve(m * h * wd);
  for (Index q : qs) {
    const auto src = targets.masks.data().subspan(match.target_of_query[q] * h * wd, h * wd);
    tv.insert(tv.end(), src.begin(), src.end());
  }
  const Tensor<Scalar> tgt({m, h, wd}, std::move(tv));
  out[1] = bce_mask_loss(picked, tgt);
  out[2] = dice_loss(picked, tgt);
  return out;
}

}  // namespace

template <typename Scalar>
LossTerms<Scalar> dense_loss_terms(const VLModel<Scalar>& model, const std::vector<const Sample*>& batch,
                                   const Tensor<Scalar>& e_cls, const LossWeights& w, ClsMode mode,
                                   double no_object_weight, bool deep_supervision) {
  if (batch.empty()) throw ValidationError("dense_loss_terms: empty batch");
  std::array<Tensor<Scalar>, 3> acc;
  Index sets = 0;
  auto accumulate = [&](const std::array<Tensor<Scalar>, 3>& t) {
    for (int k = 0; k < 3; ++k) acc[k] = acc[k].defined() ? add(acc[k], t[k]) : t[k];
    ++sets;
  };
  for (const Sample* s : batch) {
    const auto pred = predict_image(model, s->image, e_cls, deep_supervision);
    check_finite(pred.class_logits, *s);
    check_finite(pred.mask_logits, *s);
    const auto targets = make_targets<Scalar>(*s);
    accumulate(set_losses(pred.class_logits, pred.mask_logits, targets, w, mode, no_object_weight));
    for (std::size_t i = 0; i < pred.aux_class_logits.size(); ++i)
      accumulate(set_losses(pred.aux_class_logits[i], pred.aux_mask_logits[i], targets, w, mode, no_object_weight));
  }
  const Scalar inv = Scalar(1) / static_cast<Scalar>(sets);
  LossTerms<Scalar> terms;
  terms.cls = scale(acc[0], inv);
  terms.bce = scale(acc[1], inv);
  terms.dice = scale(acc[2], inv);
  return terms;
}

template <typename Scalar>
Tensor<Scalar> image_embedding(const VLModel<Scalar>& model, const Tensor<float>& hwc) {
  const auto& seg = model.seg;
  const auto refined = seg.encode_multiscale(seg.extract_features(image_to_input<Scalar>(hwc, seg.cfg.coord_channels)));
  return seg.decode_queries(seg.query_init, global_pool(refined.levels[0]), refined).e_img;
}

template <typename Scalar>
LossTerms<Scalar> caption_loss_terms(const VLModel<Scalar>& model, const std::vector<const Sample*>& batch) {
  if (batch.empty()) throw ValidationError("caption_loss_terms: empty batch");
  std::vector<Tensor<Scalar>> imgs;
  std::vector<std::string> caps;
  for (const Sample* s : batch) {
    if (s->caption.empty()) throw ValidationError("caption batch: sample " + s->id + " has no caption");
    imgs.push_back(image_embedding(model, s->image));
    caps.push_back(s->caption);
  }
  LossTerms<Scalar> terms;
  terms.con = contrastive_loss(contrastive_sim(concat(imgs, 0), model.encode_captions(caps), model.tau()));
  return terms;
}

// ---- loop ----

namespace {

Index stream_batch(const TrainConfig& cfg, Stream s) {
  return s == Stream::detection ? cfg.batch_detection : s == Stream::panoptic ? cfg.batch_panoptic : cfg.batch_caption;
}

std::string describe(const LossReport& r) {
  std::ostringstream os;
  os << "total=" << r.total;
  if (r.cls) os << " cls=" << *r.cls;
  if (r.bce) os << " bce=" << *r.bce;
  if (r.dice) os << " dice=" << *r.dice;
  if (r.con) os << " con=" << *r.con;
  return os.str();
}

}  // namespace

template <typename Scalar>
TrainResult<Scalar> train(const TrainConfig& cfg, const TrainData& data, const TrainHooks& hooks) {
  cfg.validate();
  std::vector<DatasetHandle> handles;
  for (Stream s : {Stream::detection, Stream::panoptic, Stream::caption}) {
    const Split* sp = data.split(s);
    if (!sp || sp->samples.empty()) continue;
    const Index bs = stream_batch(cfg, s);
    handles.push_back({s, (static_cast<Index>(sp->samples.size()) + bs - 1) / bs, bs});
  }
  if (handles.empty()) throw ValidationError("train: no samples in any enabled split");

  TrainResult<Scalar> res;
  Checkpoint<Scalar>& ck = res.last;
  ck.config = cfg;
  ck.labels = data.label_space();
  ck.model = make_vl_model<Scalar>(cfg.model, vocab_for(data, cfg), cfg.seed);
  ck.opt = OptimState<Scalar>::init(ck.model.params, cfg.adamw);
  std::seed_seq sseq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32), 0x7e41u};
  std::mt19937_64 rng(sseq);

  std::ofstream csv;
  if (hooks.out_dir) {
    std::filesystem::create_directories(*hooks.out_dir);
    csv.open(*hooks.out_dir / "metrics.csv");
    if (!csv) throw RuntimeAbort("train: cannot write " + (*hooks.out_dir / "metrics.csv").string());
    csv << metrics_csv_header() << "\n";
  }

  auto& model = ck.model;
  double best = std::numeric_limits<double>::infinity();
  bool stop = false;
  for (Index epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    const EpochPlan plan = build_epoch_plan(cfg.strategy, handles, epoch, cfg.epochs, cfg.seed, {cfg.split_epoch});
    std::array<std::vector<std::size_t>, 3> order;
    for (const auto& hd : handles) {
      auto& o = order[static_cast<int>(hd.stream)];
      o.resize(data.split(hd.stream)->samples.size());
      std::iota(o.begin(), o.end(), std::size_t{0});
      std::shuffle(o.begin(), o.end(), rng);
    }
    double epoch_sum = 0;
    Index epoch_steps = 0;
    for (Index pos = 0; pos < plan.size(); ++pos) {
      const BatchTicket& tk = plan.tickets[pos];
      const Split& sp = *data.split(tk.stream);
      const auto& o = order[static_cast<int>(tk.stream)];
      const Index bs = stream_batch(cfg, tk.stream);
      std::vector<Sample> flipped;
      std::vector<const Sample*> batch;
      const std::size_t lo = tk.batch_index * bs, hi = std::min(o.size(), static_cast<std::size_t>(lo + bs));
      flipped.reserve(hi - lo);
      for (std::size_t i = lo; i < hi; ++i) {
        const Sample& s = sp.samples[o[i]];
        if (cfg.hflip && std::uniform_int_distribution<int>(0, 1)(rng)) {
          flipped.push_back(horizontal_flip(s));
          batch.push_back(&flipped.back());
        } else {
          batch.push_back(&s);
        }
      }

      model.params.zero_grad();
      LossTerms<Scalar> terms;
      try {
        if (tk.stream == Stream::caption) {
          terms = caption_loss_terms(model, batch);
        } else {
          const ClsMode mode = tk.stream == Stream::detection ? cfg.detection_cls : ClsMode::all;
          terms = dense_loss_terms(model, batch, model.class_embeddings(sp.labels.names), cfg.weights, mode,
                                   cfg.no_object_weight, cfg.deep_supervision);
        }
      } catch (const RuntimeAbort& e) {
        throw RuntimeAbort("train: step " + std::to_string(ck.step) + " (epoch " + std::to_string(epoch) + ", " +
                           std::string(to_string(tk.stream)) + "): " + e.what());
      }
      const Tensor<Scalar> total = total_loss(terms, cfg.weights, tk.stream);
      StepLog log;
      log.step = ck.step;
      log.epoch = epoch;
      log.stream = tk.stream;
      log.report = make_report(terms, total);
      if (!std::isfinite(log.report.total)) {
        throw RuntimeAbort("train: non-finite loss at step " + std::to_string(ck.step) + " (epoch " +
                           std::to_string(epoch) + ", " + std::string(to_string(tk.stream)) + " batch " +
                           std::to_string(tk.batch_index) + "): " + describe(log.report));
      }
      backward(total);
      log.grad_norm = clip_grad_norm(model.params, cfg.clip_norm);
      if (!std::isfinite(log.grad_norm)) {
        throw RuntimeAbort("train: non-finite gradient at step " + std::to_string(ck.step) + " (" +
                           std::string(to_string(tk.stream)) + ")");
      }
      const double progress = epoch + static_cast<double>(pos) / plan.size();
      log.lr_main = lr_at(progress, cfg, ParamGroup::main);
      adamw_step(model.params, ck.opt, log.lr_main, lr_at(progress, cfg, ParamGroup::text_encoder));
      model.params.zero_grad();

      if (csv.is_open()) csv << metrics_csv_row(log.step, log.stream, log.report) << "\n";
      if (hooks.on_step) hooks.on_step(log);
      res.log.push_back(log);
      epoch_sum += log.report.total;
      ++epoch_steps;
      ++ck.step;
      if (cfg.max_steps && ck.step >= *cfg.max_steps) {
        stop = true;
        break;
      }
    }
    ck.epoch = epoch + 1;
    const double mean_loss = epoch_steps ? epoch_sum / epoch_steps : 0.0;
    res.epoch_mean_loss.push_back(mean_loss);
    std::ostringstream rs;
    rs << rng;
    ck.rng_state = rs.str();
    if (hooks.out_dir && mean_loss < best) {
      best = mean_loss;
      save_checkpoint(ck, *hooks.out_dir / "best.vlck");
    }
  }
  if (hooks.out_dir) {
    csv.flush();
    save_checkpoint(ck, *hooks.out_dir / "last.vlck");
  }
  return res;
}

#define VLOSS_INSTANTIATE(S)                                                                                    \
  template struct OptimState<S>;                                                                                \
  template void adamw_update<S>(std::span<S>, std::span<const S>, std::span<S>, std::span<S>, long, double,      \
                                const AdamWHyper&, bool);                                                       \
  template void adamw_step<S>(ParamSet<S>&, OptimState<S>&, double, double);                                    \
  template double clip_grad_norm<S>(ParamSet<S>&, double);                                                      \
  template double grad_norm<S>(const ParamSet<S>&);                                                             \
  template MatchTargets<S> make_targets<S>(const Sample&);                                                      \
  template LossTerms<S> dense_loss_terms<S>(const VLModel<S>&, const std::vector<const Sample*>&, const Tensor<S>&, \
                                            const LossWeights&, ClsMode, double, bool);                               \
  template LossTerms<S> caption_loss_terms<S>(const VLModel<S>&, const std::vector<const Sample*>&);           \
  template Tensor<S> image_embedding<S>(const VLModel<S>&, const Tensor<float>&);                               \
  template TrainResult<S> train<S>(const TrainConfig&, const TrainData&, const TrainHooks&);
VLOSS_INSTANTIATE(float)
VLOSS_INSTANTIATE(double)
#undef VLOSS_INSTANTIATE

}  // namespace vloss
