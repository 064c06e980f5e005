#include "vloss/model/segmenter.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <map>
#include <nlohmann/json.hpp>

#include "vloss/core/ops.hpp"

namespace vloss {

std::string_view to_string(EncoderVariant v) { return v == EncoderVariant::fpn_style ? "fpn_style" : "fpn_plain"; }

EncoderVariant parse_encoder_variant(std::string_view name) {
  if (name == "fpn_style") return EncoderVariant::fpn_style;
  if (name == "fpn_plain") return EncoderVariant::fpn_plain;
  throw ValidationError("unknown encoder variant '" + std::string(name) + "' (expected fpn_style or fpn_plain)");
}

void ModelConfig::validate() const {
  if (queries < 1) throw ValidationError("model: need at least one query");
  if (dim < 2 || dim % heads != 0 || dim % 4 != 0) throw ValidationError("model: dim must be a multiple of 4 and of heads");
  if (decoder_layers < 0) throw ValidationError("model: decoder_layers must be >= 0");
  if (image_h % 32 != 0 || image_w % 32 != 0 || image_h < 32 || image_w < 32) {
    throw ValidationError("model: image size " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                          " not divisible by 32");
  }
}

template <typename Scalar>
Tensor<Scalar> global_pool(const Tensor<Scalar>& level) {
  if (level.rank() != 3) throw ValidationError("global_pool: expected [D, h, w], got " + shape_str(level.shape()));
  return reshape(mean_pool_spatial(level), {1, level.dim(0)});
}

template <typename Scalar>
Tensor<Scalar> mask_inner_product(const Tensor<Scalar>& e_obj, const Tensor<Scalar>& f3) {
  if (e_obj.rank() != 2 || f3.rank() != 3 || e_obj.dim(1) != f3.dim(0)) {
    throw ValidationError("predict_masks: query width " + shape_str(e_obj.shape()) + " vs features " +
                          shape_str(f3.shape()));
  }
  const Index h = f3.dim(1), w = f3.dim(2);
  return reshape(matmul(e_obj, reshape(f3, {f3.dim(0), h * w})), {e_obj.dim(0), h, w});
}

template <typename Scalar>
Tensor<Scalar> classify_queries(const Tensor<Scalar>& e_obj, const Tensor<Scalar>& e_cls,
                                const Tensor<Scalar>& log_scale) {
  if (e_obj.rank() != 2 || e_cls.rank() != 2 || e_obj.dim(1) != e_cls.dim(1)) {
    throw ValidationError("classify_queries: " + shape_str(e_obj.shape()) + " vs class embeddings " +
                          shape_str(e_cls.shape()));
  }
  if (!log_scale.defined()) return matmul(e_obj, transpose(e_cls));
  const Scalar eps(1e-12);
  const Tensor<Scalar> cos = matmul(l2_normalize(e_obj, 1, eps), transpose(l2_normalize(e_cls, 1, eps)));
  return mul(cos, exp(reshape(log_scale, {})));
}

template <typename Scalar>
Tensor<Scalar> sine_position(Index h, Index w, Index dim) {
  const Index quarter = dim / 4;
  std::vector<Scalar> v(h * w * dim, Scalar(0));
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const double ny = (y + 0.5) / h * 2 * M_PI, nx = (x + 0.5) / w * 2 * M_PI;
      for (Index k = 0; k < quarter; ++k) {
        const double f = std::pow(10000.0, -static_cast<double>(k) / quarter);
        Scalar* row = &v[(y * w + x) * dim];
        row[k] = static_cast<Scalar>(std::sin(ny * f * 8));
        row[quarter + k] = static_cast<Scalar>(std::cos(ny * f * 8));
        row[2 * quarter + k] = static_cast<Scalar>(std::sin(nx * f * 8));
        row[3 * quarter + k] = static_cast<Scalar>(std::cos(nx * f * 8));
      }
    }
  return Tensor<Scalar>({h * w, dim}, std::move(v));
}

template <typename Scalar>
Tensor<Scalar> image_to_input(const Tensor<float>& hwc, bool coord_channels) {
  if (hwc.rank() != 3 || hwc.dim(2) != 3) throw ValidationError("image must be [H, W, 3], got " + shape_str(hwc.shape()));
  const Index h = hwc.dim(0), w = hwc.dim(1), c = coord_channels ? 5 : 3;
  std::vector<Scalar> v(c * h * w);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      for (Index ch = 0; ch < 3; ++ch) v[(ch * h + y) * w + x] = static_cast<Scalar>(hwc[(y * w + x) * 3 + ch]);
      if (coord_channels) {
        v[(3 * h + y) * w + x] = static_cast<Scalar>((x + 0.5) / w * 2 - 1);
        v[(4 * h + y) * w + x] = static_cast<Scalar>((y + 0.5) / h * 2 - 1);
      }
    }
  return Tensor<Scalar>({c, h, w}, std::move(v));
}

namespace {

template <typename Scalar>
Tensor<Scalar> run_conv(const typename Segmenter<Scalar>::ConvUnit& u, const Tensor<Scalar>& x) {
  const Index out = u.w.dim(0);
  Tensor<Scalar> y = add(conv2d(x, u.w, u.stride, u.pad), reshape(u.b, {out, 1, 1}));
  if (!u.norm) return y;
  const Index groups = std::min<Index>(8, out), h = y.dim(1), w = y.dim(2);
  y = reshape(layer_norm(reshape(y, {groups, -1})), {out, h, w});
  y = add(mul(y, reshape(u.gamma, {out, 1, 1})), reshape(u.beta, {out, 1, 1}));
  return relu(y);
}

template <typename Scalar>
typename Segmenter<Scalar>::ConvUnit make_conv(ParamSet<Scalar>& ps, const std::string& name, Index in, Index out,
                                               Index k, Index stride, bool norm, std::mt19937_64& rng) {
  typename Segmenter<Scalar>::ConvUnit u;
  u.w = ps.add(name + ".w", random_normal<Scalar>({out, in, k, k}, std::sqrt(2.0 / (in * k * k)), rng), ParamGroup::main,
               true);
  u.b = ps.add(name + ".b", Tensor<Scalar>::zeros({out}), ParamGroup::main, false);
  if (norm) {
    u.gamma = ps.add(name + ".gn.gamma", Tensor<Scalar>::full({out}, Scalar(1)), ParamGroup::main, false);
    u.beta = ps.add(name + ".gn.beta", Tensor<Scalar>::zeros({out}), ParamGroup::main, false);
  }
  u.stride = stride;
  u.pad = k / 2;
  u.norm = norm;
  return u;
}

// [D, h, w] -> [h*w, D]
template <typename Scalar>
Tensor<Scalar> tokens_of(const Tensor<Scalar>& f) {
  return transpose(reshape(f, {f.dim(0), f.dim(1) * f.dim(2)}));
}

// Attention bias for masked cross-attention: query q sees pixel p when its
// current mask, average-pooled to this level, is positive; an empty mask sees
// everything. The last slot (global embedding) is never masked.
template <typename Scalar>
Tensor<Scalar> attention_bias(const Tensor<Scalar>& masks, Index h, Index w, Index slots) {
  const Index n = masks.dim(0), mh = masks.dim(1), mw = masks.dim(2);
  const Index fy = mh / h, fx = mw / w;
  std::vector<Scalar> bias(slots * h * w, Scalar(0));
  for (Index q = 0; q < n; ++q) {
    Scalar* row = &bias[q * h * w];
    bool any = false;
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        double acc = 0;
        for (Index dy = 0; dy < fy; ++dy)
          for (Index dx = 0; dx < fx; ++dx) acc += masks[(q * mh + y * fy + dy) * mw + x * fx + dx];
        const bool on = acc > 0;
        any |= on;
        row[y * w + x] = on ? Scalar(0) : Scalar(kBlocked);
      }
    if (!any) std::fill(row, row + h * w, Scalar(0));
  }
  return Tensor<Scalar>({slots, h * w}, std::move(bias));
}

}  // namespace

template <typename Scalar>
FeaturePyramid<Scalar> Segmenter<Scalar>::extract_features(const Tensor<Scalar>& input) const {
  const Index in_ch = cfg.coord_channels ? 5 : 3;
  if (input.rank() != 3 || input.dim(0) != in_ch) {
    throw ValidationError("extract_features: expected [" + std::to_string(in_ch) + ", H, W], got " +
                          shape_str(input.shape()));
  }
  if (input.dim(1) % 32 != 0 || input.dim(2) % 32 != 0) {
    throw ValidationError("extract_features: image " + std::to_string(input.dim(1)) + "x" +
                          std::to_string(input.dim(2)) + " not divisible by 32");
  }
  FeaturePyramid<Scalar> pyr;
  Tensor<Scalar> x = run_conv<Scalar>(backbone[0], input);  // H/2
  for (Index s = 1; s <= 4; ++s) {
    x = run_conv<Scalar>(backbone[s], x);
    pyr.levels[4 - s] = x;  // H/4 -> f3, ..., H/32 -> f0
  }
  return pyr;
}

template <typename Scalar>
FeaturePyramid<Scalar> Segmenter<Scalar>::encode_multiscale(const FeaturePyramid<Scalar>& pyr) const {
  FeaturePyramid<Scalar> out;
  Tensor<Scalar> p0 = pyr.levels[0];
  if (cfg.encoder == EncoderVariant::fpn_style) {
    const Index d = p0.dim(0), h = p0.dim(1), w = p0.dim(2);
    const Tensor<Scalar> pos = sine_position<Scalar>(h, w, d);
    Tensor<Scalar> t = tokens_of(p0);
    const Tensor<Scalar> qk = add(t, pos);
    t = f0_encoder.ln1(add(t, f0_encoder.attn(qk, qk, t)));
    t = f0_encoder.ln2(add(t, f0_encoder.ffn(t)));
    p0 = reshape(transpose(t), {d, h, w});
  }
  out.levels[0] = p0;
  for (Index l = 1; l < 4; ++l) {
    const Tensor<Scalar> top = bilinear_upsample(out.levels[l - 1], 2);
    out.levels[l] = run_conv<Scalar>(smooth[l - 1], add(run_conv<Scalar>(lateral[l - 1], pyr.levels[l]), top));
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> Segmenter<Scalar>::predict_masks(const Tensor<Scalar>& e_obj, const Tensor<Scalar>& f3) const {
  Tensor<Scalar> e = e_obj;
  for (std::size_t i = 0; i < mask_mlp.size(); ++i) {
    e = mask_mlp[i](e);
    if (i + 1 < mask_mlp.size()) e = relu(e);
  }
  return mask_inner_product(e, f3);
}

template <typename Scalar>
Tensor<Scalar> Segmenter<Scalar>::classify(const Tensor<Scalar>& e_obj, const Tensor<Scalar>& e_cls) const {
  return classify_queries(e_obj, e_cls, cfg.normalized_classifier ? logit_scale : Tensor<Scalar>());
}

template <typename Scalar>
QuerySet<Scalar> Segmenter<Scalar>::decode_queries(const Tensor<Scalar>& e_obj0, const Tensor<Scalar>& e_img0,
                                                   const FeaturePyramid<Scalar>& refined) const {
  const Index d = cfg.dim;
  if (e_obj0.rank() != 2 || e_obj0.dim(1) != d || e_img0.shape() != Shape{1, d}) {
    throw ValidationError("decode_queries: expected [N, " + std::to_string(d) + "] and [1, " + std::to_string(d) +
                          "], got " + shape_str(e_obj0.shape()) + " and " + shape_str(e_img0.shape()));
  }
  for (const auto& lv : refined.levels)
    if (lv.rank() != 3 || lv.dim(0) != d) throw ValidationError("decode_queries: pyramid level width mismatch");
  const Index n = e_obj0.dim(0);
  Tensor<Scalar> slots = concat(std::vector<Tensor<Scalar>>{e_obj0, e_img0}, 0);
  std::array<Tensor<Scalar>, 3> keys, values;
  for (Index l = 0; l < 3; ++l) {
    const Tensor<Scalar>& f = refined.levels[l];
    values[l] = tokens_of(f);
    keys[l] = add(add(values[l], sine_position<Scalar>(f.dim(1), f.dim(2), d)), slice(level_embed, 0, l, l + 1));
  }
  const Tensor<Scalar> f3 = refined.levels[3].detach();
  std::vector<Tensor<Scalar>> intermediate;
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    intermediate.push_back(slice(slots, 0, 0, n));
    const Index l = static_cast<Index>(i % 3);
    const DecoderLayer& layer = decoder[i];
    const Tensor<Scalar> current = predict_masks(slice(slots, 0, 0, n).detach(), f3);
    const Tensor<Scalar> bias =
        attention_bias(current, refined.levels[l].dim(1), refined.levels[l].dim(2), n + 1);
    slots = layer.ln_cross(add(slots, layer.cross(slots, keys[l], values[l], &bias)));
    slots = layer.ln_self(add(slots, layer.self(slots, slots, slots)));
    slots = layer.ln_ffn(add(slots, layer.ffn(slots)));
  }
  return {slice(slots, 0, 0, n), slice(slots, 0, n, n + 1), std::move(intermediate)};
}

template <typename Scalar>
SegmenterOutput<Scalar> Segmenter<Scalar>::forward(const Tensor<Scalar>& input) const {
  SegmenterOutput<Scalar> out;
  out.refined = encode_multiscale(extract_features(input));
  const QuerySet<Scalar> qs = decode_queries(query_init, global_pool(out.refined.levels[0]), out.refined);
  out.e_obj = qs.e_obj;
  out.e_img = qs.e_img;
  out.intermediate = qs.intermediate;
  out.mask_logits = predict_masks(qs.e_obj, out.refined.levels[3]);
  return out;
}

template <typename Scalar>
Segmenter<Scalar> make_segmenter(ParamSet<Scalar>& ps, const ModelConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  Segmenter<Scalar> m;
  m.cfg = cfg;
  const Index d = cfg.dim, in_ch = cfg.coord_channels ? 5 : 3;
  m.backbone.push_back(make_conv<Scalar>(ps, "backbone.stem", in_ch, d, 3, 2, true, rng));
  for (Index s = 1; s <= 4; ++s)
    m.backbone.push_back(make_conv<Scalar>(ps, "backbone.stage" + std::to_string(s), d, d, 3, 2, true, rng));
  for (Index l = 0; l < 3; ++l) {
    m.lateral[l] = make_conv<Scalar>(ps, "encoder.lateral" + std::to_string(l + 1), d, d, 1, 1, false, rng);
    m.smooth[l] = make_conv<Scalar>(ps, "encoder.smooth" + std::to_string(l + 1), d, d, 3, 1, false, rng);
  }
  if (cfg.encoder == EncoderVariant::fpn_style) {
    m.f0_encoder.attn = make_attention(ps, "encoder.f0.attn", d, cfg.heads, rng, ParamGroup::main);
    m.f0_encoder.ln1 = make_norm(ps, "encoder.f0.ln1", d, ParamGroup::main);
    m.f0_encoder.ffn = make_ffn(ps, "encoder.f0.ffn", d, d * cfg.ffn_mult, rng, ParamGroup::main);
    m.f0_encoder.ln2 = make_norm(ps, "encoder.f0.ln2", d, ParamGroup::main);
  }
  m.query_init = ps.add("decoder.query_init", random_normal<Scalar>({cfg.queries, d}, 1.0, rng), ParamGroup::main, false);
  m.level_embed = ps.add("decoder.level_embed", random_normal<Scalar>({3, d}, 0.1, rng), ParamGroup::main, false);
  for (Index i = 0; i < cfg.decoder_layers * 3; ++i) {
    const std::string n = "decoder.layer" + std::to_string(i);
    typename Segmenter<Scalar>::DecoderLayer layer;
    layer.cross = make_attention(ps, n + ".cross", d, cfg.heads, rng, ParamGroup::main);
    layer.ln_cross = make_norm(ps, n + ".ln_cross", d, ParamGroup::main);
    layer.self = make_attention(ps, n + ".self", d, cfg.heads, rng, ParamGroup::main);
    layer.ln_self = make_norm(ps, n + ".ln_self", d, ParamGroup::main);
    layer.ffn = make_ffn(ps, n + ".ffn", d, d * cfg.ffn_mult, rng, ParamGroup::main);
    layer.ln_ffn = make_norm(ps, n + ".ln_ffn", d, ParamGroup::main);
    m.decoder.push_back(std::move(layer));
  }
  if (cfg.mask_mlp)
    for (Index i = 0; i < 3; ++i)
      m.mask_mlp.push_back(make_linear(ps, "mask_head.fc" + std::to_string(i), d, d, rng, ParamGroup::main));
  if (cfg.normalized_classifier)
    m.logit_scale = ps.add("classifier.log_scale", Tensor<Scalar>::scalar(static_cast<Scalar>(std::log(1 / 0.07))),
                           ParamGroup::main, false);
  return m;
}

// ---- inference ----

Mask PanopticSeg::segment_mask(Index id) const {
  Mask m(h, w);
  for (Index i = 0; i < h * w; ++i) m.px[i] = label_map[i] == id;
  return m;
}

std::string PanopticSeg::to_json() const {
  nlohmann::ordered_json j;
  j["height"] = h;
  j["width"] = w;
  j["segments"] = nlohmann::ordered_json::array();
  for (const auto& s : segments) {
    j["segments"].push_back({{"id", s.id},
                             {"category_id", s.category},
                             {"isthing", s.is_thing},
                             {"score", s.score},
                             {"counts", rle_encode(segment_mask(s.id))}});
  }
  return j.dump();
}

PanopticSeg PanopticSeg::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("panoptic segmentation: malformed JSON at byte offset " + std::to_string(e.byte));
  }
  PanopticSeg seg;
  try {
    seg.h = j.at("height").get<Index>();
    seg.w = j.at("width").get<Index>();
    seg.label_map.assign(seg.h * seg.w, 0);
    for (const auto& s : j.at("segments")) {
      SegmentInfo info{s.at("id").get<Index>(), s.at("category_id").get<Index>(), s.at("isthing").get<bool>(),
                       s.at("score").get<double>()};
      const Mask m = rle_decode(s.at("counts").get<std::vector<std::uint32_t>>(), seg.h, seg.w);
      for (Index i = 0; i < seg.h * seg.w; ++i)
        if (m.px[i]) {
          if (seg.label_map[i] != 0) throw ValidationError("panoptic segmentation: overlapping segments");
          seg.label_map[i] = info.id;
        }
      seg.segments.push_back(info);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("panoptic segmentation: ") + e.what());
  }
  return seg;
}

namespace {

Eigen::MatrixXd softmax_rows(const Tensor<double>& c) {
  const Index n = c.dim(0), k = c.dim(1);
  Eigen::MatrixXd p(n, k);
  for (Index q = 0; q < n; ++q) {
    double mx = -INFINITY;
    for (Index j = 0; j < k; ++j) mx = std::max(mx, c[q * k + j]);
    double z = 0;
    for (Index j = 0; j < k; ++j) z += p(q, j) = std::exp(c[q * k + j] - mx);
    p.row(q) /= z;
  }
  return p;
}

void check_heads(const Tensor<double>& c, const Tensor<double>& m, const LabelSpace& labels) {
  if (c.rank() != 2 || m.rank() != 3 || c.dim(0) != m.dim(0) || c.dim(1) != labels.size() + 1) {
    throw ValidationError("inference: class logits " + shape_str(c.shape()) + " and masks " + shape_str(m.shape()) +
                          " do not fit " + std::to_string(labels.size()) + " classes");
  }
}

double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

PanopticSeg panoptic_inference(const Tensor<double>& c, const Tensor<double>& m, const LabelSpace& labels,
                               const InferenceConfig& cfg) {
  check_heads(c, m, labels);
  const Index n = c.dim(0), classes = labels.size(), h = m.dim(1), w = m.dim(2), hw = h * w;
  const Eigen::MatrixXd p = softmax_rows(c);
  PanopticSeg seg;
  seg.h = h;
  seg.w = w;
  seg.label_map.assign(hw, 0);

  struct Kept {
    Index query, category;
    double score;
  };
  std::vector<Kept> kept;
  for (Index q = 0; q < n; ++q) {
    Index best = 0;
    for (Index k = 1; k <= classes; ++k)
      if (p(q, k) > p(q, best)) best = k;
    if (best == classes || p(q, best) < cfg.score_thresh) continue;
    kept.push_back({q, best, p(q, best)});
  }
  if (kept.empty()) return seg;

  // pixel -> kept index with the largest score * mask probability
  std::vector<Index> owner(hw, -1);
  for (Index i = 0; i < hw; ++i) {
    double best = -1;
    for (std::size_t k = 0; k < kept.size(); ++k) {
      const double v = kept[k].score * sigmoid_d(m[kept[k].query * hw + i]);
      if (v > best) {
        best = v;
        owner[i] = static_cast<Index>(k);
      }
    }
  }
  std::map<Index, Index> stuff_segment;  // category -> segment id
  for (std::size_t k = 0; k < kept.size(); ++k) {
    Index area = 0, original = 0;
    for (Index i = 0; i < hw; ++i) {
      const bool on = m[kept[k].query * hw + i] > 0;  // sigmoid > 0.5
      original += on;
      area += owner[i] == static_cast<Index>(k) && on;
    }
    if (area == 0 || original == 0 || static_cast<double>(area) / original < cfg.overlap_thresh) continue;
    const bool thing = labels.is_thing[kept[k].category];
    Index id;
    auto it = stuff_segment.find(kept[k].category);
    if (!thing && it != stuff_segment.end()) {
      id = it->second;
    } else {
      id = static_cast<Index>(seg.segments.size()) + 1;
      seg.segments.push_back({id, kept[k].category, thing, kept[k].score});
      if (!thing) stuff_segment[kept[k].category] = id;
    }
    for (Index i = 0; i < hw; ++i)
      if (owner[i] == static_cast<Index>(k) && m[kept[k].query * hw + i] > 0) seg.label_map[i] = id;
  }
  return seg;
}

std::vector<ScoredInstance> instance_inference(const Tensor<double>& c, const Tensor<double>& m,
                                               const LabelSpace& labels, Index top_k) {
  check_heads(c, m, labels);
  const Index n = c.dim(0), h = m.dim(1), w = m.dim(2), hw = h * w;
  const Eigen::MatrixXd p = softmax_rows(c);
  const std::vector<Index> things = labels.thing_ids();
  std::vector<ScoredInstance> all;
  for (Index q = 0; q < n; ++q) {
    Mask mask(h, w);
    double inside = 0;
    for (Index i = 0; i < hw; ++i) {
      const double s = sigmoid_d(m[q * hw + i]);
      if (s > 0.5) {
        mask.px[i] = 1;
        inside += s;
      }
    }
    const Index area = mask.area();
    const double mask_score = area > 0 ? inside / area : 0.0;
    for (Index k : things) all.push_back({q, k, p(q, k) * mask_score, mask});
  }
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  if (top_k >= 0 && static_cast<Index>(all.size()) > top_k) all.resize(top_k);
  return all;
}

template <typename Scalar>
Tensor<double> to_double(const Tensor<Scalar>& t) {
  std::vector<double> v(t.data().begin(), t.data().end());
  return Tensor<double>(t.shape(), std::move(v));
}

#define VLOSS_INSTANTIATE(S)                                                                           \
  template Tensor<S> global_pool(const Tensor<S>&);                                                    \
  template Tensor<S> mask_inner_product(const Tensor<S>&, const Tensor<S>&);                           \
  template Tensor<S> classify_queries(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);           \
  template Tensor<S> sine_position(Index, Index, Index);                                               \
  template Tensor<S> image_to_input(const Tensor<float>&, bool);                                       \
  template struct Segmenter<S>;                                                                        \
  template Segmenter<S> make_segmenter(ParamSet<S>&, const ModelConfig&, std::mt19937_64&);            \
  template Tensor<double> to_double(const Tensor<S>&);

VLOSS_INSTANTIATE(float)
VLOSS_INSTANTIATE(double)

#undef VLOSS_INSTANTIATE

}  // namespace vloss
