#include "vloss/model/vl_model.hpp"

#include <algorithm>
#include <cmath>

#include "vloss/core/ops.hpp"

namespace vloss {

void VLModelConfig::validate() const {
  seg.validate();
  text.validate();
  if (text.dim != seg.dim) {
    throw ValidationError("model: text dim " + std::to_string(text.dim) + " must equal image dim " +
                          std::to_string(seg.dim));
  }
  if (!(tau_init > 0) || !std::isfinite(tau_init)) throw ValidationError("model: tau_init must be positive");
  if (prompt_template.find("{}") == std::string::npos) {
    throw ValidationError("model: prompt template needs a {} placeholder");
  }
}

nlohmann::ordered_json VLModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["dim"] = seg.dim;
  j["queries"] = seg.queries;
  j["decoder_layers"] = seg.decoder_layers;
  j["heads"] = seg.heads;
  j["ffn_mult"] = seg.ffn_mult;
  j["encoder"] = std::string(to_string(seg.encoder));
  j["image_h"] = seg.image_h;
  j["image_w"] = seg.image_w;
  j["mask_mlp"] = seg.mask_mlp;
  j["normalized_classifier"] = seg.normalized_classifier;
  j["coord_channels"] = seg.coord_channels;
  j["text_layers"] = text.layers;
  j["text_heads"] = text.heads;
  j["text_max_len"] = text.max_len;
  j["text_ffn_mult"] = text.ffn_mult;
  j["text_pooling"] = text.pooling == TextPooling::eos ? "eos" : "mean";
  j["prompt_template"] = prompt_template;
  j["tau_init"] = tau_init;
  return j;
}

VLModelConfig VLModelConfig::from_json(const nlohmann::json& j) {
  VLModelConfig c;
  if (!j.is_object()) throw ValidationError("model config: expected an object");
  static const std::vector<std::string> known{
      "dim",         "queries",    "decoder_layers", "heads",         "ffn_mult",      "encoder",
      "image_h",     "image_w",    "mask_mlp",       "normalized_classifier",         "coord_channels",
      "text_layers", "text_heads", "text_max_len",   "text_ffn_mult", "text_pooling",  "prompt_template",
      "tau_init"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
      throw ValidationError("model config: unknown key '" + it.key() + "'");
    }
  }
  try {
    c.seg.dim = j.value("dim", c.seg.dim);
    c.seg.queries = j.value("queries", c.seg.queries);
    c.seg.decoder_layers = j.value("decoder_layers", c.seg.decoder_layers);
    c.seg.heads = j.value("heads", c.seg.heads);
    c.seg.ffn_mult = j.value("ffn_mult", c.seg.ffn_mult);
    if (j.contains("encoder")) c.seg.encoder = parse_encoder_variant(j.at("encoder").get<std::string>());
    c.seg.image_h = j.value("image_h", c.seg.image_h);
    c.seg.image_w = j.value("image_w", c.seg.image_w);
    c.seg.mask_mlp = j.value("mask_mlp", c.seg.mask_mlp);
    c.seg.normalized_classifier = j.value("normalized_classifier", c.seg.normalized_classifier);
    c.seg.coord_channels = j.value("coord_channels", c.seg.coord_channels);
    c.text.dim = c.seg.dim;
    c.text.layers = j.value("text_layers", c.text.layers);
    c.text.heads = j.value("text_heads", c.text.heads);
    c.text.max_len = j.value("text_max_len", c.text.max_len);
    c.text.ffn_mult = j.value("text_ffn_mult", c.text.ffn_mult);
    if (j.contains("text_pooling")) {
      const auto p = j.at("text_pooling").get<std::string>();
      if (p == "eos") {
        c.text.pooling = TextPooling::eos;
      } else if (p == "mean") {
        c.text.pooling = TextPooling::mean;
      } else {
        throw ValidationError("model config: text_pooling must be eos or mean, got '" + p + "'");
      }
    }
    c.prompt_template = j.value("prompt_template", c.prompt_template);
    c.tau_init = j.value("tau_init", c.tau_init);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

template <typename Scalar>
Tensor<Scalar> VLModel<Scalar>::class_embeddings(const std::vector<std::string>& names) const {
  return build_class_embeddings(names, cfg.prompt_template, vocab, text, no_object);
}

template <typename Scalar>
Tensor<Scalar> VLModel<Scalar>::encode_captions(const std::vector<std::string>& captions) const {
  std::vector<std::vector<Index>> batch;
  batch.reserve(captions.size());
  for (const auto& c : captions) batch.push_back(tokenize(c, vocab, cfg.text.max_len));
  return text.encode(batch);
}

template <typename Scalar>
Tensor<Scalar> VLModel<Scalar>::tau() const {
  return exp(log_tau);
}

template <typename Scalar>
VLModel<Scalar> make_vl_model(const VLModelConfig& cfg, Vocabulary vocab, std::uint64_t seed) {
  cfg.validate();
  VLModel<Scalar> m;
  m.cfg = cfg;
  m.vocab = std::move(vocab);
  std::mt19937_64 rng(seed);
  m.seg = make_segmenter(m.params, cfg.seg, rng);
  m.text = make_text_encoder(m.params, cfg.text, m.vocab.size(), rng);
  m.no_object = m.params.add("no_object", random_normal<Scalar>({1, cfg.seg.dim}, 1.0, rng), ParamGroup::main, false);
  m.log_tau = m.params.add("log_tau", Tensor<Scalar>::scalar(static_cast<Scalar>(std::log(cfg.tau_init))),
                           ParamGroup::main, false);
  return m;
}

template <typename Scalar>
ImagePrediction<Scalar> predict_image(const VLModel<Scalar>& model, const Tensor<float>& hwc,
                                      const Tensor<Scalar>& e_cls, bool with_aux) {
  const auto out = model.seg.forward(image_to_input<Scalar>(hwc, model.cfg.seg.coord_channels));
  ImagePrediction<Scalar> p;
  p.class_logits = model.seg.classify(out.e_obj, e_cls);
  p.mask_logits = bilinear_upsample(out.mask_logits, ModelConfig::kStrides[3]);
  p.e_img = out.e_img;
  if (with_aux)
    for (const auto& q : out.intermediate) {
      p.aux_class_logits.push_back(model.seg.classify(q, e_cls));
      p.aux_mask_logits.push_back(
          bilinear_upsample(model.seg.predict_masks(q, out.refined.levels[3]), ModelConfig::kStrides[3]));
    }
  return p;
}

Vocabulary build_run_vocab(const std::vector<std::string>& class_names, const std::vector<std::string>& captions,
                           const std::string& prompt_template) {
  std::vector<std::string> corpus = captions;
  for (const auto& n : class_names) corpus.push_back(format_prompt(prompt_template, n));
  return build_vocab(corpus, 1);
}

#define VLOSS_INSTANTIATE(S)                                                            \
  template struct VLModel<S>;                                                           \
  template VLModel<S> make_vl_model<S>(const VLModelConfig&, Vocabulary, std::uint64_t); \
  template ImagePrediction<S> predict_image<S>(const VLModel<S>&, const Tensor<float>&, const Tensor<S>&, bool);
VLOSS_INSTANTIATE(float)
VLOSS_INSTANTIATE(double)
#undef VLOSS_INSTANTIATE

}  // namespace vloss
