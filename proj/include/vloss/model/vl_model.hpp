#pragma once

// Segmenter, text encoder, no-object embedding and temperature bundled under
// one parameter set.

#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "vloss/model/segmenter.hpp"
#include "vloss/text/text_encoder.hpp"

namespace vloss {

struct VLModelConfig {
  ModelConfig seg;
  TextEncoderConfig text;  // text.dim must equal seg.dim
  std::string prompt_template = kDefaultPromptTemplate;
  double tau_init = 0.07;

  VLModelConfig() { text.dim = seg.dim; }
  void validate() const;
  nlohmann::ordered_json to_json() const;
  static VLModelConfig from_json(const nlohmann::json& j);
};

template <typename Scalar>
struct VLModel {
  VLModelConfig cfg;
  Vocabulary vocab;
  ParamSet<Scalar> params;
  Segmenter<Scalar> seg;
  TextEncoder<Scalar> text;
  Tensor<Scalar> no_object;  // [1, D]
  Tensor<Scalar> log_tau;    // scalar

  /// [C + 1, D]: prompted class names followed by the no-object row.
  Tensor<Scalar> class_embeddings(const std::vector<std::string>& names) const;
  /// [B, D] sentence embeddings.
  Tensor<Scalar> encode_captions(const std::vector<std::string>& captions) const;
  Tensor<Scalar> tau() const;
};

template <typename Scalar>
VLModel<Scalar> make_vl_model(const VLModelConfig& cfg, Vocabulary vocab, std::uint64_t seed);

/// Full-resolution predictions for one image.
template <typename Scalar>
struct ImagePrediction {
  Tensor<Scalar> class_logits;  // [N, C + 1]
  Tensor<Scalar> mask_logits;   // [N, H, W], upsampled from stride 4
  Tensor<Scalar> e_img;         // [1, D]
  /// Per decoder sublayer, when requested: the same heads on intermediate queries.
  std::vector<Tensor<Scalar>> aux_class_logits, aux_mask_logits;
};

template <typename Scalar>
ImagePrediction<Scalar> predict_image(const VLModel<Scalar>& model, const Tensor<float>& hwc,
                                      const Tensor<Scalar>& e_cls, bool with_aux = false);

/// Vocabulary over every class name, prompt and caption a run will see.
Vocabulary build_run_vocab(const std::vector<std::string>& class_names, const std::vector<std::string>& captions,
                           const std::string& prompt_template);

}  // namespace vloss
