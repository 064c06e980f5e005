#pragma once

// Image side: strided conv backbone, multi-scale encoder, masked-attention
// query decoder, inner-product mask head and text-keyed classifier.

#include <array>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "vloss/data/dataset.hpp"
#include "vloss/model/layers.hpp"

namespace vloss {

enum class EncoderVariant { fpn_style, fpn_plain };

std::string_view to_string(EncoderVariant v);
EncoderVariant parse_encoder_variant(std::string_view name);

struct ModelConfig {
  Index dim = 32;
  Index queries = 100;
  Index decoder_layers = 3;  // rounds over f0', f1', f2'
  Index heads = 4;
  Index ffn_mult = 2;
  EncoderVariant encoder = EncoderVariant::fpn_style;
  Index image_h = 64, image_w = 64;
  bool mask_mlp = true;
  bool normalized_classifier = false;
  /// Appends normalized x/y coordinate planes to the RGB input.
  bool coord_channels = true;

  static constexpr std::array<Index, 4> kStrides{32, 16, 8, 4};

  void validate() const;
};

/// f0 (coarsest, stride 32) .. f3 (finest, stride 4), each [D, h, w].
template <typename Scalar>
struct FeaturePyramid {
  std::array<Tensor<Scalar>, 4> levels;
};

template <typename Scalar>
struct QuerySet {
  Tensor<Scalar> e_obj;  // [N, D]
  Tensor<Scalar> e_img;  // [1, D]
  /// Object queries entering each decoder sublayer (the first is e_obj0).
  std::vector<Tensor<Scalar>> intermediate;
};

template <typename Scalar>
struct SegmenterOutput {
  Tensor<Scalar> mask_logits;  // [N, h3, w3]
  Tensor<Scalar> e_obj;
  Tensor<Scalar> e_img;
  FeaturePyramid<Scalar> refined;
  std::vector<Tensor<Scalar>> intermediate;  // see QuerySet
};

/// Spatial mean per channel: [D, h, w] -> [1, D].
template <typename Scalar>
Tensor<Scalar> global_pool(const Tensor<Scalar>& level);

/// M[q, y, x] = sum_d e[q, d] f3[d, y, x].
template <typename Scalar>
Tensor<Scalar> mask_inner_product(const Tensor<Scalar>& e_obj, const Tensor<Scalar>& f3);

/// c = e_obj e_cls^T, or scale * cos(e_obj, e_cls) when `log_scale` is defined.
template <typename Scalar>
Tensor<Scalar> classify_queries(const Tensor<Scalar>& e_obj, const Tensor<Scalar>& e_cls,
                                const Tensor<Scalar>& log_scale = {});

/// Fixed 2-D sine/cosine encoding, [h * w, dim].
template <typename Scalar>
Tensor<Scalar> sine_position(Index h, Index w, Index dim);

/// [H, W, 3] raster to [3 (+2 coordinate planes), H, W].
template <typename Scalar>
Tensor<Scalar> image_to_input(const Tensor<float>& hwc, bool coord_channels);

template <typename Scalar>
struct Segmenter {
  struct ConvUnit {
    Tensor<Scalar> w, b, gamma, beta;
    Index stride = 1, pad = 0;
    bool norm = true;  // group norm + relu after the conv
  };
  struct EncoderLayer {
    Attention<Scalar> attn;
    Norm<Scalar> ln1, ln2;
    FeedForward<Scalar> ffn;
  };
  struct DecoderLayer {
    Attention<Scalar> cross, self;
    Norm<Scalar> ln_cross, ln_self, ln_ffn;
    FeedForward<Scalar> ffn;
  };

  ModelConfig cfg;
  std::vector<ConvUnit> backbone;              // stem, then stages down to f3, f2, f1, f0
  std::array<ConvUnit, 3> lateral, smooth;     // for f1..f3
  EncoderLayer f0_encoder;                     // fpn_style only
  Tensor<Scalar> query_init;                   // [N, D]
  Tensor<Scalar> level_embed;                  // [3, D]
  std::vector<DecoderLayer> decoder;           // decoder_layers * 3 sublayers
  std::vector<Linear<Scalar>> mask_mlp;        // empty when disabled
  Tensor<Scalar> logit_scale;                  // log scale for the normalized classifier

  FeaturePyramid<Scalar> extract_features(const Tensor<Scalar>& input) const;
  FeaturePyramid<Scalar> encode_multiscale(const FeaturePyramid<Scalar>& pyr) const;
  QuerySet<Scalar> decode_queries(const Tensor<Scalar>& e_obj0, const Tensor<Scalar>& e_img0,
                                  const FeaturePyramid<Scalar>& refined) const;
  /// Mask head (MLP if enabled) followed by the inner product with f3'.
  Tensor<Scalar> predict_masks(const Tensor<Scalar>& e_obj, const Tensor<Scalar>& f3) const;
  Tensor<Scalar> classify(const Tensor<Scalar>& e_obj, const Tensor<Scalar>& e_cls) const;

  /// Full image path for one [C, H, W] input.
  SegmenterOutput<Scalar> forward(const Tensor<Scalar>& input) const;
};

template <typename Scalar>
Segmenter<Scalar> make_segmenter(ParamSet<Scalar>& ps, const ModelConfig& cfg, std::mt19937_64& rng);

// ---- inference ----

struct InferenceConfig {
  double score_thresh = 0.5;
  double overlap_thresh = 0.5;
};

struct SegmentInfo {
  Index id = 0;  // >= 1; 0 marks VOID in the label map
  Index category = 0;
  bool is_thing = true;
  double score = 0.0;
};

struct PanopticSeg {
  Index h = 0, w = 0;
  std::vector<Index> label_map;  // row-major segment ids
  std::vector<SegmentInfo> segments;

  Mask segment_mask(Index id) const;
  std::string to_json() const;  // segment table + RLE per segment
  static PanopticSeg from_json(const std::string& text);
};

/// `class_logits` [N, C+1], `mask_logits` [N, h, w] at the output resolution.
PanopticSeg panoptic_inference(const Tensor<double>& class_logits, const Tensor<double>& mask_logits,
                               const LabelSpace& labels, const InferenceConfig& cfg = {});

struct ScoredInstance {
  Index query = 0;
  Index category = 0;
  double score = 0.0;
  Mask mask;
};

/// Top-k (query, thing class) pairs by class prob times mean in-mask probability.
std::vector<ScoredInstance> instance_inference(const Tensor<double>& class_logits, const Tensor<double>& mask_logits,
                                               const LabelSpace& labels, Index top_k);

/// Converts any tensor to f64 values (for inference on float models).
template <typename Scalar>
Tensor<double> to_double(const Tensor<Scalar>& t);

}  // namespace vloss
