#pragma once

// Set-prediction losses for mask classification and image-text alignment.

#include <Eigen/Core>
#include <optional>
#include <string>
#include <vector>

#include "vloss/core/tensor.hpp"
#include "vloss/losses/hungarian.hpp"
#include "vloss/schedule/stream.hpp"

namespace vloss {

struct LossWeights {
  double cls = 2.0;
  double bce = 5.0;
  double dice = 5.0;
  double con = 1.0;

  void validate() const;
};

/// Ground truth for one image: labels in [0, C) and binary masks [T, H, W].
template <typename Scalar>
struct MatchTargets {
  std::vector<Index> labels;
  Tensor<Scalar> masks;
  std::vector<bool> is_thing;

  Index size() const { return static_cast<Index>(labels.size()); }
  void validate() const;
};

struct MatchResult {
  std::vector<Index> target_of_query;  // -1 when unmatched
  std::vector<Index> y;                // class per query; unmatched get the no-object index

  std::vector<Index> matched_queries() const;
  std::vector<Index> matched_targets() const;
};

enum class ClsMode { all, positive_only };

/// cost[q, t] = -w.cls * softmax(c)[q, label_t] + w.bce * bce(M_q, mask_t) + w.dice * dice(M_q, mask_t).
/// Computed outside the tape; `c` is [N, C+1], `masks` [N, H, W].
template <typename Scalar>
Eigen::MatrixXd build_match_cost(const Tensor<Scalar>& class_logits, const Tensor<Scalar>& mask_logits,
                                 const MatchTargets<Scalar>& targets, const LossWeights& w);

/// Hungarian assignment over `build_match_cost`, with labels spread into `y`.
template <typename Scalar>
MatchResult match_queries(const Tensor<Scalar>& class_logits, const Tensor<Scalar>& mask_logits,
                          const MatchTargets<Scalar>& targets, const LossWeights& w);

/// Mean cross-entropy over queries (`all`) or over matched queries only.
/// `no_object_weight` re-weights queries labelled no-object in `all` mode
/// (weighted mean); 1.0 gives the plain mean.
template <typename Scalar>
Tensor<Scalar> classification_loss(const Tensor<Scalar>& class_logits, const std::vector<Index>& y,
                                   ClsMode mode, double no_object_weight = 1.0);

/// Mean over matched queries of the per-pixel sigmoid BCE (logit-space form).
template <typename Scalar>
Tensor<Scalar> bce_mask_loss(const Tensor<Scalar>& mask_logits, const Tensor<Scalar>& targets);

/// Mean over matched queries of 1 - (2 sum(p t) + smooth) / (sum p + sum t + smooth).
template <typename Scalar>
Tensor<Scalar> dice_loss(const Tensor<Scalar>& mask_logits, const Tensor<Scalar>& targets,
                         Scalar smooth = Scalar(1));

/// s[i, j] = cos(img_i, text_j) / tau for [B, D] inputs and a scalar tau tensor.
template <typename Scalar>
Tensor<Scalar> contrastive_sim(const Tensor<Scalar>& image_emb, const Tensor<Scalar>& text_emb,
                               const Tensor<Scalar>& tau);

/// Symmetric InfoNCE over a square similarity matrix.
template <typename Scalar>
Tensor<Scalar> contrastive_loss(const Tensor<Scalar>& sim);

/// Late-interaction variant over token sets [B, P, D] and [B, L, D].
template <typename Scalar>
Tensor<Scalar> filip_contrastive_loss(const Tensor<Scalar>& image_tokens, const Tensor<Scalar>& text_tokens,
                                      const Tensor<Scalar>& tau);

/// Per-term loss tensors; undefined tensors are absent terms.
template <typename Scalar>
struct LossTerms {
  Tensor<Scalar> cls, bce, dice, con;
};

/// Weighted sum of the present terms. Dense streams need cls/bce/dice,
/// the caption stream needs con.
template <typename Scalar>
Tensor<Scalar> total_loss(const LossTerms<Scalar>& terms, const LossWeights& w, Stream task);

/// Scalar snapshot of one step's losses, as logged to the metrics CSV.
struct LossReport {
  std::optional<double> cls, bce, dice, con;
  double total = 0.0;
};

template <typename Scalar>
LossReport make_report(const LossTerms<Scalar>& terms, const Tensor<Scalar>& total);

std::string metrics_csv_header();
std::string metrics_csv_row(long step, Stream task, const LossReport& r);

}  // namespace vloss
