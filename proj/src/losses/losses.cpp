#include "vloss/losses/losses.hpp"

#include <cmath>
#include <cstdio>

#include "vloss/core/ops.hpp"

namespace vloss {

void LossWeights::validate() const {
  if (cls < 0 || bce < 0 || dice < 0 || con < 0) throw ValidationError("loss weights must be non-negative");
}

template <typename Scalar>
void MatchTargets<Scalar>::validate() const {
  if (labels.empty()) return;
  if (!masks.defined() || masks.rank() != 3 || masks.dim(0) != size()) {
    throw ValidationError("MatchTargets: need masks [T,H,W] for " + std::to_string(size()) + " labels");
  }
  if (!is_thing.empty() && static_cast<Index>(is_thing.size()) != size()) {
    throw ValidationError("MatchTargets: is_thing length mismatch");
  }
  for (Scalar v : masks.data()) {
    if (v != Scalar(0) && v != Scalar(1)) throw ValidationError("MatchTargets: masks must be binary");
  }
}

std::vector<Index> MatchResult::matched_queries() const {
  std::vector<Index> out;
  for (std::size_t q = 0; q < target_of_query.size(); ++q)
    if (target_of_query[q] >= 0) out.push_back(static_cast<Index>(q));
  return out;
}

std::vector<Index> MatchResult::matched_targets() const {
  std::vector<Index> out;
  for (Index t : target_of_query)
    if (t >= 0) out.push_back(t);
  return out;
}

namespace {

using RowMatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
RowMatD as_rows(const Tensor<Scalar>& t, Index rows) {
  const Index cols = rows == 0 ? 0 : t.numel() / rows;
  RowMatD m(rows, cols);
  for (Index i = 0; i < t.numel(); ++i) m.data()[i] = static_cast<double>(t[i]);
  return m;
}

template <typename Scalar>
void check_binary(const Tensor<Scalar>& t, const char* op) {
  for (Scalar v : t.data())
    if (v != Scalar(0) && v != Scalar(1)) throw ValidationError(std::string(op) + ": target is not binary");
}

template <typename Scalar>
void check_mask_pair(const Tensor<Scalar>& logits, const Tensor<Scalar>& targets, const char* op) {
  if (logits.shape() != targets.shape()) {
    throw ValidationError(std::string(op) + ": shape mismatch " + shape_str(logits.shape()) + " vs " +
                          shape_str(targets.shape()));
  }
  if (logits.rank() < 1) throw ValidationError(std::string(op) + ": need [K, ...] inputs");
}

template <typename Scalar>
Tensor<Scalar> identity(Index n) {
  std::vector<Scalar> v(n * n, Scalar(0));
  for (Index i = 0; i < n; ++i) v[i * n + i] = Scalar(1);
  return Tensor<Scalar>({n, n}, std::move(v));
}

// -(1/2B) sum_i [log softmax_row(a)_ii + log softmax_col(b)_ii]
template <typename Scalar>
Tensor<Scalar> symmetric_infonce(const Tensor<Scalar>& row_sim, const Tensor<Scalar>& col_sim) {
  const Index b = row_sim.dim(0);
  const Tensor<Scalar> eye = identity<Scalar>(b);
  const Tensor<Scalar> rows = sum(mul(log_softmax(row_sim, 1), eye));
  const Tensor<Scalar> cols = sum(mul(log_softmax(col_sim, 0), eye));
  return scale(add(rows, cols), Scalar(-1) / Scalar(2 * b));
}

}  // namespace

template <typename Scalar>
Eigen::MatrixXd build_match_cost(const Tensor<Scalar>& class_logits, const Tensor<Scalar>& mask_logits,
                                 const MatchTargets<Scalar>& targets, const LossWeights& w) {
  w.validate();
  targets.validate();
  if (class_logits.rank() != 2 || mask_logits.rank() < 2 || mask_logits.dim(0) != class_logits.dim(0)) {
    throw ValidationError("build_match_cost: need class logits [N,C+1] and masks [N,...], got " +
                          shape_str(class_logits.shape()) + " and " + shape_str(mask_logits.shape()));
  }
  const Index n = class_logits.dim(0), classes = class_logits.dim(1), t = targets.size();
  Eigen::MatrixXd cost(n, t);
  if (t == 0) return cost;
  if (Shape(targets.masks.shape().begin() + 1, targets.masks.shape().end()) !=
      Shape(mask_logits.shape().begin() + 1, mask_logits.shape().end())) {
    throw ValidationError("build_match_cost: target masks " + shape_str(targets.masks.shape()) +
                          " do not match predictions " + shape_str(mask_logits.shape()));
  }
  for (Index label : targets.labels)
    if (label < 0 || label >= classes - 1) throw ValidationError("build_match_cost: label out of range");

  RowMatD prob = as_rows(class_logits, n);
  for (Index q = 0; q < n; ++q) {
    const double mx = prob.row(q).maxCoeff();
    prob.row(q) = (prob.row(q).array() - mx).exp();
    prob.row(q) /= prob.row(q).sum();
  }
  const RowMatD x = as_rows(mask_logits, n);
  const RowMatD tg = as_rows(targets.masks, t);
  const double pixels = static_cast<double>(x.cols());
  const RowMatD softplus = x.unaryExpr([](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); });
  const RowMatD sig = x.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  const Eigen::MatrixXd xt = x * tg.transpose();
  const Eigen::MatrixXd st = sig * tg.transpose();
  const Eigen::VectorXd sp_sum = softplus.rowwise().sum();
  const Eigen::VectorXd sig_sum = sig.rowwise().sum();
  const Eigen::VectorXd tg_sum = tg.rowwise().sum();
  for (Index q = 0; q < n; ++q)
    for (Index k = 0; k < t; ++k) {
      const double bce = (sp_sum(q) - xt(q, k)) / pixels;
      const double dice = 1.0 - (2.0 * st(q, k) + 1.0) / (sig_sum(q) + tg_sum(k) + 1.0);
      cost(q, k) = -w.cls * prob(q, targets.labels[k]) + w.bce * bce + w.dice * dice;
    }
  return cost;
}

template <typename Scalar>
MatchResult match_queries(const Tensor<Scalar>& class_logits, const Tensor<Scalar>& mask_logits,
                          const MatchTargets<Scalar>& targets, const LossWeights& w) {
  const Eigen::MatrixXd cost = build_match_cost(class_logits, mask_logits, targets, w);
  const Assignment a = match_hungarian(cost);
  const Index n = class_logits.dim(0), no_object = class_logits.dim(1) - 1;
  MatchResult r;
  r.target_of_query.assign(n, -1);
  r.y.assign(n, no_object);
  for (Index q = 0; q < n; ++q) {
    const Index t = a.col_of_row[q];
    if (t < 0) continue;
    r.target_of_query[q] = t;
    r.y[q] = targets.labels[t];
  }
  return r;
}

template <typename Scalar>
Tensor<Scalar> classification_loss(const Tensor<Scalar>& class_logits, const std::vector<Index>& y,
                                   ClsMode mode, double no_object_weight) {
  if (class_logits.rank() != 2) throw ValidationError("classification_loss: logits must be [N, C+1]");
  const Index n = class_logits.dim(0), k = class_logits.dim(1);
  if (static_cast<Index>(y.size()) != n) {
    throw ValidationError("classification_loss: " + std::to_string(y.size()) + " labels for " +
                          std::to_string(n) + " queries");
  }
  const Index no_object = k - 1;
  std::vector<Scalar> weights(n * k, Scalar(0));
  double total_weight = 0;
  for (Index i = 0; i < n; ++i) {
    if (y[i] < 0 || y[i] > no_object) {
      throw ValidationError("classification_loss: label " + std::to_string(y[i]) + " out of range [0," +
                            std::to_string(no_object) + "]");
    }
    double wi = 1.0;
    if (y[i] == no_object) wi = mode == ClsMode::positive_only ? 0.0 : no_object_weight;
    weights[i * k + y[i]] = Scalar(wi);
    total_weight += wi;
  }
  if (total_weight == 0) return Tensor<Scalar>::scalar(Scalar(0));
  const Tensor<Scalar> picked = sum(mul(log_softmax(class_logits, 1), Tensor<Scalar>({n, k}, std::move(weights))));
  return scale(picked, Scalar(-1.0 / total_weight));
}

template <typename Scalar>
Tensor<Scalar> bce_mask_loss(const Tensor<Scalar>& mask_logits, const Tensor<Scalar>& targets) {
  check_mask_pair(mask_logits, targets, "bce_mask_loss");
  check_binary(targets, "bce_mask_loss");
  if (mask_logits.numel() == 0) return Tensor<Scalar>::scalar(Scalar(0));
  return mean(sub(softplus(mask_logits), mul(mask_logits, targets)));
}

template <typename Scalar>
Tensor<Scalar> dice_loss(const Tensor<Scalar>& mask_logits, const Tensor<Scalar>& targets, Scalar smooth) {
  check_mask_pair(mask_logits, targets, "dice_loss");
  const Index k = mask_logits.dim(0);
  if (k == 0 || mask_logits.numel() == 0) return Tensor<Scalar>::scalar(Scalar(0));
  const Tensor<Scalar> p = reshape(sigmoid(mask_logits), {k, -1});
  const Tensor<Scalar> t = reshape(targets, {k, -1});
  const Tensor<Scalar> num = add_scalar(scale(sum(mul(p, t), 1), Scalar(2)), smooth);
  const Tensor<Scalar> den = add_scalar(add(sum(p, 1), sum(t, 1)), smooth);
  return mean(sub(Tensor<Scalar>::full({k}, Scalar(1)), div(num, den)));
}

template <typename Scalar>
Tensor<Scalar> contrastive_sim(const Tensor<Scalar>& image_emb, const Tensor<Scalar>& text_emb,
                               const Tensor<Scalar>& tau) {
  if (image_emb.rank() != 2 || text_emb.rank() != 2 || image_emb.dim(1) != text_emb.dim(1)) {
    throw ValidationError("contrastive_sim: need [B,D] embeddings, got " + shape_str(image_emb.shape()) +
                          " and " + shape_str(text_emb.shape()));
  }
  if (tau.numel() != 1 || !(tau.item() > 0)) throw ValidationError("contrastive_sim: tau must be a positive scalar");
  const Tensor<Scalar> cos = matmul(l2_normalize(image_emb, 1), transpose(l2_normalize(text_emb, 1)));
  return div(cos, reshape(tau, {}));
}

template <typename Scalar>
Tensor<Scalar> contrastive_loss(const Tensor<Scalar>& sim) {
  if (sim.rank() != 2 || sim.dim(0) != sim.dim(1) || sim.dim(0) == 0) {
    throw ValidationError("contrastive_loss: need a non-empty square matrix, got " + shape_str(sim.shape()));
  }
  return symmetric_infonce(sim, sim);
}

template <typename Scalar>
Tensor<Scalar> filip_contrastive_loss(const Tensor<Scalar>& image_tokens, const Tensor<Scalar>& text_tokens,
                                      const Tensor<Scalar>& tau) {
  if (image_tokens.rank() != 3 || text_tokens.rank() != 3 || image_tokens.dim(0) != text_tokens.dim(0) ||
      image_tokens.dim(2) != text_tokens.dim(2)) {
    throw ValidationError("filip_contrastive_loss: need [B,P,D] and [B,L,D], got " +
                          shape_str(image_tokens.shape()) + " and " + shape_str(text_tokens.shape()));
  }
  const Index b = image_tokens.dim(0), p = image_tokens.dim(1), l = text_tokens.dim(1), d = image_tokens.dim(2);
  if (b == 0 || p == 0 || l == 0) throw ValidationError("filip_contrastive_loss: empty token set");
  if (tau.numel() != 1 || !(tau.item() > 0)) throw ValidationError("filip_contrastive_loss: tau must be positive");
  const Tensor<Scalar> img = l2_normalize(reshape(image_tokens, {b * p, d}), 1);
  const Tensor<Scalar> txt = l2_normalize(reshape(text_tokens, {b * l, d}), 1);
  const Tensor<Scalar> sims = reshape(matmul(img, transpose(txt)), {b, p, b, l});
  const Tensor<Scalar> t = reshape(tau, {});
  // image i -> text j: average over image tokens of the best-matching text token.
  const Tensor<Scalar> i2t = div(mean(max(sims, 3), 1), t);
  // text j -> image i: average over text tokens of the best-matching image token.
  const Tensor<Scalar> t2i = div(mean(max(sims, 1), 2), t);
  return symmetric_infonce(i2t, t2i);
}

template <typename Scalar>
Tensor<Scalar> total_loss(const LossTerms<Scalar>& terms, const LossWeights& w, Stream task) {
  w.validate();
  if (task == Stream::caption) {
    if (!terms.con.defined()) throw ValidationError("total_loss: caption batch without contrastive term");
  } else if (!terms.cls.defined() || !terms.bce.defined() || !terms.dice.defined()) {
    throw ValidationError("total_loss: dense batch needs cls, bce and dice terms");
  }
  Tensor<Scalar> total = Tensor<Scalar>::scalar(Scalar(0));
  auto accumulate = [&](const Tensor<Scalar>& term, double weight) {
    if (term.defined()) total = add(total, scale(reshape(term, {}), Scalar(weight)));
  };
  accumulate(terms.cls, w.cls);
  accumulate(terms.bce, w.bce);
  accumulate(terms.dice, w.dice);
  accumulate(terms.con, w.con);
  return total;
}

template <typename Scalar>
LossReport make_report(const LossTerms<Scalar>& terms, const Tensor<Scalar>& total) {
  LossReport r;
  auto value = [](const Tensor<Scalar>& t) -> std::optional<double> {
    if (!t.defined()) return std::nullopt;
    return static_cast<double>(t.item());
  };
  r.cls = value(terms.cls);
  r.bce = value(terms.bce);
  r.dice = value(terms.dice);
  r.con = value(terms.con);
  r.total = static_cast<double>(total.item());
  return r;
}

std::string metrics_csv_header() { return "step,task,L_cls,L_bce,L_dice,L_con,total"; }

std::string metrics_csv_row(long step, Stream task, const LossReport& r) {
  auto field = [](const std::optional<double>& v) -> std::string {
    if (!v) return "";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", *v);
    return buf;
  };
  return std::to_string(step) + "," + std::string(to_string(task)) + "," + field(r.cls) + "," +
         field(r.bce) + "," + field(r.dice) + "," + field(r.con) + "," + field(r.total);
}

#define VLOSS_INSTANTIATE(S)                                                                              \
  template struct MatchTargets<S>;                                                                        \
  template Eigen::MatrixXd build_match_cost(const Tensor<S>&, const Tensor<S>&, const MatchTargets<S>&,   \
                                            const LossWeights&);                                          \
  template MatchResult match_queries(const Tensor<S>&, const Tensor<S>&, const MatchTargets<S>&,          \
                                     const LossWeights&);                                                 \
  template Tensor<S> classification_loss(const Tensor<S>&, const std::vector<Index>&, ClsMode, double);   \
  template Tensor<S> bce_mask_loss(const Tensor<S>&, const Tensor<S>&);                                   \
  template Tensor<S> dice_loss(const Tensor<S>&, const Tensor<S>&, S);                                    \
  template Tensor<S> contrastive_sim(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);               \
  template Tensor<S> contrastive_loss(const Tensor<S>&);                                                  \
  template Tensor<S> filip_contrastive_loss(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);        \
  template Tensor<S> total_loss(const LossTerms<S>&, const LossWeights&, Stream);                         \
  template LossReport make_report(const LossTerms<S>&, const Tensor<S>&);

VLOSS_INSTANTIATE(float)
VLOSS_INSTANTIATE(double)

#undef VLOSS_INSTANTIATE

}  // namespace vloss
