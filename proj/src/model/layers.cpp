#include "vloss/model/layers.hpp"

#include <cmath>

#include "vloss/core/hash.hpp"
#include "vloss/core/ops.hpp"

namespace vloss {

template <typename Scalar>
std::uint64_t param_hash(const ParamSet<Scalar>& ps) {
  std::uint64_t h = fnv1a("params");
  for (const auto& p : ps.items()) {
    h = fnv1a(p.name, h);
    h = fnv1a(shape_str(p.value.shape()), h);
    const auto d = p.value.data();
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(Scalar)), h);
  }
  return h;
}

template <typename Scalar>
Tensor<Scalar> Linear<Scalar>::operator()(const Tensor<Scalar>& x) const {
  Tensor<Scalar> y = matmul(x, w);
  return b.defined() ? add(y, b) : y;
}

template <typename Scalar>
Linear<Scalar> make_linear(ParamSet<Scalar>& ps, const std::string& name, Index in, Index out,
                           std::mt19937_64& rng, ParamGroup group, bool bias) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> u(-limit, limit);
  std::vector<Scalar> w(in * out);
  for (auto& x : w) x = static_cast<Scalar>(u(rng));
  Linear<Scalar> l;
  l.w = ps.add(name + ".w", Tensor<Scalar>({in, out}, std::move(w)), group, true);
  if (bias) l.b = ps.add(name + ".b", Tensor<Scalar>::zeros({out}), group, false);
  return l;
}

template <typename Scalar>
Tensor<Scalar> Norm<Scalar>::operator()(const Tensor<Scalar>& x) const {
  return layer_norm(x, gamma, beta);
}

template <typename Scalar>
Norm<Scalar> make_norm(ParamSet<Scalar>& ps, const std::string& name, Index dim, ParamGroup group) {
  return {ps.add(name + ".gamma", Tensor<Scalar>::full({dim}, Scalar(1)), group, false),
          ps.add(name + ".beta", Tensor<Scalar>::zeros({dim}), group, false)};
}

template <typename Scalar>
Tensor<Scalar> Attention<Scalar>::operator()(const Tensor<Scalar>& queries, const Tensor<Scalar>& keys,
                                             const Tensor<Scalar>& values, const Tensor<Scalar>* bias) const {
  const Index lq = queries.dim(0), lk = keys.dim(0), d = q.w.dim(1);
  if (d % heads != 0) throw ValidationError("attention: width " + std::to_string(d) + " not divisible by heads");
  const Index dh = d / heads;
  auto split = [&](const Tensor<Scalar>& x, Index len) { return transpose(reshape(x, {len, heads, dh}), {1, 0, 2}); };
  const Tensor<Scalar> qh = split(q(queries), lq), kh = split(k(keys), lk), vh = split(v(values), lk);
  Tensor<Scalar> logits = scale(matmul(qh, transpose(kh)), Scalar(1.0 / std::sqrt(static_cast<double>(dh))));
  if (bias) logits = add(logits, *bias);
  const Tensor<Scalar> mixed = matmul(softmax(logits, 2), vh);  // [H, Lq, dh]
  return o(reshape(transpose(mixed, {1, 0, 2}), {lq, d}));
}

template <typename Scalar>
Attention<Scalar> make_attention(ParamSet<Scalar>& ps, const std::string& name, Index dim, Index heads,
                                 std::mt19937_64& rng, ParamGroup group) {
  Attention<Scalar> a;
  a.q = make_linear(ps, name + ".q", dim, dim, rng, group);
  a.k = make_linear(ps, name + ".k", dim, dim, rng, group);
  a.v = make_linear(ps, name + ".v", dim, dim, rng, group);
  a.o = make_linear(ps, name + ".o", dim, dim, rng, group);
  a.heads = heads;
  return a;
}

template <typename Scalar>
Tensor<Scalar> FeedForward<Scalar>::operator()(const Tensor<Scalar>& x) const {
  return down(gelu(up(x)));
}

template <typename Scalar>
FeedForward<Scalar> make_ffn(ParamSet<Scalar>& ps, const std::string& name, Index dim, Index hidden,
                             std::mt19937_64& rng, ParamGroup group) {
  return {make_linear(ps, name + ".up", dim, hidden, rng, group),
          make_linear(ps, name + ".down", hidden, dim, rng, group)};
}

#define VLOSS_INSTANTIATE(S)                                                                                 \
  template std::uint64_t param_hash(const ParamSet<S>&);                                                     \
  template struct Linear<S>;                                                                                 \
  template Linear<S> make_linear(ParamSet<S>&, const std::string&, Index, Index, std::mt19937_64&, ParamGroup, \
                                 bool);                                                                      \
  template struct Norm<S>;                                                                                   \
  template Norm<S> make_norm(ParamSet<S>&, const std::string&, Index, ParamGroup);                           \
  template struct Attention<S>;                                                                              \
  template Attention<S> make_attention(ParamSet<S>&, const std::string&, Index, Index, std::mt19937_64&,     \
                                       ParamGroup);                                                          \
  template struct FeedForward<S>;                                                                            \
  template FeedForward<S> make_ffn(ParamSet<S>&, const std::string&, Index, Index, std::mt19937_64&, ParamGroup);

VLOSS_INSTANTIATE(float)
VLOSS_INSTANTIATE(double)

#undef VLOSS_INSTANTIATE

}  // namespace vloss
