#include "vloss/text/text_encoder.hpp"

#include <algorithm>
#include <cctype>
#include <nlohmann/json.hpp>
#include <set>

#include "vloss/core/ops.hpp"

namespace vloss {

Index Vocabulary::id(const std::string& token) const {
  auto it = ids.find(token);
  return it == ids.end() ? kUnk : it->second;
}

std::string Vocabulary::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (Index i = 0; i < size(); ++i) j[tokens[i]] = i;
  return j.dump(1);
}

Vocabulary Vocabulary::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("vocabulary: malformed JSON at byte offset " + std::to_string(e.byte));
  }
  if (!j.is_object()) throw ValidationError("vocabulary: expected an object of token -> id");
  Vocabulary v;
  v.tokens.assign(j.size(), "");
  std::vector<bool> seen(j.size(), false);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!it.value().is_number_integer()) throw ValidationError("vocabulary: id of '" + it.key() + "' is not an integer");
    const Index id = it.value().get<Index>();
    if (id < 0 || id >= static_cast<Index>(j.size()) || seen[id])
      throw ValidationError("vocabulary: ids must be dense and unique, bad id for '" + it.key() + "'");
    seen[id] = true;
    v.tokens[id] = it.key();
    v.ids[it.key()] = id;
  }
  if (v.size() < 4 || v.tokens[0] != "<pad>" || v.tokens[1] != "<bos>" || v.tokens[2] != "<eos>" ||
      v.tokens[3] != "<unk>") {
    throw ValidationError("vocabulary: reserved tokens missing from ids 0..3");
  }
  return v;
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Vocabulary build_vocab(const std::vector<std::string>& corpus, Index min_count) {
  if (corpus.empty()) throw ValidationError("build_vocab: empty corpus");
  std::map<std::string, Index> freq;
  for (const auto& line : corpus)
    for (auto& w : split_words(line)) ++freq[w];
  std::vector<std::pair<std::string, Index>> words(freq.begin(), freq.end());
  std::stable_sort(words.begin(), words.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (const char* r : {"<pad>", "<bos>", "<eos>", "<unk>"}) {
    v.ids[r] = v.size();
    v.tokens.push_back(r);
  }
  for (const auto& [w, n] : words) {
    if (n < min_count) continue;
    v.ids[w] = v.size();
    v.tokens.push_back(w);
  }
  return v;
}

std::vector<Index> tokenize(const std::string& text, const Vocabulary& vocab, Index max_len) {
  if (max_len < 2) throw ValidationError("tokenize: max_len must be >= 2");
  std::vector<Index> ids{Vocabulary::kBos};
  for (const auto& w : split_words(text)) {
    if (static_cast<Index>(ids.size()) == max_len - 1) break;
    ids.push_back(vocab.id(w));
  }
  ids.push_back(Vocabulary::kEos);
  return ids;
}

void TextEncoderConfig::validate() const {
  if (dim < 1 || layers < 0 || heads < 1 || dim % heads != 0 || max_len < 2 || ffn_mult < 1) {
    throw ValidationError("text encoder: need dim % heads == 0, layers >= 0, max_len >= 2");
  }
}

template <typename Scalar>
Tensor<Scalar> TextEncoder<Scalar>::encode_tokens(const std::vector<Index>& ids) const {
  const Index len = static_cast<Index>(ids.size());
  if (len == 0 || len > cfg.max_len) {
    throw ValidationError("encode_text: sequence length " + std::to_string(len) + " outside [1, " +
                          std::to_string(cfg.max_len) + "]");
  }
  for (Index id : ids)
    if (id < 0 || id >= vocab_size) {
      throw ValidationError("encode_text: token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(vocab_size));
    }
  std::vector<Index> pos(len);
  for (Index i = 0; i < len; ++i) pos[i] = i;
  Tensor<Scalar> x = add(embedding_lookup(token_emb, ids), embedding_lookup(pos_emb, pos));
  std::vector<Scalar> causal(len * len, Scalar(0));
  for (Index i = 0; i < len; ++i)
    for (Index j = i + 1; j < len; ++j) causal[i * len + j] = Scalar(kBlocked);
  const Tensor<Scalar> mask({len, len}, std::move(causal));
  for (const auto& b : blocks) {
    const Tensor<Scalar> h = b.ln1(x);
    x = add(x, b.attn(h, h, h, &mask));
    x = add(x, b.ffn(b.ln2(x)));
  }
  return proj(final_norm(x));
}

template <typename Scalar>
Tensor<Scalar> TextEncoder<Scalar>::encode(const std::vector<std::vector<Index>>& batch) const {
  std::vector<Tensor<Scalar>> rows;
  for (const auto& ids : batch) {
    const Tensor<Scalar> t = encode_tokens(ids);
    const Index len = t.dim(0);
    rows.push_back(cfg.pooling == TextPooling::eos ? slice(t, 0, len - 1, len) : mean(t, 0, true));
  }
  if (rows.empty()) return Tensor<Scalar>::zeros({0, cfg.dim});
  return concat(rows, 0);
}

template <typename Scalar>
TextEncoder<Scalar> make_text_encoder(ParamSet<Scalar>& ps, const TextEncoderConfig& cfg, Index vocab_size,
                                      std::mt19937_64& rng) {
  cfg.validate();
  if (vocab_size < 4) throw ValidationError("text encoder: vocabulary needs the reserved tokens");
  const ParamGroup g = ParamGroup::text_encoder;
  TextEncoder<Scalar> e;
  e.cfg = cfg;
  e.vocab_size = vocab_size;
  e.token_emb = ps.add("text.token_emb", random_normal<Scalar>({vocab_size, cfg.dim}, 0.5, rng), g, false);
  e.pos_emb = ps.add("text.pos_emb", random_normal<Scalar>({cfg.max_len, cfg.dim}, 0.1, rng), g, false);
  for (Index l = 0; l < cfg.layers; ++l) {
    const std::string n = "text.block" + std::to_string(l);
    typename TextEncoder<Scalar>::Block b;
    b.ln1 = make_norm(ps, n + ".ln1", cfg.dim, g);
    b.attn = make_attention(ps, n + ".attn", cfg.dim, cfg.heads, rng, g);
    b.ln2 = make_norm(ps, n + ".ln2", cfg.dim, g);
    b.ffn = make_ffn(ps, n + ".ffn", cfg.dim, cfg.dim * cfg.ffn_mult, rng, g);
    e.blocks.push_back(std::move(b));
  }
  e.final_norm = make_norm(ps, "text.final_norm", cfg.dim, g);
  e.proj = make_linear(ps, "text.proj", cfg.dim, cfg.dim, rng, g, false);
  return e;
}

std::string format_prompt(const std::string& tmpl, const std::string& name) {
  const auto pos = tmpl.find("{}");
  if (pos == std::string::npos) return tmpl + " " + name;
  return tmpl.substr(0, pos) + name + tmpl.substr(pos + 2);
}

template <typename Scalar>
Tensor<Scalar> build_class_embeddings(const std::vector<std::string>& class_names, const std::string& tmpl,
                                      const Vocabulary& vocab, const TextEncoder<Scalar>& enc,
                                      const Tensor<Scalar>& no_object) {
  if (class_names.empty()) throw ValidationError("build_class_embeddings: no class names");
  std::set<std::string> seen;
  std::vector<std::vector<Index>> batch;
  for (const auto& n : class_names) {
    if (!seen.insert(n).second) throw ValidationError("build_class_embeddings: duplicate class name '" + n + "'");
    batch.push_back(tokenize(format_prompt(tmpl, n), vocab, enc.cfg.max_len));
  }
  if (no_object.shape() != Shape{1, enc.cfg.dim}) {
    throw ValidationError("build_class_embeddings: no-object row must be [1, D], got " + shape_str(no_object.shape()));
  }
  return concat(std::vector<Tensor<Scalar>>{enc.encode(batch), no_object}, 0);
}

#define VLOSS_INSTANTIATE(S)                                                                                   \
  template struct TextEncoder<S>;                                                                              \
  template TextEncoder<S> make_text_encoder(ParamSet<S>&, const TextEncoderConfig&, Index, std::mt19937_64&);  \
  template Tensor<S> build_class_embeddings(const std::vector<std::string>&, const std::string&, const Vocabulary&, \
                                            const TextEncoder<S>&, const Tensor<S>&);

VLOSS_INSTANTIATE(float)
VLOSS_INSTANTIATE(double)

#undef VLOSS_INSTANTIATE

}  // namespace vloss
