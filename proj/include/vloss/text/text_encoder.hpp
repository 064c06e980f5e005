#pragma once

// Word-level tokenizer and a small causal transformer producing sentence and
// class-name embeddings.

#include <map>
#include <random>
#include <string>
#include <vector>

#include "vloss/model/layers.hpp"

namespace vloss {

/// Reserved ids: PAD = 0, BOS = 1, EOS = 2, UNK = 3; words follow from 4.
struct Vocabulary {
  static constexpr Index kPad = 0, kBos = 1, kEos = 2, kUnk = 3;

  std::vector<std::string> tokens;  // id -> token
  std::map<std::string, Index> ids;

  Index size() const { return static_cast<Index>(tokens.size()); }
  Index id(const std::string& token) const;  // kUnk when absent

  std::string to_json() const;
  static Vocabulary from_json(const std::string& text);
  bool operator==(const Vocabulary& o) const { return tokens == o.tokens; }
};

/// Lowercased runs of letters and digits; everything else separates words.
std::vector<std::string> split_words(const std::string& text);

/// Reserved tokens, then words with count >= min_count by descending count,
/// ties broken lexicographically.
Vocabulary build_vocab(const std::vector<std::string>& corpus, Index min_count = 1);

/// BOS + ids + EOS, truncated to max_len with EOS kept last.
std::vector<Index> tokenize(const std::string& text, const Vocabulary& vocab, Index max_len = 48);

enum class TextPooling { eos, mean };

struct TextEncoderConfig {
  Index dim = 64;
  Index layers = 2;
  Index heads = 4;
  Index max_len = 48;
  Index ffn_mult = 4;
  TextPooling pooling = TextPooling::eos;

  void validate() const;
};

template <typename Scalar>
struct TextEncoder {
  struct Block {
    Norm<Scalar> ln1, ln2;
    Attention<Scalar> attn;
    FeedForward<Scalar> ffn;
  };

  TextEncoderConfig cfg;
  Index vocab_size = 0;
  Tensor<Scalar> token_emb;  // [V, D]
  Tensor<Scalar> pos_emb;    // [max_len, D]
  std::vector<Block> blocks;
  Norm<Scalar> final_norm;
  Linear<Scalar> proj;  // [D, D], no bias

  /// One [D] vector per sequence, stacked to [B, D].
  Tensor<Scalar> encode(const std::vector<std::vector<Index>>& batch) const;
  /// Per-token outputs [L, D] (after the projection) for one sequence.
  Tensor<Scalar> encode_tokens(const std::vector<Index>& ids) const;
};

/// Registers all weights under "text." in the text-encoder group.
template <typename Scalar>
TextEncoder<Scalar> make_text_encoder(ParamSet<Scalar>& ps, const TextEncoderConfig& cfg, Index vocab_size,
                                      std::mt19937_64& rng);

inline constexpr const char* kDefaultPromptTemplate = "a photo of a {}.";

/// Replaces the first "{}" in `tmpl` with `name`.
std::string format_prompt(const std::string& tmpl, const std::string& name);

/// Rows 0..C-1 encode the prompted names in order; row C is `no_object` ([1, D]).
template <typename Scalar>
Tensor<Scalar> build_class_embeddings(const std::vector<std::string>& class_names, const std::string& tmpl,
                                      const Vocabulary& vocab, const TextEncoder<Scalar>& enc,
                                      const Tensor<Scalar>& no_object);

}  // namespace vloss
