#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "percap/error.hpp"
#include "percap/log.hpp"
#include "percap/rng.hpp"
#include "percap/tensor.hpp"
#include "percap/text.hpp"

namespace percap {

enum class EncoderKind { transformer, bow };
enum class PretrainMode { none, word, full };

inline std::string to_string(EncoderKind k) {
  return k == EncoderKind::transformer ? "transformer" : "bow";
}
inline EncoderKind encoder_kind_from_string(const std::string& s) {
  if (s == "transformer") return EncoderKind::transformer;
  if (s == "bow") return EncoderKind::bow;
  throw ConfigError("encoder kind: expected transformer|bow, got '" + s + "'");
}
inline std::string to_string(PretrainMode m) {
  switch (m) {
    case PretrainMode::none: return "none";
    case PretrainMode::word: return "word";
    case PretrainMode::full: return "full";
  }
  throw ContractError("pretrain mode: invalid enum value");
}
inline PretrainMode pretrain_mode_from_string(const std::string& s) {
  if (s == "none") return PretrainMode::none;
  if (s == "word") return PretrainMode::word;
  if (s == "full") return PretrainMode::full;
  throw ConfigError("pretrain mode: expected none|word|full, got '" + s + "'");
}

struct TextEncoderConfig {
  EncoderKind kind = EncoderKind::transformer;
  std::size_t layers = 4;
  std::size_t d_model = 300;
  std::size_t heads = 6;
  std::size_t ffn_dim = 0;  // 0 resolves to 4 * d_model
  std::size_t max_len = 32;  // caption tokens before the BOS/EOS wrap
  PretrainMode pretrain = PretrainMode::none;

  void validate() const {
    if (d_model == 0) throw ConfigError("text encoder: d_model must be positive");
    if (max_len < 3) throw ConfigError("text encoder: max_len must be at least 3");
    if (kind == EncoderKind::transformer) {
      if (layers == 0 || heads == 0)
        throw ConfigError("text encoder: layers and heads must be positive");
      if (d_model % heads != 0)
        throw ConfigError("text encoder: d_model " + std::to_string(d_model) +
                          " not divisible by heads " + std::to_string(heads));
    }
  }
};

// Per-layer attention matrices and pre-residual attention outputs, for
// inspecting the encoder from tests.
template <typename T>
struct EncodeTrace {
  std::vector<Tensor<T>> attention;  // one [L x L] per (layer, head)
  std::vector<Tensor<T>> attn_out;   // one [L x d_model] per layer
};

namespace detail {

template <typename T>
struct TransformerLayer {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln1_g, ln1_b;
  Tensor<T> w1, b1, w2, b2;
  Tensor<T> ln2_g, ln2_b;
};

}  // namespace detail

// Caption -> fixed vector. Transformer kind: BOS/EOS wrap, learned
// positions, post-norm self-attention blocks, mean pool over non-PAD
// positions. BoW kind: sum of word embeddings, order-invariant.
template <typename T>
class TextEncoder {
 public:
  TextEncoder() = default;

  TextEncoder(TextEncoderConfig cfg, const Vocabulary& vocab, Rng& rng)
      : cfg_(cfg), vocab_(vocab) {
    if (cfg_.ffn_dim == 0) cfg_.ffn_dim = 4 * cfg_.d_model;
    cfg_.validate();
    std::size_t v = vocab_.size();
    std::size_t d = cfg_.d_model;
    word_emb_ = init_embedding<T>(v, d, rng).set_requires_grad(true);
    if (cfg_.kind == EncoderKind::transformer) {
      pos_emb_ = init_embedding<T>(cfg_.max_len + 2, d, rng).set_requires_grad(true);
      for (std::size_t l = 0; l < cfg_.layers; ++l) {
        detail::TransformerLayer<T> layer;
        layer.wq = init_matrix<T>(d, d, rng).set_requires_grad(true);
        layer.bq = init_bias<T>(d).set_requires_grad(true);
        layer.wk = init_matrix<T>(d, d, rng).set_requires_grad(true);
        layer.bk = init_bias<T>(d).set_requires_grad(true);
        layer.wv = init_matrix<T>(d, d, rng).set_requires_grad(true);
        layer.bv = init_bias<T>(d).set_requires_grad(true);
        layer.wo = init_matrix<T>(d, d, rng).set_requires_grad(true);
        layer.bo = init_bias<T>(d).set_requires_grad(true);
        layer.ln1_g = init_ones<T>(d).set_requires_grad(true);
        layer.ln1_b = init_bias<T>(d).set_requires_grad(true);
        layer.w1 = init_matrix<T>(d, cfg_.ffn_dim, rng).set_requires_grad(true);
        layer.b1 = init_bias<T>(cfg_.ffn_dim).set_requires_grad(true);
        layer.w2 = init_matrix<T>(cfg_.ffn_dim, d, rng).set_requires_grad(true);
        layer.b2 = init_bias<T>(d).set_requires_grad(true);
        layer.ln2_g = init_ones<T>(d).set_requires_grad(true);
        layer.ln2_b = init_bias<T>(d).set_requires_grad(true);
        layers_.push_back(std::move(layer));
      }
    }
  }

  Tensor<T> encode(const std::vector<std::string>& tokens) const {
    return encode(tokens, nullptr, 0);
  }

  // pad_to (transformer only): total wrapped length to right-pad to with
  // PAD; masked out of attention and pooling.
  Tensor<T> encode(const std::vector<std::string>& tokens, EncodeTrace<T>* trace,
                   std::size_t pad_to) const {
    if (tokens.empty()) throw ContractError("text encoder: cannot encode an empty token list");
    if (cfg_.kind == EncoderKind::bow) return encode_bow(tokens, vocab_, word_emb_);
    std::vector<std::string> toks = tokens;
    if (toks.size() > cfg_.max_len) {
      warn("caption truncated from " + std::to_string(toks.size()) + " to " +
           std::to_string(cfg_.max_len) + " tokens");
      toks.resize(cfg_.max_len);
    }
    std::vector<int> ids = vocab_.encode_wrapped(toks);
    std::size_t real_len = ids.size();
    if (pad_to > 0) {
      if (pad_to < real_len || pad_to > cfg_.max_len + 2)
        throw ContractError("text encoder: pad_to " + std::to_string(pad_to) +
                            " outside [" + std::to_string(real_len) + ", " +
                            std::to_string(cfg_.max_len + 2) + "]");
      ids.resize(pad_to, Vocabulary::kPad);
    }
    std::size_t L = ids.size();
    std::vector<int> pos(L);
    for (std::size_t i = 0; i < L; ++i) pos[i] = static_cast<int>(i);
    Tensor<T> x = add(embedding_lookup(word_emb_, ids), embedding_lookup(pos_emb_, pos));

    Tensor<T> mask = Tensor<T>::zeros({L, L});
    if (L > real_len) {
      T* pm = mask.data();
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = real_len; j < L; ++j) pm[i * L + j] = T(-1e9);
    }

    std::size_t dh = cfg_.d_model / cfg_.heads;
    T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));
    for (const auto& layer : layers_) {
      Tensor<T> q = add_bias(matmul(x, layer.wq), layer.bq);
      Tensor<T> k = add_bias(matmul(x, layer.wk), layer.bk);
      Tensor<T> v = add_bias(matmul(x, layer.wv), layer.bv);
      std::vector<Tensor<T>> heads;
      for (std::size_t h = 0; h < cfg_.heads; ++h) {
        Tensor<T> qh = slice(q, 1, h * dh, (h + 1) * dh);
        Tensor<T> kh = slice(k, 1, h * dh, (h + 1) * dh);
        Tensor<T> vh = slice(v, 1, h * dh, (h + 1) * dh);
        Tensor<T> scores = add(scale(matmul(qh, transpose(kh)), inv_sqrt_dh), mask);
        Tensor<T> attn = softmax(scores, 1);
        if (trace) trace->attention.push_back(attn);
        heads.push_back(matmul(attn, vh));
      }
      Tensor<T> ctx = cfg_.heads == 1 ? heads[0] : concat(heads, 1);
      Tensor<T> attn_out = add_bias(matmul(ctx, layer.wo), layer.bo);
      if (trace) trace->attn_out.push_back(attn_out);
      x = layer_norm(add(x, attn_out), layer.ln1_g, layer.ln1_b);
      Tensor<T> ff = add_bias(matmul(relu(add_bias(matmul(x, layer.w1), layer.b1)), layer.w2),
                              layer.b2);
      x = layer_norm(add(x, ff), layer.ln2_g, layer.ln2_b);
    }
    if (L > real_len) x = slice(x, 0, 0, real_len);
    return mean_axis(x, 0);
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters(
      const std::string& prefix = "") const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back(prefix + "word_emb", word_emb_);
    if (cfg_.kind == EncoderKind::bow) return out;
    out.emplace_back(prefix + "pos_emb", pos_emb_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& ly = layers_[l];
      std::string p = prefix + "layer" + std::to_string(l) + ".";
      out.emplace_back(p + "attn.wq", ly.wq);
      out.emplace_back(p + "attn.bq", ly.bq);
      out.emplace_back(p + "attn.wk", ly.wk);
      out.emplace_back(p + "attn.bk", ly.bk);
      out.emplace_back(p + "attn.wv", ly.wv);
      out.emplace_back(p + "attn.bv", ly.bv);
      out.emplace_back(p + "attn.wo", ly.wo);
      out.emplace_back(p + "attn.bo", ly.bo);
      out.emplace_back(p + "ln1.gain", ly.ln1_g);
      out.emplace_back(p + "ln1.bias", ly.ln1_b);
      out.emplace_back(p + "ffn.w1", ly.w1);
      out.emplace_back(p + "ffn.b1", ly.b1);
      out.emplace_back(p + "ffn.w2", ly.w2);
      out.emplace_back(p + "ffn.b2", ly.b2);
      out.emplace_back(p + "ln2.gain", ly.ln2_g);
      out.emplace_back(p + "ln2.bias", ly.ln2_b);
    }
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  void set_trainable(bool on) {
    for (auto& t : parameters()) t.set_requires_grad(on);
  }

  // Overwrites this encoder's weights with other's (same architecture).
  void copy_weights_from(const TextEncoder<T>& other) {
    auto dst = named_parameters();
    auto src = other.named_parameters();
    if (dst.size() != src.size())
      throw ConfigError("text encoder: weight copy between different architectures (" +
                        std::to_string(src.size()) + " vs " + std::to_string(dst.size()) +
                        " tensors)");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (dst[i].first != src[i].first || dst[i].second.shape() != src[i].second.shape())
        throw ConfigError("text encoder: weight copy mismatch at '" + dst[i].first + "' " +
                          shape_str(src[i].second.shape()) + " vs " +
                          shape_str(dst[i].second.shape()));
      std::copy(src[i].second.data(), src[i].second.data() + src[i].second.size(),
                dst[i].second.data());
    }
  }

  const TextEncoderConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  Tensor<T> word_embeddings() const { return word_emb_; }

 private:
  TextEncoderConfig cfg_;
  Vocabulary vocab_;
  Tensor<T> word_emb_;  // [V x d_model]
  Tensor<T> pos_emb_;   // [max_len + 2 x d_model]
  std::vector<detail::TransformerLayer<T>> layers_;
};

// Free-standing bag-of-words encode over an explicit table, for callers
// that hold the table directly. Ids are sorted before summation so the
// result is bitwise identical under token permutation.
template <typename T>
Tensor<T> encode_bow(const std::vector<std::string>& tokens, const Vocabulary& vocab,
                     Tensor<T> word_table) {
  if (tokens.empty()) throw ContractError("encode_bow: empty token list");
  std::vector<int> ids = vocab.encode(tokens);
  std::sort(ids.begin(), ids.end());
  return sum_axis(embedding_lookup(word_table, ids), 0);
}

// One line per token: the token then d decimals. Rows for reserved ids
// (PAD/BOS/EOS/UNK) and tokens outside the vocabulary are skipped.
// Returns how many distinct vocabulary tokens were matched.
template <typename T>
std::size_t load_word_embeddings(const std::string& path, const Vocabulary& vocab,
                                 Tensor<T> table) {
  if (table.rank() != 2 || table.dim(0) != vocab.size())
    throw ConfigError("word embeddings: table shape " + shape_str(table.shape()) +
                      " does not match vocabulary of " + std::to_string(vocab.size()));
  std::ifstream in(path);
  if (!in) throw DataError("word embeddings: cannot open " + path);
  std::size_t d = table.dim(1);
  std::vector<char> matched(vocab.size(), 0);
  std::string line;
  std::size_t line_no = 0;
  std::size_t count = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string tok;
    ss >> tok;
    std::vector<T> row;
    double v;
    while (ss >> v) row.push_back(static_cast<T>(v));
    if (!ss.eof())
      throw FormatError("word embeddings: line " + std::to_string(line_no) +
                        " has a non-numeric value");
    if (row.size() != d)
      throw FormatError("word embeddings: line " + std::to_string(line_no) + " has " +
                        std::to_string(row.size()) + " values, expected " + std::to_string(d));
    int id = vocab.id(tok);
    if (id < 4) continue;
    std::copy(row.begin(), row.end(), table.data() + static_cast<std::size_t>(id) * d);
    if (!matched[static_cast<std::size_t>(id)]) {
      matched[static_cast<std::size_t>(id)] = 1;
      ++count;
    }
  }
  return count;
}

// ---------------------------------------------------------------------------
// next-utterance pretraining

template <typename T>
struct PretrainConfig {
  std::size_t k = 1;  // in-batch negatives per positive
  std::size_t batch = 32;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  OptimizerConfig<T> opt{};
};

template <typename T>
struct PretrainResult {
  TextEncoder<T> context_encoder;
  TextEncoder<T> candidate_encoder;  // the weights downstream models start from
  std::vector<double> batch_loss;    // chronological, recorded before each update
};

// Trains a context encoder and a candidate encoder so the true next
// utterance outranks k in-batch negatives under a softmax over dot
// products.
template <typename T>
PretrainResult<T> pretrain_next_utterance(
    const std::vector<std::pair<std::string, std::string>>& pairs, const Vocabulary& vocab,
    const TextEncoderConfig& cfg, const PretrainConfig<T>& pcfg) {
  if (pairs.empty()) throw DataError("pretraining: no dialogue pairs");
  if (pcfg.k < 1) throw ConfigError("pretraining: k must be at least 1");
  std::size_t batch = pcfg.batch;
  if (batch > pairs.size()) {
    warn("pretraining batch " + std::to_string(batch) + " reduced to corpus size " +
         std::to_string(pairs.size()));
    batch = pairs.size();
  }
  if (pcfg.k >= batch)
    throw ConfigError("pretraining: k = " + std::to_string(pcfg.k) +
                      " negatives need a batch larger than k, got " + std::to_string(batch));

  Rng rng(pcfg.seed);
  PretrainResult<T> result{TextEncoder<T>(cfg, vocab, rng), TextEncoder<T>(cfg, vocab, rng), {}};

  std::vector<Tensor<T>> params = result.context_encoder.parameters();
  for (auto& t : result.candidate_encoder.parameters()) params.push_back(t);
  Optimizer<T> opt(params, pcfg.opt);

  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < pcfg.epochs; ++epoch) {
    for (std::size_t i = 0; i + 1 < order.size(); ++i)
      std::swap(order[i], order[i + rng.index(order.size() - i)]);
    for (std::size_t start = 0; start + pcfg.k < order.size(); start += batch) {
      std::size_t b = std::min(batch, order.size() - start);
      if (b <= pcfg.k) break;
      Tape<T> tape;
      TapeScope<T> scope(tape);
      std::vector<Tensor<T>> ctx(b), cand(b);
      for (std::size_t i = 0; i < b; ++i) {
        const auto& [context, response] = pairs[order[start + i]];
        ctx[i] = result.context_encoder.encode(tokenize(context));
        cand[i] = result.candidate_encoder.encode(tokenize(response));
      }
      std::vector<Tensor<T>> rows(b);
      for (std::size_t i = 0; i < b; ++i) {
        std::vector<std::size_t> others;
        others.reserve(b - 1);
        for (std::size_t j = 0; j < b; ++j)
          if (j != i) others.push_back(j);
        for (std::size_t j = 0; j < pcfg.k; ++j)
          std::swap(others[j], others[j + rng.index(others.size() - j)]);
        std::vector<Tensor<T>> scores;
        scores.push_back(dot(ctx[i], cand[i]));
        for (std::size_t j = 0; j < pcfg.k; ++j) scores.push_back(dot(ctx[i], cand[others[j]]));
        rows[i] = concat(scores, 0);
      }
      Tensor<T> lp = log_softmax(stack_rows(rows), 1);
      Tensor<T> loss = scale(mean(pick(lp, std::vector<int>(b, 0))), T(-1));
      result.batch_loss.push_back(static_cast<double>(loss.item()));
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
    }
  }
  return result;
}

}  // namespace percap
