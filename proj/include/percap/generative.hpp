#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "percap/data.hpp"
#include "percap/error.hpp"
#include "percap/log.hpp"
#include "percap/metrics.hpp"
#include "percap/rng.hpp"
#include "percap/tensor.hpp"
#include "percap/text.hpp"
#include "percap/traits.hpp"

namespace percap {

enum class DecoderKind { showtell, showatttell, updown };

inline std::string to_string(DecoderKind k) {
  switch (k) {
    case DecoderKind::showtell: return "showtell";
    case DecoderKind::showatttell: return "showatttell";
    case DecoderKind::updown: return "updown";
  }
  throw ContractError("decoder kind: unknown enum value");
}

inline DecoderKind decoder_kind_from_string(const std::string& s) {
  if (s == "showtell") return DecoderKind::showtell;
  if (s == "showatttell") return DecoderKind::showatttell;
  if (s == "updown") return DecoderKind::updown;
  throw ConfigError("decoder kind must be showtell, showatttell, or updown, got \"" + s + "\"");
}

struct GenerativeConfig {
  DecoderKind kind = DecoderKind::updown;
  std::size_t feature_dim = 2048;
  std::size_t hidden_dim = 512;  // also the word, trait, and reduced-image width
  std::size_t max_len = 16;      // decoded word cap; training captions truncate here
  bool personality_on = true;

  void validate() const {
    if (feature_dim == 0 || hidden_dim == 0)
      throw ConfigError("generator: feature_dim and hidden_dim must be positive");
    if (max_len < 3)
      throw ConfigError("generator: max_len must be at least 3, got " + std::to_string(max_len));
  }
};

namespace detail {

// Gate layout along the 4H axis: input, forget, cell candidate, output.
template <typename T>
struct LstmCell {
  Tensor<T> wx, wh, b;

  LstmCell() = default;
  LstmCell(std::size_t in, std::size_t hidden, Rng& rng)
      : wx(init_matrix<T>(in, 4 * hidden, rng)),
        wh(init_matrix<T>(hidden, 4 * hidden, rng)),
        b(init_bias<T>(4 * hidden)) {
    wx.set_requires_grad(true);
    wh.set_requires_grad(true);
    b.set_requires_grad(true);
  }

  // cell_in, when given, is added to the cell-candidate preactivation.
  std::pair<Tensor<T>, Tensor<T>> step(Tensor<T> x, Tensor<T> h, Tensor<T> c,
                                       std::optional<Tensor<T>> cell_in = std::nullopt) const {
    std::size_t hd = wh.dim(0);
    Tensor<T> z = add_bias(add(matmul(x, wx), matmul(h, wh)), b);
    Tensor<T> gi = sigmoid(slice(z, 1, 0, hd));
    Tensor<T> gf = sigmoid(slice(z, 1, hd, 2 * hd));
    Tensor<T> gp = slice(z, 1, 2 * hd, 3 * hd);
    if (cell_in) gp = add(gp, *cell_in);
    Tensor<T> gg = tanh(gp);
    Tensor<T> go = sigmoid(slice(z, 1, 3 * hd, 4 * hd));
    Tensor<T> c2 = add(mul(gf, c), mul(gi, gg));
    Tensor<T> h2 = mul(go, tanh(c2));
    return {h2, c2};
  }
};

template <typename T>
Tensor<T> to_tensor(const std::vector<float>& v, Shape shape) {
  std::vector<T> data(v.begin(), v.end());
  return Tensor<T>::from_data(std::move(shape), std::move(data));
}

}  // namespace detail

// Per-batch image and trait inputs, precomputed once per step loop.
template <typename T>
struct ImageContext {
  std::size_t batch = 0;
  Tensor<T> vec;                     // [B x H]: reduced vector (showtell) or mean-pooled grid (updown)
  std::vector<Tensor<T>> positions;  // attention kinds: per image [49 x H]
  std::vector<Tensor<T>> pos_proj;   // per image positions * attn.wp, cached across steps
  Tensor<T> trait_rows;              // [B x H] when personality is on
};

template <typename T>
struct DecodeState {
  Tensor<T> h1, c1, h2, c2;  // h2/c2 used by the two-layer decoder only
};

template <typename T>
struct Attention {
  Tensor<T> context;  // [H]
  Tensor<T> weights;  // [P], sums to 1
};

// Personality-conditioned LSTM caption decoders over precomputed image
// features. One weight set per architecture:
//   showtell      reduced image vector fed as the step-0 input word
//   showatttell   additive attention over 49 positions, context added to
//                 the cell-candidate node each step
//   updown        two LSTMs; the first produces the attention query, the
//                 second consumes [context || first output] and predicts
// The trait embedding is concatenated into every LSTM input vector when
// personality conditioning is on.
template <typename T>
class Generator {
 public:
  Generator(GenerativeConfig cfg, Vocabulary vocab, TraitTable traits, Rng& rng)
      : cfg_(cfg), vocab_(std::move(vocab)), traits_(std::move(traits)) {
    cfg_.validate();
    if (traits_.size() == 0) throw ConfigError("generator: trait table is empty");
    std::size_t h = cfg_.hidden_dim;
    word_emb_ = init_embedding<T>(vocab_.size(), h, rng).set_requires_grad(true);
    trait_emb_ = init_embedding<T>(traits_.size(), h, rng).set_requires_grad(true);
    img_w_ = init_matrix<T>(cfg_.feature_dim, h, rng).set_requires_grad(true);
    img_b_ = init_bias<T>(h).set_requires_grad(true);
    if (uses_attention()) {
      attn_wq_ = init_matrix<T>(h, h, rng).set_requires_grad(true);
      attn_wp_ = init_matrix<T>(h, h, rng).set_requires_grad(true);
      attn_v_ = Tensor<T>::zeros({h});
      T bound = T(1) / std::sqrt(T(h));
      for (auto& v : attn_v_.values())
        v = static_cast<T>(rng.uniform(-double(bound), double(bound)));
      attn_v_.set_requires_grad(true);
    }
    lstm1_ = detail::LstmCell<T>(lstm1_input_dim(), h, rng);
    if (cfg_.kind == DecoderKind::updown) lstm2_ = detail::LstmCell<T>(lstm2_input_dim(), h, rng);
    out_w_ = init_matrix<T>(h, vocab_.size(), rng).set_requires_grad(true);
    out_b_ = init_bias<T>(vocab_.size()).set_requires_grad(true);
  }

  const GenerativeConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  const TraitTable& traits() const { return traits_; }
  bool uses_attention() const { return cfg_.kind != DecoderKind::showtell; }
  bool xe_trained() const { return xe_trained_; }
  void set_xe_trained(bool b) { xe_trained_ = b; }

  std::size_t trait_width() const { return cfg_.personality_on ? cfg_.hidden_dim : 0; }
  std::size_t lstm1_input_dim() const {
    std::size_t h = cfg_.hidden_dim;
    std::size_t base = h + trait_width();
    return cfg_.kind == DecoderKind::updown ? base + 2 * h : base;
  }
  std::size_t lstm2_input_dim() const { return 2 * cfg_.hidden_dim + trait_width(); }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("word_emb", word_emb_);
    out.emplace_back("trait_emb", trait_emb_);
    out.emplace_back("image.w", img_w_);
    out.emplace_back("image.b", img_b_);
    if (uses_attention()) {
      out.emplace_back("attn.wq", attn_wq_);
      out.emplace_back("attn.wp", attn_wp_);
      out.emplace_back("attn.v", attn_v_);
    }
    out.emplace_back("lstm1.wx", lstm1_.wx);
    out.emplace_back("lstm1.wh", lstm1_.wh);
    out.emplace_back("lstm1.b", lstm1_.b);
    if (cfg_.kind == DecoderKind::updown) {
      out.emplace_back("lstm2.wx", lstm2_.wx);
      out.emplace_back("lstm2.wh", lstm2_.wh);
      out.emplace_back("lstm2.b", lstm2_.b);
    }
    out.emplace_back("out.w", out_w_);
    out.emplace_back("out.b", out_b_);
    return out;
  }

  std::vector<Tensor<T>> parameters() {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  Tensor<T>& trait_table_weights() { return trait_emb_; }

  // [F] -> [H] for the vector architecture; [7,7,F] -> [49,H] with the
  // linear map shared across positions for the attention architectures.
  Tensor<T> reduce_image(Tensor<T> feature) const {
    std::size_t f = cfg_.feature_dim;
    if (cfg_.kind == DecoderKind::showtell) {
      if (feature.rank() != 1 || feature.dim(0) != f)
        throw ConfigError("reduce_image: expected a [" + std::to_string(f) +
                          "] feature vector, got " + shape_str(feature.shape()));
      return reshape(add_bias(matmul(reshape(feature, {1, f}), img_w_), img_b_),
                     {cfg_.hidden_dim});
    }
    if (feature.rank() != 3 || feature.dim(0) != 7 || feature.dim(1) != 7 || feature.dim(2) != f)
      throw ConfigError("reduce_image: expected a [7x7x" + std::to_string(f) +
                        "] feature grid, got " + shape_str(feature.shape()));
    return add_bias(matmul(reshape(feature, {49, f}), img_w_), img_b_);
  }

  // score_j = v . tanh(wq q + wp p_j); context = sum_j weights_j p_j
  Attention<T> attend(Tensor<T> query, Tensor<T> positions) const {
    if (!uses_attention())
      throw ConfigError("attend: the vector architecture has no attention weights");
    std::size_t h = cfg_.hidden_dim;
    if (query.rank() != 1 || query.dim(0) != h || positions.rank() != 2 || positions.dim(1) != h)
      throw ContractError("attend: need query [" + std::to_string(h) + "] and positions [Px" +
                          std::to_string(h) + "], got " + shape_str(query.shape()) + " and " +
                          shape_str(positions.shape()));
    Tensor<T> pp = matmul(positions, attn_wp_);
    Tensor<T> qa = reshape(matmul(reshape(query, {1, h}), attn_wq_), {h});
    Tensor<T> scores =
        reshape(matmul(tanh(add_bias(pp, qa)), reshape(attn_v_, {h, 1})), {positions.dim(0)});
    Tensor<T> weights = softmax(scores, 0);
    Tensor<T> context = reshape(matmul(reshape(weights, {1, positions.dim(0)}), positions), {h});
    return {context, weights};
  }

  // Validates that the store layout matches the architecture.
  void check_store(const FeatureStore& store) const {
    const Shape& s = store.dims();
    std::size_t f = cfg_.feature_dim;
    if (cfg_.kind == DecoderKind::showtell) {
      if (s.size() != 1 || s[0] != f)
        throw ConfigError("generator: " + to_string(cfg_.kind) + " needs a [" + std::to_string(f) +
                          "] feature store, got " + shape_str(s));
      return;
    }
    if (s.size() != 3 || s[0] != 7 || s[1] != 7 || s[2] != f)
      throw ConfigError("generator: " + to_string(cfg_.kind) + " needs a [7x7x" +
                        std::to_string(f) + "] feature store, got " + shape_str(s));
  }

  ImageContext<T> make_context(const std::vector<const std::vector<float>*>& features,
                               const std::vector<int>& trait_ids) {
    std::size_t b = features.size();
    if (b == 0) throw ContractError("generator: empty batch");
    std::size_t f = cfg_.feature_dim;
    ImageContext<T> ctx;
    ctx.batch = b;
    if (cfg_.kind == DecoderKind::showtell) {
      std::vector<T> flat;
      flat.reserve(b * f);
      for (const auto* feat : features) {
        if (feat->size() != f)
          throw ConfigError("generator: feature has " + std::to_string(feat->size()) +
                            " values, expected " + std::to_string(f));
        for (float v : *feat) flat.push_back(static_cast<T>(v));
      }
      ctx.vec = add_bias(matmul(Tensor<T>::from_data({b, f}, std::move(flat)), img_w_), img_b_);
    } else {
      std::vector<Tensor<T>> vbars;
      for (const auto* feat : features) {
        if (feat->size() != 49 * f)
          throw ConfigError("generator: feature grid has " + std::to_string(feat->size()) +
                            " values, expected " + std::to_string(49 * f));
        Tensor<T> pos = add_bias(matmul(detail::to_tensor<T>(*feat, {49, f}), img_w_), img_b_);
        ctx.positions.push_back(pos);
        ctx.pos_proj.push_back(matmul(pos, attn_wp_));
        if (cfg_.kind == DecoderKind::updown) vbars.push_back(mean_axis(pos, 0));
      }
      if (cfg_.kind == DecoderKind::updown) ctx.vec = stack_rows(std::move(vbars));
    }
    if (cfg_.personality_on) {
      if (trait_ids.size() != b)
        throw ContractError("generator: " + std::to_string(trait_ids.size()) + " trait ids for " +
                            std::to_string(b) + " images");
      for (int id : trait_ids)
        if (id < 0 || static_cast<std::size_t>(id) >= traits_.size())
          throw IndexError("generator: trait id " + std::to_string(id) + " out of range [0, " +
                           std::to_string(traits_.size()) + ")");
      ctx.trait_rows = embedding_lookup(trait_emb_, trait_ids);
    }
    return ctx;
  }

  DecodeState<T> init_state(std::size_t batch) const {
    std::size_t h = cfg_.hidden_dim;
    return {Tensor<T>::zeros({batch, h}), Tensor<T>::zeros({batch, h}),
            Tensor<T>::zeros({batch, h}), Tensor<T>::zeros({batch, h})};
  }

  // showtell consumes the reduced image as its first input, before BOS.
  // A no-op for the attention architectures.
  void prime(DecodeState<T>& state, const ImageContext<T>& ctx) const {
    if (cfg_.kind != DecoderKind::showtell) return;
    Tensor<T> x = cfg_.personality_on ? concat<T>({ctx.vec, ctx.trait_rows}, 1) : ctx.vec;
    auto [h, c] = lstm1_.step(x, state.h1, state.c1);
    state.h1 = h;
    state.c1 = c;
  }

  // One decoding step for the whole batch; returns logits [B x V].
  Tensor<T> step(DecodeState<T>& state, const std::vector<int>& prev_ids,
                 const ImageContext<T>& ctx) const {
    if (prev_ids.size() != ctx.batch)
      throw ContractError("generator: " + std::to_string(prev_ids.size()) + " tokens for batch " +
                          std::to_string(ctx.batch));
    Tensor<T> rows = embedding_lookup(word_emb_, prev_ids);
    switch (cfg_.kind) {
      case DecoderKind::showtell: {
        Tensor<T> x = cfg_.personality_on ? concat<T>({rows, ctx.trait_rows}, 1) : rows;
        auto [h, c] = lstm1_.step(x, state.h1, state.c1);
        state.h1 = h;
        state.c1 = c;
        return output(h);
      }
      case DecoderKind::showatttell: {
        Tensor<T> x = cfg_.personality_on ? concat<T>({rows, ctx.trait_rows}, 1) : rows;
        Tensor<T> att = attend_rows(state.h1, ctx);
        auto [h, c] = lstm1_.step(x, state.h1, state.c1, att);
        state.h1 = h;
        state.c1 = c;
        return output(h);
      }
      case DecoderKind::updown: {
        std::vector<Tensor<T>> parts{rows};
        if (cfg_.personality_on) parts.push_back(ctx.trait_rows);
        parts.push_back(ctx.vec);
        parts.push_back(state.h2);
        auto [h1, c1] = lstm1_.step(concat<T>(std::move(parts), 1), state.h1, state.c1);
        Tensor<T> att = attend_rows(h1, ctx);
        std::vector<Tensor<T>> parts2{att, h1};
        if (cfg_.personality_on) parts2.push_back(ctx.trait_rows);
        auto [h2, c2] = lstm2_.step(concat<T>(std::move(parts2), 1), state.h2, state.c2);
        state.h1 = h1;
        state.c1 = c1;
        state.h2 = h2;
        state.c2 = c2;
        return output(h2);
      }
    }
    throw ContractError("generator: unknown decoder kind");
  }

 private:
  Tensor<T> output(Tensor<T> h) const { return add_bias(matmul(h, out_w_), out_b_); }

  // Additive attention per batch row; queries are the rows of h.
  Tensor<T> attend_rows(Tensor<T> h, const ImageContext<T>& ctx) const {
    std::size_t hd = cfg_.hidden_dim;
    std::vector<Tensor<T>> rows;
    for (std::size_t i = 0; i < ctx.batch; ++i) {
      Tensor<T> qa = reshape(matmul(slice(h, 0, i, i + 1), attn_wq_), {hd});
      std::size_t p = ctx.positions[i].dim(0);
      Tensor<T> scores =
          reshape(matmul(tanh(add_bias(ctx.pos_proj[i], qa)), reshape(attn_v_, {hd, 1})), {p});
      Tensor<T> weights = softmax(scores, 0);
      rows.push_back(matmul(reshape(weights, {1, p}), ctx.positions[i]));
    }
    return concat(std::move(rows), 0);
  }

  GenerativeConfig cfg_;
  Vocabulary vocab_;
  TraitTable traits_;
  Tensor<T> word_emb_, trait_emb_, img_w_, img_b_;
  Tensor<T> attn_wq_, attn_wp_, attn_v_;
  detail::LstmCell<T> lstm1_, lstm2_;
  Tensor<T> out_w_, out_b_;
  bool xe_trained_ = false;
};

// Teacher-forced mean per-token negative log-likelihood over wrapped
// sequences (BOS ... EOS, PAD-padded). PAD targets are masked out of both
// the numerator and the token count.
template <typename T>
Tensor<T> xe_loss(Generator<T>& model, const std::vector<std::vector<int>>& wrapped,
                  const std::vector<const std::vector<float>*>& features,
                  const std::vector<int>& trait_ids) {
  if (wrapped.empty() || wrapped.size() != features.size())
    throw ContractError("xe_loss: " + std::to_string(wrapped.size()) + " sequences for " +
                        std::to_string(features.size()) + " images");
  std::size_t b = wrapped.size();
  std::size_t len = 0;
  for (const auto& w : wrapped) {
    if (w.size() < 2) throw ContractError("xe_loss: wrapped sequence under 2 tokens");
    len = std::max(len, w.size());
  }
  ImageContext<T> ctx = model.make_context(features, trait_ids);
  DecodeState<T> state = model.init_state(b);
  model.prime(state, ctx);

  Tensor<T> total = Tensor<T>::zeros({b});
  double n_tokens = 0;
  for (std::size_t t = 1; t < len; ++t) {
    std::vector<int> inputs(b), targets(b);
    std::vector<T> mask(b);
    for (std::size_t i = 0; i < b; ++i) {
      inputs[i] = t - 1 < wrapped[i].size() ? wrapped[i][t - 1] : Vocabulary::kPad;
      targets[i] = t < wrapped[i].size() ? wrapped[i][t] : Vocabulary::kPad;
      mask[i] = targets[i] == Vocabulary::kPad ? T(0) : T(1);
      n_tokens += targets[i] == Vocabulary::kPad ? 0 : 1;
    }
    Tensor<T> lp = log_softmax(model.step(state, inputs, ctx), 1);
    total = add(total, mul(pick(lp, targets), Tensor<T>::from_data({b}, std::move(mask))));
  }
  if (n_tokens == 0) throw ContractError("xe_loss: no unmasked target tokens");
  return scale(sum(total), T(-1) / static_cast<T>(n_tokens));
}

// Differentiable total log-probability of one wrapped sequence.
template <typename T>
Tensor<T> sequence_logprob(Generator<T>& model, const std::vector<int>& wrapped,
                           const std::vector<float>& feature, int trait_id) {
  if (wrapped.size() < 2) throw ContractError("sequence_logprob: wrapped sequence under 2 tokens");
  ImageContext<T> ctx = model.make_context({&feature}, {trait_id});
  DecodeState<T> state = model.init_state(1);
  model.prime(state, ctx);
  Tensor<T> total = Tensor<T>::zeros({1});
  for (std::size_t t = 1; t < wrapped.size(); ++t) {
    Tensor<T> lp = log_softmax(model.step(state, {wrapped[t - 1]}, ctx), 1);
    total = add(total, pick(lp, {wrapped[t]}));
  }
  return reshape(total, {1});
}

struct GenTrainConfig {
  std::size_t batch = 16;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  OptimizerConfig<double> opt{};  // converted to the model's scalar type
};

struct XeLog {
  std::vector<double> batch_loss;  // chronological, recorded before each update
};

namespace detail {

template <typename T>
std::vector<int> resolve_traits(const std::vector<CaptionRecord>& records,
                                const Generator<T>& model) {
  std::vector<int> ids;
  ids.reserve(records.size());
  for (const auto& r : records) {
    int id = model.traits().id_of(r.personality);
    if (id < 0) throw DataError("generator: unknown trait \"" + r.personality + "\"");
    ids.push_back(id);
  }
  return ids;
}

template <typename T>
std::vector<int> wrap_caption(const Generator<T>& model, const std::string& caption) {
  std::vector<std::string> toks = tokenize(caption);
  std::size_t cap = model.config().max_len;
  if (toks.size() > cap) {
    warn("caption of " + std::to_string(toks.size()) + " tokens truncated to " +
         std::to_string(cap));
    toks.resize(cap);
  }
  std::vector<int> ids{Vocabulary::kBos};
  for (int id : model.vocab().encode(toks)) ids.push_back(id);
  ids.push_back(Vocabulary::kEos);
  return ids;
}

}  // namespace detail

template <typename T>
XeLog train_xe(const std::vector<CaptionRecord>& records, const FeatureStore& store,
               Generator<T>& model, const GenTrainConfig& cfg) {
  if (records.empty()) throw DataError("generator: no training records");
  model.check_store(store);
  validate_features_exist(records, store);
  std::vector<int> trait_ids = detail::resolve_traits(records, model);
  std::size_t batch = cfg.batch;
  if (batch < 1) throw ConfigError("generator: batch must be at least 1");
  if (batch > records.size()) {
    warn("generator batch " + std::to_string(batch) + " reduced to corpus size " +
         std::to_string(records.size()));
    batch = records.size();
  }

  std::vector<std::vector<int>> wrapped;
  wrapped.reserve(records.size());
  for (const auto& r : records) wrapped.push_back(detail::wrap_caption(model, r.caption));

  Optimizer<T> opt(model.parameters(), optimizer_config_as<T>(cfg.opt));
  Rng rng(cfg.seed);
  XeLog log;
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i + 1 < order.size(); ++i)
      std::swap(order[i], order[i + rng.index(order.size() - i)]);
    for (std::size_t off = 0; off < order.size(); off += batch) {
      std::size_t hi = std::min(off + batch, order.size());
      std::vector<std::vector<int>> seqs;
      std::vector<const std::vector<float>*> feats;
      std::vector<int> traits;
      for (std::size_t i = off; i < hi; ++i) {
        seqs.push_back(wrapped[order[i]]);
        feats.push_back(&store.feature(records[order[i]].image_id));
        traits.push_back(trait_ids[order[i]]);
      }
      Tape<T> tape;
      TapeScope<T> scope(tape);
      Tensor<T> loss = xe_loss(model, seqs, feats, traits);
      log.batch_loss.push_back(static_cast<double>(loss.item()));
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
    }
  }
  model.set_xe_trained(true);
  return log;
}

struct DecodedCaption {
  std::vector<int> ids;             // emitted word ids, BOS/EOS excluded
  std::vector<std::string> tokens;  // ids rendered through the vocabulary
  double log_prob = 0;              // total, EOS step included when finished
  bool finished = false;            // ended on EOS before the length cap
};

struct DecodeConfig {
  std::size_t beam = 2;
  std::size_t max_len = 16;
};

namespace detail {

template <typename T>
std::vector<std::string> render(const Generator<T>& model, const std::vector<int>& ids) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(model.vocab().token(id));
  return out;
}

}  // namespace detail

// Argmax walk from BOS; ties take the smallest token id.
template <typename T>
DecodedCaption decode_greedy(Generator<T>& model, const std::vector<float>& feature, int trait_id,
                             std::size_t max_len = 16) {
  if (max_len < 3)
    throw ConfigError("decode: max_len must be at least 3, got " + std::to_string(max_len));
  ImageContext<T> ctx = model.make_context({&feature}, {trait_id});
  DecodeState<T> state = model.init_state(1);
  model.prime(state, ctx);
  DecodedCaption out;
  int prev = Vocabulary::kBos;
  for (std::size_t t = 0; t < max_len; ++t) {
    Tensor<T> lp = log_softmax(model.step(state, {prev}, ctx), 1);
    const T* row = lp.data();
    int best = 0;
    for (std::size_t v = 1; v < lp.dim(1); ++v)
      if (row[v] > row[best]) best = static_cast<int>(v);
    out.log_prob += static_cast<double>(row[best]);
    if (best == Vocabulary::kEos) {
      out.finished = true;
      break;
    }
    out.ids.push_back(best);
    prev = best;
  }
  out.tokens = detail::render(model, out.ids);
  return out;
}

// Multinomial draw from the step distribution.
template <typename T>
DecodedCaption decode_sample(Generator<T>& model, const std::vector<float>& feature, int trait_id,
                             Rng& rng, std::size_t max_len = 16) {
  if (max_len < 3)
    throw ConfigError("decode: max_len must be at least 3, got " + std::to_string(max_len));
  ImageContext<T> ctx = model.make_context({&feature}, {trait_id});
  DecodeState<T> state = model.init_state(1);
  model.prime(state, ctx);
  DecodedCaption out;
  int prev = Vocabulary::kBos;
  for (std::size_t t = 0; t < max_len; ++t) {
    Tensor<T> lp = log_softmax(model.step(state, {prev}, ctx), 1);
    const T* row = lp.data();
    double u = rng.uniform(0.0, 1.0);
    double acc = 0;
    int chosen = static_cast<int>(lp.dim(1)) - 1;
    for (std::size_t v = 0; v < lp.dim(1); ++v) {
      acc += std::exp(static_cast<double>(row[v]));
      if (u < acc) {
        chosen = static_cast<int>(v);
        break;
      }
    }
    out.log_prob += static_cast<double>(row[chosen]);
    if (chosen == Vocabulary::kEos) {
      out.finished = true;
      break;
    }
    out.ids.push_back(chosen);
    prev = chosen;
  }
  out.tokens = detail::render(model, out.ids);
  return out;
}

// Length-synchronous beam search. Beams that emit EOS are frozen and keep
// competing on total log-probability. The answer is the best finished
// beam, falling back to the best unfinished one at the length cap. Ties
// break toward the smaller token id, then the earlier beam.
template <typename T>
DecodedCaption beam_search(Generator<T>& model, const std::vector<float>& feature, int trait_id,
                           const DecodeConfig& cfg = {}) {
  if (cfg.beam < 1)
    throw ConfigError("beam_search: beam must be at least 1, got " + std::to_string(cfg.beam));
  if (cfg.max_len < 3)
    throw ConfigError("beam_search: max_len must be at least 3, got " +
                      std::to_string(cfg.max_len));
  struct Beam {
    DecodeState<T> state;
    std::vector<int> ids;
    double lp = 0;
    bool done = false;
  };
  ImageContext<T> ctx = model.make_context({&feature}, {trait_id});
  Beam start;
  start.state = model.init_state(1);
  model.prime(start.state, ctx);
  std::vector<Beam> beams{std::move(start)};

  for (std::size_t t = 0; t < cfg.max_len; ++t) {
    bool any_live = false;
    for (const auto& b : beams) any_live |= !b.done;
    if (!any_live) break;

    // candidate = (lp, parent index, token; -1 marks a frozen beam)
    struct Cand {
      double lp;
      std::size_t parent;
      int token;
    };
    std::vector<Cand> cands;
    std::vector<Tensor<T>> rows(beams.size());
    for (std::size_t i = 0; i < beams.size(); ++i) {
      if (beams[i].done) {
        cands.push_back({beams[i].lp, i, -1});
        continue;
      }
      int prev = beams[i].ids.empty() ? Vocabulary::kBos : beams[i].ids.back();
      DecodeState<T> next = beams[i].state;
      rows[i] = log_softmax(model.step(next, {prev}, ctx), 1);
      beams[i].state = next;
      const T* row = rows[i].data();
      for (std::size_t v = 0; v < rows[i].dim(1); ++v)
        cands.push_back({beams[i].lp + static_cast<double>(row[v]), i, static_cast<int>(v)});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.lp != b.lp) return a.lp > b.lp;
      if (a.token != b.token) return a.token < b.token;
      return a.parent < b.parent;
    });

    std::vector<Beam> next;
    for (const auto& c : cands) {
      if (next.size() == cfg.beam) break;
      if (c.token < 0) {
        next.push_back(beams[c.parent]);
        continue;
      }
      Beam nb;
      nb.state = beams[c.parent].state;
      nb.ids = beams[c.parent].ids;
      nb.lp = c.lp;
      if (c.token == Vocabulary::kEos) {
        nb.done = true;
      } else {
        nb.ids.push_back(c.token);
      }
      next.push_back(std::move(nb));
    }
    beams = std::move(next);
  }

  const Beam* best = nullptr;
  for (const auto& b : beams)
    if (b.done && (!best || b.lp > best->lp)) best = &b;
  if (!best)
    for (const auto& b : beams)
      if (!best || b.lp > best->lp) best = &b;
  DecodedCaption out;
  out.ids = best->ids;
  out.log_prob = best->lp;
  out.finished = best->done;
  out.tokens = detail::render(model, out.ids);
  return out;
}

struct ScstConfig {
  std::size_t batch = 16;  // images per update
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  std::size_t max_len = 16;  // rollout cap
  std::size_t samples_per_image = 1;
  OptimizerConfig<double> opt{};
};

struct ScstLog {
  std::vector<double> batch_loss;    // surrogate loss per update
  std::vector<double> batch_reward;  // mean sampled reward per update
  std::vector<double> mean_reward;   // running mean over all samples so far
};

// Self-critical sequence training: advantage = CIDEr-D(sample) -
// CIDEr-D(greedy), idf from the training references; surrogate loss
// -A * sum log p(sample). Requires a cross-entropy-trained model.
template <typename T>
ScstLog train_scst(const std::vector<CaptionRecord>& records, const FeatureStore& store,
                   Generator<T>& model, const ScstConfig& cfg) {
  if (!model.xe_trained())
    throw ConfigError(
        "self-critical training needs a cross-entropy-trained model; run the xe stage first");
  if (records.empty()) throw DataError("generator: no training records");
  if (cfg.samples_per_image < 1)
    throw ConfigError("generator: samples_per_image must be at least 1");
  if (cfg.max_len < 3)
    throw ConfigError("generator: max_len must be at least 3, got " + std::to_string(cfg.max_len));
  model.check_store(store);
  validate_features_exist(records, store);
  detail::resolve_traits(records, model);

  // one group per (image, personality); its captions are the references
  struct Group {
    std::string image_id;
    int trait_id;
    std::vector<TokenSeq> refs;
  };
  std::vector<Group> groups;
  std::map<std::pair<std::string, std::string>, std::size_t> index;
  for (const auto& r : records) {
    auto key = std::make_pair(r.image_id, r.personality);
    auto it = index.find(key);
    if (it == index.end()) {
      index.emplace(key, groups.size());
      groups.push_back({r.image_id, model.traits().id_of(r.personality), {tokenize(r.caption)}});
    } else {
      groups[it->second].refs.push_back(tokenize(r.caption));
    }
  }
  std::vector<std::vector<TokenSeq>> ref_sets;
  for (const auto& g : groups) ref_sets.push_back(g.refs);
  ReferenceCorpus corpus = ReferenceCorpus::build(ref_sets);

  std::size_t batch = cfg.batch;
  if (batch < 1) throw ConfigError("generator: batch must be at least 1");
  if (batch > groups.size()) {
    warn("generator batch " + std::to_string(batch) + " reduced to " +
         std::to_string(groups.size()) + " distinct images");
    batch = groups.size();
  }

  Optimizer<T> opt(model.parameters(), optimizer_config_as<T>(cfg.opt));
  Rng rng(cfg.seed);
  ScstLog log;
  double reward_sum = 0;
  std::size_t reward_n = 0;
  std::vector<std::size_t> order(groups.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i + 1 < order.size(); ++i)
      std::swap(order[i], order[i + rng.index(order.size() - i)]);
    for (std::size_t off = 0; off < order.size(); off += batch) {
      std::size_t hi = std::min(off + batch, order.size());
      std::vector<std::vector<int>> samples;
      std::vector<const std::vector<float>*> feats;
      std::vector<int> traits;
      std::vector<T> advantages;
      double batch_reward = 0;
      std::size_t batch_n = 0;
      for (std::size_t i = off; i < hi; ++i) {
        const Group& g = groups[order[i]];
        const std::vector<float>& feat = store.feature(g.image_id);
        DecodedCaption greedy = decode_greedy(model, feat, g.trait_id, cfg.max_len);
        double baseline = cider_d(greedy.tokens, g.refs, corpus);
        for (std::size_t s = 0; s < cfg.samples_per_image; ++s) {
          DecodedCaption sample = decode_sample(model, feat, g.trait_id, rng, cfg.max_len);
          double reward = cider_d(sample.tokens, g.refs, corpus);
          reward_sum += reward;
          ++reward_n;
          batch_reward += reward;
          ++batch_n;
          std::vector<int> wrapped{Vocabulary::kBos};
          for (int id : sample.ids) wrapped.push_back(id);
          if (sample.finished) wrapped.push_back(Vocabulary::kEos);
          if (wrapped.size() < 2) wrapped.push_back(Vocabulary::kEos);
          samples.push_back(std::move(wrapped));
          feats.push_back(&feat);
          traits.push_back(g.trait_id);
          advantages.push_back(static_cast<T>(reward - baseline));
        }
      }

      Tape<T> tape;
      TapeScope<T> scope(tape);
      ImageContext<T> ctx = model.make_context(feats, traits);
      DecodeState<T> state = model.init_state(samples.size());
      model.prime(state, ctx);
      std::size_t len = 0;
      for (const auto& s : samples) len = std::max(len, s.size());
      Tensor<T> total = Tensor<T>::zeros({samples.size()});
      for (std::size_t t = 1; t < len; ++t) {
        std::vector<int> inputs(samples.size()), targets(samples.size());
        std::vector<T> mask(samples.size());
        for (std::size_t i = 0; i < samples.size(); ++i) {
          inputs[i] = t - 1 < samples[i].size() ? samples[i][t - 1] : Vocabulary::kPad;
          targets[i] = t < samples[i].size() ? samples[i][t] : Vocabulary::kPad;
          mask[i] = t < samples[i].size() ? T(1) : T(0);
        }
        Tensor<T> lp = log_softmax(model.step(state, inputs, ctx), 1);
        total = add(total, mul(pick(lp, targets),
                               Tensor<T>::from_data({samples.size()}, std::move(mask))));
      }
      std::size_t n = advantages.size();
      std::vector<T> weights(n);
      for (std::size_t i = 0; i < n; ++i) weights[i] = -advantages[i];
      Tensor<T> loss = mean(mul(total, Tensor<T>::from_data({n}, std::move(weights))));
      log.batch_loss.push_back(static_cast<double>(loss.item()));
      log.batch_reward.push_back(batch_reward / static_cast<double>(batch_n));
      log.mean_reward.push_back(reward_sum / static_cast<double>(reward_n));
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
    }
  }
  return log;
}

// The checkpoint carries every weight plus a flag recording that the
// cross-entropy stage ran, so the self-critical stage can refuse models
// that skipped it.
inline NamedTensors generator_checkpoint_tensors(Generator<float>& model) {
  NamedTensors out = model.named_parameters();
  out.emplace_back("meta.xe_done",
                   Tensor<float>::from_data({1}, {model.xe_trained() ? 1.0f : 0.0f}));
  return out;
}

inline void save_generator(const std::string& path, Generator<float>& model) {
  save_checkpoint(path, generator_checkpoint_tensors(model));
}

inline void load_generator(const std::string& path, Generator<float>& model) {
  NamedTensors expected = generator_checkpoint_tensors(model);
  load_checkpoint(path, expected);
  model.set_xe_trained(expected.back().second.values()[0] != 0.0f);
}

}  // namespace percap
