#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <thread>
#include <unordered_set>
#include <utility>
#include <vector>

#include "percap/data.hpp"
#include "percap/encoder.hpp"
#include "percap/error.hpp"
#include "percap/log.hpp"
#include "percap/rng.hpp"
#include "percap/tensor.hpp"
#include "percap/text.hpp"
#include "percap/traits.hpp"

namespace percap {

struct RetrievalConfig {
  std::size_t feature_dim = 64;
  std::size_t joint_dim = 500;
  bool personality_on = true;
  TextEncoderConfig text{};
};

// Joint-space retrieval model: image MLP, trait embedding table, and a
// text encoder bridged into the joint space by a two-layer projection.
// Score of a (image, trait, caption) triple is (r_I + r_P) . r_C.
template <typename T>
class TransResNet {
 public:
  TransResNet() = default;

  TransResNet(RetrievalConfig cfg, const Vocabulary& vocab, const TraitTable& traits, Rng& rng)
      : cfg_(cfg), traits_(traits) {
    if (cfg_.feature_dim == 0 || cfg_.joint_dim == 0)
      throw ConfigError("retrieval: feature_dim and joint_dim must be positive");
    if (traits_.size() == 0) throw ConfigError("retrieval: trait table is empty");
    text_ = TextEncoder<T>(cfg_.text, vocab, rng);
    std::size_t f = cfg_.feature_dim;
    std::size_t j = cfg_.joint_dim;
    std::size_t e = text_.config().d_model;
    iw1_ = init_matrix<T>(f, j, rng).set_requires_grad(true);
    ib1_ = init_bias<T>(j).set_requires_grad(true);
    iw2_ = init_matrix<T>(j, j, rng).set_requires_grad(true);
    ib2_ = init_bias<T>(j).set_requires_grad(true);
    iw3_ = init_matrix<T>(j, j, rng).set_requires_grad(true);
    ib3_ = init_bias<T>(j).set_requires_grad(true);
    trait_emb_ = init_embedding<T>(traits_.size(), j, rng).set_requires_grad(true);
    cw1_ = init_matrix<T>(e, j, rng).set_requires_grad(true);
    cb1_ = init_bias<T>(j).set_requires_grad(true);
    cw2_ = init_matrix<T>(j, j, rng).set_requires_grad(true);
    cb2_ = init_bias<T>(j).set_requires_grad(true);
  }

  // [B x feature_dim] rows -> [B x joint_dim]
  Tensor<T> encode_image_rows(Tensor<T> feats) const {
    if (feats.rank() != 2 || feats.dim(1) != cfg_.feature_dim)
      throw ConfigError("retrieval: image features " + shape_str(feats.shape()) +
                        " do not match feature_dim " + std::to_string(cfg_.feature_dim));
    Tensor<T> h = relu(add_bias(matmul(feats, iw1_), ib1_));
    h = relu(add_bias(matmul(h, iw2_), ib2_));
    return add_bias(matmul(h, iw3_), ib3_);
  }

  Tensor<T> encode_image(const std::vector<float>& feature) const {
    Tensor<T> x = Tensor<T>::zeros({1, feature.size()});
    for (std::size_t i = 0; i < feature.size(); ++i) x.data()[i] = static_cast<T>(feature[i]);
    return reshape(encode_image_rows(x), {cfg_.joint_dim});
  }

  // Zero vector when the personality side is ablated away.
  Tensor<T> encode_personality(int trait_id) const {
    if (trait_id < 0 || static_cast<std::size_t>(trait_id) >= traits_.size())
      throw IndexError("retrieval: trait id " + std::to_string(trait_id) + " outside [0, " +
                       std::to_string(traits_.size()) + ")");
    if (!cfg_.personality_on) return Tensor<T>::zeros({cfg_.joint_dim});
    return reshape(embedding_lookup(trait_emb_, {trait_id}), {cfg_.joint_dim});
  }

  Tensor<T> encode_personality_rows(const std::vector<int>& trait_ids) const {
    for (int id : trait_ids)
      if (id < 0 || static_cast<std::size_t>(id) >= traits_.size())
        throw IndexError("retrieval: trait id " + std::to_string(id) + " outside [0, " +
                         std::to_string(traits_.size()) + ")");
    if (!cfg_.personality_on) return Tensor<T>::zeros({trait_ids.size(), cfg_.joint_dim});
    return embedding_lookup(trait_emb_, trait_ids);
  }

  Tensor<T> encode_caption(const std::vector<std::string>& tokens) const {
    Tensor<T> v = text_.encode(tokens);
    Tensor<T> x = reshape(v, {1, v.size()});
    x = relu(add_bias(matmul(x, cw1_), cb1_));
    x = add_bias(matmul(x, cw2_), cb2_);
    return reshape(x, {cfg_.joint_dim});
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("image.w1", iw1_);
    out.emplace_back("image.b1", ib1_);
    out.emplace_back("image.w2", iw2_);
    out.emplace_back("image.b2", ib2_);
    out.emplace_back("image.w3", iw3_);
    out.emplace_back("image.b3", ib3_);
    out.emplace_back("trait_emb", trait_emb_);
    out.emplace_back("caption.w1", cw1_);
    out.emplace_back("caption.b1", cb1_);
    out.emplace_back("caption.w2", cw2_);
    out.emplace_back("caption.b2", cb2_);
    for (auto& [name, t] : text_.named_parameters("text.")) out.emplace_back(name, t);
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  const RetrievalConfig& config() const { return cfg_; }
  const TraitTable& traits() const { return traits_; }
  TextEncoder<T>& text() { return text_; }
  const TextEncoder<T>& text() const { return text_; }
  Tensor<T> trait_table_weights() const { return trait_emb_; }

 private:
  RetrievalConfig cfg_;
  TraitTable traits_;
  TextEncoder<T> text_;
  Tensor<T> iw1_, ib1_, iw2_, ib2_, iw3_, ib3_;
  Tensor<T> trait_emb_;
  Tensor<T> cw1_, cb1_, cw2_, cb2_;
};

template <typename T>
Tensor<T> score(Tensor<T> r_i, Tensor<T> r_p, Tensor<T> r_c) {
  return dot(add(r_i, r_p), r_c);
}

// ---------------------------------------------------------------------------
// training

struct RetrievalTrainConfig {
  std::size_t batch = 500;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  std::size_t frozen_epochs = 1;  // text encoder frozen phase when pretrain mode is full
  OptimizerConfig<double> opt{};  // converted to the model's scalar type
};

struct TrainLog {
  std::vector<double> batch_loss;  // chronological, recorded before each update
};

namespace detail {

template <typename T>
Tensor<T> feature_rows(const std::vector<const std::vector<float>*>& rows) {
  Tensor<T> out = Tensor<T>::zeros({rows.size(), rows[0]->size()});
  T* p = out.data();
  for (const auto* row : rows)
    for (float v : *row) *p++ = static_cast<T>(v);
  return out;
}

}  // namespace detail

// In-batch negatives: for batch items i, the loss is the mean over i of
// -log softmax_j((r_Ii + r_Pi) . r_Cj) at j = i.
template <typename T>
TrainLog train_retrieval(const std::vector<CaptionRecord>& records, const FeatureStore& store,
                         TransResNet<T>& model, const RetrievalTrainConfig& cfg) {
  if (records.empty()) throw DataError("retrieval training: no records");
  validate_features_exist(records, store);
  std::vector<int> trait_ids(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    trait_ids[i] = model.traits().id_of(records[i].personality);
    if (trait_ids[i] < 0)
      throw DataError("retrieval training: unknown trait '" + records[i].personality + "'");
  }
  std::size_t batch = cfg.batch;
  if (batch > records.size()) {
    warn("retrieval batch " + std::to_string(batch) + " reduced to corpus size " +
         std::to_string(records.size()));
    batch = records.size();
  }
  if (batch < 2) throw ConfigError("retrieval training: batch must be at least 2");

  Rng rng(cfg.seed);
  OptimizerConfig<T> ocfg;
  ocfg.kind = cfg.opt.kind;
  ocfg.lr = static_cast<T>(cfg.opt.lr);
  ocfg.beta1 = static_cast<T>(cfg.opt.beta1);
  ocfg.beta2 = static_cast<T>(cfg.opt.beta2);
  ocfg.eps = static_cast<T>(cfg.opt.eps);
  ocfg.clip = static_cast<T>(cfg.opt.clip);
  Optimizer<T> opt(model.parameters(), ocfg);

  bool staged = model.text().config().pretrain == PretrainMode::full;
  if (staged && cfg.frozen_epochs > 0) model.text().set_trainable(false);

  TrainLog log;
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (staged && epoch == cfg.frozen_epochs) model.text().set_trainable(true);
    for (std::size_t i = 0; i + 1 < order.size(); ++i)
      std::swap(order[i], order[i + rng.index(order.size() - i)]);
    for (std::size_t start = 0; start + 1 < order.size(); start += batch) {
      std::size_t b = std::min(batch, order.size() - start);
      if (b < 2) break;

      std::unordered_set<std::string> seen;
      std::size_t dups = 0;
      for (std::size_t i = 0; i < b; ++i)
        if (!seen.insert(records[order[start + i]].caption).second) ++dups;
      if (dups)
        warn("retrieval batch at offset " + std::to_string(start) + " has " +
             std::to_string(dups) + " duplicate captions (label noise)");

      Tape<T> tape;
      TapeScope<T> scope(tape);
      std::vector<const std::vector<float>*> feats(b);
      std::vector<int> ids(b);
      std::vector<Tensor<T>> caps(b);
      for (std::size_t i = 0; i < b; ++i) {
        const auto& rec = records[order[start + i]];
        feats[i] = &store.feature(rec.image_id);
        ids[i] = trait_ids[order[start + i]];
        caps[i] = model.encode_caption(tokenize(rec.caption));
      }
      Tensor<T> q = add(model.encode_image_rows(detail::feature_rows<T>(feats)),
                        model.encode_personality_rows(ids));
      Tensor<T> s = matmul(q, transpose(stack_rows(caps)));
      std::vector<int> diag(b);
      std::iota(diag.begin(), diag.end(), 0);
      Tensor<T> loss = scale(mean(pick(log_softmax(s, 1), diag)), T(-1));
      log.batch_loss.push_back(static_cast<double>(loss.item()));
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
    }
  }
  if (staged && cfg.frozen_epochs >= cfg.epochs) model.text().set_trainable(true);
  return log;
}

// ---------------------------------------------------------------------------
// ranking

struct RankedQuery {
  std::vector<std::size_t> order;  // candidate indices, best first
  std::vector<double> scores;     // aligned with order
  std::size_t true_rank = 0;      // 1-based rank of the best true label
};

struct RankingResult {
  double r_at_1 = 0, r_at_5 = 0, r_at_10 = 0;
  double median_rank = 0;
  std::vector<RankedQuery> queries;
};

namespace detail {

// Descending score, ties by ascending candidate index.
inline std::vector<std::size_t> order_by_score(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  return order;
}

inline RankedQuery make_ranked(std::vector<double> scores,
                               const std::vector<std::size_t>& true_indices) {
  RankedQuery q;
  q.order = order_by_score(scores);
  q.scores.reserve(scores.size());
  for (std::size_t idx : q.order) q.scores.push_back(scores[idx]);
  std::vector<char> is_true(scores.size(), 0);
  for (std::size_t t : true_indices) is_true[t] = 1;
  for (std::size_t pos = 0; pos < q.order.size(); ++pos)
    if (is_true[q.order[pos]]) {
      q.true_rank = pos + 1;
      break;
    }
  return q;
}

inline void aggregate_ranks(RankingResult& result) {
  std::vector<std::size_t> ranks;
  ranks.reserve(result.queries.size());
  for (const auto& q : result.queries) ranks.push_back(q.true_rank);
  double n = static_cast<double>(ranks.size());
  result.r_at_1 = std::count_if(ranks.begin(), ranks.end(), [](std::size_t r) { return r <= 1; }) / n;
  result.r_at_5 = std::count_if(ranks.begin(), ranks.end(), [](std::size_t r) { return r <= 5; }) / n;
  result.r_at_10 =
      std::count_if(ranks.begin(), ranks.end(), [](std::size_t r) { return r <= 10; }) / n;
  std::sort(ranks.begin(), ranks.end());
  std::size_t m = ranks.size();
  result.median_rank = m % 2 ? static_cast<double>(ranks[m / 2])
                             : (static_cast<double>(ranks[m / 2 - 1]) +
                                static_cast<double>(ranks[m / 2])) /
                                   2.0;
}

}  // namespace detail

// Scores every candidate caption for one (image, trait) query and ranks
// them. true_indices marks which candidates count as correct.
template <typename T>
RankedQuery rank_candidates(const std::vector<float>& feature, int trait_id,
                            const std::vector<std::vector<std::string>>& candidates,
                            const std::vector<std::size_t>& true_indices,
                            const TransResNet<T>& model) {
  if (candidates.empty()) throw ContractError("rank_candidates: empty candidate list");
  if (true_indices.empty())
    throw DataError("rank_candidates: no true label among the candidates");
  for (std::size_t t : true_indices)
    if (t >= candidates.size())
      throw ContractError("rank_candidates: true index " + std::to_string(t) + " out of range");
  Tensor<T> q = add(model.encode_image(feature), model.encode_personality(trait_id));
  std::vector<double> scores(candidates.size());
  for (std::size_t c = 0; c < candidates.size(); ++c)
    scores[c] = static_cast<double>(dot(q, model.encode_caption(candidates[c])).item());
  return detail::make_ranked(std::move(scores), true_indices);
}

struct RecallConfig {
  std::size_t num_candidates = 500;  // true labels + sampled distractors
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

// Ranking evaluation over a test corpus. Queries are (image, personality)
// groups; candidates are that query's true captions plus distractors
// sampled from the other test captions. Candidate sets are drawn up
// front from one seeded stream, so results do not depend on threads.
template <typename T>
RankingResult eval_recall(const std::vector<CaptionRecord>& test_records,
                          const FeatureStore& store, const TransResNet<T>& model,
                          const RecallConfig& cfg) {
  if (test_records.empty()) throw DataError("recall evaluation: no records");
  validate_features_exist(test_records, store);

  struct Query {
    std::string image_id;
    int trait_id;
    std::vector<std::size_t> true_pool;  // indices into test_records
  };
  std::vector<Query> queries;
  std::map<std::pair<std::string, std::string>, std::size_t> index;
  for (std::size_t i = 0; i < test_records.size(); ++i) {
    const auto& rec = test_records[i];
    int trait_id = model.traits().id_of(rec.personality);
    if (trait_id < 0)
      throw DataError("recall evaluation: unknown trait '" + rec.personality + "'");
    auto key = std::make_pair(rec.image_id, rec.personality);
    auto it = index.find(key);
    if (it == index.end()) {
      index.emplace(key, queries.size());
      queries.push_back({rec.image_id, trait_id, {i}});
    } else {
      queries[it->second].true_pool.push_back(i);
    }
  }

  std::size_t pool = test_records.size();
  std::size_t num_candidates = cfg.num_candidates;
  if (num_candidates > pool) {
    warn("recall candidate count " + std::to_string(num_candidates) +
         " reduced to test-pool size " + std::to_string(pool));
    num_candidates = pool;
  }
  if (num_candidates < 1) throw ConfigError("recall evaluation: num_candidates must be positive");

  // candidate sets drawn up front: true labels first, then distractors
  Rng rng(cfg.seed);
  std::vector<std::vector<std::size_t>> candidate_sets(queries.size());
  std::vector<std::vector<std::size_t>> true_indices(queries.size());
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const auto& q = queries[qi];
    std::vector<char> own(pool, 0);
    for (std::size_t t : q.true_pool) own[t] = 1;
    std::vector<std::size_t> others;
    others.reserve(pool - q.true_pool.size());
    for (std::size_t i = 0; i < pool; ++i)
      if (!own[i]) others.push_back(i);
    std::size_t want = num_candidates > q.true_pool.size()
                           ? std::min(num_candidates - q.true_pool.size(), others.size())
                           : 0;
    for (std::size_t i = 0; i < want; ++i)
      std::swap(others[i], others[i + rng.index(others.size() - i)]);
    auto& set = candidate_sets[qi];
    set = q.true_pool;
    set.insert(set.end(), others.begin(), others.begin() + static_cast<std::ptrdiff_t>(want));
    true_indices[qi].resize(q.true_pool.size());
    std::iota(true_indices[qi].begin(), true_indices[qi].end(), 0);
  }

  // each caption encoded once, reused across queries
  std::vector<std::vector<T>> caption_vecs(pool);
  auto encode_range = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i)
      caption_vecs[i] = model.encode_caption(tokenize(test_records[i].caption)).values();
  };
  RankingResult result;
  result.queries.resize(queries.size());
  auto score_range = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t qi = lo; qi < hi; ++qi) {
      const auto& q = queries[qi];
      Tensor<T> qv =
          add(model.encode_image(store.feature(q.image_id)), model.encode_personality(q.trait_id));
      const T* pq = qv.data();
      std::vector<double> scores(candidate_sets[qi].size());
      for (std::size_t c = 0; c < candidate_sets[qi].size(); ++c) {
        const auto& cv = caption_vecs[candidate_sets[qi][c]];
        T acc = T(0);
        for (std::size_t k = 0; k < cv.size(); ++k) acc += pq[k] * cv[k];
        scores[c] = static_cast<double>(acc);
      }
      result.queries[qi] = detail::make_ranked(std::move(scores), true_indices[qi]);
    }
  };

  std::size_t threads = std::max<std::size_t>(1, cfg.threads);
  if (threads == 1) {
    encode_range(0, pool);
    score_range(0, queries.size());
  } else {
    auto parallel = [&](std::size_t n, auto&& fn) {
      std::vector<std::thread> pool_threads;
      std::size_t chunk = (n + threads - 1) / threads;
      for (std::size_t t = 0; t < threads && t * chunk < n; ++t)
        pool_threads.emplace_back(fn, t * chunk, std::min(n, (t + 1) * chunk));
      for (auto& th : pool_threads) th.join();
    };
    parallel(pool, encode_range);
    parallel(queries.size(), score_range);
  }
  detail::aggregate_ranks(result);
  return result;
}

}  // namespace percap
