#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
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

struct ClassifierConfig {
  TextEncoderConfig text;

  void validate() const { text.validate(); }
};

// Caption -> trait prediction: the text encoder followed by a T-way
// linear head and softmax over the trait table.
template <typename T>
class TraitClassifier {
 public:
  TraitClassifier() = default;

  TraitClassifier(ClassifierConfig cfg, const Vocabulary& vocab, const TraitTable& traits,
                  Rng& rng)
      : cfg_(cfg), traits_(traits), text_(cfg.text, vocab, rng) {
    if (traits_.size() == 0) throw ConfigError("classifier: trait table is empty");
    std::size_t d = text_.config().d_model;
    head_w_ = init_matrix<T>(d, traits_.size(), rng).set_requires_grad(true);
    head_b_ = init_bias<T>(traits_.size()).set_requires_grad(true);
  }

  const ClassifierConfig& config() const { return cfg_; }
  const TraitTable& traits() const { return traits_; }
  TextEncoder<T>& text() { return text_; }
  const TextEncoder<T>& text() const { return text_; }

  std::size_t head_param_count() const { return head_w_.size() + head_b_.size(); }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() {
    auto out = text_.named_parameters("text.");
    out.emplace_back("head.w", head_w_);
    out.emplace_back("head.b", head_b_);
    return out;
  }

  std::vector<Tensor<T>> parameters() {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  // Trait scores [B x T] over pre-encoded caption rows [B x d_model].
  Tensor<T> head(Tensor<T> encoded) const {
    return add_bias(matmul(std::move(encoded), head_w_), head_b_);
  }

  // Unnormalized trait scores [T] for one caption.
  Tensor<T> logits(const std::vector<std::string>& tokens) const {
    if (tokens.empty()) throw ContractError("classifier: empty caption");
    std::size_t d = text_.config().d_model;
    return reshape(head(reshape(text_.encode(tokens), {1, d})), {traits_.size()});
  }

 private:
  ClassifierConfig cfg_;
  TraitTable traits_;
  TextEncoder<T> text_;
  Tensor<T> head_w_;  // [d_model x T]
  Tensor<T> head_b_;  // [T]
};

struct Classification {
  int trait_id = 0;
  std::vector<double> probs;  // sums to 1
};

// Softmax over the trait scores; ties take the smallest trait id.
template <typename T>
Classification classify(const TraitClassifier<T>& model, const std::string& caption) {
  std::vector<std::string> tokens = tokenize(caption);
  if (tokens.empty()) throw ContractError("classifier: empty caption");
  Tensor<T> p = softmax(model.logits(tokens), 0);
  Classification out;
  const T* row = p.data();
  out.probs.assign(row, row + p.size());
  for (std::size_t i = 1; i < p.size(); ++i)
    if (row[i] > row[out.trait_id]) out.trait_id = static_cast<int>(i);
  return out;
}

// Fraction of records whose predicted trait matches the gold one.
template <typename T>
double accuracy(const TraitClassifier<T>& model, const std::vector<CaptionRecord>& records) {
  if (records.empty()) throw ContractError("classifier: no records to score");
  std::size_t hits = 0;
  for (const auto& r : records) {
    int gold = model.traits().id_of(r.personality);
    if (gold < 0) throw DataError("classifier: unknown trait \"" + r.personality + "\"");
    if (classify(model, r.caption).trait_id == gold) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

struct ClassifierTrainConfig {
  std::size_t batch = 16;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  OptimizerConfig<double> opt{};
};

struct ClassifierLog {
  std::vector<double> batch_loss;    // chronological, recorded before each update
  std::vector<double> dev_accuracy;  // one entry per epoch when validation records exist
};

// Cross-entropy training on the train split; validation accuracy is
// evaluated after each epoch when the records include a valid split.
template <typename T>
ClassifierLog train_trait_classifier(const std::vector<CaptionRecord>& records,
                                     TraitClassifier<T>& model,
                                     const ClassifierTrainConfig& cfg) {
  std::vector<const CaptionRecord*> train;
  std::vector<CaptionRecord> dev;
  for (const auto& r : records) {
    if (r.split == Split::train) train.push_back(&r);
    if (r.split == Split::valid) dev.push_back(r);
  }
  if (train.empty()) throw DataError("classifier: no training records");

  std::vector<int> golds;
  std::vector<std::vector<std::string>> tokens;
  for (const auto* r : train) {
    int id = model.traits().id_of(r->personality);
    if (id < 0) throw DataError("classifier: unknown trait \"" + r->personality + "\"");
    golds.push_back(id);
    tokens.push_back(tokenize(r->caption));
    if (tokens.back().empty())
      throw DataError("classifier: empty caption for image " + r->image_id);
  }

  std::size_t batch = cfg.batch;
  if (batch < 1) throw ConfigError("classifier: batch must be at least 1");
  if (batch > train.size()) {
    warn("classifier batch " + std::to_string(batch) + " reduced to corpus size " +
         std::to_string(train.size()));
    batch = train.size();
  }

  Optimizer<T> opt(model.parameters(), optimizer_config_as<T>(cfg.opt));
  Rng rng(cfg.seed);
  ClassifierLog log;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i + 1 < order.size(); ++i)
      std::swap(order[i], order[i + rng.index(order.size() - i)]);
    for (std::size_t off = 0; off < order.size(); off += batch) {
      std::size_t hi = std::min(off + batch, order.size());
      Tape<T> tape;
      TapeScope<T> scope(tape);
      std::vector<Tensor<T>> rows;
      std::vector<int> ids;
      for (std::size_t i = off; i < hi; ++i) {
        rows.push_back(model.text().encode(tokens[order[i]]));
        ids.push_back(golds[order[i]]);
      }
      Tensor<T> logits = model.head(stack_rows(std::move(rows)));
      Tensor<T> loss = scale(mean(pick(log_softmax(logits, 1), ids)), T(-1));
      log.batch_loss.push_back(static_cast<double>(loss.item()));
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
    }
    if (!dev.empty()) log.dev_accuracy.push_back(accuracy(model, dev));
  }
  return log;
}

// Per polarity class: how many of the table's traits the classifier
// predicted at least once over the caption set. Set semantics, so the
// report is duplication-invariant and monotone under union.
struct CoverageClass {
  std::size_t covered = 0;
  std::size_t total = 0;
  double fraction = 0;  // 0 when the table has no traits of the class
};

struct CoverageReport {
  CoverageClass positive, neutral, negative;
};

template <typename T>
CoverageReport trait_coverage(const std::vector<std::string>& captions,
                              const TraitClassifier<T>& model) {
  if (captions.empty()) throw ContractError("trait_coverage: empty caption set");
  std::set<int> seen;
  for (const auto& c : captions) seen.insert(classify(model, c).trait_id);

  CoverageReport report;
  auto slot = [&report](Polarity p) -> CoverageClass& {
    switch (p) {
      case Polarity::positive: return report.positive;
      case Polarity::neutral: return report.neutral;
      case Polarity::negative: return report.negative;
    }
    throw ContractError("trait_coverage: invalid polarity");
  };
  const TraitTable& table = model.traits();
  for (std::size_t id = 0; id < table.size(); ++id) {
    CoverageClass& c = slot(table.trait(id).polarity);
    ++c.total;
    if (seen.count(static_cast<int>(id))) ++c.covered;
  }
  for (CoverageClass* c : {&report.positive, &report.neutral, &report.negative})
    c->fraction = c->total == 0
                      ? 0.0
                      : static_cast<double>(c->covered) / static_cast<double>(c->total);
  return report;
}

}  // namespace percap
