#include "percap/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <unordered_set>

#include "percap/error.hpp"

namespace percap {

namespace {

constexpr char kSep = '\x1f';

std::unordered_map<std::string, std::size_t> count_ngrams(const TokenSeq& toks, int order) {
  std::unordered_map<std::string, std::size_t> counts;
  if (toks.size() < static_cast<std::size_t>(order)) return counts;
  for (std::size_t i = 0; i + order <= toks.size(); ++i) ++counts[ngram_key(toks, i, order)];
  return counts;
}

std::size_t lcs_len(const TokenSeq& a, const TokenSeq& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

std::string ngram_key(const TokenSeq& tokens, std::size_t start, int order) {
  std::string key;
  for (int k = 0; k < order; ++k) {
    if (k) key += kSep;
    key += tokens[start + k];
  }
  return key;
}

ReferenceCorpus ReferenceCorpus::build(const std::vector<std::vector<TokenSeq>>& images) {
  ReferenceCorpus c;
  c.num_images_ = images.size();
  for (const auto& refs : images) {
    std::array<std::unordered_set<std::string>, kMaxOrder> seen;
    for (const auto& ref : refs)
      for (int order = 1; order <= kMaxOrder; ++order)
        for (std::size_t i = 0; i + order <= ref.size(); ++i)
          seen[order - 1].insert(ngram_key(ref, i, order));
    for (int order = 1; order <= kMaxOrder; ++order)
      for (const auto& key : seen[order - 1]) ++c.df_[order - 1][key];
  }
  return c;
}

std::size_t ReferenceCorpus::df(const std::string& key, int order) const {
  const auto& m = df_[order - 1];
  auto it = m.find(key);
  return it == m.end() ? 0 : it->second;
}

std::array<double, 4> bleu(const std::vector<TokenSeq>& candidates,
                           const std::vector<std::vector<TokenSeq>>& references) {
  if (candidates.size() != references.size())
    throw ContractError("bleu: " + std::to_string(candidates.size()) + " candidates vs " +
                        std::to_string(references.size()) + " reference sets");
  constexpr int n_max = 4;
  std::array<std::size_t, n_max> clipped{}, total{};
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const TokenSeq& cand = candidates[i];
    for (int n = 1; n <= n_max; ++n) {
      auto ccnt = count_ngrams(cand, n);
      if (cand.size() + 1 > static_cast<std::size_t>(n)) total[n - 1] += cand.size() - n + 1;
      std::unordered_map<std::string, std::size_t> max_ref;
      for (const auto& ref : references[i])
        for (const auto& [g, k] : count_ngrams(ref, n)) max_ref[g] = std::max(max_ref[g], k);
      for (const auto& [g, k] : ccnt) {
        auto it = max_ref.find(g);
        if (it != max_ref.end()) clipped[n - 1] += std::min(k, it->second);
      }
    }
  }

  std::size_t c_total = 0, r_total = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    std::size_t clen = candidates[i].size();
    c_total += clen;
    std::size_t best_len = 0;
    long best_dist = -1;
    for (const auto& ref : references[i]) {
      long dist = std::labs(static_cast<long>(ref.size()) - static_cast<long>(clen));
      if (best_dist < 0 || dist < best_dist || (dist == best_dist && ref.size() < best_len)) {
        best_dist = dist;
        best_len = ref.size();
      }
    }
    r_total += best_len;
  }

  std::array<double, 4> out{};
  if (c_total == 0) return out;
  double bp = c_total > r_total
                  ? 1.0
                  : std::exp(1.0 - static_cast<double>(r_total) / static_cast<double>(c_total));
  for (int n = 1; n <= n_max; ++n) {
    double log_sum = 0;
    bool ok = true;
    for (int k = 1; k <= n; ++k) {
      if (clipped[k - 1] == 0 || total[k - 1] == 0) {
        ok = false;
        break;
      }
      log_sum += std::log(static_cast<double>(clipped[k - 1]) / static_cast<double>(total[k - 1]));
    }
    out[n - 1] = ok ? bp * std::exp(log_sum / n) : 0.0;
  }
  return out;
}

double rouge_l(const TokenSeq& candidate, const std::vector<TokenSeq>& references, double beta) {
  double best = 0;
  for (const auto& ref : references) {
    if (candidate.empty() || ref.empty()) continue;
    std::size_t l = lcs_len(candidate, ref);
    if (l == 0) continue;
    double p = static_cast<double>(l) / static_cast<double>(candidate.size());
    double r = static_cast<double>(l) / static_cast<double>(ref.size());
    double f = (1 + beta * beta) * p * r / (r + beta * beta * p);
    best = std::max(best, f);
  }
  return best;
}

double cider_d(const TokenSeq& candidate, const std::vector<TokenSeq>& references,
               const ReferenceCorpus& corpus, double sigma) {
  constexpr int n_max = ReferenceCorpus::kMaxOrder;
  if (references.empty()) return 0.0;
  double log_n = std::log(static_cast<double>(corpus.num_images()));

  std::array<std::unordered_set<std::string>, n_max> own;
  for (const auto& ref : references)
    for (int order = 1; order <= n_max; ++order)
      for (std::size_t i = 0; i + order <= ref.size(); ++i)
        own[order - 1].insert(ngram_key(ref, i, order));

  auto weight = [&](const std::string& g, int order) -> double {
    std::size_t d = corpus.df(g, order);
    if (d == 0) {
      if (own[order - 1].count(g)) d = 1;
      else return 0.0;
    }
    return log_n - std::log(static_cast<double>(d));
  };

  double score = 0;
  for (int order = 1; order <= n_max; ++order) {
    auto ccnt = count_ngrams(candidate, order);
    double norm_c = 0;
    for (const auto& [g, k] : ccnt) {
      double w = static_cast<double>(k) * weight(g, order);
      norm_c += w * w;
    }
    norm_c = std::sqrt(norm_c);

    double acc = 0;
    for (const auto& ref : references) {
      auto rcnt = count_ngrams(ref, order);
      double norm_r = 0;
      for (const auto& [g, k] : rcnt) {
        double w = static_cast<double>(k) * weight(g, order);
        norm_r += w * w;
      }
      norm_r = std::sqrt(norm_r);
      double dot_cr = 0;
      for (const auto& [g, k] : ccnt) {
        auto it = rcnt.find(g);
        if (it == rcnt.end()) continue;
        double w = weight(g, order);
        dot_cr += static_cast<double>(std::min(k, it->second)) * w *
                  static_cast<double>(it->second) * w;
      }
      double sim = (norm_c > 0 && norm_r > 0) ? dot_cr / (norm_c * norm_r) : 0.0;
      double delta =
          static_cast<double>(candidate.size()) - static_cast<double>(ref.size());
      double penalty = std::exp(-(delta * delta) / (2.0 * sigma * sigma));
      acc += 10.0 * penalty * sim;
    }
    score += acc / static_cast<double>(references.size());
  }
  return score / n_max;
}

MetricReport evaluate_captions(const std::vector<std::pair<std::string, TokenSeq>>& predictions,
                               const std::map<std::string, std::vector<TokenSeq>>& refs_by_image) {
  std::map<std::string, TokenSeq> by_id;
  std::string unknown;
  for (const auto& [id, toks] : predictions) {
    if (!refs_by_image.count(id)) unknown += (unknown.empty() ? "" : ", ") + id;
    by_id[id] = toks;
  }
  if (!unknown.empty())
    throw DataError("evaluate_captions: predictions for unknown images: " + unknown);
  std::string missing;
  for (const auto& [id, refs] : refs_by_image)
    if (!by_id.count(id)) missing += (missing.empty() ? "" : ", ") + id;
  if (!missing.empty())
    throw DataError("evaluate_captions: missing predictions for images: " + missing);

  std::vector<std::vector<TokenSeq>> ref_sets;
  ref_sets.reserve(refs_by_image.size());
  for (const auto& [id, refs] : refs_by_image) ref_sets.push_back(refs);
  ReferenceCorpus corpus = ReferenceCorpus::build(ref_sets);

  MetricReport report;
  std::vector<TokenSeq> cands;
  std::vector<std::vector<TokenSeq>> refs;
  double rouge_sum = 0, cider_sum = 0;
  for (const auto& [id, ref_list] : refs_by_image) {
    const TokenSeq& cand = by_id[id];
    cands.push_back(cand);
    refs.push_back(ref_list);
    MetricReport::PerImage pi;
    pi.image_id = id;
    pi.rouge_l = rouge_l(cand, ref_list);
    pi.cider = cider_d(cand, ref_list, corpus);
    rouge_sum += pi.rouge_l;
    cider_sum += pi.cider;
    report.per_image.push_back(std::move(pi));
  }
  report.bleu = bleu(cands, refs);
  std::size_t n = report.per_image.size();
  report.rouge_l = n ? rouge_sum / static_cast<double>(n) : 0.0;
  report.cider = n ? cider_sum / static_cast<double>(n) : 0.0;
  return report;
}

}  // namespace percap
