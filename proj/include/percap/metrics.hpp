#pragma once

#include <array>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

namespace percap {

using TokenSeq = std::vector<std::string>;

// Document frequencies of reference n-grams (orders 1..4) over a set of
// images, for CIDEr-D idf weighting.
class ReferenceCorpus {
 public:
  static constexpr int kMaxOrder = 4;

  // images[i] = all reference token sequences of image i
  static ReferenceCorpus build(const std::vector<std::vector<TokenSeq>>& images);

  std::size_t num_images() const { return num_images_; }
  // 0 when the n-gram never occurs; order in 1..4
  std::size_t df(const std::string& key, int order) const;

 private:
  std::size_t num_images_ = 0;
  std::array<std::unordered_map<std::string, std::size_t>, kMaxOrder> df_;
};

// Joins an n-gram into a single map key. Tokens never contain the
// separator (the tokenizer splits on whitespace).
std::string ngram_key(const TokenSeq& tokens, std::size_t start, int order);

// Corpus BLEU-1..4: pooled clipped n-gram counts, geometric mean over
// orders, one pooled brevity penalty exp(1 - r/c) where r sums each
// candidate's closest reference length (ties -> shorter). No smoothing.
std::array<double, 4> bleu(const std::vector<TokenSeq>& candidates,
                           const std::vector<std::vector<TokenSeq>>& references);

// LCS F-measure with beta = 1.2, maximized over references; empty
// inputs score 0.
double rouge_l(const TokenSeq& candidate, const std::vector<TokenSeq>& references,
               double beta = 1.2);

// CIDEr-D over orders 1..4: per reference, min-clipped tf-idf cosine
// times the Gaussian length penalty exp(-(lc-lr)^2 / (2 sigma^2)),
// times 10; averaged over references, then over orders. idf(g) =
// log(N / df(g)); an n-gram absent from the corpus has df floored to 1
// when it occurs in this item's own references and weight 0 otherwise.
double cider_d(const TokenSeq& candidate, const std::vector<TokenSeq>& references,
               const ReferenceCorpus& corpus, double sigma = 6.0);

struct MetricReport {
  std::array<double, 4> bleu{};  // orders 1..4
  double rouge_l = 0;
  double cider = 0;
  struct PerImage {
    std::string image_id;
    double rouge_l = 0;
    double cider = 0;
  };
  std::vector<PerImage> per_image;  // sorted by image_id
};

// Scores one prediction per image against the test references. The idf
// corpus is the test references themselves. Throws DataError listing
// image ids when predictions are missing or refer to unknown images.
MetricReport evaluate_captions(const std::vector<std::pair<std::string, TokenSeq>>& predictions,
                               const std::map<std::string, std::vector<TokenSeq>>& refs_by_image);

}  // namespace percap
