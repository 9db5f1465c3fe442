#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "percap/tensor.hpp"
#include "percap/text.hpp"
#include "percap/traits.hpp"

namespace percap {

enum class Split { train, valid, test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct CaptionRecord {
  std::string image_id;
  std::string personality;
  std::string caption;
  Split split = Split::train;
};

// Immutable id -> feature map; one dimensionality for the whole store.
// Per-image features are rank 1 [D] or rank 3 [H x W x D].
class FeatureStore {
 public:
  FeatureStore() = default;
  explicit FeatureStore(Shape dims);

  void add(const std::string& id, std::vector<float> data);
  bool has(const std::string& id) const;
  const std::vector<float>& feature(const std::string& id) const;

  const Shape& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t feature_size() const { return numel(dims_); }
  std::size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }

 private:
  Shape dims_;
  std::vector<std::string> ids_;  // file order
  std::unordered_map<std::string, std::vector<float>> features_;
};

// Binary layout: magic "PCF1"; u32 LE count, rank, then rank dimension
// sizes; per record a u16 LE id length, the UTF-8 id, and the row-major
// LE f32 payload. Round trips byte-for-byte.
FeatureStore read_features(const std::string& path);
void write_features(const std::string& path, const FeatureStore& store);

// JSONL, one {"image_id","personality","caption","split"} object per
// line. Validation collects every offense (missing field, unknown trait,
// caption under 3 tokens, bad split) with line numbers, then throws.
std::vector<CaptionRecord> read_captions(const std::string& path, const TraitTable& traits);
void write_captions(const std::string& path, const std::vector<CaptionRecord>& records);

// Throws listing the records whose image_id is missing from the store.
void validate_features_exist(const std::vector<CaptionRecord>& records, const FeatureStore& store);

Vocabulary build_vocab(const std::vector<CaptionRecord>& records, std::size_t min_freq);

// ---------------------------------------------------------------------------
// checkpoints

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

// Header: compact JSON {"format_version":1,"tensors":[{name,shape,offset}...]},
// a single 0x0A byte, then the concatenated LE f32 payloads in manifest
// order. Offsets are bytes from the start of the payload section.
void save_checkpoint(const std::string& path, const NamedTensors& tensors);

// Validates the manifest (names, order, shapes) against `expected` before
// reading any payload, then fills the tensors in place.
void load_checkpoint(const std::string& path, NamedTensors expected);

std::vector<std::string> checkpoint_manifest(const std::string& path);

// ---------------------------------------------------------------------------
// synthetic corpus

struct SyntheticSpec {
  std::uint64_t seed = 0;
  std::size_t num_images = 1250;
  std::size_t feature_dim = 64;
  std::size_t num_concepts = 20;
  std::size_t num_traits = 20;
  std::size_t captions_per_test_image = 5;
  std::size_t lexicon_size = 3;
  double noise = 0.1;
};

struct SyntheticData {
  FeatureStore features;       // [D]
  FeatureStore grid_features;  // [7 x 7 x D], same concept signal per position
  std::vector<CaptionRecord> records;
  TraitTable traits;  // the subset actually used, id-dense
  std::vector<std::pair<std::string, std::string>> dialogue_pairs;  // context, response
  std::vector<std::size_t> concept_of_image;
  std::vector<std::vector<float>> centroids;  // num_concepts x D
  std::vector<std::string> image_ids;
};

// Seeded generator. Each image gets a concept centroid + Gaussian noise
// feature and a caption of filler opener + concept phrase + trait phrase,
// so captions are concept-separable and trait conditioning carries
// signal. Test images get captions_per_test_image references (distinct
// fillers); splits are disjoint by image id (80/10/10). Dialogue pairs
// shuffle each train caption's tokens into the context.
SyntheticData generate_synthetic(const SyntheticSpec& spec, const TraitTable& table);

}  // namespace percap
