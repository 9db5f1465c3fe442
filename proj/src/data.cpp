#include "percap/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstring>
#include <fstream>
#include <sstream>

#include "percap/error.hpp"
#include "percap/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; big-endian hosts need byte swapping");

namespace percap {

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  throw ContractError("split: invalid enum value");
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  throw FormatError("split: expected train|valid|test, got '" + s + "'");
}

FeatureStore::FeatureStore(Shape dims) : dims_(std::move(dims)) {
  if (dims_.size() != 1 && dims_.size() != 3)
    throw ContractError("feature store: rank must be 1 or 3, got " + shape_str(dims_));
}

void FeatureStore::add(const std::string& id, std::vector<float> data) {
  if (features_.count(id)) throw DataError("feature store: duplicate image id '" + id + "'");
  if (data.size() != feature_size())
    throw DataError("feature store: feature for '" + id + "' has " + std::to_string(data.size()) +
                    " values, expected " + std::to_string(feature_size()));
  ids_.push_back(id);
  features_.emplace(id, std::move(data));
}

bool FeatureStore::has(const std::string& id) const { return features_.count(id) > 0; }

const std::vector<float>& FeatureStore::feature(const std::string& id) const {
  auto it = features_.find(id);
  if (it == features_.end()) throw DataError("feature store: unknown image id '" + id + "'");
  return it->second;
}

namespace {

constexpr char kMagic[4] = {'P', 'C', 'F', '1'};

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}
void write_u16(std::ostream& out, std::uint16_t v) {
  out.write(reinterpret_cast<const char*>(&v), 2);
}

struct Reader {
  std::ifstream in;
  std::size_t offset = 0;
  std::string path;

  void read_raw(void* dst, std::size_t n, const char* what) {
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
      throw FormatError(path + ": truncated while reading " + std::string(what) +
                        " at byte offset " + std::to_string(offset));
    offset += n;
  }
  std::uint32_t read_u32(const char* what) {
    std::uint32_t v;
    read_raw(&v, 4, what);
    return v;
  }
  std::uint16_t read_u16(const char* what) {
    std::uint16_t v;
    read_raw(&v, 2, what);
    return v;
  }
};

}  // namespace

FeatureStore read_features(const std::string& path) {
  Reader r{std::ifstream(path, std::ios::binary), 0, path};
  if (!r.in) throw DataError("feature store: cannot open " + path);
  char magic[4];
  r.read_raw(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError(path + ": bad magic at byte offset 0, expected \"PCF1\"");
  std::uint32_t count = r.read_u32("record count");
  std::uint32_t rank = r.read_u32("rank");
  if (rank != 1 && rank != 3)
    throw FormatError(path + ": rank must be 1 or 3, got " + std::to_string(rank) +
                      " at byte offset 8");
  Shape dims;
  for (std::uint32_t i = 0; i < rank; ++i) {
    std::uint32_t d = r.read_u32("dimension");
    if (d == 0) throw FormatError(path + ": zero dimension at byte offset " +
                                  std::to_string(r.offset - 4));
    dims.push_back(d);
  }
  FeatureStore store(dims);
  std::size_t n = numel(dims);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint16_t len = r.read_u16("id length");
    std::string id(len, '\0');
    r.read_raw(id.data(), len, "image id");
    std::vector<float> data(n);
    r.read_raw(data.data(), n * sizeof(float), "feature payload");
    store.add(id, std::move(data));
  }
  return store;
}

void write_features(const std::string& path, const FeatureStore& store) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("feature store: cannot write " + path);
  out.write(kMagic, 4);
  write_u32(out, static_cast<std::uint32_t>(store.size()));
  write_u32(out, static_cast<std::uint32_t>(store.rank()));
  for (auto d : store.dims()) write_u32(out, static_cast<std::uint32_t>(d));
  for (const auto& id : store.ids()) {
    if (id.size() > 0xffff)
      throw DataError("feature store: image id longer than 65535 bytes: " + id.substr(0, 40));
    write_u16(out, static_cast<std::uint16_t>(id.size()));
    out.write(id.data(), static_cast<std::streamsize>(id.size()));
    const auto& f = store.feature(id);
    out.write(reinterpret_cast<const char*>(f.data()),
              static_cast<std::streamsize>(f.size() * sizeof(float)));
  }
}

std::vector<CaptionRecord> read_captions(const std::string& path, const TraitTable& traits) {
  std::ifstream in(path);
  if (!in) throw DataError("captions: cannot open " + path);
  std::vector<CaptionRecord> records;
  std::vector<std::string> offenses;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto offend = [&](const std::string& msg) {
      offenses.push_back("line " + std::to_string(line_no) + ": " + msg);
    };
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      offend("not valid JSON");
      continue;
    }
    if (!doc.is_object()) {
      offend("not a JSON object");
      continue;
    }
    static const char* fields[4] = {"image_id", "personality", "caption", "split"};
    bool bad = false;
    for (const char* f : fields)
      if (!doc.contains(f) || !doc[f].is_string()) {
        offend(std::string("missing string field '") + f + "'");
        bad = true;
      }
    for (auto it = doc.begin(); it != doc.end(); ++it)
      if (std::find_if(std::begin(fields), std::end(fields),
                       [&](const char* f) { return it.key() == f; }) == std::end(fields)) {
        offend("unexpected field '" + it.key() + "'");
        bad = true;
      }
    if (bad) continue;
    CaptionRecord rec;
    rec.image_id = doc["image_id"].get<std::string>();
    rec.personality = doc["personality"].get<std::string>();
    rec.caption = doc["caption"].get<std::string>();
    try {
      rec.split = split_from_string(doc["split"].get<std::string>());
    } catch (const FormatError& e) {
      offend(e.what());
      continue;
    }
    if (traits.id_of(rec.personality) < 0)
      offend("unknown trait name '" + rec.personality + "'");
    if (tokenize(rec.caption).size() < 3)
      offend("caption has fewer than 3 tokens: '" + rec.caption + "'");
    records.push_back(std::move(rec));
  }
  if (!offenses.empty()) {
    std::string msg = "captions: " + path + " failed validation";
    for (const auto& o : offenses) msg += "\n  " + o;
    throw DataError(msg);
  }
  return records;
}

void write_captions(const std::string& path, const std::vector<CaptionRecord>& records) {
  std::ofstream out(path);
  if (!out) throw DataError("captions: cannot write " + path);
  for (const auto& r : records) {
    nlohmann::ordered_json doc{{"image_id", r.image_id},
                               {"personality", r.personality},
                               {"caption", r.caption},
                               {"split", to_string(r.split)}};
    out << doc.dump() << '\n';
  }
}

void validate_features_exist(const std::vector<CaptionRecord>& records,
                             const FeatureStore& store) {
  std::string missing;
  std::size_t count = 0;
  for (const auto& r : records)
    if (!store.has(r.image_id)) {
      if (count < 10) missing += (missing.empty() ? "" : ", ") + r.image_id;
      ++count;
    }
  if (count)
    throw DataError("captions reference " + std::to_string(count) +
                    " image ids missing from the feature store: " + missing +
                    (count > 10 ? ", ..." : ""));
}

Vocabulary build_vocab(const std::vector<CaptionRecord>& records, std::size_t min_freq) {
  std::vector<std::vector<std::string>> token_lists;
  token_lists.reserve(records.size());
  for (const auto& r : records) token_lists.push_back(tokenize(r.caption));
  return Vocabulary::build(token_lists, min_freq);
}

// ---------------------------------------------------------------------------
// checkpoints

void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
  nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    nlohmann::ordered_json entry{{"name", name}, {"shape", t.shape()}, {"offset", offset}};
    manifest.push_back(std::move(entry));
    offset += t.size() * sizeof(float);
  }
  nlohmann::ordered_json header{{"format_version", 1}, {"tensors", std::move(manifest)}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot write " + path);
  out << header.dump() << '\n';
  for (const auto& [name, t] : tensors)
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(float)));
}

namespace {

struct CheckpointHeader {
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  std::string payload;  // raw bytes after the header newline
};

CheckpointHeader read_checkpoint_header(const std::string& path, bool with_payload) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path);
  std::string header_line;
  if (!std::getline(in, header_line))
    throw FormatError("checkpoint: " + path + " is empty");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint: " + path + " header is not valid JSON: " + e.what());
  }
  if (!doc.contains("format_version") || doc["format_version"].get<int>() != 1)
    throw FormatError("checkpoint: " + path + " has unsupported format_version");
  CheckpointHeader h;
  std::size_t expect_offset = 0;
  for (const auto& e : doc["tensors"]) {
    CheckpointHeader::Entry entry;
    entry.name = e["name"].get<std::string>();
    for (const auto& d : e["shape"]) entry.shape.push_back(d.get<std::size_t>());
    entry.offset = e["offset"].get<std::size_t>();
    if (entry.offset != expect_offset)
      throw FormatError("checkpoint: " + path + " tensor '" + entry.name +
                        "' offset " + std::to_string(entry.offset) + ", expected " +
                        std::to_string(expect_offset));
    expect_offset += numel(entry.shape) * sizeof(float);
    h.entries.push_back(std::move(entry));
  }
  if (with_payload) {
    std::ostringstream payload;
    payload << in.rdbuf();
    h.payload = payload.str();
    if (h.payload.size() != expect_offset)
      throw FormatError("checkpoint: " + path + " payload has " +
                        std::to_string(h.payload.size()) + " bytes, expected " +
                        std::to_string(expect_offset));
  }
  return h;
}

}  // namespace

void load_checkpoint(const std::string& path, NamedTensors expected) {
  CheckpointHeader h = read_checkpoint_header(path, true);
  if (h.entries.size() != expected.size())
    throw ConfigError("checkpoint: " + path + " holds " + std::to_string(h.entries.size()) +
                      " tensors, the current model expects " + std::to_string(expected.size()));
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (h.entries[i].name != expected[i].first)
      throw ConfigError("checkpoint: " + path + " tensor " + std::to_string(i) + " is '" +
                        h.entries[i].name + "', the current model expects '" +
                        expected[i].first + "'");
    if (h.entries[i].shape != expected[i].second.shape())
      throw ConfigError("checkpoint: tensor '" + h.entries[i].name + "' has shape " +
                        shape_str(h.entries[i].shape) + ", the current model expects " +
                        shape_str(expected[i].second.shape()));
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    auto& t = expected[i].second;
    std::memcpy(t.data(), h.payload.data() + h.entries[i].offset, t.size() * sizeof(float));
  }
}

std::vector<std::string> checkpoint_manifest(const std::string& path) {
  CheckpointHeader h = read_checkpoint_header(path, false);
  std::vector<std::string> names;
  for (const auto& e : h.entries) names.push_back(e.name);
  return names;
}

// ---------------------------------------------------------------------------
// synthetic corpus

namespace {

const std::vector<std::string> kNouns{
    "lighthouse", "orchard", "harbor",  "meadow",  "castle",   "canyon",  "library", "garden",
    "bridge",     "market",  "forest",  "island",  "fountain", "temple",  "glacier", "desert",
    "stadium",    "museum",  "village", "mountain", "river",    "tower",   "cottage", "valley"};

const std::vector<std::string> kAdjectives{
    "crimson", "ancient", "misty",  "sunny",    "quiet",  "vast",   "bustling", "hidden",
    "frozen",  "golden",  "shady",  "stony",    "windy",  "lively", "serene",   "rugged",
    "grand",   "tiny",    "bright", "colorful", "dusty",  "mossy",  "silent",   "wild"};

const std::vector<std::vector<std::string>> kFillers{
    {"i", "see", "a"},    {"look", "at", "this"}, {"there", "is", "a"},
    {"check", "out", "the"}, {"you", "can", "see", "a"}, {"behold", "the"}};

// %s is replaced by the trait keyword
const std::vector<std::vector<std::string>> kTraitPatterns{
    {"so", "%s"},           {"very", "%s", "mood"},     {"quite", "%s", "here"},
    {"%s", "vibes", "all"}, {"such", "%s", "feelings"}, {"truly", "%s", "scene"}};

std::string lowercase(const std::string& s) {
  std::string out = s;
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::vector<std::string> concept_phrase(std::size_t c) {
  if (c < kNouns.size()) return {kAdjectives[c % kAdjectives.size()], kNouns[c]};
  return {"odd", "place" + std::to_string(c)};
}

std::vector<std::string> trait_phrase(const std::string& keyword, std::size_t variant) {
  std::vector<std::string> out;
  for (const auto& w : kTraitPatterns[variant]) out.push_back(w == "%s" ? keyword : w);
  return out;
}

std::string make_caption(std::size_t filler, std::size_t concept_id,
                         const std::string& trait_keyword, std::size_t variant) {
  std::vector<std::string> toks = kFillers[filler];
  for (const auto& w : concept_phrase(concept_id)) toks.push_back(w);
  for (const auto& w : trait_phrase(trait_keyword, variant)) toks.push_back(w);
  return join_tokens(toks);
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticSpec& spec, const TraitTable& table) {
  if (spec.num_traits == 0 || spec.num_traits > table.size())
    throw ConfigError("synthetic: num_traits must be in [1, " + std::to_string(table.size()) +
                      "], got " + std::to_string(spec.num_traits));
  if (spec.num_images < 10)
    throw ConfigError("synthetic: num_images must be at least 10 to populate all splits");
  if (spec.num_concepts == 0 || spec.feature_dim == 0)
    throw ConfigError("synthetic: num_concepts and feature_dim must be positive");
  if (spec.captions_per_test_image < 1)
    throw ConfigError("synthetic: captions_per_test_image must be at least 1");
  if (spec.captions_per_test_image > kFillers.size())
    throw DataError("synthetic: filler pool of " + std::to_string(kFillers.size()) +
                    " cannot yield " + std::to_string(spec.captions_per_test_image) +
                    " distinct references per test image");
  if (spec.lexicon_size < 1 || spec.lexicon_size > kTraitPatterns.size())
    throw DataError("synthetic: lexicon_size must be in [1, " +
                    std::to_string(kTraitPatterns.size()) + "], got " +
                    std::to_string(spec.lexicon_size));

  Rng rng(spec.seed);
  SyntheticData out;

  // trait subset: round-robin across polarities so every class is present
  {
    std::vector<std::vector<std::size_t>> by_class{
        table.ids_of_polarity(Polarity::positive), table.ids_of_polarity(Polarity::neutral),
        table.ids_of_polarity(Polarity::negative)};
    std::vector<std::size_t> heads(3, 0);
    std::vector<Trait> subset;
    std::size_t cls = 0;
    while (subset.size() < spec.num_traits) {
      bool any = false;
      for (std::size_t tries = 0; tries < 3 && subset.size() < spec.num_traits; ++tries) {
        std::size_t k = (cls + tries) % 3;
        if (heads[k] < by_class[k].size()) {
          subset.push_back(table.trait(by_class[k][heads[k]++]));
          cls = (k + 1) % 3;
          any = true;
          break;
        }
      }
      if (!any) throw ConfigError("synthetic: trait table exhausted before num_traits reached");
    }
    out.traits = TraitTable::from_entries(std::move(subset));
  }

  out.centroids.assign(spec.num_concepts, std::vector<float>(spec.feature_dim));
  for (auto& c : out.centroids)
    for (auto& v : c) v = static_cast<float>(rng.normal(0.0, 1.0));

  std::size_t n_valid = spec.num_images / 10;
  std::size_t n_test = spec.num_images / 10;
  std::size_t n_train = spec.num_images - n_valid - n_test;

  out.features = FeatureStore({spec.feature_dim});
  out.grid_features = FeatureStore({7, 7, spec.feature_dim});

  int id_width = static_cast<int>(std::to_string(spec.num_images - 1).size());
  for (std::size_t i = 0; i < spec.num_images; ++i) {
    std::string idx = std::to_string(i);
    std::string image_id = "img" + std::string(id_width - static_cast<int>(idx.size()), '0') + idx;
    out.image_ids.push_back(image_id);
    std::size_t concept_id = i % spec.num_concepts;
    out.concept_of_image.push_back(concept_id);

    std::vector<float> feat(spec.feature_dim);
    for (std::size_t d = 0; d < spec.feature_dim; ++d)
      feat[d] = out.centroids[concept_id][d] + static_cast<float>(rng.normal(0.0, spec.noise));
    out.features.add(image_id, std::move(feat));

    std::vector<float> grid(49 * spec.feature_dim);
    for (std::size_t p = 0; p < 49; ++p)
      for (std::size_t d = 0; d < spec.feature_dim; ++d)
        grid[p * spec.feature_dim + d] =
            out.centroids[concept_id][d] + static_cast<float>(rng.normal(0.0, spec.noise));
    out.grid_features.add(image_id, std::move(grid));

    std::size_t trait_id = rng.index(spec.num_traits);
    const std::string trait_name = out.traits.trait(trait_id).name;
    const std::string keyword = lowercase(trait_name);
    Split split = i < n_train ? Split::train
                 : i < n_train + n_valid ? Split::valid
                                         : Split::test;

    std::size_t refs = split == Split::test ? spec.captions_per_test_image : 1;
    // distinct fillers per test image via a partial shuffle
    std::vector<std::size_t> filler_order(kFillers.size());
    for (std::size_t f = 0; f < filler_order.size(); ++f) filler_order[f] = f;
    for (std::size_t f = 0; f + 1 < filler_order.size(); ++f)
      std::swap(filler_order[f], filler_order[f + rng.index(filler_order.size() - f)]);

    for (std::size_t ref = 0; ref < refs; ++ref) {
      std::size_t variant = rng.index(spec.lexicon_size);
      CaptionRecord rec;
      rec.image_id = image_id;
      rec.personality = trait_name;
      rec.caption = make_caption(filler_order[ref], concept_id, keyword, variant);
      rec.split = split;
      out.records.push_back(std::move(rec));
    }
  }

  for (const auto& rec : out.records) {
    if (rec.split != Split::train) continue;
    std::vector<std::string> toks = tokenize(rec.caption);
    for (std::size_t f = 0; f + 1 < toks.size(); ++f)
      std::swap(toks[f], toks[f + rng.index(toks.size() - f)]);
    out.dialogue_pairs.emplace_back(join_tokens(toks), rec.caption);
  }

  for (const auto& rec : out.records) {
    if (tokenize(rec.caption).size() < 3)
      throw ContractError("synthetic: generated caption under 3 tokens: " + rec.caption);
    if (out.traits.id_of(rec.personality) < 0)
      throw ContractError("synthetic: generated unresolvable trait " + rec.personality);
    if (!out.features.has(rec.image_id) || !out.grid_features.has(rec.image_id))
      throw ContractError("synthetic: generated record without features: " + rec.image_id);
  }
  return out;
}

}  // namespace percap
