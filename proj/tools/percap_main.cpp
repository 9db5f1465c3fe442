#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "percap/classifier.hpp"
#include "percap/data.hpp"
#include "percap/encoder.hpp"
#include "percap/error.hpp"
#include "percap/generative.hpp"
#include "percap/log.hpp"
#include "percap/metrics.hpp"
#include "percap/retrieval.hpp"
#include "percap/rng.hpp"
#include "percap/tensor.hpp"
#include "percap/text.hpp"
#include "percap/traits.hpp"

using nlohmann::json;
using nlohmann::ordered_json;
using namespace percap;

namespace {

// Every flag mirrors a field name below; a JSON config file may supply
// any subset of them and explicit flags win.
struct Run {
  std::string subcommand;
  std::string config;

  std::string features, captions, traits, vocab;
  std::string checkpoint_in, checkpoint_out;
  std::string report, out, dialogue, pretrained, predictions, input;

  std::string model = "retrieval";
  std::string encoder = "transformer";
  std::string pretrain = "none";
  bool personality = true;

  std::size_t batch = 32;
  std::size_t epochs = 1;
  double lr = 1e-3;
  std::size_t beam = 2;
  std::size_t joint_dim = 500;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  std::size_t d_model = 300;
  std::size_t layers = 4;
  std::size_t heads = 6;
  std::size_t text_max_len = 32;
  std::size_t hidden_dim = 512;
  std::size_t max_len = 16;
  std::size_t num_candidates = 500;
  std::size_t frozen_epochs = 1;
  std::size_t min_count = 1;
  std::size_t k_negatives = 1;
  std::size_t scst_epochs = 0;
  double scst_lr = 1e-4;
  std::size_t samples_per_image = 1;

  std::size_t num_images = 1250;
  std::size_t feature_dim = 64;
  std::size_t num_concepts = 20;
  std::size_t num_traits = 20;
  std::size_t captions_per_test_image = 5;
  std::size_t lexicon_size = 3;
  double noise = 0.1;
};

struct Field {
  std::string name;
  std::function<void(const json&)> set;
  std::function<ordered_json()> get;
};

template <typename V>
void bind_flag(CLI::App& app, std::vector<Field>& fields, const std::string& name, V& var,
          const std::string& help) {
  app.add_option("--" + name, var, help);
  fields.push_back({name, [&var](const json& j) { var = j.get<V>(); },
                    [&var] { return ordered_json(var); }});
}

std::vector<Field> register_flags(CLI::App& app, Run& r) {
  std::vector<Field> f;
  app.add_option("--config", r.config, "JSON file supplying any subset of the flags");
  bind_flag(app, f, "features", r.features, "feature store path");
  bind_flag(app, f, "captions", r.captions, "caption records path (jsonl)");
  bind_flag(app, f, "traits", r.traits, "trait table path (json)");
  bind_flag(app, f, "vocab", r.vocab, "vocabulary path");
  bind_flag(app, f, "checkpoint_in", r.checkpoint_in, "checkpoint to load");
  bind_flag(app, f, "checkpoint_out", r.checkpoint_out, "checkpoint to write");
  bind_flag(app, f, "report", r.report, "output report path (json)");
  bind_flag(app, f, "out", r.out, "output directory (gen-data)");
  bind_flag(app, f, "dialogue", r.dialogue, "dialogue pairs path (jsonl)");
  bind_flag(app, f, "pretrained", r.pretrained, "pretrained text encoder checkpoint");
  bind_flag(app, f, "predictions", r.predictions, "predictions path (jsonl)");
  bind_flag(app, f, "input", r.input, "caption set path (jsonl with caption fields)");
  bind_flag(app, f, "model", r.model, "retrieval | showtell | showatttell | updown");
  bind_flag(app, f, "encoder", r.encoder, "transformer | bow");
  bind_flag(app, f, "pretrain", r.pretrain, "none | word | full");
  bind_flag(app, f, "personality", r.personality, "condition on the personality trait");
  bind_flag(app, f, "batch", r.batch, "training batch size");
  bind_flag(app, f, "epochs", r.epochs, "training epochs");
  bind_flag(app, f, "lr", r.lr, "learning rate");
  bind_flag(app, f, "beam", r.beam, "beam width for decoding");
  bind_flag(app, f, "joint_dim", r.joint_dim, "retrieval joint-space width");
  bind_flag(app, f, "seed", r.seed, "random seed");
  bind_flag(app, f, "threads", r.threads, "worker threads (1 = bitwise reproducible)");
  bind_flag(app, f, "d_model", r.d_model, "text encoder width");
  bind_flag(app, f, "layers", r.layers, "text encoder layers");
  bind_flag(app, f, "heads", r.heads, "text encoder attention heads");
  bind_flag(app, f, "text_max_len", r.text_max_len, "text encoder token cap");
  bind_flag(app, f, "hidden_dim", r.hidden_dim, "decoder hidden width");
  bind_flag(app, f, "max_len", r.max_len, "decoder length cap");
  bind_flag(app, f, "num_candidates", r.num_candidates, "ranking candidates per query");
  bind_flag(app, f, "frozen_epochs", r.frozen_epochs, "frozen text-encoder epochs (pretrain full)");
  bind_flag(app, f, "min_count", r.min_count, "vocabulary frequency floor");
  bind_flag(app, f, "k_negatives", r.k_negatives, "pretraining negatives per positive");
  bind_flag(app, f, "scst_epochs", r.scst_epochs, "self-critical epochs after the xe stage");
  bind_flag(app, f, "scst_lr", r.scst_lr, "self-critical learning rate");
  bind_flag(app, f, "samples_per_image", r.samples_per_image, "self-critical samples per image");
  bind_flag(app, f, "num_images", r.num_images, "synthetic corpus size");
  bind_flag(app, f, "feature_dim", r.feature_dim, "synthetic feature width");
  bind_flag(app, f, "num_concepts", r.num_concepts, "synthetic concept count");
  bind_flag(app, f, "num_traits", r.num_traits, "synthetic trait count");
  bind_flag(app, f, "captions_per_test_image", r.captions_per_test_image,
       "references per synthetic test image");
  bind_flag(app, f, "lexicon_size", r.lexicon_size, "trait phrasing variants");
  bind_flag(app, f, "noise", r.noise, "synthetic feature noise");
  return f;
}

void apply_config_file(CLI::App& app, const std::vector<Field>& fields, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: " + path + " must hold a JSON object");
  std::set<std::string> known{"subcommand"};
  for (const auto& f : fields) known.insert(f.name);
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("config: unknown key \"" + key + "\"");
    if (key == "subcommand") continue;  // positional, never overridden
    for (const auto& f : fields) {
      if (f.name != key) continue;
      if (app.count("--" + f.name) == 0) {
        try {
          f.set(value);
        } catch (const json::exception& e) {
          throw ConfigError("config: bad value for \"" + key + "\": " + e.what());
        }
      }
      break;
    }
  }
}

ordered_json resolved_config(const Run& r, const std::vector<Field>& fields) {
  ordered_json j;
  j["subcommand"] = r.subcommand;
  for (const auto& f : fields) j[f.name] = f.get();
  return j;
}

void write_json_file(const std::string& path, const ordered_json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << j.dump(2) << "\n";
}

void require(const Run& r, const std::vector<std::pair<std::string, const std::string*>>& paths) {
  for (const auto& [name, value] : paths)
    if (value->empty())
      throw ConfigError(r.subcommand + ": --" + name + " is required");
}

std::string resolved_path(const Run& r) {
  if (r.subcommand == "gen-data") return r.out + "/config.json";
  if (r.subcommand == "build-vocab") return r.vocab + ".config.json";
  return r.report + ".config.json";
}

// ---------------------------------------------------------------------------
// shared loaders

std::vector<CaptionRecord> records_of_split(const std::vector<CaptionRecord>& records,
                                            Split split) {
  std::vector<CaptionRecord> out;
  for (const auto& rec : records)
    if (rec.split == split) out.push_back(rec);
  return out;
}

TextEncoderConfig text_config(const Run& r) {
  TextEncoderConfig cfg;
  cfg.kind = encoder_kind_from_string(r.encoder);
  cfg.layers = r.layers;
  cfg.d_model = r.d_model;
  cfg.heads = r.heads;
  cfg.max_len = r.text_max_len;
  cfg.pretrain = pretrain_mode_from_string(r.pretrain);
  return cfg;
}

// The word axis copies only the embedding table; full copies the whole
// encoder. Both need a checkpoint from the pretraining stage.
void apply_pretrained(const Run& r, TextEncoder<float>& target, const Vocabulary& vocab) {
  PretrainMode mode = pretrain_mode_from_string(r.pretrain);
  if (mode == PretrainMode::none) {
    if (!r.pretrained.empty())
      throw ConfigError("--pretrained given but pretrain mode is none");
    return;
  }
  if (r.pretrained.empty())
    throw ConfigError("pretrain mode " + r.pretrain + " needs --pretrained");
  Rng rng(0);
  TextEncoder<float> source(target.config(), vocab, rng);
  load_checkpoint(r.pretrained, source.named_parameters());
  if (mode == PretrainMode::full) {
    target.copy_weights_from(source);
    info("initialized the full text encoder from " + r.pretrained);
  } else {
    Tensor<float> dst = target.word_embeddings();
    Tensor<float> src = source.word_embeddings();
    std::copy(src.data(), src.data() + src.size(), dst.data());
    info("initialized word embeddings from " + r.pretrained);
  }
}

std::vector<std::pair<std::string, std::string>> read_dialogue(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("dialogue: cannot open " + path);
  std::vector<std::pair<std::string, std::string>> pairs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      throw FormatError("dialogue: line " + std::to_string(line_no) + " is not valid JSON");
    }
    if (!j.is_object() || !j.contains("context") || !j.contains("response") ||
        !j["context"].is_string() || !j["response"].is_string())
      throw FormatError("dialogue: line " + std::to_string(line_no) +
                        " needs string fields context and response");
    pairs.emplace_back(j["context"].get<std::string>(), j["response"].get<std::string>());
  }
  return pairs;
}

// Reads any jsonl whose rows carry a caption field, so both gold records
// and prediction files qualify.
std::vector<std::string> read_caption_fields(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("captions: cannot open " + path);
  std::vector<std::string> captions;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      throw FormatError("captions: line " + std::to_string(line_no) + " is not valid JSON");
    }
    if (!j.is_object() || !j.contains("caption") || !j["caption"].is_string())
      throw FormatError("captions: line " + std::to_string(line_no) +
                        " needs a string caption field");
    captions.push_back(j["caption"].get<std::string>());
  }
  return captions;
}

DecoderKind generative_kind(const Run& r) {
  if (r.model == "retrieval")
    throw ConfigError(r.subcommand + ": --model must be showtell, showatttell, or updown");
  return decoder_kind_from_string(r.model);
}

GenerativeConfig generative_config(const Run& r, const FeatureStore& store) {
  GenerativeConfig cfg;
  cfg.kind = generative_kind(r);
  cfg.feature_dim = store.dims().back();
  cfg.hidden_dim = r.hidden_dim;
  cfg.max_len = r.max_len;
  cfg.personality_on = r.personality;
  return cfg;
}

struct QueryGroup {
  std::string image_id;
  std::string personality;
  int trait_id;
};

// (image, personality) groups in first-appearance order.
std::vector<QueryGroup> query_groups(const std::vector<CaptionRecord>& records,
                                     const TraitTable& table) {
  std::vector<QueryGroup> groups;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& rec : records) {
    if (!seen.insert({rec.image_id, rec.personality}).second) continue;
    int id = table.id_of(rec.personality);
    if (id < 0) throw DataError("unknown trait \"" + rec.personality + "\"");
    groups.push_back({rec.image_id, rec.personality, id});
  }
  return groups;
}

// ---------------------------------------------------------------------------
// subcommands

int cmd_gen_data(const Run& r) {
  require(r, {{"traits", &r.traits}, {"out", &r.out}});
  TraitTable table = TraitTable::load(r.traits);
  SyntheticSpec spec;
  spec.seed = r.seed;
  spec.num_images = r.num_images;
  spec.feature_dim = r.feature_dim;
  spec.num_concepts = r.num_concepts;
  spec.num_traits = r.num_traits;
  spec.captions_per_test_image = r.captions_per_test_image;
  spec.lexicon_size = r.lexicon_size;
  spec.noise = r.noise;
  SyntheticData data = generate_synthetic(spec, table);

  std::filesystem::create_directories(r.out);
  write_features(r.out + "/features.bin", data.features);
  write_features(r.out + "/grid_features.bin", data.grid_features);
  write_captions(r.out + "/captions.jsonl", data.records);
  data.traits.save(r.out + "/traits.json");
  {
    std::ofstream out(r.out + "/dialogue.jsonl");
    if (!out) throw DataError("cannot write " + r.out + "/dialogue.jsonl");
    for (const auto& [context, response] : data.dialogue_pairs) {
      ordered_json j;
      j["context"] = context;
      j["response"] = response;
      out << j.dump() << "\n";
    }
  }
  info("generated " + std::to_string(data.records.size()) + " caption records over " +
       std::to_string(spec.num_images) + " images into " + r.out);
  return 0;
}

int cmd_build_vocab(const Run& r) {
  require(r, {{"captions", &r.captions}, {"traits", &r.traits}, {"vocab", &r.vocab}});
  TraitTable table = TraitTable::load(r.traits);
  std::vector<CaptionRecord> records = read_captions(r.captions, table);
  std::vector<std::vector<std::string>> lists;
  for (const auto& rec : records)
    if (rec.split == Split::train) lists.push_back(tokenize(rec.caption));
  if (!r.dialogue.empty()) {
    for (const auto& [context, response] : read_dialogue(r.dialogue)) {
      lists.push_back(tokenize(context));
      lists.push_back(tokenize(response));
    }
  }
  Vocabulary vocab = Vocabulary::build(lists, r.min_count);
  vocab.save(r.vocab);
  info("vocabulary of " + std::to_string(vocab.size()) + " tokens written to " + r.vocab);
  return 0;
}

int cmd_pretrain_text(const Run& r) {
  require(r, {{"dialogue", &r.dialogue},
              {"vocab", &r.vocab},
              {"checkpoint_out", &r.checkpoint_out},
              {"report", &r.report}});
  Vocabulary vocab = Vocabulary::load(r.vocab);
  auto pairs = read_dialogue(r.dialogue);
  info("pretraining on " + std::to_string(pairs.size()) + " dialogue pairs");

  TextEncoderConfig cfg = text_config(r);
  PretrainConfig<float> pcfg;
  pcfg.k = r.k_negatives;
  pcfg.batch = r.batch;
  pcfg.epochs = r.epochs;
  pcfg.seed = r.seed;
  pcfg.opt.lr = static_cast<float>(r.lr);
  PretrainResult<float> result = pretrain_next_utterance(pairs, vocab, cfg, pcfg);
  save_checkpoint(r.checkpoint_out, result.candidate_encoder.named_parameters());

  ordered_json report;
  report["pairs"] = pairs.size();
  report["updates"] = result.batch_loss.size();
  report["first_loss"] = result.batch_loss.empty() ? 0.0 : result.batch_loss.front();
  report["final_loss"] = result.batch_loss.empty() ? 0.0 : result.batch_loss.back();
  report["batch_loss"] = result.batch_loss;
  write_json_file(r.report, report);
  info("pretrained encoder written to " + r.checkpoint_out);
  return 0;
}

int cmd_train_retrieval(const Run& r) {
  require(r, {{"features", &r.features},
              {"captions", &r.captions},
              {"traits", &r.traits},
              {"vocab", &r.vocab},
              {"checkpoint_out", &r.checkpoint_out},
              {"report", &r.report}});
  TraitTable table = TraitTable::load(r.traits);
  FeatureStore store = read_features(r.features);
  if (store.rank() != 1)
    throw ConfigError("train-retrieval: needs a vector feature store, got rank " +
                      std::to_string(store.rank()));
  Vocabulary vocab = Vocabulary::load(r.vocab);
  std::vector<CaptionRecord> train = records_of_split(read_captions(r.captions, table),
                                                      Split::train);
  info("training retrieval on " + std::to_string(train.size()) + " records");

  RetrievalConfig cfg;
  cfg.feature_dim = store.dims()[0];
  cfg.joint_dim = r.joint_dim;
  cfg.personality_on = r.personality;
  cfg.text = text_config(r);
  Rng rng(r.seed);
  TransResNet<float> model(cfg, vocab, table, rng);
  apply_pretrained(r, model.text(), vocab);

  RetrievalTrainConfig tcfg;
  tcfg.batch = r.batch;
  tcfg.epochs = r.epochs;
  tcfg.seed = r.seed;
  tcfg.frozen_epochs = r.frozen_epochs;
  tcfg.opt.lr = r.lr;
  TrainLog log = train_retrieval(train, store, model, tcfg);
  save_checkpoint(r.checkpoint_out, model.named_parameters());

  ordered_json report;
  report["records"] = train.size();
  report["updates"] = log.batch_loss.size();
  report["first_loss"] = log.batch_loss.empty() ? 0.0 : log.batch_loss.front();
  report["final_loss"] = log.batch_loss.empty() ? 0.0 : log.batch_loss.back();
  report["batch_loss"] = log.batch_loss;
  write_json_file(r.report, report);
  info("model written to " + r.checkpoint_out);
  return 0;
}

int cmd_eval_retrieval(const Run& r) {
  require(r, {{"features", &r.features},
              {"captions", &r.captions},
              {"traits", &r.traits},
              {"vocab", &r.vocab},
              {"checkpoint_in", &r.checkpoint_in},
              {"report", &r.report}});
  TraitTable table = TraitTable::load(r.traits);
  FeatureStore store = read_features(r.features);
  Vocabulary vocab = Vocabulary::load(r.vocab);
  std::vector<CaptionRecord> test = records_of_split(read_captions(r.captions, table),
                                                     Split::test);

  RetrievalConfig cfg;
  cfg.feature_dim = store.dims().empty() ? 0 : store.dims()[0];
  cfg.joint_dim = r.joint_dim;
  cfg.personality_on = r.personality;
  cfg.text = text_config(r);
  Rng rng(r.seed);
  TransResNet<float> model(cfg, vocab, table, rng);
  load_checkpoint(r.checkpoint_in, model.named_parameters());

  RecallConfig rcfg;
  rcfg.num_candidates = r.num_candidates;
  rcfg.seed = r.seed;
  rcfg.threads = r.threads;
  RankingResult result = eval_recall(test, store, model, rcfg);

  ordered_json report;
  report["queries"] = result.queries.size();
  report["candidates"] = r.num_candidates;
  report["r_at_1"] = result.r_at_1;
  report["r_at_5"] = result.r_at_5;
  report["r_at_10"] = result.r_at_10;
  report["median_rank"] = result.median_rank;
  std::vector<std::size_t> ranks;
  for (const auto& q : result.queries) ranks.push_back(q.true_rank);
  report["true_ranks"] = ranks;
  write_json_file(r.report, report);
  info("recall over " + std::to_string(result.queries.size()) + " queries: r@1 " +
       std::to_string(result.r_at_1));
  return 0;
}

int cmd_train_gen(const Run& r) {
  require(r, {{"features", &r.features},
              {"captions", &r.captions},
              {"traits", &r.traits},
              {"vocab", &r.vocab},
              {"checkpoint_out", &r.checkpoint_out},
              {"report", &r.report}});
  TraitTable table = TraitTable::load(r.traits);
  FeatureStore store = read_features(r.features);
  Vocabulary vocab = Vocabulary::load(r.vocab);
  std::vector<CaptionRecord> train = records_of_split(read_captions(r.captions, table),
                                                      Split::train);
  info("training " + r.model + " on " + std::to_string(train.size()) + " records");

  Rng rng(r.seed);
  Generator<float> model(generative_config(r, store), vocab, table, rng);
  if (!r.checkpoint_in.empty()) load_generator(r.checkpoint_in, model);

  ordered_json report;
  report["records"] = train.size();
  if (r.epochs > 0) {
    GenTrainConfig xcfg;
    xcfg.batch = r.batch;
    xcfg.epochs = r.epochs;
    xcfg.seed = r.seed;
    xcfg.opt.lr = r.lr;
    XeLog xe = train_xe(train, store, model, xcfg);
    ordered_json jx;
    jx["updates"] = xe.batch_loss.size();
    jx["first_loss"] = xe.batch_loss.empty() ? 0.0 : xe.batch_loss.front();
    jx["final_loss"] = xe.batch_loss.empty() ? 0.0 : xe.batch_loss.back();
    jx["batch_loss"] = xe.batch_loss;
    report["xe"] = jx;
  }
  if (r.scst_epochs > 0) {
    ScstConfig scfg;
    scfg.batch = r.batch;
    scfg.epochs = r.scst_epochs;
    scfg.seed = r.seed;
    scfg.max_len = r.max_len;
    scfg.samples_per_image = r.samples_per_image;
    scfg.opt.lr = r.scst_lr;
    ScstLog sc = train_scst(train, store, model, scfg);
    ordered_json js;
    js["updates"] = sc.batch_loss.size();
    js["batch_loss"] = sc.batch_loss;
    js["batch_reward"] = sc.batch_reward;
    js["mean_reward"] = sc.mean_reward;
    report["scst"] = js;
  }
  save_generator(r.checkpoint_out, model);
  write_json_file(r.report, report);
  info("model written to " + r.checkpoint_out);
  return 0;
}

int cmd_predict(const Run& r) {
  require(r, {{"features", &r.features},
              {"captions", &r.captions},
              {"traits", &r.traits},
              {"vocab", &r.vocab},
              {"checkpoint_in", &r.checkpoint_in},
              {"report", &r.report}});
  TraitTable table = TraitTable::load(r.traits);
  FeatureStore store = read_features(r.features);
  Vocabulary vocab = Vocabulary::load(r.vocab);
  std::vector<CaptionRecord> test = records_of_split(read_captions(r.captions, table),
                                                     Split::test);
  if (test.empty()) throw DataError("predict: no test records");
  std::vector<QueryGroup> groups = query_groups(test, table);

  std::ofstream out(r.report);
  if (!out) throw DataError("cannot write " + r.report);

  if (r.model == "retrieval") {
    RetrievalConfig cfg;
    cfg.feature_dim = store.dims().empty() ? 0 : store.dims()[0];
    cfg.joint_dim = r.joint_dim;
    cfg.personality_on = r.personality;
    cfg.text = text_config(r);
    Rng rng(r.seed);
    TransResNet<float> model(cfg, vocab, table, rng);
    load_checkpoint(r.checkpoint_in, model.named_parameters());

    std::vector<std::vector<float>> caption_vecs(test.size());
    for (std::size_t i = 0; i < test.size(); ++i)
      caption_vecs[i] = model.encode_caption(tokenize(test[i].caption)).values();
    for (const auto& g : groups) {
      Tensor<float> qv = add(model.encode_image(store.feature(g.image_id)),
                             model.encode_personality(g.trait_id));
      const float* pq = qv.data();
      std::size_t best = 0;
      double best_score = -1e300;
      for (std::size_t c = 0; c < caption_vecs.size(); ++c) {
        double acc = 0;
        for (std::size_t k = 0; k < caption_vecs[c].size(); ++k)
          acc += static_cast<double>(pq[k]) * static_cast<double>(caption_vecs[c][k]);
        if (acc > best_score) {
          best_score = acc;
          best = c;
        }
      }
      ordered_json row;
      row["image_id"] = g.image_id;
      row["personality"] = g.personality;
      row["caption"] = test[best].caption;
      row["score"] = best_score;
      out << row.dump() << "\n";
    }
  } else {
    Generator<float> model = [&] {
      Rng rng(r.seed);
      return Generator<float>(generative_config(r, store), vocab, table, rng);
    }();
    load_generator(r.checkpoint_in, model);
    DecodeConfig dcfg;
    dcfg.beam = r.beam;
    dcfg.max_len = r.max_len;
    for (const auto& g : groups) {
      DecodedCaption cap = beam_search(model, store.feature(g.image_id), g.trait_id, dcfg);
      ordered_json row;
      row["image_id"] = g.image_id;
      row["personality"] = g.personality;
      row["caption"] = join_tokens(cap.tokens);
      row["log_prob"] = cap.log_prob;
      out << row.dump() << "\n";
    }
  }
  info("wrote " + std::to_string(groups.size()) + " predictions to " + r.report);
  return 0;
}

int cmd_eval_captions(const Run& r) {
  require(r, {{"predictions", &r.predictions},
              {"captions", &r.captions},
              {"traits", &r.traits},
              {"report", &r.report}});
  TraitTable table = TraitTable::load(r.traits);
  std::vector<CaptionRecord> test = records_of_split(read_captions(r.captions, table),
                                                     Split::test);
  std::map<std::string, std::vector<TokenSeq>> refs;
  for (const auto& rec : test) refs[rec.image_id].push_back(tokenize(rec.caption));

  std::ifstream in(r.predictions);
  if (!in) throw DataError("predictions: cannot open " + r.predictions);
  std::vector<std::pair<std::string, TokenSeq>> predictions;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      throw FormatError("predictions: line " + std::to_string(line_no) + " is not valid JSON");
    }
    if (!j.is_object() || !j.contains("image_id") || !j.contains("caption") ||
        !j["image_id"].is_string() || !j["caption"].is_string())
      throw FormatError("predictions: line " + std::to_string(line_no) +
                        " needs string fields image_id and caption");
    std::string id = j["image_id"].get<std::string>();
    if (!seen.insert(id).second)
      throw DataError("predictions: image " + id + " appears more than once");
    predictions.emplace_back(id, tokenize(j["caption"].get<std::string>()));
  }

  MetricReport m = evaluate_captions(predictions, refs);
  ordered_json report;
  report["images"] = predictions.size();
  report["bleu"] = m.bleu;
  report["rouge_l"] = m.rouge_l;
  report["cider"] = m.cider;
  ordered_json per = ordered_json::array();
  for (const auto& pi : m.per_image) {
    ordered_json j;
    j["image_id"] = pi.image_id;
    j["rouge_l"] = pi.rouge_l;
    j["cider"] = pi.cider;
    per.push_back(j);
  }
  report["per_image"] = per;
  write_json_file(r.report, report);
  info("scored " + std::to_string(predictions.size()) + " predictions: cider " +
       std::to_string(m.cider));
  return 0;
}

int cmd_train_classifier(const Run& r) {
  require(r, {{"captions", &r.captions},
              {"traits", &r.traits},
              {"vocab", &r.vocab},
              {"checkpoint_out", &r.checkpoint_out},
              {"report", &r.report}});
  TraitTable table = TraitTable::load(r.traits);
  Vocabulary vocab = Vocabulary::load(r.vocab);
  std::vector<CaptionRecord> records = read_captions(r.captions, table);

  ClassifierConfig cfg;
  cfg.text = text_config(r);
  Rng rng(r.seed);
  TraitClassifier<float> model(cfg, vocab, table, rng);
  apply_pretrained(r, model.text(), vocab);

  ClassifierTrainConfig tcfg;
  tcfg.batch = r.batch;
  tcfg.epochs = r.epochs;
  tcfg.seed = r.seed;
  tcfg.opt.lr = r.lr;
  ClassifierLog log = train_trait_classifier(records, model, tcfg);
  save_checkpoint(r.checkpoint_out, model.named_parameters());

  ordered_json report;
  report["traits"] = table.size();
  report["updates"] = log.batch_loss.size();
  report["first_loss"] = log.batch_loss.empty() ? 0.0 : log.batch_loss.front();
  report["final_loss"] = log.batch_loss.empty() ? 0.0 : log.batch_loss.back();
  report["batch_loss"] = log.batch_loss;
  report["dev_accuracy"] = log.dev_accuracy;
  write_json_file(r.report, report);
  info("classifier written to " + r.checkpoint_out);
  return 0;
}

int cmd_coverage(const Run& r) {
  require(r, {{"input", &r.input},
              {"traits", &r.traits},
              {"vocab", &r.vocab},
              {"checkpoint_in", &r.checkpoint_in},
              {"report", &r.report}});
  TraitTable table = TraitTable::load(r.traits);
  Vocabulary vocab = Vocabulary::load(r.vocab);
  ClassifierConfig cfg;
  cfg.text = text_config(r);
  Rng rng(r.seed);
  TraitClassifier<float> model(cfg, vocab, table, rng);
  load_checkpoint(r.checkpoint_in, model.named_parameters());

  std::vector<std::string> captions = read_caption_fields(r.input);
  CoverageReport cov = trait_coverage(captions, model);

  ordered_json report;
  report["captions"] = captions.size();
  auto jclass = [](const CoverageClass& c) {
    ordered_json j;
    j["covered"] = c.covered;
    j["total"] = c.total;
    j["fraction"] = c.fraction;
    return j;
  };
  report["positive"] = jclass(cov.positive);
  report["neutral"] = jclass(cov.neutral);
  report["negative"] = jclass(cov.negative);
  write_json_file(r.report, report);
  info("coverage over " + std::to_string(captions.size()) + " captions written to " + r.report);
  return 0;
}

int dispatch(const Run& r) {
  if (r.subcommand == "gen-data") return cmd_gen_data(r);
  if (r.subcommand == "build-vocab") return cmd_build_vocab(r);
  if (r.subcommand == "pretrain-text") return cmd_pretrain_text(r);
  if (r.subcommand == "train-retrieval") return cmd_train_retrieval(r);
  if (r.subcommand == "eval-retrieval") return cmd_eval_retrieval(r);
  if (r.subcommand == "train-gen") return cmd_train_gen(r);
  if (r.subcommand == "predict") return cmd_predict(r);
  if (r.subcommand == "eval-captions") return cmd_eval_captions(r);
  if (r.subcommand == "train-classifier") return cmd_train_classifier(r);
  if (r.subcommand == "coverage") return cmd_coverage(r);
  throw ConfigError("unknown subcommand \"" + r.subcommand + "\"");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"personality-conditioned image captioning over precomputed features"};
  Run run;
  app.add_option("subcommand", run.subcommand,
                 "gen-data | build-vocab | pretrain-text | train-retrieval | eval-retrieval | "
                 "train-gen | predict | eval-captions | train-classifier | coverage")
      ->required();
  std::vector<Field> fields = register_flags(app, run);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (!run.config.empty()) apply_config_file(app, fields, run.config);
    int code = dispatch(run);
    if (code == 0) write_json_file(resolved_path(run), resolved_config(run, fields));
    return code;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
