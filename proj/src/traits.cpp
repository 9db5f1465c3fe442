#include "percap/traits.hpp"

#include <json.hpp>

#include <fstream>

#include "percap/error.hpp"

namespace percap {

std::string to_string(Polarity p) {
  switch (p) {
    case Polarity::positive: return "positive";
    case Polarity::neutral: return "neutral";
    case Polarity::negative: return "negative";
  }
  throw ContractError("polarity: invalid enum value");
}

Polarity polarity_from_string(const std::string& s) {
  if (s == "positive") return Polarity::positive;
  if (s == "neutral") return Polarity::neutral;
  if (s == "negative") return Polarity::negative;
  throw FormatError("polarity: expected positive|neutral|negative, got '" + s + "'");
}

TraitTable TraitTable::from_entries(std::vector<Trait> entries) {
  TraitTable t;
  t.entries_ = std::move(entries);
  for (std::size_t i = 0; i < t.entries_.size(); ++i) {
    auto [it, inserted] = t.index_.emplace(t.entries_[i].name, static_cast<int>(i));
    if (!inserted)
      throw FormatError("trait table: duplicate trait name '" + t.entries_[i].name + "'");
  }
  return t;
}

TraitTable TraitTable::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("trait table: cannot open " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("trait table: " + path + ": " + e.what());
  }
  if (!doc.is_array()) throw FormatError("trait table: " + path + " must be a JSON array");
  std::vector<Trait> entries;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& e = doc[i];
    if (!e.is_object() || !e.contains("name") || !e.contains("polarity"))
      throw FormatError("trait table: entry " + std::to_string(i) +
                        " must be {\"name\", \"polarity\"}");
    entries.push_back(
        {e["name"].get<std::string>(), polarity_from_string(e["polarity"].get<std::string>())});
  }
  return from_entries(std::move(entries));
}

void TraitTable::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("trait table: cannot write " + path);
  nlohmann::ordered_json doc = nlohmann::ordered_json::array();
  for (const auto& t : entries_) doc.push_back({{"name", t.name}, {"polarity", to_string(t.polarity)}});
  out << doc.dump(1) << '\n';
}

const Trait& TraitTable::trait(std::size_t id) const {
  if (id >= entries_.size())
    throw IndexError("trait table: id " + std::to_string(id) + " out of range [0, " +
                     std::to_string(entries_.size()) + ")");
  return entries_[id];
}

int TraitTable::id_of(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? -1 : it->second;
}

std::vector<std::size_t> TraitTable::ids_of_polarity(Polarity p) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].polarity == p) out.push_back(i);
  return out;
}

}  // namespace percap
