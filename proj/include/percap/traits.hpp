#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace percap {

enum class Polarity { positive, neutral, negative };

std::string to_string(Polarity p);
Polarity polarity_from_string(const std::string& s);

struct Trait {
  std::string name;
  Polarity polarity;
};

// Trait taxonomy. File format: JSON array of {"name", "polarity"}; the
// trait id is the array index.
class TraitTable {
 public:
  TraitTable() = default;
  static TraitTable from_entries(std::vector<Trait> entries);
  static TraitTable load(const std::string& path);
  void save(const std::string& path) const;

  std::size_t size() const { return entries_.size(); }
  const Trait& trait(std::size_t id) const;
  // -1 when the name is not in the table
  int id_of(const std::string& name) const;
  const std::vector<Trait>& entries() const { return entries_; }
  std::vector<std::size_t> ids_of_polarity(Polarity p) const;

 private:
  std::vector<Trait> entries_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace percap
