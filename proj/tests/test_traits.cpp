#include <doctest.h>

#include <cstdio>

#include "percap/error.hpp"
#include "percap/traits.hpp"

using namespace percap;

namespace {
const char* kDefaultTable = PERCAP_TEST_DIR "/../assets/traits_default.json";
}

TEST_CASE("polarity string round trip") {
  for (Polarity p : {Polarity::positive, Polarity::neutral, Polarity::negative})
    CHECK(polarity_from_string(to_string(p)) == p);
  CHECK_THROWS_AS(polarity_from_string("cheerful"), FormatError);
}

TEST_CASE("from_entries rejects duplicate names") {
  CHECK_THROWS_AS(TraitTable::from_entries({{"Sweet", Polarity::positive},
                                            {"Sweet", Polarity::negative}}),
                  FormatError);
}

TEST_CASE("default table has 215 traits split 85/60/70") {
  TraitTable table = TraitTable::load(kDefaultTable);
  CHECK(table.size() == 215);
  CHECK(table.ids_of_polarity(Polarity::positive).size() == 85);
  CHECK(table.ids_of_polarity(Polarity::neutral).size() == 60);
  CHECK(table.ids_of_polarity(Polarity::negative).size() == 70);
  for (std::size_t id = 0; id < table.size(); ++id)
    CHECK(table.id_of(table.trait(id).name) == static_cast<int>(id));
}

TEST_CASE("lookup misses") {
  TraitTable table = TraitTable::load(kDefaultTable);
  CHECK(table.id_of("NotATrait") == -1);
  CHECK_THROWS_AS(table.trait(table.size()), IndexError);
}

TEST_CASE("save and load round trip") {
  TraitTable table = TraitTable::from_entries({{"Sweet", Polarity::positive},
                                               {"Formal", Polarity::neutral},
                                               {"Cruel", Polarity::negative}});
  const char* path = "tmp_traits.json";
  table.save(path);
  TraitTable back = TraitTable::load(path);
  REQUIRE(back.size() == 3);
  for (std::size_t id = 0; id < 3; ++id) {
    CHECK(back.trait(id).name == table.trait(id).name);
    CHECK(back.trait(id).polarity == table.trait(id).polarity);
  }
  std::remove(path);
}
