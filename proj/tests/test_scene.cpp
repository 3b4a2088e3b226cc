#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "bevref/geometry.hpp"
#include "bevref/scene.hpp"

using namespace bevref;
using namespace bevref::scene;

namespace {

std::vector<std::size_t> candidate_set(const Scenario& s) {
  const auto& tgt = s.objects[static_cast<std::size_t>(s.target_index())];
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < s.objects.size(); ++i)
    if (s.objects[i].category == tgt.category && s.objects[i].attribute == tgt.attribute)
      out.push_back(i);
  return out;
}

// Brute-force referent resolution: which objects of the described category and
// attribute satisfy the description's relation? Generation must make exactly
// the target qualify, otherwise the description is not grounding anything.
std::vector<std::size_t> resolve_description(const Scenario& s) {
  const auto cands = candidate_set(s);
  if (s.relation == Relation::none) return cands;
  const int ci = s.contextual_index();
  REQUIRE(ci >= 0);
  const auto& ctx = s.objects[static_cast<std::size_t>(ci)].box;
  std::vector<std::size_t> hits;
  for (std::size_t c : cands) {
    std::vector<geo::Box3D> rivals;
    for (std::size_t o : cands)
      if (o != c) rivals.push_back(s.objects[o].box);
    if (relation_holds(s.relation, s.objects[c].box, ctx, rivals)) hits.push_back(c);
  }
  return hits;
}

}  // namespace

TEST_CASE("generation is deterministic") {
  const auto a = generate(99, 6, Difficulty::ambiguous);
  const auto b = generate(99, 6, Difficulty::ambiguous);
  REQUIRE(a.size() == 6);
  CHECK(a == b);
  const auto c = generate(100, 6, Difficulty::ambiguous);
  CHECK(a != c);
}

TEST_CASE("every description resolves to exactly the target") {
  for (auto difficulty : {Difficulty::easy, Difficulty::ambiguous}) {
    const auto scenarios = generate(31, 24, difficulty);
    for (const auto& s : scenarios) {
      const int ti = s.target_index();
      REQUIRE(ti >= 0);
      const auto hits = resolve_description(s);
      REQUIRE(hits.size() == 1);
      CHECK(hits[0] == static_cast<std::size_t>(ti));
    }
  }
}

TEST_CASE("difficulty controls distractors") {
  for (const auto& s : generate(7, 16, Difficulty::easy)) {
    CHECK(s.relation == Relation::none);
    for (const auto& o : s.objects) CHECK(o.role != Role::ambiguous);
  }
  for (const auto& s : generate(7, 16, Difficulty::ambiguous)) {
    CHECK(s.relation != Relation::none);
    CHECK(s.contextual_index() >= 0);
    int distractors = 0;
    for (const auto& o : s.objects) distractors += o.role == Role::ambiguous;
    CHECK(distractors >= 2);
    // distractors look like the target on purpose
    const auto& tgt = s.objects[static_cast<std::size_t>(s.target_index())];
    for (const auto& o : s.objects)
      if (o.role == Role::ambiguous) {
        CHECK(o.category == tgt.category);
        CHECK(o.attribute == tgt.attribute);
      }
  }
}

TEST_CASE("scenario invariants: one target, points in range, objects grounded") {
  GenParams params;
  for (const auto& s : generate(55, 12, Difficulty::ambiguous, params)) {
    int targets = 0;
    for (const auto& o : s.objects) targets += o.role == Role::target;
    CHECK(targets == 1);
    for (const auto& p : s.points) {
      CHECK(std::abs(p.x) <= params.extent);
      CHECK(std::abs(p.y) <= params.extent);
    }
    for (const auto& o : s.objects) {
      CHECK(std::abs(o.box.cx) <= params.extent);
      CHECK(std::abs(o.box.cy) <= params.extent);
      // resting on the ground plane: center sits half a height above it
      CHECK(o.box.cz ==
            doctest::Approx(params.ground_z + o.box.h / 2.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("descriptions tokenize within budget under the standard vocabulary") {
  const Vocabulary vocab = Vocabulary::standard();
  CHECK(vocab.pad_index() == 0);
  CHECK(vocab.index(vocab.tokens[0]) == 0);
  // wide sweep so every description template shows up
  for (auto difficulty : {Difficulty::easy, Difficulty::ambiguous})
    for (const auto& s : generate(77, 128, difficulty)) {
      const TokenBatch tb = tokenize(s.description, vocab, 12);
      REQUIRE(tb.ids.size() == 12);
      REQUIRE(tb.valid.size() == 12);
      int real = 0;
      for (std::size_t i = 0; i < tb.ids.size(); ++i) {
        real += tb.valid[i];
        if (!tb.valid[i]) CHECK(tb.ids[i] == vocab.pad_index());
      }
      CHECK(real >= 2);
      // valid prefix is contiguous
      for (std::size_t i = 1; i < tb.valid.size(); ++i)
        CHECK(tb.valid[i] <= tb.valid[i - 1]);
    }
  CHECK_THROWS_AS(tokenize("the purple car", vocab, 12), vocab_error);
  CHECK_THROWS_AS(tokenize("car car car car car", vocab, 4), vocab_error);
  // tokenization is case-insensitive
  const TokenBatch up = tokenize("The Gray Car", vocab, 12);
  const TokenBatch lo = tokenize("the gray car", vocab, 12);
  CHECK(up.ids == lo.ids);
}

TEST_CASE("relation predicate fixtures") {
  const auto ctx = geo::make_box(0, 0, 0, 2, 2, 2, 0);
  auto at = [](double x, double y) { return geo::make_box(x, y, 0, 1, 1, 1, 0); };
  const std::vector<geo::Box3D> none;

  CHECK(relation_holds(Relation::left_of, at(-5, 1), ctx, none));
  CHECK(!relation_holds(Relation::left_of, at(5, 1), ctx, none));
  CHECK(!relation_holds(Relation::left_of, at(-1, 5), ctx, none));  // y dominates
  CHECK(relation_holds(Relation::right_of, at(5, -1), ctx, none));
  CHECK(relation_holds(Relation::in_front_of, at(1, 5), ctx, none));
  CHECK(relation_holds(Relation::behind, at(1, -5), ctx, none));

  // predicates rotate with the contextual box frame
  const auto ctx90 = geo::make_box(0, 0, 0, 2, 2, 2, std::numbers::pi / 2);
  CHECK(relation_holds(Relation::left_of, at(0, -5), ctx90, none));
  CHECK(relation_holds(Relation::in_front_of, at(-5, 0), ctx90, none));

  CHECK(relation_holds(Relation::next_to, at(3, 4), ctx, none));       // d = 5 < 6
  CHECK(!relation_holds(Relation::next_to, at(6.1, 0), ctx, none));
  CHECK(!relation_holds(Relation::next_to, at(3, 4), ctx, none, 4.0));  // tighter radius

  const std::vector<geo::Box3D> rivals = {at(4, 0), at(0, 7)};
  CHECK(relation_holds(Relation::nearest, at(1, 0), ctx, rivals));
  CHECK(!relation_holds(Relation::nearest, at(5, 0), ctx, rivals));
  // ties lose: nearest must be strict
  CHECK(!relation_holds(Relation::nearest, at(-4, 0), ctx, rivals));

  CHECK(!relation_holds(Relation::none, at(1, 0), ctx, none));
}

TEST_CASE("json round-trip is exact") {
  for (const auto& s : generate(123, 8, Difficulty::ambiguous)) {
    const std::string line = scenario_to_json(s);
    const Scenario back = scenario_from_json(line, 1);
    CHECK(back == s);
  }
}

TEST_CASE("dataset save/load round-trip") {
  const std::string path = "/tmp/bevref_test_scene_roundtrip.jsonl";
  const auto scenarios = generate(9, 5, Difficulty::easy);
  save_dataset(scenarios, path);
  const auto loaded = load_dataset(path);
  CHECK(loaded == scenarios);
  std::remove(path.c_str());
}

TEST_CASE("parse errors carry line numbers") {
  CHECK_THROWS_AS(load_dataset("/tmp/bevref_no_such_file.jsonl"), parse_error);

  const std::string path = "/tmp/bevref_test_scene_bad.jsonl";
  {
    std::ofstream out(path);
    out << "{\"format\":\"bevref-scenes\",\"version\":1}\n";
    out << scenario_to_json(generate(9, 1, Difficulty::easy)[0]) << "\n";
    out << "{not json\n";
  }
  try {
    load_dataset(path);
    FAIL("expected parse_error");
  } catch (const parse_error& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  std::remove(path.c_str());

  // structurally valid JSON but no target object
  Scenario s = generate(9, 1, Difficulty::easy)[0];
  s.objects[static_cast<std::size_t>(s.target_index())].role = Role::background;
  CHECK_THROWS_AS(scenario_from_json(scenario_to_json(s), 4), parse_error);
  try {
    scenario_from_json("{\"id\":3}", 17);
    FAIL("expected parse_error");
  } catch (const parse_error& e) {
    CHECK(std::string(e.what()).find("line 17") != std::string::npos);
  }
}

TEST_CASE("enum string round-trips") {
  for (int i = 0; i < kCategoryCount; ++i) {
    const auto c = static_cast<Category>(i);
    CHECK(category_from_string(to_string(c)) == c);
  }
  for (int i = 0; i < kAttributeCount; ++i) {
    const auto a = static_cast<Attribute>(i);
    CHECK(attribute_from_string(to_string(a)) == a);
  }
  for (auto r : {Relation::left_of, Relation::right_of, Relation::in_front_of, Relation::behind,
                 Relation::next_to, Relation::nearest, Relation::none})
    CHECK(relation_from_string(to_string(r)) == r);
  CHECK_THROWS_AS(category_from_string("tank"), parse_error);
}
