#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "fixtures.hpp"
#include "fvlab/error.hpp"
#include "fvlab/scenegen.hpp"

using namespace fvlab;
using fvlab::testing::temp_path;
using fvlab::testing::tiny_dataset;

namespace {

Scene two_object_scene(int ax, int ay, int bx, int by) {
  Scene s;
  s.objects[0] = {ObjectId{0}, ax, ay};
  s.objects[1] = {ObjectId{1}, bx, by};
  for (int i = 2; i < kObjectsPerScene; ++i) s.objects[static_cast<std::size_t>(i)] = {ObjectId{i}, 10 * i, 700};
  return s;
}

// Sector oracle: angle of b from a measured counter-clockwise from +x with y up.
std::optional<Relation> sector_oracle(int dx, int dy) {
  const double deg = std::atan2(-static_cast<double>(dy), static_cast<double>(dx)) * 180.0 / M_PI;
  const double a = deg < 0 ? deg + 360.0 : deg;
  const std::array<Relation, 8> ring = {Relation::RightOf,   Relation::AboveRight, Relation::Above,
                                        Relation::AboveLeft, Relation::LeftOf,     Relation::BelowLeft,
                                        Relation::Below,     Relation::BelowRight};
  for (int k = 0; k < 8; ++k) {
    const double centre = 45.0 * k;
    double diff = std::fabs(a - centre);
    diff = std::min(diff, 360.0 - diff);
    if (diff < 22.5 - 1e-9) return ring[static_cast<std::size_t>(k)];
  }
  return std::nullopt;
}

}  // namespace

TEST_CASE("relation_between follows image coordinates and the sector rule") {
  CHECK(relation_between(two_object_scene(400, 400, 400, 260), ObjectId{0}, ObjectId{1}) == Relation::Above);
  CHECK(relation_between(two_object_scene(400, 400, 560, 400), ObjectId{0}, ObjectId{1}) == Relation::RightOf);
  CHECK(relation_between(two_object_scene(400, 400, 540, 260), ObjectId{0}, ObjectId{1}) == Relation::AboveRight);
  CHECK_THROWS_AS(relation_between(two_object_scene(400, 400, 400, 260), ObjectId{0}, ObjectId{31}), LookupError);
}

TEST_CASE("relation_of_offset agrees with an angular sector oracle") {
  for (int dx = -220; dx <= 220; dx += 7) {
    for (int dy = -220; dy <= 220; dy += 7) {
      if (dx == 0 && dy == 0) continue;
      const auto oracle = sector_oracle(dx, dy);
      if (!oracle) continue;  // boundary cells are not comparable at this resolution
      CHECK(relation_of_offset(dx, dy) == oracle);
    }
  }
  CHECK_FALSE(relation_of_offset(0, 0).has_value());
}

TEST_CASE("relation_between is antisymmetric on axis pairs") {
  const Scene s = tiny_dataset().scene(0);
  const ObjectId ref = s.reference().id;
  for (Relation r : kBaseRelations) {
    const ObjectId o = object_in_relation(s, r);
    const auto back = relation_between(s, o, ref);
    REQUIRE(back.has_value());
    const Relation expect = r == Relation::Above   ? Relation::Below
                            : r == Relation::Below ? Relation::Above
                            : r == Relation::LeftOf ? Relation::RightOf
                                                    : Relation::LeftOf;
    CHECK(*back == expect);
  }
}

TEST_CASE("generate_scene is deterministic and respects the geometry") {
  Rng a(5), b(5);
  for (int i = 0; i < 50; ++i) {
    const Scene sa = generate_scene(a, SceneMode::Base, i);
    const Scene sb = generate_scene(b, SceneMode::Base, i);
    CHECK(sa == sb);
    CHECK(sa.reference().x >= kReferenceMin);
    CHECK(sa.reference().x <= kReferenceMax);
    CHECK(sa.reference().y >= kReferenceMin);
    CHECK(sa.reference().y <= kReferenceMax);
  }
}

TEST_CASE("default dataset has the stated split sizes and invariants") {
  const DatasetBundle b = generate_dataset(7);
  CHECK(b.split(Split::Extraction).size() == 4000);
  CHECK(b.split(Split::Finetune).size() == 1000);
  CHECK(b.split(Split::Test).size() == 1000);
  CHECK(b.split(Split::Analogy).size() == 1000);
  for (const Scene& s : b.scenes) {
    const PlacedObject& ref = s.reference();
    REQUIRE(ref.x >= kReferenceMin);
    REQUIRE(ref.x <= kReferenceMax);
    REQUIRE(ref.y >= kReferenceMin);
    REQUIRE(ref.y <= kReferenceMax);
    std::set<int> ids;
    for (const auto& o : s.objects) ids.insert(o.id.value);
    REQUIRE(ids.size() == kObjectsPerScene);
    const auto rels = s.mode == SceneMode::Base ? kBaseRelations : kDiagonalRelations;
    for (Relation r : rels) {
      int count = 0;
      for (int i = 0; i < kObjectsPerScene; ++i) {
        if (i == s.reference_index) continue;
        const auto& o = s.objects[static_cast<std::size_t>(i)];
        if (relation_of_offset(o.x - ref.x, o.y - ref.y) == r) ++count;
      }
      REQUIRE(count == 1);
    }
    // The distractor is the one object in none of the mode's relations.
    int distractor = -1;
    for (int i = 0; i < kObjectsPerScene; ++i) {
      if (i == s.reference_index) continue;
      const auto& o = s.objects[static_cast<std::size_t>(i)];
      const auto r = relation_of_offset(o.x - ref.x, o.y - ref.y);
      if (!r || std::find(rels.begin(), rels.end(), *r) == rels.end()) distractor = i;
    }
    REQUIRE(distractor >= 0);
    for (int i = 0; i < kObjectsPerScene; ++i) {
      if (i == distractor) continue;
      const auto& d = s.objects[static_cast<std::size_t>(distractor)];
      const auto& o = s.objects[static_cast<std::size_t>(i)];
      REQUIRE(std::hypot(d.x - o.x, d.y - o.y) >= kDistractorMinDistance);
    }
  }
  for (const Scene& s : b.split(Split::Analogy)) CHECK(s.mode == SceneMode::Diagonal);
}

TEST_CASE("generate_dataset is a pure function of its seed") {
  const SplitSizes small{200, 50, 50, 50};
  CHECK(serialize_dataset(generate_dataset(7, small)) == serialize_dataset(generate_dataset(7, small)));
  CHECK(serialize_dataset(generate_dataset(7, small)) != serialize_dataset(generate_dataset(8, small)));
}

TEST_CASE("sample_task builds clean and perturbed prompts") {
  const DatasetBundle& b = tiny_dataset();
  Rng rng(9);
  SUBCASE("clean prompts answer with the relational object") {
    for (int i = 0; i < 20; ++i) {
      const TaskInstance t = sample_task(b, Split::Extraction, Relation::Above, 4, false, rng);
      CHECK(t.shots() == 4);
      std::set<int> scenes{t.query.scene_id};
      for (const Demo& d : t.demos) {
        scenes.insert(d.scene_id);
        CHECK(d.answer == object_in_relation(b.scene(d.scene_id), Relation::Above));
        CHECK(d.query == b.scene(d.scene_id).reference().id);
      }
      CHECK(scenes.size() == 5);
      CHECK(t.gold == object_in_relation(b.scene(t.query.scene_id), Relation::Above));
      CHECK_NOTHROW(validate_task(b, t));
    }
  }
  SUBCASE("perturbed demos instantiate each base relation once") {
    for (int i = 0; i < 20; ++i) {
      const TaskInstance t = sample_task(b, Split::Extraction, Relation::LeftOf, 4, true, rng);
      CHECK(t.perturbed);
      std::set<Relation> seen;
      for (const Demo& d : t.demos) {
        const auto r = relation_between(b.scene(d.scene_id), d.query, d.answer);
        REQUIRE(r.has_value());
        seen.insert(*r);
      }
      CHECK(seen.size() == 4);
      CHECK(t.gold == object_in_relation(b.scene(t.query.scene_id), Relation::LeftOf));
    }
  }
  SUBCASE("zero-shot") {
    const TaskInstance t = sample_task(b, Split::Test, Relation::Below, 0, false, rng);
    CHECK(t.demos.empty());
    CHECK(t.query.label == b.scene(t.query.scene_id).reference().id);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(sample_task(b, Split::Extraction, Relation::AboveLeft, 4, false, rng), InvalidRequest);
    CHECK_THROWS_AS(sample_task(b, Split::Extraction, Relation::Above, 2, true, rng), InvalidRequest);
    CHECK_NOTHROW(sample_task(b, Split::Analogy, Relation::AboveLeft, 1, false, rng));
  }
}

TEST_CASE("dataset persistence round trips and rejects bad files") {
  const DatasetBundle& b = tiny_dataset();
  const auto path = temp_path("dataset.jsonl");
  save_dataset(b, path);
  CHECK(load_dataset(path) == b);

  const std::string text = serialize_dataset(b);
  CHECK_THROWS_AS(parse_dataset(text.substr(0, text.size() / 2)), ParseError);

  std::string bad = text;
  const auto first_scene = bad.find('\n') + 1;
  const auto obj = bad.find("[[", first_scene);
  REQUIRE(obj != std::string::npos);
  const auto comma = bad.find(',', obj);
  bad.replace(obj + 2, comma - obj - 2, "99");
  CHECK_THROWS_AS(parse_dataset(bad), ValidationError);
}

TEST_CASE("task records round trip through JSON") {
  const DatasetBundle& b = tiny_dataset();
  Rng rng(4);
  std::vector<TaskInstance> tasks;
  tasks.push_back(sample_task(b, Split::Extraction, Relation::RightOf, 8, false, rng));
  tasks.push_back(sample_task(b, Split::Extraction, Relation::Below, 4, true, rng));
  tasks.push_back(sample_task(b, Split::Analogy, Relation::BelowLeft, 1, false, rng));
  for (const auto& t : tasks) CHECK(task_from_json(task_to_json(t)) == t);
  const auto path = temp_path("tasks.jsonl");
  save_tasks(tasks, path);
  CHECK(load_tasks(path) == tasks);
}
