#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fvlab/rng.hpp"

namespace fvlab {

inline constexpr int kNumObjects = 32;
inline constexpr int kObjectsPerScene = 6;
inline constexpr int kCanvasSize = 800;
inline constexpr int kReferenceMin = 200;
inline constexpr int kReferenceMax = 600;
inline constexpr double kDistractorMinDistance = 300.0;
inline constexpr int kMaxPlacementAttempts = 1000;

// Axis offset range for relational objects and the perpendicular jitter.
inline constexpr int kOffsetMin = 120;
inline constexpr int kOffsetMax = 200;
inline constexpr int kJitter = 10;

struct ObjectId {
  int value = 0;
  friend constexpr bool operator==(ObjectId, ObjectId) = default;
  friend constexpr auto operator<=>(ObjectId, ObjectId) = default;
};

// Registry of the 32 scene objects. Names are unique lowercase labels.
std::span<const std::string_view, kNumObjects> object_names();
std::string_view object_name(ObjectId id);
ObjectId object_by_name(std::string_view name);

enum class Relation : std::uint8_t {
  Above,
  Below,
  LeftOf,
  RightOf,
  AboveLeft,
  AboveRight,
  BelowLeft,
  BelowRight,
};

inline constexpr std::array<Relation, 4> kBaseRelations = {Relation::Above, Relation::Below,
                                                           Relation::LeftOf, Relation::RightOf};
inline constexpr std::array<Relation, 4> kDiagonalRelations = {
    Relation::AboveLeft, Relation::AboveRight, Relation::BelowLeft, Relation::BelowRight};

constexpr bool is_base(Relation r) noexcept { return static_cast<int>(r) < 4; }
constexpr bool is_diagonal(Relation r) noexcept { return !is_base(r); }

std::string_view relation_name(Relation r);
Relation relation_from_name(std::string_view name);

enum class SceneMode : std::uint8_t { Base, Diagonal };

struct PlacedObject {
  ObjectId id;
  int x = 0;
  int y = 0;
  friend bool operator==(const PlacedObject&, const PlacedObject&) = default;
};

// Six objects on an 800x800 canvas, origin top-left, y growing downward.
// Slot order is shuffled so the reference and relational objects do not sit
// at fixed slot indices.
struct Scene {
  int id = 0;
  std::array<PlacedObject, kObjectsPerScene> objects{};
  int reference_index = 0;
  SceneMode mode = SceneMode::Base;

  const PlacedObject& reference() const { return objects[reference_index]; }
  // Slot index of `id`; throws LookupError when absent.
  int slot_of(ObjectId id) const;
  bool contains(ObjectId id) const;
  friend bool operator==(const Scene&, const Scene&) = default;
};

Scene generate_scene(Rng& rng, SceneMode mode, int scene_id = 0);

// Relation that `b` holds with respect to `a`, by 45-degree angular sectors
// centred on the axes and diagonals. Returns nullopt for coincident points or
// exact sector boundaries.
std::optional<Relation> relation_between(const Scene& scene, ObjectId a, ObjectId b);
std::optional<Relation> relation_of_offset(int dx, int dy);

// The unique object holding `r` relative to the reference; LookupError if
// the scene has no such object.
ObjectId object_in_relation(const Scene& scene, Relation r);

enum class Split : std::uint8_t { Extraction, Finetune, Test, Analogy };

std::string_view split_name(Split s);
Split split_from_name(std::string_view name);

struct SplitSizes {
  int extraction = 4000;
  int finetune = 1000;
  int test = 1000;
  int analogy = 1000;
  friend bool operator==(const SplitSizes&, const SplitSizes&) = default;
};

// All scenes in one table indexed by scene id; splits are contiguous id
// ranges in the order extraction, finetune, test, analogy.
struct DatasetBundle {
  std::uint64_t seed = 0;
  SplitSizes sizes;
  std::vector<Scene> scenes;

  std::span<const Scene> split(Split s) const;
  const Scene& scene(int id) const;
  friend bool operator==(const DatasetBundle&, const DatasetBundle&) = default;
};

DatasetBundle generate_dataset(std::uint64_t master_seed, SplitSizes sizes = {});

struct Demo {
  int scene_id = 0;
  ObjectId query;
  ObjectId answer;
  friend bool operator==(const Demo&, const Demo&) = default;
};

struct Query {
  int scene_id = 0;
  ObjectId label;
  friend bool operator==(const Query&, const Query&) = default;
};

struct TaskInstance {
  std::vector<Demo> demos;
  Query query;
  ObjectId gold;
  Relation relation = Relation::Above;
  bool perturbed = false;

  int shots() const { return static_cast<int>(demos.size()); }
  friend bool operator==(const TaskInstance&, const TaskInstance&) = default;
};

TaskInstance sample_task(const DatasetBundle& bundle, Split split, Relation relation, int n_shots,
                         bool perturbed, Rng& rng);

// Zero-shot task on a given scene: query is the reference object, gold is the
// object holding `relation`.
TaskInstance zero_shot_task(const Scene& scene, Relation relation);

// Throws ValidationError when the task breaks its invariants against `bundle`.
void validate_task(const DatasetBundle& bundle, const TaskInstance& task);

// JSON-lines persistence. The first line is a header carrying seed and split
// sizes; every following line is one scene record.
void save_dataset(const DatasetBundle& bundle, const std::filesystem::path& path);
DatasetBundle load_dataset(const std::filesystem::path& path);
std::string serialize_dataset(const DatasetBundle& bundle);
DatasetBundle parse_dataset(std::string_view text);

std::string task_to_json(const TaskInstance& task);
TaskInstance task_from_json(std::string_view line);
void save_tasks(std::span<const TaskInstance> tasks, const std::filesystem::path& path);
std::vector<TaskInstance> load_tasks(const std::filesystem::path& path);

}  // namespace fvlab
