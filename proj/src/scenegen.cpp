#include "fvlab/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "fvlab/error.hpp"

namespace fvlab {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr std::array<std::string_view, kNumObjects> kObjectNames = {
    "bagel",  "plate",  "apple",  "anchor", "basket", "bell",   "bench",   "boot",
    "bottle", "bowl",   "brush",  "bucket", "cactus", "camera", "candle",  "chair",
    "clock",  "cup",    "drum",   "fan",    "guitar", "hammer", "helmet",  "kettle",
    "lamp",   "mug",    "piano",  "radio",  "shoe",   "teapot", "umbrella", "vase"};

constexpr std::array<std::string_view, 8> kRelationNames = {
    "above", "below", "left_of", "right_of", "above_left", "above_right", "below_left", "below_right"};

constexpr std::array<std::string_view, 4> kSplitNames = {"extraction", "finetune", "test", "analogy"};

// tan(22.5 deg) and tan(67.5 deg).
const double kTanLow = std::sqrt(2.0) - 1.0;
const double kTanHigh = std::sqrt(2.0) + 1.0;

bool on_canvas(int x, int y) { return x >= 0 && x < kCanvasSize && y >= 0 && y < kCanvasSize; }

double distance(const PlacedObject& a, const PlacedObject& b) {
  return std::hypot(static_cast<double>(a.x - b.x), static_cast<double>(a.y - b.y));
}

// Offset of the relational object for `r`, given axis and perpendicular draws.
std::pair<int, int> relational_offset(Relation r, int off, int off2, int jitter) {
  switch (r) {
    case Relation::Above: return {jitter, -off};
    case Relation::Below: return {jitter, off};
    case Relation::LeftOf: return {-off, jitter};
    case Relation::RightOf: return {off, jitter};
    case Relation::AboveLeft: return {-off, -off2};
    case Relation::AboveRight: return {off, -off2};
    case Relation::BelowLeft: return {-off, off2};
    case Relation::BelowRight: return {off, off2};
  }
  return {0, 0};
}

std::span<const Relation, 4> mode_relations(SceneMode mode) {
  return mode == SceneMode::Base ? std::span<const Relation, 4>(kBaseRelations)
                                 : std::span<const Relation, 4>(kDiagonalRelations);
}

}  // namespace

std::span<const std::string_view, kNumObjects> object_names() { return kObjectNames; }

std::string_view object_name(ObjectId id) {
  if (id.value < 0 || id.value >= kNumObjects) {
    throw LookupError("unknown object id " + std::to_string(id.value));
  }
  return kObjectNames[static_cast<std::size_t>(id.value)];
}

ObjectId object_by_name(std::string_view name) {
  auto it = std::find(kObjectNames.begin(), kObjectNames.end(), name);
  if (it == kObjectNames.end()) throw LookupError("unknown object label '" + std::string(name) + "'");
  return ObjectId{static_cast<int>(it - kObjectNames.begin())};
}

std::string_view relation_name(Relation r) { return kRelationNames[static_cast<std::size_t>(r)]; }

Relation relation_from_name(std::string_view name) {
  auto it = std::find(kRelationNames.begin(), kRelationNames.end(), name);
  if (it == kRelationNames.end()) throw LookupError("unknown relation '" + std::string(name) + "'");
  return static_cast<Relation>(it - kRelationNames.begin());
}

std::string_view split_name(Split s) { return kSplitNames[static_cast<std::size_t>(s)]; }

Split split_from_name(std::string_view name) {
  auto it = std::find(kSplitNames.begin(), kSplitNames.end(), name);
  if (it == kSplitNames.end()) throw LookupError("unknown split '" + std::string(name) + "'");
  return static_cast<Split>(it - kSplitNames.begin());
}

int Scene::slot_of(ObjectId id) const {
  for (int i = 0; i < kObjectsPerScene; ++i) {
    if (objects[i].id == id) return i;
  }
  throw LookupError("object " + std::to_string(id.value) + " not in scene " + std::to_string(this->id));
}

bool Scene::contains(ObjectId id) const {
  return std::any_of(objects.begin(), objects.end(), [&](const PlacedObject& o) { return o.id == id; });
}

std::optional<Relation> relation_of_offset(int dx, int dy) {
  if (dx == 0 && dy == 0) return std::nullopt;
  const int up = -dy;
  const double ax = std::abs(dx);
  const double ay = std::abs(up);
  if (ay < kTanLow * ax) return dx > 0 ? Relation::RightOf : Relation::LeftOf;
  if (ay > kTanHigh * ax) return up > 0 ? Relation::Above : Relation::Below;
  if (ay > kTanLow * ax && ay < kTanHigh * ax) {
    if (up > 0) return dx > 0 ? Relation::AboveRight : Relation::AboveLeft;
    return dx > 0 ? Relation::BelowRight : Relation::BelowLeft;
  }
  return std::nullopt;
}

std::optional<Relation> relation_between(const Scene& scene, ObjectId a, ObjectId b) {
  if (a == b) throw InvalidArgument("relation_between needs two distinct objects");
  const PlacedObject& pa = scene.objects[scene.slot_of(a)];
  const PlacedObject& pb = scene.objects[scene.slot_of(b)];
  return relation_of_offset(pb.x - pa.x, pb.y - pa.y);
}

ObjectId object_in_relation(const Scene& scene, Relation r) {
  const PlacedObject& ref = scene.reference();
  std::optional<ObjectId> found;
  for (int i = 0; i < kObjectsPerScene; ++i) {
    if (i == scene.reference_index) continue;
    const PlacedObject& o = scene.objects[i];
    if (relation_of_offset(o.x - ref.x, o.y - ref.y) == r) {
      if (found) {
        throw LookupError("scene " + std::to_string(scene.id) + " has two objects " +
                          std::string(relation_name(r)) + " the reference");
      }
      found = o.id;
    }
  }
  if (!found) {
    throw LookupError("scene " + std::to_string(scene.id) + " has no object " +
                      std::string(relation_name(r)) + " the reference");
  }
  return *found;
}

Scene generate_scene(Rng& rng, SceneMode mode, int scene_id) {
  std::array<int, kNumObjects> pool{};
  for (int i = 0; i < kNumObjects; ++i) pool[i] = i;
  for (int i = 0; i < kObjectsPerScene; ++i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(i, kNumObjects - 1));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
  }

  const auto relations = mode_relations(mode);
  std::array<PlacedObject, kObjectsPerScene> placed{};
  int attempts = 0;
  bool layout_ok = false;
  bool done = false;
  int distractor_failures = 0;
  while (!done) {
    if (attempts++ >= kMaxPlacementAttempts) {
      throw GenerationError("scene " + std::to_string(scene_id) + ": placement failed after " +
                            std::to_string(kMaxPlacementAttempts) + " attempts");
    }
    if (!layout_ok) {
      const int rx = static_cast<int>(rng.uniform_int(kReferenceMin, kReferenceMax));
      const int ry = static_cast<int>(rng.uniform_int(kReferenceMin, kReferenceMax));
      placed[0] = {ObjectId{pool[0]}, rx, ry};
      layout_ok = true;
      for (int k = 0; k < 4; ++k) {
        const int off = static_cast<int>(rng.uniform_int(kOffsetMin, kOffsetMax));
        const int off2 = static_cast<int>(rng.uniform_int(kOffsetMin, kOffsetMax));
        const int jitter = static_cast<int>(rng.uniform_int(-kJitter, kJitter));
        auto [dx, dy] = relational_offset(relations[k], off, off2, jitter);
        placed[k + 1] = {ObjectId{pool[k + 1]}, rx + dx, ry + dy};
        if (!on_canvas(rx + dx, ry + dy)) layout_ok = false;
      }
      distractor_failures = 0;
      if (!layout_ok) continue;
    }
    PlacedObject d{ObjectId{pool[5]}, static_cast<int>(rng.uniform_int(0, kCanvasSize - 1)),
                   static_cast<int>(rng.uniform_int(0, kCanvasSize - 1))};
    bool ok = true;
    for (int k = 0; k < 5 && ok; ++k) ok = distance(d, placed[k]) >= kDistractorMinDistance;
    if (ok) {
      // The distractor must not compete with a relational object.
      auto rel = relation_of_offset(d.x - placed[0].x, d.y - placed[0].y);
      ok = !rel || std::find(relations.begin(), relations.end(), *rel) == relations.end();
    }
    if (ok) {
      placed[5] = d;
      done = true;
    } else if (++distractor_failures >= 100) {
      layout_ok = false;
    }
  }

  std::array<int, kObjectsPerScene> order{0, 1, 2, 3, 4, 5};
  rng.shuffle(std::span<int>(order));
  Scene scene;
  scene.id = scene_id;
  scene.mode = mode;
  for (int s = 0; s < kObjectsPerScene; ++s) {
    scene.objects[s] = placed[order[s]];
    if (order[s] == 0) scene.reference_index = s;
  }
  return scene;
}

std::span<const Scene> DatasetBundle::split(Split s) const {
  std::size_t begin = 0;
  std::size_t count = 0;
  switch (s) {
    case Split::Extraction: begin = 0; count = sizes.extraction; break;
    case Split::Finetune: begin = sizes.extraction; count = sizes.finetune; break;
    case Split::Test: begin = sizes.extraction + sizes.finetune; count = sizes.test; break;
    case Split::Analogy:
      begin = sizes.extraction + sizes.finetune + sizes.test;
      count = sizes.analogy;
      break;
  }
  if (begin + count > scenes.size()) throw LookupError("dataset bundle is smaller than its split sizes");
  return std::span<const Scene>(scenes).subspan(begin, count);
}

const Scene& DatasetBundle::scene(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= scenes.size()) {
    throw LookupError("unknown scene id " + std::to_string(id));
  }
  return scenes[static_cast<std::size_t>(id)];
}

DatasetBundle generate_dataset(std::uint64_t master_seed, SplitSizes sizes) {
  DatasetBundle bundle;
  bundle.seed = master_seed;
  bundle.sizes = sizes;
  const int n_base = sizes.extraction + sizes.finetune + sizes.test;
  const int total = n_base + sizes.analogy;
  bundle.scenes.reserve(static_cast<std::size_t>(total));
  for (int id = 0; id < total; ++id) {
    Rng rng(derive_seed(master_seed, static_cast<std::uint64_t>(id)));
    bundle.scenes.push_back(generate_scene(rng, id < n_base ? SceneMode::Base : SceneMode::Diagonal, id));
  }
  return bundle;
}

TaskInstance zero_shot_task(const Scene& scene, Relation relation) {
  TaskInstance task;
  task.query = {scene.id, scene.reference().id};
  task.gold = object_in_relation(scene, relation);
  task.relation = relation;
  return task;
}

TaskInstance sample_task(const DatasetBundle& bundle, Split split, Relation relation, int n_shots,
                         bool perturbed, Rng& rng) {
  if (n_shots < 0 || n_shots > 10) {
    throw InvalidRequest("n_shots must be in [0, 10], got " + std::to_string(n_shots));
  }
  if (split == Split::Analogy && is_base(relation)) {
    throw InvalidRequest("analogy split only holds diagonal relations");
  }
  if (split != Split::Analogy && is_diagonal(relation)) {
    throw InvalidRequest("diagonal relation '" + std::string(relation_name(relation)) +
                         "' requested from base split '" + std::string(split_name(split)) + "'");
  }
  if (perturbed && (n_shots != 4 || split == Split::Analogy)) {
    throw InvalidRequest("perturbed tasks are 4-shot over base relations");
  }
  const auto scenes = bundle.split(split);
  if (static_cast<int>(scenes.size()) < n_shots + 1) throw InvalidRequest("split too small for task");

  std::vector<int> picked;
  picked.reserve(static_cast<std::size_t>(n_shots) + 1);
  while (static_cast<int>(picked.size()) < n_shots + 1) {
    const int idx = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(scenes.size()) - 1));
    if (std::find(picked.begin(), picked.end(), idx) == picked.end()) picked.push_back(idx);
  }

  std::array<Relation, 4> demo_relations{};
  if (perturbed) {
    demo_relations = kBaseRelations;
    rng.shuffle(std::span<Relation>(demo_relations));
  }

  TaskInstance task;
  task.relation = relation;
  task.perturbed = perturbed;
  for (int k = 0; k < n_shots; ++k) {
    const Scene& s = scenes[static_cast<std::size_t>(picked[static_cast<std::size_t>(k)])];
    const Relation r = perturbed ? demo_relations[static_cast<std::size_t>(k)] : relation;
    task.demos.push_back({s.id, s.reference().id, object_in_relation(s, r)});
  }
  const Scene& q = scenes[static_cast<std::size_t>(picked.back())];
  task.query = {q.id, q.reference().id};
  task.gold = object_in_relation(q, relation);
  return task;
}

void validate_task(const DatasetBundle& bundle, const TaskInstance& task) {
  auto fail = [](const std::string& msg) { throw ValidationError("invalid task: " + msg); };
  std::vector<int> ids;
  std::vector<Relation> instantiated;
  for (const Demo& d : task.demos) {
    const Scene& s = bundle.scene(d.scene_id);
    if (!s.contains(d.query) || !s.contains(d.answer)) fail("demo label missing from its scene");
    auto r = relation_between(s, d.query, d.answer);
    if (!r) fail("demo pair holds no relation");
    instantiated.push_back(*r);
    ids.push_back(d.scene_id);
  }
  const Scene& q = bundle.scene(task.query.scene_id);
  ids.push_back(q.id);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) fail("scene repeated within a prompt");
  if (!q.contains(task.query.label) || !q.contains(task.gold)) fail("query label missing from scene");
  if (relation_between(q, task.query.label, task.gold) != task.relation) fail("gold does not hold the relation");
  if (task.perturbed) {
    if (task.demos.size() != 4) fail("perturbed task must have 4 demos");
    std::vector<Relation> sorted = instantiated;
    std::sort(sorted.begin(), sorted.end());
    if (!std::equal(sorted.begin(), sorted.end(), kBaseRelations.begin())) {
      fail("perturbed demos are not a permutation of the base relations");
    }
  } else {
    for (Relation r : instantiated) {
      if (r != task.relation) fail("demo does not instantiate the task relation");
    }
  }
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

ordered_json scene_to_json(const Scene& s) {
  ordered_json objects = ordered_json::array();
  for (const auto& o : s.objects) objects.push_back({o.id.value, o.x, o.y});
  return ordered_json{{"id", s.id},
                      {"objects", std::move(objects)},
                      {"ref", s.reference_index},
                      {"mode", s.mode == SceneMode::Base ? "base" : "diag"}};
}

Scene scene_from_json(const ordered_json& j) {
  Scene s;
  s.id = j.at("id").get<int>();
  const auto& objects = j.at("objects");
  if (!objects.is_array() || objects.size() != kObjectsPerScene) {
    throw ValidationError("scene must list exactly 6 objects");
  }
  for (std::size_t i = 0; i < kObjectsPerScene; ++i) {
    const auto& o = objects[i];
    if (!o.is_array() || o.size() != 3) throw ValidationError("object record must be [id,x,y]");
    const int id = o[0].get<int>();
    if (id < 0 || id >= kNumObjects) throw ValidationError("unknown object id " + std::to_string(id));
    s.objects[i] = {ObjectId{id}, o[1].get<int>(), o[2].get<int>()};
    if (!on_canvas(s.objects[i].x, s.objects[i].y)) throw ValidationError("object position off canvas");
  }
  for (std::size_t i = 0; i < kObjectsPerScene; ++i) {
    for (std::size_t k = i + 1; k < kObjectsPerScene; ++k) {
      if (s.objects[i].id == s.objects[k].id) throw ValidationError("duplicate object in scene");
    }
  }
  s.reference_index = j.at("ref").get<int>();
  if (s.reference_index < 0 || s.reference_index >= kObjectsPerScene) {
    throw ValidationError("reference index out of range");
  }
  const std::string mode = j.at("mode").get<std::string>();
  if (mode == "base") {
    s.mode = SceneMode::Base;
  } else if (mode == "diag") {
    s.mode = SceneMode::Diagonal;
  } else {
    throw ValidationError("unknown scene mode '" + mode + "'");
  }
  return s;
}

template <typename Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    std::string_view line = text.substr(pos, end - pos);
    if (!line.empty()) fn(line_no, line);
    pos = end + 1;
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace

std::string serialize_dataset(const DatasetBundle& bundle) {
  std::string out;
  ordered_json header{{"format", "fvlab-dataset"},
                      {"version", 1},
                      {"seed", bundle.seed},
                      {"splits",
                       {{"extraction", bundle.sizes.extraction},
                        {"finetune", bundle.sizes.finetune},
                        {"test", bundle.sizes.test},
                        {"analogy", bundle.sizes.analogy}}}};
  out += header.dump();
  out += '\n';
  for (const Scene& s : bundle.scenes) {
    out += scene_to_json(s).dump();
    out += '\n';
  }
  return out;
}

DatasetBundle parse_dataset(std::string_view text) {
  DatasetBundle bundle;
  bool have_header = false;
  std::size_t expected = 0;
  for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    const std::string where = "line " + std::to_string(line_no) + ": ";
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + e.what());
    }
    try {
      if (!have_header) {
        if (j.value("format", "") != "fvlab-dataset") throw ParseError(where + "missing dataset header");
        if (j.at("version").get<int>() != 1) throw VersionMismatch(where + "unsupported dataset version");
        bundle.seed = j.at("seed").get<std::uint64_t>();
        const auto& sp = j.at("splits");
        bundle.sizes = {sp.at("extraction").get<int>(), sp.at("finetune").get<int>(),
                        sp.at("test").get<int>(), sp.at("analogy").get<int>()};
        expected = static_cast<std::size_t>(bundle.sizes.extraction + bundle.sizes.finetune +
                                            bundle.sizes.test + bundle.sizes.analogy);
        bundle.scenes.reserve(expected);
        have_header = true;
        return;
      }
      Scene s = scene_from_json(j);
      if (static_cast<std::size_t>(s.id) != bundle.scenes.size()) {
        throw ValidationError("scene id " + std::to_string(s.id) + " out of sequence");
      }
      const bool analogy =
          bundle.scenes.size() >= expected - static_cast<std::size_t>(bundle.sizes.analogy);
      if ((s.mode == SceneMode::Diagonal) != analogy) throw ValidationError("scene mode does not match its split");
      bundle.scenes.push_back(s);
    } catch (const ValidationError& e) {
      throw ValidationError(where + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + e.what());
    }
  });
  if (!have_header) throw ParseError("line 1: empty dataset file");
  if (bundle.scenes.size() != expected) {
    throw ParseError("truncated dataset: expected " + std::to_string(expected) + " scenes, found " +
                     std::to_string(bundle.scenes.size()));
  }
  return bundle;
}

void save_dataset(const DatasetBundle& bundle, const std::filesystem::path& path) {
  write_file(path, serialize_dataset(bundle));
}

DatasetBundle load_dataset(const std::filesystem::path& path) { return parse_dataset(read_file(path)); }

std::string task_to_json(const TaskInstance& task) {
  ordered_json demos = ordered_json::array();
  for (const Demo& d : task.demos) demos.push_back({d.scene_id, d.query.value, d.answer.value});
  ordered_json j{{"relation", relation_name(task.relation)},
                 {"perturbed", task.perturbed},
                 {"demos", std::move(demos)},
                 {"query", {task.query.scene_id, task.query.label.value}},
                 {"gold", task.gold.value}};
  return j.dump();
}

TaskInstance task_from_json(std::string_view line) {
  ordered_json j;
  try {
    j = ordered_json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(e.what());
  }
  auto check_id = [](int id) {
    if (id < 0 || id >= kNumObjects) throw ValidationError("unknown object id " + std::to_string(id));
    return ObjectId{id};
  };
  try {
    TaskInstance t;
    t.relation = relation_from_name(j.at("relation").get<std::string>());
    t.perturbed = j.at("perturbed").get<bool>();
    for (const auto& d : j.at("demos")) {
      t.demos.push_back({d.at(0).get<int>(), check_id(d.at(1).get<int>()), check_id(d.at(2).get<int>())});
    }
    t.query = {j.at("query").at(0).get<int>(), check_id(j.at("query").at(1).get<int>())};
    t.gold = check_id(j.at("gold").get<int>());
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(e.what());
  } catch (const LookupError& e) {
    throw ValidationError(e.what());
  }
}

void save_tasks(std::span<const TaskInstance> tasks, const std::filesystem::path& path) {
  std::string out;
  for (const auto& t : tasks) {
    out += task_to_json(t);
    out += '\n';
  }
  write_file(path, out);
}

std::vector<TaskInstance> load_tasks(const std::filesystem::path& path) {
  std::vector<TaskInstance> tasks;
  const std::string text = read_file(path);
  for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    try {
      tasks.push_back(task_from_json(line));
    } catch (const ParseError& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(line_no) + ": " + e.what());
    }
  });
  return tasks;
}

}  // namespace fvlab
