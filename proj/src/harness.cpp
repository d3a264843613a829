#include "fvlab/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fvlab/error.hpp"
#include "fvlab/hash.hpp"
#include "fvlab/train.hpp"

namespace fvlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string rel_tag(Relation r) { return std::string(relation_name(r)); }

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

json analysis_to_json(const Pipeline::Analysis& a) {
  json j;
  j["relation"] = relation_name(a.means.relation);
  j["n_layers"] = a.means.n_layers;
  j["n_heads"] = a.means.n_heads;
  j["prompt_count"] = a.means.prompt_count;
  j["perturbed_prompt_count"] = a.aie.perturbed_prompt_count;
  json means = json::array();
  for (const auto& m : a.means.means) means.push_back(std::vector<double>(m.data(), m.data() + m.size()));
  j["means"] = std::move(means);
  json grid = json::array();
  for (Eigen::Index l = 0; l < a.aie.grid.rows(); ++l) {
    std::vector<double> row(static_cast<std::size_t>(a.aie.grid.cols()));
    for (Eigen::Index h = 0; h < a.aie.grid.cols(); ++h) row[static_cast<std::size_t>(h)] = a.aie.grid(l, h);
    grid.push_back(row);
  }
  j["aie"] = std::move(grid);
  return j;
}

Pipeline::Analysis analysis_from_json(const json& j) {
  Pipeline::Analysis a;
  a.means.relation = relation_from_name(j.at("relation").get<std::string>());
  a.means.n_layers = j.at("n_layers").get<int>();
  a.means.n_heads = j.at("n_heads").get<int>();
  a.means.prompt_count = j.at("prompt_count").get<int>();
  for (const auto& m : j.at("means")) {
    const auto v = m.get<std::vector<double>>();
    a.means.means.push_back(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
  }
  a.aie.relation = a.means.relation;
  a.aie.perturbed_prompt_count = j.at("perturbed_prompt_count").get<int>();
  a.aie.grid.resize(a.means.n_layers, a.means.n_heads);
  const auto& grid = j.at("aie");
  for (int l = 0; l < a.means.n_layers; ++l)
    for (int h = 0; h < a.means.n_heads; ++h) a.aie.grid(l, h) = grid.at(l).at(h).get<double>();
  return a;
}

TaskInstance demo_task(const std::vector<int>& demo_scenes, const Scene& query, Relation r,
                       std::span<const Scene> scenes_by_id) {
  TaskInstance t;
  t.relation = r;
  for (int sid : demo_scenes) {
    const Scene& s = scenes_by_id[static_cast<std::size_t>(sid)];
    t.demos.push_back({sid, s.reference().id, object_in_relation(s, r)});
  }
  t.query = {query.id, query.reference().id};
  t.gold = object_in_relation(query, r);
  return t;
}

// `count` distinct scene ids from `pool`, none in `exclude`.
std::vector<int> draw_scenes(std::span<const Scene> pool, const std::vector<int>& exclude, int count, Rng& rng) {
  if (static_cast<int>(pool.size()) - static_cast<int>(exclude.size()) < count) {
    throw InvalidRequest("split too small for the requested demonstrations");
  }
  std::vector<int> out;
  while (static_cast<int>(out.size()) < count) {
    const int id = pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))].id;
    if (std::find(exclude.begin(), exclude.end(), id) != exclude.end()) continue;
    if (std::find(out.begin(), out.end(), id) != out.end()) continue;
    out.push_back(id);
  }
  return out;
}

template <typename F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

}  // namespace

Accuracy Accuracy::of(int correct, int n) {
  if (n <= 0) throw InvalidArgument("accuracy over an empty set");
  return {static_cast<double>(correct) / static_cast<double>(n), n};
}

double Accuracy::se() const { return n > 0 ? std::sqrt(value * (1.0 - value) / static_cast<double>(n)) : 0.0; }

bool operator==(const ResultsBundle& a, const ResultsBundle& b) {
  if (!(a.meta == b.meta && a.relations == b.relations && a.layer_sweep == b.layer_sweep &&
        a.head_sweep == b.head_sweep && a.head_peak == b.head_peak && a.context_sweep == b.context_sweep &&
        a.analogy == b.analogy && a.aie.size() == b.aie.size())) {
    return false;
  }
  for (std::size_t i = 0; i < a.aie.size(); ++i) {
    if (a.aie[i].relation != b.aie[i].relation || a.aie[i].grid != b.aie[i].grid ||
        a.aie[i].perturbed_prompt_count != b.aie[i].perturbed_prompt_count) {
      return false;
    }
  }
  return true;
}

std::vector<TaskInstance> icl_prompt_set(const DatasetBundle& bundle, Split split, Relation r, int shots, int count,
                                         std::uint64_t seed) {
  const auto pool = bundle.split(split);
  if (count > static_cast<int>(pool.size())) throw InvalidRequest("more ICL prompts than scenes in the split");
  Rng rng(seed);
  std::vector<TaskInstance> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const Scene& q = pool[static_cast<std::size_t>(i)];
    out.push_back(demo_task(draw_scenes(pool, {q.id}, shots, rng), q, r, bundle.scenes));
  }
  return out;
}

Pipeline::Pipeline(ExperimentConfig cfg, std::ostream* log) : cfg_(std::move(cfg)), log_(log) { cfg_.validate(); }

Pipeline::~Pipeline() = default;

fs::path Pipeline::cache_dir() const { return cfg_.out_dir / "cache"; }

void Pipeline::note(const std::string& msg) {
  if (log_) *log_ << "[fvlab] " << msg << std::endl;
}

void Pipeline::warn(const std::string& msg) {
  warnings_.push_back(msg);
  if (log_) *log_ << "[fvlab] warning: " << msg << std::endl;
}

const DatasetBundle& Pipeline::dataset() {
  if (dataset_) return *dataset_;
  fs::create_directories(cache_dir());
  const fs::path path = cache_dir() / ("dataset-" + cfg_.dataset_key() + ".jsonl");
  if (fs::exists(path)) {
    note("loading dataset " + path.string());
    dataset_ = load_dataset(path);
    if (dataset_->seed != cfg_.dataset_seed) throw ValidationError(path.string() + ": cached dataset seed differs");
  } else {
    note("generating dataset (seed " + std::to_string(cfg_.dataset_seed) + ")");
    dataset_ = generate_dataset(cfg_.dataset_seed, cfg_.sizes);
    save_dataset(*dataset_, path);
  }
  return *dataset_;
}

const ModelParams<float>& Pipeline::trained_params() {
  if (params_) return *params_;
  auto adopt = [&](const LoadedCheckpoint& ck, const fs::path& path) {
    ModelConfig want = cfg_.model;
    ModelConfig have = ck.config();
    want.precision = have.precision;
    if (!(want == have)) throw ConfigError(path.string() + ": checkpoint shape differs from [model]");
    if (const auto* f = std::get_if<ModelParams<float>>(&ck.params)) {
      params_ = *f;
    } else {
      params_ = std::get<ModelParams<double>>(ck.params).cast<float>();
    }
    if (!params_->frozen()) throw ContractViolation(path.string() + ": checkpoint is not frozen");
  };
  if (!cfg_.checkpoint.empty()) {
    if (!fs::exists(cfg_.checkpoint)) throw ConfigError("checkpoint '" + cfg_.checkpoint.string() + "' does not exist");
    note("loading checkpoint " + cfg_.checkpoint.string());
    adopt(load_checkpoint(cfg_.checkpoint), cfg_.checkpoint);
    return *params_;
  }
  fs::create_directories(cache_dir());
  const fs::path path = cache_dir() / ("backbone-" + cfg_.backbone_key() + ".fvlb");
  if (fs::exists(path)) {
    note("loading cached backbone " + path.string());
    adopt(load_checkpoint(path), path);
    return *params_;
  }
  const DatasetBundle& data = dataset();
  note("meta-training backbone: " + std::to_string(cfg_.train.steps) + " steps x batch " +
       std::to_string(cfg_.train.batch));
  const auto start = std::chrono::steady_clock::now();
  double window = 0.0;
  int window_n = 0;
  TrainResult result = meta_train(init_model<float>(cfg_.model, cfg_.init_seed), data, cfg_.train,
                                  [&](const TrainLogRow& row) {
                                    window += row.loss;
                                    ++window_n;
                                    if (!row.heldout_acc) return;
                                    const double secs = std::chrono::duration<double>(
                                                            std::chrono::steady_clock::now() - start)
                                                            .count();
                                    std::ostringstream msg;
                                    msg << "step " << row.step << " loss " << std::setprecision(4)
                                        << window / window_n << " heldout " << *row.heldout_acc << " ("
                                        << std::fixed << std::setprecision(0) << secs << " s)";
                                    note(msg.str());
                                    window = 0.0;
                                    window_n = 0;
                                  });
  write_train_log(result.log, cache_dir() / ("train_log-" + cfg_.backbone_key() + ".csv"));
  save_checkpoint(result.params, path);
  params_ = std::move(result.params);
  return *params_;
}

const Backbone& Pipeline::backbone() {
  if (!backbone_) backbone_ = make_backbone(trained_params(), cfg_.model.precision);
  return *backbone_;
}

std::vector<TaskInstance> Pipeline::extraction_prompts(Relation r, int shots) {
  Rng rng(derive_seed(cfg_.mediation_seed, "means/" + rel_tag(r) + "/" + std::to_string(shots)));
  std::vector<TaskInstance> out;
  for (int i = 0; i < cfg_.extraction_prompts; ++i) {
    out.push_back(sample_task(dataset(), Split::Extraction, r, shots, false, rng));
  }
  return out;
}

std::vector<TaskInstance> Pipeline::perturbed_prompts(Relation r) {
  Rng rng(derive_seed(cfg_.mediation_seed, "perturbed/" + rel_tag(r)));
  std::vector<TaskInstance> out;
  for (int i = 0; i < cfg_.perturbed_prompts; ++i) {
    out.push_back(sample_task(dataset(), Split::Extraction, r, 4, true, rng));
  }
  return out;
}

std::vector<TaskInstance> Pipeline::test_tasks(Relation r) {
  const auto pool = dataset().split(Split::Test);
  std::vector<TaskInstance> out;
  for (int i = 0; i < cfg_.test_tasks; ++i) out.push_back(zero_shot_task(pool[static_cast<std::size_t>(i)], r));
  return out;
}

std::vector<TaskInstance> Pipeline::validation_tasks(Relation r) {
  const auto pool = dataset().split(Split::Finetune);
  std::vector<TaskInstance> out;
  for (int i = 0; i < cfg_.validation_tasks; ++i) out.push_back(zero_shot_task(pool[static_cast<std::size_t>(i)], r));
  return out;
}

std::vector<TaskInstance> Pipeline::finetune_tasks(Relation r) {
  const auto pool = dataset().split(Split::Finetune);
  std::vector<TaskInstance> out;
  for (int i = 0; i < cfg_.finetune_tasks; ++i) out.push_back(zero_shot_task(pool[static_cast<std::size_t>(i)], r));
  return out;
}

std::vector<TaskInstance> Pipeline::icl_tasks(Relation r) {
  return icl_prompt_set(dataset(), Split::Test, r, cfg_.icl_shots, cfg_.test_tasks,
                        derive_seed(cfg_.eval_seed, "icl/" + rel_tag(r)));
}

std::vector<AnalogyProblem> Pipeline::analogy_problems() {
  Rng rng(derive_seed(cfg_.eval_seed, "analogy"));
  std::vector<AnalogyProblem> out;
  for (int i = 0; i < cfg_.analogy_problems; ++i) {
    out.push_back(sample_analogy(dataset(), kDiagonalRelations[static_cast<std::size_t>(i) % 4], rng));
  }
  return out;
}

const Pipeline::Analysis& Pipeline::analysis(Relation r, int shots) {
  const auto id = std::make_pair(r, shots);
  if (auto it = analyses_.find(id); it != analyses_.end()) return it->second;
  fs::create_directories(cache_dir());
  const fs::path path =
      cache_dir() / ("analysis-" + cfg_.analysis_key() + "-" + rel_tag(r) + "-n" + std::to_string(shots) + ".json");
  Analysis a;
  if (fs::exists(path)) {
    std::ifstream in(path);
    try {
      a = analysis_from_json(json::parse(in));
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ": " + e.what());
    }
  } else {
    const Backbone& model = backbone();
    const auto scenes = SceneTable(dataset().scenes);
    note("mean activations and AIE for " + rel_tag(r) + " (" + std::to_string(shots) + "-shot)");
    a.means = mean_activations(model, extraction_prompts(r, shots), scenes);
    a.aie = compute_aie(model, perturbed_prompts(r), a.means, scenes);
    std::ofstream out(path);
    out << analysis_to_json(a).dump();
    if (!out) throw IoError("write failed for " + path.string());
  }
  return analyses_.emplace(id, std::move(a)).first->second;
}

HeadSet Pipeline::heads(Relation r, int k) { return select_top_heads(analysis(r).aie, k); }

const ZeroShotBench& Pipeline::bench(const std::string& name, Relation r) {
  const auto id = std::make_pair(name, r);
  if (auto it = benches_.find(id); it != benches_.end()) return *it->second;
  std::vector<TaskInstance> tasks = name == "test" ? test_tasks(r) : validation_tasks(r);
  auto b = std::make_unique<ZeroShotBench>(backbone(), tasks, SceneTable(dataset().scenes));
  return *benches_.emplace(id, std::move(b)).first->second;
}

std::vector<LayerSweepRow> Pipeline::sweep_layers() {
  if (layer_sweep_) return *layer_sweep_;
  std::vector<LayerSweepRow> rows;
  for (Relation r : cfg_.relations) {
    const HeadSet hs = heads(r, cfg_.head_count);
    for (int l = 0; l < cfg_.model.n_layers; ++l) {
      const FunctionVector fv = extract_fv(analysis(r).means, hs, cfg_.aggregation, l);
      const ZeroShotEval ev = bench("validation", r).evaluate(&fv);
      rows.push_back({r, l, Accuracy::of(ev.correct(), static_cast<int>(ev.records.size()))});
    }
  }
  layer_sweep_ = rows;
  return rows;
}

int Pipeline::injection_layer() {
  if (layer_) return *layer_;
  if (cfg_.injection_layer) {
    layer_ = *cfg_.injection_layer;
    return *layer_;
  }
  const auto rows = sweep_layers();
  std::vector<double> mean(static_cast<std::size_t>(cfg_.model.n_layers), 0.0);
  for (const auto& row : rows) mean[static_cast<std::size_t>(row.layer)] += row.acc.value;
  layer_ = static_cast<int>(std::max_element(mean.begin(), mean.end()) - mean.begin());
  note("injection layer " + std::to_string(*layer_) + " (best mean validation accuracy)");
  return *layer_;
}

FunctionVector Pipeline::initial_fv(Relation r) {
  return extract_fv(analysis(r).means, heads(r, cfg_.head_count), cfg_.aggregation, injection_layer(),
                    {"extracted", cfg_.hash(), cfg_.mediation_seed, ""});
}

const FtResult& Pipeline::finetuned_fv(Relation r) {
  if (auto it = finetuned_.find(r); it != finetuned_.end()) return it->second;
  const FunctionVector init = initial_fv(r);
  note("fine-tuning the " + rel_tag(r) + " vector");
  FtResult res = finetune_fv(backbone(), init, finetune_tasks(r), dataset().scenes, cfg_.finetune, cfg_.hash());
  return finetuned_.emplace(r, std::move(res)).first->second;
}

RelationResults Pipeline::four_model(Relation r) {
  RelationResults out;
  out.relation = r;
  const ZeroShotBench& b = bench("test", r);
  const ZeroShotEval base = b.evaluate(nullptr);
  out.baseline = Accuracy::of(base.correct(), b.size());
  const auto icl = icl_tasks(r);
  out.icl = Accuracy::of(static_cast<int>(std::lround(eval_icl(backbone(), icl, dataset().scenes) *
                                                      static_cast<double>(icl.size()))),
                         static_cast<int>(icl.size()));
  const FunctionVector init = initial_fv(r);
  out.initial_fv = Accuracy::of(b.evaluate(&init).correct(), b.size());
  const FtResult& ft = finetuned_fv(r);
  out.finetuned_fv = Accuracy::of(b.evaluate(&ft.fv).correct(), b.size());
  out.heads = init.head_set->members;
  out.finetune_loss = ft.epoch_loss;
  return out;
}

std::vector<HeadSweepRow> Pipeline::sweep_head_counts() {
  const int total = cfg_.model.total_heads();
  int kmax = cfg_.head_sweep_max;
  if (kmax > total) {
    warn("head sweep range 1.." + std::to_string(kmax) + " truncated to the model's " + std::to_string(total) +
         " heads");
    kmax = total;
  }
  const int layer = injection_layer();
  std::vector<HeadSweepRow> rows;
  for (Relation r : cfg_.relations) {
    const HeadSet all = heads(r, kmax);
    for (int k = 1; k <= kmax; ++k) {
      HeadSet hs = all;
      hs.members.resize(static_cast<std::size_t>(k));
      const FunctionVector fv = extract_fv(analysis(r).means, hs, cfg_.aggregation, layer);
      const ZeroShotEval ev = bench("validation", r).evaluate(&fv);
      rows.push_back({r, k, Accuracy::of(ev.correct(), static_cast<int>(ev.records.size()))});
    }
  }
  return rows;
}

std::vector<ContextSweepRow> Pipeline::sweep_context_size() {
  std::vector<ContextSweepRow> rows;
  for (int n : cfg_.context_sizes) {
    for (Relation r : cfg_.relations) {
      const Analysis& a = analysis(r, n);
      const HeadSet hs = select_top_heads(a.aie, cfg_.head_count);
      for (int l = 0; l < cfg_.model.n_layers; ++l) {
        const FunctionVector fv = extract_fv(a.means, hs, cfg_.aggregation, l);
        const ZeroShotEval ev = bench("validation", r).evaluate(&fv);
        rows.push_back({n, r, l, Accuracy::of(ev.correct(), static_cast<int>(ev.records.size()))});
      }
    }
  }
  return rows;
}

std::vector<AnalogyRow> Pipeline::analogy() {
  for (Relation r : kBaseRelations) {
    if (std::find(cfg_.relations.begin(), cfg_.relations.end(), r) == cfg_.relations.end()) {
      warn("analogy skipped: composite vectors need all four base relations");
      return {};
    }
  }
  std::vector<FunctionVector> fvs;
  for (Relation r : kBaseRelations) {
    fvs.push_back(cfg_.composite_source == CompositeSource::Finetuned ? finetuned_fv(r).fv : initial_fv(r));
  }
  const auto problems = analogy_problems();
  const auto& data = dataset();
  const Backbone& model = backbone();
  Rng rng(derive_seed(cfg_.eval_seed, "analogy-demos"));
  std::vector<TaskInstance> icl1, icl4, icl10;
  for (const auto& p : problems) {
    icl1.push_back(analogy_icl_task(p));
    const Scene& target = data.scene(p.target_scene);
    for (auto [shots, dst] : {std::pair{4, &icl4}, std::pair{10, &icl10}}) {
      std::vector<int> demos{p.source.scene_id};
      const auto extra = draw_scenes(data.split(Split::Analogy), {p.source.scene_id, p.target_scene}, shots - 1, rng);
      demos.insert(demos.end(), extra.begin(), extra.end());
      dst->push_back(demo_task(demos, target, p.relation, data.scenes));
    }
  }
  const auto n = static_cast<int>(problems.size());
  auto icl_row = [&](const std::string& name, const std::vector<TaskInstance>& tasks) {
    const double acc = eval_icl(model, tasks, data.scenes);
    return AnalogyRow{name, Accuracy::of(static_cast<int>(std::lround(acc * n)), n)};
  };
  std::vector<AnalogyRow> rows{icl_row("icl_1shot", icl1), icl_row("icl_4shot", icl4),
                               icl_row("icl_10shot", icl10)};
  int correct = 0;
  int degenerate = 0;
  for (const auto& p : problems) {
    try {
      if (solve_analogy(model, p, fvs, data.scenes).correct) ++correct;
    } catch (const DegenerateSource&) {
      ++degenerate;
    }
  }
  if (degenerate > 0) warn(std::to_string(degenerate) + " analogy sources were degenerate and scored as wrong");
  rows.push_back({"cfv", Accuracy::of(correct, n)});
  return rows;
}

ResultsBundle Pipeline::run_full() {
  ResultsBundle b;
  b.meta.started_at = utc_now();
  b.meta.config_hash = cfg_.hash();
  b.meta.dataset_key = cfg_.dataset_key();
  b.meta.backbone_key = cfg_.backbone_key();
  b.meta.precision = std::string(precision_name(cfg_.model.precision));
  b.meta.seeds = {{"dataset", cfg_.dataset_seed}, {"init", cfg_.init_seed},     {"train", cfg_.train.seed},
                  {"mediation", cfg_.mediation_seed}, {"finetune", cfg_.finetune.seed}, {"eval", cfg_.eval_seed}};
  fs::create_directories(cfg_.out_dir);
  cfg_.save(cfg_.out_dir / "config.ini");

  stage("generate", [&] { dataset(); });
  stage("train", [&] { trained_params(); });
  b.meta.backbone_checksum = hex64(trained_params().checksum());
  stage("mediation", [&] {
    for (Relation r : cfg_.relations) b.aie.push_back(analysis(r).aie);
  });
  stage("layer-sweep", [&] {
    b.layer_sweep = sweep_layers();
    b.meta.injection_layer = injection_layer();
  });
  stage("extract-eval-finetune", [&] {
    for (Relation r : cfg_.relations) {
      b.relations.push_back(four_model(r));
      save_fv(initial_fv(r), cfg_.out_dir / ("fv_" + rel_tag(r) + "_initial.fvec"));
      save_fv(finetuned_fv(r).fv, cfg_.out_dir / ("fv_" + rel_tag(r) + "_finetuned.fvec"));
    }
  });
  stage("analogy", [&] { b.analogy = analogy(); });
  stage("head-sweep", [&] {
    b.head_sweep = sweep_head_counts();
    for (Relation r : cfg_.relations) {
      const HeadSweepRow* best = nullptr;
      for (const auto& row : b.head_sweep) {
        if (row.relation == r && (!best || row.acc.value > best->acc.value)) best = &row;
      }
      if (best) b.head_peak[rel_tag(r)] = best->k;
    }
  });
  stage("context-sweep", [&] { b.context_sweep = sweep_context_size(); });
  b.meta.warnings = warnings_;
  stage("report", [&] { emit_reports(b, cfg_.out_dir); });
  return b;
}

ResultsBundle run_full_pipeline(const ExperimentConfig& cfg, std::ostream* log) {
  Pipeline p(cfg, log);
  return p.run_full();
}

}  // namespace fvlab
