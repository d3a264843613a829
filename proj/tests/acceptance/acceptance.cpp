// End-to-end acceptance run on the default configuration. The trained
// backbone is cached in --workdir; every other stage is recomputed so the
// runtime limits are measured honestly.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include "fvlab/config.hpp"
#include "fvlab/error.hpp"
#include "fvlab/harness.hpp"
#include "fvlab/hash.hpp"
#include "fvlab/mediation.hpp"
#include "fvlab/train.hpp"

namespace fs = std::filesystem;
using namespace fvlab;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  std::function<Verdict()> run;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

// Deletes cached stage results except the dataset and the trained backbone.
void prune_cache(const fs::path& cache) {
  if (!fs::exists(cache)) return;
  for (const auto& e : fs::directory_iterator(cache)) {
    const std::string name = e.path().filename().string();
    const bool keep = name.starts_with("dataset-") || name.starts_with("backbone-") || name.starts_with("train_log-");
    if (!keep) fs::remove_all(e.path());
  }
}

double nll_with(const Backbone& m, const TokenSequence& seq, SceneTable scenes, int layer, const Eigen::VectorXd& v) {
  const Intervention iv{InjectResidual{layer, seq.final_position, v}};
  const Eigen::VectorXd logits = m.forward(seq, scenes, std::span(&iv, 1)).logits.row(seq.final_position).transpose();
  return -std::log(softmax(logits)[seq.gold_token]);
}

// Pooled accuracy over relation rows.
Accuracy pooled(const std::vector<RelationResults>& rows, Accuracy RelationResults::*field) {
  double hits = 0.0;
  int n = 0;
  for (const auto& r : rows) {
    hits += (r.*field).value * (r.*field).n;
    n += (r.*field).n;
  }
  return Accuracy::of(static_cast<int>(std::lround(hits)), n);
}

double diff_se(const Accuracy& a, const Accuracy& b) { return std::sqrt(a.se() * a.se() + b.se() * b.se()); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fvlab acceptance suite"};
  fs::path workdir = "acceptance_work";
  std::vector<int> only;
  bool verbose = false;
  app.add_option("--workdir", workdir, "Directory holding the cached backbone and run outputs");
  app.add_option("--only", only, "Run only these criterion numbers");
  app.add_flag("-v,--verbose", verbose, "Stream pipeline progress");
  CLI11_PARSE(app, argc, argv);

  fs::create_directories(workdir);
  ExperimentConfig cfg;
  cfg.model.precision = Precision::F64;
  cfg.out_dir = workdir / "run";
  prune_cache(cfg.out_dir / "cache");
  std::ofstream logfile(workdir / "acceptance.log", std::ios::app);
  std::ostream& log = verbose ? std::cerr : static_cast<std::ostream&>(logfile);
  Pipeline pipe(cfg, &log);

  const fs::path train_time_file = workdir / "train_seconds.txt";
  auto backbone = [&]() -> const Backbone& {
    static bool timed = false;
    if (!timed) {
      timed = true;
      const bool cached = fs::exists(pipe.cache_dir() / ("backbone-" + cfg.backbone_key() + ".fvlb"));
      const auto t0 = Clock::now();
      pipe.trained_params();
      if (!cached) std::ofstream(train_time_file) << seconds_since(t0) << "\n";
    }
    return pipe.backbone();
  };

  // Shared results of the FV stages, computed once.
  std::vector<RelationResults> four;
  double fv_seconds = -1.0;
  auto fv_stages = [&]() -> const std::vector<RelationResults>& {
    if (fv_seconds < 0.0) {
      backbone();
      const auto t0 = Clock::now();
      pipe.injection_layer();
      for (Relation r : kBaseRelations) four.push_back(pipe.four_model(r));
      fv_seconds = seconds_since(t0);
    }
    return four;
  };

  const DatasetBundle& data = pipe.dataset();

  std::vector<Criterion> criteria;

  criteria.push_back({1, "injection gradient matches central differences", [&] {
    const Backbone& m = backbone();
    const auto t0 = Clock::now();
    const ModelConfig& mc = m.config();
    Rng rng(101);
    double worst = 0.0;
    int checked = 0;
    for (int p = 0; p < 3; ++p) {
      const TaskInstance t = zero_shot_task(data.split(Split::Test)[static_cast<std::size_t>(p)], kBaseRelations[p % 4]);
      const TokenSequence seq = encode_prompt(t, mc.max_seq_len);
      for (int layer : {0, mc.n_layers / 2, mc.n_layers - 1}) {
        Eigen::VectorXd v(mc.d_model);
        for (int k = 0; k < mc.d_model; ++k) v[k] = 0.5 * rng.normal();
        const Eigen::VectorXd g = m.grad_wrt_injection(seq, data.scenes, layer, seq.final_position, v, seq.gold_token).grad;
        for (int c = 0; c < 16; ++c) {
          const auto k = static_cast<int>(rng.uniform_int(0, mc.d_model - 1));
          const double h = 1e-5;
          Eigen::VectorXd vp = v, vm = v;
          vp[k] += h;
          vm[k] -= h;
          const double fd = (nll_with(m, seq, data.scenes, layer, vp) - nll_with(m, seq, data.scenes, layer, vm)) / (2 * h);
          const double err = std::abs(fd - g[k]) / std::max({std::abs(fd), std::abs(g[k]), 1e-8});
          worst = std::max(worst, err);
          ++checked;
        }
      }
    }
    const double secs = seconds_since(t0);
    return Verdict{worst < 1e-4 && secs < 60.0, std::to_string(checked) + " coords, max rel err " + fmt(worst) +
                                                    ", " + fmt(secs, 3) + " s"};
  }});

  criteria.push_back({2, "self-patch leaves every logit unchanged", [&] {
    const Backbone& m = backbone();
    const ModelConfig& mc = m.config();
    Rng rng(202);
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
      const TaskInstance t = sample_task(data, Split::Extraction, kBaseRelations[static_cast<std::size_t>(i % 4)], 4,
                                         i % 2 == 1, rng);
      const TokenSequence seq = encode_prompt(t, mc.max_seq_len);
      const int layer = static_cast<int>(rng.uniform_int(0, mc.n_layers - 1));
      const int head = static_cast<int>(rng.uniform_int(0, mc.n_heads - 1));
      const ForwardOutput base = m.forward(seq, data.scenes, {}, TraceRequest{{seq.final_position}});
      const Eigen::VectorXd own = base.trace[0].heads[static_cast<std::size_t>(layer * mc.n_heads + head)];
      const Intervention patch{PatchHead{layer, head, seq.final_position, own}};
      const ForwardOutput patched = m.forward(seq, data.scenes, std::span(&patch, 1));
      worst = std::max(worst, (patched.logits - base.logits).cwiseAbs().maxCoeff());
    }
    return Verdict{worst <= 1e-9, "20 pairs, max |dlogit| " + fmt(worst)};
  }});

  criteria.push_back({3, "shared-baseline AIE equals the naive computation", [&] {
    const Backbone& m = backbone();
    const Relation r = Relation::Above;
    const auto clean = pipe.extraction_prompts(r, 4);
    const MeanActivations means = mean_activations(m, clean, data.scenes);
    auto perturbed = pipe.perturbed_prompts(r);
    perturbed.resize(16);
    const AieMatrix fast = compute_aie(m, perturbed, means, data.scenes);
    const AieMatrix naive = compute_aie_naive(m, perturbed, means, data.scenes);
    const double diff = (fast.grid - naive.grid).cwiseAbs().maxCoeff();
    const bool shape = fast.grid.rows() == 8 && fast.grid.cols() == 8;
    return Verdict{shape && diff <= 1e-9, "8x8 grid, 16 prompts, max diff " + fmt(diff)};
  }});

  criteria.push_back({4, "composite weights normalize and compose exactly", [&] {
    Rng rng(404);
    double worst_sum = 0.0;
    double worst_vec = 0.0;
    const int d = cfg.model.d_model;
    for (int i = 0; i < 100; ++i) {
      std::array<double, 4> p{};
      for (double& x : p) x = rng.uniform01() * std::pow(10.0, -3.0 * rng.uniform01());
      const CompositeWeights w = normalize_weights(p);
      worst_sum = std::max(worst_sum, std::abs(w.sum() - 1.0));
      std::vector<FunctionVector> fvs;
      Eigen::VectorXd oracle = Eigen::VectorXd::Zero(d);
      const double total = p[0] + p[1] + p[2] + p[3];
      for (std::size_t k = 0; k < 4; ++k) {
        FunctionVector fv;
        fv.relation = std::string(relation_name(kBaseRelations[k]));
        fv.vector.resize(d);
        for (int j = 0; j < d; ++j) fv.vector[j] = rng.normal();
        oracle += (p[k] / total) * fv.vector;
        fvs.push_back(std::move(fv));
      }
      std::reverse(fvs.begin(), fvs.end());
      worst_vec = std::max(worst_vec, (compose_fv(fvs, w).vector - oracle).cwiseAbs().maxCoeff());
    }
    return Verdict{worst_sum <= 1e-9 && worst_vec <= 1e-12,
                   "100 cases, max |sum-1| " + fmt(worst_sum) + ", max compose err " + fmt(worst_vec)};
  }});

  criteria.push_back({5, "dataset invariants and byte-identical regeneration", [&] {
    const auto t0 = Clock::now();
    // 6000 scenes: both modes, with a shortened extraction split.
    const SplitSizes sizes{3000, 1000, 1000, 1000};
    const DatasetBundle a = generate_dataset(cfg.dataset_seed, sizes);
    const DatasetBundle b = generate_dataset(cfg.dataset_seed, sizes);
    const bool same = serialize_dataset(a) == serialize_dataset(b);
    int bad = 0;
    for (const Scene& s : a.scenes) {
      const PlacedObject& ref = s.reference();
      if (ref.x < kReferenceMin || ref.x > kReferenceMax || ref.y < kReferenceMin || ref.y > kReferenceMax) ++bad;
      std::vector<int> ids;
      for (const auto& o : s.objects) ids.push_back(o.id.value);
      std::sort(ids.begin(), ids.end());
      if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) ++bad;
      const auto rels = s.mode == SceneMode::Base ? kBaseRelations : kDiagonalRelations;
      std::vector<int> in_relation;
      for (Relation r : rels) {
        int count = 0;
        for (int i = 0; i < kObjectsPerScene; ++i) {
          if (i == s.reference_index) continue;
          const auto& o = s.objects[static_cast<std::size_t>(i)];
          if (relation_of_offset(o.x - ref.x, o.y - ref.y) == r) {
            ++count;
            in_relation.push_back(i);
          }
        }
        if (count != 1) ++bad;
      }
      for (int i = 0; i < kObjectsPerScene; ++i) {
        if (i == s.reference_index || std::find(in_relation.begin(), in_relation.end(), i) != in_relation.end()) continue;
        const auto& d = s.objects[static_cast<std::size_t>(i)];
        for (const auto& o : s.objects) {
          if (&o != &d && std::hypot(d.x - o.x, d.y - o.y) < kDistractorMinDistance) ++bad;
        }
      }
    }
    const double secs = seconds_since(t0);
    const bool sized = a.scenes.size() == 6000;
    return Verdict{same && sized && bad == 0 && secs < 60.0,
                   std::to_string(a.scenes.size()) + " scenes, " + std::to_string(bad) + " violations, " +
                       (same ? "identical" : "DIFFERENT") + " regeneration, " + fmt(secs, 3) + " s"};
  }});

  criteria.push_back({6, "meta-trained backbone learns 4-shot ICL", [&] {
    backbone();
    double train_secs = -1.0;
    if (fs::exists(train_time_file)) std::ifstream(train_time_file) >> train_secs;
    const auto& rows = fv_stages();
    const Accuracy icl = pooled(rows, &RelationResults::icl);
    const Accuracy zero = pooled(rows, &RelationResults::baseline);
    std::string per;
    for (const auto& r : rows) per += " " + std::string(relation_name(r.relation)) + "=" + fmt(r.icl.value, 3);
    const bool timed = train_secs >= 0.0 && train_secs <= 3600.0;
    return Verdict{icl.value >= 0.80 && zero.value <= 0.25 && timed,
                   "4-shot " + fmt(icl.value, 3) + " (" + std::to_string(icl.n) + " tasks;" + per + "), 0-shot " +
                       fmt(zero.value, 3) + ", training " + (train_secs < 0 ? "time unknown" : fmt(train_secs, 4) + " s")};
  }});

  criteria.push_back({7, "function vectors beat zero-shot; fine-tuning helps", [&] {
    const auto& rows = fv_stages();
    bool ok = fv_seconds <= 900.0;
    std::string detail = "layer " + std::to_string(pipe.injection_layer()) + ";";
    for (const auto& r : rows) {
      const double lift = r.initial_fv.value - r.baseline.value;
      const double gain = r.finetuned_fv.value - r.initial_fv.value;
      const bool pass = r.initial_fv.n >= 500 && lift >= 0.15 && lift > 2 * diff_se(r.initial_fv, r.baseline) &&
                        gain >= 0.0 && gain > 2 * diff_se(r.finetuned_fv, r.initial_fv);
      ok = ok && pass;
      detail += " " + std::string(relation_name(r.relation)) + " base " + fmt(r.baseline.value, 3) + " fv " +
                fmt(r.initial_fv.value, 3) + " ft " + fmt(r.finetuned_fv.value, 3) + (pass ? "" : " (x)") + ";";
    }
    return Verdict{ok, detail + " " + fmt(fv_seconds, 4) + " s"};
  }});

  criteria.push_back({8, "composite vectors beat one-shot ICL on diagonal analogies", [&] {
    fv_stages();
    const auto t0 = Clock::now();
    const auto rows = pipe.analogy();
    const double secs = seconds_since(t0);
    auto find = [&](const std::string& m) -> const AnalogyRow* {
      for (const auto& r : rows) {
        if (r.method == m) return &r;
      }
      return nullptr;
    };
    const AnalogyRow* cfv = find("cfv");
    const AnalogyRow* one = find("icl_1shot");
    if (!cfv || !one || !find("icl_4shot") || !find("icl_10shot")) return Verdict{false, "missing analogy rows"};
    const double gap = cfv->acc.value - one->acc.value;
    const double se = diff_se(cfv->acc, one->acc);
    std::string detail;
    for (const auto& r : rows) detail += r.method + " " + fmt(r.acc.value, 3) + ", ";
    return Verdict{cfv->acc.n >= 1000 && gap >= 2 * se && secs <= 900.0,
                   detail + "gap " + fmt(gap, 3) + " (2 SE = " + fmt(2 * se, 3) + "), " + fmt(secs, 4) + " s"};
  }});

  criteria.push_back({9, "sweeps are deterministic and well formed", [&] {
    fv_stages();
    const ResultsBundle bundle = pipe.run_full();
    const fs::path out = cfg.out_dir;
    const int L = cfg.model.n_layers;
    const int kmax = std::min(cfg.head_sweep_max, L * cfg.model.n_heads);
    bool ok = true;
    std::string detail;
    const auto layers = read_layer_sweep_csv(out / "sweep_layers.csv");
    const auto heads = read_head_sweep_csv(out / "sweep_heads.csv");
    ok = ok && layers == bundle.layer_sweep && layers.size() == cfg.relations.size() * static_cast<std::size_t>(L);
    ok = ok && heads == bundle.head_sweep && heads.size() == cfg.relations.size() * static_cast<std::size_t>(kmax);
    std::size_t ctx_rows = 0;
    for (int n : cfg.context_sizes) {
      const auto rows = read_context_sweep_csv(out / ("sweep_context_n" + std::to_string(n) + ".csv"));
      ctx_rows += rows.size();
      ok = ok && rows.size() == cfg.relations.size() * static_cast<std::size_t>(L);
    }
    ok = ok && ctx_rows == bundle.context_sweep.size();
    for (const char* f : {"sweep_layers.csv", "sweep_heads.csv", "analogy.csv"}) {
      ok = ok && read_config_hash(out / f) == cfg.hash();
    }
    detail += std::to_string(layers.size()) + " layer rows, " + std::to_string(heads.size()) + " head rows, " +
              std::to_string(ctx_rows) + " context rows";

    bool prefix = true;
    for (Relation r : cfg.relations) {
      const auto full = pipe.heads(r, L * cfg.model.n_heads).members;
      for (int k = 1; k <= L * cfg.model.n_heads; ++k) {
        const auto hs = pipe.heads(r, k).members;
        prefix = prefix && std::equal(hs.begin(), hs.end(), full.begin());
      }
    }
    detail += prefix ? ", prefix ok" : ", PREFIX BROKEN";

    // Replay from the same weights in a fresh output directory.
    ExperimentConfig replay_cfg = cfg;
    replay_cfg.checkpoint = pipe.cache_dir() / ("backbone-" + cfg.backbone_key() + ".fvlb");
    replay_cfg.out_dir = workdir / "replay";
    fs::remove_all(replay_cfg.out_dir);
    Pipeline replay(replay_cfg, &log);
    const bool same = replay.sweep_layers() == bundle.layer_sweep && replay.sweep_head_counts() == bundle.head_sweep &&
                      replay.sweep_context_size() == bundle.context_sweep;
    detail += same ? ", replay identical" : ", REPLAY DIFFERS";
    return Verdict{ok && prefix && same, detail};
  }});

  criteria.push_back({10, "fine-tuning leaves the backbone checksum unchanged", [&] {
    const Backbone& m = backbone();
    const std::uint64_t params_before = pipe.trained_params().checksum();
    const std::uint64_t before = m.checksum();
    FtConfig ft = cfg.finetune;
    ft.epochs = 2;
    for (Relation r : kBaseRelations) {
      auto tasks = pipe.finetune_tasks(r);
      tasks.resize(std::min<std::size_t>(tasks.size(), 200));
      finetune_fv(m, pipe.initial_fv(r), tasks, data.scenes, ft, cfg.hash());
    }
    const bool same = m.checksum() == before && pipe.trained_params().checksum() == params_before;
    return Verdict{same, "checksum " + hex64(before) + (same ? " unchanged" : " CHANGED") + " over 4 relations"};
  }});

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    if (!v.pass) ++failed;
    std::cout << (v.pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << v.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
