#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fvlab/config.hpp"
#include "fvlab/error.hpp"
#include "fvlab/harness.hpp"
#include "fvlab/hash.hpp"
#include "fvlab/train.hpp"

namespace fs = std::filesystem;
using namespace fvlab;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string precision;
  bool quiet = false;
};

ExperimentConfig build_config(const Globals& g) {
  ExperimentConfig cfg = g.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(g.config);
  if (g.seed) cfg.set_all_seeds(*g.seed);
  if (!g.out.empty()) cfg.out_dir = g.out;
  if (!g.precision.empty()) cfg.model.precision = precision_from_name(g.precision);
  cfg.validate();
  return cfg;
}

std::vector<Relation> pick_relations(const ExperimentConfig& cfg, const std::string& name) {
  if (name.empty() || name == "all") return cfg.relations;
  return {relation_from_name(name)};
}

void print_acc(const std::string& label, const Accuracy& a) {
  std::printf("%-28s %.4f  (se %.4f, n=%d)\n", label.c_str(), a.value, a.se(), a.n);
}

std::string fv_path(const ExperimentConfig& cfg, Relation r, const char* kind) {
  return (cfg.out_dir / ("fv_" + std::string(relation_name(r)) + "_" + kind + ".fvec")).string();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fvlab: function vectors for in-context spatial relations on a mini interleaved transformer"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "INI experiment configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "override every stage seed");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--precision", g.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  app.add_flag("-q,--quiet", g.quiet, "suppress progress output");

  std::string relation;
  std::string fv_file;
  std::optional<int> layer;

  auto* gen = app.add_subcommand("gen-data", "generate the scene dataset");
  auto* train = app.add_subcommand("train-backbone", "meta-train the backbone (cached)");
  auto* aie = app.add_subcommand("compute-aie", "mean head activations and AIE grids");
  aie->add_option("--relation", relation, "relation name or 'all'");
  auto* extract = app.add_subcommand("extract-fv", "extract initial function vectors");
  extract->add_option("--relation", relation, "relation name or 'all'");
  extract->add_option("--layer", layer, "injection layer (default: layer sweep)");
  auto* eval = app.add_subcommand("eval", "four-model zero-shot comparison on the test split");
  eval->add_option("--relation", relation, "relation name or 'all'");
  eval->add_option("--fv", fv_file, "also evaluate this saved vector")->check(CLI::ExistingFile);
  auto* finetune = app.add_subcommand("finetune-fv", "fine-tune function vectors");
  finetune->add_option("--relation", relation, "relation name or 'all'");
  auto* analogy = app.add_subcommand("analogy", "diagonal analogy problems with composite vectors");
  auto* sweep = app.add_subcommand("sweep", "layer, head-count or context-size sweep");
  std::string sweep_kind;
  sweep->add_option("kind", sweep_kind, "layers | heads | context")
      ->required()
      ->check(CLI::IsMember({"layers", "heads", "context"}));
  auto* report = app.add_subcommand("report", "run the full pipeline and write every report");

  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig cfg = build_config(g);
    if (layer) cfg.injection_layer = *layer;
    std::ostream* log = g.quiet ? nullptr : &std::cerr;
    Pipeline p(cfg, log);
    fs::create_directories(cfg.out_dir);
    const std::string hash = cfg.hash();

    if (*gen) {
      const auto& data = p.dataset();
      save_dataset(data, cfg.out_dir / "dataset.jsonl");
      std::printf("%zu scenes -> %s\n", data.scenes.size(), (cfg.out_dir / "dataset.jsonl").c_str());
    } else if (*train) {
      const auto& params = p.trained_params();
      save_checkpoint(params, cfg.out_dir / "backbone.fvlb");
      std::printf("checkpoint %s checksum %s\n", (cfg.out_dir / "backbone.fvlb").c_str(),
                  hex64(params.checksum()).c_str());
    } else if (*aie) {
      for (Relation r : pick_relations(cfg, relation)) {
        const auto& a = p.analysis(r);
        const fs::path path = cfg.out_dir / ("aie_" + std::string(relation_name(r)) + ".csv");
        write_aie_csv(a.aie, path, "config_hash=" + hash);
        const HeadSet top = select_top_heads(a.aie, cfg.head_count);
        std::printf("%s: %s; top head (%d,%d)\n", std::string(relation_name(r)).c_str(), path.c_str(),
                    top.members[0].layer, top.members[0].head);
      }
    } else if (*extract) {
      for (Relation r : pick_relations(cfg, relation)) {
        save_fv(p.initial_fv(r), fv_path(cfg, r, "initial"));
        std::printf("%s (layer %d)\n", fv_path(cfg, r, "initial").c_str(), p.injection_layer());
      }
    } else if (*eval) {
      std::optional<FunctionVector> extra;
      if (!fv_file.empty()) extra = load_fv(fv_file);
      for (Relation r : pick_relations(cfg, relation)) {
        const RelationResults res = p.four_model(r);
        const std::string name(relation_name(r));
        print_acc(name + " baseline", res.baseline);
        print_acc(name + " icl", res.icl);
        print_acc(name + " initial_fv", res.initial_fv);
        print_acc(name + " finetuned_fv", res.finetuned_fv);
        if (extra) {
          const auto tasks = p.test_tasks(r);
          const ZeroShotEval ev = eval_zero_shot(p.backbone(), tasks, p.dataset().scenes, &*extra);
          print_acc(name + " " + fs::path(fv_file).filename().string(),
                    Accuracy::of(ev.correct(), static_cast<int>(ev.records.size())));
        }
      }
    } else if (*finetune) {
      for (Relation r : pick_relations(cfg, relation)) {
        const FtResult& ft = p.finetuned_fv(r);
        save_fv(ft.fv, fv_path(cfg, r, "finetuned"));
        std::printf("%s: nll %.4f -> %.4f\n", fv_path(cfg, r, "finetuned").c_str(), ft.epoch_loss.front(),
                    ft.epoch_loss.back());
      }
    } else if (*analogy) {
      const auto rows = p.analogy();
      write_analogy_csv(rows, cfg.out_dir / "analogy.csv", hash);
      for (const auto& row : rows) print_acc(row.method, row.acc);
    } else if (*sweep) {
      if (sweep_kind == "layers") {
        const auto rows = p.sweep_layers();
        write_layer_sweep_csv(rows, cfg.out_dir / "sweep_layers.csv", hash);
        std::printf("best layer %d\n", p.injection_layer());
      } else if (sweep_kind == "heads") {
        write_head_sweep_csv(p.sweep_head_counts(), cfg.out_dir / "sweep_heads.csv", hash);
      } else {
        const auto rows = p.sweep_context_size();
        for (int n : cfg.context_sizes) {
          std::vector<ContextSweepRow> part;
          for (const auto& row : rows) {
            if (row.n == n) part.push_back(row);
          }
          write_context_sweep_csv(part, cfg.out_dir / ("sweep_context_n" + std::to_string(n) + ".csv"), hash);
        }
      }
      std::printf("wrote %s sweep to %s\n", sweep_kind.c_str(), cfg.out_dir.c_str());
    } else if (*report) {
      const ResultsBundle b = p.run_full();
      std::printf("results in %s (config %s)\n", cfg.out_dir.c_str(), b.meta.config_hash.c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fvlab: %s\n", e.what());
    return 1;
  }
  return 0;
}
