#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fvlab/config.hpp"
#include "fvlab/fv.hpp"
#include "fvlab/mediation.hpp"
#include "fvlab/model.hpp"
#include "fvlab/scenegen.hpp"

namespace fvlab {

struct Accuracy {
  double value = 0.0;
  int n = 0;

  static Accuracy of(int correct, int n);
  // Binomial standard error sqrt(p(1-p)/n).
  double se() const;
  friend bool operator==(const Accuracy&, const Accuracy&) = default;
};

struct RelationResults {
  Relation relation = Relation::Above;
  Accuracy baseline;
  Accuracy icl;
  Accuracy initial_fv;
  Accuracy finetuned_fv;
  std::vector<HeadIndex> heads;
  std::vector<double> finetune_loss;
  friend bool operator==(const RelationResults&, const RelationResults&) = default;
};

struct LayerSweepRow {
  Relation relation = Relation::Above;
  int layer = 0;
  Accuracy acc;
  friend bool operator==(const LayerSweepRow&, const LayerSweepRow&) = default;
};

struct HeadSweepRow {
  Relation relation = Relation::Above;
  int k = 0;
  Accuracy acc;
  friend bool operator==(const HeadSweepRow&, const HeadSweepRow&) = default;
};

struct ContextSweepRow {
  int n = 0;
  Relation relation = Relation::Above;
  int layer = 0;
  Accuracy acc;
  friend bool operator==(const ContextSweepRow&, const ContextSweepRow&) = default;
};

struct AnalogyRow {
  std::string method;  // icl_1shot | icl_4shot | icl_10shot | cfv
  Accuracy acc;
  friend bool operator==(const AnalogyRow&, const AnalogyRow&) = default;
};

struct RunMetadata {
  std::string config_hash;
  std::string dataset_key;
  std::string backbone_key;
  std::string backbone_checksum;
  std::map<std::string, std::uint64_t> seeds;
  int injection_layer = 0;
  std::string precision;
  std::string started_at;  // UTC, ISO 8601; excluded from equality
  std::vector<std::string> warnings;

  friend bool operator==(const RunMetadata& a, const RunMetadata& b) {
    return a.config_hash == b.config_hash && a.dataset_key == b.dataset_key && a.backbone_key == b.backbone_key &&
           a.backbone_checksum == b.backbone_checksum && a.seeds == b.seeds && a.injection_layer == b.injection_layer &&
           a.precision == b.precision && a.warnings == b.warnings;
  }
};

struct ResultsBundle {
  RunMetadata meta;
  std::vector<RelationResults> relations;
  std::vector<AieMatrix> aie;
  std::vector<LayerSweepRow> layer_sweep;
  std::vector<HeadSweepRow> head_sweep;
  std::map<std::string, int> head_peak;  // relation name -> empirical best k
  std::vector<ContextSweepRow> context_sweep;
  std::vector<AnalogyRow> analogy;

  friend bool operator==(const ResultsBundle& a, const ResultsBundle& b);
};

// Stage-by-stage experiment driver. Every stage output is cached on disk
// under out_dir/cache, keyed by the hash of the configuration it depends on,
// and is reloaded instead of recomputed on later runs.
class Pipeline {
 public:
  explicit Pipeline(ExperimentConfig cfg, std::ostream* log = nullptr);
  ~Pipeline();

  const ExperimentConfig& config() const noexcept { return cfg_; }
  std::filesystem::path cache_dir() const;

  const DatasetBundle& dataset();
  const ModelParams<float>& trained_params();
  const Backbone& backbone();

  struct Analysis {
    MeanActivations means;
    AieMatrix aie;
  };
  // Means from clean `shots`-shot extraction prompts; AIE on the shared
  // perturbed set of the relation.
  const Analysis& analysis(Relation r, int shots);
  const Analysis& analysis(Relation r) { return analysis(r, cfg_.extraction_shots); }
  HeadSet heads(Relation r, int k);

  std::vector<LayerSweepRow> sweep_layers();
  int injection_layer();
  FunctionVector initial_fv(Relation r);
  const FtResult& finetuned_fv(Relation r);

  std::vector<HeadSweepRow> sweep_head_counts();
  std::vector<ContextSweepRow> sweep_context_size();
  std::vector<AnalogyRow> analogy();
  RelationResults four_model(Relation r);

  ResultsBundle run_full();

  // Deterministic task sets.
  std::vector<TaskInstance> extraction_prompts(Relation r, int shots);
  std::vector<TaskInstance> perturbed_prompts(Relation r);
  std::vector<TaskInstance> test_tasks(Relation r);
  std::vector<TaskInstance> validation_tasks(Relation r);
  std::vector<TaskInstance> finetune_tasks(Relation r);
  std::vector<TaskInstance> icl_tasks(Relation r);
  std::vector<AnalogyProblem> analogy_problems();

  const std::vector<std::string>& warnings() const noexcept { return warnings_; }

 private:
  void note(const std::string& msg);
  void warn(const std::string& msg);
  const ZeroShotBench& bench(const std::string& name, Relation r);

  ExperimentConfig cfg_;
  std::ostream* log_;
  std::optional<DatasetBundle> dataset_;
  std::optional<ModelParams<float>> params_;
  std::unique_ptr<Backbone> backbone_;
  std::map<std::pair<Relation, int>, Analysis> analyses_;
  std::optional<std::vector<LayerSweepRow>> layer_sweep_;
  std::optional<int> layer_;
  std::map<Relation, FtResult> finetuned_;
  std::map<std::pair<std::string, Relation>, std::unique_ptr<ZeroShotBench>> benches_;
  std::vector<std::string> warnings_;
};

// generate -> train if absent -> means -> AIE -> top-k -> extract -> eval ->
// finetune -> eval -> analogy -> sweeps -> reports. Stage failures surface as
// StageError naming the stage; artifacts already written are kept.
ResultsBundle run_full_pipeline(const ExperimentConfig& cfg, std::ostream* log = nullptr);

// ICL prompts whose queries are the first `count` scenes of `split`; demos
// come from other scenes of the same split.
std::vector<TaskInstance> icl_prompt_set(const DatasetBundle& bundle, Split split, Relation r, int shots, int count,
                                         std::uint64_t seed);

// Writes results.json, aie_<rel>.csv with JSON sidecars, the sweep CSVs,
// analogy.csv and summary.md into `dir`. Throws IoError.
void emit_reports(const ResultsBundle& bundle, const std::filesystem::path& dir);

// Single-table writers used by emit_reports; each file opens with a
// "# config_hash=" comment.
void write_layer_sweep_csv(std::span<const LayerSweepRow> rows, const std::filesystem::path& path,
                           const std::string& config_hash);
void write_head_sweep_csv(std::span<const HeadSweepRow> rows, const std::filesystem::path& path,
                          const std::string& config_hash);
void write_context_sweep_csv(std::span<const ContextSweepRow> rows, const std::filesystem::path& path,
                             const std::string& config_hash);
void write_analogy_csv(std::span<const AnalogyRow> rows, const std::filesystem::path& path,
                       const std::string& config_hash);

// Parsers for the emitted CSVs; round trip exactly.
std::vector<LayerSweepRow> read_layer_sweep_csv(const std::filesystem::path& path);
std::vector<HeadSweepRow> read_head_sweep_csv(const std::filesystem::path& path);
std::vector<ContextSweepRow> read_context_sweep_csv(const std::filesystem::path& path);
std::vector<AnalogyRow> read_analogy_csv(const std::filesystem::path& path);
// The value of the "# config_hash=" comment heading an emitted file.
std::string read_config_hash(const std::filesystem::path& path);

}  // namespace fvlab
