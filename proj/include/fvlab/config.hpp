#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fvlab/fv.hpp"
#include "fvlab/model.hpp"
#include "fvlab/scenegen.hpp"
#include "fvlab/train.hpp"

namespace fvlab {

enum class CompositeSource : std::uint8_t { Initial, Finetuned };

// Whole-experiment configuration. The on-disk form is INI with one section
// per stage; see README for the schema. Unknown keys are rejected.
struct ExperimentConfig {
  // [dataset]
  std::uint64_t dataset_seed = 1;
  SplitSizes sizes;

  // [model]
  ModelConfig model;
  std::uint64_t init_seed = 1;
  std::filesystem::path checkpoint;  // empty: trained and cached under the output directory

  // [train]
  TrainConfig train;

  // [mediation]
  std::vector<Relation> relations{kBaseRelations.begin(), kBaseRelations.end()};
  int extraction_prompts = 256;
  int perturbed_prompts = 256;
  int extraction_shots = 4;
  int head_count = 10;
  std::uint64_t mediation_seed = 1;

  // [fv]
  Aggregation aggregation = Aggregation::Sum;
  std::optional<int> injection_layer;  // nullopt: chosen by the layer sweep
  CompositeSource composite_source = CompositeSource::Finetuned;

  // [finetune]
  FtConfig finetune;

  // [eval]
  int icl_shots = 4;
  int test_tasks = 1000;        // zero-shot tasks per relation, test split
  int validation_tasks = 1000;  // zero-shot tasks per relation, finetune split
  int finetune_tasks = 1000;    // zero-shot training tasks per relation, finetune split
  int analogy_problems = 1000;
  std::uint64_t eval_seed = 1;

  // [sweep]
  int head_sweep_max = 50;
  std::vector<int> context_sizes{2, 4, 8};

  // [run]
  std::filesystem::path out_dir = "fvlab_out";

  // Throws ConfigError.
  void validate() const;

  // Sets every stage seed to `seed`.
  void set_all_seeds(std::uint64_t seed);

  std::string to_ini() const;
  static ExperimentConfig from_ini(std::string_view text);
  static ExperimentConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  // Hex FNV-1a of the canonical INI text without the [run] section.
  std::string hash() const;
  // Keys of the cached stage artifacts; each covers only what its stage reads.
  std::string dataset_key() const;
  std::string backbone_key() const;
  std::string analysis_key() const;
};

}  // namespace fvlab
