#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fvlab/mediation.hpp"
#include "fvlab/model.hpp"

namespace fvlab {

enum class Aggregation : std::uint8_t { Sum, Mean };

std::string_view aggregation_name(Aggregation a);
Aggregation aggregation_from_name(std::string_view name);

inline constexpr std::string_view kCompositeTag = "composite";

struct FvEvent {
  std::string event;  // extracted | finetuned | composed
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string detail;
  friend bool operator==(const FvEvent&, const FvEvent&) = default;
};

struct FunctionVector {
  Eigen::VectorXd vector;
  std::string relation;  // relation name or kCompositeTag
  std::optional<HeadSet> head_set;
  Aggregation aggregation = Aggregation::Sum;
  int injection_layer = 0;
  std::vector<FvEvent> history;

  // Throws InvalidArgument when not finite or the layer is outside the model.
  void validate(const ModelConfig& cfg) const;
};

// Sum (or mean) of the head means over `heads`.
FunctionVector extract_fv(const MeanActivations& means, const HeadSet& heads, Aggregation aggregation,
                          int injection_layer, const FvEvent& event = {"extracted", "", 0, ""});

struct ZeroShotRecord {
  int scene_id = 0;
  TokenId gold = 0;
  TokenId predicted = 0;
  double gold_prob = 0.0;
  bool correct = false;
};

struct ZeroShotEval {
  double accuracy = 0.0;
  std::vector<ZeroShotRecord> records;

  int correct() const;
};

// Zero-shot evaluation with `fv` (when given) added to the residual stream
// after its injection layer at the final position.
ZeroShotEval eval_zero_shot(const Backbone& model, std::span<const TaskInstance> tasks, SceneTable scenes,
                            const FunctionVector* fv = nullptr);

// Cached sessions over a fixed zero-shot task set, for evaluating many
// vectors against the same prompts.
class ZeroShotBench {
 public:
  ZeroShotBench(const Backbone& model, std::span<const TaskInstance> tasks, SceneTable scenes);

  ZeroShotEval evaluate(const FunctionVector* fv) const;
  int size() const noexcept { return static_cast<int>(sessions_.size()); }

 private:
  const Backbone& model_;
  std::vector<std::unique_ptr<FinalSession>> sessions_;
  std::vector<TokenSequence> seqs_;
  std::vector<int> scene_ids_;
};

enum class FtOptimizer : std::uint8_t { Adam, Sgd };

struct FtConfig {
  int epochs = 20;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch = 32;
  FtOptimizer optimizer = FtOptimizer::Adam;
  std::uint64_t seed = 1;

  void validate() const;
};

struct FtResult {
  FunctionVector fv;
  // Mean NLL over the training set before training ([0]) and after each epoch.
  std::vector<double> epoch_loss;
};

// Optimizes only the vector on the zero-shot NLL of the gold token. Throws
// ContractViolation when the backbone is not frozen.
FtResult finetune_fv(const Backbone& model, const FunctionVector& fv, std::span<const TaskInstance> train_tasks,
                     SceneTable scenes, const FtConfig& cfg, const std::string& config_hash = {});

// Mean zero-shot NLL of the gold token with `fv` injected.
double injection_nll(const Backbone& model, const FunctionVector& fv, std::span<const TaskInstance> tasks,
                     SceneTable scenes);

struct AnalogySource {
  int scene_id = 0;
  ObjectId x1;
  ObjectId y1;
};

struct CompositeWeights {
  // Indexed like kBaseRelations.
  std::array<double, 4> weights{};
  std::array<double, 4> probs{};
  AnalogySource source;

  double sum() const;
};

// w_t = p_t / sum(p). Throws DegenerateSource when every p_t is zero and
// InvalidArgument for negative or non-finite input.
CompositeWeights normalize_weights(const std::array<double, 4>& probs, AnalogySource source = {});

// `fvs` holds one vector per base relation, any order, one injection layer.
CompositeWeights composite_weights(const Backbone& model, const AnalogySource& source,
                                   std::span<const FunctionVector> fvs, SceneTable scenes);

FunctionVector compose_fv(std::span<const FunctionVector> fvs, const CompositeWeights& weights);

struct AnalogyProblem {
  AnalogySource source;
  int target_scene = 0;
  ObjectId x2;
  Relation relation = Relation::AboveRight;  // ground truth, hidden from the solver
  ObjectId gold;
};

struct AnalogyResult {
  TokenId predicted_token = 0;
  std::optional<ObjectId> prediction;
  bool correct = false;
  CompositeWeights weights;
};

// Source and target are distinct analogy-split scenes.
AnalogyProblem sample_analogy(const DatasetBundle& bundle, Relation relation, Rng& rng);

// The same problem as a one-shot prompt: the source pair is the demo.
TaskInstance analogy_icl_task(const AnalogyProblem& problem);

AnalogyResult solve_analogy(const Backbone& model, const AnalogyProblem& problem,
                            std::span<const FunctionVector> fvs, SceneTable scenes);

// "FVEC" file, little-endian: u16 version, relation tag, injection layer,
// head list, aggregation, d_model f64 values, then the history as JSON.
inline constexpr std::uint16_t kFvFileVersion = 1;

void save_fv(const FunctionVector& fv, const std::filesystem::path& path);
FunctionVector load_fv(const std::filesystem::path& path);

}  // namespace fvlab
