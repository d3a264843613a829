#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "fvlab/model.hpp"
#include "fvlab/optim.hpp"
#include "fvlab/scenegen.hpp"

namespace fvlab {

struct TrainConfig {
  // Sized so a default run fits one hour on a single core.
  int steps = 10000;
  int batch = 32;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int warmup = 500;
  double grad_clip = 1.0;  // global norm; <= 0 disables
  // (n_shots, probability); never 0-shot.
  std::vector<std::pair<int, double>> shot_distribution = {{2, 0.25}, {4, 0.5}, {8, 0.25}};
  int heldout_every = 500;
  int heldout_tasks = 256;
  std::uint64_t seed = 1;

  void validate() const;
};

// Learning rate at `step` (0-based): linear warmup, then cosine decay to 0.
double scheduled_lr(const TrainConfig& cfg, int step);

struct TrainLogRow {
  int step = 0;
  double loss = 0.0;
  std::optional<double> heldout_acc;
};

struct TrainResult {
  ModelParams<float> params;  // frozen
  std::vector<TrainLogRow> log;
};

using TrainProgress = std::function<void(const TrainLogRow&)>;

// Meta-trains on clean few-shot prompts from the extraction split (base
// relations only). Loss is the mean NLL over every answer position. Held-out
// 4-shot accuracy is measured on the test split.
TrainResult meta_train(ModelParams<float> params, const DatasetBundle& bundle, const TrainConfig& cfg,
                       const TrainProgress& progress = {});

// Fraction of tasks whose argmax next token at the final position equals the
// gold answer token. Throws InvalidArgument for an empty list.
double eval_icl(const Backbone& model, std::span<const TaskInstance> tasks, SceneTable scenes);

// CSV with header step,loss,heldout_acc; empty cell when not evaluated.
void write_train_log(std::span<const TrainLogRow> rows, const std::filesystem::path& path);
std::vector<TrainLogRow> read_train_log(const std::filesystem::path& path);

}  // namespace fvlab
