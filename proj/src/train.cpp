#include "fvlab/train.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "fvlab/error.hpp"
#include "fvlab/transformer.hpp"

namespace fvlab {

namespace {

constexpr double kDivergenceLoss = 10.0;
constexpr int kDivergencePatience = 1000;
constexpr int kHeldoutShots = 4;

int sample_shots(const TrainConfig& cfg, Rng& rng) {
  double u = rng.uniform01();
  for (const auto& [n, p] : cfg.shot_distribution) {
    if (u < p) return n;
    u -= p;
  }
  return cfg.shot_distribution.back().first;
}

std::vector<TaskInstance> heldout_tasks(const DatasetBundle& bundle, const TrainConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, "heldout"));
  std::vector<TaskInstance> tasks;
  tasks.reserve(static_cast<std::size_t>(cfg.heldout_tasks));
  for (int i = 0; i < cfg.heldout_tasks; ++i) {
    const Relation r = kBaseRelations[static_cast<std::size_t>(i) % kBaseRelations.size()];
    tasks.push_back(sample_task(bundle, Split::Test, r, kHeldoutShots, false, rng));
  }
  return tasks;
}

double global_norm(std::span<const float> g) {
  double s = 0.0;
  for (float v : g) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

}  // namespace

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("train config: " + msg);
  };
  require(steps >= 0, "steps must be non-negative");
  require(batch > 0, "batch must be positive");
  require(lr >= 0.0, "lr must be non-negative");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must lie in [0,1)");
  require(warmup >= 0, "warmup must be non-negative");
  require(heldout_every > 0 && heldout_tasks > 0, "held-out cadence and size must be positive");
  require(!shot_distribution.empty(), "shot distribution is empty");
  double total = 0.0;
  for (const auto& [n, p] : shot_distribution) {
    require(n >= 1 && n <= 10, "shot counts must lie in [1,10]");
    require(p >= 0.0, "shot probabilities must be non-negative");
    total += p;
  }
  require(std::abs(total - 1.0) < 1e-9, "shot probabilities must sum to 1");
}

double scheduled_lr(const TrainConfig& cfg, int step) {
  if (step < cfg.warmup) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup);
  const int decay = cfg.steps - cfg.warmup;
  if (decay <= 0) return cfg.lr;
  const double t = static_cast<double>(step - cfg.warmup) / static_cast<double>(decay);
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(t, 1.0)));
}

double eval_icl(const Backbone& model, std::span<const TaskInstance> tasks, SceneTable scenes) {
  if (tasks.empty()) throw InvalidArgument("eval_icl: empty task list");
  int correct = 0;
  for (const auto& task : tasks) {
    const TokenSequence seq = encode_prompt(task, model.config().max_seq_len);
    const auto session = model.open_session(seq, scenes);
    if (argmax(session->baseline_logits()) == seq.gold_token) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(tasks.size());
}

TrainResult meta_train(ModelParams<float> params, const DatasetBundle& bundle, const TrainConfig& cfg,
                       const TrainProgress& progress) {
  cfg.validate();
  if (params.frozen()) throw ContractViolation("meta_train: parameters are frozen");
  const int max_len = params.config().max_seq_len;
  const SceneTable scenes = bundle.scenes;
  const auto heldout = heldout_tasks(bundle, cfg);

  Rng rng(derive_seed(cfg.seed, "meta-train"));
  Adam adam(params.values().size(), cfg.beta1, cfg.beta2, cfg.adam_eps);
  AlignedVector<float> grad(params.values().size());
  std::vector<TokenSequence> batch(static_cast<std::size_t>(cfg.batch));
  std::vector<TrainLogRow> log;
  log.reserve(static_cast<std::size_t>(cfg.steps));
  int diverged_for = 0;

  auto evaluate = [&]() {
    const TransformerBackbone<float> snapshot(params);
    return eval_icl(snapshot, heldout, scenes);
  };

  for (int step = 0; step < cfg.steps; ++step) {
    for (auto& seq : batch) {
      const Relation r = kBaseRelations[static_cast<std::size_t>(rng.uniform_int(0, 3))];
      const int n = sample_shots(cfg, rng);
      seq = encode_prompt(sample_task(bundle, Split::Extraction, r, n, false, rng), max_len);
    }
    const BatchLoss bl = batch_loss<float>(params, batch, scenes, grad);
    if (cfg.grad_clip > 0.0) {
      const double norm = global_norm(grad);
      if (norm > cfg.grad_clip) {
        const auto scale = static_cast<float>(cfg.grad_clip / norm);
        for (float& g : grad) g *= scale;
      }
    }
    adam.step<float>(params.mutable_values(), grad, scheduled_lr(cfg, step));

    TrainLogRow row{step + 1, bl.loss, std::nullopt};
    if ((step + 1) % cfg.heldout_every == 0 || step + 1 == cfg.steps) row.heldout_acc = evaluate();
    log.push_back(row);
    if (progress) progress(row);

    if (step >= cfg.warmup && bl.loss > kDivergenceLoss) {
      if (++diverged_for >= kDivergencePatience) {
        throw TrainingFailure("training diverged: loss above " + std::to_string(kDivergenceLoss) + " for " +
                              std::to_string(kDivergencePatience) + " consecutive steps (step " +
                              std::to_string(step + 1) + ")");
      }
    } else {
      diverged_for = 0;
    }
  }
  if (!params.all_finite()) throw TrainingFailure("training produced non-finite weights");
  params.set_training_seed(cfg.seed);
  params.freeze();
  return TrainResult{std::move(params), std::move(log)};
}

void write_train_log(std::span<const TrainLogRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,loss,heldout_acc\n";
  out.precision(17);
  for (const auto& r : rows) {
    out << r.step << ',' << r.loss << ',';
    if (r.heldout_acc) out << *r.heldout_acc;
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<TrainLogRow> read_train_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "step,loss,heldout_acc") {
    throw ParseError(path.string() + ": bad training log header");
  }
  std::vector<TrainLogRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string a, b, c;
    std::getline(ss, a, ',');
    std::getline(ss, b, ',');
    std::getline(ss, c);
    try {
      TrainLogRow r{std::stoi(a), std::stod(b), std::nullopt};
      if (!c.empty()) r.heldout_acc = std::stod(c);
      rows.push_back(r);
    } catch (const std::logic_error&) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": malformed row");
    }
  }
  return rows;
}

}  // namespace fvlab
