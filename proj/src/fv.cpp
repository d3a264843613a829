#include "fvlab/fv.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <numeric>

#include <nlohmann/json.hpp>

#include "binio.hpp"
#include "fvlab/error.hpp"
#include "fvlab/optim.hpp"

namespace fvlab {

namespace {

constexpr char kMagic[4] = {'F', 'V', 'E', 'C'};

void check_dim(const ModelConfig& cfg, const FunctionVector& fv) {
  if (fv.vector.size() != cfg.d_model) {
    throw InvalidArgument("function vector has dimension " + std::to_string(fv.vector.size()) + ", model needs " +
                          std::to_string(cfg.d_model));
  }
}

void check_zero_shot(std::span<const TaskInstance> tasks) {
  if (tasks.empty()) throw InvalidArgument("zero-shot task list is empty");
  for (const auto& t : tasks) {
    if (t.shots() != 0) throw InvalidArgument("zero-shot evaluation got a prompt with demonstrations");
  }
}

std::vector<Intervention> injection(const FunctionVector& fv, int position) {
  return {InjectResidual{fv.injection_layer, position, fv.vector}};
}

double nll(const Eigen::VectorXd& logits, TokenId target) { return -std::log(softmax(logits)(target)); }

// Base-relation slot of each vector; requires exactly one per base relation
// and a shared injection layer.
std::array<const FunctionVector*, 4> base_order(std::span<const FunctionVector> fvs) {
  if (fvs.size() != kBaseRelations.size()) throw InvalidArgument("need exactly one function vector per base relation");
  std::array<const FunctionVector*, 4> out{};
  for (const auto& fv : fvs) {
    const Relation r = relation_from_name(fv.relation);
    if (!is_base(r)) throw InvalidArgument("composite sources must be base relations, got " + fv.relation);
    auto& slot = out[static_cast<std::size_t>(r)];
    if (slot) throw InvalidArgument("duplicate function vector for " + fv.relation);
    if (fv.injection_layer != fvs.front().injection_layer) {
      throw InvalidArgument("base function vectors use different injection layers");
    }
    if (fv.vector.size() != fvs.front().vector.size()) throw InvalidArgument("function vector dimensions differ");
    slot = &fv;
  }
  return out;
}

TaskInstance source_task(const AnalogySource& s) {
  TaskInstance t;
  t.query = {s.scene_id, s.x1};
  t.gold = s.y1;
  return t;
}

}  // namespace

std::string_view aggregation_name(Aggregation a) { return a == Aggregation::Sum ? "sum" : "mean"; }

Aggregation aggregation_from_name(std::string_view name) {
  if (name == "sum") return Aggregation::Sum;
  if (name == "mean") return Aggregation::Mean;
  throw ConfigError("unknown aggregation '" + std::string(name) + "' (expected sum or mean)");
}

void FunctionVector::validate(const ModelConfig& cfg) const {
  check_dim(cfg, *this);
  if (!vector.allFinite()) throw InvalidArgument("function vector is not finite");
  if (injection_layer < 0 || injection_layer >= cfg.n_layers) {
    throw InvalidArgument("injection layer " + std::to_string(injection_layer) + " outside the model");
  }
}

FunctionVector extract_fv(const MeanActivations& means, const HeadSet& heads, Aggregation aggregation,
                          int injection_layer, const FvEvent& event) {
  if (heads.members.empty()) throw InvalidArgument("head set is empty");
  if (heads.relation != means.relation) throw InvalidArgument("head set and mean activations differ in relation");
  if (injection_layer < 0 || injection_layer >= means.n_layers) {
    throw InvalidArgument("injection layer " + std::to_string(injection_layer) + " outside the model");
  }
  FunctionVector fv;
  fv.vector = Eigen::VectorXd::Zero(means.at(heads.members.front()).size());
  for (HeadIndex h : heads.members) fv.vector += means.at(h);
  if (aggregation == Aggregation::Mean) fv.vector /= static_cast<double>(heads.members.size());
  fv.relation = std::string(relation_name(means.relation));
  fv.head_set = heads;
  fv.aggregation = aggregation;
  fv.injection_layer = injection_layer;
  fv.history.push_back(event);
  return fv;
}

int ZeroShotEval::correct() const {
  return static_cast<int>(std::count_if(records.begin(), records.end(), [](const auto& r) { return r.correct; }));
}

ZeroShotBench::ZeroShotBench(const Backbone& model, std::span<const TaskInstance> tasks, SceneTable scenes)
    : model_(model) {
  check_zero_shot(tasks);
  sessions_.reserve(tasks.size());
  seqs_.reserve(tasks.size());
  for (const auto& task : tasks) {
    seqs_.push_back(encode_prompt(task, model.config().max_seq_len));
    scene_ids_.push_back(task.query.scene_id);
    sessions_.push_back(model.open_session(seqs_.back(), scenes));
  }
}

ZeroShotEval ZeroShotBench::evaluate(const FunctionVector* fv) const {
  if (fv) fv->validate(model_.config());
  ZeroShotEval out;
  out.records.reserve(sessions_.size());
  for (std::size_t i = 0; i < sessions_.size(); ++i) {
    const TokenSequence& seq = seqs_[i];
    auto& session = *sessions_[i];
    const Eigen::VectorXd logits =
        fv ? session.logits_with(injection(*fv, seq.final_position)) : session.baseline_logits();
    ZeroShotRecord rec;
    rec.scene_id = scene_ids_[i];
    rec.gold = seq.gold_token;
    rec.predicted = argmax(logits);
    rec.gold_prob = softmax(logits)(seq.gold_token);
    rec.correct = rec.predicted == rec.gold;
    out.records.push_back(rec);
  }
  out.accuracy = static_cast<double>(out.correct()) / static_cast<double>(out.records.size());
  return out;
}

ZeroShotEval eval_zero_shot(const Backbone& model, std::span<const TaskInstance> tasks, SceneTable scenes,
                            const FunctionVector* fv) {
  check_zero_shot(tasks);
  if (fv) fv->validate(model.config());
  return ZeroShotBench(model, tasks, scenes).evaluate(fv);
}

void FtConfig::validate() const {
  if (epochs < 1) throw ConfigError("finetune config: epochs must be at least 1");
  if (batch < 1) throw ConfigError("finetune config: batch must be positive");
  if (lr < 0.0) throw ConfigError("finetune config: lr must be non-negative");
}

double injection_nll(const Backbone& model, const FunctionVector& fv, std::span<const TaskInstance> tasks,
                     SceneTable scenes) {
  const ModelConfig& cfg = model.config();
  check_zero_shot(tasks);
  fv.validate(cfg);
  double total = 0.0;
  for (const auto& task : tasks) {
    const TokenSequence seq = encode_prompt(task, cfg.max_seq_len);
    const auto session = model.open_session(seq, scenes);
    total += nll(session->logits_with(injection(fv, seq.final_position)), seq.gold_token);
  }
  return total / static_cast<double>(tasks.size());
}

FtResult finetune_fv(const Backbone& model, const FunctionVector& fv, std::span<const TaskInstance> train_tasks,
                     SceneTable scenes, const FtConfig& cfg, const std::string& config_hash) {
  if (!model.frozen()) throw ContractViolation("finetune_fv: backbone is not frozen");
  cfg.validate();
  const ModelConfig& mc = model.config();
  fv.validate(mc);
  check_zero_shot(train_tasks);
  for (const auto& t : train_tasks) {
    if (relation_name(t.relation) != fv.relation) throw InvalidArgument("training task relation differs from the vector");
  }

  std::vector<std::unique_ptr<FinalSession>> sessions;
  std::vector<TokenId> gold;
  std::vector<int> final_pos;
  sessions.reserve(train_tasks.size());
  for (const auto& task : train_tasks) {
    const TokenSequence seq = encode_prompt(task, mc.max_seq_len);
    sessions.push_back(model.open_session(seq, scenes));
    gold.push_back(seq.gold_token);
    final_pos.push_back(seq.final_position);
  }
  const int layer = fv.injection_layer;
  const auto n = static_cast<int>(sessions.size());
  auto full_loss = [&](const Eigen::VectorXd& v) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      const std::vector<Intervention> iv{InjectResidual{layer, final_pos[k], v}};
      total += nll(sessions[k]->logits_with(iv), gold[k]);
    }
    return total / static_cast<double>(n);
  };

  FtResult out;
  out.fv = fv;
  Eigen::VectorXd v = fv.vector;
  out.epoch_loss.push_back(full_loss(v));
  Adam adam(static_cast<std::size_t>(v.size()), cfg.beta1, cfg.beta2, cfg.adam_eps);
  Rng rng(derive_seed(cfg.seed, "finetune"));
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Eigen::VectorXd grad(v.size());

  for (int e = 0; e < cfg.epochs; ++e) {
    const double lr = cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * e / cfg.epochs));
    rng.shuffle(std::span(order));
    for (int b = 0; b < n; b += cfg.batch) {
      const int end = std::min(n, b + cfg.batch);
      grad.setZero();
      for (int i = b; i < end; ++i) {
        const auto k = static_cast<std::size_t>(order[static_cast<std::size_t>(i)]);
        grad += sessions[k]->injection_loss_grad(layer, v, gold[k]).grad;
      }
      grad /= static_cast<double>(end - b);
      if (cfg.optimizer == FtOptimizer::Adam) {
        adam.step<double>(std::span(v.data(), static_cast<std::size_t>(v.size())),
                          std::span<const double>(grad.data(), static_cast<std::size_t>(grad.size())), lr);
      } else {
        v -= lr * grad;
      }
      if (!v.allFinite()) throw NumericError("function vector diverged during fine-tuning");
    }
    out.epoch_loss.push_back(full_loss(v));
  }
  out.fv.vector = v;
  out.fv.history.push_back({"finetuned", config_hash, cfg.seed,
                            std::to_string(cfg.epochs) + " epochs over " + std::to_string(n) + " tasks"});
  return out;
}

double CompositeWeights::sum() const { return std::accumulate(weights.begin(), weights.end(), 0.0); }

CompositeWeights normalize_weights(const std::array<double, 4>& probs, AnalogySource source) {
  double total = 0.0;
  for (double p : probs) {
    if (!std::isfinite(p) || p < 0.0) throw InvalidArgument("composite probabilities must be finite and non-negative");
    total += p;
  }
  if (total <= 0.0) throw DegenerateSource("every base vector gives the source answer zero probability");
  CompositeWeights w;
  w.probs = probs;
  w.source = source;
  for (std::size_t i = 0; i < probs.size(); ++i) w.weights[i] = probs[i] / total;
  return w;
}

CompositeWeights composite_weights(const Backbone& model, const AnalogySource& source,
                                   std::span<const FunctionVector> fvs, SceneTable scenes) {
  const ModelConfig& cfg = model.config();
  const auto ordered = base_order(fvs);
  for (const auto* fv : ordered) fv->validate(cfg);
  const TokenSequence seq = encode_prompt(source_task(source), cfg.max_seq_len);
  const auto session = model.open_session(seq, scenes);
  const TokenId y1 = first_answer_token(source.y1);
  std::array<double, 4> probs{};
  for (std::size_t i = 0; i < ordered.size(); ++i) {
    probs[i] = softmax(session->logits_with(injection(*ordered[i], seq.final_position)))(y1);
  }
  return normalize_weights(probs, source);
}

FunctionVector compose_fv(std::span<const FunctionVector> fvs, const CompositeWeights& weights) {
  const auto ordered = base_order(fvs);
  for (double w : weights.weights) {
    if (!std::isfinite(w) || w < 0.0) throw InvalidArgument("composite weights must be non-negative");
  }
  if (std::abs(weights.sum() - 1.0) > 1e-9) throw InvalidArgument("composite weights must sum to 1");
  FunctionVector out;
  out.vector = Eigen::VectorXd::Zero(ordered[0]->vector.size());
  for (std::size_t i = 0; i < ordered.size(); ++i) out.vector += weights.weights[i] * ordered[i]->vector;
  out.relation = std::string(kCompositeTag);
  out.aggregation = ordered[0]->aggregation;
  out.injection_layer = ordered[0]->injection_layer;
  std::string detail = "source scene " + std::to_string(weights.source.scene_id) + " (" +
                       std::string(object_name(weights.source.x1)) + " -> " +
                       std::string(object_name(weights.source.y1)) + "), weights";
  for (double w : weights.weights) detail += " " + std::to_string(w);
  out.history.push_back({"composed", "", 0, detail});
  return out;
}

AnalogyProblem sample_analogy(const DatasetBundle& bundle, Relation relation, Rng& rng) {
  if (!is_diagonal(relation)) throw InvalidRequest("analogy problems use diagonal relations");
  const TaskInstance t = sample_task(bundle, Split::Analogy, relation, 1, false, rng);
  AnalogyProblem p;
  p.source = {t.demos[0].scene_id, t.demos[0].query, t.demos[0].answer};
  p.target_scene = t.query.scene_id;
  p.x2 = t.query.label;
  p.relation = relation;
  p.gold = t.gold;
  return p;
}

TaskInstance analogy_icl_task(const AnalogyProblem& problem) {
  TaskInstance t;
  t.demos.push_back({problem.source.scene_id, problem.source.x1, problem.source.y1});
  t.query = {problem.target_scene, problem.x2};
  t.gold = problem.gold;
  t.relation = problem.relation;
  return t;
}

AnalogyResult solve_analogy(const Backbone& model, const AnalogyProblem& problem,
                            std::span<const FunctionVector> fvs, SceneTable scenes) {
  const ModelConfig& cfg = model.config();
  AnalogyResult out;
  out.weights = composite_weights(model, problem.source, fvs, scenes);
  const FunctionVector cfv = compose_fv(fvs, out.weights);
  TaskInstance target;
  target.query = {problem.target_scene, problem.x2};
  target.gold = problem.gold;
  target.relation = problem.relation;
  const TokenSequence seq = encode_prompt(target, cfg.max_seq_len);
  const auto session = model.open_session(seq, scenes);
  out.predicted_token = argmax(session->logits_with(injection(cfv, seq.final_position)));
  if (default_vocabulary().is_object(out.predicted_token)) out.prediction = ObjectId{out.predicted_token};
  out.correct = out.predicted_token == first_answer_token(problem.gold);
  return out;
}

void save_fv(const FunctionVector& fv, const std::filesystem::path& path) {
  if (!fv.vector.allFinite()) throw InvalidArgument("refusing to save a non-finite function vector");
  detail::Writer w(path);
  w.bytes(kMagic, 4);
  w.put<std::uint16_t>(kFvFileVersion);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(fv.relation.size()));
  w.bytes(fv.relation.data(), fv.relation.size());
  w.put<std::int32_t>(fv.injection_layer);
  const auto heads = fv.head_set ? fv.head_set->members : std::vector<HeadIndex>{};
  w.put<std::uint32_t>(static_cast<std::uint32_t>(heads.size()));
  for (HeadIndex h : heads) {
    w.put<std::int32_t>(h.layer);
    w.put<std::int32_t>(h.head);
  }
  w.put<std::uint8_t>(static_cast<std::uint8_t>(fv.aggregation));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(fv.vector.size()));
  for (Eigen::Index i = 0; i < fv.vector.size(); ++i) w.put<double>(fv.vector(i));

  nlohmann::ordered_json meta;
  meta["has_head_set"] = fv.head_set.has_value();
  if (fv.head_set) {
    meta["head_set_relation"] = relation_name(fv.head_set->relation);
    meta["tie_break"] = fv.head_set->tie_break;
  }
  meta["history"] = nlohmann::ordered_json::array();
  for (const auto& e : fv.history) {
    meta["history"].push_back({{"event", e.event}, {"config_hash", e.config_hash}, {"seed", e.seed}, {"detail", e.detail}});
  }
  const std::string text = meta.dump();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(text.size()));
  w.bytes(text.data(), text.size());
  w.finish();
}

FunctionVector load_fv(const std::filesystem::path& path) {
  detail::Reader r(path, "function vector file");
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw ParseError(path.string() + ": not a function vector file");
  const auto version = r.get<std::uint16_t>();
  if (version != kFvFileVersion) {
    throw VersionMismatch(path.string() + ": function vector file version " + std::to_string(version) +
                          ", expected " + std::to_string(kFvFileVersion));
  }
  FunctionVector fv;
  fv.relation.resize(r.get<std::uint16_t>());
  r.bytes(fv.relation.data(), fv.relation.size());
  fv.injection_layer = r.get<std::int32_t>();
  std::vector<HeadIndex> heads(r.get<std::uint32_t>());
  for (auto& h : heads) {
    h.layer = r.get<std::int32_t>();
    h.head = r.get<std::int32_t>();
  }
  const auto agg = r.get<std::uint8_t>();
  if (agg > 1) throw ParseError(path.string() + ": bad aggregation flag");
  fv.aggregation = static_cast<Aggregation>(agg);
  fv.vector.resize(r.get<std::uint32_t>());
  for (Eigen::Index i = 0; i < fv.vector.size(); ++i) fv.vector(i) = r.get<double>();
  std::string text(r.get<std::uint32_t>(), '\0');
  r.bytes(text.data(), text.size());
  try {
    const auto meta = nlohmann::json::parse(text);
    if (meta.at("has_head_set").get<bool>()) {
      HeadSet hs;
      hs.relation = relation_from_name(meta.at("head_set_relation").get<std::string>());
      hs.tie_break = meta.at("tie_break").get<std::string>();
      hs.members = std::move(heads);
      fv.head_set = std::move(hs);
    }
    for (const auto& e : meta.at("history")) {
      fv.history.push_back({e.at("event").get<std::string>(), e.at("config_hash").get<std::string>(),
                            e.at("seed").get<std::uint64_t>(), e.at("detail").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": bad metadata block: " + e.what());
  }
  return fv;
}

}  // namespace fvlab
