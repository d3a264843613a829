#include "fvlab/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "fvlab/error.hpp"
#include "fvlab/hash.hpp"

namespace fvlab {

namespace {

namespace pt = boost::property_tree;

std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename I>
std::string fmt_int(I v) {
  return std::to_string(v);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(s);
  while (std::getline(ss, cur, sep)) {
    const auto b = cur.find_first_not_of(" \t");
    const auto e = cur.find_last_not_of(" \t");
    out.push_back(b == std::string::npos ? std::string() : cur.substr(b, e - b + 1));
  }
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) {
    throw ConfigError((key.empty() ? std::string() : key + ": ") + "bad value '" + text + "'");
  }
  return v;
}

std::string join_shots(const std::vector<std::pair<int, double>>& d) {
  std::string out;
  for (const auto& [n, p] : d) {
    if (!out.empty()) out += ',';
    out += std::to_string(n) + ":" + fmt(p);
  }
  return out;
}

std::string join_relations(const std::vector<Relation>& rs) {
  std::string out;
  for (Relation r : rs) {
    if (!out.empty()) out += ',';
    out += relation_name(r);
  }
  return out;
}

std::string join_ints(const std::vector<int>& xs) {
  std::string out;
  for (int x : xs) {
    if (!out.empty()) out += ',';
    out += std::to_string(x);
  }
  return out;
}

// Ordered (section, key, value) table: the single source for writing,
// reading and hashing.
using Entry = std::pair<std::string, std::string>;
using Section = std::pair<std::string, std::vector<Entry>>;

std::vector<Section> sections(const ExperimentConfig& c) {
  const ModelConfig& m = c.model;
  const TrainConfig& t = c.train;
  const FtConfig& f = c.finetune;
  return {
      {"dataset",
       {{"seed", fmt_int(c.dataset_seed)},
        {"extraction", fmt_int(c.sizes.extraction)},
        {"finetune", fmt_int(c.sizes.finetune)},
        {"test", fmt_int(c.sizes.test)},
        {"analogy", fmt_int(c.sizes.analogy)}}},
      {"model",
       {{"d_model", fmt_int(m.d_model)},
        {"n_layers", fmt_int(m.n_layers)},
        {"n_heads", fmt_int(m.n_heads)},
        {"d_head", fmt_int(m.d_head)},
        {"mlp_ratio", fmt_int(m.mlp_ratio)},
        {"max_seq_len", fmt_int(m.max_seq_len)},
        {"scene_grid_bins", fmt_int(m.scene_grid_bins)},
        {"precision", std::string(precision_name(m.precision))},
        {"init_seed", fmt_int(c.init_seed)},
        {"checkpoint", c.checkpoint.string()}}},
      {"train",
       {{"steps", fmt_int(t.steps)},
        {"batch", fmt_int(t.batch)},
        {"lr", fmt(t.lr)},
        {"beta1", fmt(t.beta1)},
        {"beta2", fmt(t.beta2)},
        {"adam_eps", fmt(t.adam_eps)},
        {"warmup", fmt_int(t.warmup)},
        {"grad_clip", fmt(t.grad_clip)},
        {"shots", join_shots(t.shot_distribution)},
        {"heldout_every", fmt_int(t.heldout_every)},
        {"heldout_tasks", fmt_int(t.heldout_tasks)},
        {"seed", fmt_int(t.seed)}}},
      {"mediation",
       {{"relations", join_relations(c.relations)},
        {"extraction_prompts", fmt_int(c.extraction_prompts)},
        {"perturbed_prompts", fmt_int(c.perturbed_prompts)},
        {"extraction_shots", fmt_int(c.extraction_shots)},
        {"head_count", fmt_int(c.head_count)},
        {"seed", fmt_int(c.mediation_seed)}}},
      {"fv",
       {{"aggregation", std::string(aggregation_name(c.aggregation))},
        {"injection_layer", c.injection_layer ? fmt_int(*c.injection_layer) : std::string("sweep")},
        {"composite_source", c.composite_source == CompositeSource::Initial ? "initial" : "finetuned"}}},
      {"finetune",
       {{"epochs", fmt_int(f.epochs)},
        {"lr", fmt(f.lr)},
        {"beta1", fmt(f.beta1)},
        {"beta2", fmt(f.beta2)},
        {"adam_eps", fmt(f.adam_eps)},
        {"batch", fmt_int(f.batch)},
        {"optimizer", f.optimizer == FtOptimizer::Adam ? "adam" : "sgd"},
        {"seed", fmt_int(f.seed)}}},
      {"eval",
       {{"icl_shots", fmt_int(c.icl_shots)},
        {"test_tasks", fmt_int(c.test_tasks)},
        {"validation_tasks", fmt_int(c.validation_tasks)},
        {"finetune_tasks", fmt_int(c.finetune_tasks)},
        {"analogy_problems", fmt_int(c.analogy_problems)},
        {"seed", fmt_int(c.eval_seed)}}},
      {"sweep", {{"head_max", fmt_int(c.head_sweep_max)}, {"context_sizes", join_ints(c.context_sizes)}}},
      {"run", {{"out_dir", c.out_dir.string()}}},
  };
}

std::string render(const std::vector<Section>& secs, const std::set<std::string>& only = {}) {
  std::string out;
  for (const auto& [name, entries] : secs) {
    if (!only.empty() && !only.count(name)) continue;
    if (!out.empty()) out += '\n';
    out += "[" + name + "]\n";
    for (const auto& [k, v] : entries) out += k + " = " + v + "\n";
  }
  return out;
}

std::string digest(const std::string& text) {
  Fnv1a h;
  h.update(std::string_view(text));
  return hex64(h.digest());
}

using Setter = std::function<void(ExperimentConfig&, const std::string&)>;

std::map<std::string, Setter> setters() {
  std::map<std::string, Setter> s;
  auto i32 = [](auto get) {
    return Setter([get](ExperimentConfig& c, const std::string& v) { get(c) = parse_number<int>("", v); });
  };
  auto u64 = [](auto get) {
    return Setter([get](ExperimentConfig& c, const std::string& v) { get(c) = parse_number<std::uint64_t>("", v); });
  };
  auto f64 = [](auto get) {
    return Setter([get](ExperimentConfig& c, const std::string& v) { get(c) = parse_number<double>("", v); });
  };
  s["dataset.seed"] = u64([](ExperimentConfig& c) -> auto& { return c.dataset_seed; });
  s["dataset.extraction"] = i32([](ExperimentConfig& c) -> auto& { return c.sizes.extraction; });
  s["dataset.finetune"] = i32([](ExperimentConfig& c) -> auto& { return c.sizes.finetune; });
  s["dataset.test"] = i32([](ExperimentConfig& c) -> auto& { return c.sizes.test; });
  s["dataset.analogy"] = i32([](ExperimentConfig& c) -> auto& { return c.sizes.analogy; });
  s["model.d_model"] = i32([](ExperimentConfig& c) -> auto& { return c.model.d_model; });
  s["model.n_layers"] = i32([](ExperimentConfig& c) -> auto& { return c.model.n_layers; });
  s["model.n_heads"] = i32([](ExperimentConfig& c) -> auto& { return c.model.n_heads; });
  s["model.d_head"] = i32([](ExperimentConfig& c) -> auto& { return c.model.d_head; });
  s["model.mlp_ratio"] = i32([](ExperimentConfig& c) -> auto& { return c.model.mlp_ratio; });
  s["model.max_seq_len"] = i32([](ExperimentConfig& c) -> auto& { return c.model.max_seq_len; });
  s["model.scene_grid_bins"] = i32([](ExperimentConfig& c) -> auto& { return c.model.scene_grid_bins; });
  s["model.precision"] = [](ExperimentConfig& c, const std::string& v) { c.model.precision = precision_from_name(v); };
  s["model.init_seed"] = u64([](ExperimentConfig& c) -> auto& { return c.init_seed; });
  s["model.checkpoint"] = [](ExperimentConfig& c, const std::string& v) { c.checkpoint = v; };
  s["train.steps"] = i32([](ExperimentConfig& c) -> auto& { return c.train.steps; });
  s["train.batch"] = i32([](ExperimentConfig& c) -> auto& { return c.train.batch; });
  s["train.lr"] = f64([](ExperimentConfig& c) -> auto& { return c.train.lr; });
  s["train.beta1"] = f64([](ExperimentConfig& c) -> auto& { return c.train.beta1; });
  s["train.beta2"] = f64([](ExperimentConfig& c) -> auto& { return c.train.beta2; });
  s["train.adam_eps"] = f64([](ExperimentConfig& c) -> auto& { return c.train.adam_eps; });
  s["train.warmup"] = i32([](ExperimentConfig& c) -> auto& { return c.train.warmup; });
  s["train.grad_clip"] = f64([](ExperimentConfig& c) -> auto& { return c.train.grad_clip; });
  s["train.shots"] = [](ExperimentConfig& c, const std::string& v) {
    c.train.shot_distribution.clear();
    for (const auto& item : split(v, ',')) {
      const auto parts = split(item, ':');
      if (parts.size() != 2) throw ConfigError("train.shots: expected n:p pairs, got '" + item + "'");
      c.train.shot_distribution.emplace_back(parse_number<int>("train.shots", parts[0]),
                                             parse_number<double>("train.shots", parts[1]));
    }
  };
  s["train.heldout_every"] = i32([](ExperimentConfig& c) -> auto& { return c.train.heldout_every; });
  s["train.heldout_tasks"] = i32([](ExperimentConfig& c) -> auto& { return c.train.heldout_tasks; });
  s["train.seed"] = u64([](ExperimentConfig& c) -> auto& { return c.train.seed; });
  s["mediation.relations"] = [](ExperimentConfig& c, const std::string& v) {
    c.relations.clear();
    for (const auto& name : split(v, ',')) c.relations.push_back(relation_from_name(name));
  };
  s["mediation.extraction_prompts"] = i32([](ExperimentConfig& c) -> auto& { return c.extraction_prompts; });
  s["mediation.perturbed_prompts"] = i32([](ExperimentConfig& c) -> auto& { return c.perturbed_prompts; });
  s["mediation.extraction_shots"] = i32([](ExperimentConfig& c) -> auto& { return c.extraction_shots; });
  s["mediation.head_count"] = i32([](ExperimentConfig& c) -> auto& { return c.head_count; });
  s["mediation.seed"] = u64([](ExperimentConfig& c) -> auto& { return c.mediation_seed; });
  s["fv.aggregation"] = [](ExperimentConfig& c, const std::string& v) { c.aggregation = aggregation_from_name(v); };
  s["fv.injection_layer"] = [](ExperimentConfig& c, const std::string& v) {
    if (v == "sweep") {
      c.injection_layer.reset();
    } else {
      c.injection_layer = parse_number<int>("fv.injection_layer", v);
    }
  };
  s["fv.composite_source"] = [](ExperimentConfig& c, const std::string& v) {
    if (v == "initial") {
      c.composite_source = CompositeSource::Initial;
    } else if (v == "finetuned") {
      c.composite_source = CompositeSource::Finetuned;
    } else {
      throw ConfigError("fv.composite_source: expected initial or finetuned, got '" + v + "'");
    }
  };
  s["finetune.epochs"] = i32([](ExperimentConfig& c) -> auto& { return c.finetune.epochs; });
  s["finetune.lr"] = f64([](ExperimentConfig& c) -> auto& { return c.finetune.lr; });
  s["finetune.beta1"] = f64([](ExperimentConfig& c) -> auto& { return c.finetune.beta1; });
  s["finetune.beta2"] = f64([](ExperimentConfig& c) -> auto& { return c.finetune.beta2; });
  s["finetune.adam_eps"] = f64([](ExperimentConfig& c) -> auto& { return c.finetune.adam_eps; });
  s["finetune.batch"] = i32([](ExperimentConfig& c) -> auto& { return c.finetune.batch; });
  s["finetune.optimizer"] = [](ExperimentConfig& c, const std::string& v) {
    if (v == "adam") {
      c.finetune.optimizer = FtOptimizer::Adam;
    } else if (v == "sgd") {
      c.finetune.optimizer = FtOptimizer::Sgd;
    } else {
      throw ConfigError("finetune.optimizer: expected adam or sgd, got '" + v + "'");
    }
  };
  s["finetune.seed"] = u64([](ExperimentConfig& c) -> auto& { return c.finetune.seed; });
  s["eval.icl_shots"] = i32([](ExperimentConfig& c) -> auto& { return c.icl_shots; });
  s["eval.test_tasks"] = i32([](ExperimentConfig& c) -> auto& { return c.test_tasks; });
  s["eval.validation_tasks"] = i32([](ExperimentConfig& c) -> auto& { return c.validation_tasks; });
  s["eval.finetune_tasks"] = i32([](ExperimentConfig& c) -> auto& { return c.finetune_tasks; });
  s["eval.analogy_problems"] = i32([](ExperimentConfig& c) -> auto& { return c.analogy_problems; });
  s["eval.seed"] = u64([](ExperimentConfig& c) -> auto& { return c.eval_seed; });
  s["sweep.head_max"] = i32([](ExperimentConfig& c) -> auto& { return c.head_sweep_max; });
  s["sweep.context_sizes"] = [](ExperimentConfig& c, const std::string& v) {
    c.context_sizes.clear();
    for (const auto& x : split(v, ',')) c.context_sizes.push_back(parse_number<int>("sweep.context_sizes", x));
  };
  s["run.out_dir"] = [](ExperimentConfig& c, const std::string& v) { c.out_dir = v; };
  return s;
}

}  // namespace

void ExperimentConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("config: " + msg);
  };
  model.validate();
  train.validate();
  finetune.validate();
  require(sizes.extraction > 0 && sizes.finetune > 0 && sizes.test > 0 && sizes.analogy > 0,
          "every split needs at least one scene");
  require(!relations.empty(), "relation list is empty");
  for (Relation r : relations) require(is_base(r), "only base relations can be analysed");
  require(extraction_prompts > 0 && perturbed_prompts > 0, "prompt counts must be positive");
  require(extraction_shots >= 1 && extraction_shots <= 10, "extraction_shots must lie in [1,10]");
  require(head_count >= 1 && head_count <= model.total_heads(), "head_count must lie in [1, total heads]");
  require(!injection_layer || (*injection_layer >= 0 && *injection_layer < model.n_layers),
          "injection_layer outside the model");
  require(icl_shots >= 1 && icl_shots <= 10, "icl_shots must lie in [1,10]");
  require(test_tasks > 0 && validation_tasks > 0 && finetune_tasks > 0 && analogy_problems > 0,
          "evaluation counts must be positive");
  require(test_tasks <= sizes.test, "test_tasks exceeds the test split");
  require(validation_tasks <= sizes.finetune && finetune_tasks <= sizes.finetune,
          "validation/finetune task count exceeds the finetune split");
  require(sizes.analogy >= 11, "analogy split too small for 10-shot prompts");
  require(head_sweep_max >= 1, "sweep.head_max must be positive");
  require(!context_sizes.empty(), "sweep.context_sizes is empty");
  for (int n : context_sizes) require(n >= 1 && n <= 10, "context sizes must lie in [1,10]");
  require(!out_dir.empty(), "run.out_dir is empty");
}

void ExperimentConfig::set_all_seeds(std::uint64_t seed) {
  dataset_seed = seed;
  init_seed = seed;
  train.seed = seed;
  mediation_seed = seed;
  finetune.seed = seed;
  eval_seed = seed;
}

std::string ExperimentConfig::to_ini() const { return render(sections(*this)); }

ExperimentConfig ExperimentConfig::from_ini(std::string_view text) {
  pt::ptree tree;
  std::istringstream in{std::string(text)};
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  ExperimentConfig cfg;
  const auto table = setters();
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config: key '" + section + "' outside a section");
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      const auto it = table.find(full);
      if (it == table.end()) throw ConfigError("config: unknown key '" + full + "'");
      try {
        it->second(cfg, value.get_value<std::string>());
      } catch (const Error& e) {
        throw ConfigError("config key '" + full + "': " + e.what());
      }
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_ini(ss.str());
}

void ExperimentConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_ini();
  if (!out) throw IoError("write failed for " + path.string());
}

std::string ExperimentConfig::hash() const {
  return digest(render(sections(*this), {"dataset", "model", "train", "mediation", "fv", "finetune", "eval", "sweep"}));
}

std::string ExperimentConfig::dataset_key() const { return digest(render(sections(*this), {"dataset"})); }

std::string ExperimentConfig::backbone_key() const {
  auto secs = sections(*this);
  // The checkpoint path names where weights come from, not what they are.
  for (auto& [name, entries] : secs) {
    if (name != "model") continue;
    std::erase_if(entries, [](const Entry& e) { return e.first == "checkpoint" || e.first == "precision"; });
  }
  return digest(render(secs, {"dataset", "model", "train"}));
}

std::string ExperimentConfig::analysis_key() const {
  return digest(backbone_key() + render(sections(*this), {"mediation"}) +
                std::string(precision_name(model.precision)));
}

}  // namespace fvlab
