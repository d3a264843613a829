#pragma once

#include <algorithm>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include <Eigen/Dense>

#include "fvlab/error.hpp"
#include "fvlab/model.hpp"
#include "fvlab/scenegen.hpp"

namespace fvlab::testing {

// Small enough for exhaustive f64 checks, same prompt grammar as the default.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.d_model = 32;
  c.n_layers = 3;
  c.n_heads = 4;
  c.d_head = 8;
  c.mlp_ratio = 2;
  c.precision = Precision::F64;
  return c;
}

inline const DatasetBundle& tiny_dataset() {
  static const DatasetBundle b = generate_dataset(11, SplitSizes{120, 60, 60, 60});
  return b;
}

// Untrained weights scaled up so logits and head outputs are far from uniform.
inline ModelParams<double> tiny_params(std::uint64_t seed = 3, double scale = 25.0) {
  ModelParams<double> p = init_model<double>(tiny_config(), seed);
  for (double& v : p.mutable_values()) v *= scale;
  p.freeze();
  return p;
}

inline std::unique_ptr<TransformerBackbone<double>> tiny_backbone(std::uint64_t seed = 3, double scale = 25.0) {
  return std::make_unique<TransformerBackbone<double>>(tiny_params(seed, scale));
}

// Backbone answering from the query scene through a fixed rule; no weights.
// With `fv_gate` the rule's relation is read from the injected vector: the
// relation whose unit coordinate is largest, or a fixed wrong token with no
// injection.
class RuleBackbone : public Backbone {
 public:
  explicit RuleBackbone(Relation relation, int d_model = 8) : relation_(relation) {
    cfg_.d_model = d_model;
    cfg_.n_heads = 1;
    cfg_.d_head = d_model;
    cfg_.n_layers = 2;
  }

  bool fv_gate = false;
  // Scene ids on which the rule deliberately answers wrong.
  std::vector<int> wrong_on;
  // Overrides the rule with one fixed answer.
  std::optional<TokenId> constant;

  const ModelConfig& config() const override { return cfg_; }
  bool frozen() const override { return true; }
  std::uint64_t checksum() const override { return 0; }

  ForwardOutput forward(const TokenSequence& seq, SceneTable scenes, std::span<const Intervention> interventions,
                        const TraceRequest& trace) const override {
    ForwardOutput out;
    out.logits = Eigen::MatrixXd::Zero(seq.size(), kVocabSize);
    int scene_id = -1;
    for (int i = seq.final_position; i >= 0; --i) {
      const Element& e = seq.elements[static_cast<std::size_t>(i)];
      if (e.kind == Element::Kind::SceneSlot) {
        scene_id = e.scene_id;
        break;
      }
    }
    const Scene& s = scenes[static_cast<std::size_t>(scene_id)];
    TokenId answer = token(Special::Period);
    std::optional<Relation> rel = relation_;
    if (fv_gate) {
      rel.reset();
      for (const auto& iv : interventions) {
        if (const auto* inj = std::get_if<InjectResidual>(&iv)) {
          Eigen::Index best = 0;
          if (inj->vector.maxCoeff(&best) > 0.0 && best < 8) rel = static_cast<Relation>(best);
        }
      }
    }
    if (rel) {
      try {
        answer = static_cast<TokenId>(object_in_relation(s, *rel).value);
      } catch (const LookupError&) {
        answer = token(Special::Period);
      }
    }
    if (constant) answer = *constant;
    if (std::find(wrong_on.begin(), wrong_on.end(), scene_id) != wrong_on.end()) answer = token(Special::Eoc);
    out.logits(seq.final_position, answer) = 10.0;
    for (int p : trace.positions) {
      PositionTrace t;
      t.position = p;
      t.heads.assign(static_cast<std::size_t>(cfg_.total_heads()), Eigen::VectorXd::Zero(cfg_.d_model));
      t.attention.assign(static_cast<std::size_t>(cfg_.n_layers), Eigen::VectorXd::Zero(cfg_.d_model));
      t.hidden.assign(static_cast<std::size_t>(cfg_.n_layers), Eigen::VectorXd::Zero(cfg_.d_model));
      t.embedding = Eigen::VectorXd::Zero(cfg_.d_model);
      out.trace.push_back(std::move(t));
    }
    return out;
  }

 private:
  ModelConfig cfg_;
  Relation relation_;
};

inline std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "fvlab_unit";
  std::filesystem::create_directories(dir);
  return dir / name;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({1e-8, std::abs(a), std::abs(b)}); }

}  // namespace fvlab::testing
