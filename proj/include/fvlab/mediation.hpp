#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fvlab/model.hpp"

namespace fvlab {

struct HeadIndex {
  int layer = 0;
  int head = 0;
  friend bool operator==(HeadIndex, HeadIndex) = default;
};

// Per-head mean of the final-position head contribution over clean prompts.
struct MeanActivations {
  Relation relation = Relation::Above;
  int n_layers = 0;
  int n_heads = 0;
  int prompt_count = 0;
  std::vector<Eigen::VectorXd> means;  // [layer * n_heads + head]

  const Eigen::VectorXd& at(HeadIndex h) const;
};

struct AieMatrix {
  Relation relation = Relation::Above;
  Eigen::MatrixXd grid;  // n_layers x n_heads
  int perturbed_prompt_count = 0;

  double at(HeadIndex h) const { return grid(h.layer, h.head); }
};

inline constexpr std::string_view kTieBreakRule = "aie_desc,layer_asc,head_asc";

struct HeadSet {
  Relation relation = Relation::Above;
  std::vector<HeadIndex> members;  // AIE descending
  std::string tie_break{kTieBreakRule};

  int size() const noexcept { return static_cast<int>(members.size()); }
};

// Throws InvalidArgument for an empty list, mixed relations or perturbed prompts.
MeanActivations mean_activations(const Backbone& model, std::span<const TaskInstance> prompts, SceneTable scenes);

// P(gold | head patched with its mean) - P(gold | unpatched) at the final
// position, full-vocabulary softmax.
double compute_cie(const Backbone& model, const TaskInstance& perturbed, HeadIndex head,
                   const MeanActivations& means, SceneTable scenes);

// One cached session per prompt; the unpatched run is shared by every head.
AieMatrix compute_aie(const Backbone& model, std::span<const TaskInstance> perturbed, const MeanActivations& means,
                      SceneTable scenes);

// Reference implementation: two independent full forwards per (prompt, head).
AieMatrix compute_aie_naive(const Backbone& model, std::span<const TaskInstance> perturbed,
                            const MeanActivations& means, SceneTable scenes);

// k highest cells; ties go to the lower layer, then the lower head.
HeadSet select_top_heads(const AieMatrix& aie, int k);

// CSV columns layer,head,aie. Lines starting with '#' before the header are
// comments and are skipped on read.
void write_aie_csv(const AieMatrix& aie, const std::filesystem::path& path, std::string_view comment = {});
AieMatrix read_aie_csv(const std::filesystem::path& path, Relation relation, int n_layers, int n_heads);

}  // namespace fvlab
