#include "fvlab/mediation.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "fvlab/error.hpp"

namespace fvlab {

namespace {

void check_head(const ModelConfig& cfg, HeadIndex h) {
  if (h.layer < 0 || h.layer >= cfg.n_layers || h.head < 0 || h.head >= cfg.n_heads) {
    throw IndexError("head (" + std::to_string(h.layer) + "," + std::to_string(h.head) + ") out of range");
  }
}

void check_means(const ModelConfig& cfg, const MeanActivations& means) {
  if (means.n_layers != cfg.n_layers || means.n_heads != cfg.n_heads ||
      means.means.size() != static_cast<std::size_t>(cfg.total_heads())) {
    throw InvalidArgument("mean activations do not match the model shape");
  }
}

void check_perturbed(std::span<const TaskInstance> set, Relation relation) {
  if (set.empty()) throw InvalidArgument("perturbed prompt set is empty");
  for (const auto& t : set) {
    if (!t.perturbed) throw InvalidArgument("mediation needs perturbed prompts");
    if (t.relation != relation) throw InvalidArgument("perturbed prompt relation differs from the mean activations");
  }
}

double gold_prob(const Eigen::VectorXd& logits, TokenId gold) { return softmax(logits)(gold); }

}  // namespace

const Eigen::VectorXd& MeanActivations::at(HeadIndex h) const {
  if (h.layer < 0 || h.layer >= n_layers || h.head < 0 || h.head >= n_heads) {
    throw IndexError("head (" + std::to_string(h.layer) + "," + std::to_string(h.head) + ") out of range");
  }
  return means[static_cast<std::size_t>(h.layer * n_heads + h.head)];
}

MeanActivations mean_activations(const Backbone& model, std::span<const TaskInstance> prompts, SceneTable scenes) {
  if (prompts.empty()) throw InvalidArgument("mean_activations: no prompts");
  const ModelConfig& cfg = model.config();
  MeanActivations out;
  out.relation = prompts.front().relation;
  out.n_layers = cfg.n_layers;
  out.n_heads = cfg.n_heads;
  out.means.assign(static_cast<std::size_t>(cfg.total_heads()), Eigen::VectorXd::Zero(cfg.d_model));
  for (const auto& task : prompts) {
    if (task.relation != out.relation) throw InvalidArgument("mean_activations: prompts mix relations");
    if (task.perturbed) throw InvalidArgument("mean_activations: prompts must be clean");
    const auto session = model.open_session(encode_prompt(task, cfg.max_seq_len), scenes);
    const auto& heads = session->baseline_heads();
    for (std::size_t i = 0; i < heads.size(); ++i) out.means[i] += heads[i];
  }
  out.prompt_count = static_cast<int>(prompts.size());
  for (auto& m : out.means) {
    m /= static_cast<double>(out.prompt_count);
    if (!m.allFinite()) throw NumericError("mean activation is not finite");
  }
  return out;
}

double compute_cie(const Backbone& model, const TaskInstance& perturbed, HeadIndex head,
                   const MeanActivations& means, SceneTable scenes) {
  const ModelConfig& cfg = model.config();
  check_head(cfg, head);
  check_means(cfg, means);
  check_perturbed(std::span(&perturbed, 1), means.relation);
  const TokenSequence seq = encode_prompt(perturbed, cfg.max_seq_len);
  const auto session = model.open_session(seq, scenes);
  const Intervention patch = PatchHead{head.layer, head.head, seq.final_position, means.at(head)};
  return gold_prob(session->logits_with(std::span(&patch, 1)), seq.gold_token) -
         gold_prob(session->baseline_logits(), seq.gold_token);
}

AieMatrix compute_aie(const Backbone& model, std::span<const TaskInstance> perturbed, const MeanActivations& means,
                      SceneTable scenes) {
  const ModelConfig& cfg = model.config();
  check_means(cfg, means);
  check_perturbed(perturbed, means.relation);
  AieMatrix out;
  out.relation = means.relation;
  out.grid = Eigen::MatrixXd::Zero(cfg.n_layers, cfg.n_heads);
  out.perturbed_prompt_count = static_cast<int>(perturbed.size());
  std::vector<Intervention> patch(1);
  for (const auto& task : perturbed) {
    const TokenSequence seq = encode_prompt(task, cfg.max_seq_len);
    const auto session = model.open_session(seq, scenes);
    const double base = gold_prob(session->baseline_logits(), seq.gold_token);
    for (int l = 0; l < cfg.n_layers; ++l) {
      for (int h = 0; h < cfg.n_heads; ++h) {
        patch[0] = PatchHead{l, h, seq.final_position, means.at({l, h})};
        out.grid(l, h) += gold_prob(session->logits_with(patch), seq.gold_token) - base;
      }
    }
  }
  out.grid /= static_cast<double>(perturbed.size());
  if (!out.grid.allFinite()) throw NumericError("AIE grid is not finite");
  return out;
}

AieMatrix compute_aie_naive(const Backbone& model, std::span<const TaskInstance> perturbed,
                            const MeanActivations& means, SceneTable scenes) {
  const ModelConfig& cfg = model.config();
  check_means(cfg, means);
  check_perturbed(perturbed, means.relation);
  AieMatrix out;
  out.relation = means.relation;
  out.grid = Eigen::MatrixXd::Zero(cfg.n_layers, cfg.n_heads);
  out.perturbed_prompt_count = static_cast<int>(perturbed.size());
  for (const auto& task : perturbed) {
    const TokenSequence seq = encode_prompt(task, cfg.max_seq_len);
    const int fp = seq.final_position;
    for (int l = 0; l < cfg.n_layers; ++l) {
      for (int h = 0; h < cfg.n_heads; ++h) {
        const Intervention patch = PatchHead{l, h, fp, means.at({l, h})};
        const Eigen::VectorXd patched = model.forward(seq, scenes, std::span(&patch, 1)).logits.row(fp).transpose();
        const Eigen::VectorXd clean = model.forward(seq, scenes).logits.row(fp).transpose();
        out.grid(l, h) += gold_prob(patched, seq.gold_token) - gold_prob(clean, seq.gold_token);
      }
    }
  }
  out.grid /= static_cast<double>(perturbed.size());
  return out;
}

HeadSet select_top_heads(const AieMatrix& aie, int k) {
  const auto L = static_cast<int>(aie.grid.rows());
  const auto H = static_cast<int>(aie.grid.cols());
  if (k < 1 || k > L * H) {
    throw InvalidArgument("head count k=" + std::to_string(k) + " outside [1," + std::to_string(L * H) + "]");
  }
  std::vector<HeadIndex> all;
  all.reserve(static_cast<std::size_t>(L * H));
  for (int l = 0; l < L; ++l)
    for (int h = 0; h < H; ++h) all.push_back({l, h});
  // Row-major enumeration already orders ties by (layer, head).
  std::stable_sort(all.begin(), all.end(), [&](HeadIndex a, HeadIndex b) { return aie.at(a) > aie.at(b); });
  HeadSet out;
  out.relation = aie.relation;
  out.members.assign(all.begin(), all.begin() + k);
  return out;
}

void write_aie_csv(const AieMatrix& aie, const std::filesystem::path& path, std::string_view comment) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  if (!comment.empty()) out << "# " << comment << '\n';
  out << "layer,head,aie\n";
  out.precision(17);
  for (Eigen::Index l = 0; l < aie.grid.rows(); ++l)
    for (Eigen::Index h = 0; h < aie.grid.cols(); ++h) out << l << ',' << h << ',' << aie.grid(l, h) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

AieMatrix read_aie_csv(const std::filesystem::path& path, Relation relation, int n_layers, int n_heads) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  AieMatrix out;
  out.relation = relation;
  out.grid = Eigen::MatrixXd::Constant(n_layers, n_heads, std::numeric_limits<double>::quiet_NaN());
  std::string line;
  bool header = false;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line.front() == '#') continue;
    if (!header) {
      if (line != "layer,head,aie") throw ParseError(path.string() + ": bad AIE header");
      header = true;
      continue;
    }
    std::istringstream ss(line);
    std::string a, b, c;
    std::getline(ss, a, ',');
    std::getline(ss, b, ',');
    std::getline(ss, c);
    int l = 0, h = 0;
    double v = 0.0;
    try {
      l = std::stoi(a);
      h = std::stoi(b);
      v = std::stod(c);
    } catch (const std::logic_error&) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": malformed row");
    }
    if (l < 0 || l >= n_layers || h < 0 || h >= n_heads) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": head out of range");
    }
    out.grid(l, h) = v;
  }
  if (!out.grid.allFinite()) throw ParseError(path.string() + ": AIE grid incomplete");
  return out;
}

}  // namespace fvlab
