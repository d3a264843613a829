#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "fvlab/prompt.hpp"
#include "fvlab/scenegen.hpp"

namespace fvlab {

enum class Precision : std::uint8_t { F32, F64 };

std::string_view precision_name(Precision p);
Precision precision_from_name(std::string_view name);

struct ModelConfig {
  int d_model = 128;
  int n_layers = 8;
  int n_heads = 8;
  int d_head = 16;
  int mlp_ratio = 4;
  int max_seq_len = 192;
  int scene_grid_bins = 16;
  Precision precision = Precision::F32;

  int d_mlp() const noexcept { return d_model * mlp_ratio; }
  int n_bins() const noexcept { return scene_grid_bins * scene_grid_bins; }
  int total_heads() const noexcept { return n_layers * n_heads; }
  // Throws ConfigError.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TensorSlot {
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const noexcept { return rows * cols; }
};

// Fixed order of the flat parameter buffer. Matrices are row-major and
// applied as x * W with x a row vector.
struct ParamLayout {
  struct Layer {
    TensorSlot attn_norm, wq, bq, wk, bk, wv, bv, wo, bo;
    TensorSlot mlp_norm, w1, b1, w2, b2;
  };
  TensorSlot tok_emb, obj_emb, bin_emb, pos_emb;
  std::vector<Layer> layers;
  TensorSlot final_norm, unembed;
  std::size_t total = 0;

  static ParamLayout for_config(const ModelConfig& cfg);
};

// Flat buffers start on a vector-register boundary so that reductions over
// them take the same path regardless of where the allocation lands.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

template <typename T>
class ModelParams {
 public:
  ModelParams() = default;
  ModelParams(ModelConfig cfg, std::vector<T> values);

  const ModelConfig& config() const noexcept { return config_; }
  const ParamLayout& layout() const noexcept { return layout_; }
  std::span<const T> values() const noexcept { return values_; }
  // Throws ContractViolation once frozen.
  std::span<T> mutable_values();

  bool frozen() const noexcept { return frozen_; }
  void freeze() noexcept { frozen_ = true; }

  std::uint64_t training_seed() const noexcept { return training_seed_; }
  void set_training_seed(std::uint64_t s) { training_seed_ = s; }

  // FNV-1a over the raw weight bytes.
  std::uint64_t checksum() const noexcept;

  bool all_finite() const noexcept;

  template <typename U>
  ModelParams<U> cast() const {
    std::vector<U> out(values_.begin(), values_.end());
    ModelParams<U> p(config_, std::move(out));
    p.set_training_seed(training_seed_);
    if (frozen_) p.freeze();
    return p;
  }

 private:
  ModelConfig config_;
  ParamLayout layout_;
  AlignedVector<T> values_;
  bool frozen_ = false;
  std::uint64_t training_seed_ = 0;
};

template <typename T>
ModelParams<T> init_model(const ModelConfig& cfg, std::uint64_t seed);

// Scene lookup for scene slots; index equals scene id.
using SceneTable = std::span<const Scene>;

struct PatchHead {
  int layer = 0;
  int head = 0;
  int position = 0;
  Eigen::VectorXd replacement;
};

struct InjectResidual {
  int layer = 0;
  int position = 0;
  Eigen::VectorXd vector;
};

using Intervention = std::variant<PatchHead, InjectResidual>;

struct TraceRequest {
  std::vector<int> positions;
};

struct PositionTrace {
  int position = 0;
  // Head contribution to the residual stream, indexed layer * n_heads + head.
  std::vector<Eigen::VectorXd> heads;
  // Attention sublayer output (sum of heads plus output bias), per layer.
  std::vector<Eigen::VectorXd> attention;
  // Residual stream after each layer, h^(l), per layer.
  std::vector<Eigen::VectorXd> hidden;
  // Residual stream entering layer 0.
  Eigen::VectorXd embedding;
};

struct ForwardOutput {
  Eigen::MatrixXd logits;  // seq_len x vocab
  std::vector<PositionTrace> trace;
};

struct LossGrad {
  double loss = 0.0;
  Eigen::VectorXd grad;
};

// Cached evaluation of one prompt where every intervention targets the final
// position. Prefix keys and values are computed once; each call recomputes
// only the final row.
class FinalSession {
 public:
  virtual ~FinalSession() = default;

  virtual const Eigen::VectorXd& baseline_logits() const = 0;
  // Head contributions at the final position, indexed layer * n_heads + head.
  virtual const std::vector<Eigen::VectorXd>& baseline_heads() const = 0;
  virtual const std::vector<Eigen::VectorXd>& baseline_hidden() const = 0;
  virtual Eigen::VectorXd logits_with(std::span<const Intervention> interventions) = 0;
  // -log softmax(logits)[target] with `v` added to h^(layer), and its gradient in v.
  virtual LossGrad injection_loss_grad(int layer, const Eigen::VectorXd& v, TokenId target) = 0;
};

// Precision-erased frozen model. Implementations must be reentrant.
class Backbone {
 public:
  virtual ~Backbone() = default;

  virtual const ModelConfig& config() const = 0;
  virtual bool frozen() const = 0;
  virtual std::uint64_t checksum() const = 0;

  virtual ForwardOutput forward(const TokenSequence& seq, SceneTable scenes,
                                std::span<const Intervention> interventions = {},
                                const TraceRequest& trace = {}) const = 0;

  virtual std::unique_ptr<FinalSession> open_session(const TokenSequence& seq, SceneTable scenes) const;

  virtual LossGrad grad_wrt_injection(const TokenSequence& seq, SceneTable scenes, int layer, int position,
                                      const Eigen::VectorXd& v, TokenId target) const;
};

// Session built on repeated full forwards; used by backbones without a
// cached path.
class GenericSession : public FinalSession {
 public:
  GenericSession(const Backbone& model, TokenSequence seq, SceneTable scenes);

  const Eigen::VectorXd& baseline_logits() const override { return logits_; }
  const std::vector<Eigen::VectorXd>& baseline_heads() const override { return heads_; }
  const std::vector<Eigen::VectorXd>& baseline_hidden() const override { return hidden_; }
  Eigen::VectorXd logits_with(std::span<const Intervention> interventions) override;
  LossGrad injection_loss_grad(int layer, const Eigen::VectorXd& v, TokenId target) override;

 private:
  const Backbone& model_;
  TokenSequence seq_;
  SceneTable scenes_;
  Eigen::VectorXd logits_;
  std::vector<Eigen::VectorXd> heads_;
  std::vector<Eigen::VectorXd> hidden_;
};

template <typename T>
class TransformerBackbone final : public Backbone {
 public:
  explicit TransformerBackbone(ModelParams<T> params);

  const ModelConfig& config() const override { return params_.config(); }
  bool frozen() const override { return params_.frozen(); }
  std::uint64_t checksum() const override { return params_.checksum(); }
  const ModelParams<T>& params() const noexcept { return params_; }

  ForwardOutput forward(const TokenSequence& seq, SceneTable scenes,
                        std::span<const Intervention> interventions = {},
                        const TraceRequest& trace = {}) const override;
  std::unique_ptr<FinalSession> open_session(const TokenSequence& seq, SceneTable scenes) const override;
  LossGrad grad_wrt_injection(const TokenSequence& seq, SceneTable scenes, int layer, int position,
                              const Eigen::VectorXd& v, TokenId target) const override;

  // Full-sequence backward path, independent of the cached session path.
  LossGrad grad_wrt_injection_full(const TokenSequence& seq, SceneTable scenes, int layer, int position,
                                   const Eigen::VectorXd& v, TokenId target) const;

 private:
  ModelParams<T> params_;
};

// Wraps trained weights at the requested compute precision.
std::unique_ptr<Backbone> make_backbone(const ModelParams<float>& params, Precision precision);
std::unique_ptr<Backbone> make_backbone(const ModelParams<double>& params, Precision precision);

// Softmax of a logit vector, computed in double.
Eigen::VectorXd softmax(const Eigen::VectorXd& logits);
TokenId argmax(const Eigen::VectorXd& logits);

// Checkpoint file: "FVLB", u16 version, config block, training seed, then the
// flat weight buffer little-endian in the stored precision.
inline constexpr std::uint16_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const ModelParams<T>& params, const std::filesystem::path& path);

struct LoadedCheckpoint {
  std::variant<ModelParams<float>, ModelParams<double>> params;
  const ModelConfig& config() const;
  std::uint64_t checksum() const;
  std::unique_ptr<Backbone> backbone(Precision precision) const;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fvlab
