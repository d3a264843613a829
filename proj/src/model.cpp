#include "fvlab/model.hpp"

#include <algorithm>
#include <cstring>

#include "engine.hpp"
#include "fvlab/hash.hpp"
#include "fvlab/rng.hpp"
#include "fvlab/transformer.hpp"

namespace fvlab {

using detail::Col;
using detail::Mat;
using detail::RVec;

std::string_view precision_name(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

Precision precision_from_name(std::string_view name) {
  if (name == "f32") return Precision::F32;
  if (name == "f64") return Precision::F64;
  throw ConfigError("unknown precision '" + std::string(name) + "' (expected f32 or f64)");
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("model config: " + msg);
  };
  require(d_model > 0 && n_layers > 0 && n_heads > 0 && d_head > 0 && mlp_ratio > 0, "dimensions must be positive");
  require(d_model == n_heads * d_head, "d_model (" + std::to_string(d_model) + ") must equal n_heads x d_head (" +
                                           std::to_string(n_heads * d_head) + ")");
  require(max_seq_len >= prompt_length(10), "max_seq_len must fit a 10-shot prompt (" +
                                                std::to_string(prompt_length(10)) + " elements)");
  require(scene_grid_bins > 0 && scene_grid_bins <= kCanvasSize, "scene_grid_bins out of range");
}

ParamLayout ParamLayout::for_config(const ModelConfig& cfg) {
  cfg.validate();
  ParamLayout L;
  std::size_t off = 0;
  auto slot = [&](std::size_t rows, std::size_t cols) {
    TensorSlot s{off, rows, cols};
    off += rows * cols;
    return s;
  };
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto m = static_cast<std::size_t>(cfg.d_mlp());
  L.tok_emb = slot(kVocabSize, d);
  L.obj_emb = slot(kNumObjects, d);
  L.bin_emb = slot(static_cast<std::size_t>(cfg.n_bins()), d);
  L.pos_emb = slot(static_cast<std::size_t>(cfg.max_seq_len), d);
  for (int l = 0; l < cfg.n_layers; ++l) {
    Layer ly;
    ly.attn_norm = slot(1, d);
    ly.wq = slot(d, d);
    ly.bq = slot(1, d);
    ly.wk = slot(d, d);
    ly.bk = slot(1, d);
    ly.wv = slot(d, d);
    ly.bv = slot(1, d);
    ly.wo = slot(d, d);
    ly.bo = slot(1, d);
    ly.mlp_norm = slot(1, d);
    ly.w1 = slot(d, m);
    ly.b1 = slot(1, m);
    ly.w2 = slot(m, d);
    ly.b2 = slot(1, d);
    L.layers.push_back(ly);
  }
  L.final_norm = slot(1, d);
  L.unembed = slot(d, kVocabSize);
  L.total = off;
  return L;
}

template <typename T>
ModelParams<T>::ModelParams(ModelConfig cfg, std::vector<T> values)
    : config_(cfg), layout_(ParamLayout::for_config(cfg)), values_(values.begin(), values.end()) {
  if (values_.size() != layout_.total) {
    throw ConfigError("parameter buffer has " + std::to_string(values_.size()) + " values, config needs " +
                      std::to_string(layout_.total));
  }
}

template <typename T>
std::span<T> ModelParams<T>::mutable_values() {
  if (frozen_) throw ContractViolation("model parameters are frozen");
  return values_;
}

template <typename T>
std::uint64_t ModelParams<T>::checksum() const noexcept {
  Fnv1a h;
  h.update(std::as_bytes(std::span<const T>(values_)));
  return h.digest();
}

template <typename T>
bool ModelParams<T>::all_finite() const noexcept {
  return std::all_of(values_.begin(), values_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
ModelParams<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  const ParamLayout L = ParamLayout::for_config(cfg);
  std::vector<T> values(L.total, T(0));
  Rng rng(derive_seed(seed, "init"));
  auto fill_normal = [&](const TensorSlot& s, double stddev) {
    for (std::size_t i = 0; i < s.size(); ++i) values[s.offset + i] = static_cast<T>(stddev * rng.normal());
  };
  auto fill_const = [&](const TensorSlot& s, T v) {
    std::fill_n(values.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size(), v);
  };
  constexpr double kStd = 0.02;
  const double resid_std = kStd / std::sqrt(2.0 * cfg.n_layers);
  fill_normal(L.tok_emb, kStd);
  fill_normal(L.obj_emb, kStd);
  fill_normal(L.bin_emb, kStd);
  fill_normal(L.pos_emb, kStd);
  for (const auto& ly : L.layers) {
    fill_const(ly.attn_norm, T(1));
    fill_normal(ly.wq, kStd);
    fill_normal(ly.wk, kStd);
    fill_normal(ly.wv, kStd);
    fill_normal(ly.wo, resid_std);
    fill_const(ly.mlp_norm, T(1));
    fill_normal(ly.w1, kStd);
    fill_normal(ly.w2, resid_std);
  }
  fill_const(L.final_norm, T(1));
  fill_normal(L.unembed, kStd);
  ModelParams<T> p(cfg, std::move(values));
  p.set_training_seed(seed);
  return p;
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  const double m = logits.maxCoeff();
  Eigen::VectorXd e = (logits.array() - m).exp();
  return e / e.sum();
}

TokenId argmax(const Eigen::VectorXd& logits) {
  Eigen::Index idx = 0;
  logits.maxCoeff(&idx);
  return static_cast<TokenId>(idx);
}

namespace {

std::vector<detail::EmbedIndex> index_sequence(const ModelConfig& cfg, const TokenSequence& seq, SceneTable scenes,
                                               int count = -1) {
  if (seq.size() > cfg.max_seq_len) {
    throw SequenceTooLong("sequence of " + std::to_string(seq.size()) + " exceeds max_seq_len " +
                          std::to_string(cfg.max_seq_len));
  }
  if (count < 0) count = seq.size();
  std::vector<detail::EmbedIndex> idx;
  idx.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) idx.push_back(detail::embed_index(cfg, seq.elements[static_cast<std::size_t>(i)], i, scenes));
  return idx;
}

void check_vector(const Eigen::VectorXd& v, int d, const char* what) {
  if (v.size() != d) {
    throw InvalidArgument(std::string(what) + " has dimension " + std::to_string(v.size()) + ", expected " +
                          std::to_string(d));
  }
}

void check_intervention(const ModelConfig& cfg, const Intervention& iv, int seq_len) {
  std::visit(
      [&](const auto& x) {
        if (x.layer < 0 || x.layer >= cfg.n_layers) {
          throw IndexError("intervention layer " + std::to_string(x.layer) + " out of range [0," +
                           std::to_string(cfg.n_layers) + ")");
        }
        if (x.position < 0 || x.position >= seq_len) {
          throw IndexError("intervention position " + std::to_string(x.position) + " out of range");
        }
        using X = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<X, PatchHead>) {
          if (x.head < 0 || x.head >= cfg.n_heads) throw IndexError("head " + std::to_string(x.head) + " out of range");
          check_vector(x.replacement, cfg.d_model, "patch replacement");
        } else {
          check_vector(x.vector, cfg.d_model, "injected vector");
        }
      },
      iv);
}

detail::ResolvedInterventions resolve(std::span<const Intervention> ivs, int row_offset) {
  detail::ResolvedInterventions out;
  for (const auto& iv : ivs) {
    if (const auto* p = std::get_if<PatchHead>(&iv)) {
      out.patches.push_back({p->layer, p->head, p->position + row_offset, &p->replacement});
    } else {
      const auto& inj = std::get<InjectResidual>(iv);
      out.injects.push_back({inj.layer, inj.position + row_offset, &inj.vector});
    }
  }
  return out;
}

template <typename T>
std::pair<double, RVec<T>> nll_and_grad(const RVec<T>& logits, TokenId target) {
  const T m = logits.maxCoeff();
  RVec<T> p = (logits.array() - m).exp();
  const T sum = p.sum();
  const double loss = static_cast<double>(m + std::log(sum) - logits(target));
  p /= sum;
  p(target) -= T(1);
  return {loss, p};
}

}  // namespace

std::vector<std::pair<int, TokenId>> scored_targets(const TokenSequence& seq) {
  std::vector<std::pair<int, TokenId>> out;
  out.reserve(seq.answer_positions.size() + 1);
  for (int p : seq.answer_positions) out.emplace_back(p - 1, seq.elements[static_cast<std::size_t>(p)].token);
  out.emplace_back(seq.final_position, seq.gold_token);
  return out;
}

template <typename T>
BatchLoss batch_loss(const ModelParams<T>& params, std::span<const TokenSequence> seqs, SceneTable scenes,
                     std::span<T> grad) {
  const ModelConfig& cfg = params.config();
  const ParamLayout& L = params.layout();
  const detail::View<T> w{params.values().data()};
  const bool want_grad = !grad.empty();
  if (want_grad && grad.size() != L.total) throw InvalidArgument("gradient buffer has the wrong size");

  detail::Packing pack;
  std::vector<detail::EmbedIndex> idx;
  std::vector<int> rows;
  std::vector<TokenId> targets;
  for (const auto& seq : seqs) {
    auto si = index_sequence(cfg, seq, scenes);
    pack.offset.push_back(pack.rows);
    pack.length.push_back(seq.size());
    for (auto [pos, tgt] : scored_targets(seq)) {
      rows.push_back(pack.rows + pos);
      targets.push_back(tgt);
    }
    pack.rows += seq.size();
    idx.insert(idx.end(), si.begin(), si.end());
  }
  if (rows.empty()) throw InvalidArgument("batch has no scored positions");

  Mat<T> x;
  detail::embed_rows(w, L, idx, x);
  std::vector<detail::LayerCache<T>> caches(want_grad ? static_cast<std::size_t>(cfg.n_layers) : 0);
  detail::forward_layers(params, pack, x, {}, want_grad ? &caches : nullptr, detail::TraceSink<T>{});

  const auto R = static_cast<Eigen::Index>(rows.size());
  Mat<T> xs(R, cfg.d_model);
  for (Eigen::Index i = 0; i < R; ++i) xs.row(i) = x.row(rows[static_cast<std::size_t>(i)]);
  Col<T> rf;
  Mat<T> nf;
  detail::rms_forward(xs, w.vec(L.final_norm), nf, rf);
  Mat<T> logits = nf * w.mat(L.unembed);

  double loss = 0.0;
  Mat<T> dlogits(R, kVocabSize);
  for (Eigen::Index i = 0; i < R; ++i) {
    auto [li, g] = nll_and_grad<T>(logits.row(i), targets[static_cast<std::size_t>(i)]);
    loss += li;
    dlogits.row(i) = g;
  }
  loss /= static_cast<double>(R);
  if (!std::isfinite(loss)) throw NumericError("non-finite training loss");

  if (want_grad) {
    std::fill(grad.begin(), grad.end(), T(0));
    const detail::GradView<T> gw{grad.data()};
    dlogits /= static_cast<T>(R);
    gw.mat(L.unembed).noalias() += nf.transpose() * dlogits;
    Mat<T> dnf = dlogits * w.mat(L.unembed).transpose();
    Mat<T> dxs = Mat<T>::Zero(R, cfg.d_model);
    auto dgf = gw.vec(L.final_norm);
    detail::rms_backward(xs, rf, w.vec(L.final_norm), dnf, dxs, &dgf);
    Mat<T> dx = Mat<T>::Zero(pack.rows, cfg.d_model);
    for (Eigen::Index i = 0; i < R; ++i) dx.row(rows[static_cast<std::size_t>(i)]) += dxs.row(i);
    for (int l = cfg.n_layers - 1; l >= 0; --l) {
      detail::layer_backward(params, l, caches[static_cast<std::size_t>(l)], pack, dx, &gw);
    }
    detail::embed_backward(gw, L, idx, dx);
  }
  return {loss, static_cast<int>(R)};
}

// ---------------------------------------------------------------------------
// Backbone

std::unique_ptr<FinalSession> Backbone::open_session(const TokenSequence& seq, SceneTable scenes) const {
  return std::make_unique<GenericSession>(*this, seq, scenes);
}

LossGrad Backbone::grad_wrt_injection(const TokenSequence&, SceneTable, int, int, const Eigen::VectorXd&,
                                      TokenId) const {
  throw ContractViolation("this backbone does not provide injection gradients");
}

GenericSession::GenericSession(const Backbone& model, TokenSequence seq, SceneTable scenes)
    : model_(model), seq_(std::move(seq)), scenes_(scenes) {
  TraceRequest req{{seq_.final_position}};
  ForwardOutput out = model_.forward(seq_, scenes_, {}, req);
  logits_ = out.logits.row(seq_.final_position).transpose();
  if (!out.trace.empty()) {
    heads_ = std::move(out.trace.front().heads);
    hidden_ = std::move(out.trace.front().hidden);
  }
}

Eigen::VectorXd GenericSession::logits_with(std::span<const Intervention> interventions) {
  return model_.forward(seq_, scenes_, interventions).logits.row(seq_.final_position).transpose();
}

LossGrad GenericSession::injection_loss_grad(int layer, const Eigen::VectorXd& v, TokenId target) {
  return model_.grad_wrt_injection(seq_, scenes_, layer, seq_.final_position, v, target);
}

template <typename T>
TransformerBackbone<T>::TransformerBackbone(ModelParams<T> params) : params_(std::move(params)) {}

template <typename T>
ForwardOutput TransformerBackbone<T>::forward(const TokenSequence& seq, SceneTable scenes,
                                              std::span<const Intervention> interventions,
                                              const TraceRequest& trace) const {
  const ModelConfig& cfg = params_.config();
  const ParamLayout& L = params_.layout();
  const detail::View<T> w{params_.values().data()};
  for (const auto& iv : interventions) check_intervention(cfg, iv, seq.size());

  auto idx = index_sequence(cfg, seq, scenes);
  detail::Packing pack{{0}, {seq.size()}, seq.size()};
  Mat<T> x;
  detail::embed_rows(w, L, idx, x);

  ForwardOutput out;
  detail::TraceSink<T> sink;
  if (!trace.positions.empty()) {
    for (int p : trace.positions) {
      if (p < 0 || p >= seq.size()) throw IndexError("trace position " + std::to_string(p) + " out of range");
      PositionTrace pt;
      pt.position = p;
      pt.heads.resize(static_cast<std::size_t>(cfg.total_heads()));
      pt.attention.resize(static_cast<std::size_t>(cfg.n_layers));
      pt.hidden.resize(static_cast<std::size_t>(cfg.n_layers));
      out.trace.push_back(std::move(pt));
    }
    sink.rows = trace.positions;
    sink.out = &out.trace;
  }
  detail::forward_layers(params_, pack, x, resolve(interventions, 0), nullptr, sink);

  Col<T> rf;
  Mat<T> nf;
  detail::rms_forward(x, w.vec(L.final_norm), nf, rf);
  Mat<T> logits = nf * w.mat(L.unembed);
  out.logits = logits.template cast<double>();
  return out;
}

template <typename T>
std::unique_ptr<FinalSession> TransformerBackbone<T>::open_session(const TokenSequence& seq, SceneTable scenes) const {
  return std::make_unique<detail::CachedSession<T>>(params_, seq, scenes);
}

template <typename T>
LossGrad TransformerBackbone<T>::grad_wrt_injection(const TokenSequence& seq, SceneTable scenes, int layer,
                                                    int position, const Eigen::VectorXd& v, TokenId target) const {
  if (position == seq.final_position && position == seq.size() - 1) {
    return detail::CachedSession<T>(params_, seq, scenes).injection_loss_grad(layer, v, target);
  }
  return grad_wrt_injection_full(seq, scenes, layer, position, v, target);
}

template <typename T>
LossGrad TransformerBackbone<T>::grad_wrt_injection_full(const TokenSequence& seq, SceneTable scenes, int layer,
                                                         int position, const Eigen::VectorXd& v,
                                                         TokenId target) const {
  const ModelConfig& cfg = params_.config();
  const ParamLayout& L = params_.layout();
  const detail::View<T> w{params_.values().data()};
  if (layer < 0 || layer >= cfg.n_layers) throw IndexError("injection layer " + std::to_string(layer) + " out of range");
  if (position < 0 || position >= seq.size()) throw IndexError("injection position out of range");
  if (target < 0 || target >= kVocabSize) throw IndexError("target token out of range");
  check_vector(v, cfg.d_model, "injected vector");

  auto idx = index_sequence(cfg, seq, scenes);
  detail::Packing pack{{0}, {seq.size()}, seq.size()};
  Mat<T> x;
  detail::embed_rows(w, L, idx, x);
  detail::ResolvedInterventions iv;
  iv.injects.push_back({layer, position, &v});
  std::vector<detail::LayerCache<T>> caches(static_cast<std::size_t>(cfg.n_layers));
  detail::forward_layers(params_, pack, x, iv, &caches, detail::TraceSink<T>{});

  const int fin = seq.final_position;
  Mat<T> xs = x.row(fin);
  Col<T> rf;
  Mat<T> nf;
  detail::rms_forward(xs, w.vec(L.final_norm), nf, rf);
  RVec<T> logits = nf * w.mat(L.unembed);
  auto [loss, dlogits] = nll_and_grad<T>(logits, target);

  Mat<T> dnf = dlogits * w.mat(L.unembed).transpose();
  Mat<T> dxs = Mat<T>::Zero(1, cfg.d_model);
  detail::rms_backward(xs, rf, w.vec(L.final_norm), dnf, dxs, nullptr);
  Mat<T> dx = Mat<T>::Zero(seq.size(), cfg.d_model);
  dx.row(fin) = dxs.row(0);
  for (int l = cfg.n_layers - 1; l > layer; --l) {
    detail::layer_backward(params_, l, caches[static_cast<std::size_t>(l)], pack, dx, nullptr);
  }
  return {loss, dx.row(position).transpose().template cast<double>()};
}

// ---------------------------------------------------------------------------
// Cached final-position session

namespace detail {

template <typename T>
CachedSession<T>::CachedSession(const ModelParams<T>& params, const TokenSequence& seq, SceneTable scenes)
    : params_(params) {
  const ModelConfig& cfg = params.config();
  const ParamLayout& L = params.layout();
  const View<T> w{params.values().data()};
  if (seq.size() == 0 || seq.final_position != seq.size() - 1) {
    throw InvalidArgument("session needs a sequence ending at its final position");
  }
  final_pos_ = seq.final_position;
  auto idx = index_sequence(cfg, seq, scenes);
  const int prefix = seq.size() - 1;
  kpre_.resize(static_cast<std::size_t>(cfg.n_layers));
  vpre_.resize(static_cast<std::size_t>(cfg.n_layers));
  if (prefix > 0) {
    std::vector<EmbedIndex> pidx(idx.begin(), idx.end() - 1);
    Mat<T> xp;
    embed_rows(w, L, pidx, xp);
    Packing pack{{0}, {prefix}, prefix};
    std::vector<LayerCache<T>> caches(static_cast<std::size_t>(cfg.n_layers));
    forward_layers(params, pack, xp, {}, &caches, TraceSink<T>{});
    for (std::size_t l = 0; l < caches.size(); ++l) {
      kpre_[l] = std::move(caches[l].k);
      vpre_[l] = std::move(caches[l].v);
    }
  } else {
    for (std::size_t l = 0; l < kpre_.size(); ++l) {
      kpre_[l].resize(0, cfg.d_model);
      vpre_[l].resize(0, cfg.d_model);
    }
  }
  Mat<T> x0;
  embed_rows(w, L, std::vector<EmbedIndex>{idx.back()}, x0);
  base_in_.resize(static_cast<std::size_t>(cfg.n_layers) + 1);
  base_heads_.resize(static_cast<std::size_t>(cfg.total_heads()));
  base_hidden_.resize(static_cast<std::size_t>(cfg.n_layers));
  base_logits_ = run_row(0, x0.row(0), {}, {}, nullptr, true).transpose().template cast<double>();
}

template <typename T>
RVec<T> CachedSession<T>::run_row(int layer_begin, RVec<T> x, std::span<const RowPatch> patches,
                                  std::span<const RowInject> injects, std::vector<RowCache>* caches,
                                  bool record_baseline) {
  const ModelConfig& cfg = params_.config();
  const ParamLayout& L = params_.layout();
  const View<T> w{params_.values().data()};
  const int H = cfg.n_heads;
  const int dh = cfg.d_head;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  for (const auto& inj : injects) {
    if (inj.layer == layer_begin - 1) x += inj.vector->transpose().template cast<T>();
  }
  for (int l = layer_begin; l < cfg.n_layers; ++l) {
    const auto& Ls = L.layers[static_cast<std::size_t>(l)];
    const Mat<T>& kp = kpre_[static_cast<std::size_t>(l)];
    const Mat<T>& vp = vpre_[static_cast<std::size_t>(l)];
    const Index P = kp.rows();
    if (record_baseline) base_in_[static_cast<std::size_t>(l)] = x;
    RowCache local;
    RowCache& c = caches ? (*caches)[static_cast<std::size_t>(l)] : local;
    c.x = x;
    c.r1 = rms_forward_row(c.x, w.vec(Ls.attn_norm), c.n1);
    c.q = c.n1 * w.mat(Ls.wq) + w.vec(Ls.bq);
    c.k = c.n1 * w.mat(Ls.wk) + w.vec(Ls.bk);
    c.v = c.n1 * w.mat(Ls.wv) + w.vec(Ls.bv);
    c.o.resize(cfg.d_model);
    c.probs.resize(static_cast<std::size_t>(H));
    const auto wo = w.mat(Ls.wo);
    RVec<T> attn = RVec<T>::Zero(cfg.d_model);
    for (int h = 0; h < H; ++h) {
      const Index col = static_cast<Index>(h) * dh;
      Col<T> s(P + 1);
      if (P > 0) s.head(P).noalias() = kp.block(0, col, P, dh) * c.q.segment(col, dh).transpose();
      s(P) = c.k.segment(col, dh).dot(c.q.segment(col, dh));
      s *= scale;
      const T m = s.maxCoeff();
      s = (s.array() - m).exp();
      s /= s.sum();
      RVec<T> oh = s(P) * c.v.segment(col, dh);
      if (P > 0) oh.noalias() += s.head(P).transpose() * vp.block(0, col, P, dh);
      c.o.segment(col, dh) = oh;
      RVec<T> a = oh * wo.middleRows(col, dh);
      for (const auto& p : patches) {
        if (p.layer == l && p.head == h) a = p.replacement->transpose().template cast<T>();
      }
      if (record_baseline) base_heads_[static_cast<std::size_t>(l * H + h)] = a.transpose().template cast<double>();
      attn += a;
      c.probs[static_cast<std::size_t>(h)] = std::move(s);
    }
    attn += w.vec(Ls.bo);
    c.h = c.x + attn;
    c.r2 = rms_forward_row(c.h, w.vec(Ls.mlp_norm), c.n2);
    c.u = c.n2 * w.mat(Ls.w1) + w.vec(Ls.b1);
    gelu_forward(c.u, c.t, c.g);
    x = c.g * w.mat(Ls.w2) + w.vec(Ls.b2);
    x += c.h;
    for (const auto& inj : injects) {
      if (inj.layer == l) x += inj.vector->transpose().template cast<T>();
    }
    if (!x.allFinite()) throw NumericError("non-finite activation after layer " + std::to_string(l));
    if (record_baseline) base_hidden_[static_cast<std::size_t>(l)] = x.transpose().template cast<double>();
  }
  if (record_baseline) base_in_[static_cast<std::size_t>(cfg.n_layers)] = x;
  final_x_ = x;
  final_r_ = rms_forward_row(final_x_, w.vec(L.final_norm), final_n_);
  return final_n_ * w.mat(L.unembed);
}

template <typename T>
Eigen::VectorXd CachedSession<T>::logits_with(std::span<const Intervention> interventions) {
  const ModelConfig& cfg = params_.config();
  std::vector<RowPatch> patches;
  std::vector<RowInject> injects;
  int begin = cfg.n_layers;
  for (const auto& iv : interventions) {
    check_intervention(cfg, iv, final_pos_ + 1);
    std::visit([&](const auto& x) {
      if (x.position != final_pos_) throw InvalidArgument("session interventions must target the final position");
    }, iv);
    if (const auto* p = std::get_if<PatchHead>(&iv)) {
      patches.push_back({p->layer, p->head, &p->replacement});
      begin = std::min(begin, p->layer);
    } else {
      const auto& inj = std::get<InjectResidual>(iv);
      injects.push_back({inj.layer, &inj.vector});
      begin = std::min(begin, inj.layer + 1);
    }
  }
  if (interventions.empty()) return base_logits_;
  RVec<T> logits = run_row(begin, base_in_[static_cast<std::size_t>(begin)], patches, injects, nullptr, false);
  return logits.transpose().template cast<double>();
}

template <typename T>
LossGrad CachedSession<T>::injection_loss_grad(int layer, const Eigen::VectorXd& v, TokenId target) {
  const ModelConfig& cfg = params_.config();
  const ParamLayout& L = params_.layout();
  const View<T> w{params_.values().data()};
  if (layer < 0 || layer >= cfg.n_layers) throw IndexError("injection layer " + std::to_string(layer) + " out of range");
  if (target < 0 || target >= kVocabSize) throw IndexError("target token out of range");
  check_vector(v, cfg.d_model, "injected vector");
  const int H = cfg.n_heads;
  const int dh = cfg.d_head;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  std::vector<RowCache> caches(static_cast<std::size_t>(cfg.n_layers));
  const RowInject inject{layer, &v};
  RVec<T> logits = run_row(layer + 1, base_in_[static_cast<std::size_t>(layer) + 1], {},
                           std::span<const RowInject>(&inject, 1), &caches, false);
  auto [loss, dlogits] = nll_and_grad<T>(logits, target);

  RVec<T> dn = dlogits * w.mat(L.unembed).transpose();
  RVec<T> dx = rms_backward_row(final_x_, final_r_, w.vec(L.final_norm), dn);
  for (int l = cfg.n_layers - 1; l > layer; --l) {
    const auto& Ls = L.layers[static_cast<std::size_t>(l)];
    const RowCache& c = caches[static_cast<std::size_t>(l)];
    const Mat<T>& kp = kpre_[static_cast<std::size_t>(l)];
    const Mat<T>& vp = vpre_[static_cast<std::size_t>(l)];
    const Index P = kp.rows();

    RVec<T> du = dx * w.mat(Ls.w2).transpose();
    du.array() *= gelu_backward_factor(c.u, c.t);
    RVec<T> dn2 = du * w.mat(Ls.w1).transpose();
    RVec<T> dh_ = dx + rms_backward_row(c.h, c.r2, w.vec(Ls.mlp_norm), dn2);

    RVec<T> d_o = dh_ * w.mat(Ls.wo).transpose();
    RVec<T> dq = RVec<T>::Zero(cfg.d_model);
    RVec<T> dk = RVec<T>::Zero(cfg.d_model);
    RVec<T> dv = RVec<T>::Zero(cfg.d_model);
    for (int h = 0; h < H; ++h) {
      const Index col = static_cast<Index>(h) * dh;
      const Col<T>& s = c.probs[static_cast<std::size_t>(h)];
      const auto doh = d_o.segment(col, dh);
      Col<T> dp(P + 1);
      if (P > 0) dp.head(P).noalias() = vp.block(0, col, P, dh) * doh.transpose();
      dp(P) = c.v.segment(col, dh).dot(doh);
      dv.segment(col, dh) = s(P) * doh;
      const T pdp = s.dot(dp);
      Col<T> ds = (s.array() * (dp.array() - pdp)) * scale;
      RVec<T> dqh = ds(P) * c.k.segment(col, dh);
      if (P > 0) dqh.noalias() += ds.head(P).transpose() * kp.block(0, col, P, dh);
      dq.segment(col, dh) = dqh;
      dk.segment(col, dh) = ds(P) * c.q.segment(col, dh);
    }
    RVec<T> dn1 = dq * w.mat(Ls.wq).transpose();
    dn1.noalias() += dk * w.mat(Ls.wk).transpose();
    dn1.noalias() += dv * w.mat(Ls.wv).transpose();
    dx = dh_ + rms_backward_row(c.x, c.r1, w.vec(Ls.attn_norm), dn1);
  }
  return {loss, dx.transpose().template cast<double>()};
}

}  // namespace detail

std::unique_ptr<Backbone> make_backbone(const ModelParams<float>& params, Precision precision) {
  if (precision == Precision::F32) return std::make_unique<TransformerBackbone<float>>(params);
  return std::make_unique<TransformerBackbone<double>>(params.cast<double>());
}

std::unique_ptr<Backbone> make_backbone(const ModelParams<double>& params, Precision precision) {
  if (precision == Precision::F64) return std::make_unique<TransformerBackbone<double>>(params);
  return std::make_unique<TransformerBackbone<float>>(params.cast<float>());
}

template class ModelParams<float>;
template class ModelParams<double>;
template ModelParams<float> init_model<float>(const ModelConfig&, std::uint64_t);
template ModelParams<double> init_model<double>(const ModelConfig&, std::uint64_t);
template class TransformerBackbone<float>;
template class TransformerBackbone<double>;
template BatchLoss batch_loss<float>(const ModelParams<float>&, std::span<const TokenSequence>, SceneTable,
                                     std::span<float>);
template BatchLoss batch_loss<double>(const ModelParams<double>&, std::span<const TokenSequence>, SceneTable,
                                      std::span<double>);

}  // namespace fvlab
