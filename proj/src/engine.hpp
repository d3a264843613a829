// Forward and backward kernels shared by inference and training. Internal
// header: included by model.cpp and train-side code only.
#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

#include "fvlab/error.hpp"
#include "fvlab/model.hpp"

namespace fvlab::detail {

using Eigen::Index;

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using Col = Eigen::Matrix<T, Eigen::Dynamic, 1>;

inline constexpr double kNormEps = 1e-5;

template <typename T>
struct View {
  const T* base;
  Eigen::Map<const Mat<T>> mat(const TensorSlot& s) const {
    return {base + s.offset, static_cast<Index>(s.rows), static_cast<Index>(s.cols)};
  }
  Eigen::Map<const RVec<T>> vec(const TensorSlot& s) const {
    return {base + s.offset, static_cast<Index>(s.size())};
  }
};

template <typename T>
struct GradView {
  T* base;
  Eigen::Map<Mat<T>> mat(const TensorSlot& s) const {
    return {base + s.offset, static_cast<Index>(s.rows), static_cast<Index>(s.cols)};
  }
  Eigen::Map<RVec<T>> vec(const TensorSlot& s) const { return {base + s.offset, static_cast<Index>(s.size())}; }
};

// Array forms over whole activations; `t` receives the tanh term so the
// backward pass can reuse it.
template <typename U, typename TU, typename GU>
void gelu_forward(const U& u, TU& t, GU& g) {
  using T = typename U::Scalar;
  const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  t = (c * (u.array() + static_cast<T>(0.044715) * u.array().cube())).tanh().matrix();
  g = (static_cast<T>(0.5) * u.array() * (static_cast<T>(1) + t.array())).matrix();
}

template <typename U, typename TU>
auto gelu_backward_factor(const U& u, const TU& t) {
  using T = typename U::Scalar;
  const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  const T k = static_cast<T>(0.044715);
  return (static_cast<T>(0.5) * (static_cast<T>(1) + t.array()) +
          static_cast<T>(0.5) * u.array() * (static_cast<T>(1) - t.array().square()) * c *
              (static_cast<T>(1) + 3 * k * u.array().square()))
      .eval();
}

// y = x / rms(x) * g, row-wise.
template <typename T, typename G>
void rms_forward(const Mat<T>& x, const G& g, Mat<T>& y, Col<T>& r) {
  const T d = static_cast<T>(x.cols());
  r = ((x.array().square().rowwise().sum() / d) + static_cast<T>(kNormEps)).sqrt();
  y = (x.array().colwise() / r.array()).rowwise() * g.array();
}

// Accumulates dL/dx into dx and, when dg is given, dL/dg into *dg.
template <typename T, typename G>
void rms_backward(const Mat<T>& x, const Col<T>& r, const G& g, const Mat<T>& dy, Mat<T>& dx,
                  std::type_identity_t<Eigen::Map<RVec<T>>>* dg) {
  const T d = static_cast<T>(x.cols());
  Mat<T> gdy = dy.array().rowwise() * g.array();
  Col<T> dot = (gdy.array() * x.array()).rowwise().sum();
  dx.array() += (gdy.array().colwise() / r.array()) -
                x.array().colwise() * (dot.array() / (d * r.array().cube()));
  if (dg) *dg += (dy.array() * (x.array().colwise() / r.array())).colwise().sum().matrix();
}

// Row-vector variants for the single-row session path.
template <typename T, typename G>
T rms_forward_row(const RVec<T>& x, const G& g, RVec<T>& y) {
  const T r = std::sqrt(x.squaredNorm() / static_cast<T>(x.size()) + static_cast<T>(kNormEps));
  y = (x.array() / r) * g.array();
  return r;
}

template <typename T, typename G>
RVec<T> rms_backward_row(const RVec<T>& x, T r, const G& g, const RVec<T>& dy) {
  const T d = static_cast<T>(x.size());
  RVec<T> gdy = dy.array() * g.array();
  const T dot = gdy.dot(x);
  return (gdy.array() / r - x.array() * (dot / (d * r * r * r))).matrix();
}

// Index of the embedding rows summed for one sequence element.
struct EmbedIndex {
  int token = -1;
  int object = -1;
  int bin = -1;
  int pos = 0;
};

inline EmbedIndex embed_index(const ModelConfig& cfg, const Element& e, int pos, SceneTable scenes) {
  EmbedIndex idx;
  idx.pos = pos;
  if (e.kind == Element::Kind::Token) {
    if (e.token < 0 || e.token >= kVocabSize) throw IndexError("token id out of range");
    idx.token = e.token;
    return idx;
  }
  if (e.scene_id < 0 || static_cast<std::size_t>(e.scene_id) >= scenes.size()) {
    throw LookupError("scene " + std::to_string(e.scene_id) + " missing from scene table");
  }
  const Scene& s = scenes[static_cast<std::size_t>(e.scene_id)];
  if (s.id != e.scene_id) throw LookupError("scene table index does not match scene id");
  if (e.slot < 0 || e.slot >= kObjectsPerScene) throw IndexError("scene slot out of range");
  const PlacedObject& o = s.objects[static_cast<std::size_t>(e.slot)];
  const int bins = cfg.scene_grid_bins;
  const int bx = std::min(bins - 1, std::max(0, o.x * bins / kCanvasSize));
  const int by = std::min(bins - 1, std::max(0, o.y * bins / kCanvasSize));
  idx.object = o.id.value;
  idx.bin = by * bins + bx;
  return idx;
}

template <typename T>
void embed_rows(const View<T>& w, const ParamLayout& L, const std::vector<EmbedIndex>& idx, Mat<T>& x) {
  const auto tok = w.mat(L.tok_emb);
  const auto obj = w.mat(L.obj_emb);
  const auto bin = w.mat(L.bin_emb);
  const auto pos = w.mat(L.pos_emb);
  x.resize(static_cast<Index>(idx.size()), pos.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& e = idx[i];
    const auto r = static_cast<Index>(i);
    if (e.token >= 0) {
      x.row(r) = tok.row(e.token) + pos.row(e.pos);
    } else {
      x.row(r) = obj.row(e.object) + bin.row(e.bin) + pos.row(e.pos);
    }
  }
}

template <typename T>
void embed_backward(const GradView<T>& gw, const ParamLayout& L, const std::vector<EmbedIndex>& idx,
                    const Mat<T>& dx) {
  auto tok = gw.mat(L.tok_emb);
  auto obj = gw.mat(L.obj_emb);
  auto bin = gw.mat(L.bin_emb);
  auto pos = gw.mat(L.pos_emb);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& e = idx[i];
    const auto r = static_cast<Index>(i);
    if (e.token >= 0) {
      tok.row(e.token) += dx.row(r);
    } else {
      obj.row(e.object) += dx.row(r);
      bin.row(e.bin) += dx.row(r);
    }
    pos.row(e.pos) += dx.row(r);
  }
}

// Sequences packed back to back; attention never crosses a boundary.
struct Packing {
  std::vector<int> offset;
  std::vector<int> length;
  int rows = 0;
};

template <typename T>
struct LayerCache {
  Mat<T> x;
  Col<T> r1;
  Mat<T> n1, q, k, v, o, h;
  Col<T> r2;
  Mat<T> n2, u, t, g;  // t = tanh term of the GELU
  std::vector<Mat<T>> probs;  // [seq * n_heads + head]
};

// Interventions resolved to absolute packed rows.
struct ResolvedInterventions {
  struct Patch {
    int layer, head, row;
    const Eigen::VectorXd* replacement;
  };
  struct Inject {
    int layer, row;
    const Eigen::VectorXd* vector;
  };
  std::vector<Patch> patches;
  std::vector<Inject> injects;
};

template <typename T>
void causal_softmax(Mat<T>& s) {
  for (Index i = 0; i < s.rows(); ++i) {
    auto live = s.row(i).head(i + 1);
    const T m = live.maxCoeff();
    live = (live.array() - m).exp().matrix();
    live /= live.sum();
    if (i + 1 < s.cols()) s.row(i).tail(s.cols() - i - 1).setZero();
  }
}

template <typename T>
struct TraceSink {
  std::vector<int> rows;
  std::vector<PositionTrace>* out = nullptr;
};

// Runs the decoder stack over packed rows. `x` enters as the embedding and
// leaves as the residual stream after the last layer. When `caches` is given
// every layer's activations are kept for the backward pass.
template <typename T>
void forward_layers(const ModelParams<T>& params, const Packing& pack, Mat<T>& x,
                    const ResolvedInterventions& iv, std::type_identity_t<std::vector<LayerCache<T>>>* caches,
                    const std::type_identity_t<TraceSink<T>>& trace, int layer_begin = 0, int layer_end = -1) {
  const ModelConfig& cfg = params.config();
  const ParamLayout& L = params.layout();
  const View<T> w{params.values().data()};
  const int H = cfg.n_heads;
  const int dh = cfg.d_head;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  if (layer_end < 0) layer_end = cfg.n_layers;
  const Index N = x.rows();

  if (trace.out) {
    for (std::size_t t = 0; t < trace.rows.size(); ++t) {
      (*trace.out)[t].embedding = x.row(trace.rows[t]).transpose().template cast<double>();
    }
  }

  for (int l = layer_begin; l < layer_end; ++l) {
    const auto& Ls = L.layers[static_cast<std::size_t>(l)];
    LayerCache<T> local;
    LayerCache<T>& c = caches ? (*caches)[static_cast<std::size_t>(l)] : local;
    c.x = x;
    rms_forward(c.x, w.vec(Ls.attn_norm), c.n1, c.r1);
    c.q.noalias() = c.n1 * w.mat(Ls.wq);
    c.q.rowwise() += w.vec(Ls.bq);
    c.k.noalias() = c.n1 * w.mat(Ls.wk);
    c.k.rowwise() += w.vec(Ls.bk);
    c.v.noalias() = c.n1 * w.mat(Ls.wv);
    c.v.rowwise() += w.vec(Ls.bv);
    c.o.resize(N, cfg.d_model);
    c.probs.clear();
    for (std::size_t s = 0; s < pack.offset.size(); ++s) {
      const Index off = pack.offset[s];
      const Index len = pack.length[s];
      for (int h = 0; h < H; ++h) {
        const Index col = static_cast<Index>(h) * dh;
        Mat<T> p = (c.q.block(off, col, len, dh) * c.k.block(off, col, len, dh).transpose()) * scale;
        causal_softmax(p);
        c.o.block(off, col, len, dh).noalias() = p * c.v.block(off, col, len, dh);
        if (caches) c.probs.push_back(std::move(p));
      }
    }
    const auto wo = w.mat(Ls.wo);
    const auto bo = w.vec(Ls.bo);
    Mat<T> attn = c.o * wo;
    attn.rowwise() += bo;

    auto head_contrib = [&](Index row, int h) -> RVec<T> {
      const Index col = static_cast<Index>(h) * dh;
      return c.o.row(row).segment(col, dh) * wo.middleRows(col, dh);
    };
    for (const auto& p : iv.patches) {
      if (p.layer != l) continue;
      RVec<T> sum = RVec<T>::Zero(cfg.d_model);
      for (int h = 0; h < H; ++h) {
        bool patched = false;
        for (const auto& q : iv.patches) {
          if (q.layer == l && q.row == p.row && q.head == h) {
            sum += q.replacement->transpose().template cast<T>();
            patched = true;
            break;
          }
        }
        if (!patched) sum += head_contrib(p.row, h);
      }
      attn.row(p.row) = sum + bo;
    }
    if (trace.out) {
      for (std::size_t t = 0; t < trace.rows.size(); ++t) {
        auto& pt = (*trace.out)[t];
        const Index row = trace.rows[t];
        for (int h = 0; h < H; ++h) {
          Eigen::VectorXd a = head_contrib(row, h).transpose().template cast<double>();
          for (const auto& q : iv.patches) {
            if (q.layer == l && q.row == row && q.head == h) a = *q.replacement;
          }
          pt.heads[static_cast<std::size_t>(l * H + h)] = std::move(a);
        }
        pt.attention[static_cast<std::size_t>(l)] = attn.row(row).transpose().template cast<double>();
      }
    }

    c.h = c.x + attn;
    rms_forward(c.h, w.vec(Ls.mlp_norm), c.n2, c.r2);
    c.u.noalias() = c.n2 * w.mat(Ls.w1);
    c.u.rowwise() += w.vec(Ls.b1);
    gelu_forward(c.u, c.t, c.g);
    x.noalias() = c.g * w.mat(Ls.w2);
    x.rowwise() += w.vec(Ls.b2);
    x += c.h;
    for (const auto& inj : iv.injects) {
      if (inj.layer == l) x.row(inj.row) += inj.vector->transpose().template cast<T>();
    }
    if (!x.allFinite()) throw NumericError("non-finite activation after layer " + std::to_string(l));
    if (trace.out) {
      for (std::size_t t = 0; t < trace.rows.size(); ++t) {
        (*trace.out)[t].hidden[static_cast<std::size_t>(l)] = x.row(trace.rows[t]).transpose().template cast<double>();
      }
    }
  }
}

// Backward through one layer. `dy` holds dL/d(layer output) and is replaced
// by dL/d(layer input). Parameter gradients accumulate into `gw` if non-null.
template <typename T>
void layer_backward(const ModelParams<T>& params, int l, const LayerCache<T>& c, const Packing& pack,
                    Mat<T>& dy, const std::type_identity_t<GradView<T>>* gw) {
  const ModelConfig& cfg = params.config();
  const auto& Ls = params.layout().layers[static_cast<std::size_t>(l)];
  const View<T> w{params.values().data()};
  const int H = cfg.n_heads;
  const int dh = cfg.d_head;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  // MLP block: y = h + W2 gelu(W1 norm(h)).
  if (gw) {
    gw->mat(Ls.w2).noalias() += c.g.transpose() * dy;
    gw->vec(Ls.b2) += dy.colwise().sum();
  }
  Mat<T> du = dy * w.mat(Ls.w2).transpose();
  du.array() *= gelu_backward_factor(c.u, c.t);
  if (gw) {
    gw->mat(Ls.w1).noalias() += c.n2.transpose() * du;
    gw->vec(Ls.b1) += du.colwise().sum();
  }
  Mat<T> dn2 = du * w.mat(Ls.w1).transpose();
  Mat<T> dh_ = dy;
  {
    Eigen::Map<RVec<T>> dg = gw ? gw->vec(Ls.mlp_norm) : Eigen::Map<RVec<T>>(nullptr, 0);
    rms_backward(c.h, c.r2, w.vec(Ls.mlp_norm), dn2, dh_, gw ? &dg : nullptr);
  }

  // Attention block: h = x + Wo attn(norm(x)).
  if (gw) {
    gw->mat(Ls.wo).noalias() += c.o.transpose() * dh_;
    gw->vec(Ls.bo) += dh_.colwise().sum();
  }
  Mat<T> d_o = dh_ * w.mat(Ls.wo).transpose();
  const Index N = c.x.rows();
  Mat<T> dq(N, cfg.d_model), dk(N, cfg.d_model), dv(N, cfg.d_model);
  for (std::size_t s = 0; s < pack.offset.size(); ++s) {
    const Index off = pack.offset[s];
    const Index len = pack.length[s];
    for (int h = 0; h < H; ++h) {
      const Index col = static_cast<Index>(h) * dh;
      const Mat<T>& p = c.probs[s * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
      auto dOh = d_o.block(off, col, len, dh);
      Mat<T> dp = dOh * c.v.block(off, col, len, dh).transpose();
      dv.block(off, col, len, dh).noalias() = p.transpose() * dOh;
      Col<T> rowdot = (p.array() * dp.array()).rowwise().sum();
      Mat<T> ds = (p.array() * (dp.array().colwise() - rowdot.array())) * scale;
      dq.block(off, col, len, dh).noalias() = ds * c.k.block(off, col, len, dh);
      dk.block(off, col, len, dh).noalias() = ds.transpose() * c.q.block(off, col, len, dh);
    }
  }
  if (gw) {
    gw->mat(Ls.wq).noalias() += c.n1.transpose() * dq;
    gw->vec(Ls.bq) += dq.colwise().sum();
    gw->mat(Ls.wk).noalias() += c.n1.transpose() * dk;
    gw->vec(Ls.bk) += dk.colwise().sum();
    gw->mat(Ls.wv).noalias() += c.n1.transpose() * dv;
    gw->vec(Ls.bv) += dv.colwise().sum();
  }
  Mat<T> dn1 = dq * w.mat(Ls.wq).transpose();
  dn1.noalias() += dk * w.mat(Ls.wk).transpose();
  dn1.noalias() += dv * w.mat(Ls.wv).transpose();
  Mat<T> dx = dh_;
  {
    Eigen::Map<RVec<T>> dg = gw ? gw->vec(Ls.attn_norm) : Eigen::Map<RVec<T>>(nullptr, 0);
    rms_backward(c.x, c.r1, w.vec(Ls.attn_norm), dn1, dx, gw ? &dg : nullptr);
  }
  dy = std::move(dx);
}

// Final-position session: prefix keys and values cached per layer; only the
// last row is recomputed under interventions.
template <typename T>
class CachedSession final : public FinalSession {
 public:
  CachedSession(const ModelParams<T>& params, const TokenSequence& seq, SceneTable scenes);

  const Eigen::VectorXd& baseline_logits() const override { return base_logits_; }
  const std::vector<Eigen::VectorXd>& baseline_heads() const override { return base_heads_; }
  const std::vector<Eigen::VectorXd>& baseline_hidden() const override { return base_hidden_; }
  Eigen::VectorXd logits_with(std::span<const Intervention> interventions) override;
  LossGrad injection_loss_grad(int layer, const Eigen::VectorXd& v, TokenId target) override;

 private:
  struct RowCache {
    RVec<T> x, n1, q, k, v, o, h, n2, u, t, g;
    T r1 = 0, r2 = 0;
    std::vector<Col<T>> probs;  // per head, over prefix + self
  };
  struct RowPatch {
    int layer, head;
    const Eigen::VectorXd* replacement;
  };
  struct RowInject {
    int layer;
    const Eigen::VectorXd* vector;
  };

  // Runs the final row from `layer_begin` with residual `x`; returns logits.
  RVec<T> run_row(int layer_begin, RVec<T> x, std::span<const RowPatch> patches, std::span<const RowInject> injects,
                  std::vector<RowCache>* caches, bool record_baseline);

  const ModelParams<T>& params_;
  int final_pos_ = 0;
  std::vector<Mat<T>> kpre_, vpre_;
  std::vector<RVec<T>> base_in_;  // residual entering layer l; [n_layers] feeds the final norm
  RVec<T> final_x_;
  T final_r_ = 0;
  RVec<T> final_n_;
  Eigen::VectorXd base_logits_;
  std::vector<Eigen::VectorXd> base_heads_;
  std::vector<Eigen::VectorXd> base_hidden_;
};

}  // namespace fvlab::detail
