#include <doctest.h>

#include <cmath>
#include <fstream>

#include "fixtures.hpp"
#include "fvlab/error.hpp"
#include "fvlab/model.hpp"
#include "fvlab/transformer.hpp"

using namespace fvlab;
using namespace fvlab::testing;

namespace {

TokenSequence sample_prompt(int shots, Relation r, std::uint64_t seed) {
  Rng rng(seed);
  return encode_prompt(sample_task(tiny_dataset(), Split::Extraction, r, shots, false, rng), 192);
}

Eigen::VectorXd random_vector(int d, Rng& rng, double scale = 1.0) {
  Eigen::VectorXd v(d);
  for (int i = 0; i < d; ++i) v[i] = scale * rng.normal();
  return v;
}

double nll(const Eigen::VectorXd& logits, TokenId target) { return -std::log(softmax(logits)[target]); }

Eigen::VectorXd final_logits(const Backbone& m, const TokenSequence& seq, std::span<const Intervention> iv = {}) {
  return m.forward(seq, tiny_dataset().scenes, iv).logits.row(seq.final_position).transpose();
}

}  // namespace

TEST_CASE("init_model is deterministic, finite and validates its config") {
  const auto a = init_model<double>(tiny_config(), 5);
  const auto b = init_model<double>(tiny_config(), 5);
  CHECK(a.checksum() == b.checksum());
  CHECK(a.checksum() != init_model<double>(tiny_config(), 6).checksum());
  CHECK(a.all_finite());
  const auto& L = a.layout();
  for (const auto& ly : L.layers) {
    for (const TensorSlot* s : {&ly.bq, &ly.bk, &ly.bv, &ly.bo, &ly.b1, &ly.b2}) {
      for (std::size_t i = 0; i < s->size(); ++i) CHECK(a.values()[s->offset + i] == 0.0);
    }
  }
  ModelConfig bad = tiny_config();
  bad.d_head = 7;
  CHECK_THROWS_AS(init_model<double>(bad, 1), ConfigError);
  bad = tiny_config();
  bad.max_seq_len = 100;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_NOTHROW(ModelConfig{}.validate());
  CHECK(ParamLayout::for_config(ModelConfig{}).bin_emb.rows == 256);
}

TEST_CASE("frozen params refuse mutation") {
  auto p = init_model<double>(tiny_config(), 1);
  CHECK_NOTHROW(p.mutable_values());
  p.freeze();
  CHECK_THROWS_AS(p.mutable_values(), ContractViolation);
}

TEST_CASE("forward logits form distributions and respect causality") {
  const auto m = tiny_backbone();
  const TokenSequence seq = sample_prompt(2, Relation::Above, 1);
  const ForwardOutput out = m->forward(seq, tiny_dataset().scenes);
  REQUIRE(out.logits.rows() == seq.size());
  REQUIRE(out.logits.cols() == kVocabSize);
  for (Eigen::Index i = 0; i < out.logits.rows(); ++i) {
    CHECK(std::abs(softmax(out.logits.row(i).transpose()).sum() - 1.0) < 1e-6);
  }
  // Mutate everything after position p; rows up to p must not move.
  const int p = seq.answer_positions[1] - 3;
  TokenSequence mutated = seq;
  for (int i = p + 1; i < mutated.size(); ++i) {
    auto& e = mutated.elements[static_cast<std::size_t>(i)];
    if (e.kind == Element::Kind::Token) e.token = (e.token + 7) % kVocabSize;
    else e.scene_id = (e.scene_id + 1) % 100;
  }
  const ForwardOutput out2 = m->forward(mutated, tiny_dataset().scenes);
  CHECK(out2.logits.topRows(p + 1) == out.logits.topRows(p + 1));
  CHECK(out2.logits.row(p + 1) != out.logits.row(p + 1));
}

TEST_CASE("self-patch and zero injection are no-ops") {
  const auto m = tiny_backbone();
  const auto& cfg = m->config();
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const TokenSequence seq = sample_prompt(4, kBaseRelations[static_cast<std::size_t>(trial % 4)], 100 + trial);
    const int pos = trial % 3 == 0 ? static_cast<int>(rng.uniform_int(0, seq.final_position)) : seq.final_position;
    const int layer = static_cast<int>(rng.uniform_int(0, cfg.n_layers - 1));
    const int head = static_cast<int>(rng.uniform_int(0, cfg.n_heads - 1));
    const ForwardOutput base = m->forward(seq, tiny_dataset().scenes, {}, TraceRequest{{pos}});
    const Intervention self{PatchHead{layer, head, pos, base.trace[0].heads[static_cast<std::size_t>(layer * cfg.n_heads + head)]}};
    const ForwardOutput patched = m->forward(seq, tiny_dataset().scenes, std::span(&self, 1));
    CHECK((patched.logits - base.logits).cwiseAbs().maxCoeff() <= 1e-9);
    const Intervention zero{InjectResidual{layer, pos, Eigen::VectorXd::Zero(cfg.d_model)}};
    CHECK(m->forward(seq, tiny_dataset().scenes, std::span(&zero, 1)).logits == base.logits);
  }
}

TEST_CASE("head contributions reconstruct the attention sublayer") {
  const auto m = tiny_backbone();
  const auto& cfg = m->config();
  const auto& p = m->params();
  const TokenSequence seq = sample_prompt(4, Relation::Below, 8);
  const ForwardOutput out = m->forward(seq, tiny_dataset().scenes, {}, TraceRequest{{5, 40, seq.final_position}});
  REQUIRE(out.trace.size() == 3);
  for (const auto& t : out.trace) {
    for (int l = 0; l < cfg.n_layers; ++l) {
      const auto& bo_slot = p.layout().layers[static_cast<std::size_t>(l)].bo;
      Eigen::VectorXd sum = Eigen::Map<const Eigen::VectorXd>(p.values().data() + bo_slot.offset, cfg.d_model);
      for (int h = 0; h < cfg.n_heads; ++h) sum += t.heads[static_cast<std::size_t>(l * cfg.n_heads + h)];
      CHECK((sum - t.attention[static_cast<std::size_t>(l)]).cwiseAbs().maxCoeff() < 1e-6);
    }
  }
}

TEST_CASE("injection is linear at the site and local elsewhere") {
  const auto m = tiny_backbone();
  const auto& cfg = m->config();
  const TokenSequence seq = sample_prompt(2, Relation::LeftOf, 4);
  Rng rng(3);
  const int pos = 20;
  const int layer = 1;
  const Eigen::VectorXd v = random_vector(cfg.d_model, rng);
  std::vector<int> probe_positions{5, pos - 1, pos, pos + 1, seq.final_position};
  const ForwardOutput base = m->forward(seq, tiny_dataset().scenes, {}, TraceRequest{probe_positions});
  const Intervention inj{InjectResidual{layer, pos, v}};
  const ForwardOutput with = m->forward(seq, tiny_dataset().scenes, std::span(&inj, 1), TraceRequest{probe_positions});
  for (std::size_t k = 0; k < probe_positions.size(); ++k) {
    const int p = probe_positions[k];
    for (int l = 0; l < cfg.n_layers; ++l) {
      const auto& hb = base.trace[k].hidden[static_cast<std::size_t>(l)];
      const auto& hw = with.trace[k].hidden[static_cast<std::size_t>(l)];
      if (l < layer || p < pos || (l == layer && p != pos)) {
        CHECK(hb == hw);
      } else if (l == layer && p == pos) {
        CHECK((hw - (hb + v)).cwiseAbs().maxCoeff() <= 1e-12);
      }
    }
  }
  CHECK(with.logits.topRows(pos) == base.logits.topRows(pos));
}

TEST_CASE("grad_wrt_injection matches central finite differences") {
  const auto m = tiny_backbone(3, 8.0);
  const auto& cfg = m->config();
  Rng rng(77);
  for (int prompt = 0; prompt < 3; ++prompt) {
    const TokenSequence seq = sample_prompt(4, kBaseRelations[static_cast<std::size_t>(prompt)], 300 + prompt);
    for (int layer = 0; layer < cfg.n_layers; ++layer) {
      const Eigen::VectorXd v = random_vector(cfg.d_model, rng, 0.5);
      const TokenId target = seq.gold_token;
      const LossGrad g = m->grad_wrt_injection(seq, tiny_dataset().scenes, layer, seq.final_position, v, target);
      const LossGrad full =
          m->grad_wrt_injection_full(seq, tiny_dataset().scenes, layer, seq.final_position, v, target);
      CHECK((g.grad - full.grad).cwiseAbs().maxCoeff() < 1e-10);
      CHECK(std::abs(g.loss - full.loss) < 1e-12);
      for (int c = 0; c < 16; ++c) {
        const int i = static_cast<int>(rng.uniform_int(0, cfg.d_model - 1));
        const double h = 1e-5;
        Eigen::VectorXd vp = v, vm = v;
        vp[i] += h;
        vm[i] -= h;
        const Intervention ip{InjectResidual{layer, seq.final_position, vp}};
        const Intervention im{InjectResidual{layer, seq.final_position, vm}};
        const double fd = (nll(final_logits(*m, seq, std::span(&ip, 1)), target) -
                           nll(final_logits(*m, seq, std::span(&im, 1)), target)) /
                          (2 * h);
        CHECK(rel_err(g.grad[i], fd) < 1e-4);
      }
    }
  }
}

TEST_CASE("grad at an earlier position matches finite differences") {
  const auto m = tiny_backbone(4, 8.0);
  const TokenSequence seq = sample_prompt(2, Relation::RightOf, 9);
  Rng rng(5);
  const int pos = seq.final_position - 3;
  const Eigen::VectorXd v = random_vector(m->config().d_model, rng, 0.5);
  const LossGrad g = m->grad_wrt_injection(seq, tiny_dataset().scenes, 0, pos, v, seq.gold_token);
  for (int c = 0; c < 16; ++c) {
    const int i = static_cast<int>(rng.uniform_int(0, m->config().d_model - 1));
    Eigen::VectorXd vp = v, vm = v;
    vp[i] += 1e-5;
    vm[i] -= 1e-5;
    const Intervention ip{InjectResidual{0, pos, vp}};
    const Intervention im{InjectResidual{0, pos, vm}};
    const double fd = (nll(final_logits(*m, seq, std::span(&ip, 1)), seq.gold_token) -
                       nll(final_logits(*m, seq, std::span(&im, 1)), seq.gold_token)) /
                      2e-5;
    CHECK(rel_err(g.grad[i], fd) < 1e-4);
  }
}

TEST_CASE("one-layer gradient matches the symbolic chain rule") {
  ModelConfig cfg = tiny_config();
  cfg.n_layers = 1;
  auto params = init_model<double>(cfg, 12);
  for (double& w : params.mutable_values()) w *= 10.0;
  const TokenSequence seq = sample_prompt(1, Relation::Above, 2);
  const TokenId target = seq.gold_token;
  Rng rng(8);
  const Eigen::VectorXd v = random_vector(cfg.d_model, rng, 0.3);

  // dL/dv through the final RMSNorm and unembedding only.
  auto oracle = [&](const ModelParams<double>& p, const Eigen::VectorXd& h) {
    const auto& L = p.layout();
    const Eigen::Map<const Eigen::VectorXd> g(p.values().data() + L.final_norm.offset, cfg.d_model);
    const Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>> wu(p.values().data() + L.unembed.offset,
                                                                              cfg.d_model, kVocabSize);
    const Eigen::VectorXd z = h + v;
    const double d = cfg.d_model;
    const double r = std::sqrt(z.squaredNorm() / d + 1e-5);
    const Eigen::VectorXd n = z.cwiseQuotient(Eigen::VectorXd::Constant(cfg.d_model, r)).cwiseProduct(g);
    Eigen::VectorXd dlogits = softmax(wu.transpose() * n);
    dlogits[target] -= 1.0;
    const Eigen::VectorXd gdn = (wu * dlogits).cwiseProduct(g);
    return Eigen::VectorXd(gdn / r - z * (gdn.dot(z) / (d * r * r * r)));
  };

  for (int doubled = 0; doubled < 2; ++doubled) {
    ModelParams<double> p = params;
    if (doubled) {
      const auto& L = p.layout();
      auto vals = p.mutable_values();
      for (int i = 0; i < cfg.d_model; ++i) vals[L.unembed.offset + static_cast<std::size_t>(i) * kVocabSize + target] *= 2.0;
    }
    p.freeze();
    TransformerBackbone<double> m(p);
    const ForwardOutput base = m.forward(seq, tiny_dataset().scenes, {}, TraceRequest{{seq.final_position}});
    const Eigen::VectorXd expect = oracle(p, base.trace[0].hidden[0]);
    const LossGrad g = m.grad_wrt_injection(seq, tiny_dataset().scenes, 0, seq.final_position, v, target);
    CHECK((g.grad - expect).cwiseAbs().maxCoeff() < 1e-10 * std::max(1.0, expect.cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("cached session agrees with full forwards") {
  const auto m = tiny_backbone();
  const auto& cfg = m->config();
  const TokenSequence seq = sample_prompt(4, Relation::Above, 31);
  const auto session = m->open_session(seq, tiny_dataset().scenes);
  const ForwardOutput base = m->forward(seq, tiny_dataset().scenes, {}, TraceRequest{{seq.final_position}});
  CHECK((session->baseline_logits() - base.logits.row(seq.final_position).transpose()).cwiseAbs().maxCoeff() < 1e-12);
  for (int i = 0; i < cfg.total_heads(); ++i) {
    CHECK((session->baseline_heads()[static_cast<std::size_t>(i)] - base.trace[0].heads[static_cast<std::size_t>(i)])
              .cwiseAbs()
              .maxCoeff() < 1e-12);
  }
  Rng rng(1);
  const Intervention patch{PatchHead{1, 2, seq.final_position, random_vector(cfg.d_model, rng)}};
  CHECK((session->logits_with(std::span(&patch, 1)) - final_logits(*m, seq, std::span(&patch, 1))).cwiseAbs().maxCoeff() <
        1e-12);
  const Intervention inj{InjectResidual{2, seq.final_position, random_vector(cfg.d_model, rng)}};
  CHECK((session->logits_with(std::span(&inj, 1)) - final_logits(*m, seq, std::span(&inj, 1))).cwiseAbs().maxCoeff() <
        1e-12);
  const Intervention off_final{InjectResidual{0, 3, random_vector(cfg.d_model, rng)}};
  CHECK_THROWS(session->logits_with(std::span(&off_final, 1)));
}

TEST_CASE("f32 and f64 backbones agree on trained weights") {
  const auto p = tiny_params(3, 5.0);
  const auto f32 = make_backbone(p.cast<float>(), Precision::F32);
  const auto f64 = make_backbone(p.cast<float>(), Precision::F64);
  const TokenSequence seq = sample_prompt(4, Relation::Below, 2);
  const Eigen::VectorXd a = final_logits(*f32, seq);
  const Eigen::VectorXd b = final_logits(*f64, seq);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-3 * std::max(1.0, b.cwiseAbs().maxCoeff()));
}

TEST_CASE("bad interventions and non-finite weights are reported") {
  const auto m = tiny_backbone();
  const TokenSequence seq = sample_prompt(1, Relation::Above, 3);
  const Eigen::VectorXd v = Eigen::VectorXd::Zero(m->config().d_model);
  const Intervention bad_layer{InjectResidual{3, 0, v}};
  CHECK_THROWS_AS(m->forward(seq, tiny_dataset().scenes, std::span(&bad_layer, 1)), IndexError);
  const Intervention bad_pos{InjectResidual{0, seq.size(), v}};
  CHECK_THROWS_AS(m->forward(seq, tiny_dataset().scenes, std::span(&bad_pos, 1)), IndexError);
  const Intervention bad_head{PatchHead{0, 4, 0, v}};
  CHECK_THROWS_AS(m->forward(seq, tiny_dataset().scenes, std::span(&bad_head, 1)), IndexError);
  CHECK_THROWS_AS(m->grad_wrt_injection(seq, tiny_dataset().scenes, 3, seq.final_position, v, 0), IndexError);

  auto p = init_model<double>(tiny_config(), 2);
  p.mutable_values()[p.layout().layers[1].w1.offset] = std::nan("");
  p.freeze();
  TransformerBackbone<double> nan_model(p);
  try {
    nan_model.forward(seq, tiny_dataset().scenes);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
  }
}

TEST_CASE("checkpoints round trip bit-exactly") {
  const auto params = tiny_params(6, 3.0);
  const TokenSequence seq = sample_prompt(2, Relation::LeftOf, 5);
  SUBCASE("f64") {
    const auto path = temp_path("tiny64.fvlb");
    save_checkpoint(params, path);
    const LoadedCheckpoint ck = load_checkpoint(path);
    CHECK(ck.checksum() == params.checksum());
    CHECK(ck.config() == params.config());
    CHECK(std::get<ModelParams<double>>(ck.params).training_seed() == params.training_seed());
    TransformerBackbone<double> before(params);
    CHECK(final_logits(*ck.backbone(Precision::F64), seq) == final_logits(before, seq));
  }
  SUBCASE("f32") {
    const auto p32 = params.cast<float>();
    const auto path = temp_path("tiny32.fvlb");
    save_checkpoint(p32, path);
    CHECK(load_checkpoint(path).checksum() == p32.checksum());
  }
  SUBCASE("corrupt headers") {
    const auto path = temp_path("corrupt.fvlb");
    save_checkpoint(params, path);
    std::string bytes;
    {
      std::ifstream in(path, std::ios::binary);
      bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    auto write = [&](const std::string& b) {
      std::ofstream out(path, std::ios::binary | std::ios::trunc);
      out << b;
    };
    std::string version = bytes;
    version[4] = 9;
    write(version);
    CHECK_THROWS_AS(load_checkpoint(path), VersionMismatch);
    std::string wide = bytes;
    wide[6] = static_cast<char>(64);  // d_model field, first byte
    write(wide);
    CHECK_THROWS(load_checkpoint(path));
    write(bytes.substr(0, bytes.size() - 9));
    CHECK_THROWS_AS(load_checkpoint(path), ParseError);
  }
}

TEST_CASE("batch loss gradient matches finite differences") {
  auto params = init_model<double>(tiny_config(), 9);
  for (double& w : params.mutable_values()) w *= 5.0;
  std::vector<TokenSequence> batch{sample_prompt(2, Relation::Above, 1), sample_prompt(1, Relation::Below, 2)};
  std::vector<double> grad(params.values().size());
  const BatchLoss bl = batch_loss<double>(params, batch, tiny_dataset().scenes, grad);
  CHECK(bl.scored == 5);
  // Oracle loss: mean NLL over scored positions from independent forwards.
  {
    auto frozen = params;
    frozen.freeze();
    TransformerBackbone<double> m(frozen);
    double sum = 0.0;
    int n = 0;
    for (const auto& seq : batch) {
      const auto logits = m.forward(seq, tiny_dataset().scenes).logits;
      for (auto [pos, tgt] : scored_targets(seq)) {
        sum += nll(logits.row(pos).transpose(), tgt);
        ++n;
      }
    }
    CHECK(std::abs(bl.loss - sum / n) < 1e-10);
  }
  Rng rng(4);
  const auto& L = params.layout();
  const std::vector<const TensorSlot*> slots{&L.tok_emb, &L.obj_emb, &L.bin_emb, &L.pos_emb, &L.layers[0].wq,
                                             &L.layers[1].wk, &L.layers[2].wv, &L.layers[0].wo, &L.layers[1].w1,
                                             &L.layers[2].b2, &L.layers[0].attn_norm, &L.final_norm, &L.unembed};
  for (const TensorSlot* s : slots) {
    for (int trial = 0; trial < 3; ++trial) {
      std::size_t i = s->offset + static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(s->size()) - 1));
      const double g = grad[i];
      const double h = 1e-5;
      auto vals = params.mutable_values();
      const double keep = vals[i];
      vals[i] = keep + h;
      const double lp = batch_loss<double>(params, batch, tiny_dataset().scenes).loss;
      vals[i] = keep - h;
      const double lm = batch_loss<double>(params, batch, tiny_dataset().scenes).loss;
      vals[i] = keep;
      const double fd = (lp - lm) / (2 * h);
      if (std::abs(fd) < 1e-9 && std::abs(g) < 1e-9) continue;  // unused embedding rows
      CHECK(rel_err(g, fd) < 1e-4);
    }
  }
}
