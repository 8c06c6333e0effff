#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "tsnet/fusion.hpp"

using namespace tsnet;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.classes = 5;
  cfg.embed_dim = 6;
  cfg.feature_dim = 4;
  cfg.clusters = 2;
  cfg.audio_dim = 3;
  cfg.frame_h = 8;
  cfg.frame_w = 8;
  cfg.spatial_channels = {2, 3, 4};
  cfg.temporal_pool = 2;
  cfg.sampler = {4, 1, 0};
  return cfg;
}

StreamEmbedding embed(StreamKind kind, Rng& rng, size_t d = 6) {
  return {Tensor::uniform({d}, rng, -1.0, 1.0), kind};
}

VideoClip random_clip(Rng& rng, size_t frames = 4, size_t audio = 3) {
  VideoClip clip;
  clip.clip_id = "clip";
  for (size_t i = 0; i < frames; ++i) clip.frames.push_back(Tensor::uniform({3, 8, 8}, rng, 0.0, 1.0));
  for (size_t i = 0; i < audio; ++i) clip.audio.push_back(Tensor::uniform({3}, rng, -1.0, 1.0));
  return clip;
}

}  // namespace

TEST_CASE("gate computation", "[fusion]") {
  ModelConfig cfg = tiny_config();
  Rng rng(71);

  SECTION("zero parameters give uniform gates") {
    GateParams p;
    p.w = Tensor::zeros({3, 18});
    p.b = Tensor::zeros({3});
    Tensor g = compute_gates(embed(StreamKind::spatial, rng), embed(StreamKind::temporal, rng),
                             embed(StreamKind::audio, rng), p);
    for (double v : g.data) REQUIRE(v == Catch::Approx(1.0 / 3.0).margin(1e-15));
  }
  SECTION("gates stay on the simplex") {
    GateParams p = GateParams::init(cfg, rng);
    for (int trial = 0; trial < 200; ++trial) {
      Tensor g = compute_gates(embed(StreamKind::spatial, rng), embed(StreamKind::temporal, rng),
                               embed(StreamKind::audio, rng), p);
      double s = 0.0;
      for (double v : g.data) {
        REQUIRE(v >= 0.0);
        s += v;
      }
      REQUIRE(std::abs(s - 1.0) <= 1e-10);
    }
  }
  SECTION("matches the direct softmax-of-linear computation") {
    GateParams p = GateParams::init(cfg, rng);
    StreamEmbedding vs = embed(StreamKind::spatial, rng);
    StreamEmbedding vt = embed(StreamKind::temporal, rng);
    StreamEmbedding va = embed(StreamKind::audio, rng);
    Tensor g = compute_gates(vs, vt, va, p);

    std::vector<double> cat;
    for (const auto* e : {&vs, &vt, &va})
      cat.insert(cat.end(), e->vec.data.begin(), e->vec.data.end());
    std::vector<double> logits(3);
    for (size_t k = 0; k < 3; ++k) {
      double acc = p.b.data[k];
      for (size_t j = 0; j < cat.size(); ++j) acc += p.w.at(k, j) * cat[j];
      logits[k] = acc;
    }
    double mx = std::max({logits[0], logits[1], logits[2]});
    double z = 0.0;
    for (double& l : logits) {
      l = std::exp(l - mx);
      z += l;
    }
    for (size_t k = 0; k < 3; ++k) REQUIRE(std::abs(g.data[k] - logits[k] / z) <= 1e-12);
  }
  SECTION("embedding length mismatch is rejected") {
    GateParams p = GateParams::init(cfg, rng);
    StreamEmbedding bad = {Tensor::zeros({4}), StreamKind::temporal};
    REQUIRE_THROWS_AS(compute_gates(embed(StreamKind::spatial, rng), bad,
                                    embed(StreamKind::audio, rng), p),
                      DimensionError);
  }
}

TEST_CASE("moe combination", "[fusion]") {
  Rng rng(72);
  StreamEmbedding vs = embed(StreamKind::spatial, rng);
  StreamEmbedding vt = embed(StreamKind::temporal, rng);
  StreamEmbedding va = embed(StreamKind::audio, rng);

  SECTION("one-hot gate selects a single stream exactly") {
    Tensor v = moe_combine(vs, vt, va, GateWeights{1.0, 0.0, 0.0});
    REQUIRE(v.data == vs.vec.data);
  }
  SECTION("equal streams are a fixed point for any simplex gate") {
    StreamEmbedding same_t = {vs.vec, StreamKind::temporal};
    StreamEmbedding same_a = {vs.vec, StreamKind::audio};
    Tensor v = moe_combine(vs, same_t, same_a, GateWeights{0.2, 0.5, 0.3});
    for (size_t i = 0; i < v.numel(); ++i) {
      REQUIRE(v.data[i] == Catch::Approx(vs.vec.data[i]).margin(1e-15));
    }
  }
  SECTION("matches the scalar-loop weighted sum") {
    for (int trial = 0; trial < 100; ++trial) {
      StreamEmbedding a = embed(StreamKind::spatial, rng);
      StreamEmbedding b = embed(StreamKind::temporal, rng);
      StreamEmbedding c = embed(StreamKind::audio, rng);
      double g1 = rng.uniform(), g2 = rng.uniform() * (1.0 - g1);
      GateWeights g{g1, g2, 1.0 - g1 - g2};
      Tensor v = moe_combine(a, b, c, g);
      for (size_t i = 0; i < v.numel(); ++i) {
        double expect = a.vec.data[i] * g.spatial + b.vec.data[i] * g.temporal +
                        c.vec.data[i] * g.audio;
        REQUIRE(std::abs(v.data[i] - expect) <= 1e-12);
      }
    }
  }
  SECTION("length mismatch is rejected") {
    StreamEmbedding bad = {Tensor::zeros({3}), StreamKind::audio};
    REQUIRE_THROWS_AS(moe_combine(vs, vt, bad, GateWeights{1, 0, 0}), DimensionError);
  }
}

TEST_CASE("context gating", "[fusion]") {
  Rng rng(73);
  Tensor v = Tensor::uniform({6}, rng, -2.0, 2.0);

  SECTION("zero parameters halve the vector") {
    ContextGateParams p;
    p.w = Tensor::zeros({6, 6});
    p.b = Tensor::zeros({6});
    Tensor out = context_gate(v, p);
    for (size_t i = 0; i < 6; ++i) REQUIRE(out.data[i] == 0.5 * v.data[i]);
  }
  SECTION("saturated gate passes the vector through") {
    ContextGateParams p;
    p.w = Tensor::zeros({6, 6});
    p.b = Tensor::full({6}, 50.0);
    Tensor out = context_gate(v, p);
    for (size_t i = 0; i < 6; ++i) REQUIRE(std::abs(out.data[i] - v.data[i]) <= 1e-12);
  }
  SECTION("matches the direct elementwise formula") {
    ContextGateParams p = ContextGateParams::init(6, rng);
    Tensor out = context_gate(v, p);
    for (size_t i = 0; i < 6; ++i) {
      double z = p.b.data[i];
      for (size_t j = 0; j < 6; ++j) z += p.w.at(i, j) * v.data[j];
      double expect = v.data[i] / (1.0 + std::exp(-z));
      REQUIRE(std::abs(out.data[i] - expect) <= 1e-12);
    }
  }
  SECTION("output is elementwise bounded by the input") {
    ContextGateParams p = ContextGateParams::init(6, rng);
    for (int trial = 0; trial < 100; ++trial) {
      Tensor x = Tensor::uniform({6}, rng, -3.0, 3.0);
      Tensor out = context_gate(x, p);
      for (size_t i = 0; i < 6; ++i) REQUIRE(std::abs(out.data[i]) <= std::abs(x.data[i]));
    }
  }
}

TEST_CASE("classification output contract", "[fusion]") {
  SECTION("top_k clamps to the class count") {
    Tensor logits({5}, {0.1, 0.4, -0.2, 0.9, 0.0});
    PredictionSet ps = prediction_from_logits(logits, true, 20, "x");
    REQUIRE(ps.pairs.size() == 5);
  }
  SECTION("zero logits in sigmoid mode give 0.5 everywhere with id tie-break") {
    Tensor logits = Tensor::zeros({5});
    PredictionSet ps = prediction_from_logits(logits, true, 20, "x");
    for (size_t i = 0; i < 5; ++i) {
      REQUIRE(ps.pairs[i].first == static_cast<int>(i));
      REQUIRE(ps.pairs[i].second == 0.5);
    }
  }
  SECTION("single-label confidences sum to 1") {
    Rng rng(74);
    Tensor logits = Tensor::uniform({7}, rng, -3.0, 3.0);
    PredictionSet ps = prediction_from_logits(logits, false, 7, "x");
    double s = 0.0;
    for (auto& [cls, conf] : ps.pairs) s += conf;
    REQUIRE(std::abs(s - 1.0) <= 1e-12);
  }
  SECTION("pairs are sorted and capped at 20") {
    Rng rng(75);
    Tensor logits = Tensor::uniform({30}, rng, -1.0, 1.0);
    PredictionSet ps = prediction_from_logits(logits, true, 30, "x");
    REQUIRE(ps.pairs.size() == 20);
    for (size_t i = 1; i < ps.pairs.size(); ++i) {
      REQUIRE(ps.pairs[i - 1].second >= ps.pairs[i].second);
    }
  }
  SECTION("line serialization uses 6 decimals and round-trips") {
    PredictionSet ps;
    ps.item_id = "clip_7";
    ps.pairs = {{3, 0.875}, {1, 0.25}, {0, 0.0625}};
    REQUIRE(ps.to_line() == "clip_7,3:0.875000,1:0.250000,0:0.062500");
    PredictionSet back = PredictionSet::from_line(ps.to_line());
    REQUIRE(back.item_id == "clip_7");
    REQUIRE(back.pairs.size() == 3);
    REQUIRE(back.pairs[0].first == 3);
    REQUIRE(back.pairs[0].second == Catch::Approx(0.875));
  }
}

TEST_CASE("full model forward", "[fusion]") {
  ModelConfig cfg = tiny_config();
  ThreeStreamModel model = ThreeStreamModel::init(cfg, 2024);
  Rng rng(76);
  VideoClip clip = random_clip(rng);

  SECTION("spatial_only equals the explicit composition") {
    Tensor logits = model.forward_logits(clip, FusionMode::spatial_only);
    StreamEmbedding vs = spatial_forward(median_frame(clip), model.spatial);
    Tensor manual = linear(context_gate(vs.vec, model.context), model.classifier.w,
                           model.classifier.b);
    REQUIRE(logits.data == manual.data);
  }
  SECTION("two-stream gates sum to 1") {
    GateWeights g = model.gates_for(clip, FusionMode::two_stream);
    REQUIRE(g.audio == 0.0);
    REQUIRE(std::abs(g.spatial + g.temporal - 1.0) <= 1e-10);
  }
  SECTION("three-stream gates sum to 1") {
    GateWeights g = model.gates_for(clip, FusionMode::three_stream);
    REQUIRE(std::abs(g.spatial + g.temporal + g.audio - 1.0) <= 1e-10);
  }
  SECTION("forcing a one-hot gate reproduces the single-stream path") {
    // exact one-hot via plain weights
    StreamEmbedding vs = spatial_forward(median_frame(clip), model.spatial);
    StreamEmbedding vt = temporal_forward(clip, cfg.sampler, model.temporal);
    StreamEmbedding va = audio_forward(clip.audio, model.audio);
    for (int hot = 0; hot < 3; ++hot) {
      GateWeights g{hot == 0 ? 1.0 : 0.0, hot == 1 ? 1.0 : 0.0, hot == 2 ? 1.0 : 0.0};
      Tensor fused = moe_combine(vs, vt, va, g);
      Tensor manual = linear(context_gate(fused, model.context), model.classifier.w,
                             model.classifier.b);
      const Tensor& pick = hot == 0 ? vs.vec : (hot == 1 ? vt.vec : va.vec);
      Tensor single = linear(context_gate(pick, model.context), model.classifier.w,
                             model.classifier.b);
      for (size_t i = 0; i < manual.numel(); ++i) {
        REQUIRE(std::abs(manual.data[i] - single.data[i]) <= 1e-12);
      }
    }

    // softmax forcing via a large gate bias
    ThreeStreamModel forced = model;
    forced.gates.w = Tensor::zeros({3, 3 * cfg.embed_dim});
    forced.gates.b = Tensor({3}, {500.0, 0.0, 0.0});
    Tensor logits = forced.forward_logits(clip, FusionMode::three_stream);
    Tensor single = forced.forward_logits(clip, FusionMode::spatial_only);
    for (size_t i = 0; i < logits.numel(); ++i) {
      REQUIRE(std::abs(logits.data[i] - single.data[i]) <= 1e-12);
    }
  }
  SECTION("three-stream works without audio via the null embedding") {
    VideoClip silent = clip;
    silent.audio.clear();
    Tensor logits = model.forward_logits(silent, FusionMode::three_stream);
    REQUIRE(logits.numel() == cfg.classes);
    for (double v : logits.data) REQUIRE(std::isfinite(v));
  }
  SECTION("gate-after-classifier flag changes the composition point") {
    ModelConfig alt = cfg;
    alt.gate_after_classifier = true;
    ThreeStreamModel m2 = ThreeStreamModel::init(alt, 2024);
    Tensor logits = m2.forward_logits(clip, FusionMode::spatial_only);
    StreamEmbedding vs = spatial_forward(median_frame(clip), m2.spatial);
    Tensor manual = context_gate(linear(vs.vec, m2.classifier.w, m2.classifier.b), m2.context);
    REQUIRE(logits.data == manual.data);
  }
}

TEST_CASE("full model gradients match finite differences", "[fusion][grad]") {
  ModelConfig cfg = tiny_config();
  ThreeStreamModel model = ThreeStreamModel::init(cfg, 404);
  Rng rng(78);
  VideoClip clip = random_clip(rng);

  auto params = model.all_params();
  auto forward = [&]() -> double {
    Tensor logits = model.forward_logits(clip, FusionMode::three_stream);
    return softmax_cross_entropy(logits, 2).data[0];
  };

  std::vector<Tensor> analytic;
  {
    Tape tape;
    TapeScope scope(tape, params);
    Tensor loss = softmax_cross_entropy(model.forward_logits(clip, FusionMode::three_stream), 2);
    Gradients g = tape.backward(loss);
    for (Tensor* p : params) analytic.push_back(g.grad_of(*p));
  }

  auto fd = oracle::finite_difference(params, forward);
  for (size_t k = 0; k < params.size(); ++k) {
    for (size_t i = 0; i < params[k]->numel(); ++i) {
      INFO("param " << k << " element " << i);
      REQUIRE(oracle::rel_err(analytic[k].data[i], fd[k][i]) <= 1e-4);
    }
  }
}
