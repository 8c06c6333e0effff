#pragma once

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "tsnet/streams.hpp"
#include "tsnet/tensor.hpp"

namespace tsnet {

enum class FusionMode { spatial_only, two_stream, three_stream };

inline const char* mode_name(FusionMode m) {
  switch (m) {
    case FusionMode::spatial_only: return "spatial_only";
    case FusionMode::two_stream: return "two_stream";
    default: return "three_stream";
  }
}

inline FusionMode mode_from_name(const std::string& s) {
  if (s == "spatial_only") return FusionMode::spatial_only;
  if (s == "two_stream") return FusionMode::two_stream;
  if (s == "three_stream") return FusionMode::three_stream;
  throw ConfigError("unknown model mode '" + s + "'");
}

/// Convex per-stream weights; always on the simplex.
struct GateWeights {
  double spatial = 0.0;
  double temporal = 0.0;
  double audio = 0.0;
};

struct GateParams {
  Tensor w;  // [3 x 3D]
  Tensor b;  // [3]

  static GateParams init(const ModelConfig& cfg, Rng& rng) {
    GateParams p;
    p.w = Tensor::fan_in_uniform({3, 3 * cfg.embed_dim}, 3 * cfg.embed_dim, rng);
    p.b = Tensor::zeros({3});
    return p;
  }
  std::vector<Tensor*> params() { return {&w, &b}; }
};

struct ContextGateParams {
  Tensor w;  // [n x n]
  Tensor b;  // [n]

  static ContextGateParams init(size_t n, Rng& rng) {
    ContextGateParams p;
    p.w = Tensor::fan_in_uniform({n, n}, n, rng);
    p.b = Tensor::zeros({n});
    return p;
  }
  std::vector<Tensor*> params() { return {&w, &b}; }
};

struct ClassifierParams {
  Tensor w;  // [C x D]
  Tensor b;  // [C]

  static ClassifierParams init(const ModelConfig& cfg, Rng& rng) {
    ClassifierParams p;
    p.w = Tensor::fan_in_uniform({cfg.classes, cfg.embed_dim}, cfg.embed_dim, rng);
    p.b = Tensor::zeros({cfg.classes});
    return p;
  }
  std::vector<Tensor*> params() { return {&w, &b}; }
};

namespace detail {
inline void require_embed_match(const StreamEmbedding& a, const StreamEmbedding& b) {
  if (a.vec.dims != b.vec.dims) {
    throw DimensionError(std::string("stream embeddings differ: ") + stream_name(a.stream) + " " +
                         shape_str(a.vec.dims) + " vs " + stream_name(b.stream) + " " +
                         shape_str(b.vec.dims));
  }
}
}  // namespace detail

/// Input-dependent gate logits: linear over the concatenated embeddings.
inline Tensor gate_logits(const StreamEmbedding& vs, const StreamEmbedding& vt,
                          const StreamEmbedding& va, const GateParams& p) {
  detail::require_embed_match(vs, vt);
  detail::require_embed_match(vs, va);
  return linear(concat(std::vector<Tensor>{vs.vec, vt.vec, va.vec}), p.w, p.b);
}

/// softmax(linear(concat(V_S, V_T, V_A))) -> weights on the 2-simplex.
inline Tensor compute_gates(const StreamEmbedding& vs, const StreamEmbedding& vt,
                            const StreamEmbedding& va, const GateParams& p) {
  return softmax_lastdim(gate_logits(vs, vt, va, p));
}

/// Two-stream ablation: the audio logit is removed before normalization, so
/// the spatial/temporal weights still sum to 1.
inline Tensor compute_gates_two(const StreamEmbedding& vs, const StreamEmbedding& vt,
                                const StreamEmbedding& va, const GateParams& p) {
  Tensor logits = gate_logits(vs, vt, va, p);
  return softmax_lastdim(concat(std::vector<Tensor>{index(logits, 0), index(logits, 1)}));
}

inline GateWeights gate_weights(const Tensor& gates) {
  GateWeights g;
  g.spatial = gates.data[0];
  g.temporal = gates.numel() > 1 ? gates.data[1] : 0.0;
  g.audio = gates.numel() > 2 ? gates.data[2] : 0.0;
  return g;
}

/// V = V_S g_S + V_T g_T + V_A g_A with graph-carried gates.
inline Tensor moe_combine(const StreamEmbedding& vs, const StreamEmbedding& vt,
                          const StreamEmbedding& va, const Tensor& gates) {
  detail::require_embed_match(vs, vt);
  detail::require_embed_match(vs, va);
  if (gates.numel() != 3) {
    throw DimensionError("moe_combine expects 3 gates, got " + shape_str(gates.dims));
  }
  return add(add(scale_by(vs.vec, index(gates, 0)), scale_by(vt.vec, index(gates, 1))),
             scale_by(va.vec, index(gates, 2)));
}

/// Same combination from plain gate weights (no gradient through the gates).
inline Tensor moe_combine(const StreamEmbedding& vs, const StreamEmbedding& vt,
                          const StreamEmbedding& va, const GateWeights& g) {
  detail::require_embed_match(vs, vt);
  detail::require_embed_match(vs, va);
  return add(add(scale(vs.vec, g.spatial), scale(vt.vec, g.temporal)), scale(va.vec, g.audio));
}

/// Elementwise self-gating: out = sigmoid(W.V + b) * V.
inline Tensor context_gate(const Tensor& v, const ContextGateParams& p) {
  if (p.w.dims[1] != v.numel()) {
    throw DimensionError("context_gate: vector " + shape_str(v.dims) + " vs weight " +
                         shape_str(p.w.dims));
  }
  return mul(sigmoid(linear(v, p.w, p.b)), v);
}

// ---------------------------------------------------------------------------
// Predictions
// ---------------------------------------------------------------------------

/// Up to 20 (class id, confidence) pairs, confidence-descending; ties broken
/// by ascending class id.
struct PredictionSet {
  std::string item_id;
  std::vector<std::pair<int, double>> pairs;

  static constexpr size_t kMaxPairs = 20;

  std::string to_line() const {
    std::string out = item_id;
    char buf[64];
    for (const auto& [cls, conf] : pairs) {
      std::snprintf(buf, sizeof(buf), ",%d:%.6f", cls, conf);
      out += buf;
    }
    return out;
  }

  static PredictionSet from_line(const std::string& line) {
    PredictionSet ps;
    size_t pos = line.find(',');
    if (pos == std::string::npos) {
      ps.item_id = line;
      return ps;
    }
    ps.item_id = line.substr(0, pos);
    size_t start = pos + 1;
    while (start <= line.size()) {
      size_t end = line.find(',', start);
      std::string field = line.substr(start, end == std::string::npos ? end : end - start);
      size_t colon = field.find(':');
      if (colon == std::string::npos) {
        throw FormatError("prediction field '" + field + "' missing ':'", start);
      }
      ps.pairs.emplace_back(std::stoi(field.substr(0, colon)), std::stod(field.substr(colon + 1)));
      if (end == std::string::npos) break;
      start = end + 1;
    }
    return ps;
  }
};

/// Ranks per-class confidences into a PredictionSet. Multi-label mode applies
/// a per-class sigmoid; single-label mode a softmax over all classes.
inline PredictionSet prediction_from_logits(const Tensor& logits, bool multilabel, size_t top_k,
                                            const std::string& item_id) {
  const size_t c = logits.numel();
  if (top_k > c) {
    std::cerr << "tsnet: top_k " << top_k << " clamped to class count " << c << "\n";
    top_k = c;
  }
  top_k = std::min(top_k, PredictionSet::kMaxPairs);
  std::vector<double> conf(c);
  if (multilabel) {
    for (size_t i = 0; i < c; ++i) {
      const double l = logits.data[i];
      conf[i] = l >= 0.0 ? 1.0 / (1.0 + std::exp(-l)) : std::exp(l) / (1.0 + std::exp(l));
    }
  } else {
    double mx = logits.data[0];
    for (size_t i = 1; i < c; ++i) mx = std::max(mx, logits.data[i]);
    double z = 0.0;
    for (size_t i = 0; i < c; ++i) {
      conf[i] = std::exp(logits.data[i] - mx);
      z += conf[i];
    }
    for (double& v : conf) v /= z;
  }
  std::vector<int> order(c);
  for (size_t i = 0; i < c; ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (conf[static_cast<size_t>(a)] != conf[static_cast<size_t>(b)]) {
      return conf[static_cast<size_t>(a)] > conf[static_cast<size_t>(b)];
    }
    return a < b;
  });
  PredictionSet ps;
  ps.item_id = item_id;
  for (size_t i = 0; i < top_k; ++i) {
    ps.pairs.emplace_back(order[i], conf[static_cast<size_t>(order[i])]);
  }
  return ps;
}

inline PredictionSet classify(const Tensor& fused, const ClassifierParams& p, bool multilabel,
                              size_t top_k = 20, const std::string& item_id = "") {
  return prediction_from_logits(linear(fused, p.w, p.b), multilabel, top_k, item_id);
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

/// Three-stream classifier with MoE gating and context gating. The mode
/// selects which streams participate; gates always stay on the simplex.
struct ThreeStreamModel {
  ModelConfig cfg;
  SpatialEncoderParams spatial;
  TemporalStreamParams temporal;
  AudioStreamParams audio;
  GateParams gates;
  ContextGateParams context;
  ClassifierParams classifier;

  static ThreeStreamModel init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    ThreeStreamModel m;
    m.cfg = cfg;
    m.spatial = SpatialEncoderParams::init(cfg, rng);
    m.temporal = TemporalStreamParams::init(cfg, rng);
    m.audio = AudioStreamParams::init(cfg, rng);
    m.gates = GateParams::init(cfg, rng);
    m.context =
        ContextGateParams::init(cfg.gate_after_classifier ? cfg.classes : cfg.embed_dim, rng);
    m.classifier = ClassifierParams::init(cfg, rng);
    return m;
  }

  /// Fixed parameter order; checkpoints and optimizers rely on it.
  std::vector<Tensor*> all_params() {
    std::vector<Tensor*> out;
    for (Tensor* t : spatial.params()) out.push_back(t);
    for (Tensor* t : temporal.params()) out.push_back(t);
    for (Tensor* t : audio.params()) out.push_back(t);
    for (Tensor* t : gates.params()) out.push_back(t);
    for (Tensor* t : context.params()) out.push_back(t);
    for (Tensor* t : classifier.params()) out.push_back(t);
    return out;
  }

  /// Class logits for one clip. Records on whatever tape the parameters are
  /// watched by; pure evaluation otherwise.
  Tensor forward_logits(const VideoClip& clip, FusionMode mode) const {
    if (mode == FusionMode::spatial_only) {
      return forward_logits_stream(clip, StreamKind::spatial);
    }
    StreamEmbedding vs = spatial_forward(median_frame(clip), spatial);
    StreamEmbedding vt = temporal_forward(clip, cfg.sampler, temporal);
    StreamEmbedding va = mode == FusionMode::three_stream
                             ? audio_forward(clip.audio, audio)
                             : StreamEmbedding{Tensor::zeros({cfg.embed_dim}), StreamKind::audio};
    Tensor fused;
    if (mode == FusionMode::two_stream) {
      Tensor g2 = compute_gates_two(vs, vt, va, gates);
      fused = add(scale_by(vs.vec, index(g2, 0)), scale_by(vt.vec, index(g2, 1)));
    } else {
      fused = moe_combine(vs, vt, va, compute_gates(vs, vt, va, gates));
    }
    return logits_from(fused);
  }

  /// Shared tail: context gating and the classifier layer over a fused (or
  /// single-stream) vector, in the configured order.
  Tensor logits_from(const Tensor& v) const {
    if (cfg.gate_after_classifier) {
      return context_gate(linear(v, classifier.w, classifier.b), context);
    }
    return linear(context_gate(v, context), classifier.w, classifier.b);
  }

  Tensor stream_embedding(const VideoClip& clip, StreamKind kind) const {
    switch (kind) {
      case StreamKind::spatial: return spatial_forward(median_frame(clip), spatial).vec;
      case StreamKind::temporal: return temporal_forward(clip, cfg.sampler, temporal).vec;
      default: return audio_forward(clip.audio, audio).vec;
    }
  }

  /// Single-stream pipeline: V = V_X -> context gate -> classifier. Matches
  /// the full forward with a one-hot gate on stream X.
  Tensor forward_logits_stream(const VideoClip& clip, StreamKind kind) const {
    return logits_from(stream_embedding(clip, kind));
  }

  /// Gate values actually used for a clip in the given mode (diagnostics).
  GateWeights gates_for(const VideoClip& clip, FusionMode mode) const {
    if (mode == FusionMode::spatial_only) return {1.0, 0.0, 0.0};
    StreamEmbedding vs = spatial_forward(median_frame(clip), spatial);
    StreamEmbedding vt = temporal_forward(clip, cfg.sampler, temporal);
    StreamEmbedding va = mode == FusionMode::three_stream
                             ? audio_forward(clip.audio, audio)
                             : StreamEmbedding{Tensor::zeros({cfg.embed_dim}), StreamKind::audio};
    if (mode == FusionMode::two_stream) {
      Tensor g2 = compute_gates_two(vs, vt, va, gates);
      return {g2.data[0], g2.data[1], 0.0};
    }
    return gate_weights(compute_gates(vs, vt, va, gates));
  }

  PredictionSet predict(const VideoClip& clip, FusionMode mode, size_t top_k = 20) const {
    return prediction_from_logits(forward_logits(clip, mode), cfg.multilabel, top_k, clip.clip_id);
  }
};

}  // namespace tsnet
