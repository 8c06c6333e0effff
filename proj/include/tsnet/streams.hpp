#pragma once

#include <array>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "tsnet/tensor.hpp"
#include "tsnet/util.hpp"

namespace tsnet {

enum class StreamKind { spatial, temporal, audio };

inline const char* stream_name(StreamKind k) {
  switch (k) {
    case StreamKind::spatial: return "spatial";
    case StreamKind::temporal: return "temporal";
    default: return "audio";
  }
}

/// One ingested item: ordered frames (CHW, pixels in [0,1]), per-window audio
/// feature vectors, and its label set.
struct VideoClip {
  std::vector<Tensor> frames;
  std::vector<Tensor> audio;
  std::set<int> labels;
  std::string clip_id;

  static constexpr size_t kMaxFrames = 300;

  void validate() const {
    if (frames.empty() || frames.size() > kMaxFrames) {
      throw InputError("clip '" + clip_id + "' has " + std::to_string(frames.size()) +
                       " frames; expected 1.." + std::to_string(kMaxFrames));
    }
    for (const Tensor& f : frames) {
      if (f.dims != frames.front().dims) {
        throw DimensionError("clip '" + clip_id + "' mixes frame shapes " +
                             shape_str(frames.front().dims) + " and " + shape_str(f.dims));
      }
    }
    for (const Tensor& a : audio) {
      if (a.dims != audio.front().dims) {
        throw DimensionError("clip '" + clip_id + "' mixes audio vector lengths");
      }
    }
  }
};

struct StreamEmbedding {
  Tensor vec;
  StreamKind stream;
};

struct SamplerConfig {
  size_t sample_count = 30;
  size_t stride = 10;
  size_t offset = 0;
};

/// Sizes shared by every stream of one model configuration.
struct ModelConfig {
  size_t classes = 10;
  size_t embed_dim = 128;   // D: common stream embedding length
  size_t feature_dim = 64;  // F: temporal/audio feature width
  size_t clusters = 8;      // K: NetVLAD cluster count
  size_t audio_dim = 16;    // A: audio feature vector length
  size_t frame_channels = 3;
  size_t frame_h = 32;
  size_t frame_w = 32;
  SamplerConfig sampler;
  std::array<size_t, 3> spatial_channels = {8, 16, 32};
  size_t temporal_pool = 4;  // average-pool window of the temporal frame encoder
  bool multilabel = false;
  bool gate_after_classifier = false;

  void validate() const {
    if (classes == 0 || embed_dim == 0 || feature_dim == 0 || clusters == 0) {
      throw ConfigError("model sizes must be positive");
    }
    if (frame_h % 8 != 0 || frame_w % 8 != 0) {
      throw ConfigError("frame dims must be divisible by 8 for the spatial encoder");
    }
    if (frame_h % temporal_pool != 0 || frame_w % temporal_pool != 0) {
      throw ConfigError("frame dims must be divisible by the temporal pool window");
    }
    if (sampler.sample_count == 0 || sampler.stride == 0) {
      throw ConfigError("sampler count and stride must be positive");
    }
  }
};

// ---------------------------------------------------------------------------
// Frame selection
// ---------------------------------------------------------------------------

/// Lower median: index floor((n-1)/2).
inline const Tensor& median_frame(const VideoClip& clip) {
  if (clip.frames.empty()) throw InputError("median_frame: clip '" + clip.clip_id + "' is empty");
  return clip.frames[(clip.frames.size() - 1) / 2];
}

/// Arithmetic-progression sample indices, clamped to the last frame when the
/// clip is shorter than the configured span.
inline std::vector<size_t> sample_indices(size_t frame_count, const SamplerConfig& cfg) {
  if (frame_count == 0) throw InputError("sample_indices: empty clip");
  std::vector<size_t> idx(cfg.sample_count);
  for (size_t i = 0; i < cfg.sample_count; ++i) {
    idx[i] = std::min(cfg.offset + i * cfg.stride, frame_count - 1);
  }
  return idx;
}

inline std::vector<Tensor> sample_frames(const VideoClip& clip, const SamplerConfig& cfg) {
  std::vector<Tensor> out;
  out.reserve(cfg.sample_count);
  for (size_t i : sample_indices(clip.frames.size(), cfg)) out.push_back(clip.frames[i]);
  return out;
}

/// Wraps a still image as a clip of `repeat` identical frames (no audio).
inline VideoClip image_as_clip(const Tensor& image, size_t repeat = 30,
                               const std::string& id = "") {
  if (repeat == 0) throw InputError("image_as_clip: repeat must be positive");
  VideoClip clip;
  clip.clip_id = id;
  clip.frames.assign(repeat, image);
  return clip;
}

// ---------------------------------------------------------------------------
// Spatial stream: 3-block convolutional encoder
// ---------------------------------------------------------------------------

struct SpatialEncoderParams {
  Tensor conv1_w, conv1_b;
  Tensor conv2_w, conv2_b;
  Tensor conv3_w, conv3_b;
  Tensor fc_w, fc_b;

  static SpatialEncoderParams init(const ModelConfig& cfg, Rng& rng) {
    const auto [c1, c2, c3] = cfg.spatial_channels;
    const size_t cin = cfg.frame_channels;
    const size_t flat = c3 * (cfg.frame_h / 8) * (cfg.frame_w / 8);
    SpatialEncoderParams p;
    // relu-feeding biases start slightly positive so no block begins dead
    p.conv1_w = Tensor::fan_in_uniform({c1, cin, 3, 3}, cin * 9, rng);
    p.conv1_b = Tensor::full({c1}, 0.01);
    p.conv2_w = Tensor::fan_in_uniform({c2, c1, 3, 3}, c1 * 9, rng);
    p.conv2_b = Tensor::full({c2}, 0.01);
    p.conv3_w = Tensor::fan_in_uniform({c3, c2, 3, 3}, c2 * 9, rng);
    p.conv3_b = Tensor::full({c3}, 0.01);
    p.fc_w = Tensor::fan_in_uniform({cfg.embed_dim, flat}, flat, rng);
    p.fc_b = Tensor::zeros({cfg.embed_dim});
    return p;
  }

  std::vector<Tensor*> params() {
    return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &conv3_w, &conv3_b, &fc_w, &fc_b};
  }
};

/// conv3x3 -> relu -> maxpool2, three blocks, then a linear map to D.
inline StreamEmbedding spatial_forward(const Tensor& frame, const SpatialEncoderParams& p) {
  if (frame.rank() != 3 || frame.dims[0] != p.conv1_w.dims[1]) {
    throw DimensionError("spatial_forward: frame " + shape_str(frame.dims) +
                         " does not match encoder input " + shape_str(p.conv1_w.dims));
  }
  Tensor x = maxpool2d(relu(channel_bias(conv2d(frame, p.conv1_w, 1, 1), p.conv1_b)), 2, 2);
  x = maxpool2d(relu(channel_bias(conv2d(x, p.conv2_w, 1, 1), p.conv2_b)), 2, 2);
  x = maxpool2d(relu(channel_bias(conv2d(x, p.conv3_w, 1, 1), p.conv3_b)), 2, 2);
  Tensor flat = reshape(x, {x.numel()});
  return {linear(flat, p.fc_w, p.fc_b), StreamKind::spatial};
}

// ---------------------------------------------------------------------------
// Slow fusion: hierarchical temporal merging
// ---------------------------------------------------------------------------

struct FusionLevel {
  size_t window = 0;
  std::vector<size_t> starts;  // group start offsets within this level's input
  Tensor w;                    // [F x window*F], shared across the level's groups
  Tensor b;                    // [F]
};

/// Merge schedule: ceil(n/3) groups of window 3 per level, start offsets
/// evenly spaced so every input position is covered; a trailing input count
/// of <= 4 merges in one final group. n=30 yields 30 -> 10 -> 4 -> 1.
inline std::vector<std::pair<size_t, std::vector<size_t>>> fusion_schedule(size_t n) {
  std::vector<std::pair<size_t, std::vector<size_t>>> levels;
  while (n > 1) {
    if (n <= 4) {
      levels.push_back({n, {0}});
      n = 1;
      continue;
    }
    const size_t groups = (n + 2) / 3;
    std::vector<size_t> starts(groups);
    for (size_t i = 0; i < groups; ++i) {
      starts[i] = static_cast<size_t>(
          std::llround(static_cast<double>(i) * static_cast<double>(n - 3) /
                       static_cast<double>(groups - 1)));
    }
    levels.push_back({3, std::move(starts)});
    n = groups;
  }
  return levels;
}

struct SlowFusionParams {
  size_t frame_count = 0;
  size_t feature_dim = 0;
  std::vector<FusionLevel> levels;

  static SlowFusionParams make(size_t frame_count, size_t feature_dim) {
    SlowFusionParams p;
    p.frame_count = frame_count;
    p.feature_dim = feature_dim;
    for (auto& [window, starts] : fusion_schedule(frame_count)) {
      FusionLevel lvl;
      lvl.window = window;
      lvl.starts = starts;
      lvl.w = Tensor::zeros({feature_dim, window * feature_dim});
      lvl.b = Tensor::zeros({feature_dim});
      p.levels.push_back(std::move(lvl));
    }
    return p;
  }

  /// Averaging initialization: each level's weight is [I/w | I/w | ... ],
  /// so identical inputs pass through unchanged.
  static SlowFusionParams averaging(size_t frame_count, size_t feature_dim) {
    SlowFusionParams p = make(frame_count, feature_dim);
    for (FusionLevel& lvl : p.levels) {
      const double inv = 1.0 / static_cast<double>(lvl.window);
      for (size_t g = 0; g < lvl.window; ++g)
        for (size_t i = 0; i < feature_dim; ++i)
          lvl.w.at(i, g * feature_dim + i) = inv;
    }
    return p;
  }

  /// Averaging plus small seeded jitter; the training starting point.
  static SlowFusionParams init(size_t frame_count, size_t feature_dim, Rng& rng) {
    SlowFusionParams p = averaging(frame_count, feature_dim);
    for (FusionLevel& lvl : p.levels) {
      const double b = 0.3 / std::sqrt(static_cast<double>(lvl.window * feature_dim));
      for (double& v : lvl.w.data) v += rng.uniform(-b, b);
    }
    return p;
  }

  std::vector<Tensor*> params() {
    std::vector<Tensor*> out;
    for (FusionLevel& lvl : levels) {
      out.push_back(&lvl.w);
      out.push_back(&lvl.b);
    }
    return out;
  }
};

/// Merges per-frame feature vectors through the level schedule into one
/// fused vector; every input frame contributes to the output.
inline Tensor slow_fusion(const std::vector<Tensor>& frames, const SlowFusionParams& p) {
  if (frames.size() != p.frame_count) {
    throw DimensionError("slow_fusion: got " + std::to_string(frames.size()) +
                         " frames, configured for " + std::to_string(p.frame_count));
  }
  for (const Tensor& f : frames) {
    if (f.rank() != 1 || f.dims[0] != p.feature_dim) {
      throw DimensionError("slow_fusion: frame feature " + shape_str(f.dims) + ", expected [" +
                           std::to_string(p.feature_dim) + "]");
    }
  }
  std::vector<Tensor> cur = frames;
  for (const FusionLevel& lvl : p.levels) {
    std::vector<Tensor> next;
    next.reserve(lvl.starts.size());
    for (size_t s : lvl.starts) {
      std::vector<Tensor> group(cur.begin() + s, cur.begin() + s + lvl.window);
      next.push_back(linear(concat(group), lvl.w, lvl.b));
    }
    cur = std::move(next);
  }
  return cur.front();
}

// ---------------------------------------------------------------------------
// NetVLAD: soft-assignment residual aggregation
// ---------------------------------------------------------------------------

struct NetVladParams {
  size_t clusters = 0;  // K
  Tensor centers;       // [K x F]
  Tensor assign_w;      // [K x F]
  Tensor assign_b;      // [K]

  static NetVladParams init(size_t clusters, size_t feature_dim, Rng& rng) {
    NetVladParams p;
    p.clusters = clusters;
    p.centers = Tensor::uniform({clusters, feature_dim}, rng, -1.0, 1.0);
    p.assign_w = Tensor::fan_in_uniform({clusters, feature_dim}, feature_dim, rng);
    p.assign_b = Tensor::zeros({clusters});
    return p;
  }

  std::vector<Tensor*> params() { return {&centers, &assign_w, &assign_b}; }
};

/// Pre-normalization VLAD: out(k,:) = sum_i softmax_k(w.x_i + b) * (x_i - c_k),
/// flattened cluster-major to [K*F].
inline Tensor netvlad_raw(const std::vector<Tensor>& descriptors, const NetVladParams& p) {
  if (descriptors.empty()) throw InputError("netvlad: empty descriptor list");
  const size_t K = p.clusters, F = p.centers.dims[1];
  for (const Tensor& d : descriptors) {
    if (d.rank() != 1 || d.dims[0] != F) {
      throw DimensionError("netvlad: descriptor " + shape_str(d.dims) + ", expected [" +
                           std::to_string(F) + "]");
    }
  }
  std::vector<Tensor> assigns;
  assigns.reserve(descriptors.size());
  for (const Tensor& x : descriptors) {
    assigns.push_back(softmax_lastdim(linear(x, p.assign_w, p.assign_b)));
  }
  std::vector<Tensor> cluster_sums;
  cluster_sums.reserve(K);
  for (size_t k = 0; k < K; ++k) {
    Tensor acc;
    const Tensor center_k = row(p.centers, k);
    for (size_t i = 0; i < descriptors.size(); ++i) {
      Tensor term = scale_by(sub(descriptors[i], center_k), index(assigns[i], k));
      acc = (i == 0) ? std::move(term) : add(acc, term);
    }
    cluster_sums.push_back(std::move(acc));
  }
  return concat(cluster_sums);
}

/// VLAD with intra-normalization per cluster followed by global L2.
inline Tensor netvlad(const std::vector<Tensor>& descriptors, const NetVladParams& p) {
  Tensor raw = netvlad_raw(descriptors, p);
  const size_t K = p.clusters, F = p.centers.dims[1];
  Tensor mat = reshape(raw, {K, F});
  std::vector<Tensor> normed;
  normed.reserve(K);
  for (size_t k = 0; k < K; ++k) {
    normed.push_back(l2_normalize(row(mat, k)));
  }
  return l2_normalize(concat(normed));
}

// ---------------------------------------------------------------------------
// Temporal stream
// ---------------------------------------------------------------------------

struct TemporalStreamParams {
  size_t pool = 4;      // frame encoder downsample window
  Tensor enc_w, enc_b;  // linear on the pooled, flattened frame -> F
  SlowFusionParams fusion;
  Tensor fc_w, fc_b;  // F -> F
  NetVladParams vlad;
  Tensor proj_w, proj_b;  // K*F -> D

  static TemporalStreamParams init(const ModelConfig& cfg, Rng& rng) {
    const size_t F = cfg.feature_dim;
    const size_t flat =
        cfg.frame_channels * (cfg.frame_h / cfg.temporal_pool) * (cfg.frame_w / cfg.temporal_pool);
    TemporalStreamParams p;
    p.pool = cfg.temporal_pool;
    p.enc_w = Tensor::fan_in_uniform({F, flat}, flat, rng);
    p.enc_b = Tensor::zeros({F});
    p.fusion = SlowFusionParams::init(cfg.sampler.sample_count, F, rng);
    p.fc_w = Tensor::fan_in_uniform({F, F}, F, rng);
    p.fc_b = Tensor::full({F}, 0.01);
    p.vlad = NetVladParams::init(cfg.clusters, F, rng);
    p.proj_w = Tensor::fan_in_uniform({cfg.embed_dim, cfg.clusters * F}, cfg.clusters * F, rng);
    p.proj_b = Tensor::zeros({cfg.embed_dim});
    return p;
  }

  std::vector<Tensor*> params() {
    std::vector<Tensor*> out = {&enc_w, &enc_b};
    for (Tensor* t : fusion.params()) out.push_back(t);
    out.push_back(&fc_w);
    out.push_back(&fc_b);
    for (Tensor* t : vlad.params()) out.push_back(t);
    out.push_back(&proj_w);
    out.push_back(&proj_b);
    return out;
  }

  /// Pool, center each channel, then map linearly to F. Centering cancels
  /// constant photometric shifts, so tints and brightness changes only
  /// rescale the encoding instead of displacing it.
  Tensor encode_frame(const Tensor& frame) const {
    Tensor pooled = center_channels(avgpool2d(frame, pool, pool));
    return linear(reshape(pooled, {pooled.numel()}), enc_w, enc_b);
  }
};

/// sample -> per-frame encode -> slow fusion -> fc -> NetVLAD -> projection.
inline StreamEmbedding temporal_forward(const VideoClip& clip, const SamplerConfig& cfg,
                                        const TemporalStreamParams& p) {
  std::vector<Tensor> sampled = sample_frames(clip, cfg);
  std::vector<Tensor> encoded;
  encoded.reserve(sampled.size());
  for (const Tensor& f : sampled) encoded.push_back(p.encode_frame(f));
  Tensor fused = slow_fusion(encoded, p.fusion);
  Tensor h = relu(linear(fused, p.fc_w, p.fc_b));
  Tensor v = netvlad({h}, p.vlad);
  return {linear(v, p.proj_w, p.proj_b), StreamKind::temporal};
}

// ---------------------------------------------------------------------------
// Audio stream
// ---------------------------------------------------------------------------

struct AudioStreamParams {
  size_t embed_dim = 0;
  Tensor fc_w, fc_b;  // A -> F
  NetVladParams vlad;
  Tensor proj_w, proj_b;  // K*F -> D

  static AudioStreamParams init(const ModelConfig& cfg, Rng& rng) {
    const size_t F = cfg.feature_dim;
    AudioStreamParams p;
    p.embed_dim = cfg.embed_dim;
    p.fc_w = Tensor::fan_in_uniform({F, cfg.audio_dim}, cfg.audio_dim, rng);
    p.fc_b = Tensor::full({F}, 0.01);
    p.vlad = NetVladParams::init(cfg.clusters, F, rng);
    p.proj_w = Tensor::fan_in_uniform({cfg.embed_dim, cfg.clusters * F}, cfg.clusters * F, rng);
    p.proj_b = Tensor::zeros({cfg.embed_dim});
    return p;
  }

  std::vector<Tensor*> params() {
    std::vector<Tensor*> out = {&fc_w, &fc_b};
    for (Tensor* t : vlad.params()) out.push_back(t);
    out.push_back(&proj_w);
    out.push_back(&proj_b);
    return out;
  }
};

/// Per-window fc -> NetVLAD -> projection. Empty audio yields the null
/// (all-zero) embedding so image-only inputs stay well defined.
inline StreamEmbedding audio_forward(const std::vector<Tensor>& audio,
                                     const AudioStreamParams& p) {
  if (audio.empty()) {
    return {Tensor::zeros({p.embed_dim}), StreamKind::audio};
  }
  std::vector<Tensor> encoded;
  encoded.reserve(audio.size());
  for (const Tensor& a : audio) encoded.push_back(relu(linear(a, p.fc_w, p.fc_b)));
  Tensor v = netvlad(encoded, p.vlad);
  return {linear(v, p.proj_w, p.proj_b), StreamKind::audio};
}

}  // namespace tsnet
