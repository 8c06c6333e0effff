#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "tsnet/fusion.hpp"
#include "tsnet/metrics.hpp"
#include "tsnet/perturb.hpp"
#include "tsnet/synthdata.hpp"

namespace tsnet {

struct TrainingError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct TrainingOptions {
  size_t epochs = 40;
  size_t batch = 16;
  size_t patience = 5;
  size_t pretrain_epochs = 5;
  // Weight of the per-stream auxiliary losses during joint training; keeps
  // each expert calibrated against the shared classifier so the gate has
  // real alternatives to weigh.
  double aux_weight = 0.3;
};

struct SeedSet {
  uint64_t data = 1;
  uint64_t init = 2;
  uint64_t perturb = 3;
};

/// Everything one run needs; loads from a JSON file whose unknown keys are
/// rejected so typos cannot silently fall back to defaults.
struct ExperimentConfig {
  FusionMode mode = FusionMode::two_stream;
  ModelConfig model;
  AdamConfig optimizer;
  TrainingOptions training;
  SeedSet seeds;
  GenerateOptions data;
  std::string table = "video";
  std::vector<std::pair<std::string, double>> table_rows;  // overrides `table` when nonempty
  PerturbOptions perturb_opts;
  size_t metric_k = 20;

  /// The active perturbation table: custom rows when given, else the named one.
  PerturbationTable perturbation_table() const {
    if (table_rows.empty()) return table_by_name(table);
    PerturbationTable t;
    for (const auto& [kind, prob] : table_rows) t.rows.emplace_back(perturb_from_name(kind), prob);
    t.validate();
    return t;
  }

  void validate() const {
    model.validate();
    data.validate();
    perturbation_table();
    if (metric_k == 0) throw ConfigError("metric_k must be positive");
    if (training.batch == 0) throw ConfigError("batch size must be positive");
  }

  nlohmann::json to_json() const {
    return {
        {"mode", mode_name(mode)},
        {"model",
         {{"classes", model.classes},
          {"embed_dim", model.embed_dim},
          {"feature_dim", model.feature_dim},
          {"clusters", model.clusters},
          {"audio_dim", model.audio_dim},
          {"frame_h", model.frame_h},
          {"frame_w", model.frame_w},
          {"spatial_channels", model.spatial_channels},
          {"temporal_pool", model.temporal_pool},
          {"multilabel", model.multilabel},
          {"gate_after_classifier", model.gate_after_classifier}}},
        {"sampler",
         {{"count", model.sampler.sample_count},
          {"stride", model.sampler.stride},
          {"offset", model.sampler.offset}}},
        {"optimizer",
         {{"lr", optimizer.lr},
          {"beta1", optimizer.beta1},
          {"beta2", optimizer.beta2},
          {"eps", optimizer.eps}}},
        {"training",
         {{"epochs", training.epochs},
          {"batch", training.batch},
          {"patience", training.patience},
          {"pretrain_epochs", training.pretrain_epochs},
          {"aux_weight", training.aux_weight}}},
        {"seeds", {{"data", seeds.data}, {"init", seeds.init}, {"perturb", seeds.perturb}}},
        {"data",
         {{"clips_per_class", data.clips_per_class},
          {"frames", data.frames},
          {"height", data.height},
          {"width", data.width},
          {"audio_windows", data.audio_windows},
          {"audio_dim", data.audio_dim},
          {"train_ratio", data.train_ratio},
          {"val_ratio", data.val_ratio},
          {"test_ratio", data.test_ratio}}},
        {"perturbation",
         [&] {
           nlohmann::json p = {{"table", table},
                               {"brightness_factor", perturb_opts.brightness_factor},
                               {"scale", perturb_opts.scale},
                               {"filter_alpha", perturb_opts.filter_alpha}};
           if (!table_rows.empty()) {
             p["rows"] = nlohmann::json::array();
             for (const auto& [kind, prob] : table_rows) {
               p["rows"].push_back({{"kind", kind}, {"probability", prob}});
             }
           }
           return p;
         }()},
        {"metric_k", metric_k},
    };
  }

  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path.string() + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return from_json(j);
  }

  /// Stable hash of the canonical serialized form; stamped on every CSV row.
  std::string hash() const {
    const uint64_t h = fnv1a64(to_json().dump());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }
};

namespace detail {

inline void require_known_keys(const nlohmann::json& j, const char* where,
                               std::initializer_list<const char*> allowed) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) {
      if (it.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      throw ConfigError("unknown config key '" + it.key() + "' in " + where);
    }
  }
}

template <class T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  detail::require_known_keys(j, "config root",
                             {"mode", "model", "sampler", "optimizer", "training", "seeds", "data",
                              "perturbation", "metric_k"});
  if (j.contains("mode")) cfg.mode = mode_from_name(j.at("mode").get<std::string>());
  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::require_known_keys(m, "model",
                               {"classes", "embed_dim", "feature_dim", "clusters", "audio_dim",
                                "frame_h", "frame_w", "spatial_channels", "temporal_pool",
                                "multilabel", "gate_after_classifier"});
    detail::maybe(m, "classes", cfg.model.classes);
    detail::maybe(m, "embed_dim", cfg.model.embed_dim);
    detail::maybe(m, "feature_dim", cfg.model.feature_dim);
    detail::maybe(m, "clusters", cfg.model.clusters);
    detail::maybe(m, "audio_dim", cfg.model.audio_dim);
    detail::maybe(m, "frame_h", cfg.model.frame_h);
    detail::maybe(m, "frame_w", cfg.model.frame_w);
    detail::maybe(m, "spatial_channels", cfg.model.spatial_channels);
    detail::maybe(m, "temporal_pool", cfg.model.temporal_pool);
    detail::maybe(m, "multilabel", cfg.model.multilabel);
    detail::maybe(m, "gate_after_classifier", cfg.model.gate_after_classifier);
  }
  if (j.contains("sampler")) {
    const auto& s = j.at("sampler");
    detail::require_known_keys(s, "sampler", {"count", "stride", "offset"});
    detail::maybe(s, "count", cfg.model.sampler.sample_count);
    detail::maybe(s, "stride", cfg.model.sampler.stride);
    detail::maybe(s, "offset", cfg.model.sampler.offset);
  }
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    detail::require_known_keys(o, "optimizer", {"lr", "beta1", "beta2", "eps"});
    detail::maybe(o, "lr", cfg.optimizer.lr);
    detail::maybe(o, "beta1", cfg.optimizer.beta1);
    detail::maybe(o, "beta2", cfg.optimizer.beta2);
    detail::maybe(o, "eps", cfg.optimizer.eps);
  }
  if (j.contains("training")) {
    const auto& t = j.at("training");
    detail::require_known_keys(
        t, "training", {"epochs", "batch", "patience", "pretrain_epochs", "aux_weight"});
    detail::maybe(t, "epochs", cfg.training.epochs);
    detail::maybe(t, "batch", cfg.training.batch);
    detail::maybe(t, "patience", cfg.training.patience);
    detail::maybe(t, "pretrain_epochs", cfg.training.pretrain_epochs);
    detail::maybe(t, "aux_weight", cfg.training.aux_weight);
  }
  if (j.contains("seeds")) {
    const auto& s = j.at("seeds");
    detail::require_known_keys(s, "seeds", {"data", "init", "perturb"});
    detail::maybe(s, "data", cfg.seeds.data);
    detail::maybe(s, "init", cfg.seeds.init);
    detail::maybe(s, "perturb", cfg.seeds.perturb);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::require_known_keys(d, "data",
                               {"clips_per_class", "frames", "height", "width", "audio_windows",
                                "audio_dim", "train_ratio", "val_ratio", "test_ratio"});
    detail::maybe(d, "clips_per_class", cfg.data.clips_per_class);
    detail::maybe(d, "frames", cfg.data.frames);
    detail::maybe(d, "height", cfg.data.height);
    detail::maybe(d, "width", cfg.data.width);
    detail::maybe(d, "audio_windows", cfg.data.audio_windows);
    detail::maybe(d, "audio_dim", cfg.data.audio_dim);
    detail::maybe(d, "train_ratio", cfg.data.train_ratio);
    detail::maybe(d, "val_ratio", cfg.data.val_ratio);
    detail::maybe(d, "test_ratio", cfg.data.test_ratio);
  }
  if (j.contains("perturbation")) {
    const auto& p = j.at("perturbation");
    detail::require_known_keys(p, "perturbation",
                               {"table", "rows", "brightness_factor", "scale", "filter_alpha"});
    detail::maybe(p, "table", cfg.table);
    if (p.contains("rows")) {
      for (const auto& row : p.at("rows")) {
        detail::require_known_keys(row, "perturbation row", {"kind", "probability"});
        cfg.table_rows.emplace_back(row.at("kind").get<std::string>(),
                                    row.at("probability").get<double>());
      }
    }
    detail::maybe(p, "brightness_factor", cfg.perturb_opts.brightness_factor);
    detail::maybe(p, "scale", cfg.perturb_opts.scale);
    detail::maybe(p, "filter_alpha", cfg.perturb_opts.filter_alpha);
  }
  detail::maybe(j, "metric_k", cfg.metric_k);
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochStats {
  std::string stage;  // pretrain | train
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct RunRecord {
  std::string config_hash;
  std::string mode;
  SeedSet seeds;
  std::vector<EpochStats> epochs;
  double wall_seconds = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const EpochStats& e : epochs) {
      arr.push_back({{"stage", e.stage},
                     {"train_loss", e.train_loss},
                     {"val_loss", e.val_loss},
                     {"val_accuracy", e.val_accuracy}});
    }
    return {{"config_hash", config_hash},
            {"mode", mode},
            {"seeds", {{"data", seeds.data}, {"init", seeds.init}, {"perturb", seeds.perturb}}},
            {"epochs", arr},
            {"wall_seconds", wall_seconds}};
  }
};

/// Which pipeline a training stage drives: the configured fusion mode, or a
/// single stream during its pretraining stage.
struct TrainPath {
  FusionMode mode = FusionMode::two_stream;
  bool single_stream = false;
  StreamKind stream = StreamKind::spatial;

  static TrainPath full(FusionMode m) { return {m, false, StreamKind::spatial}; }
  static TrainPath single(StreamKind k) { return {FusionMode::three_stream, true, k}; }
};

inline Tensor path_logits(const ThreeStreamModel& model, const VideoClip& clip,
                          const TrainPath& path) {
  return path.single_stream ? model.forward_logits_stream(clip, path.stream)
                            : model.forward_logits(clip, path.mode);
}

inline Tensor label_loss(const ThreeStreamModel& model, const Tensor& logits,
                         const VideoClip& clip) {
  if (model.cfg.multilabel) {
    std::vector<double> targets(model.cfg.classes, 0.0);
    for (int cls : clip.labels) {
      if (cls >= 0 && static_cast<size_t>(cls) < targets.size()) {
        targets[static_cast<size_t>(cls)] = 1.0;
      }
    }
    return sigmoid_bce(logits, targets);
  }
  return softmax_cross_entropy(logits, static_cast<size_t>(*clip.labels.begin()));
}

/// Training loss for one clip. Joint (full) paths add aux_weight-scaled
/// single-stream losses over the same embeddings, so every expert keeps
/// matching the shared classifier instead of ceding to the strongest one.
inline Tensor item_loss(const ThreeStreamModel& model, const VideoClip& clip,
                        const TrainPath& path, double aux_weight = 0.0) {
  if (clip.labels.empty()) throw InputError("clip '" + clip.clip_id + "' has no labels");
  if (path.single_stream || path.mode == FusionMode::spatial_only || aux_weight <= 0.0) {
    return label_loss(model, path_logits(model, clip, path), clip);
  }
  StreamEmbedding vs = {model.stream_embedding(clip, StreamKind::spatial), StreamKind::spatial};
  StreamEmbedding vt = {model.stream_embedding(clip, StreamKind::temporal), StreamKind::temporal};
  const bool three = path.mode == FusionMode::three_stream;
  StreamEmbedding va = three ? StreamEmbedding{model.stream_embedding(clip, StreamKind::audio),
                                               StreamKind::audio}
                             : StreamEmbedding{Tensor::zeros({model.cfg.embed_dim}),
                                               StreamKind::audio};
  Tensor fused;
  if (path.mode == FusionMode::two_stream) {
    Tensor g2 = compute_gates_two(vs, vt, va, model.gates);
    fused = add(scale_by(vs.vec, index(g2, 0)), scale_by(vt.vec, index(g2, 1)));
  } else {
    fused = moe_combine(vs, vt, va, compute_gates(vs, vt, va, model.gates));
  }
  Tensor loss = label_loss(model, model.logits_from(fused), clip);
  Tensor aux = add(label_loss(model, model.logits_from(vs.vec), clip),
                   label_loss(model, model.logits_from(vt.vec), clip));
  if (three && !clip.audio.empty()) {
    aux = add(aux, label_loss(model, model.logits_from(va.vec), clip));
  }
  return add(loss, scale(aux, aux_weight));
}

/// One optimizer step over a batch. Worker threads run disjoint items on
/// private model copies (independent tapes); gradients are reduced in item
/// order so results do not depend on the thread count.
inline double train_batch(ThreeStreamModel& model, std::vector<const VideoClip*> batch,
                          const TrainPath& path, AdamOptimizer& opt, double aux_weight = 0.0) {
  const size_t n = batch.size();
  if (n == 0) throw InputError("empty batch");
  auto params = model.all_params();
  std::vector<double> losses(n);
  std::vector<std::vector<std::vector<double>>> item_grads(n);

  const size_t threads = std::min(worker_count(), n);
  std::vector<std::thread> pool;
  std::exception_ptr err;
  std::mutex err_mu;
  for (size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        ThreeStreamModel local = model;
        auto local_params = local.all_params();
        for (size_t i = t; i < n; i += threads) {
          Tape tape;
          TapeScope scope(tape, local_params);
          Tensor loss = item_loss(local, *batch[i], path, aux_weight);
          losses[i] = loss.data[0];
          Gradients g = tape.backward(loss);
          auto& slot = item_grads[i];
          slot.reserve(local_params.size());
          for (Tensor* p : local_params) slot.push_back(g.at_node(p->node));
        }
      } catch (...) {
        std::lock_guard<std::mutex> lk(err_mu);
        if (!err) err = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);

  std::vector<std::vector<double>> total(params.size());
  for (size_t k = 0; k < params.size(); ++k) total[k].assign(params[k]->numel(), 0.0);
  const double inv = 1.0 / static_cast<double>(n);
  for (size_t i = 0; i < n; ++i) {
    for (size_t k = 0; k < params.size(); ++k) {
      for (size_t e = 0; e < total[k].size(); ++e) total[k][e] += item_grads[i][k][e] * inv;
    }
  }
  double mean_loss = 0.0;
  for (double l : losses) mean_loss += l * inv;
  if (!std::isfinite(mean_loss)) {
    throw TrainingError("non-finite training loss; aborting");
  }
  opt.step_raw(total);
  return mean_loss;
}

/// Mean loss over a split without recording gradients.
inline double eval_loss(const ThreeStreamModel& model, const std::vector<const VideoClip*>& clips,
                        const TrainPath& path) {
  if (clips.empty()) throw InputError("eval_loss: empty split");
  std::vector<double> losses(clips.size());
  parallel_items(clips.size(),
                 [&](size_t i) { losses[i] = item_loss(model, *clips[i], path).data[0]; });
  double acc = 0.0;
  for (double l : losses) acc += l;
  return acc / static_cast<double>(losses.size());
}

inline std::vector<PredictionSet> predict_all(const ThreeStreamModel& model,
                                              const std::vector<const VideoClip*>& clips,
                                              FusionMode mode, size_t top_k = 20) {
  top_k = std::min(top_k, model.cfg.classes);
  std::vector<PredictionSet> preds(clips.size());
  parallel_items(clips.size(), [&](size_t i) { preds[i] = model.predict(*clips[i], mode, top_k); });
  return preds;
}

inline std::vector<PredictionSet> single_stream_predictions(
    const ThreeStreamModel& model, const std::vector<const VideoClip*>& clips, StreamKind kind) {
  const size_t top_k = std::min<size_t>(PredictionSet::kMaxPairs, model.cfg.classes);
  std::vector<PredictionSet> preds(clips.size());
  parallel_items(clips.size(), [&](size_t i) {
    preds[i] = prediction_from_logits(model.forward_logits_stream(*clips[i], kind),
                                      model.cfg.multilabel, top_k, clips[i]->clip_id);
  });
  return preds;
}

inline std::vector<GroundTruth> truth_of(const std::vector<const VideoClip*>& clips) {
  std::vector<GroundTruth> truth;
  truth.reserve(clips.size());
  for (const VideoClip* c : clips) truth.push_back({c->clip_id, c->labels});
  return truth;
}

inline MetricReport evaluate_model(const ThreeStreamModel& model,
                                   const std::vector<const VideoClip*>& clips, FusionMode mode,
                                   size_t metric_k) {
  return evaluate_predictions(predict_all(model, clips, mode), truth_of(clips), metric_k);
}

namespace detail {

struct ParamSnapshot {
  std::vector<std::vector<double>> values;

  static ParamSnapshot take(std::vector<Tensor*> params) {
    ParamSnapshot s;
    s.values.reserve(params.size());
    for (Tensor* p : params) s.values.push_back(p->data);
    return s;
  }
  void restore(std::vector<Tensor*> params) const {
    for (size_t k = 0; k < params.size(); ++k) params[k]->data = values[k];
  }
};

}  // namespace detail

/// One training stage: epoch loop with seeded shuffling, early stopping on
/// validation loss, and best-epoch parameter restoration.
inline void train_stage(ThreeStreamModel& model, const std::vector<const VideoClip*>& train,
                        const std::vector<const VideoClip*>& val, const TrainPath& path,
                        const ExperimentConfig& cfg, const std::string& stage, size_t epochs,
                        RunRecord& record) {
  if (epochs == 0) return;
  if (train.empty()) throw InputError("training split is empty");
  AdamOptimizer opt(model.all_params(), cfg.optimizer);
  detail::ParamSnapshot best = detail::ParamSnapshot::take(model.all_params());
  double best_val = std::numeric_limits<double>::infinity();
  size_t since_best = 0;

  std::vector<const VideoClip*> order = train;
  for (size_t epoch = 0; epoch < epochs; ++epoch) {
    Rng shuffle_rng(stream_seed(cfg.seeds.init, stage + ":epoch" + std::to_string(epoch)));
    shuffle_rng.shuffle(order);
    double loss_acc = 0.0;
    size_t batches = 0;
    for (size_t off = 0; off < order.size(); off += cfg.training.batch) {
      const size_t end = std::min(order.size(), off + cfg.training.batch);
      std::vector<const VideoClip*> batch(order.begin() + off, order.begin() + end);
      try {
        loss_acc += train_batch(model, batch, path, opt, path.single_stream ? 0.0 : cfg.training.aux_weight);
      } catch (const TrainingError& e) {
        throw TrainingError(std::string(e.what()) + " (stage " + stage + ", epoch " +
                            std::to_string(epoch) + ", batch " + std::to_string(batches) + ")");
      }
      ++batches;
    }
    EpochStats stats;
    stats.stage = stage;
    stats.train_loss = loss_acc / static_cast<double>(batches);
    if (!val.empty()) {
      stats.val_loss = eval_loss(model, val, path);
      stats.val_accuracy =
          path.single_stream
              ? top1_accuracy(single_stream_predictions(model, val, path.stream), truth_of(val))
              : top1_accuracy(predict_all(model, val, path.mode), truth_of(val));
    }
    record.epochs.push_back(stats);

    if (!val.empty()) {
      if (stats.val_loss < best_val - 1e-9) {
        best_val = stats.val_loss;
        best = detail::ParamSnapshot::take(model.all_params());
        since_best = 0;
      } else if (++since_best >= cfg.training.patience) {
        break;
      }
    }
  }
  if (!val.empty()) best.restore(model.all_params());
}

/// Stage 1 pretrains the spatial pathway on single frames; stage 2 trains the
/// configured mode end to end. Deterministic given the config's seeds.
inline RunRecord train_model(ThreeStreamModel& model, const std::vector<const VideoClip*>& train,
                             const std::vector<const VideoClip*>& val,
                             const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  RunRecord record;
  record.config_hash = cfg.hash();
  record.mode = mode_name(cfg.mode);
  record.seeds = cfg.seeds;
  train_stage(model, train, val, TrainPath::single(StreamKind::spatial), cfg, "pretrain_spatial",
              cfg.training.pretrain_epochs, record);
  if (cfg.mode != FusionMode::spatial_only) {
    train_stage(model, train, val, TrainPath::single(StreamKind::temporal), cfg,
                "pretrain_temporal", cfg.training.pretrain_epochs, record);
    if (cfg.mode == FusionMode::three_stream) {
      train_stage(model, train, val, TrainPath::single(StreamKind::audio), cfg, "pretrain_audio",
                  cfg.training.pretrain_epochs, record);
    }
  }
  train_stage(model, train, val, TrainPath::full(cfg.mode), cfg, "train", cfg.training.epochs,
              record);
  record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return record;
}

// ---------------------------------------------------------------------------
// Checkpoints (binary, little-endian)
// ---------------------------------------------------------------------------

inline constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::filesystem::path& path, const ThreeStreamModel& model,
                            const ExperimentConfig& cfg) {
  std::string out = "TSCK";
  detail::put_u32(out, kCheckpointVersion);
  const std::string cfg_json = cfg.to_json().dump();
  detail::put_u32(out, static_cast<uint32_t>(cfg_json.size()));
  out += cfg_json;
  ThreeStreamModel& mutable_model = const_cast<ThreeStreamModel&>(model);
  auto params = mutable_model.all_params();
  detail::put_u32(out, static_cast<uint32_t>(params.size()));
  for (Tensor* p : params) {
    detail::put_u32(out, static_cast<uint32_t>(p->numel()));
    for (double v : p->data) {
      uint64_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      detail::put_u32(out, static_cast<uint32_t>(bits & 0xffffffffull));
      detail::put_u32(out, static_cast<uint32_t>(bits >> 32));
    }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write to '" + path.string() + "'");
}

struct Checkpoint {
  ExperimentConfig config;
  ThreeStreamModel model;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 4 || bytes.compare(0, 4, "TSCK") != 0) {
    throw FormatError("bad checkpoint magic, expected 'TSCK'", 0);
  }
  detail::ByteReader r{bytes, 4};
  const uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  }
  const uint32_t cfg_len = r.u32("config length");
  if (r.pos + cfg_len > bytes.size()) throw FormatError("truncated config block", r.pos);
  nlohmann::json cfg_json;
  try {
    cfg_json = nlohmann::json::parse(bytes.substr(r.pos, cfg_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config is not valid JSON: ") + e.what(), r.pos);
  }
  r.pos += cfg_len;
  Checkpoint ck{ExperimentConfig::from_json(cfg_json), {}};
  ck.model = ThreeStreamModel::init(ck.config.model, 0);
  auto params = ck.model.all_params();
  const uint32_t count = r.u32("parameter count");
  if (count != params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                          std::to_string(params.size()),
                      r.pos);
  }
  for (Tensor* p : params) {
    const uint32_t numel = r.u32("tensor length");
    if (numel != p->numel()) {
      throw FormatError("tensor length " + std::to_string(numel) + " does not match " +
                            shape_str(p->dims),
                        r.pos);
    }
    for (double& v : p->data) {
      const uint64_t lo = r.u32("tensor data");
      const uint64_t hi = r.u32("tensor data");
      const uint64_t bits = lo | (hi << 32);
      std::memcpy(&v, &bits, sizeof(v));
    }
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Evaluation results and reports
// ---------------------------------------------------------------------------

struct EvalResult {
  std::string model_mode;
  std::string dataset;
  std::string condition;  // clean | perturbed
  std::string config_hash;
  MetricReport report;

  nlohmann::json to_json() const {
    return {{"model", model_mode},
            {"dataset", dataset},
            {"condition", condition},
            {"config_hash", config_hash},
            {"metric_k", report.metric_k},
            {"metrics",
             {{"gap", report.gap}, {"map_at_k", report.map_at_k}, {"accuracy", report.accuracy}}}};
  }

  static EvalResult from_json(const nlohmann::json& j) {
    EvalResult r;
    r.model_mode = j.at("model").get<std::string>();
    r.dataset = j.at("dataset").get<std::string>();
    r.condition = j.at("condition").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.report.metric_k = j.at("metric_k").get<size_t>();
    r.report.gap = j.at("metrics").at("gap").get<double>();
    r.report.map_at_k = j.at("metrics").at("map_at_k").get<double>();
    r.report.accuracy = j.at("metrics").at("accuracy").get<double>();
    return r;
  }
};

/// metric,model,dataset,condition,value,config_hash rows with a header.
inline std::string eval_csv(const std::vector<EvalResult>& results) {
  std::string out = "metric,model,dataset,condition,value,config_hash\n";
  for (const EvalResult& r : results) {
    for (const std::string& row : metric_csv_rows(r.report, r.model_mode, r.dataset, r.condition)) {
      out += row + "," + r.config_hash + "\n";
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// SVG plots (static files; no interactive UI)
// ---------------------------------------------------------------------------

namespace detail {

inline std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

}  // namespace detail

struct BarGroup {
  std::string label;
  double clean = 0.0;
  double perturbed = 0.0;
};

/// Paired clean/perturbed bars per model, values in [0,1].
inline std::string svg_bar_chart(const std::string& title, const std::vector<BarGroup>& groups) {
  const double width = 120.0 + 140.0 * static_cast<double>(groups.size());
  const double height = 260.0, base = 210.0, scale = 160.0;
  std::ostringstream s;
  s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  s << "  <text x=\"20\" y=\"28\" font-family=\"sans-serif\" font-size=\"16\">"
    << detail::svg_escape(title) << "</text>\n";
  s << "  <line x1=\"50\" y1=\"" << base << "\" x2=\"" << (width - 20) << "\" y2=\"" << base
    << "\" stroke=\"#333\"/>\n";
  for (size_t i = 0; i < groups.size(); ++i) {
    const double x0 = 70.0 + 140.0 * static_cast<double>(i);
    const double hc = scale * std::min(1.0, std::max(0.0, groups[i].clean));
    const double hp = scale * std::min(1.0, std::max(0.0, groups[i].perturbed));
    s << "  <rect x=\"" << x0 << "\" y=\"" << (base - hc) << "\" width=\"40\" height=\"" << hc
      << "\" fill=\"#4477aa\"/>\n";
    s << "  <rect x=\"" << (x0 + 50.0) << "\" y=\"" << (base - hp) << "\" width=\"40\" height=\""
      << hp << "\" fill=\"#cc3311\"/>\n";
    s << "  <text x=\"" << x0 << "\" y=\"" << (base - hc - 6.0)
      << "\" font-family=\"sans-serif\" font-size=\"11\">" << detail::fmt2(groups[i].clean)
      << "</text>\n";
    s << "  <text x=\"" << (x0 + 50.0) << "\" y=\"" << (base - hp - 6.0)
      << "\" font-family=\"sans-serif\" font-size=\"11\">" << detail::fmt2(groups[i].perturbed)
      << "</text>\n";
    s << "  <text x=\"" << x0 << "\" y=\"" << (base + 18.0)
      << "\" font-family=\"sans-serif\" font-size=\"12\">" << detail::svg_escape(groups[i].label)
      << "</text>\n";
  }
  s << "  <rect x=\"50\" y=\"40\" width=\"12\" height=\"12\" fill=\"#4477aa\"/>\n";
  s << "  <text x=\"66\" y=\"50\" font-family=\"sans-serif\" font-size=\"11\">clean</text>\n";
  s << "  <rect x=\"120\" y=\"40\" width=\"12\" height=\"12\" fill=\"#cc3311\"/>\n";
  s << "  <text x=\"136\" y=\"50\" font-family=\"sans-serif\" font-size=\"11\">perturbed</text>\n";
  s << "</svg>\n";
  return s.str();
}

/// Simple polyline of (x, y) points with labeled x ticks.
inline std::string svg_line_plot(const std::string& title,
                                 const std::vector<std::pair<double, double>>& points) {
  const double width = 420.0, height = 280.0;
  const double x0 = 60.0, x1 = width - 30.0, y0 = height - 50.0, y1 = 50.0;
  double xmin = points.front().first, xmax = points.front().first;
  double ymin = points.front().second, ymax = points.front().second;
  for (const auto& [x, y] : points) {
    xmin = std::min(xmin, x);
    xmax = std::max(xmax, x);
    ymin = std::min(ymin, y);
    ymax = std::max(ymax, y);
  }
  if (xmax == xmin) xmax = xmin + 1.0;
  if (ymax == ymin) ymax = ymin + 1.0;
  auto px = [&](double x) { return x0 + (x - xmin) / (xmax - xmin) * (x1 - x0); };
  auto py = [&](double y) { return y0 - (y - ymin) / (ymax - ymin) * (y0 - y1); };
  std::ostringstream s;
  s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  s << "  <text x=\"20\" y=\"28\" font-family=\"sans-serif\" font-size=\"16\">"
    << detail::svg_escape(title) << "</text>\n";
  s << "  <line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1 << "\" y2=\"" << y0
    << "\" stroke=\"#333\"/>\n";
  s << "  <line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 << "\" y2=\"" << y1
    << "\" stroke=\"#333\"/>\n";
  s << "  <polyline fill=\"none\" stroke=\"#4477aa\" stroke-width=\"2\" points=\"";
  for (const auto& [x, y] : points) s << px(x) << "," << py(y) << " ";
  s << "\"/>\n";
  for (const auto& [x, y] : points) {
    s << "  <circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"3\" fill=\"#cc3311\"/>\n";
    s << "  <text x=\"" << (px(x) - 8.0) << "\" y=\"" << (y0 + 18.0)
      << "\" font-family=\"sans-serif\" font-size=\"11\">" << detail::fmt2(x) << "</text>\n";
    s << "  <text x=\"" << (px(x) + 6.0) << "\" y=\"" << (py(y) - 6.0)
      << "\" font-family=\"sans-serif\" font-size=\"10\">" << detail::fmt2(y) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

// ---------------------------------------------------------------------------
// High-level commands (shared by the CLI and the acceptance experiments)
// ---------------------------------------------------------------------------

struct SplitViews {
  std::vector<const VideoClip*> train, val, test;
};

inline SplitViews split_views(const SynthDataset& ds) {
  return {ds.split_clips("train"), ds.split_clips("val"), ds.split_clips("test")};
}

/// Perturbs a test split with the configured table; clean evaluation never
/// touches the perturbation machinery.
inline std::vector<VideoClip> perturb_split(const std::vector<const VideoClip*>& clips,
                                            const ExperimentConfig& cfg) {
  std::vector<VideoClip> copies;
  copies.reserve(clips.size());
  for (const VideoClip* c : clips) copies.push_back(*c);
  return perturb_dataset(copies, cfg.perturbation_table(), cfg.seeds.perturb, cfg.perturb_opts)
      .items;
}

struct ExperimentOutcome {
  RunRecord record;
  MetricReport clean;
  MetricReport perturbed;
  RetentionDelta drop;
};

/// Full protocol for one model: train on the dataset, evaluate the test split
/// clean and under the configured perturbation table, report drops.
inline ExperimentOutcome run_experiment(const SynthDataset& ds, const ExperimentConfig& cfg) {
  SplitViews views = split_views(ds);
  ThreeStreamModel model = ThreeStreamModel::init(cfg.model, cfg.seeds.init);
  ExperimentOutcome out;
  out.record = train_model(model, views.train, views.val, cfg);
  out.clean = evaluate_model(model, views.test, cfg.mode, cfg.metric_k);
  std::vector<VideoClip> perturbed = perturb_split(views.test, cfg);
  std::vector<const VideoClip*> pviews;
  pviews.reserve(perturbed.size());
  for (const VideoClip& c : perturbed) pviews.push_back(&c);
  out.perturbed = evaluate_model(model, pviews, cfg.mode, cfg.metric_k);
  out.drop = retention_delta(out.clean, out.perturbed);
  return out;
}

struct SweepRow {
  size_t rate;
  double clean_map;
  double perturbed_map;
  double map_drop;
};

/// Retrains and evaluates per temporal sampling rate. The stride adapts so
/// the sampled window spans the stored clip (rate == frames means stride 1).
inline std::vector<SweepRow> sweep_sampling(const SynthDataset& ds, const ExperimentConfig& base,
                                            const std::vector<size_t>& rates) {
  if (rates.empty()) throw ConfigError("sweep: no rates given");
  std::vector<SweepRow> rows;
  for (size_t rate : rates) {
    if (rate == 0 || rate > base.data.frames) {
      throw ConfigError("sweep rate " + std::to_string(rate) + " infeasible for clips of " +
                        std::to_string(base.data.frames) + " frames");
    }
    ExperimentConfig cfg = base;
    cfg.model.sampler.sample_count = rate;
    cfg.model.sampler.stride = std::max<size_t>(1, base.data.frames / rate);
    cfg.model.sampler.offset = 0;
    ExperimentOutcome out = run_experiment(ds, cfg);
    rows.push_back({rate, out.clean.map_at_k, out.perturbed.map_at_k, out.drop.map_drop});
  }
  return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows, const std::string& config_hash) {
  std::string out = "rate,clean_map,perturbed_map,map_drop,config_hash\n";
  char buf[160];
  for (const SweepRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f,%.6f,%s\n", r.rate, r.clean_map,
                  r.perturbed_map, r.map_drop, config_hash.c_str());
    out += buf;
  }
  return out;
}

/// Summary across eval results: per (model, dataset) clean/perturbed values,
/// drops, and the single-minus-multi drop difference when both are present.
inline std::string report_csv(const std::vector<EvalResult>& results) {
  std::string out = "row,model,dataset,metric,clean,perturbed,drop,config_hash\n";
  char buf[256];
  struct Key {
    std::string model, dataset, hash;
  };
  std::vector<Key> keys;
  auto find_result = [&](const std::string& model, const std::string& dataset,
                         const std::string& condition) -> const EvalResult* {
    for (const EvalResult& r : results) {
      if (r.model_mode == model && r.dataset == dataset && r.condition == condition) return &r;
    }
    return nullptr;
  };
  for (const EvalResult& r : results) {
    bool seen = false;
    for (const Key& k : keys) seen = seen || (k.model == r.model_mode && k.dataset == r.dataset);
    if (!seen) keys.push_back({r.model_mode, r.dataset, r.config_hash});
  }
  struct Drops {
    bool valid = false;
    RetentionDelta d;
  };
  std::map<std::string, Drops> drops_by_model;
  std::string dataset_of_drops;
  for (const Key& k : keys) {
    const EvalResult* clean = find_result(k.model, k.dataset, "clean");
    const EvalResult* pert = find_result(k.model, k.dataset, "perturbed");
    const struct {
      const char* name;
      double MetricReport::*field;
    } metrics[] = {{"accuracy", &MetricReport::accuracy},
                   {"gap", &MetricReport::gap},
                   {"map_at_k", &MetricReport::map_at_k}};
    for (const auto& m : metrics) {
      const double cv = clean ? clean->report.*(m.field) : 0.0;
      const double pv = pert ? pert->report.*(m.field) : 0.0;
      std::snprintf(buf, sizeof(buf), "summary,%s,%s,%s,%.6f,%.6f,%.6f,%s\n", k.model.c_str(),
                    k.dataset.c_str(), m.name, cv, pv, clean && pert ? cv - pv : 0.0,
                    k.hash.c_str());
      out += buf;
    }
    if (clean && pert) {
      drops_by_model[k.model] = {true, retention_delta(clean->report, pert->report)};
      dataset_of_drops = k.dataset;
    }
  }
  const auto single = drops_by_model.find("spatial_only");
  for (const char* multi : {"two_stream", "three_stream"}) {
    const auto it = drops_by_model.find(multi);
    if (single != drops_by_model.end() && it != drops_by_model.end()) {
      RetentionDelta diff = drop_difference(single->second.d, it->second.d);
      std::snprintf(buf, sizeof(buf),
                    "drop_difference,spatial_only-%s,%s,accuracy,%.6f,%.6f,%.6f,-\n", multi,
                    dataset_of_drops.c_str(), single->second.d.accuracy_drop,
                    it->second.d.accuracy_drop, diff.accuracy_drop);
      out += buf;
      std::snprintf(buf, sizeof(buf),
                    "drop_difference,spatial_only-%s,%s,map_at_k,%.6f,%.6f,%.6f,-\n", multi,
                    dataset_of_drops.c_str(), single->second.d.map_drop, it->second.d.map_drop,
                    diff.map_drop);
      out += buf;
    }
  }
  return out;
}

inline std::vector<BarGroup> report_bars(const std::vector<EvalResult>& results,
                                         double MetricReport::*field) {
  std::vector<BarGroup> groups;
  for (const EvalResult& r : results) {
    BarGroup* g = nullptr;
    for (BarGroup& existing : groups) {
      if (existing.label == r.model_mode) g = &existing;
    }
    if (!g) {
      groups.push_back({r.model_mode, 0.0, 0.0});
      g = &groups.back();
    }
    (r.condition == "clean" ? g->clean : g->perturbed) = r.report.*field;
  }
  return groups;
}

/// One PredictionSet line per item, in input order.
inline std::string prediction_lines(const std::vector<PredictionSet>& preds) {
  std::string out;
  for (const PredictionSet& ps : preds) out += ps.to_line() + "\n";
  return out;
}

inline std::vector<PredictionSet> read_prediction_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open predictions '" + path.string() + "'");
  std::vector<PredictionSet> preds;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) preds.push_back(PredictionSet::from_line(line));
  }
  return preds;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << content;
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

}  // namespace tsnet
