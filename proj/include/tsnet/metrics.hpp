#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "tsnet/fusion.hpp"
#include "tsnet/util.hpp"

namespace tsnet {

struct GroundTruth {
  std::string item_id;
  std::set<int> positives;
};

struct PoolEntry {
  std::string item_id;
  int class_id;
  double confidence;
  bool is_correct;
};

/// Globally ranked prediction pool: confidence descending, ties broken by
/// (item_id, class_id) ascending, truncated to 10000 entries.
struct RankedPool {
  static constexpr size_t kMaxEntries = 10000;
  std::vector<PoolEntry> entries;
};

inline bool pool_order(const PoolEntry& a, const PoolEntry& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  if (a.item_id != b.item_id) return a.item_id < b.item_id;
  return a.class_id < b.class_id;
}

inline RankedPool build_pool(const std::vector<PredictionSet>& predictions,
                             const std::vector<GroundTruth>& truth) {
  std::unordered_map<std::string, const std::set<int>*> by_item;
  by_item.reserve(truth.size());
  for (const GroundTruth& gt : truth) by_item[gt.item_id] = &gt.positives;
  RankedPool pool;
  for (const PredictionSet& ps : predictions) {
    auto it = by_item.find(ps.item_id);
    if (it == by_item.end()) {
      throw InputError("no ground truth for item '" + ps.item_id + "'");
    }
    for (const auto& [cls, conf] : ps.pairs) {
      pool.entries.push_back({ps.item_id, cls, conf, it->second->count(cls) > 0});
    }
  }
  std::sort(pool.entries.begin(), pool.entries.end(), pool_order);
  if (pool.entries.size() > RankedPool::kMaxEntries) {
    pool.entries.resize(RankedPool::kMaxEntries);
  }
  return pool;
}

/// Global average precision: precision-weighted recall increments over the
/// ranked pool. Recall is measured against all ground-truth positives.
inline double gap(const RankedPool& pool, const std::vector<GroundTruth>& truth) {
  if (pool.entries.empty()) throw InputError("gap: empty prediction pool");
  size_t total_positives = 0;
  for (const GroundTruth& gt : truth) total_positives += gt.positives.size();
  if (total_positives == 0) throw InputError("gap: no ground-truth positives");
  double acc = 0.0;
  size_t correct = 0;
  for (size_t i = 0; i < pool.entries.size(); ++i) {
    if (!pool.entries[i].is_correct) continue;
    ++correct;
    const double precision = static_cast<double>(correct) / static_cast<double>(i + 1);
    acc += precision / static_cast<double>(total_positives);
  }
  // the exact sum lies in [0,1]; clamp away accumulation drift
  return std::min(1.0, std::max(0.0, acc));
}

/// Per-class average precision truncated at rank K. The recall denominator is
/// min(#positive items, K), so a class whose positives all rank above its
/// negatives scores 1.0 regardless of how many positives it has.
inline double ap_at_k(int class_id, const std::vector<PredictionSet>& predictions,
                      const std::vector<GroundTruth>& truth, size_t k) {
  if (k == 0) throw InputError("ap_at_k: K must be positive");
  std::unordered_map<std::string, const std::set<int>*> by_item;
  for (const GroundTruth& gt : truth) by_item[gt.item_id] = &gt.positives;

  size_t positives = 0;
  for (const GroundTruth& gt : truth) {
    if (gt.positives.count(class_id)) ++positives;
  }
  if (positives == 0) return 0.0;

  struct Row {
    double conf;
    std::string item;
    bool correct;
  };
  std::vector<Row> rows;
  for (const PredictionSet& ps : predictions) {
    auto it = by_item.find(ps.item_id);
    if (it == by_item.end()) {
      throw InputError("no ground truth for item '" + ps.item_id + "'");
    }
    for (const auto& [cls, conf] : ps.pairs) {
      if (cls == class_id) rows.push_back({conf, ps.item_id, it->second->count(cls) > 0});
    }
  }
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    if (a.conf != b.conf) return a.conf > b.conf;
    return a.item < b.item;
  });
  if (rows.size() > k) rows.resize(k);

  const double denom = static_cast<double>(std::min(positives, k));
  double acc = 0.0;
  size_t hits = 0;
  for (size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i].correct) continue;
    ++hits;
    acc += static_cast<double>(hits) / static_cast<double>(i + 1) / denom;
  }
  return std::min(1.0, std::max(0.0, acc));
}

/// Unweighted mean of AP_c@K over classes with at least one positive item.
inline double map_at_k(const std::vector<PredictionSet>& predictions,
                       const std::vector<GroundTruth>& truth, size_t k) {
  std::set<int> classes;
  for (const GroundTruth& gt : truth) classes.insert(gt.positives.begin(), gt.positives.end());
  if (classes.empty()) throw InputError("map_at_k: no class has a positive item");
  double acc = 0.0;
  for (int cls : classes) acc += ap_at_k(cls, predictions, truth, k);
  return std::min(1.0, std::max(0.0, acc / static_cast<double>(classes.size())));
}

/// Fraction of items whose top-ranked class is a ground-truth positive.
inline double top1_accuracy(const std::vector<PredictionSet>& predictions,
                            const std::vector<GroundTruth>& truth) {
  if (predictions.empty()) throw InputError("accuracy: no predictions");
  std::unordered_map<std::string, const std::set<int>*> by_item;
  for (const GroundTruth& gt : truth) by_item[gt.item_id] = &gt.positives;
  size_t hit = 0;
  for (const PredictionSet& ps : predictions) {
    auto it = by_item.find(ps.item_id);
    if (it == by_item.end()) {
      throw InputError("no ground truth for item '" + ps.item_id + "'");
    }
    if (!ps.pairs.empty() && it->second->count(ps.pairs.front().first)) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(predictions.size());
}

struct MetricReport {
  double gap = 0.0;
  double map_at_k = 0.0;
  double accuracy = 0.0;
  size_t metric_k = 20;
  std::map<int, double> per_class_ap;
};

inline MetricReport evaluate_predictions(const std::vector<PredictionSet>& predictions,
                                         const std::vector<GroundTruth>& truth, size_t k = 20) {
  MetricReport r;
  r.metric_k = k;
  r.gap = gap(build_pool(predictions, truth), truth);
  std::set<int> classes;
  for (const GroundTruth& gt : truth) classes.insert(gt.positives.begin(), gt.positives.end());
  if (classes.empty()) throw InputError("evaluate: no class has a positive item");
  double acc = 0.0;
  for (int cls : classes) {
    const double ap = ap_at_k(cls, predictions, truth, k);
    r.per_class_ap[cls] = ap;
    acc += ap;
  }
  r.map_at_k = acc / static_cast<double>(classes.size());
  r.accuracy = top1_accuracy(predictions, truth);
  return r;
}

/// clean - perturbed, per metric.
struct RetentionDelta {
  double gap_drop = 0.0;
  double map_drop = 0.0;
  double accuracy_drop = 0.0;
};

inline RetentionDelta retention_delta(const MetricReport& clean, const MetricReport& perturbed) {
  if (clean.metric_k != perturbed.metric_k) {
    throw InputError("retention_delta: reports use different K (" +
                     std::to_string(clean.metric_k) + " vs " +
                     std::to_string(perturbed.metric_k) + ")");
  }
  return {clean.gap - perturbed.gap, clean.map_at_k - perturbed.map_at_k,
          clean.accuracy - perturbed.accuracy};
}

/// Signed comparison of two models' drops: single-stream minus multi-stream.
inline RetentionDelta drop_difference(const RetentionDelta& single_stream,
                                      const RetentionDelta& multi_stream) {
  return {single_stream.gap_drop - multi_stream.gap_drop,
          single_stream.map_drop - multi_stream.map_drop,
          single_stream.accuracy_drop - multi_stream.accuracy_drop};
}

/// CSV rows in the shared schema: metric,model,dataset,condition,value
inline std::vector<std::string> metric_csv_rows(const MetricReport& r, const std::string& model,
                                                const std::string& dataset,
                                                const std::string& condition) {
  char buf[160];
  std::vector<std::string> rows;
  auto push = [&](const char* name, double v) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%s,%s,%.6f", name, model.c_str(), dataset.c_str(),
                  condition.c_str(), v);
    rows.emplace_back(buf);
  };
  push("gap", r.gap);
  push("map_at_k", r.map_at_k);
  push("accuracy", r.accuracy);
  return rows;
}

}  // namespace tsnet
