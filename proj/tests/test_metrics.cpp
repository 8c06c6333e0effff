#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "metric_oracles.hpp"
#include "tsnet/metrics.hpp"

using namespace tsnet;

namespace {

PredictionSet make_pred(const std::string& id, std::vector<std::pair<int, double>> pairs) {
  PredictionSet ps;
  ps.item_id = id;
  std::sort(pairs.begin(), pairs.end(), [](auto& a, auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  ps.pairs = std::move(pairs);
  return ps;
}

GroundTruth make_truth(const std::string& id, std::set<int> pos) {
  return {id, std::move(pos)};
}

}  // namespace

TEST_CASE("build_pool", "[metrics]") {
  SECTION("single item pools its pairs sorted") {
    auto pool = build_pool({make_pred("a", {{0, 0.2}, {1, 0.9}, {2, 0.5}})},
                           {make_truth("a", {1})});
    REQUIRE(pool.entries.size() == 3);
    REQUIRE(pool.entries[0].class_id == 1);
    REQUIRE(pool.entries[0].is_correct);
    REQUIRE(pool.entries[1].class_id == 2);
    REQUIRE(pool.entries[2].class_id == 0);
  }
  SECTION("equal confidences break ties by item then class") {
    auto pool = build_pool({make_pred("b", {{7, 0.5}, {3, 0.5}}), make_pred("a", {{9, 0.5}})},
                           {make_truth("a", {9}), make_truth("b", {3})});
    REQUIRE(pool.entries[0].item_id == "a");
    REQUIRE(pool.entries[1].item_id == "b");
    REQUIRE(pool.entries[1].class_id == 3);
    REQUIRE(pool.entries[2].class_id == 7);
  }
  SECTION("600 items with 20 pairs truncate to 10000") {
    std::vector<PredictionSet> preds;
    std::vector<GroundTruth> truth;
    Rng rng(1);
    for (int i = 0; i < 600; ++i) {
      std::string id = "item" + std::to_string(i);
      std::vector<std::pair<int, double>> pairs;
      for (int c = 0; c < 20; ++c) pairs.emplace_back(c, rng.uniform());
      preds.push_back(make_pred(id, std::move(pairs)));
      truth.push_back(make_truth(id, {0}));
    }
    auto pool = build_pool(preds, truth);
    REQUIRE(pool.entries.size() == 10000);
    for (size_t i = 1; i < pool.entries.size(); ++i) {
      REQUIRE(pool.entries[i - 1].confidence >= pool.entries[i].confidence);
    }
  }
  SECTION("missing ground truth names the item") {
    REQUIRE_THROWS_MATCHES(build_pool({make_pred("ghost", {{0, 0.5}})}, {}), InputError,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("ghost")));
  }
  SECTION("deterministic ordering") {
    std::vector<PredictionSet> preds = {make_pred("a", {{0, 0.3}, {1, 0.3}}),
                                        make_pred("b", {{2, 0.3}, {0, 0.7}})};
    std::vector<GroundTruth> truth = {make_truth("a", {0}), make_truth("b", {2})};
    auto p1 = build_pool(preds, truth);
    auto p2 = build_pool(preds, truth);
    for (size_t i = 0; i < p1.entries.size(); ++i) {
      REQUIRE(p1.entries[i].item_id == p2.entries[i].item_id);
      REQUIRE(p1.entries[i].class_id == p2.entries[i].class_id);
    }
  }
}

TEST_CASE("gap", "[metrics]") {
  SECTION("perfect single prediction scores 1") {
    auto preds = {make_pred("a", {{4, 0.9}})};
    std::vector<GroundTruth> truth = {make_truth("a", {4})};
    REQUIRE(gap(build_pool(preds, truth), truth) == 1.0);
  }
  SECTION("all-incorrect predictions score 0") {
    auto preds = {make_pred("a", {{1, 0.9}, {2, 0.5}})};
    std::vector<GroundTruth> truth = {make_truth("a", {0})};
    REQUIRE(gap(build_pool(preds, truth), truth) == 0.0);
  }
  SECTION("mixed two-item case matches the brute-force walk") {
    std::vector<PredictionSet> preds = {make_pred("a", {{0, 0.8}, {1, 0.6}, {2, 0.1}}),
                                        make_pred("b", {{1, 0.7}, {2, 0.65}, {0, 0.3}})};
    std::vector<GroundTruth> truth = {make_truth("a", {0, 2}), make_truth("b", {1})};
    double got = gap(build_pool(preds, truth), truth);
    double want = metric_oracle::gap(preds, truth);
    REQUIRE(std::abs(got - want) <= 1e-9);
  }
  SECTION("zero positives is an input error") {
    std::vector<PredictionSet> preds = {make_pred("a", {{0, 0.8}})};
    std::vector<GroundTruth> truth = {make_truth("a", {})};
    REQUIRE_THROWS_AS(gap(build_pool(preds, truth), truth), InputError);
  }
  SECTION("invariant under strictly monotone confidence transforms") {
    Rng rng(7);
    for (int trial = 0; trial < 30; ++trial) {
      std::vector<PredictionSet> preds;
      std::vector<GroundTruth> truth;
      for (int i = 0; i < 12; ++i) {
        std::string id = "i" + std::to_string(i);
        std::vector<std::pair<int, double>> pairs;
        for (int c = 0; c < 5; ++c) pairs.emplace_back(c, rng.uniform());
        preds.push_back(make_pred(id, std::move(pairs)));
        truth.push_back(make_truth(id, {static_cast<int>(rng.index(5))}));
      }
      double base = gap(build_pool(preds, truth), truth);
      std::vector<PredictionSet> warped = preds;
      for (auto& ps : warped) {
        for (auto& [cls, conf] : ps.pairs) conf = 1.0 / (1.0 + std::exp(-(3.0 * conf + 0.5)));
        std::sort(ps.pairs.begin(), ps.pairs.end(), [](auto& a, auto& b) {
          if (a.second != b.second) return a.second > b.second;
          return a.first < b.first;
        });
      }
      double transformed = gap(build_pool(warped, truth), truth);
      REQUIRE(std::abs(base - transformed) <= 1e-12);
    }
  }
}

TEST_CASE("ap_at_k and map_at_k", "[metrics]") {
  SECTION("all positives ranked above all negatives gives AP 1") {
    std::vector<PredictionSet> preds = {
        make_pred("a", {{0, 0.9}}), make_pred("b", {{0, 0.8}}), make_pred("c", {{0, 0.2}})};
    std::vector<GroundTruth> truth = {make_truth("a", {0}), make_truth("b", {0}),
                                      make_truth("c", {1})};
    REQUIRE(ap_at_k(0, preds, truth, 20) == 1.0);
  }
  SECTION("never-correct class scores 0") {
    std::vector<PredictionSet> preds = {make_pred("a", {{0, 0.9}})};
    std::vector<GroundTruth> truth = {make_truth("a", {1}), make_truth("b", {0})};
    REQUIRE(ap_at_k(0, preds, truth, 20) == 0.0);
  }
  SECTION("five-item single-class case matches the per-class walk oracle") {
    std::vector<PredictionSet> preds;
    std::vector<GroundTruth> truth;
    Rng rng(17);
    for (int i = 0; i < 5; ++i) {
      std::string id = "i" + std::to_string(i);
      preds.push_back(make_pred(id, {{0, rng.uniform()}, {1, rng.uniform()}}));
      truth.push_back(make_truth(id, {i % 2 == 0 ? 0 : 1}));
    }
    for (size_t k : {1u, 3u, 20u}) {
      REQUIRE(std::abs(ap_at_k(0, preds, truth, k) -
                       metric_oracle::ap_at_k(0, preds, truth, k)) <= 1e-9);
    }
  }
  SECTION("perfect predictor yields mAP 1") {
    std::vector<PredictionSet> preds;
    std::vector<GroundTruth> truth;
    for (int i = 0; i < 8; ++i) {
      std::string id = "i" + std::to_string(i);
      int cls = i % 4;
      preds.push_back(make_pred(id, {{cls, 0.9}, {(cls + 1) % 4, 0.1}}));
      truth.push_back(make_truth(id, {cls}));
    }
    REQUIRE(map_at_k(preds, truth, 20) == 1.0);
  }
  SECTION("two classes with AP 1 and 0 average to 0.5") {
    // class 1's positive item never predicts class 1 at all
    std::vector<PredictionSet> preds = {make_pred("a", {{0, 0.9}, {1, 0.1}}),
                                        make_pred("b", {{0, 0.8}})};
    std::vector<GroundTruth> truth = {make_truth("a", {0}), make_truth("b", {1})};
    REQUIRE(ap_at_k(0, preds, truth, 20) == 1.0);
    REQUIRE(ap_at_k(1, preds, truth, 20) == 0.0);
    REQUIRE(map_at_k(preds, truth, 20) == 0.5);
  }
  SECTION("no eligible class is an input error") {
    std::vector<PredictionSet> preds = {make_pred("a", {{0, 0.9}})};
    std::vector<GroundTruth> truth = {make_truth("a", {})};
    REQUIRE_THROWS_AS(map_at_k(preds, truth, 20), InputError);
  }
}

TEST_CASE("randomized oracle equivalence", "[metrics]") {
  Rng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    const size_t items = 1 + rng.index(30);
    const size_t classes = 1 + rng.index(8);
    std::vector<PredictionSet> preds;
    std::vector<GroundTruth> truth;
    for (size_t i = 0; i < items; ++i) {
      std::string id = "i" + std::to_string(i);
      std::vector<std::pair<int, double>> pairs;
      const size_t np = 1 + rng.index(std::min<size_t>(classes, 20));
      for (size_t p = 0; p < np; ++p) {
        pairs.emplace_back(static_cast<int>(p), rng.uniform());
      }
      preds.push_back(make_pred(id, std::move(pairs)));
      std::set<int> pos;
      const size_t npos = 1 + rng.index(classes);
      while (pos.size() < npos) pos.insert(static_cast<int>(rng.index(classes)));
      truth.push_back(make_truth(id, std::move(pos)));
    }
    const size_t k = 1 + rng.index(20);
    REQUIRE(std::abs(gap(build_pool(preds, truth), truth) -
                     metric_oracle::gap(preds, truth)) <= 1e-9);
    REQUIRE(std::abs(map_at_k(preds, truth, k) -
                     metric_oracle::map_at_k(preds, truth, k)) <= 1e-9);
  }
}

TEST_CASE("metric ranges and retention deltas", "[metrics]") {
  SECTION("identical reports give zero drops") {
    MetricReport r;
    r.gap = 0.8;
    r.map_at_k = 0.7;
    r.accuracy = 0.9;
    RetentionDelta d = retention_delta(r, r);
    REQUIRE(d.gap_drop == 0.0);
    REQUIRE(d.map_drop == 0.0);
    REQUIRE(d.accuracy_drop == 0.0);
  }
  SECTION("drop arithmetic") {
    MetricReport clean, pert;
    clean.map_at_k = 0.9;
    pert.map_at_k = 0.8;
    RetentionDelta d = retention_delta(clean, pert);
    REQUIRE(d.map_drop == Catch::Approx(0.1));
  }
  SECTION("two-model drop difference is signed") {
    RetentionDelta single{0.2, 0.3, 0.25};
    RetentionDelta multi{0.05, 0.1, 0.08};
    RetentionDelta diff = drop_difference(single, multi);
    REQUIRE(diff.gap_drop == Catch::Approx(0.15));
    REQUIRE(diff.map_drop == Catch::Approx(0.2));
    REQUIRE(diff.accuracy_drop == Catch::Approx(0.17));
  }
  SECTION("mismatched K is rejected") {
    MetricReport a, b;
    a.metric_k = 20;
    b.metric_k = 10;
    REQUIRE_THROWS_AS(retention_delta(a, b), InputError);
  }
  SECTION("csv rows follow the schema") {
    MetricReport r;
    r.gap = 0.5;
    r.map_at_k = 0.25;
    r.accuracy = 0.75;
    auto rows = metric_csv_rows(r, "two_stream", "synth", "clean");
    REQUIRE(rows.size() == 3);
    REQUIRE(rows[0] == "gap,two_stream,synth,clean,0.500000");
    REQUIRE(rows[1] == "map_at_k,two_stream,synth,clean,0.250000");
    REQUIRE(rows[2] == "accuracy,two_stream,synth,clean,0.750000");
  }
}
