// Experiment harness CLI: data generation, training, clean/perturbed
// evaluation, dataset perturbation, temporal sampling sweeps, and reports.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tsnet/harness.hpp"

namespace fs = std::filesystem;
using namespace tsnet;

namespace {

// Relative output paths land under $TSNET_OUT_DIR when it is set.
fs::path out_path(const std::string& p) {
  fs::path path(p);
  if (path.is_absolute()) return path;
  if (const char* base = std::getenv("TSNET_OUT_DIR")) return fs::path(base) / path;
  return path;
}

ExperimentConfig load_config(const std::string& path) {
  if (path.empty()) return ExperimentConfig{};
  return ExperimentConfig::load(path);
}

SynthDataset load_data_dir(const std::string& dir) {
  const fs::path base(dir);
  DatasetManifest manifest = load_manifest(base / "manifest.json");
  return load_dataset(manifest, base);
}

std::vector<EvalResult> load_results(const std::vector<std::string>& paths) {
  std::vector<EvalResult> results;
  for (const std::string& p : paths) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot open eval result '" + p + "'");
    nlohmann::json j;
    in >> j;
    results.push_back(EvalResult::from_json(j));
  }
  return results;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir, long seed_override) {
  ExperimentConfig cfg = load_config(config_path);
  if (seed_override >= 0) cfg.seeds.data = static_cast<uint64_t>(seed_override);
  const fs::path out = out_path(out_dir);
  DatasetManifest m =
      write_dataset(synth_classes(cfg.model.classes), cfg.data, cfg.seeds.data, out);
  std::cout << "wrote " << m.clips.size() << " clips and manifest.json under " << out << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& ckpt_path, const std::string& record_path) {
  ExperimentConfig cfg = load_config(config_path);
  SynthDataset ds = load_data_dir(data_dir);
  SplitViews views = split_views(ds);
  ThreeStreamModel model = ThreeStreamModel::init(cfg.model, cfg.seeds.init);
  RunRecord record = train_model(model, views.train, views.val, cfg);
  save_checkpoint(out_path(ckpt_path), model, cfg);
  if (!record_path.empty()) {
    write_text_file(out_path(record_path), record.to_json().dump(2) + "\n");
  }
  const EpochStats& last = record.epochs.back();
  std::cout << "trained " << record.mode << " for " << record.epochs.size() << " epochs ("
            << record.wall_seconds << "s), final val loss " << last.val_loss << ", val accuracy "
            << last.val_accuracy << "\n";
  std::cout << "checkpoint: " << out_path(ckpt_path) << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir,
             const std::string& condition, const std::string& table_override, long seed_override,
             const std::string& dataset_name, const std::string& out_json,
             const std::string& out_csv, const std::string& predictions_out,
             const std::string& predictions_in) {
  if (condition != "clean" && condition != "perturbed") {
    throw ConfigError("condition must be 'clean' or 'perturbed', got '" + condition + "'");
  }
  SynthDataset ds = load_data_dir(data_dir);
  SplitViews views = split_views(ds);

  EvalResult result;
  result.dataset = dataset_name;
  result.condition = condition;

  if (!predictions_in.empty()) {
    // score stored prediction lines against the dataset's ground truth
    std::vector<PredictionSet> preds = read_prediction_lines(predictions_in);
    result.model_mode = "external";
    result.config_hash = "-";
    result.report = evaluate_predictions(preds, truth_of(views.test), 20);
  } else {
    Checkpoint ck = load_checkpoint(ckpt_path);
    if (!table_override.empty()) {
      ck.config.table = table_override;
      ck.config.table_rows.clear();
    }
    if (seed_override >= 0) ck.config.seeds.perturb = static_cast<uint64_t>(seed_override);
    result.model_mode = mode_name(ck.config.mode);
    result.config_hash = ck.config.hash();
    std::vector<VideoClip> perturbed;
    std::vector<const VideoClip*> pviews;
    const std::vector<const VideoClip*>* eval_views = &views.test;
    if (condition == "perturbed") {
      perturbed = perturb_split(views.test, ck.config);
      for (const VideoClip& c : perturbed) pviews.push_back(&c);
      eval_views = &pviews;
    }
    std::vector<PredictionSet> preds = predict_all(ck.model, *eval_views, ck.config.mode);
    result.report = evaluate_predictions(preds, truth_of(*eval_views), ck.config.metric_k);
    if (!predictions_out.empty()) {
      write_text_file(out_path(predictions_out), prediction_lines(preds));
    }
  }
  if (!out_json.empty()) write_text_file(out_path(out_json), result.to_json().dump(2) + "\n");
  if (!out_csv.empty()) write_text_file(out_path(out_csv), eval_csv({result}));
  for (const std::string& row :
       metric_csv_rows(result.report, result.model_mode, result.dataset, result.condition)) {
    std::cout << row << "\n";
  }
  return 0;
}

int cmd_perturb(const std::string& data_dir, const std::string& out_dir, const std::string& table,
                long seed) {
  const fs::path base(data_dir);
  DatasetManifest manifest = load_manifest(base / "manifest.json");
  SynthDataset ds = load_dataset(manifest, base);
  PerturbedDataset out =
      perturb_dataset(ds.clips, table_by_name(table), static_cast<uint64_t>(seed));
  const fs::path dst = out_path(out_dir);
  fs::create_directories(dst / "clips");
  for (size_t i = 0; i < out.items.size(); ++i) {
    write_clip(dst / manifest.clips[i].path, out.items[i]);
  }
  save_manifest(dst / "manifest.json", manifest);
  std::string replay = "item_id,kind,seed\n";
  for (const PerturbRecord& r : out.records) replay += r.to_csv_row() + "\n";
  write_text_file(dst / "replay.csv", replay);
  std::cout << "perturbed " << out.items.size() << " clips into " << dst << "\n";
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& data_dir,
              const std::vector<size_t>& rates, const std::string& out_dir) {
  ExperimentConfig cfg = load_config(config_path);
  SynthDataset ds = load_data_dir(data_dir);
  std::vector<SweepRow> rows = sweep_sampling(ds, cfg, rates);
  const fs::path dst = out_path(out_dir);
  write_text_file(dst / "sweep.csv", sweep_csv(rows, cfg.hash()));
  std::vector<std::pair<double, double>> points;
  for (const SweepRow& r : rows) {
    points.emplace_back(static_cast<double>(r.rate), r.map_drop);
  }
  write_text_file(dst / "sweep.svg", svg_line_plot("mAP drop vs temporal sampling rate", points));
  for (const SweepRow& r : rows) {
    std::cout << "rate " << r.rate << ": clean mAP " << r.clean_map << ", perturbed "
              << r.perturbed_map << ", drop " << r.map_drop << "\n";
  }
  return 0;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& out_dir) {
  if (inputs.empty()) throw InputError("report: no eval results given");
  std::vector<EvalResult> results = load_results(inputs);
  const fs::path dst = out_path(out_dir);
  write_text_file(dst / "summary.csv", report_csv(results));
  write_text_file(dst / "accuracy.svg",
                  svg_bar_chart("accuracy, clean vs perturbed",
                                report_bars(results, &MetricReport::accuracy)));
  write_text_file(dst / "map.svg",
                  svg_bar_chart("mAP@K, clean vs perturbed",
                                report_bars(results, &MetricReport::map_at_k)));
  std::cout << report_csv(results);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"three-stream video classifier: data, training, and evaluation harness"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir = "out", ckpt_path = "model.tsck";
  std::string record_path, condition = "clean", table_override, dataset_name = "synth";
  std::string out_json, out_csv, predictions_out, predictions_in;
  long seed_override = -1;
  std::vector<size_t> rates = {3, 10, 30};
  std::vector<std::string> inputs;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic labeled clip dataset");
  gen->add_option("--config", config_path, "experiment config JSON");
  gen->add_option("--out", out_dir, "output dataset directory")->required();
  gen->add_option("--seed", seed_override, "override the data seed");

  auto* train = app.add_subcommand("train", "pretrain the spatial stream, then train end-to-end");
  train->add_option("--config", config_path, "experiment config JSON");
  train->add_option("--data", data_dir, "dataset directory with manifest.json")->required();
  train->add_option("--out", ckpt_path, "checkpoint output path")->required();
  train->add_option("--record", record_path, "run record JSON output path");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  eval->add_option("--checkpoint", ckpt_path, "checkpoint path");
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--condition", condition, "clean or perturbed");
  eval->add_option("--table", table_override, "perturbation table (image|video|identity)");
  eval->add_option("--seed", seed_override, "override the perturbation seed");
  eval->add_option("--dataset-name", dataset_name, "dataset label for CSV rows");
  eval->add_option("--out", out_json, "eval result JSON output path");
  eval->add_option("--csv", out_csv, "metric CSV output path");
  eval->add_option("--predictions-out", predictions_out, "write prediction lines here");
  eval->add_option("--predictions-in", predictions_in,
                   "score stored prediction lines instead of running a checkpoint");

  auto* perturb = app.add_subcommand("perturb", "write a perturbed copy of a dataset");
  perturb->add_option("--data", data_dir, "dataset directory")->required();
  perturb->add_option("--out", out_dir, "output directory")->required();
  perturb->add_option("--table", table_override, "perturbation table name")->required();
  perturb->add_option("--seed", seed_override, "perturbation seed")->required();

  auto* sweep = app.add_subcommand("sweep", "retrain per temporal sampling rate, report drops");
  sweep->add_option("--config", config_path, "experiment config JSON");
  sweep->add_option("--data", data_dir, "dataset directory")->required();
  sweep->add_option("--rates", rates, "sampling rates (frames per clip)");
  sweep->add_option("--out", out_dir, "output directory")->required();

  auto* report = app.add_subcommand("report", "summarize eval results into CSV and SVG charts");
  report->add_option("--inputs", inputs, "eval result JSON files")->required();
  report->add_option("--out", out_dir, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, out_dir, seed_override);
    if (train->parsed()) return cmd_train(config_path, data_dir, ckpt_path, record_path);
    if (eval->parsed()) {
      return cmd_eval(ckpt_path, data_dir, condition, table_override, seed_override, dataset_name,
                      out_json, out_csv, predictions_out, predictions_in);
    }
    if (perturb->parsed()) {
      return cmd_perturb(data_dir, out_dir, table_override, seed_override);
    }
    if (sweep->parsed()) return cmd_sweep(config_path, data_dir, rates, out_dir);
    if (report->parsed()) return cmd_report(inputs, out_dir);
  } catch (const std::exception& e) {
    std::cerr << "tsnet: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
