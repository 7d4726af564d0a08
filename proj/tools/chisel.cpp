// Copyright 2026 The Chisel Authors
// SPDX-License-Identifier: Apache-2.0

// chisel: ingest, train, sweep, eval and bench from one binary.
//
// Exit codes: 0 ok, 1 internal error, 2 bad configuration or usage, 3 bad data,
// 4 numeric failure (divergence), 5 I/O, 7 one or more sweep cells failed.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "chisel/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace chisel::cli {

enum Exit { kOk = 0, kInternal = 1, kConfig = 2, kData = 3, kNumeric = 4, kIo = 5, kCellFailed = 7 };

struct IngestArgs {
  std::string train_csv, test_csv, out, catalog_csv, train_checksum, test_checksum;
  bool force = false;
};

struct TrainArgs {
  std::string config, cache, out;
  std::optional<bool> augment;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> stage1_epochs, stage2_epochs, batch_size, patience, augment_per_sample, width_divisor;
  std::optional<double> lr;
  bool dry_run = false;
  bool quiet = false;
};

struct SweepArgs {
  std::string weights, cache, grid, out_dir;
  std::size_t jobs = 1;
  std::size_t bench_reps = 0;
  std::optional<std::size_t> qat_epochs, finetune_epochs;
  bool force = false;
};

struct EvalArgs {
  std::string weights, cache, out;
  std::size_t knn = 0;
  bool errors = false;
};

struct BenchArgs {
  std::string weights, cache, baseline, out;
  std::size_t reps = 100;
  std::size_t samples = 64;
};

void echo(const std::string& what, const json& j) { std::cout << what << ' ' << j.dump() << '\n'; }

int ingest(const IngestArgs& a) {
  if (fs::exists(a.out) && !a.force) {
    std::cerr << "error: " << a.out << " exists; pass --force to overwrite\n";
    return kConfig;
  }
  for (const auto& [path, want] : {std::pair{a.train_csv, a.train_checksum}, std::pair{a.test_csv, a.test_checksum}}) {
    if (!fs::exists(path)) throw IoError("missing input file " + path);
    if (!want.empty() && hex64(file_checksum(path)) != want) {
      throw DataError(path + ": checksum " + hex64(file_checksum(path)) + " does not match expected " + want);
    }
  }
  std::vector<std::string> warnings;
  const auto train = parse_ujiindoorloc_file(a.train_csv, &warnings);
  const auto test = parse_ujiindoorloc_file(a.test_csv, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
  auto cache = build_cache(train, test);
  cache.train_checksum = file_checksum(a.train_csv);
  cache.test_checksum = file_checksum(a.test_csv);
  cache.save(a.out);
  if (!a.catalog_csv.empty()) {
    std::ofstream os(a.catalog_csv);
    if (!os) throw IoError("cannot write " + a.catalog_csv);
    cache.catalog.write_csv(os);
  }
  std::size_t unseen = 0;
  for (auto l : cache.test_images().labels) unseen += l < 0;
  std::printf("%zu train-pool, %zu test, %zu classes\n", cache.pool.size(), cache.test.size(), cache.catalog.size());
  std::printf("test samples with an RP absent from training: %zu\n", unseen);
  std::printf("catalog hash %s  train checksum %s  test checksum %s\n", hex64(cache.catalog.hash()).c_str(),
              hex64(cache.train_checksum).c_str(), hex64(cache.test_checksum).c_str());
  return kOk;
}

RunConfig effective_run(const TrainArgs& a) {
  RunConfig run;
  if (!a.config.empty()) {
    try {
      run = read_json_file(a.config).get<RunConfig>();
    } catch (const json::exception& e) {
      throw ConfigError(a.config + ": " + e.what());
    }
  }
  if (a.augment) run.augment = *a.augment;
  if (a.seed) run.seed = *a.seed;
  if (a.stage1_epochs) run.train.stage1_epochs = *a.stage1_epochs;
  if (a.stage2_epochs) run.train.stage2_epochs = *a.stage2_epochs;
  if (a.batch_size) run.train.batch_size = *a.batch_size;
  if (a.patience) run.train.patience = *a.patience;
  if (a.augment_per_sample) run.augment_per_sample = *a.augment_per_sample;
  if (a.width_divisor) run.width_divisor = *a.width_divisor;
  if (a.lr) run.train.lr = *a.lr;
  validate(run);
  return run;
}

int train(const TrainArgs& a) {
  const RunConfig run = effective_run(a);
  echo("config", run);
  if (a.dry_run) {
    const ModelConfig mc{run.width_divisor, 905};
    const auto spec = build_spec(mc);
    std::cout << describe(spec);
    std::printf("encoder+classifier parameters: %zu\n", count_params(spec, {Block::encoder, Block::classifier}));
    std::printf("decoder parameters: %zu\n", count_params(spec, {Block::decoder}));
    return kOk;
  }
  if (a.cache.empty() || a.out.empty()) throw ConfigError("train needs --cache and --out (or --dry-run)");
  const auto cache = DatasetCache::load(a.cache);
  const auto splits = make_splits(cache, run);
  std::printf("train %zu (augmented: %s), validation %zu, classes %zu\n", splits.train.size(), run.augment ? "yes" : "no",
              splits.val.size(), cache.catalog.size());
  TrainLog log;
  const fs::path log_path = a.out + ".log.json";
  auto progress = [&](const EpochRecord& e) {
    if (!a.quiet) {
      std::printf("%s epoch %3zu  train %.5f  val loss %.5f  val metric %.5f  %.1fs\n", e.stage.c_str(), e.epoch, e.train_loss,
                  e.val_loss, e.val_metric, e.seconds);
      std::fflush(stdout);
    }
  };
  try {
    const Model m = train_model(splits, cache, run, log, progress);
    save_weights(a.out, m, model_meta(run, cache));
    json lj = log.to_json();
    lj["config"] = run;
    write_text_file(log_path, lj.dump(2) + "\n");
    std::printf("stage1 best val mse %.6f (epoch %zu), stage2 best val accuracy %.4f (epoch %zu)\n", log.stage1_best_mse,
                log.stage1_best_epoch, log.stage2_best_accuracy, log.stage2_best_epoch);
    std::printf("weights %s  hash %s\n", a.out.c_str(), hex64(file_checksum(a.out)).c_str());
  } catch (const NumericError&) {
    json lj = log.to_json();
    lj["config"] = run;
    lj["failed"] = true;
    write_text_file(log_path, lj.dump(2) + "\n");
    std::cerr << "partial training log kept at " << log_path << '\n';
    throw;
  }
  return kOk;
}

int sweep(const SweepArgs& a) {
  const auto loaded = load_model_file(a.weights);
  if (loaded.compressed) throw ConfigError("sweep needs an uncompressed weight file");
  const auto cache = DatasetCache::load(a.cache);
  check_catalog(loaded.meta, cache);
  const RunConfig run = run_of(loaded.meta);
  CompressionConfig base;
  base.seed = run.seed;
  if (a.qat_epochs) base.qat_epochs = *a.qat_epochs;
  if (a.finetune_epochs) base.finetune_epochs = *a.finetune_epochs;
  const auto grid = a.grid.empty() ? default_grid(base) : parse_grid(read_json_file(a.grid), base);
  json grid_echo = json::array();
  for (const auto& c : grid) grid_echo.push_back(c);
  echo("grid", {{"cells", grid.size()}, {"jobs", a.jobs}});
  if (grid.empty()) {
    std::printf("empty grid, nothing to do\n");
    return kOk;
  }
  const fs::path out_dir = a.out_dir;
  if (fs::exists(out_dir / "report.jsonl") && !a.force) {
    std::cerr << "error: " << (out_dir / "report.jsonl") << " exists; pass --force to overwrite\n";
    return kConfig;
  }
  fs::create_directories(out_dir);
  const auto splits = make_splits(cache, run);
  const json provenance = {{"source_weights", fs::path(a.weights).filename().string()},
                           {"catalog_hash", loaded.meta.at("catalog_hash")},
                           {"run", loaded.meta.at("run")}};
  auto results = run_sweep(loaded.model, grid, splits, cache.catalog, provenance, out_dir, a.jobs, [](const CellResult& r) {
    if (r.ok) {
      std::printf("%-20s building %6.2f%%  floor %6.2f%%  position %7.3f m  bytes %zu\n", r.config.label().c_str(),
                  r.eval.building_accuracy, r.eval.floor_accuracy, r.eval.mean_error, r.footprint.total_bytes);
    } else {
      std::printf("%-20s FAILED: %s\n", r.config.label().c_str(), r.error.c_str());
    }
    std::fflush(stdout);
  });
  if (a.bench_reps > 0) {
    const auto samples = rssi_samples(splits.test, 64);
    for (auto& r : results) {
      if (!r.ok) continue;
      r.latency = latency_bench(Engine::compile(load_compressed(r.file)), samples, a.bench_reps);
    }
  }
  std::string jsonl;
  std::size_t failed = 0;
  json rows = json::array();
  for (const auto& r : results) {
    jsonl += r.row().dump() + "\n";
    rows.push_back(r.row());
    failed += !r.ok;
  }
  write_text_file(out_dir / "report.jsonl", jsonl);
  json report = {{"provenance", provenance}, {"grid", grid_echo}, {"rows", rows}, {"failed_cells", failed}};
  write_text_file(out_dir / "report.json", report.dump(2) + "\n");
  std::printf("%zu cells, %zu failed; report %s\n", results.size(), failed, (out_dir / "report.jsonl").c_str());
  return failed ? kCellFailed : kOk;
}

int eval(const EvalArgs& a) {
  const auto loaded = load_model_file(a.weights);
  const auto cache = DatasetCache::load(a.cache);
  check_catalog(loaded.meta, cache);
  const auto test = cache.test_images();
  auto report = evaluate(loaded.model, test, cache.catalog);
  report.config = loaded.compressed ? json(loaded.compressed->config) : json{{"model", "FP32"}};
  json out = {{"eval", report.to_json(a.errors)}, {"weights", a.weights}};
  if (loaded.compressed) out["bytes"] = loaded.compressed->footprint().total_bytes;
  std::printf("%s\n", report.summary().c_str());
  if (a.knn > 0) {
    const RunConfig run = run_of(loaded.meta);
    const auto splits = make_splits(cache, RunConfig{run.train, false, 1, run.seed, run.width_divisor});
    const auto pool = concat(splits.train, splits.val);
    const auto knn = knn_baseline(pool, test, cache.catalog, a.knn);
    std::printf("knn k=%zu: %s\n", a.knn, knn.summary().c_str());
    out["knn"] = knn.to_json(a.errors);
  }
  if (!a.out.empty()) write_text_file(a.out, out.dump(2) + "\n");
  return kOk;
}

int bench(const BenchArgs& a) {
  const auto cache = DatasetCache::load(a.cache);
  const auto samples = rssi_samples(cache.test_images(), a.samples);
  auto run_one = [&](const std::string& path) {
    const auto loaded = load_model_file(path);
    check_catalog(loaded.meta, cache);
    const auto engine = Engine::compile(loaded.model);
    return std::pair{latency_bench(engine, samples, a.reps), engine.describe()};
  };
  const auto [stats, layout] = run_one(a.weights);
  json out = {{"weights", a.weights}, {"latency", stats.to_json()}, {"engine", layout}};
  std::printf("median %.4f ms  mean %.4f ms  p95 %.4f ms  (%zu reps, %zu warm-up)\n", stats.median_ms, stats.mean_ms,
              stats.p95_ms, stats.repetitions, stats.warmup);
  if (!a.baseline.empty()) {
    const auto base = run_one(a.baseline).first;
    const double ratio = latency_ratio(stats, base);
    std::printf("baseline median %.4f ms  ratio %.3f  speedup %.3fx\n", base.median_ms, ratio, 1.0 / ratio);
    out["baseline"] = {{"weights", a.baseline}, {"latency", base.to_json()}, {"median_ratio", ratio}};
  }
  if (!a.out.empty()) write_text_file(a.out, out.dump(2) + "\n");
  return kOk;
}

}  // namespace chisel::cli

int main(int argc, char** argv) {
  using namespace chisel;
  using namespace chisel::cli;
  CLI::App app{"CHISEL WiFi fingerprint localization: ingest, train, compress, evaluate, benchmark"};
  app.require_subcommand(1);

  IngestArgs ia;
  auto* ing = app.add_subcommand("ingest", "Parse UJIIndoorLoc CSVs into a dataset cache");
  ing->add_option("--train-csv", ia.train_csv, "trainingData.csv")->required();
  ing->add_option("--test-csv", ia.test_csv, "validationData.csv")->required();
  ing->add_option("--out", ia.out, "Output cache file")->required();
  ing->add_option("--catalog-csv", ia.catalog_csv, "Also write the class catalog as CSV");
  ing->add_option("--train-checksum", ia.train_checksum, "Expected FNV-1a-64 (hex) of the training CSV");
  ing->add_option("--test-checksum", ia.test_checksum, "Expected FNV-1a-64 (hex) of the test CSV");
  ing->add_flag("--force", ia.force, "Overwrite an existing cache");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Two-stage training (autoencoder, then classifier)");
  tr->add_option("--config", ta.config, "JSON run config; flags override it");
  tr->add_option("--cache", ta.cache, "Dataset cache from ingest");
  tr->add_option("--out", ta.out, "Output weight file");
  tr->add_option("--augment", ta.augment, "Augment the training split (true/false)")->expected(0, 1)->default_str("true");
  tr->add_option("--seed", ta.seed, "Run seed");
  tr->add_option("--stage1-epochs", ta.stage1_epochs, "Autoencoder epochs (max)");
  tr->add_option("--stage2-epochs", ta.stage2_epochs, "Classifier epochs (max)");
  tr->add_option("--batch-size", ta.batch_size, "Mini-batch size");
  tr->add_option("--patience", ta.patience, "Early-stopping patience, 0 disables");
  tr->add_option("--lr", ta.lr, "Adam learning rate");
  tr->add_option("--augment-per-sample", ta.augment_per_sample, "Synthetic fingerprints per real one when augmenting");
  tr->add_option("--width-divisor", ta.width_divisor, "1 for the full model; 2 or 4 for thinner test models");
  tr->add_flag("--dry-run", ta.dry_run, "Print the layer table and parameter count, do not train");
  tr->add_flag("--quiet", ta.quiet, "No per-epoch lines");

  SweepArgs sa;
  auto* sw = app.add_subcommand("sweep", "Compress, evaluate and account every grid cell");
  sw->add_option("--weights", sa.weights, "Trained weight file")->required();
  sw->add_option("--cache", sa.cache, "Dataset cache")->required();
  sw->add_option("--grid", sa.grid, "Grid JSON; default is the full 68-cell grid");
  sw->add_option("--out-dir", sa.out_dir, "Directory for compressed models and reports")->required();
  sw->add_option("--jobs", sa.jobs, "Cells run in parallel")->check(CLI::PositiveNumber);
  sw->add_option("--bench-reps", sa.bench_reps, "Latency repetitions per cell after the sweep (0 skips)");
  sw->add_option("--qat-epochs", sa.qat_epochs, "Override QAT epochs for every cell");
  sw->add_option("--finetune-epochs", sa.finetune_epochs, "Override post-prune fine-tune epochs for every cell");
  sw->add_flag("--force", sa.force, "Overwrite an existing report");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Building/floor accuracy and position error on the test file");
  ev->add_option("--weights", ea.weights, "Weight file or compressed model")->required();
  ev->add_option("--cache", ea.cache, "Dataset cache")->required();
  ev->add_option("--out", ea.out, "Write the JSON report here");
  ev->add_option("--knn", ea.knn, "Also run the KNN baseline with this k");
  ev->add_flag("--errors", ea.errors, "Include per-sample errors in the JSON report");

  BenchArgs ba;
  auto* be = app.add_subcommand("bench", "Single-sample latency including vector-to-image preprocessing");
  be->add_option("--weights", ba.weights, "Weight file or compressed model")->required();
  be->add_option("--cache", ba.cache, "Dataset cache (test samples are the inputs)")->required();
  be->add_option("--reps", ba.reps, "Timed repetitions (at least 100)");
  be->add_option("--samples", ba.samples, "Distinct test samples to cycle through");
  be->add_option("--baseline", ba.baseline, "Second model to compare against");
  be->add_option("--out", ba.out, "Write the JSON report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*ing) return ingest(ia);
    if (*tr) return train(ta);
    if (*sw) return sweep(sa);
    if (*ev) return eval(ea);
    if (*be) return bench(ba);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kInternal;
  }
  return kInternal;
}
