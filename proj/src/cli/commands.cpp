#include "scenepred/cli.hpp"

#include "scenepred/numerics/checkpoint.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

namespace scenepred::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kManifestVersion = 1;

json manifest(std::string_view command, const RunConfig& config) {
  return {{"command", std::string(command)}, {"manifest_version", kManifestVersion}, {"config", config.to_json()}};
}

void write_json(const fs::path& path, const json& doc) { io::write_text_atomic(path, doc.dump(2) + "\n"); }

std::vector<datagen::Episode> load_episodes(const fs::path& path) {
  if (!fs::exists(path))
    throw UserError("dataset " + path.string() + " not found; run `scenepred generate` or `scenepred ingest` first");
  return datagen::read_dataset(path);
}

scene::SceneSnapshot load_snapshot(const fs::path& path, double sample_rate) {
  if (!fs::exists(path)) throw UserError("snapshot " + path.string() + " not found");
  scene::SceneSnapshot s;
  try {
    s = datagen::snapshot_from_json(io::read_json(path));
  } catch (const json::exception& e) {
    throw UserError("snapshot " + path.string() + ": " + e.what());
  }
  s.validate(sample_rate);
  return s;
}

void require_checkpoint(const fs::path& stem, std::string_view which) {
  if (!fs::exists(fs::path(stem.string() + ".params.json")) || !fs::exists(fs::path(stem.string() + ".meta.json")))
    throw UserError("missing checkpoint " + stem.string() + ".{params,meta}.json; run `scenepred train " +
                    std::string(which) + "` first");
}

upper::UpperModel load_upper_checked(const RunConfig& config) {
  const auto stem = checkpoint_stem(config, "upper");
  require_checkpoint(stem, "upper");
  return upper::load_upper(stem);
}

lower::CvaeModel load_lower_checked(const RunConfig& config, std::string_view which) {
  const auto stem = checkpoint_stem(config, which);
  require_checkpoint(stem, which);
  auto model = lower::load_cvae(stem);
  if (lower::to_string(model.type) != which)
    throw UserError("checkpoint " + stem.string() + " holds a " + std::string(lower::to_string(model.type)) + " model");
  return model;
}

json behavior_counts(std::span<const datagen::Episode> episodes) {
  std::map<std::string, std::size_t> counts{{"yield", 0}, {"pass", 0}, {"keep", 0}};
  for (const auto& e : episodes) ++counts[std::string(scene::to_string(e.behavior))];
  return counts;
}

std::vector<std::vector<std::string>> read_csv_rows(const fs::path& path) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(io::read_text(path));
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// ---- commands ----------------------------------------------------------------------------

int cmd_generate(const RunConfig& config, const std::optional<fs::path>& out_dir) {
  if (config.sample_rate != datagen::kSampleRate)
    throw UserError("the generator runs at " + fmt(datagen::kSampleRate) + " Hz; set sample_rate accordingly");
  const fs::path dir = out_dir.value_or(config.paths.data);
  auto episodes = datagen::generate_dataset(config.episodes, config.seed, config.generator);
  std::mt19937_64 rng(datagen::derive_seed(config.seed, 0x5b1u));
  const auto parts = datagen::split(std::move(episodes), config.train_ratio, rng);
  fs::create_directories(dir);
  datagen::write_dataset(dir / "train.jsonl", parts.train);
  datagen::write_dataset(dir / "test.jsonl", parts.test);
  json m = manifest("generate", config);
  m["outputs"] = {{"train", "train.jsonl"}, {"test", "test.jsonl"}};
  m["counts"] = {{"train", parts.train.size()},
                 {"test", parts.test.size()},
                 {"train_behaviors", behavior_counts(parts.train)},
                 {"test_behaviors", behavior_counts(parts.test)}};
  write_json(dir / "manifest.json", m);
  std::cout << "wrote " << parts.train.size() << " train and " << parts.test.size() << " test episodes to " << dir.string()
            << "\n";
  return kExitOk;
}

int cmd_ingest(const RunConfig& config, const fs::path& input, const std::optional<fs::path>& out) {
  if (!fs::exists(input)) throw UserError("input " + input.string() + " not found");
  const auto result = datagen::ingest_csv(input, config.ingest);
  const fs::path path = out.value_or(config.paths.data / "ingested.jsonl");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  datagen::write_dataset(path, result.episodes);
  json m = manifest("ingest", config);
  m["input"] = input.string();
  m["counts"] = {{"episodes", result.episodes.size()}, {"behaviors", behavior_counts(result.episodes)}};
  auto issues = [](const std::vector<datagen::IngestIssue>& v) {
    json a = json::array();
    for (const auto& i : v) a.push_back({{"vehicle_id", i.vehicle_id}, {"message", i.message}});
    return a;
  };
  m["warnings"] = issues(result.warnings);
  m["errors"] = issues(result.errors);
  write_json(fs::path(path.string() + ".manifest.json"), m);
  for (const auto& e : result.errors) std::cerr << "error: vehicle " << e.vehicle_id << ": " << e.message << "\n";
  std::cout << "wrote " << result.episodes.size() << " episodes to " << path.string() << " (" << result.warnings.size()
            << " warnings, " << result.errors.size() << " rejected tracks)\n";
  return kExitOk;
}

int cmd_train_upper(const RunConfig& config, const fs::path& dataset, bool resume) {
  const auto episodes = load_episodes(dataset);
  const auto stem = checkpoint_stem(config, "upper");
  const fs::path log_path = stem.string() + ".log.csv";
  std::optional<upper::UpperTrainResult> previous;
  if (resume) {
    require_checkpoint(stem, "upper");
    auto opt = upper::load_upper_optimizer(stem);
    if (!opt) throw UserError("checkpoint " + stem.string() + " has no optimizer state to resume from");
    previous = upper::UpperTrainResult{upper::load_upper(stem), {}, std::move(*opt)};
    if (fs::exists(log_path)) {
      for (const auto& r : read_csv_rows(log_path)) {
        if (r.size() < 5) throw UserError("malformed training log " + log_path.string());
        previous->log.push_back({std::stoi(r[0]), std::stod(r[1]), std::stod(r[2]), std::stod(r[3]), std::stod(r[4]), 0.0});
      }
    }
  }
  const std::size_t done = previous ? previous->log.size() : 0;
  std::mt19937_64 rng(datagen::derive_seed(datagen::derive_seed(config.seed, 0x0bbe7u), done));
  upper::UpperTrainResult result;
  try {
    result = upper::train_upper(episodes, config.upper, rng, previous ? &*previous : nullptr, [](const upper::UpperEpochLog& e) {
      std::fprintf(stderr, "upper epoch %d: nll %.4f ce %.4f total %.4f w2 %.4g (%.1fs)\n", e.epoch, e.nll, e.ce, e.total,
                   e.w2, e.seconds);
    });
  } catch (const upper::TrainingDiverged& e) {
    fs::create_directories(config.paths.checkpoints);
    const fs::path rescue = stem.string() + ".diverged";
    upper::save_upper(rescue, e.last_good, nullptr, {{"diverged_after_epoch", e.epoch}});
    std::cerr << "error: " << e.what() << "; last good parameters (epoch " << e.epoch << ") saved to " << rescue.string() << "\n";
    return kExitInternal;
  }
  fs::create_directories(config.paths.checkpoints);
  json run = {{"dataset", dataset.string()}, {"epochs_completed", result.log.size()}, {"config", config.to_json()}};
  upper::save_upper(stem, result.model, &result.optimizer, run);
  std::string csv = "epoch,nll,ce,total,w2\n";
  for (const auto& e : result.log) csv += std::to_string(e.epoch) + "," + fmt(e.nll) + "," + fmt(e.ce) + "," + fmt(e.total) + "," + fmt(e.w2) + "\n";
  io::write_text_atomic(log_path, csv);
  std::cout << "saved " << stem.string() << " after " << result.log.size() << " epochs\n";
  return kExitOk;
}

int cmd_train_lower(const RunConfig& config, const fs::path& dataset, lower::ModelType type, bool resume) {
  const auto episodes = load_episodes(dataset);
  const std::string which(lower::to_string(type));
  const auto stem = checkpoint_stem(config, which);
  const fs::path log_path = stem.string() + ".log.csv";
  std::optional<lower::LowerTrainResult> previous;
  if (resume) {
    require_checkpoint(stem, which);
    auto opt = lower::load_cvae_optimizer(stem);
    if (!opt) throw UserError("checkpoint " + stem.string() + " has no optimizer state to resume from");
    previous = lower::LowerTrainResult{lower::load_cvae(stem), {}, std::move(*opt)};
    if (previous->model.type != type) throw UserError("checkpoint " + stem.string() + " holds a different model type");
    if (fs::exists(log_path)) {
      for (const auto& r : read_csv_rows(log_path)) {
        if (r.size() < 3) throw UserError("malformed training log " + log_path.string());
        previous->log.push_back({std::stoi(r[0]), std::stod(r[1]), std::stod(r[2]), 0.0});
      }
    }
  }
  const std::size_t done = previous ? previous->log.size() : 0;
  std::mt19937_64 rng(datagen::derive_seed(datagen::derive_seed(config.seed, 0x10e7u + static_cast<unsigned>(type)), done));
  lower::LowerTrainResult result;
  try {
    result = lower::train_lower(episodes, type, config.lower, rng, previous ? &*previous : nullptr,
                                [&which](const lower::LowerEpochLog& e) {
                                  std::fprintf(stderr, "%s epoch %d: recon %.4f kl %.4f (%.1fs)\n", which.c_str(), e.epoch,
                                               e.recon, e.kl, e.seconds);
                                });
  } catch (const lower::ModelError& e) {
    throw UserError(e.what());
  }
  fs::create_directories(config.paths.checkpoints);
  json run = {{"dataset", dataset.string()}, {"epochs_completed", result.log.size()}, {"config", config.to_json()}};
  lower::save_cvae(stem, result.model, &result.optimizer, run);
  std::string csv = "epoch,recon,kl\n";
  for (const auto& e : result.log) csv += std::to_string(e.epoch) + "," + fmt(e.recon) + "," + fmt(e.kl) + "\n";
  io::write_text_atomic(log_path, csv);
  std::cout << "saved " << stem.string() << " after " << result.log.size() << " epochs\n";
  return kExitOk;
}

int cmd_predict(const RunConfig& config, const fs::path& snapshot_path, const std::optional<fs::path>& out) {
  const auto snapshot = load_snapshot(snapshot_path, config.sample_rate);
  const auto up = load_upper_checked(config);
  const auto yield = load_lower_checked(config, "yield");
  const auto pass = load_lower_checked(config, config.pass_model);
  const auto keep = load_lower_checked(config, "keep");
  sampler::MotionModels models{&yield, &pass, &keep};
  std::mt19937_64 rng(datagen::derive_seed(config.seed, 0x9ed1c7u));
  const auto p = sampler::predict_scene(snapshot, up, models, config.sampler, rng);

  const fs::path stem = out.value_or(config.paths.reports / "prediction");
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  io::write_text_atomic(fs::path(stem.string() + ".jsonl"), sampler::to_jsonl(p));
  io::write_text_atomic(fs::path(stem.string() + ".csv"), sampler::to_csv(p));
  json m = manifest("predict", config);
  m["snapshot"] = snapshot_path.string();
  m["weights"] = p.upper.weights;
  m["live"] = p.upper.mask;
  m["allocation"] = p.allocation;
  m["diagnostics"] = p.diagnostics.to_json();
  write_json(fs::path(stem.string() + ".json"), m);

  std::cout << "area  live  weight  samples\n";
  for (int a = 1; a <= scene::kNumAreas; ++a) {
    std::printf("%4d  %4s  %6.3f  %7zu\n", a, p.upper.mask[a - 1] ? "yes" : "no", p.upper.weights[a - 1],
                p.allocation[a - 1]);
  }
  std::cout << "diagnostics: " << p.diagnostics.to_json().dump() << "\n";
  std::cout << "wrote " << p.trajectories.size() << " trajectories to " << stem.string() << ".{jsonl,csv,json}\n";
  return kExitOk;
}

int cmd_evaluate(const RunConfig& config, const std::optional<fs::path>& test_path) {
  const fs::path path = test_path.value_or(config.paths.data / "test.jsonl");
  const auto test = load_episodes(path);
  const auto up = load_upper_checked(config);
  std::map<std::string, lower::CvaeModel> loaded;
  eval::EvalModels models;
  for (auto type : {lower::ModelType::yield, lower::ModelType::pass, lower::ModelType::keep, lower::ModelType::pass_notime}) {
    const std::string which(lower::to_string(type));
    const auto stem = checkpoint_stem(config, which);
    if (!fs::exists(fs::path(stem.string() + ".params.json"))) {
      std::cerr << "warning: no " << which << " checkpoint; its rows are left out\n";
      continue;
    }
    loaded.emplace(which, load_lower_checked(config, which));
  }
  if (loaded.empty()) throw UserError("no motion-model checkpoints in " + config.paths.checkpoints.string());
  auto get = [&](const char* k) { return loaded.count(k) ? &loaded.at(k) : nullptr; };
  models = {get("yield"), get("pass"), get("keep"), get("pass_notime")};
  const auto report = eval::table_protocol(test, models, up, config.eval, datagen::derive_seed(config.seed, 0xe7a1u));
  fs::create_directories(config.paths.reports);
  io::write_text_atomic(config.paths.reports / "rmse.csv", report.to_csv());
  io::write_text_atomic(config.paths.reports / "rmse.txt", report.to_table());
  json m = manifest("evaluate", config);
  m["test"] = path.string();
  m["episodes"] = test.size();
  m["skipped_trajectories"] = report.skipped_trajectories;
  write_json(config.paths.reports / "rmse.json", m);
  std::cout << report.to_table();
  return kExitOk;
}

int cmd_robustness(const RunConfig& config, const std::string& kind, const fs::path& snapshot_path, std::optional<int> area) {
  if (kind != "model-swap" && kind != "ttlc-shift") throw UserError("unknown robustness kind '" + kind + "'");
  const auto snapshot = load_snapshot(snapshot_path, config.sample_rate);
  const auto up = load_upper_checked(config);
  const auto pred = upper::predict_upper(up, upper::featurize(snapshot, up.features));
  const auto dias = scene::extract_dias(snapshot);
  const std::uint64_t seed = datagen::derive_seed(config.seed, 0x70b5u);
  eval::RobustnessReport report;
  if (kind == "model-swap") {
    if (!area) {
      for (int a : {2, 4})
        if (dias.live(a) && (!area || pred.weights[a - 1] > pred.weights[*area - 1])) area = a;
      if (!area) throw UserError("model-swap needs a live pass area in the snapshot");
    }
    if (*area < 1 || *area > scene::kNumAreas || !dias.live(*area) ||
        scene::kind_of_area(*area) == scene::MotionKind::keep)
      throw UserError("model-swap needs a live lane-change area, got " + std::to_string(*area));
    const auto pass = load_lower_checked(config, config.pass_model);
    const auto yield = load_lower_checked(config, "yield");
    report = eval::robustness_model_swap(snapshot, *area, pass, yield, up, config.robustness, seed);
  } else {
    if (!area) area = pred.argmax();
    if (*area < 1 || *area > scene::kNumAreas || !dias.live(*area))
      throw UserError("area " + std::to_string(*area) + " is not live in the snapshot");
    const auto k = scene::kind_of_area(*area);
    const std::string which = k == scene::MotionKind::pass ? config.pass_model : std::string(scene::to_string(k));
    const auto model = load_lower_checked(config, which);
    report = eval::robustness_ttlc(snapshot, *area, model, up, config.robustness, seed);
  }
  fs::create_directories(config.paths.reports);
  const fs::path stem = config.paths.reports / ("robustness_" + kind);
  io::write_text_atomic(fs::path(stem.string() + ".csv"), report.to_csv());
  json m = manifest("robustness", config);
  m["snapshot"] = snapshot_path.string();
  m["report"] = report.to_json();
  write_json(fs::path(stem.string() + ".json"), m);
  std::cout << report.summary();
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scene-level vehicle interaction prediction: data, training, prediction and evaluation"};
  app.set_version_flag("--version", "scenepred 1.0");
  std::optional<std::string> config_file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  bool show_config = false;
  app.add_option("--config", config_file, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--set", overrides, "Override a config value, e.g. --set train.upper.epochs=5")->take_all();
  app.add_option("--seed", seed, "Random seed (overrides the config)");
  app.add_flag("--show-config", show_config, "Print the effective config and exit");
  app.require_subcommand(0, 1);

  std::optional<std::string> out;
  std::string input, snapshot, which, kind;
  std::optional<std::string> dataset, test;
  std::optional<int> area;
  bool resume = false;

  auto* gen = app.add_subcommand("generate", "Generate a synthetic dataset with a train/test split");
  gen->add_option("--out", out, "Output directory (default: paths.data)");
  auto* ing = app.add_subcommand("ingest", "Convert an NGSIM-schema CSV into episodes");
  ing->add_option("--input", input, "CSV file")->required();
  ing->add_option("--out", out, "Output dataset (default: <paths.data>/ingested.jsonl)");
  auto* trn = app.add_subcommand("train", "Train the upper module or one motion model");
  trn->add_option("which", which, "upper | yield | pass | keep | pass_notime")->required();
  trn->add_option("--dataset", dataset, "Training dataset (default: <paths.data>/train.jsonl)");
  trn->add_flag("--resume", resume, "Continue from the existing checkpoint");
  auto* prd = app.add_subcommand("predict", "Predict trajectories for one scene snapshot");
  prd->add_option("--snapshot", snapshot, "Snapshot JSON")->required();
  prd->add_option("--out", out, "Output stem (default: <paths.reports>/prediction)");
  auto* evl = app.add_subcommand("evaluate", "RMSE table on the test split");
  evl->add_option("--test", test, "Test dataset (default: <paths.data>/test.jsonl)");
  auto* rob = app.add_subcommand("robustness", "Model-swap or TTLC-shift experiment");
  rob->add_option("kind", kind, "model-swap | ttlc-shift")->required();
  rob->add_option("--snapshot", snapshot, "Snapshot JSON")->required();
  rob->add_option("--area", area, "Area id (default: chosen from the upper prediction)");
  for (auto* sub : {gen, ing, trn, prd, evl, rob}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUser;
  }

  try {
    const fs::path cfg_path = config_file.value_or("");
    json merged = merge_config(config_file ? &cfg_path : nullptr, overrides);
    if (seed) merged["seed"] = *seed;
    const RunConfig config = RunConfig::from_json(merged);
    if (show_config) {
      std::cout << config.to_json().dump(2) << "\n";
      return kExitOk;
    }
    auto opt_path = [](const std::optional<std::string>& s) -> std::optional<fs::path> {
      return s ? std::optional<fs::path>(*s) : std::nullopt;
    };
    if (gen->parsed()) return cmd_generate(config, opt_path(out));
    if (ing->parsed()) return cmd_ingest(config, input, opt_path(out));
    if (trn->parsed()) {
      const fs::path data = dataset ? fs::path(*dataset) : config.paths.data / "train.jsonl";
      if (which == "upper") return cmd_train_upper(config, data, resume);
      lower::ModelType type;
      try {
        type = lower::parse_model_type(which);
      } catch (const std::exception&) {
        throw UserError("unknown model '" + which + "'; expected upper, yield, pass, keep or pass_notime");
      }
      return cmd_train_lower(config, data, type, resume);
    }
    if (prd->parsed()) return cmd_predict(config, snapshot, opt_path(out));
    if (evl->parsed()) return cmd_evaluate(config, opt_path(test));
    if (rob->parsed()) return cmd_robustness(config, kind, snapshot, area);
    std::cerr << app.help();
    return kExitUser;
  } catch (const UserError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const io::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const scene::SceneError& e) {
    std::cerr << "error: invalid scene: " << e.what() << "\n";
    return kExitUser;
  } catch (const upper::ModelError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const lower::ModelError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}

}  // namespace scenepred::cli
