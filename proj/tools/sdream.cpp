// Command-line front end: dataset generation, dream images, training and
// evaluation protocols. Exit codes: 0 ok, 2 config/usage, 3 IO, 4 numeric.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "sdream/sdream.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace sdream;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kIo = 3, kNumeric = 4 };

void log(const std::string& msg) { std::cerr << "[sdream] " << msg << std::endl; }

void print_result(const ordered_json& summary) {
  std::cout << "RESULT " << summary.dump() << std::endl;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

// Overrides from flags go through the same strict parser as the config file.
CliConfig apply_overrides(const CliConfig& cfg, const nlohmann::json& patch) {
  return patch.empty() ? cfg : parse_config(patch, cfg);
}

// The dataset section always describes the dataset actually loaded.
nlohmann::json dataset_patch(const DomainDataset& ds) {
  return {{"dataset",
           {{"seed", ds.seed},
            {"per_cell", ds.per_cell},
            {"size", ds.size},
            {"domains", ds.domains},
            {"classes", ds.classes}}}};
}

struct Common {
  std::string config;
  std::size_t threads = 1;
};

int cmd_gen_data(const Common& common, const std::string& out_dir) {
  const CliConfig cfg = load_config(common.config);
  log("generating " + std::to_string(cfg.dataset.domains.size()) + " domains x " +
      std::to_string(cfg.dataset.classes.size()) + " classes x " +
      std::to_string(cfg.dataset.per_cell) + " images");
  const DomainDataset ds = generate(cfg.dataset);
  const fs::path manifest = save_dataset(ds, out_dir);
  print_result({{"command", "gen-data"},
                {"manifest", manifest.string()},
                {"images", ds.domains.size() * ds.classes.size() * ds.per_cell},
                {"config", config_to_json(cfg)}});
  return kOk;
}

struct DreamArgs {
  std::string checkpoint, content, style, out;
  std::optional<std::size_t> iterations;
  std::optional<double> alpha;
  bool no_standardize = false;
};

int cmd_dream(const Common& common, const DreamArgs& args) {
  CliConfig base;
  base.train.dream.alpha = 0.09;
  base.train.dream.iterations = 10;
  CliConfig cfg = load_config(common.config, base);
  nlohmann::json patch;
  if (args.iterations) patch["dream"]["iterations"] = *args.iterations;
  if (args.alpha) patch["dream"]["alpha"] = *args.alpha;
  if (args.no_standardize) patch["dream"]["standardize_grad"] = false;
  cfg = apply_overrides(cfg, patch);

  const Model model = load_checkpoint(args.checkpoint);
  const Image content = read_ppm(args.content);
  const Image style = read_ppm(args.style);
  if (content.width != style.width || content.height != style.height) {
    throw DimensionError("content is " + std::to_string(content.width) + "x" +
                         std::to_string(content.height) + " but style is " +
                         std::to_string(style.width) + "x" + std::to_string(style.height));
  }
  const Normalization& norm = model.normalization();
  const Image* c_ptr = &content;
  const Image* s_ptr = &style;
  const Tensor x = to_tensor(std::span<const Image* const>(&c_ptr, 1), norm);
  const Tensor x_style = to_tensor(std::span<const Image* const>(&s_ptr, 1), norm);

  DreamConfig dream = cfg.train.dream;
  dream.set_bounds(norm);
  Rng rng = Rng::derive(cfg.train.seed, {kDreamStream});
  DreamTrace trace;
  log("dreaming: alpha " + format_number(dream.alpha) + ", " + std::to_string(dream.iterations) +
      " iterations");
  const Tensor out = stylized_dream(model, x, x_style, dream, rng, &trace);

  double initial = 0.0, final_value = 0.0;
  if (trace.objective.empty()) {
    Tensor style_features;
    if (dream.mode == DreamMode::stylized) style_features = model.extract_features(x_style, ParamGrad::frozen);
    initial = final_value =
        dream_objective(model, x, style_features, dream.mode, dream.eps, dream.divisor).item();
  } else {
    initial = trace.objective.front()[0];
    final_value = trace.objective.back()[0];
  }
  write_ppm(from_tensor(out, 0, norm), args.out);
  ordered_json trajectory = ordered_json::array();
  for (const auto& step : trace.objective) trajectory.push_back(step[0]);
  print_result({{"command", "dream"},
                {"out", args.out},
                {"initial_loss", initial},
                {"final_loss", final_value},
                {"trajectory", trajectory},
                {"config", config_to_json(cfg)}});
  return kOk;
}

struct TrainArgs {
  std::string data, out, mode;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const Common& common, const TrainArgs& args) {
  CliConfig cfg = load_config(common.config);
  const DomainDataset ds = load_dataset(args.data);
  nlohmann::json patch = dataset_patch(ds);
  if (!args.mode.empty()) patch["train"]["mode"] = args.mode;
  if (args.epochs) patch["train"]["epochs"] = *args.epochs;
  if (args.seed) patch["train"]["seed"] = *args.seed;
  cfg = apply_overrides(cfg, patch);

  std::vector<std::size_t> sources;
  for (std::size_t d = 0; d < ds.domains.size(); ++d) {
    if (ds.domains[d] != cfg.held_out) sources.push_back(d);
  }
  if (sources.empty()) throw ConfigError("train: no source domains left after held_out");

  Model model = Model::init(cfg.train.seed, cfg.model);
  log("training " + mode_name(cfg.train.mode) + " for " + std::to_string(cfg.train.epochs) + " epochs on " +
      std::to_string(sources.size()) + " domain(s)");
  const TrainReport report =
      train(model, ds, sources, cfg.train, [&](std::size_t epoch, const EpochStats& s) {
        log("epoch " + std::to_string(epoch + 1) + "/" + std::to_string(cfg.train.epochs) +
            " ce " + format_number(s.ce) + " cons " + format_number(s.cons) + " acc " +
            format_number(s.acc));
      });

  ensure_dir(args.out);
  const fs::path ckpt = fs::path(args.out) / "checkpoint.bin";
  const fs::path report_path = fs::path(args.out) / "report.json";
  save_checkpoint(model, ckpt);
  ordered_json report_json = to_json(report, cfg);
  if (!cfg.held_out.empty()) {
    const std::size_t t = ds.domain_index(cfg.held_out);
    report_json["held_out_accuracy"] = evaluate_domain(model, ds, t);
  }
  write_text(report_path, report_json.dump(2) + "\n");
  log("training took " + format_number(report.wall_seconds) + " s");

  ordered_json summary{{"command", "train"},
                       {"checkpoint", ckpt.string()},
                       {"report", report_path.string()},
                       {"final_train_accuracy", report.epochs.empty() ? 0.0 : report.epochs.back().acc}};
  if (report_json.contains("held_out_accuracy")) summary["held_out_accuracy"] = report_json["held_out_accuracy"];
  summary["config"] = report_json["config"];
  print_result(summary);
  return kOk;
}

struct ExperimentArgs {
  std::string data, out, protocol;
  bool csv = false;
};

int cmd_experiment(const Common& common, const ExperimentArgs& args) {
  CliConfig cfg = load_config(common.config);
  const DomainDataset ds = load_dataset(args.data);
  nlohmann::json patch = dataset_patch(ds);
  if (!args.protocol.empty()) patch["experiment"]["protocol"] = args.protocol;
  if (args.csv) patch["experiment"]["csv"] = true;
  cfg = apply_overrides(cfg, patch);

  ExperimentSpec spec = cfg.experiment;
  spec.threads = common.threads;
  spec.progress = [](std::size_t done, std::size_t total, const std::string& config) {
    log("run " + std::to_string(done) + "/" + std::to_string(total) + " done (" + config + ")");
  };
  log("experiment " + protocol_name(spec.protocol) + " with " + std::to_string(spec.seeds.size()) +
      " seed(s)");
  const MetricsReport report = run_experiment(spec, ds);

  ensure_dir(args.out);
  const fs::path metrics = fs::path(args.out) / "metrics.json";
  const ordered_json effective = config_to_json(cfg);
  write_text(metrics, to_json(report, effective).dump(2) + "\n");
  ordered_json summary{{"command", "experiment"},
                       {"protocol", report.protocol},
                       {"metrics", metrics.string()},
                       {"runs", report.runs.size()}};
  if (cfg.csv) {
    const fs::path csv = fs::path(args.out) / "metrics.csv";
    write_text(csv, to_csv(report));
    summary["csv"] = csv.string();
  }
  ordered_json averages;
  for (const auto& a : report.aggregates) {
    if (a.target == "average") averages[a.config] = a.mean;
  }
  summary["average_accuracy"] = averages;
  summary["config"] = effective;
  print_result(summary);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  CLI::App app{"Stylized dream augmentation and consistency training on synthetic domains"};
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON config; missing fields keep their defaults")
;
    sub->add_option("--threads", common.threads, "Maximum worker threads (results do not depend on it)")
        ->check(CLI::PositiveNumber);
  };

  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "Render the synthetic multi-domain dataset to PPM files");
  add_common(gen);
  gen->add_option("--out", gen_out, "Output directory")->required();

  DreamArgs dream;
  auto* dream_cmd = app.add_subcommand("dream", "Render one stylized dream image from a trained checkpoint");
  add_common(dream_cmd);
  dream_cmd->add_option("--checkpoint", dream.checkpoint, "Model checkpoint")->required();
  dream_cmd->add_option("--content", dream.content, "Content image (PPM)")->required();
  dream_cmd->add_option("--style", dream.style, "Style image (PPM, same size as content)")->required();
  dream_cmd->add_option("--out", dream.out, "Output PPM path")->required();
  dream_cmd->add_option("--iterations", dream.iterations, "Ascent steps K (default 10)");
  dream_cmd->add_option("--alpha", dream.alpha, "Step size (default 0.09)");
  dream_cmd->add_flag("--no-standardize", dream.no_standardize, "Use the raw input gradient");

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train one model and write checkpoint.bin and report.json");
  add_common(train_cmd);
  train_cmd->add_option("--data", train_args.data, "Dataset directory (from gen-data)")->required();
  train_cmd->add_option("--out", train_args.out, "Output directory")->required();
  train_cmd->add_option("--mode", train_args.mode, "erm | sd_ce | deepdream_consistency | sd_consistency");
  train_cmd->add_option("--epochs", train_args.epochs, "Override train.epochs");
  train_cmd->add_option("--seed", train_args.seed, "Override train.seed");

  ExperimentArgs exp_args;
  auto* exp_cmd = app.add_subcommand("experiment", "Run an evaluation protocol and write metrics.json");
  add_common(exp_cmd);
  exp_cmd->add_option("--data", exp_args.data, "Dataset directory (from gen-data)")->required();
  exp_cmd->add_option("--out", exp_args.out, "Output directory")->required();
  exp_cmd->add_option("--protocol", exp_args.protocol,
                      "leave_one_out | ablation | single_source_matrix | alpha_sweep | tau_sweep | "
                      "divergence_sweep | bias_probe");
  exp_cmd->add_flag("--csv", exp_args.csv, "Also write metrics.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_gen_data(common, gen_out);
    if (*dream_cmd) return cmd_dream(common, dream);
    if (*train_cmd) return cmd_train(common, train_args);
    if (*exp_cmd) return cmd_experiment(common, exp_args);
  } catch (const NumericError& e) {
    log(std::string("numeric failure: ") + e.what());
    return kNumeric;
  } catch (const IoError& e) {
    log(std::string("io error: ") + e.what());
    return kIo;
  } catch (const Error& e) {
    log(std::string("error: ") + e.what());
    return kUsage;
  } catch (const std::exception& e) {
    log(std::string("unexpected failure: ") + e.what());
    return kIo;
  }
  return kUsage;
}
