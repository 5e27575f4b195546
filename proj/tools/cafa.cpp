// cafa — command-line driver for the synthetic test-time adaptation bench.
//
//   cafa pretrain [--config F] [--seed S] [--out DIR]
//   cafa stats    --checkpoint M [--config F] [--seed S] --out FILE
//   cafa adapt    --checkpoint M --stats S --method NAME [--config F] [--seed S] [--out DIR]
//   cafa compare  [--config F] [--seed S] [--out DIR] [--checkpoint M --stats S]
//   cafa report   --in DIR [--out DIR]
//
// Exit codes: 0 success, 1 configuration error, 2 numerical failure,
// 3 I/O error.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cafa/config.hpp"
#include "cafa/experiment.hpp"
#include "cafa/report.hpp"

namespace fs = std::filesystem;
using namespace cafa;

namespace {

enum ExitCode { kOk = 0, kConfigError = 1, kNumericalError = 2, kIoError = 3 };

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::NonFiniteLoss:
    case ErrorKind::NotPositiveDefinite:
    case ErrorKind::TrainingDiverged:
      return kNumericalError;
    case ErrorKind::Io:
    case ErrorKind::FormatVersionMismatch:
    case ErrorKind::CorruptChecksum:
      return kIoError;
    default:
      return kConfigError;
  }
}

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "JSON experiment config (defaults when omitted)");
  cmd->add_option("-s,--seed", c.seed, "top-level seed, overrides the config's");
}

ExperimentConfig load_config(const Common& c) {
  Json j = Json::object();
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    if (!in) throw Error(ErrorKind::Io, "cannot open config '" + c.config_path + "'");
    try {
      j = Json::parse(in);
    } catch (const Json::parse_error& e) {
      throw Error(ErrorKind::ConfigInvalid, "config '" + c.config_path + "': " + e.what());
    }
  }
  if (c.seed) j["seed"] = *c.seed;
  return experiment_from_json(j);
}

void make_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::Io, "cannot create directory '" + dir + "': " + ec.message());
}

std::string run_stem(const std::string& dir, const std::string& name) { return dir + "/run_" + name; }

void write_run(const std::string& dir, const RunRecord& rec, const ExperimentConfig& cfg,
               const std::string& error = {}) {
  write_record_csv(run_stem(dir, rec.config.name) + ".csv", rec);
  write_json(run_stem(dir, rec.config.name) + ".json", run_header(rec, cfg, error));
}

void check_model_matches(const AdaptiveModel& model, const ExperimentConfig& cfg) {
  if (model.input_dim() != cfg.data.input_dim || model.num_classes() != cfg.data.n_classes) {
    throw Error(ErrorKind::ConfigInvalid, "checkpoint input_dim/classes differ from the config's data section");
  }
}

// -- subcommands ------------------------------------------------------------

int cmd_pretrain(const Common& c, std::string out_dir) {
  const ExperimentConfig cfg = load_config(c);
  if (out_dir.empty()) out_dir = cfg.output_dir;
  make_dir(out_dir);
  const Dataset data = generate_dataset(cfg.data, cfg.shift);
  const PretrainResult pre = pretrain_source(cfg.arch, cfg.pretrain, data);
  const SourceStats stats = estimate_source_stats(pre.model, data.train_x, data.train_y,
                                                  cfg.stats.covariance_mode, cfg.stats.eps_scale);
  save_checkpoint(pre.model, out_dir + "/model.ckpt");
  save_stats(stats, out_dir + "/source.stats");
  write_json(out_dir + "/pretrain.json", Json{{"source_accuracy", pre.source_accuracy},
                                              {"final_loss", pre.final_loss},
                                              {"stats_warnings", stats.warnings},
                                              {"experiment", to_json(cfg)}});
  std::printf("source accuracy %.4f (held-out, unshifted), final loss %.6g\n", pre.source_accuracy,
              pre.final_loss);
  for (const auto& w : stats.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  std::printf("wrote %s/model.ckpt, %s/source.stats\n", out_dir.c_str(), out_dir.c_str());
  return kOk;
}

int cmd_stats(const Common& c, const std::string& checkpoint, const std::string& out) {
  const ExperimentConfig cfg = load_config(c);
  const AdaptiveModel model = load_checkpoint(checkpoint);
  check_model_matches(model, cfg);
  const Dataset data = generate_dataset(cfg.data, std::nullopt);
  const SourceStats stats =
      estimate_source_stats(model, data.train_x, data.train_y, cfg.stats.covariance_mode, cfg.stats.eps_scale);
  const fs::path parent = fs::path(out).parent_path();
  if (!parent.empty()) make_dir(parent.string());
  save_stats(stats, out);
  for (const auto& w : stats.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  std::printf("%zu classes, feature dim %zu, %s covariance -> %s\n", stats.num_classes(), stats.feature_dim(),
              to_string(stats.covariance_mode), out.c_str());
  return kOk;
}

int cmd_adapt(const Common& c, const std::string& checkpoint, const std::string& stats_path,
              const std::string& method_name, std::string out_dir) {
  const ExperimentConfig cfg = load_config(c);
  if (out_dir.empty()) out_dir = cfg.output_dir;
  const auto it = std::find_if(cfg.methods.begin(), cfg.methods.end(),
                               [&](const TtaConfig& m) { return m.name == method_name; });
  if (it == cfg.methods.end()) throw Error(ErrorKind::ConfigInvalid, "no method named '" + method_name + "'");
  AdaptiveModel model = load_checkpoint(checkpoint);
  check_model_matches(model, cfg);
  const SourceStats stats = load_stats(stats_path);
  const Dataset data = generate_dataset(cfg.data, cfg.shift);
  make_dir(out_dir);
  try {
    const RunRecord rec = adapt_stream(model, stats, data.stream, *it);
    write_run(out_dir, rec, cfg);
    const MethodSummary s = summarize(rec);
    std::printf("%s: mean accuracy %.4f, final-quarter %.4f, last %.4f\n", s.name.c_str(), s.mean_accuracy,
                s.final_quarter_accuracy, s.last_accuracy);
  } catch (const AdaptAborted& e) {
    write_run(out_dir, e.partial(), cfg, e.what());
    throw;
  }
  return kOk;
}

int cmd_compare(const Common& c, std::string out_dir, const std::string& checkpoint,
                const std::string& stats_path) {
  ExperimentConfig cfg = load_config(c);
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  if (checkpoint.empty() != stats_path.empty()) {
    throw Error(ErrorKind::ConfigInvalid, "--checkpoint and --stats go together");
  }
  std::optional<AdaptiveModel> model;
  std::optional<SourceStats> stats;
  if (!checkpoint.empty()) {
    model = load_checkpoint(checkpoint);
    check_model_matches(*model, cfg);
    stats = load_stats(stats_path);
  }
  make_dir(cfg.output_dir);
  write_json(cfg.output_dir + "/config.json", to_json(cfg));

  const ExperimentResult res = run_experiment(cfg, model ? &*model : nullptr, stats ? &*stats : nullptr);
  for (const auto& rec : res.records) {
    std::string error;
    for (const auto& f : res.failures) {
      if (f.method == rec.config.name) error = f.message;
    }
    write_run(cfg.output_dir, rec, cfg, error);
  }
  write_report(cfg.output_dir, res.records);

  std::vector<MethodSummary> rows;
  for (const auto& r : res.records) rows.push_back(summarize(r));
  std::printf("source accuracy (unshifted): %.4f\n\n%s", res.pretrained.source_accuracy,
              format_summary_table(rows).c_str());
  for (const auto& f : res.failures) std::fprintf(stderr, "error: %s aborted: %s\n", f.method.c_str(), f.message.c_str());
  return res.failures.empty() ? kOk : kNumericalError;
}

/// Method order: the `methods` list of <in>/config.json when present,
/// otherwise file-name order of run_*.csv.
int cmd_report(const std::string& in_dir, std::string out_dir) {
  if (out_dir.empty()) out_dir = in_dir;
  if (!fs::is_directory(in_dir)) throw Error(ErrorKind::Io, "'" + in_dir + "' is not a directory");

  std::vector<std::string> names;
  const std::string cfg_path = in_dir + "/config.json";
  if (fs::exists(cfg_path)) {
    std::ifstream in(cfg_path);
    Json j;
    try {
      j = Json::parse(in);
      for (const auto& m : j.at("methods")) names.push_back(m.at("name").get<std::string>());
    } catch (const Json::exception& e) {
      throw Error(ErrorKind::Io, "'" + cfg_path + "': " + e.what());
    }
  } else {
    for (const auto& entry : fs::directory_iterator(in_dir)) {
      const std::string f = entry.path().filename().string();
      if (f.rfind("run_", 0) == 0 && entry.path().extension() == ".csv") names.push_back(f.substr(4, f.size() - 8));
    }
    std::sort(names.begin(), names.end());
  }
  if (names.empty()) throw Error(ErrorKind::Io, "no run records in '" + in_dir + "'");

  std::vector<RunRecord> records;
  for (const auto& n : names) {
    RunRecord rec;
    rec.config.name = n;
    rec.rows = read_record_csv(run_stem(in_dir, n) + ".csv");
    records.push_back(std::move(rec));
  }
  make_dir(out_dir);
  write_report(out_dir, records);
  std::vector<MethodSummary> rows;
  for (const auto& r : records) rows.push_back(summarize(r));
  std::printf("%s", format_summary_table(rows).c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-aware feature alignment: synthetic test-time adaptation bench"};
  app.require_subcommand(1);

  Common common;
  std::string out, checkpoint, stats_path, method, in_dir;

  auto* pretrain = app.add_subcommand("pretrain", "train the source model; write checkpoint and source stats");
  add_common(pretrain, common);
  pretrain->add_option("-o,--out", out, "output directory (default: config output_dir)");

  auto* stats = app.add_subcommand("stats", "recompute source statistics from a checkpoint");
  add_common(stats, common);
  stats->add_option("-m,--checkpoint", checkpoint, "model checkpoint")->required();
  stats->add_option("-o,--out", out, "stats file to write")->required();

  auto* adapt = app.add_subcommand("adapt", "run one configured method over the target stream");
  add_common(adapt, common);
  adapt->add_option("-m,--checkpoint", checkpoint, "model checkpoint")->required();
  adapt->add_option("--stats", stats_path, "source stats file")->required();
  adapt->add_option("--method", method, "method name from the config's methods list")->required();
  adapt->add_option("-o,--out", out, "output directory (default: config output_dir)");

  auto* compare = app.add_subcommand("compare", "run every configured method on one shared stream");
  add_common(compare, common);
  compare->add_option("-o,--out", out, "output directory (default: config output_dir)");
  compare->add_option("-m,--checkpoint", checkpoint, "reuse this checkpoint instead of pre-training");
  compare->add_option("--stats", stats_path, "reuse these source stats (with --checkpoint)");

  auto* report = app.add_subcommand("report", "summary table and plot data from run records");
  report->add_option("-i,--in", in_dir, "directory holding run_<method>.csv files")->required();
  report->add_option("-o,--out", out, "output directory (default: --in)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfigError;
  }

  try {
    if (*pretrain) return cmd_pretrain(common, out);
    if (*stats) return cmd_stats(common, checkpoint, out);
    if (*adapt) return cmd_adapt(common, checkpoint, stats_path, method, out);
    if (*compare) return cmd_compare(common, out, checkpoint, stats_path);
    if (*report) return cmd_report(in_dir, out);
  } catch (const Error& e) {
    std::fprintf(stderr, "error (%s): %s\n", to_string(e.kind()), e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kIoError;
  }
  return kConfigError;
}
