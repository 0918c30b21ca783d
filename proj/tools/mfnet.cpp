// mfnet command-line driver: train, eval, predict, report.
//
// Exit codes: 0 success, 2 configuration/checkpoint error, 3 data error,
// 4 numerical abort.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mfnet/mfnet.hpp"

namespace {

using Scalar = float;

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& raw) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& r : raw) out.push_back(mfnet::split_assignment(r));
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw mfnet::DataError("cannot write '" + path.string() + "'");
  out << text;
}

int run_train(const std::string& config, const std::vector<std::string>& overrides, bool quiet) {
  const auto cfg = mfnet::load_config(config, parse_overrides(overrides));
  mfnet::TrainOptions opts;
  opts.progress = quiet ? nullptr : &std::cerr;
  const auto result = mfnet::train<Scalar>(cfg, opts);
  std::cout << "checkpoint " << result.checkpoint.string() << '\n'
            << "log " << result.log_path.string() << '\n'
            << "hash " << std::hex << mfnet::parameter_hash(result.model) << std::dec << '\n';
  return 0;
}

int run_eval(const std::string& config, const std::vector<std::string>& overrides, const std::string& checkpoint,
             std::size_t episodes, std::size_t runs, const std::string& protocol, const std::string& out_path) {
  auto cfg = mfnet::load_config(config, parse_overrides(overrides));
  if (episodes == 0) episodes = cfg.eval.episodes;
  if (runs == 0) runs = cfg.eval.runs;
  const bool both = protocol == "both";
  const bool with_miou = both || mfnet::parse_protocol(protocol) == mfnet::Protocol::miou;
  const bool with_star = both || mfnet::parse_protocol(protocol) == mfnet::Protocol::miou_star;

  mfnet::Model<Scalar> model(cfg.model);
  mfnet::load_checkpoint(checkpoint, model);
  const auto data = mfnet::prepare_data(cfg);
  const auto report = mfnet::evaluate(cfg, model, data, episodes, runs);
  const auto j = mfnet::to_json(report, with_miou, with_star);
  if (!out_path.empty()) write_text(out_path, j.dump(2) + "\n");
  std::cout << "fold " << report.fold_id << "  " << report.ways << "-way " << report.shots << "-shot  " << runs
            << " runs x " << episodes << " episodes\n";
  if (with_miou) std::cout << "mIoU   " << report.miou.mean << " +- " << report.miou.stddev << '\n';
  if (with_star) std::cout << "mIoU*  " << report.miou_star.mean << " +- " << report.miou_star.stddev << '\n';
  return 0;
}

int run_predict(const std::string& checkpoint, const std::string& support_dir, const std::string& query,
                const std::string& out, const std::string& overlay_path) {
  auto [cfg, model] = mfnet::load_model<Scalar>(checkpoint);
  const auto classes = mfnet::read_support_dir(support_dir);
  if (!model.has_decoder(classes.size()))
    throw mfnet::CheckpointError("checkpoint has no decoder head for N=" + std::to_string(classes.size()));
  const auto support = mfnet::load_support<Scalar>(classes);
  const auto image = mfnet::read_rgb_png(query);
  const auto labels = mfnet::predict_labels(model, mfnet::to_tensor<Scalar>(image), support, cfg.input_size);
  if (std::filesystem::path(out).has_parent_path())
    std::filesystem::create_directories(std::filesystem::path(out).parent_path());
  mfnet::write_label_png(out, labels);
  if (!overlay_path.empty()) mfnet::write_rgb_png(overlay_path, mfnet::overlay(image, labels));
  for (std::size_t n = 0; n < classes.size(); ++n) std::cout << "label " << n + 1 << " " << classes[n].name << '\n';
  return 0;
}

int run_report(const std::string& log_path, const std::string& plot, std::size_t window) {
  const auto log = mfnet::read_training_log(log_path);
  if (log.empty()) throw mfnet::DataError("training log '" + log_path + "' is empty");
  write_text(plot, mfnet::loss_plot_svg(log, window));
  const auto& last = log.back();
  std::cout << log.size() << " iterations; final loss " << last.loss << " (l_seg " << last.l_seg << ", l_pml "
            << last.l_pml << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-way few-shot segmentation: training, evaluation and prediction"};
  app.require_subcommand(1);

  std::string config, checkpoint, protocol = "both", support, query, out, overlay_path, log_path, plot, eval_out;
  std::vector<std::string> overrides;
  std::size_t episodes = 0, runs = 0, window = 10;
  bool quiet = false;

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", config, "Config file")->required();
  train->add_option("--override", overrides, "key=value, repeatable");
  train->add_flag("--quiet", quiet, "No progress output");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on test-split episodes");
  eval->add_option("--config", config, "Config file")->required();
  eval->add_option("--override", overrides, "key=value, repeatable");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--episodes", episodes, "Episodes per run (default from config)");
  eval->add_option("--runs", runs, "Number of seeded runs (default from config)");
  eval->add_option("--protocol", protocol, "miou, miou_star or both")
      ->check(CLI::IsMember({"miou", "miou_star", "both"}));
  eval->add_option("--out", eval_out, "Write the JSON report here");

  auto* predict = app.add_subcommand("predict", "Segment one query image");
  predict->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  predict->add_option("--support", support, "Directory with one subdirectory per class")->required();
  predict->add_option("--query", query, "Query PNG")->required();
  predict->add_option("--out", out, "Output label PNG")->required();
  predict->add_option("--overlay", overlay_path, "Optional colour overlay PNG");

  auto* report = app.add_subcommand("report", "Plot a training log");
  report->add_option("--log", log_path, "train_log.jsonl")->required();
  report->add_option("--plot", plot, "Output SVG")->required();
  report->add_option("--window", window, "Moving-average window");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*train) return run_train(config, overrides, quiet);
    if (*eval) return run_eval(config, overrides, checkpoint, episodes, runs, protocol, eval_out);
    if (*predict) return run_predict(checkpoint, support, query, out, overlay_path);
    if (*report) return run_report(log_path, plot, window);
  } catch (const mfnet::NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\nepisode: " << e.episode_id() << '\n';
    return kExitNumerical;
  } catch (const mfnet::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const mfnet::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const mfnet::UndefinedScoreError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  }
  return 0;
}
