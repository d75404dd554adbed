// Command-line front end: train, eval, attack, defend, report, generate.

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "droidlab/error.hpp"
#include "droidlab/features.hpp"
#include "droidlab/harness.hpp"
#include "droidlab/synthetic.hpp"
#include "droidlab/text.hpp"

namespace {

using namespace droidlab;

struct Flags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string detector;
  std::string manipulator;
  std::string analyzer;
  std::string mock_scenario;
  std::optional<std::size_t> max_attempts;
};

void add_run_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", f.out, "run directory, overrides output");
  cmd->add_option("--seed", f.seed, "replaces every seed in the config");
  cmd->add_option("--detector", f.detector, "restrict to one detector")->check(CLI::IsMember({"svm", "gbt", "nn"}));
  cmd->add_option("--backend-manipulator", f.manipulator, "manipulator backend name");
  cmd->add_option("--backend-analyzer", f.analyzer, "analyzer backend name");
  cmd->add_option("--mock-scenario", f.mock_scenario, "scripted scenario file or directory");
  cmd->add_option("--max-attempts", f.max_attempts, "attempt budget per episode");
}

RunConfig resolve(const Flags& f) {
  auto config = RunConfig::load(f.config);
  CliOverrides o;
  if (!f.out.empty()) o.out = std::filesystem::path(f.out);
  o.seed = f.seed;
  if (!f.detector.empty()) o.detector = parse_detector_kind(f.detector);
  if (!f.manipulator.empty()) o.manipulator = f.manipulator;
  if (!f.analyzer.empty()) o.analyzer = f.analyzer;
  if (!f.mock_scenario.empty()) o.mock_scenario = std::filesystem::path(f.mock_scenario);
  o.max_attempts = f.max_attempts;
  apply_overrides(config, o);
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial evaluation of Android malware detectors"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  Flags flags;
  auto* train = app.add_subcommand("train", "split the dataset and train detectors");
  auto* eval = app.add_subcommand("eval", "evaluate trained detectors on the test split");
  auto* attack = app.add_subcommand("attack", "run attack campaigns against true positives");
  auto* defend = app.add_subcommand("defend", "adversarial retraining and before/after ASR");
  for (auto* cmd : {train, eval, attack, defend}) add_run_flags(cmd, flags);

  auto* report = app.add_subcommand("report", "aggregate a run directory into plot-ready CSV");
  std::string report_config, report_out;
  report->add_option("--config", report_config, "run configuration (JSON)")->check(CLI::ExistingFile);
  report->add_option("--out", report_out, "run directory");

  auto* generate = app.add_subcommand("generate", "write the synthetic dataset");
  SyntheticSpec spec;
  std::string generate_out;
  generate->add_option("--out", generate_out, "dataset directory")->required();
  generate->add_option("--seed", spec.seed, "generator seed");
  generate->add_option("--samples", spec.samples, "number of samples");
  generate->add_option("--dimension", spec.dimension, "feature universe size");
  generate->add_option("--noise", spec.label_noise, "label noise rate");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      cmd_train(resolve(flags));
    } else if (eval->parsed()) {
      const auto config = resolve(flags);
      cmd_eval(config);
      std::cout << text::read_file(config.output / "eval" / "metrics.csv");
    } else if (attack->parsed()) {
      cmd_attack(resolve(flags));
    } else if (defend->parsed()) {
      cmd_defend(resolve(flags));
    } else if (report->parsed()) {
      std::filesystem::path dir = report_out;
      if (dir.empty()) {
        if (report_config.empty()) throw Error(ErrorCode::kConfigInvalid, "report needs --out or --config");
        dir = RunConfig::load(report_config).output;
      }
      cmd_report(dir);
    } else if (generate->parsed()) {
      if (std::filesystem::exists(std::filesystem::path(generate_out) / kManifestName)) {
        throw Error(ErrorCode::kIo, generate_out + " already holds a dataset");
      }
      const auto samples = generate_synthetic(spec);
      write_dataset(generate_out, samples);
      std::cout << "wrote " << samples.size() << " samples to " << generate_out << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == ErrorCode::kConfigInvalid ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
