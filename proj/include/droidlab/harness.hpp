#pragma once

// Configuration-driven experiment runner behind the command-line tool.
//
// Run directory layout:
//   manifests/NNN-<command>.json       written first, never modified
//   manifests/NNN-<command>.completed  end timestamp
//   split/train.txt, split/test.txt    sample ids
//   models/<detector>.json, models/<detector>.vocab
//   eval/metrics.csv
//   attack/<detector>/<pairing>/traces/NNNNN.jsonl
//   attack/<detector>/<pairing>/results.csv, summary.txt, histogram.csv
//   defend/<detector>/report.csv, augmentation.csv, models/
//   report/*.csv

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "droidlab/agents.hpp"
#include "droidlab/attack.hpp"
#include "droidlab/defense.hpp"
#include "droidlab/detectors.hpp"
#include "droidlab/pipeline.hpp"
#include "droidlab/rag.hpp"

namespace droidlab {

inline constexpr std::string_view kVersion = "1.0.0";

struct Seeds {
  std::uint64_t split = 11;
  std::uint64_t train = 1;
  std::uint64_t attack = 0;
  std::uint64_t defense = 5;
};

struct EmbeddingConfig {
  std::string type = "hashing";  // hashing | service-tcp | service-command
  std::size_t dimension = 384;
  std::uint64_t seed = 0;
  std::string host;
  std::uint16_t port = 0;
  std::string command;
};

struct PairingConfig {
  std::string name;
  std::string manipulator;  // backend names
  std::string analyzer;
};

struct RunConfig {
  std::filesystem::path dataset;
  double split_fraction = 0.8;
  Seeds seeds;
  std::vector<DetectorKind> detectors{DetectorKind::kSvm, DetectorKind::kGbt, DetectorKind::kNn};
  std::size_t projection_dim = 256;  // nn input
  TrainingConfig training;
  std::filesystem::path corpus;
  EmbeddingConfig embedding;
  std::size_t context_budget = kDefaultContextBudget;
  std::vector<BackendDescriptor> backends;
  std::vector<PairingConfig> pairings;
  AttackConfig attack;
  std::size_t workers = 1;
  bool count_aborted = true;
  std::optional<std::filesystem::path> mock_scenario;
  AugmentationPlan defense;
  std::string defense_mode = "replay";  // replay | reattack
  std::filesystem::path output;

  /// Every violation, empty when valid.
  std::vector<std::string> problems() const;
  /// Throws kConfigInvalid listing all problems.
  void validate() const;

  /// Relative paths resolve against `base_dir`. Unknown keys are errors.
  static RunConfig parse(std::string_view json_text, const std::filesystem::path& base_dir);
  static RunConfig load(const std::filesystem::path& path);
  std::string snapshot() const;
};

struct CliOverrides {
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  std::optional<DetectorKind> detector;
  std::optional<std::string> manipulator;
  std::optional<std::string> analyzer;
  std::optional<std::filesystem::path> mock_scenario;
  std::optional<std::size_t> max_attempts;
};

/// --seed replaces every seed; a manipulator/analyzer override replaces the
/// pairings with a single one.
void apply_overrides(RunConfig& config, const CliOverrides& overrides);

void cmd_train(const RunConfig& config);
void cmd_eval(const RunConfig& config);
void cmd_attack(const RunConfig& config);
void cmd_defend(const RunConfig& config);
/// Aggregates an existing run directory; writes nothing on failure.
void cmd_report(const std::filesystem::path& run_dir);

// Pieces the commands are built from, exposed for tests.

std::vector<Sample> load_split(const std::filesystem::path& run_dir, const std::vector<Sample>& dataset,
                               std::string_view part);
TrainedDetector load_detector(const std::filesystem::path& run_dir, DetectorKind kind);
void save_detector(const std::filesystem::path& dir, DetectorKind kind, const TrainedDetector& detector);

/// Linear view of a trained svm, used by the greedy and surrogate mocks.
LinearSurrogate linear_surrogate(const TrainedDetector& svm);

struct RagSetup {
  std::unique_ptr<EmbeddingProvider> provider;
  std::unique_ptr<ChunkIndex> index;
  std::unique_ptr<RagEngine> engine;
};
RagSetup build_rag(const RunConfig& config);

/// Agent factories for one pairing. `surrogate` backs the linear mocks.
AgentFactory make_agents(const RunConfig& config, const PairingConfig& pairing,
                         const std::optional<LinearSurrogate>& surrogate, Clock& clock);

std::vector<PairingCampaign> load_campaigns(const std::filesystem::path& run_dir, DetectorKind kind);

}  // namespace droidlab
