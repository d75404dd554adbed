#pragma once

// Adversarial training: harvest evasive examples from attack campaigns, add
// them to the training data as malicious, retrain, and compare ASR.

#include <map>
#include <string>
#include <vector>

#include "droidlab/attack.hpp"
#include "droidlab/pipeline.hpp"

namespace droidlab {

struct AugmentationPlan {
  std::size_t per_pairing = 50;
  std::uint64_t seed = 0;
};

/// The campaign one manipulator/analyzer pairing ran against the baseline.
struct PairingCampaign {
  std::string pairing;
  std::vector<EpisodeOutcome> episodes;
};

struct Augmentation {
  std::vector<Sample> examples;                  // all labeled malicious
  std::map<std::string, std::size_t> taken;      // per pairing
  std::map<std::string, std::size_t> shortfall;  // per pairing, when fewer than n succeeded
};

/// Draws up to n successful adversarial sets per pairing without
/// replacement. kInvalidArgument when no pairing has a single success.
Augmentation sample_adversarial(const std::vector<PairingCampaign>& campaigns, const AugmentationPlan& plan);

/// Retrains on base + examples with the same hyperparameters; the
/// vocabulary is rebuilt so added features become visible.
TrainedDetector retrain_with_augmentation(const std::vector<Sample>& base, const std::vector<Sample>& examples,
                                          DetectorKind kind, const TrainingConfig& config,
                                          std::size_t projection_dim = 0, std::uint64_t projection_seed = 0);

struct DefenseRow {
  std::string detector;
  std::string pairing;
  double asr_before = 0.0;
  double asr_after = 0.0;
  double delta() const { return asr_before - asr_after; }
};

struct DefenseReport {
  std::vector<DefenseRow> rows;

  /// detector,pairing,asr_before,asr_after,delta
  std::string table() const;
};

/// Replays every episode's final adversarial set against both detectors.
/// All campaigns must cover the same sample ids in the same order.
DefenseReport evaluate_defense(const std::string& detector_name, const TrainedDetector& before,
                               const TrainedDetector& after, const std::vector<PairingCampaign>& campaigns,
                               bool count_aborted = true);

/// Full re-attack variant: fresh campaigns against `after` on the same
/// population, one agent factory per pairing.
DefenseReport reattack_defense(const std::string& detector_name, const TrainedDetector& before,
                               const TrainedDetector& after, const std::vector<PairingCampaign>& campaigns,
                               const std::vector<Sample>& population, const std::map<std::string, AgentFactory>& agents,
                               const RagEngine& rag, const AttackConfig& config, const CampaignOptions& options = {},
                               bool count_aborted = true);

}  // namespace droidlab
