#pragma once

// Dataset-level plumbing shared by the harness and the defense: splitting,
// vocabulary + detector training, evaluation and attack-population selection.

#include <memory>
#include <optional>
#include <vector>

#include "droidlab/detectors.hpp"
#include "droidlab/features.hpp"
#include "droidlab/metrics.hpp"

namespace droidlab {

struct Split {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

/// Stratified by label: each class contributes round(fraction * n) samples
/// (clamped to [1, n-1]) to train after a seeded shuffle. Output keeps the
/// input order within each part.
Split split_dataset(const std::vector<Sample>& samples, double train_fraction, std::uint64_t seed);

struct TrainedDetector {
  std::shared_ptr<const FeatureVocabulary> vocabulary;
  DetectorModel model;
};

/// Builds the vocabulary over `samples`, encodes, optionally projects to
/// `projection_dim` dimensions, and trains.
TrainedDetector train_detector(const std::vector<Sample>& samples, DetectorKind kind, const TrainingConfig& config,
                               std::size_t projection_dim = 0, std::uint64_t projection_seed = 0);

Prediction predict_features(const TrainedDetector& detector, const FeatureSet& features);
std::vector<Label> predict_all(const TrainedDetector& detector, const std::vector<Sample>& samples);
ConfusionCounts evaluate_detector(const TrainedDetector& detector, const std::vector<Sample>& samples);

/// Malicious samples the detector flags malicious. kEmptyPopulation when none.
std::vector<Sample> select_attack_population(const TrainedDetector& detector, const std::vector<Sample>& test);

}  // namespace droidlab
