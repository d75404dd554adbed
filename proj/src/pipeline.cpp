#include "droidlab/pipeline.hpp"

#include <cmath>

#include "droidlab/error.hpp"
#include "droidlab/projection.hpp"
#include "droidlab/rng.hpp"

namespace droidlab {

Split split_dataset(const std::vector<Sample>& samples, double train_fraction, std::uint64_t seed) {
  require(train_fraction > 0.0 && train_fraction < 1.0, "split fraction must lie in (0, 1)");
  std::vector<bool> in_train(samples.size(), false);
  for (const auto label : {Label::kBenign, Label::kMalicious}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].label == label) idx.push_back(i);
    }
    if (idx.size() < 2) {
      fail(ErrorCode::kInvalidArgument, "class " + std::string(to_string(label)) + " has " +
                                            std::to_string(idx.size()) + " samples; at least 2 are needed");
    }
    Rng rng(mix_keys(seed, static_cast<std::uint64_t>(label)));
    rng.shuffle(idx);
    auto n = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(idx.size())));
    n = std::clamp<std::size_t>(n, 1, idx.size() - 1);
    for (std::size_t k = 0; k < n; ++k) in_train[idx[k]] = true;
  }
  Split out;
  for (std::size_t i = 0; i < samples.size(); ++i) (in_train[i] ? out.train : out.test).push_back(samples[i]);
  return out;
}

TrainedDetector train_detector(const std::vector<Sample>& samples, DetectorKind kind, const TrainingConfig& config,
                               std::size_t projection_dim, std::uint64_t projection_seed) {
  require(!samples.empty(), "no training samples");
  std::vector<FeatureSet> sets;
  sets.reserve(samples.size());
  for (const auto& s : samples) sets.push_back(s.features);
  auto vocab = std::make_shared<const FeatureVocabulary>(build_vocabulary(sets));

  std::optional<ProjectionSpec> spec;
  if (projection_dim > 0) spec = ProjectionSpec{projection_seed, vocab->dimension(), projection_dim, 0.0}.validated();

  TrainingSet set;
  set.inputs.reserve(samples.size());
  for (const auto& s : samples) {
    const auto enc = encode(s.features, *vocab).vector;
    set.inputs.push_back(spec ? project(enc, *spec) : enc.to_dense());
    set.labels.push_back(s.label);
  }
  auto model = train(kind, set, config);
  model.set_projection(spec);
  return {std::move(vocab), std::move(model)};
}

Prediction predict_features(const TrainedDetector& detector, const FeatureSet& features) {
  return detector.model.predict(encode(features, *detector.vocabulary).vector);
}

std::vector<Label> predict_all(const TrainedDetector& detector, const std::vector<Sample>& samples) {
  std::vector<Label> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(predict_features(detector, s.features).label);
  return out;
}

ConfusionCounts evaluate_detector(const TrainedDetector& detector, const std::vector<Sample>& samples) {
  std::vector<Label> labels;
  for (const auto& s : samples) labels.push_back(s.label);
  return confusion(predict_all(detector, samples), labels);
}

std::vector<Sample> select_attack_population(const TrainedDetector& detector, const std::vector<Sample>& test) {
  std::vector<Sample> out;
  for (const auto& s : test) {
    if (s.label == Label::kMalicious && predict_features(detector, s.features).label == Label::kMalicious) {
      out.push_back(s);
    }
  }
  if (out.empty()) fail(ErrorCode::kEmptyPopulation, "no malicious test sample is detected; nothing to attack");
  return out;
}

}  // namespace droidlab
