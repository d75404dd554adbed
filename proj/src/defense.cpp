#include "droidlab/defense.hpp"

#include <algorithm>

#include "droidlab/error.hpp"
#include "droidlab/rng.hpp"
#include "droidlab/text.hpp"

namespace droidlab {

Augmentation sample_adversarial(const std::vector<PairingCampaign>& campaigns, const AugmentationPlan& plan) {
  require(plan.per_pairing > 0, "augmentation count must be positive");
  Augmentation out;
  for (std::size_t p = 0; p < campaigns.size(); ++p) {
    const auto& c = campaigns[p];
    std::vector<std::size_t> wins;
    for (std::size_t i = 0; i < c.episodes.size(); ++i) {
      if (c.episodes[i].success()) wins.push_back(i);
    }
    Rng rng(mix_keys(plan.seed, p, text::fnv1a64(c.pairing)));
    rng.shuffle(wins);
    const auto n = std::min(plan.per_pairing, wins.size());
    wins.resize(n);
    std::sort(wins.begin(), wins.end());
    for (auto i : wins) {
      const auto& ep = c.episodes[i];
      out.examples.push_back({"adversarial/" + c.pairing + "/" + ep.sample_id, ep.trace.adversarial(),
                              Label::kMalicious});
    }
    out.taken[c.pairing] = n;
    if (n < plan.per_pairing) out.shortfall[c.pairing] = plan.per_pairing - n;
  }
  if (out.examples.empty()) fail(ErrorCode::kInvalidArgument, "no successful adversarial example to sample from");
  return out;
}

TrainedDetector retrain_with_augmentation(const std::vector<Sample>& base, const std::vector<Sample>& examples,
                                          DetectorKind kind, const TrainingConfig& config,
                                          std::size_t projection_dim, std::uint64_t projection_seed) {
  for (const auto& e : examples) require(e.label == Label::kMalicious, "adversarial examples must be malicious");
  auto all = base;
  all.insert(all.end(), examples.begin(), examples.end());
  return train_detector(all, kind, config, projection_dim, projection_seed);
}

std::string DefenseReport::table() const {
  std::string out = "detector,pairing,asr_before,asr_after,delta\n";
  for (const auto& r : rows) {
    out += r.detector + "," + r.pairing + "," + format_double(r.asr_before) + "," + format_double(r.asr_after) + "," +
           format_double(r.delta()) + "\n";
  }
  return out;
}

namespace {

void check_population(const std::vector<PairingCampaign>& campaigns) {
  require(!campaigns.empty(), "no campaigns to evaluate");
  for (const auto& c : campaigns) {
    require(c.episodes.size() == campaigns[0].episodes.size(),
            "pairing " + c.pairing + " attacked a different population");
    for (std::size_t i = 0; i < c.episodes.size(); ++i) {
      require(c.episodes[i].sample_id == campaigns[0].episodes[i].sample_id,
              "pairing " + c.pairing + " attacked a different population");
    }
  }
}

double replay_asr(const TrainedDetector& detector, const PairingCampaign& c, bool count_aborted) {
  std::vector<EpisodeResult> results;
  for (const auto& ep : c.episodes) {
    if (!count_aborted && ep.trace.outcome == Outcome::kAborted) continue;
    bool evaded = false;
    if (ep.trace.outcome == Outcome::kEvaded) {
      evaded = detector_verdict(ep.trace.adversarial(), *detector.vocabulary, detector.model).evaded;
    }
    results.push_back({evaded, ep.trace.attempts()});
  }
  std::size_t max_attempts = 1;
  for (const auto& r : results) max_attempts = std::max(max_attempts, r.attempts);
  return attack_summary(results, max_attempts).asr;
}

}  // namespace

DefenseReport evaluate_defense(const std::string& detector_name, const TrainedDetector& before,
                               const TrainedDetector& after, const std::vector<PairingCampaign>& campaigns,
                               bool count_aborted) {
  check_population(campaigns);
  DefenseReport report;
  for (const auto& c : campaigns) {
    report.rows.push_back({detector_name, c.pairing, replay_asr(before, c, count_aborted),
                           replay_asr(after, c, count_aborted)});
  }
  return report;
}

DefenseReport reattack_defense(const std::string& detector_name, const TrainedDetector& before,
                               const TrainedDetector& after, const std::vector<PairingCampaign>& campaigns,
                               const std::vector<Sample>& population, const std::map<std::string, AgentFactory>& agents,
                               const RagEngine& rag, const AttackConfig& config, const CampaignOptions& options,
                               bool count_aborted) {
  check_population(campaigns);
  require(population.size() == campaigns[0].episodes.size(), "population differs from the attacked one");
  for (std::size_t i = 0; i < population.size(); ++i) {
    require(population[i].id == campaigns[0].episodes[i].sample_id, "population differs from the attacked one");
  }
  DefenseReport report;
  for (const auto& c : campaigns) {
    const auto it = agents.find(c.pairing);
    require(it != agents.end(), "no agents configured for pairing " + c.pairing);
    const auto fresh = run_campaign(population, it->second, rag, config, *after.vocabulary, after.model, options);
    report.rows.push_back({detector_name, c.pairing, replay_asr(before, c, count_aborted),
                           summarize_campaign(fresh, config.max_attempts, count_aborted).asr});
  }
  return report;
}

}  // namespace droidlab
