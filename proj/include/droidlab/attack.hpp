#pragma once

// The manipulator/analyzer attack loop over an addition-only perturbation
// ledger, its audit trace, and the final check against the target detector.

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "droidlab/agents.hpp"
#include "droidlab/detectors.hpp"
#include "droidlab/features.hpp"
#include "droidlab/metrics.hpp"
#include "droidlab/rag.hpp"

namespace droidlab {

enum class DeltaKind { kAdd, kReplace, kInvalid };
std::string_view to_string(DeltaKind kind);

struct DeltaClassification {
  DeltaKind kind = DeltaKind::kInvalid;
  std::optional<DrebinFeature> added;    // g
  std::optional<DrebinFeature> removed;  // f, for replace
  std::string reason;                    // for invalid
};

/// add(g) iff proposed = x ∪ rho ∪ {g}; replace(f→g) iff proposed =
/// x ∪ (rho \ {f}) ∪ {g}; anything else is invalid with a reason.
DeltaClassification classify_delta(const FeatureSet& x, const FeatureSet& rho,
                                   const std::optional<DrebinFeature>& last_added, const FeatureSet& proposed);

struct AttackConfig {
  std::size_t max_attempts = 10;
  std::size_t top_k = kDefaultTopK;
  /// Appended to the prompt for the single re-prompt after an unusable reply.
  std::string reprompt_note =
      "Your previous answer could not be used ({REASON}). Reply with the complete modified feature set, one "
      "category::value per line.";

  void validate() const;
};

enum class Outcome { kEvaded, kCapped, kAborted };
std::string_view to_string(Outcome o);
Outcome parse_outcome(std::string_view text);

struct AttemptRecord {
  std::size_t attempt = 0;
  PromptKind kind = PromptKind::kStepB;
  std::vector<std::string> manipulator_prompts;    // digests, one per try
  std::vector<std::string> manipulator_responses;  // digests
  std::string delta = "invalid";                   // add | replace | invalid
  std::optional<DrebinFeature> added;
  std::optional<DrebinFeature> removed;
  std::string reason;
  std::optional<std::string> analyzer_prompt;  // digest
  std::optional<std::string> verdict;          // Malicious | Benign | unparseable
  std::optional<std::string> explanation;      // digest
  std::size_t cost = 0;                        // |rho| after the attempt
  std::optional<std::string> error;            // abort cause
};

struct AttackTrace {
  FeatureSet original;
  FeatureSet perturbation;
  std::vector<AttemptRecord> records;
  Outcome outcome = Outcome::kCapped;

  FeatureSet adversarial() const { return original.united(perturbation); }
  std::size_t attempts() const noexcept { return records.size(); }

  /// One JSON object per attempt followed by an outcome line.
  std::string serialize() const;
  static AttackTrace parse(std::string_view text);
};

/// Runs one episode. Backend failures end it as kAborted; other errors
/// propagate.
AttackTrace run_attack(const FeatureSet& sample, AgentInvoker& manipulator, AgentInvoker& analyzer,
                       const RagEngine& rag, const AttackConfig& config);

struct DetectorVerdict {
  Prediction prediction;
  std::size_t dropped = 0;  // out-of-vocabulary features of x′
  bool evaded = false;      // detector says benign
};

/// Encodes x′ and asks the detector. Requires an evaded trace.
DetectorVerdict finalize(const AttackTrace& trace, const FeatureVocabulary& vocab, const DetectorModel& detector);
DetectorVerdict detector_verdict(const FeatureSet& features, const FeatureVocabulary& vocab,
                                 const DetectorModel& detector);

// ---------------------------------------------------------------------------
// Campaigns

/// Called once per role per episode. Stateless backends may hand out one
/// shared invoker so its in-flight bound and rate limit span the campaign.
using AgentFactory = std::function<std::shared_ptr<AgentInvoker>(AgentRole)>;

struct EpisodeOutcome {
  std::string sample_id;
  AttackTrace trace;
  std::optional<DetectorVerdict> detector;  // present for evaded traces
  bool success() const { return detector && detector->evaded; }
};

struct CampaignOptions {
  std::size_t workers = 1;
};

/// Episodes run on a worker pool; results come back in population order.
std::vector<EpisodeOutcome> run_campaign(const std::vector<Sample>& population, const AgentFactory& agents,
                                         const RagEngine& rag, const AttackConfig& config,
                                         const FeatureVocabulary& vocab, const DetectorModel& detector,
                                         const CampaignOptions& options = {});

AttackSummary summarize_campaign(const std::vector<EpisodeOutcome>& episodes, std::size_t max_attempts,
                                 bool count_aborted = true);

/// CSV: sample_id,outcome,attempts,cost,analyzer_evaded,detector_label,success
std::string results_table(const std::vector<EpisodeOutcome>& episodes);

// ---------------------------------------------------------------------------
// Scripted scenarios

struct ScenarioExpectation {
  Outcome outcome = Outcome::kCapped;
  std::size_t attempts = 0;
  FeatureSet perturbation;
  std::optional<bool> detector_evaded;
};

struct Scenario {
  std::string name;
  FeatureSet sample;
  std::size_t max_attempts = 10;
  std::vector<ScriptStep> script;
  ScenarioExpectation expect;
};

Scenario parse_scenario(std::string_view json_text);
Scenario load_scenario(const std::filesystem::path& path);
/// Every *.json scenario in dir, sorted by file name.
std::vector<std::pair<std::filesystem::path, Scenario>> load_scenarios(const std::filesystem::path& dir);

/// Fresh scripted manipulator and analyzer for one episode of `script`.
AgentFactory scripted_agents(std::vector<ScriptStep> script, Clock& clock);

AttackTrace run_scenario(const Scenario& scenario, const RagEngine& rag, Clock& clock);

}  // namespace droidlab
