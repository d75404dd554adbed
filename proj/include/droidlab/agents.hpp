#pragma once

// The manipulator and analyzer agents: prompt rendering, backend invocation
// under a shared token-rate limit, and parsing of model output.

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "droidlab/features.hpp"
#include "droidlab/rag.hpp"

namespace droidlab {

enum class PromptKind { kStepB, kStepC, kStepD };

std::string_view to_string(PromptKind kind);
PromptKind parse_prompt_kind(std::string_view text);

enum class AgentRole { kManipulator, kAnalyzer };
std::string_view to_string(AgentRole role);
AgentRole role_of(PromptKind kind);

/// Query for step_d: features and the analyzer explanation under headings.
std::string step_d_query(const FeatureSet& features, std::string_view explanation);

/// Renders the template for `kind`. step_c lists the features in sorted
/// order so the analyzer cannot tell which ones were added last. step_d
/// requires both `last_added` and `explanation`.
std::string build_prompt(PromptKind kind, const ContextWindow& context, const FeatureSet& features,
                         const std::optional<std::string>& explanation = std::nullopt,
                         const std::optional<DrebinFeature>& last_added = std::nullopt);

/// Feature lines after the input-features label of a rendered prompt, up
/// to the first blank line.
FeatureSet prompt_features(std::string_view prompt);

enum class Verdict { kBenign, kMalicious };
std::string_view to_string(Verdict v);

struct AnalyzerVerdict {
  Verdict label = Verdict::kMalicious;
  std::string explanation;
};

struct ManipulatorOutput {
  FeatureSet proposed;
  std::string raw;
};

/// Extracts `category::value` mentions; kUnparseableResponse when none.
ManipulatorOutput parse_manipulator_output(std::string_view text);
/// Earliest standalone "malicious"/"benign" (any case) decides the label.
AnalyzerVerdict parse_analyzer_output(std::string_view text);

// ---------------------------------------------------------------------------
// Time and rate limiting

class Clock {
 public:
  virtual ~Clock() = default;
  virtual double now() = 0;  // seconds
  virtual void sleep_for(double seconds) = 0;
};

class SystemClock final : public Clock {
 public:
  double now() override;
  void sleep_for(double seconds) override;
};

/// Advances instantly; records every requested sleep.
class SimulatedClock final : public Clock {
 public:
  double now() override;
  void sleep_for(double seconds) override;
  double total_slept() const;

 private:
  mutable std::mutex mutex_;
  double now_ = 0.0;
  double slept_ = 0.0;
};

/// Rough token count used for budgeting: one token per four characters.
std::size_t estimate_tokens(std::string_view text);

/// Token bucket holding `tokens_per_minute` and refilling at that rate. A
/// request is admitted once the level reaches min(cost, capacity); the level
/// may then go negative, so oversized requests delay their successors.
class RateLimiter {
 public:
  RateLimiter(double tokens_per_minute, Clock& clock);

  void acquire(std::size_t tokens);
  double level();

 private:
  void refill_locked();

  double capacity_;
  double per_second_;
  Clock& clock_;
  std::mutex mutex_;
  double level_;
  double last_;
};

// ---------------------------------------------------------------------------
// Backends

struct BackendRequest {
  PromptKind kind;
  std::string prompt;
};

class Backend {
 public:
  virtual ~Backend() = default;
  /// Transient failures throw retryable kBackendUnavailable errors.
  virtual std::string complete(const BackendRequest& request) = 0;
};

struct BackendDescriptor {
  std::string name;
  std::string type;  // http | scripted | echo | greedy-linear | surrogate-linear
  std::string endpoint;
  std::string model;
  std::string credential_env;
  double tokens_per_minute = 0.0;  // 0 = unlimited
  std::size_t max_in_flight = 4;
  double temperature = 0.0;
  std::size_t max_retries = 3;
  double backoff_seconds = 1.0;
  std::size_t context_tokens = 128000;
  double timeout_seconds = 60.0;

  /// Violations, empty when valid.
  std::vector<std::string> problems() const;
};

/// Chat-completions request over HTTP(S).
class HttpBackend final : public Backend {
 public:
  explicit HttpBackend(const BackendDescriptor& descriptor);
  std::string complete(const BackendRequest& request) override;

 private:
  std::string scheme_host_;
  std::string path_;
  std::string model_;
  std::string api_key_;
  double temperature_;
  double timeout_;
};

std::string chat_request_body(std::string_view model, double temperature, std::string_view prompt);
std::string chat_response_content(std::string_view body);

/// Returns the input feature block of the prompt unchanged.
class EchoBackend final : public Backend {
 public:
  std::string complete(const BackendRequest& request) override;
};

struct ScriptStep {
  AgentRole role = AgentRole::kManipulator;
  PromptKind kind = PromptKind::kStepB;
  std::string response;  // "{INPUT}" expands to the prompt's feature lines
  bool fail = false;     // raise a transient transport failure instead
};

/// Replays the steps for one role in order; a mismatched kind or an
/// exhausted script is a kMalformedInput error.
class ScriptedBackend final : public Backend {
 public:
  ScriptedBackend(AgentRole role, std::vector<ScriptStep> steps);
  std::string complete(const BackendRequest& request) override;
  std::size_t remaining() const;

 private:
  AgentRole role_;
  std::deque<ScriptStep> steps_;
  mutable std::mutex mutex_;
};

/// Additive linear score over a vocabulary, positive = malicious.
struct LinearSurrogate {
  std::shared_ptr<const FeatureVocabulary> vocabulary;
  std::vector<double> weights;
  double bias = 0.0;

  double margin(const FeatureSet& set) const;
};

/// Manipulator mock: adds the most benign-weighted vocabulary feature not
/// yet present.
class GreedyLinearBackend final : public Backend {
 public:
  explicit GreedyLinearBackend(LinearSurrogate surrogate);
  std::string complete(const BackendRequest& request) override;

 private:
  LinearSurrogate surrogate_;
  std::vector<std::uint32_t> benign_order_;
};

/// Analyzer mock: labels by the surrogate margin and names the strongest
/// malicious features as its explanation.
class SurrogateLinearBackend final : public Backend {
 public:
  explicit SurrogateLinearBackend(LinearSurrogate surrogate);
  std::string complete(const BackendRequest& request) override;

 private:
  LinearSurrogate surrogate_;
};

/// Invokes a backend at temperature 0 with rate limiting, a bound on
/// concurrent requests and exponential-backoff retries.
class AgentInvoker {
 public:
  AgentInvoker(BackendDescriptor descriptor, std::shared_ptr<Backend> backend, Clock& clock,
               std::shared_ptr<RateLimiter> limiter = nullptr);

  std::string invoke(PromptKind kind, const std::string& prompt);
  const BackendDescriptor& descriptor() const noexcept { return descriptor_; }

 private:
  BackendDescriptor descriptor_;
  std::shared_ptr<Backend> backend_;
  Clock& clock_;
  std::shared_ptr<RateLimiter> limiter_;
  std::mutex slots_mutex_;
  std::condition_variable slots_cv_;
  std::size_t in_flight_ = 0;
};

}  // namespace droidlab
