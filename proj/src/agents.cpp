#include "droidlab/agents.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <thread>

#include "droidlab/error.hpp"
#include "droidlab/text.hpp"

namespace droidlab {

namespace {

constexpr std::string_view kStepBSystem =
    "You are an Android malware manipulator. Your goal is to evade ML-based Android malware detection. "
    "Please add only one Drebin feature to the input features based on the context below. The output "
    "should be the modified feature set including input features.";

constexpr std::string_view kStepCSystem =
    "You are an Android malware analyzer. Your goal is to detect malware based on the input Drebin "
    "features and the context below. If it is malware, the output should be \"Malicious\" with the "
    "explanation. If it is goodware, the output should be \"Benign\" with the explanation.";

constexpr std::string_view kStepDSystem =
    "You are an Android malware manipulator. Your goal is to evade ML-based Android malware detection. "
    "An Android expert classifies the APK as malware with its explanation based on the input features. "
    "Informed by the input features with explanation and the context below, you can: (1) either add only "
    "one new Drebin feature to the input features, (2) or remove the last added feature {LAST ADDED "
    "FEATURE} and add only one different Drebin feature. The output should be the modified feature set "
    "including input features.";

constexpr std::string_view kFeaturesLabel = "\ninput features: ";
constexpr std::string_view kFeaturesExplanationLabel = "\ninput features and explanation: ";
constexpr std::string_view kFeaturesHeading = "Features:\n";
constexpr std::string_view kExplanationHeading = "\nExplanation:\n";

std::string feature_block(const FeatureSet& set) {
  auto lines = to_lines(set);
  if (!lines.empty()) lines.pop_back();
  return lines;
}

std::string replace_all(std::string s, std::string_view from, std::string_view to) {
  for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
  return s;
}

bool word_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
}

bool is_trailing_junk(char c) {
  return c == '.' || c == ',' || c == ';' || c == ':' || c == '"' || c == '\'' || c == '`';
}

// A ')' is prose punctuation only when it closes nothing inside the value;
// method signatures end in "()".
std::string strip_trailing_junk(std::string v) {
  for (;;) {
    if (v.empty()) break;
    if (is_trailing_junk(v.back())) {
      v.pop_back();
    } else if (v.back() == ')' && std::count(v.begin(), v.end(), ')') > std::count(v.begin(), v.end(), '(')) {
      v.pop_back();
    } else {
      break;
    }
  }
  return std::string(text::trim(v));
}

std::string strip_bullet(std::string_view t) {
  for (;;) {
    t = text::trim(t);
    if (t.starts_with("- ") || t.starts_with("* ") || t.starts_with("+ ")) {
      t.remove_prefix(2);
    } else if (t.starts_with("\xE2\x80\xA2")) {
      t.remove_prefix(3);
    } else if (!t.empty() && std::isdigit(static_cast<unsigned char>(t[0]))) {
      std::size_t i = 0;
      while (i < t.size() && std::isdigit(static_cast<unsigned char>(t[i]))) ++i;
      if (i < t.size() && (t[i] == '.' || t[i] == ')') && i + 1 < t.size() && t[i + 1] == ' ') {
        t.remove_prefix(i + 2);
      } else {
        break;
      }
    } else {
      break;
    }
  }
  return std::string(t);
}

struct Mention {
  std::size_t pos;
  Category category;
  std::size_t value_start;
};

std::vector<Mention> find_mentions(std::string_view line) {
  std::vector<Mention> out;
  for (std::size_t pos = 0; pos < line.size(); ++pos) {
    if (pos > 0 && word_char(line[pos - 1])) continue;
    for (auto c : all_categories()) {
      const auto token = category_token(c);
      if (line.substr(pos).starts_with(token) && line.substr(pos + token.size()).starts_with("::")) {
        out.push_back({pos, c, pos + token.size() + 2});
        break;
      }
    }
  }
  return out;
}

void insert_if_valid(FeatureSet& set, Category c, const std::string& value) {
  if (value.empty()) return;
  set.insert(DrebinFeature(c, value));
}

}  // namespace

std::string_view to_string(PromptKind kind) {
  switch (kind) {
    case PromptKind::kStepB: return "step_b";
    case PromptKind::kStepC: return "step_c";
    case PromptKind::kStepD: return "step_d";
  }
  return "?";
}

PromptKind parse_prompt_kind(std::string_view text) {
  if (text == "step_b") return PromptKind::kStepB;
  if (text == "step_c") return PromptKind::kStepC;
  if (text == "step_d") return PromptKind::kStepD;
  fail(ErrorCode::kInvalidArgument, "unknown prompt kind '" + std::string(text) + "'");
}

std::string_view to_string(AgentRole role) {
  return role == AgentRole::kManipulator ? "manipulator" : "analyzer";
}

AgentRole role_of(PromptKind kind) {
  return kind == PromptKind::kStepC ? AgentRole::kAnalyzer : AgentRole::kManipulator;
}

std::string step_d_query(const FeatureSet& features, std::string_view explanation) {
  return std::string(kFeaturesHeading) + feature_block(features) + std::string(kExplanationHeading) +
         std::string(explanation);
}

std::string build_prompt(PromptKind kind, const ContextWindow& context, const FeatureSet& features,
                         const std::optional<std::string>& explanation,
                         const std::optional<DrebinFeature>& last_added) {
  require(!features.empty(), "prompt needs at least one input feature");
  const auto ctx = context.render();
  switch (kind) {
    case PromptKind::kStepB:
      return std::string(kStepBSystem) + "\ncontext: " + ctx + std::string(kFeaturesLabel) + feature_block(features);
    case PromptKind::kStepC: {
      std::vector<DrebinFeature> sorted(features.begin(), features.end());
      std::sort(sorted.begin(), sorted.end());
      FeatureSet canonical;
      for (auto& f : sorted) canonical.insert(f);
      return std::string(kStepCSystem) + "\ncontext: " + ctx + std::string(kFeaturesLabel) +
             feature_block(canonical);
    }
    case PromptKind::kStepD: {
      require(last_added.has_value(), "step_d prompt needs the last added feature");
      require(explanation.has_value() && !explanation->empty(), "step_d prompt needs the analyzer explanation");
      const auto system = replace_all(std::string(kStepDSystem), "{LAST ADDED FEATURE}", last_added->to_string());
      return system + "\ncontext: " + ctx + std::string(kFeaturesExplanationLabel) +
             step_d_query(features, *explanation);
    }
  }
  fail(ErrorCode::kInvalidArgument, "unknown prompt kind");
}

FeatureSet prompt_features(std::string_view prompt) {
  std::string_view query;
  if (const auto p = prompt.rfind(kFeaturesExplanationLabel); p != std::string_view::npos) {
    query = prompt.substr(p + kFeaturesExplanationLabel.size());
    if (query.starts_with(kFeaturesHeading)) query.remove_prefix(kFeaturesHeading.size());
    if (const auto e = query.rfind(kExplanationHeading); e != std::string_view::npos) query = query.substr(0, e);
  } else if (const auto q = prompt.rfind(kFeaturesLabel); q != std::string_view::npos) {
    query = prompt.substr(q + kFeaturesLabel.size());
  } else {
    fail(ErrorCode::kMalformedInput, "prompt has no input-features section");
  }
  FeatureSet out;
  // The block ends at the first blank line; anything after it is a note.
  for (const auto& line : text::split_lines(query)) {
    const auto t = text::trim(line);
    if (t.empty()) break;
    out.insert(DrebinFeature::parse(t));
  }
  return out;
}

std::string_view to_string(Verdict v) {
  return v == Verdict::kMalicious ? "Malicious" : "Benign";
}

ManipulatorOutput parse_manipulator_output(std::string_view raw) {
  ManipulatorOutput out;
  out.raw = std::string(raw);
  for (const auto& original : text::split_lines(raw)) {
    std::string line = strip_bullet(original);
    if (line.starts_with("```")) continue;
    std::erase(line, '`');
    while (!line.empty() && (line.front() == '"' || line.front() == '\'')) line.erase(line.begin());
    const auto mentions = find_mentions(line);
    if (mentions.size() == 1 && mentions[0].pos == 0) {
      insert_if_valid(out.proposed, mentions[0].category, strip_trailing_junk(line.substr(mentions[0].value_start)));
      continue;
    }
    for (const auto& m : mentions) {
      auto end = m.value_start;
      while (end < line.size() && !std::isspace(static_cast<unsigned char>(line[end]))) ++end;
      insert_if_valid(out.proposed, m.category, strip_trailing_junk(line.substr(m.value_start, end - m.value_start)));
    }
  }
  if (out.proposed.empty()) fail(ErrorCode::kUnparseableResponse, "no category::value lines in manipulator output");
  return out;
}

AnalyzerVerdict parse_analyzer_output(std::string_view raw) {
  const auto lower = text::to_lower(raw);
  auto find_word = [&](std::string_view word) -> std::size_t {
    for (auto p = lower.find(word); p != std::string::npos; p = lower.find(word, p + 1)) {
      const bool left = p == 0 || !word_char(lower[p - 1]);
      const bool right = p + word.size() >= lower.size() || !word_char(lower[p + word.size()]);
      if (left && right) return p;
    }
    return std::string::npos;
  };
  const auto mal = find_word("malicious");
  const auto ben = find_word("benign");
  if (mal == std::string::npos && ben == std::string::npos) {
    fail(ErrorCode::kUnparseableResponse, "analyzer output names neither Malicious nor Benign");
  }
  AnalyzerVerdict v;
  std::size_t pos, len;
  if (mal < ben) {
    v.label = Verdict::kMalicious;
    pos = mal;
    len = 9;
  } else {
    v.label = Verdict::kBenign;
    pos = ben;
    len = 6;
  }
  std::string_view rest = raw.substr(pos + len);
  for (;;) {
    if (rest.starts_with("\xE2\x80\x94") || rest.starts_with("\xE2\x80\x93")) {
      rest.remove_prefix(3);
    } else if (!rest.empty() && (std::isspace(static_cast<unsigned char>(rest[0])) ||
                                 std::ispunct(static_cast<unsigned char>(rest[0])))) {
      rest.remove_prefix(1);
    } else {
      break;
    }
  }
  v.explanation = std::string(text::trim(rest));
  if (v.explanation.empty()) v.explanation = std::string(text::trim(raw.substr(0, pos)));
  if (v.explanation.empty()) v.explanation = std::string(text::trim(raw));
  return v;
}

// ---------------------------------------------------------------------------

double SystemClock::now() {
  using namespace std::chrono;
  return duration<double>(steady_clock::now().time_since_epoch()).count();
}

void SystemClock::sleep_for(double seconds) {
  if (seconds > 0) std::this_thread::sleep_for(std::chrono::duration<double>(seconds));
}

double SimulatedClock::now() {
  std::lock_guard lock(mutex_);
  return now_;
}

void SimulatedClock::sleep_for(double seconds) {
  std::lock_guard lock(mutex_);
  if (seconds <= 0) return;
  now_ += seconds;
  slept_ += seconds;
}

double SimulatedClock::total_slept() const {
  std::lock_guard lock(mutex_);
  return slept_;
}

std::size_t estimate_tokens(std::string_view text) {
  return (text.size() + 3) / 4;
}

RateLimiter::RateLimiter(double tokens_per_minute, Clock& clock)
    : capacity_(tokens_per_minute), per_second_(tokens_per_minute / 60.0), clock_(clock) {
  require(tokens_per_minute > 0 && std::isfinite(tokens_per_minute), "rate limit must be positive");
  level_ = capacity_;
  last_ = clock_.now();
}

void RateLimiter::refill_locked() {
  const double t = clock_.now();
  level_ = std::min(capacity_, level_ + (t - last_) * per_second_);
  last_ = t;
}

void RateLimiter::acquire(std::size_t tokens) {
  const double cost = static_cast<double>(tokens);
  const double need = std::min(cost, capacity_);
  for (;;) {
    double wait;
    {
      std::lock_guard lock(mutex_);
      refill_locked();
      if (level_ >= need) {
        level_ -= cost;
        return;
      }
      wait = (need - level_) / per_second_;
    }
    clock_.sleep_for(wait);
  }
}

double RateLimiter::level() {
  std::lock_guard lock(mutex_);
  refill_locked();
  return level_;
}

// ---------------------------------------------------------------------------

std::vector<std::string> BackendDescriptor::problems() const {
  std::vector<std::string> out;
  static const std::vector<std::string> types{"http", "scripted", "echo", "greedy-linear", "surrogate-linear"};
  if (name.empty()) out.push_back("backend name is empty");
  if (std::find(types.begin(), types.end(), type) == types.end()) {
    out.push_back("backend '" + name + "' has unknown type '" + type + "'");
  }
  if (type == "http" && endpoint.empty()) out.push_back("backend '" + name + "' needs an endpoint");
  if (type == "http" && model.empty()) out.push_back("backend '" + name + "' needs a model");
  if (temperature != 0.0) out.push_back("backend '" + name + "' temperature must be 0");
  if (!(tokens_per_minute >= 0)) out.push_back("backend '" + name + "' rate limit must be >= 0");
  if (max_in_flight == 0) out.push_back("backend '" + name + "' max_in_flight must be >= 1");
  if (!(backoff_seconds >= 0)) out.push_back("backend '" + name + "' backoff must be >= 0");
  if (context_tokens == 0) out.push_back("backend '" + name + "' context_tokens must be >= 1");
  return out;
}

std::string EchoBackend::complete(const BackendRequest& request) {
  return feature_block(prompt_features(request.prompt));
}

ScriptedBackend::ScriptedBackend(AgentRole role, std::vector<ScriptStep> steps) : role_(role) {
  for (auto& s : steps) {
    if (s.role == role) steps_.push_back(std::move(s));
  }
}

std::string ScriptedBackend::complete(const BackendRequest& request) {
  ScriptStep step;
  {
    std::lock_guard lock(mutex_);
    if (steps_.empty()) {
      fail(ErrorCode::kMalformedInput,
           "script for the " + std::string(to_string(role_)) + " ran out at a " +
               std::string(to_string(request.kind)) + " request");
    }
    step = std::move(steps_.front());
    steps_.pop_front();
  }
  if (step.kind != request.kind) {
    fail(ErrorCode::kMalformedInput, "script expected a " + std::string(to_string(step.kind)) + " request, got " +
                                         std::string(to_string(request.kind)));
  }
  if (step.fail) fail(ErrorCode::kBackendUnavailable, "scripted transport failure");
  if (step.response.find("{INPUT}") != std::string::npos) {
    return replace_all(step.response, "{INPUT}", feature_block(prompt_features(request.prompt)));
  }
  return step.response;
}

std::size_t ScriptedBackend::remaining() const {
  std::lock_guard lock(mutex_);
  return steps_.size();
}

double LinearSurrogate::margin(const FeatureSet& set) const {
  double m = bias;
  for (const auto& f : set) {
    if (const auto i = vocabulary->index_of(f)) m += weights[*i];
  }
  return m;
}

GreedyLinearBackend::GreedyLinearBackend(LinearSurrogate surrogate) : surrogate_(std::move(surrogate)) {
  require(surrogate_.vocabulary && surrogate_.weights.size() == surrogate_.vocabulary->dimension(),
          "surrogate weights do not match its vocabulary");
  for (std::uint32_t i = 0; i < surrogate_.weights.size(); ++i) {
    if (surrogate_.weights[i] < 0) benign_order_.push_back(i);
  }
  std::stable_sort(benign_order_.begin(), benign_order_.end(),
                   [&](auto a, auto b) { return surrogate_.weights[a] < surrogate_.weights[b]; });
}

std::string GreedyLinearBackend::complete(const BackendRequest& request) {
  require(role_of(request.kind) == AgentRole::kManipulator, "greedy manipulator cannot answer analyzer prompts");
  auto features = prompt_features(request.prompt);
  for (auto i : benign_order_) {
    const auto& candidate = surrogate_.vocabulary->feature_at(i);
    if (!features.contains(candidate)) {
      features.insert(candidate);
      break;
    }
  }
  return feature_block(features);
}

SurrogateLinearBackend::SurrogateLinearBackend(LinearSurrogate surrogate) : surrogate_(std::move(surrogate)) {
  require(surrogate_.vocabulary && surrogate_.weights.size() == surrogate_.vocabulary->dimension(),
          "surrogate weights do not match its vocabulary");
}

std::string SurrogateLinearBackend::complete(const BackendRequest& request) {
  require(request.kind == PromptKind::kStepC, "surrogate analyzer only answers analysis prompts");
  const auto features = prompt_features(request.prompt);
  if (surrogate_.margin(features) <= 0) {
    return "Benign. The benign indicators outweigh the suspicious ones.";
  }
  std::vector<std::pair<double, std::string>> strongest;
  for (const auto& f : features) {
    if (const auto i = surrogate_.vocabulary->index_of(f); i && surrogate_.weights[*i] > 0) {
      strongest.emplace_back(surrogate_.weights[*i], f.to_string());
    }
  }
  std::sort(strongest.begin(), strongest.end(),
            [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
  std::string why = "Malicious. The strongest indicators are";
  for (std::size_t i = 0; i < std::min<std::size_t>(3, strongest.size()); ++i) {
    why += (i ? ", " : " ") + strongest[i].second;
  }
  return why + ".";
}

// ---------------------------------------------------------------------------

AgentInvoker::AgentInvoker(BackendDescriptor descriptor, std::shared_ptr<Backend> backend, Clock& clock,
                           std::shared_ptr<RateLimiter> limiter)
    : descriptor_(std::move(descriptor)), backend_(std::move(backend)), clock_(clock), limiter_(std::move(limiter)) {
  const auto problems = descriptor_.problems();
  if (!problems.empty()) fail(ErrorCode::kConfigInvalid, text::join(problems, "; "));
  require(backend_ != nullptr, "invoker needs a backend");
  if (!limiter_ && descriptor_.tokens_per_minute > 0) {
    limiter_ = std::make_shared<RateLimiter>(descriptor_.tokens_per_minute, clock_);
  }
}

std::string AgentInvoker::invoke(PromptKind kind, const std::string& prompt) {
  const auto tokens = estimate_tokens(prompt);
  if (tokens > descriptor_.context_tokens) {
    fail(ErrorCode::kPromptTooLarge, "prompt of ~" + std::to_string(tokens) + " tokens exceeds the " +
                                         std::to_string(descriptor_.context_tokens) + "-token context of '" +
                                         descriptor_.name + "'");
  }
  {
    std::unique_lock lock(slots_mutex_);
    slots_cv_.wait(lock, [&] { return in_flight_ < descriptor_.max_in_flight; });
    ++in_flight_;
  }
  struct Release {
    AgentInvoker* self;
    ~Release() {
      {
        std::lock_guard lock(self->slots_mutex_);
        --self->in_flight_;
      }
      self->slots_cv_.notify_one();
    }
  } release{this};

  if (limiter_) limiter_->acquire(tokens);
  double delay = descriptor_.backoff_seconds;
  for (std::size_t attempt = 0;; ++attempt) {
    try {
      return backend_->complete({kind, prompt});
    } catch (const Error& e) {
      if (!e.retryable()) throw;
      if (attempt >= descriptor_.max_retries) {
        fail(ErrorCode::kBackendUnavailable, "'" + descriptor_.name + "' failed after " +
                                                 std::to_string(descriptor_.max_retries) + " retries: " + e.what());
      }
    }
    clock_.sleep_for(delay);
    delay *= 2;
  }
}

}  // namespace droidlab
