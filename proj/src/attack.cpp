#include "droidlab/attack.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <thread>

#include <json.hpp>

#include "droidlab/error.hpp"
#include "droidlab/projection.hpp"
#include "droidlab/text.hpp"

namespace droidlab {

using ojson = nlohmann::ordered_json;

std::string_view to_string(DeltaKind kind) {
  switch (kind) {
    case DeltaKind::kAdd: return "add";
    case DeltaKind::kReplace: return "replace";
    case DeltaKind::kInvalid: return "invalid";
  }
  return "?";
}

DeltaClassification classify_delta(const FeatureSet& x, const FeatureSet& rho,
                                   const std::optional<DrebinFeature>& last_added, const FeatureSet& proposed) {
  DeltaClassification out;
  if (!x.is_subset_of(proposed)) {
    out.reason = "missing original feature";
    return out;
  }
  const auto extra = proposed.minus(x).minus(rho);
  const auto dropped = rho.minus(proposed);
  if (extra.size() > 1) {
    out.reason = "multiple additions";
    return out;
  }
  if (extra.empty()) {
    out.reason = dropped.empty() ? "no change" : "removal without an addition";
    return out;
  }
  if (dropped.empty()) {
    out.kind = DeltaKind::kAdd;
    out.added = extra[0];
    return out;
  }
  if (dropped.size() == 1 && last_added && dropped[0] == *last_added) {
    out.kind = DeltaKind::kReplace;
    out.added = extra[0];
    out.removed = *last_added;
    return out;
  }
  out.reason = "removed non-last feature";
  return out;
}

void AttackConfig::validate() const {
  if (max_attempts < 1) fail(ErrorCode::kConfigInvalid, "max attempts must be >= 1");
  if (top_k < 1) fail(ErrorCode::kConfigInvalid, "retrieval k must be >= 1");
}

std::string_view to_string(Outcome o) {
  switch (o) {
    case Outcome::kEvaded: return "evaded";
    case Outcome::kCapped: return "capped";
    case Outcome::kAborted: return "aborted";
  }
  return "?";
}

Outcome parse_outcome(std::string_view text) {
  if (text == "evaded") return Outcome::kEvaded;
  if (text == "capped") return Outcome::kCapped;
  if (text == "aborted") return Outcome::kAborted;
  fail(ErrorCode::kMalformedInput, "unknown outcome '" + std::string(text) + "'");
}

namespace {

ojson feature_list(const FeatureSet& s) {
  ojson out = ojson::array();
  for (const auto& f : s) out.push_back(f.to_string());
  return out;
}

ojson record_json(const AttemptRecord& r) {
  ojson j;
  j["attempt"] = r.attempt;
  j["prompt_kind"] = to_string(r.kind);
  j["manipulator_prompts"] = r.manipulator_prompts;
  j["manipulator_responses"] = r.manipulator_responses;
  j["delta"] = r.delta;
  if (r.added) j["added"] = r.added->to_string();
  if (r.removed) j["removed"] = r.removed->to_string();
  if (!r.reason.empty()) j["reason"] = r.reason;
  if (r.analyzer_prompt) j["analyzer_prompt"] = *r.analyzer_prompt;
  if (r.verdict) j["verdict"] = *r.verdict;
  if (r.explanation) j["explanation"] = *r.explanation;
  j["cost"] = r.cost;
  if (r.error) j["error"] = *r.error;
  return j;
}

std::string with_note(const std::string& prompt, const std::string& note, const std::string& reason) {
  auto n = note;
  if (const auto p = n.find("{REASON}"); p != std::string::npos) n.replace(p, 8, reason);
  return prompt + "\n\n" + n;
}

}  // namespace

std::string AttackTrace::serialize() const {
  std::string out;
  for (const auto& r : records) out += record_json(r).dump() + "\n";
  ojson summary;
  summary["outcome"] = to_string(outcome);
  summary["original"] = feature_list(original);
  summary["attempts"] = records.size();
  summary["cost"] = perturbation.size();
  summary["perturbation"] = feature_list(perturbation);
  out += summary.dump() + "\n";
  return out;
}

AttackTrace AttackTrace::parse(std::string_view text) {
  AttackTrace t;
  try {
    const auto lines = text::split_lines(text);
    std::vector<std::string_view> body;
    for (auto l : lines) {
      if (!text::trim(l).empty()) body.push_back(l);
    }
    if (body.empty()) fail(ErrorCode::kMalformedInput, "empty trace");
    auto features = [](const nlohmann::json& arr) {
      FeatureSet s;
      for (const auto& f : arr) s.insert(DrebinFeature::parse(f.get<std::string>()));
      return s;
    };
    for (std::size_t i = 0; i + 1 < body.size(); ++i) {
      const auto j = nlohmann::json::parse(body[i]);
      AttemptRecord r;
      r.attempt = j.at("attempt").get<std::size_t>();
      r.kind = parse_prompt_kind(j.at("prompt_kind").get<std::string>());
      r.manipulator_prompts = j.at("manipulator_prompts").get<std::vector<std::string>>();
      r.manipulator_responses = j.at("manipulator_responses").get<std::vector<std::string>>();
      r.delta = j.at("delta").get<std::string>();
      if (j.contains("added")) r.added = DrebinFeature::parse(j["added"].get<std::string>());
      if (j.contains("removed")) r.removed = DrebinFeature::parse(j["removed"].get<std::string>());
      r.reason = j.value("reason", std::string());
      if (j.contains("analyzer_prompt")) r.analyzer_prompt = j["analyzer_prompt"].get<std::string>();
      if (j.contains("verdict")) r.verdict = j["verdict"].get<std::string>();
      if (j.contains("explanation")) r.explanation = j["explanation"].get<std::string>();
      r.cost = j.at("cost").get<std::size_t>();
      if (j.contains("error")) r.error = j["error"].get<std::string>();
      t.records.push_back(std::move(r));
    }
    const auto summary = nlohmann::json::parse(body.back());
    t.outcome = parse_outcome(summary.at("outcome").get<std::string>());
    t.original = features(summary.at("original"));
    t.perturbation = features(summary.at("perturbation"));
    if (summary.at("attempts").get<std::size_t>() != t.records.size()) {
      fail(ErrorCode::kMalformedInput, "trace attempt count does not match its records");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kMalformedInput, std::string("trace: ") + e.what());
  }
  return t;
}

AttackTrace run_attack(const FeatureSet& x, AgentInvoker& manipulator, AgentInvoker& analyzer, const RagEngine& rag,
                       const AttackConfig& config) {
  config.validate();
  require(!x.empty(), "cannot attack an empty feature set");
  AttackTrace trace;
  trace.original = x;
  auto& rho = trace.perturbation;
  std::optional<DrebinFeature> last;
  std::optional<std::string> explanation;

  for (std::size_t a = 1; a <= config.max_attempts; ++a) {
    AttemptRecord rec;
    rec.attempt = a;
    try {
      const auto current = x.united(rho);
      rec.kind = explanation ? PromptKind::kStepD : PromptKind::kStepB;
      const auto prompt = build_prompt(rec.kind, rag.context_for(current, explanation), current, explanation, last);

      std::optional<DeltaClassification> delta;
      for (int round = 0; round < 2 && !delta; ++round) {
        const auto p = round == 0 ? prompt : with_note(prompt, config.reprompt_note, rec.reason);
        rec.manipulator_prompts.push_back(text::digest(p));
        const auto reply = manipulator.invoke(rec.kind, p);
        rec.manipulator_responses.push_back(text::digest(reply));
        try {
          auto c = classify_delta(x, rho, last, parse_manipulator_output(reply).proposed);
          if (c.kind == DeltaKind::kInvalid) {
            rec.reason = c.reason;
          } else {
            delta = std::move(c);
          }
        } catch (const Error& e) {
          if (e.code() != ErrorCode::kUnparseableResponse) throw;
          rec.reason = "unparseable response";
        }
      }
      if (!delta) {
        rec.cost = rho.size();
        trace.records.push_back(std::move(rec));
        continue;
      }

      rec.delta = std::string(to_string(delta->kind));
      rec.reason.clear();
      rec.added = delta->added;
      rec.removed = delta->removed;
      if (delta->removed) rho.erase(*delta->removed);
      rho.insert(*delta->added);
      last = delta->added;
      rec.cost = rho.size();

      const auto adversarial = x.united(rho);
      const auto analysis = build_prompt(PromptKind::kStepC, rag.context_for(adversarial), adversarial);
      rec.analyzer_prompt = text::digest(analysis);
      std::optional<AnalyzerVerdict> verdict;
      for (int round = 0; round < 2 && !verdict; ++round) {
        const auto reply = analyzer.invoke(PromptKind::kStepC, round == 0 ? analysis
                                                                          : with_note(analysis, config.reprompt_note,
                                                                                      "no verdict found"));
        try {
          verdict = parse_analyzer_output(reply);
        } catch (const Error& e) {
          if (e.code() != ErrorCode::kUnparseableResponse) throw;
        }
      }
      if (!verdict) {
        rec.verdict = "unparseable";
        trace.records.push_back(std::move(rec));
        continue;
      }
      rec.verdict = std::string(to_string(verdict->label));
      rec.explanation = text::digest(verdict->explanation);
      trace.records.push_back(std::move(rec));
      if (verdict->label == Verdict::kBenign) {
        trace.outcome = Outcome::kEvaded;
        return trace;
      }
      explanation = verdict->explanation;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kBackendUnavailable && e.code() != ErrorCode::kPromptTooLarge) throw;
      rec.error = std::string(to_string(e.code()));
      rec.cost = rho.size();
      trace.records.push_back(std::move(rec));
      trace.outcome = Outcome::kAborted;
      return trace;
    }
  }
  trace.outcome = Outcome::kCapped;
  return trace;
}

DetectorVerdict detector_verdict(const FeatureSet& features, const FeatureVocabulary& vocab,
                                 const DetectorModel& detector) {
  const std::size_t expected = detector.projection() ? detector.projection()->input_dim : detector.input_dim();
  if (vocab.dimension() != expected) {
    fail(ErrorCode::kInvalidArgument, "vocabulary has " + std::to_string(vocab.dimension()) +
                                          " features but the detector expects " + std::to_string(expected));
  }
  const auto enc = encode(features, vocab);
  DetectorVerdict v;
  v.prediction = detector.predict(enc.vector);
  v.dropped = enc.dropped;
  v.evaded = v.prediction.label == Label::kBenign;
  return v;
}

DetectorVerdict finalize(const AttackTrace& trace, const FeatureVocabulary& vocab, const DetectorModel& detector) {
  require(trace.outcome == Outcome::kEvaded, "only evaded traces are finalized");
  return detector_verdict(trace.adversarial(), vocab, detector);
}

std::vector<EpisodeOutcome> run_campaign(const std::vector<Sample>& population, const AgentFactory& agents,
                                         const RagEngine& rag, const AttackConfig& config,
                                         const FeatureVocabulary& vocab, const DetectorModel& detector,
                                         const CampaignOptions& options) {
  config.validate();
  std::vector<EpisodeOutcome> out(population.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto work = [&] {
    for (;;) {
      const auto i = next++;
      if (i >= population.size()) return;
      try {
        auto manipulator = agents(AgentRole::kManipulator);
        auto analyzer = agents(AgentRole::kAnalyzer);
        auto& ep = out[i];
        ep.sample_id = population[i].id;
        ep.trace = run_attack(population[i].features, *manipulator, *analyzer, rag, config);
        if (ep.trace.outcome == Outcome::kEvaded) ep.detector = finalize(ep.trace, vocab, detector);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        next = population.size();
        return;
      }
    }
  };
  const auto n = std::max<std::size_t>(1, std::min(options.workers, population.size()));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < n; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
  return out;
}

AttackSummary summarize_campaign(const std::vector<EpisodeOutcome>& episodes, std::size_t max_attempts,
                                 bool count_aborted) {
  std::vector<EpisodeResult> results;
  for (const auto& ep : episodes) {
    if (!count_aborted && ep.trace.outcome == Outcome::kAborted) continue;
    results.push_back({ep.success(), ep.trace.attempts()});
  }
  return attack_summary(results, max_attempts);
}

std::string results_table(const std::vector<EpisodeOutcome>& episodes) {
  std::string out = "sample_id,outcome,attempts,cost,analyzer_evaded,detector_label,success\n";
  for (const auto& ep : episodes) {
    out += ep.sample_id + "," + std::string(to_string(ep.trace.outcome)) + "," +
           std::to_string(ep.trace.attempts()) + "," + std::to_string(ep.trace.perturbation.size()) + "," +
           (ep.trace.outcome == Outcome::kEvaded ? "1" : "0") + "," +
           (ep.detector ? std::string(to_string(ep.detector->prediction.label)) : "") + "," +
           (ep.success() ? "1" : "0") + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------

Scenario parse_scenario(std::string_view json_text) {
  try {
    const auto j = nlohmann::json::parse(json_text);
    Scenario s;
    s.name = j.at("name").get<std::string>();
    for (const auto& f : j.at("sample")) s.sample.insert(DrebinFeature::parse(f.get<std::string>()));
    s.max_attempts = j.value("max_attempts", std::size_t{10});
    for (const auto& step : j.at("script")) {
      ScriptStep st;
      const auto role = step.at("role").get<std::string>();
      if (role == "manipulator") {
        st.role = AgentRole::kManipulator;
      } else if (role == "analyzer") {
        st.role = AgentRole::kAnalyzer;
      } else {
        fail(ErrorCode::kMalformedInput, "unknown role '" + role + "'");
      }
      st.kind = parse_prompt_kind(step.at("kind").get<std::string>());
      st.response = step.value("response", std::string());
      st.fail = step.value("fail", false);
      const auto repeat = step.value("repeat", std::size_t{1});
      for (std::size_t r = 0; r < repeat; ++r) s.script.push_back(st);
    }
    const auto& e = j.at("expect");
    s.expect.outcome = parse_outcome(e.at("outcome").get<std::string>());
    s.expect.attempts = e.at("attempts").get<std::size_t>();
    for (const auto& f : e.at("perturbation")) s.expect.perturbation.insert(DrebinFeature::parse(f.get<std::string>()));
    if (e.contains("detector_evaded")) s.expect.detector_evaded = e.at("detector_evaded").get<bool>();
    require(!s.sample.empty(), "scenario sample is empty");
    return s;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kMalformedInput, std::string("scenario: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kMalformedInput) throw;
    fail(ErrorCode::kMalformedInput, std::string("scenario: ") + e.what());
  }
}

Scenario load_scenario(const std::filesystem::path& path) {
  return parse_scenario(text::read_file(path));
}

std::vector<std::pair<std::filesystem::path, Scenario>> load_scenarios(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> paths;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") paths.push_back(entry.path());
  }
  std::sort(paths.begin(), paths.end());
  std::vector<std::pair<std::filesystem::path, Scenario>> out;
  for (const auto& p : paths) out.emplace_back(p, load_scenario(p));
  return out;
}

AgentFactory scripted_agents(std::vector<ScriptStep> script, Clock& clock) {
  return [script = std::move(script), &clock](AgentRole role) {
    BackendDescriptor d;
    d.name = std::string("scripted-") + std::string(to_string(role));
    d.type = "scripted";
    d.max_retries = 0;
    return std::make_shared<AgentInvoker>(d, std::make_shared<ScriptedBackend>(role, script), clock);
  };
}

AttackTrace run_scenario(const Scenario& scenario, const RagEngine& rag, Clock& clock) {
  const auto agents = scripted_agents(scenario.script, clock);
  auto manipulator = agents(AgentRole::kManipulator);
  auto analyzer = agents(AgentRole::kAnalyzer);
  AttackConfig config;
  config.max_attempts = scenario.max_attempts;
  config.top_k = rag.k();
  return run_attack(scenario.sample, *manipulator, *analyzer, rag, config);
}

}  // namespace droidlab
