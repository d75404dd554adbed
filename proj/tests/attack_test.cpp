#include <doctest.h>

#include <json.hpp>

#include "droidlab/attack.hpp"
#include "droidlab/error.hpp"
#include "droidlab/rng.hpp"

using namespace droidlab;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::kIo;
}

DrebinFeature F(const char* s) { return DrebinFeature::parse(s); }

const DrebinFeature A = F("permission::A"), B = F("permission::B"), C = F("hardware::C"), D = F("hardware::D"),
                    E = F("url::E");

struct Fixture {
  HashingEmbeddingProvider provider{0, 64};
  ChunkIndex index = ChunkIndex::build(chunk_corpus(load_corpus(DROIDLAB_FIXTURES "/corpus")), provider);
  RagEngine rag{index, provider};
  SimulatedClock clock;
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

ScriptStep manip(PromptKind kind, std::string response) {
  return {AgentRole::kManipulator, kind, std::move(response)};
}
ScriptStep analyze(std::string response) {
  return {AgentRole::kAnalyzer, PromptKind::kStepC, std::move(response)};
}

AttackTrace run_script(const FeatureSet& x, std::vector<ScriptStep> script, std::size_t max_attempts = 10) {
  Scenario s;
  s.name = "inline";
  s.sample = x;
  s.max_attempts = max_attempts;
  s.script = std::move(script);
  return run_scenario(s, fixture().rag, fixture().clock);
}

// Brute-force reading of the ledger rules: enumerate every candidate g and
// compare whole sets.
DeltaKind oracle(const FeatureSet& x, const FeatureSet& rho, const std::optional<DrebinFeature>& f,
                 const FeatureSet& proposed, const std::vector<DrebinFeature>& universe) {
  const auto base = x.united(rho);
  for (const auto& g : universe) {
    if (base.contains(g)) continue;
    auto add = base;
    add.insert(g);
    if (add == proposed) return DeltaKind::kAdd;
    if (f) {
      auto rep = x.united(rho.minus(FeatureSet{*f}));
      rep.insert(g);
      if (rep == proposed) return DeltaKind::kReplace;
    }
  }
  return DeltaKind::kInvalid;
}

DetectorModel linear_detector(std::vector<double> w, double bias) {
  const auto dim = w.size();
  return DetectorModel(DetectorKind::kSvm, dim, 1, SvmParameters{std::move(w), bias, 1.0});
}

}  // namespace

TEST_CASE("classify_delta") {
  const FeatureSet x{A, B};
  auto c = classify_delta(x, {}, std::nullopt, FeatureSet{A, B, C});
  CHECK(c.kind == DeltaKind::kAdd);
  CHECK(*c.added == C);

  c = classify_delta(x, FeatureSet{C}, C, FeatureSet{A, B, D});
  CHECK(c.kind == DeltaKind::kReplace);
  CHECK(*c.removed == C);
  CHECK(*c.added == D);

  c = classify_delta(x, FeatureSet{C}, C, FeatureSet{A, C, D});
  CHECK(c.kind == DeltaKind::kInvalid);
  CHECK(c.reason == "missing original feature");

  CHECK(classify_delta(x, {}, std::nullopt, FeatureSet{A, B}).reason == "no change");
  CHECK(classify_delta(x, {}, std::nullopt, FeatureSet{A, B, C, D}).reason == "multiple additions");
  CHECK(classify_delta(x, FeatureSet{C, D}, D, FeatureSet{A, B, D, E}).reason == "removed non-last feature");
  CHECK(classify_delta(x, FeatureSet{C}, C, FeatureSet{A, B}).reason == "removal without an addition");
  // Re-adding the removed feature is not a replacement.
  CHECK(classify_delta(x, FeatureSet{C}, C, FeatureSet{A, B, C}).reason == "no change");
}

TEST_CASE("classify_delta agrees with the set-algebra oracle on random proposals") {
  Rng rng(2024);
  std::vector<DrebinFeature> universe;
  for (int i = 0; i < 12; ++i) universe.push_back(DrebinFeature(Category::kPermission, "p" + std::to_string(i)));
  std::size_t adds = 0, replaces = 0;
  for (int seq = 0; seq < 1000; ++seq) {
    FeatureSet x, rho;
    std::optional<DrebinFeature> f;
    for (const auto& u : universe) {
      if (rng.bernoulli(0.3)) x.insert(u);
    }
    if (x.empty()) x.insert(universe[0]);
    for (int step = 0; step < 6; ++step) {
      // Proposals are mostly near-valid edits of x ∪ rho, sometimes random.
      auto proposed = x.united(rho);
      const auto r = rng.below(6);
      if (r == 5) {
        proposed = FeatureSet{};
        for (const auto& u : universe) {
          if (rng.bernoulli(0.5)) proposed.insert(u);
        }
      } else {
        for (std::size_t k = 0; k < r % 3 + (r == 4); ++k) proposed.insert(universe[rng.below(universe.size())]);
        if (r >= 3 && !proposed.empty()) proposed.erase(proposed[rng.below(proposed.size())]);
      }
      const auto c = classify_delta(x, rho, f, proposed);
      REQUIRE(c.kind == oracle(x, rho, f, proposed, universe));
      if (c.kind != DeltaKind::kInvalid) {
        REQUIRE(x.is_subset_of(proposed));
        REQUIRE(proposed.minus(x).minus(rho).size() == 1);
        if (c.kind == DeltaKind::kAdd) {
          rho.insert(*c.added);
          ++adds;
        } else {
          rho.erase(*c.removed);
          rho.insert(*c.added);
          ++replaces;
        }
        f = c.added;
        REQUIRE(x.united(rho) == proposed);
      }
    }
  }
  CHECK(adds > 100);
  CHECK(replaces > 20);
}

TEST_CASE("attack loop state machine") {
  const FeatureSet x{A, B};

  SUBCASE("evade at the first attempt") {
    const auto t = run_script(x, {manip(PromptKind::kStepB, "{INPUT}\nhardware::C"), analyze("Benign, looks fine")});
    CHECK(t.outcome == Outcome::kEvaded);
    CHECK(t.attempts() == 1);
    CHECK(t.perturbation == FeatureSet{C});
    CHECK(t.records[0].delta == "add");
    CHECK(t.records[0].verdict == "Benign");
  }
  SUBCASE("capped at the attempt limit") {
    std::vector<ScriptStep> script;
    script.push_back(manip(PromptKind::kStepB, "{INPUT}\nhardware::C0"));
    script.push_back(analyze("Malicious: still sends SMS"));
    for (int i = 1; i < 10; ++i) {
      script.push_back(manip(PromptKind::kStepD, "{INPUT}\nhardware::C" + std::to_string(i)));
      script.push_back(analyze("Malicious: still sends SMS"));
    }
    const auto t = run_script(x, script);
    CHECK(t.outcome == Outcome::kCapped);
    CHECK(t.attempts() == 10);
    CHECK(t.perturbation.size() == 10);
    for (std::size_t i = 0; i < t.records.size(); ++i) {
      CHECK(t.records[i].attempt == i + 1);
      CHECK(t.records[i].cost == i + 1);
      CHECK(t.records[i].kind == (i == 0 ? PromptKind::kStepB : PromptKind::kStepD));
    }
  }
  SUBCASE("add, then replace, then evade") {
    const auto t = run_script(x, {manip(PromptKind::kStepB, "{INPUT}\nhardware::C"), analyze("Malicious because of SMS"),
                                  manip(PromptKind::kStepD, "permission::A\npermission::B\nhardware::D"),
                                  analyze("Benign")});
    REQUIRE(t.outcome == Outcome::kEvaded);
    CHECK(t.attempts() == 2);
    CHECK(t.perturbation == FeatureSet{D});
    CHECK(t.records[0].delta == "add");
    CHECK(t.records[0].cost == 1);
    CHECK(t.records[1].delta == "replace");
    CHECK(*t.records[1].removed == C);
    CHECK(*t.records[1].added == D);
    CHECK(t.records[1].cost == 1);
  }
  SUBCASE("an invalid proposal gets one re-prompt within the same attempt") {
    const auto t = run_script(x, {manip(PromptKind::kStepB, "permission::A\nhardware::C"),
                                  manip(PromptKind::kStepB, "{INPUT}\nhardware::C"), analyze("benign")});
    CHECK(t.outcome == Outcome::kEvaded);
    CHECK(t.attempts() == 1);
    CHECK(t.records[0].manipulator_prompts.size() == 2);
    CHECK(t.records[0].manipulator_prompts[0] != t.records[0].manipulator_prompts[1]);
  }
  SUBCASE("two unusable proposals consume the attempt without analysis") {
    const auto t = run_script(x, {manip(PromptKind::kStepB, "I cannot do that."),
                                  manip(PromptKind::kStepB, "Still no."),
                                  manip(PromptKind::kStepB, "{INPUT}\nhardware::C"), analyze("Benign")});
    CHECK(t.outcome == Outcome::kEvaded);
    CHECK(t.attempts() == 2);
    CHECK(t.records[0].delta == "invalid");
    CHECK(t.records[0].reason == "unparseable response");
    CHECK_FALSE(t.records[0].analyzer_prompt.has_value());
    CHECK(t.records[0].cost == 0);
    CHECK(t.records[1].kind == PromptKind::kStepB);
  }
  SUBCASE("backend failure aborts") {
    ScriptStep broken = manip(PromptKind::kStepB, "");
    broken.fail = true;
    const auto t = run_script(x, {broken});
    CHECK(t.outcome == Outcome::kAborted);
    CHECK(t.attempts() == 1);
    CHECK(t.records[0].error == "backend-unavailable");
  }
  SUBCASE("a script that does not match the loop is an error, not an outcome") {
    CHECK(code_of([&] { run_script(x, {manip(PromptKind::kStepD, "x")}); }) == ErrorCode::kMalformedInput);
  }
  SUBCASE("traces are byte-identical across runs") {
    const std::vector<ScriptStep> script{manip(PromptKind::kStepB, "{INPUT}\nhardware::C"),
                                         analyze("Malicious because of SMS"),
                                         manip(PromptKind::kStepD, "{INPUT}\nhardware::D"), analyze("Benign")};
    CHECK(run_script(x, script).serialize() == run_script(x, script).serialize());
  }
}

TEST_CASE("addition-only invariant over random scripts") {
  Rng rng(77);
  const FeatureSet x{A, B};
  const std::vector<std::string> extras{"hardware::C", "hardware::D", "url::E", "url::F"};
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<ScriptStep> script;
    for (int i = 0; i < 40; ++i) {
      std::string body;
      switch (rng.below(4)) {
        case 0: body = "{INPUT}\n" + extras[rng.below(4)]; break;
        case 1: body = "permission::A\npermission::B\n" + extras[rng.below(4)]; break;
        case 2: body = "permission::B\n" + extras[rng.below(4)]; break;
        default: body = "{INPUT}\n" + extras[rng.below(4)] + "\n" + extras[rng.below(4)]; break;
      }
      script.push_back(manip(PromptKind::kStepB, body));
      script.push_back(manip(PromptKind::kStepD, body));
      script.push_back(analyze(rng.bernoulli(0.2) ? "Benign" : "Malicious: nope"));
    }
    // Feed the loop whatever kind it asks for.
    struct Adaptive final : Backend {
      std::vector<ScriptStep> steps;
      std::size_t i = 0;
      std::string complete(const BackendRequest& r) override {
        while (steps[i].kind != r.kind) ++i;
        ScriptedBackend one(steps[i].role, {steps[i]});
        ++i;
        return one.complete(r);
      }
    };
    auto m = std::make_shared<Adaptive>();
    auto an = std::make_shared<Adaptive>();
    for (auto& s : script) (s.role == AgentRole::kManipulator ? m : an)->steps.push_back(s);
    BackendDescriptor d;
    d.name = "fuzz";
    d.type = "scripted";
    AgentInvoker mi(d, m, fixture().clock), ai(d, an, fixture().clock);
    const auto t = run_attack(x, mi, ai, fixture().rag, AttackConfig{});
    CHECK(t.records.size() <= 10);
    CHECK(t.perturbation.size() <= t.attempts());
    CHECK(x.is_subset_of(t.adversarial()));
    for (const auto& f : t.perturbation) CHECK_FALSE(x.contains(f));
    CHECK((t.outcome == Outcome::kEvaded) == (t.records.back().verdict == std::optional<std::string>("Benign")));
    std::size_t prev = 0;
    for (const auto& r : t.records) {
      if (r.delta == "add") CHECK(r.cost == prev + 1);
      if (r.delta == "replace" || r.delta == "invalid") CHECK(r.cost == prev);
      prev = r.cost;
    }
  }
}

TEST_CASE("finalize") {
  // Vocabulary order is sorted: C, A, B.
  auto vocab = FeatureVocabulary({A, B, C});
  const FeatureSet x{A, B};
  AttackTrace t;
  t.original = x;
  t.outcome = Outcome::kEvaded;

  SUBCASE("constant malicious detector") {
    t.perturbation = FeatureSet{C};
    CHECK_FALSE(finalize(t, vocab, linear_detector({0, 0, 0}, 1.0)).evaded);
  }
  SUBCASE("out-of-vocabulary additions change nothing") {
    t.perturbation = FeatureSet{D, E};
    const auto det = linear_detector({-5.0, 0.4, 0.3}, 0.0);
    const auto v = finalize(t, vocab, det);
    CHECK(v.dropped == 2);
    CHECK(v.prediction.score == detector_verdict(x, vocab, det).prediction.score);
    CHECK_FALSE(v.evaded);
  }
  SUBCASE("one strongly benign feature flips a hand-built linear model") {
    // margin(x) = 0.4 + 0.3 - 0.2 = 0.5 > 0; adding C contributes -5 -> -4.5.
    const auto det = linear_detector({-5.0, 0.4, 0.3}, -0.2);
    CHECK(detector_verdict(x, vocab, det).prediction.label == Label::kMalicious);
    t.perturbation = FeatureSet{C};
    const auto v = finalize(t, vocab, det);
    CHECK(v.evaded);
    CHECK(v.prediction.score == doctest::Approx(-4.5));
  }
  SUBCASE("contract") {
    t.outcome = Outcome::kCapped;
    CHECK(code_of([&] { finalize(t, vocab, linear_detector({0, 0, 0}, 1)); }) == ErrorCode::kInvalidArgument);
    t.outcome = Outcome::kEvaded;
    CHECK(code_of([&] { finalize(t, vocab, linear_detector({0, 0}, 1)); }) == ErrorCode::kInvalidArgument);
  }
}

TEST_CASE("campaigns are deterministic across worker counts") {
  // Sorted vocabulary: C, D, A, B.
  auto vocab = FeatureVocabulary({A, B, C, D});
  const auto det = linear_detector({-1.5, -0.2, 1.0, 1.0}, 0.0);
  std::vector<Sample> population;
  for (int i = 0; i < 12; ++i) {
    FeatureSet s{A};
    if (i % 2) s.insert(B);
    s.insert(DrebinFeature(Category::kUrl, "host" + std::to_string(i)));
    population.push_back({"s" + std::to_string(i), s, Label::kMalicious});
  }
  const std::vector<ScriptStep> script{manip(PromptKind::kStepB, "{INPUT}\nhardware::C"), analyze("Benign")};
  const auto agents = scripted_agents(script, fixture().clock);
  CampaignOptions serial, parallel;
  parallel.workers = 4;
  const auto one = run_campaign(population, agents, fixture().rag, AttackConfig{}, vocab, det, serial);
  const auto four = run_campaign(population, agents, fixture().rag, AttackConfig{}, vocab, det, parallel);
  CHECK(results_table(one) == results_table(four));
  for (std::size_t i = 0; i < one.size(); ++i) CHECK(one[i].trace.serialize() == four[i].trace.serialize());

  // Even samples: 1 - 1.5 < 0 evades; odd samples: 2 - 1.5 > 0 does not.
  const auto summary = summarize_campaign(one, 10);
  CHECK(summary.attacked == 12);
  CHECK(summary.evaded == 6);
  CHECK(summary.asr == 0.5);
  CHECK(summary.mean_attempts == 1.0);
}

TEST_CASE("scenario files") {
  const auto s = parse_scenario(R"({
    "name": "demo",
    "sample": ["permission::A", "permission::B"],
    "max_attempts": 3,
    "script": [
      {"role": "manipulator", "kind": "step_b", "response": "{INPUT}\nhardware::C"},
      {"role": "analyzer", "kind": "step_c", "response": "Malicious: x", "repeat": 3},
      {"role": "manipulator", "kind": "step_d", "response": "{INPUT}\nhardware::D", "repeat": 3}
    ],
    "expect": {"outcome": "capped", "attempts": 3, "perturbation": ["hardware::C", "hardware::D"]}
  })");
  CHECK(s.script.size() == 7);
  const auto t = run_scenario(s, fixture().rag, fixture().clock);
  CHECK(t.outcome == s.expect.outcome);
  CHECK(t.attempts() == s.expect.attempts);
  // The third attempt re-proposes D, which is already present: no change,
  // twice, so the attempt is consumed.
  CHECK(t.perturbation == s.expect.perturbation);
  CHECK(code_of([] { parse_scenario("{}"); }) == ErrorCode::kMalformedInput);
  CHECK(code_of([] {
          parse_scenario(R"({"name":"x","sample":["permission::A"],"script":[{"role":"judge","kind":"step_b"}],
                            "expect":{"outcome":"capped","attempts":1,"perturbation":[]}})");
        }) == ErrorCode::kMalformedInput);
}
