// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Set DROIDLAB_UPDATE_GOLDENS=1 to rewrite the scenario goldens.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "droidlab/defense.hpp"
#include "droidlab/error.hpp"
#include "droidlab/harness.hpp"
#include "droidlab/rng.hpp"
#include "droidlab/synthetic.hpp"
#include "droidlab/text.hpp"

using namespace droidlab;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = DROIDLAB_FIXTURES;

struct Outcome_ {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  double limit_seconds;
  std::function<Outcome_()> run;
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string fmt_sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Shared synthetic setup, built once.

struct SyntheticWorld {
  std::vector<Sample> data;
  Split split;
  TrainedDetector svm;
};

const SyntheticWorld& world() {
  static const SyntheticWorld w = [] {
    auto data = generate_synthetic(SyntheticSpec{});
    auto split = split_dataset(data, 0.8, 11);
    TrainingConfig config;
    auto svm = train_detector(split.train, DetectorKind::kSvm, config);
    return SyntheticWorld{std::move(data), std::move(split), std::move(svm)};
  }();
  return w;
}

// ---------------------------------------------------------------------------

Outcome_ detector_sanity() {
  const auto& w = world();
  TrainingConfig config;
  config.trees = 100;
  std::string detail;
  bool ok = true;
  const std::vector<std::pair<DetectorKind, std::size_t>> runs{
      {DetectorKind::kSvm, 0}, {DetectorKind::kGbt, 0}, {DetectorKind::kNn, 256}};
  for (const auto& [kind, dim] : runs) {
    const auto d = train_detector(w.split.train, kind, config, dim, 1);
    const auto acc = rates(evaluate_detector(d, w.split.test)).acc;
    ok = ok && acc >= 0.95;
    detail += std::string(to_string(kind)) + " acc=" + fmt(acc) + " ";
  }
  detail += "(2000 samples, D=2048, noise 0.02, 80/20 split)";
  return {ok, detail};
}

Outcome_ gradient_check() {
  auto params = training::mlp_init(8, std::vector<std::size_t>{3}, 2024);
  Rng rng(77);
  for (auto& layer : params.layers) {
    for (auto& b : layer.bias) b = rng.uniform(-0.2, 0.2);
  }
  std::vector<std::vector<double>> batch(6, std::vector<double>(8));
  for (auto& row : batch) {
    for (auto& v : row) v = rng.uniform(-1, 1);
  }
  const std::vector<Label> labels{Label::kMalicious, Label::kBenign, Label::kBenign,
                                  Label::kMalicious, Label::kMalicious, Label::kBenign};
  MlpParameters grad;
  training::mlp_loss_and_gradient(params, batch, labels, &grad);
  const double h = 1e-6;
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto probe = [&](std::vector<double>& slots, const std::vector<double>& analytic) {
      for (std::size_t i = 0; i < slots.size(); ++i) {
        const double saved = slots[i];
        slots[i] = saved + h;
        const double up = training::mlp_loss_and_gradient(params, batch, labels, nullptr);
        slots[i] = saved - h;
        const double down = training::mlp_loss_and_gradient(params, batch, labels, nullptr);
        slots[i] = saved;
        const double numeric = (up - down) / (2 * h);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-7});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
        ++checked;
      }
    };
    probe(params.layers[l].weights, grad.layers[l].weights);
    probe(params.layers[l].bias, grad.layers[l].bias);
  }
  return {worst <= 1e-4 && checked == 8 * 3 + 3 + 3 + 1,
          "8-3-1 network, " + std::to_string(checked) + " parameters, max relative error " + fmt(worst * 1e6, 3) +
              "e-6"};
}

Outcome_ retrieval_oracle() {
  Rng rng(4242);
  std::vector<std::string> words;
  for (int i = 0; i < 600; ++i) words.push_back("w" + std::to_string(i));
  auto sentence = [&](std::size_t n) {
    std::string s;
    for (std::size_t i = 0; i < n; ++i) s += words[rng.below(words.size())] + " ";
    return s;
  };
  std::size_t mismatches = 0, compared = 0, largest = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const HashingEmbeddingProvider provider(static_cast<std::uint64_t>(trial), 96);
    const auto n = 5 + rng.below(4996);
    largest = std::max<std::size_t>(largest, n);
    std::vector<Chunk> chunks;
    for (std::uint32_t i = 0; i < n; ++i) chunks.push_back({i, "doc", sentence(3 + rng.below(10))});
    const auto index = ChunkIndex::build(chunks, provider);
    for (int q = 0; q < 50; ++q) {
      const auto query = sentence(2 + rng.below(8));
      const auto got = retrieve_top_k(index, provider, query, 5);
      // Exhaustive scan with a full sort by (distance, id).
      const auto e = provider.embed(query);
      std::vector<Hit> all;
      for (std::uint32_t id = 0; id < index.size(); ++id) {
        double acc = 0.0;
        const auto a = e.values(), b = index.embedding(id).values();
        for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
        all.push_back({id, std::sqrt(acc)});
      }
      std::sort(all.begin(), all.end(), [](const Hit& x, const Hit& y) {
        return x.distance != y.distance ? x.distance < y.distance : x.chunk_id < y.chunk_id;
      });
      all.resize(std::min<std::size_t>(5, all.size()));
      ++compared;
      if (got.size() != all.size()) {
        ++mismatches;
        continue;
      }
      for (std::size_t i = 0; i < got.size(); ++i) {
        worst = std::max(worst, std::abs(got[i].distance - all[i].distance));
        if (got[i].chunk_id != all[i].chunk_id || std::abs(got[i].distance - all[i].distance) > 1e-9) {
          ++mismatches;
          break;
        }
      }
    }
  }
  return {mismatches == 0 && compared == 2500,
          std::to_string(compared) + " queries over 50 indexes (largest " + std::to_string(largest) +
              " chunks), k=5, mismatches=" + std::to_string(mismatches)};
}

// Brute-force ledger reading: try every candidate g and compare whole sets.
DeltaKind ledger_oracle(const FeatureSet& x, const FeatureSet& rho, const std::optional<DrebinFeature>& f,
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

Outcome_ ledger_fuzz() {
  Rng rng(777);
  std::vector<DrebinFeature> universe;
  for (int i = 0; i < 10; ++i) universe.push_back(DrebinFeature(Category::kIntent, "a" + std::to_string(i)));
  for (int i = 0; i < 6; ++i) universe.push_back(DrebinFeature(Category::kHardware, "h" + std::to_string(i)));
  std::size_t divergences = 0, violations = 0, proposals = 0, accepted = 0;
  for (int seq = 0; seq < 1000; ++seq) {
    FeatureSet x, rho;
    std::optional<DrebinFeature> last;
    for (const auto& u : universe) {
      if (rng.bernoulli(0.35)) x.insert(u);
    }
    if (x.empty()) x.insert(universe[rng.below(universe.size())]);
    const auto steps = 1 + rng.below(10);
    for (std::size_t s = 0; s < steps; ++s) {
      auto proposed = x.united(rho);
      switch (rng.below(7)) {
        case 0:  // one addition
          proposed.insert(universe[rng.below(universe.size())]);
          break;
        case 1:  // replace the last addition
          if (last) proposed.erase(*last);
          proposed.insert(universe[rng.below(universe.size())]);
          break;
        case 2:  // two additions
          proposed.insert(universe[rng.below(universe.size())]);
          proposed.insert(universe[rng.below(universe.size())]);
          break;
        case 3:  // drop something
          if (!proposed.empty()) proposed.erase(proposed[rng.below(proposed.size())]);
          proposed.insert(universe[rng.below(universe.size())]);
          break;
        case 4:
          break;
        default: {
          FeatureSet r;
          for (const auto& u : universe) {
            if (rng.bernoulli(0.5)) r.insert(u);
          }
          proposed = r;
        }
      }
      ++proposals;
      const auto c = classify_delta(x, rho, last, proposed);
      if (c.kind != ledger_oracle(x, rho, last, proposed, universe)) ++divergences;
      if (c.kind == DeltaKind::kInvalid) continue;
      ++accepted;
      if (c.kind == DeltaKind::kReplace) rho.erase(*c.removed);
      rho.insert(*c.added);
      last = c.added;
      if (!x.is_subset_of(x.united(rho)) || !(x.united(rho) == proposed)) ++violations;
    }
  }
  return {divergences == 0 && violations == 0,
          "1000 sequences, " + std::to_string(proposals) + " proposals (" + std::to_string(accepted) +
              " accepted), divergences=" + std::to_string(divergences) +
              ", subset violations=" + std::to_string(violations)};
}

Outcome_ algorithm_conformance() {
  const auto dir = kFixtures / "scenarios";
  const auto scenarios = load_scenarios(dir);
  const HashingEmbeddingProvider provider(0, 384);
  const auto index = ChunkIndex::build(chunk_corpus(load_corpus(kFixtures / "corpus")), provider);
  const RagEngine rag(index, provider, 5);
  const auto vocab = FeatureVocabulary::parse(text::read_file(dir / "detector/svm.vocab"));
  const auto model = DetectorModel::parse(text::read_file(dir / "detector/svm.json"));
  const bool update = std::getenv("DROIDLAB_UPDATE_GOLDENS") != nullptr;

  std::string problems;
  std::vector<EpisodeOutcome> episodes;
  std::set<std::string> covered;
  std::size_t max_attempts = 0;
  for (const auto& [path, s] : scenarios) {
    SimulatedClock clock;
    EpisodeOutcome ep;
    ep.sample_id = s.name;
    ep.trace = run_scenario(s, rag, clock);
    if (ep.trace.outcome == Outcome::kEvaded) ep.detector = finalize(ep.trace, vocab, model);
    max_attempts = std::max(max_attempts, s.max_attempts);

    const auto golden = dir / "golden" / (s.name + ".jsonl");
    const auto serialized = ep.trace.serialize();
    if (update) text::write_file_atomic(golden, serialized);
    if (!fs::exists(golden) || text::read_file(golden) != serialized) problems += " golden:" + s.name;
    if (ep.trace.outcome != s.expect.outcome || ep.trace.attempts() != s.expect.attempts ||
        !(ep.trace.perturbation == s.expect.perturbation)) {
      problems += " expectation:" + s.name;
    }
    if (s.expect.detector_evaded && (!ep.detector || ep.detector->evaded != *s.expect.detector_evaded)) {
      problems += " detector:" + s.name;
    }
    for (const auto& r : ep.trace.records) {
      if (!r.reason.empty()) covered.insert(r.reason);
      if (r.verdict == "unparseable") covered.insert("unparseable verdict");
      if (r.delta == "replace") covered.insert("replace");
      if (r.manipulator_prompts.size() == 2 && r.delta != "invalid") covered.insert("re-prompted then accepted");
    }
    if (ep.trace.attempts() == 10 && ep.trace.outcome == Outcome::kCapped) covered.insert("cap at 10");
    if (ep.trace.outcome == Outcome::kAborted) covered.insert("aborted");
    episodes.push_back(std::move(ep));
  }

  const auto summary = summarize_campaign(episodes, max_attempts);
  const auto designed = [&] {
    std::map<std::string, std::string> kv;
    const auto content = text::read_file(dir / "designed.txt");
    for (const auto line : text::split_lines(content)) {
      const auto eq = line.find('=');
      if (eq != std::string_view::npos) kv[std::string(line.substr(0, eq))] = std::string(line.substr(eq + 1));
    }
    return kv;
  }();
  std::string histogram;
  for (std::size_t i = 0; i < summary.histogram.size(); ++i) {
    histogram += (i ? "," : "") + std::to_string(summary.histogram[i]);
  }
  const bool stats = std::to_string(episodes.size()) == designed.at("episodes") &&
                     std::to_string(summary.evaded) == designed.at("evaded") &&
                     summary.asr == std::stod(designed.at("asr")) &&
                     summary.mean_attempts == std::stod(designed.at("mean_attempts")) &&
                     histogram == designed.at("histogram");
  if (!stats) problems += " statistics";
  const std::vector<std::string> required{"re-prompted then accepted", "multiple additions", "removed non-last feature",
                                          "replace", "unparseable verdict", "cap at 10", "aborted"};
  for (const auto& r : required) {
    if (!covered.count(r)) problems += " coverage:" + r;
  }
  return {scenarios.size() >= 10 && problems.empty(),
          std::to_string(scenarios.size()) + " scenarios byte-identical to goldens, asr=" + fmt(summary.asr, 2) +
              " mean=" + fmt(summary.mean_attempts, 2) + " histogram=" + histogram +
              (problems.empty() ? "" : "; problems:" + problems)};
}

struct Campaign {
  std::vector<Sample> population;
  std::vector<EpisodeOutcome> episodes;
  AttackSummary summary;
};

const Campaign& greedy_campaign() {
  static const Campaign c = [] {
    const auto& w = world();
    Campaign out;
    out.population = select_attack_population(w.svm, w.split.test);
    const HashingEmbeddingProvider provider(0, 384);
    const auto index = ChunkIndex::build(chunk_corpus(load_corpus(kFixtures / "corpus")), provider);
    const RagEngine rag(index, provider, 5);
    const auto surrogate = linear_surrogate(w.svm);
    SystemClock clock;
    BackendDescriptor manip, judge;
    manip.name = manip.type = "greedy-linear";
    judge.name = judge.type = "surrogate-linear";
    auto m = std::make_shared<AgentInvoker>(manip, std::make_shared<GreedyLinearBackend>(surrogate), clock);
    auto a = std::make_shared<AgentInvoker>(judge, std::make_shared<SurrogateLinearBackend>(surrogate), clock);
    const AgentFactory agents = [m, a](AgentRole role) { return role == AgentRole::kManipulator ? m : a; };
    AttackConfig config;
    out.episodes = run_campaign(out.population, agents, rag, config, *w.svm.vocabulary, w.svm.model, {4});
    out.summary = summarize_campaign(out.episodes, config.max_attempts);
    return out;
  }();
  return c;
}

Outcome_ end_to_end_campaign() {
  const auto& w = world();
  const auto& c = greedy_campaign();
  // Margin arithmetic: with weights w and bias b, the greedy attacker adds
  // the most negative in-vocabulary weights not already present; the number
  // of additions needed is the first k where the margin drops to <= 0.
  const auto& p = std::get<SvmParameters>(w.svm.model.parameters());
  const auto& vocab = *w.svm.vocabulary;
  std::vector<std::uint32_t> order(vocab.dimension());
  for (std::uint32_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return p.weights[x] < p.weights[y]; });
  std::size_t disagreements = 0, predicted_wins = 0;
  for (std::size_t e = 0; e < c.population.size(); ++e) {
    const auto& x = c.population[e].features;
    double margin = p.bias;
    std::set<std::uint32_t> present;
    for (const auto& f : x) {
      if (const auto i = vocab.index_of(f)) {
        margin += p.weights[*i];
        present.insert(*i);
      }
    }
    std::size_t k = 0;
    for (auto i : order) {
      if (margin <= 0 || k >= 10 || p.weights[i] >= 0) break;
      if (present.count(i)) continue;
      margin -= -p.weights[i];
      ++k;
    }
    const bool wins = margin <= 0;
    predicted_wins += wins;
    const auto& ep = c.episodes[e];
    const bool agrees = wins ? (ep.success() && ep.trace.attempts() == k) : !ep.success();
    disagreements += !agrees;
  }
  const double oracle_asr = static_cast<double>(predicted_wins) / static_cast<double>(c.population.size());
  const bool ok = c.summary.asr >= 0.9 && c.summary.mean_attempts <= 5.0 && disagreements == 0;
  return {ok, std::to_string(c.population.size()) + " true positives, asr=" + fmt(c.summary.asr) +
                  " (oracle " + fmt(oracle_asr) + "), mean attempts=" + fmt(c.summary.mean_attempts, 3) +
                  ", per-episode oracle disagreements=" + std::to_string(disagreements)};
}

Outcome_ defense_property() {
  const auto& w = world();
  const auto& c = greedy_campaign();
  const std::vector<PairingCampaign> campaigns{{"greedy-surrogate", c.episodes}};
  const auto aug = sample_adversarial(campaigns, AugmentationPlan{50, 5});
  TrainingConfig config;
  const auto after = retrain_with_augmentation(w.split.train, aug.examples, DetectorKind::kSvm, config);
  const auto report = evaluate_defense("svm", w.svm, after, campaigns);
  const auto& row = report.rows.at(0);
  std::string table = report.table();
  std::replace(table.begin(), table.end(), '\n', ' ');
  return {aug.examples.size() == 50 && row.asr_after < row.asr_before,
          std::to_string(aug.examples.size()) + " adversarial examples; " + table};
}

Outcome_ metrics_oracle() {
  Rng rng(31337);
  std::size_t count_errors = 0, rate_errors = 0, undefined = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = 1 + rng.below(200);
    const double pm = rng.uniform(), pt = rng.uniform();
    std::vector<Label> pred(n), truth(n);
    for (std::size_t i = 0; i < n; ++i) {
      pred[i] = rng.bernoulli(pm) ? Label::kMalicious : Label::kBenign;
      truth[i] = rng.bernoulli(pt) ? Label::kMalicious : Label::kBenign;
    }
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool p = pred[i] == Label::kMalicious, t = truth[i] == Label::kMalicious;
      if (p && t) ++tp;
      if (p && !t) ++fp;
      if (!p && !t) ++tn;
      if (!p && t) ++fn;
    }
    const auto c = confusion(pred, truth);
    if (!(c == ConfusionCounts{tp, fp, tn, fn})) ++count_errors;
    if (tp + fn == 0 || fp + tn == 0) {
      try {
        rates(c);
        ++rate_errors;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kUndefinedMetric) ++rate_errors;
      }
      ++undefined;
      continue;
    }
    const auto r = rates(c);
    const double tpr = double(tp) / double(tp + fn);
    const double fpr = double(fp) / double(fp + tn);
    const double acc = double(tp + tn) / double(n);
    const double f1 = tp == 0 ? 0.0 : 2.0 * tp / (2.0 * tp + fp + fn);
    for (const auto d : {r.tpr - tpr, r.fpr - fpr, r.acc - acc, r.f1 - f1}) worst = std::max(worst, std::abs(d));
  }
  if (worst > 1e-12) ++rate_errors;
  return {count_errors == 0 && rate_errors == 0,
          "1000 pairings (" + std::to_string(undefined) + " with an absent class), count errors=" +
              std::to_string(count_errors) + ", max rate deviation=" + fmt_sci(worst)};
}

Outcome_ determinism() {
  const auto root = fs::temp_directory_path() / "droidlab-acceptance-determinism";
  fs::remove_all(root);
  write_dataset(root / "data", world().data);
  const std::string config_text = R"({
    "dataset": "data",
    "corpus": ")" + (kFixtures / "corpus").string() + R"(",
    "pairings": [{"name": "greedy-surrogate", "manipulator": "greedy-linear", "analyzer": "surrogate-linear"}],
    "attack": {"workers": 4},
    "output": "run"
  })";
  std::vector<std::string> digests;
  std::size_t tables = 0;
  for (const auto* out : {"run-a", "run-b"}) {
    auto config = RunConfig::parse(config_text, root);
    config.output = root / out;
    cmd_train(config);
    cmd_attack(config);
    std::string acc;
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(config.output)) {
      if (e.is_regular_file() && e.path().string().find("manifests") == std::string::npos) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    tables = 0;
    for (const auto& f : files) {
      if (f.filename() == "results.csv") ++tables;
      acc += fs::relative(f, config.output).string() + "\n" + text::read_file(f);
    }
    digests.push_back(text::digest(acc));
  }
  return {tables == 3 && digests[0] == digests[1],
          "two train+attack runs, " + std::to_string(tables) +
              " results tables plus models, splits and traces; digests " + digests[0] + " / " + digests[1]};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {"detector-sanity", 120, detector_sanity},
      {"gradient-check", 1, gradient_check},
      {"retrieval-oracle", 30, retrieval_oracle},
      {"ledger-fuzz", 10, ledger_fuzz},
      {"attack-loop-conformance", 10, algorithm_conformance},
      {"end-to-end-mock-campaign", 60, end_to_end_campaign},
      {"defense-property", 120, defense_property},
      {"metrics-oracle", 5, metrics_oracle},
      {"determinism", 300, determinism},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome_ o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs < c.limit_seconds;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::printf("%s %s [%.2fs / limit %.0fs] %s%s\n", pass ? "PASS" : "FAIL", c.name.c_str(), secs,
                c.limit_seconds, o.detail.c_str(), in_time ? "" : " (over time limit)");
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
