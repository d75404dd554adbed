#include <doctest.h>

#include <algorithm>
#include <set>

#include "droidlab/defense.hpp"
#include "droidlab/error.hpp"
#include "droidlab/pipeline.hpp"
#include "droidlab/synthetic.hpp"

using namespace droidlab;

namespace {

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::kIo;
}

DrebinFeature perm(int i) { return DrebinFeature(Category::kPermission, "p" + std::to_string(i)); }

std::vector<Sample> balanced(std::size_t per_class) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < 2 * per_class; ++i) {
    out.push_back({"app" + std::to_string(i) + ".txt", FeatureSet{perm(static_cast<int>(i))},
                   i % 2 ? Label::kMalicious : Label::kBenign});
  }
  return out;
}

std::size_t count(const std::vector<Sample>& s, Label l) {
  return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [&](const Sample& x) { return x.label == l; }));
}

// Linear detector over p0..p(n-1), weights given in vocabulary order.
TrainedDetector linear(std::vector<double> w, double bias) {
  std::vector<DrebinFeature> features;
  for (std::size_t i = 0; i < w.size(); ++i) features.push_back(perm(static_cast<int>(i)));
  auto vocab = std::make_shared<const FeatureVocabulary>(features);
  // The vocabulary sorts by value text, so map weights through it.
  std::vector<double> sorted(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) sorted[*vocab->index_of(perm(static_cast<int>(i)))] = w[i];
  const auto dim = sorted.size();
  return {vocab, DetectorModel(DetectorKind::kSvm, dim, 0, SvmParameters{std::move(sorted), bias, 1.0})};
}

}  // namespace

TEST_CASE("split_dataset") {
  const auto data = balanced(10);
  const auto s = split_dataset(data, 0.8, 3);
  CHECK(count(s.train, Label::kBenign) == 8);
  CHECK(count(s.train, Label::kMalicious) == 8);
  CHECK(count(s.test, Label::kBenign) == 2);
  CHECK(count(s.test, Label::kMalicious) == 2);

  std::set<std::string> train_ids, test_ids, all_ids;
  for (const auto& x : s.train) train_ids.insert(x.id);
  for (const auto& x : s.test) test_ids.insert(x.id);
  for (const auto& x : data) all_ids.insert(x.id);
  std::vector<std::string> both;
  std::set_intersection(train_ids.begin(), train_ids.end(), test_ids.begin(), test_ids.end(),
                        std::back_inserter(both));
  CHECK(both.empty());
  train_ids.insert(test_ids.begin(), test_ids.end());
  CHECK(train_ids == all_ids);

  const auto again = split_dataset(data, 0.8, 3);
  CHECK(std::equal(s.test.begin(), s.test.end(), again.test.begin(), again.test.end(),
                   [](const Sample& a, const Sample& b) { return a.id == b.id; }));

  bool differs = false;
  for (std::uint64_t seed = 4; seed < 10 && !differs; ++seed) {
    const auto other = split_dataset(data, 0.8, seed);
    differs = !std::equal(s.test.begin(), s.test.end(), other.test.begin(), other.test.end(),
                          [](const Sample& a, const Sample& b) { return a.id == b.id; });
  }
  CHECK(differs);

  SUBCASE("errors") {
    auto lonely = balanced(3);
    lonely.erase(lonely.begin() + 1, lonely.end() - 1);  // one benign, one malicious
    CHECK(code_of([&] { split_dataset(lonely, 0.8, 1); }) == ErrorCode::kInvalidArgument);
    CHECK(code_of([&] { split_dataset(data, 1.0, 1); }) == ErrorCode::kInvalidArgument);
    CHECK(code_of([&] { split_dataset(data, 0.0, 1); }) == ErrorCode::kInvalidArgument);
  }
}

TEST_CASE("select_attack_population") {
  // p0..p5 mark samples 0..5; p0, p1 carry a benign weight so those two
  // malicious samples are false negatives.
  const auto detector = linear({-1, -1, 1, 1, 1, 1, -1, -1}, 0.0);
  std::vector<Sample> test;
  for (int i = 0; i < 6; ++i) test.push_back({"m" + std::to_string(i), FeatureSet{perm(i)}, Label::kMalicious});
  test.push_back({"b0", FeatureSet{perm(6)}, Label::kBenign});
  test.push_back({"b1", FeatureSet{perm(2)}, Label::kBenign});  // a false positive stays out

  const auto picked = select_attack_population(detector, test);
  CHECK(picked.size() == 4);
  std::vector<std::string> expected;
  for (const auto& s : test) {
    if (s.label == Label::kMalicious && predict_features(detector, s.features).label == Label::kMalicious) {
      expected.push_back(s.id);
    }
  }
  std::vector<std::string> got;
  for (const auto& s : picked) got.push_back(s.id);
  CHECK(got == expected);
  CHECK(got == std::vector<std::string>{"m2", "m3", "m4", "m5"});

  SUBCASE("perfect detector selects every malicious sample") {
    const auto perfect = linear({1, 1, 1, 1, 1, 1, -1, -1}, 0.0);
    CHECK(select_attack_population(perfect, test).size() == 6);
  }
  SUBCASE("constant-benign detector") {
    const auto benign = linear({0, 0, 0, 0, 0, 0, 0, 0}, -1.0);
    CHECK(code_of([&] { select_attack_population(benign, test); }) == ErrorCode::kEmptyPopulation);
  }
}

TEST_CASE("evaluate_detector counts against enumeration") {
  const auto detector = linear({-1, -1, 1, 1, 1, 1, -1, -1}, 0.0);
  std::vector<Sample> test;
  for (int i = 0; i < 8; ++i) {
    test.push_back({"s" + std::to_string(i), FeatureSet{perm(i)}, i % 3 ? Label::kMalicious : Label::kBenign});
  }
  ConfusionCounts want;
  for (const auto& s : test) {
    const bool pred = predict_features(detector, s.features).label == Label::kMalicious;
    const bool truth = s.label == Label::kMalicious;
    (pred ? (truth ? want.tp : want.fp) : (truth ? want.fn : want.tn))++;
  }
  CHECK(evaluate_detector(detector, test) == want);
}

TEST_CASE("synthetic generator") {
  SyntheticSpec spec;
  spec.samples = 300;
  const auto a = generate_synthetic(spec);
  const auto b = generate_synthetic(spec);
  REQUIRE(a.size() == 300);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    CHECK(a[i].features == b[i].features);
    CHECK(a[i].label == b[i].label);
  }
  CHECK(a[7].id == "s00007.txt");
  std::set<Category> seen;
  for (const auto& s : a) {
    for (const auto& f : s.features) seen.insert(f.category());
  }
  CHECK(seen.size() == 8);
  const auto mal = count(a, Label::kMalicious);
  CHECK(mal > 100);
  CHECK(mal < 200);

  spec.seed = 8;
  const auto c = generate_synthetic(spec);
  CHECK_FALSE(std::equal(a.begin(), a.end(), c.begin(), [](const Sample& x, const Sample& y) {
    return x.features == y.features;
  }));

  SUBCASE("names round trip through the feature grammar") {
    for (std::size_t i = 0; i < 64; ++i) {
      const auto f = synthetic_feature(i);
      CHECK(DrebinFeature::parse(f.to_string()) == f);
    }
  }
  SUBCASE("invalid specs") {
    SyntheticSpec bad;
    bad.label_noise = 0.6;
    CHECK(code_of([&] { generate_synthetic(bad); }) == ErrorCode::kInvalidArgument);
    bad = {};
    bad.dimension = 100;
    CHECK(code_of([&] { generate_synthetic(bad); }) == ErrorCode::kInvalidArgument);
  }
}

TEST_CASE("noise-free synthetic data is learnable") {
  SyntheticSpec spec;
  spec.samples = 400;
  spec.label_noise = 0.0;
  const auto data = generate_synthetic(spec);
  const auto split = split_dataset(data, 0.8, 1);
  TrainingConfig config;
  const auto svm = train_detector(split.train, DetectorKind::kSvm, config);
  const auto c = evaluate_detector(svm, split.test);
  CHECK(rates(c).acc >= 0.95);
}

// ---------------------------------------------------------------------------
// Defense

namespace {

EpisodeOutcome episode(std::string id, FeatureSet x, FeatureSet rho, Outcome outcome, std::size_t attempts,
                       const TrainedDetector* judge) {
  EpisodeOutcome ep;
  ep.sample_id = std::move(id);
  ep.trace.original = std::move(x);
  ep.trace.perturbation = std::move(rho);
  ep.trace.outcome = outcome;
  ep.trace.records.resize(attempts);
  if (outcome == Outcome::kEvaded && judge) ep.detector = finalize(ep.trace, *judge->vocabulary, judge->model);
  return ep;
}

}  // namespace

TEST_CASE("sample_adversarial") {
  // p0 strongly benign: adding it evades.
  const auto before = linear({-5, 1, 1, 1, 1, 1, 1, 1}, 0.0);
  PairingCampaign c1{"alpha", {}};
  for (int i = 1; i < 8; ++i) {
    c1.episodes.push_back(episode("m" + std::to_string(i), FeatureSet{perm(i)}, FeatureSet{perm(0)},
                                  i % 2 ? Outcome::kEvaded : Outcome::kCapped, 2, &before));
  }
  PairingCampaign c2{"beta", {}};
  for (int i = 1; i < 8; ++i) {
    c2.episodes.push_back(episode("m" + std::to_string(i), FeatureSet{perm(i)}, {}, Outcome::kCapped, 10, &before));
  }
  const auto wins = static_cast<std::size_t>(
      std::count_if(c1.episodes.begin(), c1.episodes.end(), [](const EpisodeOutcome& e) { return e.success(); }));
  REQUIRE(wins == 4);

  AugmentationPlan plan{2, 9};
  const auto aug = sample_adversarial({c1, c2}, plan);
  CHECK(aug.examples.size() == 2);
  CHECK(aug.taken.at("alpha") == 2);
  CHECK(aug.taken.at("beta") == 0);
  CHECK(aug.shortfall.count("alpha") == 0);
  CHECK(aug.shortfall.at("beta") == 2);
  for (const auto& e : aug.examples) {
    CHECK(e.label == Label::kMalicious);
    CHECK(e.id.starts_with("adversarial/alpha/"));
    CHECK(e.features.contains(perm(0)));
  }
  const auto again = sample_adversarial({c1, c2}, plan);
  CHECK(again.examples[0].id == aug.examples[0].id);
  CHECK(again.examples[1].id == aug.examples[1].id);

  plan.per_pairing = 50;
  const auto all = sample_adversarial({c1, c2}, plan);
  CHECK(all.examples.size() == 4);
  CHECK(all.shortfall.at("alpha") == 46);

  CHECK(code_of([&] { sample_adversarial({c2}, plan); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("evaluate_defense replays adversarial sets") {
  const auto before = linear({-5, 1, 1, 1, 1, 1, 1, 1}, 0.0);
  // After retraining p0 no longer helps, except alongside p7.
  const auto after = linear({0, 1, 1, 1, 1, 1, 1, -2}, 0.0);
  PairingCampaign c{"alpha", {}};
  c.episodes.push_back(episode("m1", FeatureSet{perm(1)}, FeatureSet{perm(0)}, Outcome::kEvaded, 1, &before));
  c.episodes.push_back(episode("m2", FeatureSet{perm(2)}, FeatureSet{perm(0), perm(7)}, Outcome::kEvaded, 3, &before));
  c.episodes.push_back(episode("m3", FeatureSet{perm(3)}, {}, Outcome::kCapped, 10, &before));
  c.episodes.push_back(episode("m4", FeatureSet{perm(4)}, {}, Outcome::kAborted, 1, &before));

  const auto report = evaluate_defense("svm", before, after, {c});
  REQUIRE(report.rows.size() == 1);
  // Before: m1, m2 evade out of 4. After: only m2 (1 + 1 - 2 = 0, benign).
  CHECK(report.rows[0].asr_before == doctest::Approx(0.5));
  CHECK(report.rows[0].asr_after == doctest::Approx(0.25));
  CHECK(report.rows[0].delta() == doctest::Approx(0.25));
  CHECK(report.table() == "detector,pairing,asr_before,asr_after,delta\nsvm,alpha,0.5,0.25,0.25\n");

  const auto no_aborted = evaluate_defense("svm", before, after, {c}, false);
  CHECK(no_aborted.rows[0].asr_before == doctest::Approx(2.0 / 3.0));

  PairingCampaign other = c;
  other.pairing = "beta";
  other.episodes.pop_back();
  CHECK(code_of([&] { evaluate_defense("svm", before, after, {c, other}); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("retraining sees the added features") {
  SyntheticSpec spec;
  spec.samples = 200;
  const auto data = generate_synthetic(spec);
  const DrebinFeature fresh(Category::kHardware, "android.hardware.never.seen");
  std::vector<Sample> extra;
  for (int i = 0; i < 5; ++i) {
    auto f = data[static_cast<std::size_t>(i)].features;
    f.insert(fresh);
    extra.push_back({"adversarial/x/" + std::to_string(i), f, Label::kMalicious});
  }
  TrainingConfig config;
  const auto base = train_detector(data, DetectorKind::kSvm, config);
  CHECK_FALSE(base.vocabulary->index_of(fresh));
  const auto retrained = retrain_with_augmentation(data, extra, DetectorKind::kSvm, config);
  CHECK(retrained.vocabulary->index_of(fresh));
  extra[0].label = Label::kBenign;
  CHECK(code_of([&] { retrain_with_augmentation(data, extra, DetectorKind::kSvm, config); }) ==
        ErrorCode::kInvalidArgument);
}
