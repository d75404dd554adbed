#include "droidlab/synthetic.hpp"

#include <cstdio>

#include "droidlab/error.hpp"
#include "droidlab/rng.hpp"

namespace droidlab {

void SyntheticSpec::validate() const {
  require(samples >= 4, "synthetic dataset needs at least 4 samples");
  require(malicious_fraction > 0 && malicious_fraction < 1, "malicious fraction must lie in (0, 1)");
  require(label_noise >= 0 && label_noise < 0.5, "label noise must lie in [0, 0.5)");
  require(benign_block + malicious_block < dimension, "feature blocks leave no neutral features");
  require(benign_markers_min >= 1 && benign_markers_min <= benign_markers_max && benign_markers_max <= benign_block,
          "benign marker range is invalid");
  require(malicious_markers_min >= 1 && malicious_markers_min <= malicious_markers_max &&
              malicious_markers_max <= malicious_block,
          "malicious marker range is invalid");
  require(benign_suspicious_min <= benign_suspicious_max && benign_suspicious_max <= malicious_block,
          "benign suspicious range is invalid");
  require(neutral_min <= neutral_max && neutral_max <= dimension - benign_block - malicious_block,
          "neutral range is invalid");
}

DrebinFeature synthetic_feature(std::size_t i) {
  char buf[96];
  const auto c = all_categories()[i % 8];
  switch (c) {
    case Category::kApiCall:
      std::snprintf(buf, sizeof buf, "com.synthetic.api.Service%zu.call%zu()", i / 64, i % 64);
      break;
    case Category::kRestrictedApi:
      std::snprintf(buf, sizeof buf, "android.synthetic.Restricted%zu.invoke%zu()", i / 64, i % 64);
      break;
    case Category::kUrl:
      std::snprintf(buf, sizeof buf, "http://host%04zu.example.net/path", i);
      break;
    case Category::kPermission:
    case Category::kUsedPermission:
      std::snprintf(buf, sizeof buf, "com.synthetic.permission.P%04zu", i);
      break;
    case Category::kHardware:
      std::snprintf(buf, sizeof buf, "android.hardware.synthetic%04zu", i);
      break;
    case Category::kIntent:
      std::snprintf(buf, sizeof buf, "com.synthetic.action.A%04zu", i);
      break;
    case Category::kComponent:
      std::snprintf(buf, sizeof buf, "com.synthetic.app.Component%04zu", i);
      break;
  }
  return DrebinFeature(c, buf);
}

namespace {

void draw(Rng& rng, FeatureSet& out, std::size_t offset, std::size_t block, std::size_t lo, std::size_t hi) {
  const auto want = lo + rng.below(hi - lo + 1);
  std::size_t added = 0;
  while (added < want) {
    if (out.insert(synthetic_feature(offset + rng.below(block)))) ++added;
  }
}

}  // namespace

std::vector<Sample> generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t neutral_offset = spec.benign_block + spec.malicious_block;
  const std::size_t neutral = spec.dimension - neutral_offset;
  std::vector<Sample> out;
  out.reserve(spec.samples);
  for (std::size_t i = 0; i < spec.samples; ++i) {
    const bool malicious = rng.uniform() < spec.malicious_fraction;
    FeatureSet f;
    if (malicious) {
      draw(rng, f, spec.benign_block, spec.malicious_block, spec.malicious_markers_min, spec.malicious_markers_max);
    } else {
      draw(rng, f, 0, spec.benign_block, spec.benign_markers_min, spec.benign_markers_max);
      if (spec.benign_suspicious_max > 0) {
        draw(rng, f, spec.benign_block, spec.malicious_block, spec.benign_suspicious_min, spec.benign_suspicious_max);
      }
    }
    draw(rng, f, neutral_offset, neutral, spec.neutral_min, spec.neutral_max);
    const bool flipped = rng.uniform() < spec.label_noise;
    char id[32];
    std::snprintf(id, sizeof id, "s%05zu.txt", i);
    out.push_back({id, std::move(f), (malicious != flipped) ? Label::kMalicious : Label::kBenign});
  }
  return out;
}

}  // namespace droidlab
