#include "droidlab/metrics.hpp"

#include <cstdio>

#include "droidlab/error.hpp"

namespace droidlab {

ConfusionCounts confusion(std::span<const Label> predictions, std::span<const Label> labels) {
  require(predictions.size() == labels.size(), "predictions and labels differ in length");
  require(!labels.empty(), "confusion needs at least one sample");
  ConfusionCounts c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool predicted = predictions[i] == Label::kMalicious;
    const bool actual = labels[i] == Label::kMalicious;
    if (predicted && actual) ++c.tp;
    else if (predicted) ++c.fp;
    else if (actual) ++c.fn;
    else ++c.tn;
  }
  return c;
}

Rates rates(const ConfusionCounts& c) {
  if (c.tp + c.fn == 0) fail(ErrorCode::kUndefinedMetric, "no malicious samples evaluated");
  if (c.fp + c.tn == 0) fail(ErrorCode::kUndefinedMetric, "no benign samples evaluated");
  const auto d = [](std::size_t v) { return static_cast<double>(v); };
  Rates r;
  r.tpr = d(c.tp) / d(c.tp + c.fn);
  r.fpr = d(c.fp) / d(c.fp + c.tn);
  r.acc = d(c.tp + c.tn) / d(c.total());
  if (c.tp > 0) {
    const double precision = d(c.tp) / d(c.tp + c.fp);
    r.f1 = 2.0 * precision * r.tpr / (precision + r.tpr);
  }
  return r;
}

AttackSummary attack_summary(std::span<const EpisodeResult> episodes, std::size_t max_attempts) {
  if (episodes.empty()) fail(ErrorCode::kUndefinedMetric, "no attacked samples");
  require(max_attempts >= 1, "attempt cap must be at least 1");
  AttackSummary s;
  s.attacked = episodes.size();
  s.max_attempts = max_attempts;
  s.histogram.assign(max_attempts, 0);
  std::size_t attempt_sum = 0;
  for (const auto& e : episodes) {
    require(e.attempts >= 1 && e.attempts <= max_attempts, "attempt count outside [1, A]");
    s.attempts.push_back(e.attempts);
    if (e.evaded) {
      ++s.evaded;
      attempt_sum += e.attempts;
      ++s.histogram[e.attempts - 1];
    } else {
      ++s.failed;
    }
  }
  s.asr = static_cast<double>(s.evaded) / static_cast<double>(s.attacked);
  if (s.evaded > 0) s.mean_attempts = static_cast<double>(attempt_sum) / static_cast<double>(s.evaded);
  return s;
}

double histogram_mean(std::span<const std::size_t> histogram) {
  std::size_t count = 0, weighted = 0;
  for (std::size_t k = 0; k < histogram.size(); ++k) {
    count += histogram[k];
    weighted += histogram[k] * (k + 1);
  }
  return count == 0 ? 0.0 : static_cast<double>(weighted) / static_cast<double>(count);
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string key_value_report(const std::map<std::string, std::string>& entries) {
  std::string out;
  for (const auto& [k, v] : entries) {
    out += k;
    out += '=';
    out += v;
    out += '\n';
  }
  return out;
}

std::string histogram_table(std::span<const std::size_t> histogram) {
  std::string out = "attempts,count\n";
  for (std::size_t k = 0; k < histogram.size(); ++k) {
    out += std::to_string(k + 1) + "," + std::to_string(histogram[k]) + "\n";
  }
  return out;
}

}  // namespace droidlab
