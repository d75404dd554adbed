#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "droidlab/features.hpp"

namespace droidlab {

/// Malicious is the positive class.
struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;

  std::size_t total() const noexcept { return tp + fp + tn + fn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

struct Rates {
  double tpr = 0.0;
  double fpr = 0.0;
  double acc = 0.0;
  double f1 = 0.0;
};

ConfusionCounts confusion(std::span<const Label> predictions, std::span<const Label> labels);

/// Throws kUndefinedMetric when either class is absent. f1 is 0 when tp = 0.
Rates rates(const ConfusionCounts& c);

/// Minimal view of one finished attack episode.
struct EpisodeResult {
  bool evaded = false;         // the target detector was fooled
  std::size_t attempts = 0;    // attempts consumed, in [1, A]
};

struct AttackSummary {
  std::size_t attacked = 0;
  std::size_t evaded = 0;
  std::size_t failed = 0;
  std::vector<std::size_t> attempts;  // per episode, in input order
  std::size_t max_attempts = 0;       // A
  double asr = 0.0;
  /// Mean over successful episodes only; 0 when nothing evaded.
  double mean_attempts = 0.0;
  /// histogram[k - 1] = successful episodes that needed k attempts, k in 1..A.
  std::vector<std::size_t> histogram;
};

AttackSummary attack_summary(std::span<const EpisodeResult> episodes, std::size_t max_attempts);

/// Mean attempts reconstructed from a histogram.
double histogram_mean(std::span<const std::size_t> histogram);

/// `key=value` lines in key order.
std::string key_value_report(const std::map<std::string, std::string>& entries);
/// `attempts,count` rows, one per bucket, with a header line.
std::string histogram_table(std::span<const std::size_t> histogram);
std::string format_double(double v);

}  // namespace droidlab
