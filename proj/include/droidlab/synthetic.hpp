#pragma once

// Synthetic Drebin-style corpus with class-separating feature blocks: benign
// apps carry a few strong markers from a small block, malicious apps carry
// many weak markers from a larger block, and everything shares a pool of
// neutral features.

#include <cstdint>
#include <vector>

#include "droidlab/features.hpp"

namespace droidlab {

struct SyntheticSpec {
  std::size_t samples = 2000;
  std::size_t dimension = 2048;  // distinct features in the universe
  double malicious_fraction = 0.5;
  double label_noise = 0.02;
  std::size_t benign_block = 16;
  std::size_t malicious_block = 128;
  std::size_t benign_markers_min = 2, benign_markers_max = 4;
  std::size_t malicious_markers_min = 14, malicious_markers_max = 28;
  // Malicious-block features that benign apps carry too; the benign markers
  // have to outweigh them, which gives those markers large weights.
  std::size_t benign_suspicious_min = 4, benign_suspicious_max = 8;
  std::size_t neutral_min = 1, neutral_max = 4;
  std::uint64_t seed = 7;

  void validate() const;
};

/// Name of universe feature i; categories cycle so every one is populated.
DrebinFeature synthetic_feature(std::size_t i);

/// Ids are "sNNNNN.txt"; labels are flipped for a `label_noise` fraction.
std::vector<Sample> generate_synthetic(const SyntheticSpec& spec);

}  // namespace droidlab
