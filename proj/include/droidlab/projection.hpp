#pragma once

// Very sparse random projection of binary feature vectors. Entries of the
// implicit D x d matrix are +1, 0 or -1 with probabilities s/2, 1-s, s/2 and
// are a pure function of (seed, row, column), so no matrix is ever stored.

#include <cstdint>
#include <vector>

#include "droidlab/features.hpp"

namespace droidlab {

struct ProjectionSpec {
  std::uint64_t seed = 0;
  std::size_t input_dim = 0;   // D
  std::size_t output_dim = 0;  // d
  double density = 0.0;        // s; 0 selects the default 1/sqrt(D)

  /// Applies the density default and checks 0 < d < D, 0 < s <= 1.
  ProjectionSpec validated() const;
  double scale() const;  // 1 / sqrt(s * d)
};

/// Matrix entry in {-1, 0, +1}.
int projection_entry(const ProjectionSpec& spec, std::uint32_t row, std::uint32_t col);

/// Unscaled integer column sums over the active rows.
std::vector<std::int64_t> projection_sums(const BinaryFeatureVector& v, const ProjectionSpec& spec);

std::vector<double> project(const BinaryFeatureVector& v, const ProjectionSpec& spec);

}  // namespace droidlab
