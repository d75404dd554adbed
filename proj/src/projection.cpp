#include "droidlab/projection.hpp"

#include <cmath>

#include "droidlab/error.hpp"
#include "droidlab/rng.hpp"

namespace droidlab {

ProjectionSpec ProjectionSpec::validated() const {
  ProjectionSpec out = *this;
  require(input_dim > 0, "projection input dimension must be positive");
  if (out.density == 0.0) out.density = 1.0 / std::sqrt(static_cast<double>(input_dim));
  require(output_dim > 0 && output_dim < input_dim,
          "projection output dimension must satisfy 0 < d < D");
  require(out.density > 0.0 && out.density <= 1.0, "projection density must be in (0, 1]");
  return out;
}

double ProjectionSpec::scale() const {
  return 1.0 / std::sqrt(density * static_cast<double>(output_dim));
}

int projection_entry(const ProjectionSpec& spec, std::uint32_t row, std::uint32_t col) {
  const double u = static_cast<double>(mix_keys(spec.seed, row, col) >> 11) * 0x1.0p-53;
  if (u < spec.density / 2) return 1;
  if (u < spec.density) return -1;
  return 0;
}

std::vector<std::int64_t> projection_sums(const BinaryFeatureVector& v, const ProjectionSpec& raw) {
  const ProjectionSpec spec = raw.validated();
  if (v.dimension != spec.input_dim) {
    fail(ErrorCode::kInvalidArgument, "vector dimension " + std::to_string(v.dimension) +
                                          " does not match projection input " +
                                          std::to_string(spec.input_dim));
  }
  std::vector<std::int64_t> sums(spec.output_dim, 0);
  for (const auto row : v.active) {
    for (std::uint32_t col = 0; col < spec.output_dim; ++col) {
      sums[col] += projection_entry(spec, row, col);
    }
  }
  return sums;
}

std::vector<double> project(const BinaryFeatureVector& v, const ProjectionSpec& raw) {
  const ProjectionSpec spec = raw.validated();
  const auto sums = projection_sums(v, spec);
  const double scale = spec.scale();
  std::vector<double> out(sums.size());
  for (std::size_t j = 0; j < sums.size(); ++j) out[j] = scale * static_cast<double>(sums[j]);
  return out;
}

}  // namespace droidlab
