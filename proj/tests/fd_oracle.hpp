#pragma once

// Central-difference gradient oracle used by the gradient tests. It only
// evaluates the scalar loss, never the analytic backward pass.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "translora/numerics.hpp"

namespace fd {

inline double central_difference(double& coordinate, const std::function<double()>& loss,
                                 double h = 1e-5) {
  const double saved = coordinate;
  coordinate = saved + h;
  const double up = loss();
  coordinate = saved - h;
  const double down = loss();
  coordinate = saved;
  return (up - down) / (2.0 * h);
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + 1e-8);
}

struct Probe {
  std::string family;
  std::size_t index;
  double analytic;
  double numeric;
  double rel_error() const { return relative_error(analytic, numeric); }
};

// Checks `count` random coordinates among `candidates` of `values`.
inline std::vector<Probe> probe(const std::string& family, translora::Matrix& values,
                                const translora::Matrix& analytic,
                                const std::vector<std::size_t>& candidates, std::size_t count,
                                translora::RngState& rng, const std::function<double()>& loss) {
  std::vector<Probe> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t idx = candidates[translora::rng_below(rng, candidates.size())];
    const double num = central_difference(values.values()[idx], loss);
    out.push_back(Probe{family, idx, analytic.values()[idx], num});
  }
  return out;
}

inline std::vector<std::size_t> all_indices(const translora::Matrix& m) {
  std::vector<std::size_t> idx(m.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

inline std::vector<std::size_t> row_indices(const translora::Matrix& m, const std::vector<std::size_t>& rows) {
  std::vector<std::size_t> idx;
  for (std::size_t r : rows)
    for (std::size_t c = 0; c < m.cols(); ++c) idx.push_back(r * m.cols() + c);
  return idx;
}

}  // namespace fd
