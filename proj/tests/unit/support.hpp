#pragma once

#include "pta/numerics.hpp"
#include "pta/rng.hpp"

#include <initializer_list>
#include <vector>

namespace pta::test {

inline Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

inline Vector gaussian(Rng& rng, Eigen::Index d) {
  Vector v(d);
  for (Eigen::Index i = 0; i < d; ++i) v(i) = rng.normal();
  return v;
}

inline Embedding random_unit(Rng& rng, Eigen::Index d) {
  return unit_normalize(gaussian(rng, d));
}

inline Vector random_box(Rng& rng, Eigen::Index n, double lo = 0.0, double hi = 1.0) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.uniform(lo, hi);
  return v;
}

inline std::vector<Embedding> random_units(Rng& rng, std::size_t count, Eigen::Index d) {
  std::vector<Embedding> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(random_unit(rng, d));
  return out;
}

}  // namespace pta::test
