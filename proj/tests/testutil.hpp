// Copyright 2026 The cpplab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
#ifndef CPPLAB_TESTS_TESTUTIL_HPP_
#define CPPLAB_TESTS_TESTUTIL_HPP_

#include <cmath>
#include <functional>
#include <vector>

#include "cpplab/common.hpp"

namespace cpplab::testing {

// Central finite differences against an analytic gradient. `f` evaluates the
// scalar function at a parameter vector; `analytic` is the gradient at `x`.
// Returns the worst relative error over all coordinates.
inline double gradcheck(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& x, const std::vector<double>& analytic,
    double step = 1e-5) {
  double worst = 0.0;
  std::vector<double> p = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double h = step * std::max(1.0, std::abs(x[i]));
    p[i] = x[i] + h;
    double fp = f(p);
    p[i] = x[i] - h;
    double fm = f(p);
    p[i] = x[i];
    double numeric = (fp - fm) / (2.0 * h);
    double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-8});
    worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
  }
  return worst;
}

inline std::vector<double> random_vector(std::size_t n, cpplab::Rng& rng,
                                         double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.next_double(lo, hi);
  return v;
}

}  // namespace cpplab::testing

#endif  // CPPLAB_TESTS_TESTUTIL_HPP_
