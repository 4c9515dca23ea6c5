#pragma once

#include <gsl/gsl_multimin.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

namespace testing {

// Smoothed-target negative log-likelihood written out directly, minimized by
// GSL's simplex method.
struct PlattData {
  std::vector<double> f;
  std::vector<double> t;
};

inline double platt_nll(const gsl_vector* v, void* params) {
  const auto* d = static_cast<const PlattData*>(params);
  const double A = gsl_vector_get(v, 0), B = gsl_vector_get(v, 1);
  double s = 0;
  for (std::size_t i = 0; i < d->f.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(A * d->f[i] + B));
    const double pc = std::clamp(p, 1e-300, 1.0 - 1e-16);
    s -= d->t[i] * std::log(pc) + (1.0 - d->t[i]) * std::log1p(-pc);
  }
  return s;
}

inline std::pair<double, double> platt_oracle(const std::vector<double>& f, const std::vector<std::uint8_t>& y) {
  PlattData d;
  d.f = f;
  const double np = static_cast<double>(std::count(y.begin(), y.end(), 1));
  const double nn = static_cast<double>(y.size()) - np;
  for (auto l : y) d.t.push_back(l ? (np + 1) / (np + 2) : 1 / (nn + 2));
  gsl_multimin_function fn{platt_nll, 2, &d};
  gsl_vector* x = gsl_vector_alloc(2);
  gsl_vector* step = gsl_vector_alloc(2);
  gsl_vector_set(x, 0, 0.0);
  gsl_vector_set(x, 1, 0.0);
  gsl_vector_set_all(step, 0.5);
  auto* s = gsl_multimin_fminimizer_alloc(gsl_multimin_fminimizer_nmsimplex2, 2);
  gsl_multimin_fminimizer_set(s, &fn, x, step);
  for (int it = 0; it < 20000; ++it) {
    if (gsl_multimin_fminimizer_iterate(s)) break;
    if (gsl_multimin_test_size(gsl_multimin_fminimizer_size(s), 1e-9) == GSL_SUCCESS) break;
  }
  const std::pair<double, double> out{gsl_vector_get(s->x, 0), gsl_vector_get(s->x, 1)};
  gsl_multimin_fminimizer_free(s);
  gsl_vector_free(x);
  gsl_vector_free(step);
  return out;
}

}  // namespace testing
