#include "wstatt/gradcheck.hpp"

#include <cmath>

#include "wstatt/rng.hpp"

namespace wstatt {

GradcheckResult gradcheck(const std::function<double()>& f, double* x, Index n,
                          const double* analytic, double step, Index max_coords,
                          uint64_t seed) {
  std::vector<Index> coords;
  if (max_coords < 0 || max_coords >= n) {
    coords.resize(static_cast<size_t>(n));
    for (Index i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
  } else {
    // seeded sample without replacement
    std::vector<Index> all(static_cast<size_t>(n));
    for (Index i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
    Rng rng(seed);
    rng.shuffle(all);
    coords.assign(all.begin(), all.begin() + max_coords);
  }

  GradcheckResult res;
  for (Index c : coords) {
    double saved = x[c];
    x[c] = saved + step;
    double fp = f();
    x[c] = saved - step;
    double fm = f();
    x[c] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      fail(ErrorCode::NumericFailure, "gradcheck closure produced non-finite output");
    double numeric = (fp - fm) / (2.0 * step);
    double a = analytic[c];
    double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.worst_coord = c;
      res.analytic_at_worst = a;
      res.numeric_at_worst = numeric;
    }
  }
  return res;
}

GradcheckResult gradcheck_direction(const std::function<double()>& f, double* x, Index n,
                                    const double* analytic, double step, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(static_cast<size_t>(n));
  double norm2 = 0;
  for (Index i = 0; i < n; ++i) {
    v[static_cast<size_t>(i)] = rng.normal();
    norm2 += v[static_cast<size_t>(i)] * v[static_cast<size_t>(i)];
  }
  double inv_norm = 1.0 / std::sqrt(std::max(norm2, 1e-300));
  for (auto& vi : v) vi *= inv_norm;

  std::vector<double> saved(x, x + n);
  double expected = 0;
  for (Index i = 0; i < n; ++i) expected += analytic[i] * v[static_cast<size_t>(i)];

  for (Index i = 0; i < n; ++i) x[i] = saved[static_cast<size_t>(i)] + step * v[static_cast<size_t>(i)];
  double fp = f();
  for (Index i = 0; i < n; ++i) x[i] = saved[static_cast<size_t>(i)] - step * v[static_cast<size_t>(i)];
  double fm = f();
  std::copy(saved.begin(), saved.end(), x);
  if (!std::isfinite(fp) || !std::isfinite(fm))
    fail(ErrorCode::NumericFailure, "gradcheck closure produced non-finite output");

  double numeric = (fp - fm) / (2.0 * step);
  GradcheckResult res;
  res.max_rel_err = std::abs(expected - numeric) /
                    std::max({std::abs(expected), std::abs(numeric), 1e-8});
  res.analytic_at_worst = expected;
  res.numeric_at_worst = numeric;
  return res;
}

}  // namespace wstatt
