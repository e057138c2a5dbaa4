#pragma once

// Test-only oracles: central finite differences for gradients and plain
// brute-force re-computations of the quantities under test. Everything here
// is written independently of the library implementation paths it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "protodist/autodiff.hpp"
#include "protodist/rng.hpp"
#include "protodist/tensor.hpp"

namespace oracles {

using protodist::Rng;
using protodist::Tensor;
namespace ad = protodist::ad;

inline double rel_err(double a, double b) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-6});
}

// Max relative error between the analytic gradient of build() w.r.t. the
// given leaves and a central difference with step h.
inline double max_fd_rel_err(const std::vector<ad::NodePtr>& leaves,
                             const std::function<ad::NodePtr()>& build, double h = 1e-5) {
  for (const ad::NodePtr& leaf : leaves) leaf->grad.fill(0.0);  // grads accumulate
  ad::NodePtr root = build();
  ad::backward(root);
  double worst = 0.0;
  for (const ad::NodePtr& leaf : leaves) {
    for (std::size_t i = 0; i < leaf->value.size(); ++i) {
      const double saved = leaf->value[i];
      leaf->value[i] = saved + h;
      const double up = build()->value[0];
      leaf->value[i] = saved - h;
      const double down = build()->value[0];
      leaf->value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      worst = std::max(worst, rel_err(leaf->grad[i], numeric));
    }
  }
  return worst;
}

inline Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// 1 - Pearson correlation via plain two-pass population moments.
inline double pearson_d(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double cov = 0.0, vx = 0.0, vy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    cov += (x[i] - mx) * (y[i] - my);
    vx += (x[i] - mx) * (x[i] - mx);
    vy += (y[i] - my) * (y[i] - my);
  }
  return 1.0 - (cov / n) / (std::sqrt(vx / n) * std::sqrt(vy / n));
}

inline bool pearson_defined(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double vx = 0.0, vy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    vx += (x[i] - mx) * (x[i] - mx);
    vy += (y[i] - my) * (y[i] - my);
  }
  return std::sqrt(vx / n) * std::sqrt(vy / n) >= 1e-12;
}

// Per-sample class centroids straight off the raw tensors (pixel loop).
// rows[k] is empty when class k+1 has no pixels.
inline std::vector<std::vector<double>> brute_centroids(const Tensor& features,
                                                        const Tensor& labels, int num_classes) {
  const std::size_t ch = features.dim(0);
  const std::size_t n = labels.size();
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(num_classes));
  for (int k = 1; k <= num_classes; ++k) {
    double count = 0.0;
    std::vector<double> acc(ch, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i] == static_cast<double>(k)) {
        count += 1.0;
        for (std::size_t c = 0; c < ch; ++c) acc[c] += features[c * n + i];
      }
    }
    if (count > 0.0) {
      for (auto& v : acc) v /= count;
      rows[static_cast<std::size_t>(k - 1)] = std::move(acc);
    }
  }
  return rows;
}

// Exhaustive two-sided Wilcoxon signed-rank p over all 2^n sign assignments.
// Zero differences dropped, average ranks for ties; n must stay small.
inline double brute_wilcoxon_p(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) d.push_back(a[i] - b[i]);
  }
  const std::size_t m = d.size();
  std::vector<std::size_t> idx(m);
  for (std::size_t i = 0; i < m; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t i, std::size_t j) { return std::fabs(d[i]) < std::fabs(d[j]); });
  std::vector<double> ranks(m);
  std::size_t i = 0;
  while (i < m) {
    std::size_t j = i;
    while (j < m && std::fabs(d[idx[j]]) == std::fabs(d[idx[i]])) ++j;
    for (std::size_t p = i; p < j; ++p) ranks[idx[p]] = static_cast<double>(i + j + 1) / 2.0;
    i = j;
  }
  double w_obs = 0.0;
  for (std::size_t p = 0; p < m; ++p) {
    if (d[p] > 0.0) w_obs += ranks[p];
  }
  std::size_t le = 0, ge = 0;
  const std::size_t total = 1ull << m;
  for (std::size_t bits = 0; bits < total; ++bits) {
    double w = 0.0;
    for (std::size_t p = 0; p < m; ++p) {
      if (bits & (1ull << p)) w += ranks[p];
    }
    if (w <= w_obs + 1e-9) ++le;
    if (w >= w_obs - 1e-9) ++ge;
  }
  return std::min(1.0, 2.0 * std::min(static_cast<double>(le), static_cast<double>(ge)) /
                           static_cast<double>(total));
}

}  // namespace oracles
