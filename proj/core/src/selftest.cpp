#include "protodist/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>

#include "protodist/autodiff.hpp"
#include "protodist/distill_loss.hpp"
#include "protodist/errors.hpp"
#include "protodist/eval.hpp"
#include "protodist/models.hpp"
#include "protodist/prototype.hpp"
#include "protodist/rng.hpp"
#include "protodist/trainer.hpp"

// Self-contained re-derivations (finite differences, brute-force loops,
// exhaustive enumeration) checked against the library. The test suite keeps
// its own independent copies; this file only backs the CLI `selftest`.
namespace protodist {

namespace {

constexpr double kFdStep = 1e-5;

double rel_err(double a, double b) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-6});
}

// Max relative error between analytic gradients of `build()` w.r.t. the
// given leaves and central finite differences.
double max_fd_err(const std::vector<ad::NodePtr>& leaves,
                  const std::function<ad::NodePtr()>& build) {
  for (const ad::NodePtr& leaf : leaves) leaf->grad.fill(0.0);  // grads accumulate
  ad::NodePtr root = build();
  ad::backward(root);
  double worst = 0.0;
  for (const ad::NodePtr& leaf : leaves) {
    for (std::size_t i = 0; i < leaf->value.size(); ++i) {
      const double saved = leaf->value[i];
      leaf->value[i] = saved + kFdStep;
      const double up = build()->value[0];
      leaf->value[i] = saved - kFdStep;
      const double down = build()->value[0];
      leaf->value[i] = saved;
      const double numeric = (up - down) / (2.0 * kFdStep);
      worst = std::max(worst, rel_err(leaf->grad[i], numeric));
    }
  }
  return worst;
}

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

CheckResult fd_check(const char* name, double worst, double tol) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "max rel err %.3g (tol %.1g)", worst, tol);
  return {name, worst < tol, buf};
}

CheckResult check_conv(std::uint64_t seed, int dims) {
  Rng rng(seed);
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const std::vector<std::size_t> in_shape =
        dims == 2 ? std::vector<std::size_t>{1, 2, 5, 6} : std::vector<std::size_t>{1, 2, 3, 4, 5};
    const std::vector<std::size_t> k_shape =
        dims == 2 ? std::vector<std::size_t>{3, 2, 3, 3} : std::vector<std::size_t>{2, 2, 3, 3, 3};
    ad::NodePtr input = ad::leaf(random_tensor(in_shape, rng));
    ad::NodePtr kernel = ad::leaf(random_tensor(k_shape, rng));
    ad::NodePtr bias = ad::leaf(random_tensor({k_shape[0]}, rng));
    worst = std::max(worst, max_fd_err({input, kernel, bias}, [&] {
      return ad::sum(ad::conv(input, kernel, bias, dims));
    }));
  }
  return fd_check(dims == 2 ? "grad_conv2d" : "grad_conv3d", worst, 1e-4);
}

CheckResult check_elementwise(std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    ad::NodePtr a = ad::leaf(random_tensor({4, 5}, rng));
    ad::NodePtr b = ad::leaf(random_tensor({4, 5}, rng));
    worst = std::max(worst, max_fd_err({a, b}, [&] {
      return ad::sum(ad::scale(ad::mul(ad::relu(a), ad::add(a, b)), 0.7));
    }));
  }
  return fd_check("grad_elementwise", worst, 1e-4);
}

CheckResult check_masked_mean(std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    ad::NodePtr f = ad::leaf(random_tensor({3, 4, 4}, rng));
    Tensor mask({4, 4});
    std::size_t count = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      mask[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
      count += mask[i] != 0.0;
    }
    if (count == 0) mask[0] = 1.0;
    worst = std::max(worst, max_fd_err({f}, [&] { return ad::sum(ad::masked_mean(f, mask)); }));
  }
  return fd_check("grad_masked_mean", worst, 1e-4);
}

CheckResult check_pearson(std::uint64_t seed) {
  Rng rng(seed);
  double worst_grad = 0.0, worst_val = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 3 + trial % 5;
    ad::NodePtr x = ad::leaf(random_tensor({n}, rng));
    std::vector<double> y(n);
    for (auto& v : y) v = rng.uniform(-2.0, 2.0);

    // two-pass moments, written out straight
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mx += x->value[i];
      my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double cov = 0.0, vx = 0.0, vy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      cov += (x->value[i] - mx) * (y[i] - my);
      vx += (x->value[i] - mx) * (x->value[i] - mx);
      vy += (y[i] - my) * (y[i] - my);
    }
    const double expected = 1.0 - (cov / static_cast<double>(n)) /
                                      (std::sqrt(vx / static_cast<double>(n)) *
                                       std::sqrt(vy / static_cast<double>(n)));
    ad::NodePtr d = pearson_distance(x, y);
    worst_val = std::max(worst_val, std::fabs(d->value[0] - expected));
    worst_grad = std::max(worst_grad, max_fd_err({x}, [&] { return pearson_distance(x, y); }));
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf), "value err %.3g, grad rel err %.3g", worst_val, worst_grad);
  return {"grad_pearson", worst_val < 1e-12 && worst_grad < 1e-4, buf};
}

CheckResult check_pearson_metamorphic(std::uint64_t seed) {
  Rng rng(seed);
  bool ok = true;
  std::string detail = "all identities held";
  for (int trial = 0; trial < 100 && ok; ++trial) {
    const std::size_t n = 4 + trial % 4;
    Tensor xv = random_tensor({n}, rng);
    std::vector<double> y(n);
    for (auto& v : y) v = rng.uniform(-2.0, 2.0);
    ad::NodePtr x = ad::leaf(xv);
    const double dxy = pearson_distance(x, {xv.data(), n})->value[0];
    if (dxy > 1e-10) {
      ok = false;
      detail = "d(x,x) != 0";
      break;
    }
    Tensor neg(xv.shape());
    for (std::size_t i = 0; i < n; ++i) neg[i] = -xv[i];
    if (std::fabs(pearson_distance(ad::leaf(neg), {xv.data(), n})->value[0] - 2.0) > 1e-10) {
      ok = false;
      detail = "d(-x,x) != 2";
      break;
    }
    const double a = rng.uniform(0.1, 3.0);
    const double bshift = rng.uniform(-2.0, 2.0);
    Tensor affine(xv.shape());
    for (std::size_t i = 0; i < n; ++i) affine[i] = a * xv[i] + bshift;
    const double d1 = pearson_distance(x, y)->value[0];
    const double d2 = pearson_distance(ad::leaf(affine), y)->value[0];
    if (std::fabs(d1 - d2) > 1e-8) {
      ok = false;
      detail = "affine invariance violated";
      break;
    }
  }
  if (ok) {
    try {
      pearson_distance(ad::leaf(Tensor::full({4}, 3.0)), std::vector<double>{1, 2, 3, 4});
      ok = false;
      detail = "degenerate vector not rejected";
    } catch (const DegenerateVectorError&) {
    }
  }
  return {"pearson_metamorphic", ok, detail};
}

CheckResult check_seg_loss(std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  LossWeights w;
  for (int trial = 0; trial < 5; ++trial) {
    ad::NodePtr logits = ad::leaf(random_tensor({2, 3, 4, 4}, rng));
    Tensor labels({2, 4, 4});
    for (std::size_t i = 0; i < labels.size(); ++i) {
      labels[i] = static_cast<double>(rng.below(3));
    }
    worst = std::max(worst, max_fd_err({logits}, [&] { return seg_loss(logits, labels, w); }));
  }
  return fd_check("grad_seg_loss", worst, 1e-4);
}

CheckResult check_composite(std::uint64_t seed) {
  Rng rng(seed);
  const int C = 3;
  Prototype teacher;
  teacher.num_classes = C;
  teacher.channels = C + 1;
  teacher.values.resize(teacher.num_classes * teacher.channels);
  for (auto& v : teacher.values) v = rng.uniform(-1.0, 1.0);
  teacher.present.assign(C, 1);

  LossWeights w;
  double worst = 0.0;
  for (int trial = 0; trial < 3; ++trial) {
    ad::NodePtr logits = ad::leaf(random_tensor({2, static_cast<std::size_t>(C + 1), 8, 8}, rng));
    Tensor labels({2, 8, 8});
    for (std::size_t i = 0; i < labels.size(); ++i) {
      labels[i] = static_cast<double>(rng.below(static_cast<std::uint64_t>(C + 1)));
    }
    worst = std::max(worst, max_fd_err({logits}, [&] {
      const BatchPrototypes bp = student_prototypes(logits, labels, C);
      return total_loss(logits, labels, bp, teacher, w, InterMode::per_channel).value;
    }));
  }
  return fd_check("grad_composite_objective", worst, 1e-4);
}

CheckResult check_slice_centroids(std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int C = 3;
    const std::size_t CH = 4, H = 5, W = 6;
    Tensor features = random_tensor({CH, H, W}, rng);
    Tensor labels({H, W});
    for (std::size_t i = 0; i < labels.size(); ++i) {
      labels[i] = static_cast<double>(rng.below(C + 1));
    }
    const SliceCentroids got = slice_centroids(features, labels, C);
    // pixel loop, accumulated per class
    for (int k = 1; k <= C; ++k) {
      double count = 0.0;
      std::vector<double> acc(CH, 0.0);
      for (std::size_t i = 0; i < H * W; ++i) {
        if (labels[i] == static_cast<double>(k)) {
          count += 1.0;
          for (std::size_t c = 0; c < CH; ++c) acc[c] += features[c * H * W + i];
        }
      }
      if (count == 0.0) {
        if (got.present[k - 1]) return {"oracle_slice_centroids", false, "phantom class marked present"};
        continue;
      }
      for (std::size_t c = 0; c < CH; ++c) {
        worst = std::max(worst, std::fabs(acc[c] / count - got.matrix[(k - 1) * CH + c]));
      }
    }
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "max abs diff %.3g", worst);
  return {"oracle_slice_centroids", worst < 1e-12, buf};
}

double brute_pearson_d(const std::vector<double>& x, const std::vector<double>& y) {
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

CheckResult check_inter_intra(std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int C = 3;
    const std::size_t CH = 4, H = 6, W = 6, B = 2;
    Prototype teacher;
    teacher.num_classes = C;
    teacher.channels = CH;
    teacher.values.resize(C * CH);
    for (auto& v : teacher.values) v = rng.uniform(-1.0, 1.0);
    teacher.present.assign(C, 1);
    if (trial % 4 == 0) teacher.present[static_cast<std::size_t>(rng.below(C))] = 0;

    ad::NodePtr logits = ad::leaf(random_tensor({B, CH, H, W}, rng));
    Tensor labels({B, H, W});
    for (std::size_t i = 0; i < labels.size(); ++i) {
      labels[i] = static_cast<double>(rng.below(C + 1));
    }
    const BatchPrototypes bp = student_prototypes(logits, labels, C);
    const double got_inter = inter_class_loss(bp, teacher, InterMode::per_channel).value->value[0];
    const double got_intra = intra_class_loss(bp, teacher).value->value[0];

    // straight-line re-computation from the raw tensors
    double inter_sum = 0.0, intra_sum = 0.0;
    std::size_t inter_samples = 0, intra_samples = 0;
    for (std::size_t b = 0; b < B; ++b) {
      std::vector<std::vector<double>> rows(C);
      std::vector<bool> present(C, false);
      for (int k = 1; k <= C; ++k) {
        double count = 0.0;
        std::vector<double> acc(CH, 0.0);
        for (std::size_t i = 0; i < H * W; ++i) {
          if (labels[b * H * W + i] == static_cast<double>(k)) {
            count += 1.0;
            for (std::size_t c = 0; c < CH; ++c) {
              acc[c] += logits->value[((b * CH) + c) * H * W + i];
            }
          }
        }
        if (count > 0.0 && teacher.present[k - 1]) {
          present[k - 1] = true;
          for (auto& v : acc) v /= count;
          rows[k - 1] = acc;
        }
      }
      std::vector<std::size_t> joint;
      for (std::size_t k = 0; k < static_cast<std::size_t>(C); ++k) {
        if (present[k]) joint.push_back(k);
      }
      if (joint.size() >= 2) {
        double ch_sum = 0.0;
        std::size_t ch_count = 0;
        for (std::size_t j = 0; j < CH; ++j) {
          std::vector<double> xs, ys;
          for (std::size_t k : joint) {
            xs.push_back(rows[k][j]);
            ys.push_back(teacher.values[k * CH + j]);
          }
          if (pearson_degenerate(xs, ys)) continue;
          ch_sum += brute_pearson_d(xs, ys);
          ++ch_count;
        }
        if (ch_count > 0) {
          inter_sum += ch_sum / static_cast<double>(ch_count);
          ++inter_samples;
        }
      }
      if (!joint.empty()) {
        double k_sum = 0.0;
        std::size_t k_count = 0;
        for (std::size_t k : joint) {
          std::vector<double> ys(teacher.values.begin() + static_cast<long>(k * CH),
                                 teacher.values.begin() + static_cast<long>((k + 1) * CH));
          if (pearson_degenerate(rows[k], ys)) continue;
          k_sum += brute_pearson_d(rows[k], ys);
          ++k_count;
        }
        if (k_count > 0) {
          intra_sum += k_sum / static_cast<double>(k_count);
          ++intra_samples;
        }
      }
    }
    const double want_inter = inter_samples ? inter_sum / static_cast<double>(inter_samples) : 0.0;
    const double want_intra = intra_samples ? intra_sum / static_cast<double>(intra_samples) : 0.0;
    worst = std::max({worst, std::fabs(want_inter - got_inter), std::fabs(want_intra - got_intra)});
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "max abs diff %.3g", worst);
  return {"oracle_inter_intra", worst < 1e-12, buf};
}

CheckResult check_dsc(std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    Tensor a({7, 7}), b({7, 7});
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = static_cast<double>(rng.below(3));
      b[i] = static_cast<double>(rng.below(3));
    }
    for (int k = 1; k <= 2; ++k) {
      std::size_t na = 0, nb = 0, nboth = 0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        const bool ia = a[i] == k, ib = b[i] == k;
        na += ia;
        nb += ib;
        nboth += ia && ib;
      }
      const auto got = dsc(a, b, k);
      if (nb == 0) {
        if (got) return {"oracle_dsc", false, "absent class scored"};
        continue;
      }
      const double want = 2.0 * static_cast<double>(nboth) / static_cast<double>(na + nb);
      if (!got) return {"oracle_dsc", false, "present class marked absent"};
      worst = std::max(worst, std::fabs(want - *got));
    }
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "max abs diff %.3g", worst);
  return {"oracle_dsc", worst < 1e-12, buf};
}

CheckResult check_wilcoxon(std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 8 + trial % 5;  // 8..12
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = rng.uniform(-1.0, 1.0);
      b[i] = rng.uniform(-1.0, 1.0);
      if (trial % 3 == 0) a[i] = b[i] + std::floor(rng.uniform(-2.0, 3.0));  // force ties/zeros
    }
    std::vector<double> d;
    for (std::size_t i = 0; i < n; ++i) {
      if (a[i] != b[i]) d.push_back(a[i] - b[i]);
    }
    if (d.size() < 6) continue;

    // average ranks of |d|
    const std::size_t m = d.size();
    std::vector<std::size_t> idx(m);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t i, std::size_t j) { return std::fabs(d[i]) < std::fabs(d[j]); });
    std::vector<double> ranks(m);
    std::size_t i = 0;
    while (i < m) {
      std::size_t j = i;
      while (j < m && std::fabs(d[idx[j]]) == std::fabs(d[idx[i]])) ++j;
      for (std::size_t p = i; p < j; ++p) ranks[idx[p]] = (static_cast<double>(i + j + 1)) / 2.0;
      i = j;
    }
    double w_obs = 0.0;
    for (std::size_t p = 0; p < m; ++p) {
      if (d[p] > 0.0) w_obs += ranks[p];
    }
    // exhaustive enumeration of all sign assignments
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
    const double want = std::min(
        1.0, 2.0 * std::min(static_cast<double>(le), static_cast<double>(ge)) / static_cast<double>(total));
    const double got = wilcoxon_signed_rank(a, b);
    worst = std::max(worst, std::fabs(want - got));
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "max abs p diff %.3g", worst);
  return {"oracle_wilcoxon", worst < 1e-12, buf};
}

CheckResult check_adam(std::uint64_t) {
  // one-parameter quadratic 0.5*x^2; reference recursion written out by hand
  ad::NodePtr x = ad::leaf(Tensor::scalar(1.0));
  Adam adam({x}, 0.1, 0.9, 0.999, 1e-8);
  double rx = 1.0, m = 0.0, v = 0.0;
  double worst = 0.0;
  for (int t = 1; t <= 10; ++t) {
    adam.zero_grad();
    x->grad[0] = x->value[0];  // d(0.5 x^2)/dx
    adam.step();
    const double g = rx;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, t));
    const double vh = v / (1.0 - std::pow(0.999, t));
    rx -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    worst = std::max(worst, std::fabs(rx - x->value[0]));
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "max abs diff %.3g", worst);
  return {"adam_reference", worst < 1e-12, buf};
}

}  // namespace

std::vector<CheckResult> run_selftests(std::uint64_t seed) {
  std::vector<CheckResult> results;
  results.push_back(check_conv(mix_seed(seed, 1), 2));
  results.push_back(check_conv(mix_seed(seed, 2), 3));
  results.push_back(check_elementwise(mix_seed(seed, 3)));
  results.push_back(check_masked_mean(mix_seed(seed, 4)));
  results.push_back(check_pearson(mix_seed(seed, 5)));
  results.push_back(check_pearson_metamorphic(mix_seed(seed, 6)));
  results.push_back(check_seg_loss(mix_seed(seed, 7)));
  results.push_back(check_composite(mix_seed(seed, 8)));
  results.push_back(check_slice_centroids(mix_seed(seed, 9)));
  results.push_back(check_inter_intra(mix_seed(seed, 10)));
  results.push_back(check_dsc(mix_seed(seed, 11)));
  results.push_back(check_wilcoxon(mix_seed(seed, 12)));
  results.push_back(check_adam(mix_seed(seed, 13)));
  return results;
}

}  // namespace protodist
