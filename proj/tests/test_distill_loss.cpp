#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "protodist/distill_loss.hpp"
#include "protodist/errors.hpp"
#include "protodist/rng.hpp"

using namespace protodist;
using oracles::max_fd_rel_err;
using oracles::random_tensor;

namespace {

Prototype make_teacher(int C, std::size_t CH, Rng& rng) {
  Prototype t;
  t.num_classes = static_cast<std::size_t>(C);
  t.channels = CH;
  t.values.resize(t.num_classes * CH);
  for (auto& v : t.values) v = rng.uniform(-1.0, 1.0);
  t.present.assign(t.num_classes, 1);
  return t;
}

// batch whose sample rows are plain leaves, for direct loss algebra tests
BatchPrototypes batch_from_rows(const std::vector<std::vector<std::vector<double>>>& samples,
                                std::size_t CH) {
  BatchPrototypes b;
  b.channels = CH;
  b.num_classes = samples.front().size();
  for (const auto& rows : samples) {
    SamplePrototype sp;
    sp.present.assign(rows.size(), 0);
    sp.rows.assign(rows.size(), nullptr);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      if (rows[k].empty()) continue;
      sp.rows[k] = ad::leaf(Tensor({CH}, rows[k]));
      sp.present[k] = 1;
    }
    b.samples.push_back(std::move(sp));
  }
  return b;
}

struct RandomCase {
  ad::NodePtr logits;
  Tensor labels;
  BatchPrototypes batch;
};

RandomCase make_case(Rng& rng, int C, std::size_t B, std::size_t side) {
  RandomCase rc;
  rc.logits = ad::leaf(random_tensor({B, static_cast<std::size_t>(C) + 1, side, side}, rng));
  rc.labels = Tensor({B, side, side});
  for (std::size_t i = 0; i < rc.labels.size(); ++i) {
    rc.labels[i] = static_cast<double>(rng.below(static_cast<std::uint64_t>(C) + 1));
  }
  rc.batch = student_prototypes(rc.logits, rc.labels, C);
  return rc;
}

}  // namespace

TEST_CASE("pearson distance hits the textbook anchor points") {
  ad::NodePtr x = ad::leaf(Tensor({3}, {1.0, 2.0, 3.0}));
  CHECK(pearson_distance(x, std::vector<double>{2.0, 4.0, 6.0})->value[0] ==
        doctest::Approx(0.0).epsilon(1e-14));
  CHECK(pearson_distance(x, std::vector<double>{3.0, 2.0, 1.0})->value[0] ==
        doctest::Approx(2.0).epsilon(1e-14));
}

TEST_CASE("pearson distance matches two-pass moments and finite differences") {
  ad::NodePtr x = ad::leaf(Tensor({3}, {1.0, 2.0, 4.0}));
  const std::vector<double> y{1.0, 3.0, 2.0};
  const double expected = oracles::pearson_d({1.0, 2.0, 4.0}, y);
  CHECK(pearson_distance(x, y)->value[0] == doctest::Approx(expected).epsilon(1e-14));
  CHECK(max_fd_rel_err({x}, [&] { return pearson_distance(x, y); }) < 1e-6);
}

TEST_CASE("pearson distance rejects degenerate vectors") {
  CHECK_THROWS_AS(pearson_distance(ad::leaf(Tensor::full({4}, 1.0)), std::vector<double>{1, 2, 3, 4}),
                  DegenerateVectorError);
  CHECK_THROWS_AS(pearson_distance(ad::leaf(Tensor({4}, {1, 2, 3, 4})), std::vector<double>{7, 7, 7, 7}),
                  DegenerateVectorError);
  CHECK_THROWS_AS(pearson_distance(ad::leaf(Tensor({1}, {1.0})), std::vector<double>{1.0}), ShapeError);
  CHECK_THROWS_AS(pearson_distance(ad::leaf(Tensor({3}, {1, 2, 3})), std::vector<double>{1.0, 2.0}),
                  ShapeError);
}

TEST_CASE("pearson metamorphic identities hold on 100 random draws") {
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    Rng rng(mix_seed(600, trial));
    const std::size_t n = 4 + trial % 5;
    const Tensor xv = random_tensor({n}, rng);
    std::vector<double> y(n);
    for (auto& v : y) v = rng.uniform(-2.0, 2.0);
    if (!oracles::pearson_defined({xv.data(), xv.data() + n}, y)) continue;

    CHECK(pearson_distance(ad::leaf(xv), {xv.data(), n})->value[0] < 1e-10);

    Tensor neg(xv.shape());
    for (std::size_t i = 0; i < n; ++i) neg[i] = -xv[i];
    CHECK(std::fabs(pearson_distance(ad::leaf(neg), {xv.data(), n})->value[0] - 2.0) < 1e-10);

    const double a = rng.uniform(0.1, 4.0);
    const double b = rng.uniform(-3.0, 3.0);
    Tensor pos(xv.shape()), flip(xv.shape());
    for (std::size_t i = 0; i < n; ++i) {
      pos[i] = a * xv[i] + b;
      flip[i] = -a * xv[i] + b;
    }
    const double d = pearson_distance(ad::leaf(xv), y)->value[0];
    CHECK(std::fabs(pearson_distance(ad::leaf(pos), y)->value[0] - d) < 1e-8);
    CHECK(std::fabs(pearson_distance(ad::leaf(flip), y)->value[0] - (2.0 - d)) < 1e-8);
  }
}

TEST_CASE("student prototypes equal per-sample masked centroids") {
  Rng rng(31);
  const RandomCase rc = make_case(rng, 3, 2, 6);
  for (std::size_t b = 0; b < 2; ++b) {
    Tensor sample({4, 6, 6});
    for (std::size_t i = 0; i < sample.size(); ++i) {
      sample[i] = rc.logits->value[b * sample.size() + i];
    }
    Tensor labels({6, 6});
    for (std::size_t i = 0; i < 36; ++i) labels[i] = rc.labels[b * 36 + i];
    const auto rows = oracles::brute_centroids(sample, labels, 3);
    for (std::size_t k = 0; k < 3; ++k) {
      if (rows[k].empty()) {
        CHECK_FALSE(rc.batch.samples[b].present[k]);
        continue;
      }
      REQUIRE(rc.batch.samples[b].present[k]);
      for (std::size_t c = 0; c < 4; ++c) {
        CHECK(rc.batch.samples[b].rows[k]->value[c] == doctest::Approx(rows[k][c]).epsilon(1e-14));
      }
    }
  }
}

TEST_CASE("a sample without organs produces no prototype rows") {
  ad::NodePtr logits = ad::leaf(Tensor({1, 3, 2, 2}));
  const BatchPrototypes b = student_prototypes(logits, Tensor({1, 2, 2}), 2);
  CHECK(b.samples[0].present == std::vector<std::uint8_t>{0, 0});
}

TEST_CASE("inter-class loss is zero when the student equals the teacher") {
  Rng rng(41);
  Prototype teacher = make_teacher(3, 4, rng);
  std::vector<std::vector<double>> rows(3);
  std::vector<std::vector<double>> rows_affine(3);
  for (std::size_t k = 0; k < 3; ++k) {
    rows[k] = {teacher.row(k), teacher.row(k) + 4};
    rows_affine[k].resize(4);
    for (std::size_t c = 0; c < 4; ++c) rows_affine[k][c] = 3.0 * teacher.row(k)[c] + 7.0;
  }
  const LossTerm same = inter_class_loss(batch_from_rows({rows}, 4), teacher);
  CHECK_FALSE(same.skipped);
  CHECK(same.value->value[0] < 1e-12);
  // positive affine maps preserve every per-channel correlation
  const LossTerm affine = inter_class_loss(batch_from_rows({rows_affine}, 4), teacher);
  CHECK(affine.value->value[0] < 1e-10);
}

TEST_CASE("intra-class loss anchors: equal rows 0, negated rows 2") {
  Rng rng(43);
  Prototype teacher = make_teacher(3, 4, rng);
  std::vector<std::vector<double>> same(3), negated(3);
  for (std::size_t k = 0; k < 3; ++k) {
    same[k] = {teacher.row(k), teacher.row(k) + 4};
    negated[k].resize(4);
    for (std::size_t c = 0; c < 4; ++c) negated[k][c] = -teacher.row(k)[c];
  }
  CHECK(intra_class_loss(batch_from_rows({same}, 4), teacher).value->value[0] < 1e-12);
  CHECK(std::fabs(intra_class_loss(batch_from_rows({negated}, 4), teacher).value->value[0] - 2.0) <
        1e-10);
}

TEST_CASE("inter and intra losses match brute force on random cases") {
  for (std::uint64_t trial = 0; trial < 50; ++trial) {
    Rng rng(mix_seed(700, trial));
    const int C = 3;
    const std::size_t CH = 4;
    Prototype teacher = make_teacher(C, CH, rng);
    if (trial % 4 == 0) teacher.present[rng.below(C)] = 0;  // absent teacher class
    const RandomCase rc = make_case(rng, C, 2, 6);

    double want_inter = 0.0, want_intra = 0.0;
    std::size_t n_inter = 0, n_intra = 0;
    for (std::size_t b = 0; b < 2; ++b) {
      std::vector<std::size_t> joint;
      for (std::size_t k = 0; k < static_cast<std::size_t>(C); ++k) {
        if (rc.batch.samples[b].present[k] && teacher.present[k]) joint.push_back(k);
      }
      if (joint.size() >= 2) {
        double sum = 0.0;
        std::size_t cnt = 0;
        for (std::size_t j = 0; j < CH; ++j) {
          std::vector<double> xs, ys;
          for (std::size_t k : joint) {
            xs.push_back(rc.batch.samples[b].rows[k]->value[j]);
            ys.push_back(teacher.row(k)[j]);
          }
          if (!oracles::pearson_defined(xs, ys)) continue;
          sum += oracles::pearson_d(xs, ys);
          ++cnt;
        }
        if (cnt) {
          want_inter += sum / static_cast<double>(cnt);
          ++n_inter;
        }
      }
      if (!joint.empty()) {
        double sum = 0.0;
        std::size_t cnt = 0;
        for (std::size_t k : joint) {
          std::vector<double> xs(rc.batch.samples[b].rows[k]->value.data(),
                                 rc.batch.samples[b].rows[k]->value.data() + CH);
          std::vector<double> ys(teacher.row(k), teacher.row(k) + CH);
          if (!oracles::pearson_defined(xs, ys)) continue;
          sum += oracles::pearson_d(xs, ys);
          ++cnt;
        }
        if (cnt) {
          want_intra += sum / static_cast<double>(cnt);
          ++n_intra;
        }
      }
    }
    want_inter = n_inter ? want_inter / static_cast<double>(n_inter) : 0.0;
    want_intra = n_intra ? want_intra / static_cast<double>(n_intra) : 0.0;

    const LossTerm inter = inter_class_loss(rc.batch, teacher);
    const LossTerm intra = intra_class_loss(rc.batch, teacher);
    CHECK(std::fabs(inter.value->value[0] - want_inter) < 1e-12);
    CHECK(std::fabs(intra.value->value[0] - want_intra) < 1e-12);

    // bounds
    CHECK(inter.value->value[0] >= 0.0);
    CHECK(inter.value->value[0] <= 2.0);
    CHECK(intra.value->value[0] >= 0.0);
    CHECK(intra.value->value[0] <= 2.0);
    const LossTerm dist = dist_loss(rc.batch, teacher);
    CHECK(dist.value->value[0] >= 0.0);
    CHECK(dist.value->value[0] <= 4.0);
    CHECK(dist.value->value[0] ==
          doctest::Approx(inter.value->value[0] + intra.value->value[0]).epsilon(1e-15));
  }
}

TEST_CASE("losses are skipped cleanly when nothing contributes") {
  Rng rng(47);
  Prototype teacher = make_teacher(3, 4, rng);
  // single sample with one present class: inter skips, intra contributes
  std::vector<std::vector<double>> rows(3);
  rows[1] = {0.3, -0.2, 0.9, 0.1};
  const BatchPrototypes batch = batch_from_rows({rows}, 4);
  const LossTerm inter = inter_class_loss(batch, teacher);
  CHECK(inter.skipped);
  CHECK(inter.value->value[0] == 0.0);
  CHECK_FALSE(intra_class_loss(batch, teacher).skipped);
}

TEST_CASE("duplicating a contributing sample leaves the losses unchanged") {
  Rng rng(53);
  Prototype teacher = make_teacher(3, 4, rng);
  const RandomCase rc = make_case(rng, 3, 2, 6);

  BatchPrototypes doubled = rc.batch;
  doubled.samples.push_back(rc.batch.samples[0]);
  doubled.samples.insert(doubled.samples.begin(), rc.batch.samples[1]);
  // the duplicated batch contains the same per-sample terms, twice each
  const double inter_a = inter_class_loss(rc.batch, teacher).value->value[0];
  const double inter_b = inter_class_loss(doubled, teacher).value->value[0];
  const double intra_a = intra_class_loss(rc.batch, teacher).value->value[0];
  const double intra_b = intra_class_loss(doubled, teacher).value->value[0];
  CHECK(std::fabs(inter_a - inter_b) < 1e-12);
  CHECK(std::fabs(intra_a - intra_b) < 1e-12);
}

TEST_CASE("per-channel and per-class affine invariances of the two losses") {
  Rng rng(59);
  Prototype teacher = make_teacher(3, 4, rng);
  const RandomCase rc = make_case(rng, 3, 1, 8);
  const SamplePrototype& sp = rc.batch.samples[0];

  std::vector<std::vector<double>> base(3), col_affine(3), row_affine(3);
  std::vector<double> col_a{1.5, 0.2, 3.0, 0.7}, col_b{-1.0, 0.5, 2.0, 0.0};
  for (std::size_t k = 0; k < 3; ++k) {
    if (!sp.present[k]) continue;
    base[k].assign(sp.rows[k]->value.data(), sp.rows[k]->value.data() + 4);
    col_affine[k].resize(4);
    row_affine[k].resize(4);
    const double ra = 0.3 + static_cast<double>(k);
    for (std::size_t c = 0; c < 4; ++c) {
      col_affine[k][c] = col_a[c] * base[k][c] + col_b[c];  // same map down each column
      row_affine[k][c] = ra * base[k][c] + 0.25;            // per-class map along the row
    }
  }
  const double inter0 = inter_class_loss(batch_from_rows({base}, 4), teacher).value->value[0];
  const double inter1 = inter_class_loss(batch_from_rows({col_affine}, 4), teacher).value->value[0];
  CHECK(std::fabs(inter0 - inter1) < 1e-8);

  const double intra0 = intra_class_loss(batch_from_rows({base}, 4), teacher).value->value[0];
  const double intra1 = intra_class_loss(batch_from_rows({row_affine}, 4), teacher).value->value[0];
  CHECK(std::fabs(intra0 - intra1) < 1e-8);
}

TEST_CASE("flat inter mode correlates the whole matrices") {
  Rng rng(61);
  Prototype teacher = make_teacher(3, 4, rng);
  const RandomCase rc = make_case(rng, 3, 2, 6);
  const double got = inter_class_loss(rc.batch, teacher, InterMode::flat).value->value[0];

  double want = 0.0;
  std::size_t n = 0;
  for (const auto& sp : rc.batch.samples) {
    std::vector<double> xs, ys;
    for (std::size_t k = 0; k < 3; ++k) {
      if (!sp.present[k] || !teacher.present[k]) continue;
      for (std::size_t c = 0; c < 4; ++c) {
        xs.push_back(sp.rows[k]->value[c]);
        ys.push_back(teacher.row(k)[c]);
      }
    }
    if (xs.size() < 8 || !oracles::pearson_defined(xs, ys)) continue;  // < 2 joint classes
    want += oracles::pearson_d(xs, ys);
    ++n;
  }
  REQUIRE(n > 0);
  CHECK(std::fabs(got - want / static_cast<double>(n)) < 1e-12);
}

TEST_CASE("seg loss anchors: large margin, uniform logits, perfect one-hot") {
  // +10 margin on the correct class
  Tensor logits_t({1, 3, 4, 4});
  Tensor labels({1, 4, 4});
  Rng rng(67);
  for (std::size_t i = 0; i < 16; ++i) {
    const std::size_t y = rng.below(3);
    labels[i] = static_cast<double>(y);
    for (std::size_t c = 0; c < 3; ++c) logits_t[c * 16 + i] = c == y ? 10.0 : 0.0;
  }
  LossWeights w;
  CHECK(seg_loss(ad::leaf(logits_t), labels, w)->value[0] < 0.01);

  // uniform logits, two classes: the cross-entropy term is ln 2
  LossWeights ce_only;
  ce_only.lambda_dice = 0.0;
  Tensor uniform({2, 2, 3, 3});
  Tensor labels2({2, 3, 3});
  for (std::size_t i = 0; i < labels2.size(); ++i) labels2[i] = static_cast<double>(i % 2);
  CHECK(seg_loss(ad::leaf(uniform), labels2, ce_only)->value[0] ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // perfect one-hot prediction: the Dice term vanishes up to smoothing
  LossWeights dice_only;
  dice_only.lambda_ce = 0.0;
  Tensor sharp({1, 2, 2, 2});
  Tensor labels3({1, 2, 2}, {0.0, 1.0, 1.0, 0.0});
  for (std::size_t i = 0; i < 4; ++i) {
    const auto y = static_cast<std::size_t>(labels3[i]);
    sharp[y * 4 + i] = 60.0;
    sharp[(1 - y) * 4 + i] = -60.0;
  }
  CHECK(seg_loss(ad::leaf(sharp), labels3, dice_only)->value[0] < 1e-4);
}

TEST_CASE("seg loss validates labels against the channel count") {
  CHECK_THROWS_AS(seg_loss(ad::leaf(Tensor({1, 2, 2, 2})), Tensor::full({1, 2, 2}, 2.0), {}),
                  ShapeError);
  CHECK_THROWS_AS(seg_loss(ad::leaf(Tensor({1, 2, 2, 2})), Tensor({2, 2}), {}), ShapeError);
}

TEST_CASE("seg loss gradient matches finite differences") {
  Rng rng(71);
  ad::NodePtr logits = ad::leaf(random_tensor({2, 3, 4, 4}, rng));
  Tensor labels({2, 4, 4});
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<double>(rng.below(3));
  LossWeights w;
  CHECK(max_fd_rel_err({logits}, [&] { return seg_loss(logits, labels, w); }) < 1e-6);
}

TEST_CASE("total loss composes seg and DIST terms") {
  Rng rng(73);
  Prototype teacher = make_teacher(3, 4, rng);
  const RandomCase rc = make_case(rng, 3, 2, 8);

  LossWeights w;  // the default weighting
  CHECK(w.beta == 0.5);
  const TotalLoss tl = total_loss(rc.logits, rc.labels, rc.batch, teacher, w);
  CHECK(tl.value->value[0] ==
        doctest::Approx(tl.seg + 0.5 * (tl.inter + tl.intra)).epsilon(1e-15));
  CHECK(tl.dist == doctest::Approx(tl.inter + tl.intra).epsilon(1e-15));

  // beta = 0 reduces to the crude seg loss, bitwise
  LossWeights w0;
  w0.beta = 0.0;
  const TotalLoss tl0 = total_loss(rc.logits, rc.labels, rc.batch, teacher, w0);
  const ad::NodePtr seg = seg_loss(rc.logits, rc.labels, w0);
  CHECK(tl0.value->value[0] == seg->value[0]);
  CHECK(tl0.value->parents.size() == 1);  // it is the seg node itself
}

TEST_CASE("dist and total gradients pass finite differences through the whole graph") {
  Rng rng(79);
  Prototype teacher = make_teacher(3, 4, rng);
  LossWeights w;

  ad::NodePtr logits = ad::leaf(random_tensor({2, 4, 8, 8}, rng));
  Tensor labels({2, 8, 8});
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<double>(rng.below(4));

  const double dist_err = max_fd_rel_err({logits}, [&] {
    return dist_loss(student_prototypes(logits, labels, 3), teacher).value;
  });
  CHECK(dist_err < 1e-5);

  const double total_err = max_fd_rel_err({logits}, [&] {
    const BatchPrototypes bp = student_prototypes(logits, labels, 3);
    return total_loss(logits, labels, bp, teacher, w).value;
  });
  CHECK(total_err < 1e-5);
}
