#include "protodist/distill_loss.hpp"

#include <algorithm>
#include <cmath>

#include "protodist/errors.hpp"
#include "protodist/log.hpp"

namespace protodist {

const char* inter_mode_name(InterMode m) {
  return m == InterMode::per_channel ? "per_channel" : "flat";
}

namespace {

constexpr double kDegenerateEps = 1e-12;

struct Moments {
  std::size_t n;
  double mean_x, mean_y;
  double var_x, var_y;  // population
  double cov;
  double sx_sy;
  double rho;
};

Moments moments(std::span<const double> x, std::span<const double> y) {
  Moments m{};
  m.n = x.size();
  const double n = static_cast<double>(m.n);
  double sx = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < m.n; ++i) {
    sx += x[i];
    sy += y[i];
  }
  m.mean_x = sx / n;
  m.mean_y = sy / n;
  double vxx = 0.0, vyy = 0.0, vxy = 0.0;
  for (std::size_t i = 0; i < m.n; ++i) {
    const double u = x[i] - m.mean_x;
    const double w = y[i] - m.mean_y;
    vxx += u * u;
    vyy += w * w;
    vxy += u * w;
  }
  m.var_x = vxx / n;
  m.var_y = vyy / n;
  m.cov = vxy / n;
  m.sx_sy = std::sqrt(m.var_x) * std::sqrt(m.var_y);
  m.rho = m.sx_sy < kDegenerateEps ? 0.0 : m.cov / m.sx_sy;
  return m;
}

}  // namespace

bool pearson_degenerate(std::span<const double> x, std::span<const double> y) {
  return moments(x, y).sx_sy < kDegenerateEps;
}

ad::NodePtr pearson_distance(const ad::NodePtr& x, std::span<const double> y) {
  const Tensor& xv = x->value;
  if (xv.rank() != 1 || xv.size() < 2) {
    throw ShapeError("pearson_distance: x must be a vector of length >= 2, got " +
                     shape_str(xv.shape()));
  }
  if (y.size() != xv.size()) {
    throw ShapeError("pearson_distance: length mismatch " + std::to_string(xv.size()) + " vs " +
                     std::to_string(y.size()));
  }
  const Moments m = moments({xv.data(), xv.size()}, y);
  if (m.sx_sy < kDegenerateEps) {
    throw DegenerateVectorError("pearson_distance: a vector is (numerically) constant");
  }
  const double d = std::clamp(1.0 - m.rho, 0.0, 2.0);

  std::vector<double> y_copy(y.begin(), y.end());
  return ad::make_node(Tensor::scalar(d), {x}, [m, y_copy](ad::Node& self) {
    ad::Node& p = *self.parents[0];
    const double g = self.grad[0];
    const double n = static_cast<double>(m.n);
    // dd/dx_i = rho*u_i/(n*var_x) - w_i/(n*sx*sy)
    for (std::size_t i = 0; i < m.n; ++i) {
      const double u = p.value[i] - m.mean_x;
      const double w = y_copy[i] - m.mean_y;
      p.grad[i] += g * (m.rho * u / (n * m.var_x) - w / (n * m.sx_sy));
    }
  });
}

// ---------------------------------------------------------------------------
// batch prototypes

BatchPrototypes student_prototypes(const ad::NodePtr& logits, const Tensor& labels, int num_classes) {
  const Tensor& lv = logits->value;
  if (lv.rank() < 3) {
    throw ShapeError("student_prototypes: logits must be [B, CH, spatial...], got " +
                     shape_str(lv.shape()));
  }
  if (labels.rank() != lv.rank() - 1 || labels.dim(0) != lv.dim(0)) {
    throw ShapeError("student_prototypes: labels shape " + shape_str(labels.shape()) +
                     " does not match logits " + shape_str(lv.shape()));
  }
  const std::size_t B = lv.dim(0);
  const std::size_t CH = lv.dim(1);
  const std::size_t C = static_cast<std::size_t>(num_classes);
  const std::vector<std::size_t> spatial(lv.shape().begin() + 2, lv.shape().end());
  const std::size_t n = shape_size(spatial);

  BatchPrototypes batch;
  batch.num_classes = C;
  batch.channels = CH;
  batch.samples.resize(B);
  for (std::size_t b = 0; b < B; ++b) {
    SamplePrototype& sp = batch.samples[b];
    sp.rows.assign(C, nullptr);
    sp.present.assign(C, 0);
    const double* lab = labels.data() + b * n;
    ad::NodePtr features;  // built lazily; samples without organs never select
    for (std::size_t k = 1; k <= C; ++k) {
      Tensor mask(spatial);
      std::size_t count = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (lab[i] == static_cast<double>(k)) {
          mask[i] = 1.0;
          ++count;
        }
      }
      if (count == 0) continue;
      if (!features) features = ad::select(logits, b);
      sp.rows[k - 1] = ad::masked_mean(features, mask);
      sp.present[k - 1] = 1;
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// inter / intra losses

namespace {

// Stacks element j of each row into a vector node.
ad::NodePtr gather_channel(const std::vector<ad::NodePtr>& rows, std::size_t j) {
  Tensor v({rows.size()});
  for (std::size_t i = 0; i < rows.size(); ++i) v[i] = rows[i]->value[j];
  return ad::make_node(std::move(v), rows, [j](ad::Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      self.parents[i]->grad[j] += self.grad[i];
    }
  });
}

// Concatenates whole rows (class-major) into one vector node.
ad::NodePtr concat_rows(const std::vector<ad::NodePtr>& rows) {
  const std::size_t ch = rows.front()->value.size();
  Tensor v({rows.size() * ch});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < ch; ++j) v[i * ch + j] = rows[i]->value[j];
  }
  return ad::make_node(std::move(v), rows, [ch](ad::Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      for (std::size_t j = 0; j < ch; ++j) {
        self.parents[i]->grad[j] += self.grad[i * ch + j];
      }
    }
  });
}

ad::NodePtr mean_nodes(const std::vector<ad::NodePtr>& terms) {
  ad::NodePtr acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = ad::add(acc, terms[i]);
  return terms.size() == 1 ? acc : ad::scale(acc, 1.0 / static_cast<double>(terms.size()));
}

std::vector<std::size_t> joint_classes(const SamplePrototype& sp, const Prototype& teacher) {
  std::vector<std::size_t> joint;
  for (std::size_t k = 0; k < teacher.num_classes; ++k) {
    if (sp.present[k] && teacher.present[k]) joint.push_back(k);
  }
  return joint;
}

void check_compatible(const BatchPrototypes& batch, const Prototype& teacher) {
  if (batch.num_classes != teacher.num_classes || batch.channels != teacher.channels) {
    throw ShapeError("prototype shape mismatch: batch " + std::to_string(batch.num_classes) + "x" +
                     std::to_string(batch.channels) + " vs teacher " +
                     std::to_string(teacher.num_classes) + "x" + std::to_string(teacher.channels));
  }
}

}  // namespace

LossTerm inter_class_loss(const BatchPrototypes& batch, const Prototype& teacher, InterMode mode) {
  check_compatible(batch, teacher);
  const std::size_t CH = batch.channels;
  std::vector<ad::NodePtr> sample_terms;

  for (const SamplePrototype& sp : batch.samples) {
    const std::vector<std::size_t> joint = joint_classes(sp, teacher);
    if (joint.size() < 2) continue;  // correlation over classes needs >= 2
    std::vector<ad::NodePtr> rows;
    rows.reserve(joint.size());
    for (std::size_t k : joint) rows.push_back(sp.rows[k]);

    if (mode == InterMode::flat) {
      std::vector<double> y(joint.size() * CH);
      std::vector<double> xv(joint.size() * CH);
      for (std::size_t i = 0; i < joint.size(); ++i) {
        for (std::size_t j = 0; j < CH; ++j) {
          y[i * CH + j] = teacher.row(joint[i])[j];
          xv[i * CH + j] = rows[i]->value[j];
        }
      }
      if (pearson_degenerate(xv, y)) continue;
      sample_terms.push_back(pearson_distance(concat_rows(rows), y));
      continue;
    }

    std::vector<ad::NodePtr> channel_terms;
    std::vector<double> xv(joint.size());
    std::vector<double> y(joint.size());
    for (std::size_t j = 0; j < CH; ++j) {
      for (std::size_t i = 0; i < joint.size(); ++i) {
        xv[i] = rows[i]->value[j];
        y[i] = teacher.row(joint[i])[j];
      }
      if (pearson_degenerate(xv, y)) continue;
      channel_terms.push_back(pearson_distance(gather_channel(rows, j), y));
    }
    if (channel_terms.empty()) continue;
    sample_terms.push_back(mean_nodes(channel_terms));
  }

  if (sample_terms.empty()) {
    log::debug("inter_class_loss: no sample contributed; term skipped");
    return {ad::leaf(Tensor::scalar(0.0)), true};
  }
  return {mean_nodes(sample_terms), false};
}

LossTerm intra_class_loss(const BatchPrototypes& batch, const Prototype& teacher) {
  check_compatible(batch, teacher);
  std::vector<ad::NodePtr> sample_terms;

  for (const SamplePrototype& sp : batch.samples) {
    const std::vector<std::size_t> joint = joint_classes(sp, teacher);
    std::vector<ad::NodePtr> class_terms;
    for (std::size_t k : joint) {
      const ad::NodePtr& row = sp.rows[k];
      const std::span<const double> y{teacher.row(k), teacher.channels};
      if (pearson_degenerate({row->value.data(), row->value.size()}, y)) continue;
      class_terms.push_back(pearson_distance(row, y));
    }
    if (class_terms.empty()) continue;
    sample_terms.push_back(mean_nodes(class_terms));
  }

  if (sample_terms.empty()) {
    log::debug("intra_class_loss: no sample contributed; term skipped");
    return {ad::leaf(Tensor::scalar(0.0)), true};
  }
  return {mean_nodes(sample_terms), false};
}

LossTerm dist_loss(const BatchPrototypes& batch, const Prototype& teacher, InterMode mode) {
  const LossTerm inter = inter_class_loss(batch, teacher, mode);
  const LossTerm intra = intra_class_loss(batch, teacher);
  return {ad::add(inter.value, intra.value), inter.skipped && intra.skipped};
}

// ---------------------------------------------------------------------------
// segmentation loss (softmax cross-entropy + soft Dice, fused node)

namespace {
constexpr double kDiceSmooth = 1e-5;
}

ad::NodePtr seg_loss(const ad::NodePtr& logits, const Tensor& labels, const LossWeights& w) {
  const Tensor& lv = logits->value;
  if (lv.rank() < 3) {
    throw ShapeError("seg_loss: logits must be [B, CH, spatial...], got " + shape_str(lv.shape()));
  }
  if (labels.rank() != lv.rank() - 1 || labels.dim(0) != lv.dim(0)) {
    throw ShapeError("seg_loss: labels shape " + shape_str(labels.shape()) + " vs logits " +
                     shape_str(lv.shape()));
  }
  const std::size_t B = lv.dim(0);
  const std::size_t CH = lv.dim(1);
  const std::vector<std::size_t> spatial(lv.shape().begin() + 2, lv.shape().end());
  if (std::vector<std::size_t>(labels.shape().begin() + 1, labels.shape().end()) != spatial) {
    throw ShapeError("seg_loss: labels spatial shape mismatch");
  }
  const std::size_t n = shape_size(spatial);
  const std::size_t pixels = B * n;

  // softmax probabilities, cross-entropy, and per-class Dice tallies
  Tensor prob(lv.shape());
  double ce = 0.0;
  std::vector<double> tcount(CH, 0.0), inter(CH, 0.0), psum(CH, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    const double* lbase = lv.data() + b * CH * n;
    double* pbase = prob.data() + b * CH * n;
    const double* lab = labels.data() + b * n;
    for (std::size_t i = 0; i < n; ++i) {
      const double l = lab[i];
      if (l < 0.0 || l >= static_cast<double>(CH) || l != std::floor(l)) {
        throw ShapeError("seg_loss: label value " + std::to_string(l) + " outside 0.." +
                         std::to_string(CH - 1));
      }
      const std::size_t y = static_cast<std::size_t>(l);
      double mx = lbase[i];
      for (std::size_t c = 1; c < CH; ++c) mx = std::max(mx, lbase[c * n + i]);
      double se = 0.0;
      for (std::size_t c = 0; c < CH; ++c) se += std::exp(lbase[c * n + i] - mx);
      const double lse = mx + std::log(se);
      for (std::size_t c = 0; c < CH; ++c) {
        const double p = std::exp(lbase[c * n + i] - lse);
        pbase[c * n + i] = p;
        psum[c] += p;
      }
      ce += lse - lbase[y * n + i];
      tcount[y] += 1.0;
      inter[y] += pbase[y * n + i];
    }
  }
  ce /= static_cast<double>(pixels);

  std::vector<std::uint8_t> class_present(CH, 0);
  std::vector<double> dice_n(CH, 0.0), dice_m(CH, 0.0);
  double dice_sum = 0.0;
  std::size_t present_classes = 0;
  for (std::size_t c = 0; c < CH; ++c) {
    if (tcount[c] <= 0.0) continue;
    class_present[c] = 1;
    ++present_classes;
    dice_n[c] = 2.0 * inter[c] + kDiceSmooth;
    dice_m[c] = psum[c] + tcount[c] + kDiceSmooth;
    dice_sum += dice_n[c] / dice_m[c];
  }
  const double dice_term =
      present_classes == 0 ? 0.0 : 1.0 - dice_sum / static_cast<double>(present_classes);

  const double value = w.lambda_ce * ce + w.lambda_dice * dice_term;

  // Backward uses the stored probabilities; per-class constants are linear
  // in the upstream gradient and recomputed per call.
  Tensor labels_copy = labels;
  return ad::make_node(
      Tensor::scalar(value), {logits},
      [prob = std::move(prob), labels_copy = std::move(labels_copy), dice_n, dice_m, class_present,
       present_classes, B, CH, n, pixels, w](ad::Node& self) {
        ad::Node& parent = *self.parents[0];
        const double g = self.grad[0];
        const double ce_coeff = w.lambda_ce * g / static_cast<double>(pixels);
        std::vector<double> q1(CH, 0.0), q0(CH, 0.0);
        if (present_classes > 0) {
          const double dice_coeff = -w.lambda_dice * g / static_cast<double>(present_classes);
          for (std::size_t c = 0; c < CH; ++c) {
            if (!class_present[c]) continue;
            const double m2 = dice_m[c] * dice_m[c];
            q1[c] = dice_coeff * (2.0 * dice_m[c] - dice_n[c]) / m2;
            q0[c] = dice_coeff * (-dice_n[c]) / m2;
          }
        }
        for (std::size_t b = 0; b < B; ++b) {
          const double* pbase = prob.data() + b * CH * n;
          double* gbase = parent.grad.data() + b * CH * n;
          const double* lab = labels_copy.data() + b * n;
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t y = static_cast<std::size_t>(lab[i]);
            double s1 = 0.0;
            for (std::size_t c = 0; c < CH; ++c) {
              if (!class_present[c]) continue;
              const double q = (c == y) ? q1[c] : q0[c];
              s1 += q * pbase[c * n + i];
            }
            for (std::size_t c = 0; c < CH; ++c) {
              const double p = pbase[c * n + i];
              const double q = class_present[c] ? ((c == y) ? q1[c] : q0[c]) : 0.0;
              gbase[c * n + i] += ce_coeff * (p - (c == y ? 1.0 : 0.0)) + p * (q - s1);
            }
          }
        }
      });
}

TotalLoss total_loss(const ad::NodePtr& logits, const Tensor& labels, const BatchPrototypes& batch,
                     const Prototype& teacher, const LossWeights& w, InterMode mode) {
  TotalLoss out;
  ad::NodePtr seg = seg_loss(logits, labels, w);
  out.seg = seg->value[0];
  if (w.beta == 0.0) {
    out.value = seg;
    return out;
  }
  const LossTerm inter = inter_class_loss(batch, teacher, mode);
  const LossTerm intra = intra_class_loss(batch, teacher);
  out.inter = inter.value->value[0];
  out.intra = intra.value->value[0];
  out.dist = out.inter + out.intra;
  out.dist_skipped = inter.skipped && intra.skipped;
  if (out.dist_skipped) {
    out.value = seg;
    return out;
  }
  out.value = ad::add(seg, ad::scale(ad::add(inter.value, intra.value), w.beta));
  return out;
}

}  // namespace protodist
