#pragma once

#include <span>
#include <vector>

#include "protodist/autodiff.hpp"
#include "protodist/prototype.hpp"
#include "protodist/tensor.hpp"

namespace protodist {

struct LossWeights {
  double beta = 0.5;
  double lambda_dice = 1.0;
  double lambda_ce = 1.0;
};

// How the inter-class distance treats the prototype matrix: one Pearson
// distance per channel over the class axis (default), or a single distance
// over the flattened matrix.
enum class InterMode { per_channel, flat };

const char* inter_mode_name(InterMode m);

// d(x, y) = 1 - Pearson correlation, population moments, differentiable in x.
// Requires n >= 2; throws DegenerateVectorError when sigma_x * sigma_y < 1e-12.
ad::NodePtr pearson_distance(const ad::NodePtr& x, std::span<const double> y);

// Shared degeneracy test so callers can skip terms the way pearson_distance
// would reject them.
bool pearson_degenerate(std::span<const double> x, std::span<const double> y);

// Per-sample student prototype: one differentiable centroid row per class
// present in the sample's labels.
struct SamplePrototype {
  std::vector<ad::NodePtr> rows;  // size C; null where absent
  std::vector<std::uint8_t> present;
};

struct BatchPrototypes {
  std::vector<SamplePrototype> samples;
  std::size_t num_classes = 0;
  std::size_t channels = 0;
};

// On-the-fly prototypes of a student batch, from its logit map and ground
// truth: logits [B, CH, H, W], labels [B, H, W].
BatchPrototypes student_prototypes(const ad::NodePtr& logits, const Tensor& labels, int num_classes);

// A loss term that may have been skipped entirely (no sample contributed);
// skipped terms carry a zero constant.
struct LossTerm {
  ad::NodePtr value;
  bool skipped = false;
};

// Mean Pearson distance across the class axis (per channel), restricted per
// sample to classes present in both the sample and the teacher; samples with
// fewer than two joint classes are skipped and the mean renormalized.
LossTerm inter_class_loss(const BatchPrototypes& batch, const Prototype& teacher,
                          InterMode mode = InterMode::per_channel);

// Mean Pearson distance across the channel axis, one term per jointly
// present class, renormalized over contributing samples.
LossTerm intra_class_loss(const BatchPrototypes& batch, const Prototype& teacher);

LossTerm dist_loss(const BatchPrototypes& batch, const Prototype& teacher,
                   InterMode mode = InterMode::per_channel);

// lambda_ce * pixel-mean softmax cross-entropy
// + lambda_dice * (1 - mean soft Dice over classes present in labels).
// logits [B, CH, spatial...], labels [B, spatial...] with values in 0..C.
ad::NodePtr seg_loss(const ad::NodePtr& logits, const Tensor& labels, const LossWeights& w);

struct TotalLoss {
  ad::NodePtr value;
  double seg = 0.0;
  double inter = 0.0;
  double intra = 0.0;
  double dist = 0.0;
  bool dist_skipped = false;
};

// L = L_seg + beta * (L_inter + L_intra). With beta == 0 the returned node
// is exactly the seg_loss node.
TotalLoss total_loss(const ad::NodePtr& logits, const Tensor& labels, const BatchPrototypes& batch,
                     const Prototype& teacher, const LossWeights& w,
                     InterMode mode = InterMode::per_channel);

}  // namespace protodist
