#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "oracles.hpp"
#include "protodist/errors.hpp"
#include "protodist/eval.hpp"
#include "protodist/prototype.hpp"
#include "protodist/synthdata.hpp"
#include "protodist/trainer.hpp"

using namespace protodist;
namespace fs = std::filesystem;

namespace {

PhantomSpec small_spec() {
  PhantomSpec spec;
  spec.depth = 12;
  spec.height = 24;
  spec.width = 24;
  return spec;
}

std::vector<LabeledSlice> small_slices(std::size_t n, std::uint64_t seed) {
  const PhantomSpec spec = small_spec();
  std::vector<LabeledSlice> out;
  const Splits splits = make_splits(n, 1, 1, seed);
  for (std::uint64_t s : splits.train) out.push_back(gen_slice(spec, s));
  return out;
}

bool params_equal(const NetworkParams& a, const NetworkParams& b) {
  for (std::size_t i = 0; i < a.kernels.size(); ++i) {
    if (!(a.kernels[i]->value == b.kernels[i]->value)) return false;
    if (!(a.biases[i]->value == b.biases[i]->value)) return false;
  }
  return true;
}

Prototype teacher_prototype_for(const std::vector<LabeledSlice>& slices, std::uint64_t seed) {
  // a plausible stand-in teacher prototype: strong diagonal, mild noise
  const int C = 4;
  Prototype p;
  p.num_classes = C;
  p.channels = C + 1;
  p.values.assign(p.num_classes * p.channels, 0.0);
  Rng rng(seed);
  for (std::size_t k = 0; k < p.num_classes; ++k) {
    for (std::size_t c = 0; c < p.channels; ++c) {
      p.values[k * p.channels + c] = (c == k + 1 ? 4.0 : -1.0) + rng.uniform(-0.3, 0.3);
    }
  }
  p.present.assign(p.num_classes, 1);
  (void)slices;
  return p;
}

}  // namespace

TEST_CASE("adam tracks a hand-rolled scalar reference for ten steps") {
  ad::NodePtr x = ad::leaf(Tensor::scalar(1.0));
  Adam adam({x}, 0.05, 0.9, 0.999, 1e-8);
  double rx = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 10; ++t) {
    adam.zero_grad();
    x->grad[0] = x->value[0];  // gradient of 0.5 x^2
    adam.step();
    const double g = rx;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    rx -= 0.05 * (m / (1.0 - std::pow(0.9, t))) / (std::sqrt(v / (1.0 - std::pow(0.999, t))) + 1e-8);
    CHECK(std::fabs(rx - x->value[0]) <= 1e-12);
  }
}

TEST_CASE("student pretraining overfits a single slice") {
  TrainConfig cfg;
  cfg.student_epochs = 200;
  cfg.batch_size = 1;
  cfg.seed = 5;
  cfg.lr = 5e-3;  // one tiny slice; the default rate needs far more steps
  const auto slices = small_slices(1, 71);
  const TrainResult r = pretrain_student(cfg, 4, slices, slices);
  const EvalReport train_eval = evaluate_slices(r.params, slices, "overfit", 0);
  CHECK(train_eval.mean_dsc >= 0.95);
}

TEST_CASE("teacher training overfits a single volume") {
  TrainConfig cfg;
  cfg.teacher_epochs = 200;
  cfg.seed = 6;
  cfg.lr = 5e-3;
  const PhantomSpec spec = small_spec();
  const std::vector<LabeledVolume> vols{gen_volume(spec, volume_seeds(1, 31)[0])};
  const TrainResult r = train_teacher(cfg, 4, vols, vols);
  const EvalReport train_eval = evaluate_volumes(r.params, vols, "overfit", 0);
  CHECK(train_eval.mean_dsc >= 0.95);
}

TEST_CASE("training phases are deterministic functions of config and data") {
  TrainConfig cfg;
  cfg.student_epochs = 4;
  cfg.seed = 9;
  const auto train = small_slices(6, 81);
  const auto val = small_slices(2, 82);
  const TrainResult a = pretrain_student(cfg, 4, train, val);
  const TrainResult b = pretrain_student(cfg, 4, train, val);
  CHECK(params_equal(a.params, b.params));
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].loss_total == b.log[i].loss_total);
    CHECK(a.log[i].val_dsc_mean == b.log[i].val_dsc_mean);
  }
}

TEST_CASE("the returned checkpoint is the argmax of the validation curve") {
  TrainConfig cfg;
  cfg.student_epochs = 6;
  cfg.seed = 10;
  const auto train = small_slices(6, 91);
  const auto val = small_slices(2, 92);
  const TrainResult r = pretrain_student(cfg, 4, train, val);

  double best = -1.0;
  int best_epoch = 0;
  for (const EpochRecord& rec : r.log) {
    if (rec.val_dsc_mean > best) {
      best = rec.val_dsc_mean;
      best_epoch = rec.epoch;
    }
  }
  CHECK(r.best_epoch == best_epoch);  // ties resolve to the earlier epoch
  CHECK(r.best_val_dsc == best);
  CHECK(r.best_val_dsc >= r.log[0].val_dsc_mean);  // epoch 0 is a candidate
}

TEST_CASE("non-finite losses abort with a diagnostic") {
  TrainConfig cfg;
  cfg.student_epochs = 3;
  cfg.seed = 11;
  auto train = small_slices(2, 95);
  // an infinite pixel survives relu and drives the cross-entropy to NaN
  train[1].image[5] = std::numeric_limits<double>::infinity();
  try {
    (void)pretrain_student(cfg, 4, train, train);
    FAIL("expected TrainError");
  } catch (const TrainError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("epoch") != std::string::npos);
  }
}

TEST_CASE("distill with beta 0 is bitwise continued segmentation training") {
  TrainConfig cfg;
  cfg.distill_epochs = 4;
  cfg.seed = 12;
  cfg.weights.beta = 0.0;
  const auto train = small_slices(6, 99);
  const auto val = small_slices(2, 100);
  const NetworkParams init = init_network(Arch::student2d, 4, 12);
  const Prototype proto = teacher_prototype_for(train, 1);

  const TrainResult distilled = distill(cfg, init, proto, train, val);
  const TrainResult continued = continue_segmentation(cfg, init, train, val);
  CHECK(params_equal(distilled.params, continued.params));
  for (std::size_t i = 0; i < distilled.log.size(); ++i) {
    CHECK(distilled.log[i].loss_total == continued.log[i].loss_total);
  }
}

TEST_CASE("distillation reduces the DIST loss on a fixed evaluation batch") {
  TrainConfig cfg;
  cfg.distill_epochs = 12;
  cfg.seed = 13;
  const auto train = small_slices(6, 103);
  const auto val = small_slices(2, 104);
  const Prototype proto = teacher_prototype_for(train, 2);

  TrainConfig pre_cfg = cfg;
  pre_cfg.student_epochs = 8;
  const TrainResult init = pretrain_student(pre_cfg, 4, train, val);
  const TrainResult result = distill(cfg, init.params, proto, train, val);

  auto dist_on_batch = [&](const NetworkParams& net) {
    const std::size_t H = train[0].labels.dim(0), W = train[0].labels.dim(1);
    Tensor input({train.size(), 1, H, W});
    Tensor labels({train.size(), H, W});
    for (std::size_t b = 0; b < train.size(); ++b) {
      std::copy(train[b].image.data(), train[b].image.data() + H * W, input.data() + b * H * W);
      std::copy(train[b].labels.data(), train[b].labels.data() + H * W, labels.data() + b * H * W);
    }
    ad::NodePtr logits = forward(net, ad::leaf(std::move(input)));
    return dist_loss(student_prototypes(logits, labels, 4), proto).value->value[0];
  };
  CHECK(dist_on_batch(result.params) <= dist_on_batch(init.params));
}

TEST_CASE("distill refuses prototypes with fewer than two present classes") {
  TrainConfig cfg;
  const auto train = small_slices(2, 107);
  const NetworkParams init = init_network(Arch::student2d, 4, 14);
  Prototype proto = teacher_prototype_for(train, 3);
  proto.present = {1, 0, 0, 0};
  CHECK_THROWS_AS(distill(cfg, init, proto, train, train), ConfigError);

  Prototype mismatched = teacher_prototype_for(train, 4);
  mismatched.num_classes = 3;
  mismatched.channels = 4;
  mismatched.values.resize(12);
  mismatched.present = {1, 1, 1};
  CHECK_THROWS_AS(distill(cfg, init, mismatched, train, train), ShapeError);
}

TEST_CASE("metrics logs serialize one json record per epoch") {
  TrainConfig cfg;
  cfg.student_epochs = 3;
  cfg.seed = 15;
  const auto train = small_slices(3, 111);
  const TrainResult r = pretrain_student(cfg, 4, train, train);

  const fs::path path = fs::temp_directory_path() / "protodist_metrics.jsonl";
  write_metrics_log(r.log, path);
  std::ifstream is(path);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(is, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("epoch"));
    CHECK(j.contains("phase"));
    CHECK(j.contains("loss_seg"));
    CHECK(j.contains("val_dsc_mean"));
    ++lines;
  }
  CHECK(lines == r.log.size());
  CHECK(lines == 4);  // epoch 0 plus three epochs
}
