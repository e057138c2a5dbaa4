#include "protodist/trainer.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "protodist/errors.hpp"
#include "protodist/eval.hpp"
#include "protodist/log.hpp"
#include "protodist/rng.hpp"

namespace protodist {

Adam::Adam(std::vector<ad::NodePtr> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.push_back(Tensor::zeros(p->value.shape()));
    v_.push_back(Tensor::zeros(p->value.shape()));
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p->grad.fill(0.0);
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& theta = params_[i]->value;
    const Tensor& grad = params_[i]->grad;
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    const std::size_t n = theta.size();
    for (std::size_t j = 0; j < n; ++j) {
      const double g = grad[j];
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
      theta[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
    }
  }
}

namespace {

constexpr std::uint64_t kSliceOrderSalt = 0x0DE8;
constexpr std::uint64_t kVolumeOrderSalt = 0x70E8;

struct ValScore {
  std::vector<double> per_class;
  double mean = 0.0;
};

ValScore val_score_slices(const NetworkParams& net, const std::vector<LabeledSlice>& val) {
  const EvalReport r = evaluate_slices(net, val, "val", 0);
  return {r.class_mean, r.mean_dsc};
}

ValScore val_score_volumes(const NetworkParams& net, const std::vector<LabeledVolume>& val) {
  const EvalReport r = evaluate_volumes(net, val, "val", 0);
  return {r.class_mean, r.mean_dsc};
}

void check_finite_loss(double loss, const char* phase, int epoch, double lr) {
  if (!std::isfinite(loss)) {
    throw TrainError(std::string(phase) + ": non-finite loss at epoch " + std::to_string(epoch) +
                     " (lr " + std::to_string(lr) + ")");
  }
}

// Shared loop for every 2-d phase. `proto == nullptr` trains on the
// segmentation loss alone; otherwise the prototype enters via the
// distillation term.
TrainResult run_slice_phase(const TrainConfig& cfg, const char* phase, NetworkParams params,
                            int epochs, const std::vector<LabeledSlice>& train,
                            const std::vector<LabeledSlice>& val, const Prototype* proto) {
  if (train.empty()) throw ConfigError(std::string(phase) + ": need at least one training slice");
  if (epochs < 1) throw ConfigError(std::string(phase) + ": epochs must be >= 1");
  const std::size_t H = train.front().labels.dim(0);
  const std::size_t W = train.front().labels.dim(1);

  // slices without any organ pixel cannot form a student prototype
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < train.size(); ++i) {
    const Tensor& lab = train[i].labels;
    if (lab.dim(0) != H || lab.dim(1) != W) {
      throw ShapeError(std::string(phase) + ": inconsistent slice shapes in training set");
    }
    bool organ = false;
    for (std::size_t j = 0; j < lab.size(); ++j) {
      if (lab[j] != 0.0) {
        organ = true;
        break;
      }
    }
    if (organ) usable.push_back(i);
  }
  if (usable.empty()) throw ConfigError(std::string(phase) + ": no training slice contains an organ");
  if (usable.size() < train.size()) {
    log::warn("%s: dropped %zu organ-less slices", phase, train.size() - usable.size());
  }

  Adam adam(params.parameters(), cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);

  TrainResult result;
  ValScore vs = val_score_slices(params, val);
  result.log.push_back({0, phase, 0.0, 0.0, 0.0, 0.0, vs.per_class, vs.mean});
  result.params = clone(params);
  result.best_epoch = 0;
  result.best_val_dsc = vs.mean;

  const std::size_t hw = H * W;
  std::vector<std::size_t> order = usable;
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(cfg.seed, kSliceOrderSalt + static_cast<std::uint64_t>(epoch)));
    order = usable;
    shuffle_rng.shuffle(order);

    double sum_total = 0.0, sum_seg = 0.0, sum_inter = 0.0, sum_intra = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t bsz = std::min(static_cast<std::size_t>(cfg.batch_size), order.size() - start);
      Tensor input({bsz, 1, H, W});
      Tensor labels({bsz, H, W});
      for (std::size_t b = 0; b < bsz; ++b) {
        const LabeledSlice& s = train[order[start + b]];
        std::memcpy(input.data() + b * hw, s.image.data(), hw * sizeof(double));
        std::memcpy(labels.data() + b * hw, s.labels.data(), hw * sizeof(double));
      }
      ad::NodePtr logits = forward(params, ad::leaf(std::move(input)));

      TotalLoss tl;
      if (proto) {
        const BatchPrototypes bp = student_prototypes(logits, labels, params.num_classes);
        tl = total_loss(logits, labels, bp, *proto, cfg.weights, cfg.inter_mode);
      } else {
        tl.value = seg_loss(logits, labels, cfg.weights);
        tl.seg = tl.value->value[0];
      }
      check_finite_loss(tl.value->value[0], phase, epoch, cfg.lr);

      adam.zero_grad();
      ad::backward(tl.value);
      adam.step();

      sum_total += tl.value->value[0];
      sum_seg += tl.seg;
      sum_inter += tl.inter;
      sum_intra += tl.intra;
      ++batches;
    }

    vs = val_score_slices(params, val);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.phase = phase;
    rec.loss_total = sum_total / static_cast<double>(batches);
    rec.loss_seg = sum_seg / static_cast<double>(batches);
    rec.loss_inter = sum_inter / static_cast<double>(batches);
    rec.loss_intra = sum_intra / static_cast<double>(batches);
    rec.val_dsc = vs.per_class;
    rec.val_dsc_mean = vs.mean;
    result.log.push_back(rec);

    if (vs.mean > result.best_val_dsc) {
      result.best_val_dsc = vs.mean;
      result.best_epoch = epoch;
      result.params = clone(params);
    }
  }
  return result;
}

}  // namespace

TrainResult train_teacher(const TrainConfig& cfg, int num_classes,
                          const std::vector<LabeledVolume>& train,
                          const std::vector<LabeledVolume>& val) {
  if (train.empty()) throw ConfigError("train_teacher: need at least one training volume");
  if (cfg.teacher_epochs < 1) throw ConfigError("train_teacher: epochs must be >= 1");

  NetworkParams params = init_network(Arch::teacher3d, num_classes, cfg.seed);
  Adam adam(params.parameters(), cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);

  TrainResult result;
  ValScore vs = val_score_volumes(params, val);
  result.log.push_back({0, "teacher", 0.0, 0.0, 0.0, 0.0, vs.per_class, vs.mean});
  result.params = clone(params);
  result.best_epoch = 0;
  result.best_val_dsc = vs.mean;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= cfg.teacher_epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(cfg.seed, kVolumeOrderSalt + static_cast<std::uint64_t>(epoch)));
    std::iota(order.begin(), order.end(), 0);
    shuffle_rng.shuffle(order);

    double sum_loss = 0.0;
    for (std::size_t idx : order) {
      const LabeledVolume& vol = train[idx];
      const std::size_t D = vol.labels.dim(0), H = vol.labels.dim(1), W = vol.labels.dim(2);
      Tensor input({1, 1, D, H, W});
      std::memcpy(input.data(), vol.image.data(), vol.image.size() * sizeof(double));
      Tensor labels({1, D, H, W});
      std::memcpy(labels.data(), vol.labels.data(), vol.labels.size() * sizeof(double));

      ad::NodePtr logits = forward(params, ad::leaf(std::move(input)));
      ad::NodePtr loss = seg_loss(logits, labels, cfg.weights);
      check_finite_loss(loss->value[0], "teacher", epoch, cfg.lr);

      adam.zero_grad();
      ad::backward(loss);
      adam.step();
      sum_loss += loss->value[0];
    }

    vs = val_score_volumes(params, val);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.phase = "teacher";
    rec.loss_total = sum_loss / static_cast<double>(train.size());
    rec.loss_seg = rec.loss_total;
    rec.val_dsc = vs.per_class;
    rec.val_dsc_mean = vs.mean;
    result.log.push_back(rec);

    if (vs.mean > result.best_val_dsc) {
      result.best_val_dsc = vs.mean;
      result.best_epoch = epoch;
      result.params = clone(params);
    }
  }
  return result;
}

TrainResult pretrain_student(const TrainConfig& cfg, int num_classes,
                             const std::vector<LabeledSlice>& train,
                             const std::vector<LabeledSlice>& val) {
  NetworkParams params = init_network(Arch::student2d, num_classes, cfg.seed);
  return run_slice_phase(cfg, "pretrain", std::move(params), cfg.student_epochs, train, val, nullptr);
}

TrainResult distill(const TrainConfig& cfg, const NetworkParams& student_init,
                    const Prototype& proto, const std::vector<LabeledSlice>& train,
                    const std::vector<LabeledSlice>& val) {
  if (student_init.arch != Arch::student2d) {
    throw ConfigError("distill: initialization must be a student2d checkpoint");
  }
  if (proto.present_count() < 2) {
    throw ConfigError("distill: prototype has fewer than 2 present classes; inter-class loss undefined");
  }
  if (proto.num_classes != static_cast<std::size_t>(student_init.num_classes) ||
      proto.channels != student_init.out_channels()) {
    throw ShapeError("distill: prototype dimensions do not match the student head");
  }
  // beta = 0 reduces the objective to the segmentation loss; run the shared
  // loop without the prototype so the trajectory is the continued-training one
  const Prototype* p = cfg.weights.beta == 0.0 ? nullptr : &proto;
  return run_slice_phase(cfg, "distill", clone(student_init), cfg.distill_epochs, train, val, p);
}

TrainResult continue_segmentation(const TrainConfig& cfg, const NetworkParams& init,
                                  const std::vector<LabeledSlice>& train,
                                  const std::vector<LabeledSlice>& val) {
  return run_slice_phase(cfg, "continued", clone(init), cfg.distill_epochs, train, val, nullptr);
}

void write_metrics_log(const std::vector<EpochRecord>& log, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write metrics log: " + path.string());
  for (const EpochRecord& rec : log) {
    nlohmann::json j;
    j["epoch"] = rec.epoch;
    j["phase"] = rec.phase;
    j["loss_total"] = rec.loss_total;
    j["loss_seg"] = rec.loss_seg;
    j["loss_inter"] = rec.loss_inter;
    j["loss_intra"] = rec.loss_intra;
    j["val_dsc"] = rec.val_dsc;
    j["val_dsc_mean"] = rec.val_dsc_mean;
    os << j.dump() << "\n";
  }
}

}  // namespace protodist
