#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "protodist/distill_loss.hpp"
#include "protodist/models.hpp"
#include "protodist/prototype.hpp"
#include "protodist/synthdata.hpp"

namespace protodist {

struct TrainConfig {
  int teacher_epochs = 60;
  int student_epochs = 60;
  int distill_epochs = 100;
  int batch_size = 4;
  double lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 42;
  LossWeights weights;
  InterMode inter_mode = InterMode::per_channel;
};

// One line of the metrics log.
struct EpochRecord {
  int epoch = 0;  // 0 is the untrained initialization
  std::string phase;
  double loss_total = 0.0;
  double loss_seg = 0.0;
  double loss_inter = 0.0;
  double loss_intra = 0.0;
  std::vector<double> val_dsc;  // per organ class
  double val_dsc_mean = 0.0;
};

struct TrainResult {
  NetworkParams params;  // best-on-validation checkpoint
  std::vector<EpochRecord> log;
  int best_epoch = 0;
  double best_val_dsc = 0.0;
};

// Adam with bias correction over a fixed parameter list.
class Adam {
 public:
  Adam(std::vector<ad::NodePtr> params, double lr, double beta1, double beta2, double eps);
  void zero_grad();
  void step();

 private:
  std::vector<ad::NodePtr> params_;
  std::vector<Tensor> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

// Teacher pretraining on whole volumes (batch = one volume). Selects the
// best validation-DSC epoch; epoch 0 (the initialization) is a candidate.
TrainResult train_teacher(const TrainConfig& cfg, int num_classes,
                          const std::vector<LabeledVolume>& train,
                          const std::vector<LabeledVolume>& val);

// Student pretraining on 2-d slices; the returned checkpoint initializes
// distillation.
TrainResult pretrain_student(const TrainConfig& cfg, int num_classes,
                             const std::vector<LabeledSlice>& train,
                             const std::vector<LabeledSlice>& val);

// Distillation against a frozen teacher prototype; never touches 3-d data.
// With beta == 0 this is bit-identical to continued segmentation training.
// Requires a prototype with >= 2 present classes.
TrainResult distill(const TrainConfig& cfg, const NetworkParams& student_init,
                    const Prototype& proto, const std::vector<LabeledSlice>& train,
                    const std::vector<LabeledSlice>& val);

// Continued seg-loss training from an initialization; the beta = 0
// comparator for distill and the low-data baseline path.
TrainResult continue_segmentation(const TrainConfig& cfg, const NetworkParams& init,
                                  const std::vector<LabeledSlice>& train,
                                  const std::vector<LabeledSlice>& val);

// Line-delimited metrics log (one JSON object per epoch).
void write_metrics_log(const std::vector<EpochRecord>& log, const std::filesystem::path& path);

}  // namespace protodist
