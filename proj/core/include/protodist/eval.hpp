#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "protodist/models.hpp"
#include "protodist/prototype.hpp"
#include "protodist/synthdata.hpp"
#include "protodist/trainer.hpp"

namespace protodist {

// Dice similarity of class k between two label maps. Returns nullopt when
// the class is absent from `truth` (excluded from class means); an empty
// prediction against a nonempty truth scores 0.
std::optional<double> dsc(const Tensor& pred, const Tensor& truth, int class_id);

// Two-sided Wilcoxon signed-rank p-value for paired samples. Zero
// differences are dropped; ties get average ranks. Exact distribution for
// n <= 25, normal approximation with tie correction above. Throws
// InsufficientPairsError when fewer than 6 nonzero differences remain.
// The branch override exists to cross-check the two computations.
enum class WilcoxonBranch { automatic, exact, normal };

double wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b,
                            WilcoxonBranch branch = WilcoxonBranch::automatic);

struct ItemScore {
  std::vector<std::optional<double>> per_class;  // organ classes 1..C
  std::optional<double> mean;                    // over classes present in truth
};

struct EvalReport {
  std::string tag;
  std::size_t num_classes = 0;
  std::vector<ItemScore> items;
  std::vector<double> class_mean;            // over items where the class occurs
  std::vector<std::size_t> class_items;      // item count per class
  double mean_dsc = 0.0;                     // mean of item means
  std::uint64_t config_hash = 0;

  std::vector<double> item_means() const;    // items with a mean only
};

EvalReport evaluate_slices(const NetworkParams& net, const std::vector<LabeledSlice>& slices,
                           const std::string& tag, std::uint64_t config_hash);
EvalReport evaluate_volumes(const NetworkParams& net, const std::vector<LabeledVolume>& volumes,
                            const std::string& tag, std::uint64_t config_hash);

void write_report(const EvalReport& report, const std::filesystem::path& path);
EvalReport read_report(const std::filesystem::path& path);

// Before/after comparison over the same test items.
struct RunComparison {
  std::size_t num_classes = 0;
  std::vector<double> baseline_class, distilled_class, delta_class;
  double baseline_mean = 0.0, distilled_mean = 0.0, delta_mean = 0.0;
  std::optional<double> p_value;  // paired Wilcoxon on per-item mean DSC
  std::string p_note;             // set when the test could not run
};

RunComparison compare_runs(const EvalReport& baseline, const EvalReport& distilled);
std::string render_comparison(const RunComparison& cmp);
std::string comparison_csv(const RunComparison& cmp);

// Low-data sweep: for each n, pretrain on the first n training slices,
// distill, and evaluate both on the fixed test set.
struct SweepPoint {
  std::size_t train_size;
  double baseline_dsc;
  double distilled_dsc;
};

struct SweepResult {
  std::vector<SweepPoint> points;
};

SweepResult lowdata_sweep(const TrainConfig& cfg, int num_classes,
                          const std::vector<LabeledSlice>& train,
                          const std::vector<LabeledSlice>& val,
                          const std::vector<LabeledSlice>& test, const Prototype& proto,
                          const std::vector<std::size_t>& sizes, std::uint64_t config_hash);

std::string sweep_csv(const SweepResult& sweep);
std::string render_sweep(const SweepResult& sweep);

}  // namespace protodist
