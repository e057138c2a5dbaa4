#include "protodist/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "protodist/errors.hpp"

namespace protodist {

std::optional<double> dsc(const Tensor& pred, const Tensor& truth, int class_id) {
  if (!pred.same_shape(truth)) {
    throw ShapeError("dsc: shape mismatch " + shape_str(pred.shape()) + " vs " +
                     shape_str(truth.shape()));
  }
  const double k = static_cast<double>(class_id);
  std::size_t a = 0, b = 0, both = 0;
  const std::size_t n = pred.size();
  for (std::size_t i = 0; i < n; ++i) {
    const bool in_a = pred[i] == k;
    const bool in_b = truth[i] == k;
    a += in_a;
    b += in_b;
    both += in_a && in_b;
  }
  if (b == 0) return std::nullopt;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank

namespace {

struct RankedDiffs {
  std::vector<double> ranks;  // of |d|, average ranks for ties
  std::vector<bool> positive;
  std::vector<std::size_t> tie_sizes;
  double w_plus = 0.0;
};

RankedDiffs rank_differences(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("wilcoxon_signed_rank: paired samples differ in length");
  }
  std::vector<double> diff;
  diff.reserve(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (d != 0.0) diff.push_back(d);
  }
  const std::size_t n = diff.size();
  if (n < 6) {
    throw InsufficientPairsError("wilcoxon_signed_rank: need >= 6 nonzero differences, got " +
                                 std::to_string(n));
  }

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) {
    return std::fabs(diff[i]) < std::fabs(diff[j]);
  });

  RankedDiffs out;
  out.ranks.assign(n, 0.0);
  out.positive.assign(n, false);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && std::fabs(diff[idx[j]]) == std::fabs(diff[idx[i]])) ++j;
    // positions i..j-1 share the average 1-based rank
    const double avg = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t p = i; p < j; ++p) out.ranks[idx[p]] = avg;
    out.tie_sizes.push_back(j - i);
    i = j;
  }
  for (std::size_t p = 0; p < n; ++p) {
    out.positive[p] = diff[p] > 0.0;
    if (out.positive[p]) out.w_plus += out.ranks[p];
  }
  return out;
}

double exact_two_sided_p(const RankedDiffs& rd) {
  const std::size_t n = rd.ranks.size();
  // average ranks are multiples of 1/2; scale to integers
  std::vector<std::size_t> scaled(n);
  std::size_t total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    scaled[i] = static_cast<std::size_t>(std::llround(2.0 * rd.ranks[i]));
    total += scaled[i];
  }
  // distribution of the scaled positive-rank sum over all 2^n sign choices
  std::vector<double> count(total + 1, 0.0);
  count[0] = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = scaled[i];
    for (std::size_t s = total; s + 1 >= r + 1; --s) count[s] += count[s - r];
  }
  const double denom = std::pow(2.0, static_cast<double>(n));
  const std::size_t w = static_cast<std::size_t>(std::llround(2.0 * rd.w_plus));
  double le = 0.0, ge = 0.0;
  for (std::size_t s = 0; s <= total; ++s) {
    if (s <= w) le += count[s];
    if (s >= w) ge += count[s];
  }
  return std::min(1.0, 2.0 * std::min(le / denom, ge / denom));
}

double normal_two_sided_p(const RankedDiffs& rd) {
  const double n = static_cast<double>(rd.ranks.size());
  const double mu = n * (n + 1.0) / 4.0;
  double tie_term = 0.0;
  for (std::size_t t : rd.tie_sizes) {
    const double td = static_cast<double>(t);
    tie_term += td * td * td - td;
  }
  const double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
  if (var <= 0.0) {
    throw InsufficientPairsError("wilcoxon_signed_rank: zero variance (all differences tied)");
  }
  const double z = (rd.w_plus - mu) / std::sqrt(var);
  return std::erfc(std::fabs(z) / std::sqrt(2.0));
}

}  // namespace

double wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b,
                            WilcoxonBranch branch) {
  const RankedDiffs rd = rank_differences(a, b);
  if (branch == WilcoxonBranch::exact) return exact_two_sided_p(rd);
  if (branch == WilcoxonBranch::normal) return normal_two_sided_p(rd);
  return rd.ranks.size() <= 25 ? exact_two_sided_p(rd) : normal_two_sided_p(rd);
}

// ---------------------------------------------------------------------------
// reports

std::vector<double> EvalReport::item_means() const {
  std::vector<double> out;
  for (const ItemScore& item : items) {
    if (item.mean) out.push_back(*item.mean);
  }
  return out;
}

namespace {

EvalReport score_items(std::size_t num_classes, const std::vector<Tensor>& preds,
                       const std::vector<const Tensor*>& truths, const std::string& tag,
                       std::uint64_t config_hash) {
  EvalReport report;
  report.tag = tag;
  report.num_classes = num_classes;
  report.config_hash = config_hash;
  report.class_mean.assign(num_classes, 0.0);
  report.class_items.assign(num_classes, 0);

  double mean_sum = 0.0;
  std::size_t mean_items = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    ItemScore item;
    item.per_class.resize(num_classes);
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t k = 1; k <= num_classes; ++k) {
      item.per_class[k - 1] = dsc(preds[i], *truths[i], static_cast<int>(k));
      if (item.per_class[k - 1]) {
        sum += *item.per_class[k - 1];
        ++count;
        report.class_mean[k - 1] += *item.per_class[k - 1];
        ++report.class_items[k - 1];
      }
    }
    if (count > 0) {
      item.mean = sum / static_cast<double>(count);
      mean_sum += *item.mean;
      ++mean_items;
    }
    report.items.push_back(std::move(item));
  }
  for (std::size_t k = 0; k < num_classes; ++k) {
    if (report.class_items[k] > 0) report.class_mean[k] /= static_cast<double>(report.class_items[k]);
  }
  report.mean_dsc = mean_items > 0 ? mean_sum / static_cast<double>(mean_items) : 0.0;
  return report;
}

}  // namespace

EvalReport evaluate_slices(const NetworkParams& net, const std::vector<LabeledSlice>& slices,
                           const std::string& tag, std::uint64_t config_hash) {
  std::vector<Tensor> preds;
  std::vector<const Tensor*> truths;
  preds.reserve(slices.size());
  for (const LabeledSlice& s : slices) {
    const std::size_t H = s.labels.dim(0), W = s.labels.dim(1);
    Tensor input({1, 1, H, W});
    std::memcpy(input.data(), s.image.data(), s.image.size() * sizeof(double));
    const Tensor logits = forward(net, ad::leaf(std::move(input)))->value;
    Tensor labels = predict(logits);  // [1, H, W]
    preds.push_back(Tensor({H, W}, {labels.data(), labels.data() + H * W}));
    truths.push_back(&s.labels);
  }
  return score_items(static_cast<std::size_t>(net.num_classes), preds, truths, tag, config_hash);
}

EvalReport evaluate_volumes(const NetworkParams& net, const std::vector<LabeledVolume>& volumes,
                            const std::string& tag, std::uint64_t config_hash) {
  std::vector<Tensor> preds;
  std::vector<const Tensor*> truths;
  preds.reserve(volumes.size());
  for (const LabeledVolume& v : volumes) {
    const std::size_t D = v.labels.dim(0), H = v.labels.dim(1), W = v.labels.dim(2);
    Tensor input({1, 1, D, H, W});
    std::memcpy(input.data(), v.image.data(), v.image.size() * sizeof(double));
    const Tensor logits = forward(net, ad::leaf(std::move(input)))->value;
    Tensor labels = predict(logits);  // [1, D, H, W]
    preds.push_back(Tensor({D, H, W}, {labels.data(), labels.data() + D * H * W}));
    truths.push_back(&v.labels);
  }
  return score_items(static_cast<std::size_t>(net.num_classes), preds, truths, tag, config_hash);
}

void write_report(const EvalReport& report, const std::filesystem::path& path) {
  nlohmann::json j;
  j["tag"] = report.tag;
  j["num_classes"] = report.num_classes;
  j["config_hash"] = report.config_hash;
  j["mean_dsc"] = report.mean_dsc;
  j["class_mean"] = report.class_mean;
  j["class_items"] = report.class_items;
  nlohmann::json items = nlohmann::json::array();
  for (const ItemScore& item : report.items) {
    nlohmann::json ji;
    nlohmann::json per_class = nlohmann::json::array();
    for (const auto& v : item.per_class) {
      if (v) {
        per_class.push_back(*v);
      } else {
        per_class.push_back(nullptr);
      }
    }
    ji["per_class"] = per_class;
    if (item.mean) {
      ji["mean"] = *item.mean;
    } else {
      ji["mean"] = nullptr;
    }
    items.push_back(ji);
  }
  j["items"] = items;
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write report: " + path.string());
  os << j.dump(2) << "\n";
}

EvalReport read_report(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open report: " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed report " + path.string() + ": " + e.what());
  }
  EvalReport report;
  try {
    report.tag = j.at("tag").get<std::string>();
    report.num_classes = j.at("num_classes").get<std::size_t>();
    report.config_hash = j.at("config_hash").get<std::uint64_t>();
    report.mean_dsc = j.at("mean_dsc").get<double>();
    report.class_mean = j.at("class_mean").get<std::vector<double>>();
    report.class_items = j.at("class_items").get<std::vector<std::size_t>>();
    for (const auto& ji : j.at("items")) {
      ItemScore item;
      for (const auto& v : ji.at("per_class")) {
        item.per_class.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
      }
      const auto& m = ji.at("mean");
      item.mean = m.is_null() ? std::nullopt : std::optional<double>(m.get<double>());
      report.items.push_back(std::move(item));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("report " + path.string() + " is missing fields: " + e.what());
  }
  return report;
}

// ---------------------------------------------------------------------------
// comparisons

RunComparison compare_runs(const EvalReport& baseline, const EvalReport& distilled) {
  if (baseline.items.size() != distilled.items.size() ||
      baseline.num_classes != distilled.num_classes) {
    throw ConfigError("compare_runs: reports cover different item sets");
  }
  RunComparison cmp;
  cmp.num_classes = baseline.num_classes;
  cmp.baseline_class = baseline.class_mean;
  cmp.distilled_class = distilled.class_mean;
  cmp.delta_class.resize(cmp.num_classes);
  for (std::size_t k = 0; k < cmp.num_classes; ++k) {
    cmp.delta_class[k] = distilled.class_mean[k] - baseline.class_mean[k];
  }
  cmp.baseline_mean = baseline.mean_dsc;
  cmp.distilled_mean = distilled.mean_dsc;
  cmp.delta_mean = distilled.mean_dsc - baseline.mean_dsc;

  std::vector<double> a, b;
  for (std::size_t i = 0; i < baseline.items.size(); ++i) {
    if (baseline.items[i].mean && distilled.items[i].mean) {
      a.push_back(*distilled.items[i].mean);
      b.push_back(*baseline.items[i].mean);
    }
  }
  try {
    cmp.p_value = wilcoxon_signed_rank(a, b);
  } catch (const InsufficientPairsError&) {
    cmp.p_note = "insufficient pairs";
  }
  return cmp;
}

namespace {
void append_row(std::string& out, const char* name, const std::vector<double>& values, double mean,
                bool sign) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%-10s", name);
  out += buf;
  for (double v : values) {
    std::snprintf(buf, sizeof(buf), sign ? "  %+7.3f" : "  %7.3f", v);
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), sign ? "  %+7.3f\n" : "  %7.3f\n", mean);
  out += buf;
}
}  // namespace

std::string render_comparison(const RunComparison& cmp) {
  std::string out;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%-10s", "method");
  out += buf;
  for (std::size_t k = 1; k <= cmp.num_classes; ++k) {
    std::snprintf(buf, sizeof(buf), "  class%-2zu", k);
    out += buf;
  }
  out += "      avg\n";
  append_row(out, "baseline", cmp.baseline_class, cmp.baseline_mean, false);
  append_row(out, "distilled", cmp.distilled_class, cmp.distilled_mean, false);
  append_row(out, "delta", cmp.delta_class, cmp.delta_mean, true);
  if (cmp.p_value) {
    std::snprintf(buf, sizeof(buf), "%.6g", *cmp.p_value);
    out += "paired Wilcoxon signed-rank on per-item mean DSC: p = ";
    out += buf;
    out += "\n";
  } else {
    out += "paired Wilcoxon signed-rank on per-item mean DSC: ";
    out += cmp.p_note;
    out += "\n";
  }
  return out;
}

std::string comparison_csv(const RunComparison& cmp) {
  std::string out = "label,baseline_dsc,distilled_dsc,delta\n";
  char buf[128];
  for (std::size_t k = 0; k < cmp.num_classes; ++k) {
    std::snprintf(buf, sizeof(buf), "class%zu,%.6f,%.6f,%.6f\n", k + 1, cmp.baseline_class[k],
                  cmp.distilled_class[k], cmp.delta_class[k]);
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "mean,%.6f,%.6f,%.6f\n", cmp.baseline_mean, cmp.distilled_mean,
                cmp.delta_mean);
  out += buf;
  return out;
}

// ---------------------------------------------------------------------------
// low-data sweep

SweepResult lowdata_sweep(const TrainConfig& cfg, int num_classes,
                          const std::vector<LabeledSlice>& train,
                          const std::vector<LabeledSlice>& val,
                          const std::vector<LabeledSlice>& test, const Prototype& proto,
                          const std::vector<std::size_t>& sizes, std::uint64_t config_hash) {
  if (sizes.empty()) throw ConfigError("lowdata_sweep: no sizes given");
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    if (sizes[i] >= sizes[i + 1]) throw ConfigError("lowdata_sweep: sizes must be ascending");
  }
  if (sizes.back() > train.size()) {
    throw ConfigError("lowdata_sweep: size " + std::to_string(sizes.back()) + " exceeds " +
                      std::to_string(train.size()) + " available training slices");
  }
  SweepResult result;
  for (std::size_t n : sizes) {
    const std::vector<LabeledSlice> subset(train.begin(), train.begin() + static_cast<long>(n));
    TrainResult base = pretrain_student(cfg, num_classes, subset, val);
    TrainResult dist = distill(cfg, base.params, proto, subset, val);
    const EvalReport base_eval = evaluate_slices(base.params, test, "baseline", config_hash);
    const EvalReport dist_eval = evaluate_slices(dist.params, test, "distilled", config_hash);
    result.points.push_back({n, base_eval.mean_dsc, dist_eval.mean_dsc});
  }
  return result;
}

std::string sweep_csv(const SweepResult& sweep) {
  std::string out = "train_size,baseline_dsc,distilled_dsc\n";
  char buf[96];
  for (const SweepPoint& p : sweep.points) {
    std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f\n", p.train_size, p.baseline_dsc, p.distilled_dsc);
    out += buf;
  }
  return out;
}

std::string render_sweep(const SweepResult& sweep) {
  std::string out = "train_size  baseline_dsc  distilled_dsc\n";
  char buf[96];
  for (const SweepPoint& p : sweep.points) {
    std::snprintf(buf, sizeof(buf), "%10zu  %12.6f  %13.6f\n", p.train_size, p.baseline_dsc,
                  p.distilled_dsc);
    out += buf;
  }
  return out;
}

}  // namespace protodist
