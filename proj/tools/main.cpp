#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "protodist/config.hpp"
#include "protodist/errors.hpp"
#include "protodist/eval.hpp"
#include "protodist/log.hpp"
#include "protodist/models.hpp"
#include "protodist/prototype.hpp"
#include "protodist/selftest.hpp"
#include "protodist/synthdata.hpp"
#include "protodist/trainer.hpp"

namespace fs = std::filesystem;
using namespace protodist;

namespace {

// Raised after the machine-parsable error line has been printed.
struct CliError : std::exception {};

[[noreturn]] void die(const std::string& line) {
  std::fprintf(stderr, "error: %s\n", line.c_str());
  throw CliError();
}

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  bool force = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "Run configuration file (JSON, comments allowed)");
  cmd->add_option("--set", opts.overrides, "Override a config field, dotted.key=value")
      ->take_all();
  cmd->add_option("--out", opts.out_dir, "Output directory (overrides config out_dir)");
  cmd->add_flag("--force", opts.force, "Accept artifacts produced under a different config");
}

RunConfig resolve_config(const CommonOpts& opts) {
  RunConfig cfg;
  try {
    cfg = opts.config_path.empty() ? default_config() : load_config(opts.config_path);
    cfg = apply_overrides(cfg, opts.overrides);
  } catch (const ConfigError& e) {
    die(std::string("bad_config msg=\"") + e.what() + "\"");
  }
  if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
  return cfg;
}

void require_artifact(const fs::path& path, const char* producer) {
  if (!fs::exists(path)) {
    die("missing_artifact path=" + path.string() + " producer=" + producer);
  }
}

void check_hash(std::uint64_t found, std::uint64_t expected, const fs::path& path, bool force) {
  if (found == expected) return;
  if (force) {
    log::warn("config hash mismatch on %s accepted via --force", path.string().c_str());
    return;
  }
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "config_hash_mismatch artifact=%s found=%016llx expected=%016llx hint=--force",
                path.string().c_str(), static_cast<unsigned long long>(found),
                static_cast<unsigned long long>(expected));
  die(buf);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
}

struct Paths {
  fs::path out, data, teacher_ckpt, proto, student_init, student_distilled;
  fs::path eval_baseline, eval_distilled;

  explicit Paths(const RunConfig& cfg)
      : out(cfg.out_dir),
        data(out / "data"),
        teacher_ckpt(out / "teacher.ckpt"),
        proto(out / "teacher.proto"),
        student_init(out / "student_init.ckpt"),
        student_distilled(out / "student_distilled.ckpt"),
        eval_baseline(out / "eval_baseline.json"),
        eval_distilled(out / "eval_distilled.json") {}
};

DatasetStore open_store(const Paths& paths, std::uint64_t hash, bool force) {
  require_artifact(paths.data / "index.json", "gen-data");
  DatasetStore store(paths.data);
  check_hash(store.config_hash(), hash, paths.data / "index.json", force);
  return store;
}

int cmd_gen_data(const CommonOpts& opts) {
  const RunConfig cfg = resolve_config(opts);
  const Paths paths(cfg);
  fs::create_directories(paths.data);
  DatasetLayout layout{cfg.data.volumes_train, cfg.data.volumes_val, cfg.data.volume_contrast,
                       cfg.data.slices_train,  cfg.data.slices_val,  cfg.data.slices_test,
                       cfg.data.slice_contrast};
  generate_dataset(cfg.phantom, layout, cfg.seed, config_hash(cfg), paths.data);
  std::printf("gen-data: %zu+%zu volumes (%s), %zu/%zu/%zu slices (%s) -> %s\n",
              cfg.data.volumes_train, cfg.data.volumes_val, contrast_name(cfg.data.volume_contrast),
              cfg.data.slices_train, cfg.data.slices_val, cfg.data.slices_test,
              contrast_name(cfg.data.slice_contrast), paths.data.string().c_str());
  return 0;
}

int cmd_train_teacher(const CommonOpts& opts) {
  const RunConfig cfg = resolve_config(opts);
  const Paths paths(cfg);
  const std::uint64_t hash = config_hash(cfg);
  DatasetStore store = open_store(paths, hash, opts.force);
  const auto train = store.load_volumes("train");
  const auto val = store.load_volumes("val");
  const TrainResult result = train_teacher(cfg.train, cfg.phantom.num_classes, train, val);
  save_checkpoint(result.params, paths.teacher_ckpt, hash);
  write_metrics_log(result.log, paths.out / "teacher_metrics.jsonl");
  std::printf("train-teacher: best epoch %d, val DSC %.4f -> %s\n", result.best_epoch,
              result.best_val_dsc, paths.teacher_ckpt.string().c_str());
  return 0;
}

int cmd_extract_proto(const CommonOpts& opts) {
  const RunConfig cfg = resolve_config(opts);
  const Paths paths(cfg);
  const std::uint64_t hash = config_hash(cfg);
  require_artifact(paths.teacher_ckpt, "train-teacher");
  const LoadedCheckpoint teacher = load_checkpoint(paths.teacher_ckpt);
  check_hash(teacher.config_hash, hash, paths.teacher_ckpt, opts.force);
  if (teacher.params.arch != Arch::teacher3d) {
    die("bad_artifact path=" + paths.teacher_ckpt.string() + " msg=\"not a teacher checkpoint\"");
  }
  DatasetStore store = open_store(paths, hash, opts.force);
  const auto volumes = store.load_volumes("train");
  const Prototype proto = dataset_prototype(teacher.params, volumes, cfg.crop.zlo, cfg.crop.zhi,
                                            contrast_name(cfg.data.volume_contrast), hash);
  save_prototype(proto, paths.proto);
  std::printf("extract-proto: %zu/%zu classes present over crop [%.2f, %.2f) -> %s\n",
              proto.present_count(), proto.num_classes, cfg.crop.zlo, cfg.crop.zhi,
              paths.proto.string().c_str());
  return 0;
}

int cmd_pretrain_student(const CommonOpts& opts) {
  const RunConfig cfg = resolve_config(opts);
  const Paths paths(cfg);
  const std::uint64_t hash = config_hash(cfg);
  DatasetStore store = open_store(paths, hash, opts.force);
  const auto train = store.load_slices("train");
  const auto val = store.load_slices("val");
  const TrainResult result = pretrain_student(cfg.train, cfg.phantom.num_classes, train, val);
  save_checkpoint(result.params, paths.student_init, hash);
  write_metrics_log(result.log, paths.out / "pretrain_metrics.jsonl");
  std::printf("pretrain-student: best epoch %d, val DSC %.4f -> %s\n", result.best_epoch,
              result.best_val_dsc, paths.student_init.string().c_str());
  return 0;
}

int cmd_distill(const CommonOpts& opts) {
  const RunConfig cfg = resolve_config(opts);
  const Paths paths(cfg);
  const std::uint64_t hash = config_hash(cfg);
  require_artifact(paths.proto, "extract-proto");
  require_artifact(paths.student_init, "pretrain-student");
  const Prototype proto = load_prototype(paths.proto);
  check_hash(proto.config_hash, hash, paths.proto, opts.force);
  const LoadedCheckpoint init = load_checkpoint(paths.student_init);
  check_hash(init.config_hash, hash, paths.student_init, opts.force);

  DatasetStore store = open_store(paths, hash, opts.force);
  const auto train = store.load_slices("train");
  const auto val = store.load_slices("val");
  const TrainResult result = distill(cfg.train, init.params, proto, train, val);

  // frozen-teacher audit: the stage may only consume the prototype file
  if (store.stats().volume_reads != 0) {
    die("distill_read_3d_data volume_reads=" + std::to_string(store.stats().volume_reads));
  }
  save_checkpoint(result.params, paths.student_distilled, hash);
  write_metrics_log(result.log, paths.out / "distill_metrics.jsonl");
  std::printf("distill: best epoch %d, val DSC %.4f, 3d volume reads %zu -> %s\n", result.best_epoch,
              result.best_val_dsc, store.stats().volume_reads,
              paths.student_distilled.string().c_str());
  return 0;
}

int cmd_eval(const CommonOpts& opts, const std::string& checkpoint, const std::string& report) {
  const RunConfig cfg = resolve_config(opts);
  const Paths paths(cfg);
  const std::uint64_t hash = config_hash(cfg);
  DatasetStore store = open_store(paths, hash, opts.force);
  const auto test = store.load_slices("test");

  auto run_one = [&](const fs::path& ckpt_path, const fs::path& report_path, const char* producer,
                     const std::string& tag) {
    require_artifact(ckpt_path, producer);
    const LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
    check_hash(ckpt.config_hash, hash, ckpt_path, opts.force);
    const EvalReport rep = evaluate_slices(ckpt.params, test, tag, hash);
    write_report(rep, report_path);
    std::printf("eval: %s mean test DSC %.4f -> %s\n", tag.c_str(), rep.mean_dsc,
                report_path.string().c_str());
  };

  if (!checkpoint.empty()) {
    const fs::path report_path = report.empty() ? paths.out / "eval_custom.json" : fs::path(report);
    run_one(checkpoint, report_path, "(given --checkpoint)", "custom");
    return 0;
  }
  run_one(paths.student_init, paths.eval_baseline, "pretrain-student", "baseline");
  run_one(paths.student_distilled, paths.eval_distilled, "distill", "distilled");
  return 0;
}

int cmd_compare(const CommonOpts& opts) {
  const RunConfig cfg = resolve_config(opts);
  const Paths paths(cfg);
  require_artifact(paths.eval_baseline, "eval");
  require_artifact(paths.eval_distilled, "eval");
  const EvalReport baseline = read_report(paths.eval_baseline);
  const EvalReport distilled = read_report(paths.eval_distilled);
  check_hash(baseline.config_hash, config_hash(cfg), paths.eval_baseline, opts.force);
  check_hash(distilled.config_hash, config_hash(cfg), paths.eval_distilled, opts.force);
  const RunComparison cmp = compare_runs(baseline, distilled);
  const std::string table = render_comparison(cmp);
  write_text(paths.out / "compare.txt", table);
  write_text(paths.out / "compare.csv", comparison_csv(cmp));
  std::fputs(table.c_str(), stdout);
  return 0;
}

int cmd_sweep(const CommonOpts& opts) {
  const RunConfig cfg = resolve_config(opts);
  const Paths paths(cfg);
  const std::uint64_t hash = config_hash(cfg);
  require_artifact(paths.proto, "extract-proto");
  const Prototype proto = load_prototype(paths.proto);
  check_hash(proto.config_hash, hash, paths.proto, opts.force);
  DatasetStore store = open_store(paths, hash, opts.force);
  const auto train = store.load_slices("train");
  const auto val = store.load_slices("val");
  const auto test = store.load_slices("test");
  const SweepResult sweep = lowdata_sweep(cfg.train, cfg.phantom.num_classes, train, val, test,
                                          proto, cfg.sweep_sizes, hash);
  write_text(paths.out / "sweep.csv", sweep_csv(sweep));
  write_text(paths.out / "sweep.txt", render_sweep(sweep));
  std::fputs(render_sweep(sweep).c_str(), stdout);
  return 0;
}

int cmd_selftest(const CommonOpts& opts) {
  const RunConfig cfg = resolve_config(opts);
  const auto results = run_selftests(cfg.seed);
  bool all = true;
  for (const CheckResult& r : results) {
    std::printf("%s %-26s %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
    all = all && r.passed;
  }
  std::printf("%s: %zu checks\n", all ? "OK" : "FAILED", results.size());
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unpaired 3d-to-2d prototype distillation for segmentation"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string eval_checkpoint, eval_report;

  CLI::App* gen = app.add_subcommand("gen-data", "Generate the phantom dataset");
  CLI::App* teacher = app.add_subcommand("train-teacher", "Pretrain the 3d teacher on volumes");
  CLI::App* proto = app.add_subcommand("extract-proto", "Export the dataset prototype");
  CLI::App* pretrain = app.add_subcommand("pretrain-student", "Pretrain the 2d student on slices");
  CLI::App* distill = app.add_subcommand("distill", "Distill the frozen prototype into the student");
  CLI::App* evalc = app.add_subcommand("eval", "Evaluate checkpoints on the test slices");
  CLI::App* compare = app.add_subcommand("compare", "Baseline vs distilled comparison table");
  CLI::App* sweep = app.add_subcommand("sweep", "Low-data training-set-size sweep");
  CLI::App* selftest = app.add_subcommand("selftest", "Run gradient and oracle property suites");
  for (CLI::App* cmd : {gen, teacher, proto, pretrain, distill, evalc, compare, sweep, selftest}) {
    add_common(cmd, opts);
  }
  evalc->add_option("--checkpoint", eval_checkpoint, "Evaluate one specific checkpoint");
  evalc->add_option("--report", eval_report, "Report path for --checkpoint");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(opts);
    if (teacher->parsed()) return cmd_train_teacher(opts);
    if (proto->parsed()) return cmd_extract_proto(opts);
    if (pretrain->parsed()) return cmd_pretrain_student(opts);
    if (distill->parsed()) return cmd_distill(opts);
    if (evalc->parsed()) return cmd_eval(opts, eval_checkpoint, eval_report);
    if (compare->parsed()) return cmd_compare(opts);
    if (sweep->parsed()) return cmd_sweep(opts);
    if (selftest->parsed()) return cmd_selftest(opts);
  } catch (const CliError&) {
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: failed msg=\"%s\"\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: internal msg=\"%s\"\n", e.what());
    return 3;
  }
  return 0;
}
