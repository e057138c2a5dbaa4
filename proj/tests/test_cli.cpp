#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

// End-to-end checks of the command-line pipeline on a miniature
// configuration: stage composition, prerequisite errors, config-hash
// refusal, and byte-identical artifacts across reruns.

namespace fs = std::filesystem;

namespace {

const char* kMicroConfig = R"({
  "seed": 7,
  "phantom": { "classes": 4, "depth": 12, "height": 24, "width": 24 },
  "data": { "volumes_train": 2, "volumes_val": 1,
            "slices_train": 6, "slices_val": 3, "slices_test": 4 },
  "train": { "teacher_epochs": 2, "student_epochs": 2, "distill_epochs": 3, "batch_size": 2 },
  "sweep_sizes": [2, 4]
})";

fs::path work_dir() {
  const fs::path dir = fs::temp_directory_path() / "protodist_test_cli";
  return dir;
}

fs::path config_path() {
  fs::create_directories(work_dir());
  const fs::path path = work_dir() / "micro.json";
  std::ofstream(path) << kMicroConfig;
  return path;
}

struct RunOutput {
  int exit_code;
  std::string stdout_text;
  std::string stderr_text;
};

RunOutput run_cli(const std::string& args) {
  const fs::path out = work_dir() / "stdout.txt";
  const fs::path err = work_dir() / "stderr.txt";
  const std::string cmd = std::string(PROTODIST_CLI_PATH) + " " + args + " > " + out.string() +
                          " 2> " + err.string();
  const int rc = std::system(cmd.c_str());
  auto slurp = [](const fs::path& p) {
    std::ifstream is(p);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
  };
  return {WEXITSTATUS(rc), slurp(out), slurp(err)};
}

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string stage_args(const fs::path& out) {
  return "--config " + config_path().string() + " --out " + out.string();
}

}  // namespace

TEST_CASE("the full pipeline composes from one config and is deterministic") {
  const fs::path out_a = work_dir() / "run_a";
  const fs::path out_b = work_dir() / "run_b";
  fs::remove_all(out_a);
  fs::remove_all(out_b);

  for (const fs::path& out : {out_a, out_b}) {
    for (const char* stage :
         {"gen-data", "train-teacher", "extract-proto", "pretrain-student", "distill", "eval",
          "compare", "sweep"}) {
      const RunOutput r = run_cli(std::string(stage) + " " + stage_args(out));
      INFO(stage, " stderr: ", r.stderr_text);
      REQUIRE(r.exit_code == 0);
    }
  }

  for (const char* artifact :
       {"teacher.ckpt", "teacher.proto", "student_init.ckpt", "student_distilled.ckpt",
        "eval_baseline.json", "eval_distilled.json", "compare.txt", "compare.csv", "sweep.csv",
        "sweep.txt", "teacher_metrics.jsonl", "pretrain_metrics.jsonl", "distill_metrics.jsonl"}) {
    CAPTURE(artifact);
    REQUIRE(fs::exists(out_a / artifact));
    CHECK(file_bytes(out_a / artifact) == file_bytes(out_b / artifact));
  }

  // the distill stage reports its 3d-read audit
  const RunOutput distill_log = run_cli("distill " + stage_args(out_a));
  CHECK(distill_log.stdout_text.find("3d volume reads 0") != std::string::npos);
}

TEST_CASE("missing prerequisites name the producing subcommand") {
  const fs::path out = work_dir() / "run_missing";
  fs::remove_all(out);

  RunOutput r = run_cli("distill " + stage_args(out));
  CHECK(r.exit_code == 2);
  CHECK(r.stderr_text.find("missing_artifact") != std::string::npos);
  CHECK(r.stderr_text.find("extract-proto") != std::string::npos);

  r = run_cli("train-teacher " + stage_args(out));
  CHECK(r.exit_code == 2);
  CHECK(r.stderr_text.find("gen-data") != std::string::npos);

  r = run_cli("compare " + stage_args(out));
  CHECK(r.exit_code == 2);
  CHECK(r.stderr_text.find("eval") != std::string::npos);
}

TEST_CASE("config-hash mismatches are refused unless forced") {
  const fs::path out = work_dir() / "run_hash";
  fs::remove_all(out);
  REQUIRE(run_cli("gen-data " + stage_args(out)).exit_code == 0);

  const RunOutput refused =
      run_cli("train-teacher " + stage_args(out) + " --set train.teacher_epochs=1");
  CHECK(refused.exit_code == 2);
  CHECK(refused.stderr_text.find("config_hash_mismatch") != std::string::npos);
  CHECK(refused.stderr_text.find("--force") != std::string::npos);

  const RunOutput forced =
      run_cli("train-teacher " + stage_args(out) + " --set train.teacher_epochs=1 --force");
  CHECK(forced.exit_code == 0);
}

TEST_CASE("bad configs and overrides fail with a parsable error line") {
  const RunOutput bad = run_cli("gen-data --config /nonexistent.json --out " +
                                (work_dir() / "x").string());
  CHECK(bad.exit_code == 2);
  CHECK(bad.stderr_text.find("error: bad_config") != std::string::npos);

  const RunOutput bad_set =
      run_cli("gen-data " + stage_args(work_dir() / "y") + " --set data.bogus=1");
  CHECK(bad_set.exit_code == 2);
  CHECK(bad_set.stderr_text.find("data.bogus") != std::string::npos);
}

TEST_CASE("selftest reports every property") {
  const RunOutput r = run_cli("selftest --config " + config_path().string());
  CHECK(r.exit_code == 0);
  CHECK(r.stdout_text.find("grad_conv2d") != std::string::npos);
  CHECK(r.stdout_text.find("oracle_wilcoxon") != std::string::npos);
  CHECK(r.stdout_text.find("FAIL") == std::string::npos);
}
