#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "protodist/distill_loss.hpp"
#include "protodist/synthdata.hpp"
#include "protodist/trainer.hpp"

namespace protodist {

// Everything a run needs, parsed from one JSON file (comments allowed).
// Unknown keys and out-of-range values are rejected with the field path.
struct RunConfig {
  std::uint64_t seed = 42;

  PhantomSpec phantom;  // contrast field unused here; set per data kind below

  struct Data {
    std::size_t volumes_train = 6;
    std::size_t volumes_val = 2;
    Contrast volume_contrast = Contrast::plain;
    std::size_t slices_train = 60;
    std::size_t slices_val = 20;
    std::size_t slices_test = 60;
    Contrast slice_contrast = Contrast::plain;
  } data;

  struct Crop {
    double zlo = 0.35;
    double zhi = 0.65;
  } crop;

  TrainConfig train;  // seed is mirrored from the top-level seed

  std::vector<std::size_t> sweep_sizes{10, 20, 40, 60};

  std::string out_dir = "run";

  PhantomSpec volume_spec() const;
  PhantomSpec slice_spec() const;
};

RunConfig default_config();

RunConfig load_config(const std::filesystem::path& path);

// Apply one "dotted.key=value" override on top of a parsed config.
RunConfig apply_overrides(const RunConfig& cfg, const std::vector<std::string>& assignments);

// Canonical JSON rendering (sorted keys); the config hash is FNV-1a 64 of it.
std::string canonical_json(const RunConfig& cfg);
std::uint64_t config_hash(const RunConfig& cfg);

}  // namespace protodist
