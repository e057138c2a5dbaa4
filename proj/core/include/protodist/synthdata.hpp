#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "protodist/tensor.hpp"

namespace protodist {

enum class Contrast { plain, shifted };

const char* contrast_name(Contrast c);

// Phantom generator settings. Organs are C ellipsoids at canonical
// per-class positions with seeded jitter; intensities are fixed per class.
struct PhantomSpec {
  int num_classes = 4;
  std::size_t depth = 24;
  std::size_t height = 48;
  std::size_t width = 48;
  Contrast contrast = Contrast::plain;
  double noise_sd = 0.05;
  double jitter = 0.1;
};

struct LabeledVolume {
  Tensor image;   // [1, D, H, W]
  Tensor labels;  // [D, H, W], values 0..C
  std::uint64_t seed = 0;
  Contrast contrast = Contrast::plain;
};

struct LabeledSlice {
  Tensor image;   // [1, H, W]
  Tensor labels;  // [H, W], values 0..C
  std::uint64_t seed = 0;
  std::size_t z_level = 0;
  Contrast contrast = Contrast::plain;
};

// Normalized-coordinate ellipsoid (centers and radii in [0,1] units).
struct Ellipsoid {
  double cz, cy, cx;
  double rz, ry, rx;
};

// Canonical geometry of organ k (1-based) before jitter. Organs sit on a
// ring in-plane, at staggered depths, and always straddle the mid-volume
// band the prototype crop uses.
Ellipsoid canonical_organ(int k, int num_classes);

// Base intensity of class k; `shifted` models a different acquisition
// contrast by +0.3 on even and -0.2 on odd classes. Background is 0.
double class_intensity(int k, Contrast contrast);

LabeledVolume gen_volume(const PhantomSpec& spec, std::uint64_t seed);

// Independent phantom, one axial plane sampled uniformly from the
// organ-bearing z range; planes without organ pixels are resampled
// (at most 100 attempts).
LabeledSlice gen_slice(const PhantomSpec& spec, std::uint64_t seed);

// Deterministic, pairwise-disjoint slice seeds for the three splits.
struct Splits {
  std::vector<std::uint64_t> train, val, test;
};

Splits make_splits(std::size_t n_train, std::size_t n_val, std::size_t n_test,
                   std::uint64_t base_seed);

// Seeds for teacher volumes. Volume seeds are odd and slice seeds even, so
// the teacher's phantoms and the student's can never coincide.
std::vector<std::uint64_t> volume_seeds(std::size_t n, std::uint64_t base_seed);

// Every phantom seed a slice may draw internally; used by the
// unpairedness assertion.
bool is_volume_seed(std::uint64_t seed);

// ---------------------------------------------------------------------------
// on-disk dataset

void save_volume(const LabeledVolume& v, const PhantomSpec& spec, std::uint64_t config_hash,
                 const std::filesystem::path& path);
void save_slice(const LabeledSlice& s, const PhantomSpec& spec, std::uint64_t config_hash,
                const std::filesystem::path& path);
LabeledVolume load_volume(const std::filesystem::path& path);
LabeledSlice load_slice(const std::filesystem::path& path);

// Directory of one file per item plus index.json listing items, seeds and
// split membership. Reads are counted so callers can audit which data a
// stage touched.
class DatasetStore {
 public:
  explicit DatasetStore(std::filesystem::path dir);

  std::size_t volume_count(const std::string& split) const;
  std::size_t slice_count(const std::string& split) const;
  LabeledVolume load_volume(const std::string& split, std::size_t index) const;
  LabeledSlice load_slice(const std::string& split, std::size_t index) const;
  std::vector<LabeledVolume> load_volumes(const std::string& split) const;
  std::vector<LabeledSlice> load_slices(const std::string& split) const;

  std::uint64_t config_hash() const { return config_hash_; }

  struct Stats {
    std::size_t volume_reads = 0;
    std::size_t slice_reads = 0;
  };
  const Stats& stats() const { return stats_; }

 private:
  struct Entry {
    std::filesystem::path path;
    std::uint64_t seed;
  };
  const std::vector<Entry>& entries(bool volume, const std::string& split) const;

  std::filesystem::path dir_;
  std::uint64_t config_hash_ = 0;
  std::vector<Entry> volumes_train_, volumes_val_;
  std::vector<Entry> slices_train_, slices_val_, slices_test_;
  mutable Stats stats_;
};

// Generates and writes the full dataset for a configuration; asserts the
// volume/slice phantom seed sets are disjoint.
struct DatasetLayout {
  std::size_t volumes_train, volumes_val;
  Contrast volume_contrast;
  std::size_t slices_train, slices_val, slices_test;
  Contrast slice_contrast;
};

void generate_dataset(const PhantomSpec& spec, const DatasetLayout& layout, std::uint64_t seed,
                      std::uint64_t config_hash, const std::filesystem::path& dir);

}  // namespace protodist
