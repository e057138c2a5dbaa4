#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "oracles.hpp"
#include "protodist/errors.hpp"
#include "protodist/synthdata.hpp"

using namespace protodist;
namespace fs = std::filesystem;

namespace {
fs::path temp_dir(const char* leaf) {
  const fs::path dir = fs::temp_directory_path() / "protodist_test_synthdata" / leaf;
  fs::create_directories(dir);
  return dir;
}
}  // namespace

TEST_CASE("noise-free, jitter-free volumes match the analytic geometry") {
  PhantomSpec spec;
  spec.noise_sd = 0.0;
  spec.jitter = 0.0;
  const LabeledVolume vol = gen_volume(spec, 101);

  std::size_t i = 0;
  for (std::size_t z = 0; z < spec.depth; ++z) {
    const double pz = (z + 0.5) / static_cast<double>(spec.depth);
    for (std::size_t y = 0; y < spec.height; ++y) {
      const double py = (y + 0.5) / static_cast<double>(spec.height);
      for (std::size_t x = 0; x < spec.width; ++x, ++i) {
        const double px = (x + 0.5) / static_cast<double>(spec.width);
        int expected = 0;
        for (int k = spec.num_classes; k >= 1; --k) {
          const Ellipsoid e = canonical_organ(k, spec.num_classes);
          const double dz = (pz - e.cz) / e.rz;
          const double dy = (py - e.cy) / e.ry;
          const double dx = (px - e.cx) / e.rx;
          if (dz * dz + dy * dy + dx * dx <= 1.0) {
            expected = k;
            break;
          }
        }
        REQUIRE(vol.labels[i] == static_cast<double>(expected));
        REQUIRE(vol.image[i] == class_intensity(expected, Contrast::plain));
      }
    }
  }
}

TEST_CASE("volume generation is bitwise deterministic per seed") {
  PhantomSpec spec;
  const LabeledVolume a = gen_volume(spec, 77);
  const LabeledVolume b = gen_volume(spec, 77);
  CHECK(a.image == b.image);
  CHECK(a.labels == b.labels);
  const LabeledVolume c = gen_volume(spec, 78);
  CHECK_FALSE(a.image == c.image);
}

TEST_CASE("mean class voxel counts stay near the analytic ellipsoid volumes") {
  PhantomSpec spec;  // default jitter
  std::vector<double> mean_counts(spec.num_classes, 0.0);
  const int runs = 50;
  for (int r = 0; r < runs; ++r) {
    const LabeledVolume vol = gen_volume(spec, 1001 + 2 * static_cast<std::uint64_t>(r));
    for (std::size_t i = 0; i < vol.labels.size(); ++i) {
      if (vol.labels[i] > 0.0) mean_counts[static_cast<std::size_t>(vol.labels[i]) - 1] += 1.0;
    }
  }
  const double voxels =
      static_cast<double>(spec.depth) * static_cast<double>(spec.height) * spec.width;
  for (int k = 1; k <= spec.num_classes; ++k) {
    const Ellipsoid e = canonical_organ(k, spec.num_classes);
    const double analytic = 4.0 / 3.0 * 3.14159265358979323846 * e.rz * e.ry * e.rx * voxels;
    const double mean = mean_counts[k - 1] / runs;
    CHECK(mean > 0.7 * analytic);
    CHECK(mean < 1.3 * analytic);
  }
}

TEST_CASE("contrast shifts move even classes up and odd classes down") {
  for (int k = 1; k <= 4; ++k) {
    const double plain = class_intensity(k, Contrast::plain);
    CHECK(plain == doctest::Approx(0.2 + 0.15 * k));
    const double delta = class_intensity(k, Contrast::shifted) - plain;
    CHECK(delta == doctest::Approx(k % 2 == 0 ? 0.3 : -0.2));
  }
  CHECK(class_intensity(0, Contrast::shifted) == 0.0);
}

TEST_CASE("slices taken at an organ's center plane contain it") {
  PhantomSpec spec;
  spec.jitter = 0.0;
  spec.noise_sd = 0.0;
  for (int k = 1; k <= spec.num_classes; ++k) {
    const Ellipsoid e = canonical_organ(k, spec.num_classes);
    const auto z = static_cast<std::size_t>(e.cz * static_cast<double>(spec.depth));
    const LabeledVolume vol = gen_volume(spec, 55);
    bool found = false;
    for (std::size_t i = z * spec.height * spec.width; i < (z + 1) * spec.height * spec.width; ++i) {
      if (vol.labels[i] == static_cast<double>(k)) found = true;
    }
    CHECK(found);
  }
}

TEST_CASE("generated slices always carry at least one organ pixel") {
  PhantomSpec spec;
  const Splits splits = make_splits(200, 1, 1, 9);
  for (std::uint64_t seed : splits.train) {
    const LabeledSlice s = gen_slice(spec, seed);
    bool organ = false;
    for (std::size_t i = 0; i < s.labels.size(); ++i) organ = organ || s.labels[i] != 0.0;
    CHECK(organ);
    CHECK(s.image.shape() == std::vector<std::size_t>{1, spec.height, spec.width});
  }
}

TEST_CASE("slice z levels cover the organ-bearing range") {
  PhantomSpec spec;
  const Splits splits = make_splits(1000, 1, 1, 13);
  // organ-bearing range of the canonical geometry, generously padded
  std::vector<std::size_t> hist(10, 0);
  std::size_t zmin = spec.depth, zmax = 0;
  for (std::uint64_t seed : splits.train) {
    const LabeledSlice s = gen_slice(spec, seed);
    zmin = std::min(zmin, s.z_level);
    zmax = std::max(zmax, s.z_level);
  }
  REQUIRE(zmax > zmin);
  std::size_t filled = 0;
  {
    std::vector<std::size_t> counts(10, 0);
    for (std::uint64_t seed : splits.train) {
      const LabeledSlice s = gen_slice(spec, seed);
      const std::size_t bin =
          std::min<std::size_t>(9, (s.z_level - zmin) * 10 / std::max<std::size_t>(1, zmax - zmin + 1));
      ++counts[bin];
    }
    for (std::size_t c : counts) filled += c > 0 ? 1 : 0;
  }
  CHECK(filled >= 9);  // >= 90% of 10 bins
}

TEST_CASE("splits are deterministic, disjoint, and sized as requested") {
  const Splits a = make_splits(60, 20, 60, 42);
  const Splits b = make_splits(60, 20, 60, 42);
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);
  CHECK(a.test == b.test);
  CHECK(a.train.size() == 60);
  CHECK(a.val.size() == 20);
  CHECK(a.test.size() == 60);

  std::set<std::uint64_t> all;
  for (const auto* split : {&a.train, &a.val, &a.test}) {
    for (std::uint64_t s : *split) all.insert(s);
  }
  CHECK(all.size() == 140);  // no seed in two splits
  CHECK_THROWS_AS(make_splits(0, 1, 1, 1), ConfigError);
}

TEST_CASE("volume and slice phantom seeds can never collide") {
  const auto vseeds = volume_seeds(50, 42);
  const Splits splits = make_splits(50, 10, 10, 42);
  for (std::uint64_t v : vseeds) CHECK(is_volume_seed(v));
  for (const auto* split : {&splits.train, &splits.val, &splits.test}) {
    for (std::uint64_t s : *split) CHECK_FALSE(is_volume_seed(s));
  }
}

TEST_CASE("image intensities stay inside the clamp range under extreme noise") {
  PhantomSpec spec;
  spec.noise_sd = 5.0;
  const LabeledVolume vol = gen_volume(spec, 3001);
  for (std::size_t i = 0; i < vol.image.size(); ++i) {
    CHECK(vol.image[i] >= -1.5);
    CHECK(vol.image[i] <= 2.5);
  }
}

TEST_CASE("dataset items round-trip bit-exactly") {
  PhantomSpec spec;
  const fs::path dir = temp_dir("items");
  const LabeledVolume vol = gen_volume(spec, volume_seeds(1, 7)[0]);
  save_volume(vol, spec, 99, dir / "vol.phnt");
  const LabeledVolume vol2 = load_volume(dir / "vol.phnt");
  CHECK(vol2.image == vol.image);
  CHECK(vol2.labels == vol.labels);
  CHECK(vol2.seed == vol.seed);

  const LabeledSlice s = gen_slice(spec, make_splits(1, 1, 1, 7).train[0]);
  save_slice(s, spec, 99, dir / "slice.phnt");
  const LabeledSlice s2 = load_slice(dir / "slice.phnt");
  CHECK(s2.image == s.image);
  CHECK(s2.labels == s.labels);
  CHECK(s2.z_level == s.z_level);

  CHECK_THROWS_AS(load_slice(dir / "vol.phnt"), IoError);
  CHECK_THROWS_AS(load_volume(dir / "missing.phnt"), IoError);
}

TEST_CASE("the dataset store serves every split and counts reads") {
  PhantomSpec spec;
  spec.depth = 8;
  spec.height = 16;
  spec.width = 16;
  const fs::path dir = temp_dir("store");
  const DatasetLayout layout{2, 1, Contrast::plain, 3, 2, 2, Contrast::plain};
  generate_dataset(spec, layout, 11, 0xFEED, dir);

  DatasetStore store(dir);
  CHECK(store.config_hash() == 0xFEED);
  CHECK(store.volume_count("train") == 2);
  CHECK(store.volume_count("val") == 1);
  CHECK(store.slice_count("train") == 3);
  CHECK(store.slice_count("val") == 2);
  CHECK(store.slice_count("test") == 2);

  (void)store.load_volumes("train");
  (void)store.load_slices("test");
  CHECK(store.stats().volume_reads == 2);
  CHECK(store.stats().slice_reads == 2);
  CHECK_THROWS_AS(store.load_slice("nope", 0), IoError);

  // regenerating the same dataset yields identical files
  const fs::path dir2 = temp_dir("store2");
  generate_dataset(spec, layout, 11, 0xFEED, dir2);
  DatasetStore store2(dir2);
  const LabeledVolume v1 = store.load_volume("train", 0);
  const LabeledVolume v2 = store2.load_volume("train", 0);
  CHECK(v1.image == v2.image);
  CHECK(v1.labels == v2.labels);
}
