#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "protodist/models.hpp"
#include "protodist/synthdata.hpp"
#include "protodist/tensor.hpp"

namespace protodist {

// Dataset-level class prototype: one CH-wide centroid row per organ class.
// Rows of absent classes are all-zero and flagged; losses must never read
// them.
struct Prototype {
  std::size_t num_classes = 0;  // C
  std::size_t channels = 0;     // CH
  std::vector<double> values;   // C x CH, row-major
  std::vector<std::uint8_t> present;

  // provenance
  std::string source_tag;
  double crop_lo = 0.0, crop_hi = 1.0;
  std::vector<std::uint32_t> slice_counts;  // per class, slices that contributed
  std::uint64_t config_hash = 0;

  const double* row(std::size_t k) const { return values.data() + k * channels; }
  std::size_t present_count() const;
};

struct SliceCentroids {
  Tensor matrix;  // C x CH; absent rows zero
  std::vector<std::uint8_t> present;
};

// Per-slice class centroids: mean feature vector over each organ's mask.
// Background (label 0) produces no row.
//   features [CH, spatial...], labels [spatial...] with values in 0..C
SliceCentroids slice_centroids(const Tensor& features, const Tensor& labels, int num_classes);

// Normalized z window -> half-open slice index range [floor(zlo*D), ceil(zhi*D)).
// Requires 0 <= zlo < zhi <= 1; the result is never empty.
std::pair<std::size_t, std::size_t> crop_region(std::size_t depth, double zlo, double zhi);

// Mean of per-slice centroids over all cropped slices of all volumes, per
// class, skipping slices where the class is absent. Slices are consumed in
// (volume id, z) order so the reduction is order-stable.
Prototype dataset_prototype(const NetworkParams& teacher, const std::vector<LabeledVolume>& volumes,
                            double zlo, double zhi, const std::string& source_tag,
                            std::uint64_t config_hash);

void save_prototype(const Prototype& proto, const std::filesystem::path& path);
Prototype load_prototype(const std::filesystem::path& path);

}  // namespace protodist
