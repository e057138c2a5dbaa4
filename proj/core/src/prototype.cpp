#include "protodist/prototype.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "protodist/bytes.hpp"
#include "protodist/errors.hpp"

namespace protodist {

std::size_t Prototype::present_count() const {
  std::size_t n = 0;
  for (auto p : present) n += p ? 1 : 0;
  return n;
}

SliceCentroids slice_centroids(const Tensor& features, const Tensor& labels, int num_classes) {
  if (features.rank() < 2) {
    throw ShapeError("slice_centroids: features must be [CH, spatial...], got " +
                     shape_str(features.shape()));
  }
  const std::vector<std::size_t> spatial(features.shape().begin() + 1, features.shape().end());
  if (labels.shape() != spatial) {
    throw ShapeError("slice_centroids: labels shape " + shape_str(labels.shape()) +
                     " vs feature spatial shape " + shape_str(spatial));
  }
  const std::size_t C = static_cast<std::size_t>(num_classes);
  const std::size_t CH = features.dim(0);
  const std::size_t n = labels.size();

  std::vector<std::size_t> counts(C, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const double l = labels[i];
    if (l < 0.0 || l > static_cast<double>(num_classes) || l != std::floor(l)) {
      throw ShapeError("slice_centroids: label value " + std::to_string(l) + " outside 0.." +
                       std::to_string(num_classes));
    }
    if (l > 0.0) ++counts[static_cast<std::size_t>(l) - 1];
  }

  SliceCentroids out;
  out.matrix = Tensor({C, CH});
  out.present.assign(C, 0);
  for (std::size_t ch = 0; ch < CH; ++ch) {
    const double* row = features.data() + ch * n;
    std::vector<double> acc(C, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double l = labels[i];
      if (l > 0.0) acc[static_cast<std::size_t>(l) - 1] += row[i];
    }
    for (std::size_t k = 0; k < C; ++k) {
      if (counts[k] > 0) out.matrix[k * CH + ch] = acc[k] / static_cast<double>(counts[k]);
    }
  }
  for (std::size_t k = 0; k < C; ++k) out.present[k] = counts[k] > 0 ? 1 : 0;
  return out;
}

std::pair<std::size_t, std::size_t> crop_region(std::size_t depth, double zlo, double zhi) {
  if (!(zlo >= 0.0 && zlo < zhi && zhi <= 1.0)) {
    throw ConfigError("crop_region: need 0 <= zlo < zhi <= 1, got (" + std::to_string(zlo) + ", " +
                      std::to_string(zhi) + ")");
  }
  if (depth == 0) throw ShapeError("crop_region: empty volume");
  const double d = static_cast<double>(depth);
  auto lo = static_cast<std::size_t>(std::floor(zlo * d));
  auto hi = static_cast<std::size_t>(std::ceil(zhi * d));
  lo = std::min(lo, depth - 1);
  hi = std::min(std::max(hi, lo + 1), depth);
  return {lo, hi};
}

Prototype dataset_prototype(const NetworkParams& teacher, const std::vector<LabeledVolume>& volumes,
                            double zlo, double zhi, const std::string& source_tag,
                            std::uint64_t config_hash) {
  if (teacher.arch != Arch::teacher3d) {
    throw ConfigError("dataset_prototype: teacher must be the 3-d network");
  }
  if (volumes.empty()) throw ConfigError("dataset_prototype: need at least one volume");

  const std::size_t C = static_cast<std::size_t>(teacher.num_classes);
  const std::size_t CH = teacher.out_channels();

  std::vector<double> sums(C * CH, 0.0);
  std::vector<std::uint32_t> counts(C, 0);

  for (const LabeledVolume& vol : volumes) {
    const std::size_t D = vol.labels.dim(0);
    const std::size_t H = vol.labels.dim(1);
    const std::size_t W = vol.labels.dim(2);
    const std::size_t hw = H * W;
    const auto [lo, hi] = crop_region(D, zlo, zhi);

    Tensor input({1, 1, D, H, W});
    std::memcpy(input.data(), vol.image.data(), vol.image.size() * sizeof(double));
    const Tensor logits = forward(teacher, ad::leaf(std::move(input)))->value;  // [1, CH, D, H, W]
    for (std::size_t z = lo; z < hi; ++z) {
      Tensor features({CH, H, W});
      for (std::size_t c = 0; c < CH; ++c) {
        std::memcpy(features.data() + c * hw, logits.data() + (c * D + z) * hw, hw * sizeof(double));
      }
      Tensor labels({H, W});
      std::memcpy(labels.data(), vol.labels.data() + z * hw, hw * sizeof(double));
      const SliceCentroids sc = slice_centroids(features, labels, teacher.num_classes);
      for (std::size_t k = 0; k < C; ++k) {
        if (!sc.present[k]) continue;
        for (std::size_t c = 0; c < CH; ++c) sums[k * CH + c] += sc.matrix[k * CH + c];
        ++counts[k];
      }
    }
  }

  Prototype proto;
  proto.num_classes = C;
  proto.channels = CH;
  proto.values.assign(C * CH, 0.0);
  proto.present.assign(C, 0);
  proto.slice_counts = counts;
  proto.crop_lo = zlo;
  proto.crop_hi = zhi;
  proto.source_tag = source_tag;
  proto.config_hash = config_hash;
  bool any = false;
  for (std::size_t k = 0; k < C; ++k) {
    if (counts[k] == 0) continue;
    any = true;
    proto.present[k] = 1;
    for (std::size_t c = 0; c < CH; ++c) {
      proto.values[k * CH + c] = sums[k * CH + c] / static_cast<double>(counts[k]);
    }
  }
  if (!any) throw GenerationError("dataset_prototype: no volume contains any organ");
  return proto;
}

// ---------------------------------------------------------------------------
// prototype container: magic "PROTO1\0\0", C, CH, presence bitmap, matrix,
// meta (crop window, per-class counts, config hash, source tag)

namespace {
constexpr char kProtoMagic[8] = {'P', 'R', 'O', 'T', 'O', '1', '\0', '\0'};
}

void save_prototype(const Prototype& proto, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open prototype for writing: " + path.string());
  os.write(kProtoMagic, sizeof(kProtoMagic));
  bytes::write_u32(os, static_cast<std::uint32_t>(proto.num_classes));
  bytes::write_u32(os, static_cast<std::uint32_t>(proto.channels));
  const std::size_t nbytes = (proto.num_classes + 7) / 8;
  for (std::size_t b = 0; b < nbytes; ++b) {
    std::uint8_t packed = 0;
    for (std::size_t bit = 0; bit < 8; ++bit) {
      const std::size_t k = b * 8 + bit;
      if (k < proto.num_classes && proto.present[k]) packed |= static_cast<std::uint8_t>(1u << bit);
    }
    bytes::write_u8(os, packed);
  }
  for (double v : proto.values) bytes::write_f64(os, v);
  bytes::write_f64(os, proto.crop_lo);
  bytes::write_f64(os, proto.crop_hi);
  for (std::size_t k = 0; k < proto.num_classes; ++k) bytes::write_u32(os, proto.slice_counts[k]);
  bytes::write_u64(os, proto.config_hash);
  bytes::write_string(os, proto.source_tag);
  if (!os) throw IoError("write failed: " + path.string());
}

Prototype load_prototype(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open prototype: " + path.string());
  char magic[8];
  bytes::read_exact(is, magic, sizeof(magic), "prototype magic");
  if (std::memcmp(magic, "PROTO", 5) != 0) throw IoError("not a prototype file: " + path.string());
  if (std::memcmp(magic, kProtoMagic, sizeof(magic)) != 0) {
    throw IoError("prototype file version '" + std::string(1, magic[5]) +
                  "' unsupported (expected '1'): " + path.string());
  }
  Prototype proto;
  proto.num_classes = bytes::read_u32(is, "prototype classes");
  proto.channels = bytes::read_u32(is, "prototype channels");
  if (proto.num_classes == 0 || proto.channels < 2) {
    throw IoError("prototype has implausible dimensions: " + path.string());
  }
  proto.present.assign(proto.num_classes, 0);
  const std::size_t nbytes = (proto.num_classes + 7) / 8;
  for (std::size_t b = 0; b < nbytes; ++b) {
    const std::uint8_t packed = bytes::read_u8(is, "prototype presence");
    for (std::size_t bit = 0; bit < 8; ++bit) {
      const std::size_t k = b * 8 + bit;
      if (k < proto.num_classes) proto.present[k] = (packed >> bit) & 1u;
    }
  }
  proto.values.resize(proto.num_classes * proto.channels);
  for (double& v : proto.values) v = bytes::read_f64(is, "prototype matrix");
  proto.crop_lo = bytes::read_f64(is, "prototype crop");
  proto.crop_hi = bytes::read_f64(is, "prototype crop");
  proto.slice_counts.resize(proto.num_classes);
  for (auto& c : proto.slice_counts) c = bytes::read_u32(is, "prototype counts");
  proto.config_hash = bytes::read_u64(is, "prototype config hash");
  proto.source_tag = bytes::read_string(is, "prototype source tag");
  return proto;
}

}  // namespace protodist
