#include "protodist/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "protodist/bytes.hpp"
#include "protodist/errors.hpp"
#include "protodist/rng.hpp"

namespace protodist {

const char* contrast_name(Contrast c) { return c == Contrast::plain ? "plain" : "shifted"; }

Ellipsoid canonical_organ(int k, int num_classes) {
  const double angle = 2.0 * 3.14159265358979323846 * static_cast<double>(k - 1) /
                       static_cast<double>(num_classes);
  Ellipsoid e{};
  e.cz = 0.5 + 0.10 * std::sin(angle + 0.7);
  e.cy = 0.5 + 0.23 * std::cos(angle);
  e.cx = 0.5 + 0.23 * std::sin(angle);
  e.rz = 0.18 + 0.02 * ((k - 1) % 2);
  e.ry = 0.12 + 0.02 * (k % 2);
  e.rx = 0.13;
  return e;
}

double class_intensity(int k, Contrast contrast) {
  if (k == 0) return 0.0;
  double v = 0.2 + 0.15 * static_cast<double>(k);
  if (contrast == Contrast::shifted) v += (k % 2 == 0) ? 0.3 : -0.2;
  return v;
}

namespace {

std::vector<Ellipsoid> jittered_organs(const PhantomSpec& spec, Rng& rng) {
  std::vector<Ellipsoid> organs;
  organs.reserve(static_cast<std::size_t>(spec.num_classes));
  for (int k = 1; k <= spec.num_classes; ++k) {
    Ellipsoid e = canonical_organ(k, spec.num_classes);
    e.cz += spec.jitter * e.rz * rng.uniform(-1.0, 1.0);
    e.cy += spec.jitter * e.ry * rng.uniform(-1.0, 1.0);
    e.cx += spec.jitter * e.rx * rng.uniform(-1.0, 1.0);
    e.rz *= 1.0 + spec.jitter * rng.uniform(-1.0, 1.0);
    e.ry *= 1.0 + spec.jitter * rng.uniform(-1.0, 1.0);
    e.rx *= 1.0 + spec.jitter * rng.uniform(-1.0, 1.0);
    organs.push_back(e);
  }
  return organs;
}

inline bool inside(const Ellipsoid& e, double pz, double py, double px) {
  const double dz = (pz - e.cz) / e.rz;
  const double dy = (py - e.cy) / e.ry;
  const double dx = (px - e.cx) / e.rx;
  return dz * dz + dy * dy + dx * dx <= 1.0;
}

constexpr double kClampLo = -1.5;
constexpr double kClampHi = 2.5;

}  // namespace

LabeledVolume gen_volume(const PhantomSpec& spec, std::uint64_t seed) {
  const std::size_t D = spec.depth, H = spec.height, W = spec.width;
  Rng rng(seed);
  const std::vector<Ellipsoid> organs = jittered_organs(spec, rng);

  LabeledVolume out;
  out.seed = seed;
  out.contrast = spec.contrast;
  out.labels = Tensor({D, H, W});
  out.image = Tensor({1, D, H, W});

  std::size_t i = 0;
  for (std::size_t z = 0; z < D; ++z) {
    const double pz = (static_cast<double>(z) + 0.5) / static_cast<double>(D);
    for (std::size_t y = 0; y < H; ++y) {
      const double py = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
      for (std::size_t x = 0; x < W; ++x, ++i) {
        const double px = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
        int label = 0;
        // overlaps resolve to the higher class id
        for (int k = spec.num_classes; k >= 1; --k) {
          if (inside(organs[static_cast<std::size_t>(k - 1)], pz, py, px)) {
            label = k;
            break;
          }
        }
        out.labels[i] = static_cast<double>(label);
        double v = class_intensity(label, spec.contrast) + spec.noise_sd * rng.gaussian();
        out.image[i] = std::clamp(v, kClampLo, kClampHi);
      }
    }
  }
  return out;
}

LabeledSlice gen_slice(const PhantomSpec& spec, std::uint64_t seed) {
  const std::size_t H = spec.height, W = spec.width;
  Rng rng(seed);
  for (int attempt = 0; attempt < 100; ++attempt) {
    // internal phantom seeds are forced even; teacher volume seeds are odd
    const std::uint64_t phantom_seed = mix_seed(seed, 0xA11CE + static_cast<std::uint64_t>(attempt)) & ~1ull;
    const LabeledVolume vol = gen_volume(spec, phantom_seed);

    // organ-bearing z range
    const std::size_t hw = H * W;
    std::size_t zmin = spec.depth, zmax = 0;
    for (std::size_t z = 0; z < spec.depth; ++z) {
      const double* lab = vol.labels.data() + z * hw;
      bool organ = false;
      for (std::size_t j = 0; j < hw; ++j) {
        if (lab[j] != 0.0) {
          organ = true;
          break;
        }
      }
      if (organ) {
        zmin = std::min(zmin, z);
        zmax = std::max(zmax, z);
      }
    }
    if (zmin > zmax) continue;  // no organ anywhere; new phantom

    const std::size_t z = zmin + rng.below(zmax - zmin + 1);
    const double* lab = vol.labels.data() + z * hw;
    bool organ = false;
    for (std::size_t j = 0; j < hw; ++j) {
      if (lab[j] != 0.0) {
        organ = true;
        break;
      }
    }
    if (!organ) continue;

    LabeledSlice s;
    s.seed = seed;
    s.z_level = z;
    s.contrast = spec.contrast;
    s.labels = Tensor({H, W});
    std::memcpy(s.labels.data(), lab, hw * sizeof(double));
    s.image = Tensor({1, H, W});
    std::memcpy(s.image.data(), vol.image.data() + z * hw, hw * sizeof(double));
    return s;
  }
  throw GenerationError("gen_slice: no organ-bearing plane found in 100 attempts (seed " +
                        std::to_string(seed) + ")");
}

namespace {
constexpr std::uint64_t kSliceSalt = 0x51;
constexpr std::uint64_t kVolumeSalt = 0x30;
}  // namespace

Splits make_splits(std::size_t n_train, std::size_t n_val, std::size_t n_test,
                   std::uint64_t base_seed) {
  if (n_train == 0 || n_val == 0 || n_test == 0) {
    throw ConfigError("make_splits: all split sizes must be >= 1");
  }
  const std::uint64_t base = mix_seed(base_seed, kSliceSalt);
  Splits s;
  std::uint64_t i = 0;
  for (std::size_t j = 0; j < n_train; ++j) s.train.push_back((base + i++) * 2);
  for (std::size_t j = 0; j < n_val; ++j) s.val.push_back((base + i++) * 2);
  for (std::size_t j = 0; j < n_test; ++j) s.test.push_back((base + i++) * 2);
  return s;
}

std::vector<std::uint64_t> volume_seeds(std::size_t n, std::uint64_t base_seed) {
  const std::uint64_t base = mix_seed(base_seed, kVolumeSalt);
  std::vector<std::uint64_t> seeds;
  seeds.reserve(n);
  for (std::size_t i = 0; i < n; ++i) seeds.push_back((base + i) * 2 + 1);
  return seeds;
}

bool is_volume_seed(std::uint64_t seed) { return (seed & 1ull) != 0; }

// ---------------------------------------------------------------------------
// item container: magic "PHNT1\0\0\0", spec block, image f64, labels u8

namespace {
constexpr char kItemMagic[8] = {'P', 'H', 'N', 'T', '1', '\0', '\0', '\0'};

void write_item(std::ostream& os, bool is_volume, const Tensor& image, const Tensor& labels,
                std::uint64_t seed, std::size_t z_level, Contrast contrast,
                const PhantomSpec& spec, std::uint64_t config_hash) {
  os.write(kItemMagic, sizeof(kItemMagic));
  bytes::write_u32(os, is_volume ? 0u : 1u);
  bytes::write_u32(os, static_cast<std::uint32_t>(spec.num_classes));
  bytes::write_u32(os, static_cast<std::uint32_t>(contrast == Contrast::plain ? 0 : 1));
  bytes::write_f64(os, spec.noise_sd);
  bytes::write_f64(os, spec.jitter);
  bytes::write_u64(os, seed);
  bytes::write_u32(os, static_cast<std::uint32_t>(z_level));
  bytes::write_u64(os, config_hash);
  bytes::write_u32(os, static_cast<std::uint32_t>(labels.rank()));
  for (std::size_t d : labels.shape()) bytes::write_u32(os, static_cast<std::uint32_t>(d));
  for (std::size_t i = 0; i < image.size(); ++i) bytes::write_f64(os, image[i]);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    bytes::write_u8(os, static_cast<std::uint8_t>(labels[i]));
  }
}

struct ItemHeader {
  bool is_volume;
  std::uint32_t num_classes;
  Contrast contrast;
  double noise_sd, jitter;
  std::uint64_t seed;
  std::uint32_t z_level;
  std::uint64_t config_hash;
  std::vector<std::size_t> label_shape;
};

ItemHeader read_item_header(std::istream& is, const std::string& path) {
  char magic[8];
  bytes::read_exact(is, magic, sizeof(magic), "dataset item magic");
  if (std::memcmp(magic, "PHNT", 4) != 0) throw IoError("not a dataset item: " + path);
  if (std::memcmp(magic, kItemMagic, sizeof(magic)) != 0) {
    throw IoError("dataset item version '" + std::string(1, magic[4]) + "' unsupported (expected '1'): " + path);
  }
  ItemHeader h{};
  h.is_volume = bytes::read_u32(is, "item kind") == 0;
  h.num_classes = bytes::read_u32(is, "item classes");
  h.contrast = bytes::read_u32(is, "item contrast") == 0 ? Contrast::plain : Contrast::shifted;
  h.noise_sd = bytes::read_f64(is, "item noise");
  h.jitter = bytes::read_f64(is, "item jitter");
  h.seed = bytes::read_u64(is, "item seed");
  h.z_level = bytes::read_u32(is, "item z level");
  h.config_hash = bytes::read_u64(is, "item config hash");
  const std::uint32_t rank = bytes::read_u32(is, "item rank");
  if (rank < 2 || rank > 3) throw IoError("dataset item has implausible rank: " + path);
  for (std::uint32_t i = 0; i < rank; ++i) h.label_shape.push_back(bytes::read_u32(is, "item shape"));
  return h;
}

void read_payload(std::istream& is, const std::vector<std::size_t>& label_shape, Tensor& image,
                  Tensor& labels) {
  std::vector<std::size_t> image_shape{1};
  image_shape.insert(image_shape.end(), label_shape.begin(), label_shape.end());
  image = Tensor(image_shape);
  labels = Tensor(label_shape);
  for (std::size_t i = 0; i < image.size(); ++i) image[i] = bytes::read_f64(is, "item image");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    labels[i] = static_cast<double>(bytes::read_u8(is, "item labels"));
  }
}
}  // namespace

void save_volume(const LabeledVolume& v, const PhantomSpec& spec, std::uint64_t config_hash,
                 const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write dataset item: " + path.string());
  write_item(os, true, v.image, v.labels, v.seed, 0, v.contrast, spec, config_hash);
  if (!os) throw IoError("write failed: " + path.string());
}

void save_slice(const LabeledSlice& s, const PhantomSpec& spec, std::uint64_t config_hash,
                const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write dataset item: " + path.string());
  write_item(os, false, s.image, s.labels, s.seed, s.z_level, s.contrast, spec, config_hash);
  if (!os) throw IoError("write failed: " + path.string());
}

LabeledVolume load_volume(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open dataset item: " + path.string());
  const ItemHeader h = read_item_header(is, path.string());
  if (!h.is_volume) throw IoError("expected a volume item: " + path.string());
  LabeledVolume v;
  v.seed = h.seed;
  v.contrast = h.contrast;
  read_payload(is, h.label_shape, v.image, v.labels);
  return v;
}

LabeledSlice load_slice(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open dataset item: " + path.string());
  const ItemHeader h = read_item_header(is, path.string());
  if (h.is_volume) throw IoError("expected a slice item: " + path.string());
  LabeledSlice s;
  s.seed = h.seed;
  s.z_level = h.z_level;
  s.contrast = h.contrast;
  read_payload(is, h.label_shape, s.image, s.labels);
  return s;
}

// ---------------------------------------------------------------------------
// dataset directory

namespace {
using nlohmann::json;

json entries_json(const std::vector<std::pair<std::string, std::uint64_t>>& items) {
  json arr = json::array();
  for (const auto& [file, seed] : items) arr.push_back({{"file", file}, {"seed", seed}});
  return arr;
}
}  // namespace

void generate_dataset(const PhantomSpec& spec, const DatasetLayout& layout, std::uint64_t seed,
                      std::uint64_t config_hash, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "volumes");
  fs::create_directories(dir / "slices");

  PhantomSpec vol_spec = spec;
  vol_spec.contrast = layout.volume_contrast;
  PhantomSpec slice_spec = spec;
  slice_spec.contrast = layout.slice_contrast;

  const std::vector<std::uint64_t> vseeds =
      volume_seeds(layout.volumes_train + layout.volumes_val, seed);
  const Splits splits = make_splits(layout.slices_train, layout.slices_val, layout.slices_test, seed);

  // unpairedness: teacher phantoms are odd-seeded, slice phantoms even-seeded
  for (std::uint64_t s : vseeds) {
    if (!is_volume_seed(s)) throw GenerationError("volume seed parity violated");
  }
  for (const auto& split : {splits.train, splits.val, splits.test}) {
    for (std::uint64_t s : split) {
      if (is_volume_seed(s)) throw GenerationError("volume/slice phantom seed sets overlap");
    }
  }

  json index;
  index["config_hash"] = config_hash;
  index["num_classes"] = spec.num_classes;
  index["volume_contrast"] = contrast_name(layout.volume_contrast);
  index["slice_contrast"] = contrast_name(layout.slice_contrast);

  char name[64];
  std::vector<std::pair<std::string, std::uint64_t>> items;
  std::size_t vi = 0;
  for (const char* split : {"train", "val"}) {
    const std::size_t n = std::strcmp(split, "train") == 0 ? layout.volumes_train : layout.volumes_val;
    items.clear();
    for (std::size_t i = 0; i < n; ++i, ++vi) {
      std::snprintf(name, sizeof(name), "volumes/%s_%04zu.phnt", split, i);
      save_volume(gen_volume(vol_spec, vseeds[vi]), vol_spec, config_hash, dir / name);
      items.emplace_back(name, vseeds[vi]);
    }
    index["volumes"][split] = entries_json(items);
  }
  const std::vector<std::pair<const char*, const std::vector<std::uint64_t>*>> slice_splits = {
      {"train", &splits.train}, {"val", &splits.val}, {"test", &splits.test}};
  for (const auto& [split, seeds] : slice_splits) {
    items.clear();
    for (std::size_t i = 0; i < seeds->size(); ++i) {
      std::snprintf(name, sizeof(name), "slices/%s_%04zu.phnt", split, i);
      save_slice(gen_slice(slice_spec, (*seeds)[i]), slice_spec, config_hash, dir / name);
      items.emplace_back(name, (*seeds)[i]);
    }
    index["slices"][split] = entries_json(items);
  }

  std::ofstream os(dir / "index.json", std::ios::trunc);
  if (!os) throw IoError("cannot write dataset index: " + (dir / "index.json").string());
  os << index.dump(2) << "\n";
}

DatasetStore::DatasetStore(std::filesystem::path dir) : dir_(std::move(dir)) {
  const auto index_path = dir_ / "index.json";
  std::ifstream is(index_path);
  if (!is) throw IoError("cannot open dataset index: " + index_path.string());
  json index;
  try {
    is >> index;
  } catch (const json::exception& e) {
    throw IoError("malformed dataset index " + index_path.string() + ": " + e.what());
  }
  config_hash_ = index.at("config_hash").get<std::uint64_t>();
  auto load_entries = [&](const json& arr, std::vector<Entry>& out) {
    for (const auto& item : arr) {
      out.push_back({dir_ / item.at("file").get<std::string>(), item.at("seed").get<std::uint64_t>()});
    }
  };
  load_entries(index.at("volumes").at("train"), volumes_train_);
  load_entries(index.at("volumes").at("val"), volumes_val_);
  load_entries(index.at("slices").at("train"), slices_train_);
  load_entries(index.at("slices").at("val"), slices_val_);
  load_entries(index.at("slices").at("test"), slices_test_);
}

const std::vector<DatasetStore::Entry>& DatasetStore::entries(bool volume,
                                                              const std::string& split) const {
  if (volume) {
    if (split == "train") return volumes_train_;
    if (split == "val") return volumes_val_;
  } else {
    if (split == "train") return slices_train_;
    if (split == "val") return slices_val_;
    if (split == "test") return slices_test_;
  }
  throw IoError("unknown dataset split: " + split);
}

std::size_t DatasetStore::volume_count(const std::string& split) const {
  return entries(true, split).size();
}

std::size_t DatasetStore::slice_count(const std::string& split) const {
  return entries(false, split).size();
}

LabeledVolume DatasetStore::load_volume(const std::string& split, std::size_t index) const {
  ++stats_.volume_reads;
  return protodist::load_volume(entries(true, split).at(index).path);
}

LabeledSlice DatasetStore::load_slice(const std::string& split, std::size_t index) const {
  ++stats_.slice_reads;
  return protodist::load_slice(entries(false, split).at(index).path);
}

std::vector<LabeledVolume> DatasetStore::load_volumes(const std::string& split) const {
  std::vector<LabeledVolume> out;
  const std::size_t n = volume_count(split);
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(load_volume(split, i));
  return out;
}

std::vector<LabeledSlice> DatasetStore::load_slices(const std::string& split) const {
  std::vector<LabeledSlice> out;
  const std::size_t n = slice_count(split);
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(load_slice(split, i));
  return out;
}

}  // namespace protodist
