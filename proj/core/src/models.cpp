#include "protodist/models.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "protodist/bytes.hpp"
#include "protodist/errors.hpp"
#include "protodist/rng.hpp"

namespace protodist {

const char* arch_name(Arch arch) { return arch == Arch::teacher3d ? "teacher3d" : "student2d"; }

std::vector<ConvSpec> layer_plan(int num_classes) {
  const std::size_t head_out = static_cast<std::size_t>(num_classes) + 1;
  return {
      {1, 8, 3, true},
      {8, 16, 3, true},
      {16, 16, 3, true},
      {16, head_out, 1, false},
  };
}

std::vector<ad::NodePtr> NetworkParams::parameters() const {
  std::vector<ad::NodePtr> out;
  out.reserve(kernels.size() * 2);
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    out.push_back(kernels[i]);
    out.push_back(biases[i]);
  }
  return out;
}

std::size_t NetworkParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& k : kernels) n += k->value.size();
  for (const auto& b : biases) n += b->value.size();
  return n;
}

NetworkParams init_network(Arch arch, int num_classes, std::uint64_t seed) {
  if (num_classes < 2) {
    throw ConfigError("init_network: need at least 2 classes, got " + std::to_string(num_classes));
  }
  const int dims = arch == Arch::teacher3d ? 3 : 2;
  NetworkParams net;
  net.arch = arch;
  net.num_classes = num_classes;
  Rng rng(mix_seed(seed, arch == Arch::teacher3d ? 0x7303 : 0x52D2));
  for (const ConvSpec& spec : layer_plan(num_classes)) {
    std::vector<std::size_t> kshape{spec.out_ch, spec.in_ch};
    std::size_t fan_in = spec.in_ch;
    for (int d = 0; d < dims; ++d) {
      kshape.push_back(spec.ksize);
      fan_in *= spec.ksize;
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor kernel(kshape);
    for (std::size_t i = 0; i < kernel.size(); ++i) kernel[i] = rng.uniform(-bound, bound);
    Tensor bias({spec.out_ch});
    for (std::size_t i = 0; i < bias.size(); ++i) bias[i] = rng.uniform(-bound, bound);
    net.kernels.push_back(ad::leaf(std::move(kernel)));
    net.biases.push_back(ad::leaf(std::move(bias)));
  }
  return net;
}

NetworkParams clone(const NetworkParams& net) {
  NetworkParams out;
  out.arch = net.arch;
  out.num_classes = net.num_classes;
  for (const auto& k : net.kernels) out.kernels.push_back(ad::leaf(k->value));
  for (const auto& b : net.biases) out.biases.push_back(ad::leaf(b->value));
  return out;
}

ad::NodePtr forward(const NetworkParams& net, const ad::NodePtr& input) {
  const int dims = net.spatial_dims();
  const Tensor& in = input->value;
  if (in.rank() != static_cast<std::size_t>(dims) + 2) {
    throw ShapeError(std::string("forward: ") + arch_name(net.arch) + " expects rank " +
                     std::to_string(dims + 2) + " input, got " + shape_str(in.shape()));
  }
  if (in.dim(1) != 1) {
    throw ShapeError("forward: expects a single input channel, got " + std::to_string(in.dim(1)));
  }
  ad::NodePtr x = input;
  const auto plan = layer_plan(net.num_classes);
  for (std::size_t i = 0; i < plan.size(); ++i) {
    x = ad::conv(x, net.kernels[i], net.biases[i], dims);
    if (plan[i].relu) x = ad::relu(x);
  }
  return x;
}

Tensor predict(const Tensor& logits) {
  if (logits.rank() < 3) {
    throw ShapeError("predict: logits must be [B, CH, spatial...], got " + shape_str(logits.shape()));
  }
  const std::size_t batch = logits.dim(0);
  const std::size_t ch = logits.dim(1);
  if (ch < 2) throw ShapeError("predict: need at least 2 channels");
  std::vector<std::size_t> out_shape{batch};
  out_shape.insert(out_shape.end(), logits.shape().begin() + 2, logits.shape().end());
  const std::size_t spatial = shape_size({logits.shape().begin() + 2, logits.shape().end()});
  Tensor out(out_shape);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* base = logits.data() + b * ch * spatial;
    double* obase = out.data() + b * spatial;
    for (std::size_t i = 0; i < spatial; ++i) {
      std::size_t best = 0;
      double best_v = base[i];
      for (std::size_t c = 1; c < ch; ++c) {
        const double v = base[c * spatial + i];
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      obase[i] = static_cast<double>(best);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// checkpoint container
//
// 16-byte header: "PROTODISTCK\0" + u32 version, then arch, C, config hash,
// and per-layer shape + little-endian f64 payload.

namespace {
constexpr char kCkptMagic[12] = {'P', 'R', 'O', 'T', 'O', 'D', 'I', 'S', 'T', 'C', 'K', '\0'};
constexpr std::uint32_t kCkptVersion = 1;

void write_tensor(std::ostream& os, const Tensor& t) {
  bytes::write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) bytes::write_u32(os, static_cast<std::uint32_t>(d));
  for (std::size_t i = 0; i < t.size(); ++i) bytes::write_f64(os, t[i]);
}

Tensor read_tensor(std::istream& is, const char* what) {
  const std::uint32_t rank = bytes::read_u32(is, what);
  if (rank == 0 || rank > 8) throw IoError(std::string(what) + ": implausible tensor rank");
  std::vector<std::size_t> shape(rank);
  for (auto& d : shape) d = bytes::read_u32(is, what);
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = bytes::read_f64(is, what);
  return t;
}
}  // namespace

void save_checkpoint(const NetworkParams& net, const std::filesystem::path& path,
                     std::uint64_t config_hash) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  os.write(kCkptMagic, sizeof(kCkptMagic));
  bytes::write_u32(os, kCkptVersion);
  bytes::write_u32(os, net.arch == Arch::teacher3d ? 0u : 1u);
  bytes::write_u32(os, static_cast<std::uint32_t>(net.num_classes));
  bytes::write_u64(os, config_hash);
  bytes::write_u32(os, static_cast<std::uint32_t>(net.kernels.size()));
  for (std::size_t i = 0; i < net.kernels.size(); ++i) {
    write_tensor(os, net.kernels[i]->value);
    write_tensor(os, net.biases[i]->value);
  }
  if (!os) throw IoError("write failed: " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[12];
  bytes::read_exact(is, magic, sizeof(magic), "checkpoint magic");
  if (std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0) {
    throw IoError("not a checkpoint file: " + path.string());
  }
  const std::uint32_t version = bytes::read_u32(is, "checkpoint version");
  if (version != kCkptVersion) {
    throw IoError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                  std::to_string(kCkptVersion) + "): " + path.string());
  }
  const std::uint32_t arch_id = bytes::read_u32(is, "checkpoint arch");
  if (arch_id > 1) throw IoError("checkpoint arch tag " + std::to_string(arch_id) + " unknown");
  LoadedCheckpoint out;
  out.params.arch = arch_id == 0 ? Arch::teacher3d : Arch::student2d;
  out.params.num_classes = static_cast<int>(bytes::read_u32(is, "checkpoint classes"));
  out.config_hash = bytes::read_u64(is, "checkpoint config hash");
  const std::uint32_t layers = bytes::read_u32(is, "checkpoint layer count");
  for (std::uint32_t i = 0; i < layers; ++i) {
    out.params.kernels.push_back(ad::leaf(read_tensor(is, "checkpoint kernel")));
    out.params.biases.push_back(ad::leaf(read_tensor(is, "checkpoint bias")));
  }
  return out;
}

}  // namespace protodist
