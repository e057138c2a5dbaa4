#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "protodist/autodiff.hpp"
#include "protodist/tensor.hpp"

namespace protodist {

enum class Arch { teacher3d, student2d };

const char* arch_name(Arch arch);

// One conv block of the fixed plan; `relu` is false only for the head.
struct ConvSpec {
  std::size_t in_ch;
  std::size_t out_ch;
  std::size_t ksize;
  bool relu;
};

// Plan shared by both networks: 1 -> 8 -> 16 -> 16 with 3^d kernels and relu,
// then a 1^d head onto C+1 logit channels (background is channel 0). The
// logit map doubles as the feature map that prototypes are computed from.
std::vector<ConvSpec> layer_plan(int num_classes);

struct NetworkParams {
  Arch arch = Arch::student2d;
  int num_classes = 0;  // organ classes; logits carry num_classes + 1 channels
  std::vector<ad::NodePtr> kernels;
  std::vector<ad::NodePtr> biases;

  std::size_t out_channels() const { return static_cast<std::size_t>(num_classes) + 1; }
  int spatial_dims() const { return arch == Arch::teacher3d ? 3 : 2; }
  std::vector<ad::NodePtr> parameters() const;
  std::size_t parameter_count() const;
};

// Fresh network with uniform(-b, b) weights, b = 1/sqrt(fan_in), filled in a
// fixed order from one seeded stream. num_classes >= 2.
NetworkParams init_network(Arch arch, int num_classes, std::uint64_t seed);

// Deep copy; the clone owns fresh parameter leaves.
NetworkParams clone(const NetworkParams& net);

// input [B, 1, spatial...] -> logits [B, C+1, spatial...]
ad::NodePtr forward(const NetworkParams& net, const ad::NodePtr& input);

// Per-pixel argmax over the channel axis of [B, CH, spatial...]; ties break
// toward the lower channel index. Returns [B, spatial...].
Tensor predict(const Tensor& logits);

void save_checkpoint(const NetworkParams& net, const std::filesystem::path& path,
                     std::uint64_t config_hash);

struct LoadedCheckpoint {
  NetworkParams params;
  std::uint64_t config_hash = 0;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace protodist
