#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "onestage/autograd.hpp"
#include "onestage/optimizer.hpp"
#include "onestage/searchspace.hpp"

namespace onestage {

using BnStatsMap = std::map<std::string, BnStat>;

/// Static description of one MBConv slot of the supernet.
struct BlockLayout {
  int stage = 0;  // 0-based
  int index = 0;  // layer index within the stage
  int stride = 1;
  int expansion = 1;
  int max_in = 0;
  int max_out = 0;
  int max_kernel = 3;
  bool pool_skip = false;  // 2x2 average pooling on the skip path
  bool proj_skip = false;  // 1x1 projection on the skip path
  std::string prefix;      // e.g. "s2.b0"

  int max_mid() const { return max_in * expansion; }
};

/// Block slots of the biggest network, stage-major. The first block of a
/// stage carries the stage-transition skip: pooling when it strides,
/// projection when its channel range differs from the preceding one.
std::vector<BlockLayout> supernet_layout(const SearchSpace& space);

/// Batch-norm layer names of a child, in execution order.
std::vector<std::string> bn_names(const SearchSpace& space, const ChildConfig& cfg);

/// The single shared weight store, sized to the biggest child.
struct SupernetParams {
  SearchSpace space;
  ParamStore params;
  /// Placeholder statistics (mean 0, variance 1). Supernet training does not
  /// accumulate statistics; deployable stats come from calibration.
  BnStatsMap placeholder_stats;
};

/// He-normal conv weights at full fan-in, gamma = 1 / beta = 0 except the
/// last batch norm of every block, whose gamma starts at 0.
SupernetParams init_supernet(const SearchSpace& space, std::uint64_t seed);

std::uint64_t param_checksum(const ParamStore& params);
long long param_count(const ParamStore& params);
/// Closed-form parameter count of a child (weights, BN affine, classifier).
long long analytic_param_count(const SearchSpace& space, const ChildConfig& cfg);

enum class ExecMode {
  kMasked,  // full-size tensors, inactive channels/kernel rings/layers masked
  kSliced,  // physically smaller tensors cut from the supernet
};

enum class Activation { kSwish, kRelu };

struct ForwardOptions {
  BnMode bn_mode = BnMode::kBatch;
  /// Statistics keyed by batch-norm name; sized to the executed tensors.
  const BnStatsMap* bn_stats = nullptr;
  BnMomentSink* sink = nullptr;
  float dropout_rate = 0.0f;
  std::uint64_t dropout_seed = 0;
  Activation activation = Activation::kSwish;
  /// Drop every residual branch, keeping stem, skip paths and head.
  bool ablate_residual_branches = false;
};

/// Copies the lower-index channels, lower-index layers and centered kernel
/// windows a child uses. Names match the supernet store.
ParamStore slice_weights(const SupernetParams& supernet, const ChildConfig& cfg);

/// Records a child's forward pass on `t` and returns the logits node.
/// Parameters bind as trainable leaves when the tape records; gradients then
/// accumulate into `params` (for masked mode, the shared storage).
VarId build_child(Tape& t, const SearchSpace& space, ParamStore& params, const ChildConfig& cfg,
                  ExecMode mode, const ForwardOptions& opts, VarId input);
/// Same, with parameters bound as constants.
VarId build_child(Tape& t, const SearchSpace& space, const ParamStore& params,
                  const ChildConfig& cfg, ExecMode mode, const ForwardOptions& opts, VarId input);

/// Skip path of a stage transition: 2x2 average pooling when `stride` is 2,
/// then the 1x1 `projection` when given. With neither it is the identity.
VarId stage_transition(Tape& t, VarId x, int stride, VarId projection, const std::string& name);
inline constexpr VarId kNoProjection = -1;

/// A child executed against the shared weights.
struct ChildView {
  const SupernetParams* supernet = nullptr;
  ChildConfig config;
  ExecMode mode = ExecMode::kMasked;
};

/// Non-recording forward; batch must be at the view's resolution.
Tensor child_forward(const ChildView& view, const Tensor& batch, const ForwardOptions& opts);

/// Pads child-sized statistics to supernet size (mean 0, variance 1 in the
/// unused tail) so they can drive a masked forward.
BnStatsMap pad_stats(const SupernetParams& supernet, const BnStatsMap& child_stats);

/// 0/1 mask keeping the centered `k` x `k` window of (C, 1, K, K) weights.
Tensor kernel_ring_mask(const Shape& shape, int k);

}  // namespace onestage
