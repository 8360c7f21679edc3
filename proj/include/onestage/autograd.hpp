#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "onestage/tensor.hpp"

namespace onestage {

using VarId = int;

enum class OpKind {
  kInput,
  kParam,
  kConv2d,
  kDepthwiseConv2d,
  kBatchNorm,
  kSwish,
  kRelu,
  kAvgPool,
  kGlobalAvgPool,
  kFullyConnected,
  kAdd,
  kDropout,
  kChannelMask,
  kWeightMask,
  kResizeChannels,
};

const char* op_name(OpKind kind);

/// Records a forward computation and replays it in reverse. Nodes are
/// appended in execution order so the recorded graph is a DAG by
/// construction. A non-recording tape evaluates values only.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, VarId self)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  VarId input(Tensor value, std::string name = "input", bool requires_grad = false);
  /// Leaf bound to a parameter; gradients reaching it accumulate into `p.grad`.
  VarId param(Parameter& p, std::string name);
  /// Leaf referencing `value` without copying; never receives gradients.
  VarId constant(const Tensor& value, std::string name);

  const Tensor& value(VarId id) const;
  const std::string& name(VarId id) const { return nodes_[id].name; }
  OpKind kind(VarId id) const { return nodes_[id].kind; }
  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return record_; }

  /// Reverse-mode sweep from `out`. Throws StateError when nothing was
  /// recorded or the tape was already consumed.
  void backward(VarId out, const Tensor& output_grad);

  /// Appends a computed node (used by op implementations).
  VarId push(OpKind kind, std::string name, Tensor value, std::vector<VarId> inputs,
             BackwardFn backward);
  /// Gradient slot of a node, zero-initialised on first access.
  Tensor& grad(VarId id);
  bool has_grad(VarId id) const { return !nodes_[id].grad.empty(); }
  bool requires_grad(VarId id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    OpKind kind;
    std::string name;
    Tensor owned;
    const Tensor* ref = nullptr;
    Parameter* param = nullptr;
    std::vector<VarId> inputs;
    BackwardFn backward;
    Tensor grad;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  bool record_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Batch-norm configuration

enum class BnMode {
  kBatch,    // normalise with statistics of the current batch
  kRunning,  // normalise with stored statistics
};

struct BnStat {
  std::vector<float> mean;
  std::vector<float> var;
};

/// Receives per-channel first and second moments of every batch-norm input
/// seen in kBatch mode.
class BnMomentSink {
 public:
  virtual ~BnMomentSink() = default;
  virtual void observe(const std::string& key, std::span<const double> sum,
                       std::span<const double> sum_sq, long long count) = 0;
};

struct BnOptions {
  BnMode mode = BnMode::kBatch;
  const BnStat* running = nullptr;  // required in kRunning mode
  BnMomentSink* sink = nullptr;
  std::string key;
  float eps = 1e-3f;
};

// ---------------------------------------------------------------------------
// Ops. Convolutions use TensorFlow-style "same" padding: output size is
// ceil(in / stride) and the extra padding row/column goes after.

VarId conv2d(Tape& t, VarId x, VarId w, int stride, const std::string& name);
VarId depthwise_conv2d(Tape& t, VarId x, VarId w, int stride, const std::string& name);
VarId batchnorm(Tape& t, VarId x, VarId gamma, VarId beta, const BnOptions& opts,
                const std::string& name);
VarId swish(Tape& t, VarId x, const std::string& name);
VarId relu(Tape& t, VarId x, const std::string& name);
/// 2x2 average pooling, stride 2; partial windows at odd edges average the
/// elements they cover.
VarId avgpool2x2(Tape& t, VarId x, const std::string& name);
/// (N, C, H, W) -> (N, C).
VarId global_avgpool(Tape& t, VarId x, const std::string& name);
/// x: (N, C_in), w: (C_out, C_in), b: (C_out).
VarId fully_connected(Tape& t, VarId x, VarId w, VarId b, const std::string& name);
VarId add(Tape& t, VarId a, VarId b, const std::string& name);
/// Inverted dropout. For (N, C) inputs the keep decision of element (n, c)
/// depends only on (seed, n, c), so narrower and wider views of one feature
/// map drop the same units.
VarId dropout(Tape& t, VarId x, float rate, std::uint64_t seed, const std::string& name);
/// Zeroes channels [active, C) of dimension 1.
VarId channel_mask(Tape& t, VarId x, int active, const std::string& name);
/// Elementwise product with a constant 0/1 mask of the same shape.
VarId weight_mask(Tape& t, VarId w, const Tensor& mask, const std::string& name);
/// Truncates or zero-pads dimension 1 to `channels`.
VarId resize_channels(Tape& t, VarId x, int channels, const std::string& name);

}  // namespace onestage
