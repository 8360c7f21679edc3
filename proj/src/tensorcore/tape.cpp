#include <algorithm>

#include "onestage/autograd.hpp"
#include "onestage/errors.hpp"

namespace onestage {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kInput: return "input";
    case OpKind::kParam: return "param";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kDepthwiseConv2d: return "depthwise_conv2d";
    case OpKind::kBatchNorm: return "batchnorm";
    case OpKind::kSwish: return "swish";
    case OpKind::kRelu: return "relu";
    case OpKind::kAvgPool: return "avgpool";
    case OpKind::kGlobalAvgPool: return "global_avgpool";
    case OpKind::kFullyConnected: return "fully_connected";
    case OpKind::kAdd: return "add";
    case OpKind::kDropout: return "dropout";
    case OpKind::kChannelMask: return "channel_mask";
    case OpKind::kWeightMask: return "weight_mask";
    case OpKind::kResizeChannels: return "resize_channels";
  }
  return "unknown";
}

VarId Tape::input(Tensor value, std::string name, bool requires_grad) {
  Node n{OpKind::kInput, std::move(name), std::move(value), nullptr, nullptr, {}, {}, {}, false};
  n.requires_grad = requires_grad && record_;
  nodes_.push_back(std::move(n));
  return static_cast<VarId>(nodes_.size() - 1);
}

VarId Tape::param(Parameter& p, std::string name) {
  Node n{OpKind::kParam, std::move(name), {}, &p.value, &p, {}, {}, {}, false};
  n.requires_grad = record_;
  nodes_.push_back(std::move(n));
  return static_cast<VarId>(nodes_.size() - 1);
}

VarId Tape::constant(const Tensor& value, std::string name) {
  Node n{OpKind::kParam, std::move(name), {}, &value, nullptr, {}, {}, {}, false};
  nodes_.push_back(std::move(n));
  return static_cast<VarId>(nodes_.size() - 1);
}

const Tensor& Tape::value(VarId id) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(id));
  return n.ref ? *n.ref : n.owned;
}

VarId Tape::push(OpKind kind, std::string name, Tensor value, std::vector<VarId> inputs,
                 BackwardFn backward) {
#ifndef NDEBUG
  if (!all_finite(value.span())) {
    throw NumericFault(std::string(op_name(kind)) + " '" + name + "' produced non-finite values");
  }
#endif
  bool needs = false;
  for (VarId in : inputs) needs = needs || nodes_[in].requires_grad;
  Node n{kind, std::move(name), std::move(value), nullptr, nullptr, {}, {}, {}, false};
  n.requires_grad = record_ && needs;
  if (n.requires_grad) {
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return static_cast<VarId>(nodes_.size() - 1);
}

Tensor& Tape::grad(VarId id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(value(id).shape);
  return n.grad;
}

void Tape::backward(VarId out, const Tensor& output_grad) {
  if (!record_) throw StateError("backward on a non-recording tape");
  if (nodes_.empty()) throw StateError("backward without a recorded forward pass");
  if (consumed_) throw StateError("backward called twice on the same tape");
  if (output_grad.shape != value(out).shape) {
    throw DimensionError("backward: output grad shape " + shape_str(output_grad.shape) +
                         " does not match '" + nodes_[out].name + "' " +
                         shape_str(value(out).shape));
  }
  consumed_ = true;
  if (!nodes_[out].requires_grad) return;
  nodes_[out].grad = output_grad;
  for (VarId id = out; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.grad.empty() || !n.requires_grad) continue;
    if (n.kind == OpKind::kParam) {
      Tensor& g = n.param->ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    } else if (n.backward) {
      n.backward(*this, id);
    }
    // Interior gradients are not needed once propagated; input leaves keep
    // theirs for inspection.
    if (nodes_[id].kind != OpKind::kInput) nodes_[id].grad = Tensor();
  }
}

}  // namespace onestage
