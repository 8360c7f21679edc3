#include "onestage/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "onestage/errors.hpp"
#include "onestage/losses.hpp"

namespace onestage {

void MomentAccumulator::observe(const std::string& key, std::span<const double> sum,
                                std::span<const double> sum_sq, long long count) {
  Moments& m = m_[key];
  if (m.sum.empty()) {
    m.sum.assign(sum.size(), 0.0);
    m.sum_sq.assign(sum.size(), 0.0);
  }
  if (m.sum.size() != sum.size())
    throw DimensionError("batch norm '" + key + "' changed width during calibration");
  for (std::size_t c = 0; c < sum.size(); ++c) {
    m.sum[c] += sum[c];
    m.sum_sq[c] += sum_sq[c];
  }
  m.count += count;
}

BnStatsMap MomentAccumulator::stats() const {
  BnStatsMap out;
  for (const auto& [key, m] : m_) {
    BnStat s;
    const double n = static_cast<double>(m.count);
    for (std::size_t c = 0; c < m.sum.size(); ++c) {
      const double mean = m.sum[c] / n;
      s.mean.push_back(static_cast<float>(mean));
      s.var.push_back(static_cast<float>(std::max(0.0, m.sum_sq[c] / n - mean * mean)));
    }
    out.emplace(key, std::move(s));
  }
  return out;
}

long long MomentAccumulator::count(const std::string& key) const {
  auto it = m_.find(key);
  return it == m_.end() ? 0 : it->second.count;
}

namespace {

Tensor prepare(const SearchSpace& space, const ChildConfig& cfg, const Tensor& images) {
  if (images.rank() != 4 || images.dim(1) != space.input_channels)
    throw DimensionError("expected (N, " + std::to_string(space.input_channels) + ", R, R) images, got " +
                         shape_str(images.shape));
  return eval_preprocess(images, images.dim(2), cfg.resolution);
}

}  // namespace

CalibratedChild calibrate(const SupernetParams& snapshot, const ChildConfig& cfg, const BatchSource& source,
                          int num_batches, const std::string& dataset_id, Activation activation) {
  if (num_batches <= 0) throw PreconditionError("calibration needs at least one batch");
  CalibratedChild child;
  child.space = snapshot.space;
  child.config = cfg;
  child.weights = slice_weights(snapshot, cfg);
  child.dataset = dataset_id;
  child.activation = activation;
  MomentAccumulator acc;
  ForwardOptions fo;
  fo.bn_mode = BnMode::kBatch;
  fo.sink = &acc;
  fo.activation = activation;
  const ParamStore& w = child.weights;
  for (int b = 0; b < num_batches; ++b) {
    auto batch = source();
    if (!batch) break;
    Tape t(false);
    const VarId x = t.input(prepare(snapshot.space, cfg, batch->images), "input");
    build_child(t, snapshot.space, w, cfg, ExecMode::kSliced, fo, x);
    ++child.batches;
    child.examples += batch->size();
  }
  if (child.batches == 0) throw PreconditionError("calibration stream was empty");
  child.stats = acc.stats();
  return child;
}

Tensor child_logits(const CalibratedChild& child, const Tensor& images_at_resolution) {
  ForwardOptions fo;
  fo.bn_mode = BnMode::kRunning;
  fo.bn_stats = &child.stats;
  fo.activation = child.activation;
  Tape t(false);
  const VarId x = t.input(images_at_resolution, "input");
  return t.value(build_child(t, child.space, child.weights, child.config, ExecMode::kSliced, fo, x));
}

EvalResult evaluate(const CalibratedChild& child, const BatchSource& source) {
  EvalResult r;
  long long correct = 0;
  double loss_sum = 0.0;
  while (auto batch = source()) {
    const Tensor logits = child_logits(child, prepare(child.space, child.config, batch->images));
    const int n = logits.dim(0), k = logits.dim(1);
    for (int i = 0; i < n; ++i) {
      const float* row = logits.ptr() + static_cast<std::size_t>(i) * k;
      correct += std::max_element(row, row + k) - row == batch->labels[static_cast<std::size_t>(i)];
    }
    loss_sum += softmax_xent(logits, batch->labels, 0.0).loss * n;
    r.count += n;
  }
  if (r.count == 0) throw PreconditionError("evaluation stream was empty");
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.count);
  r.loss = loss_sum / static_cast<double>(r.count);
  return r;
}

BatchSource split_source(const DatasetManifest& m, const RawSplit& raw, int batch_size, long long limit) {
  auto stream = std::make_shared<BatchStream>(m, raw, batch_size, 0, false, limit);
  return [stream]() { return stream->next(); };
}

EvalResult calibrated_accuracy(const SupernetParams& snapshot, const ChildConfig& cfg, const DatasetManifest& m,
                               const RawSplit& calib, const RawSplit& eval, int calib_batches, int batch_size,
                               Activation activation) {
  const CalibratedChild child =
      calibrate(snapshot, cfg, split_source(m, calib, batch_size), calib_batches, m.name, activation);
  return evaluate(child, split_source(m, eval, batch_size));
}

Checkpoint child_to_checkpoint(const CalibratedChild& child, const SearchSpace& space) {
  Checkpoint ck;
  ck.space_hash = space_hash(space);
  ck.meta["kind"] = "calibrated_child";
  ck.meta["space"] = space_yaml(space);
  ChildSection sec;
  sec.config = to_string(child.config);
  sec.prefix = "child0/";
  sec.meta["batches"] = std::to_string(child.batches);
  sec.meta["examples"] = std::to_string(child.examples);
  sec.meta["dataset"] = child.dataset;
  sec.meta["statistics"] = "exact";
  sec.meta["activation"] = child.activation == Activation::kSwish ? "swish" : "relu";
  for (const auto& [name, p] : child.weights) ck.tensors.push_back({sec.prefix + "w/" + name, p.value, p.decay});
  for (const auto& [name, st] : child.stats) {
    const int c = static_cast<int>(st.mean.size());
    ck.tensors.push_back({sec.prefix + "bn_mean/" + name, Tensor({c}, st.mean), false});
    ck.tensors.push_back({sec.prefix + "bn_var/" + name, Tensor({c}, st.var), false});
  }
  ck.children.push_back(std::move(sec));
  return ck;
}

CalibratedChild child_from_checkpoint(const Checkpoint& ck, const SearchSpace& space, std::size_t index) {
  if (ck.space_hash != space_hash(space)) throw ConfigError("checkpoint space hash does not match the space file");
  if (index >= ck.children.size()) throw ConfigError("checkpoint has no child section " + std::to_string(index));
  const ChildSection& sec = ck.children[index];
  CalibratedChild c;
  c.space = space;
  c.config = parse_config(sec.config);
  require_valid(space, c.config);
  auto meta = [&](const std::string& k) {
    auto it = sec.meta.find(k);
    return it == sec.meta.end() ? std::string() : it->second;
  };
  c.batches = meta("batches").empty() ? 0 : std::stoi(meta("batches"));
  c.examples = meta("examples").empty() ? 0 : std::stoll(meta("examples"));
  c.dataset = meta("dataset");
  c.activation = meta("activation") == "relu" ? Activation::kRelu : Activation::kSwish;
  const std::string w = sec.prefix + "w/", mean = sec.prefix + "bn_mean/", var = sec.prefix + "bn_var/";
  for (const auto& t : ck.tensors) {
    if (t.name.rfind(w, 0) == 0) {
      Parameter p;
      p.value = t.value;
      p.decay = t.decay;
      c.weights.emplace(t.name.substr(w.size()), std::move(p));
    } else if (t.name.rfind(mean, 0) == 0) {
      c.stats[t.name.substr(mean.size())].mean = t.value.data;
    } else if (t.name.rfind(var, 0) == 0) {
      c.stats[t.name.substr(var.size())].var = t.value.data;
    }
  }
  for (const auto& name : bn_names(space, c.config))
    if (!c.stats.count(name)) throw ConfigError("checkpoint child lacks statistics for '" + name + "'");
  return c;
}

}  // namespace onestage
