#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>

#include "onestage/checkpoint.hpp"
#include "onestage/dataio.hpp"
#include "onestage/elastic.hpp"

namespace onestage {

/// Pulls batches at the source resolution; nullopt ends the stream.
using BatchSource = std::function<std::optional<ImageBatch>()>;

/// Exact per-channel moments aggregated over every observed batch.
class MomentAccumulator : public BnMomentSink {
 public:
  void observe(const std::string& key, std::span<const double> sum, std::span<const double> sum_sq,
               long long count) override;
  /// Mean and biased variance per batch-norm layer.
  BnStatsMap stats() const;
  long long count(const std::string& key) const;

 private:
  struct Moments {
    std::vector<double> sum, sum_sq;
    long long count = 0;
  };
  std::map<std::string, Moments> m_;
};

struct CalibratedChild {
  SearchSpace space;
  ChildConfig config;
  ParamStore weights;  // slice_weights output, unchanged by calibration
  BnStatsMap stats;
  int batches = 0;
  long long examples = 0;
  std::string dataset;
  Activation activation = Activation::kSwish;
};

/// Forward-only passes of the sliced child in batch-statistics mode over
/// `num_batches` batches from `source`. Each batch goes through
/// eval_preprocess to the child's resolution first.
CalibratedChild calibrate(const SupernetParams& snapshot, const ChildConfig& cfg, const BatchSource& source,
                          int num_batches, const std::string& dataset_id = "",
                          Activation activation = Activation::kSwish);

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  long long count = 0;
};

/// Eval-mode forward with the calibrated statistics; single crop.
EvalResult evaluate(const CalibratedChild& child, const BatchSource& source);
/// Logits of one preprocessed batch.
Tensor child_logits(const CalibratedChild& child, const Tensor& images_at_resolution);

/// Batches of a fixed split in file order, optionally capped.
BatchSource split_source(const DatasetManifest& m, const RawSplit& raw, int batch_size, long long limit = -1);

/// Calibrates on the first `calib_batches` batches of `calib` and evaluates
/// on all of `eval`, both in file order.
EvalResult calibrated_accuracy(const SupernetParams& snapshot, const ChildConfig& cfg, const DatasetManifest& m,
                               const RawSplit& calib, const RawSplit& eval, int calib_batches, int batch_size,
                               Activation activation = Activation::kSwish);

/// Stores the child as a checkpoint with one child section.
Checkpoint child_to_checkpoint(const CalibratedChild& child, const SearchSpace& space);
/// Throws ConfigError when the space hash or the tensor set does not match.
CalibratedChild child_from_checkpoint(const Checkpoint& ck, const SearchSpace& space, std::size_t index = 0);

}  // namespace onestage
