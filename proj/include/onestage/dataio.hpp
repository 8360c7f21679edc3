#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "onestage/tensor.hpp"

namespace onestage {

struct SplitInfo {
  std::string file;  // relative to the manifest directory
  long long count = 0;
};

/// Text manifest describing a flat-record image corpus. Each record is one
/// label byte followed by channels * res * res pixel bytes, channel-planar.
struct DatasetManifest {
  std::string name;
  std::filesystem::path dir;
  int num_classes = 0;
  int source_resolution = 0;
  int channels = 3;
  std::vector<float> mean;  // per channel, in [0, 1] pixel units
  std::vector<float> std;
  std::map<std::string, SplitInfo> splits;

  long long record_bytes() const {
    return 1 + static_cast<long long>(channels) * source_resolution * source_resolution;
  }
  std::filesystem::path split_path(const std::string& split) const;
};

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

/// A whole split held in memory as raw bytes.
struct RawSplit {
  int channels = 0;
  int resolution = 0;
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> pixels;
  long long size() const { return static_cast<long long>(labels.size()); }
};

/// Throws IoError naming the file and byte offset on truncated records or
/// labels outside [0, num_classes).
RawSplit read_split(const DatasetManifest& m, const std::string& split);

struct ImageBatch {
  Tensor images;  // (N, C, R, R), per-channel normalised
  std::vector<int> labels;
  int size() const { return static_cast<int>(labels.size()); }
};

/// Normalised images for the given record indices.
ImageBatch gather(const DatasetManifest& m, const RawSplit& raw, const std::vector<long long>& idx);

/// Epoch-ordered batches of one split. Training streams drop the final
/// partial batch; evaluation streams keep it.
class BatchStream {
 public:
  BatchStream(const DatasetManifest& m, const RawSplit& raw, int batch_size,
              std::uint64_t epoch_seed, bool train, long long limit = -1);
  std::optional<ImageBatch> next();
  long long num_batches() const;
  const std::vector<long long>& order() const { return order_; }

 private:
  const DatasetManifest* manifest_;
  const RawSplit* raw_;
  int batch_size_;
  bool train_;
  std::vector<long long> order_;
  long long pos_ = 0;
};

/// `limit` > 0 keeps only the first `limit` examples (in file order) of the split.
BatchStream load_batches(const DatasetManifest& m, const RawSplit& raw, int batch_size,
                         std::uint64_t epoch_seed, bool train, long long limit = -1);

struct AugmentOptions {
  int pad = 4;
  bool flip = true;
};

/// Reflect-pad, random crop back to size, random horizontal flip; each image
/// draws from its own engine seeded by (seed, index).
ImageBatch augment(const ImageBatch& batch, std::uint64_t seed, const AugmentOptions& opts = {});
Tensor hflip(const Tensor& images);

/// Bicubic resize (Keys kernel, a = -0.5, half-pixel centres, clamped edges)
/// of square (N, C, R, R) images. Returns an exact copy when sizes agree.
Tensor resize_bicubic(const Tensor& images, int out_res);
Tensor center_crop(const Tensor& images, int size);
/// Evaluation preprocessing: centre crop at the source resolution, then the
/// same bicubic resize used for training batches.
Tensor eval_preprocess(const Tensor& images, int source_res, int target_res);

struct SynthSpec {
  int classes = 10;
  int resolution = 32;
  long long train_count = 3200;
  long long test_count = 1000;
  std::uint64_t seed = 0;
  int blobs_per_class = 3;
  double pixel_noise = 0.2;   // std of per-pixel noise, pixel units in [0, 1]
  double jitter = 0.0625;     // std of blob position jitter as a fraction of the side
  int distractors = 1;        // random blobs added to every image
};

/// Class-conditional Gaussian-blob images written as a manifest plus record
/// files under `dir`. Deterministic in the spec.
DatasetManifest synth_dataset(const SynthSpec& spec, const std::filesystem::path& dir,
                              const std::string& name = "synth");

/// Runs `produce` on a background thread, keeping at most `capacity` items
/// ahead of the consumer. Items arrive in production order.
template <typename T>
class Prefetcher {
 public:
  Prefetcher(std::function<std::optional<T>()> produce, std::size_t capacity)
      : produce_(std::move(produce)), capacity_(capacity ? capacity : 1) {
    worker_ = std::thread([this] { run(); });
  }
  ~Prefetcher() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    worker_.join();
  }
  Prefetcher(const Prefetcher&) = delete;
  Prefetcher& operator=(const Prefetcher&) = delete;

  std::optional<T> next() {
    std::unique_lock<std::mutex> lk(mu_);
    cv_.wait(lk, [this] { return !queue_.empty() || done_; });
    if (queue_.empty()) {
      if (error_) std::rethrow_exception(error_);
      return std::nullopt;
    }
    T item = std::move(queue_.front());
    queue_.pop_front();
    cv_.notify_all();
    return item;
  }

 private:
  void run() {
    try {
      while (true) {
        {
          std::unique_lock<std::mutex> lk(mu_);
          cv_.wait(lk, [this] { return queue_.size() < capacity_ || stop_; });
          if (stop_) break;
        }
        auto item = produce_();
        std::lock_guard<std::mutex> lk(mu_);
        if (!item) break;
        queue_.push_back(std::move(*item));
        cv_.notify_all();
      }
    } catch (...) {
      std::lock_guard<std::mutex> lk(mu_);
      error_ = std::current_exception();
    }
    std::lock_guard<std::mutex> lk(mu_);
    done_ = true;
    cv_.notify_all();
  }

  std::function<std::optional<T>()> produce_;
  std::size_t capacity_;
  std::deque<T> queue_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool stop_ = false;
  bool done_ = false;
  std::exception_ptr error_;
  std::thread worker_;
};

}  // namespace onestage
