#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "onestage/checkpoint.hpp"
#include "onestage/dataio.hpp"
#include "onestage/elastic.hpp"
#include "onestage/losses.hpp"
#include "onestage/optimizer.hpp"

namespace onestage {

/// Random children draw their resolution from the set without its ends
/// (interior) or from the whole set.
enum class ResolutionPolicy { kInterior, kAll };
/// Distillation targets come from the biggest child run at each student's
/// resolution, or once at the maximum resolution.
enum class TeacherMode { kPerResolution, kMaxResolution };

struct TrainConfig {
  int n_random = 2;
  int batch_size = 128;
  double epochs = 30;
  long long max_steps = -1;  // overrides epochs when positive
  double lr_initial = 0.016;
  double lr_decay_factor = 0.97;
  double lr_decay_interval_epochs = 0.2;
  double lr_floor_fraction = 0.05;
  bool lr_floor = true;  // false: plain exponential decay
  double warmup_fraction = 0.025;
  double weight_decay = 1e-5;
  double dropout_rate = 0.2;
  double label_smoothing = 0.1;
  RmsPropConfig optimizer;
  ResolutionPolicy resolution_policy = ResolutionPolicy::kInterior;
  TeacherMode teacher_mode = TeacherMode::kPerResolution;
  bool augment = true;
  Activation activation = Activation::kSwish;
  std::uint64_t global_seed = 0;
  long long train_limit = -1;  // use only the first n training records
  long long checkpoint_every = 0;  // steps; 0 keeps only the final checkpoint
  int prefetch = 2;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Reads a flat YAML mapping; unknown keys are errors.
TrainConfig load_train_config(const std::filesystem::path& path);
/// Same from text; `source` prefixes error locations.
TrainConfig parse_train_config(const std::string& text, const std::string& source = "<string>");
/// Applies one `key=value` override using the YAML key names.
void apply_override(TrainConfig& cfg, const std::string& key, const std::string& value);
std::string to_yaml(const TrainConfig& cfg);

struct LrSchedule {
  double eta0 = 0.0;
  double gamma = 1.0;
  long long interval = 1;  // steps
  long long warmup = 0;    // steps
  double eta_min = 0.0;
  bool floor = true;
};

LrSchedule make_schedule(const TrainConfig& cfg, long long steps_per_epoch, long long total_steps);
/// Linear warmup eta0 * step / W, then eta0 * gamma^floor((step - W) / T),
/// truncated below at eta_min when the floor is on.
double lr_at(const LrSchedule& s, long long step);

/// Stateless seed for (step, layer); the pair is packed before mixing, so
/// distinct pairs never collide for layer < 2^20.
std::uint64_t child_seed(long long step, std::uint64_t layer);

/// Same source patches resized to each target resolution.
std::map<int, Tensor> make_multires_batch(const Tensor& patches, const std::vector<int>& resolutions);

enum class ChildRole { kSmallest, kRandom, kBiggest };

struct SandwichChild {
  ChildRole role;
  ChildConfig config;
};

/// Smallest first, then the random children, then the biggest. Random
/// child j is sampled from child_seed(step, j), mixed with the global seed.
std::vector<SandwichChild> sandwich_children(const SearchSpace& space, long long step, int n_random,
                                             std::uint64_t global_seed);

/// Smallest gets the minimum resolution, biggest the maximum, random
/// children draw uniformly per the policy. Returns one resolution per child.
std::vector<int> assign_resolutions(const std::vector<SandwichChild>& children,
                                    const std::vector<int>& resolutions, ResolutionPolicy policy,
                                    std::uint64_t seed);

/// Cross-entropy of the student softmax against the teacher softmax, mean
/// over the batch. The teacher is a constant.
LossResult distill_loss(const Tensor& teacher_logits, const Tensor& student_logits);

struct ChildReport {
  std::string config;
  int resolution = 0;
  double loss = 0.0;
  bool distill = false;
};

struct StepReport {
  long long step = 0;
  double lr = 0.0;
  double grad_norm = 0.0;
  std::vector<ChildReport> children;
};

struct TrainState {
  SupernetParams supernet;
  RmsProp optimizer;
  long long step = 0;
};

TrainState init_state(const SearchSpace& space, const TrainConfig& cfg);

struct StepOptions {
  /// Skip the optimizer update and leave the summed gradients in place.
  bool accumulate_only = false;
};

/// One sandwich update on a batch at the source resolution. Throws
/// NumericFault naming the child when a loss is not finite; parameters are
/// untouched in that case.
StepReport sandwich_step(TrainState& state, const ImageBatch& batch, const TrainConfig& cfg,
                         const LrSchedule& schedule, const StepOptions& opts = {});

Checkpoint to_checkpoint(const TrainState& state, const TrainConfig& cfg);
TrainState from_checkpoint(const Checkpoint& ck, const SearchSpace& space);

struct TrainHooks {
  std::function<void(const StepReport&)> on_step;
  /// Called after every completed epoch with the live state.
  std::function<void(long long epoch, const TrainState&)> on_epoch;
};

struct TrainResult {
  TrainState state;
  std::vector<StepReport> reports;
  std::filesystem::path final_checkpoint;
};

/// Shuffled epochs of sandwich steps. With `out_dir` set, checkpoints go to
/// out_dir/ckpt-<step>.bin plus out_dir/final.bin and reports to
/// out_dir/steps.csv. `resume` continues an earlier run bit-identically.
TrainResult train(const SearchSpace& space, const DatasetManifest& data, const TrainConfig& cfg,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                  const std::optional<Checkpoint>& resume = std::nullopt, const TrainHooks& hooks = {});

/// Header plus one row per child per step.
std::string step_csv_header();
std::string step_csv_rows(const StepReport& r);

}  // namespace onestage
