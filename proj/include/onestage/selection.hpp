#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "onestage/calibration.hpp"
#include "onestage/searchspace.hpp"

namespace onestage {

/// Stage-wise kernel choice applied to every layer of the stage:
/// "min", "max", "late_max" (min in the first half of the stages, max after)
/// or "alternating" (min, max, min, ...).
int pattern_kernel(const SearchSpace& space, std::size_t stage, const std::string& pattern);

struct CoarseGrid {
  std::vector<int> resolutions;
  std::vector<double> depth_multipliers;
  std::vector<double> width_multipliers;
  std::vector<std::string> kernel_patterns;

  std::size_t size() const {
    return resolutions.size() * depth_multipliers.size() * width_multipliers.size() * kernel_patterns.size();
  }
};

/// Selection hyperparameters, read from the grid file.
struct SelectionConfig {
  CoarseGrid grid;
  double mutation_p = 0.3;
  int n_candidates = 64;
  int calib_batches = 4;
  int calib_batch_size = 128;
  long long eval_examples = 10000;
  int workers = 1;
  std::uint64_t seed = 0;
};

SelectionConfig load_selection_config(const std::filesystem::path& path);
SelectionConfig parse_selection_config(const std::string& text, const std::string& source = "<string>");
/// Every trained and extra resolution, depth {0.5, 0.7, 0.85, 1}, width
/// {0.75, 1}, all four kernel patterns.
CoarseGrid default_grid(const SearchSpace& space);

/// Biggest config scaled by the multipliers: depth round-half-up then
/// clamped, channels rounded to the nearest allowed value.
ChildConfig grid_config(const SearchSpace& space, int resolution, double depth_mult, double width_mult,
                        const std::string& kernel_pattern);

struct BenchmarkEntry {
  ChildConfig config;
  std::string config_string;
  long long madds = 0;
  double accuracy = 0.0;
  std::string provenance;  // "coarse" or "fine"
};

using AccuracyOracle = std::function<double(const ChildConfig&)>;

/// Calibrates on the first calib_batches batches of the training split and
/// scores top-1 on its first eval_examples records. Thread-safe.
AccuracyOracle supernet_oracle(const SupernetParams& snapshot, const DatasetManifest& m, const RawSplit& train,
                               const SelectionConfig& cfg, Activation activation = Activation::kSwish);

/// Runs fn(0..n-1) on up to `workers` threads; results keep index order.
std::vector<double> parallel_scores(std::size_t n, int workers, const std::function<double(std::size_t)>& fn);

/// One entry per grid point, sorted by (MAdds, config string).
std::vector<BenchmarkEntry> coarse_phase(const SearchSpace& space, const CoarseGrid& grid,
                                         const AccuracyOracle& oracle, int workers = 1);

/// Highest accuracy with MAdds <= budget; ties go to fewer MAdds, then the
/// lexicographically smaller config string. Throws BudgetInfeasible.
BenchmarkEntry pick_skeleton(const std::vector<BenchmarkEntry>& entries, long long budget);

/// Each dimension moves one step with probability p: resolution to a
/// neighbour on the ladder, stage depth by one, channels by channel_step,
/// kernel to a neighbour in the stage's set.
ChildConfig mutate(const SearchSpace& space, const ChildConfig& cfg, double p, std::uint64_t seed);

/// n mutants of the skeleton, scored by the oracle, over-budget ones dropped.
/// Sorted by (MAdds, config string).
std::vector<BenchmarkEntry> fine_phase(const BenchmarkEntry& skeleton, const SearchSpace& space, long long budget,
                                       int n_candidates, double p, std::uint64_t seed, const AccuracyOracle& oracle,
                                       int workers = 1);

/// Entries not dominated by another (<= MAdds and >= accuracy, one strict),
/// sorted by MAdds. Repeated configs appear once.
std::vector<BenchmarkEntry> pareto_front(const std::vector<BenchmarkEntry>& entries);

struct SelectionResult {
  std::vector<BenchmarkEntry> coarse;
  BenchmarkEntry skeleton;
  std::vector<BenchmarkEntry> fine;
  BenchmarkEntry best;
  std::vector<BenchmarkEntry> front;
};

SelectionResult coarse_to_fine(const SearchSpace& space, long long budget, const SelectionConfig& cfg,
                               const AccuracyOracle& oracle);

std::string benchmark_csv(const std::vector<BenchmarkEntry>& entries);

}  // namespace onestage
