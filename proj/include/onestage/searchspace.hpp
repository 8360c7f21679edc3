#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

namespace onestage {

/// Inclusive integer range `[lo, hi]`.
struct IntRange {
  int lo = 0;
  int hi = 0;
  bool contains(int v) const { return v >= lo && v <= hi; }
  friend bool operator==(const IntRange&, const IntRange&) = default;
};

struct StemSpec {
  IntRange channels;
  int kernel = 3;
  int stride = 2;
};

struct HeadSpec {
  IntRange channels;  // 1x1 conv
};

/// One stage of inverted-bottleneck (MBConv) blocks.
struct StageSpec {
  IntRange channels;
  IntRange depth;
  std::vector<int> kernels;  // sorted ascending, odd
  int stride = 1;
  int expansion = 6;

  int max_kernel() const { return kernels.back(); }
  int min_kernel() const { return kernels.front(); }
};

/// Declarative elastic architecture space. Resolutions in `resolutions` are
/// the ones trained on; `extra_resolutions` are unseen sizes that search may
/// visit (flagged as extrapolated by validation).
struct SearchSpace {
  std::string name;
  StemSpec stem;
  std::vector<StageSpec> stages;
  HeadSpec head;
  std::vector<int> resolutions;
  std::vector<int> extra_resolutions;
  int channel_step = 8;
  int num_classes = 10;
  int input_channels = 3;

  int total_stride() const;
  int max_resolution() const { return resolutions.back(); }
  int min_resolution() const { return resolutions.front(); }
  /// Discretized channel values of a range: lo, lo+step, ..., hi.
  std::vector<int> channel_choices(IntRange range) const;
  /// Sorted union of trained and extra resolutions.
  std::vector<int> resolution_ladder() const;
  int max_depth_total() const;
};

/// Throws ConfigError when the space itself is malformed.
void validate_space(const SearchSpace& space);

struct LayerChoice {
  int channels = 0;
  int kernel = 0;
  friend bool operator==(const LayerChoice&, const LayerChoice&) = default;
};

struct StageChoice {
  std::vector<LayerChoice> layers;  // size is the stage depth
  int depth() const { return static_cast<int>(layers.size()); }
  friend bool operator==(const StageChoice&, const StageChoice&) = default;
};

/// One concrete architecture.
struct ChildConfig {
  int resolution = 0;
  int stem_channels = 0;
  int head_channels = 0;
  std::vector<StageChoice> stages;

  friend bool operator==(const ChildConfig&, const ChildConfig&) = default;
};

struct Violation {
  enum class Severity { kError, kExtrapolated };
  std::string field;
  std::string message;
  Severity severity = Severity::kError;

  bool is_error() const { return severity == Severity::kError; }
};

/// All out-of-range fields, network-level first, then stage-major, layer-minor.
/// Resolutions outside the trained set but >= total stride produce an
/// `kExtrapolated` record, which does not make the config invalid.
std::vector<Violation> validate_config(const SearchSpace& space, const ChildConfig& cfg);
bool has_errors(const std::vector<Violation>& violations);
/// Throws ConfigError carrying the first error-severity violation.
void require_valid(const SearchSpace& space, const ChildConfig& cfg);

ChildConfig smallest_config(const SearchSpace& space);
ChildConfig biggest_config(const SearchSpace& space);

/// Uniform, independent choice per dimension. Each decision unit draws from
/// its own engine seeded with `seed + unit_index`, so a layer's choices do not
/// depend on choices made for other layers.
ChildConfig sample_child(const SearchSpace& space, std::uint64_t seed);

struct LayerFlops {
  std::string layer;
  long long madds = 0;
};

struct FlopsReport {
  long long total_madds = 0;
  std::vector<LayerFlops> per_layer;
};

/// Multiply-accumulate count of stem, MBConv blocks, head and classifier.
FlopsReport count_flops(const SearchSpace& space, const ChildConfig& cfg);

using BigInt = boost::multiprecision::cpp_int;
BigInt space_cardinality(const SearchSpace& space);

/// Output size of a same-padded op.
inline int same_out(int in, int stride) { return (in + stride - 1) / stride; }

// Canonical compact form, e.g. r256-d1.2.2-c32.16.24.48.1408-k3.3.5.
// A stage whose layers differ lists them colon-separated: c32.16:24.48...
std::string to_string(const ChildConfig& cfg);
ChildConfig parse_config(std::string_view text);

// Space files (YAML).
SearchSpace parse_space(std::string_view yaml_text, const std::string& source = "<string>");
SearchSpace load_space(const std::filesystem::path& path);
std::string canonical_text(const SearchSpace& space);
/// Space file text that parse_space reads back to an equal space.
std::string space_yaml(const SearchSpace& space);
std::uint64_t space_hash(const SearchSpace& space);

std::uint64_t mix64(std::uint64_t x);

}  // namespace onestage
