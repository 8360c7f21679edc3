#include "onestage/searchspace.hpp"

#include <algorithm>
#include <random>
#include <sstream>

#include "onestage/errors.hpp"

namespace onestage {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

int SearchSpace::total_stride() const {
  int s = stem.stride;
  for (const auto& st : stages) s *= st.stride;
  return s;
}

std::vector<int> SearchSpace::channel_choices(IntRange range) const {
  std::vector<int> out;
  for (int c = range.lo; c <= range.hi; c += channel_step) out.push_back(c);
  return out;
}

std::vector<int> SearchSpace::resolution_ladder() const {
  std::vector<int> out = resolutions;
  out.insert(out.end(), extra_resolutions.begin(), extra_resolutions.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

int SearchSpace::max_depth_total() const {
  int n = 0;
  for (const auto& st : stages) n += st.depth.hi;
  return n;
}

namespace {

void check_channel_range(const SearchSpace& space, IntRange r, const std::string& what) {
  if (r.lo <= 0 || r.lo > r.hi) {
    throw ConfigError(what + ": channel range [" + std::to_string(r.lo) + "," +
                      std::to_string(r.hi) + "] must satisfy 0 < lo <= hi");
  }
  if ((r.hi - r.lo) % space.channel_step != 0) {
    throw ConfigError(what + ": channel range [" + std::to_string(r.lo) + "," +
                      std::to_string(r.hi) + "] not divisible by channel_step " +
                      std::to_string(space.channel_step));
  }
}

std::string range_text(IntRange r) {
  return "[" + std::to_string(r.lo) + "," + std::to_string(r.hi) + "]";
}

}  // namespace

void validate_space(const SearchSpace& space) {
  if (space.channel_step <= 0) throw ConfigError("channel_step must be positive");
  if (space.num_classes <= 1) throw ConfigError("num_classes must be at least 2");
  if (space.stages.empty()) throw ConfigError("search space needs at least one stage");
  if (space.resolutions.empty()) throw ConfigError("search space needs at least one resolution");
  if (!std::is_sorted(space.resolutions.begin(), space.resolutions.end()) ||
      std::adjacent_find(space.resolutions.begin(), space.resolutions.end()) !=
          space.resolutions.end()) {
    throw ConfigError("resolutions must be strictly ascending");
  }
  const int stride = space.total_stride();
  for (int r : space.resolution_ladder()) {
    if (r < stride) {
      throw ConfigError("resolution " + std::to_string(r) + " below total network stride " +
                        std::to_string(stride));
    }
  }
  if (space.stem.kernel <= 0 || space.stem.kernel % 2 == 0)
    throw ConfigError("stem kernel must be odd");
  if (space.stem.stride != 1 && space.stem.stride != 2)
    throw ConfigError("stem stride must be 1 or 2");
  check_channel_range(space, space.stem.channels, "stem");
  check_channel_range(space, space.head.channels, "head");
  for (std::size_t s = 0; s < space.stages.size(); ++s) {
    const auto& st = space.stages[s];
    const std::string where = "stage " + std::to_string(s + 1);
    check_channel_range(space, st.channels, where);
    if (st.depth.lo < 1 || st.depth.lo > st.depth.hi)
      throw ConfigError(where + ": depth range " + range_text(st.depth) + " invalid");
    if (st.kernels.empty()) throw ConfigError(where + ": empty kernel set");
    if (!std::is_sorted(st.kernels.begin(), st.kernels.end()))
      throw ConfigError(where + ": kernel set must be sorted");
    for (int k : st.kernels) {
      if (k <= 0 || k % 2 == 0) throw ConfigError(where + ": kernel sizes must be odd");
    }
    if (st.stride != 1 && st.stride != 2) throw ConfigError(where + ": stride must be 1 or 2");
    if (st.expansion < 1) throw ConfigError(where + ": expansion must be >= 1");
  }
}

std::vector<Violation> validate_config(const SearchSpace& space, const ChildConfig& cfg) {
  std::vector<Violation> out;
  auto error = [&](std::string field, std::string msg) {
    out.push_back({std::move(field), std::move(msg), Violation::Severity::kError});
  };
  auto check_channels = [&](const std::string& field, const std::string& label, int c,
                            IntRange r) {
    if (!r.contains(c)) {
      error(field, label + " channels " + std::to_string(c) + " outside range " + range_text(r));
    } else if ((c - r.lo) % space.channel_step != 0) {
      error(field, label + " channels " + std::to_string(c) + " not on channel_step " +
                       std::to_string(space.channel_step) + " grid from " +
                       std::to_string(r.lo));
    }
  };

  const auto& trained = space.resolutions;
  if (std::find(trained.begin(), trained.end(), cfg.resolution) == trained.end()) {
    if (cfg.resolution >= space.total_stride()) {
      out.push_back({"resolution",
                     "resolution " + std::to_string(cfg.resolution) +
                         " not in trained set (extrapolated)",
                     Violation::Severity::kExtrapolated});
    } else {
      error("resolution", "resolution " + std::to_string(cfg.resolution) +
                              " below total network stride " +
                              std::to_string(space.total_stride()));
    }
  }
  check_channels("stem.channels", "stem", cfg.stem_channels, space.stem.channels);

  if (cfg.stages.size() != space.stages.size()) {
    error("stages", "config has " + std::to_string(cfg.stages.size()) + " stages, space has " +
                        std::to_string(space.stages.size()));
  }
  const std::size_t n = std::min(cfg.stages.size(), space.stages.size());
  for (std::size_t s = 0; s < n; ++s) {
    const auto& st = space.stages[s];
    const auto& choice = cfg.stages[s];
    const std::string stage = "stage " + std::to_string(s + 1);
    const std::string prefix = "stage" + std::to_string(s + 1);
    if (!st.depth.contains(choice.depth())) {
      error(prefix + ".depth", stage + " depth " + std::to_string(choice.depth()) +
                                   " outside range " + range_text(st.depth));
    }
    for (std::size_t l = 0; l < choice.layers.size(); ++l) {
      const auto& layer = choice.layers[l];
      const std::string lf = prefix + ".layer" + std::to_string(l);
      const std::string ll = stage + " layer " + std::to_string(l);
      check_channels(lf + ".channels", ll, layer.channels, st.channels);
      if (std::find(st.kernels.begin(), st.kernels.end(), layer.kernel) == st.kernels.end()) {
        error(lf + ".kernel", ll + " kernel " + std::to_string(layer.kernel) + " not in kernel set");
      }
    }
  }
  check_channels("head.channels", "head", cfg.head_channels, space.head.channels);
  return out;
}

bool has_errors(const std::vector<Violation>& violations) {
  return std::any_of(violations.begin(), violations.end(),
                     [](const Violation& v) { return v.is_error(); });
}

void require_valid(const SearchSpace& space, const ChildConfig& cfg) {
  for (const auto& v : validate_config(space, cfg)) {
    if (v.is_error()) throw ConfigError("invalid config: " + v.message);
  }
}

ChildConfig smallest_config(const SearchSpace& space) {
  ChildConfig cfg;
  cfg.resolution = space.min_resolution();
  cfg.stem_channels = space.stem.channels.lo;
  cfg.head_channels = space.head.channels.lo;
  for (const auto& st : space.stages) {
    cfg.stages.push_back(
        {std::vector<LayerChoice>(st.depth.lo, LayerChoice{st.channels.lo, st.min_kernel()})});
  }
  return cfg;
}

ChildConfig biggest_config(const SearchSpace& space) {
  ChildConfig cfg;
  cfg.resolution = space.max_resolution();
  cfg.stem_channels = space.stem.channels.hi;
  cfg.head_channels = space.head.channels.hi;
  for (const auto& st : space.stages) {
    cfg.stages.push_back(
        {std::vector<LayerChoice>(st.depth.hi, LayerChoice{st.channels.hi, st.max_kernel()})});
  }
  return cfg;
}

namespace {

template <typename T>
const T& pick(const std::vector<T>& values, std::mt19937_64& eng) {
  std::uniform_int_distribution<std::size_t> dist(0, values.size() - 1);
  return values[dist(eng)];
}

}  // namespace

ChildConfig sample_child(const SearchSpace& space, std::uint64_t seed) {
  // Unit 0: network-wide choices. Units 1..S: stage depths. Then one unit per
  // supernet layer slot, indexed by its position in the biggest network.
  auto engine = [seed](std::uint64_t unit) { return std::mt19937_64(mix64(seed + unit)); };
  ChildConfig cfg;
  auto net = engine(0);
  cfg.resolution = pick(space.resolutions, net);
  cfg.stem_channels = pick(space.channel_choices(space.stem.channels), net);
  cfg.head_channels = pick(space.channel_choices(space.head.channels), net);

  const std::uint64_t num_stages = space.stages.size();
  std::uint64_t layer_slot = 0;
  for (std::size_t s = 0; s < space.stages.size(); ++s) {
    const auto& st = space.stages[s];
    auto stage_eng = engine(1 + s);
    std::uniform_int_distribution<int> depth_dist(st.depth.lo, st.depth.hi);
    const int depth = depth_dist(stage_eng);
    const auto channels = space.channel_choices(st.channels);
    StageChoice choice;
    for (int l = 0; l < depth; ++l) {
      auto layer_eng = engine(1 + num_stages + layer_slot + l);
      const int c = pick(channels, layer_eng);
      const int k = pick(st.kernels, layer_eng);
      choice.layers.push_back({c, k});
    }
    layer_slot += st.depth.hi;
    cfg.stages.push_back(std::move(choice));
  }
  return cfg;
}

FlopsReport count_flops(const SearchSpace& space, const ChildConfig& cfg) {
  require_valid(space, cfg);
  FlopsReport report;
  auto add = [&report](std::string name, long long madds) {
    report.per_layer.push_back({std::move(name), madds});
    report.total_madds += madds;
  };
  const long long k_stem = space.stem.kernel;
  long long h = same_out(cfg.resolution, space.stem.stride);
  long long c_in = cfg.stem_channels;
  add("stem", h * h * c_in * space.input_channels * k_stem * k_stem);

  for (std::size_t s = 0; s < space.stages.size(); ++s) {
    const auto& st = space.stages[s];
    const auto& choice = cfg.stages[s];
    for (int l = 0; l < choice.depth(); ++l) {
      const std::string base = "s" + std::to_string(s + 1) + ".b" + std::to_string(l);
      const long long stride = (l == 0) ? st.stride : 1;
      const long long h_out = same_out(static_cast<int>(h), static_cast<int>(stride));
      const long long c_out = choice.layers[l].channels;
      const long long k = choice.layers[l].kernel;
      const long long mid = c_in * st.expansion;
      if (st.expansion != 1) add(base + ".expand", h * h * c_in * mid);
      add(base + ".dw", h_out * h_out * mid * k * k);
      add(base + ".project", h_out * h_out * mid * c_out);
      h = h_out;
      c_in = c_out;
    }
  }
  add("head", h * h * c_in * cfg.head_channels);
  add("classifier", static_cast<long long>(cfg.head_channels) * space.num_classes);
  return report;
}

BigInt space_cardinality(const SearchSpace& space) {
  BigInt total = space.resolutions.size();
  total *= space.channel_choices(space.stem.channels).size();
  total *= space.channel_choices(space.head.channels).size();
  for (const auto& st : space.stages) {
    const BigInt per_layer =
        BigInt(space.channel_choices(st.channels).size()) * BigInt(st.kernels.size());
    BigInt stage_total = 0;
    for (int d = st.depth.lo; d <= st.depth.hi; ++d) {
      stage_total += boost::multiprecision::pow(per_layer, static_cast<unsigned>(d));
    }
    total *= stage_total;
  }
  return total;
}

}  // namespace onestage
