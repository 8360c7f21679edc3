#include "onestage/selection.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include <yaml-cpp/yaml.h>

#include "onestage/errors.hpp"

namespace onestage {

int pattern_kernel(const SearchSpace& space, std::size_t stage, const std::string& pattern) {
  const StageSpec& s = space.stages.at(stage);
  const std::size_t n = space.stages.size();
  if (pattern == "min") return s.min_kernel();
  if (pattern == "max") return s.max_kernel();
  if (pattern == "late_max") return stage < n / 2 ? s.min_kernel() : s.max_kernel();
  if (pattern == "alternating") return stage % 2 == 0 ? s.min_kernel() : s.max_kernel();
  throw ConfigError("unknown kernel pattern '" + pattern + "'");
}

CoarseGrid default_grid(const SearchSpace& space) {
  return {space.resolution_ladder(), {0.5, 0.7, 0.85, 1.0}, {0.75, 1.0}, {"min", "max", "late_max", "alternating"}};
}

SelectionConfig load_selection_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open grid file: " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  return parse_selection_config(text.str(), path.string());
}

SelectionConfig parse_selection_config(const std::string& text, const std::string& source) {
  const std::filesystem::path path(source);
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(path.string() + ":" + std::to_string(e.mark.line + 1) + ":" +
                      std::to_string(e.mark.column + 1) + ": " + e.msg);
  }
  SelectionConfig c;
  static const std::vector<std::string> known = {"resolutions",   "depth_multipliers", "width_multipliers",
                                                 "kernel_patterns", "mutation_p",      "n_candidates",
                                                 "calib_batches", "calib_batch_size",  "eval_examples",
                                                 "workers",       "seed"};
  try {
    for (const auto& kv : root) {
      const std::string k = kv.first.as<std::string>();
      if (std::find(known.begin(), known.end(), k) == known.end())
        throw ConfigError(path.string() + ":" + std::to_string(kv.first.Mark().line + 1) + ":" +
                          std::to_string(kv.first.Mark().column + 1) + ": unknown grid key '" + k + "'");
    }
    c.grid.resolutions = root["resolutions"].as<std::vector<int>>();
    c.grid.depth_multipliers = root["depth_multipliers"].as<std::vector<double>>();
    c.grid.width_multipliers = root["width_multipliers"].as<std::vector<double>>();
    c.grid.kernel_patterns = root["kernel_patterns"].as<std::vector<std::string>>();
    if (root["mutation_p"]) c.mutation_p = root["mutation_p"].as<double>();
    if (root["n_candidates"]) c.n_candidates = root["n_candidates"].as<int>();
    if (root["calib_batches"]) c.calib_batches = root["calib_batches"].as<int>();
    if (root["calib_batch_size"]) c.calib_batch_size = root["calib_batch_size"].as<int>();
    if (root["eval_examples"]) c.eval_examples = root["eval_examples"].as<long long>();
    if (root["workers"]) c.workers = root["workers"].as<int>();
    if (root["seed"]) c.seed = root["seed"].as<std::uint64_t>();
  } catch (const YAML::Exception& e) {
    throw ConfigError(path.string() + ":" + std::to_string(e.mark.line + 1) + ":" +
                      std::to_string(e.mark.column + 1) + ": " + e.msg);
  }
  if (c.grid.size() == 0) throw ConfigError(path.string() + ": empty coarse grid");
  if (c.mutation_p < 0 || c.mutation_p > 1) throw ConfigError(path.string() + ": mutation_p must be in [0, 1]");
  if (c.n_candidates < 0 || c.calib_batches < 1 || c.calib_batch_size < 1 || c.eval_examples < 1 || c.workers < 1)
    throw ConfigError(path.string() + ": counts must be positive");
  return c;
}

namespace {

int nearest_choice(const std::vector<int>& choices, double target) {
  int best = choices.front();
  for (int c : choices)
    if (std::fabs(c - target) <= std::fabs(best - target)) best = c;
  return best;
}

}  // namespace

ChildConfig grid_config(const SearchSpace& space, int resolution, double depth_mult, double width_mult,
                        const std::string& kernel_pattern) {
  ChildConfig cfg;
  cfg.resolution = resolution;
  cfg.stem_channels = nearest_choice(space.channel_choices(space.stem.channels), space.stem.channels.hi * width_mult);
  cfg.head_channels = nearest_choice(space.channel_choices(space.head.channels), space.head.channels.hi * width_mult);
  for (std::size_t s = 0; s < space.stages.size(); ++s) {
    const StageSpec& st = space.stages[s];
    const int d = std::clamp(static_cast<int>(std::floor(st.depth.hi * depth_mult + 0.5)), st.depth.lo, st.depth.hi);
    const LayerChoice layer{nearest_choice(space.channel_choices(st.channels), st.channels.hi * width_mult),
                            pattern_kernel(space, s, kernel_pattern)};
    cfg.stages.push_back(StageChoice{std::vector<LayerChoice>(static_cast<std::size_t>(d), layer)});
  }
  return cfg;
}

AccuracyOracle supernet_oracle(const SupernetParams& snapshot, const DatasetManifest& m, const RawSplit& train,
                               const SelectionConfig& cfg, Activation activation) {
  const SupernetParams* sp = &snapshot;
  const DatasetManifest* man = &m;
  const RawSplit* raw = &train;
  return [sp, man, raw, cfg, activation](const ChildConfig& c) {
    const long long calib = static_cast<long long>(cfg.calib_batches) * cfg.calib_batch_size;
    const CalibratedChild child = calibrate(*sp, c, split_source(*man, *raw, cfg.calib_batch_size, calib),
                                            cfg.calib_batches, man->name, activation);
    return evaluate(child, split_source(*man, *raw, cfg.calib_batch_size, cfg.eval_examples)).accuracy;
  };
}

std::vector<double> parallel_scores(std::size_t n, int workers, const std::function<double(std::size_t)>& fn) {
  std::vector<double> out(n, 0.0);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        out[i] = fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int threads = std::max(1, std::min<int>(workers, static_cast<int>(n)));
  if (threads == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

namespace {

void sort_entries(std::vector<BenchmarkEntry>& v) {
  std::stable_sort(v.begin(), v.end(), [](const BenchmarkEntry& a, const BenchmarkEntry& b) {
    if (a.madds != b.madds) return a.madds < b.madds;
    return a.config_string < b.config_string;
  });
}

std::vector<BenchmarkEntry> score(const SearchSpace& space, const std::vector<ChildConfig>& configs,
                                  const std::string& provenance, const AccuracyOracle& oracle, int workers) {
  // Identical configs are scored once.
  std::map<std::string, std::size_t> first;
  std::vector<std::size_t> unique;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    names.push_back(to_string(configs[i]));
    if (first.emplace(names.back(), unique.size()).second) unique.push_back(i);
  }
  const auto acc = parallel_scores(unique.size(), workers, [&](std::size_t j) { return oracle(configs[unique[j]]); });
  std::vector<BenchmarkEntry> out;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    BenchmarkEntry e;
    e.config = configs[i];
    e.config_string = names[i];
    e.madds = count_flops(space, configs[i]).total_madds;
    e.accuracy = acc[first.at(names[i])];
    e.provenance = provenance;
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace

std::vector<BenchmarkEntry> coarse_phase(const SearchSpace& space, const CoarseGrid& grid,
                                         const AccuracyOracle& oracle, int workers) {
  std::vector<ChildConfig> configs;
  for (int r : grid.resolutions)
    for (double d : grid.depth_multipliers)
      for (double w : grid.width_multipliers)
        for (const auto& k : grid.kernel_patterns) {
          ChildConfig c = grid_config(space, r, d, w, k);
          require_valid(space, c);
          configs.push_back(std::move(c));
        }
  auto out = score(space, configs, "coarse", oracle, workers);
  sort_entries(out);
  return out;
}

BenchmarkEntry pick_skeleton(const std::vector<BenchmarkEntry>& entries, long long budget) {
  const BenchmarkEntry* best = nullptr;
  for (const auto& e : entries) {
    if (e.madds > budget) continue;
    if (!best || e.accuracy > best->accuracy ||
        (e.accuracy == best->accuracy &&
         (e.madds < best->madds || (e.madds == best->madds && e.config_string < best->config_string))))
      best = &e;
  }
  if (!best) {
    long long smallest = -1;
    for (const auto& e : entries) smallest = smallest < 0 ? e.madds : std::min(smallest, e.madds);
    throw BudgetInfeasible("no candidate fits the budget of " + std::to_string(budget) +
                           " MAdds; the smallest candidate needs " + std::to_string(smallest),
                           smallest);
  }
  return *best;
}

ChildConfig mutate(const SearchSpace& space, const ChildConfig& cfg, double p, std::uint64_t seed) {
  std::mt19937_64 rng(mix64(seed));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto hit = [&] { return u(rng) < p; };
  auto step_in = [&](const std::vector<int>& ladder, int value) {
    auto it = std::find(ladder.begin(), ladder.end(), value);
    if (it == ladder.end() || ladder.size() < 2) return value;
    const auto i = static_cast<std::size_t>(it - ladder.begin());
    const bool up = (rng() & 1ULL) != 0;
    if (up) return i + 1 < ladder.size() ? ladder[i + 1] : ladder[i - 1];
    return i > 0 ? ladder[i - 1] : ladder[i + 1];
  };
  ChildConfig out = cfg;
  if (hit()) out.resolution = step_in(space.resolution_ladder(), out.resolution);
  if (hit()) out.stem_channels = step_in(space.channel_choices(space.stem.channels), out.stem_channels);
  for (std::size_t s = 0; s < space.stages.size(); ++s) {
    const StageSpec& st = space.stages[s];
    auto& layers = out.stages[s].layers;
    if (hit()) {
      std::vector<int> depths;
      for (int d = st.depth.lo; d <= st.depth.hi; ++d) depths.push_back(d);
      const int d = step_in(depths, static_cast<int>(layers.size()));
      if (d > static_cast<int>(layers.size())) layers.push_back(layers.back());
      else layers.resize(static_cast<std::size_t>(d));
    }
    const auto widths = space.channel_choices(st.channels);
    for (auto& l : layers) {
      if (hit()) l.channels = step_in(widths, l.channels);
      if (hit()) l.kernel = step_in(st.kernels, l.kernel);
    }
  }
  if (hit()) out.head_channels = step_in(space.channel_choices(space.head.channels), out.head_channels);
  return out;
}

std::vector<BenchmarkEntry> fine_phase(const BenchmarkEntry& skeleton, const SearchSpace& space, long long budget,
                                       int n_candidates, double p, std::uint64_t seed, const AccuracyOracle& oracle,
                                       int workers) {
  require_valid(space, skeleton.config);
  std::vector<ChildConfig> kept;
  for (int i = 0; i < n_candidates; ++i) {
    ChildConfig c = mutate(space, skeleton.config, p, seed + static_cast<std::uint64_t>(i));
    require_valid(space, c);
    if (count_flops(space, c).total_madds <= budget) kept.push_back(std::move(c));
  }
  auto out = score(space, kept, "fine", oracle, workers);
  sort_entries(out);
  return out;
}

std::vector<BenchmarkEntry> pareto_front(const std::vector<BenchmarkEntry>& entries) {
  std::vector<BenchmarkEntry> sorted = entries;
  std::stable_sort(sorted.begin(), sorted.end(), [](const BenchmarkEntry& a, const BenchmarkEntry& b) {
    if (a.madds != b.madds) return a.madds < b.madds;
    if (a.accuracy != b.accuracy) return a.accuracy > b.accuracy;
    return a.config_string < b.config_string;
  });
  std::vector<BenchmarkEntry> front;
  double best_cheaper = -std::numeric_limits<double>::infinity();  // over strictly smaller MAdds
  std::size_t i = 0;
  while (i < sorted.size()) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j].madds == sorted[i].madds) ++j;
    const double top = sorted[i].accuracy;  // best within this MAdds group
    for (std::size_t k = i; k < j; ++k)
      if (sorted[k].accuracy == top && top > best_cheaper &&
          (k == i || sorted[k].config_string != sorted[k - 1].config_string))
        front.push_back(sorted[k]);
    best_cheaper = std::max(best_cheaper, top);
    i = j;
  }
  return front;
}

SelectionResult coarse_to_fine(const SearchSpace& space, long long budget, const SelectionConfig& cfg,
                               const AccuracyOracle& oracle) {
  SelectionResult r;
  r.coarse = coarse_phase(space, cfg.grid, oracle, cfg.workers);
  r.skeleton = pick_skeleton(r.coarse, budget);
  r.fine = fine_phase(r.skeleton, space, budget, cfg.n_candidates, cfg.mutation_p, cfg.seed, oracle, cfg.workers);
  std::vector<BenchmarkEntry> finalists = r.fine;
  finalists.push_back(r.skeleton);
  r.best = pick_skeleton(finalists, budget);
  std::vector<BenchmarkEntry> all = r.coarse;
  all.insert(all.end(), r.fine.begin(), r.fine.end());
  r.front = pareto_front(all);
  return r;
}

std::string benchmark_csv(const std::vector<BenchmarkEntry>& entries) {
  std::ostringstream o;
  o << "config,madds,accuracy,provenance\n" << std::setprecision(9);
  for (const auto& e : entries) o << e.config_string << ',' << e.madds << ',' << e.accuracy << ',' << e.provenance << '\n';
  return o.str();
}

}  // namespace onestage
