#include <doctest.h>

#include <fstream>
#include <set>
#include <thread>

#include "../support/oracles.hpp"
#include "onestage/errors.hpp"
#include "onestage/selection.hpp"
#include "onestage/trainer.hpp"

using namespace onestage;
namespace fs = std::filesystem;

namespace {

SearchSpace toy() { return load_space(fs::path(ONESTAGE_SOURCE_DIR) / "configs/toy_space.yaml"); }

// Deterministic pseudo-accuracy in [0, 1) with many ties at 1/16 steps.
double hashed_accuracy(const ChildConfig& c) {
  return static_cast<double>(mix64(std::hash<std::string>{}(to_string(c))) % 16) / 16.0;
}

BenchmarkEntry entry(const std::string& name, long long madds, double acc) {
  BenchmarkEntry e;
  e.config_string = name;
  e.madds = madds;
  e.accuracy = acc;
  return e;
}

// Count of single-step moves between two configs, or -1 if some field
// moved more than one step.
int step_distance(const SearchSpace& space, const ChildConfig& a, const ChildConfig& b) {
  int moves = 0;
  auto ladder_step = [&](const std::vector<int>& ladder, int x, int y) {
    if (x == y) return true;
    const auto ix = std::find(ladder.begin(), ladder.end(), x) - ladder.begin();
    const auto iy = std::find(ladder.begin(), ladder.end(), y) - ladder.begin();
    ++moves;
    return std::abs(ix - iy) == 1;
  };
  bool ok = ladder_step(space.resolution_ladder(), a.resolution, b.resolution) &&
            ladder_step(space.channel_choices(space.stem.channels), a.stem_channels, b.stem_channels) &&
            ladder_step(space.channel_choices(space.head.channels), a.head_channels, b.head_channels);
  for (std::size_t s = 0; ok && s < space.stages.size(); ++s) {
    const auto& la = a.stages[s].layers;
    const auto& lb = b.stages[s].layers;
    if (std::abs(static_cast<int>(la.size()) - static_cast<int>(lb.size())) > 1) return -1;
    if (la.size() != lb.size()) ++moves;
    const std::size_t common = std::min(la.size(), lb.size());
    for (std::size_t l = 0; ok && l < common; ++l)
      ok = ladder_step(space.channel_choices(space.stages[s].channels), la[l].channels, lb[l].channels) &&
           ladder_step(space.stages[s].kernels, la[l].kernel, lb[l].kernel);
  }
  return ok ? moves : -1;
}

}  // namespace

TEST_CASE("coarse grid: size, validity, identity point, rounding") {
  const SearchSpace sp = toy();
  const CoarseGrid g = default_grid(sp);
  CHECK(g.size() == 5 * 4 * 2 * 4);
  std::set<std::string> seen;
  const auto entries = coarse_phase(sp, g, hashed_accuracy);
  CHECK(entries.size() == 160);
  for (const auto& e : entries) {
    CHECK_NOTHROW(require_valid(sp, e.config));
    CHECK(e.madds == count_flops(sp, e.config).total_madds);
    CHECK(e.provenance == "coarse");
    seen.insert(e.config_string);
  }
  for (std::size_t i = 1; i < entries.size(); ++i) CHECK(entries[i - 1].madds <= entries[i].madds);
  // Depth 0.5/0.7 and 0.85/1.0 coincide at max depth 2, and late_max equals
  // max with three stages: 5 * 2 * 2 * 3 distinct points.
  CHECK(seen.size() == 60);

  CHECK(to_string(grid_config(sp, 32, 1.0, 1.0, "max")) == to_string(biggest_config(sp)));
  ChildConfig small = smallest_config(sp);
  small.resolution = 32;
  CHECK(to_string(grid_config(sp, 32, 0.5, 0.5, "min")) == to_string(small));

  const ChildConfig c = grid_config(sp, 20, 0.85, 0.75, "late_max");
  CHECK(c.resolution == 20);
  CHECK(c.stem_channels == 8);   // 9 -> 8
  CHECK(c.head_channels == 48);  // 42 clamps to the range
  CHECK(c.stages[0].layers.size() == 2);  // 1.7 rounds to 2
  CHECK(c.stages[1].layers[0].channels == 20);  // 18 is equidistant; ties go up
  CHECK(c.stages[2].layers[0].channels == 24);
  CHECK(c.stages[0].layers[0].kernel == 3);
  CHECK(c.stages[1].layers[0].kernel == 5);  // stage 1 of 3 is in the later half
  CHECK(c.stages[2].layers[0].kernel == 5);
  CHECK(grid_config(sp, 16, 0.7, 1.0, "alternating").stages[1].layers.size() == 1);
  CHECK(grid_config(sp, 16, 0.7, 1.0, "alternating").stages[1].layers[0].kernel == 5);
  CHECK_THROWS_AS(grid_config(sp, 16, 1.0, 1.0, "median"), ConfigError);
}

TEST_CASE("pick_skeleton tie-breaks and infeasibility") {
  const std::vector<BenchmarkEntry> v = {entry("b", 100, 0.5), entry("a", 100, 0.5), entry("c", 90, 0.5),
                                         entry("d", 300, 0.9), entry("e", 200, 0.4)};
  CHECK(pick_skeleton(v, 1000).config_string == "d");
  CHECK(pick_skeleton(v, 299).config_string == "c");
  CHECK(pick_skeleton(v, 99).config_string == "c");
  CHECK(pick_skeleton(v, 90).config_string == "c");
  const std::vector<BenchmarkEntry> same = {entry("b", 100, 0.5), entry("a", 100, 0.5)};
  CHECK(pick_skeleton(same, 100).config_string == "a");
  try {
    pick_skeleton(v, 89);
    FAIL("expected BudgetInfeasible");
  } catch (const BudgetInfeasible& e) {
    CHECK(e.smallest_madds() == 90);
    CHECK(std::string(e.what()).find("90") != std::string::npos);
  }
}

TEST_CASE("pick_skeleton agrees with a brute-force scan of the grid") {
  const SearchSpace sp = toy();
  const auto entries = coarse_phase(sp, default_grid(sp), hashed_accuracy);
  std::mt19937_64 rng(5);
  const long long lo = entries.front().madds, hi = entries.back().madds;
  for (int t = 0; t < 200; ++t) {
    const long long budget = lo + static_cast<long long>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
    double best = -1;
    for (const auto& e : entries)
      if (e.madds <= budget) best = std::max(best, e.accuracy);
    long long cheapest = -1;
    for (const auto& e : entries)
      if (e.madds <= budget && e.accuracy == best && (cheapest < 0 || e.madds < cheapest)) cheapest = e.madds;
    std::string name;
    for (const auto& e : entries)
      if (e.madds == cheapest && e.accuracy == best && (name.empty() || e.config_string < name)) name = e.config_string;
    CHECK(pick_skeleton(entries, budget).config_string == name);
  }
}

TEST_CASE("mutation moves each field by at most one step and stays valid") {
  const SearchSpace sp = toy();
  const ChildConfig base = grid_config(sp, 24, 0.5, 0.75, "late_max");
  int changed = 0;
  for (std::uint64_t s = 0; s < 2000; ++s) {
    const ChildConfig m = mutate(sp, base, 0.3, s);
    REQUIRE_NOTHROW(require_valid(sp, m));
    const int d = step_distance(sp, base, m);
    REQUIRE(d >= 0);
    changed += d > 0;
  }
  CHECK(changed > 1500);
  for (std::uint64_t s = 0; s < 100; ++s) CHECK(to_string(mutate(sp, base, 0.0, s)) == to_string(base));
  CHECK(to_string(mutate(sp, base, 0.3, 7)) == to_string(mutate(sp, base, 0.3, 7)));

  // A new layer copies the last one.
  for (std::uint64_t s = 0; s < 200; ++s) {
    const ChildConfig m = mutate(sp, base, 1.0, s);
    for (std::size_t st = 0; st < sp.stages.size(); ++st)
      if (m.stages[st].layers.size() > base.stages[st].layers.size()) {
        REQUIRE(m.stages[st].layers.size() == 2);
        CHECK(step_distance(sp, base, m) >= 0);
      }
  }
}

TEST_CASE("fine phase: p = 0, budget filter, determinism") {
  const SearchSpace sp = toy();
  const auto coarse = coarse_phase(sp, default_grid(sp), hashed_accuracy);
  const long long budget = coarse[coarse.size() / 2].madds;
  const BenchmarkEntry skel = pick_skeleton(coarse, budget);

  const auto frozen = fine_phase(skel, sp, budget, 16, 0.0, 3, hashed_accuracy);
  CHECK(frozen.size() == 16);
  for (const auto& e : frozen) {
    CHECK(e.config_string == skel.config_string);
    CHECK(e.accuracy == skel.accuracy);
    CHECK(e.provenance == "fine");
  }

  const auto a = fine_phase(skel, sp, budget, 64, 0.3, 11, hashed_accuracy);
  const auto b = fine_phase(skel, sp, budget, 64, 0.3, 11, hashed_accuracy, 3);
  REQUIRE(a.size() == b.size());
  CHECK(benchmark_csv(a) == benchmark_csv(b));
  CHECK(a.size() <= 64);
  int over = 0;
  for (std::uint64_t i = 0; i < 64; ++i)
    over += count_flops(sp, mutate(sp, skel.config, 0.3, 11 + i)).total_madds > budget;
  CHECK(static_cast<int>(a.size()) == 64 - over);
  for (const auto& e : a) {
    CHECK(e.madds <= budget);
    CHECK(step_distance(sp, skel.config, e.config) >= 0);
  }
}

TEST_CASE("with a monotone oracle the winner sits within one step of the budget") {
  const SearchSpace sp = toy();
  const AccuracyOracle by_cost = [&](const ChildConfig& c) {
    return static_cast<double>(count_flops(sp, c).total_madds) / 1e9;
  };
  SelectionConfig cfg;
  cfg.grid = default_grid(sp);
  cfg.n_candidates = 64;
  const auto coarse = coarse_phase(sp, cfg.grid, by_cost);
  for (std::size_t q : {coarse.size() / 4, coarse.size() / 2, 3 * coarse.size() / 4}) {
    const long long budget = coarse[q].madds + 1000;
    const SelectionResult r = coarse_to_fine(sp, budget, cfg, by_cost);
    CHECK(r.best.madds <= budget);
    CHECK(r.best.madds >= r.skeleton.madds);
    // Largest single-step increase available from the winner.
    long long largest_step = 0;
    for (std::uint64_t s = 0; s < 4000; ++s) {
      const ChildConfig m = mutate(sp, r.best.config, 0.05, s);
      if (step_distance(sp, r.best.config, m) == 1)
        largest_step = std::max(largest_step, count_flops(sp, m).total_madds - r.best.madds);
    }
    INFO("budget " << budget << " best " << r.best.madds << " step " << largest_step);
    CHECK(budget - r.best.madds <= largest_step);
  }
}

TEST_CASE("pareto front") {
  const std::vector<BenchmarkEntry> v = {entry("a", 10, 0.5), entry("b", 20, 0.4), entry("c", 20, 0.7),
                                         entry("d", 30, 0.7), entry("e", 40, 0.9), entry("f", 5, 0.1),
                                         entry("g", 40, 0.9), entry("c", 20, 0.7)};
  const auto f = pareto_front(v);
  std::vector<std::string> names;
  for (const auto& e : f) names.push_back(e.config_string);
  CHECK(names == std::vector<std::string>{"f", "a", "c", "e", "g"});
  CHECK(benchmark_csv(pareto_front(f)) == benchmark_csv(f));

  const SearchSpace sp = toy();
  const auto entries = coarse_phase(sp, default_grid(sp), hashed_accuracy);
  const auto front = pareto_front(entries);
  for (const auto& x : entries) {
    bool dominated = false;
    for (const auto& y : entries)
      dominated |= y.madds <= x.madds && y.accuracy >= x.accuracy && (y.madds < x.madds || y.accuracy > x.accuracy);
    const bool in = std::any_of(front.begin(), front.end(),
                                [&](const BenchmarkEntry& e) { return e.config_string == x.config_string; });
    CHECK(in == !dominated);
  }
  std::set<std::string> unique;
  for (const auto& e : front) CHECK(unique.insert(e.config_string).second);
}

TEST_CASE("parallel scoring keeps order and propagates errors") {
  const auto fn = [](std::size_t i) { return static_cast<double>(i * i); };
  CHECK(parallel_scores(50, 1, fn) == parallel_scores(50, 4, fn));
  CHECK(parallel_scores(0, 4, fn).empty());
  CHECK_THROWS_AS(parallel_scores(20, 3,
                                  [](std::size_t i) -> double {
                                    if (i == 13) throw NumericFault("boom");
                                    return 0.0;
                                  }),
                  NumericFault);
}

TEST_CASE("grid file parsing") {
  const SelectionConfig c = load_selection_config(fs::path(ONESTAGE_SOURCE_DIR) / "configs/grid_toy.yaml");
  CHECK(c.grid.size() == 160);
  CHECK(c.mutation_p == 0.3);
  CHECK(c.n_candidates == 64);
  const fs::path bad = fs::temp_directory_path() / "onestage_bad_grid.yaml";
  {
    std::ofstream o(bad);
    o << "resolutions: [16]\ndepth_multipliers: [1]\nwidth_multipliers: [1]\nkernel_patterns: [max]\n  \nmutaton_p: 0.2\n";
  }
  try {
    load_selection_config(bad);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find(":6:1") != std::string::npos);
  }
  CHECK_THROWS_AS(load_selection_config(fs::temp_directory_path() / "missing_grid.yaml"), IoError);
}

TEST_CASE("supernet oracle equals calibrate then evaluate") {
  SynthSpec s;
  s.train_count = 300;
  s.test_count = 10;
  s.seed = 8;
  const fs::path d = fs::temp_directory_path() / "onestage_test_selection";
  fs::remove_all(d);
  const DatasetManifest m = synth_dataset(s, d);
  const RawSplit train = read_split(m, "train");
  SupernetParams sp = init_supernet(toy(), 3);
  std::mt19937_64 rng(3);
  oracle::perturb_bn(sp, rng);
  SelectionConfig cfg;
  cfg.calib_batches = 2;
  cfg.calib_batch_size = 50;
  cfg.eval_examples = 200;
  const AccuracyOracle o = supernet_oracle(sp, m, train, cfg);
  const ChildConfig c = sample_child(sp.space, 4);
  const auto cal = calibrate(sp, c, split_source(m, train, 50, 100), 2);
  const double direct = evaluate(cal, split_source(m, train, 50, 200)).accuracy;
  CHECK(o(c) == direct);
  CHECK(o(c) == direct);
}

TEST_CASE("selection on a frozen snapshot ignores training running on a copy") {
  SynthSpec s;
  s.train_count = 256;
  s.test_count = 10;
  s.seed = 9;
  const fs::path d = fs::temp_directory_path() / "onestage_test_selection_frozen";
  fs::remove_all(d);
  const DatasetManifest m = synth_dataset(s, d);
  const RawSplit train = read_split(m, "train");

  TrainConfig tc;
  tc.batch_size = 32;
  tc.n_random = 1;
  tc.warmup_fraction = 0.0;
  TrainState live = init_state(toy(), tc);
  const SupernetParams frozen = live.supernet;

  SelectionConfig cfg;
  cfg.grid = {{16, 32}, {0.5, 1.0}, {1.0}, {"min", "max"}};
  cfg.calib_batches = 1;
  cfg.calib_batch_size = 64;
  cfg.eval_examples = 128;
  cfg.n_candidates = 4;
  cfg.workers = 2;
  const AccuracyOracle o = supernet_oracle(frozen, m, train, cfg);
  const long long budget = count_flops(toy(), biggest_config(toy())).total_madds;
  const std::string quiet = benchmark_csv(coarse_to_fine(toy(), budget, cfg, o).coarse);

  const auto before = param_checksum(frozen.params);
  std::thread trainer([&] {
    const LrSchedule sched = make_schedule(tc, 8, 8);
    for (long long i = 0; i < 3; ++i) {
      std::vector<long long> idx;
      for (long long j = 0; j < 32; ++j) idx.push_back(i * 32 + j);
      sandwich_step(live, gather(m, train, idx), tc, sched);
    }
  });
  const SelectionResult busy = coarse_to_fine(toy(), budget, cfg, o);
  trainer.join();
  CHECK(benchmark_csv(busy.coarse) == quiet);
  CHECK(param_checksum(frozen.params) == before);
  CHECK(param_checksum(live.supernet.params) != before);
}
