// onestage: train a weight-sharing supernet, slice and calibrate children,
// search under a MAdds budget, and inspect spaces.
#include <CLI11.hpp>
#include <json.hpp>
#include <yaml-cpp/yaml.h>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "onestage/calibration.hpp"
#include "onestage/checkpoint.hpp"
#include "onestage/errors.hpp"
#include "onestage/selection.hpp"
#include "onestage/trainer.hpp"

using namespace onestage;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitInfeasible = 3;
constexpr int kExitNumeric = 4;

std::pair<std::string, std::string> split_assignment(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + kv + "' is not KEY=VALUE");
  return {kv.substr(0, eq), kv.substr(eq + 1)};
}

// "train.optimizer.rho" -> "rmsprop_rho"; the section prefix is optional.
std::string train_key(std::string key) {
  if (key.rfind("train.", 0) == 0) key = key.substr(6);
  if (key.rfind("optimizer.", 0) == 0) key = "rmsprop_" + key.substr(10);
  if (key.find('.') != std::string::npos) throw ConfigError("unknown train config key '" + key + "'");
  return key;
}

std::string grid_key(std::string key) {
  if (key.rfind("grid.", 0) == 0) key = key.substr(5);
  if (key.find('.') != std::string::npos) throw ConfigError("unknown grid key '" + key + "'");
  return key;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

struct SupernetFile {
  SearchSpace space;
  TrainState state;
  TrainConfig train;
};

SupernetFile load_supernet(const fs::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  auto it = ck.meta.find("space");
  if (it == ck.meta.end() || ck.meta.count("train_config") == 0)
    throw ConfigError(path.string() + ": not a supernet checkpoint");
  SupernetFile f{parse_space(it->second, path.string() + "#space"), {}, {}};
  f.state = from_checkpoint(ck, f.space);
  f.train = parse_train_config(ck.meta.at("train_config"), path.string() + "#train_config");
  return f;
}

ChildConfig parse_valid_config(const SearchSpace& space, const std::string& text) {
  const ChildConfig cfg = parse_config(text);
  const auto violations = validate_config(space, cfg);
  for (const auto& v : violations)
    if (v.is_error()) throw ConfigError("invalid config '" + text + "': " + v.message);
  return cfg;
}

json entry_json(const BenchmarkEntry& e) {
  return {{"config", e.config_string}, {"madds", e.madds}, {"accuracy", e.accuracy}, {"provenance", e.provenance}};
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  SynthSpec spec;
  std::string name = "synth";
};

int run_synth(const SynthArgs& a) {
  const DatasetManifest m = synth_dataset(a.spec, a.out, a.name);
  std::cout << "wrote " << (fs::path(a.out) / "manifest.yaml").string() << " (" << m.splits.at("train").count << " train, "
            << m.splits.at("test").count << " test)\n";
  return kExitOk;
}

struct TrainArgs {
  std::string space, data, config, out, resume;
  long long steps = -1;
  long long seed = -1;
  std::vector<std::string> sets;
  bool curves = false;
  int curve_batches = 4;
};

int run_train(const TrainArgs& a) {
  const SearchSpace space = load_space(a.space);
  const DatasetManifest data = load_manifest(a.data);
  TrainConfig cfg = load_train_config(a.config);
  for (const auto& kv : a.sets) {
    const auto [k, v] = split_assignment(kv);
    apply_override(cfg, train_key(k), v);
  }
  if (a.steps >= 0) cfg.max_steps = a.steps;
  if (a.seed >= 0) cfg.global_seed = static_cast<std::uint64_t>(a.seed);
  cfg.validate();

  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) resume = load_checkpoint(a.resume);

  TrainHooks hooks;
  std::ofstream curves;
  RawSplit train_raw, test_raw;
  if (a.curves) {
    fs::create_directories(a.out);
    curves.open(fs::path(a.out) / "curves.csv");
    if (!curves) throw IoError("cannot write " + (fs::path(a.out) / "curves.csv").string());
    curves << "epoch,step,child,config,madds,accuracy,loss\n" << std::setprecision(9);
    train_raw = read_split(data, "train");
    test_raw = read_split(data, "test");
    hooks.on_epoch = [&](long long epoch, const TrainState& st) {
      for (const auto& [role, child] : {std::pair{"smallest", smallest_config(space)},
                                        std::pair{"biggest", biggest_config(space)}}) {
        const EvalResult r = calibrated_accuracy(st.supernet, child, data, train_raw, test_raw, a.curve_batches,
                                                 cfg.batch_size, cfg.activation);
        curves << epoch << ',' << st.step << ',' << role << ',' << to_string(child) << ','
               << count_flops(space, child).total_madds << ',' << r.accuracy << ',' << r.loss << '\n';
      }
      curves.flush();
    };
  }
  const TrainResult r = train(space, data, cfg, fs::path(a.out), resume, hooks);
  std::cout << "trained " << r.state.step << " steps; final checkpoint " << r.final_checkpoint.string() << "\n";
  return kExitOk;
}

struct SliceArgs {
  std::string checkpoint, config, data, out;
  int batches = 4;
  int batch_size = 128;
  bool json_out = false;
};

int run_slice(const SliceArgs& a) {
  const SupernetFile f = load_supernet(a.checkpoint);
  const ChildConfig cfg = parse_valid_config(f.space, a.config);
  const DatasetManifest data = load_manifest(a.data);
  const RawSplit raw = read_split(data, "train");
  const CalibratedChild child = calibrate(f.state.supernet, cfg, split_source(data, raw, a.batch_size), a.batches,
                                          data.name, f.train.activation);
  save_checkpoint(child_to_checkpoint(child, f.space), a.out);
  const long long madds = count_flops(f.space, cfg).total_madds;
  const long long params = param_count(child.weights);
  const long long supernet_params = param_count(f.state.supernet.params);
  if (a.json_out) {
    std::cout << json{{"config", to_string(cfg)}, {"madds", madds}, {"params", params},
                      {"supernet_params", supernet_params}, {"out", a.out},
                      {"calibration_examples", child.examples}}
                     .dump()
              << "\n";
  } else {
    std::cout << to_string(cfg) << "\nmadds " << madds << "\nparams " << params << " of " << supernet_params
              << "\ncalibrated on "
              << child.examples << " examples\nwrote " << a.out << "\n";
  }
  return kExitOk;
}

struct EvalArgs {
  std::string child, data, split = "test";
  long long limit = -1;
  int batch_size = 128;
  bool json_out = false;
};

int run_evaluate(const EvalArgs& a) {
  const Checkpoint ck = load_checkpoint(a.child);
  auto it = ck.meta.find("space");
  if (it == ck.meta.end()) throw ConfigError(a.child + ": checkpoint has no space section");
  const SearchSpace space = parse_space(it->second, a.child + "#space");
  const CalibratedChild child = child_from_checkpoint(ck, space);
  const DatasetManifest data = load_manifest(a.data);
  const RawSplit raw = read_split(data, a.split);
  const EvalResult r = evaluate(child, split_source(data, raw, a.batch_size, a.limit));
  if (a.json_out) {
    std::cout << json{{"config", to_string(child.config)}, {"accuracy", r.accuracy}, {"loss", r.loss},
                      {"count", r.count}}
                     .dump()
              << "\n";
  } else {
    std::cout << to_string(child.config) << "\naccuracy " << r.accuracy << "\nloss " << r.loss << "\ncount "
              << r.count << "\n";
  }
  return kExitOk;
}

struct SearchArgs {
  std::string checkpoint, grid, data, out, benchmark;
  long long budget = 0;
  int workers = 0;
  std::vector<std::string> sets;
  bool json_out = false;
};

int run_search(const SearchArgs& a) {
  if (a.budget <= 0) throw ConfigError("--budget must be positive");
  YAML::Node grid;
  try {
    grid = YAML::LoadFile(a.grid);
  } catch (const YAML::BadFile&) {
    throw IoError("cannot open grid file: " + a.grid);
  }
  for (const auto& kv : a.sets) {
    const auto [k, v] = split_assignment(kv);
    grid[grid_key(k)] = YAML::Load(v);
  }
  YAML::Emitter em;
  em << grid;
  SelectionConfig cfg =
      a.sets.empty() ? load_selection_config(a.grid) : parse_selection_config(em.c_str(), a.grid + " (with --set)");
  if (a.workers > 0) cfg.workers = a.workers;

  const SupernetFile f = load_supernet(a.checkpoint);
  const DatasetManifest data = load_manifest(a.data);
  const RawSplit raw = read_split(data, "train");
  const AccuracyOracle oracle = supernet_oracle(f.state.supernet, data, raw, cfg, f.train.activation);
  const SelectionResult r = coarse_to_fine(f.space, a.budget, cfg, oracle);

  write_text(a.out, benchmark_csv(r.front));
  if (!a.benchmark.empty()) {
    std::vector<BenchmarkEntry> all = r.coarse;
    all.insert(all.end(), r.fine.begin(), r.fine.end());
    write_text(a.benchmark, benchmark_csv(all));
  }
  if (a.json_out) {
    json front = json::array();
    for (const auto& e : r.front) front.push_back(entry_json(e));
    std::cout << json{{"best", entry_json(r.best)}, {"skeleton", entry_json(r.skeleton)}, {"budget", a.budget},
                      {"coarse_entries", r.coarse.size()}, {"fine_entries", r.fine.size()}, {"front", front}}
                     .dump()
              << "\n";
  } else {
    std::cout << r.best.config_string << "\nmadds " << r.best.madds << "\naccuracy " << r.best.accuracy
              << "\nprovenance " << r.best.provenance << "\nskeleton " << r.skeleton.config_string << "\nwrote "
              << a.out << "\n";
  }
  return kExitOk;
}

struct FlopsArgs {
  std::string space, config;
  bool json_out = false;
};

int run_flops(const FlopsArgs& a) {
  const SearchSpace space = load_space(a.space);
  const ChildConfig cfg = parse_valid_config(space, a.config);
  const FlopsReport rep = count_flops(space, cfg);
  if (a.json_out) {
    json layers = json::array();
    for (const auto& l : rep.per_layer) layers.push_back({{"layer", l.layer}, {"madds", l.madds}});
    std::cout << json{{"config", to_string(cfg)}, {"total_madds", rep.total_madds}, {"per_layer", layers}}.dump()
              << "\n";
  } else {
    for (const auto& l : rep.per_layer) std::cout << std::left << std::setw(24) << l.layer << l.madds << "\n";
    std::cout << std::left << std::setw(24) << "total" << rep.total_madds << "\n";
  }
  return kExitOk;
}

struct CardArgs {
  std::string space;
  bool json_out = false;
};

int run_cardinality(const CardArgs& a) {
  const SearchSpace space = load_space(a.space);
  const std::string n = space_cardinality(space).str();
  if (a.json_out)
    std::cout << json{{"space", space.name}, {"cardinality", n}}.dump() << "\n";
  else
    std::cout << n << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Weight-sharing supernet training, slicing, calibration and search."};
  app.require_subcommand(1);
  app.set_version_flag("--version", "onestage 1.0");

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Write a synthetic Gaussian-blob corpus");
  c_synth->add_option("--out", synth.out, "Output directory")->required();
  c_synth->add_option("--name", synth.name, "Dataset name recorded in the manifest");
  c_synth->add_option("--classes", synth.spec.classes, "Number of classes");
  c_synth->add_option("--resolution", synth.spec.resolution, "Image side in pixels");
  c_synth->add_option("--train-count", synth.spec.train_count, "Training records");
  c_synth->add_option("--test-count", synth.spec.test_count, "Test records");
  c_synth->add_option("--seed", synth.spec.seed, "Generator seed");
  c_synth->add_option("--noise", synth.spec.pixel_noise, "Per-pixel noise std in [0, 1] units");
  c_synth->add_option("--jitter", synth.spec.jitter, "Blob position jitter as a fraction of the side");
  c_synth->add_option("--distractors", synth.spec.distractors, "Random blobs per image");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a supernet with the sandwich rule");
  c_train->add_option("--space", tr.space, "Search space file")->required();
  c_train->add_option("--data", tr.data, "Dataset manifest")->required();
  c_train->add_option("--config", tr.config, "Train config file")->required();
  c_train->add_option("--out", tr.out, "Output directory for checkpoints and steps.csv")->required();
  c_train->add_option("--steps", tr.steps, "Stop after this many steps (overrides epochs)");
  c_train->add_option("--seed", tr.seed, "Global seed");
  c_train->add_option("--set", tr.sets, "Override a config key, e.g. --set optimizer.rho=0.9 (repeatable)");
  c_train->add_option("--resume", tr.resume, "Continue from a supernet checkpoint");
  c_train->add_flag("--curves", tr.curves, "Calibrate and evaluate smallest and biggest after every epoch");
  c_train->add_option("--curve-batches", tr.curve_batches, "Calibration batches per curve point");

  SliceArgs sl;
  auto* c_slice = app.add_subcommand("slice", "Slice a child out of a supernet and calibrate its batch norms");
  c_slice->alias("calibrate");
  c_slice->add_option("--checkpoint", sl.checkpoint, "Supernet checkpoint")->required();
  c_slice->add_option("--config", sl.config, "Child config string")->required();
  c_slice->add_option("--data", sl.data, "Dataset manifest; calibration reads its training split")->required();
  c_slice->add_option("--out", sl.out, "Child checkpoint to write")->required();
  c_slice->add_option("--batches", sl.batches, "Calibration batches");
  c_slice->add_option("--batch-size", sl.batch_size, "Calibration batch size");
  c_slice->add_flag("--json", sl.json_out, "Print a JSON object");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("evaluate", "Top-1 accuracy and loss of a calibrated child");
  c_eval->add_option("--child", ev.child, "Child checkpoint written by slice")->required();
  c_eval->add_option("--data", ev.data, "Dataset manifest")->required();
  c_eval->add_option("--split", ev.split, "Split to score (train or test)");
  c_eval->add_option("--limit", ev.limit, "Score only the first N records");
  c_eval->add_option("--batch-size", ev.batch_size, "Evaluation batch size");
  c_eval->add_flag("--json", ev.json_out, "Print a JSON object");

  SearchArgs se;
  auto* c_search = app.add_subcommand("search", "Coarse-to-fine selection under a MAdds budget");
  c_search->add_option("--checkpoint", se.checkpoint, "Supernet checkpoint")->required();
  c_search->add_option("--budget", se.budget, "Maximum MAdds")->required();
  c_search->add_option("--grid", se.grid, "Grid file")->required();
  c_search->add_option("--data", se.data, "Dataset manifest; the oracle reads its training split")->required();
  c_search->add_option("--out", se.out, "Pareto front CSV")->required();
  c_search->add_option("--benchmark", se.benchmark, "Also write every scored entry to this CSV");
  c_search->add_option("--workers", se.workers, "Cap on the worker pool (0 keeps the grid file value)");
  c_search->add_option("--set", se.sets, "Override a grid key, e.g. --set grid.mutation_p=0.2 (repeatable)");
  c_search->add_flag("--json", se.json_out, "Print a JSON object");

  FlopsArgs fl;
  auto* c_flops = app.add_subcommand("flops", "Per-layer multiply-accumulate table of a child");
  c_flops->add_option("--space", fl.space, "Search space file")->required();
  c_flops->add_option("--config", fl.config, "Child config string")->required();
  c_flops->add_flag("--json", fl.json_out, "Print a JSON object");

  CardArgs ca;
  auto* c_card = app.add_subcommand("cardinality", "Number of distinct children in a space");
  c_card->add_option("--space", ca.space, "Search space file")->required();
  c_card->add_flag("--json", ca.json_out, "Print a JSON object");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*c_synth) return run_synth(synth);
    if (*c_train) return run_train(tr);
    if (*c_slice) return run_slice(sl);
    if (*c_eval) return run_evaluate(ev);
    if (*c_search) return run_search(se);
    if (*c_flops) return run_flops(fl);
    if (*c_card) return run_cardinality(ca);
  } catch (const BudgetInfeasible& e) {
    std::cerr << "error: " << e.what() << "\nhint: the smallest feasible budget is " << e.smallest_madds()
              << " MAdds\n";
    return kExitInfeasible;
  } catch (const NumericFault& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const PreconditionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitUsage;
}
