// Acceptance driver. Prints one PASS/FAIL line per criterion; exit status is
// 0 only when every selected criterion passes.
//
//   onestage_acceptance [--only c08 ...] [--work DIR] [--prepare] [--fresh]
//
// Desk-scale training runs and oracle tables are cached under --work, keyed
// by a signature that includes a hash of the library archive.
#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>

#include "../support/op_cases.hpp"
#include "../support/trainer_oracles.hpp"
#include "onestage/calibration.hpp"
#include "onestage/checkpoint.hpp"
#include "onestage/errors.hpp"
#include "onestage/selection.hpp"

using namespace onestage;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Env {
  fs::path src;
  fs::path work;
  bool fresh = false;
  std::uint64_t lib_hash = 0;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream o;
  o << std::setprecision(prec) << v;
  return o.str();
}

std::string pct(double v) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(2) << 100.0 * v << "%";
  return o.str();
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw IoError("cannot write " + p.string());
}

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << v;
  return o.str();
}

SearchSpace toy(const Env& e) { return load_space(e.src / "configs/toy_space.yaml"); }
SearchSpace table1(const Env& e) { return load_space(e.src / "configs/table1_space.yaml"); }

const char* kXl = "r256-d1.2.2.2.4.4.1-c32.16.24.48.88.128.216.352.1408-k3.3.5.3.5.5.3";

// ---------------------------------------------------------------------------
// Desk corpus and training runs.

struct Corpus {
  DatasetManifest m;
  RawSplit train, test;
};

const Corpus& corpus(const Env& e) {
  static const Corpus c = [&] {
    SynthSpec s;
    s.train_count = 3200;
    s.test_count = 1000;
    s.seed = 1;
    Corpus out;
    out.m = synth_dataset(s, e.work / "data", "synth10");
    out.train = read_split(out.m, "train");
    out.test = read_split(out.m, "test");
    return out;
  }();
  return c;
}

struct RunSpec {
  std::string name;
  bool floor = true;
  double floor_fraction = 0.05;
};

const std::vector<RunSpec>& desk_runs() {
  static const std::vector<RunSpec> runs = {
      {"floor03", true, 0.03}, {"floor05", true, 0.05}, {"floor08", true, 0.08},
      {"floor10", true, 0.10}, {"nofloor", false, 0.05}};
  return runs;
}

TrainConfig run_config(const Env& e, const RunSpec& r) {
  TrainConfig cfg = load_train_config(e.src / "configs/train_desk.yaml");
  cfg.lr_floor = r.floor;
  cfg.lr_floor_fraction = r.floor_fraction;
  cfg.validate();
  return cfg;
}

struct CurvePoint {
  long long epoch = 0, step = 0;
  std::string child;
  double accuracy = 0.0;
};

std::vector<CurvePoint> read_curves(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  std::vector<CurvePoint> out;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    if (f.size() != 7) throw IoError(p.string() + ": malformed row '" + line + "'");
    out.push_back({std::stoll(f[0]), std::stoll(f[1]), f[2], std::stod(f[5])});
  }
  return out;
}

constexpr int kCalibBatches = 8;
constexpr int kCurveCalibBatches = 4;

struct RunResult {
  fs::path dir;
  SupernetParams supernet;
  TrainConfig cfg;
  std::vector<CurvePoint> curves;
  double train_seconds = 0.0;
};

std::string run_signature(const Env& e, const TrainConfig& cfg) {
  const Corpus& c = corpus(e);
  std::uint64_t h = fnv1a(to_yaml(cfg));
  h = fnv1a(canonical_text(toy(e)), h);
  h = fnv1a(read_file(c.m.dir / "manifest.yaml"), h);
  h = fnv1a(hex(e.lib_hash), h);
  return hex(h);
}

// Trains the run unless a finished copy with the same signature exists.
RunResult ensure_run(const Env& e, const RunSpec& spec) {
  const Corpus& c = corpus(e);
  const TrainConfig cfg = run_config(e, spec);
  const fs::path dir = e.work / "runs" / spec.name;
  const std::string sig = run_signature(e, cfg);
  RunResult r;
  r.dir = dir;
  r.cfg = cfg;
  const bool cached = !e.fresh && fs::exists(dir / "signature") && read_file(dir / "signature") == sig &&
                      fs::exists(dir / "final.bin") && fs::exists(dir / "curves.csv");
  if (!cached) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    const SearchSpace space = toy(e);
    std::ofstream curves(dir / "curves.csv");
    curves << "epoch,step,child,config,madds,accuracy,loss\n" << std::setprecision(9);
    TrainHooks hooks;
    hooks.on_epoch = [&](long long epoch, const TrainState& st) {
      for (const auto& [role, child] :
           {std::pair{"smallest", smallest_config(space)}, std::pair{"biggest", biggest_config(space)}}) {
        const EvalResult ev = calibrated_accuracy(st.supernet, child, c.m, c.train, c.test, kCurveCalibBatches,
                                                  cfg.batch_size, cfg.activation);
        curves << epoch << ',' << st.step << ',' << role << ',' << to_string(child) << ','
               << count_flops(space, child).total_madds << ',' << ev.accuracy << ',' << ev.loss << '\n';
      }
      curves.flush();
    };
    const auto t0 = Clock::now();
    std::cerr << "[acceptance] training " << spec.name << " ..." << std::endl;
    train(space, c.m, cfg, dir, std::nullopt, hooks);
    r.train_seconds = seconds_since(t0);
    curves.close();
    write_file(dir / "seconds", fmt(r.train_seconds, 6));
    write_file(dir / "signature", sig);
  } else {
    r.train_seconds = std::stod(read_file(dir / "seconds"));
  }
  r.supernet = from_checkpoint(load_checkpoint(dir / "final.bin"), toy(e)).supernet;
  r.curves = read_curves(dir / "curves.csv");
  return r;
}

EvalResult final_accuracy(const Env& e, const RunResult& r, const ChildConfig& child) {
  const Corpus& c = corpus(e);
  return calibrated_accuracy(r.supernet, child, c.m, c.train, c.test, kCalibBatches, r.cfg.batch_size,
                             r.cfg.activation);
}

std::string oracle_key(const SelectionConfig& sc) {
  return std::to_string(sc.calib_batches) + "x" + std::to_string(sc.calib_batch_size) + "/" +
         std::to_string(sc.eval_examples);
}

// Oracle scores memoised in memory and on disk (one CSV per table name).
class OracleTable {
 public:
  OracleTable(const Env& e, const std::string& name, const std::string& signature, AccuracyOracle inner)
      : path_(e.work / "oracle" / (name + ".csv")), sig_(signature), inner_(std::move(inner)) {
    if (!e.fresh && fs::exists(path_)) {
      std::ifstream in(path_);
      std::string line;
      std::getline(in, line);
      if (line == "# " + sig_) {
        while (std::getline(in, line)) {
          const auto comma = line.find(',');
          cache_[line.substr(0, comma)] = std::stod(line.substr(comma + 1));
        }
      }
    }
  }
  double operator()(const ChildConfig& cfg) {
    const std::string key = to_string(cfg);
    {
      std::lock_guard<std::mutex> lk(mu_);
      auto it = cache_.find(key);
      if (it != cache_.end()) return it->second;
    }
    const double v = inner_(cfg);
    std::lock_guard<std::mutex> lk(mu_);
    cache_[key] = v;
    dirty_ = true;
    return v;
  }
  void save() {
    if (!dirty_) return;
    std::ostringstream o;
    o << "# " << sig_ << "\n" << std::setprecision(17);
    for (const auto& [k, v] : cache_) o << k << ',' << v << "\n";
    write_file(path_, o.str());
    dirty_ = false;
  }
  std::size_t size() const { return cache_.size(); }

 private:
  fs::path path_;
  std::string sig_;
  AccuracyOracle inner_;
  std::map<std::string, double> cache_;
  std::mutex mu_;
  bool dirty_ = false;
};

// ---------------------------------------------------------------------------

Outcome c01(const Env& e) {
  const auto t0 = Clock::now();
  const SearchSpace space = toy(e);
  SupernetParams sp = init_supernet(space, 101);
  std::mt19937_64 rng(101);
  oracle::perturb_bn(sp, rng);
  float worst = 0.0f;
  const int pairs = 60;
  for (int i = 0; i < pairs; ++i) {
    const ChildConfig cfg = sample_child(space, 9000 + static_cast<std::uint64_t>(i));
    const Tensor x = oracle::random_tensor({4, 3, cfg.resolution, cfg.resolution}, rng);
    worst = std::max(worst, oracle::mask_slice_gap(sp, cfg, x, oracle::random_child_stats(sp, cfg, rng)));
    const Tensor a = child_forward({&sp, cfg, ExecMode::kMasked}, x, {});
    const Tensor b = child_forward({&sp, cfg, ExecMode::kSliced}, x, {});
    worst = std::max(worst, max_abs_diff(a, b));
  }
  const double s = seconds_since(t0);
  return {worst < 1e-4f && s < 120.0, "over " + std::to_string(pairs) +
                                          " (config, batch) pairs: worst |diff| " + fmt(worst) + " (< 1e-4), " +
                                          fmt(s, 3) + " s (< 120 s)"};
}

Outcome c02(const Env& e) {
  const auto t0 = Clock::now();
  const SearchSpace space = toy(e);
  const SupernetParams sp = init_supernet(space, 202);
  std::mt19937_64 rng(202);
  ForwardOptions ablated;
  ablated.ablate_residual_branches = true;
  int identical = 0;
  const int children = 20;
  for (int i = 0; i < children; ++i) {
    const ChildConfig cfg = sample_child(space, 7000 + static_cast<std::uint64_t>(i));
    const Tensor x = oracle::random_tensor({3, 3, cfg.resolution, cfg.resolution}, rng);
    bool same = true;
    for (auto mode : {ExecMode::kMasked, ExecMode::kSliced})
      same = same && child_forward({&sp, cfg, mode}, x, {}) == child_forward({&sp, cfg, mode}, x, ablated);
    identical += same;
  }
  const double s = seconds_since(t0);
  return {identical == children && s < 60.0, "zero-gamma init: " + std::to_string(identical) + "/" +
                                                 std::to_string(children) +
                                                 " children bit-identical to the branch-ablated forward, " +
                                                 fmt(s, 3) + " s (< 60 s)"};
}

// Central difference of a scalar loss in double against its analytic gradient.
double loss_grad_gap(const Tensor& logits, const std::function<LossResult(const Tensor&)>& f) {
  const LossResult base = f(logits);
  double worst = 0.0;
  for (std::size_t i = 0; i < logits.numel(); ++i) {
    Tensor hi = logits, lo = logits;
    const float h = 1e-2f;
    hi.data[i] += h;
    lo.data[i] -= h;
    const double num = (f(hi).loss - f(lo).loss) / (static_cast<double>(hi.data[i]) - lo.data[i]);
    const double ana = base.grad[i];
    const double den = std::max({std::fabs(num), std::fabs(ana), 1e-3});
    worst = std::max(worst, std::fabs(num - ana) / den);
  }
  return worst;
}

Outcome c03(const Env&) {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_case;
  std::set<std::string> kinds;
  int cases = 0;
  for (const auto& c : oracle::op_cases(303)) {
    const auto g = oracle::grad_check(c.inputs, c.f, c.ref, 304);
    if (g.probes == 0) return {false, c.name + " ran no probes"};
    ++cases;
    kinds.insert(c.name.substr(0, c.name.find(' ')));
    if (g.max_rel_err > worst) {
      worst = g.max_rel_err;
      worst_case = c.name;
    }
  }
  std::mt19937_64 rng(305);
  const Tensor logits = oracle::random_tensor({4, 6}, rng, 2.0);
  const std::vector<int> labels = {0, 3, 5, 2};
  const Tensor teacher = softmax(oracle::random_tensor({4, 6}, rng, 2.0));
  const double xent = loss_grad_gap(logits, [&](const Tensor& z) { return softmax_xent(z, labels, 0.1); });
  const double soft = loss_grad_gap(logits, [&](const Tensor& z) { return soft_target_xent(z, teacher); });
  for (auto [name, v] : {std::pair{"softmax_xent", xent}, std::pair{"soft_target_xent", soft}})
    if (v > worst) {
      worst = v;
      worst_case = name;
    }
  const double s = seconds_since(t0);
  return {worst < 1e-3 && s < 120.0, std::to_string(cases) + " op cases over " + std::to_string(kinds.size()) +
                                         " op kinds plus both losses: worst relative error " + fmt(worst) +
                                         " (" + worst_case + ", < 1e-3), " + fmt(s, 3) + " s (< 120 s)"};
}

Outcome c04(const Env& e) {
  const Corpus& c = corpus(e);
  std::vector<long long> idx(8);
  for (int i = 0; i < 8; ++i) idx[static_cast<std::size_t>(i)] = i;
  const ImageBatch b = gather(c.m, c.train, idx);
  double worst = 0.0;
  int nonzero = 0;
  for (std::uint64_t seed : {401, 402}) {
    const auto gap = oracle::aggregation_gap(toy(e), b, seed);
    worst = std::max(worst, gap.worst_rel);
    nonzero += gap.nonzero;
  }
  return {worst < 1e-5 && nonzero > 1000, "aggregated vs independent child gradients: worst elementwise relative "
                                          "error " + fmt(worst) + " (< 1e-5) over " + std::to_string(nonzero) +
                                          " nonzero entries"};
}

Outcome c05(const Env& e) {
  int mismatches = 0;
  std::string notes;
  // Reference constants at a reference epoch size, then the desk recipe.
  TrainConfig ref;
  ref.lr_initial = 0.256;
  ref.lr_decay_factor = 0.97;
  ref.lr_decay_interval_epochs = 2.4;
  ref.lr_floor_fraction = 0.05;
  const TrainConfig desk = load_train_config(e.src / "configs/train_desk.yaml");
  const long long desk_spe = corpus(e).m.splits.at("train").count / desk.batch_size;
  struct Case {
    TrainConfig cfg;
    long long spe, total;
  };
  const std::vector<Case> cases = {{ref, 1000, 360 * 1000}, {desk, desk_spe, 30 * desk_spe}};
  bool floors_exact = true;
  for (const auto& cs : cases) {
    const LrSchedule s = make_schedule(cs.cfg, cs.spe, cs.total);
    const long long interval = std::llround(cs.cfg.lr_decay_interval_epochs * cs.spe);
    const long long warmup = std::llround(cs.cfg.warmup_fraction * cs.total);
    std::mt19937_64 rng(505);
    double lo = 1e9;
    for (int i = 0; i < 1000; ++i) {
      const long long step = i < 500 ? i * (cs.total / 500) : static_cast<long long>(rng() % cs.total);
      const double want = oracle::closed_form_lr(cs.cfg.lr_initial, cs.cfg.lr_decay_factor, interval, warmup,
                                                 cs.cfg.lr_floor_fraction, true, step);
      mismatches += lr_at(s, step) != want;
      if (step >= warmup) lo = std::min(lo, lr_at(s, step));
    }
    floors_exact = floors_exact && lo == cs.cfg.lr_floor_fraction * cs.cfg.lr_initial &&
                   lr_at(s, cs.total - 1) == cs.cfg.lr_floor_fraction * cs.cfg.lr_initial;
  }
  const LrSchedule r = make_schedule(ref, 1000, 360 * 1000);
  const bool reference = lr_at(r, r.warmup) == 0.256 && lr_at(r, 360 * 1000 - 1) == 0.0128 && r.interval == 2400;
  const bool desk_same_shape = desk.lr_decay_factor == 0.97 && desk.lr_floor_fraction == 0.05;
  return {mismatches == 0 && floors_exact && reference && desk_same_shape,
          "2000 probes (reference 0.256/0.97/2.4 epochs and desk recipe): " + std::to_string(mismatches) +
              " mismatches vs closed form; floor == 5% of initial: " + (floors_exact ? "yes" : "no") +
              "; reference floor 0.0128 exact: " + (reference ? "yes" : "no")};
}

Outcome c06(const Env& e) {
  const SearchSpace t1 = table1(e);
  const long long xl = count_flops(t1, parse_config(kXl)).total_madds;
  const double rel = std::fabs(static_cast<double>(xl) - 1040e6) / 1040e6;
  const bool xl_ok = rel <= 0.08;

  const SearchSpace space = toy(e);
  const SupernetParams sp = init_supernet(space, 606);
  int layers = 0, mismatched = 0;
  for (std::uint64_t seed = 600; seed < 610; ++seed) {
    const ChildConfig cfg = sample_child(space, seed);
    const auto brute = oracle::brute_force_madds(sp, cfg);
    const auto rep = count_flops(space, cfg);
    mismatched += brute.size() != rep.per_layer.size();
    for (const auto& l : rep.per_layer) {
      ++layers;
      mismatched += !brute.count(l.layer) || brute.at(l.layer) != l.madds;
    }
  }
  return {xl_ok && mismatched == 0,
          std::string("large-model analogue ") + fmt(xl / 1e6, 6) + " MMAdds vs 1040 +-8% (off by " + pct(rel) +
              (xl_ok ? ")" : ", FAIL)") + "; brute-force per-layer counts on 10 configs: " +
              std::to_string(layers - mismatched) + "/" + std::to_string(layers) + " exact"};
}

BigInt closed_form_cardinality(const SearchSpace& s) {
  auto choices = [&](IntRange r) { return (r.hi - r.lo) / s.channel_step + 1; };
  BigInt n = static_cast<long long>(s.resolutions.size());
  n *= choices(s.stem.channels);
  n *= choices(s.head.channels);
  for (const auto& st : s.stages) {
    const BigInt per_layer = static_cast<long long>(choices(st.channels)) * static_cast<long long>(st.kernels.size());
    BigInt sum = 0, term = 1;
    for (int d = 1; d <= st.depth.hi; ++d) {
      term *= per_layer;
      if (d >= st.depth.lo) sum += term;
    }
    n *= sum;
  }
  return n;
}

Outcome c07(const Env& e) {
  const SearchSpace t1 = table1(e);
  const BigInt big = space_cardinality(t1);
  const BigInt derived = closed_form_cardinality(t1);
  long long enumerated = 0;
  oracle::enumerate_configs(toy(e), [&](const ChildConfig&) { ++enumerated; });
  const BigInt small = space_cardinality(toy(e));
  const bool ok = big > BigInt(1000000000000LL) && big == derived && small == enumerated;
  return {ok, "table-1 space: " + big.str() + " children (> 1e12; closed form " + derived.str() +
                  "); toy space: " + small.str() + " vs enumeration " + std::to_string(enumerated)};
}

struct Dilemma {
  double gap = 0.0;  // small final - small at the big child's best epoch
  long long big_best_epoch = 0, last_epoch = 0;
};

Dilemma dilemma(const std::vector<CurvePoint>& curves) {
  std::map<long long, double> small, big;
  for (const auto& p : curves) (p.child == "smallest" ? small : big)[p.epoch] = p.accuracy;
  Dilemma d;
  double best = -1.0;
  for (const auto& [epoch, acc] : big)
    if (acc > best) {
      best = acc;
      d.big_best_epoch = epoch;
    }
  d.last_epoch = small.rbegin()->first;
  d.gap = small.rbegin()->second - small.at(d.big_best_epoch);
  return d;
}

Outcome c08(const Env& e) {
  const SearchSpace space = toy(e);
  const Corpus& c = corpus(e);
  const RunResult main = ensure_run(e, desk_runs()[1]);
  const RunResult plain = ensure_run(e, desk_runs()[4]);
  const double chance = 1.0 / c.m.num_classes;

  const EvalResult small = final_accuracy(e, main, smallest_config(space));
  const EvalResult big = final_accuracy(e, main, biggest_config(space));
  const bool a = big.accuracy >= small.accuracy;
  const bool b = small.accuracy >= 5 * chance && big.accuracy >= 5 * chance;

  // Pareto front of the coarse grid under the training-set selection metric,
  // then checked on the held-out split.
  SelectionConfig sc;
  sc.grid = default_grid(space);
  sc.calib_batches = 4;
  sc.eval_examples = c.m.splits.at("train").count;
  OracleTable table(e, "c08_grid", run_signature(e, main.cfg) + "/" + oracle_key(sc),
                    supernet_oracle(main.supernet, c.m, c.train, sc, main.cfg.activation));
  const auto coarse = coarse_phase(space, sc.grid, std::ref(table));
  table.save();
  const auto front = pareto_front(coarse);
  std::vector<double> held_out;
  for (const auto& f : front) held_out.push_back(final_accuracy(e, main, f.config).accuracy);
  int ordered = 0;
  for (std::size_t i = 1; i < held_out.size(); ++i) ordered += held_out[i] >= held_out[i - 1];
  const int pairs = static_cast<int>(held_out.size()) - 1;
  const bool cc = pairs > 0 && ordered >= 0.8 * pairs;

  const Dilemma with_floor = dilemma(main.curves);
  const Dilemma without = dilemma(plain.curves);
  const bool d = without.gap >= 0.01 && with_floor.gap < 0.01;

  std::ostringstream o;
  o << "(a) biggest " << pct(big.accuracy) << " >= smallest " << pct(small.accuracy) << (a ? "" : " FAIL")
    << "; (b) both >= " << pct(5 * chance) << (b ? "" : " FAIL") << "; (c) held-out accuracy non-decreasing in "
    << ordered << "/" << pairs << " adjacent front pairs (>= 80%)" << (cc ? "" : " FAIL")
    << "; (d) small-child gain after the big child's best epoch: " << pct(without.gap) << " without floor (best epoch "
    << without.big_best_epoch << "/" << without.last_epoch << "), " << pct(with_floor.gap) << " with floor (best epoch "
    << with_floor.big_best_epoch << "/" << with_floor.last_epoch << ")" << (d ? "" : " FAIL")
    << "; training " << fmt(main.train_seconds / 60, 3) << " min";
  return {a && b && cc && d, o.str()};
}

Outcome c09(const Env& e) {
  const SearchSpace toy_space = toy(e);
  const SearchSpace sub = load_space(e.src / "configs/sub_space.yaml");
  const Corpus& c = corpus(e);
  const RunResult main = ensure_run(e, desk_runs()[1]);

  SelectionConfig sc;
  sc.grid = default_grid(sub);
  sc.calib_batches = 2;
  sc.calib_batch_size = 128;
  sc.eval_examples = 1024;
  sc.n_candidates = 64;
  sc.seed = 9;
  OracleTable table(e, "c09_sub", run_signature(e, main.cfg) + "/" + oracle_key(sc) + "/" + hex(fnv1a(canonical_text(sub))),
                    supernet_oracle(main.supernet, c.m, c.train, sc, main.cfg.activation));
  const AccuracyOracle oracle = std::ref(table);

  std::vector<std::pair<long long, ChildConfig>> all;
  oracle::enumerate_configs(sub, [&](const ChildConfig& cfg) {
    require_valid(toy_space, cfg);
    all.emplace_back(count_flops(sub, cfg).total_madds, cfg);
  });
  const auto t0 = Clock::now();
  std::vector<double> acc(all.size());
  for (std::size_t i = 0; i < all.size(); ++i) acc[i] = oracle(all[i].second);
  table.save();
  const double exhaustive_s = seconds_since(t0);

  std::vector<long long> costs;
  for (const auto& [m, cfg] : all) costs.push_back(m);
  std::sort(costs.begin(), costs.end());
  std::ostringstream o;
  bool ok = all.size() <= 4096;
  o << all.size() << " configs";
  for (double q : {0.25, 0.5, 0.75}) {
    const long long budget = costs[static_cast<std::size_t>(q * (costs.size() - 1))];
    double best = -1.0;
    for (std::size_t i = 0; i < all.size(); ++i)
      if (all[i].first <= budget) best = std::max(best, acc[i]);
    const SelectionResult r = coarse_to_fine(sub, budget, sc, oracle);
    const double gap = best - r.best.accuracy;
    const bool pass = r.best.madds <= budget && gap <= 0.005;
    ok = ok && pass;
    o << "; budget " << budget << ": selected " << pct(r.best.accuracy) << " vs exhaustive " << pct(best)
      << " (gap " << pct(gap) << ", <= 0.50%)" << (pass ? "" : " FAIL");
  }
  table.save();
  o << "; oracle table " << table.size() << " entries, exhaustive pass " << fmt(exhaustive_s, 3) << " s";
  return {ok, o.str()};
}

Outcome c10(const Env& e) {
  const SearchSpace space = toy(e);
  std::ostringstream o;
  double lo = 1.0, hi = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const RunResult r = ensure_run(e, desk_runs()[i]);
    const double s = final_accuracy(e, r, smallest_config(space)).accuracy;
    const double b = final_accuracy(e, r, biggest_config(space)).accuracy;
    const double avg = 0.5 * (s + b);
    lo = std::min(lo, avg);
    hi = std::max(hi, avg);
    o << (i ? ", " : "") << desk_runs()[i].name << " " << pct(avg) << " (" << pct(s) << "/" << pct(b) << ")";
  }
  const double band = hi - lo;
  return {band <= 0.006, "average of smallest/biggest per floor: " + o.str() + "; band " + pct(band) +
                             " (<= 0.60%)"};
}

Outcome c11(const Env& e) {
  const Corpus& c = corpus(e);
  const SearchSpace space = toy(e);
  TrainConfig cfg = load_train_config(e.src / "configs/train_desk.yaml");
  cfg.batch_size = 32;
  cfg.max_steps = 16;
  cfg.train_limit = 512;
  cfg.checkpoint_every = 8;
  const fs::path base = e.work / "c11";
  fs::remove_all(base);
  train(space, c.m, cfg, base / "a");
  train(space, c.m, cfg, base / "b");
  const std::string fa = read_file(base / "a/final.bin");
  const bool rerun = fa == read_file(base / "b/final.bin");

  train(space, c.m, cfg, base / "resumed", load_checkpoint(base / "a/ckpt-8.bin"));
  const bool resume = fa == read_file(base / "resumed/final.bin");

  const bool supernet_rt = serialize_checkpoint(deserialize_checkpoint(fa)) == fa;
  const SupernetParams sp = from_checkpoint(deserialize_checkpoint(fa), space).supernet;
  const CalibratedChild child =
      calibrate(sp, sample_child(space, 11), split_source(c.m, c.train, 64), 2, c.m.name, cfg.activation);
  const std::string cb = serialize_checkpoint(child_to_checkpoint(child, space));
  save_checkpoint(deserialize_checkpoint(cb), base / "child.bin");
  const bool child_rt = read_file(base / "child.bin") == cb &&
                        serialize_checkpoint(child_to_checkpoint(
                            child_from_checkpoint(load_checkpoint(base / "child.bin"), space), space)) == cb;
  const bool ok = rerun && resume && supernet_rt && child_rt;
  auto yn = [](bool v) { return v ? "identical" : "DIFFERENT"; };
  return {ok, std::string("fixed-seed rerun final checkpoint ") + yn(rerun) + "; resume from step 8 " + yn(resume) +
                  "; supernet round trip " + yn(supernet_rt) + "; calibrated child round trip " + yn(child_rt) +
                  " (" + std::to_string(fa.size()) + " bytes)"};
}

struct Criterion {
  std::string id;
  std::string title;
  std::function<Outcome(const Env&)> run;
};

std::uint64_t hash_library() { return fnv1a(read_file(ONESTAGE_LIBRARY_FILE)); }

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Acceptance criteria for the onestage supernet toolkit."};
  std::vector<std::string> only;
  std::string work = (fs::temp_directory_path() / "onestage_acceptance").string();
  std::string src = ONESTAGE_SOURCE_DIR;
  bool prepare = false, fresh = false;
  app.add_option("--only", only, "Run only these criteria, e.g. --only c08 (repeatable)");
  app.add_option("--work", work, "Cache directory for the corpus, training runs and oracle tables");
  app.add_option("--source", src, "Repository root holding configs/");
  app.add_flag("--prepare", prepare, "Train the desk-scale runs and exit");
  app.add_flag("--fresh", fresh, "Ignore cached runs and oracle tables");
  CLI11_PARSE(app, argc, argv);

  Env env{src, work, fresh, hash_library()};
  fs::create_directories(env.work);

  if (prepare) {
    for (const auto& r : desk_runs()) {
      const RunResult res = ensure_run(env, r);
      std::cout << "run " << r.name << " ready (" << fmt(res.train_seconds / 60, 3) << " min of training)\n";
    }
    return 0;
  }

  const std::vector<Criterion> all = {
      {"c01", "mask/slice equivalence", c01},
      {"c02", "zero-gamma identity", c02},
      {"c03", "gradient checks", c03},
      {"c04", "sandwich aggregation", c04},
      {"c05", "learning-rate schedule", c05},
      {"c06", "MAdds counter", c06},
      {"c07", "cardinality", c07},
      {"c08", "desk-scale training outcome", c08},
      {"c09", "coarse-to-fine vs exhaustive", c09},
      {"c10", "constant-ending sweep", c10},
      {"c11", "determinism and persistence", c11},
  };
  int failed = 0, ran = 0;
  for (const auto& c : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    ++ran;
    Outcome out;
    const auto t0 = Clock::now();
    try {
      out = c.run(env);
    } catch (const std::exception& ex) {
      out = {false, std::string("threw: ") + ex.what()};
    }
    failed += !out.pass;
    std::cout << c.id << " " << (out.pass ? "PASS" : "FAIL") << "  " << c.title << ": " << out.detail << "  ["
              << fmt(seconds_since(t0), 3) << " s]" << std::endl;
  }
  if (ran == 0) {
    std::cerr << "no criterion matched --only\n";
    return 2;
  }
  return failed == 0 ? 0 : 1;
}
