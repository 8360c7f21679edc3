#include "onestage/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "onestage/errors.hpp"

namespace onestage {

namespace {

constexpr std::uint64_t kResolutionSlot = (1u << 20) - 1;
constexpr std::uint64_t kAugmentSlot = (1u << 20) - 2;
constexpr std::uint64_t kDropoutSlot = (1u << 20) - 3;

std::uint64_t seeded(std::uint64_t global_seed, long long step, std::uint64_t slot) {
  return mix64(global_seed ^ child_seed(step, slot));
}

// Field table shared by the YAML reader, the override path and the writer.
struct Field {
  const char* key;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <typename T>
T parse_scalar(const std::string& key, const std::string& v) {
  try {
    return YAML::Load(v).as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError("bad value '" + v + "' for train config key '" + key + "'");
  }
}

std::string fmt(double v) {
  std::ostringstream o;
  o << std::setprecision(17) << v;
  return o.str();
}

#define NUM_FIELD(name, type)                                                                \
  Field {                                                                                     \
    #name, [](TrainConfig& c, const std::string& v) { c.name = parse_scalar<type>(#name, v); }, \
        [](const TrainConfig& c) { return fmt(static_cast<double>(c.name)); }                 \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      NUM_FIELD(n_random, int),
      NUM_FIELD(batch_size, int),
      NUM_FIELD(epochs, double),
      NUM_FIELD(max_steps, long long),
      NUM_FIELD(lr_initial, double),
      NUM_FIELD(lr_decay_factor, double),
      NUM_FIELD(lr_decay_interval_epochs, double),
      NUM_FIELD(lr_floor_fraction, double),
      {"lr_floor", [](TrainConfig& c, const std::string& v) { c.lr_floor = parse_scalar<bool>("lr_floor", v); },
       [](const TrainConfig& c) { return std::string(c.lr_floor ? "true" : "false"); }},
      NUM_FIELD(warmup_fraction, double),
      NUM_FIELD(weight_decay, double),
      NUM_FIELD(dropout_rate, double),
      NUM_FIELD(label_smoothing, double),
      {"rmsprop_rho", [](TrainConfig& c, const std::string& v) { c.optimizer.rho = parse_scalar<double>("rmsprop_rho", v); },
       [](const TrainConfig& c) { return fmt(c.optimizer.rho); }},
      {"rmsprop_momentum",
       [](TrainConfig& c, const std::string& v) { c.optimizer.momentum = parse_scalar<double>("rmsprop_momentum", v); },
       [](const TrainConfig& c) { return fmt(c.optimizer.momentum); }},
      {"rmsprop_eps", [](TrainConfig& c, const std::string& v) { c.optimizer.eps = parse_scalar<double>("rmsprop_eps", v); },
       [](const TrainConfig& c) { return fmt(c.optimizer.eps); }},
      {"resolution_policy",
       [](TrainConfig& c, const std::string& v) {
         if (v == "interior") c.resolution_policy = ResolutionPolicy::kInterior;
         else if (v == "all") c.resolution_policy = ResolutionPolicy::kAll;
         else throw ConfigError("resolution_policy must be 'interior' or 'all', got '" + v + "'");
       },
       [](const TrainConfig& c) {
         return std::string(c.resolution_policy == ResolutionPolicy::kInterior ? "interior" : "all");
       }},
      {"teacher_mode",
       [](TrainConfig& c, const std::string& v) {
         if (v == "per_resolution") c.teacher_mode = TeacherMode::kPerResolution;
         else if (v == "max_resolution") c.teacher_mode = TeacherMode::kMaxResolution;
         else throw ConfigError("teacher_mode must be 'per_resolution' or 'max_resolution', got '" + v + "'");
       },
       [](const TrainConfig& c) {
         return std::string(c.teacher_mode == TeacherMode::kPerResolution ? "per_resolution" : "max_resolution");
       }},
      {"augment", [](TrainConfig& c, const std::string& v) { c.augment = parse_scalar<bool>("augment", v); },
       [](const TrainConfig& c) { return std::string(c.augment ? "true" : "false"); }},
      {"activation",
       [](TrainConfig& c, const std::string& v) {
         if (v == "swish") c.activation = Activation::kSwish;
         else if (v == "relu") c.activation = Activation::kRelu;
         else throw ConfigError("activation must be 'swish' or 'relu', got '" + v + "'");
       },
       [](const TrainConfig& c) { return std::string(c.activation == Activation::kSwish ? "swish" : "relu"); }},
      {"global_seed",
       [](TrainConfig& c, const std::string& v) { c.global_seed = parse_scalar<std::uint64_t>("global_seed", v); },
       [](const TrainConfig& c) { return std::to_string(c.global_seed); }},
      {"train_limit", [](TrainConfig& c, const std::string& v) { c.train_limit = parse_scalar<long long>("train_limit", v); },
       [](const TrainConfig& c) { return std::to_string(c.train_limit); }},
      {"checkpoint_every",
       [](TrainConfig& c, const std::string& v) { c.checkpoint_every = parse_scalar<long long>("checkpoint_every", v); },
       [](const TrainConfig& c) { return std::to_string(c.checkpoint_every); }},
      NUM_FIELD(prefetch, int),
  };
  return f;
}

#undef NUM_FIELD

}  // namespace

void TrainConfig::validate() const {
  auto bad = [](const std::string& field, const std::string& msg) {
    throw ConfigError("train config: " + field + " " + msg);
  };
  if (n_random < 0) bad("n_random", "must be >= 0");
  if (batch_size < 1) bad("batch_size", "must be >= 1");
  if (max_steps <= 0 && !(epochs > 0)) bad("epochs", "must be positive");
  if (!(lr_initial > 0)) bad("lr_initial", "must be positive");
  if (!(lr_decay_factor > 0 && lr_decay_factor <= 1)) bad("lr_decay_factor", "must be in (0, 1]");
  if (!(lr_decay_interval_epochs > 0)) bad("lr_decay_interval_epochs", "must be positive");
  if (!(lr_floor_fraction > 0 && lr_floor_fraction < 1)) bad("lr_floor_fraction", "must be in (0, 1)");
  if (!(warmup_fraction >= 0 && warmup_fraction < 1)) bad("warmup_fraction", "must be in [0, 1)");
  if (!(weight_decay >= 0)) bad("weight_decay", "must be >= 0");
  if (!(dropout_rate >= 0 && dropout_rate < 1)) bad("dropout_rate", "must be in [0, 1)");
  if (!(label_smoothing >= 0 && label_smoothing < 1)) bad("label_smoothing", "must be in [0, 1)");
  if (prefetch < 0) bad("prefetch", "must be >= 0");
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open train config: " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  return parse_train_config(text.str(), path.string());
}

TrainConfig parse_train_config(const std::string& text, const std::string& source) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(source + ":" + std::to_string(e.mark.line + 1) + ":" + std::to_string(e.mark.column + 1) +
                      ": " + e.msg);
  }
  TrainConfig cfg;
  if (!root || root.IsNull()) return cfg;
  if (!root.IsMap()) throw ConfigError(source + ": train config must be a mapping");
  for (const auto& kv : root) {
    const std::string key = kv.first.as<std::string>();
    try {
      apply_override(cfg, key, kv.second.as<std::string>());
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(kv.first.Mark().line + 1) + ":" +
                        std::to_string(kv.first.Mark().column + 1) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

void apply_override(TrainConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : fields())
    if (key == f.key) {
      f.set(cfg, value);
      return;
    }
  throw ConfigError("unknown train config key '" + key + "'");
}

std::string to_yaml(const TrainConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + ": " + f.get(cfg) + "\n";
  return out;
}

LrSchedule make_schedule(const TrainConfig& cfg, long long steps_per_epoch, long long total_steps) {
  LrSchedule s;
  s.eta0 = cfg.lr_initial;
  s.gamma = cfg.lr_decay_factor;
  s.interval = std::max<long long>(1, std::llround(cfg.lr_decay_interval_epochs * steps_per_epoch));
  s.warmup = static_cast<long long>(std::llround(cfg.warmup_fraction * total_steps));
  s.eta_min = cfg.lr_floor_fraction * cfg.lr_initial;
  s.floor = cfg.lr_floor;
  return s;
}

double lr_at(const LrSchedule& s, long long step) {
  if (step < 0) throw PreconditionError("lr_at: negative step");
  if (step < s.warmup) return s.eta0 * static_cast<double>(step) / static_cast<double>(s.warmup);
  const long long k = (step - s.warmup) / s.interval;
  const double lr = s.eta0 * std::pow(s.gamma, static_cast<double>(k));
  return s.floor ? std::max(lr, s.eta_min) : lr;
}

std::uint64_t child_seed(long long step, std::uint64_t layer) {
  return mix64((static_cast<std::uint64_t>(step) << 20) | (layer & ((1u << 20) - 1)));
}

std::map<int, Tensor> make_multires_batch(const Tensor& patches, const std::vector<int>& resolutions) {
  std::map<int, Tensor> out;
  for (int r : resolutions) {
    if (r <= 0) throw PreconditionError("target resolution must be positive");
    if (!out.count(r)) out.emplace(r, resize_bicubic(patches, r));
  }
  return out;
}

std::vector<SandwichChild> sandwich_children(const SearchSpace& space, long long step, int n_random,
                                             std::uint64_t global_seed) {
  std::vector<SandwichChild> out;
  out.push_back({ChildRole::kSmallest, smallest_config(space)});
  for (int j = 0; j < n_random; ++j)
    out.push_back({ChildRole::kRandom,
                   sample_child(space, seeded(global_seed, step, static_cast<std::uint64_t>(j)))});
  out.push_back({ChildRole::kBiggest, biggest_config(space)});
  return out;
}

std::vector<int> assign_resolutions(const std::vector<SandwichChild>& children,
                                    const std::vector<int>& resolutions, ResolutionPolicy policy,
                                    std::uint64_t seed) {
  if (resolutions.empty()) throw PreconditionError("empty resolution set");
  std::vector<int> sorted = resolutions;
  std::sort(sorted.begin(), sorted.end());
  std::vector<int> pool = sorted;
  if (policy == ResolutionPolicy::kInterior && sorted.size() > 2)
    pool = std::vector<int>(sorted.begin() + 1, sorted.end() - 1);
  std::vector<int> out;
  for (std::size_t i = 0; i < children.size(); ++i) {
    switch (children[i].role) {
      case ChildRole::kSmallest: out.push_back(sorted.front()); break;
      case ChildRole::kBiggest: out.push_back(sorted.back()); break;
      case ChildRole::kRandom: {
        std::mt19937_64 rng(mix64(seed + i));
        out.push_back(pool[static_cast<std::size_t>(rng() % pool.size())]);
        break;
      }
    }
  }
  return out;
}

LossResult distill_loss(const Tensor& teacher_logits, const Tensor& student_logits) {
  if (teacher_logits.shape != student_logits.shape)
    throw DimensionError("distill_loss: teacher " + shape_str(teacher_logits.shape) + " vs student " +
                         shape_str(student_logits.shape));
  return soft_target_xent(student_logits, softmax(teacher_logits));
}

TrainState init_state(const SearchSpace& space, const TrainConfig& cfg) {
  return TrainState{init_supernet(space, cfg.global_seed), RmsProp(cfg.optimizer), 0};
}

StepReport sandwich_step(TrainState& state, const ImageBatch& batch, const TrainConfig& cfg,
                         const LrSchedule& schedule, const StepOptions& opts) {
  SupernetParams& sp = state.supernet;
  const SearchSpace& space = sp.space;
  const long long step = state.step;
  if (batch.images.rank() != 4 || batch.size() != batch.images.dim(0))
    throw DimensionError("sandwich_step: malformed batch");

  auto children = sandwich_children(space, step, cfg.n_random, cfg.global_seed);
  const auto res = assign_resolutions(children, space.resolutions, cfg.resolution_policy,
                                      seeded(cfg.global_seed, step, kResolutionSlot));
  for (std::size_t i = 0; i < children.size(); ++i) children[i].config.resolution = res[i];
  const auto inputs = make_multires_batch(batch.images, res);

  for (auto& [name, p] : sp.params) p.zero_grad();

  StepReport report;
  report.step = step;
  report.lr = lr_at(schedule, step);
  std::vector<ChildReport> rows(children.size());

  auto check = [&](double loss, const ChildConfig& c) {
    if (!std::isfinite(loss))
      throw NumericFault("non-finite loss at step " + std::to_string(step) + " for child " + to_string(c));
  };

  // Biggest child: ground truth, dropout, the only regularised pass.
  const SandwichChild& big = children.back();
  Tensor big_logits;
  {
    Tape t(true);
    ForwardOptions fo;
    fo.activation = cfg.activation;
    fo.dropout_rate = static_cast<float>(cfg.dropout_rate);
    fo.dropout_seed = seeded(cfg.global_seed, step, kDropoutSlot);
    const VarId x = t.input(inputs.at(big.config.resolution), "input");
    const VarId y = build_child(t, space, sp.params, big.config, ExecMode::kMasked, fo, x);
    big_logits = t.value(y);
    const LossResult l = softmax_xent(big_logits, batch.labels, cfg.label_smoothing);
    check(l.loss, big.config);
    t.backward(y, l.grad);
    rows.back() = {to_string(big.config), big.config.resolution, l.loss, false};
  }

  // Teacher targets, computed without dropout in batch-statistics mode.
  std::map<int, Tensor> teacher;
  auto teacher_at = [&](int r) -> const Tensor& {
    auto it = teacher.find(r);
    if (it != teacher.end()) return it->second;
    if (r == big.config.resolution && cfg.dropout_rate == 0.0) return teacher.emplace(r, big_logits).first->second;
    ChildConfig tc = big.config;
    tc.resolution = r;
    Tape t(false);
    ForwardOptions fo;
    fo.activation = cfg.activation;
    const ParamStore& frozen = sp.params;
    const VarId y = build_child(t, space, frozen, tc, ExecMode::kMasked, fo, t.input(inputs.at(r), "input"));
    return teacher.emplace(r, t.value(y)).first->second;
  };

  for (std::size_t i = 0; i + 1 < children.size(); ++i) {
    const ChildConfig& c = children[i].config;
    const Tensor& target =
        teacher_at(cfg.teacher_mode == TeacherMode::kPerResolution ? c.resolution : big.config.resolution);
    Tape t(true);
    ForwardOptions fo;
    fo.activation = cfg.activation;
    const VarId y = build_child(t, space, sp.params, c, ExecMode::kMasked, fo,
                                t.input(inputs.at(c.resolution), "input"));
    const LossResult l = distill_loss(target, t.value(y));
    check(l.loss, c);
    t.backward(y, l.grad);
    rows[i] = {to_string(c), c.resolution, l.loss, true};
  }

  double sq = 0.0;
  for (const auto& [name, p] : sp.params)
    for (float g : p.grad.data) sq += static_cast<double>(g) * g;
  report.grad_norm = std::sqrt(sq);
  report.children = std::move(rows);
  if (!opts.accumulate_only) {
    state.optimizer.step(sp.params, report.lr, cfg.weight_decay);
    ++state.step;
  }
  return report;
}

Checkpoint to_checkpoint(const TrainState& state, const TrainConfig& cfg) {
  Checkpoint ck;
  ck.space_hash = space_hash(state.supernet.space);
  ck.step = state.step;
  ck.global_seed = cfg.global_seed;
  ck.meta["kind"] = "supernet";
  ck.meta["space"] = space_yaml(state.supernet.space);
  ck.meta["train_config"] = to_yaml(cfg);
  ck.meta["optimizer_steps"] = std::to_string(state.optimizer.steps());
  for (const auto& [name, p] : state.supernet.params) ck.tensors.push_back({name, p.value, p.decay});
  for (const auto& [name, slot] : state.optimizer.slots()) {
    ck.tensors.push_back({"opt.ms/" + name, slot.ms, false});
    ck.tensors.push_back({"opt.mom/" + name, slot.mom, false});
  }
  return ck;
}

TrainState from_checkpoint(const Checkpoint& ck, const SearchSpace& space) {
  if (ck.space_hash != space_hash(space))
    throw ConfigError("checkpoint space hash does not match the space file");
  TrainConfig cfg;
  auto it = ck.meta.find("train_config");
  if (it != ck.meta.end()) {
    const YAML::Node n = YAML::Load(it->second);
    for (const auto& kv : n) apply_override(cfg, kv.first.as<std::string>(), kv.second.as<std::string>());
  }
  TrainState st{init_supernet(space, ck.global_seed), RmsProp(cfg.optimizer), ck.step};
  for (const auto& t : ck.tensors) {
    if (t.name.rfind("opt.", 0) == 0) continue;
    auto p = st.supernet.params.find(t.name);
    if (p == st.supernet.params.end()) throw ConfigError("checkpoint tensor '" + t.name + "' not in supernet");
    if (p->second.value.shape != t.value.shape)
      throw DimensionError("checkpoint tensor '" + t.name + "' has shape " + shape_str(t.value.shape) +
                           ", supernet expects " + shape_str(p->second.value.shape));
    p->second.value = t.value;
    p->second.decay = t.decay;
  }
  for (const auto& t : ck.tensors) {
    if (t.name.rfind("opt.ms/", 0) == 0) st.optimizer.slots()[t.name.substr(7)].ms = t.value;
    if (t.name.rfind("opt.mom/", 0) == 0) st.optimizer.slots()[t.name.substr(8)].mom = t.value;
  }
  auto os = ck.meta.find("optimizer_steps");
  st.optimizer.set_steps(os == ck.meta.end() ? 0 : std::stoll(os->second));
  return st;
}

std::string step_csv_header() { return "step,lr,grad_norm,role,config,resolution,loss,loss_kind\n"; }

std::string step_csv_rows(const StepReport& r) {
  std::ostringstream o;
  o << std::setprecision(9);
  for (std::size_t i = 0; i < r.children.size(); ++i) {
    const ChildReport& c = r.children[i];
    const char* role = i == 0 ? "smallest" : (i + 1 == r.children.size() ? "biggest" : "random");
    o << r.step << ',' << r.lr << ',' << r.grad_norm << ',' << role << ',' << c.config << ','
      << c.resolution << ',' << c.loss << ',' << (c.distill ? "distill" : "ground_truth") << '\n';
  }
  return o.str();
}

TrainResult train(const SearchSpace& space, const DatasetManifest& data, const TrainConfig& cfg,
                  const std::optional<std::filesystem::path>& out_dir, const std::optional<Checkpoint>& resume,
                  const TrainHooks& hooks) {
  cfg.validate();
  require_valid(space, biggest_config(space));
  if (data.source_resolution != space.max_resolution())
    throw ConfigError("dataset resolution " + std::to_string(data.source_resolution) +
                      " differs from the space's maximum resolution " + std::to_string(space.max_resolution()));
  const RawSplit raw = read_split(data, "train");
  const long long n = cfg.train_limit > 0 ? std::min(cfg.train_limit, raw.size()) : raw.size();
  const long long spe = n / cfg.batch_size;
  if (spe < 1) throw ConfigError("training split smaller than one batch");
  const long long total = cfg.max_steps > 0 ? cfg.max_steps : std::llround(cfg.epochs * static_cast<double>(spe));
  const LrSchedule schedule = make_schedule(cfg, spe, total);

  TrainResult result{resume ? from_checkpoint(*resume, space) : init_state(space, cfg), {}, {}};
  TrainState& st = result.state;
  if (resume && resume->global_seed != cfg.global_seed)
    throw ConfigError("resume: checkpoint seed differs from the configured global_seed");

  std::ofstream csv;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    const auto path = *out_dir / "steps.csv";
    const bool append = resume.has_value() && std::filesystem::exists(path);
    csv.open(path, append ? std::ios::app : std::ios::trunc);
    if (!csv) throw IoError("cannot write " + path.string());
    if (!append) csv << step_csv_header();
  }

  // Batch content is a pure function of the step, so resuming needs no
  // stream state.
  long long next_step = st.step;
  long long cached_epoch = -1;
  std::vector<long long> order;
  auto produce = [&]() -> std::optional<ImageBatch> {
    if (next_step >= total) return std::nullopt;
    const long long s = next_step++;
    const long long epoch = s / spe, idx = s % spe;
    if (epoch != cached_epoch) {
      order = BatchStream(data, raw, cfg.batch_size, mix64(cfg.global_seed ^ (0xE90C0000ULL + epoch)), true, n).order();
      cached_epoch = epoch;
    }
    std::vector<long long> ids(order.begin() + idx * cfg.batch_size, order.begin() + (idx + 1) * cfg.batch_size);
    ImageBatch b = gather(data, raw, ids);
    if (cfg.augment) b = augment(b, seeded(cfg.global_seed, s, kAugmentSlot));
    return b;
  };

  auto save = [&](const std::string& file) {
    if (!out_dir) return std::filesystem::path();
    const auto path = *out_dir / file;
    save_checkpoint(to_checkpoint(st, cfg), path);
    return path;
  };

  auto run = [&](auto&& next_batch) {
    while (st.step < total) {
      std::optional<ImageBatch> b = next_batch();
      if (!b) break;
      StepReport rep;
      try {
        rep = sandwich_step(st, *b, cfg, schedule);
      } catch (const NumericFault& e) {
        std::string where = "no checkpoint written";
        if (out_dir) where = "last good checkpoint " + save("last_good.bin").string();
        throw NumericFault(std::string(e.what()) + "; " + where);
      }
      if (csv.is_open()) csv << step_csv_rows(rep);
      if (hooks.on_step) hooks.on_step(rep);
      result.reports.push_back(std::move(rep));
      if (cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0 && st.step < total)
        save("ckpt-" + std::to_string(st.step) + ".bin");
      if (st.step % spe == 0 && hooks.on_epoch) hooks.on_epoch(st.step / spe, st);
    }
  };
  if (cfg.prefetch > 0) {
    Prefetcher<ImageBatch> pf(produce, static_cast<std::size_t>(cfg.prefetch));
    run([&] { return pf.next(); });
  } else {
    run(produce);
  }
  if (csv.is_open()) csv.flush();
  result.final_checkpoint = save("final.bin");
  return result;
}

}  // namespace onestage
