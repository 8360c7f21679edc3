#include "onestage/elastic.hpp"

#include <cmath>
#include <random>

#include "onestage/errors.hpp"

namespace onestage {

namespace {

std::string block_prefix(int stage, int index) {
  return "s" + std::to_string(stage + 1) + ".b" + std::to_string(index);
}

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Parameter he_normal(const Shape& shape, int fan_in, double gain, std::uint64_t seed,
                    const std::string& name) {
  std::mt19937_64 rng(mix64(seed ^ name_hash(name)));
  std::normal_distribution<double> dist(0.0, std::sqrt(gain / fan_in));
  Parameter p;
  p.value = Tensor(shape);
  for (auto& v : p.value.data) v = static_cast<float>(dist(rng));
  p.decay = true;
  return p;
}

Parameter constant_param(int n, float v) {
  Parameter p;
  p.value = Tensor({n}, v);
  p.decay = false;
  return p;
}

// Copies the [0,o) x [0,i) x centered k x k window of a (O, I, K, K) tensor.
Tensor slice4(const Tensor& src, int o, int i, int k) {
  const int I = src.dim(1), K = src.dim(2);
  if (o > src.dim(0) || i > I || k > K || (K - k) % 2) {
    throw DimensionError("cannot slice " + shape_str(src.shape) + " to (" + std::to_string(o) +
                         "," + std::to_string(i) + "," + std::to_string(k) + "," +
                         std::to_string(k) + ")");
  }
  const int off = (K - k) / 2;
  Tensor out({o, i, k, k});
  std::size_t idx = 0;
  for (int a = 0; a < o; ++a)
    for (int b = 0; b < i; ++b)
      for (int r = 0; r < k; ++r)
        for (int c = 0; c < k; ++c)
          out[idx++] = src[((static_cast<std::size_t>(a) * I + b) * K + r + off) * K + c + off];
  return out;
}

Tensor slice2(const Tensor& src, int o, int i) {
  const int I = src.dim(1);
  Tensor out({o, i});
  for (int a = 0; a < o; ++a)
    for (int b = 0; b < i; ++b) out[static_cast<std::size_t>(a) * i + b] =
        src[static_cast<std::size_t>(a) * I + b];
  return out;
}

Tensor slice1(const Tensor& src, int n) {
  return Tensor({n}, std::vector<float>(src.data.begin(), src.data.begin() + n));
}

const Parameter& lookup(const ParamStore& store, const std::string& name) {
  auto it = store.find(name);
  if (it == store.end()) throw StateError("missing parameter '" + name + "'");
  return it->second;
}

std::vector<std::vector<BlockLayout>> layout_by_stage(const SearchSpace& space) {
  std::vector<std::vector<BlockLayout>> out(space.stages.size());
  for (auto& b : supernet_layout(space)) out[static_cast<std::size_t>(b.stage)].push_back(b);
  return out;
}

template <typename Bind>
VarId build(Tape& t, const SearchSpace& space, Bind&& bind, const ChildConfig& cfg,
            ExecMode mode, const ForwardOptions& opts, VarId input) {
  const bool masked = mode == ExecMode::kMasked;
  const auto layout = layout_by_stage(space);

  auto bn = [&](VarId x, const std::string& name) {
    BnOptions bo;
    bo.mode = opts.bn_mode;
    bo.sink = opts.sink;
    bo.key = name;
    if (opts.bn_mode == BnMode::kRunning) {
      if (!opts.bn_stats) throw PreconditionError("running-statistics forward without stats");
      auto it = opts.bn_stats->find(name);
      if (it == opts.bn_stats->end()) throw StateError("no statistics for '" + name + "'");
      bo.running = &it->second;
    }
    return batchnorm(t, x, bind(name + ".gamma"), bind(name + ".beta"), bo, name);
  };
  auto act = [&](VarId x, const std::string& name) {
    return opts.activation == Activation::kSwish ? swish(t, x, name + ".swish")
                                                 : relu(t, x, name + ".relu");
  };
  auto mask = [&](VarId x, int active, const std::string& name) {
    if (!masked || active >= t.value(x).dim(1)) return x;
    return channel_mask(t, x, active, name + ".mask");
  };

  VarId y = conv2d(t, input, bind("stem.conv.w"), space.stem.stride, "stem.conv");
  y = act(mask(bn(y, "stem.bn"), cfg.stem_channels, "stem.bn"), "stem");
  int cur = cfg.stem_channels;

  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    const auto& st = cfg.stages[s];
    for (int l = 0; l < st.depth(); ++l) {
      const BlockLayout& b = layout[s][static_cast<std::size_t>(l)];
      const int c_out = st.layers[static_cast<std::size_t>(l)].channels;
      const int k = st.layers[static_cast<std::size_t>(l)].kernel;
      const int mid = cur * b.expansion;
      const std::string& p = b.prefix;

      VarId skip = stage_transition(t, y, b.pool_skip ? 2 : 1,
                                    b.proj_skip ? bind(p + ".skip.w") : kNoProjection,
                                    p + ".skip");
      if (!masked && !b.proj_skip && t.value(skip).dim(1) != c_out) {
        skip = resize_channels(t, skip, c_out, p + ".skip.resize");
      }

      VarId out = skip;
      if (!opts.ablate_residual_branches) {
        VarId h = y;
        if (b.expansion != 1) {
          h = conv2d(t, h, bind(p + ".expand.w"), 1, p + ".expand");
          h = act(mask(bn(h, p + ".expand_bn"), mid, p + ".expand_bn"), p + ".expand");
        }
        VarId w = bind(p + ".dw.w");
        if (masked && k < b.max_kernel) {
          w = weight_mask(t, w, kernel_ring_mask(t.value(w).shape, k), p + ".dw.ring");
        }
        h = depthwise_conv2d(t, h, w, b.stride, p + ".dw");
        h = act(mask(bn(h, p + ".dw_bn"), mid, p + ".dw_bn"), p + ".dw");
        h = conv2d(t, h, bind(p + ".project.w"), 1, p + ".project");
        h = mask(bn(h, p + ".project_bn"), c_out, p + ".project_bn");
        out = add(t, h, skip, p + ".add");
      }
      y = mask(out, c_out, p + ".out");
      cur = c_out;
    }
  }

  y = conv2d(t, y, bind("head.conv.w"), 1, "head.conv");
  y = act(mask(bn(y, "head.bn"), cfg.head_channels, "head.bn"), "head");
  y = global_avgpool(t, y, "pool");
  if (opts.dropout_rate > 0.0f) y = dropout(t, y, opts.dropout_rate, opts.dropout_seed, "dropout");
  return fully_connected(t, y, bind("classifier.w"), bind("classifier.b"), "classifier");
}

}  // namespace

std::vector<BlockLayout> supernet_layout(const SearchSpace& space) {
  std::vector<BlockLayout> out;
  IntRange prev = space.stem.channels;
  for (std::size_t s = 0; s < space.stages.size(); ++s) {
    const auto& st = space.stages[s];
    for (int l = 0; l < st.depth.hi; ++l) {
      BlockLayout b;
      b.stage = static_cast<int>(s);
      b.index = l;
      b.stride = l == 0 ? st.stride : 1;
      b.expansion = st.expansion;
      b.max_in = l == 0 ? prev.hi : st.channels.hi;
      b.max_out = st.channels.hi;
      b.max_kernel = st.max_kernel();
      b.pool_skip = l == 0 && st.stride == 2;
      b.proj_skip = l == 0 && !(prev == st.channels);
      b.prefix = block_prefix(b.stage, l);
      out.push_back(std::move(b));
    }
    prev = st.channels;
  }
  return out;
}

std::vector<std::string> bn_names(const SearchSpace& space, const ChildConfig& cfg) {
  std::vector<std::string> out{"stem.bn"};
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    for (int l = 0; l < cfg.stages[s].depth(); ++l) {
      const auto p = block_prefix(static_cast<int>(s), l);
      if (space.stages[s].expansion != 1) out.push_back(p + ".expand_bn");
      out.push_back(p + ".dw_bn");
      out.push_back(p + ".project_bn");
    }
  }
  out.push_back("head.bn");
  return out;
}

SupernetParams init_supernet(const SearchSpace& space, std::uint64_t seed) {
  validate_space(space);
  SupernetParams sp;
  sp.space = space;
  auto& P = sp.params;
  auto add_bn = [&](const std::string& name, int c, float gamma) {
    P[name + ".gamma"] = constant_param(c, gamma);
    P[name + ".beta"] = constant_param(c, 0.0f);
    sp.placeholder_stats[name] = BnStat{std::vector<float>(c, 0.0f), std::vector<float>(c, 1.0f)};
  };
  auto conv = [&](const std::string& name, int o, int i, int k, int fan_in) {
    P[name] = he_normal({o, i, k, k}, fan_in, 2.0, seed, name);
  };

  const int ks = space.stem.kernel;
  const int stem_c = space.stem.channels.hi;
  conv("stem.conv.w", stem_c, space.input_channels, ks, space.input_channels * ks * ks);
  add_bn("stem.bn", stem_c, 1.0f);
  int last = stem_c;
  for (const auto& b : supernet_layout(space)) {
    const int mid = b.max_mid();
    if (b.expansion != 1) {
      conv(b.prefix + ".expand.w", mid, b.max_in, 1, b.max_in);
      add_bn(b.prefix + ".expand_bn", mid, 1.0f);
    }
    conv(b.prefix + ".dw.w", mid, 1, b.max_kernel, b.max_kernel * b.max_kernel);
    add_bn(b.prefix + ".dw_bn", mid, 1.0f);
    conv(b.prefix + ".project.w", b.max_out, mid, 1, mid);
    add_bn(b.prefix + ".project_bn", b.max_out, 0.0f);
    if (b.proj_skip) conv(b.prefix + ".skip.w", b.max_out, b.max_in, 1, b.max_in);
    last = b.max_out;
  }
  const int head_c = space.head.channels.hi;
  conv("head.conv.w", head_c, last, 1, last);
  add_bn("head.bn", head_c, 1.0f);
  P["classifier.w"] = he_normal({space.num_classes, head_c}, head_c, 1.0, seed, "classifier.w");
  P["classifier.b"] = constant_param(space.num_classes, 0.0f);
  return sp;
}

std::uint64_t param_checksum(const ParamStore& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, p] : params) {
    feed(name.data(), name.size());
    feed(p.value.ptr(), p.value.numel() * sizeof(float));
  }
  return h;
}

long long param_count(const ParamStore& params) {
  long long n = 0;
  for (const auto& [name, p] : params) n += static_cast<long long>(p.value.numel());
  return n;
}

long long analytic_param_count(const SearchSpace& space, const ChildConfig& cfg) {
  require_valid(space, cfg);
  const long long ks = space.stem.kernel;
  long long cur = cfg.stem_channels;
  long long n = cur * space.input_channels * ks * ks + 2 * cur;
  const auto layout = layout_by_stage(space);
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    const long long e = space.stages[s].expansion;
    for (int l = 0; l < cfg.stages[s].depth(); ++l) {
      const auto& lc = cfg.stages[s].layers[static_cast<std::size_t>(l)];
      const long long c = lc.channels, k = lc.kernel, mid = cur * e;
      if (e != 1) n += mid * cur + 2 * mid;
      n += mid * k * k + 2 * mid;
      n += c * mid + 2 * c;
      if (layout[s][static_cast<std::size_t>(l)].proj_skip) n += c * cur;
      cur = c;
    }
  }
  const long long h = cfg.head_channels, K = space.num_classes;
  return n + h * cur + 2 * h + K * h + K;
}

ParamStore slice_weights(const SupernetParams& supernet, const ChildConfig& cfg) {
  const auto& space = supernet.space;
  require_valid(space, cfg);
  const auto& P = supernet.params;
  ParamStore out;
  auto put = [&](const std::string& name, Tensor v) {
    Parameter p;
    p.value = std::move(v);
    p.decay = lookup(P, name).decay;
    out[name] = std::move(p);
  };
  auto put_bn = [&](const std::string& name, int c) {
    put(name + ".gamma", slice1(lookup(P, name + ".gamma").value, c));
    put(name + ".beta", slice1(lookup(P, name + ".beta").value, c));
  };

  int cur = cfg.stem_channels;
  put("stem.conv.w", slice4(lookup(P, "stem.conv.w").value, cur, space.input_channels,
                            space.stem.kernel));
  put_bn("stem.bn", cur);
  const auto layout = layout_by_stage(space);
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    for (int l = 0; l < cfg.stages[s].depth(); ++l) {
      const auto& b = layout[s][static_cast<std::size_t>(l)];
      const auto& lc = cfg.stages[s].layers[static_cast<std::size_t>(l)];
      const int mid = cur * b.expansion;
      const auto& p = b.prefix;
      if (b.expansion != 1) {
        put(p + ".expand.w", slice4(lookup(P, p + ".expand.w").value, mid, cur, 1));
        put_bn(p + ".expand_bn", mid);
      }
      put(p + ".dw.w", slice4(lookup(P, p + ".dw.w").value, mid, 1, lc.kernel));
      put_bn(p + ".dw_bn", mid);
      put(p + ".project.w", slice4(lookup(P, p + ".project.w").value, lc.channels, mid, 1));
      put_bn(p + ".project_bn", lc.channels);
      if (b.proj_skip) {
        put(p + ".skip.w", slice4(lookup(P, p + ".skip.w").value, lc.channels, cur, 1));
      }
      cur = lc.channels;
    }
  }
  put("head.conv.w", slice4(lookup(P, "head.conv.w").value, cfg.head_channels, cur, 1));
  put_bn("head.bn", cfg.head_channels);
  put("classifier.w", slice2(lookup(P, "classifier.w").value, space.num_classes,
                             cfg.head_channels));
  put("classifier.b", lookup(P, "classifier.b").value);
  return out;
}

VarId build_child(Tape& t, const SearchSpace& space, ParamStore& params, const ChildConfig& cfg,
                  ExecMode mode, const ForwardOptions& opts, VarId input) {
  auto bind = [&](const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw StateError("missing parameter '" + name + "'");
    return t.recording() ? t.param(it->second, name) : t.constant(it->second.value, name);
  };
  return build(t, space, bind, cfg, mode, opts, input);
}

VarId build_child(Tape& t, const SearchSpace& space, const ParamStore& params,
                  const ChildConfig& cfg, ExecMode mode, const ForwardOptions& opts, VarId input) {
  auto bind = [&](const std::string& name) { return t.constant(lookup(params, name).value, name); };
  return build(t, space, bind, cfg, mode, opts, input);
}

VarId stage_transition(Tape& t, VarId x, int stride, VarId projection, const std::string& name) {
  if (stride != 1 && stride != 2) {
    throw PreconditionError("stage transition stride must be 1 or 2, got " +
                            std::to_string(stride));
  }
  VarId y = x;
  if (stride == 2) y = avgpool2x2(t, y, name + ".pool");
  if (projection != kNoProjection) y = conv2d(t, y, projection, 1, name + ".proj");
  return y;
}

Tensor child_forward(const ChildView& view, const Tensor& batch, const ForwardOptions& opts) {
  if (!view.supernet) throw PreconditionError("child view without a supernet");
  const auto& space = view.supernet->space;
  require_valid(space, view.config);
  const int r = view.config.resolution;
  if (batch.rank() != 4 || batch.dim(1) != space.input_channels || batch.dim(2) != r ||
      batch.dim(3) != r) {
    throw DimensionError("batch " + shape_str(batch.shape) + " does not match child resolution " +
                         std::to_string(r));
  }
  Tape t(false);
  VarId in = t.constant(batch, "input");
  if (view.mode == ExecMode::kMasked) {
    return t.value(build_child(t, space, view.supernet->params, view.config, view.mode, opts, in));
  }
  const ParamStore sliced = slice_weights(*view.supernet, view.config);
  return t.value(build_child(t, space, sliced, view.config, view.mode, opts, in));
}

BnStatsMap pad_stats(const SupernetParams& supernet, const BnStatsMap& child_stats) {
  BnStatsMap out = supernet.placeholder_stats;
  for (const auto& [name, st] : child_stats) {
    auto it = out.find(name);
    if (it == out.end()) throw StateError("statistics for unknown batch norm '" + name + "'");
    if (st.mean.size() > it->second.mean.size() || st.var.size() != st.mean.size()) {
      throw DimensionError("statistics for '" + name + "' do not fit the supernet");
    }
    std::copy(st.mean.begin(), st.mean.end(), it->second.mean.begin());
    std::copy(st.var.begin(), st.var.end(), it->second.var.begin());
  }
  return out;
}

Tensor kernel_ring_mask(const Shape& shape, int k) {
  if (shape.size() != 4 || shape[2] != shape[3] || k > shape[2] || (shape[2] - k) % 2) {
    throw DimensionError("kernel mask " + std::to_string(k) + " does not fit " +
                         shape_str(shape));
  }
  const int K = shape[2], off = (K - k) / 2;
  Tensor m(shape);
  const std::size_t plane = static_cast<std::size_t>(K) * K;
  for (std::size_t c = 0; c < m.numel() / plane; ++c)
    for (int r = off; r < off + k; ++r)
      for (int q = off; q < off + k; ++q) m[c * plane + static_cast<std::size_t>(r) * K + q] = 1.0f;
  return m;
}

}  // namespace onestage
