#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "onestage/errors.hpp"
#include "onestage/searchspace.hpp"

namespace onestage {

// ---------------------------------------------------------------------------
// Config strings

namespace {

std::string stage_item(const std::vector<int>& values) {
  std::string out;
  bool uniform = std::all_of(values.begin(), values.end(),
                             [&](int v) { return v == values.front(); });
  if (uniform) return std::to_string(values.front());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ':';
    out += std::to_string(values[i]);
  }
  return out;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

int parse_int(std::string_view s, std::string_view context) {
  int v = 0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (s.empty() || ec != std::errc() || ptr != end) {
    throw ConfigError("config string: bad integer '" + std::string(s) + "' in " +
                      std::string(context));
  }
  return v;
}

std::vector<int> parse_item(std::string_view item, std::string_view context) {
  std::vector<int> out;
  for (auto part : split(item, ':')) out.push_back(parse_int(part, context));
  return out;
}

}  // namespace

std::string to_string(const ChildConfig& cfg) {
  std::string d, c, k;
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    const auto& st = cfg.stages[s];
    std::vector<int> ch, ks;
    for (const auto& l : st.layers) {
      ch.push_back(l.channels);
      ks.push_back(l.kernel);
    }
    if (s) {
      d += '.';
      k += '.';
    }
    d += std::to_string(st.depth());
    c += '.' + stage_item(ch);
    k += stage_item(ks);
  }
  return "r" + std::to_string(cfg.resolution) + "-d" + d + "-c" +
         std::to_string(cfg.stem_channels) + c + '.' + std::to_string(cfg.head_channels) + "-k" +
         k;
}

ChildConfig parse_config(std::string_view text) {
  const auto fields = split(text, '-');
  if (fields.size() != 4 || fields[0].empty() || fields[0][0] != 'r' || fields[1].empty() ||
      fields[1][0] != 'd' || fields[2].empty() || fields[2][0] != 'c' || fields[3].empty() ||
      fields[3][0] != 'k') {
    throw ConfigError("config string '" + std::string(text) +
                      "' must look like r<res>-d<depths>-c<channels>-k<kernels>");
  }
  ChildConfig cfg;
  cfg.resolution = parse_int(fields[0].substr(1), "resolution");
  const auto depths = split(fields[1].substr(1), '.');
  const auto chans = split(fields[2].substr(1), '.');
  const auto kerns = split(fields[3].substr(1), '.');
  const std::size_t n = depths.size();
  if (chans.size() != n + 2) {
    throw ConfigError("config string: expected " + std::to_string(n + 2) +
                      " channel entries (stem, stages, head), got " +
                      std::to_string(chans.size()));
  }
  if (kerns.size() != n) {
    throw ConfigError("config string: expected " + std::to_string(n) + " kernel entries, got " +
                      std::to_string(kerns.size()));
  }
  cfg.stem_channels = parse_int(chans.front(), "stem channels");
  cfg.head_channels = parse_int(chans.back(), "head channels");
  for (std::size_t s = 0; s < n; ++s) {
    const int depth = parse_int(depths[s], "depth");
    if (depth < 1) throw ConfigError("config string: stage depth must be >= 1");
    auto expand = [&](std::string_view item, const char* what) {
      auto values = parse_item(item, what);
      if (values.size() == 1) values.assign(depth, values.front());
      if (static_cast<int>(values.size()) != depth) {
        throw ConfigError("config string: stage " + std::to_string(s + 1) + " lists " +
                          std::to_string(values.size()) + " " + what + " values for depth " +
                          std::to_string(depth));
      }
      return values;
    };
    const auto ch = expand(chans[s + 1], "channel");
    const auto ks = expand(kerns[s], "kernel");
    StageChoice st;
    for (int l = 0; l < depth; ++l) st.layers.push_back({ch[l], ks[l]});
    cfg.stages.push_back(std::move(st));
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Space files

namespace {

std::string where(const YAML::Node& node, const std::string& source) {
  const auto m = node.Mark();
  if (m.is_null()) return source;
  return source + ":" + std::to_string(m.line + 1) + ":" + std::to_string(m.column + 1);
}

YAML::Node require(const YAML::Node& parent, const char* key, const std::string& source) {
  auto node = parent[key];
  if (!node) {
    throw ConfigError(where(parent, source) + ": missing key '" + key + "'");
  }
  return node;
}

template <typename T>
T as(const YAML::Node& node, const std::string& source) {
  try {
    return node.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError(where(node, source) + ": unexpected value type");
  }
}

IntRange as_range(const YAML::Node& node, const std::string& source) {
  if (node.IsScalar()) {
    const int v = as<int>(node, source);
    return {v, v};
  }
  const auto v = as<std::vector<int>>(node, source);
  if (v.size() != 2) throw ConfigError(where(node, source) + ": range must be [lo, hi]");
  return {v[0], v[1]};
}

}  // namespace

SearchSpace parse_space(std::string_view yaml_text, const std::string& source) {
  YAML::Node root;
  try {
    root = YAML::Load(std::string(yaml_text));
  } catch (const YAML::ParserException& e) {
    throw ConfigError(source + ":" + std::to_string(e.mark.line + 1) + ":" +
                      std::to_string(e.mark.column + 1) + ": " + e.msg);
  }
  if (!root.IsMap()) throw ConfigError(source + ": space file must be a mapping");
  SearchSpace space;
  space.name = root["name"] ? as<std::string>(root["name"], source) : "unnamed";
  space.channel_step = as<int>(require(root, "channel_step", source), source);
  space.num_classes = as<int>(require(root, "num_classes", source), source);
  if (root["input_channels"]) space.input_channels = as<int>(root["input_channels"], source);
  space.resolutions = as<std::vector<int>>(require(root, "resolutions", source), source);
  if (root["extra_resolutions"])
    space.extra_resolutions = as<std::vector<int>>(root["extra_resolutions"], source);

  const auto stem = require(root, "stem", source);
  space.stem.channels = as_range(require(stem, "channels", source), source);
  if (stem["kernel"]) space.stem.kernel = as<int>(stem["kernel"], source);
  if (stem["stride"]) space.stem.stride = as<int>(stem["stride"], source);

  const auto stages = require(root, "stages", source);
  if (!stages.IsSequence()) throw ConfigError(where(stages, source) + ": stages must be a list");
  for (const auto& node : stages) {
    StageSpec st;
    st.channels = as_range(require(node, "channels", source), source);
    st.depth = as_range(require(node, "depth", source), source);
    st.kernels = as<std::vector<int>>(require(node, "kernels", source), source);
    st.stride = as<int>(require(node, "stride", source), source);
    st.expansion = as<int>(require(node, "expansion", source), source);
    space.stages.push_back(std::move(st));
  }
  const auto head = require(root, "head", source);
  space.head.channels = as_range(require(head, "channels", source), source);

  try {
    validate_space(space);
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return space;
}

std::string space_yaml(const SearchSpace& space) {
  std::ostringstream os;
  auto range = [&](IntRange r) { os << '[' << r.lo << ", " << r.hi << ']'; };
  auto list = [&](const std::vector<int>& v) {
    os << '[';
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? ", " : "") << v[i];
    os << ']';
  };
  os << "name: " << space.name << "\nchannel_step: " << space.channel_step << "\nnum_classes: " << space.num_classes
     << "\ninput_channels: " << space.input_channels << "\nresolutions: ";
  list(space.resolutions);
  os << "\nextra_resolutions: ";
  list(space.extra_resolutions);
  os << "\nstem: {channels: ";
  range(space.stem.channels);
  os << ", kernel: " << space.stem.kernel << ", stride: " << space.stem.stride << "}\nstages:\n";
  for (const auto& st : space.stages) {
    os << "  - {channels: ";
    range(st.channels);
    os << ", depth: ";
    range(st.depth);
    os << ", kernels: ";
    list(st.kernels);
    os << ", stride: " << st.stride << ", expansion: " << st.expansion << "}\n";
  }
  os << "head: {channels: ";
  range(space.head.channels);
  os << "}\n";
  return os.str();
}

SearchSpace load_space(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open space file: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_space(ss.str(), path.string());
}

std::string canonical_text(const SearchSpace& space) {
  std::ostringstream os;
  auto range = [&](IntRange r) { os << '[' << r.lo << ',' << r.hi << ']'; };
  auto list = [&](const std::vector<int>& v) {
    os << '[';
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    os << ']';
  };
  os << "step=" << space.channel_step << ";classes=" << space.num_classes
     << ";in=" << space.input_channels << ";res=";
  list(space.resolutions);
  os << ";extra=";
  list(space.extra_resolutions);
  os << ";stem=";
  range(space.stem.channels);
  os << 'k' << space.stem.kernel << 's' << space.stem.stride;
  for (const auto& st : space.stages) {
    os << ";stage=";
    range(st.channels);
    range(st.depth);
    list(st.kernels);
    os << 's' << st.stride << 'e' << st.expansion;
  }
  os << ";head=";
  range(space.head.channels);
  return os.str();
}

std::uint64_t space_hash(const SearchSpace& space) {
  // FNV-1a over the canonical text.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical_text(space)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace onestage
