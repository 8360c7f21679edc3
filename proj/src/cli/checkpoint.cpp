#include "onestage/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "onestage/errors.hpp"

namespace onestage {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'O', 'N', 'E', 'S', 'T', 'G', 'C', 'K'};

class Writer {
 public:
  template <typename T>
  void pod(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    out.append(p, sizeof(T));
  }
  void str(const std::string& s) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    out.append(s);
  }
  std::string out;
};

class Reader {
 public:
  Reader(const std::string& b, const std::string& o) : bytes(b), origin(o) {}
  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    need(n);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
  void need(std::size_t n) const {
    if (pos + n > bytes.size()) fail("unexpected end of data");
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw IoError(origin + ": " + what + " at byte offset " + std::to_string(pos));
  }
  const std::string& bytes;
  std::string origin;
  std::size_t pos = 0;
};

void write_meta(Writer& w, const std::map<std::string, std::string>& meta) {
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    w.str(k);
    w.str(v);
  }
}

std::map<std::string, std::string> read_meta(Reader& r) {
  std::map<std::string, std::string> meta;
  const auto n = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string k = r.str();
    meta[k] = r.str();
  }
  return meta;
}

}  // namespace

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::string serialize_checkpoint(const Checkpoint& ck) {
  Writer w;
  w.out.append(kMagic, sizeof(kMagic));
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.pod<std::uint64_t>(ck.space_hash);
  w.pod<std::int64_t>(ck.step);
  w.pod<std::uint64_t>(ck.global_seed);
  write_meta(w, ck.meta);

  w.pod<std::uint32_t>(static_cast<std::uint32_t>(ck.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& t : ck.tensors) {
    w.str(t.name);
    w.pod<std::uint8_t>(t.decay ? 1 : 0);
    w.pod<std::uint8_t>(static_cast<std::uint8_t>(t.value.rank()));
    for (int d : t.value.shape) w.pod<std::int32_t>(d);
    w.pod<std::uint64_t>(offset);
    offset += t.value.numel() * sizeof(float);
  }
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(ck.children.size()));
  for (const auto& c : ck.children) {
    w.str(c.config);
    w.str(c.prefix);
    write_meta(w, c.meta);
  }
  w.pod<std::uint64_t>(offset);
  for (const auto& t : ck.tensors)
    w.out.append(reinterpret_cast<const char*>(t.value.ptr()), t.value.numel() * sizeof(float));
  return std::move(w.out);
}

Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& origin) {
  Reader r(bytes, origin);
  r.need(sizeof(kMagic));
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) r.fail("bad magic");
  r.pos += sizeof(kMagic);
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) r.fail("unsupported format version " + std::to_string(version));
  Checkpoint ck;
  ck.space_hash = r.pod<std::uint64_t>();
  ck.step = r.pod<std::int64_t>();
  ck.global_seed = r.pod<std::uint64_t>();
  ck.meta = read_meta(r);

  struct Entry {
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  const auto n = r.pod<std::uint32_t>();
  std::uint64_t expect = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    NamedTensor t;
    t.name = r.str();
    t.decay = r.pod<std::uint8_t>() != 0;
    const auto rank = r.pod<std::uint8_t>();
    Shape shape;
    for (int d = 0; d < rank; ++d) {
      const auto v = r.pod<std::int32_t>();
      if (v <= 0) r.fail("non-positive dimension in tensor '" + t.name + "'");
      shape.push_back(v);
    }
    const auto off = r.pod<std::uint64_t>();
    if (off != expect) r.fail("tensor '" + t.name + "' offset overlaps or leaves a gap");
    t.value = Tensor(shape);
    expect += t.value.numel() * sizeof(float);
    entries.push_back({off});
    ck.tensors.push_back(std::move(t));
  }
  const auto nc = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < nc; ++i) {
    ChildSection c;
    c.config = r.str();
    c.prefix = r.str();
    c.meta = read_meta(r);
    ck.children.push_back(std::move(c));
  }
  const auto payload = r.pod<std::uint64_t>();
  if (payload != expect) r.fail("payload size disagrees with manifest");
  r.need(payload);
  const std::size_t base = r.pos;
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    Tensor& v = ck.tensors[i].value;
    std::memcpy(v.ptr(), bytes.data() + base + entries[i].offset, v.numel() * sizeof(float));
  }
  r.pos += payload;
  if (r.pos != bytes.size()) r.fail("trailing bytes");
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ck);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint: " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  return deserialize_checkpoint(bytes, path.string());
}

}  // namespace onestage
