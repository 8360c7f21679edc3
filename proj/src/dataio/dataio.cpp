#include "onestage/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <yaml-cpp/yaml.h>

#include "onestage/errors.hpp"
#include "onestage/searchspace.hpp"

namespace onestage {

namespace fs = std::filesystem;

fs::path DatasetManifest::split_path(const std::string& split) const {
  auto it = splits.find(split);
  if (it == splits.end()) throw ConfigError("dataset '" + name + "' has no split '" + split + "'");
  return dir / it->second.file;
}

DatasetManifest load_manifest(const fs::path& path) {
  YAML::Node root;
  try {
    root = YAML::LoadFile(path.string());
  } catch (const YAML::BadFile&) {
    throw IoError("cannot open dataset manifest: " + path.string());
  } catch (const YAML::ParserException& e) {
    throw ConfigError(path.string() + ":" + std::to_string(e.mark.line + 1) + ":" +
                      std::to_string(e.mark.column + 1) + ": " + e.msg);
  }
  DatasetManifest m;
  try {
    m.name = root["name"].as<std::string>();
    m.num_classes = root["num_classes"].as<int>();
    m.source_resolution = root["source_resolution"].as<int>();
    if (root["channels"]) m.channels = root["channels"].as<int>();
    m.mean = root["mean"].as<std::vector<float>>();
    m.std = root["std"].as<std::vector<float>>();
    for (const auto& kv : root["splits"]) {
      SplitInfo s;
      s.file = kv.second["file"].as<std::string>();
      s.count = kv.second["count"].as<long long>();
      m.splits[kv.first.as<std::string>()] = s;
    }
  } catch (const YAML::Exception& e) {
    throw ConfigError(path.string() + ":" + std::to_string(e.mark.line + 1) + ":" +
                      std::to_string(e.mark.column + 1) + ": " + e.msg);
  }
  m.dir = path.parent_path();
  if (m.num_classes < 1 || m.num_classes > 256 || m.source_resolution < 1 || m.channels < 1 ||
      static_cast<int>(m.mean.size()) != m.channels || static_cast<int>(m.std.size()) != m.channels)
    throw ConfigError(path.string() + ": inconsistent manifest fields");
  for (const auto& [name, s] : m.splits)
    if (s.count <= 0) throw ConfigError(path.string() + ": split '" + name + "' is empty");
  return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  YAML::Emitter out;
  out << YAML::BeginMap;
  out << YAML::Key << "name" << YAML::Value << m.name;
  out << YAML::Key << "num_classes" << YAML::Value << m.num_classes;
  out << YAML::Key << "source_resolution" << YAML::Value << m.source_resolution;
  out << YAML::Key << "channels" << YAML::Value << m.channels;
  out << YAML::Key << "mean" << YAML::Value << YAML::Flow << m.mean;
  out << YAML::Key << "std" << YAML::Value << YAML::Flow << m.std;
  out << YAML::Key << "splits" << YAML::Value << YAML::BeginMap;
  for (const auto& [name, s] : m.splits) {
    out << YAML::Key << name << YAML::Value << YAML::Flow << YAML::BeginMap;
    out << YAML::Key << "file" << YAML::Value << s.file;
    out << YAML::Key << "count" << YAML::Value << s.count;
    out << YAML::EndMap;
  }
  out << YAML::EndMap << YAML::EndMap;
  std::ofstream f(path);
  if (!f) throw IoError("cannot write manifest: " + path.string());
  f << out.c_str() << "\n";
}

RawSplit read_split(const DatasetManifest& m, const std::string& split) {
  const fs::path path = m.split_path(split);
  const long long count = m.splits.at(split).count;
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open records: " + path.string());
  RawSplit raw;
  raw.channels = m.channels;
  raw.resolution = m.source_resolution;
  const long long rb = m.record_bytes();
  const long long px = rb - 1;
  raw.labels.resize(static_cast<std::size_t>(count));
  raw.pixels.resize(static_cast<std::size_t>(count * px));
  std::vector<char> rec(static_cast<std::size_t>(rb));
  for (long long i = 0; i < count; ++i) {
    f.read(rec.data(), rb);
    if (f.gcount() != rb) {
      throw IoError(path.string() + ": truncated record " + std::to_string(i) + " at byte offset " +
                    std::to_string(i * rb + f.gcount()));
    }
    const auto label = static_cast<std::uint8_t>(rec[0]);
    if (label >= m.num_classes) {
      throw IoError(path.string() + ": corrupt record " + std::to_string(i) + " at byte offset " +
                    std::to_string(i * rb) + " (label " + std::to_string(label) + ")");
    }
    raw.labels[static_cast<std::size_t>(i)] = label;
    std::copy(rec.begin() + 1, rec.end(), raw.pixels.begin() + i * px);
  }
  if (f.peek() != std::char_traits<char>::eof()) {
    throw IoError(path.string() + ": trailing bytes after byte offset " + std::to_string(count * rb));
  }
  return raw;
}

ImageBatch gather(const DatasetManifest& m, const RawSplit& raw, const std::vector<long long>& idx) {
  const int c = raw.channels, r = raw.resolution;
  const std::size_t plane = static_cast<std::size_t>(r) * r, px = plane * c;
  ImageBatch b;
  b.images = Tensor({static_cast<int>(idx.size()), c, r, r});
  for (std::size_t n = 0; n < idx.size(); ++n) {
    const std::uint8_t* src = raw.pixels.data() + static_cast<std::size_t>(idx[n]) * px;
    float* dst = b.images.ptr() + n * px;
    for (int ch = 0; ch < c; ++ch) {
      const float mu = m.mean[ch], inv = 1.0f / m.std[ch];
      for (std::size_t j = 0; j < plane; ++j)
        dst[ch * plane + j] = (src[ch * plane + j] / 255.0f - mu) * inv;
    }
    b.labels.push_back(raw.labels[static_cast<std::size_t>(idx[n])]);
  }
  return b;
}

BatchStream::BatchStream(const DatasetManifest& m, const RawSplit& raw, int batch_size,
                         std::uint64_t epoch_seed, bool train, long long limit)
    : manifest_(&m), raw_(&raw), batch_size_(batch_size), train_(train) {
  if (batch_size < 1) throw PreconditionError("batch size must be positive");
  const long long n = limit > 0 ? std::min(limit, raw.size()) : raw.size();
  order_.resize(static_cast<std::size_t>(n));
  for (long long i = 0; i < n; ++i) order_[static_cast<std::size_t>(i)] = i;
  if (train) {
    std::mt19937_64 rng(mix64(epoch_seed));
    // Fisher-Yates with explicit modulo-free draws for cross-platform order.
    for (std::size_t i = order_.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(
          (static_cast<unsigned __int128>(rng()) * i) >> 64);
      std::swap(order_[i - 1], order_[j]);
    }
  }
}

long long BatchStream::num_batches() const {
  const long long n = static_cast<long long>(order_.size());
  return train_ ? n / batch_size_ : (n + batch_size_ - 1) / batch_size_;
}

std::optional<ImageBatch> BatchStream::next() {
  const long long n = static_cast<long long>(order_.size());
  const long long remaining = n - pos_;
  if (remaining <= 0 || (train_ && remaining < batch_size_)) return std::nullopt;
  const long long take = std::min<long long>(batch_size_, remaining);
  std::vector<long long> idx(order_.begin() + pos_, order_.begin() + pos_ + take);
  pos_ += take;
  return gather(*manifest_, *raw_, idx);
}

BatchStream load_batches(const DatasetManifest& m, const RawSplit& raw, int batch_size,
                         std::uint64_t epoch_seed, bool train, long long limit) {
  return BatchStream(m, raw, batch_size, epoch_seed, train, limit);
}

// ---------------------------------------------------------------------------
// Augmentation and resizing

Tensor hflip(const Tensor& images) {
  Tensor out(images.shape);
  const int n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(i, ch, y, x) = images.at(i, ch, y, w - 1 - x);
  return out;
}

namespace {

int reflect(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

double keys(double x) {
  constexpr double a = -0.5;
  x = std::fabs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

struct Taps {
  int idx[4];
  double w[4];
};

std::vector<Taps> bicubic_taps(int in, int out) {
  std::vector<Taps> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    const double src = (o + 0.5) * scale - 0.5;
    const int i0 = static_cast<int>(std::floor(src));
    const double t = src - i0;
    Taps& tp = taps[static_cast<std::size_t>(o)];
    double sum = 0.0;
    for (int k = 0; k < 4; ++k) {
      tp.idx[k] = std::clamp(i0 - 1 + k, 0, in - 1);
      tp.w[k] = keys(t + 1.0 - k);
      sum += tp.w[k];
    }
    for (double& w : tp.w) w /= sum;
  }
  return taps;
}

}  // namespace

ImageBatch augment(const ImageBatch& batch, std::uint64_t seed, const AugmentOptions& opts) {
  const Tensor& x = batch.images;
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  ImageBatch out;
  out.labels = batch.labels;
  out.images = Tensor(x.shape);
  for (int i = 0; i < n; ++i) {
    std::mt19937_64 rng(mix64(seed + static_cast<std::uint64_t>(i)));
    std::uniform_int_distribution<int> off(0, 2 * opts.pad);
    const int dy = off(rng) - opts.pad, dx = off(rng) - opts.pad;
    const bool flip = opts.flip && (rng() & 1ULL);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const int sx = flip ? w - 1 - xx : xx;
          out.images.at(i, ch, y, xx) = x.at(i, ch, reflect(y + dy, h), reflect(sx + dx, w));
        }
  }
  return out;
}

Tensor resize_bicubic(const Tensor& images, int out_res) {
  if (images.rank() != 4 || images.dim(2) != images.dim(3))
    throw DimensionError("resize expects square NCHW images, got " + shape_str(images.shape));
  if (out_res < 1) throw PreconditionError("target resolution must be positive");
  const int n = images.dim(0), c = images.dim(1), in = images.dim(2);
  if (in == out_res) return images;
  const auto taps = bicubic_taps(in, out_res);
  Tensor out({n, c, out_res, out_res});
  std::vector<double> rows(static_cast<std::size_t>(in) * out_res);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const float* src = images.ptr() + (static_cast<std::size_t>(i) * c + ch) * in * in;
      for (int y = 0; y < in; ++y)
        for (int ox = 0; ox < out_res; ++ox) {
          const Taps& t = taps[static_cast<std::size_t>(ox)];
          double s = 0.0;
          for (int k = 0; k < 4; ++k) s += t.w[k] * src[y * in + t.idx[k]];
          rows[static_cast<std::size_t>(y) * out_res + ox] = s;
        }
      for (int oy = 0; oy < out_res; ++oy) {
        const Taps& t = taps[static_cast<std::size_t>(oy)];
        for (int ox = 0; ox < out_res; ++ox) {
          double s = 0.0;
          for (int k = 0; k < 4; ++k) s += t.w[k] * rows[static_cast<std::size_t>(t.idx[k]) * out_res + ox];
          out.at(i, ch, oy, ox) = static_cast<float>(s);
        }
      }
    }
  return out;
}

Tensor center_crop(const Tensor& images, int size) {
  const int n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (size > h || size > w) throw DimensionError("crop larger than image");
  const int oy = (h - size) / 2, ox = (w - size) / 2;
  Tensor out({n, c, size, size});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) out.at(i, ch, y, x) = images.at(i, ch, y + oy, x + ox);
  return out;
}

Tensor eval_preprocess(const Tensor& images, int source_res, int target_res) {
  return resize_bicubic(center_crop(images, source_res), target_res);
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

struct Blob {
  double y, x, sigma;
  double color[3];
};

void paint(std::vector<double>& img, int r, const Blob& b, double amp, int channels) {
  const double inv = 1.0 / (2.0 * b.sigma * b.sigma);
  for (int y = 0; y < r; ++y)
    for (int x = 0; x < r; ++x) {
      const double d2 = (y - b.y) * (y - b.y) + (x - b.x) * (x - b.x);
      const double g = amp * std::exp(-d2 * inv);
      for (int ch = 0; ch < channels; ++ch)
        img[(static_cast<std::size_t>(ch) * r + y) * r + x] += g * b.color[ch % 3];
    }
}

Blob random_blob(std::mt19937_64& rng, int r) {
  std::uniform_real_distribution<double> pos(0.2 * r, 0.8 * r), sig(0.06 * r, 0.16 * r),
      col(-0.45, 0.45);
  Blob b{pos(rng), pos(rng), sig(rng), {col(rng), col(rng), col(rng)}};
  return b;
}

}  // namespace

DatasetManifest synth_dataset(const SynthSpec& spec, const fs::path& dir, const std::string& name) {
  if (spec.classes < 2 || spec.classes > 256 || spec.resolution < 4 || spec.train_count < 1 ||
      spec.test_count < 1)
    throw PreconditionError("invalid synthetic dataset spec");
  fs::create_directories(dir);
  const int r = spec.resolution, channels = 3;
  std::mt19937_64 proto_rng(mix64(spec.seed ^ 0x5157ULL));
  std::vector<std::vector<Blob>> protos(static_cast<std::size_t>(spec.classes));
  for (auto& p : protos)
    for (int k = 0; k < spec.blobs_per_class; ++k) p.push_back(random_blob(proto_rng, r));

  const std::size_t px = static_cast<std::size_t>(channels) * r * r;
  std::vector<double> sum(channels, 0.0), sum_sq(channels, 0.0);
  long long train_pixels = 0;

  auto write_split = [&](const std::string& split, long long count, std::uint64_t salt) {
    std::ofstream f(dir / (split + ".bin"), std::ios::binary);
    if (!f) throw IoError("cannot write " + (dir / (split + ".bin")).string());
    std::vector<double> img(px);
    std::vector<char> rec(px + 1);
    for (long long i = 0; i < count; ++i) {
      const int label = static_cast<int>(i % spec.classes);  // balanced
      std::mt19937_64 rng(mix64(spec.seed ^ mix64(salt + static_cast<std::uint64_t>(i))));
      std::normal_distribution<double> jit(0.0, spec.jitter * r), noise(0.0, spec.pixel_noise);
      std::uniform_real_distribution<double> amp(0.6, 1.4), bg(0.35, 0.65);
      const double base = bg(rng);
      std::fill(img.begin(), img.end(), base);
      for (Blob b : protos[static_cast<std::size_t>(label)]) {
        b.y += jit(rng);
        b.x += jit(rng);
        paint(img, r, b, amp(rng), channels);
      }
      for (int d = 0; d < spec.distractors; ++d) paint(img, r, random_blob(rng, r), amp(rng), channels);
      rec[0] = static_cast<char>(label);
      for (std::size_t j = 0; j < px; ++j) {
        const double v = std::clamp(img[j] + noise(rng), 0.0, 1.0);
        const auto q = static_cast<std::uint8_t>(std::lround(v * 255.0));
        rec[j + 1] = static_cast<char>(q);
        if (split == "train") {
          const std::size_t ch = j / (static_cast<std::size_t>(r) * r);
          sum[ch] += q / 255.0;
          sum_sq[ch] += (q / 255.0) * (q / 255.0);
        }
      }
      if (split == "train") train_pixels += r * r;
      f.write(rec.data(), static_cast<std::streamsize>(rec.size()));
    }
  };
  write_split("train", spec.train_count, 0x1000000000ULL);
  write_split("test", spec.test_count, 0x2000000000ULL);

  DatasetManifest m;
  m.name = name;
  m.dir = dir;
  m.num_classes = spec.classes;
  m.source_resolution = r;
  m.channels = channels;
  for (int ch = 0; ch < channels; ++ch) {
    const double mean = sum[ch] / static_cast<double>(train_pixels);
    const double var = sum_sq[ch] / static_cast<double>(train_pixels) - mean * mean;
    m.mean.push_back(static_cast<float>(mean));
    m.std.push_back(static_cast<float>(std::sqrt(std::max(var, 1e-12))));
  }
  m.splits["train"] = {"train.bin", spec.train_count};
  m.splits["test"] = {"test.bin", spec.test_count};
  save_manifest(m, dir / "manifest.yaml");
  return m;
}

}  // namespace onestage
