#include "medvit/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <string>

#include "medvit/nn.hpp"
#include "medvit/ops.hpp"

namespace medvit {

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

namespace {

constexpr char kMagic[4] = {'M', 'V', 'D', 'S'};
constexpr std::size_t kHeaderBytes = 4 + 6 * 4 + 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::uint32_t narrow_u32(std::size_t v, const char* field) {
  if (v > std::numeric_limits<std::uint32_t>::max()) throw DataError(std::string("mvds: ") + field + " exceeds u32");
  return static_cast<std::uint32_t>(v);
}

// a * b, or nullopt on overflow.
std::optional<std::uint64_t> checked_mul(std::uint64_t a, std::uint64_t b) {
  if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a) return std::nullopt;
  return a * b;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

std::span<const std::uint8_t> DatasetFile::image(std::size_t i) const {
  if (i >= n) throw DataError("mvds: sample " + std::to_string(i) + " out of range for " + std::to_string(n));
  return {pixels.data() + i * image_size(), image_size()};
}

std::vector<std::size_t> DatasetFile::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (splits[i] == static_cast<std::uint8_t>(split)) out.push_back(i);
  }
  return out;
}

Labels DatasetFile::labels(std::span<const std::size_t> idx) const {
  Labels out;
  out.kind = label_kind;
  out.num_classes = num_classes;
  for (std::size_t i : idx) {
    if (i >= n) throw DataError("mvds: sample " + std::to_string(i) + " out of range for " + std::to_string(n));
    if (label_kind == TaskKind::Multiclass) {
      out.classes.push_back(classes[i]);
    } else {
      const std::uint8_t* mask = masks.data() + i * mask_bytes();
      for (std::size_t c = 0; c < num_classes; ++c) out.targets.push_back((mask[c / 8] >> (c % 8)) & 1U);
    }
  }
  return out;
}

Labels DatasetFile::all_labels() const {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return labels(idx);
}

std::uint64_t DatasetFile::pixel_checksum() const {
  std::uint64_t sum = 0;
  for (auto p : pixels) sum += p;
  return sum;
}

void DatasetFile::validate() const {
  if (version != kVersion) throw DataError("mvds: unsupported version " + std::to_string(version));
  if (n == 0 || channels == 0 || height == 0 || width == 0 || num_classes == 0) {
    throw DataError("mvds: n, channels, height, width and n_classes must be positive");
  }
  if (splits.size() != n) throw DataError("mvds: split tag count differs from n");
  for (std::size_t i = 0; i < n; ++i) {
    if (splits[i] > 2) throw DataError("mvds: sample " + std::to_string(i) + " has split tag " +
                                       std::to_string(splits[i]));
  }
  if (pixels.size() != n * image_size()) throw DataError("mvds: pixel count differs from n*c*h*w");
  if (label_kind == TaskKind::Multiclass) {
    if (classes.size() != n) throw DataError("mvds: label count differs from n");
    if (num_classes > 65536) throw LabelRangeError("mvds: more classes than a u16 label can name");
    for (std::size_t i = 0; i < n; ++i) {
      if (classes[i] >= num_classes) {
        throw LabelRangeError("mvds: sample " + std::to_string(i) + " has label " + std::to_string(classes[i]) +
                              " but n_classes is " + std::to_string(num_classes));
      }
    }
  } else {
    if (masks.size() != n * mask_bytes()) throw DataError("mvds: mask bytes differ from n*ceil(n_classes/8)");
    const std::size_t spare = mask_bytes() * 8 - num_classes;
    if (spare) {
      const auto high = static_cast<std::uint8_t>(0xFFU << (8 - spare));
      for (std::size_t i = 0; i < n; ++i) {
        if (masks[(i + 1) * mask_bytes() - 1] & high) {
          throw LabelRangeError("mvds: sample " + std::to_string(i) + " sets a label bit beyond n_classes " +
                                std::to_string(num_classes));
        }
      }
    }
  }
}

std::vector<std::uint8_t> DatasetFile::serialize() const {
  validate();
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, version);
  put_u32(out, narrow_u32(n, "n"));
  put_u32(out, narrow_u32(channels, "channels"));
  put_u32(out, narrow_u32(height, "height"));
  put_u32(out, narrow_u32(width, "width"));
  put_u32(out, narrow_u32(num_classes, "n_classes"));
  out.push_back(static_cast<std::uint8_t>(label_kind));
  out.insert(out.end(), splits.begin(), splits.end());
  out.insert(out.end(), pixels.begin(), pixels.end());
  if (label_kind == TaskKind::Multiclass) {
    for (auto c : classes) {
      out.push_back(static_cast<std::uint8_t>(c & 0xFF));
      out.push_back(static_cast<std::uint8_t>(c >> 8));
    }
  } else {
    out.insert(out.end(), masks.begin(), masks.end());
  }
  return out;
}

DatasetFile DatasetFile::parse(std::span<const std::uint8_t> bytes) {
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw BadMagicError("mvds: bad magic (expected \"MVDS\")");
  }
  if (bytes.size() < kHeaderBytes) {
    throw TruncatedFileError("mvds: truncated header (" + std::to_string(bytes.size()) + " of " +
                             std::to_string(kHeaderBytes) + " bytes)");
  }
  DatasetFile d;
  const std::uint8_t* p = bytes.data() + 4;
  d.version = get_u32(p);
  if (d.version != kVersion) throw DataError("mvds: unsupported version " + std::to_string(d.version));
  d.n = get_u32(p + 4);
  d.channels = get_u32(p + 8);
  d.height = get_u32(p + 12);
  d.width = get_u32(p + 16);
  d.num_classes = get_u32(p + 20);
  const std::uint8_t kind = p[24];
  if (kind > 1) throw DataError("mvds: unknown label kind " + std::to_string(kind));
  d.label_kind = static_cast<TaskKind>(kind);

  auto pixel_count = checked_mul(d.n, d.channels);
  if (pixel_count) pixel_count = checked_mul(*pixel_count, d.height);
  if (pixel_count) pixel_count = checked_mul(*pixel_count, d.width);
  const std::uint64_t label_bytes =
      d.label_kind == TaskKind::Multiclass ? 2 * static_cast<std::uint64_t>(d.n)
                                           : static_cast<std::uint64_t>(d.n) * d.mask_bytes();
  if (!pixel_count || *pixel_count > std::numeric_limits<std::uint64_t>::max() / 2) {
    throw TruncatedFileError("mvds: header describes more data than any file can hold");
  }
  const std::uint64_t expected = kHeaderBytes + d.n + *pixel_count + label_bytes;
  if (bytes.size() < expected) {
    throw TruncatedFileError("mvds: truncated file (" + std::to_string(bytes.size()) + " of " +
                             std::to_string(expected) + " bytes)");
  }
  if (bytes.size() > expected) {
    throw DataError("mvds: " + std::to_string(bytes.size() - expected) + " trailing bytes after labels");
  }
  std::size_t off = kHeaderBytes;
  d.splits.assign(bytes.begin() + off, bytes.begin() + off + d.n);
  off += d.n;
  d.pixels.assign(bytes.begin() + off, bytes.begin() + off + *pixel_count);
  off += *pixel_count;
  if (d.label_kind == TaskKind::Multiclass) {
    d.classes.resize(d.n);
    for (std::size_t i = 0; i < d.n; ++i) {
      d.classes[i] = static_cast<std::uint16_t>(bytes[off + 2 * i] | (bytes[off + 2 * i + 1] << 8));
    }
  } else {
    d.masks.assign(bytes.begin() + off, bytes.end());
  }
  d.validate();
  return d;
}

DatasetFile DatasetFile::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("mvds: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse(bytes);
}

void DatasetFile::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("mvds: cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("mvds: write failed for " + path.string());
}

DatasetFile make_synthetic(const SyntheticOptions& o) {
  if (o.classes == 0 || o.n < o.classes) throw ConfigError("synthetic: need n >= classes >= 1");
  if (o.size == 0 || o.channels == 0) throw ConfigError("synthetic: size and channels must be positive");
  if (o.classes > 65536) throw ConfigError("synthetic: too many classes");
  DatasetFile d;
  d.n = o.n;
  d.channels = o.channels;
  d.height = d.width = o.size;
  d.num_classes = o.classes;
  d.label_kind = TaskKind::Multiclass;
  d.splits.resize(o.n);
  d.classes.resize(o.n);
  d.pixels.resize(o.n * d.image_size());

  Rng rng(o.seed);
  std::normal_distribution<double> noise(0.0, o.noise);
  std::uniform_real_distribution<double> jitter(-0.25, 0.25);
  const double pi = std::numbers::pi;
  const double s = static_cast<double>(o.size);
  for (std::size_t i = 0; i < o.n; ++i) {
    const std::size_t k = i % o.classes;
    d.classes[i] = static_cast<std::uint16_t>(k);
    const double theta = pi * static_cast<double>(k) / static_cast<double>(o.classes);
    const double freq = 2.0 + static_cast<double>(k % 4);
    const double phase = 2.0 * pi * 0.37 * static_cast<double>(k) + jitter(rng);
    std::uint8_t* img = d.pixels.data() + i * d.image_size();
    for (std::size_t c = 0; c < o.channels; ++c) {
      const double gain = 0.3 - 0.05 * static_cast<double>(c % 3);
      for (std::size_t y = 0; y < o.size; ++y) {
        for (std::size_t x = 0; x < o.size; ++x) {
          const double u = (static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta)) / s;
          double v = 0.5 + gain * std::sin(2.0 * pi * freq * u + phase) + noise(rng);
          v = std::clamp(v, 0.0, 1.0);
          img[(c * o.size + y) * o.size + x] = static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
      }
    }
  }
  // Stratified 70/15/15 within each class, in sample order.
  for (std::size_t k = 0; k < o.classes; ++k) {
    std::vector<std::size_t> members;
    for (std::size_t i = k; i < o.n; i += o.classes) members.push_back(i);
    const double m = static_cast<double>(members.size());
    const auto n_train = static_cast<std::size_t>(std::lround(0.70 * m));
    const auto n_val = static_cast<std::size_t>(std::lround(0.15 * m));
    for (std::size_t j = 0; j < members.size(); ++j) {
      d.splits[members[j]] = static_cast<std::uint8_t>(j < n_train ? Split::Train
                                                       : j < n_train + n_val ? Split::Val
                                                                             : Split::Test);
    }
  }
  return d;
}

template <typename T>
std::vector<T> resize_bilinear(std::span<const T> src, std::size_t channels, std::size_t h, std::size_t w,
                               std::size_t out_h, std::size_t out_w) {
  if (channels == 0 || h == 0 || w == 0) throw ShapeError("resize_bilinear: empty source");
  if (out_h == 0 || out_w == 0) throw ShapeError("resize_bilinear: zero target size");
  if (src.size() != channels * h * w) throw ShapeError("resize_bilinear: source size differs from c*h*w");
  if (out_h == h && out_w == w) return std::vector<T>(src.begin(), src.end());

  struct Tap {
    std::size_t i0, i1;
    T frac;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double pos = (static_cast<double>(o) + 0.5) * scale - 0.5;
      if (pos < 0) pos = 0;
      auto i0 = static_cast<std::size_t>(pos);
      if (i0 > in - 1) i0 = in - 1;
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      t[o] = {i0, i1, static_cast<T>(pos - static_cast<double>(i0))};
    }
    return t;
  };
  const auto ty = taps(h, out_h);
  const auto tx = taps(w, out_w);
  std::vector<T> out(channels * out_h * out_w);
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = src.data() + c * h * w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const Tap& a = ty[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const Tap& b = tx[ox];
        const T top = (T(1) - b.frac) * plane[a.i0 * w + b.i0] + b.frac * plane[a.i0 * w + b.i1];
        const T bottom = (T(1) - b.frac) * plane[a.i1 * w + b.i0] + b.frac * plane[a.i1 * w + b.i1];
        out[(c * out_h + oy) * out_w + ox] = (T(1) - a.frac) * top + a.frac * bottom;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& image, std::size_t out_h, std::size_t out_w) {
  if (image.rank() == 3) {
    return Tensor<T>({image.dim(0), out_h, out_w},
                     resize_bilinear(image.data(), image.dim(0), image.dim(1), image.dim(2), out_h, out_w));
  }
  if (image.rank() == 4) {
    const std::size_t n = image.dim(0), c = image.dim(1), h = image.dim(2), w = image.dim(3);
    std::vector<T> out;
    out.reserve(n * c * out_h * out_w);
    for (std::size_t i = 0; i < n; ++i) {
      auto one = resize_bilinear(image.data().subspan(i * c * h * w, c * h * w), c, h, w, out_h, out_w);
      out.insert(out.end(), one.begin(), one.end());
    }
    return Tensor<T>({n, c, out_h, out_w}, std::move(out));
  }
  throw ShapeError("resize_bilinear: expected CHW or NCHW, got " + to_string(image.shape()));
}

template <typename T>
Tensor<T> normalize(const Tensor<T>& images, const std::vector<double>& mean, const std::vector<double>& std) {
  if (images.rank() != 3 && images.rank() != 4) {
    throw ShapeError("normalize: expected CHW or NCHW, got " + to_string(images.shape()));
  }
  const std::size_t axis = images.rank() == 4 ? 1 : 0;
  const std::size_t c = images.dim(axis);
  auto expand = [c](const std::vector<double>& v, const char* what) {
    if (v.size() != 1 && v.size() != c) {
      throw ConfigError(std::string("normalize: ") + what + " has " + std::to_string(v.size()) + " entries for " +
                        std::to_string(c) + " channels");
    }
    std::vector<T> out(c);
    for (std::size_t i = 0; i < c; ++i) out[i] = static_cast<T>(v.size() == 1 ? v[0] : v[i]);
    return out;
  };
  for (double s : std) {
    if (!(s > 0.0)) throw ConfigError("normalize: std must be positive");
  }
  Shape shape = axis == 1 ? Shape{1, c, 1, 1} : Shape{c, 1, 1};
  Tensor<T> m(shape, expand(mean, "mean"));
  Tensor<T> s(shape, expand(std, "std"));
  return div(sub(images, m), s);
}

template <typename T>
Batch<T> make_batch(const DatasetFile& data, std::span<const std::size_t> indices, const BatchOptions& options) {
  if (indices.empty()) throw DataError("make_batch: empty index list");
  const std::size_t c = data.channels, h = data.height, w = data.width;
  const std::size_t oc = options.out_channels ? options.out_channels : c;
  if (oc != c && c != 1) {
    throw DataError("make_batch: cannot map " + std::to_string(c) + " stored channels to " + std::to_string(oc));
  }
  const std::size_t oh = options.size ? options.size : h;
  const std::size_t ow = options.size ? options.size : w;
  const std::size_t plane = oh * ow;
  std::vector<T> out(indices.size() * oc * plane);
  std::vector<T> src(c * h * w);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto img = data.image(indices[b]);
    for (std::size_t i = 0; i < src.size(); ++i) src[i] = static_cast<T>(img[i]) / T(255);
    std::vector<T> resized = resize_bilinear(std::span<const T>(src), c, h, w, oh, ow);
    if (options.hflip && (splitmix64(options.flip_seed ^ (indices[b] * 0xD1B54A32D192ED03ULL)) & 1U)) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < oh; ++y) {
          T* row = resized.data() + (ch * oh + y) * ow;
          std::reverse(row, row + ow);
        }
      }
    }
    T* dst = out.data() + b * oc * plane;
    for (std::size_t ch = 0; ch < oc; ++ch) {
      const T* from = resized.data() + (c == 1 ? 0 : ch) * plane;
      std::copy(from, from + plane, dst + ch * plane);
    }
  }
  Batch<T> batch;
  batch.images = Tensor<T>({indices.size(), oc, oh, ow}, std::move(out));
  batch.labels = data.labels(indices);
  batch.indices.assign(indices.begin(), indices.end());
  return batch;
}

template <typename T>
BatchLoader<T>::BatchLoader(const DatasetFile& data, std::vector<std::size_t> order, std::size_t batch_size,
                            BatchOptions options, std::size_t prefetch, std::size_t min_batch)
    : data_(data), order_(std::move(order)), batch_size_(batch_size), options_(options), prefetch_(prefetch) {
  if (batch_size_ == 0) throw ConfigError("batch loader: batch size must be positive");
  if (prefetch_ == 0) throw ConfigError("batch loader: prefetch must be at least 1");
  batches_ = order_.size() / batch_size_;
  const std::size_t tail = order_.size() % batch_size_;
  if (tail && tail >= std::max<std::size_t>(min_batch, 1)) ++batches_;
  worker_ = std::jthread([this](std::stop_token stop) { run(stop); });
}

template <typename T>
BatchLoader<T>::~BatchLoader() {
  worker_.request_stop();
  cv_.notify_all();
}

template <typename T>
void BatchLoader<T>::run(std::stop_token stop) {
  for (std::size_t b = 0; b < batches_; ++b) {
    {
      std::unique_lock lock(mutex_);
      if (!cv_.wait(lock, stop, [&] { return in_flight_ < prefetch_; })) return;
      ++in_flight_;
      peak_ = std::max(peak_, in_flight_);
    }
    try {
      const std::size_t begin = b * batch_size_;
      const std::size_t end = std::min(begin + batch_size_, order_.size());
      Batch<T> batch = make_batch<T>(data_, std::span<const std::size_t>(order_).subspan(begin, end - begin), options_);
      std::lock_guard lock(mutex_);
      queue_.push_back(std::move(batch));
    } catch (...) {
      std::lock_guard lock(mutex_);
      error_ = std::current_exception();
      cv_.notify_all();
      return;
    }
    cv_.notify_all();
  }
}

template <typename T>
std::optional<Batch<T>> BatchLoader<T>::next() {
  std::unique_lock lock(mutex_);
  if (delivered_ == batches_) return std::nullopt;
  cv_.wait(lock, [&] { return !queue_.empty() || error_; });
  if (queue_.empty()) std::rethrow_exception(error_);
  Batch<T> batch = std::move(queue_.front());
  queue_.pop_front();
  --in_flight_;
  ++delivered_;
  lock.unlock();
  cv_.notify_all();
  return batch;
}

template <typename T>
std::size_t BatchLoader<T>::peak_in_flight() const {
  std::lock_guard lock(mutex_);
  return peak_;
}

#define MEDVIT_INSTANTIATE_DATA(T)                                                                          \
  template std::vector<T> resize_bilinear(std::span<const T>, std::size_t, std::size_t, std::size_t,        \
                                          std::size_t, std::size_t);                                        \
  template Tensor<T> resize_bilinear(const Tensor<T>&, std::size_t, std::size_t);                           \
  template Tensor<T> normalize(const Tensor<T>&, const std::vector<double>&, const std::vector<double>&);    \
  template Batch<T> make_batch(const DatasetFile&, std::span<const std::size_t>, const BatchOptions&);      \
  template class BatchLoader<T>;

MEDVIT_INSTANTIATE_DATA(float)
MEDVIT_INSTANTIATE_DATA(double)

}  // namespace medvit
