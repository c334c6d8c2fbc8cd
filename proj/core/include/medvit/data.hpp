#pragma once

#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <mutex>
#include <optional>
#include <span>
#include <thread>
#include <vector>

#include "medvit/losses.hpp"
#include "medvit/tensor.hpp"

namespace medvit {

enum class Split : std::uint8_t { Train = 0, Val = 1, Test = 2 };

const char* split_name(Split s);

/// In-memory image of an MVDS file (little-endian):
///   "MVDS" | u32 version | u32 n | u32 c | u32 h | u32 w | u32 n_classes |
///   u8 label_kind | u8 split[n] | u8 pixels[n*c*h*w] |
///   u16 label[n] (multiclass) or u8 mask[n*ceil(n_classes/8)] (multilabel)
struct DatasetFile {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  std::size_t n = 0, channels = 0, height = 0, width = 0, num_classes = 0;
  TaskKind label_kind = TaskKind::Multiclass;
  std::vector<std::uint8_t> splits;
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint16_t> classes;  // multiclass
  std::vector<std::uint8_t> masks;     // multilabel, mask_bytes() per sample

  std::size_t mask_bytes() const { return (num_classes + 7) / 8; }
  std::size_t image_size() const { return channels * height * width; }
  std::span<const std::uint8_t> image(std::size_t i) const;

  std::vector<std::size_t> indices(Split split) const;
  Labels labels(std::span<const std::size_t> indices) const;
  Labels all_labels() const;
  /// Sum of every pixel byte.
  std::uint64_t pixel_checksum() const;

  /// Throws LabelRangeError / DataError when fields are inconsistent.
  void validate() const;
  std::vector<std::uint8_t> serialize() const;
  /// Distinct errors for a bad magic, a length that disagrees with the header
  /// and out-of-range labels.
  static DatasetFile parse(std::span<const std::uint8_t> bytes);
  static DatasetFile load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

struct SyntheticOptions {
  std::size_t n = 64;
  std::size_t classes = 4;
  std::size_t size = 32;
  std::size_t channels = 1;
  std::uint64_t seed = 0;
  double noise = 0.08;
};

/// Per-class oriented sinusoidal gratings plus Gaussian noise. Labels are
/// i % classes; each class is split 70/15/15 into train/val/test.
DatasetFile make_synthetic(const SyntheticOptions& options);

/// CHW bilinear resize, align_corners = false.
template <typename T>
std::vector<T> resize_bilinear(std::span<const T> src, std::size_t channels, std::size_t h, std::size_t w,
                               std::size_t out_h, std::size_t out_w);
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& image, std::size_t out_h, std::size_t out_w);

/// (x - mean[c]) / std[c] over axis 1 of NCHW (or axis 0 of CHW). One-element
/// mean/std apply to every channel. Differentiable.
template <typename T>
Tensor<T> normalize(const Tensor<T>& images, const std::vector<double>& mean, const std::vector<double>& std);

struct Normalization {
  std::vector<double> mean{0.5};
  std::vector<double> std{0.5};
};

struct BatchOptions {
  std::size_t size = 0;            // output H = W; 0 keeps the stored size
  std::size_t out_channels = 3;    // single-channel data is replicated
  bool hflip = false;
  std::uint64_t flip_seed = 0;
};

template <typename T>
struct Batch {
  Tensor<T> images;  // (N, C, H, W) in [0, 1]
  Labels labels;
  std::vector<std::size_t> indices;
};

template <typename T>
Batch<T> make_batch(const DatasetFile& data, std::span<const std::size_t> indices, const BatchOptions& options);

/// Assembles batches of `order` on a worker thread into a bounded queue.
/// Batches are delivered in order; at most `prefetch` decoded batches exist
/// between the worker and the consumer.
template <typename T>
class BatchLoader {
 public:
  BatchLoader(const DatasetFile& data, std::vector<std::size_t> order, std::size_t batch_size, BatchOptions options,
              std::size_t prefetch = 2, std::size_t min_batch = 1);
  ~BatchLoader();
  BatchLoader(const BatchLoader&) = delete;
  BatchLoader& operator=(const BatchLoader&) = delete;

  /// Next batch, or nullopt at the end. Rethrows worker errors.
  std::optional<Batch<T>> next();
  std::size_t batch_count() const { return batches_; }
  /// Largest number of decoded batches simultaneously held by the loader.
  std::size_t peak_in_flight() const;

 private:
  void run(std::stop_token stop);

  const DatasetFile& data_;
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  BatchOptions options_;
  std::size_t prefetch_;
  std::size_t batches_;

  mutable std::mutex mutex_;
  std::condition_variable_any cv_;
  std::deque<Batch<T>> queue_;
  std::size_t in_flight_ = 0;
  std::size_t peak_ = 0;
  std::size_t delivered_ = 0;
  std::exception_ptr error_;
  std::jthread worker_;
};

extern template class BatchLoader<float>;
extern template class BatchLoader<double>;

}  // namespace medvit
