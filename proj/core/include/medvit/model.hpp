#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "medvit/nn.hpp"
#include "medvit/tensor.hpp"

namespace medvit {

enum class Variant { Tiny, Small, Large, Toy };

std::string variant_name(Variant v);
/// Accepts t/s/l/toy (and tiny/small/large).
Variant parse_variant(std::string_view text);

enum class PatchEmbedKind { Pointwise, PoolPointwise };

struct StemConv {
  std::size_t out_channels;
  std::size_t stride;
};

/// One pyramid stage: patch embedding, then `repeat` x [ECB x ecb_count, LTB x ltb_count].
struct StageSpec {
  PatchEmbedKind patch_embed = PatchEmbedKind::PoolPointwise;
  std::size_t ecb_count = 0;
  std::size_t ecb_channels = 0;
  std::size_t ltb_count = 0;
  std::size_t ltb_channels = 0;
  std::size_t repeat = 1;
  std::size_t esa_stride = 1;

  std::size_t output_channels() const { return ltb_count ? ltb_channels : ecb_channels; }
};

struct ModelConfig {
  std::string name = "custom";
  std::size_t in_channels = 3;
  std::vector<StemConv> stem;
  std::vector<StageSpec> stages;
  std::size_t num_classes = 8;
  std::size_t input_size = 224;
  std::size_t head_dim = 32;
  double shrink_ratio = 0.75;
  std::size_t ecb_expansion = 4;
  std::size_t ltb_expansion = 2;

  /// MedViT-T/S/L at 224 or the desk-scale toy (channels / 8, stage-3 repeat 1,
  /// input 32). `input_size` 0 selects the variant default.
  static ModelConfig medvit(Variant variant, std::size_t num_classes, std::size_t input_size = 0);
  /// Three-stage model of about 2k parameters at input 16 for full-model
  /// gradient checks.
  static ModelConfig micro(std::size_t num_classes);

  /// Throws ConfigError naming the first violated constraint.
  void validate() const;
  /// ESA channel split of an LTB with `ltb_channels` outputs: {esa path, mhca path}.
  std::pair<std::size_t, std::size_t> ltb_split(std::size_t ltb_channels) const;
  /// Spatial size after the stem and after each stage.
  std::vector<std::size_t> spatial_trace(std::size_t input) const;
  std::string canonical() const;
  std::uint64_t digest() const;
};

enum class ParamRole { Weight, Bias, BnGamma, BnBeta };

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
  ParamRole role;
  bool decays() const { return role == ParamRole::Weight; }
};

template <typename T>
struct NamedBuffer {
  std::string name;
  std::vector<T>* values;
};

/// Flattened view of every parameterised layer, in construction order.
template <typename T>
struct ModuleRegistry {
  std::vector<std::pair<std::string, nn::Conv2dParams<T>*>> convs;
  std::vector<std::pair<std::string, nn::BatchNormState<T>*>> norms;
  std::vector<std::pair<std::string, nn::LinearParams<T>*>> linears;

  std::vector<NamedParameter<T>> parameters() const;
  std::vector<NamedBuffer<T>> buffers() const;
};

template <typename T>
using TapFn = std::function<void(const std::string& layer, const Tensor<T>& activation)>;

/// (N, h*w, d) -> (N, d, h, w)
template <typename T>
Tensor<T> seq2img(const Tensor<T>& tokens, std::size_t h, std::size_t w);
/// (N, d, h, w) -> (N, h*w, d)
template <typename T>
Tensor<T> img2seq(const Tensor<T>& image);

template <typename T>
struct ConvBn {
  nn::Conv2dParams<T> conv;
  nn::BatchNormState<T> bn;

  static ConvBn init(const nn::Conv2dOptions& options, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x);
  void collect(const std::string& prefix, ModuleRegistry<T>& reg);
};

/// Pointwise expand, BN, relu, depthwise 3x3, BN, relu, pointwise project.
template <typename T>
struct Lffn {
  ConvBn<T> expand;
  ConvBn<T> depthwise;
  nn::Conv2dParams<T> project;

  static Lffn init(std::size_t channels, std::size_t expansion, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x);
  void collect(const std::string& prefix, ModuleRegistry<T>& reg);
};

/// Multi-head convolutional attention: grouped 3x3 conv (one group per head),
/// BN, relu, then a pointwise output projection.
template <typename T>
struct Mhca {
  ConvBn<T> heads;
  nn::Conv2dParams<T> project;

  static Mhca init(std::size_t channels, std::size_t head_dim, Rng& rng);
  std::size_t head_count() const { return heads.conv.options.groups; }
  /// Grouped-conv activations before the output projection.
  Tensor<T> mix(const Tensor<T>& x);
  Tensor<T> forward(const Tensor<T>& x);
  void collect(const std::string& prefix, ModuleRegistry<T>& reg);
};

/// Efficient self-attention: queries from every token, keys and values from
/// the avg-pooled (stride s), batch-normalised map.
template <typename T>
struct Esa {
  std::size_t head_dim = 32;
  std::size_t stride = 1;
  nn::Conv2dParams<T> query;
  nn::Conv2dParams<T> key;
  nn::Conv2dParams<T> value;
  nn::Conv2dParams<T> output;
  nn::BatchNormState<T> pool_norm;

  static Esa init(std::size_t channels, std::size_t head_dim, std::size_t stride, Rng& rng);
  std::size_t head_count() const { return query.options.out_channels / head_dim; }
  /// When `attention` is given it receives the (N, heads, hw, L) weights.
  Tensor<T> forward(const Tensor<T>& x, Tensor<T>* attention = nullptr);
  void collect(const std::string& prefix, ModuleRegistry<T>& reg);
};

/// z~ = MHCA(z) + z; out = LFFN(z~) + z~
template <typename T>
struct Ecb {
  Mhca<T> mhca;
  Lffn<T> lffn;

  static Ecb init(std::size_t channels, std::size_t head_dim, std::size_t expansion, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x);
  void collect(const std::string& prefix, ModuleRegistry<T>& reg);
};

/// Dual-path block: projection to the ESA width, ESA residual, projection to
/// the MHCA width, MHCA residual, channel concat, LFFN residual.
template <typename T>
struct Ltb {
  ConvBn<T> proj_in;
  Esa<T> esa;
  ConvBn<T> proj_mid;
  Mhca<T> mhca;
  Lffn<T> lffn;

  static Ltb init(std::size_t in_channels, std::size_t out_channels, double shrink_ratio, std::size_t head_dim,
                  std::size_t esa_stride, std::size_t expansion, Rng& rng);
  std::size_t out_channels() const { return lffn.project.options.out_channels; }
  Tensor<T> forward(const Tensor<T>& x, const std::string& name = {}, const TapFn<T>* tap = nullptr);
  void collect(const std::string& prefix, ModuleRegistry<T>& reg);
};

template <typename T>
struct ForwardHooks {
  /// Called with every named activation (stem, blocks, ESA outputs, stages).
  TapFn<T> tap;
  /// May replace a stage's output before the next stage consumes it (1-based).
  std::function<Tensor<T>(std::size_t stage, const Tensor<T>& features)> after_stage;
};

template <typename T>
class MedViT {
 public:
  struct Repeat {
    std::optional<ConvBn<T>> proj;
    std::vector<Ecb<T>> ecbs;
    std::optional<Ltb<T>> ltb;
  };
  struct Stage {
    bool pool = false;
    ConvBn<T> embed;
    std::vector<Repeat> repeats;
  };

  /// Deterministic initialisation from `seed`.
  static MedViT build(const ModelConfig& config, std::uint64_t seed);

  MedViT(MedViT&&) noexcept = default;
  MedViT& operator=(MedViT&&) noexcept = default;
  MedViT(const MedViT&) = delete;
  MedViT& operator=(const MedViT&) = delete;

  const ModelConfig& config() const { return config_; }

  /// images (N, in_channels, H, W) -> logits (N, num_classes)
  Tensor<T> forward(const Tensor<T>& images, const ForwardHooks<T>* hooks = nullptr);

  ModuleRegistry<T> modules();
  std::vector<NamedParameter<T>> parameters() { return modules().parameters(); }
  std::vector<NamedBuffer<T>> buffers() { return modules().buffers(); }

  void set_training(bool training);
  bool training() const { return training_; }
  void set_requires_grad(bool value);
  void zero_grad();

  std::vector<std::string> layer_names() const;
  /// ESA output inside the final LTB.
  std::string default_cam_layer() const;

  std::vector<ConvBn<T>> stem;
  std::vector<Stage> stages;
  nn::BatchNormState<T> head_norm;
  nn::LinearParams<T> head;

 private:
  MedViT() = default;

  ModelConfig config_;
  bool training_ = true;
};

/// Sum of element counts of all trainable tensors.
template <typename T>
std::size_t count_params(MedViT<T>& model);

extern template class MedViT<float>;
extern template class MedViT<double>;

}  // namespace medvit
