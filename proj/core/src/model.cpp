#include "medvit/model.hpp"

#include <cmath>
#include <sstream>

#include "medvit/ops.hpp"

namespace medvit {

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Tiny: return "t";
    case Variant::Small: return "s";
    case Variant::Large: return "l";
    case Variant::Toy: return "toy";
  }
  return "?";
}

Variant parse_variant(std::string_view text) {
  if (text == "t" || text == "tiny" || text == "T") return Variant::Tiny;
  if (text == "s" || text == "small" || text == "S") return Variant::Small;
  if (text == "l" || text == "large" || text == "L") return Variant::Large;
  if (text == "toy") return Variant::Toy;
  throw ConfigError("unknown variant '" + std::string(text) + "' (expected t, s, l or toy)");
}

ModelConfig ModelConfig::medvit(Variant variant, std::size_t num_classes, std::size_t input_size) {
  ModelConfig cfg;
  cfg.name = "medvit-" + variant_name(variant);
  cfg.num_classes = num_classes;
  const bool toy = variant == Variant::Toy;
  const std::size_t div = toy ? 8 : 1;
  cfg.stem = {{64 / div, 2}, {32 / div, 1}, {64 / div, 1}, {64 / div, 2}};
  std::size_t stage3_repeat = 1;
  switch (variant) {
    case Variant::Tiny: stage3_repeat = 2; break;
    case Variant::Small: stage3_repeat = 4; break;
    case Variant::Large: stage3_repeat = 6; break;
    case Variant::Toy: stage3_repeat = 1; break;
  }
  cfg.stages = {
      {PatchEmbedKind::Pointwise, 3, 96 / div, 0, 0, 1, 1},
      {PatchEmbedKind::PoolPointwise, 3, 192 / div, 1, 256 / div, 1, 4},
      {PatchEmbedKind::PoolPointwise, 4, 384 / div, 1, 512 / div, stage3_repeat, 2},
      {PatchEmbedKind::PoolPointwise, 2, 768 / div, 1, 1024 / div, 1, 1},
  };
  cfg.head_dim = 32 / div;
  cfg.input_size = input_size ? input_size : (toy ? 32 : 224);
  cfg.validate();
  return cfg;
}

ModelConfig ModelConfig::micro(std::size_t num_classes) {
  ModelConfig cfg;
  cfg.name = "medvit-micro";
  cfg.num_classes = num_classes;
  cfg.stem = {{4, 2}, {4, 2}};
  cfg.stages = {
      {PatchEmbedKind::Pointwise, 1, 4, 0, 0, 1, 1},
      {PatchEmbedKind::Pointwise, 1, 4, 1, 8, 1, 1},
      {PatchEmbedKind::PoolPointwise, 0, 8, 1, 8, 1, 2},
  };
  cfg.head_dim = 2;
  cfg.ecb_expansion = 2;
  cfg.ltb_expansion = 2;
  cfg.input_size = 16;
  cfg.validate();
  return cfg;
}

std::pair<std::size_t, std::size_t> ModelConfig::ltb_split(std::size_t ltb_channels) const {
  const double esa = shrink_ratio * static_cast<double>(ltb_channels);
  const double rounded = std::round(esa);
  if (std::abs(esa - rounded) > 1e-9 || rounded <= 0 || rounded >= static_cast<double>(ltb_channels)) {
    std::ostringstream os;
    os << "shrink ratio " << shrink_ratio << " does not split " << ltb_channels << " LTB channels into integers";
    throw ConfigError(os.str());
  }
  const auto a = static_cast<std::size_t>(rounded);
  return {a, ltb_channels - a};
}

std::vector<std::size_t> ModelConfig::spatial_trace(std::size_t input) const {
  std::vector<std::size_t> trace;
  std::size_t h = input;
  for (const auto& s : stem) h = nn::conv_output_size(h, 3, s.stride, 1);
  trace.push_back(h);
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& st = stages[i];
    if (st.patch_embed == PatchEmbedKind::PoolPointwise) {
      if (h < 2) throw ConfigError("stage " + std::to_string(i + 1) + ": input " + std::to_string(h) + " too small to pool");
      h = (h - 2) / 2 + 1;
    }
    if (st.ltb_count && st.esa_stride > h) {
      throw ConfigError("stage " + std::to_string(i + 1) + ": ESA pool stride " + std::to_string(st.esa_stride) +
                        " exceeds spatial size " + std::to_string(h));
    }
    trace.push_back(h);
  }
  return trace;
}

void ModelConfig::validate() const {
  if (in_channels == 0 || num_classes == 0 || input_size == 0 || head_dim == 0) {
    throw ConfigError("in_channels, num_classes, input_size and head_dim must be positive");
  }
  if (stem.empty() || stages.empty()) throw ConfigError("model needs a stem and at least one stage");
  if (!(shrink_ratio > 0.0 && shrink_ratio < 1.0)) throw ConfigError("shrink ratio must lie in (0, 1)");
  if (ecb_expansion == 0 || ltb_expansion == 0) throw ConfigError("LFFN expansion must be positive");
  for (const auto& s : stem) {
    if (s.out_channels == 0 || s.stride == 0) throw ConfigError("stem convolutions need positive channels and stride");
  }
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& st = stages[i];
    const std::string where = "stage " + std::to_string(i + 1) + ": ";
    if (st.ecb_channels == 0 || st.repeat == 0) throw ConfigError(where + "channels and repeat must be positive");
    if (st.ltb_count > 1) throw ConfigError(where + "at most one LTB per repeat");
    if (st.ecb_channels % head_dim != 0) {
      throw ConfigError(where + std::to_string(st.ecb_channels) + " channels not divisible by head_dim " +
                        std::to_string(head_dim));
    }
    if (st.ltb_count) {
      if (st.esa_stride == 0) throw ConfigError(where + "ESA stride must be positive");
      const auto [a, m] = ltb_split(st.ltb_channels);
      if (a % head_dim != 0 || m % head_dim != 0) {
        throw ConfigError(where + "LTB split " + std::to_string(a) + "/" + std::to_string(m) +
                          " not divisible by head_dim " + std::to_string(head_dim));
      }
    }
  }
  spatial_trace(input_size);
}

std::string ModelConfig::canonical() const {
  std::ostringstream os;
  os << "name=" << name << ";in=" << in_channels << ";stem=";
  for (const auto& s : stem) os << s.out_channels << '/' << s.stride << ',';
  os << ";stages=";
  for (const auto& st : stages) {
    os << (st.patch_embed == PatchEmbedKind::PoolPointwise ? "pool" : "pw") << ':' << st.ecb_count << 'x'
       << st.ecb_channels << '+' << st.ltb_count << 'x' << st.ltb_channels << '*' << st.repeat << '@'
       << st.esa_stride << '|';
  }
  os << ";classes=" << num_classes << ";input=" << input_size << ";head_dim=" << head_dim
     << ";shrink=" << shrink_ratio << ";ecb_exp=" << ecb_expansion << ";ltb_exp=" << ltb_expansion;
  return os.str();
}

std::uint64_t ModelConfig::digest() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

template <typename T>
std::vector<NamedParameter<T>> ModuleRegistry<T>::parameters() const {
  std::vector<NamedParameter<T>> out;
  for (const auto& [name, conv] : convs) {
    out.push_back({name + ".weight", conv->weight, ParamRole::Weight});
    if (conv->options.bias) out.push_back({name + ".bias", conv->bias, ParamRole::Bias});
  }
  for (const auto& [name, bn] : norms) {
    out.push_back({name + ".gamma", bn->gamma, ParamRole::BnGamma});
    out.push_back({name + ".beta", bn->beta, ParamRole::BnBeta});
  }
  for (const auto& [name, lin] : linears) {
    out.push_back({name + ".weight", lin->weight, ParamRole::Weight});
    out.push_back({name + ".bias", lin->bias, ParamRole::Bias});
  }
  return out;
}

template <typename T>
std::vector<NamedBuffer<T>> ModuleRegistry<T>::buffers() const {
  std::vector<NamedBuffer<T>> out;
  for (const auto& [name, bn] : norms) {
    out.push_back({name + ".running_mean", &bn->running_mean});
    out.push_back({name + ".running_var", &bn->running_var});
  }
  return out;
}

template <typename T>
Tensor<T> seq2img(const Tensor<T>& tokens, std::size_t h, std::size_t w) {
  if (tokens.rank() != 3) throw ShapeError("seq2img: expected (N, hw, d), got " + to_string(tokens.shape()));
  if (tokens.dim(1) != h * w) {
    throw ShapeError("seq2img: " + std::to_string(tokens.dim(1)) + " tokens do not fill a " + std::to_string(h) +
                     "x" + std::to_string(w) + " map");
  }
  const std::size_t n = tokens.dim(0), d = tokens.dim(2);
  return reshape(permute(tokens, {0, 2, 1}), {n, d, h, w});
}

template <typename T>
Tensor<T> img2seq(const Tensor<T>& image) {
  if (image.rank() != 4) throw ShapeError("img2seq: expected (N, d, h, w), got " + to_string(image.shape()));
  const std::size_t n = image.dim(0), d = image.dim(1), hw = image.dim(2) * image.dim(3);
  return permute(reshape(image, {n, d, hw}), {0, 2, 1});
}

template <typename T>
ConvBn<T> ConvBn<T>::init(const nn::Conv2dOptions& options, Rng& rng) {
  ConvBn block;
  block.conv = nn::Conv2dParams<T>::init(options, rng);
  block.bn = nn::BatchNormState<T>::init(options.out_channels);
  return block;
}

template <typename T>
Tensor<T> ConvBn<T>::forward(const Tensor<T>& x) {
  return nn::batch_norm(nn::conv2d(x, conv), bn);
}

template <typename T>
void ConvBn<T>::collect(const std::string& prefix, ModuleRegistry<T>& reg) {
  reg.convs.emplace_back(prefix + ".conv", &conv);
  reg.norms.emplace_back(prefix + ".bn", &bn);
}

namespace {

nn::Conv2dOptions pointwise(std::size_t in, std::size_t out, bool bias) {
  nn::Conv2dOptions o;
  o.in_channels = in;
  o.out_channels = out;
  o.bias = bias;
  return o;
}

nn::Conv2dOptions grouped3x3(std::size_t channels, std::size_t groups) {
  nn::Conv2dOptions o;
  o.in_channels = channels;
  o.out_channels = channels;
  o.kernel_h = 3;
  o.kernel_w = 3;
  o.padding = 1;
  o.groups = groups;
  o.bias = false;
  return o;
}

void check_channels(const char* block, std::size_t got, std::size_t want) {
  if (got != want) {
    throw ShapeError(std::string(block) + ": input has " + std::to_string(got) + " channels, block expects " +
                     std::to_string(want));
  }
}

}  // namespace

template <typename T>
Lffn<T> Lffn<T>::init(std::size_t channels, std::size_t expansion, Rng& rng) {
  Lffn block;
  const std::size_t hidden = channels * expansion;
  block.expand = ConvBn<T>::init(pointwise(channels, hidden, false), rng);
  block.depthwise = ConvBn<T>::init(grouped3x3(hidden, hidden), rng);
  block.project = nn::Conv2dParams<T>::init(pointwise(hidden, channels, true), rng);
  return block;
}

template <typename T>
Tensor<T> Lffn<T>::forward(const Tensor<T>& x) {
  if (x.rank() == 4) check_channels("lffn", x.dim(1), expand.conv.options.in_channels);
  Tensor<T> h = relu(expand.forward(x));
  h = relu(depthwise.forward(h));
  return nn::conv2d(h, project);
}

template <typename T>
void Lffn<T>::collect(const std::string& prefix, ModuleRegistry<T>& reg) {
  expand.collect(prefix + ".expand", reg);
  depthwise.collect(prefix + ".dw", reg);
  reg.convs.emplace_back(prefix + ".project", &project);
}

template <typename T>
Mhca<T> Mhca<T>::init(std::size_t channels, std::size_t head_dim, Rng& rng) {
  if (head_dim == 0 || channels % head_dim != 0) {
    throw ConfigError("mhca: " + std::to_string(channels) + " channels not divisible by head_dim " +
                      std::to_string(head_dim));
  }
  Mhca block;
  block.heads = ConvBn<T>::init(grouped3x3(channels, channels / head_dim), rng);
  block.project = nn::Conv2dParams<T>::init(pointwise(channels, channels, true), rng);
  return block;
}

template <typename T>
Tensor<T> Mhca<T>::mix(const Tensor<T>& x) {
  if (x.rank() == 4) check_channels("mhca", x.dim(1), heads.conv.options.in_channels);
  return relu(heads.forward(x));
}

template <typename T>
Tensor<T> Mhca<T>::forward(const Tensor<T>& x) {
  return nn::conv2d(mix(x), project);
}

template <typename T>
void Mhca<T>::collect(const std::string& prefix, ModuleRegistry<T>& reg) {
  heads.collect(prefix + ".group", reg);
  reg.convs.emplace_back(prefix + ".project", &project);
}

template <typename T>
Esa<T> Esa<T>::init(std::size_t channels, std::size_t head_dim, std::size_t stride, Rng& rng) {
  if (head_dim == 0 || channels % head_dim != 0) {
    throw ConfigError("esa: " + std::to_string(channels) + " channels not divisible by head_dim " +
                      std::to_string(head_dim));
  }
  if (stride == 0) throw ConfigError("esa: pool stride must be positive");
  Esa block;
  block.head_dim = head_dim;
  block.stride = stride;
  block.query = nn::Conv2dParams<T>::init(pointwise(channels, channels, true), rng);
  block.key = nn::Conv2dParams<T>::init(pointwise(channels, channels, true), rng);
  block.value = nn::Conv2dParams<T>::init(pointwise(channels, channels, true), rng);
  block.output = nn::Conv2dParams<T>::init(pointwise(channels, channels, true), rng);
  block.pool_norm = nn::BatchNormState<T>::init(channels);
  return block;
}

template <typename T>
Tensor<T> Esa<T>::forward(const Tensor<T>& x, Tensor<T>* attention) {
  if (x.rank() != 4) throw ShapeError("esa: input must be NCHW, got " + to_string(x.shape()));
  const std::size_t channels = query.options.in_channels;
  check_channels("esa", x.dim(1), channels);
  const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
  if (h < stride || w < stride) {
    throw ShapeError("esa: pooled spatial size < 1 (input " + std::to_string(h) + "x" + std::to_string(w) +
                     ", stride " + std::to_string(stride) + ")");
  }
  const std::size_t heads = head_count();
  const std::size_t hw = h * w;

  Tensor<T> pooled = stride > 1 ? nn::avg_pool2d(x, stride, stride) : x;
  pooled = nn::batch_norm(pooled, pool_norm);
  const std::size_t keys = pooled.dim(2) * pooled.dim(3);

  // (N, tokens, C) -> (N, tokens, heads, d) and per-head layouts
  Tensor<T> q = reshape(img2seq(nn::conv2d(x, query)), {n, hw, heads, head_dim});
  Tensor<T> k = reshape(img2seq(nn::conv2d(pooled, key)), {n, keys, heads, head_dim});
  Tensor<T> v = reshape(img2seq(nn::conv2d(pooled, value)), {n, keys, heads, head_dim});
  q = permute(q, {0, 2, 1, 3});  // (N, heads, hw, d)
  k = permute(k, {0, 2, 3, 1});  // (N, heads, d, L)
  v = permute(v, {0, 2, 1, 3});  // (N, heads, L, d)

  Tensor<T> scores = div_scalar(matmul(q, k), static_cast<T>(std::sqrt(static_cast<double>(head_dim))));
  Tensor<T> weights = softmax(scores, 3);
  if (attention) *attention = weights;
  Tensor<T> mixed = permute(matmul(weights, v), {0, 2, 1, 3});  // (N, hw, heads, d)
  mixed = seq2img(reshape(mixed, {n, hw, channels}), h, w);
  return nn::conv2d(mixed, output);
}

template <typename T>
void Esa<T>::collect(const std::string& prefix, ModuleRegistry<T>& reg) {
  reg.convs.emplace_back(prefix + ".q", &query);
  reg.convs.emplace_back(prefix + ".k", &key);
  reg.convs.emplace_back(prefix + ".v", &value);
  reg.convs.emplace_back(prefix + ".o", &output);
  reg.norms.emplace_back(prefix + ".pool_bn", &pool_norm);
}

template <typename T>
Ecb<T> Ecb<T>::init(std::size_t channels, std::size_t head_dim, std::size_t expansion, Rng& rng) {
  Ecb block;
  block.mhca = Mhca<T>::init(channels, head_dim, rng);
  block.lffn = Lffn<T>::init(channels, expansion, rng);
  return block;
}

template <typename T>
Tensor<T> Ecb<T>::forward(const Tensor<T>& x) {
  Tensor<T> mixed = add(mhca.forward(x), x);
  return add(lffn.forward(mixed), mixed);
}

template <typename T>
void Ecb<T>::collect(const std::string& prefix, ModuleRegistry<T>& reg) {
  mhca.collect(prefix + ".mhca", reg);
  lffn.collect(prefix + ".lffn", reg);
}

template <typename T>
Ltb<T> Ltb<T>::init(std::size_t in_channels, std::size_t out_channels, double shrink_ratio, std::size_t head_dim,
                    std::size_t esa_stride, std::size_t expansion, Rng& rng) {
  ModelConfig probe;
  probe.shrink_ratio = shrink_ratio;
  const auto [esa_channels, mhca_channels] = probe.ltb_split(out_channels);
  Ltb block;
  block.proj_in = ConvBn<T>::init(pointwise(in_channels, esa_channels, false), rng);
  block.esa = Esa<T>::init(esa_channels, head_dim, esa_stride, rng);
  block.proj_mid = ConvBn<T>::init(pointwise(esa_channels, mhca_channels, false), rng);
  block.mhca = Mhca<T>::init(mhca_channels, head_dim, rng);
  block.lffn = Lffn<T>::init(out_channels, expansion, rng);
  return block;
}

template <typename T>
Tensor<T> Ltb<T>::forward(const Tensor<T>& x, const std::string& name, const TapFn<T>* tap) {
  if (x.rank() == 4) check_channels("ltb", x.dim(1), proj_in.conv.options.in_channels);
  Tensor<T> reduced = proj_in.forward(x);
  Tensor<T> attended = esa.forward(reduced);
  if (tap && *tap) (*tap)(name + ".esa", attended);
  Tensor<T> global = add(attended, reduced);
  Tensor<T> narrowed = proj_mid.forward(global);
  Tensor<T> convolved = mhca.forward(narrowed);
  if (tap && *tap) (*tap)(name + ".mhca", convolved);
  Tensor<T> local = add(convolved, narrowed);
  Tensor<T> fused = concat(std::vector<Tensor<T>>{global, local}, 1);
  return add(lffn.forward(fused), fused);
}

template <typename T>
void Ltb<T>::collect(const std::string& prefix, ModuleRegistry<T>& reg) {
  proj_in.collect(prefix + ".proj_in", reg);
  esa.collect(prefix + ".esa", reg);
  proj_mid.collect(prefix + ".proj_mid", reg);
  mhca.collect(prefix + ".mhca", reg);
  lffn.collect(prefix + ".lffn", reg);
}

template <typename T>
MedViT<T> MedViT<T>::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  MedViT model;
  model.config_ = config;
  Rng rng(seed);
  std::size_t c = config.in_channels;
  for (const auto& s : config.stem) {
    nn::Conv2dOptions o;
    o.in_channels = c;
    o.out_channels = s.out_channels;
    o.kernel_h = o.kernel_w = 3;
    o.stride = s.stride;
    o.padding = 1;
    o.bias = false;
    model.stem.push_back(ConvBn<T>::init(o, rng));
    c = s.out_channels;
  }
  for (const auto& spec : config.stages) {
    Stage stage;
    stage.pool = spec.patch_embed == PatchEmbedKind::PoolPointwise;
    stage.embed = ConvBn<T>::init(pointwise(c, spec.ecb_channels, false), rng);
    c = spec.ecb_channels;
    for (std::size_t r = 0; r < spec.repeat; ++r) {
      Repeat rep;
      if (c != spec.ecb_channels) {
        rep.proj = ConvBn<T>::init(pointwise(c, spec.ecb_channels, false), rng);
        c = spec.ecb_channels;
      }
      for (std::size_t j = 0; j < spec.ecb_count; ++j) {
        rep.ecbs.push_back(Ecb<T>::init(c, config.head_dim, config.ecb_expansion, rng));
      }
      if (spec.ltb_count) {
        rep.ltb = Ltb<T>::init(c, spec.ltb_channels, config.shrink_ratio, config.head_dim, spec.esa_stride,
                               config.ltb_expansion, rng);
        c = spec.ltb_channels;
      }
      stage.repeats.push_back(std::move(rep));
    }
    model.stages.push_back(std::move(stage));
  }
  model.head_norm = nn::BatchNormState<T>::init(c);
  model.head = nn::LinearParams<T>::init(c, config.num_classes, rng);
  return model;
}

template <typename T>
Tensor<T> MedViT<T>::forward(const Tensor<T>& images, const ForwardHooks<T>* hooks) {
  if (images.rank() != 4 || images.dim(1) != config_.in_channels) {
    throw ShapeError("medvit: expected images (N, " + std::to_string(config_.in_channels) + ", H, W), got " +
                     to_string(images.shape()));
  }
  const TapFn<T>* tap = hooks && hooks->tap ? &hooks->tap : nullptr;
  auto emit = [tap](const std::string& name, const Tensor<T>& t) {
    if (tap) (*tap)(name, t);
  };

  Tensor<T> x = images;
  for (auto& s : stem) x = relu(s.forward(x));
  emit("stem", x);
  for (std::size_t si = 0; si < stages.size(); ++si) {
    Stage& stage = stages[si];
    const std::string name = "stage" + std::to_string(si + 1);
    if (stage.pool) x = nn::avg_pool2d(x, 2, 2);
    x = stage.embed.forward(x);
    emit(name + ".embed", x);
    for (std::size_t r = 0; r < stage.repeats.size(); ++r) {
      Repeat& rep = stage.repeats[r];
      const std::string rname = name + ".r" + std::to_string(r);
      if (rep.proj) x = rep.proj->forward(x);
      for (std::size_t j = 0; j < rep.ecbs.size(); ++j) {
        x = rep.ecbs[j].forward(x);
        emit(rname + ".ecb" + std::to_string(j), x);
      }
      if (rep.ltb) {
        x = rep.ltb->forward(x, rname + ".ltb", tap);
        emit(rname + ".ltb", x);
      }
    }
    emit(name, x);
    if (hooks && hooks->after_stage) x = hooks->after_stage(si + 1, x);
  }
  x = nn::batch_norm(x, head_norm);
  return nn::linear(nn::global_avg_pool(x), head);
}

template <typename T>
ModuleRegistry<T> MedViT<T>::modules() {
  ModuleRegistry<T> reg;
  for (std::size_t i = 0; i < stem.size(); ++i) stem[i].collect("stem." + std::to_string(i), reg);
  for (std::size_t si = 0; si < stages.size(); ++si) {
    const std::string name = "stage" + std::to_string(si + 1);
    stages[si].embed.collect(name + ".embed", reg);
    for (std::size_t r = 0; r < stages[si].repeats.size(); ++r) {
      Repeat& rep = stages[si].repeats[r];
      const std::string rname = name + ".r" + std::to_string(r);
      if (rep.proj) rep.proj->collect(rname + ".proj", reg);
      for (std::size_t j = 0; j < rep.ecbs.size(); ++j) rep.ecbs[j].collect(rname + ".ecb" + std::to_string(j), reg);
      if (rep.ltb) rep.ltb->collect(rname + ".ltb", reg);
    }
  }
  reg.norms.emplace_back("head.bn", &head_norm);
  reg.linears.emplace_back("head.fc", &head);
  return reg;
}

template <typename T>
void MedViT<T>::set_training(bool training) {
  training_ = training;
  for (auto& [name, bn] : modules().norms) bn->training = training;
}

template <typename T>
void MedViT<T>::set_requires_grad(bool value) {
  for (auto& p : parameters()) p.tensor.set_requires_grad(value);
}

template <typename T>
void MedViT<T>::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

template <typename T>
std::vector<std::string> MedViT<T>::layer_names() const {
  std::vector<std::string> names{"stem"};
  for (std::size_t si = 0; si < stages.size(); ++si) {
    const std::string name = "stage" + std::to_string(si + 1);
    names.push_back(name + ".embed");
    for (std::size_t r = 0; r < stages[si].repeats.size(); ++r) {
      const Repeat& rep = stages[si].repeats[r];
      const std::string rname = name + ".r" + std::to_string(r);
      for (std::size_t j = 0; j < rep.ecbs.size(); ++j) names.push_back(rname + ".ecb" + std::to_string(j));
      if (rep.ltb) {
        names.push_back(rname + ".ltb.esa");
        names.push_back(rname + ".ltb.mhca");
        names.push_back(rname + ".ltb");
      }
    }
    names.push_back(name);
  }
  return names;
}

template <typename T>
std::string MedViT<T>::default_cam_layer() const {
  for (std::size_t si = stages.size(); si-- > 0;) {
    for (std::size_t r = stages[si].repeats.size(); r-- > 0;) {
      if (stages[si].repeats[r].ltb) {
        return "stage" + std::to_string(si + 1) + ".r" + std::to_string(r) + ".ltb.esa";
      }
    }
  }
  return "stage" + std::to_string(stages.size());
}

template <typename T>
std::size_t count_params(MedViT<T>& model) {
  std::size_t total = 0;
  for (const auto& p : model.parameters()) total += p.tensor.numel();
  return total;
}

#define MEDVIT_INSTANTIATE_MODEL(T)                                           \
  template struct ModuleRegistry<T>;                                          \
  template Tensor<T> seq2img(const Tensor<T>&, std::size_t, std::size_t);     \
  template Tensor<T> img2seq(const Tensor<T>&);                               \
  template struct ConvBn<T>;                                                  \
  template struct Lffn<T>;                                                    \
  template struct Mhca<T>;                                                    \
  template struct Esa<T>;                                                     \
  template struct Ecb<T>;                                                     \
  template struct Ltb<T>;                                                     \
  template class MedViT<T>;                                                   \
  template std::size_t count_params(MedViT<T>&);

MEDVIT_INSTANTIATE_MODEL(float)
MEDVIT_INSTANTIATE_MODEL(double)

}  // namespace medvit
