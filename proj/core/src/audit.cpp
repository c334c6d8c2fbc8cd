#include "medvit/audit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "medvit/ops.hpp"

namespace medvit {

namespace {

class Walker {
 public:
  Walker(AuditReport& report, std::size_t batch) : r_(report), n_(batch) {}

  void begin(const std::string& module) { r_.modules.push_back({module, 0, 0}); }

  // Returns the output spatial size.
  std::size_t conv(const std::string& name, std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                   std::size_t pad, std::size_t groups, bool bias, std::size_t hw) {
    const std::size_t o = (hw + 2 * pad - k) / stride + 1;
    const std::uint64_t params = static_cast<std::uint64_t>(out) * (in / groups) * k * k + (bias ? out : 0);
    const std::uint64_t macs = static_cast<std::uint64_t>(n_) * out * o * o * (in / groups) * k * k;
    add(name, "conv", params, macs, shape(out, o));
    return o;
  }

  void bn(const std::string& name, std::size_t c, std::size_t hw) { add(name, "bn", 2 * c, 0, shape(c, hw)); }

  // conv (no bias) + BN
  std::size_t conv_bn(const std::string& name, std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                      std::size_t pad, std::size_t groups, std::size_t hw) {
    const std::size_t o = conv(name + ".conv", in, out, k, stride, pad, groups, false, hw);
    bn(name + ".bn", out, o);
    return o;
  }

  void matmul(const std::string& name, std::uint64_t macs, const std::string& out) { add(name, "matmul", 0, macs, out); }

  void linear(const std::string& name, std::size_t in, std::size_t out) {
    add(name, "linear", static_cast<std::uint64_t>(in) * out + out, static_cast<std::uint64_t>(n_) * in * out,
        to_string(Shape{n_, out}));
  }

  std::size_t batch() const { return n_; }

 private:
  std::string shape(std::size_t c, std::size_t hw) const {
    return to_string(Shape{n_, c, hw, hw});
  }

  void add(const std::string& name, const char* kind, std::uint64_t params, std::uint64_t macs, std::string out) {
    r_.layers.push_back({name, kind, params, macs, std::move(out)});
    r_.modules.back().params += params;
    r_.modules.back().macs += macs;
    r_.total_params += params;
    r_.total_flops += macs;
  }

  AuditReport& r_;
  std::size_t n_;
};

void audit_mhca(Walker& w, const std::string& p, std::size_t c, std::size_t head_dim, std::size_t hw) {
  w.conv_bn(p + ".group", c, c, 3, 1, 1, c / head_dim, hw);
  w.conv(p + ".project", c, c, 1, 1, 0, 1, true, hw);
}

void audit_lffn(Walker& w, const std::string& p, std::size_t c, std::size_t expansion, std::size_t hw) {
  const std::size_t hidden = c * expansion;
  w.conv_bn(p + ".expand", c, hidden, 1, 1, 0, 1, hw);
  w.conv_bn(p + ".dw", hidden, hidden, 3, 1, 1, hidden, hw);
  w.conv(p + ".project", hidden, c, 1, 1, 0, 1, true, hw);
}

void audit_esa(Walker& w, const std::string& p, std::size_t c, std::size_t head_dim, std::size_t stride,
               std::size_t hw) {
  const std::size_t pooled = stride > 1 ? (hw - stride) / stride + 1 : hw;
  w.conv(p + ".q", c, c, 1, 1, 0, 1, true, hw);
  w.bn(p + ".pool_bn", c, pooled);
  w.conv(p + ".k", c, c, 1, 1, 0, 1, true, pooled);
  w.conv(p + ".v", c, c, 1, 1, 0, 1, true, pooled);
  const std::uint64_t tokens = static_cast<std::uint64_t>(hw) * hw;
  const std::uint64_t keys = static_cast<std::uint64_t>(pooled) * pooled;
  const std::size_t heads = c / head_dim;
  w.matmul(p + ".qk", w.batch() * tokens * keys * c, to_string(Shape{w.batch(), heads, tokens, keys}));
  w.matmul(p + ".av", w.batch() * tokens * keys * c, to_string(Shape{w.batch(), heads, tokens, head_dim}));
  w.conv(p + ".o", c, c, 1, 1, 0, 1, true, hw);
}

}  // namespace

AuditReport audit_model(const ModelConfig& config, std::size_t input_size, std::size_t batch) {
  ModelConfig cfg = config;
  cfg.input_size = input_size;
  cfg.validate();
  if (batch == 0) throw ConfigError("audit: batch must be positive");
  AuditReport r;
  r.model = cfg.name;
  r.input_size = input_size;
  r.batch = batch;
  Walker w(r, batch);

  std::size_t hw = input_size;
  std::size_t c = cfg.in_channels;
  for (std::size_t i = 0; i < cfg.stem.size(); ++i) {
    const std::string name = "stem." + std::to_string(i);
    w.begin(name);
    hw = w.conv_bn(name, c, cfg.stem[i].out_channels, 3, cfg.stem[i].stride, 1, 1, hw);
    c = cfg.stem[i].out_channels;
  }
  for (std::size_t si = 0; si < cfg.stages.size(); ++si) {
    const StageSpec& st = cfg.stages[si];
    const std::string sname = "stage" + std::to_string(si + 1);
    if (st.patch_embed == PatchEmbedKind::PoolPointwise) hw = (hw - 2) / 2 + 1;
    w.begin(sname + ".embed");
    w.conv_bn(sname + ".embed", c, st.ecb_channels, 1, 1, 0, 1, hw);
    c = st.ecb_channels;
    for (std::size_t r_i = 0; r_i < st.repeat; ++r_i) {
      const std::string rname = sname + ".r" + std::to_string(r_i);
      if (c != st.ecb_channels) {
        w.begin(rname + ".proj");
        w.conv_bn(rname + ".proj", c, st.ecb_channels, 1, 1, 0, 1, hw);
        c = st.ecb_channels;
      }
      for (std::size_t j = 0; j < st.ecb_count; ++j) {
        const std::string b = rname + ".ecb" + std::to_string(j);
        w.begin(b);
        audit_mhca(w, b + ".mhca", c, cfg.head_dim, hw);
        audit_lffn(w, b + ".lffn", c, cfg.ecb_expansion, hw);
      }
      if (st.ltb_count) {
        const std::string b = rname + ".ltb";
        const auto [a, m] = cfg.ltb_split(st.ltb_channels);
        w.begin(b);
        w.conv_bn(b + ".proj_in", c, a, 1, 1, 0, 1, hw);
        audit_esa(w, b + ".esa", a, cfg.head_dim, st.esa_stride, hw);
        w.conv_bn(b + ".proj_mid", a, m, 1, 1, 0, 1, hw);
        audit_mhca(w, b + ".mhca", m, cfg.head_dim, hw);
        audit_lffn(w, b + ".lffn", st.ltb_channels, cfg.ltb_expansion, hw);
        c = st.ltb_channels;
      }
    }
  }
  w.begin("head");
  w.bn("head.bn", c, hw);
  w.linear("head.fc", c, cfg.num_classes);
  return r;
}

std::uint64_t count_flops(const ModelConfig& config, std::size_t input_size, std::size_t batch) {
  return audit_model(config, input_size, batch).total_flops;
}

void write_audit_table(std::ostream& out, const AuditReport& r) {
  std::size_t width = 6;
  for (const auto& m : r.modules) width = std::max(width, m.name.size());
  const auto flags = out.flags();
  out << std::left << std::setw(static_cast<int>(width)) << "module" << std::right << std::setw(14) << "params"
      << std::setw(18) << "MACs" << '\n';
  out << std::string(width + 32, '-') << '\n';
  for (const auto& m : r.modules) {
    out << std::left << std::setw(static_cast<int>(width)) << m.name << std::right << std::setw(14) << m.params
        << std::setw(18) << m.macs << '\n';
  }
  out << std::string(width + 32, '-') << '\n';
  out << std::left << std::setw(static_cast<int>(width)) << "total" << std::right << std::setw(14) << r.total_params
      << std::setw(18) << r.total_flops << '\n';
  out << std::fixed << std::setprecision(3) << r.model << " @" << r.input_size << ": "
      << static_cast<double>(r.total_params) / 1e6 << " M params, " << static_cast<double>(r.total_flops) / 1e9
      << " G MACs\n";
  out.flags(flags);
}

void write_audit_csv(std::ostream& out, const AuditReport& r) {
  out << "layer,kind,output,params,macs\n";
  for (const auto& l : r.layers) {
    out << l.name << ',' << l.kind << ",\"" << l.output << "\"," << l.params << ',' << l.macs << '\n';
  }
  out << "total,,," << r.total_params << ',' << r.total_flops << '\n';
}

template <typename T>
Tensor<T> grad_cam(const TappedForward<T>& forward, const std::string& layer, std::size_t target) {
  Tensor<T> activation;
  TapFn<T> tap = [&](const std::string& name, const Tensor<T>& a) {
    if (name == layer) activation = a;
  };
  Tensor<T> logits = forward(tap);
  if (!activation.defined()) throw ConfigError("grad_cam: layer '" + layer + "' not found");
  if (activation.rank() != 4 || activation.dim(0) != 1) {
    throw ShapeError("grad_cam: expected a (1, C, h, w) activation, got " + to_string(activation.shape()));
  }
  if (logits.rank() != 2 || logits.dim(0) != 1) throw ShapeError("grad_cam: expected (1, K) logits");
  if (target >= logits.dim(1)) {
    throw ConfigError("grad_cam: class " + std::to_string(target) + " out of range for " +
                      std::to_string(logits.dim(1)) + " classes");
  }
  const std::size_t c = activation.dim(1), h = activation.dim(2), w = activation.dim(3);
  std::vector<T> grad(c * h * w, T(0));
  if (activation.requires_grad()) {
    Tensor<T> score = sum(slice(logits, 1, target, 1));
    score.backward();
    if (activation.has_grad()) {
      const auto g = activation.grad();
      grad.assign(g.begin(), g.end());
    }
  }
  const auto a = activation.data();
  std::vector<T> cam(h * w, T(0));
  for (std::size_t ch = 0; ch < c; ++ch) {
    T weight = 0;
    for (std::size_t i = 0; i < h * w; ++i) weight += grad[ch * h * w + i];
    weight /= static_cast<T>(h * w);
    for (std::size_t i = 0; i < h * w; ++i) cam[i] += weight * a[ch * h * w + i];
  }
  for (auto& v : cam) v = std::max(v, T(0));
  const auto [lo, hi] = std::minmax_element(cam.begin(), cam.end());
  const T low = *lo, range = *hi - *lo;
  for (auto& v : cam) v = range > T(0) ? (v - low) / range : T(0);
  return Tensor<T>({h, w}, std::move(cam));
}

template <typename T>
Tensor<T> grad_cam(MedViT<T>& model, const Tensor<T>& image, std::size_t target, const std::string& layer) {
  if (image.rank() != 4 || image.dim(0) != 1) {
    throw ShapeError("grad_cam: expected one image (1, C, H, W), got " + to_string(image.shape()));
  }
  const bool was_training = model.training();
  model.set_training(false);
  Tensor<T> input = image.copy();
  input.set_requires_grad(true);
  TappedForward<T> forward = [&](const TapFn<T>& tap) {
    ForwardHooks<T> hooks;
    hooks.tap = tap;
    return model.forward(input, &hooks);
  };
  Tensor<T> cam;
  try {
    cam = grad_cam(forward, layer, target);
  } catch (...) {
    model.set_training(was_training);
    model.zero_grad();
    throw;
  }
  model.set_training(was_training);
  model.zero_grad();
  return cam;
}

void write_pgm(const std::filesystem::path& path, std::span<const double> values, std::size_t height,
               std::size_t width) {
  if (values.size() != height * width) throw ShapeError("write_pgm: value count differs from height*width");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("write_pgm: cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  for (double v : values) {
    const double clamped = std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(clamped * 255.0))));
  }
  if (!out) throw DataError("write_pgm: write failed for " + path.string());
}

#define MEDVIT_INSTANTIATE_AUDIT(T)                                                                \
  template Tensor<T> grad_cam(const TappedForward<T>&, const std::string&, std::size_t);           \
  template Tensor<T> grad_cam(MedViT<T>&, const Tensor<T>&, std::size_t, const std::string&);

MEDVIT_INSTANTIATE_AUDIT(float)
MEDVIT_INSTANTIATE_AUDIT(double)

}  // namespace medvit
