#include "medvit/nn.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include "medvit/ops.hpp"
#include "medvit/parallel.hpp"

namespace medvit::nn {

namespace {

template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* col) {
  const std::size_t plane = ho * wo;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        T* row = col + ((c * kh + ky) * kw + kx) * plane;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill_n(dst, wo, T(0));
            continue;
          }
          const T* src = x + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* x) {
  const std::size_t plane = ho * wo;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const T* row = col + ((c * kh + ky) * kw + kx) * plane;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* dst = x + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) dst[ix] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

struct ConvGeometry {
  std::size_t n, c, h, w;
  std::size_t oc, kh, kw;
  std::size_t stride, pad, groups;
  std::size_t ho, wo;
  std::size_t cg() const { return c / groups; }
  std::size_t ocg() const { return oc / groups; }
  std::size_t plane() const { return ho * wo; }
  std::size_t patch() const { return cg() * kh * kw; }
  bool direct() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

}  // namespace

void Conv2dOptions::validate() const {
  if (in_channels == 0 || out_channels == 0 || kernel_h == 0 || kernel_w == 0 || stride == 0 || groups == 0) {
    throw ConfigError("conv2d: channels, kernel, stride and groups must be positive");
  }
  if (in_channels % groups != 0 || out_channels % groups != 0) {
    throw ConfigError("conv2d: groups=" + std::to_string(groups) + " must divide in_channels=" +
                      std::to_string(in_channels) + " and out_channels=" + std::to_string(out_channels));
  }
}

std::size_t conv_output_size(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (input + 2 * padding < kernel) {
    throw ShapeError("window " + std::to_string(kernel) + " exceeds padded input extent " +
                     std::to_string(input + 2 * padding));
  }
  return (input + 2 * padding - kernel) / stride + 1;
}

template <typename T>
void kaiming_uniform(Tensor<T>& weight, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (T& v : weight.mutable_data()) v = static_cast<T>(dist(rng));
}

template <typename T>
Conv2dParams<T> Conv2dParams<T>::init(const Conv2dOptions& options, Rng& rng) {
  options.validate();
  Conv2dParams p;
  p.options = options;
  p.weight = Tensor<T>::zeros(
      {options.out_channels, options.in_channels / options.groups, options.kernel_h, options.kernel_w}, true);
  kaiming_uniform(p.weight, (options.in_channels / options.groups) * options.kernel_h * options.kernel_w, rng);
  if (options.bias) p.bias = Tensor<T>::zeros({options.out_channels}, true);
  return p;
}

template <typename T>
BatchNormState<T> BatchNormState<T>::init(std::size_t channels) {
  BatchNormState s;
  s.gamma = Tensor<T>::full({channels}, T(1), true);
  s.beta = Tensor<T>::zeros({channels}, true);
  s.running_mean.assign(channels, T(0));
  s.running_var.assign(channels, T(1));
  return s;
}

template <typename T>
LinearParams<T> LinearParams<T>::init(std::size_t in_features, std::size_t out_features, Rng& rng) {
  LinearParams p;
  p.weight = Tensor<T>::zeros({in_features, out_features}, true);
  kaiming_uniform(p.weight, in_features, rng);
  p.bias = Tensor<T>::zeros({out_features}, true);
  return p;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias, std::size_t stride,
                 std::size_t padding, std::size_t groups) {
  if (x.rank() != 4) throw ShapeError("conv2d: input must be NCHW, got " + to_string(x.shape()));
  if (weight.rank() != 4) throw ShapeError("conv2d: weight must be (out, in/groups, kh, kw), got " + to_string(weight.shape()));
  if (groups == 0 || stride == 0) throw ShapeError("conv2d: stride and groups must be positive");
  ConvGeometry g{};
  g.n = x.dim(0);
  g.c = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.oc = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = stride;
  g.pad = padding;
  g.groups = groups;
  if (g.c % groups != 0 || g.oc % groups != 0) {
    throw ShapeError("conv2d: groups=" + std::to_string(groups) + " does not divide channels in=" +
                     std::to_string(g.c) + " out=" + std::to_string(g.oc));
  }
  if (weight.dim(1) != g.cg()) {
    throw ShapeError("conv2d: channel mismatch, input has " + std::to_string(g.c) + " channels (" +
                     std::to_string(g.cg()) + " per group) but weight expects " + std::to_string(weight.dim(1)));
  }
  if (bias && bias->defined() && (bias->rank() != 1 || bias->dim(0) != g.oc)) {
    throw ShapeError("conv2d: bias shape " + to_string(bias->shape()) + " does not match " +
                     std::to_string(g.oc) + " output channels");
  }
  try {
    g.ho = conv_output_size(g.h, g.kh, stride, padding);
    g.wo = conv_output_size(g.w, g.kw, stride, padding);
  } catch (const ShapeError& e) {
    throw ShapeError(std::string("conv2d: non-positive output size: ") + e.what());
  }

  const bool has_bias = bias && bias->defined();
  const std::size_t P = g.plane();
  const std::size_t K = g.patch();
  auto storage = std::make_shared<std::vector<T>>(g.n * g.oc * P, T(0));
  const T* px = x.data().data();
  const T* pw = weight.data().data();
  const T* pb = has_bias ? bias->data().data() : nullptr;
  T* po = storage->data();

  parallel_for(0, g.n * g.groups, [&](std::size_t item) {
    const std::size_t n = item / g.groups;
    const std::size_t grp = item % g.groups;
    const T* xin = px + (n * g.c + grp * g.cg()) * g.h * g.w;
    std::vector<T> buffer;
    const T* col = xin;
    if (!g.direct()) {
      buffer.resize(K * P);
      im2col(xin, g.cg(), g.h, g.w, g.kh, g.kw, g.stride, g.pad, g.ho, g.wo, buffer.data());
      col = buffer.data();
    }
    for (std::size_t o = 0; o < g.ocg(); ++o) {
      const std::size_t oc = grp * g.ocg() + o;
      T* out = po + (n * g.oc + oc) * P;
      const T* wrow = pw + oc * K;
      for (std::size_t k = 0; k < K; ++k) {
        const T wv = wrow[k];
        const T* crow = col + k * P;
        for (std::size_t p = 0; p < P; ++p) out[p] += wv * crow[p];
      }
      if (pb) {
        for (std::size_t p = 0; p < P; ++p) out[p] = out[p] + pb[oc];
      }
    }
  });
  MacCounter::record(static_cast<std::uint64_t>(g.n) * g.oc * P * K);

  std::vector<Tensor<T>> inputs{x, weight};
  Tensor<T> b = has_bias ? *bias : Tensor<T>();
  if (has_bias) inputs.push_back(b);
  return Tensor<T>::from_op(
      {g.n, g.oc, g.ho, g.wo}, storage, inputs, "conv2d", [x, weight, b, g](std::span<const T> grad) {
        const std::size_t P = g.plane();
        const std::size_t K = g.patch();
        const T* px = x.data().data();
        const T* pw = weight.data().data();
        const T* G = grad.data();
        if (T* gx = x.grad_buffer()) {
          parallel_for(0, g.n, [&](std::size_t n) {
            std::vector<T> dcol(K * P);
            for (std::size_t grp = 0; grp < g.groups; ++grp) {
              std::fill(dcol.begin(), dcol.end(), T(0));
              for (std::size_t o = 0; o < g.ocg(); ++o) {
                const std::size_t oc = grp * g.ocg() + o;
                const T* grow = G + (n * g.oc + oc) * P;
                const T* wrow = pw + oc * K;
                for (std::size_t k = 0; k < K; ++k) {
                  const T wv = wrow[k];
                  T* drow = dcol.data() + k * P;
                  for (std::size_t p = 0; p < P; ++p) drow[p] += wv * grow[p];
                }
              }
              T* gin = gx + (n * g.c + grp * g.cg()) * g.h * g.w;
              if (g.direct()) {
                for (std::size_t i = 0; i < K * P; ++i) gin[i] += dcol[i];
              } else {
                col2im_add(dcol.data(), g.cg(), g.h, g.w, g.kh, g.kw, g.stride, g.pad, g.ho, g.wo, gin);
              }
            }
          });
        }
        if (T* gw = weight.grad_buffer()) {
          std::vector<T> buffer(g.direct() ? 0 : K * P);
          for (std::size_t n = 0; n < g.n; ++n) {
            for (std::size_t grp = 0; grp < g.groups; ++grp) {
              const T* xin = px + (n * g.c + grp * g.cg()) * g.h * g.w;
              const T* col = xin;
              if (!g.direct()) {
                im2col(xin, g.cg(), g.h, g.w, g.kh, g.kw, g.stride, g.pad, g.ho, g.wo, buffer.data());
                col = buffer.data();
              }
              parallel_for(0, g.ocg(), [&](std::size_t o) {
                const std::size_t oc = grp * g.ocg() + o;
                const T* grow = G + (n * g.oc + oc) * P;
                T* gwrow = gw + oc * K;
                for (std::size_t k = 0; k < K; ++k) {
                  const T* crow = col + k * P;
                  T acc = T(0);
                  for (std::size_t p = 0; p < P; ++p) acc += grow[p] * crow[p];
                  gwrow[k] += acc;
                }
              });
            }
          }
        }
        if (b.defined()) {
          if (T* gb = b.grad_buffer()) {
            for (std::size_t oc = 0; oc < g.oc; ++oc) {
              T acc = T(0);
              for (std::size_t n = 0; n < g.n; ++n) {
                const T* grow = G + (n * g.oc + oc) * P;
                for (std::size_t p = 0; p < P; ++p) acc += grow[p];
              }
              gb[oc] += acc;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Conv2dParams<T>& params) {
  if (x.rank() == 4 && x.dim(1) != params.options.in_channels) {
    throw ShapeError("conv2d: channel mismatch, input has " + std::to_string(x.dim(1)) +
                     " channels, layer expects " + std::to_string(params.options.in_channels));
  }
  return conv2d(x, params.weight, params.options.bias ? &params.bias : nullptr, params.options.stride,
                params.options.padding, params.options.groups);
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, BatchNormState<T>& state) {
  if (x.rank() < 2) throw ShapeError("batch_norm: input needs a channel axis, got " + to_string(x.shape()));
  const std::size_t n = x.dim(0);
  const std::size_t c = x.dim(1);
  if (c != state.channels()) {
    throw ShapeError("batch_norm: input has " + std::to_string(c) + " channels, state has " +
                     std::to_string(state.channels()));
  }
  const std::size_t spatial = x.numel() / (n * c);
  const std::size_t count = n * spatial;
  if (state.training && count < 2) {
    throw ShapeError("batch_norm: train mode needs at least 2 values per channel, got shape " + to_string(x.shape()));
  }
  const T* px = x.data().data();
  const T* gamma = state.gamma.data().data();
  const T* beta = state.beta.data().data();
  auto storage = std::make_shared<std::vector<T>>(x.numel());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto denom = std::make_shared<std::vector<T>>(c);
  const T m = static_cast<T>(count);
  for (std::size_t ch = 0; ch < c; ++ch) {
    T mu;
    T var;
    if (state.training) {
      T total = T(0);
      for (std::size_t i = 0; i < n; ++i) {
        const T* src = px + (i * c + ch) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) total += src[s];
      }
      mu = total / m;
      T sq = T(0);
      for (std::size_t i = 0; i < n; ++i) {
        const T* src = px + (i * c + ch) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) {
          const T d = src[s] - mu;
          sq += d * d;
        }
      }
      var = sq / m;
      state.running_mean[ch] = (T(1) - state.momentum) * state.running_mean[ch] + state.momentum * mu;
      state.running_var[ch] = (T(1) - state.momentum) * state.running_var[ch] + state.momentum * (sq / (m - T(1)));
    } else {
      mu = state.running_mean[ch];
      var = state.running_var[ch];
    }
    const T d = std::sqrt(var + state.eps);
    (*denom)[ch] = d;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t base = (i * c + ch) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) {
        const T xh = (px[base + s] - mu) / d;
        (*xhat)[base + s] = xh;
        (*storage)[base + s] = gamma[ch] * xh + beta[ch];
      }
    }
  }
  const bool training = state.training;
  Tensor<T> g_t = state.gamma;
  Tensor<T> b_t = state.beta;
  return Tensor<T>::from_op(
      x.shape(), storage, {x, g_t, b_t}, "batch_norm",
      [x, g_t, b_t, xhat, denom, n, c, spatial, training, m](std::span<const T> grad) {
        T* gx = x.grad_buffer();
        T* ggamma = g_t.grad_buffer();
        T* gbeta = b_t.grad_buffer();
        const T* gamma = g_t.data().data();
        for (std::size_t ch = 0; ch < c; ++ch) {
          T sum_g = T(0);
          T sum_gx = T(0);
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t base = (i * c + ch) * spatial;
            for (std::size_t s = 0; s < spatial; ++s) {
              sum_g += grad[base + s];
              sum_gx += grad[base + s] * (*xhat)[base + s];
            }
          }
          if (ggamma) ggamma[ch] += sum_gx;
          if (gbeta) gbeta[ch] += sum_g;
          if (!gx) continue;
          const T scale = gamma[ch] / (*denom)[ch];
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t base = (i * c + ch) * spatial;
            for (std::size_t s = 0; s < spatial; ++s) {
              if (training) {
                gx[base + s] += scale * (grad[base + s] - sum_g / m - (*xhat)[base + s] * sum_gx / m);
              } else {
                gx[base + s] += scale * grad[base + s];
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t window, std::size_t stride) {
  if (x.rank() != 4) throw ShapeError("avg_pool2d: input must be NCHW, got " + to_string(x.shape()));
  if (window == 0 || stride == 0) throw ShapeError("avg_pool2d: window and stride must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (window > h || window > w) {
    throw ShapeError("avg_pool2d: window " + std::to_string(window) + " larger than input " + std::to_string(h) +
                     "x" + std::to_string(w));
  }
  const std::size_t ho = (h - window) / stride + 1;
  const std::size_t wo = (w - window) / stride + 1;
  const T area = static_cast<T>(window * window);
  auto storage = std::make_shared<std::vector<T>>(n * c * ho * wo);
  const T* px = x.data().data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = px + plane * h * w;
    T* dst = storage->data() + plane * ho * wo;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        T total = T(0);
        for (std::size_t ky = 0; ky < window; ++ky)
          for (std::size_t kx = 0; kx < window; ++kx) total += src[(oy * stride + ky) * w + ox * stride + kx];
        dst[oy * wo + ox] = total / area;
      }
    }
  }
  return Tensor<T>::from_op({n, c, ho, wo}, storage, {x}, "avg_pool2d",
                            [x, n, c, h, w, ho, wo, window, stride, area](std::span<const T> grad) {
                              T* gx = x.grad_buffer();
                              if (!gx) return;
                              for (std::size_t plane = 0; plane < n * c; ++plane) {
                                T* dst = gx + plane * h * w;
                                const T* g = grad.data() + plane * ho * wo;
                                for (std::size_t oy = 0; oy < ho; ++oy)
                                  for (std::size_t ox = 0; ox < wo; ++ox) {
                                    const T share = g[oy * wo + ox] / area;
                                    for (std::size_t ky = 0; ky < window; ++ky)
                                      for (std::size_t kx = 0; kx < window; ++kx)
                                        dst[(oy * stride + ky) * w + ox * stride + kx] += share;
                                  }
                              }
                            });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool: input must be NCHW, got " + to_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  auto storage = std::make_shared<std::vector<T>>(n * c);
  const T* px = x.data().data();
  const T area = static_cast<T>(hw);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    T total = T(0);
    for (std::size_t i = 0; i < hw; ++i) total += px[plane * hw + i];
    (*storage)[plane] = total / area;
  }
  return Tensor<T>::from_op({n, c}, storage, {x}, "global_avg_pool", [x, hw, area](std::span<const T> grad) {
    T* gx = x.grad_buffer();
    if (!gx) return;
    for (std::size_t plane = 0; plane < grad.size(); ++plane) {
      const T share = grad[plane] / area;
      for (std::size_t i = 0; i < hw; ++i) gx[plane * hw + i] += share;
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2) {
    throw ShapeError("linear: expected x (N,D) and weight (D,K), got " + to_string(x.shape()) + " and " +
                     to_string(weight.shape()));
  }
  const std::size_t n = x.dim(0), d = x.dim(1), k = weight.dim(1);
  if (weight.dim(0) != d) {
    throw ShapeError("linear: input has " + std::to_string(d) + " features, weight expects " +
                     std::to_string(weight.dim(0)));
  }
  if (bias.rank() != 1 || bias.dim(0) != k) {
    throw ShapeError("linear: bias shape " + to_string(bias.shape()) + " does not match " + std::to_string(k) +
                     " outputs");
  }
  auto storage = std::make_shared<std::vector<T>>(n * k, T(0));
  const T* px = x.data().data();
  const T* pw = weight.data().data();
  const T* pb = bias.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    T* out = storage->data() + i * k;
    for (std::size_t j = 0; j < d; ++j) {
      const T xv = px[i * d + j];
      for (std::size_t o = 0; o < k; ++o) out[o] += xv * pw[j * k + o];
    }
    for (std::size_t o = 0; o < k; ++o) out[o] = out[o] + pb[o];
  }
  MacCounter::record(static_cast<std::uint64_t>(n) * d * k);
  return Tensor<T>::from_op({n, k}, storage, {x, weight, bias}, "linear",
                            [x, weight, bias, n, d, k](std::span<const T> grad) {
                              const T* px = x.data().data();
                              const T* pw = weight.data().data();
                              if (T* gx = x.grad_buffer()) {
                                for (std::size_t i = 0; i < n; ++i)
                                  for (std::size_t j = 0; j < d; ++j) {
                                    T acc = T(0);
                                    for (std::size_t o = 0; o < k; ++o) acc += grad[i * k + o] * pw[j * k + o];
                                    gx[i * d + j] += acc;
                                  }
                              }
                              if (T* gw = weight.grad_buffer()) {
                                for (std::size_t i = 0; i < n; ++i)
                                  for (std::size_t j = 0; j < d; ++j) {
                                    const T xv = px[i * d + j];
                                    for (std::size_t o = 0; o < k; ++o) gw[j * k + o] += xv * grad[i * k + o];
                                  }
                              }
                              if (T* gb = bias.grad_buffer()) {
                                for (std::size_t i = 0; i < n; ++i)
                                  for (std::size_t o = 0; o < k; ++o) gb[o] += grad[i * k + o];
                              }
                            });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const LinearParams<T>& params) {
  return linear(x, params.weight, params.bias);
}

#define MEDVIT_INSTANTIATE_NN(T)                                                                        \
  template struct Conv2dParams<T>;                                                                      \
  template struct BatchNormState<T>;                                                                    \
  template struct LinearParams<T>;                                                                      \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, std::size_t, std::size_t, \
                            std::size_t);                                                               \
  template Tensor<T> conv2d(const Tensor<T>&, const Conv2dParams<T>&);                                  \
  template Tensor<T> batch_norm(const Tensor<T>&, BatchNormState<T>&);                                  \
  template Tensor<T> avg_pool2d(const Tensor<T>&, std::size_t, std::size_t);                            \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                                 \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> linear(const Tensor<T>&, const LinearParams<T>&);                                  \
  template void kaiming_uniform(Tensor<T>&, std::size_t, Rng&);

MEDVIT_INSTANTIATE_NN(float)
MEDVIT_INSTANTIATE_NN(double)

}  // namespace medvit::nn
