#include "medvit/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

namespace medvit {

namespace {

std::atomic<bool> g_relu_fault{false};
thread_local MacCounter* g_mac_counter = nullptr;

template <typename T>
using Storage = std::shared_ptr<std::vector<T>>;

template <typename T>
Storage<T> make_storage(std::size_t n) {
  return std::make_shared<std::vector<T>>(n);
}

// Strides of `in` aligned to the trailing dims of `out`; 0 marks a broadcast dim.
std::vector<std::size_t> aligned_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i = in.size() - 1 - k;
    const std::size_t j = out.size() - 1 - k;
    strides[j] = (in[i] == 1) ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t n = numel(out);
  const std::size_t rank = out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0;
  std::size_t ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, oa, ob);
    for (std::size_t k = 0; k < rank; ++k) {
      const std::size_t d = rank - 1 - k;
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

Shape broadcast_or_throw(const char* op, const Shape& a, const Shape& b) {
  try {
    return broadcast_shapes(a, b);
  } catch (const ShapeError& e) {
    throw ShapeError(std::string(op) + ": " + e.what());
  }
}

template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, F f, DA da, DB db) {
  const Shape out = broadcast_or_throw(name, a.shape(), b.shape());
  auto storage = make_storage<T>(numel(out));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = storage->data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < storage->size(); ++i) po[i] = f(pa[i], pb[i]);
  } else {
    for_each_broadcast(out, aligned_strides(a.shape(), out), aligned_strides(b.shape(), out),
                       [&](std::size_t i, std::size_t ia, std::size_t ib) { po[i] = f(pa[ia], pb[ib]); });
  }
  return Tensor<T>::from_op(out, storage, {a, b}, name, [a, b, out, da, db](std::span<const T> g) {
    T* ga = a.grad_buffer();
    T* gb = b.grad_buffer();
    const T* xa = a.data().data();
    const T* xb = b.data().data();
    for_each_broadcast(out, aligned_strides(a.shape(), out), aligned_strides(b.shape(), out),
                       [&](std::size_t i, std::size_t ia, std::size_t ib) {
                         if (ga) ga[ia] += da(xa[ia], xb[ib], g[i]);
                         if (gb) gb[ib] += db(xa[ia], xb[ib], g[i]);
                       });
  });
}

// df(x, y, g) returns the contribution to dL/dx given output y and upstream g.
template <typename T, typename F, typename DF>
Tensor<T> unary_op(const char* name, const Tensor<T>& a, F f, DF df) {
  auto storage = make_storage<T>(a.numel());
  const T* pa = a.data().data();
  T* po = storage->data();
  for (std::size_t i = 0; i < storage->size(); ++i) po[i] = f(pa[i]);
  std::shared_ptr<const std::vector<T>> out_values = storage;
  return Tensor<T>::from_op(a.shape(), storage, {a}, name, [a, out_values, df](std::span<const T> g) {
    T* ga = a.grad_buffer();
    if (!ga) return;
    const T* x = a.data().data();
    const T* y = out_values->data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += df(x[i], y[i], g[i]);
  });
}

void check_axis(const char* op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(shape));
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
  s.len = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
  return s;
}

Shape reduced_shape(const Shape& shape, std::size_t axis, bool keepdim) {
  Shape out = shape;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out.empty()) out.push_back(1);
  }
  return out;
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t k = 0; k < rank; ++k) {
    const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b) + ": dimension " +
                       std::to_string(rank - 1 - k) + " is " + std::to_string(da) + " vs " +
                       std::to_string(db));
    }
    out[rank - 1 - k] = std::max(da, db);
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T g) { return g; },
      [](T, T, T g) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T g) { return g; },
      [](T, T, T g) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T g) { return g * y; },
      [](T x, T, T g) { return g * x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T g) { return g / y; },
      [](T x, T y, T g) { return -g * x / (y * y); });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  return unary_op(
      "add_scalar", a, [value](T x) { return x + value; }, [](T, T, T g) { return g; });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T value) {
  return unary_op(
      "mul_scalar", a, [value](T x) { return x * value; }, [value](T, T, T g) { return g * value; });
}

template <typename T>
Tensor<T> div_scalar(const Tensor<T>& a, T value) {
  return unary_op(
      "div_scalar", a, [value](T x) { return x / value; }, [value](T, T, T g) { return g / value; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary_op(
      "neg", a, [](T x) { return -x; }, [](T, T, T g) { return -g; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  const bool fault = debug::relu_grad_fault();
  return unary_op(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [fault](T x, T, T g) {
        const T d = x > T(0) ? g : T(0);
        return fault ? -d : d;
      });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary_op(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y, T g) { return g * y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return unary_op(
      "log", a, [](T x) { return std::log(x); }, [](T x, T, T g) { return g / x; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return unary_op(
      "sqrt", a, [](T x) { return std::sqrt(x); }, [](T, T y, T g) { return g / (T(2) * y); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_op(
      "sigmoid", a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y, T g) { return g * y * (T(1) - y); });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sa.size() != sb.size()) {
    throw ShapeError("matmul: operands must share a rank >= 2, got " + to_string(sa) + " and " +
                     to_string(sb));
  }
  const std::size_t r = sa.size();
  std::size_t batch = 1;
  for (std::size_t d = 0; d + 2 < r; ++d) {
    if (sa[d] != sb[d]) {
      throw ShapeError("matmul: batch dimension " + std::to_string(d) + " differs: " + to_string(sa) +
                       " vs " + to_string(sb));
    }
    batch *= sa[d];
  }
  const std::size_t m = sa[r - 2];
  const std::size_t k = sa[r - 1];
  const std::size_t n = sb[r - 1];
  if (sb[r - 2] != k) {
    throw ShapeError("matmul: inner dimensions differ: " + to_string(sa) + " x " + to_string(sb) + " (" +
                     std::to_string(k) + " vs " + std::to_string(sb[r - 2]) + ")");
  }
  Shape out = sa;
  out[r - 1] = n;
  auto storage = make_storage<T>(batch * m * n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = storage->data();
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const T* A = pa + bi * m * k;
    const T* B = pb + bi * k * n;
    T* C = po + bi * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = C + i * n;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T aik = A[i * k + kk];
        const T* brow = B + kk * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
      }
    }
  }
  MacCounter::record(static_cast<std::uint64_t>(batch) * m * k * n);
  return Tensor<T>::from_op(out, storage, {a, b}, "matmul", [a, b, batch, m, k, n](std::span<const T> g) {
    T* ga = a.grad_buffer();
    T* gb = b.grad_buffer();
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    for (std::size_t bi = 0; bi < batch; ++bi) {
      const T* A = pa + bi * m * k;
      const T* B = pb + bi * k * n;
      const T* G = g.data() + bi * m * n;
      if (ga) {
        T* GA = ga + bi * m * k;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t kk = 0; kk < k; ++kk) {
            T acc = T(0);
            for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[kk * n + j];
            GA[i * k + kk] += acc;
          }
        }
      }
      if (gb) {
        T* GB = gb + bi * k * n;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t kk = 0; kk < k; ++kk) {
            const T aik = A[i * k + kk];
            for (std::size_t j = 0; j < n; ++j) GB[kk * n + j] += aik * G[i * n + j];
          }
        }
      }
    }
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("reshape: zero dimension in target " + to_string(shape));
  }
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " (" + std::to_string(a.numel()) +
                     " elements) as " + to_string(shape));
  }
  return Tensor<T>::from_op(std::move(shape), a.storage(), {a}, "reshape", [a](std::span<const T> g) {
    T* ga = a.grad_buffer();
    if (!ga) return;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& axes) {
  const Shape& in = a.shape();
  const std::size_t r = in.size();
  if (axes.size() != r) {
    throw ShapeError("permute: " + std::to_string(axes.size()) + " axes given for shape " + to_string(in));
  }
  std::vector<bool> seen(r, false);
  for (std::size_t ax : axes) {
    if (ax >= r || seen[ax]) throw ShapeError("permute: axes are not a permutation of 0.." + std::to_string(r - 1));
    seen[ax] = true;
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t k = 1; k < r; ++k) in_strides[r - 1 - k] = in_strides[r - k] * in[r - k];
  Shape out(r);
  std::vector<std::size_t> src_strides(r);
  for (std::size_t d = 0; d < r; ++d) {
    out[d] = in[axes[d]];
    src_strides[d] = in_strides[axes[d]];
  }
  // offsets[i] = source offset of output element i
  auto offsets = std::make_shared<std::vector<std::size_t>>(a.numel());
  const std::vector<std::size_t> zero(r, 0);
  for_each_broadcast(out, src_strides, zero,
                     [&](std::size_t i, std::size_t src, std::size_t) { (*offsets)[i] = src; });
  auto storage = make_storage<T>(a.numel());
  const T* pa = a.data().data();
  for (std::size_t i = 0; i < storage->size(); ++i) (*storage)[i] = pa[(*offsets)[i]];
  return Tensor<T>::from_op(out, storage, {a}, "permute", [a, offsets](std::span<const T> g) {
    T* ga = a.grad_buffer();
    if (!ga) return;
    for (std::size_t i = 0; i < g.size(); ++i) ga[(*offsets)[i]] += g[i];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, std::size_t axis0, std::size_t axis1) {
  check_axis("transpose", a.shape(), axis0);
  check_axis("transpose", a.shape(), axis1);
  std::vector<std::size_t> axes(a.rank());
  for (std::size_t d = 0; d < axes.size(); ++d) axes[d] = d;
  std::swap(axes[axis0], axes[axis1]);
  return permute(a, axes);
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& shape) {
  const Shape out = broadcast_or_throw("broadcast_to", a.shape(), shape);
  if (out != shape) {
    throw ShapeError("broadcast_to: " + to_string(a.shape()) + " does not broadcast to " + to_string(shape));
  }
  auto storage = make_storage<T>(numel(out));
  const T* pa = a.data().data();
  const auto sa = aligned_strides(a.shape(), out);
  const std::vector<std::size_t> zero(out.size(), 0);
  for_each_broadcast(out, sa, zero, [&](std::size_t i, std::size_t ia, std::size_t) { (*storage)[i] = pa[ia]; });
  return Tensor<T>::from_op(out, storage, {a}, "broadcast_to", [a, out, sa, zero](std::span<const T> g) {
    T* ga = a.grad_buffer();
    if (!ga) return;
    for_each_broadcast(out, sa, zero, [&](std::size_t i, std::size_t ia, std::size_t) { ga[ia] += g[i]; });
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  check_axis("concat", first, axis);
  Shape out = first;
  out[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) {
      throw ShapeError("concat: rank mismatch " + to_string(first) + " vs " + to_string(s));
    }
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) {
        throw ShapeError("concat: dimension " + std::to_string(d) + " differs: " + to_string(first) + " vs " +
                         to_string(s));
      }
    }
    out[axis] += s[axis];
  }
  const AxisSplit whole = split_at(out, axis);
  auto storage = make_storage<T>(numel(out));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.dim(axis);
    const T* src = p.data().data();
    for (std::size_t o = 0; o < whole.outer; ++o) {
      std::copy_n(src + o * len * whole.inner, len * whole.inner,
                  storage->data() + (o * whole.len + offset) * whole.inner);
    }
    offset += len;
  }
  return Tensor<T>::from_op(out, storage, parts, "concat", [parts, offsets, whole, axis](std::span<const T> g) {
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      T* gp = parts[pi].grad_buffer();
      if (!gp) continue;
      const std::size_t len = parts[pi].dim(axis);
      for (std::size_t o = 0; o < whole.outer; ++o) {
        const T* src = g.data() + (o * whole.len + offsets[pi]) * whole.inner;
        T* dst = gp + o * len * whole.inner;
        for (std::size_t i = 0; i < len * whole.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length) {
  check_axis("slice", a.shape(), axis);
  if (length == 0 || start + length > a.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of bounds for dimension " + std::to_string(axis) + " of " + to_string(a.shape()));
  }
  const AxisSplit s = split_at(a.shape(), axis);
  Shape out = a.shape();
  out[axis] = length;
  auto storage = make_storage<T>(numel(out));
  const T* pa = a.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(pa + (o * s.len + start) * s.inner, length * s.inner, storage->data() + o * length * s.inner);
  }
  return Tensor<T>::from_op(out, storage, {a}, "slice", [a, s, start, length](std::span<const T> g) {
    T* ga = a.grad_buffer();
    if (!ga) return;
    for (std::size_t o = 0; o < s.outer; ++o) {
      T* dst = ga + (o * s.len + start) * s.inner;
      const T* src = g.data() + o * length * s.inner;
      for (std::size_t i = 0; i < length * s.inner; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Tensor<T> index_select(const Tensor<T>& a, std::size_t axis, std::span<const std::size_t> indices) {
  check_axis("index_select", a.shape(), axis);
  if (indices.empty()) throw ShapeError("index_select: empty index list");
  const AxisSplit s = split_at(a.shape(), axis);
  for (std::size_t idx : indices) {
    if (idx >= s.len) {
      throw ShapeError("index_select: index " + std::to_string(idx) + " out of range for dimension " +
                       std::to_string(axis) + " of " + to_string(a.shape()));
    }
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
  Shape out = a.shape();
  out[axis] = idx->size();
  auto storage = make_storage<T>(numel(out));
  const T* pa = a.data().data();
  const std::size_t m = idx->size();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < m; ++j) {
      std::copy_n(pa + (o * s.len + (*idx)[j]) * s.inner, s.inner, storage->data() + (o * m + j) * s.inner);
    }
  }
  return Tensor<T>::from_op(out, storage, {a}, "index_select", [a, s, idx](std::span<const T> g) {
    T* ga = a.grad_buffer();
    if (!ga) return;
    const std::size_t m = idx->size();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t j = 0; j < m; ++j) {
        T* dst = ga + (o * s.len + (*idx)[j]) * s.inner;
        const T* src = g.data() + (o * m + j) * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  check_axis("softmax", a.shape(), axis);
  const AxisSplit s = split_at(a.shape(), axis);
  auto storage = make_storage<T>(a.numel());
  const T* x = a.data().data();
  T* y = storage->data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      T m = x[base];
      for (std::size_t k = 1; k < s.len; ++k) m = std::max(m, x[base + k * s.inner]);
      T total = T(0);
      for (std::size_t k = 0; k < s.len; ++k) {
        const T e = std::exp(x[base + k * s.inner] - m);
        y[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.len; ++k) y[base + k * s.inner] = y[base + k * s.inner] / total;
    }
  }
  std::shared_ptr<const std::vector<T>> out = storage;
  return Tensor<T>::from_op(a.shape(), storage, {a}, "softmax", [a, s, out](std::span<const T> g) {
    T* ga = a.grad_buffer();
    if (!ga) return;
    const T* y = out->data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        T dot = T(0);
        for (std::size_t k = 0; k < s.len; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
        for (std::size_t k = 0; k < s.len; ++k) {
          const std::size_t i = base + k * s.inner;
          ga[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a, std::size_t axis) {
  check_axis("log_softmax", a.shape(), axis);
  const AxisSplit s = split_at(a.shape(), axis);
  auto storage = make_storage<T>(a.numel());
  const T* x = a.data().data();
  T* y = storage->data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      T m = x[base];
      for (std::size_t k = 1; k < s.len; ++k) m = std::max(m, x[base + k * s.inner]);
      T total = T(0);
      for (std::size_t k = 0; k < s.len; ++k) total += std::exp(x[base + k * s.inner] - m);
      const T log_total = std::log(total);
      for (std::size_t k = 0; k < s.len; ++k) y[base + k * s.inner] = (x[base + k * s.inner] - m) - log_total;
    }
  }
  std::shared_ptr<const std::vector<T>> out = storage;
  return Tensor<T>::from_op(a.shape(), storage, {a}, "log_softmax", [a, s, out](std::span<const T> g) {
    T* ga = a.grad_buffer();
    if (!ga) return;
    const T* y = out->data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        T total = T(0);
        for (std::size_t k = 0; k < s.len; ++k) total += g[base + k * s.inner];
        for (std::size_t k = 0; k < s.len; ++k) {
          const std::size_t i = base + k * s.inner;
          ga[i] += g[i] - std::exp(y[i]) * total;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  auto storage = make_storage<T>(1);
  T total = T(0);
  for (T v : a.data()) total += v;
  (*storage)[0] = total;
  return Tensor<T>::from_op(Shape{1}, storage, {a}, "sum", [a](std::span<const T> g) {
    T* ga = a.grad_buffer();
    if (!ga) return;
    for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += g[0];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a, std::size_t axis, bool keepdim) {
  check_axis("sum", a.shape(), axis);
  const AxisSplit s = split_at(a.shape(), axis);
  auto storage = make_storage<T>(s.outer * s.inner);
  const T* x = a.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      T total = T(0);
      for (std::size_t k = 0; k < s.len; ++k) total += x[(o * s.len + k) * s.inner + in];
      (*storage)[o * s.inner + in] = total;
    }
  }
  return Tensor<T>::from_op(reduced_shape(a.shape(), axis, keepdim), storage, {a}, "sum_axis",
                            [a, s](std::span<const T> g) {
                              T* ga = a.grad_buffer();
                              if (!ga) return;
                              for (std::size_t o = 0; o < s.outer; ++o)
                                for (std::size_t k = 0; k < s.len; ++k)
                                  for (std::size_t in = 0; in < s.inner; ++in)
                                    ga[(o * s.len + k) * s.inner + in] += g[o * s.inner + in];
                            });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return div_scalar(sum(a), static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, std::size_t axis, bool keepdim) {
  check_axis("mean", a.shape(), axis);
  return div_scalar(sum(a, axis, keepdim), static_cast<T>(a.dim(axis)));
}

template <typename T>
Tensor<T> variance(const Tensor<T>& a, std::size_t axis, bool keepdim) {
  check_axis("variance", a.shape(), axis);
  const AxisSplit s = split_at(a.shape(), axis);
  auto means = std::make_shared<std::vector<T>>(s.outer * s.inner);
  auto storage = make_storage<T>(s.outer * s.inner);
  const T* x = a.data().data();
  const T n = static_cast<T>(s.len);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      T total = T(0);
      for (std::size_t k = 0; k < s.len; ++k) total += x[(o * s.len + k) * s.inner + in];
      const T m = total / n;
      T sq = T(0);
      for (std::size_t k = 0; k < s.len; ++k) {
        const T d = x[(o * s.len + k) * s.inner + in] - m;
        sq += d * d;
      }
      (*means)[o * s.inner + in] = m;
      (*storage)[o * s.inner + in] = sq / n;
    }
  }
  return Tensor<T>::from_op(reduced_shape(a.shape(), axis, keepdim), storage, {a}, "variance",
                            [a, s, means, n](std::span<const T> g) {
                              T* ga = a.grad_buffer();
                              if (!ga) return;
                              const T* x = a.data().data();
                              for (std::size_t o = 0; o < s.outer; ++o)
                                for (std::size_t k = 0; k < s.len; ++k)
                                  for (std::size_t in = 0; in < s.inner; ++in) {
                                    const std::size_t i = (o * s.len + k) * s.inner + in;
                                    const T m = (*means)[o * s.inner + in];
                                    ga[i] += g[o * s.inner + in] * T(2) * (x[i] - m) / n;
                                  }
                            });
}

MacCounter::MacCounter() : previous_(g_mac_counter) { g_mac_counter = this; }
MacCounter::~MacCounter() { g_mac_counter = previous_; }

void MacCounter::record(std::uint64_t macs) {
  for (MacCounter* c = g_mac_counter; c != nullptr; c = c->previous_) c->total_ += macs;
}

namespace debug {
void set_relu_grad_fault(bool enabled) { g_relu_fault.store(enabled); }
bool relu_grad_fault() { return g_relu_fault.load(); }
}  // namespace debug

#define MEDVIT_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                          \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                          \
  template Tensor<T> div_scalar(const Tensor<T>&, T);                                          \
  template Tensor<T> neg(const Tensor<T>&);                                                    \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> exp(const Tensor<T>&);                                                    \
  template Tensor<T> log(const Tensor<T>&);                                                    \
  template Tensor<T> sqrt(const Tensor<T>&);                                                   \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                         \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                \
  template Tensor<T> transpose(const Tensor<T>&, std::size_t, std::size_t);                    \
  template Tensor<T> broadcast_to(const Tensor<T>&, const Shape&);                             \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                       \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);           \
  template Tensor<T> index_select(const Tensor<T>&, std::size_t, std::span<const std::size_t>); \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> log_softmax(const Tensor<T>&, std::size_t);                               \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> sum(const Tensor<T>&, std::size_t, bool);                                 \
  template Tensor<T> mean(const Tensor<T>&);                                                   \
  template Tensor<T> mean(const Tensor<T>&, std::size_t, bool);                                \
  template Tensor<T> variance(const Tensor<T>&, std::size_t, bool);

MEDVIT_INSTANTIATE_OPS(float)
MEDVIT_INSTANTIATE_OPS(double)

}  // namespace medvit
