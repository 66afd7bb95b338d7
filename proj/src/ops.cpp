#include "aqcf/ops.hpp"

#include <algorithm>
#include <cmath>

namespace aqcf::ops {

namespace {

using Strides = std::vector<std::int64_t>;

void require_same_dtype(const Var& a, const Var& b, const char* op) {
  if (a.dtype() != b.dtype())
    throw ShapeError(std::string(op) + ": dtype mismatch " + to_string(a.dtype()) + " vs " +
                     to_string(b.dtype()));
}

Strides row_major_strides(const Shape& s) {
  Strides st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != b.size())
    throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || b[i] == 1)
      out[i] = a[i];
    else if (a[i] == 1)
      out[i] = b[i];
    else
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
  }
  return out;
}

// Strides of `s` when read while iterating `out`; broadcast axes get stride 0.
Strides broadcast_strides(const Shape& s, const Shape& out) {
  auto st = row_major_strides(s);
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s[i] == 1 && out[i] != 1) st[i] = 0;
  return st;
}

// Walks `out` in row-major order, tracking two strided offsets.
template <class F>
void odometer(const Shape& out, const Strides& sa, const Strides& sb, F&& f) {
  const std::size_t r = out.size();
  const std::int64_t n = shape_numel(out);
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

enum class BinOp { add, sub, mul };

Var binary(const Var& a, const Var& b, BinOp kind, const char* name) {
  require_same_dtype(a, b, name);
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  const bool same = a.shape() == b.shape();
  Tensor out(out_shape, a.dtype());
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.value().data<T>();
    auto y = b.value().data<T>();
    auto z = out.data<T>();
    auto apply = [&](std::int64_t o, std::int64_t i, std::int64_t j) {
      switch (kind) {
        case BinOp::add: z[o] = x[i] + y[j]; break;
        case BinOp::sub: z[o] = x[i] - y[j]; break;
        case BinOp::mul: z[o] = x[i] * y[j]; break;
      }
    };
    if (same)
      for (std::int64_t o = 0; o < out.numel(); ++o) apply(o, o, o);
    else
      odometer(out_shape, sa, sb, apply);
  });
  return make_result(name, std::move(out), {a, b}, [kind, same, sa, sb](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& g = self.grad;
    dispatch(g.dtype(), [&]<class T>() {
      Tensor ga(pa.value.shape(), g.dtype()), gb(pb.value.shape(), g.dtype());
      auto gd = g.data<T>();
      auto x = pa.value.data<T>();
      auto y = pb.value.data<T>();
      auto gx = ga.data<T>();
      auto gy = gb.data<T>();
      auto apply = [&](std::int64_t o, std::int64_t i, std::int64_t j) {
        switch (kind) {
          case BinOp::add: gx[i] += gd[o]; gy[j] += gd[o]; break;
          case BinOp::sub: gx[i] += gd[o]; gy[j] -= gd[o]; break;
          case BinOp::mul: gx[i] += gd[o] * y[j]; gy[j] += gd[o] * x[i]; break;
        }
      };
      if (same)
        for (std::int64_t o = 0; o < g.numel(); ++o) apply(o, o, o);
      else
        odometer(g.shape(), sa, sb, apply);
      detail::accumulate_grad(pa, std::move(ga));
      detail::accumulate_grad(pb, std::move(gb));
    });
  });
}

// Elementwise unary with derivative expressed from (input, output).
template <class Fwd, class Deriv>
Var unary(const Var& a, const char* name, Fwd fwd, Deriv deriv) {
  Tensor out(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.value().data<T>();
    auto y = out.data<T>();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<T>(fwd(x[i]));
  });
  return make_result(name, std::move(out), {a}, [deriv](detail::Node& self) {
    auto& p = *self.parents[0];
    dispatch(self.grad.dtype(), [&]<class T>() {
      Tensor gx(p.value.shape(), p.value.dtype());
      auto g = self.grad.data<T>();
      auto x = p.value.data<T>();
      auto y = self.value.data<T>();
      auto d = gx.data<T>();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] = static_cast<T>(g[i] * deriv(x[i], y[i]));
      detail::accumulate_grad(p, std::move(gx));
    });
  });
}

struct AxisSplit {
  std::int64_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

void check_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size())
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for shape " +
                     shape_str(s));
}

// dst[dst_off + idx] = src[src_off + idx] over a rectangular region (accumulates if `add`).
template <class T>
void copy_region(std::span<const T> src, const Shape& src_shape, const std::vector<std::int64_t>& src_off,
                 std::span<T> dst, const Shape& dst_shape, const std::vector<std::int64_t>& dst_off,
                 const Shape& region, bool add) {
  const auto ss = row_major_strides(src_shape);
  const auto ds = row_major_strides(dst_shape);
  std::int64_t s0 = 0, d0 = 0;
  for (std::size_t i = 0; i < region.size(); ++i) {
    s0 += src_off[i] * ss[i];
    d0 += dst_off[i] * ds[i];
  }
  if (shape_numel(region) == 0) return;
  odometer(region, ss, ds, [&](std::int64_t, std::int64_t i, std::int64_t j) {
    if (add)
      dst[d0 + j] += src[s0 + i];
    else
      dst[d0 + j] = src[s0 + i];
  });
}

}  // namespace

Var add(const Var& a, const Var& b) { return binary(a, b, BinOp::add, "add"); }
Var sub(const Var& a, const Var& b) { return binary(a, b, BinOp::sub, "sub"); }
Var mul(const Var& a, const Var& b) { return binary(a, b, BinOp::mul, "mul"); }

Var scale(const Var& a, double factor) {
  return unary(
      a, "scale", [factor](auto x) { return x * factor; },
      [factor](auto, auto) { return factor; });
}

Var sum(const Var& a) {
  Tensor out = Tensor::zeros({}, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    T s = 0;
    for (auto v : a.value().data<T>()) s += v;
    out.data<T>()[0] = s;
  });
  return make_result("sum", std::move(out), {a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    detail::accumulate_grad(p, Tensor::full(p.value.shape(), self.grad.at(0), p.value.dtype()));
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Var relu(const Var& a) {
  return unary(
      a, "relu", [](auto x) { return x > 0 ? x : decltype(x)(0); },
      [](auto x, auto) { return x > 0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& a) {
  return unary(
      a, "sigmoid",
      [](auto x) {
        // split on sign so exp never overflows
        if (x >= 0) return 1 / (1 + std::exp(-x));
        auto e = std::exp(x);
        return e / (1 + e);
      },
      [](auto, auto y) { return y * (1 - y); });
}

Var softmax(const Var& a, std::size_t axis) {
  check_axis(a.shape(), axis, "softmax");
  const auto sp = split_at(a.shape(), axis);
  Tensor out(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.value().data<T>();
    auto y = out.data<T>();
    std::vector<T> e(static_cast<std::size_t>(sp.n));
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t i = 0; i < sp.inner; ++i) {
        const std::int64_t base = o * sp.n * sp.inner + i;
        T mx = x[base];
        for (std::int64_t c = 1; c < sp.n; ++c) mx = std::max(mx, x[base + c * sp.inner]);
        T s = 0;
        for (std::int64_t c = 0; c < sp.n; ++c) {
          e[c] = std::exp(x[base + c * sp.inner] - mx);
          s += e[c];
        }
        for (std::int64_t c = 0; c < sp.n; ++c) y[base + c * sp.inner] = e[c] / s;
      }
  });
  return make_result("softmax", std::move(out), {a}, [sp](detail::Node& self) {
    auto& p = *self.parents[0];
    dispatch(self.grad.dtype(), [&]<class T>() {
      Tensor gx(p.value.shape(), p.value.dtype());
      auto g = self.grad.data<T>();
      auto y = self.value.data<T>();
      auto d = gx.data<T>();
      for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t i = 0; i < sp.inner; ++i) {
          const std::int64_t base = o * sp.n * sp.inner + i;
          T dot = 0;
          for (std::int64_t c = 0; c < sp.n; ++c) dot += g[base + c * sp.inner] * y[base + c * sp.inner];
          for (std::int64_t c = 0; c < sp.n; ++c) {
            const auto k = base + c * sp.inner;
            d[k] = y[k] * (g[k] - dot);
          }
        }
      detail::accumulate_grad(p, std::move(gx));
    });
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_result("reshape", std::move(out), {a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    detail::accumulate_grad(p, self.grad.reshaped(p.value.shape()));
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  check_axis(ref, axis, "concat");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    require_same_dtype(parts.front(), p, "concat");
    const auto& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == ref[i];
    if (!ok) throw ShapeError("concat: incompatible shapes " + shape_str(ref) + " and " + shape_str(s));
    out_shape[axis] += s[axis];
  }
  const auto osp = split_at(out_shape, axis);
  Tensor out(out_shape, ref.empty() ? DType::f64 : parts.front().dtype());
  std::vector<std::int64_t> sizes;
  for (const auto& p : parts) sizes.push_back(p.shape()[axis]);
  dispatch(out.dtype(), [&]<class T>() {
    auto z = out.data<T>();
    std::int64_t off = 0;
    for (const auto& p : parts) {
      auto x = p.value().data<T>();
      const std::int64_t n = p.shape()[axis];
      for (std::int64_t o = 0; o < osp.outer; ++o)
        std::copy_n(x.begin() + o * n * osp.inner, n * osp.inner,
                    z.begin() + (o * osp.n + off) * osp.inner);
      off += n;
    }
  });
  return make_result("concat", std::move(out), parts, [osp, sizes](detail::Node& self) {
    dispatch(self.grad.dtype(), [&]<class T>() {
      auto g = self.grad.data<T>();
      std::int64_t off = 0;
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        auto& p = *self.parents[k];
        const std::int64_t n = sizes[k];
        if (p.requires_grad) {
          Tensor gp(p.value.shape(), p.value.dtype());
          auto d = gp.data<T>();
          for (std::int64_t o = 0; o < osp.outer; ++o)
            std::copy_n(g.begin() + (o * osp.n + off) * osp.inner, n * osp.inner,
                        d.begin() + o * n * osp.inner);
          detail::accumulate_grad(p, std::move(gp));
        }
        off += n;
      }
    });
  });
}

Var slice(const Var& a, std::size_t axis, std::int64_t start, std::int64_t length) {
  check_axis(a.shape(), axis, "slice");
  if (start < 0 || length < 0 || start + length > a.shape()[axis])
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") outside axis " + std::to_string(axis) + " of " + shape_str(a.shape()));
  std::vector<std::int64_t> starts(a.shape().size(), 0);
  Shape sizes = a.shape();
  starts[axis] = start;
  sizes[axis] = length;
  return crop(a, starts, sizes);
}

Var pad(const Var& a, const std::vector<std::pair<std::int64_t, std::int64_t>>& pads, double value) {
  const Shape& in = a.shape();
  if (pads.size() > in.size()) throw ShapeError("pad: more pad entries than axes of " + shape_str(in));
  Shape out_shape = in;
  std::vector<std::int64_t> off(in.size(), 0);
  for (std::size_t i = 0; i < pads.size(); ++i) {
    if (pads[i].first < 0 || pads[i].second < 0) throw ShapeError("pad: negative padding");
    out_shape[i] += pads[i].first + pads[i].second;
    off[i] = pads[i].first;
  }
  Tensor out = Tensor::full(out_shape, value, a.dtype());
  const std::vector<std::int64_t> zero(in.size(), 0);
  dispatch(a.dtype(), [&]<class T>() {
    copy_region<T>(a.value().data<T>(), in, zero, out.data<T>(), out_shape, off, in, false);
  });
  return make_result("pad", std::move(out), {a}, [off, zero](detail::Node& self) {
    auto& p = *self.parents[0];
    dispatch(self.grad.dtype(), [&]<class T>() {
      Tensor gx(p.value.shape(), p.value.dtype());
      copy_region<T>(self.grad.data<T>(), self.grad.shape(), off, gx.data<T>(), p.value.shape(), zero,
                     p.value.shape(), false);
      detail::accumulate_grad(p, std::move(gx));
    });
  });
}

Var crop(const Var& a, const std::vector<std::int64_t>& starts, const Shape& sizes) {
  const Shape& in = a.shape();
  if (starts.size() != in.size() || sizes.size() != in.size())
    throw ShapeError("crop: window rank does not match " + shape_str(in));
  for (std::size_t i = 0; i < in.size(); ++i)
    if (starts[i] < 0 || sizes[i] < 0 || starts[i] + sizes[i] > in[i])
      throw ShapeError("crop: window exceeds axis " + std::to_string(i) + " of " + shape_str(in));
  Tensor out(sizes, a.dtype());
  const std::vector<std::int64_t> zero(in.size(), 0);
  dispatch(a.dtype(), [&]<class T>() {
    copy_region<T>(a.value().data<T>(), in, starts, out.data<T>(), sizes, zero, sizes, false);
  });
  return make_result("crop", std::move(out), {a}, [starts, zero](detail::Node& self) {
    auto& p = *self.parents[0];
    dispatch(self.grad.dtype(), [&]<class T>() {
      Tensor gx(p.value.shape(), p.value.dtype());
      copy_region<T>(self.grad.data<T>(), self.grad.shape(), zero, gx.data<T>(), p.value.shape(), starts,
                     self.grad.shape(), false);
      detail::accumulate_grad(p, std::move(gx));
    });
  });
}

Var global_avg_pool(const Var& a) {
  const Shape& s = a.shape();
  if (s.size() < 3) throw ShapeError("global_avg_pool: expected [B,C,spatial...], got " + shape_str(s));
  const std::int64_t bc = s[0] * s[1];
  const std::int64_t n = a.numel() / std::max<std::int64_t>(bc, 1);
  Tensor out({s[0], s[1]}, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.value().data<T>();
    auto y = out.data<T>();
    for (std::int64_t i = 0; i < bc; ++i) {
      T acc = 0;
      for (std::int64_t k = 0; k < n; ++k) acc += x[i * n + k];
      y[i] = acc / static_cast<T>(n);
    }
  });
  return make_result("global_avg_pool", std::move(out), {a}, [bc, n](detail::Node& self) {
    auto& p = *self.parents[0];
    dispatch(self.grad.dtype(), [&]<class T>() {
      Tensor gx(p.value.shape(), p.value.dtype());
      auto g = self.grad.data<T>();
      auto d = gx.data<T>();
      for (std::int64_t i = 0; i < bc; ++i)
        std::fill_n(d.begin() + i * n, n, g[i] / static_cast<T>(n));
      detail::accumulate_grad(p, std::move(gx));
    });
  });
}

Var upsample_nearest2(const Var& a) {
  const Shape& s = a.shape();
  if (s.size() != 5) throw ShapeError("upsample_nearest2: expected 5-D input, got " + shape_str(s));
  const Shape o{s[0], s[1], 2 * s[2], 2 * s[3], 2 * s[4]};
  Tensor out(o, a.dtype());
  const std::int64_t planes = s[0] * s[1];
  auto index = [](const Shape& sh, std::int64_t p, std::int64_t d, std::int64_t h, std::int64_t w) {
    return ((p * sh[2] + d) * sh[3] + h) * sh[4] + w;
  };
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.value().data<T>();
    auto y = out.data<T>();
    for (std::int64_t p = 0; p < planes; ++p)
      for (std::int64_t d = 0; d < o[2]; ++d)
        for (std::int64_t h = 0; h < o[3]; ++h)
          for (std::int64_t w = 0; w < o[4]; ++w)
            y[index(o, p, d, h, w)] = x[index(s, p, d / 2, h / 2, w / 2)];
  });
  return make_result("upsample_nearest2", std::move(out), {a}, [s, o, planes, index](detail::Node& self) {
    auto& p = *self.parents[0];
    dispatch(self.grad.dtype(), [&]<class T>() {
      Tensor gx(s, p.value.dtype());
      auto g = self.grad.data<T>();
      auto d = gx.data<T>();
      for (std::int64_t q = 0; q < planes; ++q)
        for (std::int64_t z = 0; z < o[2]; ++z)
          for (std::int64_t h = 0; h < o[3]; ++h)
            for (std::int64_t w = 0; w < o[4]; ++w)
              d[index(s, q, z / 2, h / 2, w / 2)] += g[index(o, q, z, h, w)];
      detail::accumulate_grad(p, std::move(gx));
    });
  });
}

Var instance_norm(const Var& x, double eps) {
  const Shape& s = x.shape();
  if (s.size() < 3) throw ShapeError("instance_norm: expected [B,C,spatial...], got " + shape_str(s));
  const std::int64_t bc = s[0] * s[1];
  const std::int64_t n = x.numel() / std::max<std::int64_t>(bc, 1);
  Tensor out(s, x.dtype());
  std::vector<double> inv_std(static_cast<std::size_t>(bc));
  dispatch(x.dtype(), [&]<class T>() {
    auto in = x.value().data<T>();
    auto y = out.data<T>();
    for (std::int64_t i = 0; i < bc; ++i) {
      const T* xi = in.data() + i * n;
      T mu = 0;
      for (std::int64_t k = 0; k < n; ++k) mu += xi[k];
      mu /= static_cast<T>(n);
      T var = 0;
      for (std::int64_t k = 0; k < n; ++k) var += (xi[k] - mu) * (xi[k] - mu);
      var /= static_cast<T>(n);
      const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
      inv_std[i] = inv;
      for (std::int64_t k = 0; k < n; ++k) y[i * n + k] = (xi[k] - mu) * inv;
    }
  });
  return make_result("instance_norm", std::move(out), {x}, [bc, n, inv_std](detail::Node& self) {
    auto& p = *self.parents[0];
    dispatch(self.grad.dtype(), [&]<class T>() {
      Tensor gx(p.value.shape(), p.value.dtype());
      auto g = self.grad.data<T>();
      auto y = self.value.data<T>();
      auto d = gx.data<T>();
      for (std::int64_t i = 0; i < bc; ++i) {
        T mg = 0, mgy = 0;
        for (std::int64_t k = 0; k < n; ++k) {
          mg += g[i * n + k];
          mgy += g[i * n + k] * y[i * n + k];
        }
        mg /= static_cast<T>(n);
        mgy /= static_cast<T>(n);
        const T inv = static_cast<T>(inv_std[i]);
        for (std::int64_t k = 0; k < n; ++k)
          d[i * n + k] = inv * (g[i * n + k] - mg - y[i * n + k] * mgy);
      }
      detail::accumulate_grad(p, std::move(gx));
    });
  });
}

Var linear(const Var& x, const Var& w, const std::optional<Var>& b) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1])
    throw ShapeError("linear: input " + shape_str(xs) + " incompatible with weight " + shape_str(ws));
  require_same_dtype(x, w, "linear");
  if (b && (b->shape() != Shape{ws[0]}))
    throw ShapeError("linear: bias " + shape_str(b->shape()) + " for weight " + shape_str(ws));
  const std::int64_t batch = xs[0], in = xs[1], outc = ws[0];
  Tensor out({batch, outc}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto X = x.value().data<T>();
    auto W = w.value().data<T>();
    auto Y = out.data<T>();
    for (std::int64_t r = 0; r < batch; ++r)
      for (std::int64_t o = 0; o < outc; ++o) {
        T acc = b ? b->value().data<T>()[o] : T(0);
        for (std::int64_t i = 0; i < in; ++i) acc += X[r * in + i] * W[o * in + i];
        Y[r * outc + o] = acc;
      }
  });
  std::vector<Var> parents{x, w};
  if (b) parents.push_back(*b);
  return make_result("linear", std::move(out), parents, [batch, in, outc](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    dispatch(self.grad.dtype(), [&]<class T>() {
      auto g = self.grad.data<T>();
      auto X = px.value.data<T>();
      auto W = pw.value.data<T>();
      Tensor gx(px.value.shape(), px.value.dtype()), gw(pw.value.shape(), pw.value.dtype());
      auto dx = gx.data<T>();
      auto dw = gw.data<T>();
      for (std::int64_t r = 0; r < batch; ++r)
        for (std::int64_t o = 0; o < outc; ++o) {
          const T go = g[r * outc + o];
          for (std::int64_t i = 0; i < in; ++i) {
            dx[r * in + i] += go * W[o * in + i];
            dw[o * in + i] += go * X[r * in + i];
          }
        }
      detail::accumulate_grad(px, std::move(gx));
      detail::accumulate_grad(pw, std::move(gw));
      if (self.parents.size() > 2) {
        auto& pb = *self.parents[2];
        Tensor gb(pb.value.shape(), pb.value.dtype());
        auto db = gb.data<T>();
        for (std::int64_t r = 0; r < batch; ++r)
          for (std::int64_t o = 0; o < outc; ++o) db[o] += g[r * outc + o];
        detail::accumulate_grad(pb, std::move(gb));
      }
    });
  });
}

}  // namespace aqcf::ops
