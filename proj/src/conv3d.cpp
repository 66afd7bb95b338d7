#include <Eigen/Core>

#include "aqcf/ops.hpp"

namespace aqcf::ops {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeom {
  std::int64_t batch, cin, cout, k, stride, pad;
  std::int64_t d, h, w;     // input spatial
  std::int64_t od, oh, ow;  // output spatial

  std::int64_t in_vol() const { return d * h * w; }
  std::int64_t out_vol() const { return od * oh * ow; }
  std::int64_t col_rows() const { return cin * k * k * k; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

// col[(c, kd, kh, kw), (od, oh, ow)] = x[c, od*s - p + kd, ...], zero outside.
template <class T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const std::int64_t ov = g.out_vol();
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < g.cin; ++c)
    for (std::int64_t kd = 0; kd < g.k; ++kd)
      for (std::int64_t kh = 0; kh < g.k; ++kh)
        for (std::int64_t kw = 0; kw < g.k; ++kw, ++row) {
          T* dst = col + row * ov;
          const T* src = x + c * g.in_vol();
          for (std::int64_t zd = 0; zd < g.od; ++zd) {
            const std::int64_t id = zd * g.stride - g.pad + kd;
            for (std::int64_t zh = 0; zh < g.oh; ++zh) {
              const std::int64_t ih = zh * g.stride - g.pad + kh;
              T* out = dst + (zd * g.oh + zh) * g.ow;
              if (id < 0 || id >= g.d || ih < 0 || ih >= g.h) {
                std::fill_n(out, g.ow, T(0));
                continue;
              }
              const T* line = src + (id * g.h + ih) * g.w;
              for (std::int64_t zw = 0; zw < g.ow; ++zw) {
                const std::int64_t iw = zw * g.stride - g.pad + kw;
                out[zw] = (iw >= 0 && iw < g.w) ? line[iw] : T(0);
              }
            }
          }
        }
}

template <class T>
void col2im_add(const T* col, const ConvGeom& g, T* x) {
  const std::int64_t ov = g.out_vol();
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < g.cin; ++c)
    for (std::int64_t kd = 0; kd < g.k; ++kd)
      for (std::int64_t kh = 0; kh < g.k; ++kh)
        for (std::int64_t kw = 0; kw < g.k; ++kw, ++row) {
          const T* src = col + row * ov;
          T* dst = x + c * g.in_vol();
          for (std::int64_t zd = 0; zd < g.od; ++zd) {
            const std::int64_t id = zd * g.stride - g.pad + kd;
            if (id < 0 || id >= g.d) continue;
            for (std::int64_t zh = 0; zh < g.oh; ++zh) {
              const std::int64_t ih = zh * g.stride - g.pad + kh;
              if (ih < 0 || ih >= g.h) continue;
              const T* in = src + (zd * g.oh + zh) * g.ow;
              T* line = dst + (id * g.h + ih) * g.w;
              for (std::int64_t zw = 0; zw < g.ow; ++zw) {
                const std::int64_t iw = zw * g.stride - g.pad + kw;
                if (iw >= 0 && iw < g.w) line[iw] += in[zw];
              }
            }
          }
        }
}

ConvGeom geometry(const Shape& xs, const Shape& ws, int stride, int padding) {
  if (xs.size() != 5) throw ShapeError("conv3d: input must be [B,Cin,D,H,W], got " + shape_str(xs));
  if (ws.size() != 5) throw ShapeError("conv3d: kernel must be [Cout,Cin,k,k,k], got " + shape_str(ws));
  if (ws[2] != ws[3] || ws[2] != ws[4]) throw ShapeError("conv3d: kernel must be cubic, got " + shape_str(ws));
  if (xs[1] != ws[1])
    throw ShapeError("conv3d: input has " + std::to_string(xs[1]) + " channels but kernel expects " +
                     std::to_string(ws[1]) + " (input " + shape_str(xs) + ", kernel " + shape_str(ws) + ")");
  if (stride < 1 || padding < 0) throw ShapeError("conv3d: stride must be >= 1 and padding >= 0");
  ConvGeom g{xs[0], xs[1], ws[0], ws[2], stride, padding, xs[2], xs[3], xs[4], 0, 0, 0};
  for (int i = 0; i < 3; ++i)
    if (xs[2 + i] + 2 * padding < g.k)
      throw ShapeError("conv3d: spatial dim " + std::to_string(i) + " of " + shape_str(xs) +
                       " plus padding is smaller than kernel size " + std::to_string(g.k));
  g.od = (g.d + 2 * g.pad - g.k) / g.stride + 1;
  g.oh = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  return g;
}


// Stride-1 path: on the zero-padded grid every tap is a contiguous column
// shift, so the convolution is k^3 small GEMMs with no im2col buffer.
struct ShiftPlan {
  std::int64_t dp, hp, wp;  // padded extents
  std::int64_t span;        // columns computed per tap
  std::vector<std::int64_t> offsets;

  explicit ShiftPlan(const ConvGeom& g)
      : dp(g.d + 2 * g.pad), hp(g.h + 2 * g.pad), wp(g.w + 2 * g.pad) {
    span = ((g.od - 1) * hp + (g.oh - 1)) * wp + g.ow;
    for (std::int64_t kd = 0; kd < g.k; ++kd)
      for (std::int64_t kh = 0; kh < g.k; ++kh)
        for (std::int64_t kw = 0; kw < g.k; ++kw) offsets.push_back((kd * hp + kh) * wp + kw);
  }
  std::int64_t padded_vol() const { return dp * hp * wp; }
  std::int64_t column(const ConvGeom&, std::int64_t zd, std::int64_t zh, std::int64_t zw) const {
    return (zd * hp + zh) * wp + zw;
  }
};

template <class T>
void pad_into(const T* x, const ConvGeom& g, const ShiftPlan& s, T* xp) {
  std::fill_n(xp, g.cin * s.padded_vol(), T(0));
  for (std::int64_t c = 0; c < g.cin; ++c)
    for (std::int64_t d = 0; d < g.d; ++d)
      for (std::int64_t h = 0; h < g.h; ++h)
        std::copy_n(x + ((c * g.d + d) * g.h + h) * g.w, g.w,
                    xp + c * s.padded_vol() + ((d + g.pad) * s.hp + h + g.pad) * s.wp + g.pad);
}

// w [Cout, Cin, taps] -> per-tap [Cout, Cin] blocks laid out tap-major.
template <class T>
std::vector<T> taps_major(const T* w, const ConvGeom& g) {
  const std::int64_t taps = g.k * g.k * g.k;
  std::vector<T> out(static_cast<std::size_t>(g.cout * g.cin * taps));
  for (std::int64_t o = 0; o < g.cout; ++o)
    for (std::int64_t c = 0; c < g.cin; ++c)
      for (std::int64_t t = 0; t < taps; ++t) out[(t * g.cout + o) * g.cin + c] = w[(o * g.cin + c) * taps + t];
  return out;
}

template <class T>
void shift_forward(const T* xb, const T* wt, const ConvGeom& g, const ShiftPlan& s, T* xp, T* yfull,
                   T* yb) {
  pad_into(xb, g, s, xp);
  ConstMatMap<T> X(xp, g.cin, s.padded_vol());
  MatMap<T> Y(yfull, g.cout, s.span);
  Y.setZero();
  for (std::size_t t = 0; t < s.offsets.size(); ++t) {
    ConstMatMap<T> Wt(wt + t * g.cout * g.cin, g.cout, g.cin);
    Y.noalias() += Wt * X.middleCols(s.offsets[t], s.span);
  }
  for (std::int64_t o = 0; o < g.cout; ++o)
    for (std::int64_t zd = 0; zd < g.od; ++zd)
      for (std::int64_t zh = 0; zh < g.oh; ++zh)
        std::copy_n(yfull + o * s.span + s.column(g, zd, zh, 0), g.ow,
                    yb + ((o * g.od + zd) * g.oh + zh) * g.ow);
}

template <class T>
void shift_backward(const T* gd, const T* xd, const T* w, const ConvGeom& g, Tensor* gx, Tensor* gw) {
  const ShiftPlan s(g);
  const auto wt = taps_major(w, g);
  const std::int64_t taps = static_cast<std::int64_t>(s.offsets.size());
  std::vector<T> gwt(gw ? wt.size() : 0, T(0));
  std::vector<T> xp(static_cast<std::size_t>(g.cin * s.padded_vol()));
  std::vector<T> dxp(gx ? xp.size() : 0);
  std::vector<T> gfull(static_cast<std::size_t>(g.cout * s.span));
  for (std::int64_t b = 0; b < g.batch; ++b) {
    // gradient scattered onto the padded-grid columns; invalid columns stay zero
    std::fill(gfull.begin(), gfull.end(), T(0));
    const T* gb = gd + b * g.cout * g.out_vol();
    for (std::int64_t o = 0; o < g.cout; ++o)
      for (std::int64_t zd = 0; zd < g.od; ++zd)
        for (std::int64_t zh = 0; zh < g.oh; ++zh)
          std::copy_n(gb + ((o * g.od + zd) * g.oh + zh) * g.ow, g.ow,
                      gfull.data() + o * s.span + s.column(g, zd, zh, 0));
    ConstMatMap<T> G(gfull.data(), g.cout, s.span);
    if (gw) {
      pad_into(xd + b * g.cin * g.in_vol(), g, s, xp.data());
      ConstMatMap<T> X(xp.data(), g.cin, s.padded_vol());
      for (std::int64_t t = 0; t < taps; ++t) {
        MatMap<T> GW(gwt.data() + t * g.cout * g.cin, g.cout, g.cin);
        GW.noalias() += G * X.middleCols(s.offsets[t], s.span).transpose();
      }
    }
    if (gx) {
      std::fill(dxp.begin(), dxp.end(), T(0));
      MatMap<T> DX(dxp.data(), g.cin, s.padded_vol());
      for (std::int64_t t = 0; t < taps; ++t) {
        ConstMatMap<T> Wt(wt.data() + t * g.cout * g.cin, g.cout, g.cin);
        DX.middleCols(s.offsets[t], s.span).noalias() += Wt.transpose() * G;
      }
      T* out = gx->data<T>().data() + b * g.cin * g.in_vol();
      for (std::int64_t c = 0; c < g.cin; ++c)
        for (std::int64_t d = 0; d < g.d; ++d)
          for (std::int64_t h = 0; h < g.h; ++h)
            std::copy_n(dxp.data() + c * s.padded_vol() + ((d + g.pad) * s.hp + h + g.pad) * s.wp + g.pad, g.w,
                        out + ((c * g.d + d) * g.h + h) * g.w);
    }
  }
  if (gw) {
    auto dst = gw->data<T>();
    for (std::int64_t o = 0; o < g.cout; ++o)
      for (std::int64_t c = 0; c < g.cin; ++c)
        for (std::int64_t t = 0; t < taps; ++t) dst[(o * g.cin + c) * taps + t] = gwt[(t * g.cout + o) * g.cin + c];
  }
}

}  // namespace

Var conv3d(const Var& x, const Var& w, const std::optional<Var>& bias, int stride, int padding) {
  const ConvGeom g = geometry(x.shape(), w.shape(), stride, padding);
  if (x.dtype() != w.dtype()) throw ShapeError("conv3d: input and kernel dtypes differ");
  if (bias && (bias->shape() != Shape{g.cout}))
    throw ShapeError("conv3d: bias " + shape_str(bias->shape()) + " does not match Cout=" + std::to_string(g.cout));
  Tensor out({g.batch, g.cout, g.od, g.oh, g.ow}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* xd = x.value().data<T>().data();
    T* yd = out.data<T>().data();
    ConstMatMap<T> W(w.value().data<T>().data(), g.cout, g.col_rows());
    const bool shifted = g.stride == 1 && !g.pointwise();
    std::vector<T> col(g.pointwise() || shifted ? 0 : static_cast<std::size_t>(g.col_rows() * g.out_vol()));
    std::optional<ShiftPlan> plan;
    std::vector<T> wt, xp, yfull;
    if (shifted) {
      plan.emplace(g);
      wt = taps_major(w.value().data<T>().data(), g);
      xp.resize(static_cast<std::size_t>(g.cin * plan->padded_vol()));
      yfull.resize(static_cast<std::size_t>(g.cout * plan->span));
    }
    for (std::int64_t b = 0; b < g.batch; ++b) {
      const T* xb = xd + b * g.cin * g.in_vol();
      MatMap<T> Y(yd + b * g.cout * g.out_vol(), g.cout, g.out_vol());
      if (shifted) {
        shift_forward(xb, wt.data(), g, *plan, xp.data(), yfull.data(), Y.data());
      } else {
        if (!g.pointwise()) im2col(xb, g, col.data());
        ConstMatMap<T> C(g.pointwise() ? xb : col.data(), g.col_rows(), g.out_vol());
        Y.noalias() = W * C;
      }
      if (bias) {
        auto bd = bias->value().data<T>();
        for (std::int64_t o = 0; o < g.cout; ++o) Y.row(o).array() += bd[o];
      }
    }
  });
  std::vector<Var> parents{x, w};
  if (bias) parents.push_back(*bias);
  return make_result("conv3d", std::move(out), parents, [g](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    dispatch(self.grad.dtype(), [&]<class T>() {
      const T* gd = self.grad.data<T>().data();
      const T* xd = px.value.data<T>().data();
      ConstMatMap<T> W(pw.value.data<T>().data(), g.cout, g.col_rows());
      Tensor gx, gw;
      if (px.requires_grad) gx = Tensor(px.value.shape(), px.value.dtype());
      if (pw.requires_grad) gw = Tensor(pw.value.shape(), pw.value.dtype());
      if (g.stride == 1 && !g.pointwise()) {
        shift_backward<T>(gd, xd, pw.value.data<T>().data(), g, px.requires_grad ? &gx : nullptr,
                          pw.requires_grad ? &gw : nullptr);
      } else {
      std::vector<T> col(g.pointwise() ? 0 : static_cast<std::size_t>(g.col_rows() * g.out_vol()));
      std::vector<T> dcol(col.size());
      for (std::int64_t b = 0; b < g.batch; ++b) {
        ConstMatMap<T> G(gd + b * g.cout * g.out_vol(), g.cout, g.out_vol());
        const T* xb = xd + b * g.cin * g.in_vol();
        if (pw.requires_grad) {
          if (!g.pointwise()) im2col(xb, g, col.data());
          ConstMatMap<T> C(g.pointwise() ? xb : col.data(), g.col_rows(), g.out_vol());
          MatMap<T> GW(gw.data<T>().data(), g.cout, g.col_rows());
          GW.noalias() += G * C.transpose();
        }
        if (px.requires_grad) {
          T* gxb = gx.data<T>().data() + b * g.cin * g.in_vol();
          if (g.pointwise()) {
            MatMap<T> GX(gxb, g.col_rows(), g.out_vol());
            GX.noalias() += W.transpose() * G;
          } else {
            MatMap<T> DC(dcol.data(), g.col_rows(), g.out_vol());
            DC.noalias() = W.transpose() * G;
            col2im_add(dcol.data(), g, gxb);
          }
        }
      }
      }
      if (px.requires_grad) detail::accumulate_grad(px, std::move(gx));
      if (pw.requires_grad) detail::accumulate_grad(pw, std::move(gw));
      if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
        auto& pb = *self.parents[2];
        Tensor gb(pb.value.shape(), pb.value.dtype());
        auto db = gb.data<T>();
        for (std::int64_t b = 0; b < g.batch; ++b) {
          // plain loop: Eigen's vectorized sum depends on buffer alignment
          const T* gb_ptr = gd + b * g.cout * g.out_vol();
          for (std::int64_t o = 0; o < g.cout; ++o) {
            T s = 0;
            for (std::int64_t v = 0; v < g.out_vol(); ++v) s += gb_ptr[o * g.out_vol() + v];
            db[o] += s;
          }
        }
        detail::accumulate_grad(pb, std::move(gb));
      }
    });
  });
}

}  // namespace aqcf::ops
