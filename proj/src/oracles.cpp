#include "aqcf/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace aqcf::oracle {

namespace {

struct Dims {
  std::int64_t b, c, d, h, w;
};

Dims dims5(const Tensor& t) {
  if (t.rank() != 5) throw ShapeError("oracle: expected a 5-D tensor, got " + shape_str(t.shape()));
  return {t.dim(0), t.dim(1), t.dim(2), t.dim(3), t.dim(4)};
}

std::int64_t out_size(std::int64_t n, std::int64_t k, int stride, int padding) {
  return (n + 2 * padding - k) / stride + 1;
}

}  // namespace

Tensor conv3d_dense(const Tensor& x, const Tensor& w, const std::optional<Tensor>& bias, int stride,
                    int padding) {
  const Dims xi = dims5(x), wi = dims5(w);
  const std::int64_t k = wi.d;
  const std::int64_t od = out_size(xi.d, k, stride, padding), oh = out_size(xi.h, k, stride, padding),
                     ow = out_size(xi.w, k, stride, padding);
  const std::int64_t in_vol = xi.d * xi.h * xi.w, out_vol = od * oh * ow;
  const std::int64_t rows = wi.b * out_vol, cols = xi.c * in_vol;

  // unroll: M[(o, p), (c, q)] = w[o, c, tap] when input voxel q sits under tap at output p
  std::vector<double> m(static_cast<std::size_t>(rows * cols), 0.0);
  for (std::int64_t o = 0; o < wi.b; ++o)
    for (std::int64_t z = 0; z < od; ++z)
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t xx = 0; xx < ow; ++xx) {
          const std::int64_t row = o * out_vol + (z * oh + y) * ow + xx;
          for (std::int64_t c = 0; c < xi.c; ++c)
            for (std::int64_t a = 0; a < k; ++a)
              for (std::int64_t b = 0; b < k; ++b)
                for (std::int64_t e = 0; e < k; ++e) {
                  const std::int64_t iz = z * stride - padding + a, iy = y * stride - padding + b,
                                     ix = xx * stride - padding + e;
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= xi.d || iy >= xi.h || ix >= xi.w) continue;
                  const std::int64_t col = c * in_vol + (iz * xi.h + iy) * xi.w + ix;
                  m[row * cols + col] += w.at((((o * wi.c + c) * k + a) * k + b) * k + e);
                }
        }

  Tensor out({xi.b, wi.b, od, oh, ow}, DType::f64);
  for (std::int64_t n = 0; n < xi.b; ++n)
    for (std::int64_t r = 0; r < rows; ++r) {
      double acc = bias ? bias->at(r / out_vol) : 0.0;
      for (std::int64_t col = 0; col < cols; ++col) acc += m[r * cols + col] * x.at(n * cols + col);
      out.set(n * rows + r, acc);
    }
  return out;
}

std::array<double, 4> hamilton(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  // basis products e_p * e_q = sign * e_index, with e_0 = 1, e_1 = i, e_2 = j, e_3 = k
  static constexpr int kIndex[4][4] = {{0, 1, 2, 3}, {1, 0, 3, 2}, {2, 3, 0, 1}, {3, 2, 1, 0}};
  static constexpr int kSign[4][4] = {{1, 1, 1, 1}, {1, -1, 1, -1}, {1, -1, -1, 1}, {1, 1, -1, -1}};
  std::array<double, 4> r{};
  for (int p = 0; p < 4; ++p)
    for (int q = 0; q < 4; ++q) r[kIndex[p][q]] += kSign[p][q] * a[p] * b[q];
  return r;
}

Tensor qconv3d_hamilton(const Tensor& x, const std::array<Tensor, 4>& sub, const std::optional<Tensor>& bias,
                        int stride, int padding) {
  const Dims xi = dims5(x), wi = dims5(sub[0]);
  const std::int64_t ci = wi.c, co = wi.b, k = wi.d;
  if (xi.c != 4 * ci) throw ShapeError("hamilton oracle: input channels do not match kernel");
  const std::int64_t od = out_size(xi.d, k, stride, padding), oh = out_size(xi.h, k, stride, padding),
                     ow = out_size(xi.w, k, stride, padding);
  auto xat = [&](std::int64_t n, std::int64_t ch, std::int64_t z, std::int64_t y, std::int64_t xx) {
    return x.at((((n * xi.c + ch) * xi.d + z) * xi.h + y) * xi.w + xx);
  };
  Tensor out({xi.b, 4 * co, od, oh, ow}, DType::f64);
  for (std::int64_t n = 0; n < xi.b; ++n)
    for (std::int64_t o = 0; o < co; ++o)
      for (std::int64_t z = 0; z < od; ++z)
        for (std::int64_t y = 0; y < oh; ++y)
          for (std::int64_t xx = 0; xx < ow; ++xx) {
            std::array<double, 4> acc{};
            for (std::int64_t i = 0; i < ci; ++i)
              for (std::int64_t a = 0; a < k; ++a)
                for (std::int64_t b = 0; b < k; ++b)
                  for (std::int64_t e = 0; e < k; ++e) {
                    const std::int64_t iz = z * stride - padding + a, iy = y * stride - padding + b,
                                       ix = xx * stride - padding + e;
                    if (iz < 0 || iy < 0 || ix < 0 || iz >= xi.d || iy >= xi.h || ix >= xi.w) continue;
                    const std::int64_t widx = (((o * ci + i) * k + a) * k + b) * k + e;
                    const std::array<double, 4> wq{sub[0].at(widx), sub[1].at(widx), sub[2].at(widx),
                                                   sub[3].at(widx)};
                    const std::array<double, 4> xq{xat(n, i, iz, iy, ix), xat(n, ci + i, iz, iy, ix),
                                                   xat(n, 2 * ci + i, iz, iy, ix), xat(n, 3 * ci + i, iz, iy, ix)};
                    const auto p = hamilton(wq, xq);
                    for (int q = 0; q < 4; ++q) acc[q] += p[q];
                  }
            for (int q = 0; q < 4; ++q) {
              const std::int64_t ch = q * co + o;
              const double bv = bias ? bias->at(ch) : 0.0;
              out.set((((n * 4 * co + ch) * od + z) * oh + y) * ow + xx, acc[q] + bv);
            }
          }
  return out;
}

Tensor context_naive(const Tensor& fq, const Tensor& fk, const Tensor& wq, const Tensor& wk, const Tensor& wv) {
  const Dims d = dims5(fq);
  const std::int64_t vol = d.d * d.h * d.w, ch = d.c;
  Tensor out(fq.shape(), DType::f64);
  std::vector<double> q(ch), kk(ch), v(ch), s(ch);
  for (std::int64_t n = 0; n < d.b; ++n)
    for (std::int64_t p = 0; p < vol; ++p) {
      for (std::int64_t o = 0; o < ch; ++o) {
        q[o] = kk[o] = v[o] = 0.0;
        for (std::int64_t c = 0; c < ch; ++c) {
          const std::int64_t src = (n * ch + c) * vol + p;
          q[o] += wq.at(o * ch + c) * fq.at(src);
          kk[o] += wk.at(o * ch + c) * fk.at(src);
          v[o] += wv.at(o * ch + c) * fk.at(src);
        }
      }
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t o = 0; o < ch; ++o) {
        s[o] = q[o] * kk[o];
        mx = std::max(mx, s[o]);
      }
      double z = 0.0;
      for (std::int64_t o = 0; o < ch; ++o) z += std::exp(s[o] - mx);
      for (std::int64_t o = 0; o < ch; ++o) out.set((n * ch + o) * vol + p, std::exp(s[o] - mx) / z * v[o]);
    }
  return out;
}

GradcheckReport gradcheck(const std::function<Var()>& loss, const std::vector<Var>& params, int samples, Rng& rng,
                          double h, double floor) {
  std::vector<Var> ps = params;
  for (auto& p : ps) p.zero_grad();
  backward(loss());

  std::int64_t total = 0;
  for (const auto& p : ps) total += p.numel();
  GradcheckReport rep;
  for (int s = 0; s < samples; ++s) {
    std::int64_t flat = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(total)));
    std::size_t which = 0;
    while (flat >= ps[which].numel()) flat -= ps[which++].numel();
    Var& p = ps[which];
    const double analytic = p.has_grad() ? p.grad().at(flat) : 0.0;
    const double orig = p.value().at(flat);
    double plus, minus;
    {
      NoGradGuard ng;
      p.mutable_value().set(flat, orig + h);
      plus = loss().value().item();
      p.mutable_value().set(flat, orig - h);
      minus = loss().value().item();
      p.mutable_value().set(flat, orig);
    }
    const double numeric = (plus - minus) / (2.0 * h);
    const double abs_err = std::abs(analytic - numeric);
    const double rel = abs_err / std::max({std::abs(analytic), std::abs(numeric), floor});
    rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
    if (rel >= rep.max_rel_error) {
      rep.worst_param = which;
      rep.worst_analytic = analytic;
      rep.worst_numeric = numeric;
    }
    rep.max_rel_error = std::max(rep.max_rel_error, rel);
    ++rep.checked;
  }
  return rep;
}

double dsc_bruteforce(const Mask& pred, const Mask& gt) {
  double inter = 0, sp = 0, sg = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    inter += (pred.data[i] && gt.data[i]) ? 1 : 0;
    sp += pred.data[i] ? 1 : 0;
    sg += gt.data[i] ? 1 : 0;
  }
  if (sp + sg == 0) return 1.0;
  return 2.0 * inter / (sp + sg);
}

namespace {

std::vector<std::array<std::int64_t, 3>> border(const Mask& m) {
  std::vector<std::array<std::int64_t, 3>> out;
  const auto [D, H, W] = m.shape;
  auto in = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
    if (z < 0 || y < 0 || x < 0 || z >= D || y >= H || x >= W) return false;
    return m.data[(z * H + y) * W + x] != 0;
  };
  for (std::int64_t z = 0; z < D; ++z)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        if (!in(z, y, x)) continue;
        if (!in(z - 1, y, x) || !in(z + 1, y, x) || !in(z, y - 1, x) || !in(z, y + 1, x) || !in(z, y, x - 1) ||
            !in(z, y, x + 1))
          out.push_back({z, y, x});
      }
  return out;
}

}  // namespace

std::vector<double> surface_distances_bruteforce(const Mask& pred, const Mask& gt,
                                                 const std::array<double, 3>& spacing) {
  const auto a = border(pred), b = border(gt);
  std::vector<double> out;
  auto one_way = [&](const auto& from, const auto& to) {
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) {
        double d2 = 0;
        for (int ax = 0; ax < 3; ++ax) {
          const double d = static_cast<double>(p[ax] - q[ax]) * spacing[ax];
          d2 += d * d;
        }
        best = std::min(best, d2);
      }
      out.push_back(std::sqrt(best));
    }
  };
  one_way(a, b);
  one_way(b, a);
  return out;
}

double percentile(std::vector<double> values, double q) {
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

std::vector<double> adam_trajectory(double theta, const std::vector<double>& grads, const AdamConfig& cfg) {
  std::vector<double> out;
  double m = 0, v = 0;
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    const double g = grads[t - 1];
    m = cfg.beta1 * m + (1 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
    const double mhat = m / (1 - std::pow(cfg.beta1, static_cast<double>(t)));
    const double vhat = v / (1 - std::pow(cfg.beta2, static_cast<double>(t)));
    theta -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * theta);
    out.push_back(theta);
  }
  return out;
}

std::vector<double> plateau_reference(const std::vector<double>& metrics, double lr, double factor, int patience,
                                      double min_lr) {
  std::vector<double> out;
  double best = -std::numeric_limits<double>::infinity();
  int bad = 0;
  for (double m : metrics) {
    if (m > best) {
      best = m;
      bad = 0;
    } else if (++bad >= patience) {
      lr = std::max(lr * factor, min_lr);
      bad = 0;
    }
    out.push_back(lr);
  }
  return out;
}

}  // namespace aqcf::oracle
