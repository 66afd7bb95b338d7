#include "aqcf/quaternion.hpp"

#include <array>
#include <cmath>
#include <numeric>

#include "aqcf/ops.hpp"

namespace aqcf {

namespace {

// Block (row, col) of the structured kernel = sign * sub-kernel[source].
// Sub-kernel order: 0 = r, 1 = i, 2 = j, 3 = k.
struct Block {
  int source;
  int sign;
};
constexpr std::array<std::array<Block, 4>, 4> kHamilton{{
    {{{0, +1}, {1, -1}, {2, -1}, {3, -1}}},
    {{{1, +1}, {0, +1}, {3, -1}, {2, +1}}},
    {{{2, +1}, {3, +1}, {0, +1}, {1, -1}}},
    {{{3, +1}, {2, -1}, {1, +1}, {0, +1}}},
}};

}  // namespace

QuaternionKernel QuaternionKernel::init(std::int64_t in_q, std::int64_t out_q, int k, bool bias, Rng& rng,
                                        DType dtype) {
  const Shape s{out_q, in_q, k, k, k};
  const double bound = std::sqrt(1.0 / static_cast<double>(in_q * k * k * k));
  QuaternionKernel qk;
  qk.w_r = uniform_param(s, bound, rng, dtype);
  qk.w_i = uniform_param(s, bound, rng, dtype);
  qk.w_j = uniform_param(s, bound, rng, dtype);
  qk.w_k = uniform_param(s, bound, rng, dtype);
  if (bias) qk.bias = uniform_param({4 * out_q}, bound, rng, dtype);
  return qk;
}

Var expand_kernel(const Var& w_r, const Var& w_i, const Var& w_j, const Var& w_k) {
  const Shape& s = w_r.shape();
  for (const Var* w : {&w_i, &w_j, &w_k})
    if (w->shape() != s || w->dtype() != w_r.dtype())
      throw ShapeError("expand_kernel: sub-kernel shapes differ: " + shape_str(s) + " vs " +
                       shape_str(w->shape()));
  if (s.size() != 5) throw ShapeError("expand_kernel: sub-kernels must be [Cout,Cin,k,k,k], got " + shape_str(s));
  const std::int64_t co = s[0], ci = s[1], taps = s[2] * s[3] * s[4];
  Tensor out({4 * co, 4 * ci, s[2], s[3], s[4]}, w_r.dtype());
  const std::array<const Var*, 4> src{&w_r, &w_i, &w_j, &w_k};
  dispatch(out.dtype(), [&]<class T>() {
    auto dst = out.data<T>();
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) {
        const auto [which, sign] = kHamilton[r][c];
        auto w = src[which]->value().data<T>();
        for (std::int64_t o = 0; o < co; ++o)
          for (std::int64_t i = 0; i < ci; ++i) {
            const T* from = w.data() + (o * ci + i) * taps;
            T* to = dst.data() + ((r * co + o) * 4 * ci + c * ci + i) * taps;
            for (std::int64_t t = 0; t < taps; ++t) to[t] = sign > 0 ? from[t] : -from[t];
          }
      }
  });
  return make_result("expand_kernel", std::move(out), {w_r, w_i, w_j, w_k}, [co, ci, taps](detail::Node& self) {
    dispatch(self.grad.dtype(), [&]<class T>() {
      std::array<Tensor, 4> grads;
      for (auto& g : grads) g = Tensor(self.parents[0]->value.shape(), self.grad.dtype());
      auto g = self.grad.data<T>();
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) {
          const auto [which, sign] = kHamilton[r][c];
          auto d = grads[which].data<T>();
          for (std::int64_t o = 0; o < co; ++o)
            for (std::int64_t i = 0; i < ci; ++i) {
              const T* from = g.data() + ((r * co + o) * 4 * ci + c * ci + i) * taps;
              T* to = d.data() + (o * ci + i) * taps;
              for (std::int64_t t = 0; t < taps; ++t) to[t] += sign > 0 ? from[t] : -from[t];
            }
        }
      for (int q = 0; q < 4; ++q) detail::accumulate_grad(*self.parents[q], std::move(grads[q]));
    });
  });
}

Var expand_kernel(const QuaternionKernel& qk) { return expand_kernel(qk.w_r, qk.w_i, qk.w_j, qk.w_k); }

ParamCount param_count(std::int64_t in_q, std::int64_t out_q, int k, bool bias) {
  if (in_q <= 0 || out_q <= 0 || k <= 0) throw ShapeError("param_count: dimensions must be positive");
  const std::int64_t k3 = static_cast<std::int64_t>(k) * k * k;
  const std::int64_t qw = 4 * out_q * in_q * k3;
  const std::int64_t rw = 16 * out_q * in_q * k3;
  ParamCount pc;
  pc.quaternion = qw + (bias ? 4 * out_q : 0);
  pc.real_equivalent = rw + (bias ? 4 * out_q : 0);
  const std::int64_t g = std::gcd(qw, rw);
  pc.ratio_num = qw / g;
  pc.ratio_den = rw / g;
  return pc;
}

Var quaternion_concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("quaternion_concat: no inputs");
  std::vector<Var> split;
  Shape out = parts.front().shape();
  if (out.size() < 2) throw ShapeError("quaternion_concat: expected [B, 4C, ...], got " + shape_str(out));
  out[1] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out.size() || s[1] % 4 != 0)
      throw ShapeError("quaternion_concat: channel count must be divisible by 4, got " + shape_str(s));
    out[1] += s[1];
    Shape six{s[0], 4, s[1] / 4};
    six.insert(six.end(), s.begin() + 2, s.end());
    split.push_back(ops::reshape(p, six));
  }
  return ops::reshape(ops::concat(split, 2), out);
}

QConvLayer::QConvLayer(const Spec& spec, Rng& rng, DType dtype) : spec_(spec) {
  if (spec.in_q <= 0 || spec.out_q <= 0) throw ShapeError("QConvLayer: channel counts must be positive");
  if (spec.real_valued) {
    const std::int64_t in = 4 * spec.in_q, out = 4 * spec.out_q;
    const double bound = std::sqrt(1.0 / static_cast<double>(in * spec.k * spec.k * spec.k));
    real_kernel_ = uniform_param({out, in, spec.k, spec.k, spec.k}, bound, rng, dtype);
    if (spec.bias) real_bias_ = uniform_param({out}, bound, rng, dtype);
  } else {
    kernel_ = QuaternionKernel::init(spec.in_q, spec.out_q, spec.k, spec.bias, rng, dtype);
  }
}

const std::optional<Var>& QConvLayer::bias() const { return spec_.real_valued ? real_bias_ : kernel_.bias; }

Var QConvLayer::effective_kernel() const { return spec_.real_valued ? real_kernel_ : expand_kernel(kernel_); }

Var QConvLayer::forward(const Var& x) const {
  if (x.shape().size() != 5 || x.shape()[1] % 4 != 0)
    throw ShapeError("qconv3d: channel count must be divisible by 4, got input " + shape_str(x.shape()));
  if (x.shape()[1] != 4 * spec_.in_q)
    throw ShapeError("qconv3d: layer expects " + std::to_string(4 * spec_.in_q) + " real channels, got " +
                     shape_str(x.shape()));
  Var y = ops::conv3d(x, effective_kernel(), bias(), spec_.stride, spec_.padding);
  if (spec_.norm == Norm::instance) y = ops::instance_norm(y);
  if (spec_.activation == Activation::relu) y = ops::relu(y);
  return y;
}

void QConvLayer::collect(const std::string& prefix, ParamList& out) const {
  if (spec_.real_valued) {
    out.push_back({prefix + ".weight", real_kernel_});
  } else {
    out.push_back({prefix + ".w_r", kernel_.w_r});
    out.push_back({prefix + ".w_i", kernel_.w_i});
    out.push_back({prefix + ".w_j", kernel_.w_j});
    out.push_back({prefix + ".w_k", kernel_.w_k});
  }
  if (bias()) out.push_back({prefix + ".bias", *bias()});
}

std::int64_t QConvLayer::weight_count() const {
  if (spec_.real_valued) return real_kernel_.numel();
  return 4 * kernel_.w_r.numel();
}

QuaternionAttentionGate::QuaternionAttentionGate(std::int64_t skip_q, std::int64_t gating_q, bool real_valued,
                                                 Rng& rng, DType dtype) {
  QConvLayer::Spec s;
  s.k = 1;
  s.padding = 0;
  s.real_valued = real_valued;
  s.in_q = skip_q;
  s.out_q = skip_q;
  theta_ = QConvLayer(s, rng, dtype);
  s.in_q = gating_q;
  phi_ = QConvLayer(s, rng, dtype);
  s.in_q = skip_q;
  s.out_q = 1;
  psi_ = QConvLayer(s, rng, dtype);
}

Var QuaternionAttentionGate::coefficients(const Var& skip, const Var& gating) const {
  const Shape& s = skip.shape();
  const Shape& g = gating.shape();
  if (s.size() != 5 || g.size() != 5 || s[0] != g[0] || g[2] * 2 != s[2] || g[3] * 2 != s[3] || g[4] * 2 != s[4])
    throw ShapeError("attention gate: gating " + shape_str(g) + " is not exactly one scale coarser than skip " +
                     shape_str(s));
  Var a = ops::add(theta_.forward(skip), phi_.forward(ops::upsample_nearest2(gating)));
  Var q = psi_.forward(ops::relu(a));
  return ops::sigmoid(ops::slice(q, 1, 0, 1));
}

Var QuaternionAttentionGate::apply(const Var& skip, const Var& coefficients) {
  return ops::mul(skip, coefficients);
}

Var QuaternionAttentionGate::forward(const Var& skip, const Var& gating) const {
  return apply(skip, coefficients(skip, gating));
}

void QuaternionAttentionGate::collect(const std::string& prefix, ParamList& out) const {
  theta_.collect(prefix + ".theta", out);
  phi_.collect(prefix + ".phi", out);
  psi_.collect(prefix + ".psi", out);
}

}  // namespace aqcf
