#include <cmath>

#include "aqcf/ops.hpp"
#include "aqcf/oracles.hpp"
#include "aqcf/quaternion.hpp"
#include "doctest.h"

using namespace aqcf;

namespace {

Tensor random_tensor(const Shape& s, Rng& rng) {
  Tensor t(s, DType::f64);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform(-1.0, 1.0));
  return t;
}

std::array<Tensor, 4> values(const QuaternionKernel& qk) {
  return {qk.w_r.value(), qk.w_i.value(), qk.w_j.value(), qk.w_k.value()};
}

std::vector<double> unit_expansion(int which) {
  std::array<Var, 4> w;
  for (int q = 0; q < 4; ++q) w[q] = Var(Tensor::full({1, 1, 1, 1, 1}, q == which ? 1.0 : 0.0));
  return expand_kernel(w[0], w[1], w[2], w[3]).value().to_vector();
}

}  // namespace

TEST_CASE("expand_kernel sign pattern") {
  CHECK(unit_expansion(0) == std::vector<double>{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  CHECK(unit_expansion(1) == std::vector<double>{0, -1, 0, 0, 1, 0, 0, 0, 0, 0, 0, -1, 0, 0, 1, 0});
  CHECK(unit_expansion(2) == std::vector<double>{0, 0, -1, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0, -1, 0, 0});
  CHECK(unit_expansion(3) == std::vector<double>{0, 0, 0, -1, 0, 0, -1, 0, 0, 1, 0, 0, 1, 0, 0, 0});
}

TEST_CASE("expand_kernel rejects mismatched sub-kernels") {
  Var a(Tensor({1, 1, 3, 3, 3})), b(Tensor({1, 2, 3, 3, 3}));
  CHECK_THROWS_AS(expand_kernel(a, a, b, a), ShapeError);
}

TEST_CASE("expand_kernel is linear") {
  Rng rng(1);
  std::array<Tensor, 4> x, y;
  for (int q = 0; q < 4; ++q) {
    x[q] = random_tensor({2, 3, 3, 3, 3}, rng);
    y[q] = random_tensor({2, 3, 3, 3, 3}, rng);
  }
  auto ex = [](const std::array<Tensor, 4>& t) {
    return expand_kernel(Var(t[0]), Var(t[1]), Var(t[2]), Var(t[3])).value();
  };
  std::array<Tensor, 4> combo;
  for (int q = 0; q < 4; ++q) {
    combo[q] = x[q];
    combo[q].scale_(2.5);
    Tensor ys = y[q];
    ys.scale_(-0.5);
    combo[q].add_(ys);
  }
  Tensor lhs = ex(combo);
  Tensor rhs = ex(x);
  rhs.scale_(2.5);
  Tensor ry = ex(y);
  ry.scale_(-0.5);
  rhs.add_(ry);
  CHECK(max_abs_diff(lhs, rhs) < 1e-14);
}

TEST_CASE("quaternion basis products") {
  using Q = std::array<double, 4>;
  const Q one{1, 0, 0, 0}, i{0, 1, 0, 0}, j{0, 0, 1, 0}, k{0, 0, 0, 1};
  CHECK(oracle::hamilton(i, j) == k);
  CHECK(oracle::hamilton(j, k) == i);
  CHECK(oracle::hamilton(k, i) == j);
  CHECK(oracle::hamilton(i, i) == Q{-1, 0, 0, 0});
  CHECK(oracle::hamilton(j, i) == Q{0, 0, 0, -1});
  CHECK(oracle::hamilton(one, k) == k);
}

TEST_CASE("qconv3d matches the Hamilton multiply-accumulate oracle") {
  Rng rng(2);
  struct Case {
    std::int64_t in_q, out_q;
    int k, stride, padding;
    bool bias;
    Shape spatial;
  };
  for (const Case& c : {Case{2, 2, 3, 1, 1, false, {4, 4, 4}}, Case{1, 3, 3, 2, 1, true, {5, 4, 6}},
                        Case{3, 1, 1, 1, 0, true, {3, 3, 3}}}) {
    QConvLayer::Spec spec;
    spec.in_q = c.in_q;
    spec.out_q = c.out_q;
    spec.k = c.k;
    spec.stride = c.stride;
    spec.padding = c.padding;
    spec.bias = c.bias;
    QConvLayer layer(spec, rng, DType::f64);
    Tensor x = random_tensor({2, 4 * c.in_q, c.spatial[0], c.spatial[1], c.spatial[2]}, rng);
    Tensor y = layer.forward(Var(x)).value();
    std::optional<Tensor> b;
    if (layer.bias()) b = layer.bias()->value();
    Tensor ref = oracle::qconv3d_hamilton(x, values(layer.kernel()), b, c.stride, c.padding);
    REQUIRE(y.shape() == ref.shape());
    CHECK(max_abs_diff(y, ref) < 1e-12);
    Tensor direct = ops::conv3d(Var(x), Var(expand_kernel(layer.kernel()).value()), layer.bias(), c.stride,
                                c.padding).value();
    CHECK(max_abs_diff(y, direct) < 1e-12);
  }
}

TEST_CASE("qconv3d zero input without bias is zero") {
  Rng rng(3);
  QConvLayer::Spec spec;
  spec.bias = false;
  QConvLayer layer(spec, rng, DType::f64);
  Tensor y = layer.forward(Var(Tensor({1, 4, 3, 3, 3}))).value();
  for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.at(i) == 0.0);
  CHECK_THROWS_AS(layer.forward(Var(Tensor({1, 6, 3, 3, 3}))), ShapeError);
  CHECK_THROWS_AS(layer.forward(Var(Tensor({1, 8, 3, 3, 3}))), ShapeError);
}

TEST_CASE("qconv3d gradients reach the four sub-kernels") {
  Rng rng(4);
  QConvLayer::Spec spec;
  spec.in_q = 2;
  spec.out_q = 1;
  QConvLayer layer(spec, rng, DType::f64);
  Var x(random_tensor({1, 8, 3, 3, 3}, rng));
  auto loss = [&] { return ops::sum(layer.forward(x)); };
  Rng probe(5);
  CHECK(oracle::gradcheck(loss, {layer.kernel().w_i}, 20, probe).max_rel_error < 1e-4);
  ParamList params;
  layer.collect("conv", params);
  std::vector<Var> all;
  for (auto& p : params) all.push_back(p.var);
  CHECK(oracle::gradcheck(loss, all, 20, probe).max_rel_error < 1e-4);
  CHECK(params.size() == 5);
  CHECK(params[1].name == "conv.w_i");
}

TEST_CASE("parameter counts") {
  ParamCount a = param_count(3, 6, 3, false);
  CHECK(a.quaternion == 1944);
  CHECK(a.real_equivalent == 7776);
  CHECK(a.ratio_num == 1);
  CHECK(a.ratio_den == 4);
  ParamCount b = param_count(1, 1, 1, false);
  CHECK(b.quaternion == 4);
  CHECK(b.real_equivalent == 16);
  CHECK_THROWS(param_count(0, 1, 1, false));

  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    QConvLayer::Spec spec;
    spec.in_q = 1 + static_cast<std::int64_t>(rng.below(5));
    spec.out_q = 1 + static_cast<std::int64_t>(rng.below(5));
    spec.k = rng.bernoulli(0.5) ? 3 : 1;
    spec.bias = false;
    QConvLayer q(spec, rng, DType::f64);
    spec.real_valued = true;
    QConvLayer r(spec, rng, DType::f64);
    ParamList qp, rp;
    q.collect("q", qp);
    r.collect("r", rp);
    CHECK(4 * count_elements(qp) == count_elements(rp));
    const ParamCount pc = param_count(spec.in_q, spec.out_q, spec.k, false);
    CHECK(pc.quaternion == count_elements(qp));
    CHECK(pc.real_equivalent == count_elements(rp));
  }
}

TEST_CASE("composition of 1x1x1 quaternion convs is a structured conv") {
  Rng rng(7);
  QConvLayer::Spec s1;
  s1.in_q = 2;
  s1.out_q = 3;
  s1.k = 1;
  s1.padding = 0;
  s1.bias = false;
  QConvLayer first(s1, rng, DType::f64);
  QConvLayer::Spec s2 = s1;
  s2.in_q = 3;
  s2.out_q = 2;
  QConvLayer second(s2, rng, DType::f64);

  // composite sub-kernels: W[o,i] = sum_m W2[o,m] * W1[m,i] (Hamilton product)
  const auto w1 = values(first.kernel()), w2 = values(second.kernel());
  std::array<Tensor, 4> comp;
  for (auto& c : comp) c = Tensor({2, 2, 1, 1, 1});
  for (int o = 0; o < 2; ++o)
    for (int i = 0; i < 2; ++i)
      for (int m = 0; m < 3; ++m) {
        std::array<double, 4> a{}, b{};
        for (int q = 0; q < 4; ++q) {
          a[q] = w2[q].at(o * 3 + m);
          b[q] = w1[q].at(m * 2 + i);
        }
        const auto p = oracle::hamilton(a, b);
        for (int q = 0; q < 4; ++q) comp[q].set(o * 2 + i, comp[q].at(o * 2 + i) + p[q]);
      }
  Var x(random_tensor({1, 8, 3, 2, 2}, rng));
  Tensor chained = second.forward(first.forward(x)).value();
  Tensor single = ops::conv3d(x, expand_kernel(Var(comp[0]), Var(comp[1]), Var(comp[2]), Var(comp[3])),
                              std::nullopt, 1, 0).value();
  CHECK(max_abs_diff(chained, single) < 1e-12);
}

TEST_CASE("quaternion_concat keeps components together") {
  Var a(Tensor::from({1, 4, 1, 1, 1}, {1, 2, 3, 4}));
  Var b(Tensor::from({1, 8, 1, 1, 1}, {10, 11, 20, 21, 30, 31, 40, 41}));
  CHECK(quaternion_concat({a, b}).value().to_vector() ==
        std::vector<double>{1, 10, 11, 2, 20, 21, 3, 30, 31, 4, 40, 41});
  CHECK_THROWS_AS(quaternion_concat({Var(Tensor({1, 3, 1, 1, 1}))}), ShapeError);
}

TEST_CASE("attention gate") {
  Rng rng(8);
  QuaternionAttentionGate gate(2, 3, false, rng, DType::f64);
  Var skip(random_tensor({2, 8, 4, 4, 4}, rng)), g(random_tensor({2, 12, 2, 2, 2}, rng));
  Tensor coeff = gate.coefficients(skip, g).value();
  CHECK(coeff.shape() == Shape{2, 1, 4, 4, 4});
  for (std::int64_t i = 0; i < coeff.numel(); ++i) {
    CHECK(coeff.at(i) > 0.0);
    CHECK(coeff.at(i) < 1.0);
  }
  CHECK(QuaternionAttentionGate::apply(skip, Var(Tensor::full({2, 1, 4, 4, 4}, 1.0))).value().same_values(skip.value()));
  Tensor closed = QuaternionAttentionGate::apply(skip, Var(Tensor({2, 1, 4, 4, 4}))).value();
  for (std::int64_t i = 0; i < closed.numel(); ++i) CHECK(closed.at(i) == 0.0);
  CHECK_THROWS_AS(gate.coefficients(skip, Var(random_tensor({2, 12, 4, 4, 4}, rng))), ShapeError);

  ParamList params;
  gate.collect("ag", params);
  Var skip_grad(skip.value(), true), g_grad(g.value(), true);
  std::vector<Var> ps{skip_grad, g_grad};
  for (auto& p : params) ps.push_back(p.var);
  Rng probe(9);
  auto loss = [&] {
    Rng r(10);
    return ops::sum(ops::mul(gate.forward(skip_grad, g_grad), Var(random_tensor({2, 8, 4, 4, 4}, r))));
  };
  CHECK(oracle::gradcheck(loss, ps, 20, probe).max_rel_error < 1e-4);
}
