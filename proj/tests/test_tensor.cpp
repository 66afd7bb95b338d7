#include <cmath>

#include "aqcf/ops.hpp"
#include "aqcf/oracles.hpp"
#include "doctest.h"

using namespace aqcf;

namespace {

Tensor random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(s, DType::f64);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform(lo, hi));
  return t;
}

Var random_var(const Shape& s, Rng& rng) { return Var(random_tensor(s, rng), true); }

double gradcheck_of(const std::function<Var()>& f, const std::vector<Var>& ps, std::uint64_t seed = 9) {
  Rng rng(seed);
  return oracle::gradcheck(f, ps, 20, rng).max_rel_error;
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.at(4) == 5.0);
  CHECK(t.to(DType::f32).dtype() == DType::f32);
  CHECK(t.to(DType::f32).at(2) == 3.0);
  CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
  CHECK(Tensor().empty());
}

TEST_CASE("conv3d identity and summation kernels") {
  Rng rng(1);
  Tensor x = random_tensor({1, 2, 3, 4, 5}, rng);
  Tensor w({2, 2, 1, 1, 1});
  w.set(0, 1.0);
  w.set(3, 1.0);
  Var y = ops::conv3d(Var(x), Var(w), std::nullopt, 1, 0);
  CHECK(y.value().same_values(x));

  Tensor c = Tensor::full({1, 1, 4, 4, 4}, 0.75);
  Tensor ones = Tensor::full({1, 1, 3, 3, 3}, 1.0);
  Var s = ops::conv3d(Var(c), Var(ones), std::nullopt, 1, 1);
  for (int z = 1; z < 3; ++z)
    for (int yy = 1; yy < 3; ++yy)
      for (int xx = 1; xx < 3; ++xx) CHECK(s.value().at((z * 4 + yy) * 4 + xx) == doctest::Approx(27 * 0.75));
}

TEST_CASE("conv3d matches the dense unrolled oracle") {
  Rng rng(2);
  struct Case {
    Shape x, w;
    int stride, padding;
    bool bias;
  };
  for (const Case& c : {Case{{2, 3, 5, 5, 5}, {4, 3, 3, 3, 3}, 1, 1, true}, Case{{2, 3, 5, 5, 5}, {2, 3, 3, 3, 3}, 2, 1, false},
                        Case{{1, 2, 4, 6, 5}, {3, 2, 1, 1, 1}, 1, 0, true}, Case{{1, 2, 6, 4, 4}, {2, 2, 2, 2, 2}, 2, 0, true},
                        Case{{2, 1, 3, 3, 3}, {2, 1, 3, 3, 3}, 1, 0, false}}) {
    Tensor x = random_tensor(c.x, rng), w = random_tensor(c.w, rng);
    std::optional<Tensor> b;
    if (c.bias) b = random_tensor({c.w[0]}, rng);
    std::optional<Var> bv;
    if (b) bv = Var(*b);
    Tensor fast = ops::conv3d(Var(x), Var(w), bv, c.stride, c.padding).value();
    Tensor slow = oracle::conv3d_dense(x, w, b, c.stride, c.padding);
    REQUIRE(fast.shape() == slow.shape());
    CHECK(max_abs_diff(fast, slow) < 1e-12);
  }
}

TEST_CASE("conv3d rejects bad geometry") {
  Var x(Tensor({1, 2, 2, 2, 2}));
  CHECK_THROWS_AS(ops::conv3d(x, Var(Tensor({1, 3, 3, 3, 3})), std::nullopt, 1, 1), ShapeError);
  CHECK_THROWS_AS(ops::conv3d(x, Var(Tensor({1, 2, 3, 3, 3})), std::nullopt, 1, 0), ShapeError);
}

TEST_CASE("primitive examples") {
  Var eight(Tensor::full({1, 8, 2}, 3.0));
  Tensor s = ops::softmax(eight, 1).value();
  for (std::int64_t i = 0; i < s.numel(); ++i) CHECK(s.at(i) == doctest::Approx(0.125));
  CHECK(ops::sigmoid(Var(Tensor::scalar(0.0))).value().item() == 0.5);
  Tensor g = ops::global_avg_pool(Var(Tensor::full({2, 3, 2, 2, 2}, 1.5))).value();
  CHECK(g.shape() == Shape{2, 3});
  for (std::int64_t i = 0; i < g.numel(); ++i) CHECK(g.at(i) == 1.5);
  CHECK_THROWS(ops::softmax(eight, 3));
  CHECK_THROWS_AS(ops::add(Var(Tensor({2, 3})), Var(Tensor({3, 2}))), ShapeError);
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(3);
  Var x(random_tensor({2, 5, 3, 4}, rng, -30, 30));
  Tensor s = ops::softmax(x, 1).value();
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t p = 0; p < 12; ++p) {
      double total = 0;
      for (std::int64_t c = 0; c < 5; ++c) {
        const double v = s.at((b * 5 + c) * 12 + p);
        CHECK(v >= 0.0);
        total += v;
      }
      CHECK(std::abs(total - 1.0) < 1e-12);
    }
}

TEST_CASE("shape primitives") {
  Var x(Tensor::from({1, 2, 2}, {1, 2, 3, 4}));
  Tensor p = ops::pad(x, {{0, 0}, {0, 0}, {1, 1}}, -1.0).value();
  CHECK(p.shape() == Shape{1, 2, 4});
  CHECK(p.to_vector() == std::vector<double>{-1, 1, 2, -1, -1, 3, 4, -1});
  CHECK(ops::crop(Var(p), {0, 1, 1}, {1, 1, 2}).value().to_vector() == std::vector<double>{3, 4});
  CHECK(ops::slice(x, 1, 1, 1).value().to_vector() == std::vector<double>{3, 4});
  CHECK(ops::concat({x, x}, 2).value().to_vector() == std::vector<double>{1, 2, 1, 2, 3, 4, 3, 4});
  Tensor u = ops::upsample_nearest2(Var(Tensor::from({1, 1, 1, 1, 2}, {5, 7}))).value();
  CHECK(u.shape() == Shape{1, 1, 2, 2, 4});
  CHECK(u.at(0) == 5);
  CHECK(u.at(2) == 7);
  CHECK(u.at(15) == 7);
}

TEST_CASE("backward on simple losses") {
  Rng rng(4);
  Var x = random_var({3, 4}, rng);
  backward(ops::sum(x));
  for (std::int64_t i = 0; i < 12; ++i) CHECK(x.grad().at(i) == 1.0);
  x.zero_grad();
  backward(ops::sum(ops::mul(x, x)));
  for (std::int64_t i = 0; i < 12; ++i) CHECK(x.grad().at(i) == doctest::Approx(2 * x.value().at(i)));

  CHECK_THROWS_AS(backward(ops::mul(x, x)), GradError);
  CHECK_THROWS_AS(backward(Var(Tensor::scalar(1.0))), GradError);
}

TEST_CASE("gradient accumulates over shared uses") {
  Var x(Tensor::scalar(3.0), true);
  Var y = ops::add(ops::mul(x, x), ops::scale(x, 2.0));
  backward(y);
  CHECK(x.grad().item() == doctest::Approx(8.0));
}

TEST_CASE("tape visits each node once in reverse order") {
  Var a(Tensor::scalar(2.0), true);
  Var b = ops::mul(a, a);
  Var c = ops::add(b, a);
  Var d = ops::mul(c, b);
  Tape tape = Tape::reachable_from(d);
  CHECK(tape.size() == 4);
  for (std::size_t i = 1; i < tape.size(); ++i) CHECK(tape.nodes()[i - 1]->seq < tape.nodes()[i]->seq);
}

TEST_CASE("no-grad guard records nothing") {
  Var a(Tensor::scalar(2.0), true);
  NoGradGuard guard;
  Var b = ops::mul(a, a);
  CHECK_FALSE(b.requires_grad());
}

TEST_CASE("finite-difference checks per primitive") {
  Rng rng(5);
  Var a = random_var({2, 3, 2, 2, 2}, rng), b = random_var({2, 3, 2, 2, 2}, rng), bc = random_var({2, 1, 2, 2, 2}, rng);
  Var weights(random_tensor({2, 3, 2, 2, 2}, rng));
  auto weighted = [](const Var& y) {
    Rng r(77);
    return ops::sum(ops::mul(y, Var(random_tensor(y.shape(), r))));
  };
  CHECK(gradcheck_of([&] { return weighted(ops::add(a, bc)); }, {a, bc}) < 1e-4);
  CHECK(gradcheck_of([&] { return weighted(ops::sub(a, b)); }, {a, b}) < 1e-4);
  CHECK(gradcheck_of([&] { return weighted(ops::mul(a, bc)); }, {a, bc}) < 1e-4);
  CHECK(gradcheck_of([&] { return weighted(ops::softmax(a, 1)); }, {a}) < 1e-4);
  CHECK(gradcheck_of([&] { return weighted(ops::sigmoid(a)); }, {a}) < 1e-4);
  CHECK(gradcheck_of([&] { return weighted(ops::relu(a)); }, {a}) < 1e-4);
  CHECK(gradcheck_of([&] { return weighted(ops::global_avg_pool(a)); }, {a}) < 1e-4);
  CHECK(gradcheck_of([&] { return weighted(ops::upsample_nearest2(a)); }, {a}) < 1e-4);
  CHECK(gradcheck_of([&] { return weighted(ops::concat({a, bc}, 1)); }, {a, bc}) < 1e-4);
  CHECK(gradcheck_of([&] { return weighted(ops::slice(a, 1, 1, 2)); }, {a}) < 1e-4);
  CHECK(gradcheck_of([&] { return weighted(ops::pad(a, {{0, 0}, {0, 0}, {1, 0}, {0, 2}})); }, {a}) < 1e-4);
  CHECK(gradcheck_of([&] { return weighted(ops::crop(a, {0, 1, 0, 1, 0}, {2, 2, 2, 1, 2})); }, {a}) < 1e-4);
  CHECK(gradcheck_of([&] { return weighted(ops::instance_norm(a)); }, {a}) < 1e-4);
  CHECK(gradcheck_of([&] { return ops::mean(ops::mul(a, weights)); }, {a}) < 1e-4);

  Var x = random_var({2, 2, 4, 4, 4}, rng);
  Var w3 = random_var({3, 2, 3, 3, 3}, rng), w1 = random_var({3, 2, 1, 1, 1}, rng), bias = random_var({3}, rng);
  for (int stride : {1, 2}) {
    CHECK(gradcheck_of([&] { return weighted(ops::conv3d(x, w3, bias, stride, 1)); }, {x, w3, bias}) < 1e-4);
    CHECK(gradcheck_of([&] { return weighted(ops::conv3d(x, w1, bias, stride, 0)); }, {x, w1, bias}) < 1e-4);
  }
  Var lx = random_var({3, 5}, rng), lw = random_var({2, 5}, rng), lb = random_var({2}, rng);
  CHECK(gradcheck_of([&] { return weighted(ops::linear(lx, lw, lb)); }, {lx, lw, lb}) < 1e-4);
}

TEST_CASE("float32 path agrees with float64") {
  Rng rng(6);
  Tensor x = random_tensor({1, 2, 4, 4, 4}, rng), w = random_tensor({3, 2, 3, 3, 3}, rng);
  Tensor y64 = ops::conv3d(Var(x), Var(w), std::nullopt, 1, 1).value();
  Tensor y32 = ops::conv3d(Var(x.to(DType::f32)), Var(w.to(DType::f32)), std::nullopt, 1, 1).value();
  CHECK(y32.dtype() == DType::f32);
  CHECK(max_abs_diff(y64, y32.to(DType::f64)) < 1e-4);
}

TEST_CASE("same seed gives bitwise identical forward values") {
  auto run = [] {
    Rng rng(42);
    Var x(random_tensor({1, 2, 4, 4, 4}, rng)), w(random_tensor({2, 2, 3, 3, 3}, rng));
    return ops::instance_norm(ops::conv3d(x, w, std::nullopt, 1, 1)).value();
  };
  CHECK(run().same_values(run()));
}

TEST_CASE("rng substreams are independent of parent use") {
  Rng a(7), b(7);
  Rng sa = a.substream(3);
  b();
  b();
  Rng sb = b.substream(3);
  CHECK(sa() == sb());
  std::uint64_t hist[5] = {};
  Rng r(1);
  for (int i = 0; i < 5000; ++i) ++hist[r.below(5)];
  for (auto h : hist) CHECK(h > 850);
}
