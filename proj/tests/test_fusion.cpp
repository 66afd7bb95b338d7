#include <cmath>
#include <sstream>

#include "aqcf/fusion.hpp"
#include "aqcf/ops.hpp"
#include "aqcf/oracles.hpp"
#include "doctest.h"

using namespace aqcf;

namespace {

Tensor random_tensor(const Shape& s, Rng& rng, double scale = 1.0) {
  Tensor t(s, DType::f64);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, scale * rng.uniform(-1.0, 1.0));
  return t;
}

bool all_zero(const Tensor& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i)
    if (t.at(i) != 0.0) return false;
  return true;
}

std::vector<Var> params_of(const FusionDirection& d) {
  ParamList pl;
  d.collect("d", pl);
  std::vector<Var> out;
  for (auto& p : pl) out.push_back(p.var);
  return out;
}

const Shape kShape{2, 8, 4, 4, 4};

}  // namespace

TEST_CASE("zero key/value stream collapses the context exactly") {
  Rng rng(1);
  FusionDirection dir(2, true, false, rng, DType::f64);
  TransferCapture cap;
  Var c = dir.compute_context(Var(random_tensor(kShape, rng)), Var(Tensor(kShape)), &cap);
  CHECK(all_zero(cap.k.value()));
  CHECK(all_zero(cap.v.value()));
  for (std::int64_t i = 0; i < cap.attention.numel(); ++i) CHECK(cap.attention.value().at(i) == 0.125);
  CHECK(all_zero(c.value()));
}

TEST_CASE("channel softmax sums to one and matches the naive oracle") {
  Rng rng(2);
  FusionDirection dir(2, true, false, rng, DType::f64);
  Tensor fq = random_tensor(kShape, rng, 3.0), fk = random_tensor(kShape, rng, 3.0);
  TransferCapture cap;
  Tensor c = dir.compute_context(Var(fq), Var(fk), &cap).value();
  const Tensor& a = cap.attention.value();
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t p = 0; p < 64; ++p) {
      double s = 0;
      for (std::int64_t ch = 0; ch < 8; ++ch) s += a.at((b * 8 + ch) * 64 + p);
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  Tensor ref = oracle::context_naive(fq, fk, dir.query_layer().effective_kernel().value(),
                                     dir.key_layer().effective_kernel().value(),
                                     dir.value_layer().effective_kernel().value());
  CHECK(max_abs_diff(c, ref) < 1e-12);
  CHECK_THROWS_AS(dir.compute_context(Var(fq), Var(Tensor({2, 8, 2, 2, 2}))), ShapeError);
}

TEST_CASE("gate range and midpoint") {
  Rng rng(3);
  FusionDirection dir(2, true, false, rng, DType::f64);
  Var f(random_tensor(kShape, rng, 5.0)), c(random_tensor(kShape, rng, 5.0));
  Tensor lam = dir.compute_gate(f, c).value();
  CHECK(lam.shape() == Shape{2, 1, 1, 1, 1});
  for (std::int64_t i = 0; i < 2; ++i) {
    CHECK(lam.at(i) > 0.0);
    CHECK(lam.at(i) < 1.0);
  }
  dir.gate_output().weight.mutable_value().fill(0.0);
  dir.gate_output().bias->mutable_value().fill(0.0);
  Tensor half = dir.compute_gate(f, c).value();
  CHECK(half.at(0) == 0.5);
  CHECK(half.at(1) == 0.5);

  FusionDirection fixed(2, false, false, rng, DType::f64);
  CHECK(fixed.compute_gate(f, c).value().at(1) == 1.0);
  CHECK(params_of(fixed).size() < params_of(dir).size());
}

TEST_CASE("fuse degrades to the residual path when the gated context is zero") {
  Rng rng(4);
  FusionDirection dir(2, true, false, rng, DType::f64);
  Var f(random_tensor(kShape, rng));
  Var lam(Tensor::full({2, 1, 1, 1, 1}, 0.3));
  Tensor fused = dir.fuse(f, Var(Tensor(kShape)), lam).value();
  CHECK(fused.shape() == kShape);
  CHECK(fused.same_values(dir.residual(f).value()));
  Tensor zero_gate = dir.fuse(f, Var(random_tensor(kShape, rng)), Var(Tensor({2, 1, 1, 1, 1}))).value();
  CHECK(zero_gate.same_values(dir.residual(f).value()));
}

TEST_CASE("gradients through fuse and through the whole block") {
  Rng rng(5);
  FusionDirection dir(1, true, false, rng, DType::f64);
  const Shape s{2, 4, 3, 3, 3};
  Var f(random_tensor(s, rng), true), c(random_tensor(s, rng), true), lam(Tensor::full({2, 1, 1, 1, 1}, 0.7), true);
  auto weights = [&] {
    Rng r(11);
    return Var(random_tensor(s, r));
  };
  Rng probe(6);
  auto fuse_loss = [&] { return ops::sum(ops::mul(dir.fuse(f, c, lam), weights())); };
  CHECK(oracle::gradcheck(fuse_loss, {f, c, lam}, 20, probe).max_rel_error < 1e-4);

  AqcfBlock block(1, 1, true, false, rng, DType::f64);
  Var ct(random_tensor(s, rng), true), mri(random_tensor(s, rng), true);
  ParamList pl;
  block.collect("b", pl);
  std::vector<Var> ps{ct, mri};
  for (auto& p : pl) ps.push_back(p.var);
  auto block_loss = [&] {
    BidirectionalResult r = block.forward_bidirectional(ct, mri);
    return ops::add(ops::sum(ops::mul(r.f_ct, weights())), ops::sum(ops::mul(r.f_mri, weights())));
  };
  CHECK(oracle::gradcheck(block_loss, ps, 40, probe).max_rel_error < 1e-4);
}

TEST_CASE("bidirectional forward with a zeroed MRI stream") {
  Rng rng(7);
  AqcfBlock block(2, 2, true, false, rng, DType::f64);
  Var ct(random_tensor(kShape, rng));
  Var mri{Tensor(kShape)};
  GateTraceSink sink;
  BidirectionalResult r = block.forward_bidirectional(ct, mri, &sink);
  CHECK(all_zero(r.mri_to_ct.context.value()));
  CHECK(r.f_ct.value().same_values(block.mri_to_ct().residual(ct).value()));
  Tensor expected_mri = block.ct_to_mri().fuse(mri, r.ct_to_mri.context, r.ct_to_mri.lambda).value();
  CHECK(r.f_mri.value().same_values(expected_mri));
  CHECK_FALSE(all_zero(r.ct_to_mri.context.value()));
  BidirectionalResult again = block.forward_bidirectional(ct, mri);
  CHECK(again.f_mri.value().same_values(r.f_mri.value()));
  CHECK(sink.records().size() == 4);
  for (const auto& rec : sink.records()) {
    CHECK(rec.stage == 2);
    CHECK(rec.lambda > 0.0);
    CHECK(rec.lambda < 1.0);
  }
}

TEST_CASE("swapping streams and directions swaps outputs") {
  Rng rng(8);
  AqcfBlock block(1, 2, true, false, rng, DType::f64);
  Var a(random_tensor(kShape, rng)), b(random_tensor(kShape, rng));
  BidirectionalResult r = block.forward_bidirectional(a, b);
  BidirectionalResult s = block.swapped().forward_bidirectional(b, a);
  CHECK(r.f_ct.value().same_values(s.f_mri.value()));
  CHECK(r.f_mri.value().same_values(s.f_ct.value()));
}

TEST_CASE("directions share no parameters") {
  Rng rng(9);
  AqcfBlock block(1, 2, true, false, rng, DType::f64);
  Var a(random_tensor(kShape, rng)), b(random_tensor(kShape, rng));
  BidirectionalResult before = block.forward_bidirectional(a, b);
  block.ct_to_mri().query_layer().kernel().w_j.mutable_value().scale_(3.0);
  block.ct_to_mri().gate_hidden().weight.mutable_value().scale_(-1.0);
  BidirectionalResult after = block.forward_bidirectional(a, b);
  CHECK(after.f_ct.value().same_values(before.f_ct.value()));
  CHECK_FALSE(after.f_mri.value().same_values(before.f_mri.value()));
}

TEST_CASE("large inputs stay finite") {
  Rng rng(10);
  AqcfBlock block(1, 2, true, false, rng, DType::f64);
  BidirectionalResult r =
      block.forward_bidirectional(Var(random_tensor(kShape, rng, 1e3)), Var(random_tensor(kShape, rng, 1e3)));
  for (const Var* v : {&r.f_ct, &r.f_mri})
    for (std::int64_t i = 0; i < v->numel(); ++i) CHECK(std::isfinite(v->value().at(i)));
}

TEST_CASE("Lipschitz deviation bound") {
  Rng rng(11);
  FusionDirection dir(2, true, false, rng, DType::f64);
  Var f(random_tensor(kShape, rng)), c(random_tensor(kShape, rng));
  LipschitzReport zero = lipschitz_deviation_check(dir, f, Var(Tensor(kShape)), Var(Tensor::full({2, 1, 1, 1, 1}, 0.5)));
  CHECK(zero.deviation == 0.0);
  CHECK(zero.bound == 0.0);
  CHECK(zero.holds);

  double prev_dev = INFINITY, prev_bound = INFINITY;
  for (double l : {1.0, 0.5, 0.1, 0.0}) {
    LipschitzReport r = lipschitz_deviation_check(dir, f, c, Var(Tensor::full({2, 1, 1, 1, 1}, l)));
    CHECK(r.holds);
    CHECK(r.deviation <= prev_dev);
    CHECK(r.bound <= prev_bound);
    prev_dev = r.deviation;
    prev_bound = r.bound;
  }
  CHECK(prev_dev == 0.0);
}

TEST_CASE("gate trace tsv round trip") {
  GateTraceSink sink;
  sink.append(1, Direction::mri_to_ct, Tensor::from({2, 1, 1, 1, 1}, {0.25, 0.75}));
  sink.append(1, Direction::ct_to_mri, Tensor::from({2, 1, 1, 1, 1}, {0.1, 1.0 / 3.0}));
  std::stringstream ss;
  sink.write_tsv(ss);
  GateTraceSink back = GateTraceSink::read_tsv(ss);
  REQUIRE(back.records().size() == 4);
  CHECK(back.records()[3].lambda == 1.0 / 3.0);
  CHECK(back.records()[2].direction == Direction::ct_to_mri);
  auto traces = back.traces();
  REQUIRE(traces.size() == 2);
  CHECK(traces[0].direction == Direction::mri_to_ct);
  CHECK(traces[0].lambda_values == std::vector<double>{0.25, 0.75});
  std::stringstream bad("stage\tdirection\tbatch_index\tlambda\n1\tsideways\t0\t0.5\n");
  CHECK_THROWS(GateTraceSink::read_tsv(bad));
}

TEST_CASE("real-valued ablation block runs") {
  Rng rng(12);
  AqcfBlock block(1, 2, true, true, rng, DType::f64);
  BidirectionalResult r = block.forward_bidirectional(Var(random_tensor(kShape, rng)), Var(Tensor(kShape)));
  CHECK(r.f_ct.shape() == kShape);
  CHECK(all_zero(r.mri_to_ct.context.value()));
}
