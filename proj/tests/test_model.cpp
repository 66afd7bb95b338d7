#include <cmath>
#include <set>
#include <sstream>

#include "aqcf/model.hpp"
#include "aqcf/ops.hpp"
#include "aqcf/oracles.hpp"
#include "doctest.h"

using namespace aqcf;

namespace {

Tensor random_input(const ModelConfig& cfg, std::int64_t batch, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({batch, 1, cfg.patch[0], cfg.patch[1], cfg.patch[2]}, cfg.dtype);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform());
  return t;
}

ModelConfig toy(const std::string& ablation = "full") {
  ModelConfig cfg;
  cfg.ablation = ablation_from_name(ablation);
  cfg.seed = 3;
  return cfg;
}

// Scalar read-out used to drive gradients through the logits.
Var probe_loss(const ForwardResult& r, const Tensor& w_ct, const Tensor& w_mri, bool with_mri = true) {
  Var l = ops::sum(ops::mul(ops::softmax(r.logits_ct, 1), Var(w_ct)));
  if (with_mri) l = ops::add(l, ops::sum(ops::mul(ops::softmax(r.logits_mri, 1), Var(w_mri))));
  return l;
}

Tensor random_like(const Shape& s, DType dt, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(s, dt);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform(-1.0, 1.0));
  return t;
}

}  // namespace

TEST_CASE("config validation and json") {
  ModelConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  ModelConfig bad = cfg;
  bad.patch = {32, 32, 8};
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.widths = {2, 4, 4, 16, 32, 48};
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.widths = {2, 4, 8, 16, 32};
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.num_classes = 2;
  CHECK_THROWS(bad.validate());

  ModelConfig c = toy("no-gate");
  c.dtype = DType::f32;
  const ModelConfig back = model_config_from_json(model_config_to_json(c));
  CHECK(back.widths == c.widths);
  CHECK(back.patch == c.patch);
  CHECK(back.dtype == DType::f32);
  CHECK(ablation_name(back.ablation) == "no-gate");
  CHECK(back.seed == c.seed);
  CHECK_THROWS(model_config_from_json(R"({"widths":[2,4,8,16,32,48],"colour":1})"));
  CHECK(ModelConfig::paper_scale().widths == std::vector<std::int64_t>{12, 24, 48, 96, 192, 256});

  for (const auto& name : ablation_names()) CHECK(ablation_name(ablation_from_name(name)) == name);
  CHECK_THROWS(ablation_from_name("no-everything"));
}

TEST_CASE("toy network builds with reproducible parameter counts") {
  const AqcfNet a(toy()), b(toy());
  CHECK(a.parameter_count() == b.parameter_count());
  CHECK(a.parameter_count() > 0);
  MESSAGE("toy parameters: ", a.parameter_count(), ", conv weights: ", a.conv_weight_count());
  const ParamList pa = a.parameters(), pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(pa[i].var.value().same_values(pb[i].var.value()));
  }
}

TEST_CASE("real-valued ablation carries four times the convolution weights") {
  const AqcfNet q(toy()), r(toy("no-quaternion"));
  CHECK(r.conv_weight_count() == 4 * q.conv_weight_count());
  CHECK(r.parameter_count() > q.parameter_count());
}

TEST_CASE("unshared bottleneck adds a second weight set") {
  const AqcfNet shared(toy()), split(toy("no-shared-bottleneck"));
  CHECK(split.parameter_count() > shared.parameter_count());
  std::int64_t bn_shared = 0, bn_split = 0;
  for (const auto& p : shared.parameters())
    if (p.name.find("bottleneck") != std::string::npos) bn_shared += p.var.numel();
  for (const auto& p : split.parameters())
    if (p.name.find("bottleneck") != std::string::npos) bn_split += p.var.numel();
  CHECK(bn_split == 2 * bn_shared);
  CHECK(split.parameter_count() - shared.parameter_count() == bn_shared);
}

TEST_CASE("parameter names are unique") {
  for (const auto& name : ablation_names()) {
    const AqcfNet net(toy(name));
    std::set<std::string> seen;
    for (const auto& p : net.parameters()) CHECK(seen.insert(p.name).second);
  }
}

TEST_CASE("output and intermediate shapes") {
  ModelConfig cfg = toy();
  const AqcfNet net(cfg);
  ForwardCapture cap;
  NoGradGuard ng;
  const ForwardResult r = net.forward(Var(random_input(cfg, 2, 1)), Var(random_input(cfg, 2, 2)), nullptr, nullptr, &cap);
  CHECK(r.logits_ct.shape() == Shape{2, 3, 32, 32, 16});
  CHECK(r.logits_mri.shape() == Shape{2, 3, 32, 32, 16});
  for (int s = 1; s <= 4; ++s) {
    const Var& e = cap.activations.at("ct.enc" + std::to_string(s));
    CHECK(e.shape() == Shape{2, 4 * cfg.widths[s], 32 >> s, 32 >> s, 16 >> s});
  }
  CHECK(cap.activations.at("mri.bottleneck").shape() == Shape{2, 4 * 48, 2, 2, 1});
  for (int d = 0; d < 4; ++d) {
    const Var& e = cap.activations.at("mri.dec" + std::to_string(d));
    CHECK(e.shape() == Shape{2, 4 * cfg.widths[d], 32 >> d, 32 >> d, 16 >> d});
  }
  CHECK_THROWS_AS(net.forward(Var(Tensor({1, 1, 16, 16, 16})), Var(Tensor({1, 1, 16, 16, 16}))), ShapeError);
  CHECK_THROWS_AS(net.forward(Var(random_input(cfg, 1, 1)), Var(random_input(cfg, 2, 1))), ShapeError);
}

TEST_CASE("forward is deterministic and records gate traces") {
  const ModelConfig cfg = toy();
  const AqcfNet a(cfg), b(cfg);
  const Var x1(random_input(cfg, 1, 5)), x2(random_input(cfg, 1, 6));
  GateTraceSink sink;
  NoGradGuard ng;
  const ForwardResult ra = a.forward(x1, x2, &sink), rb = b.forward(x1, x2);
  CHECK(ra.logits_ct.value().same_values(rb.logits_ct.value()));
  CHECK(ra.logits_mri.value().same_values(rb.logits_mri.value()));
  const auto traces = sink.traces();
  CHECK(traces.size() == 8);
  for (const auto& t : traces)
    for (double l : t.lambda_values) CHECK((l > 0.0 && l < 1.0));
}

TEST_CASE("stem embedding") {
  const AqcfNet net(toy());
  const Var x(Tensor::full({1, 1, 4, 4, 2}, 0.7));
  const Var e = AqcfNet::embed(x, 2);
  REQUIRE(e.shape() == Shape{1, 8, 4, 4, 2});
  // component-major: real parts of both quaternion channels first
  for (std::int64_t c = 0; c < 8; ++c)
    for (std::int64_t v = 0; v < 32; ++v) CHECK(e.value().at(c * 32 + v) == (c < 2 ? 0.7 : 0.0));
  const Var z = net.stem_embed(Var(Tensor({1, 1, 4, 4, 2})));
  CHECK(z.shape() == Shape{1, 8, 4, 4, 2});
  for (std::int64_t i = 0; i < z.numel(); ++i) CHECK(z.value().at(i) == 0.0);
  CHECK_THROWS(AqcfNet::embed(Var(Tensor({1, 2, 4, 4, 2})), 2));

  Rng rng(4);
  const Var xi(random_like({1, 1, 6, 6, 4}, DType::f64, 9), true);
  const Tensor w = random_like({1, 8, 6, 6, 4}, DType::f64, 10);
  std::vector<Var> ps{xi};
  for (const auto& p : net.parameters())
    if (p.name.rfind("ct.stem", 0) == 0) ps.push_back(p.var);
  auto loss = [&] { return ops::sum(ops::mul(net.stem_embed(xi), Var(w))); };
  CHECK(oracle::gradcheck(loss, ps, 20, rng).max_rel_error < 1e-4);
}

TEST_CASE("fusion-off streams are independent") {
  const ModelConfig cfg = toy("no-fusion");
  const AqcfNet net(cfg);
  NoGradGuard ng;
  const Var ct(random_input(cfg, 1, 1));
  const ForwardResult a = net.forward(ct, Var(random_input(cfg, 1, 2)));
  const ForwardResult b = net.forward(ct, Var(random_input(cfg, 1, 3)));
  CHECK(a.logits_ct.value().same_values(b.logits_ct.value()));
  CHECK_FALSE(a.logits_mri.value().same_values(b.logits_mri.value()));

  const AqcfNet full(toy());
  const ForwardResult c = full.forward(ct, Var(random_input(cfg, 1, 2)));
  const ForwardResult d = full.forward(ct, Var(random_input(cfg, 1, 3)));
  CHECK_FALSE(c.logits_ct.value().same_values(d.logits_ct.value()));
}

TEST_CASE("a zeroed stream collapses each fusion scale to the residual path") {
  const ModelConfig cfg = toy();
  const AqcfNet net(cfg);
  NoGradGuard ng;
  const Var ct(random_input(cfg, 1, 11)), mri(random_input(cfg, 1, 12));
  for (int s = 0; s < kStages; ++s) {
    for (bool zero_mri : {true, false}) {
      Intervention zero, forced;
      (zero_mri ? zero.zero_mri : zero.zero_ct)[s] = true;
      forced = zero;
      (zero_mri ? forced.residual_ct : forced.residual_mri)[s] = true;
      ForwardCapture cap;
      const ForwardResult a = net.forward(ct, mri, nullptr, &zero, &cap);
      const ForwardResult b = net.forward(ct, mri, nullptr, &forced);
      const TransferCapture& t = zero_mri ? cap.fusion[s].mri_to_ct : cap.fusion[s].ct_to_mri;
      bool zero_ctx = true;
      for (std::int64_t i = 0; i < t.context.numel(); ++i) zero_ctx &= t.context.value().at(i) == 0.0;
      CHECK(zero_ctx);
      const Var& la = zero_mri ? a.logits_ct : a.logits_mri;
      const Var& lb = zero_mri ? b.logits_ct : b.logits_mri;
      CHECK(la.value().same_values(lb.value()));
    }
  }
}

TEST_CASE("a zero MRI input reaches the first fusion scale as an exact zero") {
  const ModelConfig cfg = toy();
  const AqcfNet net(cfg);
  NoGradGuard ng;
  const Var ct(random_input(cfg, 1, 21)), none(Tensor({1, 1, 32, 32, 16}));
  ForwardCapture cap;
  Intervention forced;
  forced.residual_ct[0] = true;
  const ForwardResult a = net.forward(ct, none, nullptr, nullptr, &cap);
  const ForwardResult b = net.forward(ct, none, nullptr, &forced);
  const Tensor& ctx = cap.fusion[0].mri_to_ct.context.value();
  for (std::int64_t i = 0; i < ctx.numel(); ++i) CHECK(ctx.at(i) == 0.0);
  CHECK(a.logits_ct.value().same_values(b.logits_ct.value()));
  // deeper MRI features pick up CT context through the first block
  const Tensor& deeper = cap.fusion[1].mri_to_ct.context.value();
  double mag = 0.0;
  for (std::int64_t i = 0; i < deeper.numel(); ++i) mag += std::abs(deeper.at(i));
  CHECK(mag > 0.0);
}

TEST_CASE("a CT-only gradient step reaches the MRI path iff a shared edge exists") {
  struct Case {
    std::string name;
    Ablation ablation;
    bool expect_change;
  };
  Ablation independent;
  independent.use_fusion = false;
  independent.shared_bottleneck = false;
  const std::vector<Case> cases{{"full", {}, true},
                                {"no-fusion", ablation_from_name("no-fusion"), true},
                                {"no-shared-bottleneck", ablation_from_name("no-shared-bottleneck"), true},
                                {"independent", independent, false}};
  for (const auto& c : cases) {
    ModelConfig cfg = toy();
    cfg.ablation = c.ablation;
    AqcfNet net(cfg);
    const Var ct(random_input(cfg, 1, 31)), mri(random_input(cfg, 1, 32));
    Tensor before;
    {
      NoGradGuard ng;
      before = net.forward(ct, mri).logits_mri.value();
    }
    const ForwardResult r = net.forward(ct, mri);
    const Tensor w = random_like(r.logits_ct.shape(), cfg.dtype, 33);
    backward(probe_loss(r, w, w, false));
    for (auto& p : net.parameters())
      if (p.var.has_grad()) {
        Tensor g = p.var.grad();
        g.scale_(-1e-2);
        p.var.mutable_value().add_(g);
      }
    NoGradGuard ng;
    const Tensor after = net.forward(ct, mri).logits_mri.value();
    INFO(c.name);
    CHECK(!after.same_values(before) == c.expect_change);
  }
}

TEST_CASE("all ablations run forward and backward") {
  for (const auto& name : ablation_names()) {
    const ModelConfig cfg = toy(name);
    const AqcfNet net(cfg);
    const ForwardResult r = net.forward(Var(random_input(cfg, 1, 41)), Var(random_input(cfg, 1, 42)));
    const Tensor w = random_like(r.logits_ct.shape(), cfg.dtype, 43);
    backward(probe_loss(r, w, w));
    int with_grad = 0;
    for (const auto& p : net.parameters()) with_grad += p.var.has_grad();
    INFO(name);
    CHECK(with_grad > 0);
    for (std::int64_t i = 0; i < r.logits_ct.numel(); ++i) REQUIRE(std::isfinite(r.logits_ct.value().at(i)));
  }
}

TEST_CASE("float32 network tracks the float64 one") {
  ModelConfig c64 = toy(), c32 = toy();
  c32.dtype = DType::f32;
  const AqcfNet n64(c64), n32(c32);
  NoGradGuard ng;
  const Tensor x = random_input(c64, 1, 51), y = random_input(c64, 1, 52);
  const ForwardResult a = n64.forward(Var(x), Var(y)), b = n32.forward(Var(x), Var(y));
  CHECK(b.logits_ct.dtype() == DType::f32);
  CHECK(max_abs_diff(a.logits_ct.value(), b.logits_ct.value().to(DType::f64)) < 1e-3);
}

TEST_CASE("whole-network gradient check") {
  // smallest patch the four stride-2 stages admit; a 1e-4 step straddles too many relu kinks here
  ModelConfig cfg = toy();
  cfg.patch = {16, 16, 16};
  const AqcfNet net(cfg);
  const Var ct(random_input(cfg, 1, 61)), mri(random_input(cfg, 1, 62));
  const Shape ls{1, 3, 16, 16, 16};
  const Tensor w1 = random_like(ls, DType::f64, 63), w2 = random_like(ls, DType::f64, 64);
  std::vector<Var> ps;
  for (const auto& p : net.parameters()) ps.push_back(p.var);
  Rng rng(65);
  auto loss = [&] { return probe_loss(net.forward(ct, mri), w1, w2); };
  const auto rep = oracle::gradcheck(loss, ps, 20, rng, 1e-7);
  MESSAGE("whole-net max rel error ", rep.max_rel_error, " at ", net.parameters()[rep.worst_param].name);
  CHECK(rep.max_rel_error < 1e-3);
}

TEST_CASE("checkpoint round trip is bitwise") {
  ModelConfig cfg = toy("no-shared-bottleneck");
  cfg.seed = 9;
  const AqcfNet a(cfg);
  std::stringstream ss;
  write_checkpoint(ss, make_checkpoint(a, R"({"epoch":3})"));
  const Checkpoint ck = read_checkpoint(ss);
  CHECK(ck.extras == R"({"epoch":3})");
  CHECK(ablation_name(ck.config.ablation) == "no-shared-bottleneck");
  ModelConfig other = ck.config;
  other.seed = 1234;
  AqcfNet b(other);
  load_parameters(b, ck);
  const ParamList pa = a.parameters(), pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].var.value().same_values(pb[i].var.value()));
  NoGradGuard ng;
  const Var x(random_input(cfg, 1, 71)), y(random_input(cfg, 1, 72));
  CHECK(a.forward(x, y).logits_ct.value().same_values(b.forward(x, y).logits_ct.value()));

  Checkpoint from_b = make_checkpoint(b, R"({"epoch":3})");
  from_b.config = a.config();
  std::stringstream again;
  write_checkpoint(again, from_b);
  std::stringstream first;
  write_checkpoint(first, make_checkpoint(a, R"({"epoch":3})"));
  CHECK(again.str() == first.str());
  CHECK(first.str().substr(0, 4) == "AQCF");
}

TEST_CASE("checkpoint errors") {
  const AqcfNet a(toy());
  std::stringstream ss;
  write_checkpoint(ss, make_checkpoint(a));
  const std::string bytes = ss.str();

  std::stringstream bad("XQCF" + bytes.substr(4));
  CHECK_THROWS(read_checkpoint(bad));
  std::stringstream cut(bytes.substr(0, bytes.size() - 10));
  CHECK_THROWS(read_checkpoint(cut));

  AqcfNet split(toy("no-shared-bottleneck"));
  CHECK_THROWS_WITH(load_parameters(split, read_checkpoint(ss)), doctest::Contains("bottleneck"));

  ModelConfig wide = toy();
  wide.widths = {2, 4, 8, 16, 32, 64};
  AqcfNet w(wide);
  std::stringstream again(bytes);
  CHECK_THROWS(load_parameters(w, read_checkpoint(again)));
}
