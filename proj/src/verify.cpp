#include "aqcf/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <string_view>

#include "aqcf/eval.hpp"
#include "aqcf/fusion.hpp"
#include "aqcf/nifti.hpp"
#include "aqcf/ops.hpp"
#include "aqcf/oracles.hpp"
#include "aqcf/quaternion.hpp"
#include "aqcf/training.hpp"

namespace aqcf::verify {

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Tensor random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0, DType dt = DType::f64) {
  Tensor t(s, dt);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform(lo, hi));
  return t;
}

bool all_zero(const Tensor& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i)
    if (t.at(i) != 0.0) return false;
  return true;
}

std::vector<Var> vars_of(const ParamList& pl) {
  std::vector<Var> out;
  for (const auto& p : pl) out.push_back(p.var);
  return out;
}

// Fixed random read-out so every output element carries a distinct weight.
Var readout(const Var& y, std::uint64_t seed) {
  Rng r(seed);
  return ops::sum(ops::mul(y, Var(random_tensor(y.shape(), r, -1.0, 1.0, y.dtype()))));
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

CriterionResult finish(CriterionResult r, Clock::time_point t0) {
  r.seconds = since(t0);
  return r;
}

}  // namespace

ExpandFn sign_flip_fixture(int row, int col) {
  return [row, col](const Var& r, const Var& i, const Var& j, const Var& k) {
    const Var w = expand_kernel(r, i, j, k);
    const std::int64_t out_q = r.shape()[0], in_q = r.shape()[1];
    Tensor sign = Tensor::full(w.shape(), 1.0, w.dtype());
    const std::int64_t inner = w.numel() / (w.shape()[0] * w.shape()[1]);
    for (std::int64_t o = row * out_q; o < (row + 1) * out_q; ++o)
      for (std::int64_t c = col * in_q; c < (col + 1) * in_q; ++c)
        for (std::int64_t v = 0; v < inner; ++v) sign.set((o * w.shape()[1] + c) * inner + v, -1.0);
    return ops::mul(w, Var(sign));
  };
}

CriterionResult hamilton_equivalence(const Options& opt) {
  const auto t0 = Clock::now();
  CriterionResult r{1, "Hamilton equivalence", false, 0.0, 1e-12, "", 0.0};
  Rng rng(opt.seed);
  QConvLayer::Spec spec;
  spec.in_q = 2;
  spec.out_q = 2;
  spec.k = 3;
  spec.bias = false;
  const QConvLayer layer(spec, rng, DType::f64);
  const Tensor x = random_tensor({2, 8, 4, 4, 4}, rng);
  const QuaternionKernel& qk = layer.kernel();
  const Tensor ref =
      oracle::qconv3d_hamilton(x, {qk.w_r.value(), qk.w_i.value(), qk.w_j.value(), qk.w_k.value()}, std::nullopt, 1, 1);
  const Var w = opt.expand ? opt.expand(qk.w_r, qk.w_i, qk.w_j, qk.w_k) : expand_kernel(qk);
  const Tensor via_expand = ops::conv3d(Var(x), w, std::nullopt, 1, 1).value();
  const Tensor via_layer = layer.forward(Var(x)).value();
  const double e1 = max_abs_diff(via_expand, ref);
  const double e2 = opt.expand ? 0.0 : max_abs_diff(via_layer, ref);
  r.measured = std::max(e1, e2);
  r.passed = r.measured < r.tolerance;
  r.detail = "B=2, 2->2 quaternion channels, 4^3, k=3, float64";
  r = finish(r, t0);
  if (r.seconds >= 10.0) {
    r.passed = false;
    r.detail += "; runtime over 10 s";
  }
  return r;
}

CriterionResult parameter_ratio(const Options& opt) {
  const auto t0 = Clock::now();
  CriterionResult r{2, "Parameter ratio 1/4", true, 0.0, 0.0, "", 0.0};
  Rng rng(opt.seed + 1);
  int bad = 0;
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    QConvLayer::Spec spec;
    spec.in_q = 1 + static_cast<std::int64_t>(rng.below(6));
    spec.out_q = 1 + static_cast<std::int64_t>(rng.below(6));
    spec.k = static_cast<int>(1 + 2 * rng.below(3));
    spec.padding = spec.k / 2;
    spec.bias = rng.bernoulli(0.5);
    const QConvLayer q(spec, rng, DType::f64);
    QConvLayer::Spec rs = spec;
    rs.real_valued = true;
    const QConvLayer real(rs, rng, DType::f64);
    const ParamCount pc = param_count(spec.in_q, spec.out_q, spec.k, spec.bias);
    // 4 * (quaternion weights) == real weights, in integers: the ratio is exactly 1/4
    const bool ok = 4 * q.weight_count() == real.weight_count() && pc.ratio_num == 1 && pc.ratio_den == 4 &&
                    q.weight_count() == 4 * spec.in_q * spec.out_q * spec.k * spec.k * spec.k;
    if (!ok) ++bad;
    worst = std::max(worst, std::abs(static_cast<double>(q.weight_count()) / static_cast<double>(real.weight_count()) - 0.25));
  }
  r.measured = worst;
  r.passed = bad == 0;
  r.detail = "20 random layer specs, " + std::to_string(bad) + " mismatches";
  return finish(r, t0);
}

CriterionResult gradient_checks(const Options& opt) {
  const auto t0 = Clock::now();
  CriterionResult r{3, "Gradient checks", false, 0.0, 1e-4, "", 0.0};
  Rng rng(opt.seed + 2);
  Rng probe(opt.seed + 3);
  std::vector<std::pair<std::string, double>> parts;
  auto check = [&](const std::string& name, const std::function<Var()>& loss, const std::vector<Var>& ps) {
    const auto rep = oracle::gradcheck(loss, ps, 20, probe, 1e-4);
    parts.emplace_back(name, rep.max_rel_error);
  };

  {
    QConvLayer::Spec spec;
    spec.in_q = 2;
    spec.out_q = 2;
    QConvLayer layer(spec, rng, DType::f64);
    ParamList pl;
    layer.collect("q", pl);
    Var x(random_tensor({1, 8, 4, 4, 4}, rng), true);
    auto ps = vars_of(pl);
    ps.push_back(x);
    check("qconv", [&] { return readout(layer.forward(x), 1); }, ps);
  }
  {
    FusionDirection dir(1, true, false, rng, DType::f64);
    AqcfBlock block(1, 1, true, false, rng, DType::f64);
    const Shape s{1, 4, 3, 3, 3};
    Var fq(random_tensor(s, rng), true), fk(random_tensor(s, rng), true);
    ParamList dl;
    dir.collect("d", dl);
    auto dps = vars_of(dl);
    dps.push_back(fq);
    dps.push_back(fk);
    // projections, attention, context
    check("aqcf.context", [&] { return readout(dir.compute_context(fq, fk), 2); }, dps);
    Var c(random_tensor(s, rng), true);
    auto gps = dps;
    gps.push_back(c);
    check("aqcf.gate", [&] { return readout(dir.compute_gate(fq, c), 3); }, gps);
    Var lam(Tensor::full({1, 1, 1, 1, 1}, 0.6), true);
    auto fps = gps;
    fps.push_back(lam);
    check("aqcf.fuse", [&] { return readout(dir.fuse(fq, c, lam), 4); }, fps);
    check("aqcf.transfer", [&] { return readout(dir.transfer(fq, fk), 5); }, dps);
    ParamList bl;
    block.collect("b", bl);
    auto bps = vars_of(bl);
    bps.push_back(fq);
    bps.push_back(fk);
    check("aqcf.block",
          [&] {
            const BidirectionalResult b = block.forward_bidirectional(fq, fk);
            return ops::add(readout(b.f_ct, 6), readout(b.f_mri, 7));
          },
          bps);
  }
  {
    QuaternionAttentionGate gate(1, 2, false, rng, DType::f64);
    ParamList pl;
    gate.collect("ag", pl);
    Var skip(random_tensor({1, 4, 4, 4, 4}, rng), true), g(random_tensor({1, 8, 2, 2, 2}, rng), true);
    auto ps = vars_of(pl);
    ps.push_back(skip);
    ps.push_back(g);
    check("attention_gate", [&] { return readout(gate.forward(skip, g), 8); }, ps);
  }
  {
    ModelConfig cfg;
    cfg.seed = opt.seed;
    const AqcfNet net(cfg);
    Var x(random_tensor({1, 1, 6, 6, 4}, rng, 0.0, 1.0), true);
    std::vector<Var> ps{x};
    for (const auto& p : net.parameters())
      if (p.name.rfind("ct.stem", 0) == 0) ps.push_back(p.var);
    check("stem", [&] { return readout(net.stem_embed(x), 9); }, ps);
  }
  {
    Tensor labels({4, 3, 2});
    for (std::int64_t i = 0; i < labels.numel(); ++i) labels.set(i, static_cast<double>(rng.below(3)));
    Var logits(random_tensor({1, 3, 4, 3, 2}, rng, -2.0, 2.0), true);
    check("dice_ce", [&] { return dice_ce_loss(logits, labels).loss; }, {logits});
  }

  std::ostringstream d;
  for (const auto& [name, err] : parts) {
    r.measured = std::max(r.measured, err);
    d << name << "=" << fmt(err) << " ";
  }
  r.passed = r.measured < r.tolerance;
  r.detail = d.str() + "(h=1e-4, 20 params each)";
  r = finish(r, t0);
  if (r.seconds >= 120.0) {
    r.passed = false;
    r.detail += "; runtime over 2 min";
  }
  return r;
}

CriterionResult zero_stream_collapse(const Options& opt) {
  const auto t0 = Clock::now();
  CriterionResult r{4, "Zero-stream collapse", true, 0.0, 0.0, "", 0.0};
  ModelConfig cfg;
  cfg.seed = opt.seed;
  const AqcfNet net(cfg);
  Rng rng(opt.seed + 4);
  const Var ct(random_tensor({1, 1, 32, 32, 16}, rng, 0.0, 1.0)), mri(random_tensor({1, 1, 32, 32, 16}, rng, 0.0, 1.0));
  NoGradGuard ng;
  int failures = 0;
  for (int s = 0; s < kStages; ++s)
    for (bool zero_mri : {true, false}) {
      Intervention zero, forced;
      (zero_mri ? zero.zero_mri : zero.zero_ct)[s] = true;
      forced = zero;
      (zero_mri ? forced.residual_ct : forced.residual_mri)[s] = true;
      ForwardCapture cap;
      const ForwardResult a = net.forward(ct, mri, nullptr, &zero, &cap);
      const ForwardResult b = net.forward(ct, mri, nullptr, &forced);
      const TransferCapture& t = zero_mri ? cap.fusion[s].mri_to_ct : cap.fusion[s].ct_to_mri;
      const bool ctx_zero = all_zero(t.context.value());
      const bool same = (zero_mri ? a.logits_ct : a.logits_mri).value().same_values((zero_mri ? b.logits_ct : b.logits_mri).value());
      if (!ctx_zero || !same) ++failures;
    }
  // natural zero MRI input collapses the first scale
  {
    const Var none(Tensor({1, 1, 32, 32, 16}));
    Intervention forced;
    forced.residual_ct[0] = true;
    ForwardCapture cap;
    const ForwardResult a = net.forward(ct, none, nullptr, nullptr, &cap);
    const ForwardResult b = net.forward(ct, none, nullptr, &forced);
    if (!all_zero(cap.fusion[0].mri_to_ct.context.value()) || !a.logits_ct.value().same_values(b.logits_ct.value()))
      ++failures;
  }
  r.measured = failures;
  r.passed = failures == 0;
  r.detail = std::to_string(2 * kStages + 1) + " bitwise comparisons (4 scales x 2 directions + natural zero input), " +
             std::to_string(failures) + " failures";
  return finish(r, t0);
}

CriterionResult lipschitz_bound(const Options& opt) {
  const auto t0 = Clock::now();
  CriterionResult r{5, "Lipschitz bound", false, 0.0, 0.0, "", 0.0};
  Rng rng(opt.seed + 5);
  int violations = 0;
  double worst_ratio = 0.0;
  for (int probe = 0; probe < 100; ++probe) {
    const std::int64_t cq = 1 + static_cast<std::int64_t>(rng.below(2));
    FusionDirection dir(cq, true, false, rng, DType::f64);
    const double scale = std::pow(10.0, rng.uniform(-2.0, 1.0));
    const Shape s{1, 4 * cq, 3 + static_cast<std::int64_t>(rng.below(3)), 3, 3};
    const Var f(random_tensor(s, rng, -scale, scale)), c(random_tensor(s, rng, -scale, scale));
    const Var lam(Tensor::full({1, 1, 1, 1, 1}, rng.uniform()));
    const LipschitzReport rep = lipschitz_deviation_check(dir, f, c, lam);
    if (!rep.holds) ++violations;
    if (rep.bound > 0.0) worst_ratio = std::max(worst_ratio, rep.deviation / rep.bound);
  }
  r.measured = violations;
  r.passed = violations == 0;
  r.detail = "100 probes, max deviation/bound = " + fmt(worst_ratio);
  return finish(r, t0);
}

CriterionResult adamw_oracle(const Options& opt) {
  const auto t0 = Clock::now();
  CriterionResult r{6, "AdamW oracle", false, 0.0, 1e-12, "", 0.0};
  auto set_grad = [](Var& v, double g) {
    v.zero_grad();
    backward(ops::mul(v, Var(Tensor::from({1}, {g}))));
  };
  Var theta(Tensor::from({1}, {1.0}), true);
  AdamW one({{"theta", theta}}, AdamWConfig{1e-4, 0.9, 0.999, 1e-8, 1e-5});
  set_grad(theta, 1.0);
  one.step();
  const double single = std::abs(theta.value().at(0) - (1.0 - 1e-4 * (1.0 / (1.0 + 1e-8) + 1e-5)));

  Rng rng(opt.seed + 6);
  std::vector<double> grads;
  for (int i = 0; i < 10; ++i) grads.push_back(rng.uniform(-2.0, 2.0));
  Var phi(Tensor::from({1}, {0.3}), true);
  AdamW ten({{"phi", phi}}, AdamWConfig{1e-3, 0.9, 0.999, 1e-8, 0.0});
  const auto ref = oracle::adam_trajectory(0.3, grads, oracle::AdamConfig{1e-3, 0.9, 0.999, 1e-8, 0.0});
  double traj = 0.0;
  for (int i = 0; i < 10; ++i) {
    set_grad(phi, grads[i]);
    ten.step();
    traj = std::max(traj, std::abs(phi.value().at(0) - ref[i]));
  }
  r.measured = std::max(single, traj);
  r.passed = r.measured < r.tolerance;
  r.detail = "single step err " + fmt(single) + ", 10-step plain Adam err " + fmt(traj);
  return finish(r, t0);
}

CriterionResult scheduler_oracle(const Options& opt) {
  const auto t0 = Clock::now();
  CriterionResult r{7, "Plateau scheduler", false, 0.0, 0.0, "", 0.0};
  int mismatches = 0;
  {
    PlateauScheduler s;
    double lr = s.step(0.7, 1e-4);
    const std::vector<double> flat{0.7, 0.69, 0.7, 0.5};
    for (std::size_t i = 0; i < flat.size(); ++i) {
      lr = s.step(flat[i], lr);
      if (lr != (i < 3 ? 1e-4 : 0.5e-4)) ++mismatches;
    }
  }
  Rng rng(opt.seed + 7);
  for (int trial = 0; trial < 500; ++trial) {
    const int len = 1 + static_cast<int>(rng.below(80));
    std::vector<double> m;
    for (int i = 0; i < len; ++i) m.push_back(std::round(rng.uniform() * 6.0) / 6.0);
    const double lr0 = rng.uniform(1e-6, 1e-2);
    PlateauScheduler s;
    const auto ref = oracle::plateau_reference(m, lr0, 0.5, 4, 1e-6);
    double lr = lr0;
    for (int i = 0; i < len; ++i) {
      lr = s.step(m[i], lr);
      if (lr != ref[i]) ++mismatches;
    }
  }
  r.measured = mismatches;
  r.passed = mismatches == 0;
  r.detail = "halving example + 500 random sequences vs scalar reference";
  return finish(r, t0);
}

CriterionResult metric_oracles(const Options& opt) {
  const auto t0 = Clock::now();
  CriterionResult r{8, "Metric oracles", false, 0.0, 1e-9, "", 0.0};
  auto to_mask = [](const Tensor& t) {
    oracle::Mask m;
    m.shape = {t.dim(0), t.dim(1), t.dim(2)};
    for (std::int64_t i = 0; i < t.numel(); ++i) m.data.push_back(t.at(i) != 0.0);
    return m;
  };
  Rng rng(opt.seed + 8);
  int dsc_mismatch = 0, undefined_mismatch = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Shape s{2 + static_cast<std::int64_t>(rng.below(9)), 2 + static_cast<std::int64_t>(rng.below(9)),
                  2 + static_cast<std::int64_t>(rng.below(9))};
    const Spacing sp{rng.uniform(0.5, 2.5), rng.uniform(0.5, 2.5), rng.uniform(0.5, 2.5)};
    const double fill = rng.uniform(0.05, 0.6);
    Tensor p(s), g(s);
    for (std::int64_t i = 0; i < p.numel(); ++i) {
      p.set(i, rng.bernoulli(fill) ? 1.0 : 0.0);
      g.set(i, rng.bernoulli(fill) ? 1.0 : 0.0);
    }
    if (dsc(p, g) != oracle::dsc_bruteforce(to_mask(p), to_mask(g))) ++dsc_mismatch;
    const auto ref = oracle::surface_distances_bruteforce(to_mask(p), to_mask(g), sp);
    const SurfaceDistance d = surface_distances(p, g, sp);
    const bool undefined = ref.empty() || std::any_of(ref.begin(), ref.end(), [](double v) { return std::isinf(v); });
    if (undefined != !d.defined) {
      ++undefined_mismatch;
      continue;
    }
    if (undefined) continue;
    double mean = 0.0;
    for (double v : ref) mean += v;
    mean /= static_cast<double>(ref.size());
    worst = std::max({worst, std::abs(d.hd95 - oracle::percentile(ref, 95.0)), std::abs(d.msd - mean)});
  }
  Tensor a({6, 6, 3}), b({6, 6, 3});
  a.set(1, 1.0);
  b.set((3 * 6 + 4) * 3 + 1, 1.0);
  const SurfaceDistance offset = surface_distances(a, b, {1.0, 1.0, 1.0});
  const bool five = offset.defined && offset.hd95 == 5.0 && offset.msd == 5.0;
  r.measured = worst;
  r.passed = worst < r.tolerance && dsc_mismatch == 0 && undefined_mismatch == 0 && five;
  r.detail = "50 random pairs: DSC mismatches " + std::to_string(dsc_mismatch) + ", max distance err " + fmt(worst) +
             "; (3,4,0) offset -> hd95 " + fmt(offset.hd95) + ", msd " + fmt(offset.msd);
  return finish(r, t0);
}

std::vector<VolumeSample> phantom_cohort(Modality m, int count, std::uint64_t seed0, DType dtype) {
  std::vector<VolumeSample> out;
  for (int i = 0; i < count; ++i) {
    PhantomSpec spec;
    spec.modality = m;
    spec.seed = seed0 + static_cast<std::uint64_t>(i);
    VolumeSample s = preprocess(generate_phantom(spec));
    s.image = s.image.to(dtype);
    out.push_back(std::move(s));
  }
  return out;
}

CriterionResult ablation_matrix(const Options& opt) {
  const auto t0 = Clock::now();
  CriterionResult r{10, "Ablation matrix", false, 0.0, 0.0, "", 0.0};
  const auto ct = phantom_cohort(Modality::ct, 2, 500, DType::f32);
  const auto mri = phantom_cohort(Modality::mri, 2, 600, DType::f32);
  auto config = [&](const std::string& name) {
    ModelConfig c;
    c.dtype = DType::f32;
    c.seed = opt.seed;
    c.ablation = ablation_from_name(name);
    return c;
  };
  Rng rng(opt.seed + 10);
  const Tensor x_ct = random_tensor({1, 1, 32, 32, 16}, rng, 0.0, 1.0, DType::f32);
  const Tensor x_mri = random_tensor({1, 1, 32, 32, 16}, rng, 0.0, 1.0, DType::f32);
  const Tensor x_mri2 = random_tensor({1, 1, 32, 32, 16}, rng, 0.0, 1.0, DType::f32);

  // Does a CT-only gradient step change the MRI logits?
  auto ct_step_reaches_mri = [&](const ModelConfig& cfg) {
    AqcfNet net(cfg);
    Tensor before;
    {
      NoGradGuard ng;
      before = net.forward(Var(x_ct), Var(x_mri)).logits_mri.value();
    }
    const ForwardResult out = net.forward(Var(x_ct), Var(x_mri));
    backward(readout(out.logits_ct, 11));
    for (auto& p : net.parameters())
      if (p.var.has_grad()) {
        Tensor g = p.var.grad();
        g.scale_(-1e-2);
        p.var.mutable_value().add_(g);
      }
    NoGradGuard ng;
    return !net.forward(Var(x_ct), Var(x_mri)).logits_mri.value().same_values(before);
  };
  // Does perturbing the MRI input change the CT logits?
  auto mri_input_reaches_ct = [&](const AqcfNet& net) {
    NoGradGuard ng;
    return !net.forward(Var(x_ct), Var(x_mri)).logits_ct.value().same_values(
        net.forward(Var(x_ct), Var(x_mri2)).logits_ct.value());
  };
  // every needle must occur in the parameter name
  auto param_sum = [](const AqcfNet& net, std::initializer_list<std::string_view> needles) {
    std::int64_t n = 0;
    for (const auto& p : net.parameters())
      if (std::all_of(needles.begin(), needles.end(),
                      [&](std::string_view s) { return p.name.find(s) != std::string::npos; }))
        n += p.var.numel();
    return n;
  };

  const AqcfNet full(config("full"));
  std::ostringstream d;
  int failures = 0;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) {
      ++failures;
      d << "FAILED: " << what << "; ";
    }
  };
  for (const std::string name : {"no-gate", "no-fusion", "no-quaternion", "no-shared-bottleneck", "no-attention-gates"}) {
    const ModelConfig cfg = config(name);
    AqcfNet net(cfg);
    const bool fusion = cfg.ablation.use_fusion, shared = cfg.ablation.shared_bottleneck;
    if (name == "no-gate") {
      expect(net.parameter_count() == full.parameter_count() - param_sum(full, {"fusion", ".gate."}), name + " drops exactly the gate MLPs");
      expect(param_sum(net, {"fusion", ".gate."}) == 0, name + " has no gate parameters");
    } else if (name == "no-fusion") {
      expect(net.parameter_count() == full.parameter_count() - param_sum(full, {"fusion"}), name + " drops the fusion blocks");
      expect(!mri_input_reaches_ct(net), name + " MRI input leaves CT logits bitwise unchanged");
    } else if (name == "no-quaternion") {
      expect(net.conv_weight_count() == 4 * full.conv_weight_count(), name + " has 4x conv weights");
    } else if (name == "no-shared-bottleneck") {
      expect(net.parameter_count() == full.parameter_count() + param_sum(full, {"bottleneck"}),
             name + " adds one bottleneck weight set");
    } else if (name == "no-attention-gates") {
      expect(net.parameter_count() == full.parameter_count() - param_sum(full, {".dec", ".gate."}), name + " drops the attention gates");
      expect(param_sum(net, {".dec", ".gate."}) == 0, name + " has no attention-gate parameters");
    }
    if (fusion) expect(mri_input_reaches_ct(net), name + " MRI input reaches CT logits");
    expect(ct_step_reaches_mri(cfg) == (fusion || shared), name + " CT-only step reachability");
    TrainConfig tc;
    tc.seed = opt.seed;
    Trainer trainer(net, ct, mri, tc);
    const EpochLog log = trainer.train_epoch();
    expect(std::isfinite(log.loss_total), name + " trains one epoch");
    d << name << ": params " << net.parameter_count() << ", loss " << fmt(log.loss_total) << "; ";
  }
  // the independent configuration is the only one where no path exists
  ModelConfig independent = config("no-fusion");
  independent.ablation.shared_bottleneck = false;
  expect(!ct_step_reaches_mri(independent), "fusion off + split bottleneck isolates the streams");
  expect(ct_step_reaches_mri(config("full")), "full network CT-only step reaches MRI");
  r.measured = failures;
  r.passed = failures == 0;
  r.detail = "full params " + std::to_string(full.parameter_count()) + "; " + d.str();
  return finish(r, t0);
}

CriterionResult inference_stitching(const Options& opt) {
  const auto t0 = Clock::now();
  CriterionResult r{11, "Inference stitching", false, 0.0, 1e-12, "", 0.0};
  ModelConfig cfg;
  cfg.seed = opt.seed;
  const AqcfNet net(cfg);
  Rng rng(opt.seed + 11);
  const Tensor vol = random_tensor({1, 32, 32, 16}, rng, 0.0, 1.0);
  InferenceConfig ic;
  const Tensor probs = sliding_window_infer(net, vol, ic);
  Tensor direct;
  {
    NoGradGuard ng;
    const ForwardResult out = net.forward(Var(vol.reshaped({1, 1, 32, 32, 16})), Var(Tensor({1, 1, 32, 32, 16})));
    direct = ops::softmax(out.logits_ct, 1).value().reshaped({3, 32, 32, 16});
  }
  const double single = max_abs_diff(probs, direct);

  ModelConfig c32 = cfg;
  c32.dtype = DType::f32;
  const AqcfNet net32(c32);
  const Tensor big = random_tensor({1, 64, 64, 32}, rng, 0.0, 1.0, DType::f32);
  InferenceConfig mri;
  mri.modality = Modality::mri;
  const Tensor p = sliding_window_infer(net32, big, mri);
  const std::int64_t n = 64 * 64 * 32;
  double worst_sum = 0.0;
  for (std::int64_t v = 0; v < n; ++v)
    worst_sum = std::max(worst_sum, std::abs(p.at(v) + p.at(n + v) + p.at(2 * n + v) - 1.0));
  r.measured = single;
  r.passed = single < 1e-12 && worst_sum < 1e-6;
  r.detail = "single window err " + fmt(single) + " (tol 1e-12); 64x64x32 overlap 0.8 max |sum-1| " + fmt(worst_sum) +
             " (tol 1e-6)";
  return finish(r, t0);
}

CriterionResult nifti_round_trip(const Options& opt) {
  const auto t0 = Clock::now();
  CriterionResult r{14, "NIfTI round trip", false, 0.0, 0.0, "", 0.0};
  Rng rng(opt.seed + 14);
  NiftiVolume v;
  v.data = Tensor({7, 5, 3});
  for (std::int64_t i = 0; i < v.data.numel(); ++i)
    v.data.set(i, static_cast<double>(static_cast<float>(rng.uniform(-1000.0, 1000.0))));
  v.spacing = {0.75, 1.25, 2.5};
  v.affine = {{{0.75, 0, 0, -10.0}, {0, 1.25, 0, 4.5}, {0, 0, 2.5, 30.0}}};
  v.datatype = NiftiType::float32;
  const std::string bytes = write_nifti_bytes(v);
  const NiftiVolume back = read_nifti_bytes(bytes);
  const bool data_ok = back.data.same_values(v.data);
  const bool spacing_ok = back.spacing == v.spacing;
  const bool orient_ok = back.affine == v.affine && orientation_of(back.affine) == "RAS";
  std::string bad = bytes;
  bad[344] = 'x';
  bool rejected = false;
  try {
    (void)read_nifti_bytes(bad);
  } catch (const std::exception&) {
    rejected = true;
  }
  r.passed = data_ok && spacing_ok && orient_ok && rejected;
  r.measured = max_abs_diff(back.data, v.data);
  r.detail = std::string("data ") + (data_ok ? "exact" : "differs") + ", spacing " + (spacing_ok ? "exact" : "differs") +
             ", orientation " + (orient_ok ? "exact" : "differs") + ", bad magic " +
             (rejected ? "rejected" : "accepted");
  return finish(r, t0);
}

std::vector<CriterionResult> oracle_suite(const Options& opt) {
  return {hamilton_equivalence(opt), parameter_ratio(opt), gradient_checks(opt),   zero_stream_collapse(opt),
          lipschitz_bound(opt),      adamw_oracle(opt),    scheduler_oracle(opt),  metric_oracles(opt),
          ablation_matrix(opt),      inference_stitching(opt), nifti_round_trip(opt)};
}

OverfitRun run_overfit(const std::string& ablation, const OverfitOptions& opt) {
  OverfitRun run;
  run.ablation = ablation;
  run.ct = phantom_cohort(Modality::ct, opt.cases, 0, opt.dtype);
  run.mri = phantom_cohort(Modality::mri, opt.cases, 100, opt.dtype);
  ModelConfig cfg;
  cfg.dtype = opt.dtype;
  cfg.seed = opt.seed;
  cfg.ablation = ablation_from_name(ablation);
  run.net = std::make_unique<AqcfNet>(cfg);
  TrainConfig tc;
  tc.epochs = opt.epochs;
  tc.seed = opt.seed;
  tc.adam.lr = opt.lr;
  Trainer trainer(*run.net, run.ct, run.mri, tc);

  auto tumor_dice = [&](const std::vector<VolumeSample>& cohort, Modality m) {
    InferenceConfig ic;
    ic.modality = m;
    double total = 0.0;
    for (const auto& s : cohort) {
      const Tensor pred = argmax_labels(sliding_window_infer(*run.net, s.image, ic));
      total += dsc(class_mask(pred, 2), class_mask(s.label, 2));
    }
    return total / static_cast<double>(cohort.size());
  };

  const auto t0 = Clock::now();
  for (int e = 1; e <= opt.epochs; ++e) {
    const EpochLog log = trainer.train_epoch(&run.traces);
    if (e % opt.eval_every == 0 || e == opt.epochs) {
      const double dct = tumor_dice(run.ct, Modality::ct), dmri = tumor_dice(run.mri, Modality::mri);
      run.eval_epochs.push_back(e);
      run.tumor_dice_ct.push_back(dct);
      run.tumor_dice_mri.push_back(dmri);
      if (run.reached_epoch < 0 && dct >= opt.target_dice && dmri >= opt.target_dice) run.reached_epoch = e;
      if (opt.log)
        *opt.log << "  [" << ablation << "] epoch " << e << " loss " << fmt(log.loss_total) << " tumour dice ct "
                 << fmt(dct) << " mri " << fmt(dmri) << " (" << fmt(since(t0)) << " s)" << std::endl;
    }
  }
  run.seconds = since(t0);
  return run;
}

CriterionResult overfit_criterion(const OverfitRun& full, const OverfitRun& no_fusion, const OverfitOptions& opt) {
  CriterionResult r{9, "Phantom overfit", false, 0.0, opt.target_dice, "", full.seconds + no_fusion.seconds};
  const double fct = full.tumor_dice_ct.back(), fmri = full.tumor_dice_mri.back();
  const double nct = no_fusion.tumor_dice_ct.back(), nmri = no_fusion.tumor_dice_mri.back();
  double best_ct = 0.0, best_mri = 0.0;
  for (std::size_t i = 0; i < full.eval_epochs.size(); ++i) {
    best_ct = std::max(best_ct, std::min(full.tumor_dice_ct[i], full.tumor_dice_mri[i]));
    best_mri = std::max(best_mri, full.tumor_dice_mri[i]);
  }
  const bool reached = full.reached_epoch > 0;
  const bool in_time = full.seconds <= opt.time_budget_seconds;
  const bool ordering = 0.5 * (nct + nmri) <= 0.5 * (fct + fmri);
  r.measured = best_ct;
  r.passed = reached && in_time && ordering;
  std::ostringstream d;
  d << "full: best min-stream tumour dice " << fmt(best_ct) << ", final ct " << fmt(fct) << " mri " << fmt(fmri)
    << ", reached " << (reached ? "at epoch " + std::to_string(full.reached_epoch) : std::string("never")) << ", "
    << fmt(full.seconds) << " s (budget " << fmt(opt.time_budget_seconds) << " s); no-fusion final ct " << fmt(nct)
    << " mri " << fmt(nmri) << ", mean " << fmt(0.5 * (nct + nmri)) << " vs full " << fmt(0.5 * (fct + fmri));
  r.detail = d.str();
  return r;
}

CriterionResult gate_statistics_criterion(const OverfitRun& full, std::ostream* table) {
  const auto t0 = Clock::now();
  CriterionResult r{12, "Gate statistics", false, 0.0, 0.0, "", 0.0};
  const auto stats = gate_statistics(full.traces.traces());
  bool in_range = true, ordered = true;
  std::set<std::pair<int, Direction>> cells;
  for (const auto& s : stats) {
    for (double v : {s.median, s.q25, s.q75}) in_range &= v >= 0.0 && v <= 1.0;
    ordered &= s.q25 <= s.median && s.median <= s.q75;
    cells.insert({s.stage, s.direction});
  }
  std::ostringstream os;
  write_gate_table(os, stats);
  if (table) *table << os.str();
  const bool shape = cells.size() == 2 * kStages;
  r.passed = in_range && ordered && shape;
  r.measured = static_cast<double>(cells.size());
  r.detail = std::to_string(full.traces.records().size()) + " gate values, " + std::to_string(cells.size()) +
             " stage/direction cells, all in [0,1]: " + (in_range ? "yes" : "no");
  return finish(r, t0);
}

CriterionResult xai_criterion(const OverfitRun& full) {
  const auto t0 = Clock::now();
  CriterionResult r{13, "XAI pointing game", false, 0.0, 0.8, "", 0.0};
  const DType dt = full.net->config().dtype;
  auto ct = phantom_cohort(Modality::ct, 10, 1000, dt);
  const auto mri = phantom_cohort(Modality::mri, 10, 2000, dt);
  ct.insert(ct.end(), mri.begin(), mri.end());
  int hits = 0, cases = 0;
  bool contract = true;
  for (const auto& s : ct) {
    SaliencyRequest req;
    req.modality = s.modality;
    const Tensor sal = saliency_map(*full.net, s.image, req);
    contract &= sal.shape() == s.label.shape();
    for (std::int64_t i = 0; i < sal.numel(); ++i) contract &= sal.at(i) >= 0.0 && sal.at(i) <= 1.0;
    const SaliencyReport rep = saliency_alignment(sal, class_mask(s.label, 2), s.spacing);
    if (!rep.defined) continue;
    ++cases;
    hits += rep.pointing_hit;
  }
  r.measured = cases ? static_cast<double>(hits) / cases : 0.0;
  r.passed = cases == 20 && contract && r.measured >= r.tolerance;
  r.detail = std::to_string(hits) + "/" + std::to_string(cases) +
             " held-out phantoms (10 CT, 10 MRI), Grad-CAM++ at dec0; maps in [0,1] with volume shape: " +
             (contract ? "yes" : "no");
  return finish(r, t0);
}

void print_result(std::ostream& os, const CriterionResult& r) {
  os << (r.passed ? "PASS" : "FAIL") << " [" << r.id << "] " << r.name << "  measured=" << fmt(r.measured)
     << " tolerance=" << fmt(r.tolerance) << "  (" << std::fixed << std::setprecision(1) << r.seconds << " s)  "
     << std::defaultfloat << r.detail << '\n';
}

}  // namespace aqcf::verify
