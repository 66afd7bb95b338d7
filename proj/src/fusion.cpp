#include "aqcf/fusion.hpp"

#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "aqcf/ops.hpp"

namespace aqcf {

std::string to_string(Direction d) { return d == Direction::mri_to_ct ? "mri->ct" : "ct->mri"; }

Direction direction_from_string(const std::string& s) {
  if (s == "mri->ct") return Direction::mri_to_ct;
  if (s == "ct->mri") return Direction::ct_to_mri;
  throw std::invalid_argument("unknown gate direction '" + s + "'");
}

void GateTraceSink::append(int stage, Direction direction, const Tensor& lambda) {
  for (std::int64_t b = 0; b < lambda.numel(); ++b)
    records_.push_back({stage, direction, static_cast<int>(b), lambda.at(b)});
}

void GateTraceSink::extend(const GateTraceSink& other) {
  records_.insert(records_.end(), other.records_.begin(), other.records_.end());
}

std::vector<GateTrace> GateTraceSink::traces() const {
  std::map<std::pair<int, int>, GateTrace> grouped;
  for (const auto& r : records_) {
    auto& t = grouped[{r.stage, static_cast<int>(r.direction)}];
    t.stage = r.stage;
    t.direction = r.direction;
    t.lambda_values.push_back(r.lambda);
  }
  std::vector<GateTrace> out;
  for (auto& [key, t] : grouped) out.push_back(std::move(t));
  return out;
}

void GateTraceSink::write_tsv(std::ostream& os) const {
  os << "stage\tdirection\tbatch_index\tlambda\n";
  os.precision(17);
  for (const auto& r : records_)
    os << r.stage << '\t' << to_string(r.direction) << '\t' << r.batch_index << '\t' << r.lambda << '\n';
}

GateTraceSink GateTraceSink::read_tsv(std::istream& is) {
  GateTraceSink sink;
  std::string line;
  if (!std::getline(is, line) || line.rfind("stage\tdirection", 0) != 0)
    throw std::runtime_error("gate trace: missing header 'stage\\tdirection\\tbatch_index\\tlambda'");
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    GateRecord r;
    std::string dir;
    if (!(ls >> r.stage >> dir >> r.batch_index >> r.lambda))
      throw std::runtime_error("gate trace: malformed line " + std::to_string(lineno));
    r.direction = direction_from_string(dir);
    sink.records_.push_back(r);
  }
  return sink;
}

FusionDirection::FusionDirection(std::int64_t channels_q, bool use_gate, bool real_valued, Rng& rng,
                                 DType dtype)
    : channels_q_(channels_q), use_gate_(use_gate) {
  QConvLayer::Spec proj;
  proj.in_q = channels_q;
  proj.out_q = channels_q;
  proj.k = 1;
  proj.padding = 0;
  proj.bias = false;  // keeps K = V = 0 exactly for a zero stream
  proj.real_valued = real_valued;
  q_ = QConvLayer(proj, rng, dtype);
  k_ = QConvLayer(proj, rng, dtype);
  v_ = QConvLayer(proj, rng, dtype);

  QConvLayer::Spec out;
  out.in_q = 2 * channels_q;
  out.out_q = channels_q;
  out.k = 3;
  out.padding = 1;
  out.bias = false;
  out.norm = Norm::instance;
  out.activation = Activation::relu;
  out.real_valued = real_valued;
  out_ = QConvLayer(out, rng, dtype);

  if (use_gate) {
    gate_hidden_ = Linear(8 * channels_q, 2 * channels_q, true, rng, dtype);
    gate_out_ = Linear(2 * channels_q, 1, true, rng, dtype);
  }
}

Var FusionDirection::compute_context(const Var& f_query, const Var& f_keyval, TransferCapture* capture) const {
  if (f_query.shape() != f_keyval.shape())
    throw ShapeError("compute_context: stream shapes differ " + shape_str(f_query.shape()) + " vs " +
                     shape_str(f_keyval.shape()));
  Var q = q_.forward(f_query);
  Var k = k_.forward(f_keyval);
  Var v = v_.forward(f_keyval);
  Var attention = ops::softmax(ops::mul(q, k), 1);
  Var context = ops::mul(attention, v);
  if (capture) {
    capture->q = q;
    capture->k = k;
    capture->v = v;
    capture->attention = attention;
    capture->context = context;
  }
  return context;
}

Var FusionDirection::compute_gate(const Var& f_original, const Var& c_raw) const {
  if (f_original.shape() != c_raw.shape())
    throw ShapeError("compute_gate: shapes differ " + shape_str(f_original.shape()) + " vs " +
                     shape_str(c_raw.shape()));
  const std::int64_t batch = f_original.shape()[0];
  if (!use_gate_) return Var(Tensor::full({batch, 1, 1, 1, 1}, 1.0, f_original.dtype()));
  Var pooled = ops::concat({ops::global_avg_pool(f_original), ops::global_avg_pool(c_raw)}, 1);
  Var logit = gate_out_.forward(ops::relu(gate_hidden_.forward(pooled)));
  return ops::reshape(ops::sigmoid(logit), {batch, 1, 1, 1, 1});
}

Var FusionDirection::fuse(const Var& f_orig, const Var& c_raw, const Var& lambda) const {
  if (f_orig.shape() != c_raw.shape())
    throw ShapeError("fuse: shapes differ " + shape_str(f_orig.shape()) + " vs " + shape_str(c_raw.shape()));
  return out_.forward(quaternion_concat({f_orig, ops::mul(c_raw, lambda)}));
}

Var FusionDirection::residual(const Var& f_orig) const {
  Var zero(Tensor(f_orig.shape(), f_orig.dtype()));
  return out_.forward(quaternion_concat({f_orig, zero}));
}

Var FusionDirection::transfer(const Var& f_query, const Var& f_keyval, TransferCapture* capture) const {
  Var context = compute_context(f_query, f_keyval, capture);
  Var lambda = compute_gate(f_query, context);
  if (capture) capture->lambda = lambda;
  return fuse(f_query, context, lambda);
}

void FusionDirection::collect(const std::string& prefix, ParamList& out) const {
  q_.collect(prefix + ".q", out);
  k_.collect(prefix + ".k", out);
  v_.collect(prefix + ".v", out);
  if (use_gate_) {
    gate_hidden_.collect(prefix + ".gate.hidden", out);
    gate_out_.collect(prefix + ".gate.out", out);
  }
  out_.collect(prefix + ".out", out);
}

AqcfBlock::AqcfBlock(int stage, std::int64_t channels_q, bool use_gate, bool real_valued, Rng& rng, DType dtype)
    : stage_(stage),
      mri_to_ct_(channels_q, use_gate, real_valued, rng, dtype),
      ct_to_mri_(channels_q, use_gate, real_valued, rng, dtype) {}

BidirectionalResult AqcfBlock::forward_bidirectional(const Var& f_ct, const Var& f_mri, GateTraceSink* trace) const {
  if (f_ct.shape() != f_mri.shape())
    throw ShapeError("A-QCF block: stream shapes differ " + shape_str(f_ct.shape()) + " vs " +
                     shape_str(f_mri.shape()));
  BidirectionalResult r;
  r.f_ct = mri_to_ct_.transfer(f_ct, f_mri, &r.mri_to_ct);
  r.f_mri = ct_to_mri_.transfer(f_mri, f_ct, &r.ct_to_mri);
  if (trace && mri_to_ct_.use_gate()) {
    trace->append(stage_, Direction::mri_to_ct, r.mri_to_ct.lambda.value());
    trace->append(stage_, Direction::ct_to_mri, r.ct_to_mri.lambda.value());
  }
  return r;
}

AqcfBlock AqcfBlock::swapped() const {
  AqcfBlock b = *this;
  std::swap(b.mri_to_ct_, b.ct_to_mri_);
  return b;
}

void AqcfBlock::collect(const std::string& prefix, ParamList& out) const {
  mri_to_ct_.collect(prefix + ".mri_to_ct", out);
  ct_to_mri_.collect(prefix + ".ct_to_mri", out);
}

double certified_context_lipschitz(const FusionDirection& dir) {
  const Tensor kernel = dir.out_layer().effective_kernel().value();
  const Shape& s = kernel.shape();  // [4C, 8C, k, k, k]
  const std::int64_t taps = s[2] * s[3] * s[4];
  // input channels are [r | i | j | k] blocks of 2C; the context occupies the
  // upper C of each block
  const std::int64_t block = s[1] / 4;
  const std::int64_t c_q = block / 2;
  double frob2 = 0.0;
  for (std::int64_t o = 0; o < s[0]; ++o)
    for (std::int64_t c = 0; c < s[1]; ++c) {
      if (c % block < c_q) continue;
      for (std::int64_t t = 0; t < taps; ++t) {
        const double w = kernel.at((o * s[1] + c) * taps + t);
        frob2 += w * w;
      }
    }
  const double conv = std::sqrt(static_cast<double>(taps)) * std::sqrt(frob2);
  double norm_factor = 1.0;
  if (dir.out_layer().spec().norm == Norm::instance) norm_factor = 1.0 / std::sqrt(ops::kInstanceNormEps);
  return conv * norm_factor;
}

LipschitzReport lipschitz_deviation_check(const FusionDirection& dir, const Var& f_orig, const Var& c_raw,
                                          const Var& lambda) {
  NoGradGuard no_grad;
  const Tensor with = dir.fuse(f_orig, c_raw, lambda).value();
  const Tensor without = dir.fuse(f_orig, Var(Tensor(c_raw.shape(), c_raw.dtype())), lambda).value();
  const Tensor gated = ops::mul(c_raw, lambda).value();
  LipschitzReport r;
  double dev2 = 0.0, ctx2 = 0.0;
  for (std::int64_t i = 0; i < with.numel(); ++i) {
    const double d = with.at(i) - without.at(i);
    dev2 += d * d;
  }
  for (std::int64_t i = 0; i < gated.numel(); ++i) ctx2 += gated.at(i) * gated.at(i);
  r.deviation = std::sqrt(dev2);
  r.constant = certified_context_lipschitz(dir);
  r.bound = r.constant * std::sqrt(ctx2);
  r.holds = r.deviation <= r.bound;
  return r;
}

}  // namespace aqcf
