#include "aqcf/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>

#include "aqcf/ops.hpp"
#include "json.hpp"

namespace aqcf {

using nlohmann::json;

namespace {

const std::vector<std::pair<std::string, Ablation>>& ablation_table() {
  static const std::vector<std::pair<std::string, Ablation>> table = [] {
    std::vector<std::pair<std::string, Ablation>> t;
    t.push_back({"full", Ablation{}});
    Ablation a;
    a.use_gate = false;
    t.push_back({"no-gate", a});
    a = Ablation{};
    a.use_fusion = false;
    t.push_back({"no-fusion", a});
    a = Ablation{};
    a.use_quaternion = false;
    t.push_back({"no-quaternion", a});
    a = Ablation{};
    a.shared_bottleneck = false;
    t.push_back({"no-shared-bottleneck", a});
    a = Ablation{};
    a.use_attention_gates = false;
    t.push_back({"no-attention-gates", a});
    return t;
  }();
  return table;
}

bool same(const Ablation& a, const Ablation& b) {
  return a.use_gate == b.use_gate && a.use_fusion == b.use_fusion && a.use_quaternion == b.use_quaternion &&
         a.shared_bottleneck == b.shared_bottleneck && a.use_attention_gates == b.use_attention_gates;
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw std::invalid_argument(where + ": unknown key '" + it.key() + "'");
}

DType dtype_from_string(const std::string& s) {
  if (s == "float32") return DType::f32;
  if (s == "float64") return DType::f64;
  throw std::invalid_argument("unknown dtype '" + s + "' (expected float32 or float64)");
}

std::string dtype_name(DType d) { return d == DType::f32 ? "float32" : "float64"; }

bool is_conv_weight(const std::string& name) {
  if (name.find(".gate.hidden") != std::string::npos || name.find(".gate.out") != std::string::npos) return false;
  if (name.find(".head.") != std::string::npos) return false;
  for (const char* suffix : {".w_r", ".w_i", ".w_j", ".w_k", ".weight"}) {
    const std::string s(suffix);
    if (name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0) return true;
  }
  return false;
}

}  // namespace

Ablation ablation_from_name(const std::string& name) {
  for (const auto& [n, a] : ablation_table())
    if (n == name) return a;
  std::string known;
  for (const auto& n : ablation_names()) known += (known.empty() ? "" : ", ") + n;
  throw std::invalid_argument("unknown ablation '" + name + "' (known: " + known + ")");
}

std::string ablation_name(const Ablation& a) {
  for (const auto& [n, b] : ablation_table())
    if (same(a, b)) return n;
  return "custom";
}

const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& [n, a] : ablation_table()) out.push_back(n);
    return out;
  }();
  return names;
}

void ModelConfig::validate() const {
  if (widths.size() != 6)
    throw std::invalid_argument("model: expected 6 widths (stem, 4 encoder stages, bottleneck), got " +
                                std::to_string(widths.size()));
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] <= 0) throw std::invalid_argument("model: widths must be positive");
    if (i > 0 && widths[i] <= widths[i - 1]) throw std::invalid_argument("model: widths must strictly increase");
  }
  if (patch.size() != 3) throw std::invalid_argument("model: patch must have 3 dimensions");
  for (auto p : patch)
    if (p <= 0 || p % 16 != 0)
      throw std::invalid_argument("model: patch dims must be positive multiples of 16, got " + shape_str(patch));
  if (num_classes != 3) throw std::invalid_argument("model: num_classes must be 3 (background, liver, tumor)");
}

ModelConfig ModelConfig::paper_scale() {
  ModelConfig c;
  c.widths = {12, 24, 48, 96, 192, 256};
  c.patch = {256, 256, 16};
  return c;
}

std::string model_config_to_json(const ModelConfig& c) {
  json j;
  j["widths"] = c.widths;
  j["patch"] = c.patch;
  j["num_classes"] = c.num_classes;
  j["ablation"] = {{"use_gate", c.ablation.use_gate},
                   {"use_fusion", c.ablation.use_fusion},
                   {"use_quaternion", c.ablation.use_quaternion},
                   {"shared_bottleneck", c.ablation.shared_bottleneck},
                   {"use_attention_gates", c.ablation.use_attention_gates}};
  j["dtype"] = dtype_name(c.dtype);
  j["seed"] = c.seed;
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  const json j = json::parse(text);
  reject_unknown(j, {"widths", "patch", "num_classes", "ablation", "dtype", "seed"}, "model");
  ModelConfig c;
  if (j.contains("widths")) c.widths = j.at("widths").get<std::vector<std::int64_t>>();
  if (j.contains("patch")) c.patch = j.at("patch").get<Shape>();
  if (j.contains("num_classes")) c.num_classes = j.at("num_classes").get<int>();
  if (j.contains("dtype")) c.dtype = dtype_from_string(j.at("dtype").get<std::string>());
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("ablation")) {
    const json& a = j.at("ablation");
    if (a.is_string()) {
      c.ablation = ablation_from_name(a.get<std::string>());
    } else {
      reject_unknown(a, {"use_gate", "use_fusion", "use_quaternion", "shared_bottleneck", "use_attention_gates"},
                     "model.ablation");
      c.ablation.use_gate = a.value("use_gate", true);
      c.ablation.use_fusion = a.value("use_fusion", true);
      c.ablation.use_quaternion = a.value("use_quaternion", true);
      c.ablation.shared_bottleneck = a.value("shared_bottleneck", true);
      c.ablation.use_attention_gates = a.value("use_attention_gates", true);
    }
  }
  c.validate();
  return c;
}

QConvLayer AqcfNet::conv(std::int64_t in_q, std::int64_t out_q, int k, int stride, Rng& rng) const {
  QConvLayer::Spec s;
  s.in_q = in_q;
  s.out_q = out_q;
  s.k = k;
  s.stride = stride;
  s.padding = k / 2;
  s.bias = false;  // instance norm follows
  s.norm = Norm::instance;
  s.activation = Activation::relu;
  s.real_valued = !config_.ablation.use_quaternion;
  return QConvLayer(s, rng, config_.dtype);
}

AqcfNet::Stream AqcfNet::make_stream(Rng& rng) const {
  const auto& w = config_.widths;
  const bool real = !config_.ablation.use_quaternion;
  Stream s;
  s.stem = conv(w[0], w[0], 3, 1, rng);
  for (int i = 0; i < kStages; ++i) {
    s.enc[i].down = conv(w[i], w[i + 1], 3, 2, rng);
    s.enc[i].conv = conv(w[i + 1], w[i + 1], 3, 1, rng);
  }
  for (int d = kStages - 1; d >= 0; --d) {
    const std::int64_t below = d == kStages - 1 ? w[5] : w[d + 1];
    s.dec[d].up = conv(below, w[d], 3, 1, rng);
    s.dec[d].merge = conv(2 * w[d], w[d], 3, 1, rng);
    if (config_.ablation.use_attention_gates)
      s.dec[d].gate = QuaternionAttentionGate(w[d], below, real, rng, config_.dtype);
  }
  const std::int64_t in = 4 * w[0];
  const double bound = std::sqrt(1.0 / static_cast<double>(in));
  s.head_w = uniform_param({config_.num_classes, in, 1, 1, 1}, bound, rng, config_.dtype);
  s.head_b = uniform_param({config_.num_classes}, bound, rng, config_.dtype);
  return s;
}

AqcfNet::Bottleneck AqcfNet::make_bottleneck(Rng& rng) const {
  const auto& w = config_.widths;
  return {conv(w[4], w[5], 3, 1, rng), conv(w[5], w[5], 3, 1, rng)};
}

AqcfNet::AqcfNet(const ModelConfig& config) : config_(config) {
  config_.validate();
  Rng root(config_.seed);
  Rng r_ct = root.substream(1), r_mri = root.substream(2), r_fuse = root.substream(3), r_bn = root.substream(4);
  ct_ = make_stream(r_ct);
  mri_ = make_stream(r_mri);
  if (config_.ablation.use_fusion)
    for (int s = 0; s < kStages; ++s)
      fusion_[s] = AqcfBlock(s + 1, config_.widths[s + 1], config_.ablation.use_gate,
                             !config_.ablation.use_quaternion, r_fuse, config_.dtype);
  bottleneck_ct_ = make_bottleneck(r_bn);
  bottleneck_mri_ = config_.ablation.shared_bottleneck ? bottleneck_ct_ : make_bottleneck(r_bn);
}

Var AqcfNet::embed(const Var& x, std::int64_t channels_q) {
  const Shape& s = x.shape();
  if (s.size() != 5 || s[1] != 1)
    throw ShapeError("stem_embed: expected a single-channel [B,1,D,H,W] input, got " + shape_str(s));
  std::vector<Var> parts(static_cast<std::size_t>(channels_q), x);
  Shape zs = s;
  zs[1] = 3 * channels_q;
  parts.push_back(Var(Tensor(zs, x.dtype())));
  return ops::concat(parts, 1);
}

Var AqcfNet::stem_embed(const Var& x, bool ct_stream) const {
  return (ct_stream ? ct_ : mri_).stem.forward(embed(x, config_.widths[0]));
}

Var AqcfNet::run_bottleneck(const Bottleneck& b, const Var& x) const { return b.b.forward(b.a.forward(x)); }

Var AqcfNet::decode(const Stream& s, const Var& bottom, const std::array<Var, kStages + 1>& skips,
                    const std::string& tag, ForwardCapture* capture) const {
  Var prev = bottom;
  for (int d = kStages - 1; d >= 0; --d) {
    const DecoderStage& st = s.dec[d];
    Var up = st.up.forward(ops::upsample_nearest2(prev));
    Var skip = skips[d];
    if (config_.ablation.use_attention_gates) skip = st.gate.forward(skip, prev);
    prev = st.merge.forward(quaternion_concat({up, skip}));
    if (capture) capture->activations[tag + ".dec" + std::to_string(d)] = prev;
  }
  return ops::conv3d(prev, s.head_w, s.head_b, 1, 0);
}

ForwardResult AqcfNet::forward(const Var& x_ct_in, const Var& x_mri_in, GateTraceSink* trace,
                               const Intervention* iv, ForwardCapture* capture) const {
  for (const Var* x : {&x_ct_in, &x_mri_in}) {
    const Shape& s = x->shape();
    if (s.size() != 5 || s[1] != 1 || s[2] != config_.patch[0] || s[3] != config_.patch[1] ||
        s[4] != config_.patch[2])
      throw ShapeError("forward: expected input [B,1," + std::to_string(config_.patch[0]) + "," +
                       std::to_string(config_.patch[1]) + "," + std::to_string(config_.patch[2]) + "], got " +
                       shape_str(s));
  }
  if (x_ct_in.shape()[0] != x_mri_in.shape()[0]) throw ShapeError("forward: CT and MRI batch sizes differ");
  auto cast = [&](const Var& x) { return x.dtype() == config_.dtype ? x : Var(x.value().to(config_.dtype)); };
  const Var x_ct = cast(x_ct_in), x_mri = cast(x_mri_in);

  std::array<Var, kStages + 1> skip_ct, skip_mri;
  Var f_ct = stem_embed(x_ct, true), f_mri = stem_embed(x_mri, false);
  skip_ct[0] = f_ct;
  skip_mri[0] = f_mri;
  if (capture) {
    capture->activations["ct.stem"] = f_ct;
    capture->activations["mri.stem"] = f_mri;
  }
  for (int s = 0; s < kStages; ++s) {
    f_ct = ct_.enc[s].conv.forward(ct_.enc[s].down.forward(f_ct));
    f_mri = mri_.enc[s].conv.forward(mri_.enc[s].down.forward(f_mri));
    if (iv && iv->zero_ct[s]) f_ct = Var(Tensor(f_ct.shape(), f_ct.dtype()));
    if (iv && iv->zero_mri[s]) f_mri = Var(Tensor(f_mri.shape(), f_mri.dtype()));
    const std::string idx = std::to_string(s + 1);
    if (capture) {
      capture->activations["ct.enc" + idx] = f_ct;
      capture->activations["mri.enc" + idx] = f_mri;
    }
    if (config_.ablation.use_fusion) {
      const AqcfBlock& block = fusion_[s];
      BidirectionalResult r = block.forward_bidirectional(f_ct, f_mri, trace);
      Var next_ct = (iv && iv->residual_ct[s]) ? block.mri_to_ct().residual(f_ct) : r.f_ct;
      Var next_mri = (iv && iv->residual_mri[s]) ? block.ct_to_mri().residual(f_mri) : r.f_mri;
      f_ct = next_ct;
      f_mri = next_mri;
      if (capture) {
        capture->fusion[s] = r;
        capture->activations["ct.fused" + idx] = f_ct;
        capture->activations["mri.fused" + idx] = f_mri;
      }
    }
    skip_ct[s + 1] = f_ct;
    skip_mri[s + 1] = f_mri;
  }
  Var bottom_ct = run_bottleneck(bottleneck_ct_, f_ct);
  Var bottom_mri = run_bottleneck(bottleneck_mri_, f_mri);
  if (capture) {
    capture->activations["ct.bottleneck"] = bottom_ct;
    capture->activations["mri.bottleneck"] = bottom_mri;
  }
  ForwardResult out;
  out.logits_ct = decode(ct_, bottom_ct, skip_ct, "ct", capture);
  out.logits_mri = decode(mri_, bottom_mri, skip_mri, "mri", capture);
  return out;
}

void AqcfNet::collect_stream(const Stream& s, const std::string& p, ParamList& out) const {
  s.stem.collect(p + ".stem", out);
  for (int i = 0; i < kStages; ++i) {
    const std::string e = p + ".enc" + std::to_string(i + 1);
    s.enc[i].down.collect(e + ".down", out);
    s.enc[i].conv.collect(e + ".conv", out);
  }
  for (int d = kStages - 1; d >= 0; --d) {
    const std::string e = p + ".dec" + std::to_string(d);
    s.dec[d].up.collect(e + ".up", out);
    if (config_.ablation.use_attention_gates) s.dec[d].gate.collect(e + ".gate", out);
    s.dec[d].merge.collect(e + ".merge", out);
  }
  out.push_back({p + ".head.weight", s.head_w});
  out.push_back({p + ".head.bias", s.head_b});
}

ParamList AqcfNet::parameters() const {
  ParamList out;
  collect_stream(ct_, "ct", out);
  collect_stream(mri_, "mri", out);
  if (config_.ablation.use_fusion)
    for (int s = 0; s < kStages; ++s) fusion_[s].collect("fusion" + std::to_string(s + 1), out);
  auto bn = [&](const Bottleneck& b, const std::string& p) {
    b.a.collect(p + ".a", out);
    b.b.collect(p + ".b", out);
  };
  if (config_.ablation.shared_bottleneck) {
    bn(bottleneck_ct_, "bottleneck");
  } else {
    bn(bottleneck_ct_, "ct.bottleneck");
    bn(bottleneck_mri_, "mri.bottleneck");
  }
  return out;
}

std::int64_t AqcfNet::conv_weight_count() const {
  std::int64_t n = 0;
  for (const auto& p : parameters())
    if (is_conv_weight(p.name)) n += p.var.numel();
  return n;
}

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const char* what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw std::runtime_error(std::string("checkpoint truncated while reading ") + what);
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is, const char* what) {
  const auto n = get<std::uint32_t>(is, what);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw std::runtime_error(std::string("checkpoint truncated while reading ") + what);
  return s;
}

}  // namespace

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  os.write("AQCF", 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  put_string(os, model_config_to_json(ckpt.config));
  put_string(os, ckpt.extras);
  put<std::uint64_t>(os, ckpt.tensors.size());
  for (const auto& [name, var] : ckpt.tensors) {
    const Tensor& t = var.value();
    put_string(os, name);
    put<std::uint8_t>(os, static_cast<std::uint8_t>(t.dtype()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::int64_t>(os, d);
    dispatch(t.dtype(), [&]<class T>() {
      auto d = t.data<T>();
      os.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size_bytes()));
    });
  }
  if (!os) throw std::runtime_error("checkpoint: write failed");
}

Checkpoint read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "AQCF", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic bytes (expected AQCF)");
  const auto version = get<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.config = model_config_from_json(get_string(is, "config"));
  ckpt.extras = get_string(is, "extras");
  const auto count = get<std::uint64_t>(is, "record count");
  for (std::uint64_t r = 0; r < count; ++r) {
    std::string name = get_string(is, "record name");
    const auto tag = get<std::uint8_t>(is, "dtype");
    if (tag > 1) throw std::runtime_error("checkpoint: record '" + name + "' has unknown dtype tag");
    const auto rank = get<std::uint32_t>(is, "rank");
    if (rank > 8) throw std::runtime_error("checkpoint: record '" + name + "' has implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = get<std::int64_t>(is, "dims");
    Tensor t(shape, static_cast<DType>(tag));
    dispatch(t.dtype(), [&]<class T>() {
      auto d = t.data<T>();
      if (!is.read(reinterpret_cast<char*>(d.data()), static_cast<std::streamsize>(d.size_bytes())))
        throw std::runtime_error("checkpoint truncated in record '" + name + "'");
    });
    ckpt.tensors.push_back({std::move(name), Var(std::move(t))});
  }
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  write_checkpoint(os, ckpt);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  return read_checkpoint(is);
}

Checkpoint make_checkpoint(const AqcfNet& net, const std::string& extras) {
  Checkpoint c;
  c.config = net.config();
  c.extras = extras;
  for (const auto& p : net.parameters()) c.tensors.push_back({p.name, Var(p.var.value())});
  return c;
}

void load_parameters(AqcfNet& net, const Checkpoint& ckpt) {
  std::map<std::string, const Tensor*> byname;
  for (const auto& r : ckpt.tensors) byname[r.name] = &r.var.value();
  for (auto& p : net.parameters()) {
    auto it = byname.find(p.name);
    if (it == byname.end()) throw std::runtime_error("checkpoint is missing parameter '" + p.name + "'");
    if (it->second->shape() != p.var.shape())
      throw std::runtime_error("parameter '" + p.name + "': checkpoint shape " + shape_str(it->second->shape()) +
                               " does not match model shape " + shape_str(p.var.shape()));
    Var v = p.var;
    v.mutable_value() = it->second->to(p.var.dtype());
  }
}

}  // namespace aqcf
