// aqcf: train, infer, eval, verify, gate-stats, xai, phantom-gen.
// Exit codes: 0 success, 1 usage, 2 data error, 3 verification failure.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "aqcf/data.hpp"
#include "aqcf/eval.hpp"
#include "aqcf/model.hpp"
#include "aqcf/nifti.hpp"
#include "aqcf/training.hpp"
#include "aqcf/verify.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace aqcf;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct VerificationFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json strip_seed(const std::string& text) {
  json j = json::parse(text);
  j.erase("seed");
  return j;
}

json default_config() {
  json j;
  j["seed"] = 0;
  j["model"] = strip_seed(model_config_to_json(ModelConfig{}));
  j["training"] = strip_seed(train_config_to_json(TrainConfig{}));
  j["data"] = {{"manifest", ""}, {"val_manifest", ""}, {"phantom_ct", 8}, {"phantom_mri", 8}, {"phantom_seed", 0}};
  j["inference"] = {{"overlap", 0.8}};
  j["xai"] = {{"layer", "dec0"}, {"method", "grad-cam++"}, {"target_class", 2}, {"band_mm", 3.0}, {"threshold", 0.5}};
  return j;
}

// Overlay `src` onto `dst`; every key of `src` must already exist in `dst`.
void merge_strict(json& dst, const json& src, const std::string& where) {
  if (!src.is_object()) throw UsageError("config: " + (where.empty() ? std::string("top level") : where) + " must be an object");
  for (const auto& [key, value] : src.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!dst.contains(key)) throw UsageError("config: unknown key '" + path + "'");
    if (dst[key].is_object() && value.is_object())
      merge_strict(dst[key], value, path);
    else
      dst[key] = value;
  }
}

struct RunConfig {
  json resolved;
  ModelConfig model;
  TrainConfig training;
  bool has_model_block = false;  // the user config named a model block

  std::uint64_t seed() const { return resolved.at("seed").get<std::uint64_t>(); }
  const json& data() const { return resolved.at("data"); }
  double overlap() const { return resolved.at("inference").at("overlap").get<double>(); }
};

// flags > config file > defaults
RunConfig resolve_config(const std::string& path, const std::function<void(json&)>& apply_flags) {
  RunConfig rc;
  rc.resolved = default_config();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw UsageError("config: cannot open " + path);
    json user;
    try {
      user = json::parse(in);
    } catch (const json::exception& e) {
      throw UsageError("config: " + path + ": " + e.what());
    }
    rc.has_model_block = user.is_object() && user.contains("model");
    merge_strict(rc.resolved, user, "");
  }
  apply_flags(rc.resolved);
  try {
    json m = rc.resolved.at("model");
    m["seed"] = rc.resolved.at("seed");
    rc.model = model_config_from_json(m.dump());
    rc.model.validate();
    json t = rc.resolved.at("training");
    t["seed"] = rc.resolved.at("seed");
    rc.training = train_config_from_json(t.dump());
    const double ov = rc.overlap();
    if (!(ov >= 0.0 && ov < 1.0)) throw std::invalid_argument("inference.overlap must be in [0, 1)");
    (void)rc.data().at("manifest").get<std::string>();
    (void)rc.data().at("phantom_ct").get<int>();
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  return rc;
}

fs::path prepare_out_dir(const std::string& dir) {
  const fs::path p(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw DataError("cannot create output directory " + dir + ": " + ec.message());
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

void save_resolved(const fs::path& dir, const json& resolved) { write_text(dir / "config.json", resolved.dump(2) + "\n"); }

std::vector<VolumeSample> load_cohort(const std::string& manifest, std::optional<Modality> only = std::nullopt) {
  std::vector<ManifestEntry> entries;
  try {
    entries = read_manifest(manifest);
  } catch (const std::exception& e) {
    throw DataError(std::string("manifest ") + manifest + ": " + e.what());
  }
  std::vector<VolumeSample> out;
  for (const auto& e : entries) {
    if (only && e.modality != *only) continue;
    try {
      RawVolume raw = load_volume(e);
      raw.subject_id = e.subject_id;
      out.push_back(preprocess(raw));
    } catch (const std::exception& ex) {
      throw DataError("case " + e.subject_id + ": " + ex.what());
    }
  }
  return out;
}

std::vector<VolumeSample> to_dtype(std::vector<VolumeSample> v, DType dt) {
  for (auto& s : v) s.image = s.image.to(dt);
  return v;
}

std::vector<VolumeSample> phantoms(Modality m, int count, std::uint64_t seed0) {
  std::vector<VolumeSample> out;
  for (int i = 0; i < count; ++i) {
    PhantomSpec spec;
    spec.modality = m;
    spec.seed = seed0 + static_cast<std::uint64_t>(i);
    RawVolume raw = generate_phantom(spec);
    raw.subject_id = to_string(m) + "_phantom_" + std::to_string(spec.seed);
    out.push_back(preprocess(raw));
  }
  return out;
}

// Volume reoriented to the modality's canonical frame, resampled to 1 mm and normalised.
struct InputVolume {
  Tensor image;  // [1, X, Y, Z]
  NiftiVolume geometry;  // 1 mm grid
  Spacing source_spacing;
};

InputVolume read_input(const std::string& path, Modality m) {
  NiftiVolume v;
  try {
    v = read_nifti(path, canonical_orientation(m));
  } catch (const std::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  InputVolume in;
  in.source_spacing = v.spacing;
  const Tensor resampled = resample_trilinear(v.data, v.spacing);
  const Tensor norm = normalize_intensity(resampled, m);
  in.image = norm.reshaped({1, norm.shape()[0], norm.shape()[1], norm.shape()[2]});
  in.geometry.spacing = {1.0, 1.0, 1.0};
  in.geometry.affine = v.affine;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) in.geometry.affine[r][c] /= v.spacing[c];
  return in;
}

void write_volume(const fs::path& path, const Tensor& data, const NiftiVolume& geometry, NiftiType type) {
  NiftiVolume v = geometry;
  v.data = data.to(DType::f64);
  v.datatype = type;
  try {
    write_nifti(path.string(), v);
  } catch (const std::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

Tensor channel(const Tensor& probs, std::int64_t c) {
  const Shape& s = probs.shape();
  const std::int64_t n = s[1] * s[2] * s[3];
  Tensor out({s[1], s[2], s[3]});
  for (std::int64_t i = 0; i < n; ++i) out.set(i, probs.at(c * n + i));
  return out;
}

// The checkpoint's own configuration unless the user config names a model block,
// in which case widths must match record for record.
std::unique_ptr<AqcfNet> load_model(const std::string& path, const RunConfig& rc) {
  Checkpoint ck;
  try {
    ck = load_checkpoint(path);
  } catch (const std::exception& e) {
    throw DataError("checkpoint " + path + ": " + e.what());
  }
  auto net = std::make_unique<AqcfNet>(rc.has_model_block ? rc.model : ck.config);
  try {
    load_parameters(*net, ck);
  } catch (const std::exception& e) {
    throw DataError("checkpoint " + path + " does not fit the configured model: " + e.what());
  }
  return net;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, out, manifest, val_manifest, resume, ablation, dtype;
  std::optional<int> epochs, phantom_ct, phantom_mri;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  bool quick = false;
};

int cmd_train(const TrainArgs& a) {
  RunConfig rc = resolve_config(a.config, [&](json& j) {
    if (a.quick) {
      j["data"]["phantom_ct"] = 2;
      j["data"]["phantom_mri"] = 2;
      j["training"]["epochs"] = 2;
      j["model"]["dtype"] = "float32";
    }
    if (a.seed) j["seed"] = *a.seed;
    if (a.epochs) j["training"]["epochs"] = *a.epochs;
    if (a.lr) j["training"]["adam"]["lr"] = *a.lr;
    if (!a.manifest.empty()) j["data"]["manifest"] = a.manifest;
    if (!a.val_manifest.empty()) j["data"]["val_manifest"] = a.val_manifest;
    if (a.phantom_ct) j["data"]["phantom_ct"] = *a.phantom_ct;
    if (a.phantom_mri) j["data"]["phantom_mri"] = *a.phantom_mri;
    if (!a.dtype.empty()) j["model"]["dtype"] = a.dtype;
    if (!a.ablation.empty()) {
      Ablation ab;
      try {
        ab = ablation_from_name(a.ablation);
      } catch (const std::exception& e) {
        throw UsageError(e.what());
      }
      j["model"]["ablation"] = {{"use_gate", ab.use_gate},
                                {"use_fusion", ab.use_fusion},
                                {"use_quaternion", ab.use_quaternion},
                                {"shared_bottleneck", ab.shared_bottleneck},
                                {"use_attention_gates", ab.use_attention_gates}};
    }
  });
  const fs::path out = prepare_out_dir(a.out);

  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) {
    try {
      resume = load_checkpoint(a.resume);
    } catch (const std::exception& e) {
      throw DataError("checkpoint " + a.resume + ": " + e.what());
    }
    if (model_config_to_json(resume->config) != model_config_to_json(rc.model))
      throw UsageError("resume: checkpoint model config " + model_config_to_json(resume->config) +
                       " differs from the resolved model config " + model_config_to_json(rc.model));
  }

  const json& d = rc.data();
  const std::string manifest = d.at("manifest").get<std::string>();
  std::vector<VolumeSample> ct, mri;
  if (!manifest.empty()) {
    ct = load_cohort(manifest, Modality::ct);
    mri = load_cohort(manifest, Modality::mri);
  } else {
    const auto s0 = d.at("phantom_seed").get<std::uint64_t>();
    ct = phantoms(Modality::ct, d.at("phantom_ct").get<int>(), s0);
    mri = phantoms(Modality::mri, d.at("phantom_mri").get<int>(), s0 + 100000);
  }
  if (ct.empty() || mri.empty())
    throw DataError("training needs at least one CT and one MRI case (got " + std::to_string(ct.size()) + " CT, " +
                    std::to_string(mri.size()) + " MRI)");
  ct = to_dtype(std::move(ct), rc.model.dtype);
  mri = to_dtype(std::move(mri), rc.model.dtype);

  std::vector<VolumeSample> val_ct, val_mri;
  const std::string val = d.at("val_manifest").get<std::string>();
  if (!val.empty()) {
    val_ct = to_dtype(load_cohort(val, Modality::ct), rc.model.dtype);
    val_mri = to_dtype(load_cohort(val, Modality::mri), rc.model.dtype);
  }

  save_resolved(out, rc.resolved);
  AqcfNet net(rc.model);
  Trainer trainer(net, ct, mri, rc.training);
  InferenceConfig ic;
  ic.patch = rc.model.patch;
  ic.overlap = rc.overlap();
  if (!val_ct.empty() && !val_mri.empty()) {
    trainer.set_validator([&, ic](const AqcfNet& m) mutable {
      InferenceConfig c = ic, r = ic;
      c.modality = Modality::ct;
      r.modality = Modality::mri;
      return std::make_pair(mean_foreground_dice(m, val_ct, c), mean_foreground_dice(m, val_mri, r));
    });
  }
  if (resume) trainer.resume(*resume);

  std::ofstream log(out / "train_log.tsv", resume ? std::ios::app : std::ios::trunc);
  if (!resume) write_epoch_log_header(log);
  std::ofstream traces_file(out / "gate_traces.tsv", resume ? std::ios::app : std::ios::trunc);
  bool trace_header = !resume;

  std::optional<double> best;
  for (const auto& h : trainer.history()) {
    const double score = val.empty() ? -h.loss_total : 0.5 * (h.val_dice_ct + h.val_dice_mri);
    if (!best || score > *best) best = score;
  }
  while (trainer.epoch() < rc.training.epochs) {
    GateTraceSink sink;
    EpochLog l;
    try {
      l = trainer.train_epoch(&sink);
    } catch (const NonFiniteGradient& e) {
      throw DataError(std::string("training aborted: ") + e.what());
    }
    write_epoch_log(log, l);
    log.flush();
    std::ostringstream ts;
    sink.write_tsv(ts);
    std::string body = ts.str();
    if (!trace_header) body.erase(0, body.find('\n') + 1);
    trace_header = false;
    traces_file << body;
    traces_file.flush();
    const double score = val.empty() ? -l.loss_total : 0.5 * (l.val_dice_ct + l.val_dice_mri);
    if (!best || score > *best) {
      best = score;
      save_checkpoint((out / "best.ckpt").string(), make_checkpoint(net));
    }
    std::cerr << "epoch " << l.epoch << "/" << rc.training.epochs << " loss " << l.loss_total << " lr " << l.lr << "\n";
  }
  save_checkpoint((out / "final.ckpt").string(), trainer.checkpoint());
  std::cerr << "wrote " << out.string() << "\n";
  return 0;
}

struct InferArgs {
  std::string config, checkpoint, volume, out, modality;
  std::optional<double> overlap;
};

Modality parse_modality(const std::string& s) {
  if (s.empty()) throw UsageError("--modality {ct|mri} is required; the modality is never guessed");
  try {
    return modality_from_string(s);
  } catch (const std::exception&) {
    throw UsageError("--modality must be ct or mri, got '" + s + "'");
  }
}

int cmd_infer(const InferArgs& a) {
  const Modality m = parse_modality(a.modality);
  RunConfig rc = resolve_config(a.config, [&](json& j) {
    if (a.overlap) j["inference"]["overlap"] = *a.overlap;
  });
  const auto net = load_model(a.checkpoint, rc);
  const InputVolume in = read_input(a.volume, m);
  const fs::path out = prepare_out_dir(a.out);
  rc.resolved["model"] = json::parse(model_config_to_json(net->config()));
  save_resolved(out, rc.resolved);
  InferenceConfig ic;
  ic.patch = net->config().patch;
  ic.overlap = rc.overlap();
  ic.modality = m;
  const Tensor probs = sliding_window_infer(*net, in.image.to(net->config().dtype), ic);
  write_volume(out / "labels.nii", argmax_labels(probs), in.geometry, NiftiType::uint8);
  for (std::int64_t c = 0; c < probs.shape()[0]; ++c)
    write_volume(out / ("prob_class" + std::to_string(c) + ".nii"), channel(probs, c), in.geometry, NiftiType::float32);
  std::cerr << "wrote " << out.string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string config, checkpoint, manifest, out;
  std::optional<double> overlap;
};

int cmd_eval(const EvalArgs& a) {
  RunConfig rc = resolve_config(a.config, [&](json& j) {
    if (a.overlap) j["inference"]["overlap"] = *a.overlap;
    j["data"]["manifest"] = a.manifest;
  });
  const auto net = load_model(a.checkpoint, rc);
  const auto cases = load_cohort(a.manifest);
  if (cases.empty()) throw DataError("manifest " + a.manifest + " lists no cases");
  const fs::path out = prepare_out_dir(a.out);
  rc.resolved["model"] = json::parse(model_config_to_json(net->config()));
  save_resolved(out, rc.resolved);
  std::vector<CaseMetrics> metrics;
  for (const auto& s : cases) {
    InferenceConfig ic;
    ic.patch = net->config().patch;
    ic.overlap = rc.overlap();
    ic.modality = s.modality;
    try {
      const Tensor pred = argmax_labels(sliding_window_infer(*net, s.image.to(net->config().dtype), ic));
      metrics.push_back(segmentation_metrics(pred, s.label, s.spacing, s.subject_id, s.modality));
    } catch (const std::exception& e) {
      throw DataError("case " + s.subject_id + ": " + e.what());
    }
    std::cerr << "evaluated " << s.subject_id << "\n";
  }
  std::ostringstream report;
  write_metrics_report(report, metrics);
  write_text(out / "metrics.tsv", report.str());
  std::cout << report.str();
  return 0;
}

struct VerifyArgs {
  bool full = false;
  bool mutate = false;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::vector<int> only;
};

int cmd_verify(const VerifyArgs& a) {
  verify::Options opt;
  if (a.seed) opt.seed = *a.seed;
  if (a.mutate) opt.expand = verify::sign_flip_fixture();
  int failed = 0;
  auto report = [&](const verify::CriterionResult& r) {
    verify::print_result(std::cout, r);
    std::cout.flush();
    failed += !r.passed;
  };
  const std::vector<std::pair<int, verify::CriterionResult (*)(const verify::Options&)>> checks{
      {1, verify::hamilton_equivalence}, {2, verify::parameter_ratio},    {3, verify::gradient_checks},
      {4, verify::zero_stream_collapse}, {5, verify::lipschitz_bound},    {6, verify::adamw_oracle},
      {7, verify::scheduler_oracle},     {8, verify::metric_oracles},     {10, verify::ablation_matrix},
      {11, verify::inference_stitching}, {14, verify::nifti_round_trip}};
  for (int id : a.only)
    if (std::none_of(checks.begin(), checks.end(), [id](const auto& c) { return c.first == id; }))
      throw UsageError("verify --only: no oracle check with id " + std::to_string(id));
  for (const auto& [id, fn] : checks)
    if (a.only.empty() || std::find(a.only.begin(), a.only.end(), id) != a.only.end()) report(fn(opt));
  if (a.full) {
    verify::OverfitOptions oo;
    if (a.epochs) oo.epochs = *a.epochs;
    oo.log = &std::cerr;
    const auto full = verify::run_overfit("full", oo);
    const auto nof = verify::run_overfit("no-fusion", oo);
    report(verify::overfit_criterion(full, nof, oo));
    report(verify::gate_statistics_criterion(full, &std::cout));
    report(verify::xai_criterion(full));
  }
  if (failed) throw VerificationFailure(std::to_string(failed) + " check(s) failed");
  return 0;
}

struct GateArgs {
  std::string traces, out;
};

int cmd_gate_stats(const GateArgs& a) {
  std::ifstream in(a.traces);
  if (!in) throw DataError("cannot open " + a.traces);
  std::vector<GateStat> stats;
  try {
    stats = gate_statistics(GateTraceSink::read_tsv(in).traces());
  } catch (const std::exception& e) {
    throw DataError(a.traces + ": " + e.what());
  }
  std::ostringstream table;
  write_gate_table(table, stats);
  if (!a.out.empty()) write_text(a.out, table.str());
  std::cout << table.str();
  return 0;
}

struct XaiArgs {
  std::string config, checkpoint, volume, label, out, modality, layer, method;
  std::optional<int> target_class;
};

int cmd_xai(const XaiArgs& a) {
  const Modality m = parse_modality(a.modality);
  RunConfig rc = resolve_config(a.config, [&](json& j) {
    if (!a.layer.empty()) j["xai"]["layer"] = a.layer;
    if (!a.method.empty()) j["xai"]["method"] = a.method;
    if (a.target_class) j["xai"]["target_class"] = *a.target_class;
  });
  const json& x = rc.resolved.at("xai");
  SaliencyRequest req;
  req.modality = m;
  req.layer = x.at("layer").get<std::string>();
  req.target_class = x.at("target_class").get<int>();
  const std::string method = x.at("method").get<std::string>();
  if (method == "grad-cam++")
    req.method = CamMethod::grad_cam_pp;
  else if (method == "grad-cam")
    req.method = CamMethod::grad_cam;
  else
    throw UsageError("xai.method must be grad-cam or grad-cam++, got '" + method + "'");

  const auto net = load_model(a.checkpoint, rc);
  const InputVolume in = read_input(a.volume, m);
  const fs::path out = prepare_out_dir(a.out);
  rc.resolved["model"] = json::parse(model_config_to_json(net->config()));
  save_resolved(out, rc.resolved);
  Tensor sal;
  try {
    sal = saliency_map(*net, in.image.to(net->config().dtype), req);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  write_volume(out / "saliency.nii", sal, in.geometry, NiftiType::float32);
  if (!a.label.empty()) {
    NiftiVolume lv;
    try {
      lv = read_nifti(a.label, canonical_orientation(m));
    } catch (const std::exception& e) {
      throw DataError(a.label + ": " + e.what());
    }
    const Tensor label = resample_nearest(lv.data, lv.spacing);
    if (label.shape() != sal.shape()) throw DataError("label grid does not match the image grid: " + a.label);
    const SaliencyReport r = saliency_alignment(sal, class_mask(label, req.target_class), {1.0, 1.0, 1.0},
                                                x.at("band_mm").get<double>(), x.at("threshold").get<double>());
    std::ostringstream os;
    os << "defined\tiou\tband_coverage\tpointing_hit\tpeak_index\n"
       << (r.defined ? 1 : 0) << '\t' << r.iou << '\t' << r.band_coverage << '\t' << (r.pointing_hit ? 1 : 0) << '\t'
       << r.peak_index << '\n';
    write_text(out / "saliency_report.tsv", os.str());
    std::cout << os.str();
  }
  std::cerr << "wrote " << out.string() << "\n";
  return 0;
}

struct PhantomArgs {
  std::string out;
  int ct = 4, mri = 4;
  std::uint64_t seed = 0;
};

int cmd_phantom_gen(const PhantomArgs& a) {
  const fs::path out = prepare_out_dir(a.out);
  std::vector<ManifestEntry> entries;
  auto emit = [&](Modality m, int count, std::uint64_t seed0) {
    for (int i = 0; i < count; ++i) {
      PhantomSpec spec;
      spec.modality = m;
      spec.seed = seed0 + static_cast<std::uint64_t>(i);
      const RawVolume raw = generate_phantom(spec);
      const std::string id = to_string(m) + "_" + std::to_string(spec.seed);
      NiftiVolume geom;
      geom.spacing = raw.spacing;
      const double flip = canonical_orientation(m)[0] == 'L' ? -1.0 : 1.0;
      geom.affine = {{{flip * raw.spacing[0], 0, 0, 0}, {0, raw.spacing[1], 0, 0}, {0, 0, raw.spacing[2], 0}}};
      write_volume(out / (id + "_image.nii"), raw.image, geom, NiftiType::float32);
      write_volume(out / (id + "_label.nii"), raw.label, geom, NiftiType::uint8);
      entries.push_back({id, id + "_image.nii", id + "_label.nii", m});
    }
  };
  emit(Modality::ct, a.ct, a.seed);
  emit(Modality::mri, a.mri, a.seed + 100000);
  write_manifest((out / "manifest.tsv").string(), entries);
  std::cerr << "wrote " << entries.size() << " phantoms and " << (out / "manifest.tsv").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"A-QCF-Net: quaternion cross-fusion segmentation of unpaired CT and MRI"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Joint unpaired training");
  train->add_option("--config", ta.config, "JSON config file");
  train->add_option("--out", ta.out, "Run directory")->required();
  train->add_option("--manifest", ta.manifest, "Training manifest (default: in-memory phantoms)");
  train->add_option("--val-manifest", ta.val_manifest, "Validation manifest driving the scheduler");
  train->add_option("--phantom-ct", ta.phantom_ct, "Phantom CT cases when no manifest is given");
  train->add_option("--phantom-mri", ta.phantom_mri, "Phantom MRI cases when no manifest is given");
  train->add_option("--epochs", ta.epochs);
  train->add_option("--lr", ta.lr);
  train->add_option("--seed", ta.seed);
  train->add_option("--dtype", ta.dtype)->check(CLI::IsMember({"float32", "float64"}));
  train->add_option("--ablation", ta.ablation)->check(CLI::IsMember(ablation_names()));
  train->add_option("--resume", ta.resume, "Continue from a final.ckpt");
  train->add_flag("--quick", ta.quick, "Phantom quick-run preset: 2+2 cases, 2 epochs, float32");

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "Segment one NIfTI volume");
  infer->add_option("--config", ia.config);
  infer->add_option("--checkpoint", ia.checkpoint)->required()->check(CLI::ExistingFile);
  infer->add_option("--volume", ia.volume)->required();
  infer->add_option("--modality", ia.modality, "ct or mri (required)");
  infer->add_option("--out", ia.out)->required();
  infer->add_option("--overlap", ia.overlap);

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Metrics over a labelled manifest");
  eval->add_option("--config", ea.config);
  eval->add_option("--checkpoint", ea.checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--manifest", ea.manifest)->required();
  eval->add_option("--out", ea.out)->required();
  eval->add_option("--overlap", ea.overlap);

  VerifyArgs va;
  auto* ver = app.add_subcommand("verify", "Run the oracle suite");
  ver->add_flag("--full", va.full, "Also run the phantom overfit, gate and pointing-game checks");
  ver->add_option("--epochs", va.epochs, "Overfit epochs with --full");
  ver->add_option("--seed", va.seed);
  ver->add_option("--only", va.only, "Run only these check ids");
  ver->add_flag("--mutate-sign-flip", va.mutate, "Test fixture: flip one Hamilton block sign in the kernel expansion");

  GateArgs ga;
  auto* gate = app.add_subcommand("gate-stats", "Per-stage gate medians and IQRs from recorded traces");
  gate->add_option("--traces", ga.traces)->required();
  gate->add_option("--out", ga.out);

  XaiArgs xa;
  auto* xai = app.add_subcommand("xai", "Grad-CAM saliency for one volume");
  xai->add_option("--config", xa.config);
  xai->add_option("--checkpoint", xa.checkpoint)->required()->check(CLI::ExistingFile);
  xai->add_option("--volume", xa.volume)->required();
  xai->add_option("--label", xa.label, "Label volume; enables the alignment report");
  xai->add_option("--modality", xa.modality, "ct or mri (required)");
  xai->add_option("--layer", xa.layer, "dec0 .. dec3");
  xai->add_option("--method", xa.method)->check(CLI::IsMember({"grad-cam", "grad-cam++"}));
  xai->add_option("--target-class", xa.target_class);
  xai->add_option("--out", xa.out)->required();

  PhantomArgs pa;
  auto* gen = app.add_subcommand("phantom-gen", "Write synthetic phantoms and a manifest");
  gen->add_option("--out", pa.out)->required();
  gen->add_option("--ct", pa.ct)->check(CLI::NonNegativeNumber);
  gen->add_option("--mri", pa.mri)->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", pa.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train) return cmd_train(ta);
    if (*infer) return cmd_infer(ia);
    if (*eval) return cmd_eval(ea);
    if (*ver) return cmd_verify(va);
    if (*gate) return cmd_gate_stats(ga);
    if (*xai) return cmd_xai(xa);
    if (*gen) return cmd_phantom_gen(pa);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const VerificationFailure& e) {
    std::cerr << "verification failed: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
