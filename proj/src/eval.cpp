#include "aqcf/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <ostream>

#include "aqcf/ops.hpp"

namespace aqcf {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Grid {
  std::int64_t x, y, z;
  std::int64_t at(std::int64_t i, std::int64_t j, std::int64_t k) const { return (i * y + j) * z + k; }
  std::int64_t size() const { return x * y * z; }
};

Grid grid_of(const Tensor& t, const char* what) {
  if (t.rank() != 3) throw ShapeError(std::string(what) + ": expected a 3-D volume, got " + shape_str(t.shape()));
  return {t.dim(0), t.dim(1), t.dim(2)};
}

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Squared distance transform along one line (lower envelope of parabolas).
void edt_line(std::vector<double>& f, double spacing, std::vector<double>& out) {
  const std::int64_t n = static_cast<std::int64_t>(f.size());
  std::vector<std::int64_t> v;
  std::vector<double> z;
  for (std::int64_t q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    const double pq = static_cast<double>(q) * spacing;
    double s = -kInf;
    while (!v.empty()) {
      const double pp = static_cast<double>(v.back()) * spacing;
      s = ((f[q] + pq * pq) - (f[v.back()] + pp * pp)) / (2.0 * (pq - pp));
      if (s <= z.back()) {
        v.pop_back();
        z.pop_back();
        s = -kInf;
      } else {
        break;
      }
    }
    v.push_back(q);
    z.push_back(v.size() == 1 ? -kInf : s);
  }
  out.assign(f.size(), kInf);
  if (v.empty()) return;
  std::size_t k = 0;
  for (std::int64_t q = 0; q < n; ++q) {
    const double pq = static_cast<double>(q) * spacing;
    while (k + 1 < v.size() && z[k + 1] < pq) ++k;
    const double d = static_cast<double>(q - v[k]) * spacing;
    out[q] = d * d + f[v[k]];
  }
}

Tensor squared_distance_to(const Tensor& seeds, const Spacing& sp) {
  const Grid g = grid_of(seeds, "distance_to");
  std::vector<double> d(static_cast<std::size_t>(g.size()));
  for (std::int64_t i = 0; i < g.size(); ++i) d[i] = seeds.at(i) != 0.0 ? 0.0 : kInf;
  const std::array<std::int64_t, 3> n{g.x, g.y, g.z};
  std::vector<double> line, out;
  for (int axis = 0; axis < 3; ++axis) {
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    for (std::int64_t u = 0; u < n[a1]; ++u)
      for (std::int64_t w = 0; w < n[a2]; ++w) {
        line.resize(static_cast<std::size_t>(n[axis]));
        auto index = [&](std::int64_t t) {
          std::array<std::int64_t, 3> p{};
          p[axis] = t;
          p[a1] = u;
          p[a2] = w;
          return g.at(p[0], p[1], p[2]);
        };
        for (std::int64_t t = 0; t < n[axis]; ++t) line[t] = d[index(t)];
        edt_line(line, sp[axis], out);
        for (std::int64_t t = 0; t < n[axis]; ++t) d[index(t)] = out[t];
      }
  }
  return Tensor::from({g.x, g.y, g.z}, d);
}

Tensor patch_pad(const Tensor& volume, const Shape& size) {
  // volume [1, D, H, W] -> [1, size...] zero padded at the high end
  Tensor out({1, size[0], size[1], size[2]}, volume.dtype());
  const std::int64_t D = volume.dim(1), H = volume.dim(2), W = volume.dim(3);
  for (std::int64_t i = 0; i < D; ++i)
    for (std::int64_t j = 0; j < H; ++j)
      for (std::int64_t k = 0; k < W; ++k)
        out.set((i * size[1] + j) * size[2] + k, volume.at((i * H + j) * W + k));
  return out;
}

}  // namespace

std::vector<std::int64_t> window_starts(std::int64_t extent, std::int64_t patch, double overlap) {
  if (!(overlap >= 0.0 && overlap < 1.0)) throw std::invalid_argument("sliding window: overlap must be in [0, 1)");
  if (extent < patch) throw std::invalid_argument("sliding window: volume smaller than patch");
  const std::int64_t stride =
      std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(static_cast<double>(patch) * (1.0 - overlap))));
  std::vector<std::int64_t> starts;
  for (std::int64_t s = 0; s + patch < extent; s += stride) starts.push_back(s);
  if (starts.empty() || starts.back() != extent - patch) starts.push_back(extent - patch);
  return starts;
}

Tensor gaussian_importance(const Shape& patch) {
  if (patch.size() != 3) throw ShapeError("gaussian_importance: patch must have 3 dims");
  std::array<std::vector<double>, 3> axis;
  for (int a = 0; a < 3; ++a) {
    const double sigma = static_cast<double>(patch[a]) / 8.0, c = (static_cast<double>(patch[a]) - 1.0) / 2.0;
    for (std::int64_t t = 0; t < patch[a]; ++t) {
      const double d = static_cast<double>(t) - c;
      axis[a].push_back(std::exp(-d * d / (2.0 * sigma * sigma)));
    }
  }
  Tensor w({patch[0], patch[1], patch[2]});
  for (std::int64_t i = 0; i < patch[0]; ++i)
    for (std::int64_t j = 0; j < patch[1]; ++j)
      for (std::int64_t k = 0; k < patch[2]; ++k)
        w.set((i * patch[1] + j) * patch[2] + k, axis[0][i] * axis[1][j] * axis[2][k]);
  return w;
}

Tensor sliding_window_blend(const Tensor& volume, const Shape& patch, double overlap, const PatchLogits& fn,
                            Tensor* weight_sum) {
  if (volume.rank() != 4 || volume.dim(0) != 1)
    throw ShapeError("sliding window: expected volume [1, D, H, W], got " + shape_str(volume.shape()));
  const Shape full{volume.dim(1), volume.dim(2), volume.dim(3)};
  const Shape padded{std::max(full[0], patch[0]), std::max(full[1], patch[1]), std::max(full[2], patch[2])};
  if (padded != full) {
    Tensor ws;
    const Tensor probs = sliding_window_blend(patch_pad(volume, padded), patch, overlap, fn, &ws);
    const std::int64_t C = probs.dim(0);
    Tensor out({C, full[0], full[1], full[2]});
    Tensor wcrop({full[0], full[1], full[2]});
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < full[0]; ++i)
        for (std::int64_t j = 0; j < full[1]; ++j)
          for (std::int64_t k = 0; k < full[2]; ++k) {
            const std::int64_t src = ((c * padded[0] + i) * padded[1] + j) * padded[2] + k;
            const std::int64_t dst = ((c * full[0] + i) * full[1] + j) * full[2] + k;
            out.set(dst, probs.at(src));
            if (c == 0) wcrop.set((i * full[1] + j) * full[2] + k, ws.at((i * padded[1] + j) * padded[2] + k));
          }
    if (weight_sum) *weight_sum = wcrop;
    return out;
  }

  const Grid g{full[0], full[1], full[2]};
  const Tensor gauss = gaussian_importance(patch);
  const auto sx = window_starts(g.x, patch[0], overlap), sy = window_starts(g.y, patch[1], overlap),
             sz = window_starts(g.z, patch[2], overlap);
  std::vector<double> acc, wsum(static_cast<std::size_t>(g.size()), 0.0);
  std::int64_t C = 0;
  const std::int64_t pvox = patch[0] * patch[1] * patch[2];
  for (auto x0 : sx)
    for (auto y0 : sy)
      for (auto z0 : sz) {
        Tensor p({1, 1, patch[0], patch[1], patch[2]}, volume.dtype());
        for (std::int64_t i = 0; i < patch[0]; ++i)
          for (std::int64_t j = 0; j < patch[1]; ++j)
            for (std::int64_t k = 0; k < patch[2]; ++k)
              p.set((i * patch[1] + j) * patch[2] + k, volume.at(g.at(x0 + i, y0 + j, z0 + k)));
        const Tensor logits = fn(p);
        if (logits.rank() != 5 || logits.dim(0) != 1 || logits.dim(2) != patch[0] || logits.dim(3) != patch[1] ||
            logits.dim(4) != patch[2])
          throw ShapeError("sliding window: patch function returned " + shape_str(logits.shape()));
        if (C == 0) {
          C = logits.dim(1);
          acc.assign(static_cast<std::size_t>(C * g.size()), 0.0);
        }
        for (std::int64_t i = 0; i < patch[0]; ++i)
          for (std::int64_t j = 0; j < patch[1]; ++j)
            for (std::int64_t k = 0; k < patch[2]; ++k) {
              const std::int64_t local = (i * patch[1] + j) * patch[2] + k;
              const std::int64_t v = g.at(x0 + i, y0 + j, z0 + k);
              const double w = gauss.at(local);
              wsum[v] += w;
              for (std::int64_t c = 0; c < C; ++c) acc[c * g.size() + v] += w * logits.at(c * pvox + local);
            }
      }
  Tensor probs({C, g.x, g.y, g.z});
  auto out = probs.data<double>();
  std::vector<double> l(static_cast<std::size_t>(C));
  for (std::int64_t v = 0; v < g.size(); ++v) {
    double mx = -kInf;
    for (std::int64_t c = 0; c < C; ++c) {
      l[c] = acc[c * g.size() + v] / wsum[v];
      mx = std::max(mx, l[c]);
    }
    double s = 0.0;
    for (std::int64_t c = 0; c < C; ++c) s += (l[c] = std::exp(l[c] - mx));
    for (std::int64_t c = 0; c < C; ++c) out[c * g.size() + v] = l[c] / s;
  }
  if (weight_sum) *weight_sum = Tensor::from({g.x, g.y, g.z}, wsum);
  return probs;
}

Tensor sliding_window_infer(const AqcfNet& net, const Tensor& volume, const InferenceConfig& cfg) {
  const Shape& patch = net.config().patch;
  if (cfg.patch != patch)
    throw std::invalid_argument("inference patch " + shape_str(cfg.patch) + " differs from the model patch " +
                                shape_str(patch));
  const bool ct = cfg.modality == Modality::ct;
  return sliding_window_blend(volume, patch, cfg.overlap, [&](const Tensor& p) {
    NoGradGuard ng;
    const Var x(p), zero(Tensor(p.shape(), p.dtype()));
    const ForwardResult r = ct ? net.forward(x, zero) : net.forward(zero, x);
    return (ct ? r.logits_ct : r.logits_mri).value().to(DType::f64);
  });
}

Tensor argmax_labels(const Tensor& probs) {
  if (probs.rank() != 4) throw ShapeError("argmax_labels: expected [C, D, H, W]");
  const std::int64_t C = probs.dim(0), n = probs.numel() / C;
  Tensor out({probs.dim(1), probs.dim(2), probs.dim(3)});
  for (std::int64_t v = 0; v < n; ++v) {
    std::int64_t best = 0;
    for (std::int64_t c = 1; c < C; ++c)
      if (probs.at(c * n + v) > probs.at(best * n + v)) best = c;
    out.set(v, static_cast<double>(best));
  }
  return out;
}

Tensor class_mask(const Tensor& labels, int cls) {
  Tensor m(labels.shape());
  for (std::int64_t i = 0; i < labels.numel(); ++i) m.set(i, labels.at(i) == cls ? 1.0 : 0.0);
  return m;
}

double dsc(const Tensor& pred, const Tensor& gt) {
  require_same(pred, gt, "dsc");
  std::int64_t p = 0, g = 0, both = 0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const bool a = pred.at(i) != 0.0, b = gt.at(i) != 0.0;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

Tensor mask_border(const Tensor& mask) {
  const Grid g = grid_of(mask, "mask_border");
  Tensor out({g.x, g.y, g.z});
  auto in = [&](std::int64_t i, std::int64_t j, std::int64_t k) {
    if (i < 0 || j < 0 || k < 0 || i >= g.x || j >= g.y || k >= g.z) return false;
    return mask.at(g.at(i, j, k)) != 0.0;
  };
  for (std::int64_t i = 0; i < g.x; ++i)
    for (std::int64_t j = 0; j < g.y; ++j)
      for (std::int64_t k = 0; k < g.z; ++k)
        if (in(i, j, k) && (!in(i - 1, j, k) || !in(i + 1, j, k) || !in(i, j - 1, k) || !in(i, j + 1, k) ||
                            !in(i, j, k - 1) || !in(i, j, k + 1)))
          out.set(g.at(i, j, k), 1.0);
  return out;
}

Tensor distance_to(const Tensor& seeds, const Spacing& spacing) {
  Tensor d = squared_distance_to(seeds, spacing);
  for (std::int64_t i = 0; i < d.numel(); ++i) d.set(i, std::sqrt(d.at(i)));
  return d;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty set");
  if (!(q >= 0.0 && q <= 100.0)) throw std::invalid_argument("percentile: q must be in [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

SurfaceDistance surface_distances(const Tensor& pred, const Tensor& gt, const Spacing& spacing) {
  require_same(pred, gt, "surface_distances");
  const Tensor bp = mask_border(pred), bg = mask_border(gt);
  std::int64_t np = 0, ng = 0;
  for (std::int64_t i = 0; i < bp.numel(); ++i) {
    np += bp.at(i) != 0.0;
    ng += bg.at(i) != 0.0;
  }
  SurfaceDistance r;
  if (np == 0 || ng == 0) return r;
  const Tensor to_g = squared_distance_to(bg, spacing), to_p = squared_distance_to(bp, spacing);
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(np + ng));
  for (std::int64_t i = 0; i < bp.numel(); ++i)
    if (bp.at(i) != 0.0) d.push_back(std::sqrt(to_g.at(i)));
  for (std::int64_t i = 0; i < bg.numel(); ++i)
    if (bg.at(i) != 0.0) d.push_back(std::sqrt(to_p.at(i)));
  r.defined = true;
  double sum = 0.0;
  for (double v : d) sum += v;
  r.msd = sum / static_cast<double>(d.size());
  r.hd95 = percentile(std::move(d), 95.0);
  return r;
}

CaseMetrics segmentation_metrics(const Tensor& pred, const Tensor& gt, const Spacing& spacing,
                                 const std::string& subject_id, Modality modality) {
  require_same(pred, gt, "segmentation_metrics");
  CaseMetrics m;
  m.subject_id = subject_id;
  m.modality = modality;
  for (int cls : {1, 2}) {
    const Tensor p = class_mask(pred, cls), g = class_mask(gt, cls);
    m.classes.push_back({cls, dsc(p, g), surface_distances(p, g, spacing)});
  }
  return m;
}

void write_metrics_report(std::ostream& os, const std::vector<CaseMetrics>& cases) {
  const auto old = os.precision(6);
  os << "subject_id\tmodality\tclass\tdsc\thd95\tmsd\n";
  std::map<int, std::array<std::vector<double>, 3>> agg;
  std::map<int, int> undefined;
  for (const auto& c : cases)
    for (const auto& k : c.classes) {
      os << c.subject_id << '\t' << to_string(c.modality) << '\t' << k.cls << '\t' << k.dsc << '\t';
      agg[k.cls][0].push_back(k.dsc);
      if (k.distance.defined) {
        os << k.distance.hd95 << '\t' << k.distance.msd << '\n';
        agg[k.cls][1].push_back(k.distance.hd95);
        agg[k.cls][2].push_back(k.distance.msd);
      } else {
        os << "undefined\tundefined\n";
        ++undefined[k.cls];
      }
    }
  os << "\n# aggregate: mean +- SD over cases\nclass\tdsc\thd95\tmsd\tundefined_distance_cases\n";
  auto stat = [&](const std::vector<double>& v) {
    if (v.empty()) {
      os << "undefined";
      return;
    }
    double mean = 0.0, var = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    for (double x : v) var += (x - mean) * (x - mean);
    const double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
    os << mean << " +- " << sd;
  };
  for (const auto& [cls, v] : agg) {
    os << cls << '\t';
    stat(v[0]);
    os << '\t';
    stat(v[1]);
    os << '\t';
    stat(v[2]);
    os << '\t' << undefined[cls] << '\n';
  }
  os.precision(old);
}

std::vector<GateStat> gate_statistics(const std::vector<GateTrace>& traces) {
  if (traces.empty()) throw std::invalid_argument("gate statistics: no traces");
  std::vector<GateStat> out;
  for (const auto& t : traces) {
    if (t.lambda_values.empty())
      throw std::invalid_argument("gate statistics: empty trace for stage " + std::to_string(t.stage) + " " +
                                  to_string(t.direction));
    for (double l : t.lambda_values)
      if (!(l >= 0.0 && l <= 1.0)) throw std::domain_error("gate statistics: lambda outside [0, 1]");
    GateStat s;
    s.stage = t.stage;
    s.direction = t.direction;
    s.count = t.lambda_values.size();
    s.median = percentile(t.lambda_values, 50.0);
    s.q25 = percentile(t.lambda_values, 25.0);
    s.q75 = percentile(t.lambda_values, 75.0);
    out.push_back(s);
  }
  return out;
}

void write_gate_table(std::ostream& os, const std::vector<GateStat>& stats) {
  std::map<int, std::map<Direction, const GateStat*>> rows;
  for (const auto& s : stats) rows[s.stage][s.direction] = &s;
  const auto old_flags = os.flags();
  const auto old_prec = os.precision(3);
  os << std::fixed << "stage\tmri_to_ct median [IQR]\tct_to_mri median [IQR]\n";
  for (const auto& [stage, dirs] : rows) {
    os << stage;
    for (Direction d : {Direction::mri_to_ct, Direction::ct_to_mri}) {
      os << '\t';
      auto it = dirs.find(d);
      if (it == dirs.end())
        os << '-';
      else
        os << it->second->median << " [" << it->second->q25 << ", " << it->second->q75 << "]";
    }
    os << '\n';
  }
  os.flags(old_flags);
  os.precision(old_prec);
}

Tensor cam_map(const Tensor& act, const Tensor& grad, CamMethod method) {
  if (act.rank() != 5 || act.dim(0) != 1) throw ShapeError("cam: expected activation [1, K, d, h, w]");
  require_same(act, grad, "cam");
  const std::int64_t K = act.dim(1), n = act.numel() / K;
  Tensor cam({act.dim(2), act.dim(3), act.dim(4)});
  std::vector<double> w(static_cast<std::size_t>(K), 0.0);
  for (std::int64_t k = 0; k < K; ++k) {
    const std::int64_t base = k * n;
    if (method == CamMethod::grad_cam) {
      double s = 0.0;
      for (std::int64_t v = 0; v < n; ++v) s += grad.at(base + v);
      w[k] = s / static_cast<double>(n);
    } else {
      double sum_a = 0.0;
      for (std::int64_t v = 0; v < n; ++v) sum_a += act.at(base + v);
      double s = 0.0;
      for (std::int64_t v = 0; v < n; ++v) {
        const double g = grad.at(base + v);
        if (g == 0.0) continue;
        const double g2 = g * g, g3 = g2 * g;
        const double denom = 2.0 * g2 + sum_a * g3;
        const double alpha = denom != 0.0 ? g2 / denom : 0.0;
        s += alpha * std::max(g, 0.0);
      }
      w[k] = s;
    }
  }
  for (std::int64_t v = 0; v < n; ++v) {
    double s = 0.0;
    for (std::int64_t k = 0; k < K; ++k) s += w[k] * act.at(k * n + v);
    cam.set(v, std::max(s, 0.0));
  }
  return cam;
}

Tensor trilinear_resize(const Tensor& map, const Shape& out) {
  const Grid g = grid_of(map, "trilinear_resize");
  if (out.size() != 3) throw ShapeError("trilinear_resize: output must have 3 dims");
  const std::array<std::int64_t, 3> n{g.x, g.y, g.z};
  Tensor r({out[0], out[1], out[2]});
  auto coord = [&](std::int64_t o, int a, std::int64_t& lo, std::int64_t& hi, double& f) {
    double c = (static_cast<double>(o) + 0.5) * static_cast<double>(n[a]) / static_cast<double>(out[a]) - 0.5;
    c = std::clamp(c, 0.0, static_cast<double>(n[a] - 1));
    lo = static_cast<std::int64_t>(std::floor(c));
    hi = std::min(lo + 1, n[a] - 1);
    f = c - static_cast<double>(lo);
  };
  for (std::int64_t i = 0; i < out[0]; ++i)
    for (std::int64_t j = 0; j < out[1]; ++j)
      for (std::int64_t k = 0; k < out[2]; ++k) {
        std::array<std::int64_t, 3> lo{}, hi{};
        std::array<double, 3> f{};
        coord(i, 0, lo[0], hi[0], f[0]);
        coord(j, 1, lo[1], hi[1], f[1]);
        coord(k, 2, lo[2], hi[2], f[2]);
        double acc = 0.0;
        for (int corner = 0; corner < 8; ++corner) {
          double w = 1.0;
          std::array<std::int64_t, 3> p{};
          for (int a = 0; a < 3; ++a) {
            const bool up = (corner >> a) & 1;
            p[a] = up ? hi[a] : lo[a];
            w *= up ? f[a] : 1.0 - f[a];
          }
          if (w != 0.0) acc += w * map.at(g.at(p[0], p[1], p[2]));
        }
        r.set((i * out[1] + j) * out[2] + k, acc);
      }
  return r;
}

Tensor min_max_normalize(const Tensor& map) {
  double lo = kInf, hi = -kInf;
  for (std::int64_t i = 0; i < map.numel(); ++i) {
    lo = std::min(lo, map.at(i));
    hi = std::max(hi, map.at(i));
  }
  Tensor out(map.shape());
  if (!(hi > lo)) return out;
  for (std::int64_t i = 0; i < map.numel(); ++i) out.set(i, (map.at(i) - lo) / (hi - lo));
  return out;
}

namespace {

Tensor raw_cam_patch(const AqcfNet& net, const Tensor& patch, const SaliencyRequest& req) {
  const bool ct = req.modality == Modality::ct;
  const std::string key = std::string(ct ? "ct." : "mri.") + req.layer;
  const Var x(patch), zero(Tensor(patch.shape(), patch.dtype()));
  ForwardCapture cap;
  const ForwardResult r = ct ? net.forward(x, zero, nullptr, nullptr, &cap) : net.forward(zero, x, nullptr, nullptr, &cap);
  auto it = cap.activations.find(key);
  if (it == cap.activations.end()) throw std::invalid_argument("saliency: unknown layer '" + req.layer + "'");
  const Var& logits = ct ? r.logits_ct : r.logits_mri;
  const std::int64_t C = logits.shape()[1], n = logits.numel() / C;
  if (req.target_class < 0 || req.target_class >= C) throw std::invalid_argument("saliency: target class out of range");
  // select target-class logits where that class wins
  Tensor sel(logits.shape(), logits.dtype());
  for (std::int64_t v = 0; v < n; ++v) {
    std::int64_t best = 0;
    for (std::int64_t c = 1; c < C; ++c)
      if (logits.value().at(c * n + v) > logits.value().at(best * n + v)) best = c;
    if (best == req.target_class) sel.set(req.target_class * n + v, 1.0);
  }
  const Var target = ops::sum(ops::mul(logits, Var(sel)));
  Tensor cam;
  const Var& act = it->second;
  if (act.requires_grad()) {
    backward(target);
    cam = act.has_grad() ? cam_map(act.value().to(DType::f64), act.grad().to(DType::f64), req.method)
                         : Tensor({act.shape()[2], act.shape()[3], act.shape()[4]});
  } else {
    cam = Tensor({act.shape()[2], act.shape()[3], act.shape()[4]});
  }
  for (auto& p : net.parameters()) p.var.zero_grad();
  return trilinear_resize(cam, {patch.dim(2), patch.dim(3), patch.dim(4)});
}

}  // namespace

Tensor saliency_map(const AqcfNet& net, const Tensor& volume, const SaliencyRequest& req) {
  if (req.layer.rfind("dec", 0) != 0 || req.layer.size() != 4 || req.layer[3] < '0' || req.layer[3] > '3')
    throw std::invalid_argument("saliency: unknown layer '" + req.layer + "' (expected dec0 .. dec3)");
  if (volume.rank() != 4 || volume.dim(0) != 1)
    throw ShapeError("saliency: expected volume [1, D, H, W], got " + shape_str(volume.shape()));
  const Shape& patch = net.config().patch;
  const Shape full{volume.dim(1), volume.dim(2), volume.dim(3)};
  const Shape padded{std::max(full[0], patch[0]), std::max(full[1], patch[1]), std::max(full[2], patch[2])};
  const Tensor vol = padded == full ? volume : patch_pad(volume, padded);
  const Grid g{padded[0], padded[1], padded[2]};
  const Tensor gauss = gaussian_importance(patch);
  std::vector<double> acc(static_cast<std::size_t>(g.size()), 0.0), wsum(acc.size(), 0.0);
  for (auto x0 : window_starts(g.x, patch[0], req.overlap))
    for (auto y0 : window_starts(g.y, patch[1], req.overlap))
      for (auto z0 : window_starts(g.z, patch[2], req.overlap)) {
        Tensor p({1, 1, patch[0], patch[1], patch[2]});
        for (std::int64_t i = 0; i < patch[0]; ++i)
          for (std::int64_t j = 0; j < patch[1]; ++j)
            for (std::int64_t k = 0; k < patch[2]; ++k)
              p.set((i * patch[1] + j) * patch[2] + k, vol.at(g.at(x0 + i, y0 + j, z0 + k)));
        const Tensor cam = raw_cam_patch(net, p, req);
        for (std::int64_t i = 0; i < patch[0]; ++i)
          for (std::int64_t j = 0; j < patch[1]; ++j)
            for (std::int64_t k = 0; k < patch[2]; ++k) {
              const std::int64_t local = (i * patch[1] + j) * patch[2] + k, v = g.at(x0 + i, y0 + j, z0 + k);
              acc[v] += gauss.at(local) * cam.at(local);
              wsum[v] += gauss.at(local);
            }
      }
  Tensor blended({full[0], full[1], full[2]});
  for (std::int64_t i = 0; i < full[0]; ++i)
    for (std::int64_t j = 0; j < full[1]; ++j)
      for (std::int64_t k = 0; k < full[2]; ++k) {
        const std::int64_t v = g.at(i, j, k);
        blended.set((i * full[1] + j) * full[2] + k, acc[v] / wsum[v]);
      }
  return min_max_normalize(blended);
}

SaliencyReport saliency_alignment(const Tensor& saliency, const Tensor& tumor, const Spacing& spacing, double band_mm,
                                  double threshold) {
  require_same(saliency, tumor, "saliency_alignment");
  SaliencyReport r;
  std::int64_t tumor_voxels = 0;
  for (std::int64_t i = 0; i < tumor.numel(); ++i) tumor_voxels += tumor.at(i) != 0.0;
  if (tumor_voxels == 0) return r;
  r.defined = true;
  const Tensor dist = distance_to(mask_border(tumor), spacing);
  std::int64_t inter = 0, uni = 0, band = 0, band_hit = 0;
  double peak = -kInf;
  for (std::int64_t i = 0; i < saliency.numel(); ++i) {
    const double s = saliency.at(i);
    const bool on = s >= threshold, t = tumor.at(i) != 0.0;
    inter += on && t;
    uni += on || t;
    if (dist.at(i) <= band_mm) {
      ++band;
      band_hit += on;
    }
    if (s > peak) {
      peak = s;
      r.peak_index = i;
    }
  }
  r.iou = static_cast<double>(inter) / static_cast<double>(uni);
  r.band_coverage = band ? static_cast<double>(band_hit) / static_cast<double>(band) : 0.0;
  r.pointing_hit = tumor.at(r.peak_index) != 0.0;
  return r;
}

double mean_foreground_dice(const AqcfNet& net, const std::vector<VolumeSample>& samples, const InferenceConfig& cfg) {
  if (samples.empty()) throw std::invalid_argument("mean_foreground_dice: no samples");
  double total = 0.0;
  for (const auto& s : samples) {
    const Tensor pred = argmax_labels(sliding_window_infer(net, s.image, cfg));
    for (int cls : {1, 2}) total += dsc(class_mask(pred, cls), class_mask(s.label, cls));
  }
  return total / (2.0 * static_cast<double>(samples.size()));
}

}  // namespace aqcf
