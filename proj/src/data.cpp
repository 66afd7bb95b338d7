#include "aqcf/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace aqcf {

namespace {

struct Grid {
  std::int64_t x, y, z;
  std::int64_t at(std::int64_t i, std::int64_t j, std::int64_t k) const { return (i * y + j) * z + k; }
  std::int64_t size() const { return x * y * z; }
};

Grid grid3(const Tensor& t, const char* what) {
  if (t.rank() != 3) throw ShapeError(std::string(what) + ": expected a 3-D volume, got " + shape_str(t.shape()));
  return {t.dim(0), t.dim(1), t.dim(2)};
}

Tensor spatial(const Tensor& image) {
  if (image.rank() == 4 && image.dim(0) == 1) return image.reshaped({image.dim(1), image.dim(2), image.dim(3)});
  return image;
}

Tensor with_channel(const Tensor& volume) {
  return volume.reshaped({1, volume.dim(0), volume.dim(1), volume.dim(2)});
}

double round_half_up(double v) { return std::floor(v + 0.5); }

}  // namespace

std::string to_string(Modality m) { return m == Modality::ct ? "ct" : "mri"; }

Modality modality_from_string(const std::string& s) {
  std::string l = s;
  std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return std::tolower(c); });
  if (l == "ct") return Modality::ct;
  if (l == "mri" || l == "mr") return Modality::mri;
  throw std::invalid_argument("unknown modality '" + s + "' (expected ct or mri)");
}

std::array<double, 2> intensity_window(Modality m) {
  return m == Modality::ct ? std::array<double, 2>{-16.0, 176.0} : std::array<double, 2>{74.0, 511.0};
}

Tensor normalize_intensity(const Tensor& raw, Modality m) {
  const auto [lo, hi] = intensity_window(m);
  Tensor out(raw.shape(), raw.dtype());
  for (std::int64_t i = 0; i < raw.numel(); ++i)
    out.set(i, std::clamp((raw.at(i) - lo) / (hi - lo), 0.0, 1.0));
  return out;
}

std::int64_t resampled_extent(std::int64_t n, double spacing) {
  return std::max<std::int64_t>(1, static_cast<std::int64_t>(round_half_up(static_cast<double>(n) * spacing)));
}

namespace {

template <class Sampler>
Tensor resample(const Tensor& v, const Spacing& sp, Sampler&& sample) {
  const Grid g = grid3(v, "resample");
  for (double s : sp)
    if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("resample: voxel spacing missing or invalid");
  const Grid o{resampled_extent(g.x, sp[0]), resampled_extent(g.y, sp[1]), resampled_extent(g.z, sp[2])};
  Tensor out({o.x, o.y, o.z}, v.dtype());
  for (std::int64_t i = 0; i < o.x; ++i)
    for (std::int64_t j = 0; j < o.y; ++j)
      for (std::int64_t k = 0; k < o.z; ++k) {
        const std::array<double, 3> c{std::min(i / sp[0], static_cast<double>(g.x - 1)),
                                      std::min(j / sp[1], static_cast<double>(g.y - 1)),
                                      std::min(k / sp[2], static_cast<double>(g.z - 1))};
        out.set(o.at(i, j, k), sample(g, c));
      }
  return out;
}

}  // namespace

Tensor resample_trilinear(const Tensor& v, const Spacing& sp) {
  return resample(v, sp, [&](const Grid& g, const std::array<double, 3>& c) {
    const std::array<std::int64_t, 3> n{g.x, g.y, g.z};
    std::array<std::int64_t, 3> lo{}, hi{};
    std::array<double, 3> f{};
    for (int a = 0; a < 3; ++a) {
      lo[a] = static_cast<std::int64_t>(std::floor(c[a]));
      hi[a] = std::min(lo[a] + 1, n[a] - 1);
      f[a] = c[a] - static_cast<double>(lo[a]);
    }
    double acc = 0.0;
    for (int corner = 0; corner < 8; ++corner) {
      double w = 1.0;
      std::array<std::int64_t, 3> idx{};
      for (int a = 0; a < 3; ++a) {
        const bool up = (corner >> a) & 1;
        idx[a] = up ? hi[a] : lo[a];
        w *= up ? f[a] : 1.0 - f[a];
      }
      if (w != 0.0) acc += w * v.at(g.at(idx[0], idx[1], idx[2]));
    }
    return acc;
  });
}

Tensor resample_nearest(const Tensor& v, const Spacing& sp) {
  return resample(v, sp, [&](const Grid& g, const std::array<double, 3>& c) {
    const std::array<std::int64_t, 3> n{g.x, g.y, g.z};
    std::array<std::int64_t, 3> idx{};
    for (int a = 0; a < 3; ++a) idx[a] = std::min(static_cast<std::int64_t>(round_half_up(c[a])), n[a] - 1);
    return v.at(g.at(idx[0], idx[1], idx[2]));
  });
}

Tensor pad_to_multiple(const Tensor& v, std::int64_t multiple, double value) {
  const Grid g = grid3(v, "pad_to_multiple");
  auto up = [&](std::int64_t n) { return (n + multiple - 1) / multiple * multiple; };
  const Grid o{up(g.x), up(g.y), up(g.z)};
  if (o.x == g.x && o.y == g.y && o.z == g.z) return v;
  Tensor out = Tensor::full({o.x, o.y, o.z}, value, v.dtype());
  for (std::int64_t i = 0; i < g.x; ++i)
    for (std::int64_t j = 0; j < g.y; ++j)
      for (std::int64_t k = 0; k < g.z; ++k) out.set(o.at(i, j, k), v.at(g.at(i, j, k)));
  return out;
}

Box foreground_box(const Tensor& v, std::int64_t margin) {
  const Grid g = grid3(v, "foreground_box");
  Box b;
  b.lo = {g.x, g.y, g.z};
  b.hi = {0, 0, 0};
  bool any = false;
  for (std::int64_t i = 0; i < g.x; ++i)
    for (std::int64_t j = 0; j < g.y; ++j)
      for (std::int64_t k = 0; k < g.z; ++k)
        if (v.at(g.at(i, j, k)) != 0.0) {
          any = true;
          const std::array<std::int64_t, 3> p{i, j, k};
          for (int a = 0; a < 3; ++a) {
            b.lo[a] = std::min(b.lo[a], p[a]);
            b.hi[a] = std::max(b.hi[a], p[a] + 1);
          }
        }
  if (!any) throw std::invalid_argument("preprocess: degenerate volume, no nonzero foreground");
  const std::array<std::int64_t, 3> n{g.x, g.y, g.z};
  for (int a = 0; a < 3; ++a) {
    b.lo[a] = std::max<std::int64_t>(0, b.lo[a] - margin);
    b.hi[a] = std::min(n[a], b.hi[a] + margin);
  }
  return b;
}

Tensor crop_box(const Tensor& v, const Box& b) {
  const Grid g = grid3(v, "crop_box");
  const Grid o{b.hi[0] - b.lo[0], b.hi[1] - b.lo[1], b.hi[2] - b.lo[2]};
  Tensor out({o.x, o.y, o.z}, v.dtype());
  for (std::int64_t i = 0; i < o.x; ++i)
    for (std::int64_t j = 0; j < o.y; ++j)
      for (std::int64_t k = 0; k < o.z; ++k)
        out.set(o.at(i, j, k), v.at(g.at(i + b.lo[0], j + b.lo[1], k + b.lo[2])));
  return out;
}

VolumeSample preprocess(const RawVolume& vol) {
  Tensor image = resample_trilinear(vol.image, vol.spacing);
  Tensor label = vol.label.empty() ? Tensor(image.shape()) : resample_nearest(vol.label, vol.spacing);
  if (label.shape() != image.shape())
    throw ShapeError("preprocess: label grid " + shape_str(vol.label.shape()) + " does not match image grid " +
                     shape_str(vol.image.shape()));
  const Box box = foreground_box(image, 4);
  image = normalize_intensity(crop_box(image, box), vol.modality);
  label = crop_box(label, box);
  VolumeSample s;
  s.image = with_channel(pad_to_multiple(image, 16));
  s.label = pad_to_multiple(label, 16);
  s.modality = vol.modality;
  s.spacing = {1.0, 1.0, 1.0};
  s.subject_id = vol.subject_id;
  return s;
}

VolumeSample flip(const VolumeSample& s, int axis) {
  const Tensor img = spatial(s.image);
  const Grid g = grid3(img, "flip");
  VolumeSample out = s;
  Tensor im(img.shape(), img.dtype()), lb(s.label.shape(), s.label.dtype());
  for (std::int64_t i = 0; i < g.x; ++i)
    for (std::int64_t j = 0; j < g.y; ++j)
      for (std::int64_t k = 0; k < g.z; ++k) {
        std::array<std::int64_t, 3> p{i, j, k};
        const std::array<std::int64_t, 3> n{g.x, g.y, g.z};
        p[axis] = n[axis] - 1 - p[axis];
        const std::int64_t dst = g.at(i, j, k), src = g.at(p[0], p[1], p[2]);
        im.set(dst, img.at(src));
        lb.set(dst, s.label.at(src));
      }
  out.image = with_channel(im);
  out.label = lb;
  return out;
}

VolumeSample rotate90(const VolumeSample& s, int k) {
  k = ((k % 4) + 4) % 4;
  VolumeSample out = s;
  for (int r = 0; r < k; ++r) {
    const Tensor img = spatial(out.image);
    const Grid g = grid3(img, "rotate90");
    const Grid o{g.y, g.x, g.z};
    Tensor im({o.x, o.y, o.z}, img.dtype()), lb({o.x, o.y, o.z}, out.label.dtype());
    // (i, j) -> (j, X - 1 - i)
    for (std::int64_t i = 0; i < g.x; ++i)
      for (std::int64_t j = 0; j < g.y; ++j)
        for (std::int64_t z = 0; z < g.z; ++z) {
          const std::int64_t dst = o.at(j, g.x - 1 - i, z), src = g.at(i, j, z);
          im.set(dst, img.at(src));
          lb.set(dst, out.label.at(src));
        }
    out.image = with_channel(im);
    out.label = lb;
    std::swap(out.spacing[0], out.spacing[1]);
  }
  return out;
}

VolumeSample augment(const VolumeSample& s, Rng& rng, const AugmentConfig& cfg) {
  VolumeSample out = s;
  for (int axis = 0; axis < 3; ++axis)
    if (rng.bernoulli(cfg.flip_probability)) out = flip(out, axis);
  if (cfg.rotate) {
    const int k = static_cast<int>(rng.below(4));
    if (k) out = rotate90(out, k);
  }
  if (cfg.intensity_shift > 0.0) {
    const double delta = rng.uniform(-cfg.intensity_shift, cfg.intensity_shift);
    for (std::int64_t i = 0; i < out.image.numel(); ++i)
      out.image.set(i, std::clamp(out.image.at(i) + delta, 0.0, 1.0));
  }
  return out;
}

VolumeSample sample_patch(const VolumeSample& s, const Shape& patch, Rng& rng, double fg_prob) {
  if (patch.size() != 3) throw ShapeError("sample_patch: patch must have 3 dims");
  Tensor img = spatial(s.image), lab = s.label;
  Grid g = grid3(img, "sample_patch");
  if (g.x < patch[0] || g.y < patch[1] || g.z < patch[2]) {
    const Grid o{std::max(g.x, patch[0]), std::max(g.y, patch[1]), std::max(g.z, patch[2])};
    Tensor pi({o.x, o.y, o.z}, img.dtype()), pl({o.x, o.y, o.z}, lab.dtype());
    for (std::int64_t i = 0; i < g.x; ++i)
      for (std::int64_t j = 0; j < g.y; ++j)
        for (std::int64_t k = 0; k < g.z; ++k) {
          pi.set(o.at(i, j, k), img.at(g.at(i, j, k)));
          pl.set(o.at(i, j, k), lab.at(g.at(i, j, k)));
        }
    img = std::move(pi);
    lab = std::move(pl);
    g = o;
  }
  std::array<std::int64_t, 3> center{};
  std::vector<std::int64_t> fg;
  const bool want_fg = rng.bernoulli(fg_prob);
  if (want_fg)
    for (std::int64_t i = 0; i < lab.numel(); ++i)
      if (lab.at(i) > 0.0) fg.push_back(i);
  if (!fg.empty()) {
    const std::int64_t v = fg[rng.below(fg.size())];
    center = {v / (g.y * g.z), (v / g.z) % g.y, v % g.z};
  } else {
    center = {static_cast<std::int64_t>(rng.below(g.x)), static_cast<std::int64_t>(rng.below(g.y)),
              static_cast<std::int64_t>(rng.below(g.z))};
  }
  const std::array<std::int64_t, 3> n{g.x, g.y, g.z};
  Box b;
  for (int a = 0; a < 3; ++a) {
    b.lo[a] = std::clamp<std::int64_t>(center[a] - patch[a] / 2, 0, n[a] - patch[a]);
    b.hi[a] = b.lo[a] + patch[a];
  }
  VolumeSample out = s;
  out.image = with_channel(crop_box(img, b));
  out.label = crop_box(lab, b);
  return out;
}

VolumeSample draw_sample(const VolumeSample& subject, Rng& rng, const SamplerConfig& cfg) {
  VolumeSample s = cfg.augment ? augment(subject, rng, cfg.augment_cfg) : subject;
  return sample_patch(s, cfg.patch, rng, cfg.foreground_probability);
}

UnpairedBatch next_unpaired_batch(const std::vector<VolumeSample>& ct_pool, const std::vector<VolumeSample>& mri_pool,
                                  Rng& ct_rng, Rng& mri_rng, const SamplerConfig& cfg) {
  if (ct_pool.empty() || mri_pool.empty()) throw std::invalid_argument("next_unpaired_batch: empty cohort");
  UnpairedBatch b;
  b.ct_index = ct_rng.below(ct_pool.size());
  b.ct = draw_sample(ct_pool[b.ct_index], ct_rng, cfg);
  b.mri_index = mri_rng.below(mri_pool.size());
  b.mri = draw_sample(mri_pool[b.mri_index], mri_rng, cfg);
  return b;
}

namespace {

// Separable box blur repeated `passes` times, clamped borders.
void blur(std::vector<double>& v, const Grid& g, int radius, int passes) {
  std::vector<double> tmp(v.size());
  const std::array<std::int64_t, 3> n{g.x, g.y, g.z};
  for (int p = 0; p < passes; ++p)
    for (int axis = 0; axis < 3; ++axis) {
      for (std::int64_t i = 0; i < g.x; ++i)
        for (std::int64_t j = 0; j < g.y; ++j)
          for (std::int64_t k = 0; k < g.z; ++k) {
            double acc = 0.0;
            for (int d = -radius; d <= radius; ++d) {
              std::array<std::int64_t, 3> q{i, j, k};
              q[axis] = std::clamp<std::int64_t>(q[axis] + d, 0, n[axis] - 1);
              acc += v[g.at(q[0], q[1], q[2])];
            }
            tmp[g.at(i, j, k)] = acc / (2 * radius + 1);
          }
      v.swap(tmp);
    }
}

}  // namespace

RawVolume generate_phantom(const PhantomSpec& spec) {
  if (spec.size.size() != 3) throw std::invalid_argument("phantom: size must have 3 dims");
  const double min_radius = *std::min_element(spec.liver_radii.begin(), spec.liver_radii.end());
  if (spec.tumor_count < 0 || spec.tumor_radius[0] <= 0 || spec.tumor_radius[1] < spec.tumor_radius[0])
    throw std::invalid_argument("phantom: invalid tumour spec");
  if (spec.tumor_count > 0 && spec.tumor_radius[1] >= min_radius)
    throw std::invalid_argument("phantom: tumour radius exceeds the liver's smallest semi-axis");
  const Grid g{spec.size[0], spec.size[1], spec.size[2]};
  const std::array<std::int64_t, 3> n{g.x, g.y, g.z};
  std::array<double, 3> c{};
  for (int a = 0; a < 3; ++a) {
    c[a] = spec.liver_center[a] * static_cast<double>(n[a] - 1);
    if (c[a] - spec.liver_radii[a] < 0 || c[a] + spec.liver_radii[a] > static_cast<double>(n[a] - 1))
      throw std::invalid_argument("phantom: liver exceeds the volume");
  }
  Rng rng(spec.seed);
  Rng geom = rng.substream(1), noise = rng.substream(2);

  std::vector<double> label(static_cast<std::size_t>(g.size()), 0.0);
  auto in_liver = [&](double i, double j, double k) {
    const double a = (i - c[0]) / spec.liver_radii[0], b = (j - c[1]) / spec.liver_radii[1],
                 d = (k - c[2]) / spec.liver_radii[2];
    return a * a + b * b + d * d <= 1.0;
  };
  for (std::int64_t i = 0; i < g.x; ++i)
    for (std::int64_t j = 0; j < g.y; ++j)
      for (std::int64_t k = 0; k < g.z; ++k)
        if (in_liver(i, j, k)) label[g.at(i, j, k)] = 1.0;

  for (int t = 0; t < spec.tumor_count; ++t) {
    const double r = geom.uniform(spec.tumor_radius[0], spec.tumor_radius[1]);
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      std::array<double, 3> p{};
      for (int a = 0; a < 3; ++a) p[a] = c[a] + geom.uniform(-1.0, 1.0) * (spec.liver_radii[a] - r);
      // every voxel of the sphere must already be liver
      bool inside = true;
      std::vector<std::int64_t> voxels;
      for (std::int64_t i = static_cast<std::int64_t>(std::floor(p[0] - r)); i <= p[0] + r && inside; ++i)
        for (std::int64_t j = static_cast<std::int64_t>(std::floor(p[1] - r)); j <= p[1] + r && inside; ++j)
          for (std::int64_t k = static_cast<std::int64_t>(std::floor(p[2] - r)); k <= p[2] + r && inside; ++k) {
            const double di = i - p[0], dj = j - p[1], dk = k - p[2];
            if (di * di + dj * dj + dk * dk > r * r) continue;
            if (i < 0 || j < 0 || k < 0 || i >= g.x || j >= g.y || k >= g.z || label[g.at(i, j, k)] == 0.0)
              inside = false;
            else
              voxels.push_back(g.at(i, j, k));
          }
      if (inside && !voxels.empty()) {
        for (auto v : voxels) label[v] = 2.0;
        placed = true;
      }
    }
    if (!placed) throw std::invalid_argument("phantom: could not place a tumour inside the liver");
  }

  std::vector<double> img(label.size());
  if (spec.modality == Modality::ct) {
    for (std::size_t v = 0; v < img.size(); ++v) {
      const double base = label[v] == 2.0 ? 40.0 : label[v] == 1.0 ? 120.0 : -40.0;
      img[v] = base + 10.0 * noise.normal();
    }
  } else {
    for (std::size_t v = 0; v < img.size(); ++v) img[v] = label[v] == 2.0 ? 440.0 : label[v] == 1.0 ? 300.0 : 100.0;
    blur(img, g, 1, 2);
    std::vector<double> tex(img.size());
    for (auto& t : tex) t = noise.normal();
    blur(tex, g, 1, 1);
    const double phase = noise.uniform(0.0, 6.283185307179586);
    for (std::int64_t i = 0; i < g.x; ++i)
      for (std::int64_t j = 0; j < g.y; ++j)
        for (std::int64_t k = 0; k < g.z; ++k) {
          const std::int64_t v = g.at(i, j, k);
          const double field = 1.0 + 0.12 * std::sin(phase + 2.0 * i / g.x + 1.5 * j / g.y + 0.5 * k / g.z);
          img[v] = img[v] * field + 25.0 * tex[v];
        }
  }
  RawVolume out;
  out.image = Tensor::from({g.x, g.y, g.z}, img);
  out.label = Tensor::from({g.x, g.y, g.z}, label);
  out.modality = spec.modality;
  out.subject_id = (spec.modality == Modality::ct ? "ct-phantom-" : "mri-phantom-") + std::to_string(spec.seed);
  return out;
}

double boundary_gradient(const Tensor& image, const Tensor& label) {
  const Tensor img = spatial(image);
  const Grid g = grid3(img, "boundary_gradient");
  auto at = [&](const Tensor& t, std::int64_t i, std::int64_t j, std::int64_t k) {
    return t.at(g.at(std::clamp<std::int64_t>(i, 0, g.x - 1), std::clamp<std::int64_t>(j, 0, g.y - 1),
                     std::clamp<std::int64_t>(k, 0, g.z - 1)));
  };
  double total = 0.0;
  std::int64_t count = 0;
  for (std::int64_t i = 0; i < g.x; ++i)
    for (std::int64_t j = 0; j < g.y; ++j)
      for (std::int64_t k = 0; k < g.z; ++k) {
        const bool liver = at(label, i, j, k) > 0;
        bool edge = false;
        for (int d = 0; d < 3 && !edge; ++d)
          for (int s : {-1, 1}) {
            std::array<std::int64_t, 3> q{i, j, k};
            q[d] += s;
            if ((at(label, q[0], q[1], q[2]) > 0) != liver) edge = true;
          }
        if (!edge) continue;
        // 3-D Sobel: derivative along one axis, smoothing (1, 2, 1) along the others
        double mag2 = 0.0;
        for (int axis = 0; axis < 3; ++axis) {
          double gsum = 0.0;
          for (int u = -1; u <= 1; ++u)
            for (int w = -1; w <= 1; ++w) {
              const double sw = (u == 0 ? 2.0 : 1.0) * (w == 0 ? 2.0 : 1.0);
              std::array<std::int64_t, 3> p{i, j, k}, m{i, j, k};
              const int o1 = (axis + 1) % 3, o2 = (axis + 2) % 3;
              p[axis] += 1;
              m[axis] -= 1;
              p[o1] += u;
              m[o1] += u;
              p[o2] += w;
              m[o2] += w;
              gsum += sw * (at(img, p[0], p[1], p[2]) - at(img, m[0], m[1], m[2]));
            }
          mag2 += gsum * gsum;
        }
        total += std::sqrt(mag2);
        ++count;
      }
  return count ? total / static_cast<double>(count) : 0.0;
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("manifest: cannot open '" + path + "'");
  const std::filesystem::path base = std::filesystem::path(path).parent_path();
  auto resolve = [&](const std::string& p) {
    if (p.empty() || p == "-") return std::string();
    std::filesystem::path fp(p);
    return (fp.is_absolute() ? fp : base / fp).string();
  };
  std::vector<ManifestEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (cols.size() == 4 && cols[0] == "subject_id") continue;
    if (cols.size() != 4)
      throw std::runtime_error("manifest " + path + ":" + std::to_string(lineno) +
                               ": expected 4 tab-separated columns (subject_id, image, label, modality)");
    out.push_back({cols[0], resolve(cols[1]), resolve(cols[2]), modality_from_string(cols[3])});
  }
  return out;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("manifest: cannot open '" + path + "' for writing");
  os << "subject_id\timage\tlabel\tmodality\n";
  for (const auto& e : entries)
    os << e.subject_id << '\t' << e.image_path << '\t' << (e.label_path.empty() ? "-" : e.label_path) << '\t'
       << to_string(e.modality) << '\n';
}

}  // namespace aqcf
