#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "aqcf/data.hpp"
#include "aqcf/nifti.hpp"
#include "doctest.h"

using namespace aqcf;

namespace {

std::int64_t idx3(const Tensor& t, std::int64_t i, std::int64_t j, std::int64_t k) {
  return (i * t.dim(1) + j) * t.dim(2) + k;
}

std::map<double, std::int64_t> class_counts(const Tensor& label) {
  std::map<double, std::int64_t> c;
  for (std::int64_t i = 0; i < label.numel(); ++i) ++c[label.at(i)];
  return c;
}

VolumeSample random_sample(const Shape& s, std::uint64_t seed) {
  Rng rng(seed);
  VolumeSample v;
  v.image = Tensor({1, s[0], s[1], s[2]});
  v.label = Tensor({s[0], s[1], s[2]});
  for (std::int64_t i = 0; i < v.label.numel(); ++i) {
    v.image.set(i, rng.uniform());
    v.label.set(i, static_cast<double>(rng.below(3)));
  }
  v.subject_id = "s" + std::to_string(seed);
  return v;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("aqcf_test_data_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("intensity normalisation windows") {
  const Tensor ct = normalize_intensity(Tensor::from({4}, {-16, 176, 80, -1000}), Modality::ct);
  CHECK(ct.at(0) == 0.0);
  CHECK(ct.at(1) == 1.0);
  CHECK(ct.at(2) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(ct.at(3) == 0.0);
  const Tensor mr = normalize_intensity(Tensor::from({4}, {74, 511, 292.5, 9000}), Modality::mri);
  CHECK(mr.at(0) == 0.0);
  CHECK(mr.at(1) == 1.0);
  CHECK(mr.at(2) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(mr.at(3) == 1.0);
  CHECK(modality_from_string("MRI") == Modality::mri);
  CHECK_THROWS(modality_from_string("pet"));
}

TEST_CASE("resampling a linear ramp at 2 mm spacing") {
  const std::int64_t X = 5, Y = 4, Z = 3;
  Tensor ramp({X, Y, Z});
  auto f = [](double x, double y, double z) { return x + 10 * y + 100 * z; };
  for (std::int64_t i = 0; i < X; ++i)
    for (std::int64_t j = 0; j < Y; ++j)
      for (std::int64_t k = 0; k < Z; ++k) ramp.set(idx3(ramp, i, j, k), f(i, j, k));
  const Tensor out = resample_trilinear(ramp, {2.0, 2.0, 2.0});
  REQUIRE(out.shape() == Shape{10, 8, 6});
  // trilinear interpolation reproduces a linear function exactly inside the grid
  for (std::int64_t i = 0; i < 10; ++i)
    for (std::int64_t j = 0; j < 8; ++j)
      for (std::int64_t k = 0; k < 6; ++k) {
        const double x = std::min(i / 2.0, X - 1.0), y = std::min(j / 2.0, Y - 1.0), z = std::min(k / 2.0, Z - 1.0);
        CHECK(out.at(idx3(out, i, j, k)) == doctest::Approx(f(x, y, z)).epsilon(1e-14));
      }
  CHECK(resampled_extent(3, 1.5) == 5);
  CHECK(resampled_extent(5, 0.7) == 4);
  CHECK(resampled_extent(10, 0.25) == 3);
  CHECK_THROWS(resample_trilinear(ramp, {0.0, 1.0, 1.0}));
}

TEST_CASE("label resampling stays in the label set") {
  Rng rng(3);
  Tensor lab({6, 5, 4});
  for (std::int64_t i = 0; i < lab.numel(); ++i) lab.set(i, static_cast<double>(rng.below(3)));
  for (Spacing sp : {Spacing{0.7, 1.3, 2.5}, Spacing{2, 2, 2}, Spacing{0.5, 0.5, 3}}) {
    const Tensor r = resample_nearest(lab, sp);
    for (std::int64_t i = 0; i < r.numel(); ++i) {
      const double v = r.at(i);
      CHECK((v == 0.0 || v == 1.0 || v == 2.0));
    }
  }
}

TEST_CASE("preprocess is a fixed point on a tight isotropic volume") {
  Rng rng(5);
  RawVolume raw;
  raw.modality = Modality::ct;
  raw.image = Tensor({16, 16, 32});
  raw.label = Tensor({16, 16, 32});
  for (std::int64_t i = 0; i < raw.image.numel(); ++i) raw.image.set(i, rng.uniform(1.0, 200.0));
  const VolumeSample s = preprocess(raw);
  REQUIRE(s.image.shape() == Shape{1, 16, 16, 32});
  const Tensor expect = normalize_intensity(raw.image, Modality::ct);
  for (std::int64_t i = 0; i < expect.numel(); ++i) CHECK(s.image.at(i) == expect.at(i));
}

TEST_CASE("preprocess crops, pads and rejects bad input") {
  RawVolume raw;
  raw.modality = Modality::mri;
  raw.image = Tensor({40, 40, 20});
  raw.label = Tensor({40, 40, 20});
  for (std::int64_t i = 10; i < 20; ++i)
    for (std::int64_t j = 12; j < 30; ++j)
      for (std::int64_t k = 5; k < 8; ++k) {
        raw.image.set(idx3(raw.image, i, j, k), 300.0);
        raw.label.set(idx3(raw.label, i, j, k), 1.0);
      }
  const VolumeSample s = preprocess(raw);
  // box 10x18x3 grown by 4 on each side -> 18x26x11, padded to multiples of 16
  CHECK(s.image.shape() == Shape{1, 32, 32, 16});
  CHECK(s.label.shape() == Shape{32, 32, 16});
  CHECK(class_counts(s.label)[1.0] == 10 * 18 * 3);
  for (std::int64_t i = 0; i < s.image.numel(); ++i) CHECK((s.image.at(i) >= 0.0 && s.image.at(i) <= 1.0));

  RawVolume empty;
  empty.image = Tensor({8, 8, 8});
  CHECK_THROWS(preprocess(empty));
  raw.spacing = {1.0, std::nan(""), 1.0};
  CHECK_THROWS(preprocess(raw));
}

TEST_CASE("augmentation paths") {
  const VolumeSample s = random_sample({6, 6, 4}, 11);
  Rng rng(1);
  const AugmentConfig off{0.0, false, 0.0};
  const VolumeSample same = augment(s, rng, off);
  CHECK(same.image.same_values(s.image));
  CHECK(same.label.same_values(s.label));

  for (int axis = 0; axis < 3; ++axis) {
    const VolumeSample twice = flip(flip(s, axis), axis);
    CHECK(twice.image.same_values(s.image));
    CHECK(twice.label.same_values(s.label));
  }
  CHECK(rotate90(s, 4).image.same_values(s.image));
  CHECK(rotate90(rotate90(s, 1), 3).label.same_values(s.label));

  const VolumeSample r = rotate90(s, 1);
  // (i, j) -> (j, X - 1 - i)
  const Tensor in = s.label, out = r.label;
  for (std::int64_t i = 0; i < 6; ++i)
    for (std::int64_t j = 0; j < 6; ++j) CHECK(out.at(idx3(out, j, 5 - i, 2)) == in.at(idx3(in, i, j, 2)));

  const auto counts = class_counts(s.label);
  Rng arng(9);
  for (int t = 0; t < 20; ++t) {
    const VolumeSample a = augment(s, arng);
    CHECK(class_counts(a.label) == counts);
    for (std::int64_t i = 0; i < a.image.numel(); ++i) CHECK((a.image.at(i) >= 0.0 && a.image.at(i) <= 1.0));
  }
}

TEST_CASE("rotation acts on a non-square plane") {
  const VolumeSample s = random_sample({6, 4, 2}, 12);
  const VolumeSample r = rotate90(s, 1);
  CHECK(r.image.shape() == Shape{1, 4, 6, 2});
  CHECK(r.label.shape() == Shape{4, 6, 2});
  CHECK(class_counts(r.label) == class_counts(s.label));
}

TEST_CASE("patch sampling shapes and padding") {
  const VolumeSample small = random_sample({5, 6, 3}, 13);
  Rng rng(2);
  const VolumeSample p = sample_patch(small, {8, 8, 4}, rng);
  CHECK(p.image.shape() == Shape{1, 8, 8, 4});
  CHECK(p.label.shape() == Shape{8, 8, 4});
  // only one placement exists, the original sits at the origin
  CHECK(p.image.at(0) == small.image.at(0));
  CHECK(p.image.at(idx3(p.label, 7, 7, 3)) == 0.0);

  const VolumeSample big = random_sample({20, 18, 9}, 14);
  for (int t = 0; t < 50; ++t) {
    const VolumeSample q = sample_patch(big, {8, 6, 4}, rng);
    CHECK(q.image.shape() == Shape{1, 8, 6, 4});
  }

  VolumeSample bg = random_sample({10, 10, 10}, 15);
  bg.label.fill(0.0);
  CHECK(sample_patch(bg, {4, 4, 4}, rng, 1.0).label.shape() == Shape{4, 4, 4});
}

TEST_CASE("foreground bias reaches a single tumour voxel") {
  VolumeSample s;
  s.image = Tensor({1, 64, 64, 16});
  s.label = Tensor({64, 64, 16});
  const std::int64_t ti = 5, tj = 50, tk = 3;
  s.label.set(idx3(s.label, ti, tj, tk), 2.0);
  Rng rng(2024);
  const int draws = 10000;
  int hits = 0;
  const Shape patch{32, 32, 16};
  for (int t = 0; t < draws; ++t) {
    const VolumeSample p = sample_patch(s, patch, rng);
    hits += class_counts(p.label).count(2.0) > 0;
  }
  const double rate = static_cast<double>(hits) / draws;
  MESSAGE("foreground hit rate ", rate);
  CHECK(rate >= 0.6);
  // always-foreground lower bound is 2/3 minus three binomial standard deviations
  CHECK(rate >= 2.0 / 3.0 - 3.0 * std::sqrt((2.0 / 3.0) * (1.0 / 3.0) / draws));
}

TEST_CASE("unpaired batch indices are independent and uniform") {
  std::vector<VolumeSample> ct, mri;
  for (int i = 0; i < 3; ++i) {
    ct.push_back(random_sample({4, 4, 4}, 100 + i));
    mri.push_back(random_sample({4, 4, 4}, 200 + i));
    mri.back().modality = Modality::mri;
  }
  SamplerConfig cfg;
  cfg.patch = {4, 4, 4};
  cfg.augment = false;
  Rng root(7);
  Rng ct_rng = root.substream(1), mri_rng = root.substream(2);
  const int n = 9000;
  std::array<std::array<int, 3>, 3> counts{};
  for (int t = 0; t < n; ++t) {
    const UnpairedBatch b = next_unpaired_batch(ct, mri, ct_rng, mri_rng, cfg);
    CHECK(b.ct.modality == Modality::ct);
    CHECK(b.mri.modality == Modality::mri);
    ++counts[b.ct_index][b.mri_index];
  }
  double chi2 = 0.0;
  const double expect = n / 9.0;
  for (auto& row : counts)
    for (int c : row) chi2 += (c - expect) * (c - expect) / expect;
  MESSAGE("chi2 (8 dof) = ", chi2);
  CHECK(chi2 < 26.12);  // p = 0.001

  std::vector<VolumeSample> one_ct{ct[0]}, one_mri{mri[1]};
  cfg.augment = true;
  const UnpairedBatch a = next_unpaired_batch(one_ct, one_mri, ct_rng, mri_rng, cfg);
  CHECK(a.ct.subject_id == ct[0].subject_id);
  CHECK(a.mri.subject_id == mri[1].subject_id);
  CHECK_THROWS(next_unpaired_batch({}, one_mri, ct_rng, mri_rng, cfg));
}

TEST_CASE("the MRI draw does not depend on the CT stream") {
  std::vector<VolumeSample> ct{random_sample({12, 12, 8}, 1), random_sample({12, 12, 8}, 2)};
  std::vector<VolumeSample> mri{random_sample({12, 12, 8}, 3), random_sample({12, 12, 8}, 4)};
  SamplerConfig cfg;
  cfg.patch = {8, 8, 4};
  Rng ct_a(10), ct_b(99), mri_a(5), mri_b(5);
  for (int t = 0; t < 10; ++t) {
    const UnpairedBatch a = next_unpaired_batch(ct, mri, ct_a, mri_a, cfg);
    const UnpairedBatch b = next_unpaired_batch(ct, mri, ct_b, mri_b, cfg);
    CHECK(a.mri_index == b.mri_index);
    CHECK(a.mri.image.same_values(b.mri.image));
    CHECK(a.mri.label.same_values(b.mri.label));
  }
}

TEST_CASE("phantom construction") {
  PhantomSpec spec;
  spec.seed = 42;
  const RawVolume a = generate_phantom(spec), b = generate_phantom(spec);
  CHECK(a.image.same_values(b.image));
  CHECK(a.label.same_values(b.label));
  CHECK(a.image.shape() == Shape{32, 32, 16});

  const auto counts = class_counts(a.label);
  CHECK(counts.count(2.0) == 1);
  CHECK(counts.size() == 3);
  // every tumour voxel lies within the liver ellipsoid
  std::array<double, 3> c{};
  for (int d = 0; d < 3; ++d) c[d] = spec.liver_center[d] * (spec.size[d] - 1);
  for (std::int64_t i = 0; i < 32; ++i)
    for (std::int64_t j = 0; j < 32; ++j)
      for (std::int64_t k = 0; k < 16; ++k)
        if (a.label.at(idx3(a.label, i, j, k)) == 2.0) {
          const double u = (i - c[0]) / spec.liver_radii[0], v = (j - c[1]) / spec.liver_radii[1],
                       w = (k - c[2]) / spec.liver_radii[2];
          CHECK(u * u + v * v + w * w <= 1.0);
        }

  PhantomSpec none = spec;
  none.tumor_count = 0;
  const auto c0 = class_counts(generate_phantom(none).label);
  CHECK(c0.count(2.0) == 0);
  CHECK(c0.count(1.0) == 1);

  PhantomSpec other = spec;
  other.seed = 43;
  CHECK_FALSE(generate_phantom(other).image.same_values(a.image));

  PhantomSpec bad = spec;
  bad.tumor_radius = {5.0, 7.0};
  CHECK_THROWS(generate_phantom(bad));
  bad = spec;
  bad.liver_radii = {20.0, 10.0, 6.0};
  CHECK_THROWS(generate_phantom(bad));
}

TEST_CASE("CT-like phantoms have sharper liver boundaries than MRI-like ones") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    PhantomSpec spec;
    spec.seed = seed;
    spec.modality = Modality::ct;
    const RawVolume ct = generate_phantom(spec);
    spec.modality = Modality::mri;
    const RawVolume mri = generate_phantom(spec);
    CHECK(ct.label.same_values(mri.label));
    const double gct = boundary_gradient(normalize_intensity(ct.image, Modality::ct), ct.label);
    const double gmr = boundary_gradient(normalize_intensity(mri.image, Modality::mri), mri.label);
    MESSAGE("seed ", seed, ": ct ", gct, " mri ", gmr);
    CHECK(gct > gmr);
  }
}

TEST_CASE("phantoms survive preprocessing") {
  PhantomSpec spec;
  spec.modality = Modality::mri;
  const VolumeSample s = preprocess(generate_phantom(spec));
  CHECK(s.image.dim(1) % 16 == 0);
  CHECK(s.image.dim(2) % 16 == 0);
  CHECK(s.image.dim(3) % 16 == 0);
  CHECK(class_counts(s.label).count(2.0) == 1);
}

TEST_CASE("NIfTI round trip in memory") {
  Rng rng(8);
  NiftiVolume v;
  v.data = Tensor({7, 5, 3});
  for (std::int64_t i = 0; i < v.data.numel(); ++i) v.data.set(i, static_cast<float>(rng.normal()));
  v.spacing = {0.75, 1.25, 2.5};
  v.affine = {{{0.75, 0, 0, -10}, {0, 1.25, 0, 4}, {0, 0, 2.5, 7.5}}};
  const std::string bytes = write_nifti_bytes(v);
  CHECK(bytes.size() == 352 + 7 * 5 * 3 * 4);
  const NiftiVolume r = read_nifti_bytes(bytes);
  CHECK(r.data.same_values(v.data));
  CHECK(r.spacing == v.spacing);
  CHECK(r.affine == v.affine);
  CHECK(r.datatype == NiftiType::float32);
  CHECK(orientation_of(r.affine) == "RAS");
  CHECK(read_nifti_bytes(bytes, std::string("RAS")).data.same_values(v.data));
}

TEST_CASE("NIfTI float32 bits are copied exactly") {
  NiftiVolume v;
  v.data = Tensor::from({2, 1, 1}, {0.1f, -3.5e-20f});
  const std::string bytes = write_nifti_bytes(v);
  float raw[2];
  std::memcpy(raw, bytes.data() + 352, 8);
  CHECK(raw[0] == 0.1f);
  CHECK(raw[1] == -3.5e-20f);
  const NiftiVolume r = read_nifti_bytes(bytes);
  CHECK(r.data.at(0) == static_cast<double>(0.1f));
  CHECK(r.data.at(1) == static_cast<double>(-3.5e-20f));
}

TEST_CASE("NIfTI integer datatypes") {
  for (NiftiType t : {NiftiType::uint8, NiftiType::int16, NiftiType::float64}) {
    NiftiVolume v;
    v.datatype = t;
    v.data = Tensor::from({3, 2, 1}, {0, 1, 2, 7, 100, 250});
    const NiftiVolume r = read_nifti_bytes(write_nifti_bytes(v));
    CHECK(r.datatype == t);
    CHECK(r.data.same_values(v.data));
  }
}

TEST_CASE("LPS affine reoriented to RAS flips the first two axes") {
  const std::int64_t X = 4, Y = 3, Z = 2;
  NiftiVolume v;
  v.data = Tensor({X, Y, Z});
  for (std::int64_t i = 0; i < v.data.numel(); ++i) v.data.set(i, static_cast<double>(i));
  v.affine = {{{-1, 0, 0, 0}, {0, -1, 0, 0}, {0, 0, 1, 0}}};
  CHECK(orientation_of(v.affine) == "LPS");
  const NiftiVolume r = read_nifti_bytes(write_nifti_bytes(v), std::string("RAS"));
  REQUIRE(r.data.shape() == Shape{X, Y, Z});
  for (std::int64_t i = 0; i < X; ++i)
    for (std::int64_t j = 0; j < Y; ++j)
      for (std::int64_t k = 0; k < Z; ++k)
        CHECK(r.data.at(idx3(r.data, i, j, k)) == v.data.at(idx3(v.data, X - 1 - i, Y - 1 - j, k)));
  CHECK(orientation_of(r.affine) == "RAS");
  // the world position of voxel (0,0,0) moves to the old far corner
  CHECK(r.affine[0][3] == -(X - 1));
  CHECK(r.affine[1][3] == -(Y - 1));
}

TEST_CASE("axis permutation in reorientation") {
  NiftiVolume v;
  v.data = Tensor({2, 3, 4});
  for (std::int64_t i = 0; i < v.data.numel(); ++i) v.data.set(i, static_cast<double>(i));
  v.spacing = {1.0, 2.0, 3.0};
  // voxel axes point to A, S, R
  v.affine = {{{0, 0, 3, 0}, {1, 0, 0, 0}, {0, 2, 0, 0}}};
  CHECK(orientation_of(v.affine) == "ASR");
  const NiftiVolume r = reorient(v, "RAS");
  CHECK(r.data.shape() == Shape{4, 2, 3});
  CHECK(r.spacing == Spacing{3.0, 1.0, 2.0});
  for (std::int64_t i = 0; i < 4; ++i)
    for (std::int64_t j = 0; j < 2; ++j)
      for (std::int64_t k = 0; k < 3; ++k) CHECK(r.data.at(idx3(r.data, i, j, k)) == v.data.at(idx3(v.data, j, k, i)));
  CHECK(orientation_of(reorient(v, "LAS").affine) == "LAS");
}

TEST_CASE("NIfTI qform fallback") {
  NiftiVolume v;
  v.data = Tensor({2, 2, 2});
  v.spacing = {2.0, 3.0, 4.0};
  std::string bytes = write_nifti_bytes(v);
  const std::int16_t zero = 0, one = 1;
  std::memcpy(bytes.data() + 254, &zero, 2);
  std::memcpy(bytes.data() + 252, &one, 2);
  // rotation by pi about z: quaternion (0, 0, 0, 1)
  const float q[3] = {0.0f, 0.0f, 1.0f}, off[3] = {5.0f, 6.0f, 7.0f};
  std::memcpy(bytes.data() + 256, q, 12);
  std::memcpy(bytes.data() + 268, off, 12);
  const NiftiVolume r = read_nifti_bytes(bytes);
  CHECK(orientation_of(r.affine) == "LPS");
  CHECK(r.affine[0][0] == -2.0);
  CHECK(r.affine[1][1] == -3.0);
  CHECK(r.affine[2][2] == 4.0);
  CHECK(r.affine[1][3] == 6.0);

  std::memcpy(bytes.data() + 252, &zero, 2);
  const NiftiVolume d = read_nifti_bytes(bytes);
  CHECK(d.affine[0][0] == 2.0);
  CHECK(d.affine[2][2] == 4.0);
}

TEST_CASE("big-endian headers are detected") {
  NiftiVolume v;
  v.datatype = NiftiType::int16;
  v.data = Tensor::from({2, 1, 1}, {258, -2});
  std::string le = write_nifti_bytes(v);
  std::string be = le;
  auto swap_at = [&](int offset, int width) { std::reverse(be.begin() + offset, be.begin() + offset + width); };
  swap_at(0, 4);
  for (int a = 0; a < 8; ++a) swap_at(40 + 2 * a, 2);
  swap_at(70, 2);
  swap_at(72, 2);
  for (int a = 0; a < 8; ++a) swap_at(76 + 4 * a, 4);
  swap_at(108, 4);
  swap_at(112, 4);
  swap_at(116, 4);
  swap_at(252, 2);
  swap_at(254, 2);
  for (int a = 0; a < 12; ++a) swap_at(280 + 4 * a, 4);
  swap_at(352, 2);
  swap_at(354, 2);
  const NiftiVolume r = read_nifti_bytes(be);
  CHECK(r.data.same_values(v.data));
}

TEST_CASE("malformed NIfTI input is rejected") {
  NiftiVolume v;
  v.data = Tensor({3, 3, 3});
  const std::string good = write_nifti_bytes(v);

  std::string bad_magic = good;
  bad_magic[344] = 'x';
  CHECK_THROWS_WITH(read_nifti_bytes(bad_magic), doctest::Contains("magic"));

  std::string bad_type = good;
  const std::int16_t u16 = 512;
  std::memcpy(bad_type.data() + 70, &u16, 2);
  CHECK_THROWS_WITH(read_nifti_bytes(bad_type), doctest::Contains("datatype"));

  CHECK_THROWS_WITH(read_nifti_bytes(good.substr(0, good.size() - 1)), doctest::Contains("truncated"));
  CHECK_THROWS(read_nifti_bytes(good.substr(0, 100)));

  std::string four_d = good;
  const std::int16_t four = 4, two = 2;
  std::memcpy(four_d.data() + 40, &four, 2);
  std::memcpy(four_d.data() + 48, &two, 2);
  CHECK_THROWS(read_nifti_bytes(four_d));

  CHECK_THROWS(read_nifti("/nonexistent/volume.nii"));
}

TEST_CASE("NIfTI files, header pairs and manifests") {
  const auto dir = scratch_dir("files");
  PhantomSpec spec;
  spec.size = {16, 16, 8};
  spec.liver_radii = {6, 5, 3};
  spec.tumor_radius = {1.5, 2.0};
  spec.tumor_count = 1;
  const RawVolume ph = generate_phantom(spec);

  NiftiVolume img, lab;
  img.data = ph.image;
  img.spacing = {1.5, 1.5, 2.0};
  img.affine = {{{-1.5, 0, 0, 0}, {0, -1.5, 0, 0}, {0, 0, 2.0, 0}}};
  lab = img;
  lab.data = ph.label;
  lab.datatype = NiftiType::uint8;
  write_nifti((dir / "ct_img.nii").string(), img);
  write_nifti((dir / "ct_lab.nii").string(), lab);

  // analyse-style pair
  const std::string bytes = write_nifti_bytes(img);
  std::string hdr = bytes.substr(0, 348);
  std::memcpy(hdr.data() + 344, "ni1\0", 4);
  std::ofstream(dir / "mr_img.hdr", std::ios::binary) << hdr;
  std::ofstream(dir / "mr_img.img", std::ios::binary) << bytes.substr(352);

  write_manifest((dir / "manifest.tsv").string(), {{"ct01", "ct_img.nii", "ct_lab.nii", Modality::ct},
                                                   {"mr01", "mr_img.hdr", "", Modality::mri}});
  const auto entries = read_manifest((dir / "manifest.tsv").string());
  REQUIRE(entries.size() == 2);
  CHECK(entries[0].image_path == (dir / "ct_img.nii").string());
  CHECK(entries[1].label_path.empty());
  CHECK(entries[1].modality == Modality::mri);

  const RawVolume ct = load_volume(entries[0]);
  CHECK(ct.spacing == Spacing{1.5, 1.5, 2.0});
  CHECK(class_counts(ct.label) == class_counts(ph.label));
  // LPS -> RAS flips x and y
  CHECK(ct.label.at(idx3(ct.label, 0, 0, 3)) == ph.label.at(idx3(ph.label, 15, 15, 3)));
  const RawVolume mr = load_volume(entries[1]);
  CHECK(mr.label.empty());
  // LPS -> LAS flips y only
  CHECK(mr.image.at(idx3(mr.image, 2, 0, 1)) == static_cast<double>(static_cast<float>(
                                                      ph.image.at(idx3(ph.image, 2, 15, 1)))));

  std::ofstream(dir / "broken.tsv") << "a\tb\tc\n";
  CHECK_THROWS(read_manifest((dir / "broken.tsv").string()));
  std::filesystem::remove_all(dir);
}
