#pragma once

#include <array>
#include <string>
#include <vector>

#include "aqcf/rng.hpp"
#include "aqcf/tensor.hpp"

namespace aqcf {

enum class Modality { ct, mri };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

using Spacing = std::array<double, 3>;

/// Volume as loaded: spatial axes (x, y, z), z being the slice axis.
struct RawVolume {
  Tensor image;  // [X, Y, Z], raw intensities
  Tensor label;  // [X, Y, Z] with values {0, 1, 2}; empty when unlabelled
  Spacing spacing{1.0, 1.0, 1.0};
  Modality modality = Modality::ct;
  std::string subject_id;
};

struct VolumeSample {
  Tensor image;  // [1, X, Y, Z] in [0, 1]
  Tensor label;  // [X, Y, Z] with values {0, 1, 2}
  Modality modality = Modality::ct;
  Spacing spacing{1.0, 1.0, 1.0};
  std::string subject_id;
};

struct UnpairedBatch {
  VolumeSample ct, mri;
  std::size_t ct_index = 0, mri_index = 0;
};

/// Intensity window per modality: CT [-16, 176] HU, MRI [74, 511].
std::array<double, 2> intensity_window(Modality m);
/// Linear map of the window onto [0, 1], clamped.
Tensor normalize_intensity(const Tensor& raw, Modality m);

/// Output extent of resampling `n` voxels at `spacing` mm to 1 mm: round-half-up(n * spacing).
std::int64_t resampled_extent(std::int64_t n, double spacing);
/// Resampling to 1 mm isotropic. Output voxel o sits at physical position o mm,
/// i.e. input coordinate o / spacing, clamped to the last input voxel.
Tensor resample_trilinear(const Tensor& volume, const Spacing& spacing);
Tensor resample_nearest(const Tensor& volume, const Spacing& spacing);

/// Zero padding at the high end of each axis up to a multiple of `multiple`.
Tensor pad_to_multiple(const Tensor& volume, std::int64_t multiple, double value = 0.0);

struct Box {
  std::array<std::int64_t, 3> lo{}, hi{};  // half-open
};
/// Bounding box of nonzero voxels grown by `margin` and clipped to the volume.
Box foreground_box(const Tensor& volume, std::int64_t margin);
Tensor crop_box(const Tensor& volume, const Box& box);

/// Resample to 1 mm, crop to the nonzero-image box (4-voxel margin), pad to a
/// multiple of 16, normalise.
VolumeSample preprocess(const RawVolume& volume);

struct AugmentConfig {
  double flip_probability = 0.5;
  bool rotate = true;
  double intensity_shift = 0.1;
};

/// Flips along each axis, a k*90 degree rotation in the (x, y) plane and an
/// intensity shift. Image and label move together.
VolumeSample augment(const VolumeSample& sample, Rng& rng, const AugmentConfig& cfg = {});
VolumeSample flip(const VolumeSample& sample, int axis);
VolumeSample rotate90(const VolumeSample& sample, int k);

/// Patch of `patch` voxels. With probability `foreground_probability` it is
/// centred on a uniformly drawn voxel with label > 0. Volumes smaller than
/// the patch are zero padded first.
VolumeSample sample_patch(const VolumeSample& sample, const Shape& patch, Rng& rng,
                          double foreground_probability = 2.0 / 3.0);

struct SamplerConfig {
  Shape patch{32, 32, 16};
  bool augment = true;
  AugmentConfig augment_cfg;
  double foreground_probability = 2.0 / 3.0;
};

/// One independent uniform draw from each cohort, then augment and patch.
/// Each stream consumes only its own generator.
UnpairedBatch next_unpaired_batch(const std::vector<VolumeSample>& ct_pool,
                                  const std::vector<VolumeSample>& mri_pool, Rng& ct_rng, Rng& mri_rng,
                                  const SamplerConfig& cfg);
/// The per-stream half of next_unpaired_batch for a fixed subject index.
VolumeSample draw_sample(const VolumeSample& subject, Rng& rng, const SamplerConfig& cfg);

struct PhantomSpec {
  Shape size{32, 32, 16};
  std::array<double, 3> liver_center{0.5, 0.5, 0.5};  // fraction of the volume
  std::array<double, 3> liver_radii{11.0, 10.0, 6.0};  // voxels
  int tumor_count = 2;
  std::array<double, 2> tumor_radius{3.0, 4.0};  // voxels
  Modality modality = Modality::ct;
  std::uint64_t seed = 0;
};

/// Ellipsoidal liver (label 1) containing spherical tumours (label 2) with
/// modality-styled raw intensities: CT-like with sharp edges and Gaussian
/// noise, MRI-like with blurred edges, a smooth bias field and texture noise.
RawVolume generate_phantom(const PhantomSpec& spec);

/// Mean Sobel gradient magnitude over voxels within one voxel of the liver boundary.
double boundary_gradient(const Tensor& image, const Tensor& label);

struct ManifestEntry {
  std::string subject_id, image_path, label_path;
  Modality modality = Modality::ct;
};

/// Tab-separated `subject_id image label modality`; '#' starts a comment.
/// Relative paths resolve against the manifest's directory.
std::vector<ManifestEntry> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);

}  // namespace aqcf
