#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "aqcf/data.hpp"
#include "aqcf/model.hpp"

namespace aqcf {

struct InferenceConfig {
  Shape patch{32, 32, 16};
  double overlap = 0.8;
  Modality modality = Modality::ct;
};

/// Window origins along one axis: stride ceil(patch * (1 - overlap)), the last
/// window clamped to end at the boundary.
std::vector<std::int64_t> window_starts(std::int64_t extent, std::int64_t patch, double overlap);

/// Separable Gaussian over a patch, sigma = patch / 8 per axis, peak 1 at the centre.
Tensor gaussian_importance(const Shape& patch);

/// Logits [1, C, d, h, w] for one patch [1, 1, d, h, w].
using PatchLogits = std::function<Tensor(const Tensor& patch)>;

/// Gaussian-weighted average of window logits, softmax over classes after
/// blending. `volume` is [1, D, H, W]; returns probabilities [C, D, H, W].
/// Volumes smaller than the patch are zero padded and the result cropped back.
Tensor sliding_window_blend(const Tensor& volume, const Shape& patch, double overlap, const PatchLogits& fn,
                            Tensor* weight_sum = nullptr);

/// Unimodal inference: the absent stream receives zeros of identical shape.
Tensor sliding_window_infer(const AqcfNet& net, const Tensor& volume, const InferenceConfig& cfg);

/// [C, D, H, W] -> [D, H, W] class indices (first maximum wins).
Tensor argmax_labels(const Tensor& probs);

/// Mask of voxels equal to `cls`.
Tensor class_mask(const Tensor& labels, int cls);

/// 2|P n G| / (|P| + |G|); 1 when both are empty. Nonzero voxels are foreground.
double dsc(const Tensor& pred, const Tensor& gt);

struct SurfaceDistance {
  bool defined = false;  // false when either mask is empty
  double hd95 = 0.0, msd = 0.0;
};

/// Border voxels (6-connectivity, outside the grid counts as background),
/// nearest-border Euclidean distances in mm pooled over both directions;
/// hd95 = linear-interpolated 95th percentile, msd = mean.
SurfaceDistance surface_distances(const Tensor& pred, const Tensor& gt, const Spacing& spacing);

/// Exact Euclidean distance (mm) from every voxel to the nearest nonzero voxel
/// of `seeds`; infinity when there are none.
Tensor distance_to(const Tensor& seeds, const Spacing& spacing);
/// Border voxels of a mask as a 0/1 volume.
Tensor mask_border(const Tensor& mask);

/// Linear-interpolated percentile, q in [0, 100].
double percentile(std::vector<double> values, double q);

struct ClassMetrics {
  int cls = 0;
  double dsc = 0.0;
  SurfaceDistance distance;
};

struct CaseMetrics {
  std::string subject_id;
  Modality modality = Modality::ct;
  std::vector<ClassMetrics> classes;  // liver (1) and tumour (2)
};

CaseMetrics segmentation_metrics(const Tensor& pred_labels, const Tensor& gt_labels, const Spacing& spacing,
                                 const std::string& subject_id = "", Modality modality = Modality::ct);

/// Per-case lines `subject_id modality class dsc hd95 msd` (undefined distances
/// written as "undefined"), then mean and SD per class over defined values.
void write_metrics_report(std::ostream& os, const std::vector<CaseMetrics>& cases);

struct GateStat {
  int stage = 0;
  Direction direction = Direction::mri_to_ct;
  std::size_t count = 0;
  double median = 0.0, q25 = 0.0, q75 = 0.0;
};

std::vector<GateStat> gate_statistics(const std::vector<GateTrace>& traces);
/// Table with one row per stage: "median [q25, q75]" for each direction.
void write_gate_table(std::ostream& os, const std::vector<GateStat>& stats);

enum class CamMethod { grad_cam, grad_cam_pp };

struct SaliencyRequest {
  Modality modality = Modality::ct;
  int target_class = 2;
  std::string layer = "dec0";  // dec0 .. dec3 of the active stream
  CamMethod method = CamMethod::grad_cam_pp;
  double overlap = 0.5;  // window overlap for volumes larger than the patch
};

/// relu(sum_k w_k A_k) for one activation [1, K, d, h, w] and its gradient,
/// before resizing and normalisation.
Tensor cam_map(const Tensor& activation, const Tensor& gradient, CamMethod method);

/// Trilinear resize of [d, h, w] to `out` (half-voxel aligned, edge clamped).
Tensor trilinear_resize(const Tensor& map, const Shape& out);

/// Min-max to [0, 1]; a constant map becomes all zeros.
Tensor min_max_normalize(const Tensor& map);

/// Class-discriminative saliency for volume [1, D, H, W]; returns [D, H, W] in [0, 1].
/// The target scalar is the sum of target-class logits over voxels predicted as that class.
Tensor saliency_map(const AqcfNet& net, const Tensor& volume, const SaliencyRequest& req);

struct SaliencyReport {
  bool defined = false;  // false for an empty tumour mask
  double iou = 0.0, band_coverage = 0.0;
  bool pointing_hit = false;
  std::int64_t peak_index = 0;
};

/// Saliency binarised at `threshold`; band = voxels within `band_mm` of the
/// tumour border on either side; the peak is the lowest-index maximum.
SaliencyReport saliency_alignment(const Tensor& saliency, const Tensor& tumor_mask, const Spacing& spacing,
                                  double band_mm = 3.0, double threshold = 0.5);

/// Mean over liver and tumour of the hard Dice on each sample, unimodal inference.
double mean_foreground_dice(const AqcfNet& net, const std::vector<VolumeSample>& samples, const InferenceConfig& cfg);

}  // namespace aqcf
