#pragma once

// Independent reference implementations. Deliberately naive: plain loops over
// doubles, no shared code paths with the production kernels.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "aqcf/nn.hpp"

namespace aqcf::oracle {

/// Convolution as one dense matrix [Cout*out_vol, Cin*in_vol] applied per sample.
Tensor conv3d_dense(const Tensor& x, const Tensor& w, const std::optional<Tensor>& bias, int stride,
                    int padding);

/// Quaternion conv computed voxel by voxel with the Hamilton product
/// out[o] += W[o,i,tap] * x[i, voxel+tap], quaternions multiplied from the
/// basis table (i*j = k, j*k = i, k*i = j, i^2 = j^2 = k^2 = -1).
Tensor qconv3d_hamilton(const Tensor& x, const std::array<Tensor, 4>& sub_kernels,
                        const std::optional<Tensor>& bias, int stride, int padding);

/// Product of two quaternions given as (r, i, j, k).
std::array<double, 4> hamilton(const std::array<double, 4>& a, const std::array<double, 4>& b);

/// C_raw of one transfer direction from the real 1x1x1 projection kernels
/// [4C, 4C, 1, 1, 1], computed one voxel at a time.
Tensor context_naive(const Tensor& f_query, const Tensor& f_keyval, const Tensor& wq, const Tensor& wk,
                     const Tensor& wv);

struct GradcheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  int checked = 0;
  std::size_t worst_param = 0;
  double worst_analytic = 0.0, worst_numeric = 0.0;
};

/// Central differences on `samples` randomly chosen scalar entries of `params`.
/// rel = |analytic - numeric| / max(|analytic|, |numeric|, floor).
GradcheckReport gradcheck(const std::function<Var()>& loss, const std::vector<Var>& params, int samples,
                          Rng& rng, double h = 1e-4, double floor = 1e-6);

/// Binary mask on a D x H x W grid.
struct Mask {
  std::array<std::int64_t, 3> shape{};
  std::vector<std::uint8_t> data;
};

double dsc_bruteforce(const Mask& pred, const Mask& gt);

/// Pooled bidirectional surface distances by exhaustive pairing.
std::vector<double> surface_distances_bruteforce(const Mask& pred, const Mask& gt,
                                                 const std::array<double, 3>& spacing);

/// Linear-interpolated percentile (q in [0, 100]) of an unsorted sample.
double percentile(std::vector<double> values, double q);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Scalar Adam(W) trajectory: theta after each of grads.size() steps.
std::vector<double> adam_trajectory(double theta, const std::vector<double>& grads, const AdamConfig& cfg);

/// Learning rate after each metric of a reduce-on-plateau schedule (max mode).
std::vector<double> plateau_reference(const std::vector<double>& metrics, double lr, double factor, int patience,
                                      double min_lr);

}  // namespace aqcf::oracle
