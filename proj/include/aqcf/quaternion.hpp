#pragma once

#include <cstdint>
#include <optional>

#include "aqcf/nn.hpp"

namespace aqcf {

/// The four real sub-kernels of a quaternion kernel W = W_r + W_i i + W_j j + W_k k.
/// Each is [Cout, Cin, k, k, k] in quaternion channels.
struct QuaternionKernel {
  Var w_r, w_i, w_j, w_k;
  std::optional<Var> bias;  // [4 * Cout], real

  std::int64_t out_channels() const { return w_r.shape()[0]; }
  std::int64_t in_channels() const { return w_r.shape()[1]; }
  std::int64_t kernel_size() const { return w_r.shape()[2]; }

  static QuaternionKernel init(std::int64_t in_q, std::int64_t out_q, int k, bool bias, Rng& rng,
                               DType dtype);
};

/// Structured real kernel [4Cout, 4Cin, k, k, k] realising the Hamilton product:
///
///   | W_r  -W_i  -W_j  -W_k |
///   | W_i   W_r  -W_k   W_j |
///   | W_j   W_k   W_r  -W_i |
///   | W_k  -W_j   W_i   W_r |
///
/// Block (row r, col c) occupies output channels [r*Cout, (r+1)*Cout) and input
/// channels [c*Cin, (c+1)*Cin). Differentiable in all four sub-kernels.
Var expand_kernel(const Var& w_r, const Var& w_i, const Var& w_j, const Var& w_k);
Var expand_kernel(const QuaternionKernel& qk);

struct ParamCount {
  std::int64_t quaternion = 0;
  std::int64_t real_equivalent = 0;
  // weight-only ratio quaternion / real, reduced
  std::int64_t ratio_num = 0;
  std::int64_t ratio_den = 1;
};

/// Trainables of a quaternion conv (Cin -> Cout quaternion channels, kernel k)
/// against a real conv with the same 4Cin -> 4Cout real widths.
ParamCount param_count(std::int64_t in_q, std::int64_t out_q, int k, bool bias);

/// Channel concatenation of quaternion maps. Real channels are component-major
/// ([r | i | j | k], C each), so parts are joined within each component block
/// and the result is again a valid quaternion map of sum(C) channels.
Var quaternion_concat(const std::vector<Var>& parts);

enum class Activation { none, relu };
enum class Norm { none, instance };

/// Convolution over quaternion-grouped channels. With `real_valued` set the
/// layer is an unconstrained real conv of identical real widths (ablation).
class QConvLayer {
 public:
  struct Spec {
    std::int64_t in_q = 1;
    std::int64_t out_q = 1;
    int k = 3;
    int stride = 1;
    int padding = 1;
    bool bias = true;
    Activation activation = Activation::none;
    Norm norm = Norm::none;
    bool real_valued = false;
  };

  QConvLayer() = default;
  QConvLayer(const Spec& spec, Rng& rng, DType dtype);

  /// x [B, 4Cin, D, H, W] -> [B, 4Cout, D', H', W'].
  Var forward(const Var& x) const;
  /// The real kernel actually applied by forward().
  Var effective_kernel() const;

  void collect(const std::string& prefix, ParamList& out) const;
  std::int64_t weight_count() const;

  const Spec& spec() const { return spec_; }
  const QuaternionKernel& kernel() const { return kernel_; }
  QuaternionKernel& kernel() { return kernel_; }
  const Var& real_kernel() const { return real_kernel_; }
  const std::optional<Var>& bias() const;

 private:
  Spec spec_;
  QuaternionKernel kernel_;
  Var real_kernel_;
  std::optional<Var> real_bias_;
};

/// Additive attention on a decoder skip: coefficients
///   alpha = sigmoid(Re(psi(relu(theta(skip) + phi(up2(gating))))))
/// with theta, phi, psi quaternion 1x1x1 convolutions; output = alpha * skip.
class QuaternionAttentionGate {
 public:
  QuaternionAttentionGate() = default;
  QuaternionAttentionGate(std::int64_t skip_q, std::int64_t gating_q, bool real_valued, Rng& rng,
                          DType dtype);

  /// [B, 1, D, H, W] in (0, 1).
  Var coefficients(const Var& skip, const Var& gating) const;
  Var forward(const Var& skip, const Var& gating) const;
  /// Per-voxel scalar reweighting of the skip.
  static Var apply(const Var& skip, const Var& coefficients);

  void collect(const std::string& prefix, ParamList& out) const;

 private:
  QConvLayer theta_, phi_, psi_;
};

}  // namespace aqcf
