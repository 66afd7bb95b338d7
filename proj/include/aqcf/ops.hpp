#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "aqcf/autodiff.hpp"

// Differentiable primitives. Feature maps are channel-first [B, C, D, H, W].
namespace aqcf::ops {

// Binary ops broadcast over same-rank shapes where one side has extent 1.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);

Var sum(const Var& a);
Var mean(const Var& a);

Var relu(const Var& a);
Var sigmoid(const Var& a);
Var softmax(const Var& a, std::size_t axis);

Var reshape(const Var& a, Shape shape);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice(const Var& a, std::size_t axis, std::int64_t start, std::int64_t length);

/// Constant padding; `pads[i]` = (before, after) for axis i. Missing trailing axes are unpadded.
Var pad(const Var& a, const std::vector<std::pair<std::int64_t, std::int64_t>>& pads,
        double value = 0.0);
/// Window `[starts[i], starts[i] + sizes[i])` along every axis.
Var crop(const Var& a, const std::vector<std::int64_t>& starts, const Shape& sizes);

/// Mean over all spatial axes: [B, C, ...] -> [B, C].
Var global_avg_pool(const Var& a);
/// Nearest-neighbour x2 upsampling of the three spatial axes of a 5-D tensor.
Var upsample_nearest2(const Var& a);

/// Cross-correlation (no kernel flip). x [B,Cin,D,H,W], w [Cout,Cin,k,k,k], bias [Cout].
Var conv3d(const Var& x, const Var& w, const std::optional<Var>& bias, int stride, int padding);

/// Per-sample, per-channel normalisation over spatial axes; no affine.
inline constexpr double kInstanceNormEps = 1e-5;
Var instance_norm(const Var& x, double eps = kInstanceNormEps);

/// x [B, in], w [out, in], b [out] -> [B, out].
Var linear(const Var& x, const Var& w, const std::optional<Var>& b);

}  // namespace aqcf::ops
