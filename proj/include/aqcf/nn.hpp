#pragma once

#include <optional>
#include <string>
#include <vector>

#include "aqcf/autodiff.hpp"
#include "aqcf/rng.hpp"

namespace aqcf {

struct NamedParam {
  std::string name;
  Var var;
};
using ParamList = std::vector<NamedParam>;

/// Trainable leaf drawn from U(-bound, bound).
Var uniform_param(Shape shape, double bound, Rng& rng, DType dtype);
Var zero_param(Shape shape, DType dtype);

std::int64_t count_elements(const ParamList& params);

/// Affine map with optional bias, weight [out, in].
class Linear {
 public:
  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, bool bias, Rng& rng, DType dtype);

  Var forward(const Var& x) const;
  void collect(const std::string& prefix, ParamList& out) const;

  Var weight;
  std::optional<Var> bias;
};

}  // namespace aqcf
