#include "aqcf/nn.hpp"

#include <cmath>

#include "aqcf/ops.hpp"

namespace aqcf {

Var uniform_param(Shape shape, double bound, Rng& rng, DType dtype) {
  Tensor t(std::move(shape), dtype);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform(-bound, bound));
  return Var(std::move(t), true);
}

Var zero_param(Shape shape, DType dtype) { return Var(Tensor(std::move(shape), dtype), true); }

std::int64_t count_elements(const ParamList& params) {
  std::int64_t n = 0;
  for (const auto& p : params) n += p.var.numel();
  return n;
}

Linear::Linear(std::int64_t in, std::int64_t out, bool with_bias, Rng& rng, DType dtype) {
  const double bound = std::sqrt(1.0 / static_cast<double>(in));
  weight = uniform_param({out, in}, bound, rng, dtype);
  if (with_bias) bias = uniform_param({out}, bound, rng, dtype);
}

Var Linear::forward(const Var& x) const { return ops::linear(x, weight, bias); }

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
  if (bias) out.push_back({prefix + ".bias", *bias});
}

}  // namespace aqcf
