#include "mtlforge/numerics/adam.hpp"

#include <cmath>

#include "mtlforge/error.hpp"

namespace mtlforge::numerics {

void AdamState::validate() const {
  if (!(lr > 0.0)) throw ConfigError("adam: learning rate must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
    throw ConfigError("adam: betas must lie in (0,1)");
  }
  if (!(eps > 0.0)) throw ConfigError("adam: eps must be positive");
}

void adam_step(std::span<const NamedParam> params, AdamState& state) {
  state.validate();
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("adam: non-finite gradient in parameter '" + p.name + "'");
    }
  }
  ++state.step_count;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    Tensor t = p.tensor;
    auto& mom = state.moments[p.name];
    if (mom.first.empty()) {
      mom.first.assign(t.numel(), 0.0);
      mom.second.assign(t.numel(), 0.0);
    } else if (mom.first.size() != t.numel()) {
      throw DimensionError("adam: moment buffer for '" + p.name + "' does not match parameter shape " +
                           shape_str(t.shape()));
    }
    ++mom.updates;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(mom.updates));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(mom.updates));
    auto g = t.grad();
    auto w = t.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      mom.first[i] = state.beta1 * mom.first[i] + (1.0 - state.beta1) * g[i];
      mom.second[i] = state.beta2 * mom.second[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = mom.first[i] / c1;
      const double vhat = mom.second[i] / c2;
      w[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace mtlforge::numerics
