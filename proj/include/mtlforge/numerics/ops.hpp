#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mtlforge/numerics/rng.hpp"
#include "mtlforge/numerics/tensor.hpp"

namespace mtlforge::numerics {

inline constexpr std::int64_t kIgnoreIndex = -100;

// Elementwise ops. The second operand may have a shape equal to a trailing
// suffix of the first one (bias/gain broadcasting, scalars).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

/// [m,k]x[k,n], batched [B,m,k]x[B,k,n], or [...,k]x[k,n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// Swaps the last two axes.
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
/// Drops `axis`, keeping slice `index` along it.
Tensor select(const Tensor& a, std::size_t axis, std::size_t index);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Rows of `table` [V,D] gathered by `ids`; result shape is ids_shape + [D].
Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids, const Shape& ids_shape);

/// Inverted dropout. Identity when p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Mean negative log-softmax over rows whose label != ignore_index.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> labels,
                     std::int64_t ignore_index = kIgnoreIndex);

}  // namespace mtlforge::numerics
