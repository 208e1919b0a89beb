#pragma once

// One randomized gradient-check instance per differentiable op.

#include <functional>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "mtlforge/numerics/rng.hpp"

namespace mtlforge::testing {

using numerics::Rng;
using numerics::Shape;

struct OpCase {
  std::string name;
  std::function<GradCheckResult(Rng&)> run;
};

inline Tensor rand_leaf(Shape s, Rng& rng, double stddev = 1.0) {
  return Tensor::randn(std::move(s), stddev, rng, true);
}

inline std::size_t rdim(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

inline std::vector<OpCase> differentiable_ops() {
  namespace nm = numerics;
  std::vector<OpCase> ops;
  ops.push_back({"matmul", [](Rng& r) {
    const auto m = rdim(r, 1, 5), k = rdim(r, 1, 5), n = rdim(r, 1, 5);
    return gradcheck({rand_leaf({m, k}, r), rand_leaf({k, n}, r)},
                     [](const auto& in) { return nm::matmul(in[0], in[1]); });
  }});
  ops.push_back({"matmul_batched", [](Rng& r) {
    const auto b = rdim(r, 1, 3), m = rdim(r, 1, 4), k = rdim(r, 1, 4), n = rdim(r, 1, 4);
    return gradcheck({rand_leaf({b, m, k}, r), rand_leaf({b, k, n}, r)},
                     [](const auto& in) { return nm::matmul(in[0], in[1]); });
  }});
  ops.push_back({"matmul_rows", [](Rng& r) {
    const auto b = rdim(r, 1, 3), t = rdim(r, 1, 3), k = rdim(r, 1, 4), n = rdim(r, 1, 4);
    return gradcheck({rand_leaf({b, t, k}, r), rand_leaf({k, n}, r)},
                     [](const auto& in) { return nm::matmul(in[0], in[1]); });
  }});
  ops.push_back({"add", [](Rng& r) {
    const auto m = rdim(r, 1, 4), n = rdim(r, 1, 4);
    return gradcheck({rand_leaf({m, n}, r), rand_leaf({n}, r)},
                     [](const auto& in) { return nm::add(in[0], in[1]); });
  }});
  ops.push_back({"sub", [](Rng& r) {
    const auto m = rdim(r, 1, 4), n = rdim(r, 1, 4);
    return gradcheck({rand_leaf({m, n}, r), rand_leaf({m, n}, r)},
                     [](const auto& in) { return nm::sub(in[0], in[1]); });
  }});
  ops.push_back({"mul", [](Rng& r) {
    const auto m = rdim(r, 1, 4), n = rdim(r, 1, 4);
    return gradcheck({rand_leaf({m, n}, r), rand_leaf({n}, r)},
                     [](const auto& in) { return nm::mul(in[0], in[1]); });
  }});
  ops.push_back({"scale", [](Rng& r) {
    const double f = r.normal();
    return gradcheck({rand_leaf({rdim(r, 1, 6)}, r)}, [f](const auto& in) { return nm::scale(in[0], f); });
  }});
  ops.push_back({"transpose", [](Rng& r) {
    return gradcheck({rand_leaf({rdim(r, 1, 3), rdim(r, 1, 4), rdim(r, 1, 4)}, r)},
                     [](const auto& in) { return nm::transpose(in[0]); });
  }});
  ops.push_back({"reshape", [](Rng& r) {
    const auto a = rdim(r, 1, 4), b = rdim(r, 1, 4);
    return gradcheck({rand_leaf({a, b}, r)}, [a, b](const auto& in) { return nm::reshape(in[0], {b, a}); });
  }});
  ops.push_back({"permute", [](Rng& r) {
    return gradcheck({rand_leaf({rdim(r, 1, 3), rdim(r, 1, 3), rdim(r, 1, 3), rdim(r, 1, 3)}, r)},
                     [](const auto& in) { return nm::permute(in[0], {0, 2, 1, 3}); });
  }});
  ops.push_back({"select", [](Rng& r) {
    const auto t = rdim(r, 1, 4);
    const auto idx = static_cast<std::size_t>(r.below(t));
    return gradcheck({rand_leaf({rdim(r, 1, 3), t, rdim(r, 1, 4)}, r)},
                     [idx](const auto& in) { return nm::select(in[0], 1, idx); });
  }});
  ops.push_back({"softmax", [](Rng& r) {
    const auto axis = static_cast<std::size_t>(r.below(2));
    return gradcheck({rand_leaf({rdim(r, 1, 4), rdim(r, 2, 5)}, r, 2.0)},
                     [axis](const auto& in) { return nm::softmax(in[0], axis); });
  }});
  ops.push_back({"gelu", [](Rng& r) {
    return gradcheck({rand_leaf({rdim(r, 1, 8)}, r, 2.0)}, [](const auto& in) { return nm::gelu(in[0]); });
  }});
  ops.push_back({"relu", [](Rng& r) {
    // Keep inputs away from the kink so the central difference is exact.
    std::vector<double> v(rdim(r, 1, 8));
    for (double& x : v) x = (r.bernoulli(0.5) ? 1.0 : -1.0) * (0.1 + r.uniform());
    const Shape s{v.size()};
    return gradcheck({Tensor::from_data(s, v, true)}, [](const auto& in) { return nm::relu(in[0]); });
  }});
  ops.push_back({"tanh", [](Rng& r) {
    return gradcheck({rand_leaf({rdim(r, 1, 8)}, r)}, [](const auto& in) { return nm::tanh(in[0]); });
  }});
  ops.push_back({"layer_norm", [](Rng& r) {
    const auto rows = rdim(r, 1, 4), d = rdim(r, 2, 6);
    return gradcheck({rand_leaf({rows, d}, r), rand_leaf({d}, r), rand_leaf({d}, r)},
                     [](const auto& in) { return nm::layer_norm(in[0], in[1], in[2]); });
  }});
  ops.push_back({"embedding", [](Rng& r) {
    const auto v = rdim(r, 2, 6), d = rdim(r, 1, 4), n = rdim(r, 1, 6);
    std::vector<std::int64_t> ids(n);
    for (auto& id : ids) id = static_cast<std::int64_t>(r.below(v));
    return gradcheck({rand_leaf({v, d}, r)},
                     [ids, n](const auto& in) { return nm::embedding(in[0], ids, {n}); });
  }});
  ops.push_back({"dropout", [](Rng& r) {
    const std::uint64_t seed = r.next_u64();
    return gradcheck({rand_leaf({rdim(r, 1, 10)}, r)}, [seed](const auto& in) {
      Rng local(seed);
      return nm::dropout(in[0], 0.3, local);
    });
  }});
  ops.push_back({"sum", [](Rng& r) {
    return gradcheck({rand_leaf({rdim(r, 1, 4), rdim(r, 1, 4)}, r)}, [](const auto& in) { return nm::sum(in[0]); });
  }});
  ops.push_back({"mean", [](Rng& r) {
    return gradcheck({rand_leaf({rdim(r, 1, 4), rdim(r, 1, 4)}, r)}, [](const auto& in) { return nm::mean(in[0]); });
  }});
  ops.push_back({"cross_entropy", [](Rng& r) {
    const auto n = rdim(r, 1, 6), k = rdim(r, 2, 5);
    std::vector<std::int64_t> labels(n);
    for (auto& y : labels) y = r.bernoulli(0.2) ? numerics::kIgnoreIndex : static_cast<std::int64_t>(r.below(k));
    labels[0] = static_cast<std::int64_t>(r.below(k));
    return gradcheck({rand_leaf({n, k}, r, 2.0)},
                     [labels](const auto& in) { return nm::cross_entropy(in[0], labels); });
  }});
  ops.push_back({"composite_tanh_matmul_layernorm", [](Rng& r) {
    const auto m = rdim(r, 1, 4), k = rdim(r, 2, 5), n = rdim(r, 3, 6);
    return gradcheck({rand_leaf({m, k}, r), rand_leaf({k, n}, r), rand_leaf({n}, r), rand_leaf({n}, r)},
                     [](const auto& in) {
                       auto h = nm::tanh(nm::matmul(in[0], in[1]));
                       return nm::layer_norm(nm::add(h, in[2]), in[3], in[2]);
                     });
  }});
  return ops;
}

}  // namespace mtlforge::testing
