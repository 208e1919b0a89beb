#include "mtlforge/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "mtlforge/error.hpp"

namespace mtlforge::numerics {

namespace {

using detail::Node;

Node& input(Node& self, std::size_t i) { return *self.inputs[i]; }

// Returns the trailing-broadcast inner size, or throws.
std::size_t broadcast_inner(const Tensor& a, const Tensor& b, const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool suffix = sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  if (!suffix) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(sb) + " onto " +
                         shape_str(sa));
  }
  return b.numel();
}

void check_finite_input(const Tensor& x, const char* op) {
  for (double v : x.data()) {
    if (std::isnan(v)) throw NumericError(std::string(op) + ": NaN in input");
  }
}

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* c = C + i * n;
    const double* a = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[p];
      if (av == 0.0) continue;
      const double* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// dA[m,k] += dC[m,n] * B[k,n]^T
void gemm_nt(const double* dC, const double* B, double* dA, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* g = dC + i * n;
    double* out = dA + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* b = B + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += g[j] * b[j];
      out[p] += acc;
    }
  }
}

// dB[k,n] += A[m,k]^T * dC[m,n]
void gemm_tn(const double* A, const double* dC, double* dB, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    const double* g = dC + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[p];
      if (av == 0.0) continue;
      double* out = dB + p * n;
      for (std::size_t j = 0; j < n; ++j) out[j] += av * g[j];
    }
  }
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <typename F, typename D>
Tensor unary(const Tensor& x, F f, D df) {
  std::vector<double> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return Tensor::make_result(x.shape(), std::move(out), {x}, [df](Node& self) {
    Node& a = input(self, 0);
    a.ensure_grad();
    for (std::size_t i = 0; i < a.data.size(); ++i) {
      a.grad[i] += self.grad[i] * df(a.data[i], self.data[i]);
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.rank() < b.rank()) return add(b, a);
  const std::size_t inner = broadcast_inner(a, b, "add");
  auto da = a.data();
  auto db = b.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i % inner];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [inner](Node& self) {
    Node& x = input(self, 0);
    Node& y = input(self, 1);
    if (x.requires_grad) {
      x.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += self.grad[i];
    }
    if (y.requires_grad) {
      y.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) y.grad[i % inner] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const std::size_t inner = broadcast_inner(a, b, "sub");
  auto da = a.data();
  auto db = b.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i % inner];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [inner](Node& self) {
    Node& x = input(self, 0);
    Node& y = input(self, 1);
    if (x.requires_grad) {
      x.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += self.grad[i];
    }
    if (y.requires_grad) {
      y.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) y.grad[i % inner] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.rank() < b.rank()) return mul(b, a);
  const std::size_t inner = broadcast_inner(a, b, "mul");
  auto da = a.data();
  auto db = b.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i % inner];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [inner](Node& self) {
    Node& x = input(self, 0);
    Node& y = input(self, 1);
    if (x.requires_grad) {
      x.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += self.grad[i] * y.data[i % inner];
    }
    if (y.requires_grad) {
      y.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) y.grad[i % inner] += self.grad[i] * x.data[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  auto da = a.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * factor;
  return Tensor::make_result(a.shape(), std::move(out), {a}, [factor](Node& self) {
    Node& x = input(self, 0);
    x.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += self.grad[i] * factor;
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto mismatch = [&] {
    return DimensionError("matmul: shape mismatch " + shape_str(sa) + " x " + shape_str(sb));
  };
  if (sa.size() < 2 || sb.size() < 2) throw mismatch();

  std::size_t batch = 1, m = 0, k = 0, n = 0;
  bool batched = false;
  Shape out_shape;
  if (sb.size() == 2) {
    k = sb[0];
    n = sb[1];
    if (sa.back() != k) throw mismatch();
    m = a.numel() / k;
    out_shape.assign(sa.begin(), sa.end() - 1);
    out_shape.push_back(n);
  } else if (sa.size() == 3 && sb.size() == 3) {
    if (sa[0] != sb[0] || sa[2] != sb[1]) throw mismatch();
    batched = true;
    batch = sa[0];
    m = sa[1];
    k = sa[2];
    n = sb[2];
    out_shape = {batch, m, n};
  } else {
    throw mismatch();
  }

  std::vector<double> out(batch * m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t s = 0; s < batch; ++s) {
    gemm_nn(A + s * m * k, B + (batched ? s * k * n : 0), out.data() + s * m * n, m, k, n);
  }
  return Tensor::make_result(std::move(out_shape), std::move(out), {a, b},
                             [batch, m, k, n, batched](Node& self) {
    Node& x = input(self, 0);
    Node& y = input(self, 1);
    const double* g = self.grad.data();
    if (x.requires_grad) {
      x.ensure_grad();
      for (std::size_t s = 0; s < batch; ++s) {
        gemm_nt(g + s * m * n, y.data.data() + (batched ? s * k * n : 0), x.grad.data() + s * m * k,
                m, k, n);
      }
    }
    if (y.requires_grad) {
      y.ensure_grad();
      for (std::size_t s = 0; s < batch; ++s) {
        gemm_tn(x.data.data() + s * m * k, g + s * m * n, y.grad.data() + (batched ? s * k * n : 0),
                m, k, n);
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw DimensionError("transpose: need rank >= 2, got " + shape_str(a.shape()));
  std::vector<std::size_t> axes(a.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(a, axes);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return Tensor::make_result(std::move(shape), std::move(out), {a}, [](Node& self) {
    Node& x = input(self, 0);
    x.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const Shape& s = a.shape();
  const std::size_t r = s.size();
  std::vector<bool> used(r, false);
  if (axes.size() != r) throw DimensionError("permute: axes do not match shape " + shape_str(s));
  for (std::size_t ax : axes) {
    if (ax >= r || used[ax]) throw DimensionError("permute: invalid axis list for " + shape_str(s));
    used[ax] = true;
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * s[i];
  Shape out_shape(r);
  std::vector<std::size_t> strides(r);  // input stride for each output axis
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = s[axes[i]];
    strides[i] = in_strides[axes[i]];
  }
  // map[out_index] = in_index
  const std::size_t total = a.numel();
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < total; ++o) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * strides[i];
    map[o] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  auto in = a.data();
  std::vector<double> out(total);
  for (std::size_t o = 0; o < total; ++o) out[o] = in[map[o]];
  return Tensor::make_result(std::move(out_shape), std::move(out), {a},
                             [map = std::move(map)](Node& self) {
    Node& x = input(self, 0);
    x.ensure_grad();
    for (std::size_t o = 0; o < map.size(); ++o) x.grad[map[o]] += self.grad[o];
  });
}

Tensor select(const Tensor& a, std::size_t axis, std::size_t index) {
  const Shape& s = a.shape();
  if (axis >= s.size() || index >= s[axis]) {
    throw DimensionError("select: index " + std::to_string(index) + " on axis " +
                         std::to_string(axis) + " out of range for " + shape_str(s));
  }
  const AxisSplit sp = split_at(s, axis);
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out_shape.push_back(s[i]);
  }
  auto in = a.data();
  std::vector<double> out(sp.outer * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t j = 0; j < sp.inner; ++j) {
      out[o * sp.inner + j] = in[(o * sp.len + index) * sp.inner + j];
    }
  }
  return Tensor::make_result(std::move(out_shape), std::move(out), {a}, [sp, index](Node& self) {
    Node& x = input(self, 0);
    x.ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t j = 0; j < sp.inner; ++j) {
        x.grad[(o * sp.len + index) * sp.inner + j] += self.grad[o * sp.inner + j];
      }
    }
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(s));
  }
  check_finite_input(x, "softmax");
  const AxisSplit sp = split_at(s, axis);
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t j = 0; j < sp.inner; ++j) {
      const std::size_t base = o * sp.len * sp.inner + j;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t t = 0; t < sp.len; ++t) mx = std::max(mx, in[base + t * sp.inner]);
      if (!std::isfinite(mx)) throw NumericError("softmax: slice has no finite entries");
      double total = 0.0;
      for (std::size_t t = 0; t < sp.len; ++t) {
        const double e = std::exp(in[base + t * sp.inner] - mx);
        out[base + t * sp.inner] = e;
        total += e;
      }
      for (std::size_t t = 0; t < sp.len; ++t) out[base + t * sp.inner] /= total;
    }
  }
  return Tensor::make_result(s, std::move(out), {x}, [sp](Node& self) {
    Node& a = input(self, 0);
    a.ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t j = 0; j < sp.inner; ++j) {
        const std::size_t base = o * sp.len * sp.inner + j;
        double dot = 0.0;
        for (std::size_t t = 0; t < sp.len; ++t) {
          const std::size_t i = base + t * sp.inner;
          dot += self.grad[i] * self.data[i];
        }
        for (std::size_t t = 0; t < sp.len; ++t) {
          const std::size_t i = base + t * sp.inner;
          a.grad[i] += self.data[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

Tensor gelu(const Tensor& x) {
  // tanh approximation
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return unary(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v))); },
      [](double v, double) {
        const double u = c * (v + 0.044715 * v * v * v);
        const double t = std::tanh(u);
        const double du = c * (1.0 + 3.0 * 0.044715 * v * v);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const Shape& s = x.shape();
  if (s.empty()) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = s.back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                         shape_str(bias.shape()) + " do not match input " + shape_str(s));
  }
  const std::size_t rows = x.numel() / d;
  auto in = x.data();
  auto g = gain.data();
  auto b = bias.data();
  std::vector<double> out(in.size());
  std::vector<double> xhat(in.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * g[j] + b[j];
    }
  }
  return Tensor::make_result(s, std::move(out), {x, gain, bias},
                             [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
    Node& xn = input(self, 0);
    Node& gn = input(self, 1);
    Node& bn = input(self, 2);
    if (gn.requires_grad) {
      gn.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gn.grad[i % d] += self.grad[i] * xhat[i];
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn.grad[i % d] += self.grad[i];
    }
    if (xn.requires_grad) {
      xn.ensure_grad();
      const double inv_d = 1.0 / static_cast<double>(d);
      for (std::size_t r = 0; r < rows; ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = self.grad[r * d + j] * gn.data[j];
          m1 += dh;
          m2 += dh * xhat[r * d + j];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = self.grad[r * d + j] * gn.data[j];
          xn.grad[r * d + j] += inv_std[r] * (dh - m1 - xhat[r * d + j] * m2);
        }
      }
    }
  });
}

Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids, const Shape& ids_shape) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  if (shape_numel(ids_shape) != ids.size()) {
    throw DimensionError("embedding: ids shape " + shape_str(ids_shape) + " does not match " +
                         std::to_string(ids.size()) + " ids");
  }
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  for (std::int64_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw RangeError("embedding: id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
  }
  auto t = table.data();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(t.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(d);
  std::vector<std::int64_t> idv(ids.begin(), ids.end());
  return Tensor::make_result(std::move(out_shape), std::move(out), {table},
                             [d, idv = std::move(idv)](Node& self) {
    Node& tb = input(self, 0);
    tb.ensure_grad();
    for (std::size_t i = 0; i < idv.size(); ++i) {
      double* row = tb.grad.data() + idv[i] * static_cast<std::int64_t>(d);
      for (std::size_t j = 0; j < d; ++j) row[j] += self.grad[i * d + j];
    }
  });
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ContractError("dropout: p must be in [0,1)");
  if (p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = rng.uniform() < p ? 0.0 : keep_scale;
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * mask[i];
  return Tensor::make_result(x.shape(), std::move(out), {x}, [mask = std::move(mask)](Node& self) {
    Node& a = input(self, 0);
    a.ensure_grad();
    for (std::size_t i = 0; i < mask.size(); ++i) a.grad[i] += self.grad[i] * mask[i];
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return Tensor::make_result({}, {total}, {x}, [](Node& self) {
    Node& a = input(self, 0);
    a.ensure_grad();
    for (double& g : a.grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> labels,
                     std::int64_t ignore_index) {
  if (logits.rank() != 2) {
    throw DimensionError("cross_entropy: logits must be [n,K], got " + shape_str(logits.shape()));
  }
  const std::size_t n = logits.dim(0);
  const std::size_t k = logits.dim(1);
  if (labels.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  }
  check_finite_input(logits, "cross_entropy");
  std::size_t count = 0;
  for (std::int64_t y : labels) {
    if (y == ignore_index) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw ContractError("cross_entropy: label " + std::to_string(y) + " outside [0," +
                          std::to_string(k) + ")");
    }
    ++count;
  }
  if (count == 0) throw ContractError("cross_entropy: every position is ignored, loss undefined");

  auto in = logits.data();
  std::vector<double> probs(n * k, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] == ignore_index) continue;
    const double* row = in.data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[labels[r]];
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] = std::exp(row[j] - lse);
  }
  const double inv = 1.0 / static_cast<double>(count);
  std::vector<std::int64_t> lab(labels.begin(), labels.end());
  return Tensor::make_result({}, {total * inv}, {logits},
                             [n, k, inv, ignore_index, probs = std::move(probs), lab = std::move(lab)](Node& self) {
    Node& a = input(self, 0);
    a.ensure_grad();
    const double g = self.grad[0] * inv;
    for (std::size_t r = 0; r < n; ++r) {
      if (lab[r] == ignore_index) continue;
      for (std::size_t j = 0; j < k; ++j) a.grad[r * k + j] += g * probs[r * k + j];
      a.grad[r * k + static_cast<std::size_t>(lab[r])] -= g;
    }
  });
}

}  // namespace mtlforge::numerics
