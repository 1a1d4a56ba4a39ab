#pragma once

// Differentiable primitives over basic_tensor<T>.
//
// Broadcasting is limited to two forms: a scalar (numel 1) right operand, and
// a right operand whose shape is a suffix of the left operand's shape
// (leading-axis broadcast). Everything else needs an explicit `broadcast` or
// `reshape`. Reductions accumulate in double.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "maskforge/parallel.hpp"
#include "maskforge/tensor.hpp"

namespace maskforge {

namespace detail {

template <class T>
using row_matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
std::size_t broadcast_period(std::string_view op, const basic_tensor<T>& a, const basic_tensor<T>& b) {
  if (b.numel() == 1) return 1;
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (bs.size() <= as.size() && std::equal(bs.rbegin(), bs.rend(), as.rbegin())) return b.numel();
  throw_shape(op, as, bs);
}

// Double-precision sums with a fixed accumulation order.
template <class T, class Term>
double ordered_sum(std::size_t n, Term&& term) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  const std::size_t whole = n & ~std::size_t(7);
  for (std::size_t i = 0; i < whole; i += 8)
    for (std::size_t k = 0; k < 8; ++k) acc[k] += static_cast<double>(term(i + k));
  for (std::size_t i = whole; i < n; ++i) acc[i - whole] += static_cast<double>(term(i));
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

/// g[j] += sum over i with i % period == j of term(i).
template <class Buffer, class Term>
void reduce_into(Buffer& g, std::size_t period, std::size_t n, Term&& term) {
  if (period == n) {
    for (std::size_t i = 0; i < n; ++i) g[i] += static_cast<typename Buffer::value_type>(term(i));
    return;
  }
  if (period == 1) {
    g[0] += static_cast<typename Buffer::value_type>(ordered_sum<double>(n, term));
    return;
  }
  std::vector<double> acc(period, 0.0);
  for (std::size_t base = 0; base < n; base += period)
    for (std::size_t j = 0; j < period; ++j) acc[j] += static_cast<double>(term(base + j));
  for (std::size_t j = 0; j < period; ++j) g[j] += static_cast<typename Buffer::value_type>(acc[j]);
}

/// t.grad[i] (+)= value(i) for i in [0, n); assigns when the buffer is fresh.
template <class T, class Fn>
void write_grad(basic_tensor<T>& t, Fn&& value) {
  bool fresh = false;
  T* g = t.grad_slot(fresh);
  const std::size_t n = t.numel();
  if (fresh)
    for (std::size_t i = 0; i < n; ++i) g[i] = value(i);
  else
    for (std::size_t i = 0; i < n; ++i) g[i] += value(i);
}

/// fn(i, i % period) for i in [0, n), without the division.
template <class Fn>
void for_periodic(std::size_t n, std::size_t period, Fn&& fn) {
  if (period == 0) return;
  if (period == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i, 0);
    return;
  }
  for (std::size_t base = 0; base < n; base += period)
    for (std::size_t j = 0; j < period; ++j) fn(base + j, j);
}

inline std::size_t normalize_axis(std::string_view op, std::ptrdiff_t axis, std::size_t rank) {
  const auto r = static_cast<std::ptrdiff_t>(rank);
  const auto a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw shape_error(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

struct axis_split {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline axis_split split_at(const shape_t& s, std::size_t axis) {
  axis_split r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <class T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// Elementwise transcendental kernels only ever see 64-byte aligned maps whose
// length is a multiple of 16, so every element takes the same vector path
// whatever the buffer address. Eigen otherwise peels unaligned heads through
// scalar code, which changes low bits. Unaligned edges go through a scratch block.
template <class T, class Fn>
void blocked_map(const T* x, T* out, std::size_t n, Fn&& fn) {
  constexpr std::size_t W = 16;
  using amap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>, Eigen::Aligned64>;
  using camap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>, Eigen::Aligned64>;
  alignas(64) T buf[W];
  auto edge = [&](std::size_t i, std::size_t m) {
    std::fill(buf, buf + W, T(0));
    std::copy(x + i, x + i + m, buf);
    amap(buf, W) = fn(camap(buf, W));
    std::copy(buf, buf + m, out + i);
  };
  // Same misalignment for x and out lets the middle run in place of the edges.
  const auto mis = [](const T* p) { return reinterpret_cast<std::uintptr_t>(p) % 64; };
  if (mis(x) != mis(out) || mis(x) % sizeof(T) != 0) {
    for (std::size_t i = 0; i < n; i += W) edge(i, std::min(W, n - i));
    return;
  }
  const std::size_t head = std::min(mis(x) ? (64 - mis(x)) / sizeof(T) : 0, n);
  const std::size_t body = (n - head) / W * W;
  if (body) amap(out + head, static_cast<Eigen::Index>(body)) = fn(camap(x + head, static_cast<Eigen::Index>(body)));
  // head and tail share scratch blocks
  const std::size_t tail = head + body;
  const std::size_t edges = head + (n - tail);
  for (std::size_t e = 0; e < edges; e += W) {
    const std::size_t m = std::min(W, edges - e);
    auto at = [&](std::size_t k) { return e + k < head ? e + k : tail + (e + k - head); };
    std::fill(buf, buf + W, T(0));
    for (std::size_t k = 0; k < m; ++k) buf[k] = x[at(k)];
    amap(buf, W) = fn(camap(buf, W));
    for (std::size_t k = 0; k < m; ++k) out[at(k)] = buf[k];
  }
}

/// out = 1 / (1 + exp(-x)), vectorized. exp overflow yields exactly 0.
template <class T>
void sigmoid_into(const T* x, T* out, std::size_t n) {
  blocked_map(x, out, n, [](const auto& b) { return (T(1) + (-b).exp()).inverse(); });
}

/// out = exp(x - shift).
template <class T>
void exp_into(const T* x, T* out, std::size_t n, T shift) {
  blocked_map(x, out, n, [shift](const auto& b) { return (b - shift).exp(); });
}


}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
basic_tensor<T> add(basic_tensor<T> a, basic_tensor<T> b) {
  if (a.numel() < b.numel()) std::swap(a, b);
  const std::size_t m = detail::broadcast_period("add", a, b);
  check_finite("add", a);
  check_finite("add", b);
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  if (m == n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
  } else if (m > 0) {
    detail::for_periodic(n, m, [&](std::size_t i, std::size_t j) { out[i] = av[i] + bv[j]; });
  }
  return record(basic_tensor<T>(a.shape(), std::move(out)), op_tag::add, {a, b}, [a, b, m](detail::tensor_impl<T>& o) mutable {
    const auto& g = o.grad;
    if (a.requires_grad()) {
      detail::write_grad(a, [&](std::size_t i) { return g[i]; });
    }
    if (b.requires_grad() && m > 0) detail::reduce_into(b.grad_buffer(), m, g.size(), [&](std::size_t i) { return g[i]; });
  });
}

template <class T>
basic_tensor<T> sub(basic_tensor<T> a, basic_tensor<T> b) {
  const std::size_t m = detail::broadcast_period("sub", a, b);
  check_finite("sub", a);
  check_finite("sub", b);
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  detail::for_periodic(n, m, [&](std::size_t i, std::size_t j) { out[i] = av[i] - bv[j]; });
  return record(basic_tensor<T>(a.shape(), std::move(out)), op_tag::sub, {a, b}, [a, b, m](detail::tensor_impl<T>& o) mutable {
    const auto& g = o.grad;
    if (a.requires_grad()) {
      detail::write_grad(a, [&](std::size_t i) { return g[i]; });
    }
    if (b.requires_grad() && m > 0) detail::reduce_into(b.grad_buffer(), m, g.size(), [&](std::size_t i) { return -g[i]; });
  });
}

template <class T>
basic_tensor<T> mul(basic_tensor<T> a, basic_tensor<T> b) {
  if (a.numel() < b.numel()) std::swap(a, b);
  const std::size_t m = detail::broadcast_period("mul", a, b);
  check_finite("mul", a);
  check_finite("mul", b);
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  if (m == n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];
  } else if (m > 0) {
    if (m == 1)
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[0];
    else
      detail::for_periodic(n, m, [&](std::size_t i, std::size_t j) { out[i] = av[i] * bv[j]; });
  }
  return record(basic_tensor<T>(a.shape(), std::move(out)), op_tag::mul, {a, b}, [a, b, m](detail::tensor_impl<T>& o) mutable {
    const auto& g = o.grad;
    const auto& av = a.values();
    const auto& bv = b.values();
    if (a.requires_grad() && m > 0) {
      bool fresh = false;
      T* ga = a.grad_slot(fresh);
      const T* gp = g.data();
      const T* bp = bv.data();
      if (m == 1) {
        const T c = bp[0];
        if (fresh)
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] = gp[i] * c;
        else
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += gp[i] * c;
      } else
      for (std::size_t base = 0; base < g.size(); base += m) {
        if (fresh)
          for (std::size_t j = 0; j < m; ++j) ga[base + j] = gp[base + j] * bp[j];
        else
          for (std::size_t j = 0; j < m; ++j) ga[base + j] += gp[base + j] * bp[j];
      }
    }
    if (b.requires_grad() && m > 0) {
      const T* gp = g.data();
      const T* ap = av.data();
      detail::reduce_into(b.grad_buffer(), m, g.size(), [gp, ap](std::size_t i) { return static_cast<double>(gp[i]) * ap[i]; });
    }
  });
}

template <class T>
basic_tensor<T> scale(basic_tensor<T> a, double factor) {
  check_finite("scale", a);
  const T c = static_cast<T>(factor);
  std::vector<T> out(a.values());
  for (auto& v : out) v *= c;
  return record(basic_tensor<T>(a.shape(), std::move(out)), op_tag::scale, {a}, [a, c](detail::tensor_impl<T>& o) mutable {
    detail::write_grad(a, [&](std::size_t i) { return c * o.grad[i]; });
  });
}

template <class T>
basic_tensor<T> shift(basic_tensor<T> a, double offset) {
  check_finite("shift", a);
  const T c = static_cast<T>(offset);
  std::vector<T> out(a.values());
  for (auto& v : out) v += c;
  return record(basic_tensor<T>(a.shape(), std::move(out)), op_tag::shift, {a}, [a](detail::tensor_impl<T>& o) mutable {
    auto& ga = a.grad_buffer();
    for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
  });
}

template <class T>
basic_tensor<T> sigmoid(basic_tensor<T> a) {
  check_finite("sigmoid", a);
  std::vector<T> out(a.numel());
  detail::sigmoid_into(a.values().data(), out.data(), out.size());
  return record(basic_tensor<T>(a.shape(), std::move(out)), op_tag::sigmoid, {a}, [a](detail::tensor_impl<T>& o) mutable {
    detail::write_grad(a, [&](std::size_t i) { return o.grad[i] * o.data[i] * (T(1) - o.data[i]); });
  });
}

template <class T>
basic_tensor<T> swish(basic_tensor<T> a) {
  check_finite("swish", a);
  std::vector<T> out(a.numel());
  const auto& av = a.values();
  detail::sigmoid_into(av.data(), out.data(), out.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= av[i];
  return record(basic_tensor<T>(a.shape(), std::move(out)), op_tag::swish, {a}, [a](detail::tensor_impl<T>& o) mutable {
    const auto& av = a.values();
    std::vector<T> s(av.size());
    detail::sigmoid_into(av.data(), s.data(), s.size());
    detail::write_grad(a, [&](std::size_t i) { return o.grad[i] * s[i] * (T(1) + av[i] * (T(1) - s[i])); });
  });
}

template <class T>
basic_tensor<T> relu(basic_tensor<T> a) {
  check_finite("relu", a);
  std::vector<T> out(a.values());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return record(basic_tensor<T>(a.shape(), std::move(out)), op_tag::relu, {a}, [a](detail::tensor_impl<T>& o) mutable {
    auto& ga = a.grad_buffer();
    const auto& av = a.values();
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      if (av[i] > T(0)) ga[i] += o.grad[i];
  });
}

/// Gradient 1 strictly inside (lo, hi), 0 at or beyond either bound.
template <class T>
basic_tensor<T> clamp(basic_tensor<T> a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo must not exceed hi");
  check_finite("clamp", a);
  const T l = static_cast<T>(lo), h = static_cast<T>(hi);
  std::vector<T> out(a.values());
  for (auto& v : out) v = std::min(h, std::max(l, v));
  return record(basic_tensor<T>(a.shape(), std::move(out)), op_tag::clamp, {a}, [a, l, h](detail::tensor_impl<T>& o) mutable {
    auto& ga = a.grad_buffer();
    const auto& av = a.values();
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      if (av[i] > l && av[i] < h) ga[i] += o.grad[i];
  });
}

/// Splits the last axis in half: first * sigmoid(second).
template <class T>
basic_tensor<T> glu(basic_tensor<T> a) {
  if (a.rank() == 0 || a.dim(-1) % 2 != 0) throw shape_error("glu: last axis must be even, got " + shape_str(a.shape()));
  check_finite("glu", a);
  const std::size_t c2 = a.dim(-1), c = c2 / 2, rows = c2 ? a.numel() / c2 : 0;
  shape_t s = a.shape();
  s.back() = c;
  std::vector<T> out(rows * c);
  const auto& av = a.values();
  // gate halves gathered into one contiguous buffer for a single sigmoid pass
  std::vector<T> sig(rows * c);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(av.data() + r * c2 + c, c, sig.data() + r * c);
  detail::sigmoid_into(sig.data(), sig.data(), sig.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = sig[r * c + j] * av[r * c2 + j];
  const bool keep = grad_enabled() && a.requires_grad();
  return record(basic_tensor<T>(s, std::move(out)), op_tag::glu, {a},
                [a, rows, c, c2, sig = keep ? std::move(sig) : std::vector<T>()](detail::tensor_impl<T>& o) mutable {
                  auto& ga = a.grad_buffer();
                  const auto& av = a.values();
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < c; ++j) {
                      const T g = o.grad[r * c + j];
                      const T x = av[r * c2 + j];
                      const T sj = sig[r * c + j];
                      ga[r * c2 + j] += g * sj;
                      ga[r * c2 + c + j] += g * x * sj * (T(1) - sj);
                    }
                });
}

// ---------------------------------------------------------------- shape ops

template <class T>
basic_tensor<T> reshape(basic_tensor<T> a, shape_t shape) {
  if (numel_of(shape) != a.numel()) throw_shape("reshape", a.shape(), shape);
  return record(basic_tensor<T>(std::move(shape), a.values()), op_tag::reshape, {a}, [a](detail::tensor_impl<T>& o) mutable {
    detail::write_grad(a, [&](std::size_t i) { return o.grad[i]; });
  });
}

/// General axis permutation; out.shape[i] = a.shape[perm[i]].
template <class T>
basic_tensor<T> transpose(basic_tensor<T> a, std::vector<std::size_t> perm) {
  const std::size_t r = a.rank();
  if (perm.size() != r) throw shape_error("transpose: permutation rank mismatch for " + shape_str(a.shape()));
  std::vector<bool> used(r, false);
  for (auto p : perm) {
    if (p >= r || used[p]) throw shape_error("transpose: invalid permutation for " + shape_str(a.shape()));
    used[p] = true;
  }
  shape_t os(r);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * a.shape()[i];
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    os[i] = a.shape()[perm[i]];
    src_stride[i] = in_strides[perm[i]];
  }
  // Trailing axes left in place move as contiguous blocks.
  std::size_t lead = r, block = 1;
  while (lead > 0 && perm[lead - 1] == lead - 1) block *= a.shape()[--lead];
  const std::size_t n = a.numel();
  const std::size_t blocks = block ? n / block : 0;
  // map[out_block] = first input index of that block
  std::vector<std::size_t> map(blocks);
  std::vector<std::size_t> idx(lead, 0);
  std::size_t src = 0;
  for (std::size_t k = 0; k < blocks; ++k) {
    map[k] = src;
    for (std::size_t ax = lead; ax-- > 0;) {
      if (++idx[ax] < os[ax]) {
        src += src_stride[ax];
        break;
      }
      src -= src_stride[ax] * (os[ax] - 1);
      idx[ax] = 0;
    }
  }
  std::vector<T> out(n);
  const auto& av = a.values();
  for (std::size_t k = 0; k < blocks; ++k) std::copy_n(av.data() + map[k], block, out.data() + k * block);
  return record(basic_tensor<T>(os, std::move(out)), op_tag::transpose, {a},
                [a, block, map = std::move(map)](detail::tensor_impl<T>& o) mutable {
                  bool fresh = false;
                  T* ga = a.grad_slot(fresh);
                  const T* g = o.grad.data();
                  for (std::size_t k = 0; k < map.size(); ++k) {
                    T* dst = ga + map[k];
                    const T* src = g + k * block;
                    if (fresh)
                      std::copy_n(src, block, dst);
                    else
                      for (std::size_t j = 0; j < block; ++j) dst[j] += src[j];
                  }
                });
}

/// Swaps the last two axes.
template <class T>
basic_tensor<T> transpose(basic_tensor<T> a) {
  if (a.rank() < 2) throw shape_error("transpose: rank < 2 for " + shape_str(a.shape()));
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return transpose(std::move(a), std::move(perm));
}

template <class T>
basic_tensor<T> concat(std::vector<basic_tensor<T>> parts, std::ptrdiff_t axis_in) {
  if (parts.empty()) throw shape_error("concat: no inputs");
  const std::size_t axis = detail::normalize_axis("concat", axis_in, parts[0].rank());
  shape_t os = parts[0].shape();
  os[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != os.size()) throw_shape("concat", parts[0].shape(), p.shape());
    for (std::size_t i = 0; i < os.size(); ++i)
      if (i != axis && p.shape()[i] != os[i]) throw_shape("concat", parts[0].shape(), p.shape());
    os[axis] += p.shape()[axis];
  }
  const auto split = detail::split_at(os, axis);
  std::vector<T> out(numel_of(os));
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t len = p.shape()[axis];
    const auto& pv = p.values();
    for (std::size_t o = 0; o < split.outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * len * split.inner), len * split.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * split.len + offset) * split.inner));
    offsets.push_back(offset);
    offset += len;
  }
  auto inputs = parts;
  return record(basic_tensor<T>(os, std::move(out)), op_tag::concat, std::move(inputs),
                [parts, offsets, split, axis](detail::tensor_impl<T>& o) mutable {
                  for (std::size_t k = 0; k < parts.size(); ++k) {
                    if (!parts[k].requires_grad()) continue;
                    auto& gp = parts[k].grad_buffer();
                    const std::size_t len = parts[k].shape()[axis];
                    for (std::size_t q = 0; q < split.outer; ++q)
                      for (std::size_t j = 0; j < len * split.inner; ++j)
                        gp[q * len * split.inner + j] += o.grad[(q * split.len + offsets[k]) * split.inner + j];
                  }
                });
}

template <class T>
basic_tensor<T> slice(basic_tensor<T> a, std::ptrdiff_t axis_in, std::size_t begin, std::size_t end) {
  const std::size_t axis = detail::normalize_axis("slice", axis_in, a.rank());
  if (begin > end || end > a.shape()[axis])
    throw shape_error("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " + shape_str(a.shape()));
  const auto split = detail::split_at(a.shape(), axis);
  shape_t os = a.shape();
  os[axis] = end - begin;
  const std::size_t len = end - begin;
  std::vector<T> out(numel_of(os));
  const auto& av = a.values();
  for (std::size_t o = 0; o < split.outer; ++o)
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>((o * split.len + begin) * split.inner), len * split.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * len * split.inner));
  return record(basic_tensor<T>(os, std::move(out)), op_tag::slice, {a}, [a, split, begin, len](detail::tensor_impl<T>& o) mutable {
    auto& ga = a.grad_buffer();
    for (std::size_t q = 0; q < split.outer; ++q)
      for (std::size_t j = 0; j < len * split.inner; ++j) ga[(q * split.len + begin) * split.inner + j] += o.grad[q * len * split.inner + j];
  });
}

/// Right-aligned expansion: each source axis must be 1 or equal to the target.
template <class T>
basic_tensor<T> broadcast(basic_tensor<T> a, shape_t shape) {
  const auto& as = a.shape();
  if (as.size() > shape.size()) throw_shape("broadcast", as, shape);
  const std::size_t pad = shape.size() - as.size();
  shape_t src(shape.size(), 1);
  for (std::size_t i = 0; i < as.size(); ++i) {
    src[pad + i] = as[i];
    if (as[i] != 1 && as[i] != shape[pad + i]) throw_shape("broadcast", as, shape);
  }
  const std::size_t r = shape.size();
  std::vector<std::size_t> src_stride(r, 0);
  std::size_t stride = 1;
  for (std::size_t i = r; i-- > 0;) {
    src_stride[i] = src[i] == 1 ? 0 : stride;
    stride *= src[i];
  }
  const std::size_t n = numel_of(shape);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t s = 0;
  for (std::size_t k = 0; k < n; ++k) {
    map[k] = s;
    for (std::size_t ax = r; ax-- > 0;) {
      if (++idx[ax] < shape[ax]) {
        s += src_stride[ax];
        break;
      }
      s -= src_stride[ax] * (shape[ax] - 1);
      idx[ax] = 0;
    }
  }
  std::vector<T> out(n);
  const auto& av = a.values();
  for (std::size_t k = 0; k < n; ++k) out[k] = av[map[k]];
  return record(basic_tensor<T>(std::move(shape), std::move(out)), op_tag::broadcast, {a},
                [a, map = std::move(map)](detail::tensor_impl<T>& o) mutable {
                  std::vector<double> acc(a.numel(), 0.0);
                  for (std::size_t k = 0; k < o.grad.size(); ++k) acc[map[k]] += o.grad[k];
                  auto& ga = a.grad_buffer();
                  for (std::size_t i = 0; i < acc.size(); ++i) ga[i] += static_cast<T>(acc[i]);
                });
}

/// Selects positions `index` along the last axis.
template <class T>
basic_tensor<T> gather_last(basic_tensor<T> a, std::vector<std::size_t> index) {
  if (a.rank() == 0) throw shape_error("gather: scalar input");
  const std::size_t w = a.dim(-1), m = index.size(), rows = w ? a.numel() / w : 0;
  for (auto i : index)
    if (i >= w) throw shape_error("gather: index " + std::to_string(i) + " out of range for " + shape_str(a.shape()));
  shape_t os = a.shape();
  os.back() = m;
  std::vector<T> out(rows * m);
  const auto& av = a.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] = av[r * w + index[j]];
  return record(basic_tensor<T>(os, std::move(out)), op_tag::gather, {a}, [a, index, rows, w](detail::tensor_impl<T>& o) mutable {
    auto& ga = a.grad_buffer();
    const std::size_t m = index.size();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < m; ++j) ga[r * w + index[j]] += o.grad[r * m + j];
  });
}

/// Places the last axis of `a` at positions `index` of a zero tensor of width `width`.
template <class T>
basic_tensor<T> scatter_last(basic_tensor<T> a, std::vector<std::size_t> index, std::size_t width) {
  if (a.rank() == 0 || a.dim(-1) != index.size()) throw shape_error("scatter: last axis of " + shape_str(a.shape()) + " must match index length");
  for (auto i : index)
    if (i >= width) throw shape_error("scatter: index out of range");
  const std::size_t m = index.size();
  shape_t os = a.shape();
  os.back() = width;
  const std::size_t rows = numel_of(os) / std::max<std::size_t>(width, 1);
  std::vector<T> out(numel_of(os), T(0));
  const auto& av = a.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < m; ++j) out[r * width + index[j]] += av[r * m + j];
  return record(basic_tensor<T>(os, std::move(out)), op_tag::scatter, {a}, [a, index, rows, width](detail::tensor_impl<T>& o) mutable {
    auto& ga = a.grad_buffer();
    const std::size_t m = index.size();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < m; ++j) ga[r * m + j] += o.grad[r * width + index[j]];
  });
}

// ---------------------------------------------------------------- linear algebra

/// a[..., m, k] @ b[k, n], or batched a[..., m, k] @ b[..., k, n] with equal leading axes.
template <class T>
basic_tensor<T> matmul(basic_tensor<T> a, basic_tensor<T> b) {
  using mat = detail::row_matrix<T>;
  if (a.rank() < 2 || b.rank() < 2) throw_shape("matmul", a.shape(), b.shape());
  check_finite("matmul", a);
  check_finite("matmul", b);
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k) throw_shape("matmul", a.shape(), b.shape());
  std::size_t batches = 1;
  bool shared_rhs = b.rank() == 2;
  if (!shared_rhs) {
    if (a.rank() != b.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
      throw_shape("matmul", a.shape(), b.shape());
    batches = numel_of(shape_t(a.shape().begin(), a.shape().end() - 2));
  }
  shape_t os = a.shape();
  os.back() = n;
  std::vector<T> out(numel_of(os), T(0));
  const std::size_t rows = shared_rhs ? (k ? a.numel() / k : numel_of(os) / std::max<std::size_t>(n, 1)) : m;
  record_flops(2ull * batches * rows * k * n);
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  if (!out.empty() && k > 0) {
    if (shared_rhs) {
      Eigen::Map<const mat> A(a.values().data(), ei(rows), ei(k));
      Eigen::Map<const mat> B(b.values().data(), ei(k), ei(n));
      Eigen::Map<mat> C(out.data(), ei(rows), ei(n));
      C.noalias() = A * B;
    } else {
      parallel_for(batches, [&](std::size_t q) {
        Eigen::Map<const mat> A(a.values().data() + q * m * k, ei(m), ei(k));
        Eigen::Map<const mat> B(b.values().data() + q * k * n, ei(k), ei(n));
        Eigen::Map<mat> C(out.data() + q * m * n, ei(m), ei(n));
        C.noalias() = A * B;
      });
    }
  }
  return record(basic_tensor<T>(os, std::move(out)), op_tag::matmul, {a, b},
                [a, b, m, k, n, rows, batches, shared_rhs, ei](detail::tensor_impl<T>& o) mutable {
                  if (o.grad.empty() || k == 0) return;
                  if (shared_rhs) {
                    Eigen::Map<const mat> G(o.grad.data(), ei(rows), ei(n));
                    bool fresh = false;
                    if (a.requires_grad()) {
                      Eigen::Map<mat> GA(a.grad_slot(fresh), ei(rows), ei(k));
                      const auto prod = G * Eigen::Map<const mat>(b.values().data(), ei(k), ei(n)).transpose();
                      if (fresh) GA.noalias() = prod; else GA.noalias() += prod;
                    }
                    if (b.requires_grad()) {
                      Eigen::Map<mat> GB(b.grad_slot(fresh), ei(k), ei(n));
                      const auto prod = Eigen::Map<const mat>(a.values().data(), ei(rows), ei(k)).transpose() * G;
                      if (fresh) GB.noalias() = prod; else GB.noalias() += prod;
                    }
                    return;
                  }
                  bool fresh_a = false, fresh_b = false;
                  T* ga = a.requires_grad() ? a.grad_slot(fresh_a) : nullptr;
                  T* gb = b.requires_grad() ? b.grad_slot(fresh_b) : nullptr;
                  parallel_for(batches, [&](std::size_t q) {
                    Eigen::Map<const mat> G(o.grad.data() + q * m * n, ei(m), ei(n));
                    if (ga) {
                      Eigen::Map<mat> GA(ga + q * m * k, ei(m), ei(k));
                      const auto prod = G * Eigen::Map<const mat>(b.values().data() + q * k * n, ei(k), ei(n)).transpose();
                      if (fresh_a) GA.noalias() = prod; else GA.noalias() += prod;
                    }
                    if (gb) {
                      Eigen::Map<mat> GB(gb + q * k * n, ei(k), ei(n));
                      const auto prod = Eigen::Map<const mat>(a.values().data() + q * m * k, ei(m), ei(k)).transpose() * G;
                      if (fresh_b) GB.noalias() = prod; else GB.noalias() += prod;
                    }
                  });
                });
}

/// x[B, T, C] convolved per channel with w[C, k] along T, zero same-padding, k odd.
template <class T>
basic_tensor<T> depthwise_conv1d(basic_tensor<T> x, basic_tensor<T> w) {
  if (x.rank() != 3 || w.rank() != 2 || w.dim(0) != x.dim(2) || w.dim(1) % 2 == 0) throw_shape("depthwise_conv1d", x.shape(), w.shape());
  check_finite("depthwise_conv1d", x);
  check_finite("depthwise_conv1d", w);
  const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2), K = w.dim(1);
  const auto half = static_cast<std::ptrdiff_t>(K / 2);
  std::vector<T> out(x.numel(), T(0));
  record_flops(2ull * B * L * C * K);
  const auto& xv = x.values();
  const auto& wv = w.values();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t j = 0; j < K; ++j) {
        const auto src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(j) - half;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
        const T* xr = xv.data() + (b * L + static_cast<std::size_t>(src)) * C;
        T* orow = out.data() + (b * L + t) * C;
        for (std::size_t c = 0; c < C; ++c) orow[c] += wv[c * K + j] * xr[c];
      }
  return record(basic_tensor<T>(x.shape(), std::move(out)), op_tag::depthwise_conv1d, {x, w},
                [x, w, B, L, C, K, half](detail::tensor_impl<T>& o) mutable {
                  const auto& xv = x.values();
                  const auto& wv = w.values();
                  T* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
                  std::vector<double> gw(K * C, 0.0);  // [K, C] here, [C, K] in w
                  for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t t = 0; t < L; ++t)
                      for (std::size_t j = 0; j < K; ++j) {
                        const auto src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(j) - half;
                        if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
                        const std::size_t so = (b * L + static_cast<std::size_t>(src)) * C;
                        const T* g = o.grad.data() + (b * L + t) * C;
                        for (std::size_t c = 0; c < C; ++c) {
                          if (gx) gx[so + c] += g[c] * wv[c * K + j];
                          gw[j * C + c] += static_cast<double>(g[c]) * xv[so + c];
                        }
                      }
                  if (w.requires_grad()) {
                    auto& gwb = w.grad_buffer();
                    for (std::size_t c = 0; c < C; ++c)
                      for (std::size_t j = 0; j < K; ++j) gwb[c * K + j] += static_cast<T>(gw[j * C + c]);
                  }
                });
}

// ---------------------------------------------------------------- normalization

/// Layer norm over the last axis. `nominal_width` (>= last axis extent, 0 means
/// equal) treats the missing positions as zeros that enter the mean and
/// variance; a sliced model uses it to reproduce statistics of its full-width
/// parent whose pruned positions carry exact zeros.
template <class T>
basic_tensor<T> layer_norm(basic_tensor<T> x, basic_tensor<T> gamma, basic_tensor<T> beta, double eps = 1e-5,
                           std::size_t nominal_width = 0) {
  if (x.rank() == 0) throw shape_error("layer_norm: scalar input");
  const std::size_t n = x.dim(-1);
  if (gamma.shape() != shape_t{n}) throw_shape("layer_norm", x.shape(), gamma.shape());
  if (beta.shape() != shape_t{n}) throw_shape("layer_norm", x.shape(), beta.shape());
  const std::size_t N = nominal_width == 0 ? n : nominal_width;
  if (N < n || N == 0) throw shape_error("layer_norm: nominal width smaller than " + shape_str(x.shape()));
  check_finite("layer_norm", x);
  const std::size_t rows = n ? x.numel() / n : 0;
  std::vector<T> out(x.numel());
  std::vector<double> mean(rows), rstd(rows);
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  const double phantom = static_cast<double>(N - n);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * n;
    const double mu = detail::ordered_sum<T>(n, [&](std::size_t j) { return row[j]; }) / static_cast<double>(N);
    const double ss = detail::ordered_sum<T>(n, [&](std::size_t j) {
                        const double d = static_cast<double>(row[j]) - mu;
                        return d * d;
                      }) + phantom * mu * mu;
    const double rs = 1.0 / std::sqrt(ss / static_cast<double>(N) + eps);
    mean[r] = mu;
    rstd[r] = rs;
    const T m = static_cast<T>(mu), sc = static_cast<T>(rs);
    T* dst = out.data() + r * n;
    for (std::size_t j = 0; j < n; ++j) dst[j] = (row[j] - m) * sc * gv[j] + bv[j];
  }
  return record(basic_tensor<T>(x.shape(), std::move(out)), op_tag::layer_norm, {x, gamma, beta},
                [x, gamma, beta, n, N, rows, mean = std::move(mean), rstd = std::move(rstd)](detail::tensor_impl<T>& o) mutable {
                  const auto& xv = x.values();
                  const auto& gam = gamma.values();
                  bool fresh = false;
                  T* gx = x.requires_grad() ? x.grad_slot(fresh) : nullptr;
                  std::vector<double> ggam(n, 0.0), gbet(n, 0.0);
                  std::vector<T> xhat(n), dxhat(n);
                  const double inv = 1.0 / static_cast<double>(N);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const T* g = o.grad.data() + r * n;
                    const T* xr = xv.data() + r * n;
                    const T m = static_cast<T>(mean[r]), sc = static_cast<T>(rstd[r]);
                    for (std::size_t j = 0; j < n; ++j) {
                      xhat[j] = (xr[j] - m) * sc;
                      dxhat[j] = g[j] * gam[j];
                      ggam[j] += static_cast<double>(g[j] * xhat[j]);
                      gbet[j] += static_cast<double>(g[j]);
                    }
                    if (gx) {
                      const T a = static_cast<T>(detail::ordered_sum<T>(n, [&](std::size_t j) { return dxhat[j]; }) * inv);
                      const T b = static_cast<T>(detail::ordered_sum<T>(n, [&](std::size_t j) { return static_cast<double>(dxhat[j]) * xhat[j]; }) * inv);
                      T* dst = gx + r * n;
                      if (fresh)
                        for (std::size_t j = 0; j < n; ++j) dst[j] = sc * (dxhat[j] - a - xhat[j] * b);
                      else
                        for (std::size_t j = 0; j < n; ++j) dst[j] += sc * (dxhat[j] - a - xhat[j] * b);
                    }
                  }
                  if (gamma.requires_grad()) {
                    auto& gg = gamma.grad_buffer();
                    for (std::size_t j = 0; j < n; ++j) gg[j] += static_cast<T>(ggam[j]);
                  }
                  if (beta.requires_grad()) {
                    auto& gb = beta.grad_buffer();
                    for (std::size_t j = 0; j < n; ++j) gb[j] += static_cast<T>(gbet[j]);
                  }
                });
}

template <class T>
basic_tensor<T> softmax(basic_tensor<T> x, std::ptrdiff_t axis_in = -1) {
  const std::size_t axis = detail::normalize_axis("softmax", axis_in, x.rank());
  check_finite("softmax", x);
  const auto sp = detail::split_at(x.shape(), axis);
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  if (sp.inner == 1) {
    // contiguous rows: vectorized exp
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const T* in = xv.data() + o * sp.len;
      T* row = out.data() + o * sp.len;
      if (sp.len == 0) continue;
      const T mx = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(in, static_cast<Eigen::Index>(sp.len)).maxCoeff();
      detail::exp_into(in, row, sp.len, mx);
      const T inv = static_cast<T>(1.0 / detail::ordered_sum<T>(sp.len, [&](std::size_t j) { return row[j]; }));
      for (std::size_t j = 0; j < sp.len; ++j) row[j] *= inv;
    }
  } else
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < sp.len; ++j) mx = std::max(mx, xv[base + j * sp.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < sp.len; ++j) {
        const T e = std::exp(xv[base + j * sp.inner] - mx);
        out[base + j * sp.inner] = e;
        z += e;
      }
      const T inv = static_cast<T>(1.0 / z);
      for (std::size_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] *= inv;
    }
  return record(basic_tensor<T>(x.shape(), std::move(out)), op_tag::softmax, {x}, [x, sp](detail::tensor_impl<T>& o) mutable {
    auto& gx = x.grad_buffer();
    if (sp.inner == 1) {
      for (std::size_t q = 0; q < sp.outer; ++q) {
        const T* y = o.data.data() + q * sp.len;
        const T* g = o.grad.data() + q * sp.len;
        T* dst = gx.data() + q * sp.len;
        const T dot = static_cast<T>(detail::ordered_sum<T>(sp.len, [&](std::size_t j) { return static_cast<double>(y[j]) * g[j]; }));
        for (std::size_t j = 0; j < sp.len; ++j) dst[j] += y[j] * (g[j] - dot);
      }
      return;
    }
    for (std::size_t q = 0; q < sp.outer; ++q)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = q * sp.len * sp.inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < sp.len; ++j) dot += static_cast<double>(o.grad[base + j * sp.inner]) * o.data[base + j * sp.inner];
        for (std::size_t j = 0; j < sp.len; ++j) {
          const std::size_t p = base + j * sp.inner;
          gx[p] += static_cast<T>(o.data[p] * (o.grad[p] - dot));
        }
      }
  });
}

// ---------------------------------------------------------------- reductions and losses

template <class T>
basic_tensor<T> sum(basic_tensor<T> a) {
  check_finite("sum", a);
  const T* p = a.values().data();
  const double s = detail::ordered_sum<T>(a.numel(), [p](std::size_t i) { return p[i]; });
  return record(basic_tensor<T>::scalar(static_cast<T>(s)), op_tag::sum, {a}, [a](detail::tensor_impl<T>& o) mutable {
    auto& ga = a.grad_buffer();
    for (auto& g : ga) g += o.grad[0];
  });
}

template <class T>
basic_tensor<T> mean(basic_tensor<T> a) {
  if (a.numel() == 0) throw shape_error("mean: empty tensor");
  check_finite("mean", a);
  const T* p = a.values().data();
  const double s = detail::ordered_sum<T>(a.numel(), [p](std::size_t i) { return p[i]; });
  const double n = static_cast<double>(a.numel());
  return record(basic_tensor<T>::scalar(static_cast<T>(s / n)), op_tag::mean, {a}, [a, n](detail::tensor_impl<T>& o) mutable {
    auto& ga = a.grad_buffer();
    const T g = static_cast<T>(o.grad[0] / n);
    for (auto& v : ga) v += g;
  });
}

/// Mean over all elements of (a - b)^2.
template <class T>
basic_tensor<T> mse(basic_tensor<T> a, basic_tensor<T> b) {
  if (a.shape() != b.shape()) throw_shape("mse", a.shape(), b.shape());
  if (a.numel() == 0) throw shape_error("mse: empty tensors");
  check_finite("mse", a);
  check_finite("mse", b);
  const auto& av = a.values();
  const auto& bv = b.values();
  const double s = detail::ordered_sum<T>(av.size(), [&](std::size_t i) {
    const double d = static_cast<double>(av[i]) - bv[i];
    return d * d;
  });
  const double n = static_cast<double>(av.size());
  return record(basic_tensor<T>::scalar(static_cast<T>(s / n)), op_tag::mse, {a, b}, [a, b, n](detail::tensor_impl<T>& o) mutable {
    const double c = 2.0 * o.grad[0] / n;
    const auto& av = a.values();
    const auto& bv = b.values();
    if (a.requires_grad()) {
      auto& ga = a.grad_buffer();
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += static_cast<T>(c * (static_cast<double>(av[i]) - bv[i]));
    }
    if (b.requires_grad()) {
      auto& gb = b.grad_buffer();
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= static_cast<T>(c * (static_cast<double>(av[i]) - bv[i]));
    }
  });
}

/// Mean over rows of -log softmax(logits)[label]; logits [..., K], one label per row.
template <class T>
basic_tensor<T> cross_entropy_with_logits(basic_tensor<T> logits, std::span<const int> labels) {
  if (logits.rank() == 0) throw shape_error("cross_entropy_with_logits: scalar logits");
  const std::size_t K = logits.dim(-1);
  const std::size_t rows = K ? logits.numel() / K : 0;
  if (rows != labels.size() || rows == 0)
    throw shape_error("cross_entropy_with_logits: " + std::to_string(labels.size()) + " labels for logits " + shape_str(logits.shape()));
  check_finite("cross_entropy_with_logits", logits);
  const auto& lv = logits.values();
  std::vector<T> probs(lv.size());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= K) throw std::out_of_range("cross_entropy_with_logits: label out of range");
    const T* row = lv.data() + r * K;
    const T mx = *std::max_element(row, row + K);
    double z = 0.0;
    for (std::size_t j = 0; j < K; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    for (std::size_t j = 0; j < K; ++j) probs[r * K + j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)) / z);
    total += std::log(z) + mx - row[y];
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return record(basic_tensor<T>::scalar(static_cast<T>(total / static_cast<double>(rows))), op_tag::cross_entropy_with_logits, {logits},
                [logits, probs = std::move(probs), ys = std::move(ys), K, rows](detail::tensor_impl<T>& o) mutable {
                  auto& gl = logits.grad_buffer();
                  const T c = static_cast<T>(o.grad[0] / static_cast<double>(rows));
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < K; ++j)
                      gl[r * K + j] += c * (probs[r * K + j] - (static_cast<std::size_t>(ys[r]) == j ? T(1) : T(0)));
                });
}

}  // namespace maskforge
