#pragma once

// Differentiable kernels. The set is closed over what the generator, the
// graph convolution and the recurrent cell need: matmul with batch
// broadcasting, elementwise arithmetic with suffix broadcasting, the three
// activations, last-axis concat, last-two-axis transpose, reshape/select and
// a few fused reductions.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dgcrn/error.hpp"
#include "dgcrn/tensor.hpp"

namespace dgcrn {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using CMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MMap = Eigen::Map<RowMat<T>>;

inline bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// b must equal a, be a trailing suffix of a, or hold a single value.
template <class T>
void check_suffix(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (b.size() == 1 || is_suffix(a.shape(), b.shape())) return;
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) +
                       " onto " + shape_str(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (b.size() > a.size()) return add(b, a);
  detail::check_suffix("add", a, b);
  const std::size_t n = a.size(), nb = b.size();
  std::vector<T> out(a.data().begin(), a.data().end());
  const T* bv = b.data().data();
  if (nb == n) {
    for (std::size_t i = 0; i < n; ++i) out[i] += bv[i];
  } else {
    for (std::size_t i = 0; i < n; i += nb)
      for (std::size_t j = 0; j < nb; ++j) out[i + j] += bv[j];
  }
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [n, nb](Node<T>& self) {
    const auto& g = self.grad;
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& ga = pa.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (pb.requires_grad) {
      auto& gb = pb.ensure_grad();
      for (std::size_t i = 0; i < n; i += nb)
        for (std::size_t j = 0; j < nb; ++j) gb[j] += g[i + j];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_suffix("sub", a, b);
  const std::size_t n = a.size(), nb = b.size();
  std::vector<T> out(a.data().begin(), a.data().end());
  const T* bv = b.data().data();
  for (std::size_t i = 0; i < n; i += nb)
    for (std::size_t j = 0; j < nb; ++j) out[i + j] -= bv[j];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [n, nb](Node<T>& self) {
    const auto& g = self.grad;
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& ga = pa.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (pb.requires_grad) {
      auto& gb = pb.ensure_grad();
      for (std::size_t i = 0; i < n; i += nb)
        for (std::size_t j = 0; j < nb; ++j) gb[j] -= g[i + j];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (b.size() > a.size()) return mul(b, a);
  detail::check_suffix("mul", a, b);
  const std::size_t n = a.size(), nb = b.size();
  std::vector<T> out(n);
  const T* av = a.data().data();
  const T* bv = b.data().data();
  for (std::size_t i = 0; i < n; i += nb)
    for (std::size_t j = 0; j < nb; ++j) out[i + j] = av[i + j] * bv[j];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [n, nb](Node<T>& self) {
    const auto& g = self.grad;
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& av = pa.value;
    const auto& bv = pb.value;
    if (pa.requires_grad) {
      auto& ga = pa.ensure_grad();
      for (std::size_t i = 0; i < n; i += nb)
        for (std::size_t j = 0; j < nb; ++j) ga[i + j] += g[i + j] * bv[j];
    }
    if (pb.requires_grad) {
      auto& gb = pb.ensure_grad();
      for (std::size_t i = 0; i < n; i += nb)
        for (std::size_t j = 0; j < nb; ++j) gb[j] += g[i + j] * av[i + j];
    }
  });
}

// out[b,n,d] = filter[b,n,d] * embedding[n,d]; the embedding is shared over
// every leading axis of the filter.
template <class T>
Tensor<T> broadcast_hadamard(const Tensor<T>& filter, const Tensor<T>& embedding) {
  if (embedding.rank() != 2 || filter.rank() < 2 ||
      filter.dim(-2) != embedding.dim(0) || filter.dim(-1) != embedding.dim(1)) {
    throw DimensionError("broadcast_hadamard: filter " + shape_str(filter.shape()) +
                         " does not end in embedding shape " + shape_str(embedding.shape()));
  }
  return mul(filter, embedding);
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  return make_result<T>(a.shape(), std::move(out), {&a}, [s](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& gp = p.ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i] * s;
  });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += s;
  return make_result<T>(a.shape(), std::move(out), {&a}, [](Node<T>& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Activations

template <class T>
Tensor<T> tanh(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  const T* av = a.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(av[i]);
  return make_result<T>(a.shape(), std::move(out), {&a}, [](Node<T>& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) {
      const T y = self.value[i];
      gp[i] += self.grad[i] * (T(1) - y * y);
    }
  });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  const T* av = a.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = av[i];
    if (x >= 0) {
      out[i] = T(1) / (T(1) + std::exp(-x));
    } else {
      const T e = std::exp(x);
      out[i] = e / (T(1) + e);
    }
  }
  return make_result<T>(a.shape(), std::move(out), {&a}, [](Node<T>& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) {
      const T y = self.value[i];
      gp[i] += self.grad[i] * y * (T(1) - y);
    }
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  const T* av = a.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
  return make_result<T>(a.shape(), std::move(out), {&a}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& gp = p.ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i)
      if (p.value[i] > T(0)) gp[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Matrix product over the last two axes; leading axes broadcast numpy-style.

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k) {
    throw DimensionError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const Shape abatch(a.shape().begin(), a.shape().end() - 2);
  const Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  const std::size_t r = std::max(abatch.size(), bbatch.size());
  Shape obatch(r);
  std::vector<std::size_t> astride(r, 0), bstride(r, 0);
  {
    std::size_t as = 1, bs = 1;
    for (std::size_t i = 0; i < r; ++i) {
      const std::size_t pos = r - 1 - i;
      const std::size_t ad = i < abatch.size() ? abatch[abatch.size() - 1 - i] : 1;
      const std::size_t bd = i < bbatch.size() ? bbatch[bbatch.size() - 1 - i] : 1;
      if (ad != bd && ad != 1 && bd != 1) {
        throw DimensionError("matmul: batch dimensions do not broadcast: " +
                             shape_str(a.shape()) + " x " + shape_str(b.shape()));
      }
      obatch[pos] = std::max(ad, bd);
      astride[pos] = ad == 1 ? 0 : as;
      bstride[pos] = bd == 1 ? 0 : bs;
      as *= ad;
      bs *= bd;
    }
  }
  const std::size_t batches = numel(obatch);
  std::vector<std::size_t> aoff(batches), boff(batches);
  {
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t t = 0; t < batches; ++t) {
      std::size_t ao = 0, bo = 0;
      for (std::size_t i = 0; i < r; ++i) {
        ao += idx[i] * astride[i];
        bo += idx[i] * bstride[i];
      }
      aoff[t] = ao * m * k;
      boff[t] = bo * k * n;
      for (std::size_t i = r; i-- > 0;) {
        if (++idx[i] < obatch[i]) break;
        idx[i] = 0;
      }
    }
  }
  // A batch-free right operand against an unbroadcast left one collapses to a
  // single tall GEMM.
  const bool tall = numel(bbatch) == 1 && numel(abatch) == batches;
  const bool small = false;

  Shape oshape = obatch;
  oshape.push_back(m);
  oshape.push_back(n);
  std::vector<T> out(batches * m * n);
  using CMap = detail::CMap<T>;
  using MMap = detail::MMap<T>;
  const T* av = a.data().data();
  const T* bv = b.data().data();
  if (tall) {
    const auto rows = static_cast<Eigen::Index>(batches * m);
    MMap(out.data(), rows, n).noalias() = CMap(av, rows, k) * CMap(bv, k, n);
  } else if (small) {
    // Blocked GEMM packing costs more than it saves at this size.
    for (std::size_t t = 0; t < batches; ++t) {
      MMap(out.data() + t * m * n, m, n).noalias() =
          CMap(av + aoff[t], m, k).lazyProduct(CMap(bv + boff[t], k, n));
    }
  } else {
    for (std::size_t t = 0; t < batches; ++t) {
      MMap(out.data() + t * m * n, m, n).noalias() =
          CMap(av + aoff[t], m, k) * CMap(bv + boff[t], k, n);
    }
  }
  return make_result<T>(
      std::move(oshape), std::move(out), {&a, &b},
      [m, k, n, batches, tall, small, aoff = std::move(aoff), boff = std::move(boff)](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const T* g = self.grad.data();
        if (tall) {
          const auto rows = static_cast<Eigen::Index>(batches * m);
          if (pa.requires_grad) {
            MMap(pa.ensure_grad().data(), rows, k).noalias() +=
                CMap(g, rows, n) * CMap(pb.value.data(), k, n).transpose();
          }
          if (pb.requires_grad) {
            MMap(pb.ensure_grad().data(), k, n).noalias() +=
                CMap(pa.value.data(), rows, k).transpose() * CMap(g, rows, n);
          }
          return;
        }
        if (pa.requires_grad) {
          T* ga = pa.ensure_grad().data();
          for (std::size_t t = 0; t < batches; ++t) {
            auto dst = MMap(ga + aoff[t], m, k);
            auto lhs = CMap(g + t * m * n, m, n);
            auto rhs = CMap(pb.value.data() + boff[t], k, n).transpose();
            if (small) {
              dst.noalias() += lhs.lazyProduct(rhs);
            } else {
              dst.noalias() += lhs * rhs;
            }
          }
        }
        if (pb.requires_grad) {
          T* gb = pb.ensure_grad().data();
          for (std::size_t t = 0; t < batches; ++t) {
            auto dst = MMap(gb + boff[t], k, n);
            auto lhs = CMap(pa.value.data() + aoff[t], m, k).transpose();
            auto rhs = CMap(g + t * m * n, m, n);
            if (small) {
              dst.noalias() += lhs.lazyProduct(rhs);
            } else {
              dst.noalias() += lhs * rhs;
            }
          }
        }
      });
}

// x·W + bias over the last axis.
template <class T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return add(matmul(x, weight), bias);
}

// ---------------------------------------------------------------------------
// Layout

template <class T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  if (a.rank() < 2) throw DimensionError("transpose_last2 on " + shape_str(a.shape()));
  const std::size_t m = a.dim(-2), n = a.dim(-1), batches = a.size() / (m * n);
  Shape oshape = a.shape();
  std::swap(oshape[oshape.size() - 1], oshape[oshape.size() - 2]);
  std::vector<T> out(a.size());
  const T* av = a.data().data();
  for (std::size_t t = 0; t < batches; ++t) {
    const std::size_t off = t * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[off + j * m + i] = av[off + i * n + j];
  }
  return make_result<T>(std::move(oshape), std::move(out), {&a}, [m, n, batches](Node<T>& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (std::size_t t = 0; t < batches; ++t) {
      const std::size_t off = t * m * n;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gp[off + i * n + j] += self.grad[off + j * m + i];
    }
  });
}

template <class T>
Tensor<T> concat_last(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_last of nothing");
  const Shape& ref = parts.front().shape();
  const Shape lead(ref.begin(), ref.end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != ref.size() || !std::equal(lead.begin(), lead.end(), s.begin())) {
      throw DimensionError("concat_last: " + shape_str(s) + " does not match " + shape_str(ref));
    }
    widths.push_back(s.back());
    total += s.back();
  }
  const std::size_t rows = numel(lead);
  std::vector<T> out(rows * total);
  std::size_t col = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const T* src = parts[pi].data().data();
    const std::size_t w = widths[pi];
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(src + r * w, w, out.data() + r * total + col);
    col += w;
  }
  Shape oshape = lead;
  oshape.push_back(total);
  return make_result<T>(std::move(oshape), std::move(out), parts,
                        [rows, total, widths = std::move(widths)](Node<T>& self) {
                          std::size_t c = 0;
                          for (std::size_t pi = 0; pi < widths.size(); ++pi) {
                            auto& p = *self.parents[pi];
                            const std::size_t w = widths[pi];
                            if (p.requires_grad) {
                              auto& gp = p.ensure_grad();
                              for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t j = 0; j < w; ++j)
                                  gp[r * w + j] += self.grad[r * total + c + j];
                            }
                            c += w;
                          }
                        });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_result<T>(std::move(shape), std::move(out), {&a}, [](Node<T>& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
  });
}

// Drops `axis` by taking entry `index` along it.
template <class T>
Tensor<T> select(const Tensor<T>& a, std::size_t axis, std::size_t index) {
  if (axis >= a.rank() || index >= a.shape()[axis]) {
    throw DimensionError("select axis " + std::to_string(axis) + " index " +
                         std::to_string(index) + " on " + shape_str(a.shape()));
  }
  const Shape& s = a.shape();
  const std::size_t outer = numel(Shape(s.begin(), s.begin() + static_cast<long>(axis)));
  const std::size_t inner = numel(Shape(s.begin() + static_cast<long>(axis) + 1, s.end()));
  const std::size_t extent = s[axis];
  Shape oshape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) oshape.push_back(s[i]);
  if (oshape.empty()) oshape.push_back(1);
  std::vector<T> out(outer * inner);
  const T* av = a.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(av + (o * extent + index) * inner, inner, out.data() + o * inner);
  return make_result<T>(std::move(oshape), std::move(out), {&a},
                        [outer, inner, extent, index](Node<T>& self) {
                          auto& gp = self.parents[0]->ensure_grad();
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t i = 0; i < inner; ++i)
                              gp[(o * extent + index) * inner + i] += self.grad[o * inner + i];
                        });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  return make_result<T>(Shape{1}, {s}, {&a}, [](Node<T>& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (auto& g : gp) g += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// Sum of mask[i] * |pred[i] - target[i]| as a scalar. Entries with mask 0 are
// ignored entirely (their targets may be NaN).
template <class T>
Tensor<T> masked_abs_sum(const Tensor<T>& pred, std::span<const T> target,
                         std::span<const T> mask) {
  if (target.size() != pred.size() || mask.size() != pred.size()) {
    throw DimensionError("masked_abs_sum: prediction " + shape_str(pred.shape()) +
                         " vs target/mask of size " + std::to_string(target.size()) + "/" +
                         std::to_string(mask.size()));
  }
  const std::size_t n = pred.size();
  std::vector<T> sign(n, T(0));
  T s = 0;
  const T* pv = pred.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i] == T(0)) continue;
    const T d = pv[i] - target[i];
    s += mask[i] * std::abs(d);
    sign[i] = d > 0 ? mask[i] : (d < 0 ? -mask[i] : T(0));
  }
  return make_result<T>(Shape{1}, {s}, {&pred}, [sign = std::move(sign)](Node<T>& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[0] * sign[i];
  });
}

// ---------------------------------------------------------------------------
// Graph normalisation

// For a stack of square matrices: out = D^-1 (raw + I), D_ii = 1 + sum_j raw_ij.
template <class T>
Tensor<T> normalize_with_self_loop(const Tensor<T>& raw) {
  if (raw.rank() < 2 || raw.dim(-1) != raw.dim(-2)) {
    throw DimensionError("normalize_with_self_loop needs square trailing axes, got " +
                         shape_str(raw.shape()));
  }
  const std::size_t n = raw.dim(-1), batches = raw.size() / (n * n);
  std::vector<T> out(raw.size());
  std::vector<T> inv_deg(batches * n);
  const T* rv = raw.data().data();
  for (std::size_t t = 0; t < batches; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = rv + (t * n + i) * n;
      T deg = 1;
      for (std::size_t j = 0; j < n; ++j) deg += row[j];
      const T inv = T(1) / deg;
      inv_deg[t * n + i] = inv;
      T* orow = out.data() + (t * n + i) * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] = (row[j] + (i == j ? T(1) : T(0))) * inv;
    }
  }
  return make_result<T>(raw.shape(), std::move(out), {&raw},
                        [n, batches, inv_deg = std::move(inv_deg)](Node<T>& self) {
                          auto& gp = self.parents[0]->ensure_grad();
                          for (std::size_t r = 0; r < batches * n; ++r) {
                            const T* g = self.grad.data() + r * n;
                            const T* o = self.value.data() + r * n;
                            T dot = 0;
                            for (std::size_t j = 0; j < n; ++j) dot += g[j] * o[j];
                            const T inv = inv_deg[r];
                            for (std::size_t j = 0; j < n; ++j) gp[r * n + j] += (g[j] - dot) * inv;
                          }
                        });
}

}  // namespace dgcrn
