#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "kari/numcore/tensor.hpp"

namespace kari::nc {

namespace detail {

inline void accumulate(std::vector<double>* dst, std::span<const double> src) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

// c[m,n] += a[m,k] * b[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,k] += a[m,n] * b[k,n]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      // Four independent partial sums; fixed order keeps results deterministic.
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      std::size_t j = 0;
      for (; j + 4 <= n; j += 4) {
        s0 += arow[j] * brow[j];
        s1 += arow[j + 1] * brow[j + 1];
        s2 += arow[j + 2] * brow[j + 2];
        s3 += arow[j + 3] * brow[j + 3];
      }
      for (; j < n; ++j) s0 += arow[j] * brow[j];
      c[i * k + p] += (s0 + s1) + (s2 + s3);
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline std::size_t last_dim(const Tensor& t) {
  if (!(t.rank() >= 1)) throw ShapeError("operation requires rank >= 1, got scalar");
  return t.shape().back();
}

}  // namespace detail

/// Batched matrix product over the last two dimensions. Leading (batch)
/// dimensions must agree or be 1 on one side.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (!(a.rank() >= 2 && b.rank() >= 2)) throw ShapeError("matmul requires rank >= 2 operands, got " + shape_str(a.shape()) +
                                              " and " + shape_str(b.shape()));
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (!(k == kb)) throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));

  const std::size_t batch_rank = std::max(a.rank(), b.rank()) - 2;
  Shape abatch(batch_rank, 1), bbatch(batch_rank, 1), obatch(batch_rank, 1);
  std::copy(a.shape().begin(), a.shape().end() - 2, abatch.begin() + (batch_rank - (a.rank() - 2)));
  std::copy(b.shape().begin(), b.shape().end() - 2, bbatch.begin() + (batch_rank - (b.rank() - 2)));
  for (std::size_t i = 0; i < batch_rank; ++i) {
    if (!(abatch[i] == bbatch[i] || abatch[i] == 1 || bbatch[i] == 1)) throw ShapeError("matmul batch dimensions do not broadcast: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    obatch[i] = std::max(abatch[i], bbatch[i]);
  }
  const std::size_t nbatch = shape_numel(obatch);

  // Offsets of each output batch into a and b.
  std::vector<std::size_t> aoff(nbatch), boff(nbatch);
  for (std::size_t flat = 0; flat < nbatch; ++flat) {
    std::size_t rem = flat, ai = 0, bi = 0, astride = 1, bstride = 1;
    for (std::size_t d = batch_rank; d-- > 0;) {
      const std::size_t idx = rem % obatch[d];
      rem /= obatch[d];
      if (abatch[d] != 1) ai += idx * astride;
      if (bbatch[d] != 1) bi += idx * bstride;
      astride *= abatch[d];
      bstride *= bbatch[d];
    }
    aoff[flat] = ai * m * k;
    boff[flat] = bi * k * n;
  }

  Shape out_shape = obatch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(nbatch * m * n, 0.0);
  for (std::size_t t = 0; t < nbatch; ++t)
    detail::gemm_nn(a.data().data() + aoff[t], b.data().data() + boff[t], out.data() + t * m * n, m, k, n);

  return Tensor::from_op(std::move(out_shape), std::move(out), {a, b},
                         [a, b, m, k, n, nbatch, aoff, boff](std::span<const double> g,
                                                              std::span<std::vector<double>*> pg) {
                           for (std::size_t t = 0; t < nbatch; ++t) {
                             const double* gc = g.data() + t * m * n;
                             if (pg[0]) detail::gemm_nt(gc, b.data().data() + boff[t], pg[0]->data() + aoff[t], m, n, k);
                             if (pg[1]) detail::gemm_tn(a.data().data() + aoff[t], gc, pg[1]->data() + boff[t], m, k, n);
                           }
                         });
}

/// Swaps the last two dimensions.
inline Tensor transpose(const Tensor& x) {
  if (!(x.rank() >= 2)) throw ShapeError("transpose requires rank >= 2, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(x.rank() - 2), c = x.dim(x.rank() - 1);
  const std::size_t nb = x.numel() / std::max<std::size_t>(r * c, 1);
  Shape s = x.shape();
  std::swap(s[s.size() - 1], s[s.size() - 2]);
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t t = 0; t < nb; ++t)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[t * r * c + j * r + i] = xd[t * r * c + i * c + j];
  return Tensor::from_op(std::move(s), std::move(out), {x},
                         [r, c, nb](std::span<const double> g, std::span<std::vector<double>*> pg) {
                           auto& dx = *pg[0];
                           for (std::size_t t = 0; t < nb; ++t)
                             for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < c; ++j) dx[t * r * c + i * c + j] += g[t * r * c + j * r + i];
                         });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (!(shape_numel(shape) == x.numel())) throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  return Tensor::from_op(std::move(shape), x.values(), {x},
                         [](std::span<const double> g, std::span<std::vector<double>*> pg) {
                           detail::accumulate(pg[0], g);
                         });
}

/// Elementwise sum. `b` may also be a trailing-suffix shape of `a`, in which
/// case it is broadcast over the leading dimensions.
inline Tensor add(const Tensor& a, const Tensor& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const bool same = as == bs;
  const bool suffix = !same && bs.size() <= as.size() && std::equal(bs.begin(), bs.end(), as.end() - bs.size());
  if (!(same || suffix)) throw ShapeError("add shapes incompatible: " + shape_str(as) + " + " + shape_str(bs));
  const std::size_t nb = b.numel();
  std::vector<double> out(a.values());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i % nb];
  return Tensor::from_op(as, std::move(out), {a, b}, [nb](std::span<const double> g, std::span<std::vector<double>*> pg) {
    detail::accumulate(pg[0], g);
    if (pg[1]) {
      auto& db = *pg[1];
      for (std::size_t i = 0; i < g.size(); ++i) db[i % nb] += g[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) throw ShapeError("sub shapes differ: " + shape_str(a.shape()) + " - " + shape_str(b.shape()));
  std::vector<double> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [](std::span<const double> g, std::span<std::vector<double>*> pg) {
    detail::accumulate(pg[0], g);
    if (pg[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] -= g[i];
  });
}

/// Elementwise product of equal shapes.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) throw ShapeError("mul shapes differ: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b},
                         [a, b](std::span<const double> g, std::span<std::vector<double>*> pg) {
                           if (pg[0])
                             for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * b[i];
                           if (pg[1])
                             for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += g[i] * a[i];
                         });
}

inline Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.values());
  for (auto& v : out) v *= c;
  return Tensor::from_op(x.shape(), std::move(out), {x}, [c](std::span<const double> g, std::span<std::vector<double>*> pg) {
    auto& dx = *pg[0];
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += c * g[i];
  });
}

/// When set, every relu appends its activation mask (1 where x > 0) here.
/// Used by the kink-aware gradient checker; null in normal operation.
inline thread_local std::vector<std::uint8_t>* relu_mask_sink = nullptr;

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.values());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  if (relu_mask_sink)
    for (double v : x.data()) relu_mask_sink->push_back(v > 0.0 ? 1 : 0);
  return Tensor::from_op(x.shape(), std::move(out), {x}, [x](std::span<const double> g, std::span<std::vector<double>*> pg) {
    auto& dx = *pg[0];
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) dx[i] += g[i];
  });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::from_op(Shape{}, {s}, {x}, [](std::span<const double> g, std::span<std::vector<double>*> pg) {
    for (auto& v : *pg[0]) v += g[0];
  });
}

/// Softmax over the last dimension, max-subtracted.
inline Tensor softmax_rows(const Tensor& x) {
  const std::size_t n = detail::last_dim(x);
  const std::size_t rows = n ? x.numel() / n : 0;
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  std::vector<double> saved = out;
  return Tensor::from_op(x.shape(), std::move(out), {x},
                         [n, rows, y = std::move(saved)](std::span<const double> g, std::span<std::vector<double>*> pg) {
                           auto& dx = *pg[0];
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double* yr = y.data() + r * n;
                             const double* gr = g.data() + r * n;
                             double dot = 0.0;
                             for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
                             for (std::size_t j = 0; j < n; ++j) dx[r * n + j] += yr[j] * (gr[j] - dot);
                           }
                         });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes the last dimension to zero mean / unit variance, then applies
/// gain and bias (both of length equal to the last dimension).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const std::size_t n = detail::last_dim(x);
  if (!(gain.shape() == Shape{n} && bias.shape() == Shape{n})) throw ShapeError("layer_norm gain/bias must have shape (" + std::to_string(n) + ")");
  const std::size_t rows = x.numel() / n;
  std::vector<double> xhat(x.numel()), inv_std(rows), out(x.numel());
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += in[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (in[j] - mean) * inv_std[r];
      out[r * n + j] = xhat[r * n + j] * gain[j] + bias[j];
    }
  }
  return Tensor::from_op(
      x.shape(), std::move(out), {x, gain, bias},
      [n, rows, gain, xhat = std::move(xhat), inv_std = std::move(inv_std)](std::span<const double> g,
                                                                            std::span<std::vector<double>*> pg) {
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * n;
          const double* xh = xhat.data() + r * n;
          if (pg[1])
            for (std::size_t j = 0; j < n; ++j) (*pg[1])[j] += gr[j] * xh[j];
          if (pg[2])
            for (std::size_t j = 0; j < n; ++j) (*pg[2])[j] += gr[j];
          if (pg[0]) {
            double mean_dxh = 0.0, mean_dxh_xh = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dxh = gr[j] * gain[j];
              mean_dxh += dxh;
              mean_dxh_xh += dxh * xh[j];
            }
            mean_dxh /= static_cast<double>(n);
            mean_dxh_xh /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j)
              (*pg[0])[r * n + j] += inv_std[r] * (gr[j] * gain[j] - mean_dxh - xh[j] * mean_dxh_xh);
          }
        }
      });
}

/// x[..., in] * weight[in, out] + bias[out]
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const std::size_t in = detail::last_dim(x);
  if (!(weight.rank() == 2 && weight.dim(0) == in)) throw ShapeError("linear weight " + shape_str(weight.shape()) + " does not accept input " + shape_str(x.shape()));
  const std::size_t out_dim = weight.dim(1);
  if (!(bias.shape() == Shape{out_dim})) throw ShapeError("linear bias must have shape (" + std::to_string(out_dim) + ")");
  const std::size_t rows = x.numel() / in;
  std::vector<double> out(rows * out_dim);
  for (std::size_t r = 0; r < rows; ++r) std::copy(bias.data().begin(), bias.data().end(), out.begin() + r * out_dim);
  detail::gemm_nn(x.data().data(), weight.data().data(), out.data(), rows, in, out_dim);
  Shape s = x.shape();
  s.back() = out_dim;
  return Tensor::from_op(std::move(s), std::move(out), {x, weight, bias},
                         [x, weight, rows, in, out_dim](std::span<const double> g, std::span<std::vector<double>*> pg) {
                           if (pg[0]) detail::gemm_nt(g.data(), weight.data().data(), pg[0]->data(), rows, out_dim, in);
                           if (pg[1]) detail::gemm_tn(x.data().data(), g.data(), pg[1]->data(), rows, in, out_dim);
                           if (pg[2])
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t j = 0; j < out_dim; ++j) (*pg[2])[j] += g[r * out_dim + j];
                         });
}

/// Concatenates along the last dimension; leading dimensions must agree.
inline Tensor concat_last(const std::vector<Tensor>& parts) {
  if (!(!parts.empty())) throw ShapeError("concat_last of zero tensors");
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (!(p.rank() == lead.size() + 1 && std::equal(lead.begin(), lead.end(), p.shape().begin()))) throw ShapeError("concat_last leading dimensions differ: " + shape_str(p.shape()));
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  const std::size_t rows = shape_numel(lead);
  std::vector<double> out(rows * total);
  for (std::size_t r = 0, off = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const auto d = parts[i].data();
      std::copy(d.begin() + r * widths[i], d.begin() + (r + 1) * widths[i], out.begin() + off);
      off += widths[i];
    }
  }
  Shape s = lead;
  s.push_back(total);
  return Tensor::from_op(std::move(s), std::move(out), parts,
                         [rows, total, widths](std::span<const double> g, std::span<std::vector<double>*> pg) {
                           for (std::size_t r = 0; r < rows; ++r) {
                             std::size_t off = r * total;
                             for (std::size_t i = 0; i < widths.size(); ++i) {
                               if (pg[i])
                                 for (std::size_t j = 0; j < widths[i]; ++j) (*pg[i])[r * widths[i] + j] += g[off + j];
                               off += widths[i];
                             }
                           }
                         });
}

/// Mean over one axis; the axis is removed from the result shape.
inline Tensor mean_over_axis(const Tensor& x, std::size_t axis) {
  if (!(axis < x.rank())) throw ShapeError("mean_over_axis axis " + std::to_string(axis) + " out of range for " +
                                       shape_str(x.shape()));
  const auto& s = x.shape();
  const std::size_t outer = shape_numel(Shape(s.begin(), s.begin() + axis));
  const std::size_t len = s[axis];
  const std::size_t inner = shape_numel(Shape(s.begin() + axis + 1, s.end()));
  if (!(len > 0)) throw ShapeError("mean_over_axis over an empty axis");
  std::vector<double> out(outer * inner, 0.0);
  const auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xd[(o * len + l) * inner + i];
  const double inv = 1.0 / static_cast<double>(len);
  for (auto& v : out) v *= inv;
  Shape rs = s;
  rs.erase(rs.begin() + static_cast<std::ptrdiff_t>(axis));
  return Tensor::from_op(std::move(rs), std::move(out), {x},
                         [outer, len, inner, inv](std::span<const double> g, std::span<std::vector<double>*> pg) {
                           auto& dx = *pg[0];
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t l = 0; l < len; ++l)
                               for (std::size_t i = 0; i < inner; ++i) dx[(o * len + l) * inner + i] += g[o * inner + i] * inv;
                         });
}

/// Global spatial mean of an H x W x C map, giving a C vector.
inline Tensor mean_pool_2d(const Tensor& x) {
  if (!(x.rank() == 3)) throw ShapeError("mean_pool_2d expects H x W x C input, got " + shape_str(x.shape()));
  return mean_over_axis(reshape(x, Shape{x.dim(0) * x.dim(1), x.dim(2)}), 0);
}

/// Mean over rows of -log softmax(logits)[target]. A 1-D logits vector takes
/// exactly one target.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets) {
  const std::size_t c = detail::last_dim(logits);
  if (!(c >= 2)) throw ShapeError("cross_entropy needs at least 2 classes");
  const std::size_t rows = logits.numel() / c;
  if (!(targets.size() == rows)) throw ShapeError("cross_entropy expects " + std::to_string(rows) + " targets, got " +
                                              std::to_string(targets.size()));
  for (auto t : targets)
    if (t >= c) throw ValidationError("cross_entropy target " + std::to_string(t) + " out of range for " +
                                      std::to_string(c) + " classes");
  std::vector<double> probs(logits.numel());
  double loss = 0.0;
  const auto ld = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = ld.data() + r * c;
    const double mx = *std::max_element(in, in + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (probs[r * c + j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= z;
    loss += -(in[targets[r]] - mx - std::log(z));
  }
  const double inv = 1.0 / static_cast<double>(rows);
  return Tensor::from_op(Shape{}, {loss * inv}, {logits},
                         [c, rows, inv, targets, probs = std::move(probs)](std::span<const double> g,
                                                                           std::span<std::vector<double>*> pg) {
                           auto& dx = *pg[0];
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t j = 0; j < c; ++j)
                               dx[r * c + j] += g[0] * inv * (probs[r * c + j] - (j == targets[r] ? 1.0 : 0.0));
                         });
}

}  // namespace kari::nc
