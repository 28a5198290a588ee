#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "caga/tensor.hpp"

// Primitive differentiable operations. Every op computes eagerly and, when a
// tape is active and an input carries requires_grad, records a pull closure
// implementing its backward rule. All outputs are fresh tensors (no views).

namespace caga {

namespace detail {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

template <typename T>
bool any_nan(const Tensor<T>& x) {
    for (const T& v : x.values())
        if (std::isnan(static_cast<double>(v))) return true;
    return false;
}

// c[M x N] += a[M x K] * b[K x N]
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t M, std::size_t K, std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        const T* arow = a + i * K;
        T* crow = c + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            const T aik = arow[k];
            if (aik == T(0)) continue;
            const T* brow = b + k * N;
            for (std::size_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
        }
    }
}

// c[M x N] += a[M x K] * b^T where b is [N x K]
template <typename T>
void gemm_bt_acc(const T* a, const T* b, T* c, std::size_t M, std::size_t K, std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        const T* arow = a + i * K;
        T* crow = c + i * N;
        for (std::size_t j = 0; j < N; ++j) {
            const T* brow = b + j * K;
            T acc = T(0);
            for (std::size_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
            crow[j] += acc;
        }
    }
}

// c[K x N] += a^T * b where a is [M x K], b is [M x N]
template <typename T>
void gemm_at_acc(const T* a, const T* b, T* c, std::size_t M, std::size_t K, std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        const T* arow = a + i * K;
        const T* brow = b + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            const T aik = arow[k];
            if (aik == T(0)) continue;
            T* crow = c + k * N;
            for (std::size_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
        }
    }
}

} // namespace detail

// c[i,j] = sum_k a[i,k] * b[k,j]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const std::size_t M = a.extent(0), K = a.extent(1), N = b.extent(1);
    Tensor<T> c = Tensor<T>::zeros({M, N});
    detail::gemm_acc(a.data(), b.data(), c.data(), M, K, N);
    record_op(a.requires_grad() || b.requires_grad(), c, "matmul",
              [ad = a.ptr(), bd = b.ptr(), cd = c.ptr(), M, K, N] {
                  const T* g = cd->g.data();
                  if (ad->requires_grad) {
                      ad->ensure_grad();
                      detail::gemm_bt_acc(g, bd->v.data(), ad->g.data(), M, N, K);
                  }
                  if (bd->requires_grad) {
                      bd->ensure_grad();
                      detail::gemm_at_acc(ad->v.data(), g, bd->g.data(), M, K, N);
                  }
              });
    return c;
}

// Row-wise softmax with per-row max subtraction. Rows of the output are
// nonnegative and sum to 1.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    if (x.rank() != 2)
        throw ShapeError("softmax_rows: expected rank-2 input, got " + shape_str(x.shape()));
    if (detail::any_nan(x)) throw NumericError("softmax_rows: NaN in input");
    const std::size_t M = x.extent(0), N = x.extent(1);
    Tensor<T> y = Tensor<T>::zeros({M, N});
    for (std::size_t i = 0; i < M; ++i) {
        const T* xr = x.data() + i * N;
        T* yr = y.data() + i * N;
        T mx = xr[0];
        for (std::size_t j = 1; j < N; ++j) mx = std::max(mx, xr[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < N; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        for (std::size_t j = 0; j < N; ++j) yr[j] /= sum;
    }
    record_op(x.requires_grad(), y, "softmax_rows", [xd = x.ptr(), yd = y.ptr(), M, N] {
        if (!xd->requires_grad) return;
        xd->ensure_grad();
        for (std::size_t i = 0; i < M; ++i) {
            const T* yr = yd->v.data() + i * N;
            const T* gr = yd->g.data() + i * N;
            T dot = T(0);
            for (std::size_t j = 0; j < N; ++j) dot += gr[j] * yr[j];
            T* xg = xd->g.data() + i * N;
            for (std::size_t j = 0; j < N; ++j) xg[j] += yr[j] * (gr[j] - dot);
        }
    });
    return y;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "add");
    Tensor<T> c = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] + b[i];
    record_op(a.requires_grad() || b.requires_grad(), c, "add",
              [ad = a.ptr(), bd = b.ptr(), cd = c.ptr()] {
                  for (auto* d : {ad.get(), bd.get()}) {
                      if (!d->requires_grad) continue;
                      d->ensure_grad();
                      for (std::size_t i = 0; i < cd->g.size(); ++i) d->g[i] += cd->g[i];
                  }
              });
    return c;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor<T> c = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] - b[i];
    record_op(a.requires_grad() || b.requires_grad(), c, "sub",
              [ad = a.ptr(), bd = b.ptr(), cd = c.ptr()] {
                  if (ad->requires_grad) {
                      ad->ensure_grad();
                      for (std::size_t i = 0; i < cd->g.size(); ++i) ad->g[i] += cd->g[i];
                  }
                  if (bd->requires_grad) {
                      bd->ensure_grad();
                      for (std::size_t i = 0; i < cd->g.size(); ++i) bd->g[i] -= cd->g[i];
                  }
              });
    return c;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor<T> c = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] * b[i];
    record_op(a.requires_grad() || b.requires_grad(), c, "mul",
              [ad = a.ptr(), bd = b.ptr(), cd = c.ptr()] {
                  if (ad->requires_grad) {
                      ad->ensure_grad();
                      for (std::size_t i = 0; i < cd->g.size(); ++i)
                          ad->g[i] += cd->g[i] * bd->v[i];
                  }
                  if (bd->requires_grad) {
                      bd->ensure_grad();
                      for (std::size_t i = 0; i < cd->g.size(); ++i)
                          bd->g[i] += cd->g[i] * ad->v[i];
                  }
              });
    return c;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    Tensor<T> c = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] * factor;
    record_op(a.requires_grad(), c, "scale", [ad = a.ptr(), cd = c.ptr(), factor] {
        if (!ad->requires_grad) return;
        ad->ensure_grad();
        for (std::size_t i = 0; i < cd->g.size(); ++i) ad->g[i] += cd->g[i] * factor;
    });
    return c;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
    Tensor<T> c = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] + value;
    record_op(a.requires_grad(), c, "add_scalar", [ad = a.ptr(), cd = c.ptr()] {
        if (!ad->requires_grad) return;
        ad->ensure_grad();
        for (std::size_t i = 0; i < cd->g.size(); ++i) ad->g[i] += cd->g[i];
    });
    return c;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel(shape) != a.size())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
    Tensor<T> c = Tensor<T>::from_vector(std::move(shape), a.values());
    record_op(a.requires_grad(), c, "reshape", [ad = a.ptr(), cd = c.ptr()] {
        if (!ad->requires_grad) return;
        ad->ensure_grad();
        for (std::size_t i = 0; i < cd->g.size(); ++i) ad->g[i] += cd->g[i];
    });
    return c;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& axes) {
    const std::size_t r = a.rank();
    std::vector<bool> seen(r, false);
    if (axes.size() != r)
        throw ContractError("permute: axes size " + std::to_string(axes.size()) +
                            " != rank " + std::to_string(r));
    for (std::size_t ax : axes) {
        if (ax >= r || seen[ax]) throw ContractError("permute: invalid axis permutation");
        seen[ax] = true;
    }
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.shape()[axes[i]];
    Tensor<T> c = Tensor<T>::zeros(out_shape);
    const auto in_st = row_major_strides(a.shape());
    const auto out_st = row_major_strides(out_shape);
    const std::size_t n = a.size();
    // out[idx] = in[axes applied to idx]
    std::vector<std::size_t> map(r);
    for (std::size_t i = 0; i < r; ++i) map[i] = in_st[axes[i]];
    for (std::size_t o = 0; o < n; ++o) {
        std::size_t rem = o, src = 0;
        for (std::size_t i = 0; i < r; ++i) {
            std::size_t q = rem / out_st[i];
            rem -= q * out_st[i];
            src += q * map[i];
        }
        c[o] = a[src];
    }
    record_op(a.requires_grad(), c, "permute",
              [ad = a.ptr(), cd = c.ptr(), out_st, map, r, n] {
                  if (!ad->requires_grad) return;
                  ad->ensure_grad();
                  for (std::size_t o = 0; o < n; ++o) {
                      std::size_t rem = o, src = 0;
                      for (std::size_t i = 0; i < r; ++i) {
                          std::size_t q = rem / out_st[i];
                          rem -= q * out_st[i];
                          src += q * map[i];
                      }
                      ad->g[src] += cd->g[o];
                  }
              });
    return c;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
    if (a.rank() != 2)
        throw ShapeError("transpose2d: expected rank-2, got " + shape_str(a.shape()));
    return permute(a, {1, 0});
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ContractError("concat: empty input list");
    const std::size_t r = parts[0].rank();
    if (axis >= r) throw ContractError("concat: axis out of range");
    Shape out_shape = parts[0].shape();
    bool any_rg = false;
    for (const auto& p : parts) {
        if (p.rank() != r)
            throw ShapeError("concat: rank mismatch " + shape_str(p.shape()));
        for (std::size_t i = 0; i < r; ++i)
            if (i != axis && p.shape()[i] != out_shape[i])
                throw ShapeError("concat: extent mismatch " + shape_str(p.shape()) +
                                 " vs " + shape_str(parts[0].shape()));
        any_rg = any_rg || p.requires_grad();
    }
    out_shape[axis] = 0;
    for (const auto& p : parts) out_shape[axis] += p.shape()[axis];

    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= out_shape[i];
    for (std::size_t i = axis + 1; i < r; ++i) inner *= out_shape[i];

    Tensor<T> c = Tensor<T>::zeros(out_shape);
    const std::size_t out_row = out_shape[axis] * inner;
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t blk = p.shape()[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(p.data() + o * blk, blk, c.data() + o * out_row + off);
        off += blk;
    }
    std::vector<std::shared_ptr<TensorData<T>>> srcs;
    std::vector<std::size_t> blks;
    for (const auto& p : parts) {
        srcs.push_back(p.ptr());
        blks.push_back(p.shape()[axis] * inner);
    }
    record_op(any_rg, c, "concat", [cd = c.ptr(), srcs, blks, outer, out_row] {
        std::size_t off = 0;
        for (std::size_t s = 0; s < srcs.size(); ++s) {
            if (srcs[s]->requires_grad) {
                srcs[s]->ensure_grad();
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < blks[s]; ++i)
                        srcs[s]->g[o * blks[s] + i] += cd->g[o * out_row + off + i];
            }
            off += blks[s];
        }
    });
    return c;
}

template <typename T>
Tensor<T> concat(std::initializer_list<Tensor<T>> parts, std::size_t axis) {
    return concat(std::vector<Tensor<T>>(parts), axis);
}

// Copying slice of `len` extents starting at `start` along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
    const std::size_t r = a.rank();
    if (axis >= r) throw ContractError("slice: axis out of range");
    if (start + len > a.shape()[axis] || len == 0)
        throw ContractError("slice: range [" + std::to_string(start) + "," +
                            std::to_string(start + len) + ") exceeds extent " +
                            std::to_string(a.shape()[axis]));
    Shape out_shape = a.shape();
    out_shape[axis] = len;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= a.shape()[i];
    for (std::size_t i = axis + 1; i < r; ++i) inner *= a.shape()[i];
    const std::size_t in_row = a.shape()[axis] * inner;
    const std::size_t out_row = len * inner;

    Tensor<T> c = Tensor<T>::zeros(out_shape);
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(a.data() + o * in_row + start * inner, out_row, c.data() + o * out_row);
    record_op(a.requires_grad(), c, "slice",
              [ad = a.ptr(), cd = c.ptr(), outer, inner, in_row, out_row, start] {
                  if (!ad->requires_grad) return;
                  ad->ensure_grad();
                  for (std::size_t o = 0; o < outer; ++o)
                      for (std::size_t i = 0; i < out_row; ++i)
                          ad->g[o * in_row + start * inner + i] += cd->g[o * out_row + i];
              });
    return c;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
    Tensor<T> c = Tensor<T>::scalar(acc);
    record_op(a.requires_grad(), c, "sum", [ad = a.ptr(), cd = c.ptr()] {
        if (!ad->requires_grad) return;
        ad->ensure_grad();
        const T g = cd->g[0];
        for (T& x : ad->g) x += g;
    });
    return c;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    if (a.size() == 0) throw ContractError("mean: empty tensor");
    return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// Sum over one axis, removing it from the shape.
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, std::size_t axis) {
    const std::size_t r = a.rank();
    if (axis >= r) throw ContractError("sum_axis: axis out of range");
    Shape out_shape;
    for (std::size_t i = 0; i < r; ++i)
        if (i != axis) out_shape.push_back(a.shape()[i]);
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= a.shape()[i];
    for (std::size_t i = axis + 1; i < r; ++i) inner *= a.shape()[i];
    const std::size_t ext = a.shape()[axis];

    Tensor<T> c = Tensor<T>::zeros(out_shape);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t e = 0; e < ext; ++e)
            for (std::size_t i = 0; i < inner; ++i)
                c[o * inner + i] += a[(o * ext + e) * inner + i];
    record_op(a.requires_grad(), c, "sum_axis", [ad = a.ptr(), cd = c.ptr(), outer, ext, inner] {
        if (!ad->requires_grad) return;
        ad->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t e = 0; e < ext; ++e)
                for (std::size_t i = 0; i < inner; ++i)
                    ad->g[(o * ext + e) * inner + i] += cd->g[o * inner + i];
    });
    return c;
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis) {
    const std::size_t ext = a.shape().at(axis);
    return scale(sum_axis(a, axis), T(1) / static_cast<T>(ext));
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
    Tensor<T> c = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = std::log(a[i]);
    record_op(a.requires_grad(), c, "log", [ad = a.ptr(), cd = c.ptr()] {
        if (!ad->requires_grad) return;
        ad->ensure_grad();
        for (std::size_t i = 0; i < cd->g.size(); ++i) ad->g[i] += cd->g[i] / ad->v[i];
    });
    return c;
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    Tensor<T> c = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = std::exp(a[i]);
    record_op(a.requires_grad(), c, "exp", [ad = a.ptr(), cd = c.ptr()] {
        if (!ad->requires_grad) return;
        ad->ensure_grad();
        for (std::size_t i = 0; i < cd->g.size(); ++i) ad->g[i] += cd->g[i] * cd->v[i];
    });
    return c;
}

// Elementwise x^p for constant exponent p.
template <typename T>
Tensor<T> pow(const Tensor<T>& a, T p) {
    Tensor<T> c = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = std::pow(a[i], p);
    record_op(a.requires_grad(), c, "pow", [ad = a.ptr(), cd = c.ptr(), p] {
        if (!ad->requires_grad) return;
        ad->ensure_grad();
        for (std::size_t i = 0; i < cd->g.size(); ++i)
            ad->g[i] += cd->g[i] * p * std::pow(ad->v[i], p - T(1));
    });
    return c;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    Tensor<T> c = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] > T(0) ? a[i] : T(0);
    record_op(a.requires_grad(), c, "relu", [ad = a.ptr(), cd = c.ptr()] {
        if (!ad->requires_grad) return;
        ad->ensure_grad();
        for (std::size_t i = 0; i < cd->g.size(); ++i)
            if (ad->v[i] > T(0)) ad->g[i] += cd->g[i];
    });
    return c;
}

// Adds rank-1 `b` along `axis` of `a`, broadcast over all other axes
// (bias addition for conv maps and linear rows).
template <typename T>
Tensor<T> broadcast_add(const Tensor<T>& a, const Tensor<T>& b, std::size_t axis) {
    if (b.rank() != 1 || axis >= a.rank() || b.size() != a.shape()[axis])
        throw ShapeError("broadcast_add: bias " + shape_str(b.shape()) +
                         " does not match axis " + std::to_string(axis) + " of " +
                         shape_str(a.shape()));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= a.shape()[i];
    for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.shape()[i];
    const std::size_t ext = b.size();

    Tensor<T> c = Tensor<T>::zeros(a.shape());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t e = 0; e < ext; ++e)
            for (std::size_t i = 0; i < inner; ++i)
                c[(o * ext + e) * inner + i] = a[(o * ext + e) * inner + i] + b[e];
    record_op(a.requires_grad() || b.requires_grad(), c, "broadcast_add",
              [ad = a.ptr(), bd = b.ptr(), cd = c.ptr(), outer, ext, inner] {
                  if (ad->requires_grad) {
                      ad->ensure_grad();
                      for (std::size_t i = 0; i < cd->g.size(); ++i) ad->g[i] += cd->g[i];
                  }
                  if (bd->requires_grad) {
                      bd->ensure_grad();
                      for (std::size_t o = 0; o < outer; ++o)
                          for (std::size_t e = 0; e < ext; ++e)
                              for (std::size_t i = 0; i < inner; ++i)
                                  bd->g[e] += cd->g[(o * ext + e) * inner + i];
                  }
              });
    return c;
}

} // namespace caga
