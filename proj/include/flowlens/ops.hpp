// Copyright 2026 The flowlens Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "flowlens/rng.hpp"
#include "flowlens/tensor.hpp"

// Differentiable operations on ad::Tensor. Every op checks shapes eagerly and
// throws ShapeError naming both operands on mismatch. Broadcasting is limited
// to add_broadcast (trailing-shape operand) and row masks in masked_fill.

namespace flowlens::ad {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
Eigen::Map<RowMat<T>> mat(Buffer<T>& v, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
    return {v.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

template <class T>
Eigen::Map<const RowMat<T>> cmat(const Buffer<T>& v, std::size_t rows, std::size_t cols,
                                 std::size_t offset = 0) {
    return {v.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

inline std::string pair_str(const Shape& a, const Shape& b) { return a.str() + " vs " + b.str(); }

inline std::array<std::size_t, 4> pad4(const Shape& s) {
    std::array<std::size_t, 4> d{1, 1, 1, 1};
    const std::size_t off = 4 - s.rank();
    for (std::size_t i = 0; i < s.rank(); ++i) {
        d[off + i] = s[i];
    }
    return d;
}

/// dst (dims with a0/a1 swapped) [+]= src (dims). Axes refer to the padded
/// 4-d layout.
template <class T>
void swap_axes_copy(const T* src, T* dst, const std::array<std::size_t, 4>& dims, std::size_t a0, std::size_t a1,
                    bool accumulate) {
    std::array<std::size_t, 4> sstride{};
    sstride[3] = 1;
    for (int i = 2; i >= 0; --i) {
        sstride[i] = sstride[i + 1] * dims[i + 1];
    }
    std::array<std::size_t, 4> odims = dims;
    std::swap(odims[a0], odims[a1]);
    std::array<std::size_t, 4> pstride = sstride;  // source stride per output axis
    std::swap(pstride[a0], pstride[a1]);
    std::size_t o = 0;
    for (std::size_t i0 = 0; i0 < odims[0]; ++i0) {
        for (std::size_t i1 = 0; i1 < odims[1]; ++i1) {
            for (std::size_t i2 = 0; i2 < odims[2]; ++i2) {
                const std::size_t base = i0 * pstride[0] + i1 * pstride[1] + i2 * pstride[2];
                for (std::size_t i3 = 0; i3 < odims[3]; ++i3, ++o) {
                    if (accumulate) {
                        dst[o] += src[base + i3 * pstride[3]];
                    } else {
                        dst[o] = src[base + i3 * pstride[3]];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// (..., k) x (k, n) -> (..., n)
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& w) {
    const Shape& sa = a.shape();
    const Shape& sw = w.shape();
    if (sw.rank() != 2 || sa.rank() < 1 || sa.back() != sw[0]) {
        throw ShapeError("matmul: " + detail::pair_str(sa, sw));
    }
    const std::size_t m = sa.rows(), k = sw[0], n = sw[1];
    auto out = detail::make_result<T>(sa.with_back(n), {&a, &w}, "matmul");
    detail::mat(out->value, m, n).noalias() =
        detail::cmat(a.node()->value, m, k) * detail::cmat(w.node()->value, k, n);
    if (out->requires_grad) {
        out->backward = [m, k, n](detail::Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pw = *self.parents[1];
            const auto g = detail::cmat(self.grad, m, n);
            if (pa.requires_grad) {
                detail::mat(pa.ensure_grad(), m, k).noalias() += g * detail::cmat(pw.value, k, n).transpose();
            }
            if (pw.requires_grad) {
                detail::mat(pw.ensure_grad(), k, n).noalias() += detail::cmat(pa.value, m, k).transpose() * g;
            }
        };
    }
    return Tensor<T>(out);
}

/// x (..., k) times w (k, n) plus bias b (n), as one graph node.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    const Shape& sx = x.shape();
    const Shape& sw = w.shape();
    if (sw.rank() != 2 || sx.rank() < 1 || sx.back() != sw[0] || b.shape().rank() != 1 || b.shape()[0] != sw[1]) {
        throw ShapeError("linear: " + sx.str() + " x " + sw.str() + " + " + b.shape().str());
    }
    const std::size_t m = sx.rows(), k = sw[0], n = sw[1];
    auto out = detail::make_result<T>(sx.with_back(n), {&x, &w, &b}, "linear");
    auto y = detail::mat(out->value, m, n);
    y.noalias() = detail::cmat(x.node()->value, m, k) * detail::cmat(w.node()->value, k, n);
    y.rowwise() += detail::cmat(b.node()->value, 1, n).row(0);
    if (out->requires_grad) {
        out->backward = [m, k, n](detail::Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pw = *self.parents[1];
            auto& pb = *self.parents[2];
            const auto g = detail::cmat(self.grad, m, n);
            if (px.requires_grad) {
                detail::mat(px.ensure_grad(), m, k).noalias() += g * detail::cmat(pw.value, k, n).transpose();
            }
            if (pw.requires_grad) {
                detail::mat(pw.ensure_grad(), k, n).noalias() += detail::cmat(px.value, m, k).transpose() * g;
            }
            if (pb.requires_grad) {
                detail::mat(pb.ensure_grad(), 1, n).row(0) += g.colwise().sum();
            }
        };
    }
    return Tensor<T>(out);
}

/// Rows of x (n, ...) in the order given by `index`; rows may repeat.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> index) {
    const Shape& s = x.shape();
    if (s.rank() < 1) {
        throw ShapeError("gather_rows: scalar input");
    }
    const std::size_t row = x.numel() / std::max<std::size_t>(s[0], 1);
    for (auto i : index) {
        if (i >= s[0]) {
            throw std::out_of_range("gather_rows: row " + std::to_string(i) + " of " + s.str());
        }
    }
    auto out = detail::make_result<T>(s.with(0, index.size()), {&x}, "gather_rows");
    const auto& xv = x.node()->value;
    for (std::size_t r = 0; r < index.size(); ++r) {
        std::copy_n(xv.data() + index[r] * row, row, out->value.data() + r * row);
    }
    if (out->requires_grad) {
        out->backward = [row, idx = std::vector<std::size_t>(index.begin(), index.end())](detail::Node<T>& self) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::size_t r = 0; r < idx.size(); ++r) {
                for (std::size_t c = 0; c < row; ++c) {
                    g[idx[r] * row + c] += self.grad[r * row + c];
                }
            }
        };
    }
    return Tensor<T>(out);
}

/// Batched product over identical leading axes: (..., m, k) x (..., k, n),
/// or (..., m, k) x (..., n, k)^T when `transpose_b`.
template <class T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    const std::size_t r = sa.rank();
    if (r < 2 || sb.rank() != r) {
        throw ShapeError("batched_matmul: " + detail::pair_str(sa, sb));
    }
    for (std::size_t i = 0; i + 2 < r; ++i) {
        if (sa[i] != sb[i]) {
            throw ShapeError("batched_matmul: leading axes differ " + detail::pair_str(sa, sb));
        }
    }
    const std::size_t m = sa[r - 2], k = sa[r - 1];
    const std::size_t n = transpose_b ? sb[r - 2] : sb[r - 1];
    if ((transpose_b ? sb[r - 1] : sb[r - 2]) != k) {
        throw ShapeError("batched_matmul: inner dims " + detail::pair_str(sa, sb));
    }
    const std::size_t batches = sa.numel() / std::max<std::size_t>(m * k, 1);
    auto out = detail::make_result<T>(sa.with_back(n), {&a, &b}, "batched_matmul");
    const auto& av = a.node()->value;
    const auto& bv = b.node()->value;
    for (std::size_t i = 0; i < batches; ++i) {
        auto y = detail::mat(out->value, m, n, i * m * n);
        const auto x = detail::cmat(av, m, k, i * m * k);
        if (transpose_b) {
            y.noalias() = x * detail::cmat(bv, n, k, i * n * k).transpose();
        } else {
            y.noalias() = x * detail::cmat(bv, k, n, i * k * n);
        }
    }
    if (out->requires_grad) {
        out->backward = [m, k, n, batches, transpose_b](detail::Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            for (std::size_t i = 0; i < batches; ++i) {
                const auto g = detail::cmat(self.grad, m, n, i * m * n);
                if (pa.requires_grad) {
                    auto ga = detail::mat(pa.ensure_grad(), m, k, i * m * k);
                    if (transpose_b) {
                        ga.noalias() += g * detail::cmat(pb.value, n, k, i * n * k);
                    } else {
                        ga.noalias() += g * detail::cmat(pb.value, k, n, i * k * n).transpose();
                    }
                }
                if (pb.requires_grad) {
                    const auto x = detail::cmat(pa.value, m, k, i * m * k);
                    if (transpose_b) {
                        detail::mat(pb.ensure_grad(), n, k, i * n * k).noalias() += g.transpose() * x;
                    } else {
                        detail::mat(pb.ensure_grad(), k, n, i * k * n).noalias() += x.transpose() * g;
                    }
                }
            }
        };
    }
    return Tensor<T>(out);
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (!(a.shape() == b.shape())) {
        throw ShapeError("add: " + detail::pair_str(a.shape(), b.shape()));
    }
    auto out = detail::make_result<T>(a.shape(), {&a, &b}, "add");
    const auto& av = a.node()->value;
    const auto& bv = b.node()->value;
    for (std::size_t i = 0; i < av.size(); ++i) {
        out->value[i] = av[i] + bv[i];
    }
    if (out->requires_grad) {
        out->backward = [](detail::Node<T>& self) {
            for (auto& p : self.parents) {
                if (p->requires_grad) {
                    auto& g = p->ensure_grad();
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        g[i] += self.grad[i];
                    }
                }
            }
        };
    }
    return Tensor<T>(out);
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (!(a.shape() == b.shape())) {
        throw ShapeError("sub: " + detail::pair_str(a.shape(), b.shape()));
    }
    auto out = detail::make_result<T>(a.shape(), {&a, &b}, "sub");
    const auto& av = a.node()->value;
    const auto& bv = b.node()->value;
    for (std::size_t i = 0; i < av.size(); ++i) {
        out->value[i] = av[i] - bv[i];
    }
    if (out->requires_grad) {
        out->backward = [](detail::Node<T>& self) {
            for (std::size_t p = 0; p < 2; ++p) {
                auto& par = *self.parents[p];
                if (!par.requires_grad) {
                    continue;
                }
                const T sign = p == 0 ? T(1) : T(-1);
                auto& g = par.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += sign * self.grad[i];
                }
            }
        };
    }
    return Tensor<T>(out);
}

/// x + y where y's shape equals the trailing axes of x (bias rows, position
/// tables).
template <class T>
Tensor<T> add_broadcast(const Tensor<T>& x, const Tensor<T>& y) {
    const Shape& sx = x.shape();
    const Shape& sy = y.shape();
    bool ok = sy.rank() <= sx.rank();
    for (std::size_t i = 0; ok && i < sy.rank(); ++i) {
        ok = sy[sy.rank() - 1 - i] == sx[sx.rank() - 1 - i];
    }
    if (!ok) {
        throw ShapeError("add_broadcast: " + detail::pair_str(sx, sy));
    }
    const std::size_t inner = sy.numel();
    const std::size_t outer = sx.numel() / std::max<std::size_t>(inner, 1);
    auto out = detail::make_result<T>(sx, {&x, &y}, "add_broadcast");
    const auto& xv = x.node()->value;
    const auto& yv = y.node()->value;
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            out->value[o * inner + i] = xv[o * inner + i] + yv[i];
        }
    }
    if (out->requires_grad) {
        out->backward = [outer, inner](detail::Node<T>& self) {
            auto& px = *self.parents[0];
            auto& py = *self.parents[1];
            if (px.requires_grad) {
                auto& g = px.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += self.grad[i];
                }
            }
            if (py.requires_grad) {
                auto& g = py.ensure_grad();
                for (std::size_t o = 0; o < outer; ++o) {
                    for (std::size_t i = 0; i < inner; ++i) {
                        g[i] += self.grad[o * inner + i];
                    }
                }
            }
        };
    }
    return Tensor<T>(out);
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (!(a.shape() == b.shape())) {
        throw ShapeError("mul: " + detail::pair_str(a.shape(), b.shape()));
    }
    auto out = detail::make_result<T>(a.shape(), {&a, &b}, "mul");
    const auto& av = a.node()->value;
    const auto& bv = b.node()->value;
    for (std::size_t i = 0; i < av.size(); ++i) {
        out->value[i] = av[i] * bv[i];
    }
    if (out->requires_grad) {
        out->backward = [](detail::Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.requires_grad) {
                auto& g = pa.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += self.grad[i] * pb.value[i];
                }
            }
            if (pb.requires_grad) {
                auto& g = pb.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += self.grad[i] * pa.value[i];
                }
            }
        };
    }
    return Tensor<T>(out);
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
    auto out = detail::make_result<T>(x.shape(), {&x}, "scale");
    const auto& xv = x.node()->value;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out->value[i] = xv[i] * s;
    }
    if (out->requires_grad) {
        out->backward = [s](detail::Node<T>& self) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += s * self.grad[i];
            }
        };
    }
    return Tensor<T>(out);
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
    if (shape.numel() != x.numel()) {
        throw ShapeError("reshape: " + detail::pair_str(x.shape(), shape));
    }
    auto out = detail::make_result<T>(shape, {&x}, "reshape");
    out->value = x.node()->value;
    if (out->requires_grad) {
        out->backward = [](detail::Node<T>& self) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i];
            }
        };
    }
    return Tensor<T>(out);
}

/// Swaps two axes.
template <class T>
Tensor<T> transpose(const Tensor<T>& x, std::size_t axis0, std::size_t axis1) {
    const Shape& s = x.shape();
    if (axis0 >= s.rank() || axis1 >= s.rank()) {
        throw ShapeError("transpose: axes out of range for " + s.str());
    }
    std::vector<std::size_t> od(s.dims().begin(), s.dims().end());
    std::swap(od[axis0], od[axis1]);
    const std::size_t off = 4 - s.rank();
    const auto dims = detail::pad4(s);
    auto out = detail::make_result<T>(Shape::from_range(od.begin(), od.end()), {&x}, "transpose");
    detail::swap_axes_copy(x.node()->value.data(), out->value.data(), dims, axis0 + off, axis1 + off, false);
    if (out->requires_grad) {
        auto odims = dims;
        std::swap(odims[axis0 + off], odims[axis1 + off]);
        out->backward = [odims, a0 = axis0 + off, a1 = axis1 + off](detail::Node<T>& self) {
            auto& g = self.parents[0]->ensure_grad();
            detail::swap_axes_copy(self.grad.data(), g.data(), odims, a0, a1, true);
        };
    }
    return Tensor<T>(out);
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
    if (xs.empty()) {
        throw ShapeError("concat: no inputs");
    }
    const Shape& s0 = xs[0].shape();
    if (axis >= s0.rank()) {
        throw ShapeError("concat: axis out of range for " + s0.str());
    }
    std::size_t total = 0;
    for (const auto& t : xs) {
        const Shape& s = t.shape();
        bool ok = s.rank() == s0.rank();
        for (std::size_t i = 0; ok && i < s.rank(); ++i) {
            ok = i == axis || s[i] == s0[i];
        }
        if (!ok) {
            throw ShapeError("concat: " + detail::pair_str(s0, s));
        }
        total += s[axis];
    }
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) {
        outer *= s0[i];
    }
    std::size_t tail = 1;
    for (std::size_t i = axis + 1; i < s0.rank(); ++i) {
        tail *= s0[i];
    }
    auto out = detail::make_result<T>(s0.with(axis, total), xs, "concat");
    std::vector<std::size_t> widths;
    std::size_t out_row = total * tail;
    std::size_t col = 0;
    for (const auto& t : xs) {
        const std::size_t w = t.shape()[axis] * tail;
        widths.push_back(w);
        const auto& v = t.node()->value;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(v.data() + o * w, w, out->value.data() + o * out_row + col);
        }
        col += w;
    }
    if (out->requires_grad) {
        out->backward = [outer, out_row, widths](detail::Node<T>& self) {
            std::size_t c = 0;
            for (std::size_t p = 0; p < self.parents.size(); ++p) {
                const std::size_t w = widths[p];
                auto& par = *self.parents[p];
                if (par.requires_grad) {
                    auto& g = par.ensure_grad();
                    for (std::size_t o = 0; o < outer; ++o) {
                        for (std::size_t i = 0; i < w; ++i) {
                            g[o * w + i] += self.grad[o * out_row + c + i];
                        }
                    }
                }
                c += w;
            }
        };
    }
    return Tensor<T>(out);
}

/// Elements [begin, end) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
    const Shape& s = x.shape();
    if (axis >= s.rank() || begin > end || end > s[axis]) {
        throw ShapeError("slice: [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " of " + s.str());
    }
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) {
        outer *= s[i];
    }
    std::size_t tail = 1;
    for (std::size_t i = axis + 1; i < s.rank(); ++i) {
        tail *= s[i];
    }
    const std::size_t in_row = s[axis] * tail;
    const std::size_t w = (end - begin) * tail;
    const std::size_t off = begin * tail;
    auto out = detail::make_result<T>(s.with(axis, end - begin), {&x}, "slice");
    const auto& v = x.node()->value;
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(v.data() + o * in_row + off, w, out->value.data() + o * w);
    }
    if (out->requires_grad) {
        out->backward = [outer, in_row, w, off](detail::Node<T>& self) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t i = 0; i < w; ++i) {
                    g[o * in_row + off + i] += self.grad[o * w + i];
                }
            }
        };
    }
    return Tensor<T>(out);
}

/// Softmax over the last axis. -inf entries receive probability 0; a row that
/// is entirely -inf is an error.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
    const std::size_t rows = x.shape().rows(), cols = x.shape().back();
    auto out = detail::make_result<T>(x.shape(), {&x}, "softmax");
    const auto& xv = x.node()->value;
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xv.data() + r * cols;
        T* o = out->value.data() + r * cols;
        const T mx = *std::max_element(in, in + cols);
        if (mx == -std::numeric_limits<T>::infinity()) {
            throw NumericError("softmax: fully masked row");
        }
        T sum = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            o[c] = std::exp(in[c] - mx);
            sum += o[c];
        }
        for (std::size_t c = 0; c < cols; ++c) {
            o[c] /= sum;
        }
    }
    if (out->requires_grad) {
        out->backward = [rows, cols](detail::Node<T>& self) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* p = self.value.data() + r * cols;
                const T* go = self.grad.data() + r * cols;
                T dot = 0;
                for (std::size_t c = 0; c < cols; ++c) {
                    dot += p[c] * go[c];
                }
                for (std::size_t c = 0; c < cols; ++c) {
                    g[r * cols + c] += p[c] * (go[c] - dot);
                }
            }
        };
    }
    return Tensor<T>(out);
}

/// Layer normalization over the last axis followed by gamma * xhat + beta.
template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
    const std::size_t rows = x.shape().rows(), cols = x.shape().back();
    if (gamma.numel() != cols || beta.numel() != cols) {
        throw ShapeError("layernorm: " + detail::pair_str(x.shape(), gamma.shape()));
    }
    auto out = detail::make_result<T>(x.shape(), {&x, &gamma, &beta}, "layernorm");
    std::vector<T> xhat(x.numel());
    std::vector<T> inv_std(rows);
    const auto& xv = x.node()->value;
    const auto& gv = gamma.node()->value;
    const auto& bv = beta.node()->value;
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xv.data() + r * cols;
        T mean = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            mean += in[c];
        }
        mean /= static_cast<T>(cols);
        T var = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            var += (in[c] - mean) * (in[c] - mean);
        }
        var /= static_cast<T>(cols);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t c = 0; c < cols; ++c) {
            const T h = (in[c] - mean) * is;
            xhat[r * cols + c] = h;
            out->value[r * cols + c] = gv[c] * h + bv[c];
        }
    }
    if (out->requires_grad) {
        out->backward = [rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            if (pg.requires_grad || pb.requires_grad) {
                auto& gg = pg.ensure_grad();
                auto& gb = pb.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < cols; ++c) {
                        gg[c] += self.grad[r * cols + c] * xhat[r * cols + c];
                        gb[c] += self.grad[r * cols + c];
                    }
                }
            }
            if (px.requires_grad) {
                auto& gx = px.ensure_grad();
                std::vector<T> dh(cols);
                for (std::size_t r = 0; r < rows; ++r) {
                    T mean_dh = 0, mean_dh_h = 0;
                    for (std::size_t c = 0; c < cols; ++c) {
                        dh[c] = self.grad[r * cols + c] * pg.value[c];
                        mean_dh += dh[c];
                        mean_dh_h += dh[c] * xhat[r * cols + c];
                    }
                    mean_dh /= static_cast<T>(cols);
                    mean_dh_h /= static_cast<T>(cols);
                    for (std::size_t c = 0; c < cols; ++c) {
                        gx[r * cols + c] += inv_std[r] * (dh[c] - mean_dh - xhat[r * cols + c] * mean_dh_h);
                    }
                }
            }
        };
    }
    return Tensor<T>(out);
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    auto out = detail::make_result<T>(x.shape(), {&x}, "relu");
    const auto& xv = x.node()->value;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out->value[i] = xv[i] > T(0) ? xv[i] : T(0);
    }
    if (out->requires_grad) {
        out->backward = [](detail::Node<T>& self) {
            auto& p = *self.parents[0];
            auto& g = p.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (p.value[i] > T(0)) {
                    g[i] += self.grad[i];
                }
            }
        };
    }
    return Tensor<T>(out);
}

/// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
    auto out = detail::make_result<T>(x.shape(), {&x}, "gelu");
    const auto& xv = x.node()->value;
    const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out->value[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
    }
    if (out->requires_grad) {
        out->backward = [inv_sqrt2](detail::Node<T>& self) {
            auto& p = *self.parents[0];
            auto& g = p.ensure_grad();
            const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
            for (std::size_t i = 0; i < g.size(); ++i) {
                const T v = p.value[i];
                const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
                const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
                g[i] += self.grad[i] * (cdf + v * pdf);
            }
        };
    }
    return Tensor<T>(out);
}

/// Inverted dropout. Identity when `train` is false or p == 0.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng, bool train) {
    if (!(p >= 0.0 && p < 1.0)) {
        throw std::invalid_argument("dropout: p must lie in [0, 1), got " + std::to_string(p));
    }
    if (!train || p == 0.0) {
        return x;
    }
    auto out = detail::make_result<T>(x.shape(), {&x}, "dropout");
    std::vector<T> keep(x.numel());
    const T s = static_cast<T>(1.0 / (1.0 - p));
    const auto& xv = x.node()->value;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        keep[i] = rng.uniform() >= p ? s : T(0);
        out->value[i] = xv[i] * keep[i];
    }
    if (out->requires_grad) {
        out->backward = [keep = std::move(keep)](detail::Node<T>& self) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i] * keep[i];
            }
        };
    }
    return Tensor<T>(out);
}

/// Row lookup: ids of shape `index_shape` into a (V, d) table gives
/// index_shape + (d).
template <class T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::int32_t> ids, const Shape& index_shape) {
    const Shape& st = table.shape();
    if (st.rank() != 2 || ids.size() != index_shape.numel() || index_shape.rank() >= Shape::kMaxRank) {
        throw ShapeError("embedding_lookup: table " + st.str() + " with index shape " + index_shape.str());
    }
    const std::size_t vocab = st[0], d = st[1];
    std::vector<std::size_t> od(index_shape.dims().begin(), index_shape.dims().end());
    od.push_back(d);
    auto out = detail::make_result<T>(Shape::from_range(od.begin(), od.end()), {&table}, "embedding_lookup");
    const auto& tv = table.node()->value;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw std::out_of_range("embedding_lookup: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                                    std::to_string(vocab));
        }
        std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out->value.data() + i * d);
    }
    if (out->requires_grad) {
        out->backward = [d, ids = std::vector<std::int32_t>(ids.begin(), ids.end())](detail::Node<T>& self) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < ids.size(); ++i) {
                T* row = g.data() + static_cast<std::size_t>(ids[i]) * d;
                for (std::size_t c = 0; c < d; ++c) {
                    row[c] += self.grad[i * d + c];
                }
            }
        };
    }
    return Tensor<T>(out);
}

/// Sets entries to `value` where mask != 0. The mask covers either every
/// element or every last-axis row.
template <class T>
Tensor<T> masked_fill(const Tensor<T>& x, std::span<const std::uint8_t> mask, T value) {
    const std::size_t n = x.numel();
    const std::size_t cols = x.shape().back();
    const bool per_row = mask.size() != n;
    if (per_row && mask.size() != x.shape().rows()) {
        throw ShapeError("masked_fill: mask of " + std::to_string(mask.size()) + " entries for " + x.shape().str());
    }
    auto out = detail::make_result<T>(x.shape(), {&x}, "masked_fill");
    std::vector<std::uint8_t> full(n);
    for (std::size_t i = 0; i < n; ++i) {
        full[i] = per_row ? mask[i / cols] : mask[i];
    }
    const auto& xv = x.node()->value;
    for (std::size_t i = 0; i < n; ++i) {
        out->value[i] = full[i] ? value : xv[i];
    }
    if (out->requires_grad) {
        out->backward = [full = std::move(full)](detail::Node<T>& self) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (!full[i]) {
                    g[i] += self.grad[i];
                }
            }
        };
    }
    return Tensor<T>(out);
}

/// Rows of the last axis scaled to unit Euclidean norm. Zero rows are an
/// error.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x) {
    const std::size_t rows = x.shape().rows(), cols = x.shape().back();
    auto out = detail::make_result<T>(x.shape(), {&x}, "l2_normalize");
    std::vector<T> norms(rows);
    const auto& xv = x.node()->value;
    for (std::size_t r = 0; r < rows; ++r) {
        T ss = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            ss += xv[r * cols + c] * xv[r * cols + c];
        }
        const T nrm = std::sqrt(ss);
        if (!(nrm > T(0))) {
            throw NumericError("l2_normalize: zero-norm row " + std::to_string(r));
        }
        norms[r] = nrm;
        for (std::size_t c = 0; c < cols; ++c) {
            out->value[r * cols + c] = xv[r * cols + c] / nrm;
        }
    }
    if (out->requires_grad) {
        out->backward = [rows, cols, norms = std::move(norms)](detail::Node<T>& self) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* y = self.value.data() + r * cols;
                const T* go = self.grad.data() + r * cols;
                T dot = 0;
                for (std::size_t c = 0; c < cols; ++c) {
                    dot += y[c] * go[c];
                }
                for (std::size_t c = 0; c < cols; ++c) {
                    g[r * cols + c] += (go[c] - y[c] * dot) / norms[r];
                }
            }
        };
    }
    return Tensor<T>(out);
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    auto out = detail::make_result<T>(Shape{}, {&x}, "sum");
    T s = 0;
    for (T v : x.node()->value) {
        s += v;
    }
    out->value[0] = s;
    if (out->requires_grad) {
        out->backward = [](detail::Node<T>& self) {
            auto& g = self.parents[0]->ensure_grad();
            for (auto& v : g) {
                v += self.grad[0];
            }
        };
    }
    return Tensor<T>(out);
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(std::max<std::size_t>(x.numel(), 1)));
}

/// Mean negative log-likelihood of integer class labels under softmax(logits)
/// for logits of shape (N, C). -inf logits are allowed away from the label.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
    const Shape& s = logits.shape();
    if (s.rank() != 2 || labels.size() != s[0]) {
        throw ShapeError("cross_entropy: logits " + s.str() + " with " + std::to_string(labels.size()) + " labels");
    }
    const std::size_t n = s[0], c = s[1];
    auto out = detail::make_result<T>(Shape{}, {&logits}, "cross_entropy");
    std::vector<T> probs(n * c);
    const auto& lv = logits.node()->value;
    T total = 0;
    for (std::size_t r = 0; r < n; ++r) {
        const auto y = static_cast<std::size_t>(labels[r]);
        if (labels[r] < 0 || y >= c) {
            throw std::out_of_range("cross_entropy: label " + std::to_string(labels[r]) + " out of range");
        }
        const T* in = lv.data() + r * c;
        const T mx = *std::max_element(in, in + c);
        T se = 0;
        for (std::size_t k = 0; k < c; ++k) {
            probs[r * c + k] = std::exp(in[k] - mx);
            se += probs[r * c + k];
        }
        for (std::size_t k = 0; k < c; ++k) {
            probs[r * c + k] /= se;
        }
        total += -(in[y] - mx - std::log(se));
    }
    out->value[0] = total / static_cast<T>(n);
    if (out->requires_grad) {
        out->backward = [n, c, probs = std::move(probs),
                         labels = std::vector<std::int32_t>(labels.begin(), labels.end())](detail::Node<T>& self) {
            auto& g = self.parents[0]->ensure_grad();
            const T gs = self.grad[0] / static_cast<T>(n);
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t k = 0; k < c; ++k) {
                    const T onehot = static_cast<std::size_t>(labels[r]) == k ? T(1) : T(0);
                    g[r * c + k] += gs * (probs[r * c + k] - onehot);
                }
            }
        };
    }
    return Tensor<T>(out);
}

/// Copy of x (B, W, d) with x[:, position, :] replaced by v (d).
template <class T>
Tensor<T> assign_position(const Tensor<T>& x, const Tensor<T>& v, std::size_t position) {
    const Shape& s = x.shape();
    if (s.rank() != 3 || v.numel() != s[2] || position >= s[1]) {
        throw ShapeError("assign_position: " + detail::pair_str(s, v.shape()));
    }
    const std::size_t b = s[0], w = s[1], d = s[2];
    auto out = detail::make_result<T>(s, {&x, &v}, "assign_position");
    out->value = x.node()->value;
    for (std::size_t i = 0; i < b; ++i) {
        std::copy_n(v.node()->value.data(), d, out->value.data() + (i * w + position) * d);
    }
    if (out->requires_grad) {
        out->backward = [b, w, d, position](detail::Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pv = *self.parents[1];
            if (px.requires_grad) {
                auto& g = px.ensure_grad();
                for (std::size_t i = 0; i < b; ++i) {
                    for (std::size_t p = 0; p < w; ++p) {
                        if (p == position) {
                            continue;
                        }
                        for (std::size_t c = 0; c < d; ++c) {
                            g[(i * w + p) * d + c] += self.grad[(i * w + p) * d + c];
                        }
                    }
                }
            }
            if (pv.requires_grad) {
                auto& g = pv.ensure_grad();
                for (std::size_t i = 0; i < b; ++i) {
                    for (std::size_t c = 0; c < d; ++c) {
                        g[c] += self.grad[(i * w + position) * d + c];
                    }
                }
            }
        };
    }
    return Tensor<T>(out);
}

/// Throws NumericError if any value is NaN or infinite.
template <class T>
void require_finite(const Tensor<T>& x, const std::string& where) {
    for (T v : x.values()) {
        if (!std::isfinite(v)) {
            throw NumericError("non-finite activation at " + where);
        }
    }
}

}  // namespace flowlens::ad
