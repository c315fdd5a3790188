#pragma once

// Differentiable operations over Tensor<T>. Each op computes its forward
// value eagerly and registers the matching backward closure.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "usts/tensor.hpp"

namespace usts::ops {

namespace detail {

template <class T>
Node<T>* grad_target(Node<T>& self, std::size_t i) {
    Node<T>* p = self.parents[i].get();
    if (!p->requires_grad) return nullptr;
    p->ensure_grad();
    return p;
}

template <class T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMajor<T>>;
template <class T>
using MutMap = Eigen::Map<RowMajor<T>>;

// C[M,N] += A[M,K] * B[K,N]
template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
    const auto m = static_cast<Eigen::Index>(M), n = static_cast<Eigen::Index>(N), k = static_cast<Eigen::Index>(K);
    MutMap<T>(C, m, n).noalias() += ConstMap<T>(A, m, k) * ConstMap<T>(B, k, n);
}

// C[M,N] += A[M,K] * B[N,K]^T
template <class T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
    const auto m = static_cast<Eigen::Index>(M), n = static_cast<Eigen::Index>(N), k = static_cast<Eigen::Index>(K);
    MutMap<T>(C, m, n).noalias() += ConstMap<T>(A, m, k) * ConstMap<T>(B, n, k).transpose();
}

// C[M,N] += A[K,M]^T * B[K,N]
template <class T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
    const auto m = static_cast<Eigen::Index>(M), n = static_cast<Eigen::Index>(N), k = static_cast<Eigen::Index>(K);
    MutMap<T>(C, m, n).noalias() += ConstMap<T>(A, k, m).transpose() * ConstMap<T>(B, k, n);
}

/// How an operand's flat index follows the output's: identical, cyclic over
/// a trailing block (suffix broadcast, scalars), or an explicit table.
struct OperandMap {
    enum Kind { Identity, Cyclic, Table } kind = Identity;
    std::size_t period = 1;
    std::vector<std::size_t> table;
    std::size_t operator()(std::size_t i) const {
        return kind == Identity ? i : kind == Cyclic ? i % period : table[i];
    }
};

struct Broadcast {
    Shape out;
    OperandMap a, b;
};

inline Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
    Broadcast plan;
    const std::size_t rank = std::max(a.size(), b.size());
    Shape pa(rank, 1), pb(rank, 1);
    std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
    plan.out.resize(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
            throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) +
                                 " with " + shape_str(b));
        }
        plan.out[i] = std::max(pa[i], pb[i]);
    }
    const std::size_t n = shape_numel(plan.out);
    auto map_for = [&](const Shape& p) {
        OperandMap m;
        if (p == plan.out) return m;
        const std::size_t numel = shape_numel(p);
        // leading size-1 axes followed by axes equal to the output's
        std::size_t lead = 0;
        while (lead < rank && p[lead] == 1) ++lead;
        if (std::equal(p.begin() + static_cast<std::ptrdiff_t>(lead), p.end(),
                       plan.out.begin() + static_cast<std::ptrdiff_t>(lead))) {
            m.kind = OperandMap::Cyclic;
            m.period = std::max<std::size_t>(numel, 1);
            return m;
        }
        m.kind = OperandMap::Table;
        std::vector<std::size_t> stride(rank);
        std::size_t acc = 1;
        for (std::size_t i = rank; i-- > 0;) {
            stride[i] = p[i] == 1 ? 0 : acc;
            acc *= p[i];
        }
        m.table.resize(n);
        std::vector<std::size_t> idx(rank, 0);
        std::size_t at = 0;
        for (std::size_t flat = 0; flat < n; ++flat) {
            m.table[flat] = at;
            for (std::size_t ax = rank; ax-- > 0;) {
                if (++idx[ax] < plan.out[ax]) {
                    at += stride[ax];
                    break;
                }
                at -= stride[ax] * (plan.out[ax] - 1);
                idx[ax] = 0;
            }
        }
        return m;
    };
    plan.a = map_for(pa);
    plan.b = map_for(pb);
    return plan;
}

enum class BinaryKind { Add, Sub, Mul, Div };

template <BinaryKind K, class T>
inline T apply_binary(T x, T y) {
    if constexpr (K == BinaryKind::Add) return x + y;
    if constexpr (K == BinaryKind::Sub) return x - y;
    if constexpr (K == BinaryKind::Mul) return x * y;
    if constexpr (K == BinaryKind::Div) return x / y;
}

template <BinaryKind K, class T>
void binary_backward(const Broadcast& plan, Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    Node<T>* ga = grad_target(self, 0);
    Node<T>* gb = grad_target(self, 1);
    const std::size_t n = self.grad.size();
    const bool fast = plan.a.kind == OperandMap::Identity && plan.b.kind == OperandMap::Identity;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ia = fast ? i : plan.a(i);
        const std::size_t ib = fast ? i : plan.b(i);
        const T g = self.grad[i];
        if constexpr (K == BinaryKind::Add) {
            if (ga) ga->grad[ia] += g;
            if (gb) gb->grad[ib] += g;
        } else if constexpr (K == BinaryKind::Sub) {
            if (ga) ga->grad[ia] += g;
            if (gb) gb->grad[ib] -= g;
        } else if constexpr (K == BinaryKind::Mul) {
            if (ga) ga->grad[ia] += g * bv[ib];
            if (gb) gb->grad[ib] += g * av[ia];
        } else {
            if (ga) ga->grad[ia] += g / bv[ib];
            if (gb) gb->grad[ib] -= g * av[ia] / (bv[ib] * bv[ib]);
        }
    }
}

template <BinaryKind K, class T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* name) {
    auto plan = std::make_shared<Broadcast>(plan_broadcast(a.shape(), b.shape(), name));
    const auto& av = a.values();
    const auto& bv = b.values();
    const std::size_t n = shape_numel(plan->out);
    std::vector<T> out(n);
    if (plan->a.kind == OperandMap::Identity && plan->b.kind == OperandMap::Identity) {
        for (std::size_t i = 0; i < n; ++i) out[i] = apply_binary<K>(av[i], bv[i]);
    } else if (plan->a.kind == OperandMap::Identity && plan->b.kind == OperandMap::Cyclic && plan->b.period == 1) {
        const T y = bv[0];
        for (std::size_t i = 0; i < n; ++i) out[i] = apply_binary<K>(av[i], y);
    } else if (plan->a.kind == OperandMap::Identity && plan->b.kind == OperandMap::Cyclic) {
        const std::size_t p = plan->b.period;
        for (std::size_t i = 0; i < n; i += p)
            for (std::size_t j = 0; j < p; ++j) out[i + j] = apply_binary<K>(av[i + j], bv[j]);
    } else {
        for (std::size_t i = 0; i < n; ++i) out[i] = apply_binary<K>(av[plan->a(i)], bv[plan->b(i)]);
    }
    return Tensor<T>::make_result(plan->out, std::move(out), {a, b},
                                  [plan](Node<T>& self) { binary_backward<K>(*plan, self); });
}

// y = f(x); dy/dx expressed through (x, y).
template <class T, class F, class D>
Tensor<T> unary(const Tensor<T>& x, F f, D df) {
    const auto& xv = x.values();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [df](Node<T>& self) {
        Node<T>* gx = grad_target(self, 0);
        if (!gx) return;
        const auto& xv = self.parents[0]->value;
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            gx->grad[i] += self.grad[i] * df(xv[i], self.value[i]);
    });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary<detail::BinaryKind::Add>(a, b, "add");
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary<detail::BinaryKind::Sub>(a, b, "sub");
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary<detail::BinaryKind::Mul>(a, b, "mul");
}
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary<detail::BinaryKind::Div>(a, b, "div");
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    return detail::unary(x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
    return detail::unary(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
    return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
    using Array = Eigen::Array<T, Eigen::Dynamic, 1>;
    std::vector<T> out(x.numel());
    Eigen::Map<Array>(out.data(), Eigen::Index(out.size())) =
        Eigen::Map<const Array>(x.values().data(), Eigen::Index(out.size())).tanh();
    return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [](Node<T>& self) {
        Node<T>* gx = detail::grad_target(self, 0);
        if (!gx) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            gx->grad[i] += self.grad[i] * (T(1) - self.value[i] * self.value[i]);
    });
}

template <class T>
T sigmoid_scalar(T v) {
    return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary(x, [](T v) { return sigmoid_scalar(v); },
                         [](T, T y) { return y * (T(1) - y); });
}

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr T k0 = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T k1 = T(0.044715);
    return detail::unary(
        x,
        [](T v) { return T(0.5) * v * (T(1) + std::tanh(k0 * (v + k1 * v * v * v))); },
        [](T v, T) {
            const T u = k0 * (v + k1 * v * v * v);
            const T t = std::tanh(u);
            const T du = k0 * (T(1) + T(3) * k1 * v * v);
            return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du;
        });
}

/// Elementwise select: keep[i] ? a[i] : b[i]. The unselected side gets no gradient.
template <class T>
Tensor<T> where(const std::vector<std::uint8_t>& keep, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape() || keep.size() != a.numel()) {
        throw DimensionError("where: shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " with mask of " +
                             std::to_string(keep.size()));
    }
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep[i] ? a.values()[i] : b.values()[i];
    return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [keep](Node<T>& self) {
        Node<T>* ga = detail::grad_target(self, 0);
        Node<T>* gb = detail::grad_target(self, 1);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (keep[i]) {
                if (ga) ga->grad[i] += self.grad[i];
            } else if (gb) {
                gb->grad[i] += self.grad[i];
            }
        }
    });
}

// ----------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    T s = T(0);
    for (T v : x.values()) s += v;
    return Tensor<T>::make_result({1}, {s}, {x}, [](Node<T>& self) {
        if (Node<T>* gx = detail::grad_target(self, 0))
            for (auto& g : gx->grad) g += self.grad[0];
    });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Sum over one axis; the axis is removed from the shape.
template <class T>
Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) throw DimensionError("sum_axis: axis out of range for " + shape_str(x.shape()));
    const auto& s = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t n = s[axis];
    Shape os = s;
    os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
    if (os.empty()) os = {1};
    std::vector<T> out(outer * inner, T(0));
    const auto& xv = x.values();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * n + k) * inner + i];
    return Tensor<T>::make_result(os, std::move(out), {x}, [outer, inner, n](Node<T>& self) {
        Node<T>* gx = detail::grad_target(self, 0);
        if (!gx) return;
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t k = 0; k < n; ++k)
                for (std::size_t i = 0; i < inner; ++i)
                    gx->grad[(o * n + k) * inner + i] += self.grad[o * inner + i];
    });
}

template <class T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
    return scale(sum_axis(x, axis), T(1) / static_cast<T>(x.dim(axis)));
}

// -------------------------------------------------------------- shape changes

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    return Tensor<T>::make_result(std::move(shape), x.values(), {x}, [](Node<T>& self) {
        if (Node<T>* gx = detail::grad_target(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) gx->grad[i] += self.grad[i];
    });
}

/// out.shape[i] = x.shape[axes[i]].
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
    const auto& s = x.shape();
    const std::size_t rank = s.size();
    if (axes.size() != rank) throw DimensionError("permute: axis count mismatch for " + shape_str(s));
    if (rank == 2 && axes[0] == 1 && axes[1] == 0) {
        using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        const auto r = Eigen::Index(s[0]), c = Eigen::Index(s[1]);
        std::vector<T> out(x.numel());
        Eigen::Map<Mat>(out.data(), c, r) = Eigen::Map<const Mat>(x.values().data(), r, c).transpose();
        return Tensor<T>::make_result({s[1], s[0]}, std::move(out), {x}, [r, c](Node<T>& self) {
            if (Node<T>* gx = detail::grad_target(self, 0))
                Eigen::Map<Mat>(gx->grad.data(), r, c) += Eigen::Map<const Mat>(self.grad.data(), c, r).transpose();
        });
    }
    std::vector<std::size_t> in_stride(rank);
    std::size_t acc = 1;
    for (std::size_t i = rank; i-- > 0;) {
        in_stride[i] = acc;
        acc *= s[i];
    }
    Shape os(rank);
    std::vector<std::size_t> stride(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        os[i] = s.at(axes[i]);
        stride[i] = in_stride[axes[i]];
    }
    auto src = std::make_shared<std::vector<std::size_t>>(x.numel());
    std::vector<std::size_t> idx(rank, 0);
    std::size_t off = 0;
    for (std::size_t flat = 0; flat < x.numel(); ++flat) {
        (*src)[flat] = off;
        for (std::size_t ax = rank; ax-- > 0;) {
            if (++idx[ax] < os[ax]) {
                off += stride[ax];
                break;
            }
            off -= stride[ax] * (os[ax] - 1);
            idx[ax] = 0;
        }
    }
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[(*src)[i]];
    return Tensor<T>::make_result(os, std::move(out), {x}, [src](Node<T>& self) {
        if (Node<T>* gx = detail::grad_target(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) gx->grad[(*src)[i]] += self.grad[i];
    });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x, std::size_t a, std::size_t b) {
    std::vector<std::size_t> axes(x.rank());
    std::iota(axes.begin(), axes.end(), std::size_t{0});
    std::swap(axes.at(a), axes.at(b));
    return permute(x, axes);
}

/// Contiguous range [start, start+len) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
    const auto& s = x.shape();
    if (axis >= s.size() || start + len > s[axis]) {
        throw DimensionError("slice: [" + std::to_string(start) + "," + std::to_string(start + len) +
                             ") out of range on axis " + std::to_string(axis) + " of " + shape_str(s));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t n = s[axis];
    Shape os = s;
    os[axis] = len;
    std::vector<T> out(outer * len * inner);
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(x.values().begin() + static_cast<std::ptrdiff_t>((o * n + start) * inner),
                    len * inner, out.begin() + static_cast<std::ptrdiff_t>(o * len * inner));
    return Tensor<T>::make_result(os, std::move(out), {x}, [outer, inner, n, start, len](Node<T>& self) {
        Node<T>* gx = detail::grad_target(self, 0);
        if (!gx) return;
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < len * inner; ++i)
                gx->grad[(o * n + start) * inner + i] += self.grad[o * len * inner + i];
    });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s0.at(i);
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
    std::vector<std::size_t> lens;
    std::size_t total = 0;
    for (const auto& p : parts) {
        Shape a = p.shape(), b = s0;
        if (a.size() != b.size()) throw DimensionError("concat: rank mismatch");
        a[axis] = b[axis] = 0;
        if (a != b) {
            throw DimensionError("concat: incompatible shapes " + shape_str(s0) + " and " +
                                 shape_str(p.shape()));
        }
        lens.push_back(p.dim(axis));
        total += p.dim(axis);
    }
    Shape os = s0;
    os[axis] = total;
    std::vector<T> out(outer * total * inner);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& pv = parts[k].values();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * lens[k] * inner), lens[k] * inner,
                        out.begin() + static_cast<std::ptrdiff_t>((o * total + off) * inner));
        off += lens[k];
    }
    return Tensor<T>::make_result(os, std::move(out), parts, [outer, inner, total, lens](Node<T>& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < lens.size(); ++k) {
            if (Node<T>* gp = detail::grad_target(self, k)) {
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < lens[k] * inner; ++i)
                        gp->grad[o * lens[k] * inner + i] += self.grad[(o * total + off) * inner + i];
            }
            off += lens[k];
        }
    });
}

// -------------------------------------------------------------------- linear

/// Matrix product. Supported forms:
///   a[..., M, K] x b[K, N]         (leading axes of a flattened into rows)
///   a[..., M, K] x b[..., K, N]    (batched, identical leading axes)
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    auto mismatch = [&] {
        return DimensionError("matmul: shapes " + shape_str(sa) + " and " + shape_str(sb) +
                              " are incompatible");
    };
    if (sa.size() < 2 || sb.size() < 2) throw mismatch();
    const std::size_t K = sa.back();
    const std::size_t N = sb.back();
    if (sb[sb.size() - 2] != K) throw mismatch();
    std::size_t batch = 1, M = 0;
    bool shared_b = sb.size() == 2;
    Shape os = sa;
    os.back() = N;
    if (shared_b) {
        M = a.numel() / K;
    } else {
        if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) throw mismatch();
        M = sa[sa.size() - 2];
        batch = a.numel() / (M * K);
    }
    std::vector<T> out(batch * M * N, T(0));
    const T* av = a.values().data();
    const T* bv = b.values().data();
    for (std::size_t bt = 0; bt < batch; ++bt)
        detail::gemm_nn(M, N, K, av + bt * M * K, shared_b ? bv : bv + bt * K * N, out.data() + bt * M * N);
    return Tensor<T>::make_result(os, std::move(out), {a, b}, [batch, M, N, K, shared_b](Node<T>& self) {
        const T* av = self.parents[0]->value.data();
        const T* bv = self.parents[1]->value.data();
        Node<T>* ga = detail::grad_target(self, 0);
        Node<T>* gb = detail::grad_target(self, 1);
        for (std::size_t bt = 0; bt < batch; ++bt) {
            const T* g = self.grad.data() + bt * M * N;
            const T* bb = shared_b ? bv : bv + bt * K * N;
            if (ga) detail::gemm_nt(M, K, N, g, bb, ga->grad.data() + bt * M * K);
            if (gb) detail::gemm_tn(K, N, M, av + bt * M * K, g, gb->grad.data() + (shared_b ? 0 : bt * K * N));
        }
    });
}

/// x[..., in] W[in, out] + bias[out]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    auto y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
}

// ------------------------------------------------------------- normalization

/// Softmax over the last axis with max-subtraction.
template <class T>
Tensor<T> softmax_lastaxis(const Tensor<T>& x) {
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.numel() / n;
    const auto& xv = x.values();
    std::vector<T> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xv.data() + r * n;
        T* o = out.data() + r * n;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, in[j]);
        T s = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            o[j] = std::exp(in[j] - mx);
            s += o[j];
        }
        for (std::size_t j = 0; j < n; ++j) o[j] /= s;
    }
    return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [rows, n](Node<T>& self) {
        Node<T>* gx = detail::grad_target(self, 0);
        if (!gx) return;
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = self.value.data() + r * n;
            const T* g = self.grad.data() + r * n;
            T dot = T(0);
            for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
            for (std::size_t j = 0; j < n; ++j) gx->grad[r * n + j] += y[j] * (g[j] - dot);
        }
    });
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
    const std::size_t n = x.shape().back();
    if (gamma.numel() != n || beta.numel() != n) {
        throw DimensionError("layer_norm: affine width mismatch for " + shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / n;
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto inv_std = std::make_shared<std::vector<T>>(rows);
    std::vector<T> out(x.numel());
    const auto& xv = x.values();
    for (std::size_t r = 0; r < rows; ++r) {
        T mu = T(0);
        for (std::size_t j = 0; j < n; ++j) mu += xv[r * n + j];
        mu /= static_cast<T>(n);
        T var = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            const T d = xv[r * n + j] - mu;
            var += d * d;
        }
        var /= static_cast<T>(n);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < n; ++j) {
            const T h = (xv[r * n + j] - mu) * is;
            (*xhat)[r * n + j] = h;
            out[r * n + j] = h * gamma.values()[j] + beta.values()[j];
        }
    }
    return Tensor<T>::make_result(x.shape(), std::move(out), {x, gamma, beta},
                                  [rows, n, xhat, inv_std](Node<T>& self) {
        Node<T>* gx = detail::grad_target(self, 0);
        Node<T>* gg = detail::grad_target(self, 1);
        Node<T>* gb = detail::grad_target(self, 2);
        const auto& gamma = self.parents[1]->value;
        for (std::size_t r = 0; r < rows; ++r) {
            const T* g = self.grad.data() + r * n;
            const T* h = xhat->data() + r * n;
            T sum_dh = T(0), sum_dh_h = T(0);
            for (std::size_t j = 0; j < n; ++j) {
                if (gg) gg->grad[j] += g[j] * h[j];
                if (gb) gb->grad[j] += g[j];
                const T dh = g[j] * gamma[j];
                sum_dh += dh;
                sum_dh_h += dh * h[j];
            }
            if (!gx) continue;
            const T is = (*inv_std)[r];
            const T inv_n = T(1) / static_cast<T>(n);
            for (std::size_t j = 0; j < n; ++j) {
                const T dh = g[j] * gamma[j];
                gx->grad[r * n + j] += is * (dh - inv_n * sum_dh - h[j] * inv_n * sum_dh_h);
            }
        }
    });
}

// ------------------------------------------------------------- gather/unfold

/// Rows of table[Q, D] picked by index -> [indices.size(), D].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::size_t>& indices) {
    if (table.rank() != 2) throw DimensionError("embedding: table must be rank 2");
    const std::size_t q = table.dim(0), d = table.dim(1);
    std::vector<T> out(indices.size() * d);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= q) throw DimensionError("embedding: index " + std::to_string(indices[i]) +
                                                  " out of range " + std::to_string(q));
        std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(indices[i] * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    return Tensor<T>::make_result({indices.size(), d}, std::move(out), {table}, [indices, d](Node<T>& self) {
        Node<T>* gt = detail::grad_target(self, 0);
        if (!gt) return;
        for (std::size_t i = 0; i < indices.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) gt->grad[indices[i] * d + j] += self.grad[i * d + j];
    });
}

/// Temporal patches for a "same"-padded 1-D convolution over axis 1:
/// x[B, L, C] -> [B, L, K*C] with out[b, t, k*C + c] = x[b, t + k - (K-1)/2, c]
/// (zero outside [0, L)).
template <class T>
Tensor<T> unfold_time(const Tensor<T>& x, std::size_t kernel) {
    if (x.rank() != 3) throw DimensionError("unfold_time: expected [B,L,C], got " + shape_str(x.shape()));
    const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
    if (kernel == 0 || kernel > L) {
        throw ConfigError("convolution kernel " + std::to_string(kernel) + " longer than sequence " +
                          std::to_string(L));
    }
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>((kernel - 1) / 2);
    std::vector<T> out(B * L * kernel * C, T(0));
    const auto& xv = x.values();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < L; ++t)
            for (std::size_t k = 0; k < kernel; ++k) {
                const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - pad;
                if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
                std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((b * L + static_cast<std::size_t>(src)) * C), C,
                            out.begin() + static_cast<std::ptrdiff_t>(((b * L + t) * kernel + k) * C));
            }
    return Tensor<T>::make_result({B, L, kernel * C}, std::move(out), {x}, [B, L, C, kernel, pad](Node<T>& self) {
        Node<T>* gx = detail::grad_target(self, 0);
        if (!gx) return;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < L; ++t)
                for (std::size_t k = 0; k < kernel; ++k) {
                    const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - pad;
                    if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
                    for (std::size_t c = 0; c < C; ++c)
                        gx->grad[(b * L + static_cast<std::size_t>(src)) * C + c] +=
                            self.grad[((b * L + t) * kernel + k) * C + c];
                }
    });
}

// ------------------------------------------------------------------------ GRU

/// One GRU step for a batch of rows (gate order r, z, n):
///   r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
///   z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
///   n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
///   h' = (1 - z) * n + z * h
/// Shapes: x[R, I], h[R, H], w_ih[I, 3H], w_hh[H, 3H], b_ih[3H], b_hh[3H].
template <class T>
Tensor<T> gru_cell(const Tensor<T>& x, const Tensor<T>& h, const Tensor<T>& w_ih, const Tensor<T>& w_hh,
                   const Tensor<T>& b_ih, const Tensor<T>& b_hh) {
    const std::size_t R = x.dim(0), I = x.dim(1), H = h.dim(1);
    if (h.dim(0) != R || w_ih.shape() != Shape{I, 3 * H} || w_hh.shape() != Shape{H, 3 * H} ||
        b_ih.numel() != 3 * H || b_hh.numel() != 3 * H) {
        throw DimensionError("gru_cell: x " + shape_str(x.shape()) + ", h " + shape_str(h.shape()) +
                             ", w_ih " + shape_str(w_ih.shape()) + ", w_hh " + shape_str(w_hh.shape()));
    }
    struct Cache {
        std::vector<T> r, z, n, hn;  // hn = h W_hn + b_hn
    };
    auto cache = std::make_shared<Cache>();
    std::vector<T> gi(R * 3 * H, T(0)), gh(R * 3 * H, T(0));
    detail::gemm_nn(R, 3 * H, I, x.values().data(), w_ih.values().data(), gi.data());
    detail::gemm_nn(R, 3 * H, H, h.values().data(), w_hh.values().data(), gh.data());
    cache->r.resize(R * H);
    cache->z.resize(R * H);
    cache->n.resize(R * H);
    cache->hn.resize(R * H);
    std::vector<T> out(R * H);
    const auto& bi = b_ih.values();
    const auto& bh = b_hh.values();
    const auto& hv = h.values();
    for (std::size_t row = 0; row < R; ++row)
        for (std::size_t j = 0; j < H; ++j) {
            const std::size_t o = row * 3 * H;
            const T r = sigmoid_scalar(gi[o + j] + bi[j] + gh[o + j] + bh[j]);
            const T z = sigmoid_scalar(gi[o + H + j] + bi[H + j] + gh[o + H + j] + bh[H + j]);
            const T hn = gh[o + 2 * H + j] + bh[2 * H + j];
            const T n = std::tanh(gi[o + 2 * H + j] + bi[2 * H + j] + r * hn);
            const std::size_t k = row * H + j;
            cache->r[k] = r;
            cache->z[k] = z;
            cache->n[k] = n;
            cache->hn[k] = hn;
            out[k] = (T(1) - z) * n + z * hv[k];
        }
    return Tensor<T>::make_result({R, H}, std::move(out), {x, h, w_ih, w_hh, b_ih, b_hh},
                                  [R, I, H, cache](Node<T>& self) {
        const auto& xv = self.parents[0]->value;
        const auto& hv = self.parents[1]->value;
        const auto& wih = self.parents[2]->value;
        const auto& whh = self.parents[3]->value;
        // d(pre-activation) for the input-side and hidden-side gate blocks.
        std::vector<T> dgi(R * 3 * H), dgh(R * 3 * H);
        Node<T>* gh_prev = detail::grad_target(self, 1);
        for (std::size_t row = 0; row < R; ++row)
            for (std::size_t j = 0; j < H; ++j) {
                const std::size_t k = row * H + j;
                const T g = self.grad[k];
                const T r = cache->r[k], z = cache->z[k], n = cache->n[k], hn = cache->hn[k];
                const T dn = g * (T(1) - z) * (T(1) - n * n);
                const T dz = g * (hv[k] - n) * z * (T(1) - z);
                const T dr = dn * hn * r * (T(1) - r);
                const std::size_t o = row * 3 * H;
                dgi[o + j] = dr;
                dgi[o + H + j] = dz;
                dgi[o + 2 * H + j] = dn;
                dgh[o + j] = dr;
                dgh[o + H + j] = dz;
                dgh[o + 2 * H + j] = dn * r;
                if (gh_prev) gh_prev->grad[k] += g * z;
            }
        if (Node<T>* gx = detail::grad_target(self, 0)) detail::gemm_nt(R, I, 3 * H, dgi.data(), wih.data(), gx->grad.data());
        if (gh_prev) detail::gemm_nt(R, H, 3 * H, dgh.data(), whh.data(), gh_prev->grad.data());
        if (Node<T>* gw = detail::grad_target(self, 2)) detail::gemm_tn(I, 3 * H, R, xv.data(), dgi.data(), gw->grad.data());
        if (Node<T>* gw = detail::grad_target(self, 3)) detail::gemm_tn(H, 3 * H, R, hv.data(), dgh.data(), gw->grad.data());
        if (Node<T>* gb = detail::grad_target(self, 4))
            for (std::size_t row = 0; row < R; ++row)
                for (std::size_t j = 0; j < 3 * H; ++j) gb->grad[j] += dgi[row * 3 * H + j];
        if (Node<T>* gb = detail::grad_target(self, 5))
            for (std::size_t row = 0; row < R; ++row)
                for (std::size_t j = 0; j < 3 * H; ++j) gb->grad[j] += dgh[row * 3 * H + j];
    });
}

// -------------------------------------------------------------------- checks

template <class T>
bool all_finite(const Tensor<T>& x) {
    return std::all_of(x.values().begin(), x.values().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace usts::ops
