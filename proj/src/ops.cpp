#include "egnn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

namespace egnn {
namespace ops {

namespace {

constexpr double kDenomFloor = 1e-12;

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
    if (!t.all_finite())
        throw NumericsError(std::string(op) + ": non-finite value produced");
}

template <typename T>
bool track(const Tape<T>& tape, std::initializer_list<const Tensor<T>*> inputs) {
    if (!tape.recording()) return false;
    for (const Tensor<T>* t : inputs)
        if ((*t).requires_grad()) return true;
    return false;
}

std::vector<std::size_t> row_major_strides(const Shape& shape) {
    std::vector<std::size_t> s(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
    return s;
}

// Right-aligned broadcast plan; per-axis strides are zeroed on broadcast axes
// so a flat input offset can be advanced odometer-style with the output index.
struct BroadcastPlan {
    Shape out_shape;
    std::vector<std::size_t> a_strides;
    std::vector<std::size_t> b_strides;
};

BroadcastPlan broadcast_plan(const Shape& a, const Shape& b, const char* op) {
    const std::size_t rank = std::max(a.size(), b.size());
    BroadcastPlan plan;
    plan.out_shape.assign(rank, 1);
    plan.a_strides.assign(rank, 0);
    plan.b_strides.assign(rank, 0);
    const auto sa = row_major_strides(a);
    const auto sb = row_major_strides(b);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t axis = rank - 1 - i;
        const std::size_t ea = i < a.size() ? a[a.size() - 1 - i] : 1;
        const std::size_t eb = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (ea != eb && ea != 1 && eb != 1)
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                             shape_str(b) + " do not broadcast");
        plan.out_shape[axis] = std::max(ea, eb);
        if (ea != 1 && i < a.size()) plan.a_strides[axis] = sa[a.size() - 1 - i];
        if (eb != 1 && i < b.size()) plan.b_strides[axis] = sb[b.size() - 1 - i];
    }
    return plan;
}

// Calls fn(out_index, a_index, b_index) for every output element.
template <typename F>
void for_each_broadcast(const BroadcastPlan& plan, F&& fn) {
    const std::size_t n = shape_size(plan.out_shape);
    const std::size_t rank = plan.out_shape.size();
    std::vector<std::size_t> coord(rank, 0);
    std::size_t ai = 0, bi = 0;
    for (std::size_t oi = 0; oi < n; ++oi) {
        fn(oi, ai, bi);
        for (std::size_t axis = rank; axis-- > 0;) {
            ++coord[axis];
            ai += plan.a_strides[axis];
            bi += plan.b_strides[axis];
            if (coord[axis] < plan.out_shape[axis]) break;
            ai -= plan.a_strides[axis] * plan.out_shape[axis];
            bi -= plan.b_strides[axis] * plan.out_shape[axis];
            coord[axis] = 0;
        }
    }
}

// Shared skeleton for broadcasting binary elementwise ops. fwd(a,b) gives the
// output value; bwd(g,a,b,&da,&db) gives input gradient contributions.
template <typename T, typename Fwd, typename Bwd>
Tensor<T> binary_elementwise(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b,
                             const char* name, Fwd fwd, Bwd bwd) {
    auto plan = broadcast_plan(a.shape(), b.shape(), name);
    const bool rec = track(tape, {&a, &b});
    Tensor<T> out = Tensor<T>::zeros(plan.out_shape, rec);
    {
        auto ov = out.values_mut();
        auto av = a.values();
        auto bv = b.values();
        for_each_broadcast(plan, [&](std::size_t oi, std::size_t ai, std::size_t bi) {
            ov[oi] = fwd(av[ai], bv[bi]);
        });
    }
    check_finite(out, name);
    if (rec) {
        tape.record([plan = std::move(plan), a, b, out, bwd]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto av = a.values();
            auto bv = b.values();
            const bool need_a = a.requires_grad();
            const bool need_b = b.requires_grad();
            auto ga = need_a ? a.grad_mut() : std::span<T>();
            auto gb = need_b ? b.grad_mut() : std::span<T>();
            for_each_broadcast(plan, [&](std::size_t oi, std::size_t ai, std::size_t bi) {
                T da = 0, db = 0;
                bwd(g[oi], av[ai], bv[bi], da, db);
                if (need_a) ga[ai] += da;
                if (need_b) gb[bi] += db;
            });
        });
    }
    return out;
}

// Shared skeleton for unary elementwise ops with pointwise backward.
template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_elementwise(Tape<T>& tape, const Tensor<T>& x, const char* name, Fwd fwd,
                            Bwd bwd) {
    const bool rec = track(tape, {&x});
    Tensor<T> out = Tensor<T>::zeros(x.shape(), rec);
    {
        auto ov = out.values_mut();
        auto xv = x.values();
        for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = fwd(xv[i]);
    }
    check_finite(out, name);
    if (rec) {
        tape.record([x, out, bwd]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto xv = x.values();
            auto ov = out.values();
            auto gx = x.grad_mut();
            for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += bwd(g[i], xv[i], ov[i]);
        });
    }
    return out;
}

// Iterates 1-D slices along `axis`: fn(base_offset, stride) once per slice.
template <typename F>
void for_each_slice(const Shape& shape, std::size_t axis, F&& fn) {
    const auto strides = row_major_strides(shape);
    const std::size_t stride = strides[axis];
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    const std::size_t block = shape[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) fn(o * block + in, stride);
}

template <typename T>
void check_axis(const Tensor<T>& x, std::size_t axis, const char* op) {
    if (axis >= x.rank())
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(x.shape()));
}

template <typename T>
T sign_of(T v) {
    return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
}

} // namespace

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    return binary_elementwise(
        tape, a, b, "add", [](T x, T y) { return x + y; },
        [](T g, T, T, T& da, T& db) { da = g; db = g; });
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    return binary_elementwise(
        tape, a, b, "sub", [](T x, T y) { return x - y; },
        [](T g, T, T, T& da, T& db) { da = g; db = -g; });
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    return binary_elementwise(
        tape, a, b, "mul", [](T x, T y) { return x * y; },
        [](T g, T x, T y, T& da, T& db) { da = g * y; db = g * x; });
}

template <typename T>
Tensor<T> div(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    return binary_elementwise(
        tape, a, b, "div", [](T x, T y) { return x / y; },
        [](T g, T x, T y, T& da, T& db) {
            da = g / y;
            db = -g * x / (y * y);
        });
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor) {
    return unary_elementwise(
        tape, x, "scale", [factor](T v) { return v * factor; },
        [factor](T g, T, T) { return g * factor; });
}

template <typename T>
Tensor<T> abs(Tape<T>& tape, const Tensor<T>& x) {
    return unary_elementwise(
        tape, x, "abs", [](T v) { return std::abs(v); },
        [](T g, T v, T) { return g * sign_of(v); });
}

template <typename T>
Tensor<T> clamp(Tape<T>& tape, const Tensor<T>& x, T lo, T hi) {
    return unary_elementwise(
        tape, x, "clamp", [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
        [lo, hi](T g, T v, T) { return (v >= lo && v <= hi) ? g : T(0); });
}

template <typename T>
Tensor<T> leaky_relu(Tape<T>& tape, const Tensor<T>& x, T slope) {
    return unary_elementwise(
        tape, x, "leaky_relu", [slope](T v) { return v > T(0) ? v : slope * v; },
        [slope](T g, T v, T) { return v > T(0) ? g : slope * g; });
}

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x) {
    return unary_elementwise(
        tape, x, "sigmoid",
        [](T v) {
            if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
            const T e = std::exp(v);
            return e / (T(1) + e);
        },
        [](T g, T, T o) { return g * o * (T(1) - o); });
}

template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x, std::size_t axis) {
    check_axis(x, axis, "softmax");
    const bool rec = track(tape, {&x});
    Tensor<T> out = Tensor<T>::zeros(x.shape(), rec);
    const std::size_t m = x.extent(axis);
    {
        auto ov = out.values_mut();
        auto xv = x.values();
        for_each_slice(x.shape(), axis, [&](std::size_t base, std::size_t stride) {
            T mx = xv[base];
            for (std::size_t k = 1; k < m; ++k) mx = std::max(mx, xv[base + k * stride]);
            T sum = 0;
            for (std::size_t k = 0; k < m; ++k) {
                const T e = std::exp(xv[base + k * stride] - mx);
                ov[base + k * stride] = e;
                sum += e;
            }
            for (std::size_t k = 0; k < m; ++k) ov[base + k * stride] /= sum;
        });
    }
    check_finite(out, "softmax");
    if (rec) {
        tape.record([x, out, axis, m]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto ov = out.values();
            auto gx = x.grad_mut();
            for_each_slice(x.shape(), axis, [&](std::size_t base, std::size_t stride) {
                T dot = 0;
                for (std::size_t k = 0; k < m; ++k)
                    dot += g[base + k * stride] * ov[base + k * stride];
                for (std::size_t k = 0; k < m; ++k) {
                    const std::size_t i = base + k * stride;
                    gx[i] += ov[i] * (g[i] - dot);
                }
            });
        });
    }
    return out;
}

template <typename T>
Tensor<T> l1_normalize(Tape<T>& tape, const Tensor<T>& x, std::size_t axis) {
    check_axis(x, axis, "l1_normalize");
    const bool rec = track(tape, {&x});
    Tensor<T> out = Tensor<T>::zeros(x.shape(), rec);
    const std::size_t m = x.extent(axis);
    {
        auto ov = out.values_mut();
        auto xv = x.values();
        for_each_slice(x.shape(), axis, [&](std::size_t base, std::size_t stride) {
            T norm = 0;
            for (std::size_t k = 0; k < m; ++k) norm += std::abs(xv[base + k * stride]);
            if (static_cast<double>(norm) < kDenomFloor)
                throw NumericsError("l1_normalize: norm below 1e-12 floor");
            for (std::size_t k = 0; k < m; ++k) ov[base + k * stride] = xv[base + k * stride] / norm;
        });
    }
    check_finite(out, "l1_normalize");
    if (rec) {
        tape.record([x, out, axis, m]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto xv = x.values();
            auto ov = out.values();
            auto gx = x.grad_mut();
            for_each_slice(x.shape(), axis, [&](std::size_t base, std::size_t stride) {
                T norm = 0, dot = 0;
                for (std::size_t k = 0; k < m; ++k) {
                    norm += std::abs(xv[base + k * stride]);
                    dot += g[base + k * stride] * ov[base + k * stride];
                }
                for (std::size_t k = 0; k < m; ++k) {
                    const std::size_t i = base + k * stride;
                    gx[i] += g[i] / norm - sign_of(xv[i]) * dot / norm;
                }
            });
        });
    }
    return out;
}

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0))
        throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + " do not conform");
    const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    const bool rec = track(tape, {&a, &b});
    Tensor<T> out = Tensor<T>::zeros({m, n}, rec);
    {
        auto ov = out.values_mut();
        auto av = a.values();
        auto bv = b.values();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t kk = 0; kk < k; ++kk) {
                const T aik = av[i * k + kk];
                const T* brow = &bv[kk * n];
                T* orow = &ov[i * n];
                for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
            }
    }
    check_finite(out, "matmul");
    if (rec) {
        tape.record([a, b, out, m, k, n]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto av = a.values();
            auto bv = b.values();
            if (a.requires_grad()) {
                auto ga = a.grad_mut();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        T acc = 0;
                        const T* grow = &g[i * n];
                        const T* brow = &bv[kk * n];
                        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[i * k + kk] += acc;
                    }
            }
            if (b.requires_grad()) {
                auto gb = b.grad_mut();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const T aik = av[i * k + kk];
                        const T* grow = &g[i * n];
                        T* gbrow = &gb[kk * n];
                        for (std::size_t j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
                    }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat(Tape<T>& tape, const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const std::size_t rank = parts[0].rank();
    check_axis(parts[0], axis, "concat");
    Shape out_shape = parts[0].shape();
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        if (p.rank() != rank)
            throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < rank; ++i)
            if (i != axis && p.extent(i) != parts[0].extent(i))
                throw ShapeError("concat: extent mismatch on axis " + std::to_string(i));
        out_shape[axis] += p.extent(axis);
    }
    bool rec = false;
    if (tape.recording())
        for (const auto& p : parts) rec = rec || p.requires_grad();
    Tensor<T> out = Tensor<T>::zeros(out_shape, rec);

    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= out_shape[i];
    for (std::size_t i = axis + 1; i < rank; ++i) inner *= out_shape[i];
    const std::size_t out_block = out_shape[axis] * inner;
    {
        auto ov = out.values_mut();
        std::size_t offset = 0;
        for (const auto& p : parts) {
            auto pv = p.values();
            const std::size_t p_block = p.extent(axis) * inner;
            for (std::size_t o = 0; o < outer; ++o)
                std::copy_n(&pv[o * p_block], p_block, &ov[o * out_block + offset]);
            offset += p_block;
        }
    }
    if (rec) {
        tape.record([parts, out, outer, out_block]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            std::size_t offset = 0;
            for (auto& p : parts) {
                const std::size_t block = p.size() / outer;
                if (p.requires_grad()) {
                    auto gp = p.grad_mut();
                    for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t i = 0; i < block; ++i)
                            gp[o * block + i] += g[o * out_block + offset + i];
                }
                offset += block;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> reduce_sum(Tape<T>& tape, const Tensor<T>& x, std::size_t axis, bool keepdims) {
    check_axis(x, axis, "reduce_sum");
    Shape out_shape = x.shape();
    if (keepdims)
        out_shape[axis] = 1;
    else
        out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out_shape.empty()) out_shape = {1};
    const bool rec = track(tape, {&x});
    Tensor<T> out = Tensor<T>::zeros(out_shape, rec);
    const std::size_t m = x.extent(axis);
    {
        auto ov = out.values_mut();
        auto xv = x.values();
        std::size_t slice = 0;
        for_each_slice(x.shape(), axis, [&](std::size_t base, std::size_t stride) {
            T acc = 0;
            for (std::size_t k = 0; k < m; ++k) acc += xv[base + k * stride];
            ov[slice++] = acc;
        });
    }
    check_finite(out, "reduce_sum");
    if (rec) {
        tape.record([x, out, axis, m]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto gx = x.grad_mut();
            std::size_t slice = 0;
            for_each_slice(x.shape(), axis, [&](std::size_t base, std::size_t stride) {
                const T gv = g[slice++];
                for (std::size_t k = 0; k < m; ++k) gx[base + k * stride] += gv;
            });
        });
    }
    return out;
}

template <typename T>
Tensor<T> reduce_sum_all(Tape<T>& tape, const Tensor<T>& x) {
    const bool rec = track(tape, {&x});
    T acc = 0;
    for (T v : x.values()) acc += v;
    Tensor<T> out = Tensor<T>::from_data({1}, {acc}, rec);
    check_finite(out, "reduce_sum_all");
    if (rec) {
        tape.record([x, out]() mutable {
            if (!out.has_grad()) return;
            const T g = out.grad()[0];
            auto gx = x.grad_mut();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
    if (shape_size(shape) != x.size())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
    const bool rec = track(tape, {&x});
    Tensor<T> out =
        Tensor<T>::from_data(std::move(shape), {x.values().begin(), x.values().end()}, rec);
    if (rec) {
        tape.record([x, out]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto gx = x.grad_mut();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> gather_flat(Tape<T>& tape, const Tensor<T>& x, std::vector<std::size_t> indices) {
    for (std::size_t idx : indices)
        if (idx >= x.size())
            throw ShapeError("gather_flat: index " + std::to_string(idx) + " out of range");
    const bool rec = track(tape, {&x});
    Tensor<T> out = Tensor<T>::zeros({indices.size()}, rec);
    {
        auto ov = out.values_mut();
        auto xv = x.values();
        for (std::size_t i = 0; i < indices.size(); ++i) ov[i] = xv[indices[i]];
    }
    if (rec) {
        tape.record([x, out, indices = std::move(indices)]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto gx = x.grad_mut();
            for (std::size_t i = 0; i < indices.size(); ++i) gx[indices[i]] += g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> pairwise_abs_diff(Tape<T>& tape, const Tensor<T>& v) {
    if (v.rank() != 2)
        throw ShapeError("pairwise_abs_diff: expected rank-2 input, got " + shape_str(v.shape()));
    const std::size_t n = v.extent(0), d = v.extent(1);
    const bool rec = track(tape, {&v});
    Tensor<T> out = Tensor<T>::zeros({n * n, d}, rec);
    {
        auto ov = out.values_mut();
        auto vv = v.values();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const T* ri = &vv[i * d];
                const T* rj = &vv[j * d];
                T* ro = &ov[(i * n + j) * d];
                for (std::size_t k = 0; k < d; ++k) ro[k] = std::abs(ri[k] - rj[k]);
            }
    }
    check_finite(out, "pairwise_abs_diff");
    if (rec) {
        tape.record([v, out, n, d]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto vv = v.values();
            auto gv = v.grad_mut();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const T* gro = &g[(i * n + j) * d];
                    for (std::size_t k = 0; k < d; ++k) {
                        const T s = sign_of(vv[i * d + k] - vv[j * d + k]);
                        gv[i * d + k] += gro[k] * s;
                        gv[j * d + k] -= gro[k] * s;
                    }
                }
        });
    }
    return out;
}

template <typename T>
Tensor<T> bce_loss(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& target) {
    if (pred.shape() != target.shape())
        throw ShapeError("bce_loss: prediction shape " + shape_str(pred.shape()) +
                         " does not match target shape " + shape_str(target.shape()));
    if (pred.size() == 0) throw ShapeError("bce_loss: empty input");
    const T lo = T(1e-7), hi = T(1) - T(1e-7);
    const std::size_t n = pred.size();
    const bool rec = track(tape, {&pred});
    T acc = 0;
    {
        auto pv = pred.values();
        auto tv = target.values();
        for (std::size_t i = 0; i < n; ++i) {
            const T p = std::min(std::max(pv[i], lo), hi);
            acc += -(tv[i] * std::log(p) + (T(1) - tv[i]) * std::log(T(1) - p));
        }
    }
    Tensor<T> out = Tensor<T>::from_data({1}, {acc / T(n)}, rec);
    check_finite(out, "bce_loss");
    if (rec) {
        tape.record([pred, target, out, lo, hi, n]() mutable {
            if (!out.has_grad()) return;
            const T g = out.grad()[0];
            auto pv = pred.values();
            auto tv = target.values();
            auto gp = pred.grad_mut();
            for (std::size_t i = 0; i < n; ++i) {
                if (pv[i] < lo || pv[i] > hi) continue; // clamped: flat region
                const T p = pv[i];
                gp[i] += g * (p - tv[i]) / (p * (T(1) - p)) / T(n);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 std::size_t stride, std::size_t padding) {
    if (x.rank() != 4 || w.rank() != 4)
        throw ShapeError("conv2d: expected NCHW input and OCHW kernel, got " +
                         shape_str(x.shape()) + " and " + shape_str(w.shape()));
    if (x.extent(1) != w.extent(1))
        throw ShapeError("conv2d: input channels " + std::to_string(x.extent(1)) +
                         " do not match kernel channels " + std::to_string(w.extent(1)));
    if (b.rank() != 1 || b.extent(0) != w.extent(0))
        throw ShapeError("conv2d: bias must have one entry per output channel");
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    const std::size_t batch = x.extent(0), cin = x.extent(1), h = x.extent(2), wd = x.extent(3);
    const std::size_t cout = w.extent(0), kh = w.extent(2), kw = w.extent(3);
    if (h + 2 * padding < kh || wd + 2 * padding < kw)
        throw ShapeError("conv2d: kernel larger than padded input");
    const std::size_t ho = (h + 2 * padding - kh) / stride + 1;
    const std::size_t wo = (wd + 2 * padding - kw) / stride + 1;

    const bool rec = track(tape, {&x, &w, &b});
    Tensor<T> out = Tensor<T>::zeros({batch, cout, ho, wo}, rec);
    {
        auto ov = out.values_mut();
        auto xv = x.values();
        auto wv = w.values();
        auto bv = b.values();
        for (std::size_t nb = 0; nb < batch; ++nb)
            for (std::size_t oc = 0; oc < cout; ++oc)
                for (std::size_t oy = 0; oy < ho; ++oy)
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        T acc = bv[oc];
                        for (std::size_t ic = 0; ic < cin; ++ic)
                            for (std::size_t ky = 0; ky < kh; ++ky) {
                                const std::ptrdiff_t iy =
                                    static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(padding);
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                                for (std::size_t kx = 0; kx < kw; ++kx) {
                                    const std::ptrdiff_t ix =
                                        static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                        static_cast<std::ptrdiff_t>(padding);
                                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                                    acc += xv[((nb * cin + ic) * h + iy) * wd + ix] *
                                           wv[((oc * cin + ic) * kh + ky) * kw + kx];
                                }
                            }
                        ov[((nb * cout + oc) * ho + oy) * wo + ox] = acc;
                    }
    }
    check_finite(out, "conv2d");
    if (rec) {
        tape.record([x, w, b, out, stride, padding, batch, cin, h, wd, cout, kh, kw, ho,
                     wo]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto xv = x.values();
            auto wv = w.values();
            const bool nx = x.requires_grad(), nw = w.requires_grad(), nb_ = b.requires_grad();
            auto gx = nx ? x.grad_mut() : std::span<T>();
            auto gw = nw ? w.grad_mut() : std::span<T>();
            auto gb = nb_ ? b.grad_mut() : std::span<T>();
            for (std::size_t nb = 0; nb < batch; ++nb)
                for (std::size_t oc = 0; oc < cout; ++oc)
                    for (std::size_t oy = 0; oy < ho; ++oy)
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                            const T gv = g[((nb * cout + oc) * ho + oy) * wo + ox];
                            if (gv == T(0)) continue;
                            if (nb_) gb[oc] += gv;
                            for (std::size_t ic = 0; ic < cin; ++ic)
                                for (std::size_t ky = 0; ky < kh; ++ky) {
                                    const std::ptrdiff_t iy =
                                        static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                        static_cast<std::ptrdiff_t>(padding);
                                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                                    for (std::size_t kx = 0; kx < kw; ++kx) {
                                        const std::ptrdiff_t ix =
                                            static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                            static_cast<std::ptrdiff_t>(padding);
                                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd))
                                            continue;
                                        const std::size_t xi =
                                            ((nb * cin + ic) * h + iy) * wd + ix;
                                        const std::size_t wi =
                                            ((oc * cin + ic) * kh + ky) * kw + kx;
                                        if (nx) gx[xi] += gv * wv[wi];
                                        if (nw) gw[wi] += gv * xv[xi];
                                    }
                                }
                        }
        });
    }
    return out;
}

template <typename T>
Tensor<T> max_pool2d(Tape<T>& tape, const Tensor<T>& x, std::size_t kernel) {
    if (x.rank() != 4)
        throw ShapeError("max_pool2d: expected NCHW input, got " + shape_str(x.shape()));
    if (kernel == 0 || x.extent(2) < kernel || x.extent(3) < kernel)
        throw ShapeError("max_pool2d: kernel does not fit input");
    const std::size_t batch = x.extent(0), c = x.extent(1), h = x.extent(2), wd = x.extent(3);
    const std::size_t ho = h / kernel, wo = wd / kernel;
    const bool rec = track(tape, {&x});
    Tensor<T> out = Tensor<T>::zeros({batch, c, ho, wo}, rec);
    std::vector<std::size_t> argmax(out.size());
    {
        auto ov = out.values_mut();
        auto xv = x.values();
        for (std::size_t nb = 0; nb < batch; ++nb)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t oy = 0; oy < ho; ++oy)
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        std::size_t best = ((nb * c + ch) * h + oy * kernel) * wd + ox * kernel;
                        T bv = xv[best];
                        for (std::size_t ky = 0; ky < kernel; ++ky)
                            for (std::size_t kx = 0; kx < kernel; ++kx) {
                                const std::size_t i =
                                    ((nb * c + ch) * h + oy * kernel + ky) * wd + ox * kernel + kx;
                                if (xv[i] > bv) {
                                    bv = xv[i];
                                    best = i;
                                }
                            }
                        const std::size_t oi = ((nb * c + ch) * ho + oy) * wo + ox;
                        ov[oi] = bv;
                        argmax[oi] = best;
                    }
    }
    if (rec) {
        tape.record([x, out, argmax = std::move(argmax)]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto gx = x.grad_mut();
            for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> batchnorm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                    const Tensor<T>& beta, BatchNormBuffers<T>& buffers, BNMode mode,
                    T momentum, T eps, bool update_running) {
    if (x.rank() != 2 && x.rank() != 4)
        throw ShapeError("batchnorm: expected rank-2 or rank-4 input, got " +
                         shape_str(x.shape()));
    const std::size_t channels = x.extent(1);
    if (gamma.rank() != 1 || gamma.extent(0) != channels || beta.rank() != 1 ||
        beta.extent(0) != channels)
        throw ShapeError("batchnorm: scale/shift must be 1-D with one entry per channel");
    if (buffers.running_mean.size() != channels || buffers.running_var.size() != channels)
        throw ShapeError("batchnorm: running buffers must match channel count");

    // Element layout per channel: `outer` rows of `inner` contiguous values.
    const std::size_t outer = x.extent(0);
    const std::size_t inner = x.rank() == 4 ? x.extent(2) * x.extent(3) : 1;
    const std::size_t outer_stride = channels * inner;
    const std::size_t reduce = outer * inner;
    if (mode == BNMode::Batch && reduce < 2)
        throw ShapeError("batchnorm: batch statistics need at least 2 values per channel");

    std::vector<T> mean(channels), inv_std(channels);
    auto xv = x.values();
    if (mode == BNMode::Batch) {
        for (std::size_t ch = 0; ch < channels; ++ch) {
            T m = 0;
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i)
                    m += xv[o * outer_stride + ch * inner + i];
            m /= T(reduce);
            T var = 0;
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i) {
                    const T d = xv[o * outer_stride + ch * inner + i] - m;
                    var += d * d;
                }
            var /= T(reduce);
            mean[ch] = m;
            inv_std[ch] = T(1) / std::sqrt(var + eps);
            if (update_running) {
                const T unbiased = var * T(reduce) / T(reduce - 1);
                auto rm = buffers.running_mean.values_mut();
                auto rv = buffers.running_var.values_mut();
                rm[ch] = (T(1) - momentum) * rm[ch] + momentum * m;
                rv[ch] = (T(1) - momentum) * rv[ch] + momentum * unbiased;
            }
        }
    } else {
        auto rm = buffers.running_mean.values();
        auto rv = buffers.running_var.values();
        for (std::size_t ch = 0; ch < channels; ++ch) {
            mean[ch] = rm[ch];
            inv_std[ch] = T(1) / std::sqrt(rv[ch] + eps);
        }
    }

    const bool rec = track(tape, {&x, &gamma, &beta});
    Tensor<T> out = Tensor<T>::zeros(x.shape(), rec);
    std::vector<T> xhat(x.size());
    {
        auto ov = out.values_mut();
        auto gv = gamma.values();
        auto bv = beta.values();
        for (std::size_t ch = 0; ch < channels; ++ch)
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i) {
                    const std::size_t idx = o * outer_stride + ch * inner + i;
                    xhat[idx] = (xv[idx] - mean[ch]) * inv_std[ch];
                    ov[idx] = gv[ch] * xhat[idx] + bv[ch];
                }
    }
    check_finite(out, "batchnorm");
    if (rec) {
        tape.record([x, gamma, beta, out, mode, xhat = std::move(xhat),
                     inv_std = std::move(inv_std), channels, outer, inner, outer_stride,
                     reduce]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto gv = gamma.values();
            const bool nx = x.requires_grad();
            auto gx = nx ? x.grad_mut() : std::span<T>();
            auto gg = gamma.requires_grad() ? gamma.grad_mut() : std::span<T>();
            auto gb = beta.requires_grad() ? beta.grad_mut() : std::span<T>();
            for (std::size_t ch = 0; ch < channels; ++ch) {
                T sum_g = 0, sum_gx = 0;
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < inner; ++i) {
                        const std::size_t idx = o * outer_stride + ch * inner + i;
                        sum_g += g[idx];
                        sum_gx += g[idx] * xhat[idx];
                    }
                if (!gg.empty()) gg[ch] += sum_gx;
                if (!gb.empty()) gb[ch] += sum_g;
                if (!nx) continue;
                if (mode == BNMode::Batch) {
                    const T k1 = gv[ch] * inv_std[ch] / T(reduce);
                    for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t i = 0; i < inner; ++i) {
                            const std::size_t idx = o * outer_stride + ch * inner + i;
                            gx[idx] += k1 * (T(reduce) * g[idx] - sum_g - xhat[idx] * sum_gx);
                        }
                } else {
                    const T k1 = gv[ch] * inv_std[ch];
                    for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t i = 0; i < inner; ++i) {
                            const std::size_t idx = o * outer_stride + ch * inner + i;
                            gx[idx] += k1 * g[idx];
                        }
                }
            }
        });
    }
    return out;
}

#define EGNN_INSTANTIATE_OPS(T)                                                                   \
    template Tensor<T> add<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                      \
    template Tensor<T> sub<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                      \
    template Tensor<T> mul<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                      \
    template Tensor<T> div<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                      \
    template Tensor<T> scale<T>(Tape<T>&, const Tensor<T>&, T);                                   \
    template Tensor<T> abs<T>(Tape<T>&, const Tensor<T>&);                                        \
    template Tensor<T> clamp<T>(Tape<T>&, const Tensor<T>&, T, T);                                \
    template Tensor<T> leaky_relu<T>(Tape<T>&, const Tensor<T>&, T);                              \
    template Tensor<T> sigmoid<T>(Tape<T>&, const Tensor<T>&);                                    \
    template Tensor<T> softmax<T>(Tape<T>&, const Tensor<T>&, std::size_t);                       \
    template Tensor<T> l1_normalize<T>(Tape<T>&, const Tensor<T>&, std::size_t);                  \
    template Tensor<T> matmul<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                   \
    template Tensor<T> concat<T>(Tape<T>&, const std::vector<Tensor<T>>&, std::size_t);           \
    template Tensor<T> reduce_sum<T>(Tape<T>&, const Tensor<T>&, std::size_t, bool);              \
    template Tensor<T> reduce_sum_all<T>(Tape<T>&, const Tensor<T>&);                             \
    template Tensor<T> reshape<T>(Tape<T>&, const Tensor<T>&, Shape);                             \
    template Tensor<T> gather_flat<T>(Tape<T>&, const Tensor<T>&, std::vector<std::size_t>);      \
    template Tensor<T> pairwise_abs_diff<T>(Tape<T>&, const Tensor<T>&);                          \
    template Tensor<T> bce_loss<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                 \
    template Tensor<T> conv2d<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                 std::size_t, std::size_t);                                       \
    template Tensor<T> max_pool2d<T>(Tape<T>&, const Tensor<T>&, std::size_t);                    \
    template Tensor<T> batchnorm<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&,                 \
                                    const Tensor<T>&, BatchNormBuffers<T>&, BNMode, T, T, bool);

EGNN_INSTANTIATE_OPS(float)
EGNN_INSTANTIATE_OPS(double)

#undef EGNN_INSTANTIATE_OPS

} // namespace ops
} // namespace egnn
