#include "cnerf/autodiff/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <variant>

#include "cnerf/autodiff/tape.hpp"
#include "vmath.hpp"

namespace cnerf::ad {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const MatRM>;
using MapM = Eigen::Map<MatRM>;

using Inputs = std::initializer_list<const Tensor*>;

void check_finite(std::string_view kind, std::span<const double> values, const char* what) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i]))
            throw NumericError(std::string(kind) + ": non-finite " + what + " at flat index " + std::to_string(i));
    }
}

bool recording(Inputs inputs) {
    Tape* tape = Tape::current();
    if (tape == nullptr) return false;
    return std::any_of(inputs.begin(), inputs.end(), [tape](const Tensor* t) { return t->tracked_on(tape); });
}

Tensor result(std::string_view kind, Shape shape, std::vector<double> values, Inputs inputs) {
    if (checked_mode()) {
        for (const Tensor* in : inputs) check_finite(kind, in->data(), "input");
        check_finite(kind, values, "output");
    }
    return Tensor(std::move(shape), std::move(values));
}

Tensor record(std::string_view kind, const Tensor& out, Inputs inputs, BackwardFn fn) {
    std::vector<const Tensor*> ins(inputs);
    return Tape::current()->record(kind, out, ins, std::move(fn));
}

// ---- broadcasting ----------------------------------------------------------

struct SameIdx {
    std::size_t operator()(std::size_t i) const { return i; }
};
struct ScalarIdx {
    std::size_t operator()(std::size_t) const { return 0; }
};
/// Operand equals a suffix of the output shape.
struct RepeatIdx {
    std::size_t period;
    std::size_t operator()(std::size_t i) const { return i % period; }
};
/// Operand equals a prefix of the output shape, padded with trailing ones.
struct StretchIdx {
    std::size_t inner;
    std::size_t operator()(std::size_t i) const { return i / inner; }
};
struct MapIdx {
    std::shared_ptr<const std::vector<std::size_t>> map;
    std::size_t operator()(std::size_t i) const { return (*map)[i]; }
};
using Indexer = std::variant<SameIdx, ScalarIdx, RepeatIdx, StretchIdx, MapIdx>;

Indexer make_indexer(const Shape& out, const Shape& in) {
    const std::size_t n_in = numel(in);
    const std::size_t n_out = numel(out);
    if (in == out) return SameIdx{};
    if (n_in == 1) return ScalarIdx{};

    // Align to output rank with leading ones.
    Shape aligned(out.size() - in.size(), 1);
    aligned.insert(aligned.end(), in.begin(), in.end());

    std::size_t lead = 0;
    while (lead < aligned.size() && aligned[lead] == 1 && out[lead] != 1) ++lead;
    if (std::equal(aligned.begin() + lead, aligned.end(), out.begin() + lead)) return RepeatIdx{n_in};

    std::size_t tail = aligned.size();
    while (tail > 0 && aligned[tail - 1] == 1 && out[tail - 1] != 1) --tail;
    if (std::equal(aligned.begin(), aligned.begin() + tail, out.begin())) return StretchIdx{n_out / n_in};

    const std::size_t rank = out.size();
    std::vector<std::size_t> stride(rank, 0);
    std::size_t s = 1;
    for (std::size_t d = rank; d-- > 0;) {
        stride[d] = aligned[d] == 1 ? 0 : s;
        s *= aligned[d];
    }
    auto map = std::make_shared<std::vector<std::size_t>>(n_out);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t offset = 0;
    for (std::size_t i = 0; i < n_out; ++i) {
        (*map)[i] = offset;
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            offset += stride[d];
            if (idx[d] < out[d]) break;
            offset -= stride[d] * idx[d];
            idx[d] = 0;
        }
    }
    return MapIdx{std::move(map)};
}

/// Calls f(i, j, k) for every output index i with operand indices j and k.
/// Common layouts run as plain nested loops instead of per-element dispatch.
template <class F>
void sweep(const Indexer& ia, const Indexer& ib, std::size_t n, F&& f) {
    const bool a_same = std::holds_alternative<SameIdx>(ia);
    const bool b_same = std::holds_alternative<SameIdx>(ib);
    if (a_same && b_same) {
        for (std::size_t i = 0; i < n; ++i) f(i, i, i);
        return;
    }
    if (a_same || b_same) {
        const Indexer& other = a_same ? ib : ia;
        auto call = [&](std::size_t i, std::size_t o) { a_same ? f(i, i, o) : f(i, o, i); };
        if (const auto* r = std::get_if<RepeatIdx>(&other)) {
            for (std::size_t base = 0; base < n; base += r->period)
                for (std::size_t j = 0; j < r->period; ++j) call(base + j, j);
            return;
        }
        if (const auto* st = std::get_if<StretchIdx>(&other)) {
            for (std::size_t base = 0, blk = 0; base < n; base += st->inner, ++blk)
                for (std::size_t j = 0; j < st->inner; ++j) call(base + j, blk);
            return;
        }
    }
    std::visit(
        [&](auto fa, auto fb) {
            for (std::size_t i = 0; i < n; ++i) f(i, fa(i), fb(i));
        },
        ia, ib);
}

template <class Fwd, class Bwd>
Tensor binary(std::string_view kind, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
    Shape shape = broadcast_shape(a.shape(), b.shape(), std::string(kind).c_str());
    const std::size_t n = numel(shape);
    Indexer ia = make_indexer(shape, a.shape());
    Indexer ib = make_indexer(shape, b.shape());

    std::vector<double> out(n);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    double* od = out.data();
    sweep(ia, ib, n, [&](std::size_t i, std::size_t j, std::size_t k) { od[i] = fwd(ad[j], bd[k]); });

    Tensor y = result(kind, shape, std::move(out), {&a, &b});
    if (!recording({&a, &b})) return y;
    return record(kind, y, {&a, &b}, [as = a.storage(), bs = b.storage(), ia, ib, n, bwd](BackwardContext& ctx) {
        const double* g = ctx.grad_out.data();
        auto ga = ctx.grad(0);
        auto gb = ctx.grad(1);
        double* pa = ga.empty() ? nullptr : ga.data();
        double* pb = gb.empty() ? nullptr : gb.data();
        const double* av = as->data();
        const double* bv = bs->data();
        sweep(ia, ib, n, [&](std::size_t i, std::size_t j, std::size_t k) {
            bwd(g[i], av[j], bv[k], pa ? pa + j : nullptr, pb ? pb + k : nullptr);
        });
    });
}

template <class Fwd, class Deriv>
Tensor unary(std::string_view kind, const Tensor& x, Fwd fwd, Deriv deriv) {
    std::vector<double> out(x.size());
    auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xd[i]);
    Tensor y = result(kind, x.shape(), std::move(out), {&x});
    if (!recording({&x})) return y;
    return record(kind, y, {&x}, [xs = x.storage(), ys = y.storage(), deriv](BackwardContext& ctx) {
        auto gx = ctx.grad(0);
        const auto& xv = *xs;
        const auto& yv = *ys;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += ctx.grad_out[i] * deriv(xv[i], yv[i]);
    });
}

/// Splits a shape around `axis` into (outer, n, inner).
struct AxisSplit {
    std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
    if (axis >= s.size()) throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + to_string(s));
    AxisSplit r;
    for (std::size_t d = 0; d < axis; ++d) r.outer *= s[d];
    r.n = s[axis];
    for (std::size_t d = axis + 1; d < s.size(); ++d) r.inner *= s[d];
    return r;
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
        out[i] = da == 1 ? db : da;
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double g, double, double, double* ga, double* gb) {
            if (ga) *ga += g;
            if (gb) *gb += g;
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double g, double, double, double* ga, double* gb) {
            if (ga) *ga += g;
            if (gb) *gb -= g;
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double g, double x, double y, double* ga, double* gb) {
            if (ga) *ga += g * y;
            if (gb) *gb += g * x;
        });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double g, double x, double y, double* ga, double* gb) {
            if (ga) *ga += g / y;
            if (gb) *gb -= g * x / (y * y);
        });
}

Tensor scale(const Tensor& x, double factor) {
    return unary("scale", x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor shift(const Tensor& x, double offset) {
    return unary("shift", x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor sin(const Tensor& x) {
    std::vector<double> out(x.size());
    vmath::sin(x.data().data(), out.data(), out.size());
    Tensor y = result("sin", x.shape(), std::move(out), {&x});
    if (!recording({&x})) return y;
    return record("sin", y, {&x}, [xs = x.storage()](BackwardContext& ctx) {
        auto gx = ctx.grad(0);
        std::vector<double> d(gx.size());
        vmath::cos(xs->data(), d.data(), d.size());
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += ctx.grad_out[i] * d[i];
    });
}

Tensor cos(const Tensor& x) {
    std::vector<double> out(x.size());
    vmath::cos(x.data().data(), out.data(), out.size());
    Tensor y = result("cos", x.shape(), std::move(out), {&x});
    if (!recording({&x})) return y;
    return record("cos", y, {&x}, [xs = x.storage()](BackwardContext& ctx) {
        auto gx = ctx.grad(0);
        std::vector<double> d(gx.size());
        vmath::sin(xs->data(), d.data(), d.size());
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] -= ctx.grad_out[i] * d[i];
    });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        "sigmoid", x,
        [](double v) {
            if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
    return unary("tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
    return unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    return unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor abs(const Tensor& x) {
    return unary(
        "abs", x, [](double v) { return std::abs(v); },
        [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor sqrt(const Tensor& x) {
    return unary("sqrt", x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& x) {
    return unary("square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor softplus(const Tensor& x) {
    return unary(
        "softplus", x, [](double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
        [](double v, double) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); });
}

Tensor relu(const Tensor& x) {
    return unary("relu", x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& x, double slope) {
    return unary(
        "leaky_relu", x, [slope](double v) { return v > 0 ? v : slope * v; },
        [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

Tensor clamp_min(const Tensor& x, double floor) {
    return unary(
        "clamp_min", x, [floor](double v) { return v > floor ? v : floor; },
        [floor](double v, double) { return v > floor ? 1.0 : 0.0; });
}

Tensor smooth_l1(const Tensor& x, double beta) {
    return unary(
        "smooth_l1", x,
        [beta](double v) {
            const double a = std::abs(v);
            return a < beta ? 0.5 * v * v / beta : a - 0.5 * beta;
        },
        [beta](double v, double) {
            if (std::abs(v) < beta) return v / beta;
            return v > 0 ? 1.0 : -1.0;
        });
}

Tensor sum(const Tensor& x) {
    const auto d = x.data();
    double s = 0.0;
    for (double v : d) s += v;
    Tensor y = result("sum", {}, {s}, {&x});
    if (!recording({&x})) return y;
    return record("sum", y, {&x}, [](BackwardContext& ctx) {
        auto gx = ctx.grad(0);
        const double g = ctx.grad_out[0];
        for (auto& v : gx) v += g;
    });
}

Tensor mean(const Tensor& x) {
    if (x.size() == 0) throw ShapeError("mean: empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor sum_axis(const Tensor& x, std::size_t axis, bool keepdim) {
    const auto sp = split_axis(x.shape(), axis, "sum_axis");
    Shape shape = x.shape();
    if (keepdim)
        shape[axis] = 1;
    else
        shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
    std::vector<double> out(sp.outer * sp.inner, 0.0);
    const auto xd = x.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t j = 0; j < sp.n; ++j) {
            const double* src = &xd[(o * sp.n + j) * sp.inner];
            double* dst = &out[o * sp.inner];
            for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
        }
    Tensor y = result("sum_axis", std::move(shape), std::move(out), {&x});
    if (!recording({&x})) return y;
    return record("sum_axis", y, {&x}, [sp](BackwardContext& ctx) {
        auto gx = ctx.grad(0);
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t j = 0; j < sp.n; ++j) {
                double* dst = &gx[(o * sp.n + j) * sp.inner];
                const double* src = &ctx.grad_out[o * sp.inner];
                for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
            }
    });
}

Tensor mean_axis(const Tensor& x, std::size_t axis, bool keepdim) {
    const double n = static_cast<double>(x.dim(axis));
    return scale(sum_axis(x, axis, keepdim), 1.0 / n);
}

Tensor cumsum_exclusive(const Tensor& x) {
    if (x.rank() == 0) throw ShapeError("cumsum_exclusive: scalar input");
    const std::size_t n = x.shape().back();
    const std::size_t rows = n == 0 ? 0 : x.size() / n;
    std::vector<double> out(x.size());
    const auto xd = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            out[r * n + j] = acc;
            acc += xd[r * n + j];
        }
    }
    Tensor y = result("cumsum_exclusive", x.shape(), std::move(out), {&x});
    if (!recording({&x})) return y;
    return record("cumsum_exclusive", y, {&x}, [n, rows](BackwardContext& ctx) {
        auto gx = ctx.grad(0);
        for (std::size_t r = 0; r < rows; ++r) {
            double acc = 0.0;
            for (std::size_t j = n; j-- > 0;) {
                gx[r * n + j] += acc;
                acc += ctx.grad_out[r * n + j];
            }
        }
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n);
    MapM(out.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), k, n);
    Tensor y = result("matmul", {m, n}, std::move(out), {&a, &b});
    if (!recording({&a, &b})) return y;
    return record("matmul", y, {&a, &b}, [as = a.storage(), bs = b.storage(), m, k, n](BackwardContext& ctx) {
        MapC g(ctx.grad_out.data(), m, n);
        if (ctx.needs(0)) MapM(ctx.grad(0).data(), m, k).noalias() += g * MapC(bs->data(), k, n).transpose();
        if (ctx.needs(1)) MapM(ctx.grad(1).data(), k, n).noalias() += MapC(as->data(), m, k).transpose() * g;
    });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(0))
        throw ShapeError("linear: shape mismatch " + to_string(x.shape()) + " vs " + to_string(weight.shape()));
    if (bias.size() != weight.dim(1))
        throw ShapeError("linear: bias " + to_string(bias.shape()) + " vs weight " + to_string(weight.shape()));
    const auto m = x.dim(0), k = x.dim(1), n = weight.dim(1);
    std::vector<double> out(m * n);
    MapM o(out.data(), m, n);
    o.noalias() = MapC(x.data().data(), m, k) * MapC(weight.data().data(), k, n);
    o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), static_cast<Eigen::Index>(n));
    Tensor y = result("linear", {m, n}, std::move(out), {&x, &weight, &bias});
    if (!recording({&x, &weight, &bias})) return y;
    return record("linear", y, {&x, &weight, &bias},
                  [xs = x.storage(), ws = weight.storage(), m, k, n](BackwardContext& ctx) {
                      MapC g(ctx.grad_out.data(), m, n);
                      if (ctx.needs(0)) MapM(ctx.grad(0).data(), m, k).noalias() += g * MapC(ws->data(), k, n).transpose();
                      if (ctx.needs(1)) MapM(ctx.grad(1).data(), k, n).noalias() += MapC(xs->data(), m, k).transpose() * g;
                      if (ctx.needs(2))
                          Eigen::Map<Eigen::RowVectorXd>(ctx.grad(2).data(), static_cast<Eigen::Index>(n)) += g.colwise().sum();
                  });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size())
        throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
    Tensor y = x.with_shape(std::move(shape));
    if (!recording({&x})) return y;
    return record("reshape", y, {&x}, [](BackwardContext& ctx) {
        auto gx = ctx.grad(0);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += ctx.grad_out[i];
    });
}

Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("transpose: expected a matrix, got " + to_string(x.shape()));
    const auto m = x.dim(0), n = x.dim(1);
    std::vector<double> out(m * n);
    MapM(out.data(), n, m) = MapC(x.data().data(), m, n).transpose();
    Tensor y = result("transpose", {n, m}, std::move(out), {&x});
    if (!recording({&x})) return y;
    return record("transpose", y, {&x}, [m, n](BackwardContext& ctx) {
        MapM(ctx.grad(0).data(), m, n) += MapC(ctx.grad_out.data(), n, m).transpose();
    });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    Shape shape = parts[0].shape();
    if (axis >= shape.size()) throw ShapeError("concat: axis out of range for " + to_string(shape));
    std::size_t total = 0;
    for (const auto& p : parts) {
        Shape s = p.shape();
        if (s.size() != shape.size()) throw ShapeError("concat: rank mismatch " + to_string(shape) + " vs " + to_string(s));
        total += s[axis];
        s[axis] = shape[axis];
        if (s != shape) throw ShapeError("concat: shape mismatch " + to_string(parts[0].shape()) + " vs " + to_string(p.shape()));
    }
    const auto sp = split_axis(shape, axis, "concat");
    shape[axis] = total;
    std::vector<double> out(numel(shape));
    std::vector<std::size_t> widths;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(axis) * sp.inner;
        widths.push_back(w);
        const auto pd = p.data();
        for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy_n(&pd[o * w], w, &out[o * total * sp.inner + offset]);
        offset += w;
    }
    Tensor y = result("concat", std::move(shape), std::move(out), {});

    Tape* tape = Tape::current();
    if (tape == nullptr) return y;
    std::vector<const Tensor*> ins;
    bool any = false;
    for (const auto& p : parts) {
        ins.push_back(&p);
        any = any || p.tracked_on(tape);
    }
    if (!any) return y;
    const std::size_t row = total * sp.inner;
    return tape->record("concat", y, ins, [widths, row, outer = sp.outer](BackwardContext& ctx) {
        std::size_t off = 0;
        for (std::size_t j = 0; j < widths.size(); ++j) {
            if (ctx.needs(j)) {
                auto gj = ctx.grad(j);
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < widths[j]; ++i) gj[o * widths[j] + i] += ctx.grad_out[o * row + off + i];
            }
            off += widths[j];
        }
    });
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
    return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
    const auto sp = split_axis(x.shape(), axis, "slice");
    if (begin > end || end > sp.n)
        throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") out of bounds for " +
                         to_string(x.shape()));
    Shape shape = x.shape();
    shape[axis] = end - begin;
    const std::size_t w = (end - begin) * sp.inner;
    const std::size_t row = sp.n * sp.inner;
    const std::size_t off = begin * sp.inner;
    std::vector<double> out(sp.outer * w);
    const auto xd = x.data();
    for (std::size_t o = 0; o < sp.outer; ++o) std::copy_n(&xd[o * row + off], w, &out[o * w]);
    Tensor y = result("slice", std::move(shape), std::move(out), {&x});
    if (!recording({&x})) return y;
    return record("slice", y, {&x}, [w, row, off, outer = sp.outer](BackwardContext& ctx) {
        auto gx = ctx.grad(0);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < w; ++i) gx[o * row + off + i] += ctx.grad_out[o * w + i];
    });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
    if (x.rank() == 0) throw ShapeError("gather_rows: scalar input");
    const std::size_t n = x.dim(0);
    const std::size_t w = n == 0 ? 0 : x.size() / n;
    Shape shape = x.shape();
    shape[0] = rows.size();
    std::vector<double> out(rows.size() * w);
    const auto xd = x.data();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= n) throw ShapeError("gather_rows: row " + std::to_string(rows[r]) + " out of range " + to_string(x.shape()));
        std::copy_n(&xd[rows[r] * w], w, &out[r * w]);
    }
    Tensor y = result("gather_rows", std::move(shape), std::move(out), {&x});
    if (!recording({&x})) return y;
    return record("gather_rows", y, {&x}, [idx = std::vector<std::size_t>(rows.begin(), rows.end()), w](BackwardContext& ctx) {
        auto gx = ctx.grad(0);
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t i = 0; i < w; ++i) gx[idx[r] * w + i] += ctx.grad_out[r * w + i];
    });
}

namespace {

struct ConvGeom {
    std::size_t n, c, h, w, o, kh, kw, stride, pad, oh, ow;
    std::size_t col_rows() const { return c * kh * kw; }
    std::size_t col_cols() const { return oh * ow; }
};

void im2col(const ConvGeom& g, const double* img, double* col) {
    for (std::size_t ci = 0; ci < g.c; ++ci)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                double* dst = col + ((ci * g.kh + ky) * g.kw + kx) * g.col_cols();
                for (std::size_t y = 0; y < g.oh; ++y) {
                    const auto iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                    for (std::size_t x = 0; x < g.ow; ++x) {
                        const auto ix = static_cast<std::ptrdiff_t>(x * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                            ix < static_cast<std::ptrdiff_t>(g.w);
                        dst[y * g.ow + x] = inside ? img[(ci * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] : 0.0;
                    }
                }
            }
}

void col2im(const ConvGeom& g, const double* col, double* img) {
    for (std::size_t ci = 0; ci < g.c; ++ci)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const double* src = col + ((ci * g.kh + ky) * g.kw + kx) * g.col_cols();
                for (std::size_t y = 0; y < g.oh; ++y) {
                    const auto iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    for (std::size_t x = 0; x < g.ow; ++x) {
                        const auto ix = static_cast<std::ptrdiff_t>(x * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                        img[(ci * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += src[y * g.ow + x];
                    }
                }
            }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opts) {
    if (x.rank() != 4 || weight.rank() != 4 || x.dim(1) != weight.dim(1))
        throw ShapeError("conv2d: shape mismatch " + to_string(x.shape()) + " vs " + to_string(weight.shape()));
    if (bias.size() != weight.dim(0))
        throw ShapeError("conv2d: bias " + to_string(bias.shape()) + " vs weight " + to_string(weight.shape()));
    if (opts.stride == 0) throw ShapeError("conv2d: stride must be positive");
    ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), weight.dim(3), opts.stride, opts.padding, 0, 0};
    if (g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw)
        throw ShapeError("conv2d: kernel " + to_string(weight.shape()) + " larger than padded input " + to_string(x.shape()));
    g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
    g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;

    const std::size_t rows = g.col_rows(), cols = g.col_cols();
    std::vector<double> out(g.n * g.o * cols);
    std::vector<double> col(rows * cols);
    MapC wmat(weight.data().data(), g.o, rows);
    const auto bd = bias.data();
    for (std::size_t b = 0; b < g.n; ++b) {
        im2col(g, &x.data()[b * g.c * g.h * g.w], col.data());
        MapM o(&out[b * g.o * cols], g.o, cols);
        o.noalias() = wmat * MapC(col.data(), rows, cols);
        for (std::size_t oc = 0; oc < g.o; ++oc) o.row(oc).array() += bd[oc];
    }
    Tensor y = result("conv2d", {g.n, g.o, g.oh, g.ow}, std::move(out), {&x, &weight, &bias});
    if (!recording({&x, &weight, &bias})) return y;
    return record("conv2d", y, {&x, &weight, &bias}, [xs = x.storage(), ws = weight.storage(), g](BackwardContext& ctx) {
        const std::size_t rows = g.col_rows(), cols = g.col_cols();
        std::vector<double> col(rows * cols);
        MapC wmat(ws->data(), g.o, rows);
        for (std::size_t b = 0; b < g.n; ++b) {
            MapC gout(&ctx.grad_out[b * g.o * cols], g.o, cols);
            if (ctx.needs(1)) {
                im2col(g, &(*xs)[b * g.c * g.h * g.w], col.data());
                MapM(ctx.grad(1).data(), g.o, rows).noalias() += gout * MapC(col.data(), rows, cols).transpose();
            }
            if (ctx.needs(2)) {
                auto gb = ctx.grad(2);
                for (std::size_t oc = 0; oc < g.o; ++oc) gb[oc] += gout.row(oc).sum();
            }
            if (ctx.needs(0)) {
                MapM(col.data(), rows, cols).noalias() = wmat.transpose() * gout;
                col2im(g, col.data(), &ctx.grad(0)[b * g.c * g.h * g.w]);
            }
        }
    });
}

Tensor avgpool2d(const Tensor& x, std::size_t window) {
    if (x.rank() != 4 || window == 0 || x.dim(2) % window != 0 || x.dim(3) % window != 0)
        throw ShapeError("avgpool2d: input " + to_string(x.shape()) + " not divisible by window " + std::to_string(window));
    const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t oh = h / window, ow = w / window;
    const double inv = 1.0 / static_cast<double>(window * window);
    std::vector<double> out(planes * oh * ow, 0.0);
    const auto xd = x.data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx)
                out[(p * oh + y / window) * ow + xx / window] += inv * xd[(p * h + y) * w + xx];
    Tensor y = result("avgpool2d", {x.dim(0), x.dim(1), oh, ow}, std::move(out), {&x});
    if (!recording({&x})) return y;
    return record("avgpool2d", y, {&x}, [planes, h, w, oh, ow, window, inv](BackwardContext& ctx) {
        auto gx = ctx.grad(0);
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t yy = 0; yy < h; ++yy)
                for (std::size_t xx = 0; xx < w; ++xx)
                    gx[(p * h + yy) * w + xx] += inv * ctx.grad_out[(p * oh + yy / window) * ow + xx / window];
    });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size())
        throw ShapeError("softmax_cross_entropy: logits " + to_string(logits.shape()) + " vs " + std::to_string(labels.size()) +
                         " labels");
    const std::size_t b = logits.dim(0), k = logits.dim(1);
    for (int l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= k)
            throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(l) + " outside [0," + std::to_string(k) + ")");
    const auto ld = logits.data();
    std::vector<double> probs(b * k);
    double loss = 0.0;
    for (std::size_t r = 0; r < b; ++r) {
        const double* row = &ld[r * k];
        const double mx = *std::max_element(row, row + k);
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        for (std::size_t j = 0; j < k; ++j) probs[r * k + j] = std::exp(row[j] - mx) / z;
        loss += std::log(z) + mx - row[labels[r]];
    }
    loss /= static_cast<double>(b);
    Tensor y = result("softmax_cross_entropy", {}, {loss}, {&logits});
    if (!recording({&logits})) return y;
    return record("softmax_cross_entropy", y, {&logits},
                  [probs = std::move(probs), lab = std::vector<int>(labels.begin(), labels.end()), b, k](BackwardContext& ctx) {
                      auto gl = ctx.grad(0);
                      const double g = ctx.grad_out[0] / static_cast<double>(b);
                      for (std::size_t r = 0; r < b; ++r)
                          for (std::size_t j = 0; j < k; ++j)
                              gl[r * k + j] += g * (probs[r * k + j] - (static_cast<int>(j) == lab[r] ? 1.0 : 0.0));
                  });
}

}  // namespace cnerf::ad
