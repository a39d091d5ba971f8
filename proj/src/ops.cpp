// SPDX-License-Identifier: Apache-2.0
#include "mpreid/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <string>

#include "mpreid/errors.hpp"

namespace mpreid::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(std::span<const double> data, std::size_t rows, std::size_t cols) {
    return ConstMap(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MutMap as_matrix(std::span<double> data, std::size_t rows, std::size_t cols) {
    return MutMap(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

Tape& common_tape(const Var& a, const Var& b) {
    if (&a.tape() != &b.tape()) {
        throw ContractError("op inputs recorded on different tapes");
    }
    return a.tape();
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                             shape_str(t.shape()));
    }
}

int normalize_axis(const char* op, const Tensor& t, int axis) {
    if (axis == -1 || (t.rank() >= 1 && axis == static_cast<int>(t.rank()) - 1)) {
        return -1;
    }
    if (axis == 0 && t.rank() == 2) {
        return 0;
    }
    throw DimensionError(std::string(op) + ": unsupported axis " + std::to_string(axis) + " for shape " +
                         shape_str(t.shape()));
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
    auto& tape = common_tape(a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    require_rank("matmul", av, 2);
    require_rank("matmul", bv, 2);
    if (av.dim(1) != bv.dim(0)) {
        shape_mismatch("matmul", av.shape(), bv.shape());
    }
    const auto m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor out(Shape{m, n});
    as_matrix(out.data(), m, n).noalias() = as_matrix(av.data(), m, k) * as_matrix(bv.data(), k, n);
    const auto ia = a.id(), ib = b.id();
    return tape.record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape& t, std::span<const double> g) {
        const auto gm = as_matrix(g, m, n);
        if (t.needs_grad(ia)) {
            as_matrix(t.grad(ia), m, k).noalias() += gm * as_matrix(t.value(ib).data(), k, n).transpose();
        }
        if (t.needs_grad(ib)) {
            as_matrix(t.grad(ib), k, n).noalias() += as_matrix(t.value(ia).data(), m, k).transpose() * gm;
        }
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    auto& tape = common_tape(a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    require_rank("matmul_nt", av, 2);
    require_rank("matmul_nt", bv, 2);
    if (av.dim(1) != bv.dim(1)) {
        shape_mismatch("matmul_nt", av.shape(), bv.shape());
    }
    const auto m = av.dim(0), k = av.dim(1), n = bv.dim(0);
    Tensor out(Shape{m, n});
    as_matrix(out.data(), m, n).noalias() = as_matrix(av.data(), m, k) * as_matrix(bv.data(), n, k).transpose();
    const auto ia = a.id(), ib = b.id();
    return tape.record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape& t, std::span<const double> g) {
        const auto gm = as_matrix(g, m, n);
        if (t.needs_grad(ia)) {
            as_matrix(t.grad(ia), m, k).noalias() += gm * as_matrix(t.value(ib).data(), n, k);
        }
        if (t.needs_grad(ib)) {
            as_matrix(t.grad(ib), n, k).noalias() += gm.transpose() * as_matrix(t.value(ia).data(), m, k);
        }
    });
}

Var transpose(const Var& a) {
    const auto& av = a.value();
    require_rank("transpose", av, 2);
    const auto m = av.dim(0), n = av.dim(1);
    Tensor out(Shape{n, m});
    as_matrix(out.data(), n, m) = as_matrix(av.data(), m, n).transpose();
    const auto ia = a.id();
    return a.tape().record(std::move(out), {a}, [ia, m, n](Tape& t, std::span<const double> g) {
        as_matrix(t.grad(ia), m, n) += as_matrix(g, n, m).transpose();
    });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
    auto& tape = common_tape(x, weight);
    common_tape(x, bias);
    const auto& xv = x.value();
    const auto& wv = weight.value();
    const auto& bv = bias.value();
    require_rank("linear", wv, 2);
    if (xv.rank() < 1 || xv.cols() != wv.dim(0)) {
        shape_mismatch("linear", xv.shape(), wv.shape());
    }
    if (bv.rank() != 1 || bv.dim(0) != wv.dim(1)) {
        shape_mismatch("linear(bias)", wv.shape(), bv.shape());
    }
    const auto n = xv.rows(), in = wv.dim(0), o = wv.dim(1);
    Shape out_shape = xv.shape();
    out_shape.back() = o;
    Tensor out(out_shape);
    auto om = as_matrix(out.data(), n, o);
    om.noalias() = as_matrix(xv.data(), n, in) * as_matrix(wv.data(), in, o);
    om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.data().data(), static_cast<Eigen::Index>(o));
    const auto ix = x.id(), iw = weight.id(), ib = bias.id();
    return tape.record(std::move(out), {x, weight, bias}, [ix, iw, ib, n, in, o](Tape& t, std::span<const double> g) {
        const auto gm = as_matrix(g, n, o);
        if (t.needs_grad(ix)) {
            as_matrix(t.grad(ix), n, in).noalias() += gm * as_matrix(t.value(iw).data(), in, o).transpose();
        }
        if (t.needs_grad(iw)) {
            as_matrix(t.grad(iw), in, o).noalias() += as_matrix(t.value(ix).data(), n, in).transpose() * gm;
        }
        if (t.needs_grad(ib)) {
            auto gb = t.grad(ib);
            Eigen::Map<Eigen::RowVectorXd>(gb.data(), static_cast<Eigen::Index>(o)) += gm.colwise().sum();
        }
    });
}

namespace {

enum class Binary { add, sub, mul };

Var binary(const Var& a, const Var& b, Binary kind, const char* name) {
    auto& tape = common_tape(a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.shape() != bv.shape()) {
        shape_mismatch(name, av.shape(), bv.shape());
    }
    Tensor out(av.shape());
    auto o = out.data();
    const auto x = av.data();
    const auto y = bv.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        switch (kind) {
            case Binary::add: o[i] = x[i] + y[i]; break;
            case Binary::sub: o[i] = x[i] - y[i]; break;
            case Binary::mul: o[i] = x[i] * y[i]; break;
        }
    }
    const auto ia = a.id(), ib = b.id();
    return tape.record(std::move(out), {a, b}, [ia, ib, kind](Tape& t, std::span<const double> g) {
        if (t.needs_grad(ia)) {
            auto ga = t.grad(ia);
            if (kind == Binary::mul) {
                const auto y = t.value(ib).data();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
            } else {
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
        }
        if (t.needs_grad(ib)) {
            auto gb = t.grad(ib);
            if (kind == Binary::mul) {
                const auto x = t.value(ia).data();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
            } else if (kind == Binary::sub) {
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            } else {
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        }
    });
}

}  // namespace

Var add(const Var& a, const Var& b) { return binary(a, b, Binary::add, "add"); }
Var sub(const Var& a, const Var& b) { return binary(a, b, Binary::sub, "sub"); }
Var mul(const Var& a, const Var& b) { return binary(a, b, Binary::mul, "mul"); }

Var scale(const Var& a, double factor) {
    Tensor out = a.value();
    out.set_requires_grad(false);
    for (auto& v : out.data()) v *= factor;
    const auto ia = a.id();
    return a.tape().record(std::move(out), {a}, [ia, factor](Tape& t, std::span<const double> g) {
        auto ga = t.grad(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
}

Var add_scalar(const Var& a, double c) {
    Tensor out = a.value();
    out.set_requires_grad(false);
    for (auto& v : out.data()) v += c;
    const auto ia = a.id();
    return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::span<const double> g) {
        auto ga = t.grad(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

Var add_row(const Var& a, const Var& row) {
    auto& tape = common_tape(a, row);
    const auto& av = a.value();
    const auto& rv = row.value();
    if (rv.rank() != 1 || av.rank() < 1 || av.cols() != rv.dim(0)) {
        shape_mismatch("add_row", av.shape(), rv.shape());
    }
    Tensor out(av.shape());
    const auto n = av.rows(), d = av.cols();
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
            out.at(r, c) = av.at(r, c) + rv[c];
        }
    }
    const auto ia = a.id(), ir = row.id();
    return tape.record(std::move(out), {a, row}, [ia, ir, n, d](Tape& t, std::span<const double> g) {
        if (t.needs_grad(ia)) {
            auto ga = t.grad(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.needs_grad(ir)) {
            auto gr = t.grad(ir);
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t c = 0; c < d; ++c) gr[c] += g[r * d + c];
            }
        }
    });
}

Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    const auto ia = a.id();
    return a.tape().record(Tensor::scalar(s), {a}, [ia](Tape& t, std::span<const double> g) {
        auto ga = t.grad(ia);
        for (auto& v : ga) v += g[0];
    });
}

Var mean(const Var& a) {
    const auto n = static_cast<double>(a.value().size());
    return scale(sum(a), 1.0 / n);
}

Var sum_rows(const Var& a) {
    const auto& av = a.value();
    const auto n = av.rows(), d = av.cols();
    Tensor out(Shape{n});
    for (std::size_t r = 0; r < n; ++r) {
        double s = 0.0;
        for (double v : av.row(r)) s += v;
        out[r] = s;
    }
    const auto ia = a.id();
    return a.tape().record(std::move(out), {a}, [ia, n, d](Tape& t, std::span<const double> g) {
        auto ga = t.grad(ia);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < d; ++c) ga[r * d + c] += g[r];
        }
    });
}

Var concat(std::initializer_list<Var> parts, std::size_t axis) {
    return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

Var concat(std::span<const Var> parts, std::size_t axis) {
    if (parts.empty()) {
        throw DimensionError("concat: no inputs");
    }
    auto& tape = parts.front().tape();
    const auto& first = parts.front().value();
    const auto rank = first.rank();
    if (rank == 0 || rank > 2 || axis >= rank) {
        throw DimensionError("concat: unsupported axis " + std::to_string(axis) + " for shape " +
                             shape_str(first.shape()));
    }
    std::vector<std::size_t> ids;
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        common_tape(parts.front(), p);
        const auto& v = p.value();
        if (v.rank() != rank) {
            shape_mismatch("concat", first.shape(), v.shape());
        }
        if (rank == 2) {
            const std::size_t other = 1 - axis;
            if (v.dim(other) != first.dim(other)) {
                shape_mismatch("concat", first.shape(), v.shape());
            }
        }
        ids.push_back(p.id());
        widths.push_back(v.dim(axis));
        total += v.dim(axis);
    }
    Shape shape = first.shape();
    shape[axis] = total;
    Tensor out(shape);
    // axis 0 (or rank 1): blocks are contiguous. axis 1: interleave per row.
    const bool contiguous = (axis == 0);
    const std::size_t rows = contiguous ? 1 : first.dim(0);
    const std::size_t out_width = contiguous ? out.size() : total;
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto src = parts[p].value().data();
        const std::size_t w = contiguous ? src.size() : widths[p];
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(r * w), w,
                        out.data().begin() + static_cast<std::ptrdiff_t>(r * out_width + offset));
        }
        offset += w;
    }
    std::vector<std::size_t> block_widths;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        block_widths.push_back(contiguous ? parts[p].value().size() : widths[p]);
    }
    return tape.record(std::move(out), parts,
                       [ids, block_widths, rows, out_width](Tape& t, std::span<const double> g) {
                           std::size_t off = 0;
                           for (std::size_t p = 0; p < ids.size(); ++p) {
                               const auto w = block_widths[p];
                               if (t.needs_grad(ids[p])) {
                                   auto gp = t.grad(ids[p]);
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       for (std::size_t c = 0; c < w; ++c) {
                                           gp[r * w + c] += g[r * out_width + off + c];
                                       }
                                   }
                               }
                               off += w;
                           }
                       });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t count) {
    const auto& av = a.value();
    require_rank("slice_rows", av, 2);
    if (count == 0 || begin + count > av.dim(0)) {
        throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                             ") out of range for shape " + shape_str(av.shape()));
    }
    const auto d = av.dim(1);
    Tensor out(Shape{count, d},
               std::vector<double>(av.data().begin() + static_cast<std::ptrdiff_t>(begin * d),
                                   av.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * d)));
    const auto ia = a.id();
    return a.tape().record(std::move(out), {a}, [ia, begin, d](Tape& t, std::span<const double> g) {
        auto ga = t.grad(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[begin * d + i] += g[i];
    });
}

Var gather_rows(const Var& a, std::span<const std::size_t> rows) {
    const auto& av = a.value();
    require_rank("gather_rows", av, 2);
    if (rows.empty()) {
        throw DimensionError("gather_rows: empty index list");
    }
    const auto n = av.dim(0), d = av.dim(1);
    Tensor out(Shape{rows.size(), d});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= n) {
            throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " out of range for shape " +
                                 shape_str(av.shape()));
        }
        std::copy_n(av.row(rows[i]).begin(), d, out.row(i).begin());
    }
    const auto ia = a.id();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return a.tape().record(std::move(out), {a}, [ia, idx = std::move(idx), d](Tape& t, std::span<const double> g) {
        auto ga = t.grad(ia);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            for (std::size_t c = 0; c < d; ++c) ga[idx[i] * d + c] += g[i * d + c];
        }
    });
}

Var gather_elements(const Var& a, std::span<const std::pair<std::size_t, std::size_t>> cells) {
    const auto& av = a.value();
    require_rank("gather_elements", av, 2);
    if (cells.empty()) {
        throw DimensionError("gather_elements: empty index list");
    }
    const auto d = av.dim(1);
    Tensor out(Shape{cells.size()});
    std::vector<std::size_t> flat;
    flat.reserve(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const auto [r, c] = cells[i];
        if (r >= av.dim(0) || c >= d) {
            throw DimensionError("gather_elements: cell out of range for shape " + shape_str(av.shape()));
        }
        flat.push_back(r * d + c);
        out[i] = av[flat.back()];
    }
    const auto ia = a.id();
    return a.tape().record(std::move(out), {a}, [ia, flat = std::move(flat)](Tape& t, std::span<const double> g) {
        auto ga = t.grad(ia);
        for (std::size_t i = 0; i < flat.size(); ++i) ga[flat[i]] += g[i];
    });
}

Var reshape(const Var& a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    out.set_requires_grad(false);
    const auto ia = a.id();
    return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::span<const double> g) {
        auto ga = t.grad(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

namespace {

void softmax_rows(std::span<const double> x, std::span<double> y, std::size_t n, std::size_t d) {
    for (std::size_t r = 0; r < n; ++r) {
        const double* in = x.data() + r * d;
        double* out = y.data() + r * d;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < d; ++c) mx = std::max(mx, in[c]);
        double z = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            out[c] = std::exp(in[c] - mx);
            z += out[c];
        }
        for (std::size_t c = 0; c < d; ++c) out[c] /= z;
    }
}

}  // namespace

Var softmax(const Var& a, int axis) {
    if (normalize_axis("softmax", a.value(), axis) == 0) {
        return transpose(softmax(transpose(a), -1));
    }
    const auto& av = a.value();
    const auto n = av.rows(), d = av.cols();
    Tensor out(av.shape());
    softmax_rows(av.data(), out.data(), n, d);
    const auto ia = a.id();
    auto self = std::make_shared<std::vector<double>>(out.values());
    return a.tape().record(std::move(out), {a}, [ia, n, d, self](Tape& t, std::span<const double> g) {
        auto ga = t.grad(ia);
        const auto& y = *self;
        for (std::size_t r = 0; r < n; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) dot += g[r * d + c] * y[r * d + c];
            for (std::size_t c = 0; c < d; ++c) ga[r * d + c] += y[r * d + c] * (g[r * d + c] - dot);
        }
    });
}

Var log_softmax(const Var& a, int axis) {
    if (normalize_axis("log_softmax", a.value(), axis) == 0) {
        return transpose(log_softmax(transpose(a), -1));
    }
    const auto& av = a.value();
    const auto n = av.rows(), d = av.cols();
    Tensor out(av.shape());
    for (std::size_t r = 0; r < n; ++r) {
        const auto in = av.row(r);
        double mx = -std::numeric_limits<double>::infinity();
        for (double v : in) mx = std::max(mx, v);
        double z = 0.0;
        for (double v : in) z += std::exp(v - mx);
        const double lse = mx + std::log(z);
        for (std::size_t c = 0; c < d; ++c) out.at(r, c) = in[c] - lse;
    }
    const auto ia = a.id();
    const auto saved = std::make_shared<std::vector<double>>(out.values());
    return a.tape().record(std::move(out), {a}, [ia, n, d, saved](Tape& t, std::span<const double> g) {
        auto ga = t.grad(ia);
        const auto& y = *saved;
        for (std::size_t r = 0; r < n; ++r) {
            double gs = 0.0;
            for (std::size_t c = 0; c < d; ++c) gs += g[r * d + c];
            for (std::size_t c = 0; c < d; ++c) ga[r * d + c] += g[r * d + c] - std::exp(y[r * d + c]) * gs;
        }
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    auto& tape = common_tape(x, gamma);
    common_tape(x, beta);
    const auto& xv = x.value();
    const auto& gv = gamma.value();
    const auto& bv = beta.value();
    const auto n = xv.rows(), d = xv.cols();
    if (gv.rank() != 1 || gv.dim(0) != d) {
        shape_mismatch("layer_norm(gamma)", xv.shape(), gv.shape());
    }
    if (bv.rank() != 1 || bv.dim(0) != d) {
        shape_mismatch("layer_norm(beta)", xv.shape(), bv.shape());
    }
    Tensor out(xv.shape());
    auto xhat = std::make_shared<std::vector<double>>(xv.size());
    auto inv_std = std::make_shared<std::vector<double>>(n);
    for (std::size_t r = 0; r < n; ++r) {
        const auto in = xv.row(r);
        double mu = 0.0;
        for (double v : in) mu += v;
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (double v : in) var += (v - mu) * (v - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t c = 0; c < d; ++c) {
            const double h = (in[c] - mu) * is;
            (*xhat)[r * d + c] = h;
            out.at(r, c) = h * gv[c] + bv[c];
        }
    }
    const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
    return tape.record(std::move(out), {x, gamma, beta},
                       [ix, ig, ib, n, d, xhat, inv_std](Tape& t, std::span<const double> g) {
                           const auto& h = *xhat;
                           if (t.needs_grad(ig)) {
                               auto gg = t.grad(ig);
                               for (std::size_t r = 0; r < n; ++r)
                                   for (std::size_t c = 0; c < d; ++c) gg[c] += g[r * d + c] * h[r * d + c];
                           }
                           if (t.needs_grad(ib)) {
                               auto gb = t.grad(ib);
                               for (std::size_t r = 0; r < n; ++r)
                                   for (std::size_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
                           }
                           if (t.needs_grad(ix)) {
                               auto gx = t.grad(ix);
                               const auto gam = t.value(ig).data();
                               const double inv_d = 1.0 / static_cast<double>(d);
                               for (std::size_t r = 0; r < n; ++r) {
                                   double m1 = 0.0, m2 = 0.0;
                                   for (std::size_t c = 0; c < d; ++c) {
                                       const double dh = g[r * d + c] * gam[c];
                                       m1 += dh;
                                       m2 += dh * h[r * d + c];
                                   }
                                   m1 *= inv_d;
                                   m2 *= inv_d;
                                   for (std::size_t c = 0; c < d; ++c) {
                                       const double dh = g[r * d + c] * gam[c];
                                       gx[r * d + c] += (*inv_std)[r] * (dh - m1 - h[r * d + c] * m2);
                                   }
                               }
                           }
                       });
}

Var gelu(const Var& x) {
    const auto& xv = x.value();
    Tensor out(xv.shape());
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * inv_sqrt2));
    }
    const auto ix = x.id();
    return x.tape().record(std::move(out), {x}, [ix](Tape& t, std::span<const double> g) {
        auto gx = t.grad(ix);
        const auto xs = t.value(ix).data();
        const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = xs[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            gx[i] += g[i] * (cdf + v * pdf);
        }
    });
}

Var relu(const Var& x) {
    const auto& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    const auto ix = x.id();
    return x.tape().record(std::move(out), {x}, [ix](Tape& t, std::span<const double> g) {
        auto gx = t.grad(ix);
        const auto xs = t.value(ix).data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (xs[i] > 0.0) gx[i] += g[i];
        }
    });
}

Var l2_normalize(const Var& x, double eps) {
    const auto& xv = x.value();
    const auto n = xv.rows(), d = xv.cols();
    Tensor out(xv.shape());
    auto norms = std::make_shared<std::vector<double>>(n);
    for (std::size_t r = 0; r < n; ++r) {
        double s = 0.0;
        for (double v : xv.row(r)) s += v * v;
        const double nr = std::sqrt(s + eps);
        (*norms)[r] = nr;
        for (std::size_t c = 0; c < d; ++c) out.at(r, c) = xv.at(r, c) / nr;
    }
    const auto ix = x.id();
    auto y = std::make_shared<std::vector<double>>(out.values());
    return x.tape().record(std::move(out), {x}, [ix, n, d, norms, y](Tape& t, std::span<const double> g) {
        auto gx = t.grad(ix);
        for (std::size_t r = 0; r < n; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) dot += g[r * d + c] * (*y)[r * d + c];
            for (std::size_t c = 0; c < d; ++c) {
                gx[r * d + c] += (g[r * d + c] - (*y)[r * d + c] * dot) / (*norms)[r];
            }
        }
    });
}

Var pairwise_distance(const Var& x, double eps) {
    const auto& xv = x.value();
    require_rank("pairwise_distance", xv, 2);
    const auto n = xv.dim(0), d = xv.dim(1);
    Tensor out(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                const double diff = xv.at(i, c) - xv.at(j, c);
                s += diff * diff;
            }
            out.at(i, j) = std::sqrt(s + eps);
        }
    }
    const auto ix = x.id();
    auto dist = std::make_shared<std::vector<double>>(out.values());
    return x.tape().record(std::move(out), {x}, [ix, n, d, dist](Tape& t, std::span<const double> g) {
        auto gx = t.grad(ix);
        const auto xs = t.value(ix).data();
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                const double w = g[i * n + j] / (*dist)[i * n + j];
                if (w == 0.0 || i == j) continue;
                for (std::size_t c = 0; c < d; ++c) {
                    const double diff = xs[i * d + c] - xs[j * d + c];
                    gx[i * d + c] += w * diff;
                    gx[j * d + c] -= w * diff;
                }
            }
        }
    });
}

namespace {

void validate_layout(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionLayout& layout) {
    require_rank("attention(q)", q, 2);
    require_rank("attention(k)", k, 2);
    require_rank("attention(v)", v, 2);
    if (q.dim(1) != k.dim(1)) shape_mismatch("attention(q,k)", q.shape(), k.shape());
    if (k.shape() != v.shape()) shape_mismatch("attention(k,v)", k.shape(), v.shape());
    if (layout.heads == 0 || q.dim(1) % layout.heads != 0) {
        throw DimensionError("attention: width " + std::to_string(q.dim(1)) + " not divisible by " +
                             std::to_string(layout.heads) + " heads");
    }
    if (!layout.key_mask.empty() && layout.key_mask.size() != k.dim(0)) {
        throw DimensionError("attention: key mask has " + std::to_string(layout.key_mask.size()) +
                             " entries for " + std::to_string(k.dim(0)) + " key rows");
    }
    for (const auto& s : layout.segments) {
        if (s.q_len == 0 || s.k_len == 0 || s.q_begin + s.q_len > q.dim(0) || s.k_begin + s.k_len > k.dim(0)) {
            throw DimensionError("attention: segment out of range for q " + shape_str(q.shape()) + " and k " +
                                 shape_str(k.shape()));
        }
    }
}

// Fills p with the [q_len, k_len] probabilities of one segment/head.
void segment_probs(const Tensor& q, const Tensor& k, const AttentionLayout& layout, const AttentionSegment& s,
                   std::size_t h, double* p) {
    const auto width = q.dim(1);
    const auto dh = width / layout.heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    const bool masked = !layout.key_mask.empty();
    for (std::size_t i = 0; i < s.q_len; ++i) {
        const double* qi = q.data().data() + (s.q_begin + i) * width + h * dh;
        double* pi = p + i * s.k_len;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < s.k_len; ++j) {
            if (masked && layout.key_mask[s.k_begin + j] != 0) {
                pi[j] = -std::numeric_limits<double>::infinity();
                continue;
            }
            const double* kj = k.data().data() + (s.k_begin + j) * width + h * dh;
            double dot = 0.0;
            for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
            pi[j] = dot * sc;
            mx = std::max(mx, pi[j]);
        }
        if (!std::isfinite(mx)) {
            throw NumericError("attention: query row has every key masked");
        }
        double z = 0.0;
        for (std::size_t j = 0; j < s.k_len; ++j) {
            pi[j] = std::isfinite(pi[j]) ? std::exp(pi[j] - mx) : 0.0;
            z += pi[j];
        }
        for (std::size_t j = 0; j < s.k_len; ++j) pi[j] /= z;
    }
}

}  // namespace

Tensor attention_probabilities(const Tensor& q, const Tensor& k, const AttentionLayout& layout, std::size_t segment,
                               std::size_t head) {
    validate_layout(q, k, k, layout);
    const auto& s = layout.segments.at(segment);
    if (head >= layout.heads) {
        throw DimensionError("attention_probabilities: head out of range");
    }
    Tensor p(Shape{s.q_len, s.k_len});
    segment_probs(q, k, layout, s, head, p.data().data());
    return p;
}

Var attention(const Var& q, const Var& k, const Var& v, const AttentionLayout& layout) {
    auto& tape = common_tape(q, k);
    common_tape(q, v);
    const auto& qv = q.value();
    const auto& kv = k.value();
    const auto& vv = v.value();
    validate_layout(qv, kv, vv, layout);
    const auto width = qv.dim(1);
    const auto heads = layout.heads;
    const auto dh = width / heads;

    // Probabilities are kept for the backward pass, one block per (segment, head).
    auto probs = std::make_shared<std::vector<double>>();
    std::vector<std::size_t> offsets;
    std::size_t total = 0;
    for (const auto& s : layout.segments) {
        offsets.push_back(total);
        total += heads * s.q_len * s.k_len;
    }
    probs->resize(total);

    Tensor out(Shape{qv.dim(0), width});
    for (std::size_t si = 0; si < layout.segments.size(); ++si) {
        const auto& s = layout.segments[si];
        for (std::size_t h = 0; h < heads; ++h) {
            double* p = probs->data() + offsets[si] + h * s.q_len * s.k_len;
            segment_probs(qv, kv, layout, s, h, p);
            for (std::size_t i = 0; i < s.q_len; ++i) {
                double* oi = out.data().data() + (s.q_begin + i) * width + h * dh;
                for (std::size_t j = 0; j < s.k_len; ++j) {
                    const double pij = p[i * s.k_len + j];
                    if (pij == 0.0) continue;
                    const double* vj = vv.data().data() + (s.k_begin + j) * width + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) oi[c] += pij * vj[c];
                }
            }
        }
    }

    const auto iq = q.id(), ik = k.id(), iv = v.id();
    auto segments = layout.segments;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    return tape.record(
        std::move(out), {q, k, v},
        [iq, ik, iv, segments = std::move(segments), offsets = std::move(offsets), probs, heads, width, dh, sc](
            Tape& t, std::span<const double> g) {
            const auto qs = t.value(iq).data();
            const auto ks = t.value(ik).data();
            const auto vs = t.value(iv).data();
            const bool gq = t.needs_grad(iq), gk = t.needs_grad(ik), gv = t.needs_grad(iv);
            std::span<double> dq, dk, dv;
            if (gq) dq = t.grad(iq);
            if (gk) dk = t.grad(ik);
            if (gv) dv = t.grad(iv);
            std::vector<double> dp;
            for (std::size_t si = 0; si < segments.size(); ++si) {
                const auto& s = segments[si];
                dp.assign(s.k_len, 0.0);
                for (std::size_t h = 0; h < heads; ++h) {
                    const double* p = probs->data() + offsets[si] + h * s.q_len * s.k_len;
                    for (std::size_t i = 0; i < s.q_len; ++i) {
                        const double* gi = g.data() + (s.q_begin + i) * width + h * dh;
                        const double* pi = p + i * s.k_len;
                        double rowdot = 0.0;
                        for (std::size_t j = 0; j < s.k_len; ++j) {
                            const std::size_t kr = (s.k_begin + j) * width + h * dh;
                            double acc = 0.0;
                            for (std::size_t c = 0; c < dh; ++c) acc += gi[c] * vs[kr + c];
                            dp[j] = acc;
                            rowdot += acc * pi[j];
                            if (gv && pi[j] != 0.0) {
                                for (std::size_t c = 0; c < dh; ++c) dv[kr + c] += pi[j] * gi[c];
                            }
                        }
                        const std::size_t qr = (s.q_begin + i) * width + h * dh;
                        for (std::size_t j = 0; j < s.k_len; ++j) {
                            const double ds = pi[j] * (dp[j] - rowdot) * sc;
                            if (ds == 0.0) continue;
                            const std::size_t kr = (s.k_begin + j) * width + h * dh;
                            if (gq) {
                                for (std::size_t c = 0; c < dh; ++c) dq[qr + c] += ds * ks[kr + c];
                            }
                            if (gk) {
                                for (std::size_t c = 0; c < dh; ++c) dk[kr + c] += ds * qs[qr + c];
                            }
                        }
                    }
                }
            }
        });
}

}  // namespace mpreid::ops
