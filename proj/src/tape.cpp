#include "sbg/tape.hpp"

#include <algorithm>
#include <cmath>

#include "sbg/errors.hpp"

namespace sbg {

namespace {

enum class Broadcast { Same, Row, Col };

Broadcast broadcast_kind(const Mat& a, const Mat& b, const char* op) {
    if (a.same_shape(b)) return Broadcast::Same;
    if (b.rows == 1 && b.cols == a.cols) return Broadcast::Row;
    if (b.cols == 1 && b.rows == a.rows) return Broadcast::Col;
    throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape_str() + " and " +
                     b.shape_str());
}

double bread(const Mat& b, Broadcast k, int r, int c) {
    switch (k) {
        case Broadcast::Same: return b.at(r, c);
        case Broadcast::Row: return b.at(0, c);
        case Broadcast::Col: return b.at(r, 0);
    }
    return 0.0;
}

void baccum(Mat& gb, Broadcast k, int r, int c, double g) {
    switch (k) {
        case Broadcast::Same: gb.at(r, c) += g; break;
        case Broadcast::Row: gb.at(0, c) += g; break;
        case Broadcast::Col: gb.at(r, 0) += g; break;
    }
}

void check_finite_input(const Mat& m, const char* op) {
    if (!m.all_finite()) throw NumericError(std::string(op) + ": non-finite input");
}

double gelu_scalar(double x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    double u = c * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad_scalar(double x) {
    constexpr double c = 0.7978845608028654;
    double u = c * (x + 0.044715 * x * x * x);
    double t = std::tanh(u);
    double du = c * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

}  // namespace

// ---- Tape ------------------------------------------------------------------

Var Tape::constant(Mat v) { return Var(this, add_node(std::move(v), false)); }

Var Tape::input(Mat v) { return Var(this, add_node(std::move(v), true)); }

Var Tape::param(Param& p) {
    if (!p.trainable) return constant(p.value);
    int id = add_node(p.value, true);
    param_links_.emplace_back(id, &p);
    return Var(this, id);
}

int Tape::add_node(Mat value, bool needs_grad) {
    if (debug_checks && !value.all_finite())
        throw NumericError("tape: op produced non-finite values at node " +
                           std::to_string(nodes_.size()));
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

void Tape::set_backward(int id, std::function<void(Tape&)> fn) {
    nodes_[id].backward = std::move(fn);
}

Mat& Tape::grad_buf(int id) {
    Node& n = nodes_[id];
    if (n.grad.rows != n.value.rows || n.grad.cols != n.value.cols)
        n.grad = Mat::zeros(n.value.rows, n.value.cols);
    return n.grad;
}

void Tape::backward(Var root) {
    if (root.tape() != this) throw Error("backward: var belongs to another tape");
    const Mat& rv = value(root.id());
    if (rv.rows != 1 || rv.cols != 1)
        throw ShapeError("backward: root must be a scalar, got " + rv.shape_str());
    if (ran_backward_) throw Error("backward: tape already differentiated");
    ran_backward_ = true;

    grad_buf(root.id()).at(0, 0) = 1.0;
    for (int i = root.id(); i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.needs_grad && n.backward && !n.grad.empty()) n.backward(*this);
    }
    for (auto& [id, p] : param_links_) {
        Node& n = nodes_[id];
        if (n.grad.empty()) continue;
        if (p->grad.rows != p->value.rows || p->grad.cols != p->value.cols)
            p->grad = Mat::zeros(p->value.rows, p->value.cols);
        for (size_t k = 0; k < n.grad.data.size(); ++k) p->grad.data[k] += n.grad.data[k];
    }
}

// ---- helpers ----------------------------------------------------------------

namespace {

// Creates the output node and, if gradients are required, installs the
// backward closure produced by make_bwd(self_id).
template <typename MakeBwd>
Var finish(Tape& t, Mat out, bool ng, MakeBwd make_bwd) {
    int id = t.add_node(std::move(out), ng);
    if (ng) t.set_backward(id, make_bwd(id));
    return Var(&t, id);
}

}  // namespace

// ---- binary ops --------------------------------------------------------------

Var add(Var a, Var b) {
    Tape& t = *a.tape();
    const Mat &av = a.val(), &bv = b.val();
    Broadcast k = broadcast_kind(av, bv, "add");
    Mat out(av.rows, av.cols);
    for (int r = 0; r < av.rows; ++r)
        for (int c = 0; c < av.cols; ++c) out.at(r, c) = av.at(r, c) + bread(bv, k, r, c);
    bool ng = t.needs_grad(a.id()) || t.needs_grad(b.id());
    int aid = a.id(), bid = b.id();
    return finish(t, std::move(out), ng, [aid, bid, k](int id) {
        return [id, aid, bid, k](Tape& tp) {
            const Mat& g = tp.grad(id);
            if (tp.needs_grad(aid)) {
                Mat& ga = tp.grad_buf(aid);
                for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
            }
            if (tp.needs_grad(bid)) {
                Mat& gb = tp.grad_buf(bid);
                for (int r = 0; r < g.rows; ++r)
                    for (int c = 0; c < g.cols; ++c) baccum(gb, k, r, c, g.at(r, c));
            }
        };
    });
}

Var sub(Var a, Var b) {
    Tape& t = *a.tape();
    const Mat &av = a.val(), &bv = b.val();
    Broadcast k = broadcast_kind(av, bv, "sub");
    Mat out(av.rows, av.cols);
    for (int r = 0; r < av.rows; ++r)
        for (int c = 0; c < av.cols; ++c) out.at(r, c) = av.at(r, c) - bread(bv, k, r, c);
    bool ng = t.needs_grad(a.id()) || t.needs_grad(b.id());
    int aid = a.id(), bid = b.id();
    return finish(t, std::move(out), ng, [aid, bid, k](int id) {
        return [id, aid, bid, k](Tape& tp) {
            const Mat& g = tp.grad(id);
            if (tp.needs_grad(aid)) {
                Mat& ga = tp.grad_buf(aid);
                for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
            }
            if (tp.needs_grad(bid)) {
                Mat& gb = tp.grad_buf(bid);
                for (int r = 0; r < g.rows; ++r)
                    for (int c = 0; c < g.cols; ++c) baccum(gb, k, r, c, -g.at(r, c));
            }
        };
    });
}

Var mul(Var a, Var b) {
    Tape& t = *a.tape();
    const Mat &av = a.val(), &bv = b.val();
    Broadcast k = broadcast_kind(av, bv, "mul");
    Mat out(av.rows, av.cols);
    for (int r = 0; r < av.rows; ++r)
        for (int c = 0; c < av.cols; ++c) out.at(r, c) = av.at(r, c) * bread(bv, k, r, c);
    bool ng = t.needs_grad(a.id()) || t.needs_grad(b.id());
    int aid = a.id(), bid = b.id();
    return finish(t, std::move(out), ng, [aid, bid, k](int id) {
        return [id, aid, bid, k](Tape& tp) {
            const Mat& g = tp.grad(id);
            const Mat& av2 = tp.value(aid);
            const Mat& bv2 = tp.value(bid);
            if (tp.needs_grad(aid)) {
                Mat& ga = tp.grad_buf(aid);
                for (int r = 0; r < g.rows; ++r)
                    for (int c = 0; c < g.cols; ++c)
                        ga.at(r, c) += g.at(r, c) * bread(bv2, k, r, c);
            }
            if (tp.needs_grad(bid)) {
                Mat& gb = tp.grad_buf(bid);
                for (int r = 0; r < g.rows; ++r)
                    for (int c = 0; c < g.cols; ++c)
                        baccum(gb, k, r, c, g.at(r, c) * av2.at(r, c));
            }
        };
    });
}

Var divide(Var a, Var b) {
    Tape& t = *a.tape();
    const Mat &av = a.val(), &bv = b.val();
    Broadcast k = broadcast_kind(av, bv, "divide");
    Mat out(av.rows, av.cols);
    for (int r = 0; r < av.rows; ++r)
        for (int c = 0; c < av.cols; ++c) out.at(r, c) = av.at(r, c) / bread(bv, k, r, c);
    bool ng = t.needs_grad(a.id()) || t.needs_grad(b.id());
    int aid = a.id(), bid = b.id();
    return finish(t, std::move(out), ng, [aid, bid, k](int id) {
        return [id, aid, bid, k](Tape& tp) {
            const Mat& g = tp.grad(id);
            const Mat& av2 = tp.value(aid);
            const Mat& bv2 = tp.value(bid);
            if (tp.needs_grad(aid)) {
                Mat& ga = tp.grad_buf(aid);
                for (int r = 0; r < g.rows; ++r)
                    for (int c = 0; c < g.cols; ++c)
                        ga.at(r, c) += g.at(r, c) / bread(bv2, k, r, c);
            }
            if (tp.needs_grad(bid)) {
                Mat& gb = tp.grad_buf(bid);
                for (int r = 0; r < g.rows; ++r)
                    for (int c = 0; c < g.cols; ++c) {
                        double bb = bread(bv2, k, r, c);
                        baccum(gb, k, r, c, -g.at(r, c) * av2.at(r, c) / (bb * bb));
                    }
            }
        };
    });
}

Var matmul(Var a, Var b) {
    Tape& t = *a.tape();
    const Mat &av = a.val(), &bv = b.val();
    if (av.cols != bv.rows)
        throw ShapeError("matmul: inner dims differ, " + av.shape_str() + " * " + bv.shape_str());
    Mat out(av.rows, bv.cols);
    for (int r = 0; r < av.rows; ++r)
        for (int c = 0; c < bv.cols; ++c) {
            double acc = 0.0;
            for (int k = 0; k < av.cols; ++k) acc += av.at(r, k) * bv.at(k, c);
            out.at(r, c) = acc;
        }
    bool ng = t.needs_grad(a.id()) || t.needs_grad(b.id());
    int aid = a.id(), bid = b.id();
    return finish(t, std::move(out), ng, [aid, bid](int id) {
        return [id, aid, bid](Tape& tp) {
            const Mat& g = tp.grad(id);
            const Mat& av2 = tp.value(aid);
            const Mat& bv2 = tp.value(bid);
            if (tp.needs_grad(aid)) {
                Mat& ga = tp.grad_buf(aid);  // g * b^T
                for (int r = 0; r < ga.rows; ++r)
                    for (int c = 0; c < ga.cols; ++c) {
                        double acc = 0.0;
                        for (int k = 0; k < g.cols; ++k) acc += g.at(r, k) * bv2.at(c, k);
                        ga.at(r, c) += acc;
                    }
            }
            if (tp.needs_grad(bid)) {
                Mat& gb = tp.grad_buf(bid);  // a^T * g
                for (int r = 0; r < gb.rows; ++r)
                    for (int c = 0; c < gb.cols; ++c) {
                        double acc = 0.0;
                        for (int k = 0; k < av2.rows; ++k) acc += av2.at(k, r) * g.at(k, c);
                        gb.at(r, c) += acc;
                    }
            }
        };
    });
}

// ---- unary ops ---------------------------------------------------------------

namespace {

template <typename F, typename DF>
Var unary_op(Var a, F f, DF df, const char* name, bool finite_check = false) {
    Tape& t = *a.tape();
    const Mat& av = a.val();
    if (finite_check) check_finite_input(av, name);
    Mat out(av.rows, av.cols);
    for (size_t i = 0; i < av.data.size(); ++i) out.data[i] = f(av.data[i]);
    bool ng = t.needs_grad(a.id());
    int aid = a.id();
    return finish(t, std::move(out), ng, [aid, df](int id) {
        return [id, aid, df](Tape& tp) {
            const Mat& g = tp.grad(id);
            const Mat& x = tp.value(aid);
            Mat& ga = tp.grad_buf(aid);
            for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * df(x.data[i]);
        };
    });
}

}  // namespace

Var neg(Var a) {
    return unary_op(a, [](double x) { return -x; }, [](double) { return -1.0; }, "neg");
}

Var scale(Var a, double s) {
    return unary_op(a, [s](double x) { return s * x; }, [s](double) { return s; }, "scale");
}

Var add_scalar(Var a, double s) {
    return unary_op(a, [s](double x) { return x + s; }, [](double) { return 1.0; }, "add_scalar");
}

Var relu(Var a) {
    // subgradient at 0 is 0
    return unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                    [](double x) { return x > 0.0 ? 1.0 : 0.0; }, "relu");
}

Var gelu(Var a) { return unary_op(a, gelu_scalar, gelu_grad_scalar, "gelu"); }

Var sigmoid(Var a) {
    auto f = [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); };
    return unary_op(a, f, [f](double x) { double s = f(x); return s * (1.0 - s); }, "sigmoid");
}

Var softplus(Var a) {
    auto f = [](double x) { return x > 30.0 ? x : std::log1p(std::exp(std::min(x, 30.0))); };
    auto df = [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); };
    return unary_op(a, f, df, "softplus");
}

Var log_op(Var a) {
    return unary_op(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; },
                    "log", /*finite_check=*/true);
}

Var exp_op(Var a) {
    return unary_op(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); },
                    "exp", /*finite_check=*/true);
}

Var pow_scalar(Var a, double p) {
    if (p == 0.0)
        return unary_op(a, [](double) { return 1.0; }, [](double) { return 0.0; }, "pow");
    return unary_op(a, [p](double x) { return std::pow(x, p); },
                    [p](double x) { return p * std::pow(x, p - 1.0); }, "pow");
}

// ---- softmax ------------------------------------------------------------------

Var softmax_rows(Var a) {
    Tape& t = *a.tape();
    const Mat& av = a.val();
    check_finite_input(av, "softmax");
    Mat out(av.rows, av.cols);
    for (int r = 0; r < av.rows; ++r) {
        double mx = av.at(r, 0);
        for (int c = 1; c < av.cols; ++c) mx = std::max(mx, av.at(r, c));
        double sum = 0.0;
        for (int c = 0; c < av.cols; ++c) {
            double e = std::exp(av.at(r, c) - mx);
            out.at(r, c) = e;
            sum += e;
        }
        for (int c = 0; c < av.cols; ++c) out.at(r, c) /= sum;
    }
    bool ng = t.needs_grad(a.id());
    int aid = a.id();
    return finish(t, std::move(out), ng, [aid](int id) {
        return [id, aid](Tape& tp) {
            const Mat& g = tp.grad(id);
            const Mat& y = tp.value(id);
            Mat& ga = tp.grad_buf(aid);
            for (int r = 0; r < g.rows; ++r) {
                double dot = 0.0;
                for (int c = 0; c < g.cols; ++c) dot += g.at(r, c) * y.at(r, c);
                for (int c = 0; c < g.cols; ++c)
                    ga.at(r, c) += y.at(r, c) * (g.at(r, c) - dot);
            }
        };
    });
}

Var log_softmax_rows(Var a) {
    Tape& t = *a.tape();
    const Mat& av = a.val();
    check_finite_input(av, "log_softmax");
    Mat out(av.rows, av.cols);
    for (int r = 0; r < av.rows; ++r) {
        double mx = av.at(r, 0);
        for (int c = 1; c < av.cols; ++c) mx = std::max(mx, av.at(r, c));
        double sum = 0.0;
        for (int c = 0; c < av.cols; ++c) sum += std::exp(av.at(r, c) - mx);
        double lse = mx + std::log(sum);
        for (int c = 0; c < av.cols; ++c) out.at(r, c) = av.at(r, c) - lse;
    }
    bool ng = t.needs_grad(a.id());
    int aid = a.id();
    return finish(t, std::move(out), ng, [aid](int id) {
        return [id, aid](Tape& tp) {
            const Mat& g = tp.grad(id);
            const Mat& lp = tp.value(id);
            Mat& ga = tp.grad_buf(aid);
            for (int r = 0; r < g.rows; ++r) {
                double gsum = 0.0;
                for (int c = 0; c < g.cols; ++c) gsum += g.at(r, c);
                for (int c = 0; c < g.cols; ++c)
                    ga.at(r, c) += g.at(r, c) - std::exp(lp.at(r, c)) * gsum;
            }
        };
    });
}

// ---- structure ops --------------------------------------------------------------

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no parts");
    Tape& t = *parts[0].tape();
    int cols = parts[0].cols();
    int rows = 0;
    bool ng = false;
    for (const Var& p : parts) {
        if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
        rows += p.rows();
        ng = ng || t.needs_grad(p.id());
    }
    Mat out(rows, cols);
    int r0 = 0;
    std::vector<int> ids;
    std::vector<int> offsets;
    for (const Var& p : parts) {
        const Mat& pv = p.val();
        std::copy(pv.data.begin(), pv.data.end(), out.data.begin() + static_cast<size_t>(r0) * cols);
        ids.push_back(p.id());
        offsets.push_back(r0);
        r0 += pv.rows;
    }
    return finish(t, std::move(out), ng, [ids, offsets, cols](int id) {
        return [id, ids, offsets, cols](Tape& tp) {
            const Mat& g = tp.grad(id);
            for (size_t p = 0; p < ids.size(); ++p) {
                if (!tp.needs_grad(ids[p])) continue;
                Mat& gp = tp.grad_buf(ids[p]);
                size_t base = static_cast<size_t>(offsets[p]) * cols;
                for (size_t i = 0; i < gp.data.size(); ++i) gp.data[i] += g.data[base + i];
            }
        };
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    Tape& t = *parts[0].tape();
    int rows = parts[0].rows();
    int cols = 0;
    bool ng = false;
    for (const Var& p : parts) {
        if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
        cols += p.cols();
        ng = ng || t.needs_grad(p.id());
    }
    Mat out(rows, cols);
    std::vector<int> ids, offsets, widths;
    int c0 = 0;
    for (const Var& p : parts) {
        const Mat& pv = p.val();
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < pv.cols; ++c) out.at(r, c0 + c) = pv.at(r, c);
        ids.push_back(p.id());
        offsets.push_back(c0);
        widths.push_back(pv.cols);
        c0 += pv.cols;
    }
    return finish(t, std::move(out), ng, [ids, offsets, widths](int id) {
        return [id, ids, offsets, widths](Tape& tp) {
            const Mat& g = tp.grad(id);
            for (size_t p = 0; p < ids.size(); ++p) {
                if (!tp.needs_grad(ids[p])) continue;
                Mat& gp = tp.grad_buf(ids[p]);
                for (int r = 0; r < g.rows; ++r)
                    for (int c = 0; c < widths[p]; ++c)
                        gp.at(r, c) += g.at(r, offsets[p] + c);
            }
        };
    });
}

Var slice_rows(Var a, int r0, int r1) {
    Tape& t = *a.tape();
    const Mat& av = a.val();
    if (r0 < 0 || r1 > av.rows || r0 >= r1) throw ShapeError("slice_rows: bad range");
    Mat out(r1 - r0, av.cols);
    std::copy(av.data.begin() + static_cast<size_t>(r0) * av.cols,
              av.data.begin() + static_cast<size_t>(r1) * av.cols, out.data.begin());
    bool ng = t.needs_grad(a.id());
    int aid = a.id();
    int cols = av.cols;
    return finish(t, std::move(out), ng, [aid, r0, cols](int id) {
        return [id, aid, r0, cols](Tape& tp) {
            const Mat& g = tp.grad(id);
            Mat& ga = tp.grad_buf(aid);
            size_t base = static_cast<size_t>(r0) * cols;
            for (size_t i = 0; i < g.data.size(); ++i) ga.data[base + i] += g.data[i];
        };
    });
}

Var slice_cols(Var a, int c0, int c1) {
    Tape& t = *a.tape();
    const Mat& av = a.val();
    if (c0 < 0 || c1 > av.cols || c0 >= c1) throw ShapeError("slice_cols: bad range");
    Mat out(av.rows, c1 - c0);
    for (int r = 0; r < av.rows; ++r)
        for (int c = c0; c < c1; ++c) out.at(r, c - c0) = av.at(r, c);
    bool ng = t.needs_grad(a.id());
    int aid = a.id();
    return finish(t, std::move(out), ng, [aid, c0](int id) {
        return [id, aid, c0](Tape& tp) {
            const Mat& g = tp.grad(id);
            Mat& ga = tp.grad_buf(aid);
            for (int r = 0; r < g.rows; ++r)
                for (int c = 0; c < g.cols; ++c) ga.at(r, c0 + c) += g.at(r, c);
        };
    });
}

Var transpose(Var a) {
    Tape& t = *a.tape();
    const Mat& av = a.val();
    Mat out(av.cols, av.rows);
    for (int r = 0; r < av.rows; ++r)
        for (int c = 0; c < av.cols; ++c) out.at(c, r) = av.at(r, c);
    bool ng = t.needs_grad(a.id());
    int aid = a.id();
    return finish(t, std::move(out), ng, [aid](int id) {
        return [id, aid](Tape& tp) {
            const Mat& g = tp.grad(id);
            Mat& ga = tp.grad_buf(aid);
            for (int r = 0; r < g.rows; ++r)
                for (int c = 0; c < g.cols; ++c) ga.at(c, r) += g.at(r, c);
        };
    });
}

Var reshape(Var a, int r, int c) {
    Tape& t = *a.tape();
    const Mat& av = a.val();
    if (static_cast<size_t>(r) * c != av.size()) throw ShapeError("reshape: size mismatch");
    Mat out(r, c);
    out.data = av.data;
    bool ng = t.needs_grad(a.id());
    int aid = a.id();
    return finish(t, std::move(out), ng, [aid](int id) {
        return [id, aid](Tape& tp) {
            const Mat& g = tp.grad(id);
            Mat& ga = tp.grad_buf(aid);
            for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
        };
    });
}

Var dropout(Var a, double p, Rng& rng, bool active) {
    if (!active || p <= 0.0) return a;
    Tape& t = *a.tape();
    const Mat& av = a.val();
    Mat out(av.rows, av.cols);
    Mat mask(av.rows, av.cols);
    if (p >= 1.0) {
        // keep nothing
    } else {
        double inv_keep = 1.0 / (1.0 - p);
        for (size_t i = 0; i < av.data.size(); ++i) {
            double keep = rng.uniform() >= p ? inv_keep : 0.0;
            mask.data[i] = keep;
            out.data[i] = av.data[i] * keep;
        }
    }
    bool ng = t.needs_grad(a.id());
    int aid = a.id();
    return finish(t, std::move(out), ng, [aid, mask = std::move(mask)](int id) {
        return [id, aid, mask](Tape& tp) {
            const Mat& g = tp.grad(id);
            Mat& ga = tp.grad_buf(aid);
            for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * mask.data[i];
        };
    });
}

Var batch_norm(Var a, Var gamma, Var beta, Mat& running_mean, Mat& running_var, bool train,
               double momentum, double eps) {
    Tape& t = *a.tape();
    const Mat& av = a.val();
    int n = av.rows, d = av.cols;
    require_shape(gamma.val(), 1, d, "batch_norm gamma");
    require_shape(beta.val(), 1, d, "batch_norm beta");
    require_shape(running_mean, 1, d, "batch_norm running_mean");
    require_shape(running_var, 1, d, "batch_norm running_var");

    Mat mean(1, d), var(1, d);
    if (train) {
        for (int c = 0; c < d; ++c) {
            double s = 0.0;
            for (int r = 0; r < n; ++r) s += av.at(r, c);
            mean.at(0, c) = s / n;
        }
        for (int c = 0; c < d; ++c) {
            double s = 0.0;
            for (int r = 0; r < n; ++r) {
                double dlt = av.at(r, c) - mean.at(0, c);
                s += dlt * dlt;
            }
            var.at(0, c) = s / n;
        }
        double unbias = n > 1 ? static_cast<double>(n) / (n - 1) : 1.0;
        for (int c = 0; c < d; ++c) {
            running_mean.at(0, c) =
                (1.0 - momentum) * running_mean.at(0, c) + momentum * mean.at(0, c);
            running_var.at(0, c) =
                (1.0 - momentum) * running_var.at(0, c) + momentum * var.at(0, c) * unbias;
        }
    } else {
        mean = running_mean;
        var = running_var;
    }

    Mat xhat(n, d), out(n, d);
    const Mat& gv = gamma.val();
    const Mat& bv = beta.val();
    for (int c = 0; c < d; ++c) {
        double inv_std = 1.0 / std::sqrt(var.at(0, c) + eps);
        for (int r = 0; r < n; ++r) {
            double xh = (av.at(r, c) - mean.at(0, c)) * inv_std;
            xhat.at(r, c) = xh;
            out.at(r, c) = gv.at(0, c) * xh + bv.at(0, c);
        }
    }

    bool ng = t.needs_grad(a.id()) || t.needs_grad(gamma.id()) || t.needs_grad(beta.id());
    int aid = a.id(), gid = gamma.id(), bid = beta.id();
    return finish(t, std::move(out), ng,
                  [aid, gid, bid, xhat = std::move(xhat), var = std::move(var), train, eps,
                   n](int id) {
        return [id, aid, gid, bid, xhat, var, train, eps, n](Tape& tp) {
            const Mat& g = tp.grad(id);
            const Mat& gv2 = tp.value(gid);
            int d = g.cols;
            if (tp.needs_grad(bid)) {
                Mat& gb = tp.grad_buf(bid);
                for (int c = 0; c < d; ++c) {
                    double s = 0.0;
                    for (int r = 0; r < n; ++r) s += g.at(r, c);
                    gb.at(0, c) += s;
                }
            }
            if (tp.needs_grad(gid)) {
                Mat& gg = tp.grad_buf(gid);
                for (int c = 0; c < d; ++c) {
                    double s = 0.0;
                    for (int r = 0; r < n; ++r) s += g.at(r, c) * xhat.at(r, c);
                    gg.at(0, c) += s;
                }
            }
            if (tp.needs_grad(aid)) {
                Mat& ga = tp.grad_buf(aid);
                for (int c = 0; c < d; ++c) {
                    double inv_std = 1.0 / std::sqrt(var.at(0, c) + eps);
                    double gam = gv2.at(0, c);
                    if (train) {
                        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                        for (int r = 0; r < n; ++r) {
                            double dxh = g.at(r, c) * gam;
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat.at(r, c);
                        }
                        for (int r = 0; r < n; ++r) {
                            double dxh = g.at(r, c) * gam;
                            ga.at(r, c) += inv_std / n *
                                           (n * dxh - sum_dxhat - xhat.at(r, c) * sum_dxhat_xhat);
                        }
                    } else {
                        for (int r = 0; r < n; ++r) ga.at(r, c) += g.at(r, c) * gam * inv_std;
                    }
                }
            }
        };
    });
}

Var layer_norm(Var a, Var gamma, Var beta, double eps) {
    Tape& t = *a.tape();
    const Mat& av = a.val();
    int n = av.rows, d = av.cols;
    require_shape(gamma.val(), 1, d, "layer_norm gamma");
    require_shape(beta.val(), 1, d, "layer_norm beta");

    Mat xhat(n, d), out(n, d), inv_std(n, 1);
    const Mat& gv = gamma.val();
    const Mat& bv = beta.val();
    for (int r = 0; r < n; ++r) {
        double s = 0.0;
        for (int c = 0; c < d; ++c) s += av.at(r, c);
        double mu = s / d;
        double v = 0.0;
        for (int c = 0; c < d; ++c) {
            double dlt = av.at(r, c) - mu;
            v += dlt * dlt;
        }
        v /= d;
        double istd = 1.0 / std::sqrt(v + eps);
        inv_std.at(r, 0) = istd;
        for (int c = 0; c < d; ++c) {
            double xh = (av.at(r, c) - mu) * istd;
            xhat.at(r, c) = xh;
            out.at(r, c) = gv.at(0, c) * xh + bv.at(0, c);
        }
    }

    bool ng = t.needs_grad(a.id()) || t.needs_grad(gamma.id()) || t.needs_grad(beta.id());
    int aid = a.id(), gid = gamma.id(), bid = beta.id();
    return finish(t, std::move(out), ng,
                  [aid, gid, bid, xhat = std::move(xhat), inv_std = std::move(inv_std)](int id) {
        return [id, aid, gid, bid, xhat, inv_std](Tape& tp) {
            const Mat& g = tp.grad(id);
            const Mat& gv2 = tp.value(gid);
            int n = g.rows, d = g.cols;
            if (tp.needs_grad(bid)) {
                Mat& gb = tp.grad_buf(bid);
                for (int c = 0; c < d; ++c) {
                    double s = 0.0;
                    for (int r = 0; r < n; ++r) s += g.at(r, c);
                    gb.at(0, c) += s;
                }
            }
            if (tp.needs_grad(gid)) {
                Mat& gg = tp.grad_buf(gid);
                for (int c = 0; c < d; ++c) {
                    double s = 0.0;
                    for (int r = 0; r < n; ++r) s += g.at(r, c) * xhat.at(r, c);
                    gg.at(0, c) += s;
                }
            }
            if (tp.needs_grad(aid)) {
                Mat& ga = tp.grad_buf(aid);
                for (int r = 0; r < n; ++r) {
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (int c = 0; c < d; ++c) {
                        double dxh = g.at(r, c) * gv2.at(0, c);
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat.at(r, c);
                    }
                    double istd = inv_std.at(r, 0);
                    for (int c = 0; c < d; ++c) {
                        double dxh = g.at(r, c) * gv2.at(0, c);
                        ga.at(r, c) +=
                            istd / d * (d * dxh - sum_dxhat - xhat.at(r, c) * sum_dxhat_xhat);
                    }
                }
            }
        };
    });
}

// ---- segment / indexing ops -----------------------------------------------------

namespace {

void check_segments(const Mat& a, const std::vector<int>& seg, int n_segments, const char* op) {
    if (static_cast<int>(seg.size()) != a.rows)
        throw ShapeError(std::string(op) + ": segment ids (" + std::to_string(seg.size()) +
                         ") must match rows (" + std::to_string(a.rows) + ")");
    for (int s : seg)
        if (s < 0 || s >= n_segments) throw ShapeError(std::string(op) + ": segment id out of range");
}

}  // namespace

Var segment_sum(Var a, const std::vector<int>& seg, int n_segments) {
    Tape& t = *a.tape();
    const Mat& av = a.val();
    check_segments(av, seg, n_segments, "segment_sum");
    Mat out(n_segments, av.cols);
    for (int r = 0; r < av.rows; ++r)
        for (int c = 0; c < av.cols; ++c) out.at(seg[r], c) += av.at(r, c);
    bool ng = t.needs_grad(a.id());
    int aid = a.id();
    return finish(t, std::move(out), ng, [aid, seg](int id) {
        return [id, aid, seg](Tape& tp) {
            const Mat& g = tp.grad(id);
            Mat& ga = tp.grad_buf(aid);
            for (int r = 0; r < ga.rows; ++r)
                for (int c = 0; c < ga.cols; ++c) ga.at(r, c) += g.at(seg[r], c);
        };
    });
}

Var segment_mean(Var a, const std::vector<int>& seg, int n_segments) {
    Tape& t = *a.tape();
    const Mat& av = a.val();
    check_segments(av, seg, n_segments, "segment_mean");
    std::vector<double> count(n_segments, 0.0);
    for (int s : seg) count[s] += 1.0;
    Mat out(n_segments, av.cols);
    for (int r = 0; r < av.rows; ++r)
        for (int c = 0; c < av.cols; ++c) out.at(seg[r], c) += av.at(r, c);
    for (int s = 0; s < n_segments; ++s)
        if (count[s] > 0.0)
            for (int c = 0; c < av.cols; ++c) out.at(s, c) /= count[s];
    bool ng = t.needs_grad(a.id());
    int aid = a.id();
    return finish(t, std::move(out), ng, [aid, seg, count = std::move(count)](int id) {
        return [id, aid, seg, count](Tape& tp) {
            const Mat& g = tp.grad(id);
            Mat& ga = tp.grad_buf(aid);
            for (int r = 0; r < ga.rows; ++r)
                for (int c = 0; c < ga.cols; ++c) ga.at(r, c) += g.at(seg[r], c) / count[seg[r]];
        };
    });
}

Var segment_max(Var a, const std::vector<int>& seg, int n_segments) {
    Tape& t = *a.tape();
    const Mat& av = a.val();
    check_segments(av, seg, n_segments, "segment_max");
    Mat out(n_segments, av.cols);
    std::vector<int> argmax(static_cast<size_t>(n_segments) * av.cols, -1);
    for (int r = 0; r < av.rows; ++r) {
        int s = seg[r];
        for (int c = 0; c < av.cols; ++c) {
            size_t k = static_cast<size_t>(s) * av.cols + c;
            if (argmax[k] < 0 || av.at(r, c) > out.at(s, c)) {
                out.at(s, c) = av.at(r, c);
                argmax[k] = r;
            }
        }
    }
    bool ng = t.needs_grad(a.id());
    int aid = a.id();
    int cols = av.cols;
    return finish(t, std::move(out), ng, [aid, argmax = std::move(argmax), cols](int id) {
        return [id, aid, argmax, cols](Tape& tp) {
            const Mat& g = tp.grad(id);
            Mat& ga = tp.grad_buf(aid);
            for (int s = 0; s < g.rows; ++s)
                for (int c = 0; c < cols; ++c) {
                    int r = argmax[static_cast<size_t>(s) * cols + c];
                    if (r >= 0) ga.at(r, c) += g.at(s, c);
                }
        };
    });
}

Var row_gather(Var a, const std::vector<int>& idx) {
    Tape& t = *a.tape();
    const Mat& av = a.val();
    for (int i : idx)
        if (i < 0 || i >= av.rows) throw ShapeError("row_gather: index out of range");
    Mat out(static_cast<int>(idx.size()), av.cols);
    for (size_t r = 0; r < idx.size(); ++r)
        for (int c = 0; c < av.cols; ++c) out.at(static_cast<int>(r), c) = av.at(idx[r], c);
    bool ng = t.needs_grad(a.id());
    int aid = a.id();
    return finish(t, std::move(out), ng, [aid, idx](int id) {
        return [id, aid, idx](Tape& tp) {
            const Mat& g = tp.grad(id);
            Mat& ga = tp.grad_buf(aid);
            for (size_t r = 0; r < idx.size(); ++r)
                for (int c = 0; c < g.cols; ++c) ga.at(idx[r], c) += g.at(static_cast<int>(r), c);
        };
    });
}

Var scatter_add(Var a, const std::vector<int>& idx, int n_rows) {
    Tape& t = *a.tape();
    const Mat& av = a.val();
    if (static_cast<int>(idx.size()) != av.rows)
        throw ShapeError("scatter_add: index count must match rows");
    for (int i : idx)
        if (i < 0 || i >= n_rows) throw ShapeError("scatter_add: index out of range");
    Mat out(n_rows, av.cols);
    for (int r = 0; r < av.rows; ++r)
        for (int c = 0; c < av.cols; ++c) out.at(idx[r], c) += av.at(r, c);
    bool ng = t.needs_grad(a.id());
    int aid = a.id();
    return finish(t, std::move(out), ng, [aid, idx](int id) {
        return [id, aid, idx](Tape& tp) {
            const Mat& g = tp.grad(id);
            Mat& ga = tp.grad_buf(aid);
            for (int r = 0; r < ga.rows; ++r)
                for (int c = 0; c < g.cols; ++c) ga.at(r, c) += g.at(idx[r], c);
        };
    });
}

Var sum_all(Var a) {
    Tape& t = *a.tape();
    const Mat& av = a.val();
    double s = 0.0;
    for (double v : av.data) s += v;
    bool ng = t.needs_grad(a.id());
    int aid = a.id();
    return finish(t, Mat::scalar(s), ng, [aid](int id) {
        return [id, aid](Tape& tp) {
            double g = tp.grad(id).at(0, 0);
            Mat& ga = tp.grad_buf(aid);
            for (double& v : ga.data) v += g;
        };
    });
}

Var mean_all(Var a) {
    Tape& t = *a.tape();
    const Mat& av = a.val();
    double n = static_cast<double>(av.size());
    double s = 0.0;
    for (double v : av.data) s += v;
    bool ng = t.needs_grad(a.id());
    int aid = a.id();
    return finish(t, Mat::scalar(s / n), ng, [aid, n](int id) {
        return [id, aid, n](Tape& tp) {
            double g = tp.grad(id).at(0, 0) / n;
            Mat& ga = tp.grad_buf(aid);
            for (double& v : ga.data) v += g;
        };
    });
}

// ---- finite-difference check ------------------------------------------------------

double grad_check(const std::function<Var(Tape&, Var)>& f, const Mat& x, double h) {
    Tape ad;
    Var probe = ad.input(x);
    Var root = f(ad, probe);
    ad.backward(root);
    Mat g_ad = probe.grad();
    if (g_ad.empty()) g_ad = Mat::zeros(x.rows, x.cols);

    auto eval = [&f](const Mat& xv) {
        Tape t;
        Var p = t.constant(xv);
        return f(t, p).val().at(0, 0);
    };

    double max_err = 0.0;
    Mat xp = x;
    for (size_t i = 0; i < x.data.size(); ++i) {
        double orig = xp.data[i];
        xp.data[i] = orig + h;
        double fp = eval(xp);
        xp.data[i] = orig - h;
        double fm = eval(xp);
        xp.data[i] = orig;
        double g_fd = (fp - fm) / (2.0 * h);
        double err = std::abs(g_ad.data[i] - g_fd) / std::max(1.0, std::abs(g_fd));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace sbg
