#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ucr/matrix.hpp"
#include "ucr/rng.hpp"

// Reverse-mode differentiation over a small fixed operation set: an explicit
// append-only tape of matrix-valued nodes. Nodes are created in topological
// order, so the graph is acyclic by construction and backward is a single
// reverse sweep. One tape per loss evaluation; tapes on distinct threads are
// independent.

namespace ucr::ad {

struct Var {
    int id = -1;
};

class Tape {
  public:
    Var leaf(Matrix v) { return push(std::move(v), nullptr); }
    Var constant(Matrix v) { return push(std::move(v), nullptr); }

    const Matrix& value(Var x) const { return nodes_[check(x)].value; }
    const Matrix& grad(Var x) const { return nodes_[check(x)].grad; }

    std::size_t size() const { return nodes_.size(); }

    // ----- elementwise -----

    Var add(Var a, Var b) {
        return push(ucr::add(value(a), value(b)), [a, b, o = next()](Tape& t) {
            t.accumulate(a, t.grad_of(o));
            t.accumulate(b, t.grad_of(o));
        });
    }

    Var sub(Var a, Var b) {
        return push(ucr::sub(value(a), value(b)), [a, b, o = next()](Tape& t) {
            t.accumulate(a, t.grad_of(o));
            t.accumulate(b, ucr::scale(t.grad_of(o), -1.0));
        });
    }

    Var mul(Var a, Var b) {
        return push(hadamard(value(a), value(b)), [a, b, o = next()](Tape& t) {
            t.accumulate(a, hadamard(t.grad_of(o), t.value(b)));
            t.accumulate(b, hadamard(t.grad_of(o), t.value(a)));
        });
    }

    Var div(Var a, Var b) {
        return push(zip(value(a), value(b), std::divides<>{}), [a, b, o = next()](Tape& t) {
            const Matrix& g = t.grad_of(o);
            t.accumulate(a, zip(g, t.value(b), std::divides<>{}));
            Matrix gb = t.value(b);
            for (std::size_t i = 0; i < gb.data.size(); ++i)
                gb.data[i] = -g.data[i] * t.value(a).data[i] / (gb.data[i] * gb.data[i]);
            t.accumulate(b, gb);
        });
    }

    Var tanh(Var a) {
        return push(map(value(a), [](double v) { return std::tanh(v); }),
                    [a, o = next()](Tape& t) {
                        Matrix ga = t.grad_of(o);
                        const Matrix& y = t.value_of(o);
                        for (std::size_t i = 0; i < ga.data.size(); ++i)
                            ga.data[i] *= 1.0 - y.data[i] * y.data[i];
                        t.accumulate(a, ga);
                    });
    }

    Var sqrt(Var a) {
        return push(map(value(a), [](double v) { return std::sqrt(v); }),
                    [a, o = next()](Tape& t) {
                        Matrix ga = t.grad_of(o);
                        const Matrix& y = t.value_of(o);
                        for (std::size_t i = 0; i < ga.data.size(); ++i)
                            ga.data[i] *= 0.5 / y.data[i];
                        t.accumulate(a, ga);
                    });
    }

    Var log(Var a) {
        return push(map(value(a), [](double v) { return std::log(v); }),
                    [a, o = next()](Tape& t) {
                        t.accumulate(a, zip(t.grad_of(o), t.value(a), std::divides<>{}));
                    });
    }

    Var scale(Var a, double s) {
        return push(ucr::scale(value(a), s), [a, s, o = next()](Tape& t) {
            t.accumulate(a, ucr::scale(t.grad_of(o), s));
        });
    }

    Var add_const(Var a, double c) {
        return push(map(value(a), [c](double v) { return v + c; }),
                    [a, o = next()](Tape& t) { t.accumulate(a, t.grad_of(o)); });
    }

    // elementwise max with a constant; subgradient 0 where the floor is active
    Var max_const(Var a, double c) {
        return push(map(value(a), [c](double v) { return std::max(v, c); }),
                    [a, c, o = next()](Tape& t) {
                        Matrix ga = t.grad_of(o);
                        const Matrix& va = t.value(a);
                        for (std::size_t i = 0; i < ga.data.size(); ++i)
                            if (va.data[i] <= c) ga.data[i] = 0.0;
                        t.accumulate(a, ga);
                    });
    }

    // ----- broadcasting -----

    Var add_rowvec(Var m, Var r) {
        const Matrix& vm = value(m);
        const Matrix& vr = value(r);
        require_shape(vr, 1, vm.cols, "add_rowvec row");
        Matrix out = vm;
        for (std::size_t i = 0; i < vm.rows; ++i)
            for (std::size_t j = 0; j < vm.cols; ++j) out(i, j) += vr(0, j);
        return push(std::move(out), [m, r, o = next()](Tape& t) {
            const Matrix& g = t.grad_of(o);
            t.accumulate(m, g);
            Matrix gr(1, g.cols);
            for (std::size_t i = 0; i < g.rows; ++i)
                for (std::size_t j = 0; j < g.cols; ++j) gr(0, j) += g(i, j);
            t.accumulate(r, gr);
        });
    }

    Var sub_rowvec(Var m, Var r) {
        const Matrix& vm = value(m);
        const Matrix& vr = value(r);
        require_shape(vr, 1, vm.cols, "sub_rowvec row");
        Matrix out = vm;
        for (std::size_t i = 0; i < vm.rows; ++i)
            for (std::size_t j = 0; j < vm.cols; ++j) out(i, j) -= vr(0, j);
        return push(std::move(out), [m, r, o = next()](Tape& t) {
            const Matrix& g = t.grad_of(o);
            t.accumulate(m, g);
            Matrix gr(1, g.cols);
            for (std::size_t i = 0; i < g.rows; ++i)
                for (std::size_t j = 0; j < g.cols; ++j) gr(0, j) -= g(i, j);
            t.accumulate(r, gr);
        });
    }

    Var mul_rowvec(Var m, Var r) {
        const Matrix& vm = value(m);
        const Matrix& vr = value(r);
        require_shape(vr, 1, vm.cols, "mul_rowvec row");
        Matrix out = vm;
        for (std::size_t i = 0; i < vm.rows; ++i)
            for (std::size_t j = 0; j < vm.cols; ++j) out(i, j) *= vr(0, j);
        return push(std::move(out), [m, r, o = next()](Tape& t) {
            const Matrix& g = t.grad_of(o);
            const Matrix& vm2 = t.value(m);
            const Matrix& vr2 = t.value(r);
            Matrix gm = g;
            Matrix gr(1, g.cols);
            for (std::size_t i = 0; i < g.rows; ++i)
                for (std::size_t j = 0; j < g.cols; ++j) {
                    gm(i, j) *= vr2(0, j);
                    gr(0, j) += g(i, j) * vm2(i, j);
                }
            t.accumulate(m, gm);
            t.accumulate(r, gr);
        });
    }

    Var div_rowvec(Var m, Var r) {
        const Matrix& vm = value(m);
        const Matrix& vr = value(r);
        require_shape(vr, 1, vm.cols, "div_rowvec row");
        Matrix out = vm;
        for (std::size_t i = 0; i < vm.rows; ++i)
            for (std::size_t j = 0; j < vm.cols; ++j) out(i, j) /= vr(0, j);
        return push(std::move(out), [m, r, o = next()](Tape& t) {
            const Matrix& g = t.grad_of(o);
            const Matrix& vm2 = t.value(m);
            const Matrix& vr2 = t.value(r);
            Matrix gm = g;
            Matrix gr(1, g.cols);
            for (std::size_t i = 0; i < g.rows; ++i)
                for (std::size_t j = 0; j < g.cols; ++j) {
                    const double inv = 1.0 / vr2(0, j);
                    gm(i, j) *= inv;
                    gr(0, j) -= g(i, j) * vm2(i, j) * inv * inv;
                }
            t.accumulate(m, gm);
            t.accumulate(r, gr);
        });
    }

    Var div_colvec(Var m, Var c) {
        const Matrix& vm = value(m);
        const Matrix& vc = value(c);
        require_shape(vc, vm.rows, 1, "div_colvec column");
        Matrix out = vm;
        for (std::size_t i = 0; i < vm.rows; ++i)
            for (std::size_t j = 0; j < vm.cols; ++j) out(i, j) /= vc(i, 0);
        return push(std::move(out), [m, c, o = next()](Tape& t) {
            const Matrix& g = t.grad_of(o);
            const Matrix& vm2 = t.value(m);
            const Matrix& vc2 = t.value(c);
            Matrix gm = g;
            Matrix gc(g.rows, 1);
            for (std::size_t i = 0; i < g.rows; ++i) {
                const double inv = 1.0 / vc2(i, 0);
                for (std::size_t j = 0; j < g.cols; ++j) {
                    gm(i, j) *= inv;
                    gc(i, 0) -= g(i, j) * vm2(i, j) * inv * inv;
                }
            }
            t.accumulate(m, gm);
            t.accumulate(c, gc);
        });
    }

    // ----- linear algebra -----

    Var matmul(Var a, Var b) {
        return push(ucr::matmul(value(a), value(b)), [a, b, o = next()](Tape& t) {
            t.accumulate(a, ucr::matmul_nt(t.grad_of(o), t.value(b)));
            t.accumulate(b, ucr::matmul_tn(t.value(a), t.grad_of(o)));
        });
    }

    // a @ b^T
    Var matmul_nt(Var a, Var b) {
        return push(ucr::matmul_nt(value(a), value(b)), [a, b, o = next()](Tape& t) {
            t.accumulate(a, ucr::matmul(t.grad_of(o), t.value(b)));
            t.accumulate(b, ucr::matmul_tn(t.grad_of(o), t.value(a)));
        });
    }

    Var concat_cols(Var a, Var b) {
        const Matrix& va = value(a);
        const Matrix& vb = value(b);
        if (va.rows != vb.rows) throw std::invalid_argument("concat_cols: row mismatch");
        Matrix out(va.rows, va.cols + vb.cols);
        for (std::size_t i = 0; i < va.rows; ++i) {
            for (std::size_t j = 0; j < va.cols; ++j) out(i, j) = va(i, j);
            for (std::size_t j = 0; j < vb.cols; ++j) out(i, va.cols + j) = vb(i, j);
        }
        return push(std::move(out), [a, b, ca = va.cols, o = next()](Tape& t) {
            const Matrix& g = t.grad_of(o);
            Matrix ga(g.rows, ca);
            Matrix gb(g.rows, g.cols - ca);
            for (std::size_t i = 0; i < g.rows; ++i) {
                for (std::size_t j = 0; j < ca; ++j) ga(i, j) = g(i, j);
                for (std::size_t j = ca; j < g.cols; ++j) gb(i, j - ca) = g(i, j);
            }
            t.accumulate(a, ga);
            t.accumulate(b, gb);
        });
    }

    // ----- reductions -----

    Var colmean(Var m) {
        const Matrix& vm = value(m);
        Matrix out(1, vm.cols);
        for (std::size_t i = 0; i < vm.rows; ++i)
            for (std::size_t j = 0; j < vm.cols; ++j) out(0, j) += vm(i, j);
        for (double& v : out.data) v /= static_cast<double>(vm.rows);
        return push(std::move(out), [m, n = vm.rows, o = next()](Tape& t) {
            const Matrix& g = t.grad_of(o);
            Matrix gm(n, g.cols);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < g.cols; ++j)
                    gm(i, j) = g(0, j) / static_cast<double>(n);
            t.accumulate(m, gm);
        });
    }

    Var rowsum(Var m) {
        const Matrix& vm = value(m);
        Matrix out(vm.rows, 1);
        for (std::size_t i = 0; i < vm.rows; ++i)
            for (std::size_t j = 0; j < vm.cols; ++j) out(i, 0) += vm(i, j);
        return push(std::move(out), [m, d = vm.cols, o = next()](Tape& t) {
            const Matrix& g = t.grad_of(o);
            Matrix gm(g.rows, d);
            for (std::size_t i = 0; i < g.rows; ++i)
                for (std::size_t j = 0; j < d; ++j) gm(i, j) = g(i, 0);
            t.accumulate(m, gm);
        });
    }

    Var sum_all(Var m) {
        const Matrix& vm = value(m);
        double s = 0.0;
        for (double v : vm.data) s += v;
        Matrix out(1, 1);
        out(0, 0) = s;
        return push(std::move(out), [m, r = vm.rows, c = vm.cols, o = next()](Tape& t) {
            t.accumulate(m, Matrix(r, c, t.grad_of(o)(0, 0)));
        });
    }

    Var mean_all(Var m) {
        const std::size_t n = value(m).size();
        return scale(sum_all(m), 1.0 / static_cast<double>(n));
    }

    Var diag(Var m) {
        const Matrix& vm = value(m);
        if (vm.rows != vm.cols) throw std::invalid_argument("diag: matrix not square");
        Matrix out(vm.rows, 1);
        for (std::size_t i = 0; i < vm.rows; ++i) out(i, 0) = vm(i, i);
        return push(std::move(out), [m, n = vm.rows, o = next()](Tape& t) {
            const Matrix& g = t.grad_of(o);
            Matrix gm(n, n);
            for (std::size_t i = 0; i < n; ++i) gm(i, i) = g(i, 0);
            t.accumulate(m, gm);
        });
    }

    // ----- fused -----

    Var log_softmax_rows(Var s) {
        const Matrix& vs = value(s);
        require_finite(vs, "log_softmax input");
        Matrix out = vs;
        for (std::size_t i = 0; i < vs.rows; ++i) {
            const double lse = log_sum_exp(vs.row(i));
            for (std::size_t j = 0; j < vs.cols; ++j) out(i, j) -= lse;
        }
        return push(std::move(out), [s, o = next()](Tape& t) {
            const Matrix& g = t.grad_of(o);
            const Matrix& y = t.value_of(o);
            Matrix gs = g;
            for (std::size_t i = 0; i < g.rows; ++i) {
                double gsum = 0.0;
                for (std::size_t j = 0; j < g.cols; ++j) gsum += g(i, j);
                for (std::size_t j = 0; j < g.cols; ++j)
                    gs(i, j) -= std::exp(y(i, j)) * gsum;
            }
            t.accumulate(s, gs);
        });
    }

    // ----- backward -----

    void backward(Var loss) {
        const Matrix& lv = value(loss);
        if (lv.rows != 1 || lv.cols != 1)
            throw std::invalid_argument("backward: loss must be scalar (1x1)");
        for (auto& n : nodes_) {
            n.grad = Matrix(n.value.rows, n.value.cols);
        }
        nodes_[loss.id].grad(0, 0) = 1.0;
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i)
            if (nodes_[i].back) nodes_[i].back(*this);
    }

  private:
    struct Node {
        Matrix value;
        Matrix grad;
        std::function<void(Tape&)> back;
    };

    std::vector<Node> nodes_;

    int check(Var x) const {
        if (x.id < 0 || x.id >= static_cast<int>(nodes_.size()))
            throw std::out_of_range("invalid tape node id");
        return x.id;
    }

    Var next() const { return Var{static_cast<int>(nodes_.size())}; }

    Var push(Matrix v, std::function<void(Tape&)> back) {
        nodes_.push_back(Node{std::move(v), Matrix{}, std::move(back)});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    const Matrix& grad_of(Var x) const { return nodes_[x.id].grad; }
    const Matrix& value_of(Var x) const { return nodes_[x.id].value; }

    void accumulate(Var x, const Matrix& g) {
        Matrix& dst = nodes_[check(x)].grad;
        for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += g.data[i];
    }
};

// ---------------------------------------------------------------------------
// composite graph builders

// Rows scaled to unit L2 norm; rejects zero-norm rows.
inline Var normalize_rows(Tape& t, Var x) {
    const Matrix& vx = t.value(x);
    for (std::size_t i = 0; i < vx.rows; ++i)
        if (norm(vx.row(i)) == 0.0) throw std::domain_error("zero-norm embedding");
    Var sq = t.rowsum(t.mul(x, x));
    Var nrm = t.sqrt(sq);
    return t.div_colvec(x, nrm);
}

// Full pairwise cosine matrix: out[i,j] = kappa(a_i, b_j).
inline Var cosine_matrix(Tape& t, Var a, Var b) {
    return t.matmul_nt(normalize_rows(t, a), normalize_rows(t, b));
}

struct StatsVars {
    Var mu;            // 1 x D
    Var sigma;         // 1 x D, floored
    Var sigma_scalar;  // 1 x 1
    BatchStats plain;  // same values, plain form
};

// Batch statistics as graph nodes. With stop_grad the statistics are inserted
// as constants (optionally from a caller-supplied snapshot, which is what the
// finite-difference checker needs to hold fixed); otherwise gradients flow
// through mean and std.
inline StatsVars batch_stats(Tape& t, Var x, bool stop_grad,
                             const BatchStats* frozen = nullptr) {
    StatsVars out;
    if (stop_grad) {
        out.plain = frozen ? *frozen : compute_stats(t.value(x));
        Matrix mu(1, out.plain.mu.size());
        Matrix sg(1, out.plain.sigma.size());
        for (std::size_t j = 0; j < out.plain.mu.size(); ++j) {
            mu(0, j) = out.plain.mu[j];
            sg(0, j) = out.plain.sigma[j];
        }
        out.mu = t.constant(std::move(mu));
        out.sigma = t.constant(std::move(sg));
        out.sigma_scalar = t.constant(Matrix(1, 1, out.plain.sigma_scalar));
        return out;
    }
    if (t.value(x).rows < 2) throw std::invalid_argument("degenerate batch: need B >= 2");
    out.mu = t.colmean(x);
    Var centered = t.sub_rowvec(x, out.mu);
    Var var = t.colmean(t.mul(centered, centered));
    out.sigma = t.sqrt(t.max_const(var, kSigmaFloor * kSigmaFloor));
    out.sigma_scalar = t.mean_all(out.sigma);
    out.plain.mu = t.value(out.mu).data;
    out.plain.sigma = t.value(out.sigma).data;
    out.plain.sigma_scalar = t.value(out.sigma_scalar)(0, 0);
    return out;
}

inline Var whiten(Tape& t, Var x, const StatsVars& st) {
    return t.div_rowvec(t.sub_rowvec(x, st.mu), st.sigma);
}

// ---------------------------------------------------------------------------
// finite-difference gradient checking

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::map<std::string, double> per_parameter;
};

using LossBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

// Compares analytic gradients of build(params...) against central differences.
// Entries per parameter are checked exhaustively unless max_entries_per_param
// caps them, in which case a random subsample of that size is drawn.
inline GradCheckReport grad_check(const std::vector<Matrix>& init,
                                  const std::vector<std::string>& names,
                                  const LossBuilder& build, double h = 1e-4,
                                  std::size_t max_entries_per_param = 0,
                                  Rng* rng = nullptr) {
    Tape tape;
    std::vector<Var> params;
    params.reserve(init.size());
    for (const auto& m : init) params.push_back(tape.leaf(m));
    Var loss = build(tape, params);
    tape.backward(loss);

    auto eval_at = [&](const std::vector<Matrix>& theta) {
        Tape t2;
        std::vector<Var> p2;
        p2.reserve(theta.size());
        for (const auto& m : theta) p2.push_back(t2.leaf(m));
        return t2.value(build(t2, p2))(0, 0);
    };

    GradCheckReport report;
    std::vector<Matrix> theta = init;
    for (std::size_t p = 0; p < init.size(); ++p) {
        const Matrix& analytic = tape.grad(params[p]);
        std::vector<std::size_t> entries(init[p].size());
        for (std::size_t i = 0; i < entries.size(); ++i) entries[i] = i;
        if (max_entries_per_param > 0 && entries.size() > max_entries_per_param && rng) {
            for (std::size_t i = entries.size() - 1; i > 0; --i)
                std::swap(entries[i], entries[rng->uniform_int(i + 1)]);
            entries.resize(max_entries_per_param);
        }
        double worst = 0.0;
        for (std::size_t idx : entries) {
            const double saved = theta[p].data[idx];
            theta[p].data[idx] = saved + h;
            const double lp = eval_at(theta);
            theta[p].data[idx] = saved - h;
            const double lm = eval_at(theta);
            theta[p].data[idx] = saved;
            const double numeric = (lp - lm) / (2.0 * h);
            const double ga = analytic.data[idx];
            const double rel = std::abs(ga - numeric) /
                               std::max(1e-8, std::abs(ga) + std::abs(numeric));
            worst = std::max(worst, rel);
        }
        report.per_parameter[names.size() > p ? names[p] : "p" + std::to_string(p)] = worst;
        report.max_rel_err = std::max(report.max_rel_err, worst);
    }
    return report;
}

}  // namespace ucr::ad
