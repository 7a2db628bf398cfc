#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ucr/autodiff.hpp"
#include "ucr/matrix.hpp"
#include "ucr/rng.hpp"
#include "ucr/uncertainty.hpp"

using namespace ucr;
using ad::Tape;
using ad::Var;
using Catch::Approx;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.5,
                     double hi = 1.5) {
    Matrix m(r, c);
    for (double& v : m.data) v = rng.uniform(lo, hi);
    return m;
}

}  // namespace

TEST_CASE("backward of sum is all-ones", "[autodiff]") {
    Tape t;
    Rng rng(1);
    Var x = t.leaf(random_matrix(3, 4, rng));
    t.backward(t.sum_all(x));
    for (double g : t.grad(x).data) CHECK(g == 1.0);
}

TEST_CASE("cosine of a vector with itself has zero gradient", "[autodiff]") {
    Tape t;
    Var a = t.leaf(Matrix::from_rows({{0.3, -1.2, 0.7}}));
    Var sim = ad::cosine_matrix(t, a, a);
    CHECK(t.value(sim)(0, 0) == Approx(1.0).epsilon(1e-15));
    t.backward(sim);
    for (double g : t.grad(a).data) CHECK(std::abs(g) < 1e-14);
}

TEST_CASE("backward rejects non-scalar loss", "[autodiff]") {
    Tape t;
    Var x = t.leaf(Matrix(2, 2, 1.0));
    CHECK_THROWS_AS(t.backward(t.mul(x, x)), std::invalid_argument);
}

TEST_CASE("quadratic closed-form gradient", "[autodiff]") {
    // ||x||^2 at [1, 2] -> [2, 4]
    auto build = [](Tape& t, const std::vector<Var>& p) {
        return t.sum_all(t.mul(p[0], p[0]));
    };
    auto report = ad::grad_check({Matrix::from_rows({{1.0, 2.0}})}, {"x"}, build);
    CHECK(report.max_rel_err < 1e-9);

    Tape t;
    Var x = t.leaf(Matrix::from_rows({{1.0, 2.0}}));
    t.backward(build(t, {x}));
    CHECK(t.grad(x)(0, 0) == Approx(2.0).epsilon(1e-12));
    CHECK(t.grad(x)(0, 1) == Approx(4.0).epsilon(1e-12));
}

TEST_CASE("constant loss reports near-zero error via guarded denominator", "[autodiff]") {
    auto build = [](Tape& t, const std::vector<Var>& p) {
        (void)p;
        return t.constant(Matrix(1, 1, 3.0));
    };
    auto report = ad::grad_check({Matrix(2, 2, 0.5)}, {"unused"}, build);
    CHECK(report.max_rel_err == Approx(0.0).margin(1e-6));
}

TEST_CASE("every primitive op passes a finite-difference check", "[autodiff]") {
    Rng rng(17);
    struct Case {
        std::string name;
        std::vector<Matrix> inputs;
        ad::LossBuilder build;
    };
    Matrix a = random_matrix(3, 4, rng);
    Matrix b = random_matrix(3, 4, rng, 0.5, 2.0);  // positive: safe for div/log/sqrt
    Matrix r = random_matrix(1, 4, rng, 0.5, 2.0);
    Matrix c = random_matrix(3, 1, rng, 0.5, 2.0);
    Matrix sq = random_matrix(3, 3, rng);
    Matrix m34 = random_matrix(3, 4, rng);
    Matrix m45 = random_matrix(4, 5, rng);
    Matrix m54 = random_matrix(5, 4, rng);

    auto mix = [](Tape& t, Var v) {
        // nonlinear scalarization so gradients are informative
        return t.mean_all(t.tanh(v));
    };

    std::vector<Case> cases = {
        {"add", {a, m34}, [&](Tape& t, const std::vector<Var>& p) { return mix(t, t.add(p[0], p[1])); }},
        {"sub", {a, m34}, [&](Tape& t, const std::vector<Var>& p) { return mix(t, t.sub(p[0], p[1])); }},
        {"mul", {a, m34}, [&](Tape& t, const std::vector<Var>& p) { return mix(t, t.mul(p[0], p[1])); }},
        {"div", {a, b}, [&](Tape& t, const std::vector<Var>& p) { return mix(t, t.div(p[0], p[1])); }},
        {"tanh", {a}, [&](Tape& t, const std::vector<Var>& p) { return t.mean_all(t.tanh(p[0])); }},
        {"sqrt", {b}, [&](Tape& t, const std::vector<Var>& p) { return mix(t, t.sqrt(p[0])); }},
        {"log", {b}, [&](Tape& t, const std::vector<Var>& p) { return mix(t, t.log(p[0])); }},
        {"scale", {a}, [&](Tape& t, const std::vector<Var>& p) { return mix(t, t.scale(p[0], -2.5)); }},
        {"add_const", {a}, [&](Tape& t, const std::vector<Var>& p) { return mix(t, t.add_const(p[0], 0.7)); }},
        {"max_const", {a}, [&](Tape& t, const std::vector<Var>& p) { return mix(t, t.max_const(p[0], 0.1)); }},
        {"add_rowvec", {a, r}, [&](Tape& t, const std::vector<Var>& p) { return mix(t, t.add_rowvec(p[0], p[1])); }},
        {"sub_rowvec", {a, r}, [&](Tape& t, const std::vector<Var>& p) { return mix(t, t.sub_rowvec(p[0], p[1])); }},
        {"mul_rowvec", {a, r}, [&](Tape& t, const std::vector<Var>& p) { return mix(t, t.mul_rowvec(p[0], p[1])); }},
        {"div_rowvec", {a, r}, [&](Tape& t, const std::vector<Var>& p) { return mix(t, t.div_rowvec(p[0], p[1])); }},
        {"div_colvec", {a, c}, [&](Tape& t, const std::vector<Var>& p) { return mix(t, t.div_colvec(p[0], p[1])); }},
        {"matmul", {m34, m45}, [&](Tape& t, const std::vector<Var>& p) { return mix(t, t.matmul(p[0], p[1])); }},
        {"matmul_nt", {m34, m54}, [&](Tape& t, const std::vector<Var>& p) { return mix(t, t.matmul_nt(p[0], p[1])); }},
        {"concat_cols", {a, c}, [&](Tape& t, const std::vector<Var>& p) { return mix(t, t.concat_cols(p[0], p[1])); }},
        {"colmean", {a}, [&](Tape& t, const std::vector<Var>& p) { return mix(t, t.colmean(p[0])); }},
        {"rowsum", {a}, [&](Tape& t, const std::vector<Var>& p) { return mix(t, t.rowsum(p[0])); }},
        {"diag", {sq}, [&](Tape& t, const std::vector<Var>& p) { return mix(t, t.diag(p[0])); }},
        {"log_softmax_rows", {sq}, [&](Tape& t, const std::vector<Var>& p) {
             return t.mean_all(t.mul(t.log_softmax_rows(p[0]), t.constant(Matrix(3, 3, 0.37))));
         }},
        {"normalize_rows", {a}, [&](Tape& t, const std::vector<Var>& p) { return mix(t, ad::normalize_rows(t, p[0])); }},
    };

    for (auto& cs : cases) {
        INFO(cs.name);
        std::vector<std::string> names;
        for (std::size_t i = 0; i < cs.inputs.size(); ++i)
            names.push_back(cs.name + "#" + std::to_string(i));
        auto report = ad::grad_check(cs.inputs, names, cs.build, 1e-5);
        CHECK(report.max_rel_err < 1e-7);
    }
}

TEST_CASE("info_nce gradients match central differences", "[autodiff]") {
    Rng rng(23);
    Matrix fs = random_matrix(4, 8, rng);
    Matrix ft = random_matrix(4, 8, rng);
    auto build = [](Tape& t, const std::vector<Var>& p) {
        return info_nce_node(t, p[0], p[1]);
    };
    auto report = ad::grad_check({fs, ft}, {"f_s", "f_t"}, build, 1e-4);
    CHECK(report.max_rel_err < 1e-5);
}

TEST_CASE("whiten gradient flows through batch statistics", "[autodiff]") {
    Rng rng(31);
    Matrix x0 = random_matrix(5, 3, rng);
    Matrix weights = random_matrix(5, 3, rng);

    auto build_flow = [&](Tape& t, const std::vector<Var>& p) {
        auto st = ad::batch_stats(t, p[0], /*stop_grad=*/false);
        return t.mean_all(t.tanh(t.mul(ad::whiten(t, p[0], st), t.constant(weights))));
    };
    auto flow = ad::grad_check({x0}, {"x"}, build_flow, 1e-5);
    CHECK(flow.max_rel_err < 1e-6);

    // stop-gradient path: statistics frozen at the base point, so the
    // finite-difference reference must hold them fixed too
    const BatchStats frozen = compute_stats(x0);
    auto build_stop = [&](Tape& t, const std::vector<Var>& p) {
        auto st = ad::batch_stats(t, p[0], /*stop_grad=*/true, &frozen);
        return t.mean_all(t.tanh(t.mul(ad::whiten(t, p[0], st), t.constant(weights))));
    };
    auto stop = ad::grad_check({x0}, {"x"}, build_stop, 1e-5);
    CHECK(stop.max_rel_err < 1e-6);
}

TEST_CASE("tape whiten values equal plain whiten", "[autodiff]") {
    Rng rng(37);
    Matrix x = random_matrix(6, 4, rng);
    Tape t;
    Var xv = t.leaf(x);
    auto st = ad::batch_stats(t, xv, false);
    const Matrix plain = whiten(x, compute_stats(x));
    const Matrix& taped = t.value(ad::whiten(t, xv, st));
    for (std::size_t i = 0; i < plain.data.size(); ++i)
        CHECK(taped.data[i] == Approx(plain.data[i]).margin(1e-15));
}

TEST_CASE("grad_check subsamples large parameters deterministically", "[autodiff]") {
    Rng rng(41);
    Matrix big = random_matrix(20, 30, rng);
    auto build = [](Tape& t, const std::vector<Var>& p) {
        return t.mean_all(t.tanh(p[0]));
    };
    Rng sub(7);
    auto report = ad::grad_check({big}, {"big"}, build, 1e-5, 200, &sub);
    CHECK(report.max_rel_err < 1e-7);
    CHECK(report.per_parameter.at("big") >= 0.0);
}
