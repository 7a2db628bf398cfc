#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "ucr/eval.hpp"
#include "ucr/rng.hpp"

using namespace ucr;
using Catch::Approx;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
    Matrix m(r, c);
    for (double& v : m.data) v = rng.uniform(-1.0, 1.0);
    return m;
}

}  // namespace

TEST_CASE("rank puts an exact match first", "[eval]") {
    Rng rng(1);
    Matrix gallery = random_matrix(20, 6, rng);
    const std::size_t pick = 13;
    auto ids = eval::rank(gallery.row(pick), gallery);
    CHECK(ids.front() == static_cast<int>(pick));
}

TEST_CASE("rank ordering matches the worked example", "[eval]") {
    Matrix gallery = Matrix::from_rows({{1.0, 0.0}, {0.0, 1.0}, {0.9, 0.1}});
    std::vector<double> query{1.0, 0.0};
    auto ids = eval::rank(query, gallery);
    CHECK(ids == std::vector<int>{0, 2, 1});
}

TEST_CASE("rank breaks ties by ascending id", "[eval]") {
    Matrix gallery = Matrix::from_rows({{0.5, 0.5}, {1.0, 1.0}, {2.0, 2.0}});
    std::vector<double> query{1.0, 1.0};
    auto ids = eval::rank(query, gallery);
    // all three rows are colinear with the query: pure id order
    CHECK(ids == std::vector<int>{0, 1, 2});
}

TEST_CASE("rank is invariant under positive rescaling", "[eval]") {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix gallery = random_matrix(15, 5, rng);
        Matrix query = random_matrix(1, 5, rng);
        auto base = eval::rank(query.row(0), gallery);

        Matrix scaled_gallery = gallery;
        const std::size_t row = rng.uniform_int(15);
        const double c = rng.uniform(0.01, 50.0);
        for (std::size_t j = 0; j < 5; ++j) scaled_gallery(row, j) *= c;
        CHECK(eval::rank(query.row(0), scaled_gallery) == base);

        Matrix scaled_query = query;
        for (std::size_t j = 0; j < 5; ++j) scaled_query(0, j) *= c;
        CHECK(eval::rank(scaled_query.row(0), gallery) == base);
    }
}

TEST_CASE("rank rejects zero-norm rows", "[eval]") {
    Matrix gallery = Matrix::from_rows({{1.0, 0.0}, {0.0, 0.0}});
    std::vector<double> query{1.0, 1.0};
    CHECK_THROWS_WITH(eval::rank(query, gallery),
                      Catch::Matchers::ContainsSubstring("zero-norm"));
}

TEST_CASE("recall_at_k counting oracle", "[eval]") {
    // targets ranked at positions 1, 5 and 12 of a 15-item gallery
    std::vector<std::vector<int>> ranked(3);
    for (int q = 0; q < 3; ++q) {
        ranked[q].resize(15);
        for (int i = 0; i < 15; ++i) ranked[q][i] = i;
    }
    // query 0: target 0 at rank 1; query 1: target 4 at rank 5; query 2: target 11
    std::vector<int> targets{0, 4, 11};
    auto report = eval::recall_at_k(ranked, targets, {1, 10, 50});
    CHECK(report.per_k.at(1) == Approx(1.0 / 3.0));
    CHECK(report.per_k.at(10) == Approx(2.0 / 3.0));
    CHECK(report.per_k.at(50) == 1.0);  // K >= gallery size
    CHECK(report.n_queries == 3);
}

TEST_CASE("recall_at_k with every target first", "[eval]") {
    std::vector<std::vector<int>> ranked{{3, 0, 1, 2}, {2, 0, 1, 3}};
    std::vector<int> targets{3, 2};
    auto report = eval::recall_at_k(ranked, targets, {1});
    CHECK(report.per_k.at(1) == 1.0);
}

TEST_CASE("recall_at_k rejects targets missing from the ranking", "[eval]") {
    std::vector<std::vector<int>> ranked{{0, 1, 2}};
    CHECK_THROWS_WITH(eval::recall_at_k(ranked, {7}, {1}),
                      Catch::Matchers::ContainsSubstring("missing from gallery"));
}

TEST_CASE("recall is monotone in K", "[eval]") {
    Rng rng(3);
    Matrix gallery = random_matrix(40, 6, rng);
    Matrix queries = random_matrix(10, 6, rng);
    std::vector<std::vector<int>> ranked;
    std::vector<int> targets;
    for (std::size_t q = 0; q < queries.rows; ++q) {
        ranked.push_back(eval::rank(queries.row(q), gallery));
        targets.push_back(static_cast<int>(rng.uniform_int(40)));
    }
    auto report = eval::recall_at_k(ranked, targets, {1, 2, 5, 10, 20, 40});
    double prev = -1.0;
    for (auto [k, r] : report.per_k) {
        CHECK(r >= prev);
        CHECK(r >= 0.0);
        CHECK(r <= 1.0);
        prev = r;
    }
}

TEST_CASE("empty K list produces an empty report", "[eval]") {
    std::vector<std::vector<int>> ranked{{0}};
    auto report = eval::recall_at_k(ranked, {0}, {});
    CHECK(report.per_k.empty());
    CHECK(report.n_queries == 1);
}

TEST_CASE("single query, single gallery item", "[eval]") {
    Matrix gallery = Matrix::from_rows({{0.3, 0.4}});
    Matrix queries = Matrix::from_rows({{0.6, 0.8}});
    auto ranked = std::vector<std::vector<int>>{eval::rank(queries.row(0), gallery)};
    CHECK(eval::recall_at_k(ranked, {0}, {1}).per_k.at(1) == 1.0);
    CHECK(eval::recall_oracle(queries, gallery, {0}, 1) == 1.0);
}

TEST_CASE("fast recall equals the brute-force oracle on random instances", "[eval]") {
    Rng rng(4);
    for (int instance = 0; instance < 50; ++instance) {
        const std::size_t n_gallery = 2 + rng.uniform_int(255);
        const std::size_t n_queries = 1 + rng.uniform_int(32);
        const std::size_t dim = 2 + rng.uniform_int(8);
        Matrix gallery = random_matrix(n_gallery, dim, rng);
        Matrix queries = random_matrix(n_queries, dim, rng);
        std::vector<std::vector<int>> ranked;
        std::vector<int> targets;
        for (std::size_t q = 0; q < n_queries; ++q) {
            ranked.push_back(eval::rank(queries.row(q), gallery));
            targets.push_back(static_cast<int>(rng.uniform_int(n_gallery)));
        }
        const int k = 1 + static_cast<int>(rng.uniform_int(50));
        auto report = eval::recall_at_k(ranked, targets, {k});
        const double oracle = eval::recall_oracle(queries, gallery, targets, k);
        REQUIRE(report.per_k.at(k) == oracle);
    }
}

TEST_CASE("any-valid recall dominates labeled recall", "[eval]") {
    Rng rng(5);
    Matrix gallery = random_matrix(30, 5, rng);
    Matrix queries = random_matrix(8, 5, rng);
    std::vector<std::vector<int>> ranked;
    std::vector<int> targets;
    std::vector<std::vector<int>> valid;
    for (std::size_t q = 0; q < queries.rows; ++q) {
        ranked.push_back(eval::rank(queries.row(q), gallery));
        const int t = static_cast<int>(rng.uniform_int(30));
        targets.push_back(t);
        valid.push_back({t, static_cast<int>(rng.uniform_int(30)),
                         static_cast<int>(rng.uniform_int(30))});
    }
    for (int k : {1, 5, 10}) {
        auto labeled = eval::recall_at_k(ranked, targets, {k});
        auto any = eval::recall_any_valid(ranked, valid, {k});
        CHECK(any.at(k) >= labeled.per_k.at(k));
    }
}
