#include <cmath>

#include "doctest.h"
#include "fewflow/forest.hpp"
#include "fewflow/rng.hpp"

using namespace fewflow;

namespace {

// 2-feature XOR pattern, jittered
void xor_data(std::vector<std::vector<double>>& X, std::vector<int>& y, std::size_t n,
              std::uint64_t seed) {
    Rng rng = make_rng(seed);
    std::normal_distribution<double> g(0.0, 0.05);
    for (std::size_t i = 0; i < n; ++i) {
        double a = (rng() % 2) ? 1.0 : 0.0;
        double b = (rng() % 2) ? 1.0 : 0.0;
        X.push_back({a + g(rng), b + g(rng)});
        y.push_back(static_cast<int>(a) ^ static_cast<int>(b));
    }
}

}  // namespace

TEST_CASE("single-class data gives single-leaf trees of depth 0") {
    std::vector<std::vector<double>> X = {{1, 2}, {3, 4}, {5, 6}};
    std::vector<int> y = {0, 0, 0};
    ForestConfig cfg;
    cfg.n_estimators = 10;
    Forest f = fit_forest(X, y, cfg);
    for (const Tree& t : f.trees) {
        CHECK(t.nodes.size() == 1);
        CHECK(t.depth == 0);
        CHECK(t.predict({9, 9}) == 0);
    }
    auto st = forest_stats(f);
    CHECK(st.total_nodes == 10);
    CHECK(st.avg_depth == 0.0);
}

TEST_CASE("XOR data reaches 100% training accuracy unbounded") {
    std::vector<std::vector<double>> X;
    std::vector<int> y;
    xor_data(X, y, 200, 3);
    ForestConfig cfg;
    cfg.seed = 5;
    Forest f = fit_forest(X, y, cfg);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < X.size(); ++i) {
        if (forest_predict(f, X[i]) == y[i]) correct++;
    }
    CHECK(correct == X.size());
}

TEST_CASE("depth bounds are respected and sizes are monotone in the bound") {
    std::vector<std::vector<double>> X;
    std::vector<int> y;
    Rng rng = make_rng(11);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int i = 0; i < 400; ++i) {
        X.push_back({g(rng), g(rng), g(rng), g(rng)});
        y.push_back(static_cast<int>(rng() % 6));
    }

    double prev_depth = 0.0;
    for (auto bound : std::vector<std::optional<std::size_t>>{10, 30, std::nullopt}) {
        ForestConfig cfg;
        cfg.n_estimators = 20;
        cfg.max_depth = bound;
        cfg.seed = 7;
        Forest f = fit_forest(X, y, cfg);
        if (bound) {
            for (const Tree& t : f.trees) CHECK(t.depth <= *bound);
        }
        CHECK(f.avg_depth() >= prev_depth);
        prev_depth = f.avg_depth();
    }
}

TEST_CASE("depth bound property over random shallow configs") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::vector<std::vector<double>> X;
        std::vector<int> y;
        Rng rng = make_rng(seed, 21);
        std::normal_distribution<double> g(0.0, 1.0);
        for (int i = 0; i < 120; ++i) {
            X.push_back({g(rng), g(rng), g(rng)});
            y.push_back(static_cast<int>(rng() % 4));
        }
        std::size_t bound = 1 + seed % 6;
        ForestConfig cfg;
        cfg.n_estimators = 8;
        cfg.max_depth = bound;
        cfg.seed = seed;
        Forest f = fit_forest(X, y, cfg);
        for (const Tree& t : f.trees) CHECK(t.depth <= bound);
    }
}

TEST_CASE("majority vote and tie rules") {
    // three stump-free single-leaf trees with chosen histograms
    Forest f;
    f.n_classes = 3;
    auto leaf_tree = [](std::vector<std::size_t> hist) {
        Tree t;
        TreeNode n;
        n.histogram = std::move(hist);
        t.nodes.push_back(n);
        return t;
    };
    f.trees.push_back(leaf_tree({5, 0, 0}));  // votes 0
    f.trees.push_back(leaf_tree({5, 0, 0}));  // votes 0
    f.trees.push_back(leaf_tree({0, 9, 0}));  // votes 1
    CHECK(forest_predict(f, {0.0}) == 0);  // 2 vs 1

    Forest tie;
    tie.n_classes = 3;
    tie.trees.push_back(leaf_tree({1, 0, 0}));
    tie.trees.push_back(leaf_tree({0, 0, 7}));
    CHECK(forest_predict(tie, {0.0}) == 0);  // tie 1-1 -> lowest id

    // tie inside a leaf histogram -> lowest id
    Tree t = leaf_tree({3, 3, 0});
    CHECK(t.predict({0.0}) == 0);

    // masked voting
    CHECK(forest_predict_masked(f, {0.0}, {1, 2}) == 1);
    CHECK(forest_predict_masked(f, {0.0}, {2}) == 2);  // no votes -> lowest allowed
}

TEST_CASE("one root with two leaves counts (3, 1)") {
    std::vector<std::vector<double>> X = {{0.0}, {1.0}};
    std::vector<int> y = {0, 1};
    ForestConfig cfg;
    cfg.n_estimators = 1;
    cfg.bootstrap = false;
    Forest f = fit_forest(X, y, cfg);
    auto st = forest_stats(f);
    CHECK(st.total_nodes == 3);
    CHECK(st.avg_depth == 1.0);
}

TEST_CASE("forest fit is deterministic per seed") {
    std::vector<std::vector<double>> X;
    std::vector<int> y;
    xor_data(X, y, 100, 9);
    ForestConfig cfg;
    cfg.n_estimators = 5;
    cfg.seed = 31;
    Forest a = fit_forest(X, y, cfg);
    Forest b = fit_forest(X, y, cfg);
    REQUIRE(a.trees.size() == b.trees.size());
    for (std::size_t i = 0; i < a.trees.size(); ++i) {
        REQUIRE(a.trees[i].nodes.size() == b.trees[i].nodes.size());
        for (std::size_t j = 0; j < a.trees[i].nodes.size(); ++j) {
            CHECK(a.trees[i].nodes[j].feature == b.trees[i].nodes[j].feature);
            CHECK(a.trees[i].nodes[j].threshold == b.trees[i].nodes[j].threshold);
        }
    }
}
