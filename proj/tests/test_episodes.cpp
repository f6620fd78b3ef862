#include <cmath>
#include <set>

#include "doctest.h"
#include "fewflow/episodes.hpp"

using namespace fewflow;

namespace {

Dataset uniform_dataset(std::size_t n_classes, std::size_t per_class) {
    SynthConfig cfg;
    cfg.n_classes = n_classes;
    cfg.samples_per_class_max = per_class;
    cfg.imbalance_rho = 1.0;
    cfg.separability = 1.0;
    cfg.packets = 2;
    cfg.features = 2;
    cfg.seed = 99;
    return synth_generate(cfg);
}

SplitView full_view(const Dataset& d) {
    std::vector<std::size_t> all(d.samples.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    static std::vector<std::size_t> keep;  // SplitView::over copies indices into by_class
    keep = all;
    return SplitView::over(d, keep);
}

void check_episode_invariants(const Episode& ep, const Dataset& d) {
    CHECK(ep.support_idx.size() == ep.ways * ep.shots);
    CHECK(ep.query_idx.size() == ep.ways * ep.queries);

    // support/query identities disjoint
    std::set<std::size_t> support(ep.support_idx.begin(), ep.support_idx.end());
    CHECK(support.size() == ep.support_idx.size());
    for (std::size_t q : ep.query_idx) CHECK(support.count(q) == 0);

    // local labels are a bijection onto 0..N-1 and consistent with classes
    std::set<int> locals(ep.support_local.begin(), ep.support_local.end());
    CHECK(locals.size() == ep.ways);
    CHECK(*locals.begin() == 0);
    CHECK(*locals.rbegin() == static_cast<int>(ep.ways) - 1);
    for (std::size_t i = 0; i < ep.support_idx.size(); ++i) {
        CHECK(d.samples[ep.support_idx[i]].label == ep.classes[ep.support_local[i]]);
    }
    for (std::size_t i = 0; i < ep.query_idx.size(); ++i) {
        CHECK(d.samples[ep.query_idx[i]].label == ep.classes[ep.query_local[i]]);
    }

    // exact class balance
    std::map<int, std::size_t> s_count, q_count;
    for (int l : ep.support_local) s_count[l]++;
    for (int l : ep.query_local) q_count[l]++;
    for (std::size_t w = 0; w < ep.ways; ++w) {
        CHECK(s_count[static_cast<int>(w)] == ep.shots);
        CHECK(q_count[static_cast<int>(w)] == ep.queries);
    }
}

}  // namespace

TEST_CASE("episode size contract and disjointness") {
    Dataset d = uniform_dataset(4, 10);
    SplitView v = full_view(d);
    Rng rng = make_rng(1);
    Episode ep = sample_episode(v, 2, 1, 2, rng);
    CHECK(ep.support_idx.size() == 2);
    CHECK(ep.query_idx.size() == 4);
    check_episode_invariants(ep, d);
}

TEST_CASE("class with exactly S+Q samples is usable; one fewer errors") {
    Dataset d = uniform_dataset(3, 5);  // 5 per class
    SplitView v = full_view(d);
    Rng rng = make_rng(2);
    Episode ep = sample_episode(v, 3, 2, 3, rng);  // needs exactly 5
    check_episode_invariants(ep, d);

    Rng rng2 = make_rng(3);
    CHECK_THROWS_WITH_AS(sample_episode(v, 3, 2, 4, rng2), doctest::Contains("class"),
                         EpisodeError);
}

TEST_CASE("insufficient classes raise an episode error") {
    Dataset d = uniform_dataset(3, 8);
    SplitView v = full_view(d);
    Rng rng = make_rng(4);
    CHECK_THROWS_AS(sample_episode(v, 4, 1, 1, rng), EpisodeError);
}

TEST_CASE("episode stream yields exactly epochs*episodes_per_epoch deterministic episodes") {
    Dataset d = uniform_dataset(6, 12);
    SplitView v = full_view(d);

    EpisodeStreamConfig cfg;
    cfg.epochs = 200;
    cfg.episodes_per_epoch = 100;
    cfg.ways = 4;
    cfg.shots = 2;
    cfg.queries = 3;
    cfg.seed = 5;
    EpisodeStream stream(v, cfg);
    CHECK(stream.size() == 20000);

    EpisodeStream again(v, cfg);
    for (std::size_t i : {0ul, 123ul, 19999ul}) {
        Episode a = stream.at_flat(i);
        Episode b = again.at_flat(i);
        CHECK(a.support_idx == b.support_idx);
        CHECK(a.query_idx == b.query_idx);
        CHECK(a.classes == b.classes);
    }

    cfg.epochs = 0;
    EpisodeStream empty(v, cfg);
    CHECK(empty.size() == 0);
}

TEST_CASE("test episode batches are shared given a seed and sized by count") {
    Dataset d = uniform_dataset(8, 10);
    SplitView v = full_view(d);
    auto batch = test_episode_batch(v, 4, 2, 3, 50, 42);
    CHECK(batch.size() == 50);
    for (const auto& ep : batch) {
        CHECK(ep.ways == 4);
        check_episode_invariants(ep, d);
    }
    auto batch2 = test_episode_batch(v, 4, 2, 3, 50, 42);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        CHECK(batch[i].support_idx == batch2[i].support_idx);
        CHECK(batch[i].query_idx == batch2[i].query_idx);
    }

    // N = all classes: every episode uses every class
    auto degenerate = test_episode_batch(v, 8, 1, 1, 3, 1);
    for (const auto& ep : degenerate) {
        std::set<int> classes(ep.classes.begin(), ep.classes.end());
        CHECK(classes.size() == 8);
    }

    CHECK(test_episode_batch(v, 4, 2, 3, 0, 7).empty());
}

TEST_CASE("episode invariants hold over 10^4 sampled episodes") {
    Dataset d = uniform_dataset(10, 9);
    SplitView v = full_view(d);
    std::map<int, std::size_t> picked;
    const std::size_t trials = 10000;
    for (std::size_t t = 0; t < trials; ++t) {
        Rng rng = make_rng(7, t);
        Episode ep = sample_episode(v, 4, 2, 3, rng);
        // full invariant check is expensive; rotate through a subsample
        if (t % 97 == 0) check_episode_invariants(ep, d);
        CHECK(ep.support_idx.size() == 8);
        CHECK(ep.query_idx.size() == 12);
        std::set<std::size_t> s(ep.support_idx.begin(), ep.support_idx.end());
        bool disjoint = true;
        for (std::size_t q : ep.query_idx) disjoint = disjoint && s.count(q) == 0;
        CHECK(disjoint);
        for (int c : ep.classes) picked[c]++;
    }

    // class selection frequency within 3 sigma of the hypergeometric rate
    const double p = 4.0 / 10.0;
    const double sigma = std::sqrt(trials * p * (1 - p));
    for (const auto& [cls, n] : picked) {
        CHECK(std::abs(static_cast<double>(n) - trials * p) < 3.0 * sigma);
    }
}
