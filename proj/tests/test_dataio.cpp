#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "fewflow/dataio.hpp"
#include "fewflow/rng.hpp"

using namespace fewflow;

namespace {

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

Dataset tiny_dataset() {
    Dataset d;
    d.profile = DatasetProfile::generic(2, 2);
    auto push = [&](int label, std::vector<double> f, const std::string& id) {
        FlowSample s;
        s.label = label;
        s.features = std::move(f);
        s.flow_id = id;
        d.samples.push_back(std::move(s));
    };
    push(0, {1.5, -1.0, 0.25, 3.0}, "a");
    push(1, {0.1, 1.0, 0.0, 0.0}, "b");
    push(0, {2.0, -1.0, 1.0, -1.0}, "c");
    d.class_id_map = {{0, 0}, {1, 1}};
    d.rebuild_counts();
    return d;
}

}  // namespace

TEST_CASE("save/load round-trip is field-exact") {
    Dataset d = tiny_dataset();
    // a value that needs all 17 significant digits
    d.samples[0].features[0] = 0.1 + 0.2;
    std::string path = tmp_path("fewflow_roundtrip.csv");
    save_dataset(d, path);
    Dataset l = load_dataset(path, d.profile);
    REQUIRE(l.samples.size() == d.samples.size());
    for (std::size_t i = 0; i < d.samples.size(); ++i) {
        CHECK(l.samples[i].flow_id == d.samples[i].flow_id);
        CHECK(l.samples[i].label == d.samples[i].label);
        CHECK(l.samples[i].features == d.samples[i].features);  // bitwise
    }
    Dataset a = load_dataset_auto(path);
    CHECK(a.profile.packets == 2);
    CHECK(a.profile.features == 2);
}

TEST_CASE("load validates row arity and numeric fields with line numbers") {
    std::string path = tmp_path("fewflow_bad.csv");
    {
        std::ofstream out(path);
        out << "flow_id,label,f_0_0,f_0_1,f_1_0,f_1_1\n";
        out << "x,0,1,2,3,4\n";
        out << "y,1,1,2,3\n";  // one field short
    }
    CHECK_THROWS_WITH_AS(load_dataset(path, DatasetProfile::generic(2, 2)),
                         doctest::Contains("line 3"), DataError);
    {
        std::ofstream out(path);
        out << "flow_id,label,f_0_0,f_0_1,f_1_0,f_1_1\n";
        out << "x,0,1,2,zzz,4\n";
    }
    CHECK_THROWS_WITH_AS(load_dataset(path, DatasetProfile::generic(2, 2)),
                         doctest::Contains("line 2"), DataError);

    // 3 rows at P=2, F=2 -> 3 samples of shape 2x2
    {
        std::ofstream out(path);
        out << "flow_id,label,f_0_0,f_0_1,f_1_0,f_1_1\n";
        out << "x,7,1,2,3,4\ny,7,5,6,7,8\nz,9,9,10,11,12\n";
    }
    Dataset d = load_dataset(path, DatasetProfile::generic(2, 2));
    CHECK(d.samples.size() == 3);
    for (const auto& s : d.samples) CHECK(s.features.size() == 4);
    // dense relabeling reported: 7 -> 0, 9 -> 1
    CHECK(d.class_id_map.at(7) == 0);
    CHECK(d.class_id_map.at(9) == 1);
}

TEST_CASE("partition_by_popularity sorts by count with ascending-id ties") {
    Dataset d;
    d.profile = DatasetProfile::generic(1, 1);
    auto add_class = [&](int label, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            FlowSample s;
            s.label = label;
            s.features = {1.0};
            s.flow_id = std::to_string(label) + "-" + std::to_string(i);
            d.samples.push_back(std::move(s));
        }
    };
    add_class(0, 10);  // A
    add_class(1, 8);   // B
    add_class(2, 5);   // C
    add_class(3, 3);   // D
    d.rebuild_counts();

    ClassPartition p = partition_by_popularity(d, 2, 1, 1);
    CHECK(p.train_classes == std::vector<int>{0, 1});
    CHECK(p.val_classes == std::vector<int>{2});
    CHECK(p.test_classes == std::vector<int>{3});
    CHECK(p.train_idx.size() == 18);
    CHECK(p.val_idx.size() == 5);
    CHECK(p.test_idx.size() == 3);

    CHECK_THROWS_AS(partition_by_popularity(d, 2, 1, 0), ConfigError);
}

TEST_CASE("partition invariants hold over random datasets") {
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        Rng rng = make_rng(seed, 3);
        SynthConfig cfg;
        cfg.n_classes = 4 + rng() % 8;
        cfg.samples_per_class_max = 10 + rng() % 40;
        cfg.imbalance_rho = 1.0 + (rng() % 50) / 10.0;
        cfg.separability = 1.0;
        cfg.packets = 4;
        cfg.features = 2;
        cfg.seed = seed;
        Dataset d = synth_generate(cfg);
        std::size_t n_train = 1 + rng() % (cfg.n_classes - 2);
        std::size_t n_val = 1 + rng() % (cfg.n_classes - n_train - 1);
        std::size_t n_test = cfg.n_classes - n_train - n_val;
        ClassPartition p = partition_by_popularity(d, n_train, n_val, n_test);

        // class sets pairwise disjoint, union covers all classes
        std::set<int> all;
        for (int c : p.train_classes) all.insert(c);
        for (int c : p.val_classes) all.insert(c);
        for (int c : p.test_classes) all.insert(c);
        CHECK(all.size() == cfg.n_classes);
        CHECK(p.train_classes.size() + p.val_classes.size() + p.test_classes.size() ==
              cfg.n_classes);

        // every sample index in exactly one split
        CHECK(p.train_idx.size() + p.val_idx.size() + p.test_idx.size() == d.samples.size());

        // popularity ordering: min train popularity >= max val/test popularity
        std::size_t min_train = SIZE_MAX, max_rest = 0;
        for (int c : p.train_classes) min_train = std::min(min_train, d.class_counts.at(c));
        for (int c : p.val_classes) max_rest = std::max(max_rest, d.class_counts.at(c));
        for (int c : p.test_classes) max_rest = std::max(max_rest, d.class_counts.at(c));
        CHECK(min_train >= max_rest);
    }
}

TEST_CASE("monolithic split: 9:1 per class") {
    SynthConfig cfg;
    cfg.n_classes = 2;
    cfg.samples_per_class_max = 10;
    cfg.seed = 1;
    cfg.packets = 2;
    cfg.features = 2;
    Dataset d = synth_generate(cfg);
    REQUIRE(d.class_counts.at(0) == 10);

    std::vector<std::size_t> all(d.samples.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    MonolithicSplit ms = monolithic_split(d, all, 7);

    // class with 10 samples -> 9 fit + 1 val
    std::size_t val0 = 0, fit0 = 0;
    for (std::size_t i : ms.val_idx)
        if (d.samples[i].label == 0) val0++;
    for (std::size_t i : ms.fit_idx)
        if (d.samples[i].label == 0) fit0++;
    CHECK(val0 == 1);
    CHECK(fit0 == 9);

    // partition property
    std::set<std::size_t> seen(ms.fit_idx.begin(), ms.fit_idx.end());
    for (std::size_t i : ms.val_idx) CHECK(seen.insert(i).second);
    CHECK(seen.size() == d.samples.size());
}

TEST_CASE("monolithic split: class of 95 gives 86 fit + 9 val") {
    Dataset d;
    d.profile = DatasetProfile::generic(1, 1);
    for (int i = 0; i < 95; ++i) {
        FlowSample s;
        s.label = 0;
        s.features = {double(i)};
        s.flow_id = std::to_string(i);
        d.samples.push_back(std::move(s));
    }
    // second class so the dataset is non-degenerate
    for (int i = 0; i < 4; ++i) {
        FlowSample s;
        s.label = 1;
        s.features = {double(i)};
        s.flow_id = "b" + std::to_string(i);
        d.samples.push_back(std::move(s));
    }
    d.rebuild_counts();
    std::vector<std::size_t> all(d.samples.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    MonolithicSplit ms = monolithic_split(d, all, 0);
    std::size_t val0 = 0, fit0 = 0, val1 = 0;
    for (std::size_t i : ms.val_idx) d.samples[i].label == 0 ? val0++ : val1++;
    for (std::size_t i : ms.fit_idx)
        if (d.samples[i].label == 0) fit0++;
    CHECK(fit0 == 86);
    CHECK(val0 == 9);
    CHECK(val1 == 1);  // small classes still get one validation sample
}

TEST_CASE("monolithic split rejects singleton classes") {
    Dataset d;
    d.profile = DatasetProfile::generic(1, 1);
    FlowSample s;
    s.label = 0;
    s.features = {1.0};
    s.flow_id = "only";
    d.samples.push_back(s);
    d.rebuild_counts();
    CHECK_THROWS_AS(monolithic_split(d, {0}, 0), DataError);
}

TEST_CASE("imbalance rho") {
    CHECK(std::abs(imbalance_rho({{0, 8200}, {1, 1300}}) - 6.3) < 0.05);
    CHECK(imbalance_rho({{0, 1000000}, {1, 383}}) == doctest::Approx(2611.0).epsilon(0.001));
    CHECK(imbalance_rho({{0, 5}, {1, 5}, {2, 5}}) == 1.0);
}

TEST_CASE("normalization: population std, constant channels, padding inertia") {
    Dataset d;
    d.profile = DatasetProfile::generic(1, 2);
    auto push = [&](double a, double b, const std::string& id) {
        FlowSample s;
        s.label = 0;
        s.features = {a, b};
        s.flow_id = id;
        d.samples.push_back(std::move(s));
    };
    push(1.0, 7.0, "a");
    push(3.0, 7.0, "b");
    d.rebuild_counts();
    NormStats st = normalize_fit(d, {0, 1});
    CHECK(st.mean[0] == doctest::Approx(2.0));
    CHECK(st.stddev[0] == doctest::Approx(1.0));  // population std of {1,3}
    CHECK(st.stddev[1] == 1.0);                   // constant channel forced to 1

    FlowSample n = normalize_apply(st, d.samples[1], d.profile);
    CHECK(n.features[0] == doctest::Approx(1.0));
    CHECK(n.features[1] == doctest::Approx(0.0));  // centered constant

    // padding rows stay exactly zero
    Dataset dp;
    dp.profile = DatasetProfile::generic(2, 2);
    FlowSample s;
    s.label = 0;
    s.features = {5.0, 1.0, 0.0, 0.0};  // second packet row is padding
    s.flow_id = "p";
    dp.samples.push_back(s);
    FlowSample t = s;
    t.features = {9.0, -1.0, 0.0, 0.0};
    t.flow_id = "q";
    dp.samples.push_back(t);
    dp.rebuild_counts();
    NormStats st2 = normalize_fit(dp, {0, 1});
    FlowSample np = normalize_apply(st2, dp.samples[0], dp.profile);
    CHECK(np.features[2] == 0.0);
    CHECK(np.features[3] == 0.0);
}

TEST_CASE("synthetic generator class counts follow geometric decay") {
    auto counts = synth_class_counts(4, 100, 4.0);
    CHECK(counts == std::vector<std::size_t>{100, 63, 40, 25});

    SynthConfig cfg;
    cfg.n_classes = 3;
    cfg.samples_per_class_max = 30;
    cfg.imbalance_rho = 1.0;
    cfg.seed = 5;
    cfg.packets = 3;
    cfg.features = 2;
    Dataset d = synth_generate(cfg);
    for (const auto& [cls, n] : d.class_counts) CHECK(n == 30);
}

TEST_CASE("synthetic generator is deterministic per seed") {
    SynthConfig cfg;
    cfg.n_classes = 3;
    cfg.samples_per_class_max = 20;
    cfg.imbalance_rho = 2.0;
    cfg.separability = 3.0;
    cfg.seed = 11;
    Dataset a = synth_generate(cfg);
    Dataset b = synth_generate(cfg);
    REQUIRE(a.samples.size() == b.samples.size());
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        CHECK(a.samples[i].features == b.samples[i].features);  // bitwise
    }
}

namespace {

// leave-one-out 1-NN accuracy on raw features over `trials` random queries
double one_nn_accuracy(const Dataset& d, std::size_t trials, std::uint64_t seed) {
    Rng rng = make_rng(seed);
    std::size_t hits = 0;
    for (std::size_t t = 0; t < trials; ++t) {
        std::size_t q = rng() % d.samples.size();
        double best = 1e300;
        int best_label = -1;
        for (std::size_t i = 0; i < d.samples.size(); ++i) {
            if (i == q) continue;
            double dist = 0;
            for (std::size_t k = 0; k < d.samples[i].features.size(); ++k) {
                double diff = d.samples[i].features[k] - d.samples[q].features[k];
                dist += diff * diff;
            }
            if (dist < best) {
                best = dist;
                best_label = d.samples[i].label;
            }
        }
        if (best_label == d.samples[q].label) hits++;
    }
    return static_cast<double>(hits) / static_cast<double>(trials);
}

}  // namespace

TEST_CASE("separability controls 1-NN accuracy on raw features") {
    SynthConfig cfg;
    cfg.n_classes = 4;
    cfg.samples_per_class_max = 120;
    cfg.imbalance_rho = 1.0;
    cfg.packets = 10;
    cfg.features = 4;
    cfg.seed = 17;

    cfg.separability = 0.0;
    Dataset chance = synth_generate(cfg);
    double acc0 = one_nn_accuracy(chance, 1000, 3);
    CHECK(std::abs(acc0 - 0.25) < 0.05);  // chance for C=4

    cfg.separability = 10.0;
    Dataset sep = synth_generate(cfg);
    double acc10 = one_nn_accuracy(sep, 1000, 3);
    CHECK(acc10 > 0.95);
}
