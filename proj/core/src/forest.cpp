#include "fewflow/forest.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fewflow/rng.hpp"

namespace fewflow {

namespace {

struct Builder {
    const std::vector<std::vector<double>>& X;
    const std::vector<int>& y;
    std::size_t n_classes;
    std::size_t n_features;
    std::size_t features_per_split;
    std::optional<std::size_t> max_depth;
    Rng rng;
    Tree tree;

    double gini(const std::vector<std::size_t>& hist, std::size_t total) const {
        double g = 1.0;
        for (std::size_t c : hist) {
            double p = static_cast<double>(c) / static_cast<double>(total);
            g -= p * p;
        }
        return g;
    }

    std::vector<std::size_t> histogram(const std::vector<std::size_t>& idx) const {
        std::vector<std::size_t> h(n_classes, 0);
        for (std::size_t i : idx) h[static_cast<std::size_t>(y[i])]++;
        return h;
    }

    int make_leaf(const std::vector<std::size_t>& idx, std::size_t depth) {
        TreeNode leaf;
        leaf.histogram = histogram(idx);
        tree.nodes.push_back(std::move(leaf));
        tree.depth = std::max(tree.depth, depth);
        return static_cast<int>(tree.nodes.size()) - 1;
    }

    int build(std::vector<std::size_t> idx, std::size_t depth) {
        auto hist = histogram(idx);
        const std::size_t total = idx.size();
        const bool pure = std::count_if(hist.begin(), hist.end(),
                                        [](std::size_t c) { return c > 0; }) <= 1;
        if (pure || total < 2 || (max_depth && depth >= *max_depth)) {
            return make_leaf(idx, depth);
        }

        // random feature subset, then best Gini split over midpoint thresholds
        std::vector<std::size_t> feats(n_features);
        std::iota(feats.begin(), feats.end(), 0);
        for (std::size_t i = 0; i < features_per_split && i + 1 < feats.size(); ++i) {
            std::size_t j = i + static_cast<std::size_t>(rng() % (feats.size() - i));
            std::swap(feats[i], feats[j]);
        }
        feats.resize(std::min(features_per_split, feats.size()));

        const double parent_gini = gini(hist, total);
        double best_gain = 1e-12;  // require a strictly useful split
        int best_feat = -1;
        double best_thr = 0.0;

        std::vector<std::pair<double, int>> vals(total);
        for (std::size_t f : feats) {
            for (std::size_t i = 0; i < total; ++i) {
                vals[i] = {X[idx[i]][f], y[idx[i]]};
            }
            std::sort(vals.begin(), vals.end());
            std::vector<std::size_t> left(n_classes, 0);
            std::vector<std::size_t> right = hist;
            std::size_t nl = 0;
            for (std::size_t i = 0; i + 1 < total; ++i) {
                const std::size_t cls = static_cast<std::size_t>(vals[i].second);
                left[cls]++;
                right[cls]--;
                nl++;
                if (vals[i].first == vals[i + 1].first) continue;  // no midpoint here
                const std::size_t nr = total - nl;
                const double g = (static_cast<double>(nl) * gini(left, nl) +
                                  static_cast<double>(nr) * gini(right, nr)) /
                                 static_cast<double>(total);
                const double gain = parent_gini - g;
                if (gain > best_gain) {
                    best_gain = gain;
                    best_feat = static_cast<int>(f);
                    best_thr = 0.5 * (vals[i].first + vals[i + 1].first);
                }
            }
        }

        if (best_feat < 0) return make_leaf(idx, depth);  // nothing separable

        std::vector<std::size_t> li, ri;
        for (std::size_t i : idx) {
            (X[i][static_cast<std::size_t>(best_feat)] <= best_thr ? li : ri).push_back(i);
        }
        if (li.empty() || ri.empty()) return make_leaf(idx, depth);

        TreeNode node;
        node.feature = best_feat;
        node.threshold = best_thr;
        tree.nodes.push_back(node);
        const int self = static_cast<int>(tree.nodes.size()) - 1;
        const int l = build(std::move(li), depth + 1);
        const int r = build(std::move(ri), depth + 1);
        tree.nodes[static_cast<std::size_t>(self)].left = l;
        tree.nodes[static_cast<std::size_t>(self)].right = r;
        return self;
    }
};

}  // namespace

int Tree::predict_leaf(const std::vector<double>& x) const {
    int i = 0;
    while (nodes[static_cast<std::size_t>(i)].feature >= 0) {
        const TreeNode& n = nodes[static_cast<std::size_t>(i)];
        i = x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
    }
    return i;
}

int Tree::predict(const std::vector<double>& x) const {
    const TreeNode& leaf = nodes[static_cast<std::size_t>(predict_leaf(x))];
    std::size_t best = 0;
    for (std::size_t c = 1; c < leaf.histogram.size(); ++c) {
        if (leaf.histogram[c] > leaf.histogram[best]) best = c;
    }
    return static_cast<int>(best);
}

std::size_t Forest::node_count_total() const {
    std::size_t n = 0;
    for (const Tree& t : trees) n += t.nodes.size();
    return n;
}

double Forest::avg_depth() const {
    if (trees.empty()) return 0.0;
    double d = 0;
    for (const Tree& t : trees) d += static_cast<double>(t.depth);
    return d / static_cast<double>(trees.size());
}

Forest fit_forest(const std::vector<std::vector<double>>& X, const std::vector<int>& y,
                  const ForestConfig& cfg) {
    if (X.empty() || X.size() != y.size()) {
        throw DataError("fit_forest: empty input or feature/label size mismatch");
    }
    if (cfg.n_estimators < 1) throw ConfigError("fit_forest: n_estimators must be >= 1");
    const std::size_t n_features = X[0].size();
    int max_label = 0;
    for (int l : y) {
        if (l < 0) throw DataError("fit_forest: negative label");
        max_label = std::max(max_label, l);
    }

    Forest f;
    f.n_classes = static_cast<std::size_t>(max_label) + 1;
    const auto features_per_split = static_cast<std::size_t>(
        std::ceil(std::sqrt(static_cast<double>(n_features))));

    for (std::size_t t = 0; t < cfg.n_estimators; ++t) {
        Rng rng = make_rng(cfg.seed, 0xf0, t);
        std::vector<std::size_t> idx(X.size());
        if (cfg.bootstrap) {
            for (auto& i : idx) i = static_cast<std::size_t>(rng() % X.size());
        } else {
            std::iota(idx.begin(), idx.end(), 0);
        }
        Builder b{X, y, f.n_classes, n_features, features_per_split, cfg.max_depth,
                  make_rng(cfg.seed, 0xf1, t), Tree{}};
        b.build(std::move(idx), 0);
        f.trees.push_back(std::move(b.tree));
    }
    return f;
}

namespace {

int vote_argmax(const std::vector<std::size_t>& votes) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < votes.size(); ++c) {
        if (votes[c] > votes[best]) best = c;
    }
    return static_cast<int>(best);
}

}  // namespace

int forest_predict(const Forest& f, const std::vector<double>& x) {
    std::vector<std::size_t> votes(f.n_classes, 0);
    for (const Tree& t : f.trees) votes[static_cast<std::size_t>(t.predict(x))]++;
    return vote_argmax(votes);
}

int forest_predict_masked(const Forest& f, const std::vector<double>& x,
                          const std::vector<int>& allowed) {
    if (allowed.empty()) throw ContractError("forest_predict_masked: empty class mask");
    std::vector<std::size_t> votes(f.n_classes, 0);
    for (const Tree& t : f.trees) votes[static_cast<std::size_t>(t.predict(x))]++;
    std::vector<bool> ok(f.n_classes, false);
    for (int c : allowed) {
        if (c >= 0 && static_cast<std::size_t>(c) < f.n_classes) ok[static_cast<std::size_t>(c)] = true;
    }
    int best = -1;
    std::size_t best_votes = 0;
    for (std::size_t c = 0; c < f.n_classes; ++c) {
        if (!ok[c]) continue;
        if (best < 0 || votes[c] > best_votes) {
            best = static_cast<int>(c);
            best_votes = votes[c];
        }
    }
    return best;
}

ForestStats forest_stats(const Forest& f) {
    return ForestStats{f.node_count_total(), f.avg_depth()};
}

}  // namespace fewflow
